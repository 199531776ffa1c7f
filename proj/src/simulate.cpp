#include "cryoforge/simulate.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace cryoforge {

namespace {

constexpr double kPi = 3.14159265358979323846;

// electron wavelength in Angstrom, acceleration voltage in volts
double wavelength(double volts) { return 12.2639 / std::sqrt(volts + 0.97845e-6 * volts * volts); }

std::string fmt_g17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

Pose sample_pose(SplitMix64& rng, double t_max) {
    Pose p;
    p.rotation = random_rotation(rng);
    if (t_max > 0) {
        p.tx = rng.uniform(-t_max, t_max);
        p.ty = rng.uniform(-t_max, t_max);
    }
    return p;
}

double ctf_value(const CtfParams& p, double sx, double sy) {
    const double s2 = sx * sx + sy * sy;
    const double lam = wavelength(p.voltage * 1000.0);
    const double theta = std::atan2(sy, sx);
    const double z = 0.5 * (p.defocus_u + p.defocus_v) +
                     0.5 * (p.defocus_u - p.defocus_v) * std::cos(2.0 * (theta - p.astig_angle));
    const double cs_a = p.cs * 1e7;  // mm -> Angstrom
    const double chi =
        kPi * lam * z * s2 - 0.5 * kPi * cs_a * lam * lam * lam * s2 * s2 + p.phase_shift;
    const double w = p.amp_contrast;
    double v = -(std::sqrt(1.0 - w * w) * std::sin(chi) + w * std::cos(chi));
    if (p.b_factor != 0) v *= std::exp(-p.b_factor * s2 / 4.0);
    return v;
}

std::vector<double> ctf_evaluate(const CtfParams& p, int d, double pixel_size) {
    if (p.defocus_u < p.defocus_v)
        throw ConfigError("ctf: defocus_u must be >= defocus_v");
    std::vector<double> out(static_cast<std::size_t>(d) * d);
    const int c = d / 2;
    for (int y = 0; y < d; ++y)
        for (int x = 0; x < d; ++x) {
            const double sx = (x - c) / (d * pixel_size);
            const double sy = (y - c) / (d * pixel_size);
            out[static_cast<std::size_t>(y) * d + x] = ctf_value(p, sx, sy);
        }
    return out;
}

CtfParams sample_ctf(const CtfRanges& r, SplitMix64& rng) {
    CtfParams p;
    double d1 = rng.uniform(r.defocus_min, r.defocus_max);
    double d2 = rng.uniform(r.defocus_min, r.defocus_max);
    p.defocus_u = std::max(d1, d2);
    p.defocus_v = std::min(d1, d2);
    p.astig_angle = rng.uniform(0.0, kPi);
    p.voltage = r.voltage;
    p.cs = r.cs;
    p.amp_contrast = r.amp_contrast;
    p.phase_shift = r.phase_shift;
    p.b_factor = r.b_factor;
    return p;
}

ParticleDataset simulate_dataset(const std::vector<VoxelVolume>& phantoms, int n_per, double snr,
                                 const CtfRanges& ranges, std::uint64_t seed, double pixel_size,
                                 double t_max) {
    if (phantoms.empty()) throw ConfigError("simulate: no phantoms");
    if (n_per < 1) throw ConfigError("simulate: n_per must be >= 1");
    if (!(snr > 0)) throw ConfigError("simulate: snr must be positive (inf for noiseless)");
    const int d = phantoms[0].size;
    for (const auto& v : phantoms)
        if (v.size != d)
            throw ShapeError("simulate: phantom sizes differ, " + std::to_string(v.size) + " vs " +
                             std::to_string(d));

    const int s_count = static_cast<int>(phantoms.size());
    const std::size_t n_total = static_cast<std::size_t>(s_count) * n_per;
    const std::size_t px = static_cast<std::size_t>(d) * d;

    ParticleDataset ds;
    ds.size = d;
    ds.pixel_size = pixel_size;
    ds.snr = snr;
    ds.t_max = t_max;
    ds.ctf_enabled = ranges.enabled;
    ds.seed = seed;
    ds.n_per_structure = n_per;
    ds.poses.resize(n_total);
    ds.ctfs.resize(n_total);
    ds.structure_id.resize(n_total);

    SplitMix64 master(seed);
    std::vector<double> clean(n_total * px);
    for (int s = 0; s < s_count; ++s) {
        const std::ptrdiff_t n_per_p = n_per;
#pragma omp parallel for schedule(dynamic)
        for (std::ptrdiff_t j = 0; j < n_per_p; ++j) {
            const std::size_t idx = static_cast<std::size_t>(s) * n_per + j;
            SplitMix64 stream = master.fork(idx);
            Pose pose = sample_pose(stream, t_max);
            CtfParams ctf = sample_ctf(ranges, stream);
            ds.poses[idx] = pose;
            ds.ctfs[idx] = ctf;
            ds.structure_id[idx] = s;

            auto img = real_project(phantoms[s], pose.rotation);
            auto h = hartley_2d(img, d, pixel_size);
            if (pose.tx != 0 || pose.ty != 0) h = phase_shift_center(h, -pose.tx, -pose.ty);
            if (ranges.enabled) {
                auto c = ctf_evaluate(ctf, d, pixel_size);
                for (std::size_t i = 0; i < px; ++i) h.values[i] *= c[i];
            }
            auto filtered = inverse_hartley_2d(h);
            std::copy(filtered.begin(), filtered.end(), clean.begin() + idx * px);
        }
    }

    double sigma = 0;
    if (std::isfinite(snr)) {
        double sum = 0, sum2 = 0;
        for (double v : clean) {
            sum += v;
            sum2 += v * v;
        }
        const double mean = sum / clean.size();
        const double var = sum2 / clean.size() - mean * mean;
        sigma = std::sqrt(var / snr);
    }

    ds.images.resize(n_total * px);
    for (std::size_t idx = 0; idx < n_total; ++idx) {
        SplitMix64 noise = master.fork(n_total + idx);
        float* out = ds.images.data() + idx * px;
        const double* in = clean.data() + idx * px;
        for (std::size_t i = 0; i < px; ++i)
            out[i] = static_cast<float>(sigma > 0 ? in[i] + sigma * noise.normal() : in[i]);
    }

    // seeded shuffle; labels travel with their images
    SplitMix64 shuffler = master.fork(2 * n_total + 1);
    std::vector<std::size_t> perm(n_total);
    for (std::size_t i = 0; i < n_total; ++i) perm[i] = i;
    for (std::size_t i = n_total; i-- > 1;)
        std::swap(perm[i], perm[shuffler.uniform_int(i + 1)]);

    ParticleDataset out = ds;
    for (std::size_t i = 0; i < n_total; ++i) {
        const std::size_t src = perm[i];
        out.poses[i] = ds.poses[src];
        out.ctfs[i] = ds.ctfs[src];
        out.structure_id[i] = ds.structure_id[src];
        std::memcpy(out.images.data() + i * px, ds.images.data() + src * px, px * sizeof(float));
    }
    return out;
}

BackprojectAccum backproject_accumulate(const ParticleDataset& ds,
                                        const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ConfigError("backproject: empty image selection");
    const int d = ds.size;
    const int c = d / 2;
    BackprojectAccum acc;
    acc.size = d;
    acc.numerator.assign(static_cast<std::size_t>(d) * d * d, 0.0);
    acc.denominator.assign(acc.numerator.size(), 0.0);
    const std::size_t px = static_cast<std::size_t>(d) * d;

    for (std::size_t idx : indices) {
        if (idx >= ds.count()) throw ConfigError("backproject: image index out of range");
        std::vector<double> img(ds.image(idx), ds.image(idx) + px);
        auto h = hartley_2d(img, d, ds.pixel_size);
        const auto& pose = ds.poses[idx];
        if (pose.tx != 0 || pose.ty != 0) h = phase_shift_center(h, pose.tx, pose.ty);
        std::vector<double> ctf;
        if (ds.ctf_enabled) ctf = ctf_evaluate(ds.ctfs[idx], d, ds.pixel_size);
        auto lat = rotated_slice_coords(pose.rotation, d);
        for (std::size_t i = 0; i < px; ++i) {
            if (!lat.mask[i]) continue;
            const double cv = ds.ctf_enabled ? ctf[i] : 1.0;
            const double val = cv * h.values[i];
            const auto& k = lat.coords[i];
            const double gx = k[0] * d + c, gy = k[1] * d + c, gz = k[2] * d + c;
            const int x0 = static_cast<int>(std::floor(gx));
            const int y0 = static_cast<int>(std::floor(gy));
            const int z0 = static_cast<int>(std::floor(gz));
            const double fx = gx - x0, fy = gy - y0, fz = gz - z0;
            for (int dz = 0; dz < 2; ++dz)
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const double w =
                            (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                        if (w == 0) continue;
                        const int xi = ((x0 + dx) % d + d) % d;
                        const int yi = ((y0 + dy) % d + d) % d;
                        const int zi = ((z0 + dz) % d + d) % d;
                        const std::size_t o = (static_cast<std::size_t>(zi) * d + yi) * d + xi;
                        acc.numerator[o] += w * val;
                        acc.denominator[o] += w * cv * cv;
                    }
        }
    }
    return acc;
}

VoxelVolume backproject(const ParticleDataset& ds, const std::vector<std::size_t>& indices) {
    auto acc = backproject_accumulate(ds, indices);
    double dmax = 0;
    for (double v : acc.denominator) dmax = std::max(dmax, v);
    const double eps = 1e-2 * dmax;
    HartleyVolume h;
    h.size = acc.size;
    h.voxel_size = ds.pixel_size;
    h.values.resize(acc.numerator.size());
    for (std::size_t i = 0; i < h.values.size(); ++i)
        h.values[i] = acc.numerator[i] / (acc.denominator[i] + eps);
    return inverse_hartley_3d(h);
}

void save_dataset(const ParticleDataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    write_mrc_stack(ds.images, static_cast<int>(ds.count()), ds.size, ds.pixel_size,
                    (fs::path(dir) / "stack.mrcs").string());

    std::ofstream csv(fs::path(dir) / "meta.csv");
    if (!csv) throw IoError("dataset: cannot write meta.csv in " + dir);
    csv << "index,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,defocus_u,defocus_v,astig_angle,"
           "voltage,cs,amp_contrast,phase_shift,b_factor,structure_id\n";
    for (std::size_t i = 0; i < ds.count(); ++i) {
        const auto& p = ds.poses[i];
        const auto& t = ds.ctfs[i];
        csv << i;
        for (double m : p.rotation.m) csv << ',' << fmt_g17(m);
        csv << ',' << fmt_g17(p.tx) << ',' << fmt_g17(p.ty) << ',' << fmt_g17(t.defocus_u) << ','
            << fmt_g17(t.defocus_v) << ',' << fmt_g17(t.astig_angle) << ',' << fmt_g17(t.voltage)
            << ',' << fmt_g17(t.cs) << ',' << fmt_g17(t.amp_contrast) << ','
            << fmt_g17(t.phase_shift) << ',' << fmt_g17(t.b_factor) << ',' << ds.structure_id[i]
            << '\n';
    }
    csv.close();

    nlohmann::json man;
    man["size"] = ds.size;
    man["pixel_size"] = ds.pixel_size;
    man["snr"] = std::isfinite(ds.snr) ? nlohmann::json(ds.snr) : nlohmann::json("inf");
    man["t_max"] = ds.t_max;
    man["ctf_enabled"] = ds.ctf_enabled;
    man["seed"] = ds.seed;
    man["n_per_structure"] = ds.n_per_structure;
    man["n_structures"] = ds.n_structures();
    man["files"] = {{"stack", "stack.mrcs"}, {"meta", "meta.csv"}};
    nlohmann::json specs = nlohmann::json::array();
    for (const auto& s : ds.phantom_specs)
        specs.push_back({{"seed", s.seed},
                         {"n_blobs", s.n_blobs},
                         {"sigma_min", s.sigma_min},
                         {"sigma_max", s.sigma_max},
                         {"amplitude_min", s.amplitude_min},
                         {"amplitude_max", s.amplitude_max},
                         {"connectivity_bias", s.connectivity_bias}});
    man["phantoms"] = specs;
    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw IoError("dataset: cannot write manifest.json in " + dir);
    mf << man.dump(2) << '\n';
}

ParticleDataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const auto man_path = fs::path(dir) / "manifest.json";
    std::ifstream mf(man_path);
    if (!mf) throw IoError("dataset: missing manifest.json in " + dir);
    nlohmann::json man;
    try {
        mf >> man;
    } catch (const std::exception& e) {
        throw FormatError("dataset: bad manifest.json: " + std::string(e.what()));
    }

    ParticleDataset ds;
    ds.size = man.at("size").get<int>();
    ds.pixel_size = man.at("pixel_size").get<double>();
    ds.snr = man.at("snr").is_string() ? std::numeric_limits<double>::infinity()
                                       : man.at("snr").get<double>();
    ds.t_max = man.value("t_max", 0.0);
    ds.ctf_enabled = man.at("ctf_enabled").get<bool>();
    ds.seed = man.at("seed").get<std::uint64_t>();
    ds.n_per_structure = man.value("n_per_structure", 0);
    for (const auto& s : man.at("phantoms")) {
        PhantomSpec ps;
        ps.seed = s.at("seed").get<std::uint64_t>();
        ps.n_blobs = s.at("n_blobs").get<int>();
        ps.sigma_min = s.at("sigma_min").get<double>();
        ps.sigma_max = s.at("sigma_max").get<double>();
        ps.amplitude_min = s.at("amplitude_min").get<double>();
        ps.amplitude_max = s.at("amplitude_max").get<double>();
        ps.connectivity_bias = s.at("connectivity_bias").get<double>();
        ds.phantom_specs.push_back(ps);
    }

    auto stack = read_mrc_stack((fs::path(dir) / man["files"].value("stack", "stack.mrcs")).string());
    if (stack.size != ds.size)
        throw FormatError("dataset: stack image size disagrees with manifest in " + dir);
    ds.images = std::move(stack.images);

    std::ifstream csv(fs::path(dir) / man["files"].value("meta", "meta.csv"));
    if (!csv) throw IoError("dataset: missing meta.csv in " + dir);
    std::string line;
    std::getline(csv, line);
    const std::string expect =
        "index,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,defocus_u,defocus_v,astig_angle,voltage,"
        "cs,amp_contrast,phase_shift,b_factor,structure_id";
    if (line != expect) throw FormatError("dataset: unexpected meta.csv header in " + dir);
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        std::vector<double> f;
        f.reserve(21);
        std::size_t pos = 0;
        while (pos <= line.size()) {
            const std::size_t comma = line.find(',', pos);
            const std::string tok =
                line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
            f.push_back(std::strtod(tok.c_str(), nullptr));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (f.size() != 21) throw FormatError("dataset: malformed meta.csv row in " + dir);
        Pose p;
        for (int i = 0; i < 9; ++i) p.rotation.m[i] = f[1 + i];
        p.tx = f[10];
        p.ty = f[11];
        CtfParams t;
        t.defocus_u = f[12];
        t.defocus_v = f[13];
        t.astig_angle = f[14];
        t.voltage = f[15];
        t.cs = f[16];
        t.amp_contrast = f[17];
        t.phase_shift = f[18];
        t.b_factor = f[19];
        ds.poses.push_back(p);
        ds.ctfs.push_back(t);
        ds.structure_id.push_back(static_cast<int>(f[20]));
    }
    if (ds.poses.size() * static_cast<std::size_t>(ds.size) * ds.size != ds.images.size())
        throw FormatError("dataset: meta.csv row count disagrees with stack in " + dir);
    return ds;
}

}  // namespace cryoforge
