#include "cryoforge/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

namespace cryoforge {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

Vec3 random_unit(SplitMix64& rng) {
    for (;;) {
        Vec3 v{rng.normal(), rng.normal(), rng.normal()};
        const double n = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
        if (n > 1e-12) return {v.x / n, v.y / n, v.z / n};
    }
}

// 1024-byte MRC2014 header. Only the fields this project relies on are
// modeled; the rest stay zero.
#pragma pack(push, 1)
struct MrcHeader {
    std::int32_t nx = 0, ny = 0, nz = 0;
    std::int32_t mode = 2;
    std::int32_t nxstart = 0, nystart = 0, nzstart = 0;
    std::int32_t mx = 0, my = 0, mz = 0;
    float cella[3] = {0, 0, 0};
    float cellb[3] = {90, 90, 90};
    std::int32_t mapc = 1, mapr = 2, maps = 3;
    float dmin = 0, dmax = 0, dmean = 0;
    std::int32_t ispg = 1;
    std::int32_t nsymbt = 0;
    char extra[100] = {};
    float origin[3] = {0, 0, 0};
    char map[4] = {'M', 'A', 'P', ' '};
    unsigned char machst[4] = {0x44, 0x44, 0x00, 0x00};
    float rms = 0;
    std::int32_t nlabl = 0;
    char labels[800] = {};
};
#pragma pack(pop)
static_assert(sizeof(MrcHeader) == 1024);

void fill_stats(MrcHeader& h, const std::vector<float>& v) {
    if (v.empty()) return;
    double sum = 0, sum2 = 0;
    float mn = v[0], mx = v[0];
    for (float x : v) {
        mn = std::min(mn, x);
        mx = std::max(mx, x);
        sum += x;
        sum2 += double(x) * x;
    }
    h.dmin = mn;
    h.dmax = mx;
    h.dmean = static_cast<float>(sum / v.size());
    const double var = sum2 / v.size() - double(h.dmean) * h.dmean;
    h.rms = static_cast<float>(std::sqrt(std::max(0.0, var)));
}

MrcHeader read_header(std::FILE* f, const std::string& path) {
    MrcHeader h;
    if (std::fread(&h, 1, sizeof(h), f) != sizeof(h))
        throw FormatError("mrc: short header in " + path);
    if (std::memcmp(h.map, "MAP ", 4) != 0)
        throw FormatError("mrc: bad MAP magic at byte 208 in " + path);
    if (h.mode != 2)
        throw FormatError("mrc: unsupported MODE " + std::to_string(h.mode) + " in " + path +
                          " (only mode 2, float32)");
    if (h.nx <= 0 || h.ny <= 0 || h.nz <= 0)
        throw FormatError("mrc: non-positive NX/NY/NZ in " + path);
    return h;
}

std::vector<float> read_payload(std::FILE* f, const MrcHeader& h, const std::string& path) {
    if (h.nsymbt > 0) {
        if (std::fseek(f, h.nsymbt, SEEK_CUR) != 0)
            throw FormatError("mrc: bad NSYMBT in " + path);
    }
    const std::size_t n =
        static_cast<std::size_t>(h.nx) * static_cast<std::size_t>(h.ny) * static_cast<std::size_t>(h.nz);
    std::vector<float> data(n);
    if (std::fread(data.data(), sizeof(float), n, f) != n)
        throw FormatError("mrc: truncated data section in " + path);
    return data;
}

void write_file(const MrcHeader& h, const std::vector<float>& data, const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("mrc: cannot open " + path + " for writing");
    if (std::fwrite(&h, 1, sizeof(h), f.get()) != sizeof(h))
        throw IoError("mrc: short header write to " + path);
    if (std::fwrite(data.data(), sizeof(float), data.size(), f.get()) != data.size())
        throw IoError("mrc: short data write to " + path);
}

}  // namespace

void validate(const PhantomSpec& spec) {
    if (spec.n_blobs < 1 || spec.n_blobs > 40)
        throw ConfigError("phantom: n_blobs " + std::to_string(spec.n_blobs) +
                          " outside [1, 40]");
    if (spec.sigma_min < 1.5 || spec.sigma_max > 4.0 || spec.sigma_min > spec.sigma_max)
        throw ConfigError("phantom: sigma range [" + std::to_string(spec.sigma_min) + ", " +
                          std::to_string(spec.sigma_max) + "] outside [1.5, 4.0]");
    if (spec.amplitude_min < 0.5 || spec.amplitude_max > 1.0 ||
        spec.amplitude_min > spec.amplitude_max)
        throw ConfigError("phantom: amplitude range outside [0.5, 1.0]");
    if (spec.connectivity_bias < 0.0 || spec.connectivity_bias > 1.0)
        throw ConfigError("phantom: connectivity_bias outside [0, 1]");
}

VoxelVolume generate_phantom(const PhantomSpec& spec, int d, double voxel_size) {
    validate(spec);
    if (d < 16 || d % 2 != 0)
        throw ConfigError("phantom: D must be even and >= 16, got " + std::to_string(d));

    SplitMix64 rng(spec.seed);
    const double r_support = 0.35 * d;
    const double r_taper0 = 0.28 * d;
    const double r_centers = 0.22 * d;

    struct Blob {
        Vec3 pos;
        double sx, sy, sz, amp;
    };
    std::vector<Blob> blobs;
    blobs.reserve(spec.n_blobs);
    Vec3 pos{0, 0, 0};
    Vec3 dir = random_unit(rng);
    for (int i = 0; i < spec.n_blobs; ++i) {
        Blob b;
        b.pos = pos;
        b.sx = rng.uniform(spec.sigma_min, spec.sigma_max);
        b.sy = rng.uniform(spec.sigma_min, spec.sigma_max);
        b.sz = rng.uniform(spec.sigma_min, spec.sigma_max);
        b.amp = rng.uniform(spec.amplitude_min, spec.amplitude_max);
        blobs.push_back(b);

        const Vec3 u = random_unit(rng);
        const double cb = spec.connectivity_bias;
        Vec3 nd{cb * dir.x + (1 - cb) * u.x, cb * dir.y + (1 - cb) * u.y,
                cb * dir.z + (1 - cb) * u.z};
        const double nn = std::sqrt(nd.x * nd.x + nd.y * nd.y + nd.z * nd.z);
        if (nn > 1e-9) dir = {nd.x / nn, nd.y / nn, nd.z / nn};
        const double step = rng.uniform(2.5, 5.0) * (d / 32.0);
        pos = {pos.x + dir.x * step, pos.y + dir.y * step, pos.z + dir.z * step};
        const double pr = std::sqrt(pos.x * pos.x + pos.y * pos.y + pos.z * pos.z);
        if (pr > r_centers) {
            // fold back into the placement sphere and turn the walk inward
            const double s = r_centers / pr;
            pos = {pos.x * s, pos.y * s, pos.z * s};
            dir = {-pos.x / r_centers, -pos.y / r_centers, -pos.z / r_centers};
        }
    }

    const int c = d / 2;
    std::vector<double> grid(static_cast<std::size_t>(d) * d * d, 0.0);
    for (const auto& b : blobs) {
        const double reach = 4.0;
        const int x0 = std::max(0, static_cast<int>(std::floor(b.pos.x + c - reach * b.sx)));
        const int x1 = std::min(d - 1, static_cast<int>(std::ceil(b.pos.x + c + reach * b.sx)));
        const int y0 = std::max(0, static_cast<int>(std::floor(b.pos.y + c - reach * b.sy)));
        const int y1 = std::min(d - 1, static_cast<int>(std::ceil(b.pos.y + c + reach * b.sy)));
        const int z0 = std::max(0, static_cast<int>(std::floor(b.pos.z + c - reach * b.sz)));
        const int z1 = std::min(d - 1, static_cast<int>(std::ceil(b.pos.z + c + reach * b.sz)));
        const double ix = 1.0 / (2 * b.sx * b.sx);
        const double iy = 1.0 / (2 * b.sy * b.sy);
        const double iz = 1.0 / (2 * b.sz * b.sz);
        for (int z = z0; z <= z1; ++z) {
            const double dz = z - c - b.pos.z;
            for (int y = y0; y <= y1; ++y) {
                const double dy = y - c - b.pos.y;
                const double base = dz * dz * iz + dy * dy * iy;
                double* row = grid.data() + (static_cast<std::size_t>(z) * d + y) * d;
                for (int x = x0; x <= x1; ++x) {
                    const double dx = x - c - b.pos.x;
                    row[x] += b.amp * std::exp(-(base + dx * dx * ix));
                }
            }
        }
    }

    // radial taper: 1 below r_taper0, cos^2 ramp to 0 at r_support
    double peak = 0;
    for (int z = 0; z < d; ++z)
        for (int y = 0; y < d; ++y)
            for (int x = 0; x < d; ++x) {
                const double r = std::sqrt(double(x - c) * (x - c) + double(y - c) * (y - c) +
                                           double(z - c) * (z - c));
                auto& v = grid[(static_cast<std::size_t>(z) * d + y) * d + x];
                if (r >= r_support) {
                    v = 0;
                } else if (r > r_taper0) {
                    const double t = std::cos(0.5 * kPi * (r - r_taper0) / (r_support - r_taper0));
                    v *= t * t;
                }
                peak = std::max(peak, v);
            }

    VoxelVolume out;
    out.size = d;
    out.voxel_size = voxel_size;
    out.values.resize(grid.size());
    const double inv = peak > 0 ? 1.0 / peak : 1.0;
    for (std::size_t i = 0; i < grid.size(); ++i)
        out.values[i] = static_cast<float>(grid[i] * inv);
    return out;
}

void write_mrc(const VoxelVolume& v, const std::string& path) {
    for (float x : v.values)
        if (!std::isfinite(x)) throw NumericError("mrc: non-finite value in volume for " + path);
    MrcHeader h;
    h.nx = h.ny = h.nz = v.size;
    h.mx = h.my = h.mz = v.size;
    const float cell = static_cast<float>(v.size * v.voxel_size);
    h.cella[0] = h.cella[1] = h.cella[2] = cell;
    h.ispg = 1;
    fill_stats(h, v.values);
    write_file(h, v.values, path);
}

VoxelVolume read_mrc(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("mrc: cannot open " + path);
    const MrcHeader h = read_header(f.get(), path);
    if (h.nx != h.ny || h.ny != h.nz)
        throw FormatError("mrc: volume must be cubic, got " + std::to_string(h.nx) + "x" +
                          std::to_string(h.ny) + "x" + std::to_string(h.nz) + " in " + path);
    VoxelVolume v;
    v.size = h.nx;
    v.voxel_size = h.mx > 0 && h.cella[0] > 0 ? double(h.cella[0]) / h.mx : 1.0;
    v.values = read_payload(f.get(), h, path);
    return v;
}

void write_mrc_stack(const std::vector<float>& images, int n, int d, double pixel_size,
                     const std::string& path) {
    if (images.size() != static_cast<std::size_t>(n) * d * d)
        throw ShapeError("mrc stack: image buffer size mismatch");
    MrcHeader h;
    h.nx = h.ny = d;
    h.nz = n;
    h.mx = h.my = d;
    h.mz = n;
    h.cella[0] = h.cella[1] = static_cast<float>(d * pixel_size);
    h.cella[2] = static_cast<float>(n * pixel_size);
    h.ispg = 0;  // image stack
    fill_stats(h, images);
    write_file(h, images, path);
}

MrcStack read_mrc_stack(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("mrc: cannot open " + path);
    const MrcHeader h = read_header(f.get(), path);
    if (h.nx != h.ny) throw FormatError("mrc stack: images must be square in " + path);
    MrcStack s;
    s.count = h.nz;
    s.size = h.nx;
    s.pixel_size = h.mx > 0 && h.cella[0] > 0 ? double(h.cella[0]) / h.mx : 1.0;
    s.images = read_payload(f.get(), h, path);
    return s;
}

}  // namespace cryoforge
