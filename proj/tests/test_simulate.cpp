#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cryoforge/simulate.hpp"

using namespace cryoforge;
namespace fs = std::filesystem;

namespace {

std::vector<VoxelVolume> make_phantoms(int count, int d, std::uint64_t seed0) {
    std::vector<VoxelVolume> out;
    for (int i = 0; i < count; ++i) {
        PhantomSpec spec;
        spec.seed = seed0 + i;
        out.push_back(generate_phantom(spec, d));
    }
    return out;
}

}  // namespace

TEST_CASE("sample_pose: orthonormal, centered, uniform in the mean") {
    SplitMix64 rng(1);
    double mean[9] = {0};
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        auto p = sample_pose(rng, 0);
        CHECK(p.tx == 0.0);
        CHECK(p.ty == 0.0);
        if (i < 100) CHECK(orthonormality_error(p.rotation) < 1e-12);
        for (int j = 0; j < 9; ++j) mean[j] += p.rotation.m[j];
    }
    for (double m : mean) CHECK(std::abs(m / n) < 0.02);

    auto pt = sample_pose(rng, 2.5);
    CHECK(std::abs(pt.tx) <= 2.5);
    CHECK(std::abs(pt.ty) <= 2.5);
}

TEST_CASE("ctf formula") {
    CtfParams p;
    p.amp_contrast = 0.1;
    CHECK(ctf_value(p, 0, 0) == -0.1);

    // first on-axis zero of chi for w = 0: chi(s) = pi lam z s^2 - (pi/2) cs lam^3 s^4
    CtfParams q;
    q.amp_contrast = 0;
    q.defocus_u = q.defocus_v = 15000;
    const double volts = q.voltage * 1000;
    const double lam = 12.2639 / std::sqrt(volts + 0.97845e-6 * volts * volts);
    const double s2 = 2.0 * 15000 / (q.cs * 1e7 * lam * lam);
    CHECK(std::abs(ctf_value(q, std::sqrt(s2), 0)) < 1e-9);

    // astigmatism-free CTF depends only on |s|
    CtfParams r;
    r.defocus_u = r.defocus_v = 12000;
    r.astig_angle = 0.7;
    auto vals = ctf_evaluate(r, 32, 1.5);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            CHECK(vals[std::size_t(y) * 32 + x] ==
                  doctest::Approx(vals[std::size_t(x) * 32 + y]).epsilon(1e-12));

    CtfParams bad;
    bad.defocus_u = 1000;
    bad.defocus_v = 2000;
    CHECK_THROWS_AS(ctf_evaluate(bad, 16, 1.0), ConfigError);
}

TEST_CASE("simulate: noiseless images equal clean CTF-filtered projections") {
    auto phantoms = make_phantoms(2, 16, 100);
    CtfRanges ranges;
    auto ds = simulate_dataset(phantoms, 3, std::numeric_limits<double>::infinity(), ranges, 7);
    REQUIRE(ds.count() == 6);

    for (std::size_t i = 0; i < ds.count(); ++i) {
        auto img = real_project(phantoms[ds.structure_id[i]], ds.poses[i].rotation);
        auto h = hartley_2d(img, 16, ds.pixel_size);
        auto ctf = ctf_evaluate(ds.ctfs[i], 16, ds.pixel_size);
        for (std::size_t j = 0; j < h.values.size(); ++j) h.values[j] *= ctf[j];
        auto clean = inverse_hartley_2d(h);
        for (std::size_t j = 0; j < clean.size(); ++j)
            CHECK(ds.image(i)[j] == doctest::Approx(clean[j]).epsilon(1e-5));
    }
}

TEST_CASE("simulate: measured SNR within 10% of target") {
    auto phantoms = make_phantoms(2, 32, 50);
    CtfRanges ranges;
    for (double target : {0.1, 0.01}) {
        auto noisy = simulate_dataset(phantoms, 40, target, ranges, 11);
        auto clean = simulate_dataset(phantoms, 40, std::numeric_limits<double>::infinity(),
                                      ranges, 11);
        double cs = 0, cs2 = 0, ns2 = 0, nsum = 0;
        const std::size_t n = noisy.images.size();
        for (std::size_t i = 0; i < n; ++i) {
            cs += clean.images[i];
            cs2 += double(clean.images[i]) * clean.images[i];
            const double d = double(noisy.images[i]) - clean.images[i];
            nsum += d;
            ns2 += d * d;
        }
        const double var_clean = cs2 / n - (cs / n) * (cs / n);
        const double var_noise = ns2 / n - (nsum / n) * (nsum / n);
        const double measured = var_clean / var_noise;
        CHECK(measured == doctest::Approx(target).epsilon(0.10));
    }
}

TEST_CASE("simulate: determinism and label integrity across the shuffle") {
    auto phantoms = make_phantoms(3, 16, 200);
    CtfRanges ranges;
    ranges.enabled = false;
    auto a = simulate_dataset(phantoms, 5, std::numeric_limits<double>::infinity(), ranges, 99);
    auto b = simulate_dataset(phantoms, 5, std::numeric_limits<double>::infinity(), ranges, 99);
    CHECK(a.images == b.images);
    CHECK(a.structure_id == b.structure_id);

    // a shuffled image is still the projection of the phantom its label claims
    int per_label[3] = {0, 0, 0};
    for (std::size_t i = 0; i < a.count(); ++i) {
        ++per_label[a.structure_id[i]];
        auto img = real_project(phantoms[a.structure_id[i]], a.poses[i].rotation);
        for (std::size_t j = 0; j < img.size(); ++j)
            CHECK(a.image(i)[j] == doctest::Approx(img[j]).epsilon(1e-5));
    }
    for (int c : per_label) CHECK(c == 5);
}

TEST_CASE("backproject: exact slice insertion at identity pose") {
    auto phantoms = make_phantoms(1, 16, 300);
    CtfRanges ranges;
    ranges.enabled = false;
    auto ds = simulate_dataset(phantoms, 1, std::numeric_limits<double>::infinity(), ranges, 5);
    ds.poses[0].rotation = Mat3::identity();
    // refresh the image for the identity pose
    auto img = real_project(phantoms[0], ds.poses[0].rotation);
    for (std::size_t j = 0; j < img.size(); ++j) ds.images[j] = static_cast<float>(img[j]);

    auto acc = backproject_accumulate(ds, {0});
    std::vector<double> stored(ds.image(0), ds.image(0) + img.size());
    auto h = hartley_2d(stored, 16, ds.pixel_size);
    auto lat = rotated_slice_coords(Mat3::identity(), 16);
    const int d = 16, c = 8;
    for (int y = 0; y < d; ++y)
        for (int x = 0; x < d; ++x) {
            if (!lat.mask[std::size_t(y) * d + x]) continue;
            const std::size_t o = (std::size_t(c) * d + y) * d + x;
            CHECK(acc.numerator[o] == h.values[std::size_t(y) * d + x]);
            CHECK(acc.denominator[o] == 1.0);
        }
}

TEST_CASE("backproject: order independence and finiteness") {
    auto phantoms = make_phantoms(1, 16, 400);
    CtfRanges ranges;
    auto ds = simulate_dataset(phantoms, 24, 0.5, ranges, 21);
    std::vector<std::size_t> fwd(ds.count()), rev;
    for (std::size_t i = 0; i < ds.count(); ++i) fwd[i] = i;
    rev.assign(fwd.rbegin(), fwd.rend());
    auto va = backproject(ds, fwd);
    auto vb = backproject(ds, rev);
    float peak = 0;
    for (float v : va.values) peak = std::max(peak, std::abs(v));
    for (std::size_t i = 0; i < va.values.size(); ++i) {
        CHECK(std::isfinite(va.values[i]));
        CHECK(std::abs(va.values[i] - vb.values[i]) <= 1e-6 * peak);
    }

    auto acc = backproject_accumulate(ds, fwd);
    for (double v : acc.denominator) CHECK(v >= 0.0);
    CHECK_THROWS_AS(backproject(ds, {}), ConfigError);
}

TEST_CASE("backproject: many noiseless views reconstruct the phantom") {
    auto phantoms = make_phantoms(1, 32, 500);
    CtfRanges ranges;
    ranges.enabled = false;
    auto ds = simulate_dataset(phantoms, 200, std::numeric_limits<double>::infinity(), ranges, 31);
    std::vector<std::size_t> all(ds.count());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    auto rec = backproject(ds, all);
    // real-space correlation against ground truth
    double sxy = 0, sxx = 0, syy = 0, sx = 0, sy = 0;
    const double n = static_cast<double>(rec.values.size());
    for (std::size_t i = 0; i < rec.values.size(); ++i) {
        const double a = phantoms[0].values[i], b = rec.values[i];
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    const double corr =
        (sxy - sx * sy / n) / std::sqrt((sxx - sx * sx / n) * (syy - sy * sy / n));
    CHECK(corr > 0.95);
}

TEST_CASE("dataset save/load round trip") {
    auto phantoms = make_phantoms(2, 16, 600);
    CtfRanges ranges;
    PhantomSpec s0;
    s0.seed = 600;
    PhantomSpec s1;
    s1.seed = 601;
    auto ds = simulate_dataset(phantoms, 4, 0.25, ranges, 77);
    ds.phantom_specs = {s0, s1};
    const auto dir = (fs::temp_directory_path() / "cryoforge_ds_test").string();
    save_dataset(ds, dir);
    auto back = load_dataset(dir);
    CHECK(back.images == ds.images);
    CHECK(back.structure_id == ds.structure_id);
    CHECK(back.snr == ds.snr);
    CHECK(back.ctf_enabled == ds.ctf_enabled);
    CHECK(back.phantom_specs.size() == 2);
    CHECK(back.phantom_specs[1].seed == 601);
    for (std::size_t i = 0; i < ds.count(); ++i) {
        for (int j = 0; j < 9; ++j) CHECK(back.poses[i].rotation.m[j] == ds.poses[i].rotation.m[j]);
        CHECK(back.ctfs[i].defocus_u == ds.ctfs[i].defocus_u);
        CHECK(back.ctfs[i].astig_angle == ds.ctfs[i].astig_angle);
    }
    fs::remove_all(dir);
}
