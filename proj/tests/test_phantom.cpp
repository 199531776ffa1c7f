#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>

#include "cryoforge/phantom.hpp"

using namespace cryoforge;
namespace fs = std::filesystem;

TEST_CASE("generation is deterministic") {
    PhantomSpec spec;
    spec.seed = 1234;
    auto a = generate_phantom(spec, 32);
    auto b = generate_phantom(spec, 32);
    CHECK(a.values == b.values);
}

TEST_CASE("support contained in radius 0.35 D, peak is 1") {
    PhantomSpec spec;
    spec.seed = 77;
    spec.n_blobs = 40;
    const int d = 32;
    auto v = generate_phantom(spec, d);
    const int c = d / 2;
    const double r2max = 0.35 * d * 0.35 * d;
    float peak = 0;
    for (int z = 0; z < d; ++z)
        for (int y = 0; y < d; ++y)
            for (int x = 0; x < d; ++x) {
                const double r2 = double(x - c) * (x - c) + double(y - c) * (y - c) +
                                  double(z - c) * (z - c);
                const float val = v.at(z, y, x);
                peak = std::max(peak, val);
                if (r2 > r2max) CHECK(val == 0.0f);
                CHECK(val >= 0.0f);
            }
    CHECK(peak == 1.0f);
}

TEST_CASE("single centered isotropic blob is axis-permutation symmetric") {
    PhantomSpec spec;
    spec.seed = 5;
    spec.n_blobs = 1;
    spec.sigma_min = spec.sigma_max = 2.0;
    const int d = 16;
    auto v = generate_phantom(spec, d);
    double max_dev = 0;
    for (int z = 0; z < d; ++z)
        for (int y = 0; y < d; ++y)
            for (int x = 0; x < d; ++x) {
                max_dev = std::max(max_dev, double(std::abs(v.at(z, y, x) - v.at(x, y, z))));
                max_dev = std::max(max_dev, double(std::abs(v.at(z, y, x) - v.at(y, z, x))));
            }
    CHECK(max_dev < 1e-6);
}

TEST_CASE("spec validation") {
    PhantomSpec spec;
    spec.n_blobs = 0;
    CHECK_THROWS_AS(validate(spec), ConfigError);
    spec.n_blobs = 41;
    CHECK_THROWS_AS(validate(spec), ConfigError);
    spec = {};
    spec.sigma_max = 4.5;
    CHECK_THROWS_AS(validate(spec), ConfigError);
    spec = {};
    spec.amplitude_min = 0.2;
    CHECK_THROWS_AS(validate(spec), ConfigError);
    spec = {};
    spec.connectivity_bias = 1.5;
    CHECK_THROWS_AS(validate(spec), ConfigError);
    spec = {};
    CHECK_THROWS_AS(generate_phantom(spec, 15), ConfigError);
    CHECK_THROWS_AS(generate_phantom(spec, 8), ConfigError);
}

TEST_CASE("distinct seeds give distinct supports (vIoU < 0.9 at 0.2)") {
    SplitMix64 seeder(2024);
    const int d = 32;
    const float thr = 0.2f;
    int distinct = 0;
    const int pairs = 100;
    for (int p = 0; p < pairs; ++p) {
        PhantomSpec sa, sb;
        sa.seed = seeder.next_u64();
        sb.seed = seeder.next_u64();
        auto va = generate_phantom(sa, d);
        auto vb = generate_phantom(sb, d);
        std::size_t inter = 0, uni = 0;
        for (std::size_t i = 0; i < va.values.size(); ++i) {
            const bool a = va.values[i] > thr, b = vb.values[i] > thr;
            inter += a && b;
            uni += a || b;
        }
        const double viou = uni ? double(inter) / uni : 0.0;
        if (viou < 0.9) ++distinct;
    }
    CHECK(distinct >= 95);
}

TEST_CASE("mrc round-trip is bit-identical and header is well-formed") {
    PhantomSpec spec;
    spec.seed = 9;
    auto v = generate_phantom(spec, 16, 1.5);
    const auto path = (fs::temp_directory_path() / "cryoforge_phantom.mrc").string();
    write_mrc(v, path);
    auto back = read_mrc(path);
    CHECK(back.size == 16);
    CHECK(back.voxel_size == doctest::Approx(1.5).epsilon(1e-6));
    CHECK(std::memcmp(back.values.data(), v.values.data(), v.values.size() * 4) == 0);

    std::FILE* f = std::fopen(path.c_str(), "rb");
    char hdr[1024];
    REQUIRE(std::fread(hdr, 1, 1024, f) == 1024);
    std::fclose(f);
    std::int32_t nx, mode;
    float cell;
    std::memcpy(&nx, hdr, 4);
    std::memcpy(&mode, hdr + 12, 4);
    std::memcpy(&cell, hdr + 40, 4);
    CHECK(nx == 16);
    CHECK(mode == 2);
    CHECK(cell == doctest::Approx(16 * 1.5f));
    CHECK(std::memcmp(hdr + 208, "MAP ", 4) == 0);
    CHECK(static_cast<unsigned char>(hdr[212]) == 0x44);

    // mode-1 (int16) files are rejected with an explicit message
    std::int32_t one = 1;
    std::memcpy(hdr + 12, &one, 4);
    f = std::fopen(path.c_str(), "wb");
    std::fwrite(hdr, 1, 1024, f);
    std::fclose(f);
    CHECK_THROWS_WITH_AS(read_mrc(path), doctest::Contains("MODE 1"), FormatError);
    fs::remove(path);
}

TEST_CASE("mrc stack round-trip") {
    const int n = 3, d = 8;
    std::vector<float> imgs(n * d * d);
    SplitMix64 rng(4);
    for (auto& v : imgs) v = static_cast<float>(rng.normal());
    const auto path = (fs::temp_directory_path() / "cryoforge_stack.mrcs").string();
    write_mrc_stack(imgs, n, d, 2.0, path);
    auto s = read_mrc_stack(path);
    CHECK(s.count == n);
    CHECK(s.size == d);
    CHECK(s.pixel_size == doctest::Approx(2.0));
    CHECK(s.images == imgs);
    fs::remove(path);
}
