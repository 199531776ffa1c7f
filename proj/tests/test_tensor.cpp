#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "cryoforge/checkpoint.hpp"
#include "cryoforge/tensor.hpp"

using namespace cryoforge;

namespace {

using T = Tensor<double>;

T randt(Shape shape, SplitMix64& rng, double scale = 1.0, double shift = 0.0) {
    std::vector<double> d(shape_numel(shape));
    for (auto& v : d) v = rng.normal() * scale + shift;
    return T::from_data(std::move(shape), std::move(d));
}

double check(const std::function<T(const T&)>& f, const T& x, double tol = 1e-4) {
    auto res = grad_check<double>(f, x, 1e-4);
    CHECK(res.max_rel_err < tol);
    return res.max_rel_err;
}

}  // namespace

TEST_CASE("forward shapes and values") {
    SplitMix64 rng(1);
    auto a = randt({2, 3}, rng);
    auto b = randt({3, 4}, rng);
    auto c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 4});

    auto s = softmax_lastdim(T::full({4}, 1.7));
    for (double v : s.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

    CHECK(gelu(T::scalar(0.0)).item() == 0.0);

    // manual matmul spot check
    auto m1 = T::from_data({2, 2}, {1, 2, 3, 4});
    auto m2 = T::from_data({2, 2}, {5, 6, 7, 8});
    auto mm = matmul(m1, m2);
    CHECK(mm.data() == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("shape errors name the op and extents") {
    SplitMix64 rng(2);
    auto a = randt({2, 3}, rng);
    auto b = randt({4, 2}, rng);
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("matmul"), ShapeError);
    CHECK_THROWS_WITH_AS(add(randt({2, 3}, rng), randt({2, 4}, rng)), doctest::Contains("[2,3]"),
                         ShapeError);
    CHECK_THROWS_AS(reshape(a, {7}), ShapeError);
    CHECK_THROWS_AS(slice(a, 1, 2, 5), ShapeError);
    CHECK_THROWS_AS(bmm(randt({2, 3, 4}, rng), randt({2, 5, 6}, rng)), ShapeError);
}

TEST_CASE("backward basics") {
    auto x = T::from_data({1}, {3.0}, true);
    auto loss = sum_all(mul(x, x));
    loss.backward();
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-14));

    auto y = T::from_data({5}, {1, 2, 3, 4, 5}, true);
    sum_all(y).backward();
    for (double g : y.grad()) CHECK(g == 1.0);

    CHECK_THROWS_AS(y.backward(), ContractViolation);  // non-scalar loss
}

TEST_CASE("fan-out accumulates additively") {
    auto x = T::from_data({3}, {1, 2, 3}, true);
    auto y = add(mul(x, x), x);  // x used twice
    sum_all(y).backward();
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(x.grad()[i] == doctest::Approx(2 * x.data()[i] + 1).epsilon(1e-14));
}

TEST_CASE("per-op gradients match central differences") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        SplitMix64 rng(seed);
        auto x = randt({3, 4}, rng);
        auto y = randt({3, 4}, rng, 1.0, 0.1);
        auto v = randt({4}, rng);

        check([&](const T& t) { return sum_all(mul(add(t, y), t)); }, x);
        check([&](const T& t) { return sum_all(mul(sub(t, y), y)); }, x);
        check([&](const T& t) { return sum_all(div(y, add_scalar(mul(t, t), 1.0))); }, x);
        check([&](const T& t) { return sum_all(add(t, v)); }, x);          // broadcast suffix
        check([&](const T& t) { return sum_all(mul(y, add(t, v))); }, x);  // b-side broadcast
        check([&](const T& t) { return mean_all(mul_scalar(t, 2.5)); }, x);
        check([&](const T& t) { return sum_all(gelu(t)); }, x);
        check([&](const T& t) { return sum_all(cryoforge::sin(t)); }, x);
        check([&](const T& t) { return sum_all(cryoforge::cos(t)); }, x);
        check([&](const T& t) { return sum_all(cryoforge::sqrt(add_scalar(mul(t, t), 1.0))); }, x);
        check([&](const T& t) { return sum_all(mul(y, softmax_lastdim(t))); }, x);
        check([&](const T& t) { return sum_all(mul(y, layer_norm_lastdim(t))); }, x, 2e-4);
        check([&](const T& t) { return sum_all(mul(reshape(t, {4, 3}), reshape(y, {4, 3}))); }, x);
        check([&](const T& t) { return sum_all(mul(permute(t, {1, 0}), reshape(y, {4, 3}))); }, x);
        check([&](const T& t) { return sum_all(slice(t, 1, 1, 2)); }, x);
        check([&](const T& t) { return sum_all(mul(concat<double>({t, y}, 0), concat<double>({y, t}, 0))); }, x);
        check([&](const T& t) { return sum_all(mul(sum_axis(t, 0), v)); }, x);
        check([&](const T& t) { return sum_all(mean_axis(t, 1, true)); }, x);
        check([&](const T& t) { return sum_all(l2_norm_axis(t, 0)); }, x);
        check([&](const T& t) { return sum_all(mul(y, scatter_lastdim(slice(t, 1, 0, 2), {1, 3}, 4))); }, x);

        // relu off the kink
        auto xr = randt({3, 4}, rng, 1.0, 0.0);
        for (auto& vv : xr.data_mut())
            if (std::abs(vv) < 0.05) vv = 0.1;
        check([&](const T& t) { return sum_all(relu(t)); }, xr);

        // matmul / bmm, each operand
        auto a = randt({3, 4}, rng);
        auto b = randt({4, 2}, rng);
        check([&](const T& t) { return sum_all(mul(matmul(t, b), matmul(t, b))); }, a);
        check([&](const T& t) { return sum_all(matmul(a, t)); }, b);
        auto ba = randt({2, 3, 4}, rng);
        auto bb = randt({2, 4, 5}, rng);
        check([&](const T& t) { return sum_all(bmm(t, bb)); }, ba);
        check([&](const T& t) { return sum_all(bmm(ba, t)); }, bb);
        auto bbt = randt({2, 5, 4}, rng);
        check([&](const T& t) { return sum_all(bmm(t, bbt, false, true)); }, ba);
        check([&](const T& t) { return sum_all(bmm(ba, t, false, true)); }, bbt);
        auto bat = randt({2, 4, 3}, rng);
        check([&](const T& t) { return sum_all(bmm(t, bb, true, false)); }, bat);
        check([&](const T& t) { return sum_all(bmm(bat, t, true, false)); }, bb);
        check([&](const T& t) { return sum_all(bmm(t, bbt, true, true)); }, bat);
        check([&](const T& t) { return sum_all(bmm(bat, t, true, true)); }, bbt);
    }
}

TEST_CASE("layer_norm then sum matches finite differences") {
    SplitMix64 rng(11);
    auto x = randt({4, 8}, rng, 2.0);
    auto res = grad_check<double>(
        [](const T& t) { return sum_all(mul(layer_norm_lastdim(t), layer_norm_lastdim(t))); }, x,
        1e-4);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("grad_check instrument") {
    auto x = T::from_data({1}, {3.0});
    auto res = grad_check<double>([](const T& t) { return sum_all(mul(t, t)); }, x, 1e-4);
    CHECK(res.max_rel_err < 1e-6);
    CHECK_FALSE(res.nondifferentiable);

    // ReLU evaluated exactly at 0 flags the kink
    auto z = T::from_data({2}, {0.0, 1.0});
    auto res2 = grad_check<double>([](const T& t) { return sum_all(relu(t)); }, z, 1e-4);
    CHECK(res2.nondifferentiable);

    CHECK_THROWS_AS(
        grad_check<double>([](const T& t) { return sum_all(t); }, x, 0.0), ConfigError);
    CHECK_THROWS_AS(
        grad_check<double>([](const T& t) { return add_scalar(t, 1.0); }, T::from_data({2}, {1, 2}),
                          1e-4),
        ContractViolation);
}

TEST_CASE("backward linearity") {
    SplitMix64 rng(3);
    auto x0 = randt({6}, rng);
    const double a = 0.37, b = -1.91;

    auto run = [&](double ca, double cb) {
        auto x = T::from_data(x0.shape(), x0.data(), true);
        auto f = sum_all(mul(x, x));
        auto g = sum_all(cryoforge::sin(x));
        auto loss = add(mul_scalar(f, ca), mul_scalar(g, cb));
        loss.backward();
        return x.grad();
    };
    auto gab = run(a, b);
    auto gf = run(1.0, 0.0);
    auto gg = run(0.0, 1.0);
    for (std::size_t i = 0; i < gab.size(); ++i)
        CHECK(std::abs(gab[i] - (a * gf[i] + b * gg[i])) < 1e-10);
}

TEST_CASE("determinism: identical seeds give bit-identical results") {
    auto run = [] {
        SplitMix64 rng(99);
        auto x = randt({8, 8}, rng);
        x.set_requires_grad(true);
        auto y = sum_all(mul(softmax_lastdim(matmul(x, x)), gelu(x)));
        y.backward();
        return std::make_pair(y.item(), x.grad());
    };
    auto [y1, g1] = run();
    auto [y2, g2] = run();
    CHECK(y1 == y2);
    CHECK(g1 == g2);
}

TEST_CASE("grad never aliases data and is shaped like it") {
    SplitMix64 rng(4);
    auto x = randt({3, 5}, rng);
    x.set_requires_grad(true);
    sum_all(x).backward();
    CHECK(x.grad().size() == x.data().size());
    CHECK(x.grad().data() != x.data().data());
}

TEST_CASE("checkpoint round-trip") {
    namespace fs = std::filesystem;
    const auto path = (fs::temp_directory_path() / "cryoforge_ckpt_test.cfts").string();
    SplitMix64 rng(5);
    std::vector<NamedArray<double>> arrays;
    arrays.push_back({"inr.theta1", {3, 4}, std::vector<double>(12)});
    arrays.push_back({"wtok.0", {7}, std::vector<double>(7)});
    for (auto& a : arrays)
        for (auto& v : a.data) v = rng.normal();
    save_checkpoint(path, arrays);
    auto back = load_checkpoint<double>(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].name == "inr.theta1");
    CHECK(back[0].shape == Shape{3, 4});
    CHECK(back[0].data == arrays[0].data);
    CHECK(back[1].data == arrays[1].data);

    // f32 payload read back as double
    std::vector<NamedArray<float>> f32;
    f32.push_back({"x", {2}, {1.5f, -2.25f}});
    save_checkpoint(path, f32);
    auto asd = load_checkpoint<double>(path);
    CHECK(asd[0].data == std::vector<double>{1.5, -2.25});

    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fwrite("BAD!", 1, 4, f);
    std::fclose(f);
    CHECK_THROWS_AS(load_checkpoint<double>(path), FormatError);
    fs::remove(path);
}
