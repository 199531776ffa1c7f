#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace cryoforge {

#ifdef CRYOFORGE_REAL_F64
using real_t = double;
inline constexpr const char* kPrecisionName = "f64";
#else
using real_t = float;
inline constexpr const char* kPrecisionName = "f32";
#endif

// Error taxonomy. The CLI maps these onto exit codes.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct GeometryError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ContractViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// SplitMix64: the repo-wide seeded generator. Counter-based (the state is a
// plain counter advanced by a fixed increment; each output is a hash of the
// counter), so streams are reproducible across platforms and trivially
// forkable per work item.
class SplitMix64 {
  public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

    // standard normal via Box-Muller (pairs cached)
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    // independent child stream for work item `id`
    SplitMix64 fork(std::uint64_t id) const {
        SplitMix64 h(state_ ^ (0xA0761D6478BD642Full + id * 0xE7037ED1A0B428DBull));
        h.next_u64();
        return h;
    }

  private:
    std::uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

// Thread budget for OpenMP kernels. All kernels partition work so that each
// output element is produced by exactly one thread with a fixed reduction
// order, so results do not depend on the thread count.
void set_num_threads(int n);
int num_threads();

}  // namespace cryoforge
