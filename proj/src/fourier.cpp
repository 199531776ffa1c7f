#include "cryoforge/fourier.hpp"

#include <fftw3.h>

#include <complex>
#include <cmath>
#include <cstring>
#include <map>
#include <mutex>
#include <sstream>

namespace cryoforge {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

// The multidimensional Hartley transform is Re - Im of the complex DFT.
// (FFTW's FFTW_DHT r2r kind computes the separable product of 1D DHTs, which
// is a different transform, so a c2c DFT is used instead.)
//
// Plans are cached per dimension list and created with FFTW_UNALIGNED so the
// new-array execute interface works with ordinary buffers. Plan creation is
// serialized; execution is thread-safe on distinct buffers.
fftw_plan dft_plan(const std::vector<int>& dims) {
    static std::mutex mu;
    static std::map<std::vector<int>, fftw_plan> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(dims);
    if (it != cache.end()) return it->second;
    std::size_t n = 1;
    for (int d : dims) n *= static_cast<std::size_t>(d);
    std::vector<std::complex<double>> in(n), out(n);
    fftw_plan p = fftw_plan_dft(static_cast<int>(dims.size()), dims.data(),
                                reinterpret_cast<fftw_complex*>(in.data()),
                                reinterpret_cast<fftw_complex*>(out.data()), FFTW_FORWARD,
                                FFTW_ESTIMATE | FFTW_UNALIGNED);
    if (!p) throw NumericError("fftw: failed to create DFT plan");
    cache.emplace(dims, p);
    return p;
}

// Hartley transform of a real array: H = Re(F) - Im(F) of the forward DFT.
std::vector<double> dht(const std::vector<double>& in, const std::vector<int>& dims) {
    const std::size_t n = in.size();
    std::vector<std::complex<double>> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) a[i] = in[i];
    fftw_execute_dft(dft_plan(dims), reinterpret_cast<fftw_complex*>(a.data()),
                     reinterpret_cast<fftw_complex*>(b.data()));
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = b[i].real() - b[i].imag();
    return out;
}

void require_even(int d, const char* op) {
    if (d < 2 || d % 2 != 0)
        throw ShapeError(std::string(op) + ": unsupported size " + std::to_string(d) +
                         " (even sizes only)");
}

// Swap half-spaces on every axis (self-inverse for even sizes).
void fftshift_2d(const double* in, double* out, int d) {
    const int c = d / 2;
    for (int y = 0; y < d; ++y) {
        const int ys = (y + c) % d;
        const double* src = in + static_cast<std::size_t>(y) * d;
        double* dst = out + static_cast<std::size_t>(ys) * d;
        std::memcpy(dst + c, src, sizeof(double) * c);
        std::memcpy(dst, src + c, sizeof(double) * c);
    }
}

void fftshift_3d(const double* in, double* out, int d) {
    const int c = d / 2;
    for (int z = 0; z < d; ++z) {
        const int zs = (z + c) % d;
        for (int y = 0; y < d; ++y) {
            const int ys = (y + c) % d;
            const double* src = in + (static_cast<std::size_t>(z) * d + y) * d;
            double* dst = out + (static_cast<std::size_t>(zs) * d + ys) * d;
            std::memcpy(dst + c, src, sizeof(double) * c);
            std::memcpy(dst, src + c, sizeof(double) * c);
        }
    }
}

std::vector<double> centered_dht_2d(const std::vector<double>& in, int d, double scale) {
    std::vector<double> a(in.size());
    fftshift_2d(in.data(), a.data(), d);
    auto b = dht(a, {d, d});
    fftshift_2d(b.data(), a.data(), d);
    for (auto& v : a) v *= scale;
    return a;
}

std::vector<double> centered_dht_3d(const std::vector<double>& in, int d, double scale) {
    std::vector<double> a(in.size());
    fftshift_3d(in.data(), a.data(), d);
    auto b = dht(a, {d, d, d});
    fftshift_3d(b.data(), a.data(), d);
    for (auto& v : a) v *= scale;
    return a;
}

}  // namespace

Mat3 rotation_from_quaternion(double w, double x, double y, double z) {
    const double n = std::sqrt(w * w + x * x + y * y + z * z);
    w /= n;
    x /= n;
    y /= n;
    z /= n;
    Mat3 r;
    r.m = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
           2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
           2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
    return r;
}

Mat3 random_rotation(SplitMix64& rng) {
    // Shoemake's method: uniform unit quaternion from three uniforms.
    const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
    const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
    return rotation_from_quaternion(a * std::sin(kTwoPi * u2), a * std::cos(kTwoPi * u2),
                                    b * std::sin(kTwoPi * u3), b * std::cos(kTwoPi * u3));
}

double orthonormality_error(const Mat3& r) {
    const Mat3 rt = r.transposed();
    double err = 0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += rt.m[i * 3 + k] * r.m[k * 3 + j];
            const double d = s - (i == j ? 1.0 : 0.0);
            err += d * d;
        }
    return std::sqrt(err);
}

void require_rotation(const Mat3& r, double tol) {
    const double err = orthonormality_error(r);
    if (err > tol) {
        std::ostringstream os;
        os << "rotation check failed: ||R^T R - I|| = " << err;
        throw GeometryError(os.str());
    }
    if (std::abs(r.det() - 1.0) > 1e-6)
        throw GeometryError("rotation check failed: det(R) = " + std::to_string(r.det()));
}

HartleyImage hartley_2d(const std::vector<double>& img, int d, double pixel_size) {
    require_even(d, "hartley_2d");
    if (img.size() != static_cast<std::size_t>(d) * d)
        throw ShapeError("hartley_2d: image size mismatch");
    HartleyImage h;
    h.size = d;
    h.pixel_size = pixel_size;
    h.values = centered_dht_2d(img, d, 1.0 / d);
    return h;
}

std::vector<double> inverse_hartley_2d(const HartleyImage& h) {
    require_even(h.size, "inverse_hartley_2d");
    return centered_dht_2d(h.values, h.size, 1.0 / h.size);
}

HartleyVolume hartley_3d(const VoxelVolume& v) {
    require_even(v.size, "hartley_3d");
    std::vector<double> in(v.values.begin(), v.values.end());
    HartleyVolume h;
    h.size = v.size;
    h.voxel_size = v.voxel_size;
    h.values = centered_dht_3d(in, v.size, 1.0 / v.size);
    return h;
}

VoxelVolume inverse_hartley_3d(const HartleyVolume& h) {
    require_even(h.size, "inverse_hartley_3d");
    const double d = h.size;
    auto real = centered_dht_3d(h.values, h.size, 1.0 / (d * d));
    VoxelVolume v;
    v.size = h.size;
    v.voxel_size = h.voxel_size;
    v.values.assign(real.begin(), real.end());
    return v;
}

FrequencyLattice rotated_slice_coords(const Mat3& rotation, int d) {
    require_even(d, "rotated_slice_coords");
    require_rotation(rotation);
    FrequencyLattice lat;
    lat.size = d;
    lat.coords.resize(static_cast<std::size_t>(d) * d);
    lat.mask.resize(lat.coords.size());
    const int c = d / 2;
    for (int y = 0; y < d; ++y)
        for (int x = 0; x < d; ++x) {
            const double kx = static_cast<double>(x - c) / d;
            const double ky = static_cast<double>(y - c) / d;
            const std::size_t i = static_cast<std::size_t>(y) * d + x;
            lat.coords[i] = rotation.apply({kx, ky, 0.0});
            lat.mask[i] = kx * kx + ky * ky <= 0.25 ? 1 : 0;
        }
    return lat;
}

HartleyImage extract_slice(const HartleyVolume& vol, const FrequencyLattice& lattice) {
    if (vol.size != lattice.size)
        throw ShapeError("extract_slice: volume D=" + std::to_string(vol.size) +
                         " vs lattice D=" + std::to_string(lattice.size));
    const int d = vol.size;
    const int c = d / 2;
    HartleyImage out;
    out.size = d;
    out.pixel_size = vol.voxel_size;
    out.values.assign(static_cast<std::size_t>(d) * d, 0.0);
    const double* hv = vol.values.data();
    for (std::size_t i = 0; i < lattice.coords.size(); ++i) {
        if (!lattice.mask[i]) continue;
        const auto& k = lattice.coords[i];
        // grid position; in-band points satisfy 0 <= g <= D, wrap at D
        const double gx = k[0] * d + c, gy = k[1] * d + c, gz = k[2] * d + c;
        const int x0 = static_cast<int>(std::floor(gx));
        const int y0 = static_cast<int>(std::floor(gy));
        const int z0 = static_cast<int>(std::floor(gz));
        const double fx = gx - x0, fy = gy - y0, fz = gz - z0;
        double acc = 0;
        for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                    const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                    if (w == 0) continue;
                    const int xi = ((x0 + dx) % d + d) % d;
                    const int yi = ((y0 + dy) % d + d) % d;
                    const int zi = ((z0 + dz) % d + d) % d;
                    acc += w * hv[(static_cast<std::size_t>(zi) * d + yi) * d + xi];
                }
        out.values[i] = acc;
    }
    return out;
}

std::vector<double> real_project(const VoxelVolume& v, const Mat3& rotation) {
    require_even(v.size, "real_project");
    require_rotation(rotation);
    const int d = v.size;
    const int c = d / 2;
    std::vector<double> img(static_cast<std::size_t>(d) * d, 0.0);
    const float* vv = v.values.data();
#pragma omp parallel for schedule(static)
    for (int y = 0; y < d; ++y) {
        for (int x = 0; x < d; ++x) {
            double acc = 0;
            for (int z = 0; z < d; ++z) {
                const auto p = rotation.apply({static_cast<double>(x - c),
                                               static_cast<double>(y - c),
                                               static_cast<double>(z - c)});
                const double gx = p[0] + c, gy = p[1] + c, gz = p[2] + c;
                if (gx < -1 || gx > d || gy < -1 || gy > d || gz < -1 || gz > d) continue;
                const int x0 = static_cast<int>(std::floor(gx));
                const int y0 = static_cast<int>(std::floor(gy));
                const int z0 = static_cast<int>(std::floor(gz));
                const double fx = gx - x0, fy = gy - y0, fz = gz - z0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const int xi = x0 + dx, yi = y0 + dy, zi = z0 + dz;
                            if (xi < 0 || xi >= d || yi < 0 || yi >= d || zi < 0 || zi >= d)
                                continue;
                            const double w =
                                (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                            acc += w * vv[(static_cast<std::size_t>(zi) * d + yi) * d + xi];
                        }
            }
            img[static_cast<std::size_t>(y) * d + x] = acc;
        }
    }
    return img;
}

HartleyImage phase_shift_center(const HartleyImage& img, double tx, double ty) {
    const int d = img.size;
    require_even(d, "phase_shift_center");
    const int c = d / 2;
    // real-space shift by s = -t:  H'(k) = H(k) cos(2 pi k.s) + H(-k) sin(2 pi k.s)
    const double sx = -tx, sy = -ty;
    HartleyImage out;
    out.size = d;
    out.pixel_size = img.pixel_size;
    out.values.resize(img.values.size());
    const double* in = img.values.data();
    for (int y = 0; y < d; ++y) {
        const double ky = static_cast<double>(y - c) / d;
        const int yn = (d - y) % d;
        for (int x = 0; x < d; ++x) {
            const double kx = static_cast<double>(x - c) / d;
            const int xn = (d - x) % d;
            const double th = kTwoPi * (kx * sx + ky * sy);
            out.values[static_cast<std::size_t>(y) * d + x] =
                in[static_cast<std::size_t>(y) * d + x] * std::cos(th) +
                in[static_cast<std::size_t>(yn) * d + xn] * std::sin(th);
        }
    }
    return out;
}

}  // namespace cryoforge
