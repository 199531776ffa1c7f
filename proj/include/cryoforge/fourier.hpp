#pragma once

// Frequency-space machinery: centered Hartley transforms, slice-lattice
// geometry, central-slice extraction, and the real-space projection oracle.
//
// Conventions (fixed project-wide):
//   - DC sits at grid index D/2 on every axis; D must be even.
//   - Frequencies are in cycles/pixel, components in [-0.5, 0.5).
//   - hartley_2d is normalized by 1/D per application, so it is self-inverse.
//   - hartley_3d is normalized 1/D forward and 1/D^2 inverse, so a central
//     slice of hartley_3d(V) equals hartley_2d of the projection of V with no
//     extra scale factor.

#include <array>
#include <cstdint>
#include <vector>

#include "cryoforge/common.hpp"
#include "cryoforge/volume.hpp"

namespace cryoforge {

// Row-major 3x3 matrix, just enough linear algebra for pose handling.
struct Mat3 {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Mat3 identity() { return {}; }

    std::array<double, 3> apply(const std::array<double, 3>& v) const {
        return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
                m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
                m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
    }

    Mat3 transposed() const {
        Mat3 t;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) t.m[i * 3 + j] = m[j * 3 + i];
        return t;
    }

    double det() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }
};

Mat3 rotation_from_quaternion(double w, double x, double y, double z);
Mat3 random_rotation(SplitMix64& rng);

// Frobenius norm of R^T R - I.
double orthonormality_error(const Mat3& r);

// Throws GeometryError (reporting the defect) unless R is a proper rotation.
void require_rotation(const Mat3& r, double tol = 1e-6);

// Real-valued frequency representation of a D x D image; DC at (D/2, D/2).
struct HartleyImage {
    int size = 0;
    double pixel_size = 1;
    std::vector<double> values;  // row-major (ky, kx)
};

// 3D Hartley grid, same layout as VoxelVolume.
struct HartleyVolume {
    int size = 0;
    double voxel_size = 1;
    std::vector<double> values;
};

// Per-pixel 3D frequency coordinates of a rotated central slice, plus the
// in-band mask |k| <= 0.5.
struct FrequencyLattice {
    int size = 0;
    std::vector<std::array<double, 3>> coords;  // cycles/pixel, image order
    std::vector<std::uint8_t> mask;
};

HartleyImage hartley_2d(const std::vector<double>& img, int d, double pixel_size);
std::vector<double> inverse_hartley_2d(const HartleyImage& h);

HartleyVolume hartley_3d(const VoxelVolume& v);
VoxelVolume inverse_hartley_3d(const HartleyVolume& h);

FrequencyLattice rotated_slice_coords(const Mat3& rotation, int d);

// Trilinear interpolation of the volume at each in-band lattice point;
// out-of-band pixels are exactly 0.
HartleyImage extract_slice(const HartleyVolume& vol, const FrequencyLattice& lattice);

// Rotate the volume by R via trilinear resampling (zero outside the grid) and
// sum along z. This is the real-space formation oracle paired with
// extract_slice by the Fourier slice theorem.
std::vector<double> real_project(const VoxelVolume& v, const Mat3& rotation);

// Hartley-domain translation: the returned image is the input shifted by -t
// in real space (centering a particle at offset t).
HartleyImage phase_shift_center(const HartleyImage& img, double tx, double ty);

}  // namespace cryoforge
