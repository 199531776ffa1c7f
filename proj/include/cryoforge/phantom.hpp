#pragma once

// Procedural density structures (Gaussian-blob random walks) and MRC2014
// file I/O. Generation is a pure function of (spec, D): the same spec always
// reproduces the same volume bit-for-bit.

#include <cstdint>
#include <string>
#include <vector>

#include "cryoforge/common.hpp"
#include "cryoforge/volume.hpp"

namespace cryoforge {

struct PhantomSpec {
    std::uint64_t seed = 0;
    int n_blobs = 16;                // documented dataset range [8, 40]; >= 1 accepted
    double sigma_min = 1.5;          // voxels
    double sigma_max = 3.0;          // voxels, <= 4.0
    double amplitude_min = 0.5;
    double amplitude_max = 1.0;
    double connectivity_bias = 0.5;  // 0 = fresh direction per step, 1 = straight walk
};

// Throws ConfigError when a field is outside its documented range.
void validate(const PhantomSpec& spec);

// Sum of axis-aligned anisotropic Gaussian blobs placed by a seeded random
// walk, tapered to zero outside radius 0.35*D, peak-normalized to 1.
VoxelVolume generate_phantom(const PhantomSpec& spec, int d, double voxel_size = 1.0);

// MRC2014 mode-2 (float32) volume I/O. Round-trips are bit-exact.
void write_mrc(const VoxelVolume& v, const std::string& path);
VoxelVolume read_mrc(const std::string& path);

// Image stacks (NZ = image count). `images` is n * d * d floats, x fastest.
void write_mrc_stack(const std::vector<float>& images, int n, int d, double pixel_size,
                     const std::string& path);
struct MrcStack {
    int count = 0;
    int size = 0;
    double pixel_size = 1;
    std::vector<float> images;
};
MrcStack read_mrc_stack(const std::string& path);

}  // namespace cryoforge
