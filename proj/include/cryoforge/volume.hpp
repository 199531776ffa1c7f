#pragma once

#include <cstddef>
#include <vector>

namespace cryoforge {

// Cubic density grid. Values are stored x-fastest (z, y, x), matching the MRC
// data layout, in 32-bit floats so file round-trips are bit-exact.
struct VoxelVolume {
    int size = 0;           // D, voxels per edge
    double voxel_size = 1;  // Angstrom per voxel
    std::vector<float> values;

    float at(int z, int y, int x) const {
        return values[(static_cast<std::size_t>(z) * size + y) * size + x];
    }
    float& at(int z, int y, int x) {
        return values[(static_cast<std::size_t>(z) * size + y) * size + x];
    }
};

}  // namespace cryoforge
