#pragma once

// Forward image-formation model (pose sampling, CTF, noise), dataset
// assembly, the weighted-backprojection reconstruction, and dataset file I/O
// (MRC stack + metadata CSV + JSON manifest).

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "cryoforge/fourier.hpp"
#include "cryoforge/phantom.hpp"
#include "cryoforge/volume.hpp"

namespace cryoforge {

struct Pose {
    Mat3 rotation;
    double tx = 0, ty = 0;  // pixels
};

struct CtfParams {
    double defocus_u = 15000;  // Angstrom, >= defocus_v
    double defocus_v = 15000;
    double astig_angle = 0;  // rad
    double voltage = 300;    // kV
    double cs = 2.7;         // mm
    double amp_contrast = 0.1;
    double phase_shift = 0;  // rad
    double b_factor = 0;     // Angstrom^2
};

struct CtfRanges {
    bool enabled = true;
    double defocus_min = 10000;
    double defocus_max = 20000;
    double voltage = 300;
    double cs = 2.7;
    double amp_contrast = 0.1;
    double phase_shift = 0;
    double b_factor = 0;
};

struct ParticleDataset {
    int size = 0;
    double pixel_size = 1;
    double snr = std::numeric_limits<double>::infinity();  // inf = noiseless
    double t_max = 0;
    bool ctf_enabled = true;
    std::uint64_t seed = 0;
    int n_per_structure = 0;
    std::vector<float> images;  // N * D * D
    std::vector<Pose> poses;
    std::vector<CtfParams> ctfs;
    std::vector<int> structure_id;  // dense in [0, S)
    std::vector<PhantomSpec> phantom_specs;

    std::size_t count() const { return poses.size(); }
    int n_structures() const { return static_cast<int>(phantom_specs.size()); }
    const float* image(std::size_t i) const {
        return images.data() + i * static_cast<std::size_t>(size) * size;
    }
};

// Rotation uniform on SO(3) (uniform unit quaternion), translation uniform in
// [-t_max, t_max]^2.
Pose sample_pose(SplitMix64& rng, double t_max = 0);

// Standard single-particle CTF at spatial frequency (sx, sy) in 1/Angstrom.
double ctf_value(const CtfParams& p, double sx, double sy);

// CTF evaluated on the D x D centered frequency lattice.
std::vector<double> ctf_evaluate(const CtfParams& p, int d, double pixel_size);

CtfParams sample_ctf(const CtfRanges& ranges, SplitMix64& rng);

// For each phantom, n_per images: sample pose -> project -> CTF filter ->
// add white Gaussian noise with variance Var(clean)/snr. Image order is
// shuffled; labels follow. snr = inf gives noiseless images.
ParticleDataset simulate_dataset(const std::vector<VoxelVolume>& phantoms, int n_per, double snr,
                                 const CtfRanges& ranges, std::uint64_t seed,
                                 double pixel_size = 1.0, double t_max = 0);

// Raw Wiener accumulation grids, exposed for tests and diagnostics.
struct BackprojectAccum {
    int size = 0;
    std::vector<double> numerator;    // sum of tent-weighted CTF * H(image)
    std::vector<double> denominator;  // sum of tent-weighted CTF^2
};

BackprojectAccum backproject_accumulate(const ParticleDataset& ds,
                                        const std::vector<std::size_t>& indices);

// inverse_hartley_3d(num / (den + eps)), eps = 1e-2 * max(den).
VoxelVolume backproject(const ParticleDataset& ds, const std::vector<std::size_t>& indices);

// Dataset directory layout: stack.mrcs, meta.csv, manifest.json.
void save_dataset(const ParticleDataset& ds, const std::string& dir);
ParticleDataset load_dataset(const std::string& dir);

}  // namespace cryoforge
