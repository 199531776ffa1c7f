#pragma once

// Training loop (masked-MSE loss, Adam, warmup+cosine schedule,
// checkpointing), full-volume reconstruction at inference, and latent-token
// extraction.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cryoforge/hypenet.hpp"
#include "cryoforge/simulate.hpp"

namespace cryoforge {

struct TrainConfig {
    int batch = 64;
    double lr = 5e-4;
    int warmup_epochs = 5;
    int total_epochs = 100;
    std::uint64_t seed = 0;
    std::string precision = kPrecisionName;
    int checkpoint_every = 0;  // epochs between checkpoints; 0 = final only
    double grad_clip = 0;      // global-norm clip; 0 = off

    void validate() const;
};

// Mean squared error restricted to the in-disk mask of a D x D prediction.
template <class S>
Tensor<S> masked_mse(Tensor<S> pred, Tensor<S> target, const std::vector<std::uint8_t>& mask);

// Linear warmup to lr, then cosine decay to 0 at the final epoch.
double lr_schedule(int epoch, const TrainConfig& cfg);

template <class S>
class Adam {
  public:
    Adam() = default;
    Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // Bias-corrected update from the accumulated grads; zeroes them after.
    void step(std::map<std::string, Tensor<S>>& params, double lr);

    long steps_taken() const { return t_; }
    std::vector<NamedArray<S>> state_arrays() const;
    void load_state(const std::vector<NamedArray<S>>& arrays);

  private:
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    long t_ = 0;
    std::map<std::string, std::vector<S>> m_, v_;
};

struct LossRecord {
    int epoch;
    double mean_loss;
    double lr;
};

void write_loss_log(const std::vector<LossRecord>& log, const std::string& path);

struct TrainResult {
    HypeNet<real_t> model;
    std::vector<LossRecord> log;
};

// Full training run. When checkpoint_dir is non-empty, periodic and final
// checkpoints (model + optimizer state) are written there.
TrainResult train(const ParticleDataset& ds, const HypeNetConfig& model_cfg,
                  const TrainConfig& train_cfg, const std::string& checkpoint_dir = "");

// Per-image volume: encode -> effective INR weights -> evaluate on the
// in-ball D_out^3 Hartley lattice -> inverse transform -> spherical mask.
template <class S>
VoxelVolume reconstruct_volume(const HartleyImage& image, const HypeNet<S>& model, int d_out,
                               double voxel_size);

// Flattened post-encoder weight tokens per image, dataset order; N x (q*d).
template <class S>
std::vector<float> extract_latents(const ParticleDataset& ds, const HypeNet<S>& model,
                                   int batch = 64);

// Hartley transform of one dataset image (the model's input representation).
HartleyImage dataset_image_hartley(const ParticleDataset& ds, std::size_t index);

}  // namespace cryoforge
