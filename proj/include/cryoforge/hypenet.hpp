#pragma once

// The reconstruction model: a ViT encoder over Hartley-image patches with
// extra learnable weight tokens, per-layer linear heads that emit
// multiplicative modulations of the INR base weights (hypernet mode), and a
// coordinate MLP decoder with random Fourier features and residual
// connections. The concat mode is the conditioning-by-concatenation ablation:
// a single head maps the last weight token to a small latent appended to the
// positional encoding.

#include <map>
#include <string>
#include <vector>

#include "cryoforge/checkpoint.hpp"
#include "cryoforge/fourier.hpp"
#include "cryoforge/tensor.hpp"

namespace cryoforge {

enum class ConditioningMode { kHypernet, kConcat };

const char* to_string(ConditioningMode m);
ConditioningMode conditioning_mode_from_string(const std::string& s);

struct HypeNetConfig {
    int image_size = 32;  // D
    int patch = 4;        // P, D % P == 0
    int embed_dim = 128;  // d
    int blocks = 4;
    int heads = 4;
    int weight_tokens = 10;                      // q
    std::vector<int> group_sizes = {2, 2, 2, 2, 2};  // a_j, sums to q
    int inr_layers = 5;                          // L
    int inr_hidden = 64;                         // h
    int pe_frequencies = 64;                     // m
    double pe_sigma = 1.0;
    double lowpass_cutoff = 0;  // Gaussian low-pass radius in Fourier pixels; <= 0 disables
    ConditioningMode mode = ConditioningMode::kHypernet;
    int z_dim = 8;  // concat-mode latent size

    int token_count() const { return (image_size / patch) * (image_size / patch); }
    int head_dim() const { return embed_dim / heads; }
    // INR layer widths: in/out extents of theta_j
    int inr_in(int layer) const;   // 1-based layer index
    int inr_out(int layer) const;  // 1-based layer index
    void validate() const;
};

// In-band (|k| <= 0.5) pixel indices of the D x D lattice, row-major.
std::vector<std::size_t> disk_indices(int d);

template <class S>
class HypeNet {
  public:
    HypeNetConfig cfg;
    std::map<std::string, Tensor<S>> params;  // sorted; iteration order is the canonical order

    static HypeNet init(const HypeNetConfig& cfg, std::uint64_t seed);

    // ---- batched stages (images as flattened Hartley values [n, D*D]) ----
    Tensor<S> tokenize(Tensor<S> images_h) const;          // -> [n, T, d]
    Tensor<S> encode_tokens(Tensor<S> tokens) const;       // [n, T+q, d] -> [n, T+q, d]
    Tensor<S> encode(Tensor<S> images_h) const;            // -> weight tokens w^F [n, q, d]
    // Per-layer effective INR weights theta^F [n, in_j, out_j] (hypernet mode).
    std::vector<Tensor<S>> modulate(Tensor<S> weight_tokens_f) const;
    // Concat-mode latent z [n, z_dim] from the last weight token.
    Tensor<S> concat_latent(Tensor<S> weight_tokens_f) const;

    // Positional features for coords given as flat (n*m_points) x 3 doubles in
    // cycles/pixel: [cos(2 pi B k), sin(2 pi B k)], constant wrt the graph.
    Tensor<S> gamma_features(const std::vector<double>& coords, std::size_t n,
                             std::size_t m_points) const;

    // INR evaluation. In hypernet mode pass per-image weights from modulate();
    // in concat mode pass the latent from concat_latent().
    Tensor<S> inr_forward(Tensor<S> gamma, const std::vector<Tensor<S>>& theta_f,
                          Tensor<S> z) const;  // -> [n, m_points]

    // Training path: predictions at the shared in-disk lattice points,
    // multiplied by the per-image CTF values. All inputs batched.
    Tensor<S> forward_masked(Tensor<S> images_h, Tensor<S> gamma, Tensor<S> ctf_vals) const;

    // Spec surface: one image through the whole model onto the full D x D
    // lattice for the given pose; out-of-disk pixels are exactly zero.
    Tensor<S> forward(const HartleyImage& image, const Mat3& rotation,
                      const std::vector<double>& ctf_vals) const;

    std::vector<NamedArray<S>> to_arrays() const;
    static HypeNet from_arrays(const HypeNetConfig& cfg, const std::vector<NamedArray<S>>& arrays);

    void save(const std::string& path) const;
    static HypeNet load(const HypeNetConfig& cfg, const std::string& path);

  private:
    Tensor<S> param(const std::string& name) const;
};

using HypeNetR = HypeNet<real_t>;

}  // namespace cryoforge
