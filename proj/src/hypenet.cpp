#include "cryoforge/hypenet.hpp"

#include <cmath>

namespace cryoforge {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

const char* to_string(ConditioningMode m) {
    return m == ConditioningMode::kHypernet ? "hypernet" : "concat";
}

ConditioningMode conditioning_mode_from_string(const std::string& s) {
    if (s == "hypernet") return ConditioningMode::kHypernet;
    if (s == "concat") return ConditioningMode::kConcat;
    throw ConfigError("model: unknown mode '" + s + "' (hypernet or concat)");
}

int HypeNetConfig::inr_in(int layer) const {
    if (layer == 1)
        return 2 * pe_frequencies + (mode == ConditioningMode::kConcat ? z_dim : 0);
    return inr_hidden;
}

int HypeNetConfig::inr_out(int layer) const { return layer == inr_layers ? 1 : inr_hidden; }

void HypeNetConfig::validate() const {
    if (image_size < 4 || image_size % 2 != 0)
        throw ConfigError("model: image_size must be even and >= 4");
    if (patch < 1 || image_size % patch != 0)
        throw ConfigError("model: image_size " + std::to_string(image_size) +
                          " not divisible by patch " + std::to_string(patch));
    if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0)
        throw ConfigError("model: embed_dim must be a positive multiple of heads");
    if (blocks < 0) throw ConfigError("model: blocks must be >= 0");
    if (inr_layers < 2) throw ConfigError("model: inr_layers must be >= 2");
    if (inr_hidden < 1 || pe_frequencies < 1)
        throw ConfigError("model: inr_hidden and pe_frequencies must be positive");
    if (weight_tokens < 1) throw ConfigError("model: weight_tokens must be >= 1");
    if (mode == ConditioningMode::kHypernet) {
        if (static_cast<int>(group_sizes.size()) != inr_layers)
            throw ConfigError("model: group_sizes must have one entry per INR layer");
        int sum = 0;
        for (int a : group_sizes) {
            if (a < 1) throw ConfigError("model: group sizes must be positive");
            sum += a;
        }
        if (sum != weight_tokens)
            throw ConfigError("model: group sizes sum to " + std::to_string(sum) +
                              ", expected weight_tokens = " + std::to_string(weight_tokens));
    } else if (z_dim < 1) {
        throw ConfigError("model: z_dim must be positive in concat mode");
    }
}

std::vector<std::size_t> disk_indices(int d) {
    std::vector<std::size_t> idx;
    const int c = d / 2;
    for (int y = 0; y < d; ++y)
        for (int x = 0; x < d; ++x) {
            const double kx = static_cast<double>(x - c) / d;
            const double ky = static_cast<double>(y - c) / d;
            if (kx * kx + ky * ky <= 0.25) idx.push_back(static_cast<std::size_t>(y) * d + x);
        }
    return idx;
}

template <class S>
Tensor<S> HypeNet<S>::param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("model: missing parameter " + name);
    return it->second;
}

template <class S>
HypeNet<S> HypeNet<S>::init(const HypeNetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    HypeNet<S> net;
    net.cfg = cfg;
    SplitMix64 rng(seed);
    const std::size_t d = cfg.embed_dim;
    const std::size_t p2 = static_cast<std::size_t>(cfg.patch) * cfg.patch;
    const std::size_t t = cfg.token_count();
    const double wstd = 0.02;

    auto add = [&](const std::string& name, Tensor<S> v) { net.params.emplace(name, v); };
    auto randn = [&](Shape shape, double std) {
        return Tensor<S>::randn(std::move(shape), rng, std, true);
    };
    auto zeros = [&](Shape shape) { return Tensor<S>::zeros(std::move(shape), true); };
    auto ones = [&](Shape shape) { return Tensor<S>::ones(std::move(shape), true); };

    add("embed.w", randn({p2, d}, wstd));
    add("embed.b", zeros({d}));
    add("embed.pos", randn({t, d}, wstd));
    for (int i = 0; i < cfg.weight_tokens; ++i)
        add("wtok." + std::to_string(i), randn({d}, wstd));
    for (int b = 0; b < cfg.blocks; ++b) {
        const std::string pre = "encoder.block" + std::to_string(b) + ".";
        add(pre + "ln1.g", ones({d}));
        add(pre + "ln1.b", zeros({d}));
        add(pre + "attn.qkv.w", randn({d, 3 * d}, wstd));
        // no key bias: it cancels inside the softmax (exact null direction)
        add(pre + "attn.q.b", zeros({d}));
        add(pre + "attn.v.b", zeros({d}));
        add(pre + "attn.out.w", randn({d, d}, wstd));
        add(pre + "attn.out.b", zeros({d}));
        add(pre + "ln2.g", ones({d}));
        add(pre + "ln2.b", zeros({d}));
        add(pre + "mlp.fc1.w", randn({d, 4 * d}, wstd));
        add(pre + "mlp.fc1.b", zeros({4 * d}));
        add(pre + "mlp.fc2.w", randn({4 * d, d}, wstd));
        add(pre + "mlp.fc2.b", zeros({d}));
    }
    for (int j = 1; j <= cfg.inr_layers; ++j) {
        const std::size_t fin = cfg.inr_in(j), fout = cfg.inr_out(j);
        add("inr.theta" + std::to_string(j), randn({fin, fout}, std::sqrt(2.0 / fin)));
        add("inr.bias" + std::to_string(j), zeros({fout}));
    }
    if (cfg.mode == ConditioningMode::kHypernet) {
        for (int j = 1; j <= cfg.inr_layers; ++j) {
            const std::size_t gin = static_cast<std::size_t>(cfg.group_sizes[j - 1]) * d;
            const std::size_t nout = static_cast<std::size_t>(cfg.inr_in(j)) * cfg.inr_out(j);
            add("head." + std::to_string(j) + ".w", randn({gin, nout}, wstd));
            add("head." + std::to_string(j) + ".b", zeros({nout}));
        }
    } else {
        add("head.z.w", randn({d, static_cast<std::size_t>(cfg.z_dim)}, wstd));
        add("head.z.b", zeros({static_cast<std::size_t>(cfg.z_dim)}));
    }
    // frozen random Fourier feature matrix
    add("pe.B", Tensor<S>::randn({static_cast<std::size_t>(cfg.pe_frequencies), 3}, rng,
                                 cfg.pe_sigma, false));
    return net;
}

template <class S>
Tensor<S> HypeNet<S>::tokenize(Tensor<S> images_h) const {
    const std::size_t d = cfg.image_size;
    const std::size_t n = images_h.numel() / (d * d);
    if (images_h.numel() != n * d * d)
        throw ShapeError("tokenize: image buffer size mismatch");
    const std::size_t p = cfg.patch, tside = d / p;

    Tensor<S> x = reshape(images_h, {n, d * d});
    if (cfg.lowpass_cutoff > 0) {
        std::vector<S> lp(d * d);
        const int c = static_cast<int>(d) / 2;
        for (std::size_t y = 0; y < d; ++y)
            for (std::size_t xx = 0; xx < d; ++xx) {
                const double r2 = double(int(xx) - c) * (int(xx) - c) +
                                  double(int(y) - c) * (int(y) - c);
                lp[y * d + xx] = static_cast<S>(
                    std::exp(-r2 / (2.0 * cfg.lowpass_cutoff * cfg.lowpass_cutoff)));
            }
        x = mul(x, Tensor<S>::from_data({d * d}, std::move(lp)));
    }
    x = reshape(x, {n, tside, p, tside, p});
    x = permute(x, {0, 1, 3, 2, 4});
    x = reshape(x, {n, tside * tside, p * p});
    x = add(matmul(x, param("embed.w")), param("embed.b"));
    return add(x, param("embed.pos"));
}

template <class S>
Tensor<S> HypeNet<S>::encode_tokens(Tensor<S> tokens) const {
    const std::size_t n = tokens.dim(0), tq = tokens.dim(1), d = cfg.embed_dim;
    const std::size_t nh = cfg.heads, dh = cfg.head_dim();
    Tensor<S> x = tokens;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    for (int b = 0; b < cfg.blocks; ++b) {
        const std::string pre = "encoder.block" + std::to_string(b) + ".";
        auto a = add(mul(layer_norm_lastdim(x), param(pre + "ln1.g")), param(pre + "ln1.b"));
        auto qkv = matmul(a, param(pre + "attn.qkv.w"));
        auto split_heads = [&](Tensor<S> v) {
            v = reshape(v, {n, tq, nh, dh});
            v = permute(v, {0, 2, 1, 3});
            return reshape(v, {n * nh, tq, dh});
        };
        auto q = split_heads(add(slice(qkv, 2, 0, d), param(pre + "attn.q.b")));
        auto k = split_heads(slice(qkv, 2, d, d));
        auto v = split_heads(add(slice(qkv, 2, 2 * d, d), param(pre + "attn.v.b")));
        auto attn = softmax_lastdim(mul_scalar(bmm(q, k, false, true), scale));
        auto ctx = bmm(attn, v);
        ctx = reshape(ctx, {n, nh, tq, dh});
        ctx = permute(ctx, {0, 2, 1, 3});
        ctx = reshape(ctx, {n, tq, d});
        x = add(x, add(matmul(ctx, param(pre + "attn.out.w")), param(pre + "attn.out.b")));
        auto m = add(mul(layer_norm_lastdim(x), param(pre + "ln2.g")), param(pre + "ln2.b"));
        auto hgelu = gelu(add(matmul(m, param(pre + "mlp.fc1.w")), param(pre + "mlp.fc1.b")));
        x = add(x, add(matmul(hgelu, param(pre + "mlp.fc2.w")), param(pre + "mlp.fc2.b")));
    }
    return x;
}

template <class S>
Tensor<S> HypeNet<S>::encode(Tensor<S> images_h) const {
    auto tokens = tokenize(images_h);
    const std::size_t n = tokens.dim(0), t = tokens.dim(1), d = cfg.embed_dim;
    const std::size_t q = cfg.weight_tokens;
    std::vector<Tensor<S>> wt;
    wt.reserve(q);
    for (std::size_t i = 0; i < q; ++i)
        wt.push_back(reshape(param("wtok." + std::to_string(i)), {1, d}));
    auto wt_mat = concat(wt, 0);  // [q, d]
    auto wt_batch = add(Tensor<S>::zeros({n, q, d}), wt_mat);
    auto x = concat<S>({tokens, wt_batch}, 1);
    x = encode_tokens(x);
    return slice(x, 1, t, q);
}

template <class S>
std::vector<Tensor<S>> HypeNet<S>::modulate(Tensor<S> weight_tokens_f) const {
    if (cfg.mode != ConditioningMode::kHypernet)
        throw ConfigError("model: modulate requires hypernet mode");
    const std::size_t n = weight_tokens_f.dim(0), d = cfg.embed_dim;
    std::vector<Tensor<S>> out;
    out.reserve(cfg.inr_layers);
    std::size_t off = 0;
    for (int j = 1; j <= cfg.inr_layers; ++j) {
        const std::size_t a = cfg.group_sizes[j - 1];
        const std::size_t fin = cfg.inr_in(j), fout = cfg.inr_out(j);
        auto grp = reshape(slice(weight_tokens_f, 1, off, a), {n, a * d});
        off += a;
        auto m = add(matmul(grp, param("head." + std::to_string(j) + ".w")),
                     param("head." + std::to_string(j) + ".b"));
        m = reshape(m, {n, fin, fout});
        // Norm: each column rescaled to unit L2 then multiplied by sqrt(fan_in)
        auto norms = add_scalar(l2_norm_axis(m, 1, true), static_cast<S>(1e-8));
        auto normed = mul_scalar(div(m, norms), static_cast<S>(std::sqrt(double(fin))));
        out.push_back(mul(normed, param("inr.theta" + std::to_string(j))));
    }
    return out;
}

template <class S>
Tensor<S> HypeNet<S>::concat_latent(Tensor<S> weight_tokens_f) const {
    if (cfg.mode != ConditioningMode::kConcat)
        throw ConfigError("model: concat_latent requires concat mode");
    const std::size_t n = weight_tokens_f.dim(0), d = cfg.embed_dim;
    auto last = reshape(slice(weight_tokens_f, 1, cfg.weight_tokens - 1, 1), {n, d});
    return add(matmul(last, param("head.z.w")), param("head.z.b"));
}

template <class S>
Tensor<S> HypeNet<S>::gamma_features(const std::vector<double>& coords, std::size_t n,
                                     std::size_t m_points) const {
    if (coords.size() != n * m_points * 3)
        throw ShapeError("gamma_features: coordinate buffer size mismatch");
    const std::size_t m = cfg.pe_frequencies;
    const auto& b = param("pe.B").data();
    std::vector<S> out(n * m_points * 2 * m);
    const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(n * m_points);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < rows; ++r) {
        const double kx = coords[3 * r], ky = coords[3 * r + 1], kz = coords[3 * r + 2];
        S* dst = out.data() + static_cast<std::size_t>(r) * 2 * m;
        for (std::size_t f = 0; f < m; ++f) {
            const double u =
                kTwoPi * (double(b[3 * f]) * kx + double(b[3 * f + 1]) * ky + double(b[3 * f + 2]) * kz);
            dst[f] = static_cast<S>(std::cos(u));
            dst[m + f] = static_cast<S>(std::sin(u));
        }
    }
    return Tensor<S>::from_data({n, m_points, 2 * m}, std::move(out));
}

template <class S>
Tensor<S> HypeNet<S>::inr_forward(Tensor<S> gamma, const std::vector<Tensor<S>>& theta_f,
                                  Tensor<S> z) const {
    const std::size_t n = gamma.dim(0), mp = gamma.dim(1);
    Tensor<S> input = gamma;
    if (cfg.mode == ConditioningMode::kConcat) {
        if (!z.defined()) throw ConfigError("model: concat mode requires a latent z");
        auto zb = add(Tensor<S>::zeros({n, mp, static_cast<std::size_t>(cfg.z_dim)}),
                      reshape(z, {n, 1, static_cast<std::size_t>(cfg.z_dim)}));
        input = concat<S>({gamma, zb}, 2);
    }
    auto apply_layer = [&](Tensor<S> x, int j) {
        auto bias = param("inr.bias" + std::to_string(j));
        if (cfg.mode == ConditioningMode::kHypernet) {
            return add(bmm(x, theta_f[j - 1]), bias);
        }
        return add(matmul(x, param("inr.theta" + std::to_string(j))), bias);
    };
    Tensor<S> h = relu(apply_layer(input, 1));
    for (int j = 2; j < cfg.inr_layers; ++j) h = add(relu(apply_layer(h, j)), h);
    auto out = apply_layer(h, cfg.inr_layers);
    return reshape(out, {n, mp});
}

template <class S>
Tensor<S> HypeNet<S>::forward_masked(Tensor<S> images_h, Tensor<S> gamma,
                                     Tensor<S> ctf_vals) const {
    auto wf = encode(images_h);
    Tensor<S> pred;
    if (cfg.mode == ConditioningMode::kHypernet) {
        pred = inr_forward(gamma, modulate(wf), Tensor<S>());
    } else {
        pred = inr_forward(gamma, {}, concat_latent(wf));
    }
    return mul(pred, ctf_vals);
}

template <class S>
Tensor<S> HypeNet<S>::forward(const HartleyImage& image, const Mat3& rotation,
                              const std::vector<double>& ctf_vals) const {
    const int d = cfg.image_size;
    if (image.size != d) throw ShapeError("forward: image size mismatch");
    if (ctf_vals.size() != static_cast<std::size_t>(d) * d)
        throw ShapeError("forward: ctf buffer size mismatch");
    const auto disk = disk_indices(d);
    const std::size_t mp = disk.size();

    std::vector<S> img(image.values.begin(), image.values.end());
    auto images_h = Tensor<S>::from_data({1, static_cast<std::size_t>(d) * d}, std::move(img));

    auto lat = rotated_slice_coords(rotation, d);
    std::vector<double> coords(mp * 3);
    std::vector<S> ctf_disk(mp);
    for (std::size_t i = 0; i < mp; ++i) {
        const auto& k = lat.coords[disk[i]];
        coords[3 * i] = k[0];
        coords[3 * i + 1] = k[1];
        coords[3 * i + 2] = k[2];
        ctf_disk[i] = static_cast<S>(ctf_vals[disk[i]]);
    }
    auto gamma = gamma_features(coords, 1, mp);
    auto ctf = Tensor<S>::from_data({1, mp}, std::move(ctf_disk));
    auto pred = forward_masked(images_h, gamma, ctf);
    auto full = scatter_lastdim(pred, disk, static_cast<std::size_t>(d) * d);
    return reshape(full, {static_cast<std::size_t>(d), static_cast<std::size_t>(d)});
}

template <class S>
std::vector<NamedArray<S>> HypeNet<S>::to_arrays() const {
    std::vector<NamedArray<S>> out;
    out.reserve(params.size());
    for (const auto& [name, t] : params) out.push_back({name, t.shape(), t.data()});
    return out;
}

template <class S>
HypeNet<S> HypeNet<S>::from_arrays(const HypeNetConfig& cfg,
                                   const std::vector<NamedArray<S>>& arrays) {
    HypeNet<S> net = HypeNet<S>::init(cfg, 0);
    std::size_t matched = 0;
    for (const auto& a : arrays) {
        auto it = net.params.find(a.name);
        if (it == net.params.end())
            throw FormatError("checkpoint: unexpected parameter " + a.name);
        if (it->second.shape() != a.shape)
            throw FormatError("checkpoint: parameter " + a.name + " has shape " +
                              shape_str(a.shape) + ", expected " + shape_str(it->second.shape()));
        it->second.data_mut() = a.data;
        ++matched;
    }
    if (matched != net.params.size())
        throw FormatError("checkpoint: expected " + std::to_string(net.params.size()) +
                          " parameters, found " + std::to_string(matched));
    return net;
}

template <class S>
void HypeNet<S>::save(const std::string& path) const {
    save_checkpoint(path, to_arrays());
}

template <class S>
HypeNet<S> HypeNet<S>::load(const HypeNetConfig& cfg, const std::string& path) {
    return from_arrays(cfg, load_checkpoint<S>(path));
}

template class HypeNet<float>;
template class HypeNet<double>;

}  // namespace cryoforge
