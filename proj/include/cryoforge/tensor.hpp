#pragma once

// Dense n-d tensors with reverse-mode differentiation. The op set is what the
// encoder/INR stack needs: GEMM-backed contractions, broadcasting elementwise
// arithmetic, shape surgery, reductions, softmax/layernorm/GeLU, and a few
// trig primitives for positional encodings.
//
// Determinism: every kernel assigns each output element to exactly one thread
// and reduces in a fixed sequential order, so forward and backward results are
// bit-identical for any thread count. Reductions accumulate in double.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <vector>

#include "cryoforge/common.hpp"

namespace cryoforge {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {

// Exact-zero ReLU inputs seen since the last reset; grad_check uses this to
// warn about nondifferentiable points.
inline thread_local std::uint64_t relu_zero_hits = 0;

// C[m,n] (+)= op(A) * op(B), row-major. A is m-by-k (or k-by-m when ta),
// B is k-by-n (or n-by-k when tb). Rows of C are partitioned across threads;
// the k-reduction order is fixed, so results are thread-count independent.
template <class S>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const S* A, const S* B,
          S* C, bool acc) {
    const std::ptrdiff_t im = static_cast<std::ptrdiff_t>(m);
    if (!ta && !tb) {
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t ip = 0; ip < im; ++ip) {
            const std::size_t i = static_cast<std::size_t>(ip);
            S* c = C + i * n;
            if (!acc) std::fill(c, c + n, S(0));
            const S* arow = A + i * k;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const S a = arow[kk];
                const S* b = B + kk * n;
                for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
            }
        }
    } else if (!ta && tb) {
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t ip = 0; ip < im; ++ip) {
            const std::size_t i = static_cast<std::size_t>(ip);
            const S* arow = A + i * k;
            S* c = C + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const S* brow = B + j * k;
                S s = 0;
                for (std::size_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
                c[j] = acc ? c[j] + s : s;
            }
        }
    } else if (ta && !tb) {
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t ip = 0; ip < im; ++ip) {
            const std::size_t i = static_cast<std::size_t>(ip);
            S* c = C + i * n;
            if (!acc) std::fill(c, c + n, S(0));
            for (std::size_t kk = 0; kk < k; ++kk) {
                const S a = A[kk * m + i];
                const S* b = B + kk * n;
                for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
            }
        }
    } else {
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t ip = 0; ip < im; ++ip) {
            const std::size_t i = static_cast<std::size_t>(ip);
            S* c = C + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                S s = 0;
                for (std::size_t kk = 0; kk < k; ++kk) s += A[kk * m + i] * B[j * k + kk];
                c[j] = acc ? c[j] + s : s;
            }
        }
    }
}

// Broadcast plan for binary elementwise ops (numpy rules, aligned right).
// Strides are in elements; 0 marks a broadcast axis.
struct BcPlan {
    Shape out;
    std::vector<std::ptrdiff_t> sa, sb;
    bool same = false;       // identical shapes
    std::size_t suffix_b = 0;  // >0: b is a contiguous suffix of a, repeated
};

inline BcPlan make_bc_plan(const Shape& a, const Shape& b, const char* op) {
    BcPlan p;
    if (a == b) {
        p.out = a;
        p.same = true;
        return p;
    }
    const std::size_t r = std::max(a.size(), b.size());
    p.out.resize(r);
    p.sa.assign(r, 0);
    p.sb.assign(r, 0);
    std::vector<std::ptrdiff_t> stra(a.size()), strb(b.size());
    std::ptrdiff_t acc = 1;
    for (std::size_t i = a.size(); i-- > 0;) stra[i] = acc, acc *= static_cast<std::ptrdiff_t>(a[i]);
    acc = 1;
    for (std::size_t i = b.size(); i-- > 0;) strb[i] = acc, acc *= static_cast<std::ptrdiff_t>(b[i]);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (ea != eb && ea != 1 && eb != 1)
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                             shape_str(b));
        p.out[i] = std::max(ea, eb);
        if (i >= r - a.size()) p.sa[i] = (ea == 1 && p.out[i] != 1) ? 0 : stra[i - (r - a.size())];
        if (i >= r - b.size()) p.sb[i] = (eb == 1 && p.out[i] != 1) ? 0 : strb[i - (r - b.size())];
    }
    // b a plain suffix of a (bias-add pattern): broadcast only on leading axes
    if (b.size() < a.size() &&
        std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size())))
        p.suffix_b = shape_numel(b);
    return p;
}

// Visit the out-index space of a broadcast plan: fn(out_linear, off_a, off_b).
template <class F>
void bc_for_each(const Shape& out, const std::vector<std::ptrdiff_t>& sa,
                 const std::vector<std::ptrdiff_t>& sb, F&& fn) {
    const std::size_t n = shape_numel(out);
    if (n == 0) return;
    const std::size_t r = out.size();
    if (r == 0) {
        fn(std::size_t{0}, std::ptrdiff_t{0}, std::ptrdiff_t{0});
        return;
    }
    std::vector<std::size_t> idx(r, 0);
    std::ptrdiff_t oa = 0, ob = 0;
    std::size_t oi = 0;
    const std::size_t last = r - 1, lext = out[last];
    const std::ptrdiff_t sal = sa[last], sbl = sb[last];
    for (;;) {
        std::ptrdiff_t ca = oa, cb = ob;
        for (std::size_t j = 0; j < lext; ++j, ++oi, ca += sal, cb += sbl) fn(oi, ca, cb);
        std::size_t ax = last;
        for (;;) {
            if (ax == 0) return;
            --ax;
            ++idx[ax];
            oa += sa[ax];
            ob += sb[ax];
            if (idx[ax] < out[ax]) break;
            oa -= sa[ax] * static_cast<std::ptrdiff_t>(out[ax]);
            ob -= sb[ax] * static_cast<std::ptrdiff_t>(out[ax]);
            idx[ax] = 0;
        }
    }
}

}  // namespace detail

template <class S>
struct TensorNode {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // allocated on first use during backward
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode<S>>> parents;  // grad-requiring inputs only
    std::function<void(TensorNode<S>&)> backward_fn;

    std::size_t numel() const { return shape_numel(shape); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
};

template <class S>
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode<S>> n) : node_(std::move(n)) {}

    static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("from_data: shape " + shape_str(shape) + " has " +
                             std::to_string(shape_numel(shape)) + " elements, got " +
                             std::to_string(data.size()));
        auto n = std::make_shared<TensorNode<S>>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }
    static Tensor full(Shape shape, S v, bool requires_grad = false) {
        std::vector<S> d(shape_numel(shape), v);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }
    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), S(0), requires_grad);
    }
    static Tensor ones(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), S(1), requires_grad);
    }
    static Tensor scalar(S v, bool requires_grad = false) {
        return from_data(Shape{}, std::vector<S>{v}, requires_grad);
    }
    static Tensor randn(Shape shape, SplitMix64& rng, double stddev = 1.0,
                        bool requires_grad = false) {
        std::vector<S> d(shape_numel(shape));
        for (auto& v : d) v = static_cast<S>(rng.normal() * stddev);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->numel(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }

    const std::vector<S>& data() const { return node_->data; }
    std::vector<S>& data_mut() { return node_->data; }
    const std::vector<S>& grad() const { return node_->grad; }
    std::vector<S>& grad_mut() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        return *this;
    }

    S item() const {
        if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
        return node_->data[0];
    }

    std::shared_ptr<TensorNode<S>> node() const { return node_; }

    // Reverse-mode sweep from a scalar. Nodes are visited exactly once in
    // reverse topological order; fan-out accumulates additively.
    void backward() const {
        if (numel() != 1)
            throw ContractViolation("backward: loss must be scalar, got " + shape_str(shape()));
        if (!node_->requires_grad) return;
        std::vector<TensorNode<S>*> order;
        std::unordered_set<TensorNode<S>*> seen;
        struct Frame {
            TensorNode<S>* n;
            std::size_t next;
        };
        std::vector<Frame> stack{{node_.get(), 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next < f.n->parents.size()) {
                TensorNode<S>* p = f.n->parents[f.next++].get();
                if (seen.insert(p).second) stack.push_back({p, 0});
            } else {
                order.push_back(f.n);
                stack.pop_back();
            }
        }
        node_->ensure_grad();
        node_->grad[0] = S(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it)
            if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }

  private:
    std::shared_ptr<TensorNode<S>> node_;
};

namespace detail {

template <class S>
Tensor<S> make_op(const char* op, Shape shape, std::vector<S> data,
                  std::initializer_list<Tensor<S>> inputs,
                  std::function<void(TensorNode<S>&)> bw) {
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    for (const auto& t : inputs)
        if (t.requires_grad()) n->requires_grad = true;
    if (n->requires_grad) {
        for (const auto& t : inputs)
            if (t.requires_grad()) n->parents.push_back(t.node());
        n->backward_fn = std::move(bw);
    }
    return Tensor<S>(std::move(n));
}

template <class S>
void accumulate_flat(Tensor<S> t, const std::vector<S>& g) {
    if (!t.requires_grad()) return;
    auto& gt = t.grad_mut();
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(gt.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) gt[i] += g[i];
}

}  // namespace detail

// ---- elementwise binary ops (broadcasting) ----

template <class S, class FwdF, class BwdF>
Tensor<S> binary_op(const char* name, Tensor<S> a, Tensor<S> b, FwdF fwd, BwdF bwd) {
    auto plan = detail::make_bc_plan(a.shape(), b.shape(), name);
    std::vector<S> out(shape_numel(plan.out));
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    if (plan.same) {
        const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
    } else if (plan.suffix_b) {
        const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(out.size());
        const std::size_t bn = plan.suffix_b;
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i % bn]);
    } else {
        detail::bc_for_each(plan.out, plan.sa, plan.sb,
                            [&](std::size_t oi, std::ptrdiff_t oa, std::ptrdiff_t ob) {
                                out[oi] = fwd(pa[oa], pb[ob]);
                            });
    }
    Shape oshape = plan.out;
    return detail::make_op<S>(
        name, std::move(oshape), std::move(out), {a, b},
        [a, b, plan, bwd](TensorNode<S>& self) mutable {
            const S* g = self.grad.data();
            const S* pa2 = a.data().data();
            const S* pb2 = b.data().data();
            const S* y = self.data.data();
            S* ga = a.requires_grad() ? a.grad_mut().data() : nullptr;
            S* gb = b.requires_grad() ? b.grad_mut().data() : nullptr;
            if (plan.same) {
                const std::size_t n = self.data.size();
                for (std::size_t i = 0; i < n; ++i)
                    bwd(g[i], pa2[i], pb2[i], y[i], ga ? ga + i : nullptr, gb ? gb + i : nullptr);
            } else {
                detail::bc_for_each(plan.out, plan.sa, plan.sb,
                                    [&](std::size_t oi, std::ptrdiff_t oa, std::ptrdiff_t ob) {
                                        bwd(g[oi], pa2[oa], pb2[ob], y[oi],
                                            ga ? ga + oa : nullptr, gb ? gb + ob : nullptr);
                                    });
            }
        });
}

template <class S>
Tensor<S> add(Tensor<S> a, Tensor<S> b) {
    return binary_op<S>(
        "add", a, b, [](S x, S y) { return x + y; },
        [](S g, S, S, S, S* ga, S* gb) {
            if (ga) *ga += g;
            if (gb) *gb += g;
        });
}

template <class S>
Tensor<S> sub(Tensor<S> a, Tensor<S> b) {
    return binary_op<S>(
        "sub", a, b, [](S x, S y) { return x - y; },
        [](S g, S, S, S, S* ga, S* gb) {
            if (ga) *ga += g;
            if (gb) *gb -= g;
        });
}

template <class S>
Tensor<S> mul(Tensor<S> a, Tensor<S> b) {
    return binary_op<S>(
        "mul", a, b, [](S x, S y) { return x * y; },
        [](S g, S x, S y, S, S* ga, S* gb) {
            if (ga) *ga += g * y;
            if (gb) *gb += g * x;
        });
}

template <class S>
Tensor<S> div(Tensor<S> a, Tensor<S> b) {
    return binary_op<S>(
        "div", a, b, [](S x, S y) { return x / y; },
        [](S g, S, S y, S out, S* ga, S* gb) {
            if (ga) *ga += g / y;
            if (gb) *gb -= g * out / y;
        });
}

// ---- scalar ops ----

template <class S>
Tensor<S> add_scalar(Tensor<S> a, S c) {
    std::vector<S> out(a.numel());
    const S* pa = a.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + c;
    return detail::make_op<S>("add_scalar", a.shape(), std::move(out), {a},
                              [a](TensorNode<S>& self) mutable {
                                  detail::accumulate_flat(a, self.grad);
                              });
}

template <class S>
Tensor<S> mul_scalar(Tensor<S> a, S c) {
    std::vector<S> out(a.numel());
    const S* pa = a.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * c;
    return detail::make_op<S>("mul_scalar", a.shape(), std::move(out), {a},
                              [a, c](TensorNode<S>& self) mutable {
                                  if (!a.requires_grad()) return;
                                  auto& ga = a.grad_mut();
                                  const S* g = self.grad.data();
                                  for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * c;
                              });
}

template <class S>
Tensor<S> neg(Tensor<S> a) {
    return mul_scalar(a, S(-1));
}

template <class S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <class S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <class S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <class S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }

// ---- contractions ----

// A[..., k] x B[k, n] -> [..., n]; leading axes of A are flattened into rows.
template <class S>
Tensor<S> matmul(Tensor<S> a, Tensor<S> b) {
    if (a.rank() < 1 || b.rank() != 2)
        throw ShapeError("matmul: need A rank>=2 and B rank 2, got " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
    const std::size_t k = a.shape().back();
    if (k != b.dim(0))
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const std::size_t n = b.dim(1);
    const std::size_t m = a.numel() / k;
    Shape oshape(a.shape().begin(), a.shape().end() - 1);
    oshape.push_back(n);
    std::vector<S> out(m * n);
    detail::gemm<S>(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), false);
    return detail::make_op<S>(
        "matmul", std::move(oshape), std::move(out), {a, b},
        [a, b, m, n, k](TensorNode<S>& self) mutable {
            const S* g = self.grad.data();
            if (a.requires_grad())
                detail::gemm<S>(false, true, m, k, n, g, b.data().data(), a.grad_mut().data(),
                                true);
            if (b.requires_grad())
                detail::gemm<S>(true, false, k, n, m, a.data().data(), g, b.grad_mut().data(),
                                true);
        });
}

// Batched matmul on rank-3 tensors with optional per-operand transposes.
template <class S>
Tensor<S> bmm(Tensor<S> a, Tensor<S> b, bool ta = false, bool tb = false) {
    if (a.rank() != 3 || b.rank() != 3)
        throw ShapeError("bmm: need rank-3 operands, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    if (a.dim(0) != b.dim(0))
        throw ShapeError("bmm: batch extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const std::size_t bs = a.dim(0);
    const std::size_t m = ta ? a.dim(2) : a.dim(1);
    const std::size_t ka = ta ? a.dim(1) : a.dim(2);
    const std::size_t kb = tb ? b.dim(2) : b.dim(1);
    const std::size_t n = tb ? b.dim(1) : b.dim(2);
    if (ka != kb)
        throw ShapeError("bmm: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    std::vector<S> out(bs * m * n);
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    const std::size_t sa = a.dim(1) * a.dim(2), sb = b.dim(1) * b.dim(2), sc = m * n;
    const std::ptrdiff_t ibs = static_cast<std::ptrdiff_t>(bs);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < ibs; ++i)
        detail::gemm<S>(ta, tb, m, n, ka, pa + i * sa, pb + i * sb, out.data() + i * sc, false);
    return detail::make_op<S>(
        "bmm", Shape{bs, m, n}, std::move(out), {a, b},
        [a, b, ta, tb, bs, m, n, ka, sa, sb, sc](TensorNode<S>& self) mutable {
            const S* g = self.grad.data();
            const S* pa2 = a.data().data();
            const S* pb2 = b.data().data();
            S* ga = a.requires_grad() ? a.grad_mut().data() : nullptr;
            S* gb = b.requires_grad() ? b.grad_mut().data() : nullptr;
            const std::ptrdiff_t ibs2 = static_cast<std::ptrdiff_t>(bs);
#pragma omp parallel for schedule(static)
            for (std::ptrdiff_t i = 0; i < ibs2; ++i) {
                const S* gi = g + i * sc;
                const S* ai = pa2 + i * sa;
                const S* bi = pb2 + i * sb;
                if (ga) {
                    S* gai = ga + i * sa;
                    if (!ta && !tb) detail::gemm<S>(false, true, m, ka, n, gi, bi, gai, true);
                    else if (!ta && tb) detail::gemm<S>(false, false, m, ka, n, gi, bi, gai, true);
                    else if (ta && !tb) detail::gemm<S>(false, true, ka, m, n, bi, gi, gai, true);
                    else detail::gemm<S>(true, true, ka, m, n, bi, gi, gai, true);
                }
                if (gb) {
                    S* gbi = gb + i * sb;
                    if (!ta && !tb) detail::gemm<S>(true, false, ka, n, m, ai, gi, gbi, true);
                    else if (!ta && tb) detail::gemm<S>(true, false, n, ka, m, gi, ai, gbi, true);
                    else if (ta && !tb) detail::gemm<S>(false, false, ka, n, m, ai, gi, gbi, true);
                    else detail::gemm<S>(true, true, n, ka, m, gi, ai, gbi, true);
                }
            }
        });
}

// ---- activations and pointwise transcendentals ----

template <class S>
Tensor<S> relu(Tensor<S> a) {
    std::vector<S> out(a.numel());
    const S* pa = a.data().data();
    std::uint64_t zeros = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (pa[i] == S(0)) ++zeros;
        out[i] = pa[i] > S(0) ? pa[i] : S(0);
    }
    detail::relu_zero_hits += zeros;
    return detail::make_op<S>("relu", a.shape(), std::move(out), {a},
                              [a](TensorNode<S>& self) mutable {
                                  if (!a.requires_grad()) return;
                                  auto& ga = a.grad_mut();
                                  const S* g = self.grad.data();
                                  const S* x = a.data().data();
                                  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(ga.size());
#pragma omp parallel for schedule(static)
                                  for (std::ptrdiff_t i = 0; i < n; ++i)
                                      if (x[i] > S(0)) ga[i] += g[i];
                              });
}

namespace detail {
// tanh via exp so the loop vectorizes through libmvec; |x| clamp keeps exp in
// range and pins the saturated tails to exactly +/-1.
template <class S>
inline S tanh_v(S x) {
    if (x > S(15)) return S(1);
    if (x < S(-15)) return S(-1);
    const S e = std::exp(S(-2) * x);
    return (S(1) - e) / (S(1) + e);
}
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

// GeLU, tanh approximation; the backward pass differentiates the same
// approximation.
template <class S>
Tensor<S> gelu(Tensor<S> a) {
    std::vector<S> out(a.numel());
    std::vector<S> t(a.numel());
    const S* pa = a.data().data();
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for simd schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const S x = pa[i];
        const S u = S(detail::kGeluC) * (x + S(detail::kGeluA) * x * x * x);
        t[i] = detail::tanh_v(u);
        out[i] = S(0.5) * x * (S(1) + t[i]);
    }
    return detail::make_op<S>(
        "gelu", a.shape(), std::move(out), {a},
        [a, t = std::move(t)](TensorNode<S>& self) mutable {
            if (!a.requires_grad()) return;
            auto& ga = a.grad_mut();
            const S* g = self.grad.data();
            const S* x = a.data().data();
            const std::ptrdiff_t n2 = static_cast<std::ptrdiff_t>(ga.size());
#pragma omp parallel for schedule(static)
            for (std::ptrdiff_t i = 0; i < n2; ++i) {
                const S ti = t[i];
                const S du = S(detail::kGeluC) * (S(1) + S(3) * S(detail::kGeluA) * x[i] * x[i]);
                ga[i] += g[i] * (S(0.5) * (S(1) + ti) + S(0.5) * x[i] * (S(1) - ti * ti) * du);
            }
        });
}

template <class S>
Tensor<S> sin(Tensor<S> a) {
    std::vector<S> out(a.numel());
    const S* pa = a.data().data();
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for simd schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = std::sin(pa[i]);
    return detail::make_op<S>("sin", a.shape(), std::move(out), {a},
                              [a](TensorNode<S>& self) mutable {
                                  if (!a.requires_grad()) return;
                                  auto& ga = a.grad_mut();
                                  const S* g = self.grad.data();
                                  const S* x = a.data().data();
                                  for (std::size_t i = 0; i < ga.size(); ++i)
                                      ga[i] += g[i] * std::cos(x[i]);
                              });
}

template <class S>
Tensor<S> cos(Tensor<S> a) {
    std::vector<S> out(a.numel());
    const S* pa = a.data().data();
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for simd schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = std::cos(pa[i]);
    return detail::make_op<S>("cos", a.shape(), std::move(out), {a},
                              [a](TensorNode<S>& self) mutable {
                                  if (!a.requires_grad()) return;
                                  auto& ga = a.grad_mut();
                                  const S* g = self.grad.data();
                                  const S* x = a.data().data();
                                  for (std::size_t i = 0; i < ga.size(); ++i)
                                      ga[i] -= g[i] * std::sin(x[i]);
                              });
}

template <class S>
Tensor<S> sqrt(Tensor<S> a) {
    std::vector<S> out(a.numel());
    const S* pa = a.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(pa[i]);
    return detail::make_op<S>("sqrt", a.shape(), std::move(out), {a},
                              [a](TensorNode<S>& self) mutable {
                                  if (!a.requires_grad()) return;
                                  auto& ga = a.grad_mut();
                                  const S* g = self.grad.data();
                                  const S* y = self.data.data();
                                  for (std::size_t i = 0; i < ga.size(); ++i)
                                      ga[i] += g[i] / (S(2) * y[i]);
                              });
}

// ---- softmax / layer norm over the last axis ----

template <class S>
Tensor<S> softmax_lastdim(Tensor<S> a) {
    if (a.rank() < 1) throw ShapeError("softmax: scalar input");
    const std::size_t w = a.shape().back();
    const std::size_t rows = a.numel() / w;
    std::vector<S> out(a.numel());
    const S* pa = a.data().data();
    const std::ptrdiff_t irows = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < irows; ++r) {
        const S* x = pa + r * w;
        S* y = out.data() + r * w;
        S mx = x[0];
        for (std::size_t j = 1; j < w; ++j) mx = std::max(mx, x[j]);
        double sum = 0;
        for (std::size_t j = 0; j < w; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        const S inv = static_cast<S>(1.0 / sum);
        for (std::size_t j = 0; j < w; ++j) y[j] *= inv;
    }
    return detail::make_op<S>(
        "softmax", a.shape(), std::move(out), {a}, [a, w, rows](TensorNode<S>& self) mutable {
            if (!a.requires_grad()) return;
            auto& ga = a.grad_mut();
            const S* g = self.grad.data();
            const S* y = self.data.data();
            const std::ptrdiff_t irows2 = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static)
            for (std::ptrdiff_t r = 0; r < irows2; ++r) {
                const S* gr = g + r * w;
                const S* yr = y + r * w;
                S* gar = ga.data() + r * w;
                double dot = 0;
                for (std::size_t j = 0; j < w; ++j) dot += double(gr[j]) * double(yr[j]);
                for (std::size_t j = 0; j < w; ++j)
                    gar[j] += yr[j] * (gr[j] - static_cast<S>(dot));
            }
        });
}

// Normalizes the last axis to zero mean / unit variance (no affine part;
// compose with learned scale/shift tensors). Epsilon 1e-5 inside the sqrt.
template <class S>
Tensor<S> layer_norm_lastdim(Tensor<S> a) {
    if (a.rank() < 1) throw ShapeError("layer_norm: scalar input");
    const std::size_t w = a.shape().back();
    const std::size_t rows = a.numel() / w;
    std::vector<S> out(a.numel());
    std::vector<S> invstd(rows);
    const S* pa = a.data().data();
    const std::ptrdiff_t irows = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < irows; ++r) {
        const S* x = pa + r * w;
        S* y = out.data() + r * w;
        double mu = 0;
        for (std::size_t j = 0; j < w; ++j) mu += x[j];
        mu /= w;
        double var = 0;
        for (std::size_t j = 0; j < w; ++j) {
            const double d = x[j] - mu;
            var += d * d;
        }
        var /= w;
        const double is = 1.0 / std::sqrt(var + 1e-5);
        invstd[r] = static_cast<S>(is);
        for (std::size_t j = 0; j < w; ++j) y[j] = static_cast<S>((x[j] - mu) * is);
    }
    return detail::make_op<S>(
        "layer_norm", a.shape(), std::move(out), {a},
        [a, w, rows, invstd = std::move(invstd)](TensorNode<S>& self) mutable {
            if (!a.requires_grad()) return;
            auto& ga = a.grad_mut();
            const S* g = self.grad.data();
            const S* y = self.data.data();
            const std::ptrdiff_t irows2 = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static)
            for (std::ptrdiff_t r = 0; r < irows2; ++r) {
                const S* gr = g + r * w;
                const S* yr = y + r * w;
                S* gar = ga.data() + r * w;
                double gm = 0, gym = 0;
                for (std::size_t j = 0; j < w; ++j) {
                    gm += gr[j];
                    gym += double(gr[j]) * double(yr[j]);
                }
                gm /= w;
                gym /= w;
                const S is = invstd[r];
                for (std::size_t j = 0; j < w; ++j)
                    gar[j] += is * (gr[j] - static_cast<S>(gm) - yr[j] * static_cast<S>(gym));
            }
        });
}

// ---- shape surgery ----

template <class S>
Tensor<S> reshape(Tensor<S> a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    std::vector<S> out = a.data();
    return detail::make_op<S>("reshape", std::move(shape), std::move(out), {a},
                              [a](TensorNode<S>& self) mutable {
                                  detail::accumulate_flat(a, self.grad);
                              });
}

template <class S>
Tensor<S> permute(Tensor<S> a, const std::vector<std::size_t>& perm) {
    const std::size_t r = a.rank();
    if (perm.size() != r) throw ShapeError("permute: perm rank mismatch for " + shape_str(a.shape()));
    Shape oshape(r);
    std::vector<std::ptrdiff_t> in_strides(r, 1), src(r);
    for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * static_cast<std::ptrdiff_t>(a.dim(i));
    std::vector<bool> used(r, false);
    for (std::size_t o = 0; o < r; ++o) {
        if (perm[o] >= r || used[perm[o]]) throw ShapeError("permute: invalid permutation");
        used[perm[o]] = true;
        oshape[o] = a.dim(perm[o]);
        src[o] = in_strides[perm[o]];
    }
    std::vector<S> out(a.numel());
    const S* pa = a.data().data();
    std::vector<std::ptrdiff_t> zero(r, 0);
    detail::bc_for_each(oshape, src, zero,
                        [&](std::size_t oi, std::ptrdiff_t sa, std::ptrdiff_t) { out[oi] = pa[sa]; });
    return detail::make_op<S>(
        "permute", std::move(oshape), std::move(out), {a},
        [a, src, zero](TensorNode<S>& self) mutable {
            if (!a.requires_grad()) return;
            auto& ga = a.grad_mut();
            const S* g = self.grad.data();
            detail::bc_for_each(self.shape, src, zero,
                                [&](std::size_t oi, std::ptrdiff_t sa, std::ptrdiff_t) {
                                    ga[sa] += g[oi];
                                });
        });
}

template <class S>
Tensor<S> slice(Tensor<S> a, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= a.rank() || start + len > a.dim(axis))
        throw ShapeError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of bounds on axis " +
                         std::to_string(axis) + " of " + shape_str(a.shape()));
    Shape oshape = a.shape();
    oshape[axis] = len;
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
    const std::size_t ext = a.dim(axis);
    std::vector<S> out(outer * len * inner);
    const S* pa = a.data().data();
    for (std::size_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * len * inner, pa + (o * ext + start) * inner,
                    len * inner * sizeof(S));
    return detail::make_op<S>(
        "slice", std::move(oshape), std::move(out), {a},
        [a, outer, inner, len, ext, start](TensorNode<S>& self) mutable {
            if (!a.requires_grad()) return;
            auto& ga = a.grad_mut();
            const S* g = self.grad.data();
            for (std::size_t o = 0; o < outer; ++o) {
                S* dst = ga.data() + (o * ext + start) * inner;
                const S* src = g + o * len * inner;
                for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        });
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const std::size_t r = parts[0].rank();
    if (axis >= r) throw ShapeError("concat: axis out of range");
    Shape oshape = parts[0].shape();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < r; ++i)
            if (i != axis && p.dim(i) != oshape[i])
                throw ShapeError("concat: extent mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(parts[0].shape()));
        total += p.dim(axis);
    }
    oshape[axis] = total;
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < r; ++i) inner *= oshape[i];
    for (std::size_t i = 0; i < axis; ++i) outer *= oshape[i];
    std::vector<S> out(shape_numel(oshape));
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t ext = p.dim(axis);
        const S* src = p.data().data();
        for (std::size_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * total + off) * inner, src + o * ext * inner,
                        ext * inner * sizeof(S));
        off += ext;
    }
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(oshape);
    n->data = std::move(out);
    n->op = "concat";
    for (const auto& p : parts)
        if (p.requires_grad()) n->requires_grad = true;
    if (n->requires_grad) {
        for (const auto& p : parts)
            if (p.requires_grad()) n->parents.push_back(p.node());
        auto parts_copy = parts;
        n->backward_fn = [parts_copy, outer, inner, total](TensorNode<S>& self) mutable {
            const S* g = self.grad.data();
            std::size_t off2 = 0;
            for (auto& p : parts_copy) {
                const std::size_t extp = p.numel() / (outer * inner);
                if (p.requires_grad()) {
                    auto& gp = p.grad_mut();
                    for (std::size_t o = 0; o < outer; ++o) {
                        const S* src = g + (o * total + off2) * inner;
                        S* dst = gp.data() + o * extp * inner;
                        for (std::size_t i = 0; i < extp * inner; ++i) dst[i] += src[i];
                    }
                }
                off2 += extp;
            }
        };
    }
    return Tensor<S>(std::move(n));
}

// ---- reductions ----

template <class S>
Tensor<S> sum_axis(Tensor<S> a, std::size_t axis, bool keepdim = false) {
    if (axis >= a.rank()) throw ShapeError("sum_axis: axis out of range for " + shape_str(a.shape()));
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
    const std::size_t ext = a.dim(axis);
    Shape oshape;
    for (std::size_t i = 0; i < a.rank(); ++i) {
        if (i == axis) {
            if (keepdim) oshape.push_back(1);
        } else {
            oshape.push_back(a.dim(i));
        }
    }
    std::vector<S> out(outer * inner);
    const S* pa = a.data().data();
    const std::ptrdiff_t iouter = static_cast<std::ptrdiff_t>(outer);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t o = 0; o < iouter; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            double s = 0;
            const S* x = pa + o * ext * inner + i;
            for (std::size_t e = 0; e < ext; ++e) s += x[e * inner];
            out[o * inner + i] = static_cast<S>(s);
        }
    }
    return detail::make_op<S>(
        "sum_axis", std::move(oshape), std::move(out), {a},
        [a, outer, inner, ext](TensorNode<S>& self) mutable {
            if (!a.requires_grad()) return;
            auto& ga = a.grad_mut();
            const S* g = self.grad.data();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t e = 0; e < ext; ++e) {
                    S* dst = ga.data() + (o * ext + e) * inner;
                    const S* src = g + o * inner;
                    for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                }
        });
}

template <class S>
Tensor<S> mean_axis(Tensor<S> a, std::size_t axis, bool keepdim = false) {
    const S inv = S(1) / static_cast<S>(a.dim(axis));
    return mul_scalar(sum_axis(a, axis, keepdim), inv);
}

template <class S>
Tensor<S> sum_all(Tensor<S> a) {
    double s = 0;
    for (const S v : a.data()) s += v;
    return detail::make_op<S>("sum_all", Shape{}, std::vector<S>{static_cast<S>(s)}, {a},
                              [a](TensorNode<S>& self) mutable {
                                  if (!a.requires_grad()) return;
                                  auto& ga = a.grad_mut();
                                  const S g = self.grad[0];
                                  for (auto& v : ga) v += g;
                              });
}

template <class S>
Tensor<S> mean_all(Tensor<S> a) {
    return mul_scalar(sum_all(a), S(1) / static_cast<S>(a.numel()));
}

// L2 norm along one axis. Backward uses x/max(norm, tiny): the zero-norm
// subgradient is taken as 0 instead of NaN.
template <class S>
Tensor<S> l2_norm_axis(Tensor<S> a, std::size_t axis, bool keepdim = true) {
    if (axis >= a.rank()) throw ShapeError("l2_norm_axis: axis out of range for " + shape_str(a.shape()));
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
    const std::size_t ext = a.dim(axis);
    Shape oshape;
    for (std::size_t i = 0; i < a.rank(); ++i) {
        if (i == axis) {
            if (keepdim) oshape.push_back(1);
        } else {
            oshape.push_back(a.dim(i));
        }
    }
    std::vector<S> out(outer * inner);
    const S* pa = a.data().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            double s = 0;
            const S* x = pa + o * ext * inner + i;
            for (std::size_t e = 0; e < ext; ++e) {
                const double v = x[e * inner];
                s += v * v;
            }
            out[o * inner + i] = static_cast<S>(std::sqrt(s));
        }
    return detail::make_op<S>(
        "l2_norm", std::move(oshape), std::move(out), {a},
        [a, outer, inner, ext](TensorNode<S>& self) mutable {
            if (!a.requires_grad()) return;
            auto& ga = a.grad_mut();
            const S* g = self.grad.data();
            const S* y = self.data.data();
            const S* x = a.data().data();
            constexpr S tiny = std::numeric_limits<S>::min();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t oy = o * inner + i;
                    const S denom = std::max(y[oy], tiny);
                    const S go = g[oy] / denom;
                    for (std::size_t e = 0; e < ext; ++e) {
                        const std::size_t ox = (o * ext + e) * inner + i;
                        ga[ox] += go * x[ox];
                    }
                }
        });
}

// Scatter the last axis into a wider zero-filled axis at fixed indices.
// Used to place in-disk frequency samples back onto the full D*D lattice.
template <class S>
Tensor<S> scatter_lastdim(Tensor<S> a, const std::vector<std::size_t>& indices,
                          std::size_t width) {
    if (a.rank() < 1 || a.shape().back() != indices.size())
        throw ShapeError("scatter_lastdim: index count mismatches " + shape_str(a.shape()));
    const std::size_t m = indices.size();
    const std::size_t rows = a.numel() / m;
    for (auto ix : indices)
        if (ix >= width) throw ShapeError("scatter_lastdim: index out of range");
    Shape oshape = a.shape();
    oshape.back() = width;
    std::vector<S> out(rows * width, S(0));
    const S* pa = a.data().data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < m; ++j) out[r * width + indices[j]] = pa[r * m + j];
    return detail::make_op<S>(
        "scatter_lastdim", std::move(oshape), std::move(out), {a},
        [a, indices, rows, m, width](TensorNode<S>& self) mutable {
            if (!a.requires_grad()) return;
            auto& ga = a.grad_mut();
            const S* g = self.grad.data();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < m; ++j) ga[r * m + j] += g[r * width + indices[j]];
        });
}

// ---- gradient checking ----

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t worst_coord = 0;
    bool nondifferentiable = false;  // a ReLU kink (input exactly 0) was evaluated
};

// Max over coordinates of |analytic - central difference| /
// (|analytic| + |central| + 1e-12) for a scalar-valued f.
template <class S>
GradCheckResult grad_check(const std::function<Tensor<S>(const Tensor<S>&)>& f, const Tensor<S>& x,
                           double step) {
    if (step <= 0) throw ConfigError("grad_check: step must be positive");
    GradCheckResult res;
    const std::uint64_t hits0 = detail::relu_zero_hits;
    Tensor<S> x0 = Tensor<S>::from_data(x.shape(), x.data(), true);
    Tensor<S> y = f(x0);
    if (y.numel() != 1) throw ContractViolation("grad_check: f must be scalar-valued");
    y.backward();
    std::vector<S> analytic = x0.grad();
    if (analytic.empty()) analytic.assign(x.numel(), S(0));
    std::vector<S> base = x.data();
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<S> dp = base, dm = base;
        dp[i] += static_cast<S>(step);
        dm[i] -= static_cast<S>(step);
        const double yp = static_cast<double>(f(Tensor<S>::from_data(x.shape(), dp)).item());
        const double ym = static_cast<double>(f(Tensor<S>::from_data(x.shape(), dm)).item());
        const double num = (yp - ym) / (2.0 * step);
        const double ana = static_cast<double>(analytic[i]);
        if (!std::isfinite(num) || !std::isfinite(ana))
            throw NumericError("grad_check: non-finite value at coordinate " + std::to_string(i));
        const double rel = std::abs(ana - num) / (std::abs(ana) + std::abs(num) + 1e-12);
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_coord = i;
        }
    }
    res.nondifferentiable = detail::relu_zero_hits != hits0;
    return res;
}

inline void reset_relu_kink_counter() { detail::relu_zero_hits = 0; }
inline std::uint64_t relu_kink_count() { return detail::relu_zero_hits; }

}  // namespace cryoforge
