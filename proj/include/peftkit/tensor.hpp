#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "peftkit/error.hpp"
#include "peftkit/rng.hpp"

namespace peftkit {

namespace detail {

// Multiply-accumulate counter, incremented by every gemm-like kernel.
// Tests use it to bound the arithmetic cost of the low-rank forward path.
inline uint64_t g_mac_count = 0;

inline std::string shape_str(const std::vector<size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

inline size_t numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
}

}  // namespace detail

inline uint64_t mac_count() { return detail::g_mac_count; }
inline void reset_mac_count() { detail::g_mac_count = 0; }

template <typename S>
struct TensorNodeT {
    std::vector<size_t> shape;
    std::vector<S> data;  // row-major
    bool requires_grad = false;
    std::optional<std::vector<S>> grad;  // absent until backward populates it
};

/// Dense row-major tensor. Copies share storage; use clone() to detach.
/// Immutable after construction except grad population and explicit
/// single-threaded parameter updates during training.
template <typename S>
class TensorT {
  public:
    using Node = TensorNodeT<S>;

    TensorT() : node_(std::make_shared<Node>()) {}

    explicit TensorT(std::vector<size_t> shape) : node_(std::make_shared<Node>()) {
        node_->shape = std::move(shape);
        node_->data.assign(detail::numel(node_->shape), S(0));
    }

    TensorT(std::vector<size_t> shape, std::vector<S> data)
        : node_(std::make_shared<Node>()) {
        if (detail::numel(shape) != data.size()) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + detail::shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
    }

    explicit TensorT(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static TensorT zeros(std::vector<size_t> shape) { return TensorT(std::move(shape)); }

    static TensorT full(std::vector<size_t> shape, S value) {
        TensorT t(std::move(shape));
        std::fill(t.node_->data.begin(), t.node_->data.end(), value);
        return t;
    }

    static TensorT scalar(S value) { return TensorT({1}, {value}); }

    static TensorT gaussian(std::vector<size_t> shape, Rng& rng, S mean, S stddev) {
        TensorT t(std::move(shape));
        for (S& v : t.node_->data) {
            v = static_cast<S>(mean + stddev * static_cast<S>(rng.next_gaussian()));
        }
        return t;
    }

    const std::vector<size_t>& shape() const { return node_->shape; }
    size_t rank() const { return node_->shape.size(); }
    size_t size() const { return node_->data.size(); }
    size_t rows() const { return node_->shape.empty() ? 0 : node_->shape[0]; }
    size_t cols() const { return node_->shape.size() < 2 ? 0 : node_->shape[1]; }

    const std::vector<S>& data() const { return node_->data; }
    std::vector<S>& mutable_data() { return node_->data; }

    S at(size_t i, size_t j) const { return node_->data[i * cols() + j]; }
    S& at(size_t i, size_t j) { return node_->data[i * cols() + j]; }

    S item() const {
        if (size() != 1) {
            throw UsageError("item() requires a scalar tensor, got shape " +
                             detail::shape_str(node_->shape));
        }
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    TensorT& set_requires_grad(bool on) {
        node_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return node_->grad.has_value(); }
    const std::vector<S>& grad() const {
        if (!node_->grad) {
            throw UsageError("gradient has not been populated; run backward first");
        }
        return *node_->grad;
    }
    void reset_grad() { node_->grad.reset(); }

    TensorT clone() const {
        TensorT t;
        t.node_->shape = node_->shape;
        t.node_->data = node_->data;
        t.node_->requires_grad = node_->requires_grad;
        return t;
    }

    const std::shared_ptr<Node>& node() const { return node_; }

  private:
    std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;

/// Ordered record of the primitive operations of one forward computation.
/// Entries are appended in execution order, so iterating the record in
/// reverse is a reverse topological walk that visits every node once.
template <typename S>
class GradTapeT {
  public:
    struct Entry {
        std::shared_ptr<TensorNodeT<S>> output;
        std::vector<std::shared_ptr<TensorNodeT<S>>> inputs;
        std::function<void()> backprop;  // accumulates output grad into inputs
    };

    void record(Entry e) { entries_.push_back(std::move(e)); }
    size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }
    void clear() { entries_.clear(); }

    static GradTapeT*& active() {
        thread_local GradTapeT* current = nullptr;
        return current;
    }

    // RAII activation: ops executed inside the scope record onto this tape.
    class Scope {
      public:
        explicit Scope(GradTapeT& tape) : prev_(active()) { active() = &tape; }
        ~Scope() { active() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

      private:
        GradTapeT* prev_;
    };

  private:
    std::vector<Entry> entries_;
};

using GradTape = GradTapeT<float>;

namespace detail {

template <typename S>
void ensure_grad(const std::shared_ptr<TensorNodeT<S>>& node) {
    if (!node->grad) node->grad.emplace(node->data.size(), S(0));
}

template <typename S>
void accumulate(const std::shared_ptr<TensorNodeT<S>>& node, const std::vector<S>& delta) {
    ensure_grad(node);
    auto& g = *node->grad;
    for (size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

// C += A(m x k) * B(k x n)
template <typename S>
void gemm_nn(const S* a, const S* b, S* c, size_t m, size_t k, size_t n) {
    g_mac_count += static_cast<uint64_t>(m) * k * n;
    for (size_t i = 0; i < m; ++i) {
        for (size_t p = 0; p < k; ++p) {
            const S aip = a[i * k + p];
            if (aip == S(0)) continue;
            const S* brow = b + p * n;
            S* crow = c + i * n;
            for (size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

// C += A(m x n) * B(k x n)^T  -> (m x k)
template <typename S>
void gemm_nt(const S* a, const S* b, S* c, size_t m, size_t n, size_t k) {
    g_mac_count += static_cast<uint64_t>(m) * n * k;
    for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < k; ++j) {
            S acc = 0;
            const S* arow = a + i * n;
            const S* brow = b + j * n;
            for (size_t p = 0; p < n; ++p) acc += arow[p] * brow[p];
            c[i * k + j] += acc;
        }
    }
}

// C += A(m x k)^T * B(m x n) -> (k x n)
template <typename S>
void gemm_tn(const S* a, const S* b, S* c, size_t m, size_t k, size_t n) {
    g_mac_count += static_cast<uint64_t>(m) * k * n;
    for (size_t p = 0; p < m; ++p) {
        for (size_t i = 0; i < k; ++i) {
            const S api = a[p * k + i];
            if (api == S(0)) continue;
            const S* brow = b + p * n;
            S* crow = c + i * n;
            for (size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
        }
    }
}

// Records an op result on the active tape when gradients are needed.
// Returns true when recorded; the closure must accumulate the output's
// grad into every requires-grad input.
template <typename S>
bool maybe_record(TensorT<S>& out, const std::vector<TensorT<S>>& inputs,
                  std::function<void()> backprop) {
    auto* tape = GradTapeT<S>::active();
    if (!tape) return false;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return false;
    out.set_requires_grad(true);
    typename GradTapeT<S>::Entry e;
    e.output = out.node();
    for (const auto& in : inputs) e.inputs.push_back(in.node());
    e.backprop = std::move(backprop);
    tape->record(std::move(e));
    return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw DimensionError("matmul shape mismatch: " + detail::shape_str(a.shape()) +
                             " x " + detail::shape_str(b.shape()));
    }
    const size_t m = a.rows(), k = a.cols(), n = b.cols();
    TensorT<S> out({m, n});
    detail::gemm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);

    auto an = a.node(), bn = b.node(), on = out.node();
    detail::maybe_record(out, {a, b}, [an, bn, on, m, k, n]() {
        const auto& g = *on->grad;
        if (an->requires_grad) {
            detail::ensure_grad(an);
            detail::gemm_nt(g.data(), bn->data.data(), an->grad->data(), m, n, k);
        }
        if (bn->requires_grad) {
            detail::ensure_grad(bn);
            detail::gemm_tn(an->data.data(), g.data(), bn->grad->data(), m, k, n);
        }
    });
    return out;
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("add shape mismatch: " + detail::shape_str(a.shape()) +
                             " vs " + detail::shape_str(b.shape()));
    }
    TensorT<S> out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out.mutable_data()[i] = a.data()[i] + b.data()[i];

    auto an = a.node(), bn = b.node(), on = out.node();
    detail::maybe_record(out, {a, b}, [an, bn, on]() {
        if (an->requires_grad) detail::accumulate(an, *on->grad);
        if (bn->requires_grad) detail::accumulate(bn, *on->grad);
    });
    return out;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("sub shape mismatch: " + detail::shape_str(a.shape()) +
                             " vs " + detail::shape_str(b.shape()));
    }
    TensorT<S> out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out.mutable_data()[i] = a.data()[i] - b.data()[i];

    auto an = a.node(), bn = b.node(), on = out.node();
    detail::maybe_record(out, {a, b}, [an, bn, on]() {
        if (an->requires_grad) detail::accumulate(an, *on->grad);
        if (bn->requires_grad) {
            detail::ensure_grad(bn);
            auto& g = *bn->grad;
            for (size_t i = 0; i < g.size(); ++i) g[i] -= (*on->grad)[i];
        }
    });
    return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("mul shape mismatch: " + detail::shape_str(a.shape()) +
                             " vs " + detail::shape_str(b.shape()));
    }
    TensorT<S> out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out.mutable_data()[i] = a.data()[i] * b.data()[i];

    auto an = a.node(), bn = b.node(), on = out.node();
    detail::maybe_record(out, {a, b}, [an, bn, on]() {
        const auto& g = *on->grad;
        if (an->requires_grad) {
            detail::ensure_grad(an);
            for (size_t i = 0; i < g.size(); ++i) (*an->grad)[i] += g[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            detail::ensure_grad(bn);
            for (size_t i = 0; i < g.size(); ++i) (*bn->grad)[i] += g[i] * an->data[i];
        }
    });
    return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S factor) {
    TensorT<S> out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out.mutable_data()[i] = a.data()[i] * factor;

    auto an = a.node(), on = out.node();
    detail::maybe_record(out, {a}, [an, on, factor]() {
        detail::ensure_grad(an);
        for (size_t i = 0; i < an->grad->size(); ++i) (*an->grad)[i] += (*on->grad)[i] * factor;
    });
    return out;
}

// x: [rows x cols] plus bias broadcast over rows. The only broadcast form
// the tensor core supports.
template <typename S>
TensorT<S> add_bias(const TensorT<S>& x, const TensorT<S>& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || bias.shape()[0] != x.cols()) {
        throw DimensionError("add_bias shape mismatch: " + detail::shape_str(x.shape()) +
                             " vs " + detail::shape_str(bias.shape()));
    }
    const size_t r = x.rows(), c = x.cols();
    TensorT<S> out({r, c});
    for (size_t i = 0; i < r; ++i) {
        for (size_t j = 0; j < c; ++j) out.mutable_data()[i * c + j] = x.data()[i * c + j] + bias.data()[j];
    }
    auto xn = x.node(), bn = bias.node(), on = out.node();
    detail::maybe_record(out, {x, bias}, [xn, bn, on, r, c]() {
        const auto& g = *on->grad;
        if (xn->requires_grad) detail::accumulate(xn, g);
        if (bn->requires_grad) {
            detail::ensure_grad(bn);
            for (size_t i = 0; i < r; ++i) {
                for (size_t j = 0; j < c; ++j) (*bn->grad)[j] += g[i * c + j];
            }
        }
    });
    return out;
}

/// Numerically stable softmax along `axis`: max is subtracted per fiber
/// before exponentiation. Rejects NaN input.
template <typename S>
TensorT<S> softmax(const TensorT<S>& x, size_t axis) {
    if (axis >= x.rank()) {
        throw UsageError("softmax axis " + std::to_string(axis) + " out of range for shape " +
                         detail::shape_str(x.shape()));
    }
    for (S v : x.data()) {
        if (std::isnan(v)) throw NumericError("softmax input contains NaN");
    }
    const auto& shape = x.shape();
    const size_t axis_len = shape[axis];
    size_t inner = 1, outer = 1;
    for (size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    for (size_t i = 0; i < axis; ++i) outer *= shape[i];

    TensorT<S> out(shape);
    const S* in = x.data().data();
    S* o = out.mutable_data().data();
    for (size_t a = 0; a < outer; ++a) {
        for (size_t b = 0; b < inner; ++b) {
            const size_t base = a * axis_len * inner + b;
            S mx = -std::numeric_limits<S>::infinity();
            for (size_t i = 0; i < axis_len; ++i) mx = std::max(mx, in[base + i * inner]);
            S sum = 0;
            for (size_t i = 0; i < axis_len; ++i) {
                const S e = std::exp(in[base + i * inner] - mx);
                o[base + i * inner] = e;
                sum += e;
            }
            const S inv = S(1) / sum;
            for (size_t i = 0; i < axis_len; ++i) o[base + i * inner] *= inv;
        }
    }

    auto xn = x.node(), on = out.node();
    detail::maybe_record(out, {x}, [xn, on, outer, inner, axis_len]() {
        detail::ensure_grad(xn);
        const auto& g = *on->grad;
        const auto& s = on->data;
        for (size_t a = 0; a < outer; ++a) {
            for (size_t b = 0; b < inner; ++b) {
                const size_t base = a * axis_len * inner + b;
                S dot = 0;
                for (size_t i = 0; i < axis_len; ++i) dot += g[base + i * inner] * s[base + i * inner];
                for (size_t i = 0; i < axis_len; ++i) {
                    const size_t idx = base + i * inner;
                    (*xn->grad)[idx] += s[idx] * (g[idx] - dot);
                }
            }
        }
    });
    return out;
}

// Exact erf form: x * Phi(x), not the tanh approximation.
template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
    TensorT<S> out(x.shape());
    const S inv_sqrt2 = S(1) / std::sqrt(S(2));
    for (size_t i = 0; i < x.size(); ++i) {
        const S v = x.data()[i];
        out.mutable_data()[i] = S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2));
    }
    auto xn = x.node(), on = out.node();
    detail::maybe_record(out, {x}, [xn, on, inv_sqrt2]() {
        detail::ensure_grad(xn);
        const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * std::numbers::pi_v<S>);
        for (size_t i = 0; i < xn->data.size(); ++i) {
            const S v = xn->data[i];
            const S phi_cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
            const S phi_pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
            (*xn->grad)[i] += (*on->grad)[i] * (phi_cdf + v * phi_pdf);
        }
    });
    return out;
}

// Per-row normalization over the last dimension, then affine gamma/beta.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      S epsilon = S(1e-5)) {
    if (x.rank() < 1) throw DimensionError("layer_norm requires rank >= 1");
    const size_t d = x.shape().back();
    if (gamma.size() != d || beta.size() != d) {
        throw DimensionError("layer_norm gamma/beta must match last dimension " +
                             std::to_string(d));
    }
    const size_t rows = x.size() / d;
    TensorT<S> out(x.shape());
    std::vector<S> xhat(x.size()), inv_std(rows);
    for (size_t r = 0; r < rows; ++r) {
        const S* row = x.data().data() + r * d;
        S mean = 0;
        for (size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<S>(d);
        S var = 0;
        for (size_t j = 0; j < d; ++j) {
            const S c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<S>(d);
        const S istd = S(1) / std::sqrt(var + epsilon);
        inv_std[r] = istd;
        for (size_t j = 0; j < d; ++j) {
            const S h = (row[j] - mean) * istd;
            xhat[r * d + j] = h;
            out.mutable_data()[r * d + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }

    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    detail::maybe_record(out, {x, gamma, beta},
                         [xn, gn, bn, on, rows, d, xhat = std::move(xhat),
                          inv_std = std::move(inv_std)]() {
        const auto& g = *on->grad;
        for (size_t r = 0; r < rows; ++r) {
            const size_t base = r * d;
            if (gn->requires_grad) {
                detail::ensure_grad(gn);
                for (size_t j = 0; j < d; ++j) (*gn->grad)[j] += g[base + j] * xhat[base + j];
            }
            if (bn->requires_grad) {
                detail::ensure_grad(bn);
                for (size_t j = 0; j < d; ++j) (*bn->grad)[j] += g[base + j];
            }
            if (xn->requires_grad) {
                detail::ensure_grad(xn);
                S mean_gy = 0, mean_gyx = 0;
                for (size_t j = 0; j < d; ++j) {
                    const S gy = g[base + j] * gn->data[j];
                    mean_gy += gy;
                    mean_gyx += gy * xhat[base + j];
                }
                mean_gy /= static_cast<S>(d);
                mean_gyx /= static_cast<S>(d);
                for (size_t j = 0; j < d; ++j) {
                    const S gy = g[base + j] * gn->data[j];
                    (*xn->grad)[base + j] +=
                        inv_std[r] * (gy - mean_gy - xhat[base + j] * mean_gyx);
                }
            }
        }
    });
    return out;
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& x) {
    if (x.rank() != 2) throw DimensionError("transpose requires a 2-D tensor");
    const size_t r = x.rows(), c = x.cols();
    TensorT<S> out({c, r});
    for (size_t i = 0; i < r; ++i) {
        for (size_t j = 0; j < c; ++j) out.mutable_data()[j * r + i] = x.data()[i * c + j];
    }
    auto xn = x.node(), on = out.node();
    detail::maybe_record(out, {x}, [xn, on, r, c]() {
        detail::ensure_grad(xn);
        for (size_t i = 0; i < r; ++i) {
            for (size_t j = 0; j < c; ++j) (*xn->grad)[i * c + j] += (*on->grad)[j * r + i];
        }
    });
    return out;
}

template <typename S>
TensorT<S> concat_rows(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
        throw DimensionError("concat_rows column mismatch: " + detail::shape_str(a.shape()) +
                             " vs " + detail::shape_str(b.shape()));
    }
    const size_t c = a.cols();
    TensorT<S> out({a.rows() + b.rows(), c});
    std::copy(a.data().begin(), a.data().end(), out.mutable_data().begin());
    std::copy(b.data().begin(), b.data().end(), out.mutable_data().begin() + a.size());

    auto an = a.node(), bn = b.node(), on = out.node();
    const size_t split = a.size();
    detail::maybe_record(out, {a, b}, [an, bn, on, split]() {
        const auto& g = *on->grad;
        if (an->requires_grad) {
            detail::ensure_grad(an);
            for (size_t i = 0; i < split; ++i) (*an->grad)[i] += g[i];
        }
        if (bn->requires_grad) {
            detail::ensure_grad(bn);
            for (size_t i = split; i < g.size(); ++i) (*bn->grad)[i - split] += g[i];
        }
    });
    return out;
}

template <typename S>
TensorT<S> slice_cols(const TensorT<S>& x, size_t start, size_t len) {
    if (x.rank() != 2 || start + len > x.cols()) {
        throw DimensionError("slice_cols [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") out of range for " +
                             detail::shape_str(x.shape()));
    }
    const size_t r = x.rows(), c = x.cols();
    TensorT<S> out({r, len});
    for (size_t i = 0; i < r; ++i) {
        std::copy(x.data().begin() + i * c + start, x.data().begin() + i * c + start + len,
                  out.mutable_data().begin() + i * len);
    }
    auto xn = x.node(), on = out.node();
    detail::maybe_record(out, {x}, [xn, on, r, c, start, len]() {
        detail::ensure_grad(xn);
        for (size_t i = 0; i < r; ++i) {
            for (size_t j = 0; j < len; ++j) {
                (*xn->grad)[i * c + start + j] += (*on->grad)[i * len + j];
            }
        }
    });
    return out;
}

template <typename S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw UsageError("concat_cols requires at least one part");
    const size_t r = parts[0].rows();
    size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.rows() != r) {
            throw DimensionError("concat_cols row mismatch at " + detail::shape_str(p.shape()));
        }
        total += p.cols();
    }
    TensorT<S> out({r, total});
    size_t off = 0;
    for (const auto& p : parts) {
        const size_t c = p.cols();
        for (size_t i = 0; i < r; ++i) {
            std::copy(p.data().begin() + i * c, p.data().begin() + (i + 1) * c,
                      out.mutable_data().begin() + i * total + off);
        }
        off += c;
    }
    std::vector<std::shared_ptr<TensorNodeT<S>>> nodes;
    std::vector<size_t> widths;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        widths.push_back(p.cols());
    }
    auto on = out.node();
    detail::maybe_record(out, parts, [nodes, widths, on, r, total]() {
        const auto& g = *on->grad;
        size_t off = 0;
        for (size_t k = 0; k < nodes.size(); ++k) {
            const size_t c = widths[k];
            if (nodes[k]->requires_grad) {
                detail::ensure_grad(nodes[k]);
                for (size_t i = 0; i < r; ++i) {
                    for (size_t j = 0; j < c; ++j) {
                        (*nodes[k]->grad)[i * c + j] += g[i * total + off + j];
                    }
                }
            }
            off += c;
        }
    });
    return out;
}

// Gathers table rows by id; gradient scatter-adds back into the table.
template <typename S>
TensorT<S> embedding_rows(const TensorT<S>& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw DimensionError("embedding table must be 2-D");
    const size_t v = table.rows(), d = table.cols();
    for (int id : ids) {
        if (id < 0 || static_cast<size_t>(id) >= v) {
            throw UsageError("embedding id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(v) + ")");
        }
    }
    TensorT<S> out({ids.size(), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        std::copy(table.data().begin() + static_cast<size_t>(ids[i]) * d,
                  table.data().begin() + (static_cast<size_t>(ids[i]) + 1) * d,
                  out.mutable_data().begin() + i * d);
    }
    auto tn = table.node(), on = out.node();
    detail::maybe_record(out, {table}, [tn, on, ids, d]() {
        detail::ensure_grad(tn);
        for (size_t i = 0; i < ids.size(); ++i) {
            for (size_t j = 0; j < d; ++j) {
                (*tn->grad)[static_cast<size_t>(ids[i]) * d + j] += (*on->grad)[i * d + j];
            }
        }
    });
    return out;
}

template <typename S>
TensorT<S> sum(const TensorT<S>& x) {
    S total = 0;
    for (S v : x.data()) total += v;
    TensorT<S> out = TensorT<S>::scalar(total);
    auto xn = x.node(), on = out.node();
    detail::maybe_record(out, {x}, [xn, on]() {
        detail::ensure_grad(xn);
        const S g = (*on->grad)[0];
        for (S& v : *xn->grad) v += g;
    });
    return out;
}

template <typename S>
TensorT<S> mean(const TensorT<S>& x) {
    if (x.size() == 0) throw UsageError("mean of empty tensor");
    S total = 0;
    for (S v : x.data()) total += v;
    const S inv = S(1) / static_cast<S>(x.size());
    TensorT<S> out = TensorT<S>::scalar(total * inv);
    auto xn = x.node(), on = out.node();
    detail::maybe_record(out, {x}, [xn, on, inv]() {
        detail::ensure_grad(xn);
        const S g = (*on->grad)[0] * inv;
        for (S& v : *xn->grad) v += g;
    });
    return out;
}

/// Reverse pass: populates grad (= d loss / d tensor) on every
/// requires-grad tensor that participated in the taped computation.
/// Participating tensors that do not influence the loss end with a
/// zero-filled grad.
template <typename S>
void backward(GradTapeT<S>& tape, const TensorT<S>& loss) {
    if (loss.size() != 1) {
        throw UsageError("backward requires a scalar loss, got shape " +
                         detail::shape_str(loss.shape()));
    }
    bool on_tape = false;
    for (const auto& e : tape.entries()) {
        if (e.output == loss.node()) on_tape = true;
    }
    if (!on_tape) throw UsageError("loss tensor is not an output recorded on this tape");

    for (const auto& e : tape.entries()) {
        detail::ensure_grad(e.output);
        for (const auto& in : e.inputs) {
            if (in->requires_grad) detail::ensure_grad(in);
        }
    }
    (*loss.node()->grad)[0] = S(1);

    const auto& entries = tape.entries();
    for (auto it = entries.rbegin(); it != entries.rend(); ++it) it->backprop();
}

}  // namespace peftkit
