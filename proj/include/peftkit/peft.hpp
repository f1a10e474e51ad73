#pragma once

#include <map>
#include <string>
#include <vector>

#include "peftkit/model.hpp"
#include "peftkit/quantize.hpp"
#include "peftkit/tensor.hpp"

namespace peftkit {

enum class PeftMethod { lora, adapter, prefix };
enum class BaseMode { float32, quantized4 };

std::string to_string(PeftMethod m);
PeftMethod peft_method_from_string(const std::string& s);
std::string to_string(BaseMode m);
BaseMode base_mode_from_string(const std::string& s);

/// Low-rank update for one linear site: delta_W = A * B with
/// A [d_in x r], B [r x d_out]. A and B are the only trainable tensors;
/// the attached base weight stays frozen.
struct LoraAdapter {
    std::string site_id;
    Tensor a;
    Tensor b;
    size_t rank = 0;
    float scale = 1.0f;
};

/// A ~ Gaussian(0, 0.02^2) from the seeded generator, B = 0, so the update
/// A*B is exactly zero at initialization.
LoraAdapter lora_init(size_t d_in, size_t d_out, size_t r, uint64_t seed, float scale = 1.0f);

uint64_t lora_param_count(size_t d_in, size_t d_out, size_t r);

/// y = W x + scale * A (B x), with x as columns [d_out x n]. Evaluated
/// right to left; the d_in x d_out product A*B is never materialized.
template <typename S>
TensorT<S> lora_forward(const TensorT<S>& w, const TensorT<S>& a, const TensorT<S>& b,
                        S scale_factor, const TensorT<S>& x) {
    TensorT<S> base = matmul(w, x);
    TensorT<S> update = matmul(a, matmul(b, x));
    return add(base, scale(update, scale_factor));
}

Tensor lora_forward(const Tensor& w, const LoraAdapter& adapter, const Tensor& x);
Tensor lora_forward(const QuantizedMatrix& w, const LoraAdapter& adapter, const Tensor& x);

/// Bottleneck module inserted after a sublayer:
/// out = x + GeLU(x W_down) W_up, rows of x are positions.
struct AdapterLayer {
    std::string site_id;  // "layerN.after_attn" | "layerN.after_ffn"
    Tensor w_down;        // [d x r]
    Tensor w_up;          // [r x d]
};

AdapterLayer adapter_init(const std::string& site_id, size_t d, size_t r, uint64_t seed);

template <typename S>
TensorT<S> adapter_forward(const TensorT<S>& x, const TensorT<S>& w_down,
                           const TensorT<S>& w_up) {
    if (x.cols() != w_down.rows()) {
        throw DimensionError("adapter width mismatch: x " + detail::shape_str(x.shape()) +
                             " vs W_down " + detail::shape_str(w_down.shape()));
    }
    return add(x, matmul(gelu(matmul(x, w_down)), w_up));
}

Tensor adapter_forward(const Tensor& x, const AdapterLayer& layer);

/// Learnable key/value rows prepended to one attention layer,
/// K' = [P_k; K], V' = [P_v; V]. Stored across heads as [p x d_model];
/// per-head slices line up with the head slices of K and V.
struct PrefixAdapter {
    size_t layer = 0;
    Tensor p_k;
    Tensor p_v;
    size_t prefix_len = 0;
};

PrefixAdapter prefix_init(size_t layer, size_t prefix_len, size_t d_model, uint64_t seed);

/// attention(Q, [P_k; K], [P_v; V]); prefix rows are exempt from the
/// causal mask. Empty prefixes degrade to plain attention.
template <typename S>
TensorT<S> prefix_attend(const TensorT<S>& p_k, const TensorT<S>& p_v, const TensorT<S>& q,
                         const TensorT<S>& k, const TensorT<S>& v, bool causal = false) {
    if (p_k.rows() != p_v.rows()) {
        throw DimensionError("prefix K/V length mismatch");
    }
    if (p_k.rows() == 0) return attention(q, k, v, causal, 0);
    if (p_k.cols() != k.cols() || p_v.cols() != v.cols()) {
        throw DimensionError("prefix width mismatch: P_k " + detail::shape_str(p_k.shape()) +
                             " vs K " + detail::shape_str(k.shape()));
    }
    return attention(q, concat_rows(p_k, k), concat_rows(p_v, v), causal, p_k.rows());
}

Tensor prefix_attend(const PrefixAdapter& prefix, const Tensor& q, const Tensor& k,
                     const Tensor& v, bool causal = false);

/// One trained adapter collection. At most one adapter per site;
/// base_mode quantized4 is only meaningful for LoRA (that composition is
/// the 4-bit-base + low-rank-update setup).
struct PeftSet {
    PeftMethod method = PeftMethod::lora;
    BaseMode base_mode = BaseMode::float32;
    std::map<std::string, LoraAdapter> lora;
    std::map<std::string, AdapterLayer> adapters;
    std::map<size_t, PrefixAdapter> prefixes;

    bool empty() const { return lora.empty() && adapters.empty() && prefixes.empty(); }
    std::vector<std::pair<std::string, Tensor*>> named_parameters();
    std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;
    uint64_t trainable_param_count() const;
};

inline const std::vector<std::string> kDefaultLoraSites = {"attn.q", "attn.k", "attn.v"};

/// Builds LoRA adapters for `sites` (short site names, resolved per layer;
/// "output_proj" targets the output head) with rank r on every layer.
PeftSet make_lora_set(const TransformerModel& model, const std::vector<std::string>& sites,
                      size_t r, uint64_t seed, float scale = 1.0f,
                      BaseMode base_mode = BaseMode::float32);

PeftSet make_adapter_set(const TransformerModel& model, size_t r, uint64_t seed);
PeftSet make_prefix_set(const TransformerModel& model, size_t prefix_len, uint64_t seed);

/// Folds LoRA updates into the base weights: W <- W + scale * A * B per
/// attached site. A quantized base is dequantized first, so the result is
/// always a float model with zero attached adapters and exactly the base
/// parameter count. Adapter-layer and prefix sets are structural and
/// cannot be merged.
TransformerModel merge(const TransformerModel& model, const PeftSet& peft);

}  // namespace peftkit
