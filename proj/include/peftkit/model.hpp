#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "peftkit/quantize.hpp"
#include "peftkit/tensor.hpp"

namespace peftkit {

struct PeftSet;  // peft.hpp

enum class FfnVariant { paper, standard };

std::string to_string(FfnVariant v);
FfnVariant ffn_variant_from_string(const std::string& s);

struct TransformerConfig {
    size_t vocab_size = 259;
    size_t d_model = 64;
    size_t n_heads = 4;
    size_t n_layers = 2;
    size_t d_ff = 256;
    size_t max_seq_len = 64;
    FfnVariant ffn_variant = FfnVariant::paper;

    size_t d_k() const { return d_model / n_heads; }
    void validate() const;
    bool operator==(const TransformerConfig&) const = default;
};

// Byte-level tokenizer: ids 0..255 are raw bytes, plus BOS/EOS/PAD.
namespace tok {
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr int kVocab = 259;

std::vector<int> encode(std::string_view text, bool add_bos = false, bool add_eos = false);
std::string decode(const std::vector<int>& ids);  // specials are dropped
}  // namespace tok

/// softmax(Q K^T / sqrt(d_k)) V. With `causal` set, key j may attend from
/// query i only when j <= i, except the first `prefix_len` key rows which
/// are visible to every query (prepended prefix positions). Masked
/// positions get -inf before the softmax.
template <typename S>
TensorT<S> attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                     bool causal = false, size_t prefix_len = 0) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
        throw DimensionError("attention requires 2-D Q, K, V");
    }
    if (q.cols() != k.cols()) {
        throw DimensionError("attention d_k mismatch: Q " + detail::shape_str(q.shape()) +
                             " vs K " + detail::shape_str(k.shape()));
    }
    if (v.rows() != k.rows()) {
        throw DimensionError("attention K/V row mismatch: K " + detail::shape_str(k.shape()) +
                             " vs V " + detail::shape_str(v.shape()));
    }
    const size_t d_k = q.cols();
    TensorT<S> scores = scale(matmul(q, transpose(k)), S(1) / std::sqrt(static_cast<S>(d_k)));
    if (causal) {
        const size_t sq = q.rows(), sk = k.rows();
        TensorT<S> mask({sq, sk});
        const S neg_inf = -std::numeric_limits<S>::infinity();
        for (size_t i = 0; i < sq; ++i) {
            for (size_t j = 0; j < sk; ++j) {
                const bool visible = (j < prefix_len) || (j - prefix_len <= i);
                mask.mutable_data()[i * sk + j] = visible ? S(0) : neg_inf;
            }
        }
        scores = add(scores, mask);
    }
    return matmul(softmax(scores, 1), v);
}

/// paper variant:    GeLU(GeLU(x W1 + b1) W2) + b2
/// standard variant: GeLU(x W1 + b1) W2 + b2
template <typename S>
TensorT<S> ffn(const TensorT<S>& x, const TensorT<S>& w1, const TensorT<S>& b1,
               const TensorT<S>& w2, const TensorT<S>& b2, FfnVariant variant) {
    TensorT<S> inner = gelu(add_bias(matmul(x, w1), b1));
    if (variant == FfnVariant::paper) {
        return add_bias(gelu(matmul(inner, w2)), b2);
    }
    return add_bias(matmul(inner, w2), b2);
}

/// One 2-D weight matrix used as y = x * W. Holds either the dense f32
/// tensor or a frozen 4-bit block-quantized form.
struct LinearSite {
    Tensor weight;
    std::shared_ptr<const QuantizedMatrix> q4;

    bool quantized() const { return q4 != nullptr; }
    size_t d_in() const { return quantized() ? q4->rows : weight.rows(); }
    size_t d_out() const { return quantized() ? q4->cols : weight.cols(); }
    size_t num_elements() const { return d_in() * d_out(); }
};

struct LayerParams {
    LinearSite w_q, w_k, w_v, w_o;  // [d_model x d_model]
    LinearSite w1;                  // [d_model x d_ff]
    Tensor b1;                      // [d_ff]
    LinearSite w2;                  // [d_ff x d_model]
    Tensor b2;                      // [d_model]
    Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};

/// Decoder-only transformer, post-norm residuals, learned absolute
/// positional embeddings. Every linear site is addressable by a stable
/// site id ("layer0.attn.q", ..., "output_proj") for adapter attachment.
struct TransformerModel {
    TransformerConfig config;
    Tensor token_embedding;  // [vocab x d_model]
    Tensor pos_embedding;    // [max_seq_len x d_model]
    std::vector<LayerParams> layers;
    LinearSite output_proj;  // [d_model x vocab]

    static TransformerModel random_init(const TransformerConfig& config, uint64_t seed);

    // Canonical enumerations; order is the checkpoint/serialization order.
    std::vector<std::pair<std::string, Tensor*>> named_parameters();
    std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;
    std::vector<std::pair<std::string, LinearSite*>> linear_sites();
    std::vector<std::pair<std::string, const LinearSite*>> linear_sites() const;

    size_t parameter_count() const;  // includes quantized sites by element count
    bool any_quantized() const;
    TransformerModel clone() const;
};

std::string site_id(size_t layer, const std::string& name);

/// Full forward pass to logits [seq_len x vocab]. Adapters, when supplied,
/// modify exactly the sites they are attached to; a null/empty set
/// reproduces the base model output bit for bit.
Tensor forward(const TransformerModel& model, const std::vector<int>& tokens,
               const PeftSet* peft = nullptr);

/// Mean negative log-likelihood of targets over positions with mask 1.
template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const std::vector<int>& targets,
                         const std::vector<int>& mask) {
    if (logits.rank() != 2) throw DimensionError("cross_entropy expects [seq x vocab] logits");
    const size_t n = logits.rows(), v = logits.cols();
    if (targets.size() != n || mask.size() != n) {
        throw UsageError("cross_entropy targets/mask length must equal sequence length " +
                         std::to_string(n));
    }
    double weight_total = 0;
    for (int m : mask) weight_total += (m != 0 ? 1.0 : 0.0);
    if (weight_total == 0) throw UsageError("cross_entropy: all positions are masked out");
    for (int t : targets) {
        if (t < 0 || static_cast<size_t>(t) >= v) {
            throw UsageError("cross_entropy target " + std::to_string(t) +
                             " out of vocab range");
        }
    }

    // Row-stable log-softmax; probabilities are kept for the backward pass.
    std::vector<S> probs(logits.size());
    double loss_acc = 0;
    for (size_t i = 0; i < n; ++i) {
        const S* row = logits.data().data() + i * v;
        S mx = row[0];
        for (size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (size_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
        const double logsum = std::log(sum) + static_cast<double>(mx);
        for (size_t j = 0; j < v; ++j) {
            probs[i * v + j] =
                static_cast<S>(std::exp(static_cast<double>(row[j]) - logsum));
        }
        if (mask[i] != 0) loss_acc += logsum - static_cast<double>(row[targets[i]]);
    }

    TensorT<S> out = TensorT<S>::scalar(static_cast<S>(loss_acc / weight_total));
    auto ln = logits.node(), on = out.node();
    const S inv_w = static_cast<S>(1.0 / weight_total);
    detail::maybe_record(out, {logits},
                         [ln, on, probs = std::move(probs), targets, mask, n, v, inv_w]() {
        detail::ensure_grad(ln);
        const S g = (*on->grad)[0] * inv_w;
        for (size_t i = 0; i < n; ++i) {
            if (mask[i] == 0) continue;
            for (size_t j = 0; j < v; ++j) {
                S p = probs[i * v + j];
                if (static_cast<size_t>(targets[i]) == j) p -= S(1);
                (*ln->grad)[i * v + j] += g * p;
            }
        }
    });
    return out;
}

/// Greedy decoding; stops at EOS, max_new_tokens, or the context window.
/// Returns only the generated ids.
std::vector<int> generate_greedy(const TransformerModel& model, const PeftSet* peft,
                                 std::vector<int> context, size_t max_new_tokens);

/// Converts selected 2-D weight sites to 4-bit form (embeddings, biases and
/// norm parameters stay f32).
TransformerModel quantize_model(const TransformerModel& model, size_t block_size);
TransformerModel dequantize_model(const TransformerModel& model);

}  // namespace peftkit
