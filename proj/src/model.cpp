#include "peftkit/model.hpp"

#include <cmath>

#include "peftkit/peft.hpp"

namespace peftkit {

std::string to_string(FfnVariant v) {
    return v == FfnVariant::paper ? "paper" : "standard";
}

FfnVariant ffn_variant_from_string(const std::string& s) {
    if (s == "paper") return FfnVariant::paper;
    if (s == "standard") return FfnVariant::standard;
    throw UsageError("unknown ffn variant '" + s + "' (expected paper|standard)");
}

void TransformerConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || n_heads < 1 || n_layers < 1 || d_ff < 1 ||
        max_seq_len < 1) {
        throw UsageError("transformer config dimensions must all be >= 1");
    }
    if (d_model % n_heads != 0) {
        throw UsageError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                         std::to_string(n_heads));
    }
}

namespace tok {

std::vector<int> encode(std::string_view text, bool add_bos, bool add_eos) {
    std::vector<int> ids;
    ids.reserve(text.size() + 2);
    if (add_bos) ids.push_back(kBos);
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    if (add_eos) ids.push_back(kEos);
    return ids;
}

std::string decode(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
    }
    return out;
}

}  // namespace tok

std::string site_id(size_t layer, const std::string& name) {
    return "layer" + std::to_string(layer) + "." + name;
}

TransformerModel TransformerModel::random_init(const TransformerConfig& config, uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const float stddev = 0.02f;
    auto matrix = [&](size_t r, size_t c) { return Tensor::gaussian({r, c}, rng, 0.0f, stddev); };

    TransformerModel m;
    m.config = config;
    m.token_embedding = matrix(config.vocab_size, config.d_model);
    m.pos_embedding = matrix(config.max_seq_len, config.d_model);
    m.layers.resize(config.n_layers);
    for (auto& layer : m.layers) {
        layer.w_q.weight = matrix(config.d_model, config.d_model);
        layer.w_k.weight = matrix(config.d_model, config.d_model);
        layer.w_v.weight = matrix(config.d_model, config.d_model);
        layer.w_o.weight = matrix(config.d_model, config.d_model);
        layer.w1.weight = matrix(config.d_model, config.d_ff);
        layer.b1 = Tensor::zeros({config.d_ff});
        layer.w2.weight = matrix(config.d_ff, config.d_model);
        layer.b2 = Tensor::zeros({config.d_model});
        layer.ln1_gamma = Tensor::full({config.d_model}, 1.0f);
        layer.ln1_beta = Tensor::zeros({config.d_model});
        layer.ln2_gamma = Tensor::full({config.d_model}, 1.0f);
        layer.ln2_beta = Tensor::zeros({config.d_model});
    }
    m.output_proj.weight = matrix(config.d_model, config.vocab_size);
    return m;
}

std::vector<std::pair<std::string, Tensor*>> TransformerModel::named_parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("token_embedding", &token_embedding);
    out.emplace_back("pos_embedding", &pos_embedding);
    for (size_t i = 0; i < layers.size(); ++i) {
        auto& l = layers[i];
        if (!l.w_q.quantized()) out.emplace_back(site_id(i, "attn.q"), &l.w_q.weight);
        if (!l.w_k.quantized()) out.emplace_back(site_id(i, "attn.k"), &l.w_k.weight);
        if (!l.w_v.quantized()) out.emplace_back(site_id(i, "attn.v"), &l.w_v.weight);
        if (!l.w_o.quantized()) out.emplace_back(site_id(i, "attn.o"), &l.w_o.weight);
        if (!l.w1.quantized()) out.emplace_back(site_id(i, "ffn.w1"), &l.w1.weight);
        out.emplace_back(site_id(i, "ffn.b1"), &l.b1);
        if (!l.w2.quantized()) out.emplace_back(site_id(i, "ffn.w2"), &l.w2.weight);
        out.emplace_back(site_id(i, "ffn.b2"), &l.b2);
        out.emplace_back(site_id(i, "ln1.gamma"), &l.ln1_gamma);
        out.emplace_back(site_id(i, "ln1.beta"), &l.ln1_beta);
        out.emplace_back(site_id(i, "ln2.gamma"), &l.ln2_gamma);
        out.emplace_back(site_id(i, "ln2.beta"), &l.ln2_beta);
    }
    if (!output_proj.quantized()) out.emplace_back("output_proj", &output_proj.weight);
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> TransformerModel::named_parameters() const {
    auto mut = const_cast<TransformerModel*>(this)->named_parameters();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(mut.size());
    for (auto& [name, t] : mut) out.emplace_back(name, t);
    return out;
}

std::vector<std::pair<std::string, LinearSite*>> TransformerModel::linear_sites() {
    std::vector<std::pair<std::string, LinearSite*>> out;
    for (size_t i = 0; i < layers.size(); ++i) {
        auto& l = layers[i];
        out.emplace_back(site_id(i, "attn.q"), &l.w_q);
        out.emplace_back(site_id(i, "attn.k"), &l.w_k);
        out.emplace_back(site_id(i, "attn.v"), &l.w_v);
        out.emplace_back(site_id(i, "attn.o"), &l.w_o);
        out.emplace_back(site_id(i, "ffn.w1"), &l.w1);
        out.emplace_back(site_id(i, "ffn.w2"), &l.w2);
    }
    out.emplace_back("output_proj", &output_proj);
    return out;
}

std::vector<std::pair<std::string, const LinearSite*>> TransformerModel::linear_sites() const {
    auto mut = const_cast<TransformerModel*>(this)->linear_sites();
    std::vector<std::pair<std::string, const LinearSite*>> out;
    out.reserve(mut.size());
    for (auto& [name, s] : mut) out.emplace_back(name, s);
    return out;
}

size_t TransformerModel::parameter_count() const {
    size_t n = token_embedding.size() + pos_embedding.size();
    for (const auto& l : layers) {
        n += l.w_q.num_elements() + l.w_k.num_elements() + l.w_v.num_elements() +
             l.w_o.num_elements() + l.w1.num_elements() + l.w2.num_elements();
        n += l.b1.size() + l.b2.size();
        n += l.ln1_gamma.size() + l.ln1_beta.size() + l.ln2_gamma.size() + l.ln2_beta.size();
    }
    n += output_proj.num_elements();
    return n;
}

bool TransformerModel::any_quantized() const {
    for (const auto& [name, site] : linear_sites()) {
        if (site->quantized()) return true;
    }
    return false;
}

TransformerModel TransformerModel::clone() const {
    TransformerModel m = *this;  // shares tensor nodes and q4 pointers
    for (auto& [name, t] : m.named_parameters()) *t = t->clone();
    return m;
}

namespace {

// y = x * W for one site, with the LoRA update added when attached.
// The low-rank product is applied as (x A) B, never forming A*B.
Tensor site_apply(const Tensor& x, const LinearSite& site, const std::string& id,
                  const PeftSet* peft) {
    Tensor y = site.quantized() ? qmatmul_rows(x, site.q4) : matmul(x, site.weight);
    if (peft != nullptr && peft->method == PeftMethod::lora) {
        auto it = peft->lora.find(id);
        if (it != peft->lora.end()) {
            const LoraAdapter& ad = it->second;
            y = add(y, scale(matmul(matmul(x, ad.a), ad.b), ad.scale));
        }
    }
    return y;
}

const AdapterLayer* find_adapter(const PeftSet* peft, const std::string& id) {
    if (peft == nullptr || peft->method != PeftMethod::adapter) return nullptr;
    auto it = peft->adapters.find(id);
    return it == peft->adapters.end() ? nullptr : &it->second;
}

}  // namespace

Tensor forward(const TransformerModel& model, const std::vector<int>& tokens,
               const PeftSet* peft) {
    const auto& cfg = model.config;
    if (tokens.empty()) throw UsageError("forward requires at least one token");
    if (tokens.size() > cfg.max_seq_len) {
        throw UsageError("sequence length " + std::to_string(tokens.size()) +
                         " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    for (int t : tokens) {
        if (t < 0 || static_cast<size_t>(t) >= cfg.vocab_size) {
            throw UsageError("token id " + std::to_string(t) + " out of range [0, " +
                             std::to_string(cfg.vocab_size) + ")");
        }
    }

    std::vector<int> positions(tokens.size());
    for (size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);

    Tensor x = add(embedding_rows(model.token_embedding, tokens),
                   embedding_rows(model.pos_embedding, positions));

    const size_t d_k = cfg.d_k();
    for (size_t li = 0; li < model.layers.size(); ++li) {
        const LayerParams& l = model.layers[li];

        Tensor q = site_apply(x, l.w_q, site_id(li, "attn.q"), peft);
        Tensor k = site_apply(x, l.w_k, site_id(li, "attn.k"), peft);
        Tensor v = site_apply(x, l.w_v, site_id(li, "attn.v"), peft);

        const PrefixAdapter* prefix = nullptr;
        if (peft != nullptr && peft->method == PeftMethod::prefix) {
            auto it = peft->prefixes.find(li);
            if (it != peft->prefixes.end()) prefix = &it->second;
        }

        std::vector<Tensor> heads;
        heads.reserve(cfg.n_heads);
        for (size_t h = 0; h < cfg.n_heads; ++h) {
            Tensor qh = slice_cols(q, h * d_k, d_k);
            Tensor kh = slice_cols(k, h * d_k, d_k);
            Tensor vh = slice_cols(v, h * d_k, d_k);
            if (prefix != nullptr) {
                heads.push_back(prefix_attend(slice_cols(prefix->p_k, h * d_k, d_k),
                                              slice_cols(prefix->p_v, h * d_k, d_k), qh, kh,
                                              vh, /*causal=*/true));
            } else {
                heads.push_back(attention(qh, kh, vh, /*causal=*/true));
            }
        }
        Tensor attn_out = site_apply(concat_cols(heads), l.w_o, site_id(li, "attn.o"), peft);
        if (const AdapterLayer* ad = find_adapter(peft, site_id(li, "after_attn"))) {
            attn_out = adapter_forward(attn_out, *ad);
        }
        x = layer_norm(add(x, attn_out), l.ln1_gamma, l.ln1_beta);

        Tensor inner = gelu(add_bias(site_apply(x, l.w1, site_id(li, "ffn.w1"), peft), l.b1));
        Tensor proj = site_apply(inner, l.w2, site_id(li, "ffn.w2"), peft);
        Tensor ffn_out = cfg.ffn_variant == FfnVariant::paper ? add_bias(gelu(proj), l.b2)
                                                              : add_bias(proj, l.b2);
        if (const AdapterLayer* ad = find_adapter(peft, site_id(li, "after_ffn"))) {
            ffn_out = adapter_forward(ffn_out, *ad);
        }
        x = layer_norm(add(x, ffn_out), l.ln2_gamma, l.ln2_beta);
    }

    return site_apply(x, model.output_proj, "output_proj", peft);
}

std::vector<int> generate_greedy(const TransformerModel& model, const PeftSet* peft,
                                 std::vector<int> context, size_t max_new_tokens) {
    if (context.empty()) throw UsageError("generate_greedy requires a non-empty context");
    std::vector<int> generated;
    for (size_t step = 0; step < max_new_tokens; ++step) {
        if (context.size() >= model.config.max_seq_len) break;
        Tensor logits = forward(model, context, peft);
        const size_t v = logits.cols();
        const float* row = logits.data().data() + (logits.rows() - 1) * v;
        size_t best = 0;
        for (size_t j = 1; j < v; ++j) {
            if (row[j] > row[best]) best = j;
        }
        const int next = static_cast<int>(best);
        if (next == tok::kEos) break;
        context.push_back(next);
        generated.push_back(next);
    }
    return generated;
}

TransformerModel quantize_model(const TransformerModel& model, size_t block_size) {
    if (model.any_quantized()) throw UsageError("model is already quantized");
    TransformerModel out = model.clone();
    for (auto& [name, site] : out.linear_sites()) {
        site->q4 = std::make_shared<const QuantizedMatrix>(
            quantize_4bit(site->weight, block_size));
        site->weight = Tensor();
    }
    return out;
}

TransformerModel dequantize_model(const TransformerModel& model) {
    TransformerModel out = model.clone();
    for (auto& [name, site] : out.linear_sites()) {
        if (site->quantized()) {
            site->weight = dequantize(*site->q4);
            site->q4.reset();
        }
    }
    return out;
}

}  // namespace peftkit
