#include "peftkit/peft.hpp"

namespace peftkit {

std::string to_string(PeftMethod m) {
    switch (m) {
        case PeftMethod::lora: return "lora";
        case PeftMethod::adapter: return "adapter";
        case PeftMethod::prefix: return "prefix";
    }
    return "lora";
}

PeftMethod peft_method_from_string(const std::string& s) {
    if (s == "lora") return PeftMethod::lora;
    if (s == "adapter") return PeftMethod::adapter;
    if (s == "prefix") return PeftMethod::prefix;
    throw UsageError("unknown peft method '" + s + "' (expected lora|adapter|prefix)");
}

std::string to_string(BaseMode m) {
    return m == BaseMode::float32 ? "float32" : "quantized4";
}

BaseMode base_mode_from_string(const std::string& s) {
    if (s == "float32") return BaseMode::float32;
    if (s == "quantized4") return BaseMode::quantized4;
    throw UsageError("unknown base mode '" + s + "' (expected float32|quantized4)");
}

LoraAdapter lora_init(size_t d_in, size_t d_out, size_t r, uint64_t seed, float scale) {
    if (r < 1 || r > std::min(d_in, d_out)) {
        throw UsageError("lora rank " + std::to_string(r) + " out of range [1, " +
                         std::to_string(std::min(d_in, d_out)) + "]");
    }
    Rng rng(seed);
    LoraAdapter ad;
    ad.rank = r;
    ad.scale = scale;
    ad.a = Tensor::gaussian({d_in, r}, rng, 0.0f, 0.02f);
    ad.b = Tensor::zeros({r, d_out});
    ad.a.set_requires_grad(true);
    ad.b.set_requires_grad(true);
    return ad;
}

uint64_t lora_param_count(size_t d_in, size_t d_out, size_t r) {
    if (d_in < 1 || d_out < 1 || r < 1) throw UsageError("lora_param_count dims must be positive");
    return static_cast<uint64_t>(d_in) * r + static_cast<uint64_t>(r) * d_out;
}

Tensor lora_forward(const Tensor& w, const LoraAdapter& adapter, const Tensor& x) {
    return lora_forward(w, adapter.a, adapter.b, adapter.scale, x);
}

Tensor lora_forward(const QuantizedMatrix& w, const LoraAdapter& adapter, const Tensor& x) {
    Tensor base = qmatmul(w, x);
    Tensor update = matmul(adapter.a, matmul(adapter.b, x));
    return add(base, scale(update, adapter.scale));
}

AdapterLayer adapter_init(const std::string& site_id, size_t d, size_t r, uint64_t seed) {
    if (r < 1 || r >= d) {
        throw UsageError("adapter bottleneck r=" + std::to_string(r) +
                         " must satisfy 1 <= r < d=" + std::to_string(d));
    }
    Rng rng(seed);
    AdapterLayer layer;
    layer.site_id = site_id;
    layer.w_down = Tensor::gaussian({d, r}, rng, 0.0f, 0.02f);
    layer.w_up = Tensor::zeros({r, d});  // zero up-projection: identity at init
    layer.w_down.set_requires_grad(true);
    layer.w_up.set_requires_grad(true);
    return layer;
}

Tensor adapter_forward(const Tensor& x, const AdapterLayer& layer) {
    return adapter_forward(x, layer.w_down, layer.w_up);
}

PrefixAdapter prefix_init(size_t layer, size_t prefix_len, size_t d_model, uint64_t seed) {
    if (prefix_len < 1) throw UsageError("prefix length must be >= 1");
    Rng rng(seed);
    PrefixAdapter p;
    p.layer = layer;
    p.prefix_len = prefix_len;
    p.p_k = Tensor::gaussian({prefix_len, d_model}, rng, 0.0f, 0.02f);
    p.p_v = Tensor::gaussian({prefix_len, d_model}, rng, 0.0f, 0.02f);
    p.p_k.set_requires_grad(true);
    p.p_v.set_requires_grad(true);
    return p;
}

Tensor prefix_attend(const PrefixAdapter& prefix, const Tensor& q, const Tensor& k,
                     const Tensor& v, bool causal) {
    return prefix_attend(prefix.p_k, prefix.p_v, q, k, v, causal);
}

std::vector<std::pair<std::string, Tensor*>> PeftSet::named_parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& [id, ad] : lora) {
        out.emplace_back(id + ".lora_a", &ad.a);
        out.emplace_back(id + ".lora_b", &ad.b);
    }
    for (auto& [id, ad] : adapters) {
        out.emplace_back(id + ".down", &ad.w_down);
        out.emplace_back(id + ".up", &ad.w_up);
    }
    for (auto& [layer, p] : prefixes) {
        out.emplace_back("layer" + std::to_string(layer) + ".prefix.k", &p.p_k);
        out.emplace_back("layer" + std::to_string(layer) + ".prefix.v", &p.p_v);
    }
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> PeftSet::named_parameters() const {
    auto mut = const_cast<PeftSet*>(this)->named_parameters();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(mut.size());
    for (auto& [name, t] : mut) out.emplace_back(name, t);
    return out;
}

uint64_t PeftSet::trainable_param_count() const {
    uint64_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t->size();
    return n;
}

PeftSet make_lora_set(const TransformerModel& model, const std::vector<std::string>& sites,
                      size_t r, uint64_t seed, float scale, BaseMode base_mode) {
    PeftSet set;
    set.method = PeftMethod::lora;
    set.base_mode = base_mode;
    uint64_t stream = 0;
    for (const std::string& short_name : sites) {
        if (short_name == "output_proj") {
            const auto& site = model.output_proj;
            LoraAdapter ad = lora_init(site.d_in(), site.d_out(), r,
                                       fork_seed(seed, stream++), scale);
            ad.site_id = "output_proj";
            set.lora.emplace("output_proj", std::move(ad));
            continue;
        }
        for (size_t li = 0; li < model.layers.size(); ++li) {
            const std::string id = site_id(li, short_name);
            const LinearSite* site = nullptr;
            for (const auto& [name, s] : model.linear_sites()) {
                if (name == id) site = s;
            }
            if (site == nullptr) throw UsageError("unknown lora site '" + short_name + "'");
            LoraAdapter ad =
                lora_init(site->d_in(), site->d_out(), r, fork_seed(seed, stream++), scale);
            ad.site_id = id;
            set.lora.emplace(id, std::move(ad));
        }
    }
    return set;
}

PeftSet make_adapter_set(const TransformerModel& model, size_t r, uint64_t seed) {
    PeftSet set;
    set.method = PeftMethod::adapter;
    uint64_t stream = 0;
    for (size_t li = 0; li < model.layers.size(); ++li) {
        for (const char* where : {"after_attn", "after_ffn"}) {
            const std::string id = site_id(li, where);
            set.adapters.emplace(
                id, adapter_init(id, model.config.d_model, r, fork_seed(seed, stream++)));
        }
    }
    return set;
}

PeftSet make_prefix_set(const TransformerModel& model, size_t prefix_len, uint64_t seed) {
    PeftSet set;
    set.method = PeftMethod::prefix;
    for (size_t li = 0; li < model.layers.size(); ++li) {
        set.prefixes.emplace(
            li, prefix_init(li, prefix_len, model.config.d_model, fork_seed(seed, li)));
    }
    return set;
}

TransformerModel merge(const TransformerModel& model, const PeftSet& peft) {
    if (peft.method != PeftMethod::lora) {
        throw UsageError("only LoRA adapters fold into base weights; method '" +
                         to_string(peft.method) + "' is structural and not mergeable");
    }
    TransformerModel merged =
        model.any_quantized() ? dequantize_model(model) : model.clone();

    auto sites = merged.linear_sites();
    for (const auto& [id, ad] : peft.lora) {
        LinearSite* site = nullptr;
        for (auto& [name, s] : sites) {
            if (name == id) site = s;
        }
        if (site == nullptr) {
            throw UsageError("adapter site '" + id + "' does not exist in the base model");
        }
        if (ad.a.rows() != site->d_in() || ad.b.cols() != site->d_out()) {
            throw DimensionError("adapter at '" + id + "' does not match site shape");
        }
        // W += scale * A * B
        Tensor delta({site->d_in(), site->d_out()});
        detail::gemm_nn(ad.a.data().data(), ad.b.data().data(), delta.mutable_data().data(),
                        ad.a.rows(), ad.rank, ad.b.cols());
        auto& w = site->weight.mutable_data();
        for (size_t i = 0; i < w.size(); ++i) w[i] += ad.scale * delta.data()[i];
    }
    return merged;
}

}  // namespace peftkit
