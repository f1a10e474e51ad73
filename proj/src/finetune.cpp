#include "peftkit/finetune.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <optional>

#include "peftkit/checkpoint.hpp"

namespace peftkit {

using nlohmann::json;

namespace {

InstructionExample parse_record(const json& j, const std::string& where) {
    if (!j.is_object()) throw DataError(where + ": record is not a JSON object");
    InstructionExample ex;
    for (const char* key : {"instruction", "input", "output"}) {
        if (!j.contains(key)) throw DataError(where + ": missing key \"" + key + "\"");
        if (!j.at(key).is_string()) {
            throw DataError(where + ": key \"" + key + "\" is not a string");
        }
    }
    ex.instruction = j.at("instruction").get<std::string>();
    ex.input = j.at("input").get<std::string>();
    ex.output = j.at("output").get<std::string>();
    if (ex.instruction.empty()) throw DataError(where + ": \"instruction\" is empty");
    if (ex.output.empty()) throw DataError(where + ": \"output\" is empty");
    return ex;
}

}  // namespace

std::vector<InstructionExample> load_instruction_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open dataset file: " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    size_t first = text.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) {
        throw UsageError("dataset file is empty: " + path.string());
    }

    std::vector<InstructionExample> out;
    if (text[first] == '[') {
        json arr;
        try {
            arr = json::parse(text);
        } catch (const json::exception& e) {
            throw DataError("dataset " + path.string() + ": invalid JSON: " + e.what());
        }
        if (!arr.is_array()) throw DataError("dataset " + path.string() + ": expected an array");
        for (size_t i = 0; i < arr.size(); ++i) {
            out.push_back(parse_record(arr[i], "record " + std::to_string(i)));
        }
    } else {
        std::istringstream lines(text);
        std::string line;
        size_t line_no = 0, index = 0;
        while (std::getline(lines, line)) {
            ++line_no;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            json j;
            try {
                j = json::parse(line);
            } catch (const json::exception& e) {
                throw DataError("record " + std::to_string(index) + " (line " +
                                std::to_string(line_no) + "): invalid JSON: " + e.what());
            }
            out.push_back(parse_record(j, "record " + std::to_string(index) + " (line " +
                                              std::to_string(line_no) + ")"));
            ++index;
        }
    }
    if (out.empty()) throw UsageError("dataset file holds no records: " + path.string());
    return out;
}

PromptTokens format_prompt(const InstructionExample& ex, size_t max_seq_len) {
    std::string prompt = "### Instruction:\n" + ex.instruction + "\n";
    if (!ex.input.empty()) prompt += "### Input:\n" + ex.input + "\n";
    prompt += "### Response:\n";

    PromptTokens pt;
    pt.tokens.push_back(tok::kBos);
    for (unsigned char c : prompt) pt.tokens.push_back(static_cast<int>(c));
    pt.mask.assign(pt.tokens.size(), 0);
    for (unsigned char c : ex.output) {
        pt.tokens.push_back(static_cast<int>(c));
        pt.mask.push_back(1);
    }
    pt.tokens.push_back(tok::kEos);
    pt.mask.push_back(1);

    if (pt.tokens.size() > max_seq_len) {
        pt.tokens.resize(max_seq_len);
        pt.mask.resize(max_seq_len);
        pt.truncated = true;
    }
    return pt;
}

std::string to_string(TrainMethod m) {
    switch (m) {
        case TrainMethod::lora: return "lora";
        case TrainMethod::adapter: return "adapter";
        case TrainMethod::prefix: return "prefix";
    }
    return "lora";
}

TrainMethod train_method_from_string(const std::string& s) {
    if (s == "lora") return TrainMethod::lora;
    if (s == "adapter") return TrainMethod::adapter;
    if (s == "prefix") return TrainMethod::prefix;
    throw UsageError("unknown train method '" + s + "' (expected lora|adapter|prefix)");
}

void TrainConfig::validate() const {
    if (rank < 1 || prefix_len < 1 || batch_size < 1 || max_seq_len < 2) {
        throw UsageError("train config: rank, prefix_len, batch_size must be >= 1 and "
                         "max_seq_len >= 2");
    }
    if (!(learning_rate > 0.0f) || !(grad_clip > 0.0f)) {
        throw UsageError("train config: learning_rate and grad_clip must be positive");
    }
}

json FinetuneReport::to_json() const {
    return json{{"epoch_mean_loss", epoch_mean_loss},
                {"trainable_params", trainable_params},
                {"total_params", total_params},
                {"wall_seconds", wall_seconds},
                {"base_checksum_before", crc64_hex(base_checksum_before)},
                {"base_checksum_after", crc64_hex(base_checksum_after)},
                {"diverged", diverged},
                {"truncated_examples", truncated_examples},
                {"skipped_examples", skipped_examples}};
}

namespace {

struct TrainItem {
    std::vector<int> inputs;
    std::vector<int> targets;
    std::vector<int> tmask;
};

// Next-token pairs: predict tokens[1..] from tokens[..n-1], weighting by
// the response mask. Items with nothing to predict are dropped.
std::optional<TrainItem> make_item(const PromptTokens& pt) {
    if (pt.tokens.size() < 2) return std::nullopt;
    TrainItem item;
    item.inputs.assign(pt.tokens.begin(), pt.tokens.end() - 1);
    item.targets.assign(pt.tokens.begin() + 1, pt.tokens.end());
    item.tmask.assign(pt.mask.begin() + 1, pt.mask.end());
    int total = 0;
    for (int m : item.tmask) total += m;
    if (total == 0) return std::nullopt;
    return item;
}

struct Adam {
    float lr;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    uint64_t t = 0;
    std::vector<std::vector<float>> m, v;

    void init(const std::vector<Tensor*>& params) {
        m.clear();
        v.clear();
        for (const Tensor* p : params) {
            m.emplace_back(p->size(), 0.0f);
            v.emplace_back(p->size(), 0.0f);
        }
    }

    // grad_scale folds in the 1/batch factor; clipping acts on the scaled
    // global norm before the moment updates.
    void step(const std::vector<Tensor*>& params, float grad_scale, float clip_norm) {
        ++t;
        double norm_sq = 0.0;
        for (const Tensor* p : params) {
            if (!p->has_grad()) continue;
            for (float g : p->grad()) {
                const double gs = static_cast<double>(g) * grad_scale;
                norm_sq += gs * gs;
            }
        }
        const double norm = std::sqrt(norm_sq);
        const float clip_factor =
            norm > clip_norm ? static_cast<float>(clip_norm / norm) : 1.0f;

        const float bc1 = 1.0f - std::pow(beta1, static_cast<float>(t));
        const float bc2 = 1.0f - std::pow(beta2, static_cast<float>(t));
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor* p = params[i];
            if (!p->has_grad()) continue;
            const auto& grad = p->grad();
            auto& data = p->mutable_data();
            for (size_t j = 0; j < data.size(); ++j) {
                const float g = grad[j] * grad_scale * clip_factor;
                m[i][j] = beta1 * m[i][j] + (1.0f - beta1) * g;
                v[i][j] = beta2 * v[i][j] + (1.0f - beta2) * g * g;
                const float mhat = m[i][j] / bc1;
                const float vhat = v[i][j] / bc2;
                data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
            p->reset_grad();
        }
    }
};

// Shared loop for adapter-only and full-parameter training. `params` is
// the exact trainable set; everything else stays untouched, which the
// caller verifies via checksums.
void train_loop(const TransformerModel& model, const PeftSet* peft,
                const std::vector<Tensor*>& params, const TrainConfig& cfg,
                const std::vector<TrainItem>& items, FinetuneReport& report) {
    for (Tensor* p : params) p->set_requires_grad(true);

    Adam opt;
    opt.lr = cfg.learning_rate;
    opt.init(params);

    std::vector<size_t> order(items.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<std::vector<float>> snapshot;
    auto take_snapshot = [&] {
        snapshot.clear();
        for (const Tensor* p : params) snapshot.push_back(p->data());
    };
    auto restore_snapshot = [&] {
        for (size_t i = 0; i < params.size(); ++i) {
            params[i]->mutable_data() = snapshot[i];
            params[i]->reset_grad();
        }
    };

    for (size_t epoch = 0; epoch < cfg.epochs && !report.diverged; ++epoch) {
        take_snapshot();
        // Deterministic per-epoch shuffle.
        Rng shuffle_rng(fork_seed(cfg.seed, epoch + 1));
        for (size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);
        }

        double loss_sum = 0.0;
        size_t loss_count = 0;
        size_t batch_fill = 0;
        for (size_t pos = 0; pos < order.size(); ++pos) {
            const TrainItem& item = items[order[pos]];
            GradTape tape;
            double loss_value = std::numeric_limits<double>::quiet_NaN();
            try {
                GradTape::Scope scope(tape);
                Tensor logits = forward(model, item.inputs, peft);
                Tensor loss = cross_entropy(logits, item.targets, item.tmask);
                loss_value = loss.item();
                if (std::isfinite(loss_value)) backward(tape, loss);
            } catch (const NumericError&) {
                // overflowing activations surface as NaN inside a primitive
            }
            if (!std::isfinite(loss_value)) {
                restore_snapshot();
                report.diverged = true;
                break;
            }
            loss_sum += loss_value;
            ++loss_count;
            ++batch_fill;
            if (batch_fill == cfg.batch_size || pos + 1 == order.size()) {
                opt.step(params, 1.0f / static_cast<float>(batch_fill), cfg.grad_clip);
                batch_fill = 0;
            }
        }
        if (!report.diverged && loss_count > 0) {
            report.epoch_mean_loss.push_back(loss_sum / static_cast<double>(loss_count));
        }
    }

    for (Tensor* p : params) {
        p->set_requires_grad(false);
        p->reset_grad();
    }
}

std::vector<TrainItem> prepare_items(const TrainConfig& cfg,
                                     const std::vector<InstructionExample>& dataset,
                                     FinetuneReport& report) {
    std::vector<TrainItem> items;
    items.reserve(dataset.size());
    for (const auto& ex : dataset) {
        PromptTokens pt = format_prompt(ex, cfg.max_seq_len);
        if (pt.truncated) ++report.truncated_examples;
        if (auto item = make_item(pt)) {
            items.push_back(std::move(*item));
        } else {
            ++report.skipped_examples;
        }
    }
    if (items.empty()) {
        throw UsageError("no trainable examples remain after formatting/truncation");
    }
    return items;
}

}  // namespace

std::pair<PeftSet, FinetuneReport> finetune(const TransformerModel& model,
                                            const TrainConfig& config,
                                            const std::vector<InstructionExample>& dataset) {
    config.validate();
    if (dataset.empty()) throw UsageError("finetune requires a non-empty dataset");
    if (config.max_seq_len > model.config.max_seq_len) {
        throw UsageError("train max_seq_len exceeds the model context window");
    }
    if (model.any_quantized()) {
        if (config.method != TrainMethod::lora || config.base_mode != BaseMode::quantized4) {
            throw UsageError(
                "a quantized base is only valid for lora with base_mode quantized4");
        }
    } else if (config.base_mode == BaseMode::quantized4) {
        throw UsageError("base_mode quantized4 requires a quantized base checkpoint");
    }

    PeftSet peft;
    switch (config.method) {
        case TrainMethod::lora:
            peft = make_lora_set(model, config.lora_sites, config.rank, config.seed,
                                 config.lora_scale, config.base_mode);
            break;
        case TrainMethod::adapter:
            peft = make_adapter_set(model, config.rank, config.seed);
            break;
        case TrainMethod::prefix:
            peft = make_prefix_set(model, config.prefix_len, config.seed);
            break;
    }

    FinetuneReport report;
    report.trainable_params = peft.trainable_param_count();
    report.total_params = model.parameter_count() + report.trainable_params;
    report.base_checksum_before = model_checksum(model);

    const auto t0 = std::chrono::steady_clock::now();
    if (config.epochs > 0) {
        const auto items = prepare_items(config, dataset, report);
        std::vector<Tensor*> params;
        for (auto& [name, t] : peft.named_parameters()) params.push_back(t);
        train_loop(model, &peft, params, config, items, report);
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.base_checksum_after = model_checksum(model);
    return {std::move(peft), std::move(report)};
}

FinetuneReport pretrain_full(TransformerModel& model, const TrainConfig& config,
                             const std::vector<InstructionExample>& dataset) {
    config.validate();
    if (dataset.empty()) throw UsageError("pretrain requires a non-empty dataset");
    if (model.any_quantized()) {
        throw UsageError("full-parameter training requires a float base model");
    }
    if (config.max_seq_len > model.config.max_seq_len) {
        throw UsageError("train max_seq_len exceeds the model context window");
    }

    FinetuneReport report;
    report.total_params = model.parameter_count();
    report.trainable_params = report.total_params;
    report.base_checksum_before = model_checksum(model);

    const auto t0 = std::chrono::steady_clock::now();
    if (config.epochs > 0) {
        const auto items = prepare_items(config, dataset, report);
        std::vector<Tensor*> params;
        for (auto& [name, t] : model.named_parameters()) params.push_back(t);
        train_loop(model, nullptr, params, config, items, report);
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.base_checksum_after = model_checksum(model);
    return report;
}

double example_loss(const TransformerModel& model, const PeftSet* peft,
                    const PromptTokens& prompt) {
    auto item = make_item(prompt);
    if (!item) throw UsageError("example has no response tokens to score");
    Tensor logits = forward(model, item->inputs, peft);
    return static_cast<double>(cross_entropy(logits, item->targets, item->tmask).item());
}

}  // namespace peftkit
