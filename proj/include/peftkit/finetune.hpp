#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "peftkit/model.hpp"
#include "peftkit/peft.hpp"

namespace peftkit {

struct InstructionExample {
    std::string instruction;
    std::string input;  // may be empty
    std::string output;
};

/// Loads a UTF-8 JSON array or JSON-lines file of records with keys
/// instruction/input/output, preserving order. Malformed or incomplete
/// records are rejected with their index (and line for JSON-lines).
std::vector<InstructionExample> load_instruction_dataset(const std::filesystem::path& path);

struct PromptTokens {
    std::vector<int> tokens;  // BOS + prompt + response + EOS
    std::vector<int> mask;    // 1 on response tokens and EOS, 0 elsewhere
    bool truncated = false;
};

/// Template:
///   ### Instruction:\n{instruction}\n### Input:\n{input}\n### Response:\n{output}<EOS>
/// The Input block is omitted when input is empty. Sequences longer than
/// max_seq_len are cut from the right (truncating the response first).
PromptTokens format_prompt(const InstructionExample& ex, size_t max_seq_len);

enum class TrainMethod { lora, adapter, prefix };
std::string to_string(TrainMethod m);
TrainMethod train_method_from_string(const std::string& s);

struct TrainConfig {
    TrainMethod method = TrainMethod::lora;
    size_t rank = 8;        // LoRA rank / adapter bottleneck
    size_t prefix_len = 8;  // prefix method only
    float learning_rate = 1e-3f;
    size_t batch_size = 8;
    size_t epochs = 1;
    size_t max_seq_len = 64;
    uint64_t seed = 42;
    BaseMode base_mode = BaseMode::float32;
    float lora_scale = 1.0f;
    std::vector<std::string> lora_sites = kDefaultLoraSites;
    float grad_clip = 1.0f;  // global norm

    void validate() const;
};

struct FinetuneReport {
    std::vector<double> epoch_mean_loss;
    uint64_t trainable_params = 0;
    uint64_t total_params = 0;
    double wall_seconds = 0.0;
    uint64_t base_checksum_before = 0;
    uint64_t base_checksum_after = 0;
    bool diverged = false;
    size_t truncated_examples = 0;
    size_t skipped_examples = 0;

    nlohmann::json to_json() const;
};

/// Supervised fine-tuning of adapter parameters only: Adam (beta1 0.9,
/// beta2 0.999, eps 1e-8) on the masked cross entropy, gradient clipping
/// at global norm grad_clip. Base weights are frozen; the report carries
/// the base checksum before and after as evidence. On divergence (non-
/// finite loss) training stops and the adapters from the last completed
/// epoch are returned with the diverged flag set.
std::pair<PeftSet, FinetuneReport> finetune(const TransformerModel& model,
                                            const TrainConfig& config,
                                            const std::vector<InstructionExample>& dataset);

/// Full-parameter training of every model tensor, same loop and optimizer.
/// Used to give a freshly initialized model its base capabilities before a
/// parameter-efficient run; mutates the model in place.
FinetuneReport pretrain_full(TransformerModel& model, const TrainConfig& config,
                             const std::vector<InstructionExample>& dataset);

/// Masked mean loss of one formatted example under the current parameters;
/// no gradients are recorded.
double example_loss(const TransformerModel& model, const PeftSet* peft,
                    const PromptTokens& prompt);

}  // namespace peftkit
