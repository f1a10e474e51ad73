#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "peftkit/finetune.hpp"
#include "peftkit/model.hpp"

namespace peftkit {

struct InitOptions {
    std::string out;
    TransformerConfig config;
    uint64_t seed = 42;
    bool force = false;
};

struct QuantizeOptions {
    std::string in;
    std::string out;
    int bits = 4;
    size_t block = 64;
    uint64_t seed = 42;
    bool force = false;
};

// Byte accounting printed by the quantize command, weight sites only.
struct QuantizeSizes {
    uint64_t num_weights = 0;
    uint64_t f32_bytes = 0;
    uint64_t q4_code_bytes = 0;
    uint64_t q4_overhead_bytes = 0;

    double weight_ratio() const {
        return q4_code_bytes == 0 ? 0.0
                                  : static_cast<double>(f32_bytes) /
                                        static_cast<double>(q4_code_bytes);
    }
};

QuantizeSizes quantize_sizes(const TransformerModel& quantized);

struct FinetuneCmdOptions {
    std::string base;
    std::string data;
    std::string out;
    std::string report_path;           // default: <out>/report.json
    std::string method = "lora";       // lora|adapter|prefix|full
    TrainConfig train;
    bool force = false;
};

struct MergeOptions {
    std::string base;
    std::string adapters;
    std::string out;
    uint64_t seed = 42;
    bool force = false;
};

struct EvalOptions {
    std::string base;
    std::string ft;             // defaults to base (self-evaluation)
    std::string base_adapters;  // optional adapter checkpoints to attach
    std::string ft_adapters;
    std::string task;
    std::string task_ft;  // optional per-side prediction file
    std::string kind = "completion";
    double epsilon = 0.01;
    double z = 1.96;
    size_t max_new_tokens = 16;
    std::string out = "eval_report.json";
    uint64_t seed = 42;
};

struct ReportOptions {
    std::string in;
};

int cmd_init(const InitOptions& opts);
int cmd_quantize(const QuantizeOptions& opts);
int cmd_finetune(const FinetuneCmdOptions& opts);
int cmd_merge(const MergeOptions& opts);
int cmd_eval(const EvalOptions& opts);
int cmd_report(const ReportOptions& opts);

/// Full argument parsing plus exit-code mapping:
/// 0 success, 2 usage/config, 3 data, 4 numeric failure.
int cli_main(int argc, char** argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace peftkit
