#include "peftkit/commands.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "peftkit/checkpoint.hpp"
#include "peftkit/evalkit.hpp"

namespace peftkit {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

int64_t now_unix_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

void add_checkpoint_digests(RunManifest& m, const std::string& dir) {
    if (dir.empty()) return;
    for (const char* file : {"manifest.json", "weights.bin"}) {
        const fs::path p = fs::path(dir) / file;
        if (fs::exists(p)) m.input_digests.emplace_back(p.string(), file_crc64(p));
    }
}

void write_json_file(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

}  // namespace

int cmd_init(const InitOptions& opts) {
    RunManifest run;
    run.command = "init";
    run.seed = opts.seed;
    run.started_unix_ms = now_unix_ms();
    run.config = json{{"out", opts.out},
                      {"vocab_size", opts.config.vocab_size},
                      {"d_model", opts.config.d_model},
                      {"n_heads", opts.config.n_heads},
                      {"n_layers", opts.config.n_layers},
                      {"d_ff", opts.config.d_ff},
                      {"max_seq_len", opts.config.max_seq_len},
                      {"ffn_variant", to_string(opts.config.ffn_variant)},
                      {"force", opts.force}};

    TransformerModel model = TransformerModel::random_init(opts.config, opts.seed);
    save_model_checkpoint(opts.out, model, opts.force);

    std::cout << "initialized model checkpoint at " << opts.out << " ("
              << model.parameter_count() << " parameters, seed " << opts.seed << ")\n";

    run.finished_unix_ms = now_unix_ms();
    write_run_manifest(fs::path(opts.out) / "run.json", run);
    return 0;
}

QuantizeSizes quantize_sizes(const TransformerModel& quantized) {
    QuantizeSizes sizes;
    for (const auto& [name, site] : quantized.linear_sites()) {
        if (!site->quantized()) continue;
        sizes.num_weights += site->q4->num_elements();
        sizes.q4_overhead_bytes += static_cast<uint64_t>(site->q4->scales.size()) * 4;
    }
    sizes.f32_bytes = model_size_bytes(32, sizes.num_weights, 0);
    sizes.q4_code_bytes = model_size_bytes(4, sizes.num_weights, 0);
    return sizes;
}

int cmd_quantize(const QuantizeOptions& opts) {
    if (opts.bits != 4) {
        throw UsageError("--bits " + std::to_string(opts.bits) +
                         " is unsupported; only 4-bit quantization is implemented");
    }
    RunManifest run;
    run.command = "quantize";
    run.seed = opts.seed;
    run.started_unix_ms = now_unix_ms();
    run.config = json{{"in", opts.in}, {"out", opts.out}, {"bits", opts.bits},
                      {"block", opts.block}, {"force", opts.force}};
    add_checkpoint_digests(run, opts.in);

    TransformerModel model = load_model_checkpoint(opts.in);
    if (model.any_quantized()) {
        throw UsageError("input checkpoint is already quantized: " + opts.in);
    }
    TransformerModel quantized = quantize_model(model, opts.block);
    save_model_checkpoint(opts.out, quantized, opts.force);

    const QuantizeSizes sizes = quantize_sizes(quantized);
    std::printf("model size = size_datatype x num weights\n");
    std::printf("  before: 32 bits x %llu weights = %llu bytes\n",
                static_cast<unsigned long long>(sizes.num_weights),
                static_cast<unsigned long long>(sizes.f32_bytes));
    std::printf("  after:   4 bits x %llu weights = %llu bytes + %llu scale bytes\n",
                static_cast<unsigned long long>(sizes.num_weights),
                static_cast<unsigned long long>(sizes.q4_code_bytes),
                static_cast<unsigned long long>(sizes.q4_overhead_bytes));
    std::printf("  weight-only ratio: %.2fx (block size %zu)\n", sizes.weight_ratio(),
                opts.block);

    run.finished_unix_ms = now_unix_ms();
    write_run_manifest(fs::path(opts.out) / "run.json", run);
    return 0;
}

int cmd_finetune(const FinetuneCmdOptions& opts) {
    RunManifest run;
    run.command = "finetune";
    run.seed = opts.train.seed;
    run.started_unix_ms = now_unix_ms();
    run.config = json{{"base", opts.base},
                      {"data", opts.data},
                      {"out", opts.out},
                      {"method", opts.method},
                      {"rank", opts.train.rank},
                      {"prefix_len", opts.train.prefix_len},
                      {"learning_rate", opts.train.learning_rate},
                      {"batch_size", opts.train.batch_size},
                      {"epochs", opts.train.epochs},
                      {"max_seq_len", opts.train.max_seq_len},
                      {"lora_scale", opts.train.lora_scale},
                      {"lora_sites", opts.train.lora_sites},
                      {"force", opts.force}};
    add_checkpoint_digests(run, opts.base);
    run.input_digests.emplace_back(opts.data, file_crc64(opts.data));

    TransformerModel model = load_model_checkpoint(opts.base);
    const auto dataset = load_instruction_dataset(opts.data);

    TrainConfig train = opts.train;
    train.base_mode = model.any_quantized() ? BaseMode::quantized4 : BaseMode::float32;

    FinetuneReport report;
    if (opts.method == "full") {
        report = pretrain_full(model, train, dataset);
        save_model_checkpoint(opts.out, model, opts.force);
    } else {
        train.method = train_method_from_string(opts.method);
        auto [peft, ft_report] = finetune(model, train, dataset);
        report = std::move(ft_report);
        save_adapter_checkpoint(opts.out, peft, opts.force);
    }

    const fs::path report_path = opts.report_path.empty()
                                     ? fs::path(opts.out) / "report.json"
                                     : fs::path(opts.report_path);
    write_json_file(report_path, report.to_json());

    std::cout << "method " << opts.method << ": " << report.trainable_params << " / "
              << report.total_params << " trainable parameters";
    if (!report.epoch_mean_loss.empty()) {
        std::cout << ", loss " << report.epoch_mean_loss.front() << " -> "
                  << report.epoch_mean_loss.back();
    }
    std::cout << " (" << report.wall_seconds << " s)\n";
    if (report.diverged) {
        std::cout << "training diverged; adapters restored to the last completed epoch\n";
    }

    run.finished_unix_ms = now_unix_ms();
    write_run_manifest(fs::path(opts.out) / "run.json", run);
    return report.diverged ? 4 : 0;
}

int cmd_merge(const MergeOptions& opts) {
    RunManifest run;
    run.command = "merge";
    run.seed = opts.seed;
    run.started_unix_ms = now_unix_ms();
    run.config = json{{"base", opts.base}, {"adapters", opts.adapters}, {"out", opts.out},
                      {"force", opts.force}};
    add_checkpoint_digests(run, opts.base);
    add_checkpoint_digests(run, opts.adapters);

    TransformerModel model = load_model_checkpoint(opts.base);
    PeftSet peft = load_adapter_checkpoint(opts.adapters);
    TransformerModel merged = merge(model, peft);
    save_model_checkpoint(opts.out, merged, opts.force);

    std::cout << "merged " << peft.lora.size() << " adapters into " << opts.out << " ("
              << merged.parameter_count() << " parameters)\n";

    run.finished_unix_ms = now_unix_ms();
    write_run_manifest(fs::path(opts.out) / "run.json", run);
    return 0;
}

namespace {

struct LoadedSide {
    TransformerModel model;
    PeftSet peft;
    bool has_peft = false;
};

LoadedSide load_side(const std::string& model_dir, const std::string& adapter_dir) {
    LoadedSide side{load_model_checkpoint(model_dir), {}, false};
    if (!adapter_dir.empty()) {
        side.peft = load_adapter_checkpoint(adapter_dir);
        side.has_peft = true;
    }
    return side;
}

}  // namespace

int cmd_eval(const EvalOptions& opts) {
    RunManifest run;
    run.command = "eval";
    run.seed = opts.seed;
    run.started_unix_ms = now_unix_ms();
    const std::string ft_dir = opts.ft.empty() ? opts.base : opts.ft;
    run.config = json{{"base", opts.base},
                      {"ft", ft_dir},
                      {"base_adapters", opts.base_adapters},
                      {"ft_adapters", opts.ft_adapters},
                      {"task", opts.task},
                      {"task_ft", opts.task_ft},
                      {"kind", opts.kind},
                      {"epsilon", opts.epsilon},
                      {"z", opts.z},
                      {"max_new_tokens", opts.max_new_tokens},
                      {"out", opts.out}};
    add_checkpoint_digests(run, opts.base);
    if (!opts.ft.empty()) add_checkpoint_digests(run, opts.ft);
    run.input_digests.emplace_back(opts.task, file_crc64(opts.task));
    if (!opts.task_ft.empty()) {
        run.input_digests.emplace_back(opts.task_ft, file_crc64(opts.task_ft));
    }

    const RecordKind kind = record_kind_from_string(opts.kind);
    const auto base_records = load_task_file(opts.task, kind);
    const auto ft_records =
        opts.task_ft.empty() ? base_records : load_task_file(opts.task_ft, kind);

    const LoadedSide base_side = load_side(opts.base, opts.base_adapters);
    const LoadedSide ft_side = load_side(ft_dir, opts.ft_adapters);

    EvalConfig config;
    config.epsilon = opts.epsilon;
    config.z = opts.z;

    const ModelScorer base_scorer = make_scorer(
        base_side.model, base_side.has_peft ? &base_side.peft : nullptr, opts.max_new_tokens);
    const ModelScorer ft_scorer = make_scorer(
        ft_side.model, ft_side.has_peft ? &ft_side.peft : nullptr, opts.max_new_tokens);

    const MetricReport report =
        evaluate_pair(base_scorer, ft_scorer, base_records, ft_records, config);
    std::cout << report.render_table();
    write_json_file(opts.out, report.to_json());

    run.finished_unix_ms = now_unix_ms();
    write_run_manifest(opts.out + ".run.json", run);
    return 0;
}

int cmd_report(const ReportOptions& opts) {
    std::ifstream in(opts.in, std::ios::binary);
    if (!in) throw DataError("cannot open report file: " + opts.in);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("invalid report JSON in " + opts.in + ": " + e.what());
    }
    std::cout << MetricReport::from_json(j).render_table();
    return 0;
}

namespace {

uint64_t default_seed_from_env() {
    const char* env = std::getenv("PEFTKIT_SEED");
    if (env == nullptr || *env == '\0') return 42;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == nullptr || *end != '\0') {
        throw UsageError("PEFTKIT_SEED is not an unsigned integer: " + std::string(env));
    }
    return v;
}

}  // namespace

int cli_main(int argc, char** argv) {
    try {
        const uint64_t env_seed = default_seed_from_env();

        CLI::App app{"desk-scale parameter-efficient fine-tuning toolkit"};
        app.require_subcommand(1);

        InitOptions init_opts;
        init_opts.seed = env_seed;
        std::string init_ffn = "paper";
        auto* init_cmd = app.add_subcommand("init", "write a seeded random model checkpoint");
        init_cmd->add_option("--out", init_opts.out, "output checkpoint directory")->required();
        init_cmd->add_option("--vocab", init_opts.config.vocab_size, "vocabulary size");
        init_cmd->add_option("--d-model", init_opts.config.d_model, "hidden width");
        init_cmd->add_option("--n-heads", init_opts.config.n_heads, "attention heads");
        init_cmd->add_option("--n-layers", init_opts.config.n_layers, "layer count");
        init_cmd->add_option("--d-ff", init_opts.config.d_ff, "FFN inner width");
        init_cmd->add_option("--max-seq", init_opts.config.max_seq_len, "context window");
        init_cmd->add_option("--ffn-variant", init_ffn, "paper|standard");
        init_cmd->add_option("--seed", init_opts.seed, "RNG seed");
        init_cmd->add_flag("--force", init_opts.force, "overwrite an existing checkpoint");

        QuantizeOptions q_opts;
        q_opts.seed = env_seed;
        auto* q_cmd = app.add_subcommand("quantize", "convert weight sites to 4-bit blocks");
        q_cmd->add_option("--in", q_opts.in, "f32 model checkpoint")->required();
        q_cmd->add_option("--out", q_opts.out, "output checkpoint directory")->required();
        q_cmd->add_option("--bits", q_opts.bits, "bit width (4)");
        q_cmd->add_option("--block", q_opts.block, "elements per scale block");
        q_cmd->add_flag("--force", q_opts.force, "overwrite an existing checkpoint");

        FinetuneCmdOptions ft_opts;
        ft_opts.train.seed = env_seed;
        std::string ft_sites;
        auto* ft_cmd = app.add_subcommand("finetune", "train adapters on an instruction dataset");
        ft_cmd->add_option("--base", ft_opts.base, "base model checkpoint")->required();
        ft_cmd->add_option("--data", ft_opts.data, "instruction dataset (JSON/JSONL)")->required();
        ft_cmd->add_option("--out", ft_opts.out, "output checkpoint directory")->required();
        ft_cmd->add_option("--method", ft_opts.method, "lora|adapter|prefix|full");
        ft_cmd->add_option("--rank", ft_opts.train.rank, "LoRA rank / adapter bottleneck");
        ft_cmd->add_option("--prefix-length", ft_opts.train.prefix_len, "prefix length");
        ft_cmd->add_option("--lr", ft_opts.train.learning_rate, "learning rate");
        ft_cmd->add_option("--batch", ft_opts.train.batch_size, "sequences per optimizer step");
        ft_cmd->add_option("--epochs", ft_opts.train.epochs, "training epochs");
        ft_cmd->add_option("--max-seq", ft_opts.train.max_seq_len, "training sequence cap");
        ft_cmd->add_option("--scale", ft_opts.train.lora_scale, "multiplier on the A*B update");
        ft_cmd->add_option("--sites", ft_sites, "comma list of LoRA sites (default attn.q,attn.k,attn.v)");
        ft_cmd->add_option("--seed", ft_opts.train.seed, "RNG seed");
        ft_cmd->add_option("--report", ft_opts.report_path, "report JSON path");
        ft_cmd->add_flag("--force", ft_opts.force, "overwrite existing outputs");

        MergeOptions merge_opts;
        merge_opts.seed = env_seed;
        auto* merge_cmd = app.add_subcommand("merge", "fold LoRA adapters into base weights");
        merge_cmd->add_option("--base", merge_opts.base, "base model checkpoint")->required();
        merge_cmd->add_option("--adapters", merge_opts.adapters, "adapter checkpoint")->required();
        merge_cmd->add_option("--out", merge_opts.out, "output checkpoint directory")->required();
        merge_cmd->add_flag("--force", merge_opts.force, "overwrite an existing checkpoint");

        EvalOptions eval_opts;
        eval_opts.seed = env_seed;
        auto* eval_cmd = app.add_subcommand("eval", "compare base and fine-tuned on a task file");
        eval_cmd->add_option("--base", eval_opts.base, "base model checkpoint")->required();
        eval_cmd->add_option("--ft", eval_opts.ft, "fine-tuned model checkpoint (default: base)");
        eval_cmd->add_option("--base-adapters", eval_opts.base_adapters, "adapters for the base side");
        eval_cmd->add_option("--ft-adapters", eval_opts.ft_adapters, "adapters for the fine-tuned side");
        eval_cmd->add_option("--task", eval_opts.task, "task file (JSON-lines)")->required();
        eval_cmd->add_option("--task-ft", eval_opts.task_ft, "per-side prediction file for the fine-tuned model");
        eval_cmd->add_option("--kind", eval_opts.kind, "completion|numeric|choice");
        eval_cmd->add_option("--epsilon", eval_opts.epsilon, "numeric tolerance");
        eval_cmd->add_option("--z", eval_opts.z, "z-score for confidence intervals");
        eval_cmd->add_option("--max-new", eval_opts.max_new_tokens, "generation budget per record");
        eval_cmd->add_option("--out", eval_opts.out, "metric report JSON path");
        eval_cmd->add_option("--seed", eval_opts.seed, "RNG seed (recorded)");

        ReportOptions report_opts;
        auto* report_cmd = app.add_subcommand("report", "render a saved metric report");
        report_cmd->add_option("--in", report_opts.in, "metric report JSON")->required();

        try {
            app.parse(argc, argv);
        } catch (const CLI::ParseError& e) {
            const int code = app.exit(e);
            return code == 0 ? 0 : 2;
        }

        init_opts.config.ffn_variant = ffn_variant_from_string(init_ffn);
        if (!ft_sites.empty()) {
            ft_opts.train.lora_sites.clear();
            std::stringstream ss(ft_sites);
            std::string token;
            while (std::getline(ss, token, ',')) {
                if (!token.empty()) ft_opts.train.lora_sites.push_back(token);
            }
        }

        if (init_cmd->parsed()) return cmd_init(init_opts);
        if (q_cmd->parsed()) return cmd_quantize(q_opts);
        if (ft_cmd->parsed()) return cmd_finetune(ft_opts);
        if (merge_cmd->parsed()) return cmd_merge(merge_opts);
        if (eval_cmd->parsed()) return cmd_eval(eval_opts);
        if (report_cmd->parsed()) return cmd_report(report_opts);
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

int run_cli(const std::vector<std::string>& args) {
    std::vector<std::string> full;
    full.reserve(args.size() + 1);
    full.push_back("peftkit");
    full.insert(full.end(), args.begin(), args.end());
    std::vector<char*> argv;
    argv.reserve(full.size());
    for (auto& s : full) argv.push_back(s.data());
    return cli_main(static_cast<int>(argv.size()), argv.data());
}

}  // namespace peftkit
