#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "peftkit/model.hpp"
#include "peftkit/peft.hpp"

namespace peftkit {

enum class RecordKind { completion, numeric, choice };

std::string to_string(RecordKind k);
RecordKind record_kind_from_string(const std::string& s);

struct CompletionRecord {
    std::string context;
    std::optional<std::string> prediction;  // absent: score with a model
    std::string truth;
};

struct NumericRecord {
    std::string question;
    std::optional<std::string> prediction_text;
    double truth = 0.0;
};

struct ChoiceRecord {
    std::string question;
    std::vector<std::string> choices;
    int truth_index = 0;
    std::optional<int> prediction_index;
};

// Variant order matches RecordKind values.
struct EvalRecord {
    std::variant<CompletionRecord, NumericRecord, ChoiceRecord> payload;

    RecordKind kind() const { return static_cast<RecordKind>(payload.index()); }
    const CompletionRecord& completion() const;
    const NumericRecord& numeric() const;
    const ChoiceRecord& choice() const;
    CompletionRecord& completion();
    NumericRecord& numeric();
    ChoiceRecord& choice();
};

struct EvalConfig {
    double epsilon = 0.01;  // numeric tolerance
    double z = 1.96;        // 95% interval
};

/// lowercase + ASCII punctuation removal + whitespace collapse. Bytes
/// outside ASCII pass through untouched. Idempotent.
std::string normalize_text(std::string_view s);

/// Percent of completion records whose normalized prediction equals the
/// normalized truth. Predictions must be resolved.
double accuracy_norm(const std::vector<EvalRecord>& records);

/// A_ft_norm - A_base_norm, both in [0, 100].
double delta_ability(double a_ft_norm, double a_base_norm);

/// Last decimal numeral in the text: optional sign, thousands commas
/// stripped, optional fraction. Absent when the text holds no number.
std::optional<double> extract_number(std::string_view text);

struct NumericAccuracies {
    double a_strict = 0.0;
    double a_flex = 0.0;
};

/// Strict compares extracted values exactly (so "7" matches "7.0");
/// flexible accepts |p - t| < epsilon. Missing extractions count as
/// incorrect under both.
NumericAccuracies numeric_accuracies(const std::vector<EvalRecord>& records,
                                     const EvalConfig& config);

/// (1 - A_ft_flex / A_base_flex) * 100. Negative when the fine-tuned model
/// improved. Undefined at zero base accuracy.
double forgetting_rate(double a_ft_flex, double a_base_flex);

double choice_accuracy(const std::vector<EvalRecord>& records);

/// Half-width in percent: z * sqrt(p_hat (1 - p_hat) / n) * 100.
double wald_ci(double p_hat, size_t n, double z);

struct KnowledgeLoss {
    double delta = 0.0;
    double half_width = 0.0;  // sqrt(ci_base^2 + ci_ft^2)
};

KnowledgeLoss knowledge_loss(double a_base, double a_ft, double ci_base, double ci_ft);

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
};

/// Two-sided paired t-test on 0/1 correctness lists, d_i = base_i - ft_i,
/// sample standard deviation (n-1 divisor), Student t with n-1 degrees of
/// freedom. All-zero differences degenerate to (t=0, p=1).
TTestResult paired_t_test(const std::vector<int>& base_correct,
                          const std::vector<int>& ft_correct);

// Per-record correctness indicators; shared by the metrics and the t-test.
std::vector<int> completion_indicators(const std::vector<EvalRecord>& records);
std::vector<int> numeric_strict_indicators(const std::vector<EvalRecord>& records);
std::vector<int> numeric_flex_indicators(const std::vector<EvalRecord>& records,
                                         double epsilon);
std::vector<int> choice_indicators(const std::vector<EvalRecord>& records);

/// Next-token logits provider: token ids in, [len x vocab] logits out.
using LogitsFn = std::function<Tensor(const std::vector<int>&)>;

struct ModelScorer {
    LogitsFn logits;
    size_t max_context = 64;
    size_t max_new_tokens = 16;

    bool valid() const { return static_cast<bool>(logits); }
};

ModelScorer make_scorer(const TransformerModel& model, const PeftSet* peft = nullptr,
                        size_t max_new_tokens = 16);

/// Greedy byte decoding from the scorer until EOS or the budget runs out.
std::string generate_text(const ModelScorer& scorer, const std::string& context);

/// Index of the choice with the highest length-normalized log-likelihood
/// as a continuation of the question; ties break to the lowest index.
size_t score_multiple_choice(const LogitsFn& logits_fn, const std::string& question,
                             const std::vector<std::string>& choices,
                             size_t max_context = 64);

/// All derived quantities for one base/fine-tuned pair on one task. Only
/// the fields for the evaluated record kind are populated; percentages are
/// serialized with two decimals.
struct MetricReport {
    RecordKind kind = RecordKind::completion;
    size_t n = 0;

    std::optional<double> a_norm_base, a_norm_ft, delta_ability;

    std::optional<double> a_strict_base, a_strict_ft;
    std::optional<double> a_flex_base, a_flex_ft;
    std::optional<double> forgetting_rate;  // absent when base flex accuracy is 0

    std::optional<double> a_base, a_ft;
    std::optional<double> ci_base, ci_ft;
    std::optional<double> knowledge_delta, knowledge_half_width;

    double t_stat = 0.0;
    double p_value = 1.0;

    nlohmann::json to_json() const;
    static MetricReport from_json(const nlohmann::json& j);
    std::string render_table() const;
};

std::vector<EvalRecord> load_task_file(const std::filesystem::path& path, RecordKind kind);

/// Runs both sides over identical records (injected predictions win over
/// model scoring) and assembles the full report, including the paired
/// t-test over per-record correctness.
MetricReport evaluate_pair(const ModelScorer& base, const ModelScorer& ft,
                           const std::vector<EvalRecord>& base_records,
                           const std::vector<EvalRecord>& ft_records,
                           const EvalConfig& config = {});

}  // namespace peftkit
