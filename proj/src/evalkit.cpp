#include "peftkit/evalkit.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace peftkit {

using nlohmann::json;

std::string to_string(RecordKind k) {
    switch (k) {
        case RecordKind::completion: return "completion";
        case RecordKind::numeric: return "numeric";
        case RecordKind::choice: return "choice";
    }
    return "completion";
}

RecordKind record_kind_from_string(const std::string& s) {
    if (s == "completion") return RecordKind::completion;
    if (s == "numeric") return RecordKind::numeric;
    if (s == "choice") return RecordKind::choice;
    throw UsageError("unknown record kind '" + s + "' (expected completion|numeric|choice)");
}

namespace {

void require_kind(const EvalRecord& r, RecordKind kind, const char* what) {
    if (r.kind() != kind) {
        throw UsageError(std::string(what) + " requires " + to_string(kind) +
                         "-kind records, got " + to_string(r.kind()));
    }
}

}  // namespace

const CompletionRecord& EvalRecord::completion() const {
    require_kind(*this, RecordKind::completion, "accessor");
    return std::get<CompletionRecord>(payload);
}
const NumericRecord& EvalRecord::numeric() const {
    require_kind(*this, RecordKind::numeric, "accessor");
    return std::get<NumericRecord>(payload);
}
const ChoiceRecord& EvalRecord::choice() const {
    require_kind(*this, RecordKind::choice, "accessor");
    return std::get<ChoiceRecord>(payload);
}
CompletionRecord& EvalRecord::completion() {
    require_kind(*this, RecordKind::completion, "accessor");
    return std::get<CompletionRecord>(payload);
}
NumericRecord& EvalRecord::numeric() {
    require_kind(*this, RecordKind::numeric, "accessor");
    return std::get<NumericRecord>(payload);
}
ChoiceRecord& EvalRecord::choice() {
    require_kind(*this, RecordKind::choice, "accessor");
    return std::get<ChoiceRecord>(payload);
}

std::string normalize_text(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    auto is_ascii_space = [](unsigned char c) {
        return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
    };
    auto is_ascii_punct = [](unsigned char c) {
        return (c >= 33 && c <= 47) || (c >= 58 && c <= 64) || (c >= 91 && c <= 96) ||
               (c >= 123 && c <= 126);
    };
    for (unsigned char c : s) {
        if (is_ascii_space(c)) {
            pending_space = true;
            continue;
        }
        if (is_ascii_punct(c)) continue;
        if (pending_space && !out.empty()) out.push_back(' ');
        pending_space = false;
        if (c >= 'A' && c <= 'Z') c = static_cast<unsigned char>(c - 'A' + 'a');
        out.push_back(static_cast<char>(c));
    }
    return out;
}

std::optional<double> extract_number(std::string_view text) {
    std::optional<double> last;
    const size_t n = text.size();
    auto is_digit = [&](size_t i) { return i < n && text[i] >= '0' && text[i] <= '9'; };

    size_t i = 0;
    while (i < n) {
        size_t j = i;
        bool has_sign = false;
        if (text[j] == '+' || text[j] == '-') {
            has_sign = true;
            ++j;
        }
        if (!is_digit(j) && !(j < n && text[j] == '.' && is_digit(j + 1))) {
            ++i;
            continue;
        }

        std::string num;
        if (has_sign && text[i] == '-') num.push_back('-');
        while (is_digit(j)) num.push_back(text[j++]);
        // commas only count as thousands separators before exactly-3-digit
        // groups not followed by a fourth digit
        while (j < n && text[j] == ',' && is_digit(j + 1) && is_digit(j + 2) &&
               is_digit(j + 3) && !is_digit(j + 4)) {
            num.push_back(text[j + 1]);
            num.push_back(text[j + 2]);
            num.push_back(text[j + 3]);
            j += 4;
        }
        if (j < n && text[j] == '.' && is_digit(j + 1)) {
            num.push_back('.');
            ++j;
            while (is_digit(j)) num.push_back(text[j++]);
        }
        last = std::stod(num);
        i = j;
    }
    return last;
}

double accuracy_norm(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw UsageError("accuracy_norm requires at least one record");
    const auto ind = completion_indicators(records);
    double hits = 0;
    for (int v : ind) hits += v;
    return hits * 100.0 / static_cast<double>(ind.size());
}

double delta_ability(double a_ft_norm, double a_base_norm) {
    for (double v : {a_ft_norm, a_base_norm}) {
        if (v < 0.0 || v > 100.0) {
            throw UsageError("delta_ability inputs must be percentages in [0, 100]");
        }
    }
    return a_ft_norm - a_base_norm;
}

NumericAccuracies numeric_accuracies(const std::vector<EvalRecord>& records,
                                     const EvalConfig& config) {
    if (records.empty()) throw UsageError("numeric_accuracies requires at least one record");
    const auto strict = numeric_strict_indicators(records);
    const auto flex = numeric_flex_indicators(records, config.epsilon);
    NumericAccuracies acc;
    for (int v : strict) acc.a_strict += v;
    for (int v : flex) acc.a_flex += v;
    acc.a_strict = acc.a_strict * 100.0 / static_cast<double>(records.size());
    acc.a_flex = acc.a_flex * 100.0 / static_cast<double>(records.size());
    return acc;
}

double forgetting_rate(double a_ft_flex, double a_base_flex) {
    if (!(a_base_flex > 0.0)) {
        throw UsageError("forgetting_rate is undefined at zero base accuracy");
    }
    return (1.0 - a_ft_flex / a_base_flex) * 100.0;
}

double choice_accuracy(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw UsageError("choice_accuracy requires at least one record");
    const auto ind = choice_indicators(records);
    double hits = 0;
    for (int v : ind) hits += v;
    return hits * 100.0 / static_cast<double>(ind.size());
}

double wald_ci(double p_hat, size_t n, double z) {
    if (p_hat < 0.0 || p_hat > 1.0) throw UsageError("wald_ci requires p_hat in [0, 1]");
    if (n < 1) throw UsageError("wald_ci requires n >= 1");
    if (!(z > 0.0)) throw UsageError("wald_ci requires z > 0");
    return z * std::sqrt(p_hat * (1.0 - p_hat) / static_cast<double>(n)) * 100.0;
}

KnowledgeLoss knowledge_loss(double a_base, double a_ft, double ci_base, double ci_ft) {
    if (ci_base < 0.0 || ci_ft < 0.0) {
        throw UsageError("knowledge_loss requires nonnegative confidence half-widths");
    }
    return {a_base - a_ft, std::sqrt(ci_base * ci_base + ci_ft * ci_ft)};
}

namespace {

// Regularized incomplete beta via Lentz's continued fraction.
double beta_cf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16;
    constexpr double kTiny = 1e-300;

    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

double incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log(1.0 - x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * beta_cf(a, b, x) / a;
    }
    return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

// Two-sided tail of Student's t with `dof` degrees of freedom.
double student_t_two_sided_p(double t, double dof) {
    if (!std::isfinite(t)) return 0.0;
    const double x = dof / (dof + t * t);
    return incomplete_beta(dof / 2.0, 0.5, x);
}

}  // namespace

TTestResult paired_t_test(const std::vector<int>& base_correct,
                          const std::vector<int>& ft_correct) {
    if (base_correct.size() != ft_correct.size()) {
        throw UsageError("paired_t_test requires lists of equal length");
    }
    const size_t n = base_correct.size();
    if (n < 2) throw UsageError("paired_t_test requires n >= 2");

    double mean = 0.0;
    for (size_t i = 0; i < n; ++i) mean += base_correct[i] - ft_correct[i];
    mean /= static_cast<double>(n);

    double ss = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(base_correct[i] - ft_correct[i]) - mean;
        ss += d * d;
    }
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));

    if (sd == 0.0) {
        if (mean == 0.0) return {0.0, 1.0};  // identical lists
        // identical nonzero differences: unbounded statistic
        const double inf = std::numeric_limits<double>::infinity();
        return {mean > 0 ? inf : -inf, 0.0};
    }
    const double t = mean / (sd / std::sqrt(static_cast<double>(n)));
    return {t, student_t_two_sided_p(t, static_cast<double>(n - 1))};
}

namespace {

const std::string& resolved_prediction(const CompletionRecord& r, size_t index) {
    if (!r.prediction) {
        throw UsageError("completion record " + std::to_string(index) +
                         " has no prediction (supply one or score with a model)");
    }
    return *r.prediction;
}

}  // namespace

std::vector<int> completion_indicators(const std::vector<EvalRecord>& records) {
    std::vector<int> out;
    out.reserve(records.size());
    for (size_t i = 0; i < records.size(); ++i) {
        require_kind(records[i], RecordKind::completion, "completion_indicators");
        const auto& r = records[i].completion();
        out.push_back(normalize_text(resolved_prediction(r, i)) == normalize_text(r.truth) ? 1
                                                                                           : 0);
    }
    return out;
}

std::vector<int> numeric_strict_indicators(const std::vector<EvalRecord>& records) {
    std::vector<int> out;
    out.reserve(records.size());
    for (size_t i = 0; i < records.size(); ++i) {
        require_kind(records[i], RecordKind::numeric, "numeric_strict_indicators");
        const auto& r = records[i].numeric();
        if (!r.prediction_text) {
            throw UsageError("numeric record " + std::to_string(i) + " has no prediction text");
        }
        const auto p = extract_number(*r.prediction_text);
        out.push_back(p.has_value() && *p == r.truth ? 1 : 0);
    }
    return out;
}

std::vector<int> numeric_flex_indicators(const std::vector<EvalRecord>& records,
                                         double epsilon) {
    std::vector<int> out;
    out.reserve(records.size());
    for (size_t i = 0; i < records.size(); ++i) {
        require_kind(records[i], RecordKind::numeric, "numeric_flex_indicators");
        const auto& r = records[i].numeric();
        if (!r.prediction_text) {
            throw UsageError("numeric record " + std::to_string(i) + " has no prediction text");
        }
        const auto p = extract_number(*r.prediction_text);
        out.push_back(p.has_value() && std::fabs(*p - r.truth) < epsilon ? 1 : 0);
    }
    return out;
}

std::vector<int> choice_indicators(const std::vector<EvalRecord>& records) {
    std::vector<int> out;
    out.reserve(records.size());
    for (size_t i = 0; i < records.size(); ++i) {
        require_kind(records[i], RecordKind::choice, "choice_indicators");
        const auto& r = records[i].choice();
        if (!r.prediction_index) {
            throw UsageError("choice record " + std::to_string(i) + " has no prediction index");
        }
        out.push_back(*r.prediction_index == r.truth_index ? 1 : 0);
    }
    return out;
}

ModelScorer make_scorer(const TransformerModel& model, const PeftSet* peft,
                        size_t max_new_tokens) {
    ModelScorer scorer;
    scorer.max_context = model.config.max_seq_len;
    scorer.max_new_tokens = max_new_tokens;
    scorer.logits = [&model, peft](const std::vector<int>& tokens) {
        return forward(model, tokens, peft);
    };
    return scorer;
}

std::string generate_text(const ModelScorer& scorer, const std::string& context) {
    if (!scorer.valid()) throw UsageError("generate_text requires a model scorer");
    std::vector<int> tokens = tok::encode(context, /*add_bos=*/true);
    if (tokens.size() >= scorer.max_context) {
        tokens.erase(tokens.begin() + 1,
                     tokens.begin() + 1 +
                         static_cast<long>(tokens.size() - scorer.max_context + 1));
    }
    std::vector<int> generated;
    for (size_t step = 0; step < scorer.max_new_tokens; ++step) {
        if (tokens.size() >= scorer.max_context) break;
        Tensor logits = scorer.logits(tokens);
        const size_t v = logits.cols();
        const float* row = logits.data().data() + (logits.rows() - 1) * v;
        size_t best = 0;
        for (size_t j = 1; j < v; ++j) {
            if (row[j] > row[best]) best = j;
        }
        if (static_cast<int>(best) == tok::kEos) break;
        tokens.push_back(static_cast<int>(best));
        generated.push_back(static_cast<int>(best));
    }
    return tok::decode(generated);
}

size_t score_multiple_choice(const LogitsFn& logits_fn, const std::string& question,
                             const std::vector<std::string>& choices, size_t max_context) {
    if (!logits_fn) throw UsageError("score_multiple_choice requires a logits function");
    if (choices.size() < 2) throw UsageError("score_multiple_choice needs at least 2 choices");
    for (const auto& c : choices) {
        if (c.empty()) throw UsageError("score_multiple_choice: empty choice text");
    }

    std::vector<int> ctx = tok::encode(question, /*add_bos=*/true);
    size_t best_index = 0;
    double best_ll = -std::numeric_limits<double>::infinity();
    for (size_t ci = 0; ci < choices.size(); ++ci) {
        const std::vector<int> cont = tok::encode(choices[ci]);
        if (cont.size() + 1 > max_context) {
            throw UsageError("choice text longer than the model context window");
        }
        std::vector<int> tokens = ctx;
        if (tokens.size() + cont.size() > max_context) {
            const size_t keep = max_context - cont.size();
            tokens.erase(tokens.begin(), tokens.begin() + static_cast<long>(tokens.size() - keep));
        }
        const size_t cont_begin = tokens.size();
        tokens.insert(tokens.end(), cont.begin(), cont.end());

        Tensor logits = logits_fn(tokens);
        const size_t v = logits.cols();
        double ll = 0.0;
        for (size_t pos = cont_begin; pos < tokens.size(); ++pos) {
            const float* row = logits.data().data() + (pos - 1) * v;
            float mx = row[0];
            for (size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (size_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
            ll += static_cast<double>(row[tokens[pos]]) - (std::log(sum) + mx);
        }
        ll /= static_cast<double>(cont.size());  // length normalization
        if (ll > best_ll) {
            best_ll = ll;
            best_index = ci;
        }
    }
    return best_index;
}

namespace {

json opt_to_json(const std::optional<double>& v, bool percent) {
    if (!v) return nullptr;
    return percent ? std::round(*v * 100.0) / 100.0 : *v;
}

std::optional<double> opt_from_json(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
}

std::string fmt2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

std::string pct(const std::optional<double>& v) { return v ? fmt2(*v) + "%" : "-"; }

}  // namespace

json MetricReport::to_json() const {
    return json{{"kind", to_string(kind)},
                {"n", n},
                {"a_norm_base", opt_to_json(a_norm_base, true)},
                {"a_norm_ft", opt_to_json(a_norm_ft, true)},
                {"delta_ability", opt_to_json(delta_ability, true)},
                {"a_strict_base", opt_to_json(a_strict_base, true)},
                {"a_strict_ft", opt_to_json(a_strict_ft, true)},
                {"a_flex_base", opt_to_json(a_flex_base, true)},
                {"a_flex_ft", opt_to_json(a_flex_ft, true)},
                {"forgetting_rate", opt_to_json(forgetting_rate, true)},
                {"a_base", opt_to_json(a_base, true)},
                {"a_ft", opt_to_json(a_ft, true)},
                {"ci_base", opt_to_json(ci_base, true)},
                {"ci_ft", opt_to_json(ci_ft, true)},
                {"knowledge_delta", opt_to_json(knowledge_delta, true)},
                {"knowledge_half_width", opt_to_json(knowledge_half_width, true)},
                {"t_stat", t_stat},
                {"p_value", p_value}};
}

MetricReport MetricReport::from_json(const json& j) {
    MetricReport r;
    r.kind = record_kind_from_string(j.at("kind").get<std::string>());
    r.n = j.at("n").get<size_t>();
    r.a_norm_base = opt_from_json(j, "a_norm_base");
    r.a_norm_ft = opt_from_json(j, "a_norm_ft");
    r.delta_ability = opt_from_json(j, "delta_ability");
    r.a_strict_base = opt_from_json(j, "a_strict_base");
    r.a_strict_ft = opt_from_json(j, "a_strict_ft");
    r.a_flex_base = opt_from_json(j, "a_flex_base");
    r.a_flex_ft = opt_from_json(j, "a_flex_ft");
    r.forgetting_rate = opt_from_json(j, "forgetting_rate");
    r.a_base = opt_from_json(j, "a_base");
    r.a_ft = opt_from_json(j, "a_ft");
    r.ci_base = opt_from_json(j, "ci_base");
    r.ci_ft = opt_from_json(j, "ci_ft");
    r.knowledge_delta = opt_from_json(j, "knowledge_delta");
    r.knowledge_half_width = opt_from_json(j, "knowledge_half_width");
    r.t_stat = j.at("t_stat").get<double>();
    r.p_value = j.at("p_value").get<double>();
    return r;
}

std::string MetricReport::render_table() const {
    std::ostringstream os;
    auto row = [&os](const std::string& metric, const std::string& base,
                     const std::string& ft) {
        os << "  " << metric;
        for (size_t i = metric.size(); i < 28; ++i) os << ' ';
        os << base;
        for (size_t i = base.size(); i < 18; ++i) os << ' ';
        os << ft << "\n";
    };
    os << "Task kind: " << to_string(kind) << " (n = " << n << ")\n";
    row("Metric", "Base", "Fine-tuned");
    switch (kind) {
        case RecordKind::completion:
            row("Normalized Accuracy", pct(a_norm_base), pct(a_norm_ft));
            row("Ability Augmentation", "-", delta_ability ? fmt2(*delta_ability) + "%" : "-");
            break;
        case RecordKind::numeric:
            row("Flexible Accuracy", pct(a_flex_base), pct(a_flex_ft));
            row("Strict Accuracy", pct(a_strict_base), pct(a_strict_ft));
            row("Forgetting Rate (FR)", "-", pct(forgetting_rate));
            break;
        case RecordKind::choice:
            row("Accuracy",
                a_base ? fmt2(*a_base) + "% +/- " + fmt2(ci_base.value_or(0.0)) + "%" : "-",
                a_ft ? fmt2(*a_ft) + "% +/- " + fmt2(ci_ft.value_or(0.0)) + "%" : "-");
            row("Knowledge Loss", "-",
                knowledge_delta ? fmt2(*knowledge_delta) + "% +/- " +
                                      fmt2(knowledge_half_width.value_or(0.0)) + "%"
                                : "-");
            break;
    }
    os << "  Paired t-test: t = " << t_stat << ", p = " << p_value << "\n";
    return os.str();
}

namespace {

json parse_jsonl_record(const std::string& line, size_t index, size_t line_no,
                        const std::filesystem::path& path) {
    try {
        return json::parse(line);
    } catch (const json::exception& e) {
        throw DataError("task file " + path.string() + " record " + std::to_string(index) +
                        " (line " + std::to_string(line_no) + "): " + e.what());
    }
}

void require_key(const json& j, const char* key, const char* type, size_t index,
                 RecordKind kind) {
    if (!j.contains(key)) {
        throw DataError("record " + std::to_string(index) + ": " + to_string(kind) +
                        "-kind schema requires key \"" + key + "\"");
    }
    const json& v = j.at(key);
    const bool ok = (std::string(type) == "string" && v.is_string()) ||
                    (std::string(type) == "number" && v.is_number()) ||
                    (std::string(type) == "integer" && v.is_number_integer()) ||
                    (std::string(type) == "array" && v.is_array());
    if (!ok) {
        throw DataError("record " + std::to_string(index) + ": key \"" + key + "\" must be a " +
                        type);
    }
}

EvalRecord record_from_json(const json& j, RecordKind kind, size_t index) {
    if (!j.is_object()) {
        throw DataError("record " + std::to_string(index) + " is not a JSON object");
    }
    EvalRecord rec;
    switch (kind) {
        case RecordKind::completion: {
            require_key(j, "context", "string", index, kind);
            require_key(j, "truth", "string", index, kind);
            CompletionRecord r;
            r.context = j.at("context").get<std::string>();
            r.truth = j.at("truth").get<std::string>();
            if (j.contains("prediction")) {
                require_key(j, "prediction", "string", index, kind);
                r.prediction = j.at("prediction").get<std::string>();
            }
            rec.payload = std::move(r);
            break;
        }
        case RecordKind::numeric: {
            require_key(j, "question", "string", index, kind);
            require_key(j, "truth", "number", index, kind);
            NumericRecord r;
            r.question = j.at("question").get<std::string>();
            r.truth = j.at("truth").get<double>();
            if (j.contains("prediction_text")) {
                require_key(j, "prediction_text", "string", index, kind);
                r.prediction_text = j.at("prediction_text").get<std::string>();
            }
            rec.payload = std::move(r);
            break;
        }
        case RecordKind::choice: {
            require_key(j, "question", "string", index, kind);
            require_key(j, "choices", "array", index, kind);
            require_key(j, "truth_index", "integer", index, kind);
            ChoiceRecord r;
            r.question = j.at("question").get<std::string>();
            for (const auto& c : j.at("choices")) {
                if (!c.is_string()) {
                    throw DataError("record " + std::to_string(index) +
                                    ": \"choices\" entries must be strings");
                }
                r.choices.push_back(c.get<std::string>());
            }
            r.truth_index = j.at("truth_index").get<int>();
            if (r.truth_index < 0 || static_cast<size_t>(r.truth_index) >= r.choices.size()) {
                throw DataError("record " + std::to_string(index) +
                                ": truth_index out of range");
            }
            if (j.contains("prediction_index")) {
                require_key(j, "prediction_index", "integer", index, kind);
                r.prediction_index = j.at("prediction_index").get<int>();
            }
            rec.payload = std::move(r);
            break;
        }
    }
    return rec;
}

}  // namespace

std::vector<EvalRecord> load_task_file(const std::filesystem::path& path, RecordKind kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open task file: " + path.string());

    std::vector<EvalRecord> out;
    std::string line;
    size_t line_no = 0, index = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const json j = parse_jsonl_record(line, index, line_no, path);
        out.push_back(record_from_json(j, kind, index));
        ++index;
    }
    if (out.empty()) throw UsageError("task file holds no records: " + path.string());
    return out;
}

namespace {

// Fills missing predictions with model output; injected predictions win.
std::vector<EvalRecord> resolve_records(const std::vector<EvalRecord>& records,
                                        const ModelScorer& scorer) {
    std::vector<EvalRecord> out = records;
    for (size_t i = 0; i < out.size(); ++i) {
        EvalRecord& rec = out[i];
        switch (rec.kind()) {
            case RecordKind::completion: {
                auto& r = rec.completion();
                if (!r.prediction) {
                    if (!scorer.valid()) {
                        throw UsageError("record " + std::to_string(i) +
                                         " has no prediction and no model was supplied");
                    }
                    r.prediction = generate_text(scorer, r.context);
                }
                break;
            }
            case RecordKind::numeric: {
                auto& r = rec.numeric();
                if (!r.prediction_text) {
                    if (!scorer.valid()) {
                        throw UsageError("record " + std::to_string(i) +
                                         " has no prediction_text and no model was supplied");
                    }
                    r.prediction_text = generate_text(scorer, r.question);
                }
                break;
            }
            case RecordKind::choice: {
                auto& r = rec.choice();
                if (r.prediction_index) {
                    if (*r.prediction_index < 0 ||
                        static_cast<size_t>(*r.prediction_index) >= r.choices.size()) {
                        throw DataError("record " + std::to_string(i) +
                                        ": prediction_index out of range");
                    }
                } else {
                    if (!scorer.valid()) {
                        throw UsageError("record " + std::to_string(i) +
                                         " has no prediction_index and no model was supplied");
                    }
                    r.prediction_index = static_cast<int>(score_multiple_choice(
                        scorer.logits, r.question, r.choices, scorer.max_context));
                }
                break;
            }
        }
    }
    return out;
}

void check_pairing(const std::vector<EvalRecord>& base, const std::vector<EvalRecord>& ft) {
    if (base.size() != ft.size()) {
        throw DataError("base and fine-tuned task files have different record counts");
    }
    if (base.empty()) throw UsageError("evaluate_pair requires at least one record");
    const RecordKind kind = base[0].kind();
    for (size_t i = 0; i < base.size(); ++i) {
        if (base[i].kind() != kind || ft[i].kind() != kind) {
            throw DataError("record kinds are not homogeneous across the evaluation");
        }
        bool same = true;
        switch (kind) {
            case RecordKind::completion:
                same = base[i].completion().truth == ft[i].completion().truth;
                break;
            case RecordKind::numeric:
                same = base[i].numeric().truth == ft[i].numeric().truth;
                break;
            case RecordKind::choice:
                same = base[i].choice().truth_index == ft[i].choice().truth_index &&
                       base[i].choice().choices == ft[i].choice().choices;
                break;
        }
        if (!same) {
            throw DataError("base and fine-tuned task files disagree at record " +
                            std::to_string(i));
        }
    }
}

}  // namespace

MetricReport evaluate_pair(const ModelScorer& base, const ModelScorer& ft,
                           const std::vector<EvalRecord>& base_records,
                           const std::vector<EvalRecord>& ft_records,
                           const EvalConfig& config) {
    check_pairing(base_records, ft_records);
    const RecordKind kind = base_records[0].kind();

    const auto resolved_base = resolve_records(base_records, base);
    const auto resolved_ft = resolve_records(ft_records, ft);

    MetricReport report;
    report.kind = kind;
    report.n = resolved_base.size();

    std::vector<int> base_ind, ft_ind;
    switch (kind) {
        case RecordKind::completion: {
            report.a_norm_base = accuracy_norm(resolved_base);
            report.a_norm_ft = accuracy_norm(resolved_ft);
            report.delta_ability = delta_ability(*report.a_norm_ft, *report.a_norm_base);
            base_ind = completion_indicators(resolved_base);
            ft_ind = completion_indicators(resolved_ft);
            break;
        }
        case RecordKind::numeric: {
            const auto acc_base = numeric_accuracies(resolved_base, config);
            const auto acc_ft = numeric_accuracies(resolved_ft, config);
            report.a_strict_base = acc_base.a_strict;
            report.a_strict_ft = acc_ft.a_strict;
            report.a_flex_base = acc_base.a_flex;
            report.a_flex_ft = acc_ft.a_flex;
            if (acc_base.a_flex > 0.0) {
                report.forgetting_rate = forgetting_rate(acc_ft.a_flex, acc_base.a_flex);
            }
            base_ind = numeric_flex_indicators(resolved_base, config.epsilon);
            ft_ind = numeric_flex_indicators(resolved_ft, config.epsilon);
            break;
        }
        case RecordKind::choice: {
            report.a_base = choice_accuracy(resolved_base);
            report.a_ft = choice_accuracy(resolved_ft);
            report.ci_base = wald_ci(*report.a_base / 100.0, report.n, config.z);
            report.ci_ft = wald_ci(*report.a_ft / 100.0, report.n, config.z);
            const auto kl =
                knowledge_loss(*report.a_base, *report.a_ft, *report.ci_base, *report.ci_ft);
            report.knowledge_delta = kl.delta;
            report.knowledge_half_width = kl.half_width;
            base_ind = choice_indicators(resolved_base);
            ft_ind = choice_indicators(resolved_ft);
            break;
        }
    }

    if (report.n >= 2) {
        const auto tt = paired_t_test(base_ind, ft_ind);
        report.t_stat = tt.t;
        report.p_value = tt.p;
    }
    return report;
}

}  // namespace peftkit
