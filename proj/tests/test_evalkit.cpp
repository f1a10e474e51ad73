#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracles.hpp"
#include "peftkit/evalkit.hpp"

using namespace peftkit;

namespace {

EvalRecord completion(const std::string& pred, const std::string& truth) {
    EvalRecord r;
    r.payload = CompletionRecord{"", pred, truth};
    return r;
}

EvalRecord numeric(const std::string& pred_text, double truth) {
    EvalRecord r;
    r.payload = NumericRecord{"", pred_text, truth};
    return r;
}

EvalRecord choice(int pred, int truth, size_t n_choices = 4) {
    EvalRecord r;
    ChoiceRecord c;
    c.question = "q";
    for (size_t i = 0; i < n_choices; ++i) c.choices.push_back("choice " + std::to_string(i));
    c.truth_index = truth;
    c.prediction_index = pred;
    r.payload = std::move(c);
    return r;
}

}  // namespace

TEST_CASE("normalize_text rule application") {
    CHECK(normalize_text("Hello, World!") == "hello world");
    CHECK(normalize_text("abc") == "abc");
    CHECK(normalize_text("!!!") == "");
    CHECK(normalize_text("  A\t B \n") == "a b");
    // idempotence on assorted inputs
    for (const char* s : {"Mixed CASE text.", "a,b,,c", " x ", "4 + 4 = 8!", "tab\tsep"}) {
        const std::string once = normalize_text(s);
        CHECK(normalize_text(once) == once);
    }
}

TEST_CASE("accuracy_norm counts normalized matches") {
    std::vector<EvalRecord> all_match = {completion("Yes!", "yes"), completion("A  B", "a b")};
    CHECK(accuracy_norm(all_match) == doctest::Approx(100.0));

    std::vector<EvalRecord> three_of_four = {
        completion("alpha", "alpha"), completion("beta", "beta"), completion("gamma", "gamma"),
        completion("delta", "omega")};
    CHECK(accuracy_norm(three_of_four) == doctest::Approx(75.0));

    std::vector<EvalRecord> disjoint = {completion("aaa", "bbb"), completion("ccc", "ddd")};
    CHECK(accuracy_norm(disjoint) == doctest::Approx(0.0));

    CHECK_THROWS_AS(accuracy_norm({}), UsageError);
}

TEST_CASE("accuracy_norm is permutation invariant") {
    std::vector<EvalRecord> records = {completion("a", "a"), completion("b", "x"),
                                       completion("c", "c"), completion("d", "d")};
    const double forward_order = accuracy_norm(records);
    std::reverse(records.begin(), records.end());
    CHECK(accuracy_norm(records) == forward_order);
}

TEST_CASE("delta_ability golden values") {
    CHECK(std::llround(delta_ability(61.20, 60.77) * 100.0) == 43);
    CHECK(delta_ability(50.0, 50.0) == 0.0);
    CHECK(delta_ability(59.26, 60.77) == doctest::Approx(-1.51));
    CHECK_THROWS_AS(delta_ability(120.0, 50.0), UsageError);
}

TEST_CASE("extract_number picks the last numeral") {
    CHECK(*extract_number("The answer is 42.") == 42.0);
    CHECK(*extract_number("12 apples minus 5 leaves 7") == 7.0);
    CHECK_FALSE(extract_number("no digits here").has_value());
    CHECK(*extract_number("about -3.5 degrees") == -3.5);
    CHECK(*extract_number("1,234.5 total") == 1234.5);
    CHECK(*extract_number("price: $1,000") == 1000.0);
    CHECK(*extract_number("7.") == 7.0);
    CHECK(*extract_number(".5 of it") == 0.5);
    CHECK(*extract_number("ids 1,2345") == 2345.0);
}

TEST_CASE("numeric accuracies: strict vs flexible") {
    EvalConfig cfg;
    std::vector<EvalRecord> perfect = {numeric("10", 10.0), numeric("x = 3.0", 3.0)};
    auto acc = numeric_accuracies(perfect, cfg);
    CHECK(acc.a_strict == doctest::Approx(100.0));
    CHECK(acc.a_flex == doctest::Approx(100.0));

    std::vector<EvalRecord> close = {numeric("10.005", 10.0)};
    acc = numeric_accuracies(close, cfg);
    CHECK(acc.a_strict == doctest::Approx(0.0));
    CHECK(acc.a_flex == doctest::Approx(100.0));

    // strict equality is on extracted values, so "7.0" matches 7
    std::vector<EvalRecord> textual = {numeric("result 7.0", 7.0)};
    CHECK(numeric_accuracies(textual, cfg).a_strict == doctest::Approx(100.0));

    std::vector<EvalRecord> missing = {numeric("none", 4.0)};
    acc = numeric_accuracies(missing, cfg);
    CHECK(acc.a_strict == 0.0);
    CHECK(acc.a_flex == 0.0);

    CHECK_THROWS_AS(numeric_accuracies({}, cfg), UsageError);
}

TEST_CASE("flexible accuracy dominates strict accuracy") {
    Rng rng(44);
    EvalConfig cfg;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<EvalRecord> records;
        const size_t n = 1 + rng.next_below(30);
        for (size_t i = 0; i < n; ++i) {
            const double truth = static_cast<double>(rng.next_below(20));
            const double noise = (rng.next_double() - 0.5) * 0.05;
            records.push_back(numeric("ans " + std::to_string(truth + noise), truth));
        }
        const auto acc = numeric_accuracies(records, cfg);
        CHECK(acc.a_flex >= acc.a_strict);
    }
}

TEST_CASE("forgetting_rate golden and edge values") {
    const double fr = forgetting_rate(3.71, 33.51);
    CHECK(fr >= 88.88);
    CHECK(fr <= 88.97);
    CHECK(forgetting_rate(12.5, 12.5) == doctest::Approx(0.0));
    CHECK(forgetting_rate(0.0, 33.51) == doctest::Approx(100.0));
    CHECK(forgetting_rate(40.0, 20.0) < 0.0);  // improvement
    CHECK_THROWS_AS(forgetting_rate(5.0, 0.0), UsageError);
}

TEST_CASE("choice accuracy") {
    std::vector<EvalRecord> all = {choice(0, 0), choice(1, 1)};
    CHECK(choice_accuracy(all) == doctest::Approx(100.0));

    std::vector<EvalRecord> mmlu_scale;
    for (int i = 0; i < 100; ++i) mmlu_scale.push_back(choice(i < 47 ? 0 : 1, 0));
    CHECK(choice_accuracy(mmlu_scale) == doctest::Approx(47.0));

    std::vector<EvalRecord> quarter = {choice(0, 0), choice(1, 0), choice(2, 0), choice(3, 0)};
    CHECK(choice_accuracy(quarter) == doctest::Approx(25.0));

    CHECK_THROWS_AS(choice_accuracy({}), UsageError);
}

TEST_CASE("wald_ci formula and degenerate ends") {
    CHECK(wald_ci(0.47, 100, 1.96) == doctest::Approx(9.7823).epsilon(1e-4));
    CHECK(wald_ci(0.0, 50, 1.96) == 0.0);
    CHECK(wald_ci(1.0, 50, 1.96) == 0.0);
    // maximal at one half
    const double mid = wald_ci(0.5, 64, 1.96);
    for (double p : {0.1, 0.3, 0.45, 0.55, 0.8}) CHECK(wald_ci(p, 64, 1.96) <= mid);
    CHECK_THROWS_AS(wald_ci(1.5, 10, 1.96), UsageError);
}

TEST_CASE("knowledge_loss goldens and pythagorean dominance") {
    const auto kl = knowledge_loss(47.00, 34.00, 5.02, 4.76);
    CHECK(std::llround(kl.delta * 100.0) == 1300);
    CHECK(kl.half_width == doctest::Approx(6.92).epsilon(0.003));  // sqrt(5.02^2 + 4.76^2)

    const auto zero = knowledge_loss(50.0, 50.0, 0.0, 0.0);
    CHECK(zero.delta == 0.0);
    CHECK(zero.half_width == 0.0);

    const auto triple = knowledge_loss(10.0, 0.0, 3.0, 4.0);
    CHECK(triple.delta == doctest::Approx(10.0));
    CHECK(triple.half_width == doctest::Approx(5.0));

    Rng rng(48);
    for (int trial = 0; trial < 20; ++trial) {
        const double cb = rng.next_double() * 10.0, cf = rng.next_double() * 10.0;
        const auto k = knowledge_loss(50.0, 40.0, cb, cf);
        CHECK(k.half_width >= std::max(cb, cf) - 1e-12);
    }
}

TEST_CASE("paired t-test hand case and properties") {
    CHECK(paired_t_test({1, 0, 1, 0}, {1, 0, 1, 0}).t == 0.0);
    CHECK(paired_t_test({1, 0, 1, 0}, {1, 0, 1, 0}).p == 1.0);

    // d = [1,1,1,0]: mean .75, sd .5, t = 3.0
    const auto tt = paired_t_test({1, 1, 1, 0}, {0, 0, 0, 0});
    CHECK(tt.t == doctest::Approx(3.0));
    CHECK(tt.p == doctest::Approx(oracle::t_two_sided_p(3.0, 3)).epsilon(1e-9));

    // p shrinks as |t| grows at fixed n (k leading wins raise t from 1 to 3)
    double prev_t = 0.0, prev_p = 1.0;
    for (size_t k = 1; k <= 5; ++k) {
        std::vector<int> base(10, 0), ft(10, 0);
        for (size_t i = 0; i < k; ++i) base[i] = 1;
        const auto r = paired_t_test(base, ft);
        CHECK(r.t > prev_t);
        CHECK(r.p < prev_p);
        prev_t = r.t;
        prev_p = r.p;
    }

    CHECK_THROWS_AS(paired_t_test({1}, {0}), UsageError);
    CHECK_THROWS_AS(paired_t_test({1, 0}, {0}), UsageError);
}

TEST_CASE("t and p match the quadrature oracle across sizes") {
    Rng rng(52);
    for (int trial = 0; trial < 200; ++trial) {
        const size_t n = 2 + rng.next_below(49);
        std::vector<int> base(n), ft(n);
        for (size_t i = 0; i < n; ++i) {
            base[i] = static_cast<int>(rng.next_below(2));
            ft[i] = static_cast<int>(rng.next_below(2));
        }
        const auto got = paired_t_test(base, ft);
        const auto want = oracle::paired_t(base, ft);
        if (std::isfinite(want.t)) {
            CHECK(got.t == doctest::Approx(want.t).epsilon(1e-12));
            CHECK(std::fabs(got.p - want.p) <= 1e-9);
        } else {
            CHECK(got.t == want.t);
            CHECK(got.p == 0.0);
        }
    }
}

TEST_CASE("score_multiple_choice: ties, rigging, permutation") {
    const size_t vocab = tok::kVocab;
    // uniform logits tie every choice; lowest index wins
    LogitsFn uniform = [vocab](const std::vector<int>& tokens) {
        return Tensor({tokens.size(), vocab});
    };
    CHECK(score_multiple_choice(uniform, "q", {"aa", "bb"}) == 0);

    // rig the logits to love byte 'b'
    LogitsFn loves_b = [vocab](const std::vector<int>& tokens) {
        Tensor out({tokens.size(), vocab});
        for (size_t i = 0; i < tokens.size(); ++i) out.at(i, 'b') = 8.0f;
        return out;
    };
    const std::vector<std::string> choices = {"aa", "bb", "cc"};
    CHECK(score_multiple_choice(loves_b, "q", choices) == 1);

    // permuting the choices moves the winner consistently
    const std::vector<std::string> permuted = {"cc", "aa", "bb"};
    CHECK(score_multiple_choice(loves_b, "q", permuted) == 2);

    // length normalization: a longer all-'b' string scores the same mean,
    // so the tie break still favors the earliest index
    CHECK(score_multiple_choice(loves_b, "q", {"bb", "bbbb"}) == 0);

    CHECK_THROWS_AS(score_multiple_choice(uniform, "q", {"only"}), UsageError);
    CHECK_THROWS_AS(score_multiple_choice(uniform, "q", {"", "x"}), UsageError);
}

TEST_CASE("choice winner survives uniform logit shifts") {
    const size_t vocab = tok::kVocab;
    Rng rng(71);
    std::vector<float> table(vocab);
    for (auto& v : table) v = rng.next_gaussian(0.0f, 2.0f);
    auto make_fn = [&table, vocab](float shift) {
        return LogitsFn([&table, vocab, shift](const std::vector<int>& tokens) {
            Tensor out({tokens.size(), vocab});
            for (size_t i = 0; i < tokens.size(); ++i) {
                for (size_t j = 0; j < vocab; ++j) {
                    out.at(i, j) = table[(j + 7 * static_cast<size_t>(tokens[i])) % vocab] +
                                   shift;
                }
            }
            return out;
        });
    };
    const std::vector<std::string> choices = {"left", "mid", "right", "x"};
    const size_t winner = score_multiple_choice(make_fn(0.0f), "which?", choices);
    for (float shift : {-5.0f, 1.0f, 12.5f}) {
        CHECK(score_multiple_choice(make_fn(shift), "which?", choices) == winner);
    }
}

TEST_CASE("evaluate_pair on injected predictions reproduces the derived metrics") {
    // 47/100 vs 34/100 with n = 100
    std::vector<EvalRecord> base_records, ft_records;
    for (int i = 0; i < 100; ++i) {
        base_records.push_back(choice(i < 47 ? 0 : 1, 0));
        ft_records.push_back(choice(i < 34 ? 0 : 1, 0));
    }
    ModelScorer none;
    const MetricReport report = evaluate_pair(none, none, base_records, ft_records);
    CHECK(report.n == 100);
    CHECK(*report.a_base == doctest::Approx(47.0));
    CHECK(*report.a_ft == doctest::Approx(34.0));
    CHECK(*report.knowledge_delta == doctest::Approx(13.0));
    CHECK(*report.ci_base == doctest::Approx(wald_ci(0.47, 100, 1.96)));
    const double want_width = std::sqrt(std::pow(*report.ci_base, 2.0) +
                                        std::pow(*report.ci_ft, 2.0));
    CHECK(*report.knowledge_half_width == doctest::Approx(want_width));
    CHECK(report.p_value < 1.0);
}

TEST_CASE("evaluate_pair self-comparison yields zero deltas") {
    std::vector<EvalRecord> records;
    for (int i = 0; i < 10; ++i) {
        records.push_back(numeric(i % 2 == 0 ? "7" : "nope", 7.0));
    }
    ModelScorer none;
    const MetricReport report = evaluate_pair(none, none, records, records);
    CHECK(*report.a_flex_base == *report.a_flex_ft);
    CHECK(*report.forgetting_rate == doctest::Approx(0.0));
    CHECK(report.t_stat == 0.0);
    CHECK(report.p_value == 1.0);
    CHECK(report.n == records.size());
}

TEST_CASE("evaluate_pair catches mismatched files") {
    std::vector<EvalRecord> base_records = {choice(0, 0), choice(1, 1)};
    std::vector<EvalRecord> ft_records = {choice(0, 0), choice(1, 0)};
    ModelScorer none;
    CHECK_THROWS_AS(evaluate_pair(none, none, base_records, ft_records), DataError);

    std::vector<EvalRecord> shorter = {choice(0, 0)};
    CHECK_THROWS_AS(evaluate_pair(none, none, base_records, shorter), DataError);

    // missing predictions with no model
    std::vector<EvalRecord> unresolved = {completion("", "x"), completion("", "y")};
    unresolved[0].completion().prediction.reset();
    unresolved[1].completion().prediction.reset();
    CHECK_THROWS_AS(evaluate_pair(none, none, unresolved, unresolved), UsageError);
}

TEST_CASE("metric report JSON round trip keeps two-decimal percentages") {
    std::vector<EvalRecord> base_records, ft_records;
    for (int i = 0; i < 3; ++i) {
        base_records.push_back(completion(i < 2 ? "yes" : "no", "yes"));
        ft_records.push_back(completion("yes", "yes"));
    }
    ModelScorer none;
    const MetricReport report = evaluate_pair(none, none, base_records, ft_records);
    const auto j = report.to_json();
    CHECK(j.at("a_norm_base").get<double>() == doctest::Approx(66.67));
    CHECK(j.at("a_strict_base").is_null());

    const MetricReport back = MetricReport::from_json(j);
    CHECK(back.kind == RecordKind::completion);
    CHECK(back.n == 3);
    CHECK(*back.a_norm_ft == doctest::Approx(100.0));
    CHECK_FALSE(back.a_base.has_value());

    const std::string table = report.render_table();
    CHECK(table.find("Normalized Accuracy") != std::string::npos);
}

TEST_CASE("task file loading validates schema per kind") {
    namespace fs = std::filesystem;
    const fs::path good = fs::temp_directory_path() / "peftkit_task1.jsonl";
    {
        std::ofstream out(good, std::ios::trunc);
        out << R"({"context":"c","prediction":"p","truth":"t"})" << "\n";
        out << R"({"context":"c2","truth":"t2"})" << "\n";
    }
    auto records = load_task_file(good, RecordKind::completion);
    REQUIRE(records.size() == 2);
    CHECK(records[0].completion().prediction.has_value());
    CHECK_FALSE(records[1].completion().prediction.has_value());

    // numeric schema read against a completion file names the missing key
    try {
        load_task_file(good, RecordKind::numeric);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("question") != std::string::npos);
    }

    const fs::path bad_idx = fs::temp_directory_path() / "peftkit_task2.jsonl";
    {
        std::ofstream out(bad_idx, std::ios::trunc);
        out << R"({"question":"q","choices":["a","b"],"truth_index":5})" << "\n";
    }
    CHECK_THROWS_AS(load_task_file(bad_idx, RecordKind::choice), DataError);
}

TEST_CASE("metrics agree with the straight-line oracle on random record sets") {
    Rng rng(2718);
    EvalConfig cfg;
    const char* words[] = {"alpha", "Beta!", "gamma ray", "DELTA", "eps,ilon", ""};
    for (int trial = 0; trial < 100; ++trial) {
        const size_t n = 1 + rng.next_below(50);

        // completion records
        std::vector<EvalRecord> comp;
        std::vector<std::string> preds, truths;
        for (size_t i = 0; i < n; ++i) {
            std::string p = words[rng.next_below(6)];
            std::string t = words[rng.next_below(6)];
            comp.push_back(completion(p, t));
            preds.push_back(p);
            truths.push_back(t);
        }
        CHECK(accuracy_norm(comp) ==
              doctest::Approx(oracle::completion_accuracy(preds, truths)).epsilon(1e-12));

        // numeric records
        std::vector<EvalRecord> nums;
        for (size_t i = 0; i < n; ++i) {
            const double truth = static_cast<double>(rng.next_below(10));
            const int mode = static_cast<int>(rng.next_below(3));
            std::string text = mode == 0   ? "answer " + std::to_string(truth)
                               : mode == 1 ? "answer " + std::to_string(truth + 0.004)
                                           : "answer none";
            nums.push_back(numeric(text, truth));
        }
        const auto acc = numeric_accuracies(nums, cfg);
        CHECK(acc.a_strict ==
              doctest::Approx(oracle::indicator_percent(numeric_strict_indicators(nums)))
                  .epsilon(1e-12));
        CHECK(acc.a_flex ==
              doctest::Approx(
                  oracle::indicator_percent(numeric_flex_indicators(nums, cfg.epsilon)))
                  .epsilon(1e-12));

        // choice records + Wald CI from counts
        std::vector<EvalRecord> ch;
        size_t hits = 0;
        for (size_t i = 0; i < n; ++i) {
            const int truth = static_cast<int>(rng.next_below(4));
            const int pred = static_cast<int>(rng.next_below(4));
            ch.push_back(choice(pred, truth));
            if (pred == truth) ++hits;
        }
        const double acc_pct = choice_accuracy(ch);
        CHECK(acc_pct == doctest::Approx(oracle::indicator_percent(choice_indicators(ch)))
                             .epsilon(1e-12));
        CHECK(wald_ci(acc_pct / 100.0, n, cfg.z) ==
              doctest::Approx(oracle::wald_ci_counts(hits, n, cfg.z)).epsilon(1e-9));
    }
}
