#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "peftkit/model.hpp"
#include "peftkit/peft.hpp"

using namespace peftkit;

namespace {

TransformerConfig desk_config() {
    TransformerConfig cfg;
    cfg.d_model = 64;
    cfg.n_heads = 4;
    cfg.n_layers = 2;
    cfg.d_ff = 256;
    cfg.max_seq_len = 64;
    return cfg;
}

std::vector<int> random_tokens(Rng& rng, size_t len, size_t vocab = 259) {
    std::vector<int> out(len);
    for (auto& t : out) t = static_cast<int>(rng.next_below(vocab));
    return out;
}

}  // namespace

TEST_CASE("config validation") {
    TransformerConfig cfg = desk_config();
    cfg.n_heads = 3;  // 64 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), UsageError);
    cfg = desk_config();
    cfg.d_ff = 0;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
}

TEST_CASE("attention with one key returns that value row") {
    Tensor q({1, 2}, {0.3f, -0.9f});
    Tensor k({1, 2}, {5.0f, 5.0f});
    Tensor v({1, 3}, {1.0f, 2.0f, 3.0f});
    Tensor out = attention(q, k, v);
    CHECK(out.data() == v.data());
}

TEST_CASE("orthogonal query averages the value rows") {
    Tensor q({1, 2}, {0.0f, 0.0f});
    Tensor k({2, 2}, {1.0f, 0.0f, 0.0f, 1.0f});
    Tensor v({2, 2}, {2.0f, 4.0f, 6.0f, 8.0f});
    Tensor out = attention(q, k, v);
    CHECK(out.at(0, 0) == doctest::Approx(4.0));
    CHECK(out.at(0, 1) == doctest::Approx(6.0));
}

TEST_CASE("two-token hand case weights 4/5 onto the second value") {
    Tensor q({2, 1}, {1.0f, 1.0f});
    Tensor k({2, 1}, {0.0f, std::log(4.0f)});
    Tensor v({2, 1}, {0.0f, 1.0f});
    Tensor out = attention(q, k, v);
    CHECK(out.at(0, 0) == doctest::Approx(0.8).epsilon(1e-5));
    CHECK(out.at(1, 0) == doctest::Approx(0.8).epsilon(1e-5));
}

TEST_CASE("attention d_k mismatch") {
    CHECK_THROWS_AS(attention(Tensor({1, 2}), Tensor({1, 3}), Tensor({1, 3})),
                    DimensionError);
}

TEST_CASE("attention outputs stay inside the value envelope") {
    Rng rng(13);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor q = Tensor::gaussian({5, 4}, rng, 0.0f, 2.0f);
        Tensor k = Tensor::gaussian({6, 4}, rng, 0.0f, 2.0f);
        Tensor v = Tensor::gaussian({6, 3}, rng, 0.0f, 2.0f);
        Tensor out = attention(q, k, v);
        for (size_t j = 0; j < 3; ++j) {
            float lo = v.at(0, j), hi = v.at(0, j);
            for (size_t r = 1; r < 6; ++r) {
                lo = std::min(lo, v.at(r, j));
                hi = std::max(hi, v.at(r, j));
            }
            for (size_t i = 0; i < 5; ++i) {
                CHECK(out.at(i, j) >= lo - 1e-5f);
                CHECK(out.at(i, j) <= hi + 1e-5f);
            }
        }
    }
}

TEST_CASE("causal attention masks future keys") {
    // value rows distinct; row 0 may only see key 0
    Tensor q({2, 1}, {1.0f, 1.0f});
    Tensor k({2, 1}, {1.0f, 100.0f});
    Tensor v({2, 1}, {3.0f, 9.0f});
    Tensor out = attention(q, k, v, /*causal=*/true);
    CHECK(out.at(0, 0) == doctest::Approx(3.0));   // future key masked
    CHECK(out.at(1, 0) == doctest::Approx(9.0).epsilon(1e-3));
}

TEST_CASE("ffn variants on the 1-d hand case") {
    Tensor x({1, 1}, {1.0f});
    Tensor w1({1, 1}, {1.0f}), b1({1}, {0.0f});
    Tensor w2({1, 1}, {1.0f}), b2({1}, {0.0f});

    Tensor paper = ffn(x, w1, b1, w2, b2, FfnVariant::paper);
    CHECK(paper.data()[0] == doctest::Approx(0.6728).epsilon(1e-3));

    Tensor standard = ffn(x, w1, b1, w2, b2, FfnVariant::standard);
    CHECK(standard.data()[0] == doctest::Approx(0.8413).epsilon(1e-3));

    Tensor zero_w1 = Tensor::zeros({1, 1}), zero_w2 = Tensor::zeros({1, 1});
    CHECK(ffn(x, zero_w1, b1, zero_w2, b2, FfnVariant::paper).data()[0] == 0.0f);
    CHECK(ffn(x, zero_w1, b1, zero_w2, b2, FfnVariant::standard).data()[0] == 0.0f);
}

TEST_CASE("forward is deterministic for fixed seed, config and tokens") {
    const TransformerConfig cfg = desk_config();
    TransformerModel m1 = TransformerModel::random_init(cfg, 2024);
    TransformerModel m2 = TransformerModel::random_init(cfg, 2024);
    Rng rng(55);
    const auto tokens = random_tokens(rng, 12);
    CHECK(forward(m1, tokens).data() == forward(m2, tokens).data());
}

TEST_CASE("empty adapter set matches the base bit for bit") {
    TransformerModel model = TransformerModel::random_init(desk_config(), 7);
    Rng rng(56);
    const auto tokens = random_tokens(rng, 10);
    PeftSet empty;
    CHECK(forward(model, tokens, &empty).data() == forward(model, tokens, nullptr).data());
}

TEST_CASE("forward validates token ids and length") {
    TransformerModel model = TransformerModel::random_init(desk_config(), 7);
    CHECK_THROWS_AS(forward(model, {1, 2, 300}), UsageError);
    CHECK_THROWS_AS(forward(model, std::vector<int>(65, 1)), UsageError);
    CHECK_THROWS_AS(forward(model, {}), UsageError);
}

TEST_CASE("logits at position i ignore later tokens") {
    TransformerModel model = TransformerModel::random_init(desk_config(), 31);
    Rng rng(57);
    auto tokens = random_tokens(rng, 16);
    Tensor full = forward(model, tokens);

    auto mutated = tokens;
    for (size_t j = 9; j < mutated.size(); ++j) mutated[j] = (mutated[j] + 101) % 259;
    Tensor changed = forward(model, mutated);

    for (size_t i = 0; i <= 8; ++i) {
        for (size_t c = 0; c < 259; ++c) {
            CHECK(full.at(i, c) == changed.at(i, c));
        }
    }
}

TEST_CASE("cross_entropy closed forms") {
    Tensor uniform = Tensor::zeros({1, 4});
    CHECK(cross_entropy(uniform, {2}, {1}).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-6));

    Tensor confident = Tensor::zeros({1, 4});
    confident.at(0, 1) = 100.0f;
    CHECK(cross_entropy(confident, {1}, {1}).item() <= 1e-6f);

    Tensor two({1, 2}, {std::log(3.0f), 0.0f});
    CHECK(cross_entropy(two, {0}, {1}).item() ==
          doctest::Approx(std::log(4.0 / 3.0)).epsilon(1e-6));
}

TEST_CASE("cross_entropy masking and validation") {
    Tensor logits = Tensor::zeros({3, 4});
    CHECK_THROWS_AS(cross_entropy(logits, {0, 1, 2}, {0, 0, 0}), UsageError);
    CHECK_THROWS_AS(cross_entropy(logits, {0, 1}, {1, 1}), UsageError);
    CHECK_THROWS_AS(cross_entropy(logits, {0, 9, 2}, {1, 1, 1}), UsageError);

    // masked positions do not affect the loss
    Tensor mixed({2, 3}, {0.0f, 5.0f, 0.0f, 9.0f, 9.0f, 9.0f});
    const float only_first = cross_entropy(mixed, {1, 0}, {1, 0}).item();
    Tensor first_row({1, 3}, {0.0f, 5.0f, 0.0f});
    CHECK(only_first == cross_entropy(first_row, {1}, {1}).item());
}

TEST_CASE("cross_entropy gradient matches finite differences") {
    oracle::check_gradients<float>(
        {{3, 5}},
        [](const auto& t) { return cross_entropy(t[0], {1, 4, 0}, {1, 0, 1}); }, 301, 1e-3,
        1e-3);
}

TEST_CASE("attention and ffn gradients in both precisions") {
    auto attn_loss = [](const auto& t) { return sum(attention(t[0], t[1], t[2], true)); };
    oracle::check_gradients<float>({{4, 3}, {4, 3}, {4, 2}}, attn_loss, 401, 1e-3f, 1e-3);
    oracle::check_gradients<double>({{4, 3}, {4, 3}, {4, 2}}, attn_loss, 401, 1e-5, 1e-6);

    auto ffn_loss = [](const auto& t) {
        return sum(ffn(t[0], t[1], t[2], t[3], t[4], FfnVariant::paper));
    };
    oracle::check_gradients<float>({{2, 3}, {3, 4}, {4}, {4, 3}, {3}}, ffn_loss, 402, 1e-3f,
                                   1e-3);
    oracle::check_gradients<double>({{2, 3}, {3, 4}, {4}, {4, 3}, {3}}, ffn_loss, 402, 1e-5,
                                    1e-6);
}

TEST_CASE("byte tokenizer round trip") {
    const std::string text = "Add 2+2";
    auto ids = tok::encode(text, true, true);
    CHECK(ids.front() == tok::kBos);
    CHECK(ids.back() == tok::kEos);
    CHECK(tok::decode(ids) == text);
}

TEST_CASE("greedy generation stops at the context window") {
    TransformerConfig cfg = desk_config();
    cfg.max_seq_len = 8;
    TransformerModel model = TransformerModel::random_init(cfg, 5);
    auto out = generate_greedy(model, nullptr, {tok::kBos, 65, 66}, 100);
    CHECK(out.size() <= 5);
}

TEST_CASE("quantize_model keeps embeddings dense and is reversible in shape") {
    TransformerModel model = TransformerModel::random_init(desk_config(), 77);
    TransformerModel q = quantize_model(model, 64);
    CHECK(q.any_quantized());
    CHECK(q.token_embedding.data() == model.token_embedding.data());
    CHECK(q.parameter_count() == model.parameter_count());
    CHECK_THROWS_AS(quantize_model(q, 64), UsageError);

    TransformerModel back = dequantize_model(q);
    CHECK_FALSE(back.any_quantized());
    CHECK(back.parameter_count() == model.parameter_count());

    // quantized forward within the propagated quantization error
    Rng rng(58);
    const auto tokens = random_tokens(rng, 8);
    Tensor qa = forward(q, tokens);
    Tensor qb = forward(back, tokens);
    for (size_t i = 0; i < qa.size(); ++i) {
        CHECK(qa.data()[i] == doctest::Approx(qb.data()[i]).epsilon(1e-4));
    }
}
