#include <gtest/gtest.h>

#include <cmath>

#include "geolan/model.hpp"

using namespace geolan;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 256;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_head = 8;
  c.max_seq = 16;
  c.ffn_mult = 2;
  return c;
}

std::vector<std::size_t> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<std::size_t> t(n);
  for (auto& v : t) v = static_cast<std::size_t>(rng.below(vocab));
  return t;
}

// log-softmax by direct summation
double ce_oracle(const Tensor& logits, const std::vector<std::size_t>& targets) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < logits.cols(); ++j) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) z += std::exp(logits(i, j) - mx);
    total += -(logits(i, targets[i]) - mx - std::log(z));
  }
  return total / static_cast<double>(logits.rows());
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.d_head = 7;
  EXPECT_THROW(c.validate(), InputError);
  c = small_config();
  c.n_layers = 0;
  EXPECT_THROW(c.validate(), InputError);
}

TEST(Forward, AttentionIsCausalAndStochastic) {
  Rng rng(1);
  const Params p = init_params(small_config(), rng);
  const ForwardTrace t = forward(p, random_tokens(9, 256, rng));
  ASSERT_EQ(t.hidden.size(), 3u);
  ASSERT_EQ(t.attention.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < 2; ++h) {
      const Tensor a = t.head(l, 0, h);
      for (std::size_t i = 0; i < 9; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 9; ++j) {
          s += a(i, j);
          if (j > i) {
            EXPECT_EQ(a(i, j), 0.0);
          }
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
    }
}

TEST(Forward, SingleTokenAttentionIsOne) {
  Rng rng(2);
  const Params p = init_params(small_config(), rng);
  const ForwardTrace t = forward(p, std::vector<std::size_t>{65});
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < 2; ++h) EXPECT_EQ(t.head(l, 0, h)(0, 0), 1.0);
}

TEST(Forward, Deterministic) {
  Rng a(3), b(3);
  const Params pa = init_params(small_config(), a);
  const Params pb = init_params(small_config(), b);
  const std::vector<std::size_t> tok{1, 2, 3, 4, 5};
  EXPECT_EQ(forward(pa, tok).logits, forward(pb, tok).logits);
}

TEST(Forward, RejectsBadTokens) {
  Rng rng(4);
  const Params p = init_params(small_config(), rng);
  EXPECT_THROW(forward(p, std::vector<std::size_t>{1, 256}), InputError);
  EXPECT_THROW(forward(p, std::vector<std::size_t>(17, 1)), InputError);
}

TEST(Forward, ResidualIdentity) {
  Rng rng(5);
  const Params p = init_params(small_config(), rng);
  TokenBatch batch;
  batch.n_seq = 3;
  batch.seq_len = 7;
  batch.ids = random_tokens(21, 256, rng);
  const ForwardTrace t = forward(p, batch);
  for (std::size_t l = 0; l < 2; ++l) {
    const Tensor upd = layer_update(p, l, t.hidden[l], 3, 7);
    EXPECT_LT(max_abs_diff(t.hidden[l] + upd, t.hidden[l + 1]), 1e-9);
  }
}

TEST(Forward, Causality) {
  Rng rng(6);
  const Params p = init_params(small_config(), rng);
  std::vector<std::size_t> tok = random_tokens(10, 256, rng);
  const ForwardTrace a = forward(p, tok);
  for (std::size_t j : {3u, 7u}) {
    std::vector<std::size_t> t2 = tok;
    t2[j] = (t2[j] + 1) % 256;
    const ForwardTrace b = forward(p, t2);
    for (std::size_t i = 0; i < j; ++i)
      for (std::size_t v = 0; v < 256; ++v) ASSERT_EQ(a.logits(i, v), b.logits(i, v));
  }
}

TEST(Forward, BatchedMatchesSingle) {
  Rng rng(7);
  const Params p = init_params(small_config(), rng);
  TokenBatch batch;
  batch.n_seq = 2;
  batch.seq_len = 5;
  batch.ids = random_tokens(10, 256, rng);
  const ForwardTrace t = forward(p, batch);
  const ForwardTrace s = forward(p, std::vector<std::size_t>(batch.ids.begin() + 5, batch.ids.end()));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t v = 0; v < 256; ++v) EXPECT_NEAR(t.logits(5 + i, v), s.logits(i, v), 1e-12);
}

TEST(LossCe, UniformLogits) {
  const Tensor logits(Shape{3, 256}, 0.0);
  EXPECT_NEAR(cross_entropy_value(logits, {0, 17, 255}), std::log(256.0), 1e-12);
}

TEST(LossCe, MarginLimit) {
  double prev = INFINITY;
  for (double margin : {1.0, 5.0, 20.0, 50.0}) {
    Tensor logits(Shape{1, 4}, 0.0);
    logits(0, 2) = margin;
    const double v = cross_entropy_value(logits, {2});
    EXPECT_LT(v, prev);
    prev = v;
  }
  EXPECT_LT(prev, 1e-20);
}

TEST(LossCe, MatchesLogSoftmaxOracle) {
  Rng rng(8);
  Tensor logits(Shape{6, 11});
  for (auto& v : logits.values()) v = 3.0 * rng.normal();
  const std::vector<std::size_t> tg{0, 10, 3, 3, 7, 1};
  EXPECT_NEAR(cross_entropy_value(logits, tg), ce_oracle(logits, tg), 1e-10);
}

TEST(LossCe, LengthMismatch) {
  const Tensor logits(Shape{3, 4}, 0.0);
  EXPECT_ANY_THROW(cross_entropy_value(logits, {0, 1}));
}

TEST(PatchForward, OwnActivationsIsNoOp) {
  Rng rng(9);
  const Params p = init_params(small_config(), rng);
  const auto tok = random_tokens(8, 256, rng);
  const ForwardTrace t = forward(p, tok);
  const std::vector<std::size_t> rows{1, 4, 5};
  Tensor donor(Shape{3, 16});
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t c = 0; c < 16; ++c) donor(k, c) = t.hidden[1](rows[k], c);
  const ForwardTrace q = patch_forward(p, TokenBatch::single(tok), 1, rows, donor);
  EXPECT_EQ(q.logits, t.logits);
}

TEST(PatchForward, AllTokensFollowDonor) {
  Rng rng(10);
  const Params p = init_params(small_config(), rng);
  const auto a = random_tokens(8, 256, rng), b = random_tokens(8, 256, rng);
  const ForwardTrace ta = forward(p, a), tb = forward(p, b);
  std::vector<std::size_t> rows(8);
  for (std::size_t i = 0; i < 8; ++i) rows[i] = i;
  const ForwardTrace q = patch_forward(p, TokenBatch::single(a), 1, rows, tb.hidden[1]);
  EXPECT_EQ(q.hidden[0], ta.hidden[0]);
  for (std::size_t l = 1; l <= 2; ++l) EXPECT_LT(max_abs_diff(q.hidden[l], tb.hidden[l]), 1e-12);
  EXPECT_LT(max_abs_diff(q.logits, tb.logits), 1e-12);
}

TEST(PatchForward, IndexOutOfRange) {
  Rng rng(11);
  const Params p = init_params(small_config(), rng);
  const auto tok = random_tokens(4, 256, rng);
  EXPECT_THROW(patch_forward(p, TokenBatch::single(tok), 1, {4}, Tensor(Shape{1, 16})), InputError);
}

TEST(PerturbTokens, RateEndpoints) {
  Rng rng(12);
  const auto tok = random_tokens(50, 256, rng);
  EXPECT_EQ(perturb_tokens(tok, 0.0, 256, rng), tok);
  const auto all = perturb_tokens(tok, 1.0, 256, rng);
  EXPECT_EQ(all.size(), tok.size());
  EXPECT_EQ(all[0], tok[0]);
  EXPECT_THROW(perturb_tokens(tok, 1.5, 256, rng), std::invalid_argument);
}

TEST(PerturbTokens, BinomialRate) {
  Rng rng(13);
  const std::size_t n = 10001;
  const std::vector<std::size_t> tok(n, 0);
  const auto out = perturb_tokens(tok, 0.1, 1u << 30, rng);
  std::size_t changed = 0;
  for (std::size_t i = 1; i < n; ++i) changed += out[i] != 0;
  const double m = static_cast<double>(n - 1);
  const double sigma = std::sqrt(m * 0.1 * 0.9);
  EXPECT_LT(std::abs(static_cast<double>(changed) - 0.1 * m), 5 * sigma);
}
