#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "decoder_oracle.hpp"
#include "test_util.hpp"

using namespace evcmf;
using testutil::random_tensor;

namespace {

DecoderConfig small_cfg() {
  DecoderConfig cfg;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.layers = 4;
  cfg.ffn_hidden = 16;
  cfg.vocab_size = 11;
  cfg.max_positions = 10;
  return cfg;
}

ParamStore<double> decoder_params(const DecoderConfig& cfg, std::size_t visual_channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore<double> p;
  init_decoder_params(p, cfg, visual_channels, rng);
  // non-trivial norms and biases so every path is exercised
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& name = p.names()[i];
    if (name.find("bias") != std::string::npos || name.find("gain") != std::string::npos) {
      for (auto& v : p.tensor(i).mutable_data()) v += u(rng);
    }
  }
  return p;
}

}  // namespace

TEST(EmbedText, ZeroTablesAndAdditiveStructure) {
  auto cfg = small_cfg();
  ParamStore<double> zero;
  zero.add("decoder.word_embedding", Tensor<double>::zeros({cfg.vocab_size, cfg.hidden}));
  zero.add("decoder.position_embedding", Tensor<double>::zeros({cfg.max_positions, cfg.hidden}));
  auto e0 = embed_text(TextBatch::unpadded({1, 6, 7}), zero);
  for (auto v : e0.values()) EXPECT_EQ(v, 0.0);

  auto p = decoder_params(cfg, 4, 1);
  auto e = embed_text(TextBatch::unpadded({1, 6, 6}), p);
  const auto& pos = p["decoder.position_embedding"];
  for (std::size_t c = 0; c < cfg.hidden; ++c) {
    EXPECT_DOUBLE_EQ(e[1 * cfg.hidden + c] - e[2 * cfg.hidden + c],
                     (p["decoder.word_embedding"][6 * cfg.hidden + c] + pos[1 * cfg.hidden + c]) -
                         (p["decoder.word_embedding"][6 * cfg.hidden + c] + pos[2 * cfg.hidden + c]));
  }
  auto one = embed_text(TextBatch::unpadded({3}), p);
  for (std::size_t c = 0; c < cfg.hidden; ++c)
    EXPECT_EQ(one[c], p["decoder.word_embedding"][3 * cfg.hidden + c] + pos[c]);
  EXPECT_THROW(embed_text(TextBatch::unpadded({11}), p), InputError);
}

TEST(TokenizeVisual, CountsAndIdentity) {
  EXPECT_EQ(toy_preset().model.visual_tokens(), 12u);
  EXPECT_EQ(full_preset().model.visual_tokens(), 735u);
  ParamStore<double> p;
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  p.add("decoder.visual.weight", Tensor<double>::from_data({4, 4}, eye));
  p.add("decoder.visual.bias", Tensor<double>::zeros({4}));
  std::mt19937_64 rng(2);
  auto rep = random_tensor({3, 2, 2, 4}, rng);
  auto tokens = tokenize_visual(rep, p);
  EXPECT_EQ(tokens.shape(), (Shape{12, 4}));
  EXPECT_EQ(tokens.values(), rep.values());
  EXPECT_THROW(tokenize_visual(random_tensor({3, 2, 2, 5}, rng), p), ShapeError);
}

TEST(AttentionMask, Pattern) {
  auto m = build_attention_mask(1, 3, {false});
  EXPECT_TRUE(m.allows(0, 0));
  for (std::size_t c = 1; c < 4; ++c) EXPECT_TRUE(m.allows(0, c));
  for (std::size_t r = 1; r < 4; ++r) EXPECT_FALSE(m.allows(r, 0));
  auto add = m.additive<double>();
  for (auto v : add.values()) EXPECT_TRUE(v == 0.0 || v == blocked_logit<double>());
}

TEST(AttentionMask, NoFullyBlockedRow) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 6, nv = 1 + rng() % 5;
    std::vector<bool> pad(n);
    for (std::size_t i = 1; i < n; ++i) pad[i] = rng() % 2;
    auto m = build_attention_mask(n, nv, pad);
    for (std::size_t r = 0; r < n + nv; ++r) {
      bool any = false;
      for (std::size_t c = 0; c < n + nv; ++c) any = any || m.allows(r, c);
      EXPECT_TRUE(any);
      for (std::size_t c = 0; c < n; ++c)
        if (pad[c] && c != r) EXPECT_FALSE(m.allows(r, c));
    }
  }
}

TEST(Attention, SingleTokenReturnsValue) {
  std::mt19937_64 rng(4);
  auto q = random_tensor({1, 4}, rng), k = random_tensor({1, 4}, rng), v = random_tensor({1, 4}, rng);
  auto out = multi_head_attention(q, k, v, Tensor<double>::zeros({1, 1}), 2);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out[c], v[c], 1e-15);
}

TEST(Attention, SelfOnlyMaskReturnsOwnValue) {
  std::mt19937_64 rng(5);
  auto q = random_tensor({3, 4}, rng), k = random_tensor({3, 4}, rng), v = random_tensor({3, 4}, rng);
  std::vector<double> mask(9, blocked_logit<double>());
  for (int i = 0; i < 3; ++i) mask[i * 4] = 0.0;
  auto out = multi_head_attention(q, k, v, Tensor<double>::from_data({3, 3}, mask), 2);
  EXPECT_EQ(out.values(), v.values());
}

TEST(Attention, MatchesDirectSummation) {
  std::mt19937_64 rng(6);
  const std::size_t L = 3, d = 6, heads = 2, dh = 3;
  auto q = random_tensor({L, d}, rng), k = random_tensor({L, d}, rng), v = random_tensor({L, d}, rng);
  auto out = multi_head_attention(q, k, v, Tensor<double>::zeros({L, L}), heads);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < L; ++i) {
      double w[L], z = 0.0;
      for (std::size_t j = 0; j < L; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q[i * d + h * dh + c] * k[j * d + h * dh + c];
        w[j] = std::exp(s / std::sqrt(3.0));
        z += w[j];
      }
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < L; ++j) acc += w[j] / z * v[j * d + h * dh + c];
        EXPECT_NEAR(out[i * d + h * dh + c], acc, 1e-12);
      }
    }
}

TEST(ShallowContext, Examples) {
  auto input = Tensor<double>::from_data({1, 2}, {9, 9});
  LayerTrace<double> trace(input);
  EXPECT_EQ(shallow_context(trace, 1, input).values(), input.values());
  auto o1 = Tensor<double>::from_data({1, 2}, {1, 2});
  auto o2 = Tensor<double>::from_data({1, 2}, {3, 6});
  trace.push(o1);
  EXPECT_EQ(shallow_context(trace, 2, input).values(), o1.values());
  trace.push(o2);
  EXPECT_EQ(shallow_context(trace, 3, input).values(), (std::vector<double>{2, 4}));
  LayerTrace<double> same(input);
  same.push(o1);
  same.push(o1);
  same.push(o1);
  EXPECT_EQ(shallow_context(same, 4, input).values(), o1.values());
  EXPECT_THROW(shallow_context(trace, 5, input), ContractError);
}

TEST(EnhancedQK, ZeroGatesMixHalfAndHalf) {
  auto cfg = small_cfg();
  auto p = decoder_params(cfg, 4, 7);
  for (const char* g : {"gate.w_q", "gate.w_oq", "gate.w_k", "gate.w_ok"})
    for (auto& v : p.at(std::string("decoder.layer1.") + g).mutable_data()) v = 0.0;
  std::mt19937_64 rng(8);
  auto q = random_tensor({3, 8}, rng), k = random_tensor({3, 8}, rng), o = random_tensor({3, 8}, rng);
  auto mixed = enhanced_qk(q, k, o, p, "decoder.layer1.");
  for (auto g : mixed.gate_q.values()) EXPECT_EQ(g, 0.5);
  auto shallow = linear(o, p["decoder.layer1.shallow.W_oq"]);
  for (std::size_t i = 0; i < q.size(); ++i) EXPECT_NEAR(mixed.q[i], 0.5 * q[i] + 0.5 * shallow[i], 1e-14);
}

TEST(EnhancedQK, GatesStrictlyInsideUnitInterval) {
  auto p = decoder_params(small_cfg(), 4, 9);
  std::mt19937_64 rng(10);
  auto q = random_tensor({4, 8}, rng, false, -5, 5), k = random_tensor({4, 8}, rng, false, -5, 5);
  auto o = random_tensor({4, 8}, rng, false, -5, 5);
  auto mixed = enhanced_qk(q, k, o, p, "decoder.layer2.");
  for (auto g : mixed.gate_q.values()) EXPECT_TRUE(g > 0.0 && g < 1.0);
  for (auto g : mixed.gate_k.values()) EXPECT_TRUE(g > 0.0 && g < 1.0);
}

TEST(EnhancedLayer, DisabledEqualsVanilla) {
  auto cfg = small_cfg();
  cfg.enhanced = false;
  auto p = decoder_params(cfg, 4, 11);
  std::mt19937_64 rng(12);
  auto x = random_tensor({5, 8}, rng), ctx = random_tensor({5, 8}, rng);
  auto mask = build_attention_mask(2, 3, {}).additive<double>();
  auto a = enhanced_layer(x, ctx, p, 1, mask, cfg);
  auto b = vanilla_layer(x, p, 1, mask, cfg);
  EXPECT_EQ(a.shape(), (Shape{5, 8}));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(EnhancedLayer, GradCheckThroughGates) {
  auto cfg = small_cfg();
  auto p = decoder_params(cfg, 4, 13);
  std::mt19937_64 rng(14);
  auto x = random_tensor({5, 8}, rng), ctx = random_tensor({5, 8}, rng);
  auto mask = build_attention_mask(3, 2, {}).additive<double>();
  auto f = [&](const ParamStore<double>& s) { return testutil::probe(enhanced_layer(x, ctx, s, 1, mask, cfg)); };
  GradCheckOptions opt;
  opt.eps = 1e-6;
  auto report = grad_check(p, f, opt);
  EXPECT_LT(report.max_rel_error(), 1e-3);
  for (const auto& e : report.params) {
    if (e.name.find("layer1.gate") != std::string::npos || e.name.find("layer1.shallow") != std::string::npos) {
      EXPECT_GT(e.checked, 0u) << e.name;
    }
  }
}

class DecoderStack : public ::testing::Test {
 protected:
  DecoderConfig cfg = small_cfg();
  ParamStore<double> params = decoder_params(cfg, 4, 21);
  Tensor<double> visual;

  void SetUp() override {
    std::mt19937_64 rng(22);
    visual = random_tensor({4, 8}, rng);
  }
  Tensor<double> logits(const TextBatch& text, DecodeTrace<double>* rec = nullptr) const {
    return decode_logits_from_tokens(text, visual, params, cfg, rec);
  }
};

TEST_F(DecoderStack, LogitShape) {
  EXPECT_EQ(logits(TextBatch::unpadded({1, 6, 7, 3})).shape(), (Shape{4, 11}));
}

TEST_F(DecoderStack, Causality) {
  const std::vector<int> base{1, 6, 7, 8, 9, 3};
  auto ref = logits(TextBatch::unpadded(base));
  for (std::size_t j = 1; j < base.size(); ++j) {
    auto ids = base;
    ids[j] = ids[j] == 10 ? 6 : 10;
    auto out = logits(TextBatch::unpadded(ids));
    for (std::size_t i = 0; i < j; ++i)
      for (std::size_t v = 0; v < cfg.vocab_size; ++v) ASSERT_EQ(out[i * 11 + v], ref[i * 11 + v]) << i << " " << j;
  }
}

TEST_F(DecoderStack, VisualRowsIgnoreText) {
  DecodeTrace<double> a, b;
  logits(TextBatch::unpadded({1, 6, 7}), &a);
  logits(TextBatch::unpadded({1, 9, 2}), &b);
  const std::size_t n = 3, d = cfg.hidden;
  for (std::size_t z = 0; z < cfg.layers; ++z)
    for (std::size_t r = n; r < n + 4; ++r)
      for (std::size_t c = 0; c < d; ++c) ASSERT_EQ(a.outputs[z][r * d + c], b.outputs[z][r * d + c]);
}

TEST_F(DecoderStack, TraceContextIsMeanOfEarlierOutputs) {
  DecodeTrace<double> rec;
  logits(TextBatch::unpadded({1, 6, 7, 3}), &rec);
  ASSERT_EQ(rec.outputs.size(), cfg.layers);
  for (std::size_t z = 2; z <= cfg.layers; ++z) {
    const auto& used = rec.contexts[z - 1];
    for (std::size_t i = 0; i < used.size(); ++i) {
      double mean = 0.0;
      for (std::size_t k = 0; k + 1 < z; ++k) mean += rec.outputs[k][i];
      mean /= static_cast<double>(z - 1);
      ASSERT_NEAR(used[i], mean, 1e-6);
    }
  }
}

TEST_F(DecoderStack, PaddingDoesNotLeak) {
  TextBatch a{{1, 6, 7, 0, 0}, {false, false, false, true, true}};
  TextBatch b{{1, 6, 7, 9, 4}, {false, false, false, true, true}};
  auto la = logits(a), lb = logits(b);
  for (std::size_t i = 0; i < 3 * cfg.vocab_size; ++i) EXPECT_EQ(la[i], lb[i]);
}

TEST_F(DecoderStack, PlainStackMatchesReferenceOracle) {
  cfg.enhanced = false;
  const TextBatch text{{1, 6, 7, 3, 0}, {false, false, false, false, true}};
  DecodeTrace<double> rec;
  logits(text, &rec);
  auto joint = concat_rows<double>({embed_text(text, params), visual});
  const auto mask = build_attention_mask(text.size(), visual.dim(0), text.pad);
  auto expect = oracle::plain_stack(oracle::to_matrix(joint.values(), joint.dim(0), joint.dim(1)), params,
                                    cfg.layers, mask, cfg.heads);
  const auto& got = rec.outputs.back();
  double worst = 0.0;
  for (std::size_t r = 0; r < expect.size(); ++r)
    for (std::size_t c = 0; c < cfg.hidden; ++c)
      worst = std::max(worst, std::abs(got[r * cfg.hidden + c] - expect[r][c]));
  EXPECT_LT(worst, 1e-10);
}

TEST_F(DecoderStack, EnhancedDiffersFromPlain) {
  auto on = logits(TextBatch::unpadded({1, 6, 7}));
  cfg.enhanced = false;
  auto off = logits(TextBatch::unpadded({1, 6, 7}));
  EXPECT_NE(on.values(), off.values());
}
