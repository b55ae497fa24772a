#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "test_util.hpp"

using namespace evcmf;

namespace {

// Memoised random log-distributions: a fixed but arbitrary scorer.
NextTokenFn random_scorer(std::size_t vocab, std::uint64_t seed, double spread = 2.0) {
  auto cache = std::make_shared<std::map<std::vector<int>, std::vector<double>>>();
  auto rng = std::make_shared<std::mt19937_64>(seed);
  return [=](const std::vector<int>& prefix) {
    auto it = cache->find(prefix);
    if (it != cache->end()) return it->second;
    std::normal_distribution<double> n(0.0, spread);
    std::vector<double> z(vocab);
    for (auto& x : z) x = n(*rng);
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (auto x : z) s += std::exp(x - m);
    for (auto& x : z) x -= m + std::log(s);
    (*cache)[prefix] = z;
    return z;
  };
}

// Exhaustive search over every sequence up to max_len; the best finished
// hypothesis by normalised score, ties to smaller ids.
Hypothesis exhaustive_best(const NextTokenFn& next, std::size_t vocab, std::size_t max_len) {
  Hypothesis best;
  bool have = false;
  std::vector<Hypothesis> frontier{Hypothesis{}};
  while (!frontier.empty()) {
    std::vector<Hypothesis> grown;
    for (const auto& h : frontier) {
      auto logp = next(h.ids);
      for (std::size_t t = 0; t < vocab; ++t) {
        Hypothesis c = h;
        c.ids.push_back(static_cast<int>(t));
        c.log_prob += logp[t];
        c.finished = static_cast<int>(t) == kEosId || c.generated() >= max_len;
        if (c.finished) {
          if (!have || c.normalized_score() > best.normalized_score() ||
              (c.normalized_score() == best.normalized_score() && c.ids < best.ids)) {
            best = c;
            have = true;
          }
        } else {
          grown.push_back(std::move(c));
        }
      }
    }
    frontier = std::move(grown);
  }
  return best;
}

double logsumexp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (auto x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

TEST(Beam, PointMassRepeatsToCap) {
  const int tau = 9;
  NextTokenFn next = [](const std::vector<int>&) {
    std::vector<double> v(12, -std::numeric_limits<double>::infinity());
    v[tau] = 0.0;
    return v;
  };
  for (std::size_t beam : {1u, 4u}) {
    auto h = beam_search(next, beam, 20);
    EXPECT_EQ(h.tokens(), std::vector<int>(20, tau));
    EXPECT_TRUE(h.finished);
  }
}

TEST(Beam, ImmediateEosGivesEmptyCaption) {
  NextTokenFn next = [](const std::vector<int>&) {
    std::vector<double> v(8, std::log(0.01));
    v[kEosId] = std::log(1.0 - 0.07);
    return v;
  };
  auto h = beam_search(next, 4, 20);
  EXPECT_EQ(h.tokens(), std::vector<int>{kEosId});
  Vocabulary vocab = build_vocab({"a b c"});
  EXPECT_EQ(vocab.decode(h.tokens()), "");
}

TEST(Beam, TiesGoToSmallerIds) {
  NextTokenFn next = [](const std::vector<int>& p) {
    std::vector<double> v(8, -50.0);
    if (p.size() == 1) {
      v[6] = v[7] = std::log(0.5);
    } else {
      v[kEosId] = 0.0;
    }
    return v;
  };
  EXPECT_EQ(beam_search(next, 4, 5).tokens(), (std::vector<int>{6, kEosId}));
  EXPECT_EQ(greedy_decode(next, 5).tokens(), (std::vector<int>{6, kEosId}));
}

TEST(Beam, BeamOneEqualsGreedyOnRandomScorers) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto next = random_scorer(7, seed);
    auto g = greedy_decode(next, 1 + seed % 8);
    auto b = beam_search(next, 1, 1 + seed % 8);
    EXPECT_EQ(g.ids, b.ids);
    EXPECT_EQ(g.log_prob, b.log_prob);
  }
}

TEST(Beam, WideBeamFindsExhaustiveOptimum) {
  // with beam >= vocab^max_len nothing is ever pruned
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto next = random_scorer(4, 1000 + seed);
    auto b = beam_search(next, 64, 3);
    auto e = exhaustive_best(next, 4, 3);
    EXPECT_EQ(b.ids, e.ids) << "seed " << seed;
  }
}

TEST(Beam, TerminatesWithinCap) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto next = random_scorer(9, 500 + seed, 0.1);
    for (std::size_t cap : {1u, 3u, 20u}) {
      auto h = beam_search(next, 4, cap);
      EXPECT_LE(h.generated(), cap);
      EXPECT_TRUE(h.finished);
    }
  }
}

TEST(Beam, ScoreVersusGreedyOnRandomScorers) {
  // Standard pruning can drop the greedy prefix, so beam >= greedy is not
  // guaranteed; violations must stay rare.
  int violations = 0;
  const int trials = 2000;
  for (int seed = 0; seed < trials; ++seed) {
    auto next = random_scorer(6, static_cast<std::uint64_t>(seed));
    const std::size_t cap = 1 + seed % 6, k = 1 + seed % 5;
    auto g = greedy_decode(next, cap);
    auto b = beam_search(next, k, cap);
    if (b.normalized_score() < g.normalized_score() - 1e-12) ++violations;
  }
  EXPECT_LE(violations, trials / 100);
}

class ToyInference : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { data_ = new testutil::SynthSet(testutil::synth_set(3)); }
  static void TearDownTestSuite() {
    delete data_;
    data_ = nullptr;
  }
  static EvcModel<float> model(std::uint64_t seed) {
    auto cfg = toy_preset().model;
    cfg.decoder.vocab_size = data_->vocab.size();
    return EvcModel<float>::initialize(cfg, seed);
  }
  static testutil::SynthSet* data_;
};

testutil::SynthSet* ToyInference::data_ = nullptr;

TEST_F(ToyInference, DistributionIsNormalisedAndDeterministic) {
  auto m = model(1);
  NoGradGuard no_grad;
  auto tokens = m.visual_tokens(m.encode(data_->examples[0].patches));
  Hypothesis h;
  h.ids = {kClsId, 6};
  auto a = next_token_distribution(m, tokens, h);
  auto b = next_token_distribution(m, tokens, h);
  EXPECT_EQ(a.size(), data_->vocab.size());
  EXPECT_NEAR(logsumexp(a), 0.0, 1e-6);
  EXPECT_EQ(a, b);
  h.finished = true;
  EXPECT_THROW(next_token_distribution(m, tokens, h), ContractError);
}

TEST_F(ToyInference, BeamOneEqualsGreedyOnRandomCheckpoints) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto m = model(100 + seed);
    NoGradGuard no_grad;
    auto tokens = m.visual_tokens(m.encode(data_->examples[seed % 3].patches));
    auto scorer = model_scorer(m, tokens);
    auto g = greedy_decode(scorer, 6);
    auto b = beam_search(scorer, 1, 6);
    EXPECT_EQ(g.ids, b.ids);
    EXPECT_EQ(g.log_prob, b.log_prob);
    auto wide = beam_search(scorer, 4, 6);
    EXPECT_GE(wide.normalized_score(), g.normalized_score() - 1e-12);
  }
}

TEST_F(ToyInference, GenerationNeverMasksFeatures) {
  auto m = model(2);
  const auto before = mask_invocations().load();
  auto text = generate_caption(m, data_->clips[0].clip, data_->vocab, 2, 4);
  EXPECT_EQ(mask_invocations().load(), before);
  for (const char* special : {"[CLS]", "[EOS]", "[PAD]", "[MASK]"}) EXPECT_EQ(text.find(special), std::string::npos);
}

TEST(Predictions, JsonLinesFormat) {
  const auto path = std::filesystem::temp_directory_path() / "evcmf_preds.jsonl";
  write_predictions(path, {{"v0", "a red square moves right"}, {"v1", ""}});
  std::ifstream is(path);
  std::string line;
  std::vector<nlohmann::json> rows;
  while (std::getline(is, line)) rows.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0]["video_id"], "v0");
  EXPECT_EQ(rows[0]["caption"], "a red square moves right");
  EXPECT_EQ(rows[1]["caption"], "");
  EXPECT_THROW(write_predictions("/nonexistent/dir/p.jsonl", {}), InputError);
}
