// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 iff all pass.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "decoder_oracle.hpp"
#include "evcmf/evcmf.hpp"
#include "metric_oracle.hpp"
#include "region_oracle.hpp"

using namespace evcmf;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("evcmf_accept_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto other = b / fs::relative(e.path(), a);
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) return false;
  }
  std::size_t other_files = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) other_files += e.is_regular_file();
  return files > 0 && files == other_files;
}

Outcome gradient_correctness() {
  GradCheckOptions opt;
  opt.eps = 1e-4;
  opt.max_elements_per_param = 4;
  opt.seed = 7;
  const auto r = model_grad_check(toy_preset(), 7, opt);
  const std::vector<std::string> required{"backbone.patch_embed", "encoder.", "gate.w_q",     "gate.w_k",
                                          "gate.w_oq",            "gate.w_ok", "shallow.W_oq", "shallow.W_ok"};
  for (const auto& key : required) {
    bool found = false;
    for (const auto& e : r.report.params) found = found || (e.name.find(key) != std::string::npos && e.checked > 0);
    if (!found) return {false, "no checked parameter matching " + key};
  }
  const double worst = r.report.max_rel_error();
  return {worst < 1e-3, std::to_string(r.report.params.size()) + " tensors, max rel err " + fmt("%.2e", worst)};
}

Outcome region_catalog() {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t gy = 2 + rng() % 11, gx = 2 + rng() % 11;
    const std::size_t dx = 1 + rng() % 4, dy = 1 + rng() % 4, g = 1 + rng() % 4, tenths = rng() % 11;
    std::set<oracle::Quad> got;
    for (const auto& r : enumerate_regions({gy, gx, dx, dy, g, tenths / 10.0}).regions)
      got.insert({r.row, r.col, r.height, r.width});
    if (got != oracle::brute_force_regions(gy, gx, dx, dy, g, tenths))
      return {false, "mismatch on trial " + std::to_string(trial)};
  }
  const auto count = enumerate_regions({7, 7, 2, 2, 4, 0.3}).size();
  const auto zero = enumerate_regions({7, 7, 2, 2, 4, 0.0}).size();
  return {count == 32 && zero == 0,
          "50/50 configs equal, 7x7 count " + std::to_string(count) + ", threshold 0 count " + std::to_string(zero)};
}

Outcome masking_invariants() {
  auto cfg = toy_preset().model;
  const auto catalog = catalog_for_map(cfg.fused_rows(), cfg.fused_cols(), cfg.encoder);
  if (catalog.empty()) return {false, "empty toy catalog"};
  const Shape shape{cfg.frames / 2, cfg.fused_rows(), cfg.fused_cols(), 6};
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0.5f, 1.5f);
  std::vector<float> data(element_count(shape));
  for (auto& v : data) v = u(rng);
  const auto x = Tensor<float>::from_data(shape, data);
  double worst_fraction = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto plan = sample_mask_plan(catalog, shape[0], seed);
    const auto y = apply_mask(x, &plan);
    for (std::size_t f = 0; f < shape[0]; ++f) {
      std::size_t masked = 0;
      for (std::size_t r = 0; r < shape[1]; ++r)
        for (std::size_t c = 0; c < shape[2]; ++c) {
          const bool inside = plan.regions[f].contains(r, c);
          masked += inside;
          for (std::size_t k = 0; k < shape[3]; ++k) {
            const std::size_t i = ((f * shape[1] + r) * shape[2] + c) * shape[3] + k;
            if (inside ? y[i] != 0.0f : y[i] != x[i]) return {false, "plan " + std::to_string(seed) + " violated"};
          }
        }
      const double fraction = static_cast<double>(masked) / static_cast<double>(shape[1] * shape[2]);
      worst_fraction = std::max(worst_fraction, fraction);
      if (!(fraction < cfg.encoder.area_threshold)) return {false, "fraction " + fmt("%.3f", fraction)};
    }
  }
  return {true, "100 plans, largest masked fraction " + fmt("%.3f", worst_fraction)};
}

Outcome shape_contract() {
  const auto cfg = full_preset();
  const auto model = EvcModel<float>::initialize(cfg.model, 1);
  SynthSettings settings;
  settings.frames = cfg.model.frames;
  settings.height = cfg.model.height;
  settings.width = cfg.model.width;
  NoGradGuard no_grad;
  const auto final_rep = model.encode(generate_clip(settings, 0).clip);
  const auto tokens = model.visual_tokens(final_rep);
  const bool ok = final_rep.shape() == Shape{15, 7, 7, 768} && tokens.shape() == Shape{735, 768};
  return {ok, "final " + shape_str(final_rep.shape()) + ", tokens " + shape_str(tokens.shape())};
}

Outcome ablation_equivalence() {
  auto cfg = toy_preset().model.decoder;
  cfg.enhanced = false;
  cfg.vocab_size = 40;
  std::mt19937_64 rng(3);
  ParamStore<double> params;
  init_decoder_params(params, cfg, 32, rng);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> vis(12 * cfg.hidden);
  for (auto& v : vis) v = u(rng);
  const auto visual = Tensor<double>::from_data({12, cfg.hidden}, vis);
  const TextBatch text{{kClsId, 6, 7, kMaskId, 9, kPadId}, {false, false, false, false, false, true}};
  DecodeTrace<double> trace;
  decode_logits_from_tokens(text, visual, params, cfg, &trace);
  const auto joint = concat_rows<double>({embed_text(text, params), visual});
  const auto mask = build_attention_mask(text.size(), visual.dim(0), text.pad);
  const auto expect = oracle::plain_stack(oracle::to_matrix(joint.values(), joint.dim(0), joint.dim(1)), params,
                                          cfg.layers, mask, cfg.heads);
  const auto& got = trace.outputs.back();
  double worst = 0.0;
  for (std::size_t r = 0; r < expect.size(); ++r)
    for (std::size_t c = 0; c < cfg.hidden; ++c) worst = std::max(worst, std::abs(got[r * cfg.hidden + c] - expect[r][c]));
  return {worst < 1e-10, std::to_string(cfg.layers) + " layers, max abs diff " + fmt("%.2e", worst)};
}

EvalCorpus random_corpus(std::mt19937_64& rng) {
  static const std::vector<std::string> lexicon{"a", "b", "c", "d", "e"};
  auto pick = [&](std::size_t lo, std::size_t hi) { return lo + rng() % (hi - lo + 1); };
  auto sentence = [&] {
    Sentence s(pick(1, 8));
    for (auto& w : s) w = lexicon[pick(0, 4)];
    return s;
  };
  EvalCorpus c;
  const auto videos = pick(1, 5);
  for (std::size_t v = 0; v < videos; ++v) {
    EvalItem item{"v" + std::to_string(v), sentence(), {}};
    const auto refs = pick(1, 3);
    for (std::size_t r = 0; r < refs; ++r) item.references.push_back(sentence());
    if (rng() % 3 == 0) item.candidate = item.references[0];
    c.items.push_back(item);
  }
  return c;
}

Outcome metric_oracles() {
  std::mt19937_64 rng(99);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto c = random_corpus(rng);
    worst = std::max({worst, std::abs(bleu4(c) - oracle::bleu4(c)), std::abs(meteor(c) - oracle::meteor(c)),
                      std::abs(rouge_l(c) - oracle::rouge_l(c)), std::abs(cider(c) - oracle::cider(c))});
  }
  auto one = [](const std::string& cand, const std::string& ref) {
    return EvalItem{"v", tokenize(cand), {tokenize(ref)}};
  };
  EvalCorpus two{{one("a b", "a b"), one("c d", "c d")}};
  two.items[1].video_id = "w";
  const bool hand = meteor_sentence(tokenize("a b c d"), tokenize("a b c d")) == 0.9921875 &&
                    std::abs(rouge_l_sentence(tokenize("a b c d"), tokenize("a c b d")) - 0.75) < 1e-15 &&
                    std::abs(cider(two) - 0.5) < 1e-15 &&
                    std::abs(bleu(EvalCorpus{{one("a b c", "a b c d")}}, {1.0}) - std::exp(-1.0 / 3.0)) < 1e-15;
  return {worst < 1e-9 && hand, "200 corpora, max abs diff " + fmt("%.1e", worst) + (hand ? ", hand cases exact" : ", hand case mismatch")};
}

struct OverfitData {
  Vocabulary vocab;
  std::vector<TrainingExample> examples;
  std::vector<VideoClip> clips;
  std::vector<std::string> targets;
};

OverfitData overfit_data(const fs::path& dir) {
  write_synthetic_corpus(dir, SynthSettings{}, 8);
  OverfitData d;
  const auto manifest = dir / "manifest.jsonl";
  std::vector<std::string> captions;
  const auto entries = load_manifest(manifest);
  for (const auto& e : entries) captions.insert(captions.end(), e.captions.begin(), e.captions.end());
  d.vocab = build_vocab(captions);
  d.examples = load_examples(manifest, "train", d.vocab, toy_preset().model);
  for (const auto& e : entries) {
    d.clips.push_back(read_clip(resolve_clip_path(manifest, e)));
    d.targets.push_back(e.captions.front());
  }
  return d;
}

RunConfig overfit_config(std::size_t steps) {
  auto cfg = toy_preset();
  cfg.train.first_caption_only = true;
  cfg.train.max_steps = steps;
  return cfg;
}

Outcome end_to_end_overfit() {
  const auto start = std::chrono::steady_clock::now();
  const auto data = overfit_data(scratch("overfit"));
  Trainer trainer(overfit_config(2000), data.vocab, data.examples);
  std::vector<double> losses;
  trainer.run([&](const StepMetrics& m) {
    losses.push_back(m.loss);
    return true;
  });
  double tail = 0.0;
  for (std::size_t i = losses.size() - 20; i < losses.size(); ++i) tail += losses[i] / 20.0;
  std::size_t exact = 0;
  for (std::size_t i = 0; i < data.clips.size(); ++i)
    exact += generate_caption(trainer.model(), data.clips[i], data.vocab, 4, 20) == data.targets[i];
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60.0;
  const bool ok = exact >= 6 && tail < 0.1 * losses.front() && minutes < 15.0;
  return {ok, std::to_string(exact) + "/8 exact after " + std::to_string(losses.size()) + " steps, loss " +
                  fmt("%.3f", losses.front()) + " -> " + fmt("%.4f", tail) + " (mean of last 20), " +
                  fmt("%.1f", minutes) + " min"};
}

Outcome determinism() {
  const auto data = overfit_data(scratch("determinism_data"));
  auto once = [&](const std::string& tag) {
    const auto dir = scratch("determinism_" + tag);
    Trainer t(overfit_config(20), data.vocab, data.examples);
    t.run();
    t.save(dir / "checkpoint");
    std::vector<Prediction> preds;
    for (std::size_t i = 0; i < data.clips.size(); ++i)
      preds.push_back({synth_video_id(i), generate_caption(t.model(), data.clips[i], data.vocab, 4, 20)});
    write_predictions(dir / "predictions.jsonl", preds);
    return dir;
  };
  const auto a = once("a"), b = once("b");
  const bool ok = same_tree(a, b);
  return {ok, ok ? "checkpoints and predictions bitwise identical" : "runs differ"};
}

Outcome beam_degeneracy() {
  const auto data = overfit_data(scratch("beam_data"));
  auto cfg = toy_preset().model;
  cfg.decoder.vocab_size = data.vocab.size();
  std::size_t equal = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto model = EvcModel<float>::initialize(cfg, 1000 + seed);
    NoGradGuard no_grad;
    const auto tokens = model.visual_tokens(model.encode(data.clips[seed % data.clips.size()]));
    const auto scorer = model_scorer(model, tokens);
    const auto g = greedy_decode(scorer, 20);
    const auto b = beam_search(scorer, 1, 20);
    equal += g.ids == b.ids && g.log_prob == b.log_prob;
  }
  return {equal == 20, std::to_string(equal) + "/20 identical"};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness (toy, float64)", gradient_correctness},
      {"region catalog oracle", region_catalog},
      {"masking invariants", masking_invariants},
      {"shape contract (32x224x224)", shape_contract},
      {"ablation equivalence (enhancement off)", ablation_equivalence},
      {"metric oracles", metric_oracles},
      {"end-to-end overfit", end_to_end_overfit},
      {"determinism", determinism},
      {"beam degeneracy", beam_degeneracy},
  };
  std::size_t failed = 0;
  for (const auto& [name, fn] : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s  %-40s %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
