// evcmf command-line front end.
// Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <string>

#include "CLI11.hpp"
#include "evcmf/evcmf.hpp"

namespace fs = std::filesystem;
using namespace evcmf;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

struct SynthArgs {
  std::string out;
  std::size_t clips = 80;
  std::uint64_t seed = 7;
  std::size_t frames = 8;
  std::size_t size = 64;
};

struct TrainArgs {
  std::string config;
  std::string preset = "toy";
  std::string data;
  std::string out;
  std::string resume;
  std::size_t max_steps = 0;
  bool quiet = false;
};

struct GenerateArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string out;
  std::size_t beam = 0;
  std::size_t max_len = 0;
};

struct EvalArgs {
  std::string pred;
  std::string refs;
  std::string out;
};

struct RegionArgs {
  std::string grid = "7x7";
  std::size_t delta = 2;
  std::size_t delta_x = 0;
  std::size_t delta_y = 0;
  std::size_t g = 4;
  double threshold = 0.3;
};

struct GradArgs {
  std::string preset = "toy";
  std::uint64_t seed = 7;
  std::size_t samples = 4;
  double eps = 1e-4;
  double tolerance = 1e-3;
  bool inject_fault = false;
};

fs::path manifest_in(const std::string& data) {
  const fs::path p(data);
  return fs::is_directory(p) ? p / "manifest.jsonl" : p;
}

int cmd_synth(const SynthArgs& a) {
  SynthSettings settings;
  settings.seed = a.seed;
  settings.frames = a.frames;
  settings.height = settings.width = a.size;
  const auto stats = write_synthetic_corpus(a.out, settings, a.clips);
  std::cout << "wrote " << stats.clips << " clips to " << a.out << "\n"
            << "  captions   " << stats.captions << "\n"
            << "  train/val/test " << stats.train << "/" << stats.val << "/" << stats.test << "\n"
            << "  vocabulary " << stats.vocabulary << " tokens (6 reserved)\n";
  return kOk;
}

RunConfig load_run_config(const TrainArgs& a) {
  if (a.config.empty()) return preset_by_name(a.preset);
  std::ifstream is(a.config);
  if (!is) throw InputError("cannot open config " + a.config);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(a.config + ": " + e.what());
  }
  return run_config_from_json(j);
}

int cmd_train(const TrainArgs& a) {
  const auto manifest = manifest_in(a.data);
  const fs::path out(a.out);
  fs::create_directories(out);

  std::optional<Trainer> trainer;
  if (!a.resume.empty()) {
    auto ck = load_checkpoint(a.resume);
    auto examples = load_examples(manifest, "train", ck.vocabulary, ck.config.model);
    trainer.emplace(Trainer::resume(ck, std::move(examples)));
    std::cout << "resumed at step " << trainer->step() << " of " << trainer->total_steps() << "\n";
  } else {
    auto cfg = load_run_config(a);
    if (a.max_steps) cfg.train.max_steps = a.max_steps;
    require_valid(cfg);
    std::vector<std::string> captions;
    for (const auto& e : load_manifest(manifest))
      if (e.split == "train") captions.insert(captions.end(), e.captions.begin(), e.captions.end());
    if (captions.empty()) throw InputError(manifest.string() + ": no train split entries");
    auto vocab = build_vocab(captions);
    auto examples = load_examples(manifest, "train", vocab, cfg.model);
    trainer.emplace(cfg, vocab, std::move(examples));
  }

  const auto& tc = trainer->config().train;
  std::ofstream log(out / "train_log.jsonl", a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw InputError("cannot write " + (out / "train_log.jsonl").string());
  const auto start = std::chrono::steady_clock::now();
  try {
    trainer->run([&](const StepMetrics& m) {
      log << nlohmann::json{{"step", m.step}, {"loss", m.loss}, {"lr", m.lr}, {"grad_norm", m.grad_norm},
                            {"masked_tokens", m.masked_tokens}}
                 .dump()
          << '\n';
      const bool last = m.step == trainer->total_steps();
      if (!a.quiet && tc.log_every && (m.step % tc.log_every == 0 || m.step == 1 || last)) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("step %6zu/%zu  loss %.4f  lr %.3g  (%.0fs)\n", m.step, trainer->total_steps(), m.loss, m.lr, secs);
        std::fflush(stdout);
      }
      if (tc.checkpoint_every && m.step % tc.checkpoint_every == 0 && !last) {
        char name[32];
        std::snprintf(name, sizeof name, "step_%06zu", m.step);
        trainer->save(out / name);
      }
      return true;
    });
  } catch (const NumericError& e) {
    trainer->save(out / "diagnostic");
    std::cerr << "error: " << e.what() << " at step " << trainer->step() << "; state written to "
              << (out / "diagnostic").string() << "\n";
    return kRuntime;
  }
  trainer->save(out / "final");
  std::cout << "final checkpoint " << (out / "final").string() << " at step " << trainer->step() << "\n";
  return kOk;
}

int cmd_generate(const GenerateArgs& a) {
  const auto ck = load_checkpoint(a.checkpoint);
  if (!valid_split(a.split)) throw ConfigError("unknown split '" + a.split + "'");
  const std::size_t beam = a.beam ? a.beam : ck.config.inference.beam_size;
  const std::size_t max_len = a.max_len ? a.max_len : ck.config.inference.max_length;
  EvcModel<float> model(ck.config.model, ck.params.clone());
  const auto manifest = manifest_in(a.data);
  std::vector<Prediction> preds;
  for (const auto& e : load_manifest(manifest)) {
    if (e.split != a.split) continue;
    auto clip = read_clip(resolve_clip_path(manifest, e));
    clip.clip_id = e.video_id;
    preds.push_back({e.video_id, generate_caption(model, clip, ck.vocabulary, beam, max_len)});
  }
  write_predictions(a.out, preds);
  std::cout << "wrote " << preds.size() << " predictions to " << a.out << "\n";
  return kOk;
}

int cmd_eval(const EvalArgs& a) {
  const auto report = evaluate(a.pred, a.refs);
  std::cout << report.table() << report.to_json().dump(2) << "\n";
  if (!a.out.empty()) {
    std::ofstream os(a.out);
    if (!os) throw InputError("cannot write " + a.out);
    os << report.to_json().dump(2) << '\n';
  }
  return kOk;
}

int cmd_regions(const RegionArgs& a) {
  static const std::regex grid_re("^([0-9]+)x([0-9]+)$");
  std::smatch m;
  if (!std::regex_match(a.grid, m, grid_re)) throw ConfigError("--grid expects RxC, e.g. 7x7");
  RegionCatalogParams p;
  p.grid_rows = std::stoul(m[1]);
  p.grid_cols = std::stoul(m[2]);
  p.step_x = a.delta_x ? a.delta_x : a.delta;
  p.step_y = a.delta_y ? a.delta_y : a.delta;
  p.cell = a.g;
  p.threshold = a.threshold;
  if (p.step_x == 0 || p.step_y == 0 || p.cell == 0) throw ConfigError("delta and g must be positive");
  const auto catalog = enumerate_regions(p);

  std::cout << "regions: " << catalog.size() << "\n";
  std::cout << "interpretation: the grid counts " << p.grid_rows << "x" << p.grid_cols << " cells of " << p.cell << "x"
            << p.cell << " fused-map positions (canvas " << p.grid_rows * p.cell << "x" << p.grid_cols * p.cell
            << "); anchors start at 1, regions stay strictly inside the grid and cover less than "
            << p.threshold << " of the canvas\n";
  RegionCatalogParams raw = p;
  raw.grid_rows *= 8;
  raw.grid_cols *= 8;
  std::cout << "raw-frame reading (cells of " << p.cell << " pixels on a " << raw.grid_rows * p.cell << "x"
            << raw.grid_cols * p.cell << " frame): " << enumerate_regions(raw).size() << " regions\n";
  std::cout << "reference figure for 224x224 frames, g=4, delta=2, threshold 0.3: 575 (matches neither reading)\n";

  std::map<std::size_t, std::size_t> hist;
  for (const auto& r : catalog.regions) ++hist[r.area_cells()];
  std::cout << "area histogram (fused-map positions: regions)\n";
  for (const auto& [area, n] : hist) std::printf("  %6zu: %zu\n", area, n);
  return kOk;
}

int cmd_gradcheck(const GradArgs& a) {
  GradCheckOptions opt;
  opt.eps = a.eps;
  opt.max_elements_per_param = a.samples;
  opt.seed = a.seed;
  const auto start = std::chrono::steady_clock::now();
  auto result = model_grad_check(preset_by_name(a.preset), a.seed, opt);
  if (a.inject_fault) {
    auto control = negative_control_grad_check();
    for (auto& e : control.params) {
      e.name = "fault.broken_square." + e.name;
      result.report.params.push_back(e);
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("%-44s %8s %12s\n", "parameter", "checked", "max rel err");
  for (const auto& e : result.report.params) {
    std::printf("%-44s %8zu %12.3e%s\n", e.name.c_str(), e.checked, e.max_rel_error,
                e.max_rel_error < a.tolerance ? "" : "  FAIL");
  }
  const bool ok = result.report.passed(a.tolerance);
  std::printf("preset %s: %zu tensors, %zu parameters, loss %.6f\n", a.preset.c_str(), result.report.params.size(),
              result.parameters, result.loss);
  std::printf("max relative error %.3e (tolerance %.0e) in %.1fs: %s\n", result.report.max_rel_error(), a.tolerance,
              secs, ok ? "PASS" : "FAIL");
  return ok ? kOk : kRuntime;
}

int config_dump(const std::string& preset) {
  std::cout << to_json(preset_by_name(preset)).dump(2) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Video captioning with multi-scale fusion, region-masked encoding and gated decoding"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a synthetic clip/caption corpus");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--clips", sa.clips, "Number of clips (80/10/10 train/val/test)")->capture_default_str();
  synth->add_option("--seed", sa.seed, "Generator seed")->capture_default_str();
  synth->add_option("--frames", sa.frames, "Frames per clip")->capture_default_str();
  synth->add_option("--size", sa.size, "Frame height and width in pixels")->capture_default_str();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model on a corpus");
  train->add_option("--config", ta.config, "JSON config (keys as printed by 'config')");
  train->add_option("--preset", ta.preset, "Preset used when no config is given (toy|full)")->capture_default_str();
  train->add_option("--data", ta.data, "Corpus directory or manifest")->required();
  train->add_option("--out", ta.out, "Output directory for log and checkpoints")->required();
  train->add_option("--resume", ta.resume, "Checkpoint directory to continue from");
  train->add_option("--max-steps", ta.max_steps, "Override the number of optimizer steps");
  train->add_flag("--quiet", ta.quiet, "Suppress progress lines");

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Caption every clip of a split");
  gen->add_option("--checkpoint", ga.checkpoint, "Checkpoint directory")->required();
  gen->add_option("--data", ga.data, "Corpus directory or manifest")->required();
  gen->add_option("--split", ga.split, "train|val|test")->capture_default_str();
  gen->add_option("--out", ga.out, "Predictions JSONL")->required();
  gen->add_option("--beam", ga.beam, "Beam size (default from checkpoint config, 4)");
  gen->add_option("--max-len", ga.max_len, "Generation cap (default from checkpoint config, 20)");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Score predictions: BLEU-4, METEOR, ROUGE-L, CIDEr");
  ev->add_option("--pred", ea.pred, "Predictions JSONL {video_id, caption}")->required();
  ev->add_option("--refs", ea.refs, "References JSONL {video_id, captions}")->required();
  ev->add_option("--out", ea.out, "Also write the JSON report here");

  RegionArgs ra;
  auto* reg = app.add_subcommand("regions", "Enumerate the maskable region catalog");
  reg->add_option("--grid", ra.grid, "Grid extent RxC in cells")->capture_default_str();
  reg->add_option("--delta", ra.delta, "Region step on both axes")->capture_default_str();
  reg->add_option("--delta-x", ra.delta_x, "Horizontal step (overrides --delta)");
  reg->add_option("--delta-y", ra.delta_y, "Vertical step (overrides --delta)");
  reg->add_option("--g", ra.g, "Grid cell side in fused-map positions")->capture_default_str();
  reg->add_option("--threshold", ra.threshold, "Area threshold as a fraction of the canvas")->capture_default_str();

  GradArgs ka;
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  gc->add_option("--preset", ka.preset, "toy|full")->capture_default_str();
  gc->add_option("--seed", ka.seed, "Seed for weights, clip and sampled positions")->capture_default_str();
  gc->add_option("--samples", ka.samples, "Positions checked per parameter tensor (0 = all)")->capture_default_str();
  gc->add_option("--eps", ka.eps, "Central-difference step")->capture_default_str();
  gc->add_option("--tolerance", ka.tolerance, "Maximum relative error")->capture_default_str();
  gc->add_flag("--inject-fault", ka.inject_fault, "Add an operation with a wrong backward pass");

  std::string preset_name = "toy";
  auto* cfg = app.add_subcommand("config", "Print a preset as a JSON config");
  cfg->add_option("--preset", preset_name, "toy|full")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*synth) return cmd_synth(sa);
    if (*train) return cmd_train(ta);
    if (*gen) return cmd_generate(ga);
    if (*ev) return cmd_eval(ea);
    if (*reg) return cmd_regions(ra);
    if (*gc) return cmd_gradcheck(ka);
    if (*cfg) return config_dump(preset_name);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
