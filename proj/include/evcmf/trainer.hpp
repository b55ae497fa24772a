#pragma once

// Epoch-shuffled training driver with resumable state.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "evcmf/checkpoint.hpp"
#include "evcmf/synth_data.hpp"

namespace evcmf {

struct TrainingExample {
  std::string video_id;
  Tensor<float> patches;
  /// Framed captions: [CLS] w1 .. wn [EOS].
  std::vector<std::vector<int>> captions;
};

/// Loads the given split of a manifest, patchifies the clips and encodes the
/// captions with vocab.
inline std::vector<TrainingExample> load_examples(const std::filesystem::path& manifest_path,
                                                  const std::string& split, const Vocabulary& vocab,
                                                  const ModelConfig& model) {
  std::vector<TrainingExample> out;
  for (const auto& e : load_manifest(manifest_path)) {
    if (e.split != split) continue;
    auto clip = read_clip(resolve_clip_path(manifest_path, e));
    clip.clip_id = e.video_id;
    if (clip.frames != model.frames || clip.height != model.height || clip.width != model.width) {
      throw ShapeError("clip " + e.video_id + " is " + std::to_string(clip.frames) + "x" + std::to_string(clip.height) +
                       "x" + std::to_string(clip.width) + ", model expects " + std::to_string(model.frames) + "x" +
                       std::to_string(model.height) + "x" + std::to_string(model.width));
    }
    TrainingExample ex{e.video_id, patchify<float>(clip), {}};
    for (const auto& c : e.captions) ex.captions.push_back(vocab.encode_caption(c));
    out.push_back(std::move(ex));
  }
  return out;
}

/// Truncates a framed caption to at most max_len tokens, keeping [EOS] last.
inline std::vector<int> fit_caption(std::vector<int> ids, std::size_t max_len) {
  if (ids.size() <= max_len) return ids;
  ids.resize(max_len);
  ids.back() = kEosId;
  return ids;
}

class Trainer {
 public:
  Trainer(RunConfig config, Vocabulary vocab, std::vector<TrainingExample> data)
      : config_(std::move(config)),
        vocab_(std::move(vocab)),
        data_(std::move(data)),
        model_(prepare(config_, vocab_)),
        optimizer_(config_.train.weight_decay),
        rng_(config_.train.seed) {
    if (data_.empty()) throw InputError("trainer: no training examples");
    total_steps_ = compute_total_steps();
  }

  /// Restores model, optimizer, sampler and rng state from a checkpoint.
  static Trainer resume(const Checkpoint& ck, std::vector<TrainingExample> data) {
    Trainer t(ck.config, ck.vocabulary, std::move(data));
    t.model_ = EvcModel<float>(ck.config.model, ck.params.clone());
    t.optimizer_.restore(ck.optimizer_steps, ck.first_moments, ck.second_moments);
    t.step_ = ck.step;
    t.total_steps_ = ck.total_steps;
    std::istringstream is(ck.rng_state);
    is >> t.rng_;
    if (ck.sampler_state.contains("order")) {
      t.order_ = ck.sampler_state.at("order").get<std::vector<std::size_t>>();
      t.cursor_ = ck.sampler_state.at("cursor").get<std::size_t>();
    }
    return t;
  }

  const RunConfig& config() const { return config_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  EvcModel<float>& model() { return model_; }
  const EvcModel<float>& model() const { return model_; }
  std::size_t step() const { return step_; }
  std::size_t total_steps() const { return total_steps_; }
  bool finished() const { return step_ >= total_steps_; }

  /// Draws batch_size x accumulation_steps examples and applies one update.
  StepMetrics step_once() {
    const auto& tc = config_.train;
    std::vector<std::vector<PreparedExample<float>>> micro(tc.accumulation_steps);
    for (auto& mb : micro) {
      for (std::size_t b = 0; b < tc.batch_size; ++b) mb.push_back(prepare_example(data_[next_index()]));
    }
    auto metrics = train_step(micro, model_, optimizer_, tc, step_, total_steps_);
    ++step_;
    metrics.step = step_;
    return metrics;
  }

  /// Runs until total_steps or until on_step returns false.
  void run(const std::function<bool(const StepMetrics&)>& on_step = {}) {
    while (!finished()) {
      const auto m = step_once();
      if (on_step && !on_step(m)) break;
    }
  }

  void save(const std::filesystem::path& dir) const {
    std::ostringstream os;
    os << rng_;
    nlohmann::json sampler{{"order", order_}, {"cursor", cursor_}};
    save_checkpoint(dir, config_, vocab_, model_.params(), &optimizer_, step_, total_steps_, os.str(), sampler);
  }

 private:
  static EvcModel<float> prepare(RunConfig& config, const Vocabulary& vocab) {
    config.model.decoder.vocab_size = vocab.size();
    config.model.decoder.max_positions = std::max(config.model.decoder.max_positions, config.train.max_caption_length);
    require_valid(config);
    return EvcModel<float>::initialize(config.model, config.train.seed);
  }

  std::size_t compute_total_steps() const {
    const auto& tc = config_.train;
    if (tc.max_steps) return tc.max_steps;
    const std::size_t per_step = tc.batch_size * tc.accumulation_steps;
    return tc.max_epochs * ((data_.size() + per_step - 1) / per_step);
  }

  std::size_t next_index() {
    if (cursor_ >= order_.size()) {
      order_.resize(data_.size());
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    return order_[cursor_++];
  }

  PreparedExample<float> prepare_example(const TrainingExample& ex) {
    const auto& tc = config_.train;
    std::size_t pick = 0;
    if (!tc.first_caption_only && ex.captions.size() > 1) {
      pick = std::uniform_int_distribution<std::size_t>(0, ex.captions.size() - 1)(rng_);
    }
    PreparedExample<float> out;
    out.patches = &ex.patches;
    out.text = corrupt_caption(fit_caption(ex.captions[pick], tc.max_caption_length), tc.mask_rate, rng_);
    if (config_.model.encoder.feature_masking) {
      out.plan = sample_mask_plan(model_.catalog(), config_.model.frames / 2, rng_());
    }
    return out;
  }

  RunConfig config_;
  Vocabulary vocab_;
  std::vector<TrainingExample> data_;
  EvcModel<float> model_;
  AdamW<float> optimizer_;
  std::mt19937_64 rng_;
  std::size_t step_ = 0;
  std::size_t total_steps_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace evcmf
