#pragma once

// Masked-language-model training: caption corruption, the masked-token
// cross-entropy, warmup/decay schedule, AdamW and the accumulation step.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "evcmf/model.hpp"
#include "evcmf/vocabulary.hpp"

namespace evcmf {

/// Caption ids after [MASK] substitution, with the originals at masked slots.
struct MaskedBatch {
  std::vector<int> input_ids;
  std::vector<bool> pad;
  std::vector<std::size_t> positions;
  std::vector<int> labels;
};

/// Masks each content position (anything after [CLS] that is not [PAD])
/// independently with probability rate; at least one position is masked.
inline MaskedBatch corrupt_caption(const std::vector<int>& ids, double rate, std::mt19937_64& rng) {
  if (ids.empty() || ids.front() != kClsId) throw InputError("corrupt_caption: caption must start with [CLS]");
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("corrupt_caption: rate must lie in [0, 1]");
  std::vector<std::size_t> content;
  for (std::size_t i = 1; i < ids.size(); ++i)
    if (ids[i] != kPadId) content.push_back(i);
  if (content.empty()) throw InputError("corrupt_caption: caption has no content tokens");

  MaskedBatch out;
  out.input_ids = ids;
  out.pad.resize(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) out.pad[i] = ids[i] == kPadId;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  for (auto i : content)
    if (coin(rng) < rate) out.positions.push_back(i);
  if (out.positions.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, content.size() - 1);
    out.positions.push_back(content[pick(rng)]);
  }
  for (auto i : out.positions) {
    out.labels.push_back(ids[i]);
    out.input_ids[i] = kMaskId;
  }
  return out;
}

/// Summed negative log-likelihood of the original tokens at masked positions.
template <typename T>
Tensor<T> mlm_loss_sum(const Tensor<T>& logits, const MaskedBatch& batch) {
  if (batch.positions.empty()) throw InputError("mlm_loss: no masked positions");
  if (logits.rank() != 2 || logits.dim(0) < batch.input_ids.size()) {
    throw ShapeError("mlm_loss: logits " + shape_str(logits.shape()) + " do not cover " +
                     std::to_string(batch.input_ids.size()) + " positions");
  }
  return nll_sum(log_softmax_rows(logits), batch.positions, batch.labels);
}

/// Mean over masked tokens.
template <typename T>
Tensor<T> mlm_loss(const Tensor<T>& logits, const MaskedBatch& batch) {
  return scale(mlm_loss_sum(logits, batch), T{1} / static_cast<T>(batch.positions.size()));
}

/// Linear warmup to the base rate over warmup_ratio * total steps, then
/// linear decay to zero at total.
inline double lr_schedule(std::size_t step, std::size_t total, const TrainConfig& cfg) {
  if (total == 0 || step >= total) return 0.0;
  const double warm = std::floor(cfg.warmup_ratio * static_cast<double>(total));
  const double s = static_cast<double>(step);
  if (s < warm) return cfg.learning_rate * s / warm;
  return cfg.learning_rate * (static_cast<double>(total) - s) / (static_cast<double>(total) - warm);
}

/// Adam with decoupled weight decay; moments kept per parameter in insertion order.
template <typename T>
class AdamW {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  AdamW() = default;
  explicit AdamW(double decay) : weight_decay(decay) {}

  /// lr_scale[i] multiplies lr for parameter i (empty = all ones).
  void step(ParamStore<T>& params, double lr, const std::vector<double>& lr_scale = {}) {
    if (first_.empty()) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        first_.emplace_back(params.tensor(i).size(), T{0});
        second_.emplace_back(params.tensor(i).size(), T{0});
      }
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params.tensor(i);
      const double rate = lr * (lr_scale.empty() ? 1.0 : lr_scale[i]);
      auto values = p.mutable_data();
      auto& m = first_[i];
      auto& v = second_[i];
      const bool has = p.has_grad();
      for (std::size_t k = 0; k < values.size(); ++k) {
        const double g = has ? static_cast<double>(p.grad()[k]) : 0.0;
        m[k] = static_cast<T>(beta1 * m[k] + (1.0 - beta1) * g);
        v[k] = static_cast<T>(beta2 * v[k] + (1.0 - beta2) * g * g);
        const double mhat = m[k] / c1;
        const double vhat = v[k] / c2;
        double theta = values[k];
        theta -= rate * weight_decay * theta;
        theta -= rate * mhat / (std::sqrt(vhat) + eps);
        values[k] = static_cast<T>(theta);
      }
    }
  }

  std::size_t steps() const { return steps_; }
  const std::vector<std::vector<T>>& first_moments() const { return first_; }
  const std::vector<std::vector<T>>& second_moments() const { return second_; }
  void restore(std::size_t steps, std::vector<std::vector<T>> first, std::vector<std::vector<T>> second) {
    steps_ = steps;
    first_ = std::move(first);
    second_ = std::move(second);
  }

 private:
  std::size_t steps_ = 0;
  std::vector<std::vector<T>> first_;
  std::vector<std::vector<T>> second_;
};

/// One training example after corruption: patches, corrupted caption and the
/// optional feature mask plan.
template <typename T>
struct PreparedExample {
  const Tensor<T>* patches = nullptr;
  MaskedBatch text;
  std::optional<MaskPlan> plan;
};

/// Forward/backward over all micro-batches, weighting each example so the
/// accumulated gradient equals that of one batch with the mean over every
/// masked token. Returns that mean loss; gradients are left in the store.
template <typename T>
double accumulate_gradients(const EvcModel<T>& model,
                            const std::vector<std::vector<PreparedExample<T>>>& micro_batches) {
  std::size_t total = 0;
  for (const auto& mb : micro_batches)
    for (const auto& ex : mb) total += ex.text.positions.size();
  if (total == 0) throw InputError("accumulate_gradients: no masked tokens");
  const T weight = T{1} / static_cast<T>(total);
  double loss = 0.0;
  for (const auto& mb : micro_batches) {
    for (const auto& ex : mb) {
      auto rep = model.encode(*ex.patches, ex.plan ? &*ex.plan : nullptr);
      auto logits = model.logits(TextBatch{ex.text.input_ids, ex.text.pad}, model.visual_tokens(rep));
      auto part = scale(mlm_loss_sum(logits, ex.text), weight);
      loss += static_cast<double>(part.item());
      if (!std::isfinite(loss)) throw NumericError("training loss is not finite");
      part.backward();
    }
  }
  return loss;
}

template <typename T>
double global_grad_norm(const ParamStore<T>& params) {
  double acc = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params.tensor(i);
    if (!p.has_grad()) continue;
    for (auto g : p.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(acc);
}

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  std::size_t masked_tokens = 0;
};

/// Accumulates over the micro-batches and applies one AdamW update at
/// lr_schedule(step); backbone parameters use the configured multiplier.
template <typename T>
StepMetrics train_step(const std::vector<std::vector<PreparedExample<T>>>& micro_batches, EvcModel<T>& model,
                       AdamW<T>& optimizer, const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  auto& params = model.params();
  params.zero_grad();
  StepMetrics metrics;
  metrics.step = step;
  metrics.loss = accumulate_gradients(model, micro_batches);
  metrics.grad_norm = global_grad_norm(params);
  if (!std::isfinite(metrics.grad_norm)) throw NumericError("gradient norm is not finite");
  for (const auto& mb : micro_batches)
    for (const auto& ex : mb) metrics.masked_tokens += ex.text.positions.size();
  metrics.lr = lr_schedule(step, total_steps, cfg);
  std::vector<double> scales(params.size(), 1.0);
  for (std::size_t i = 0; i < params.size(); ++i)
    if (EvcModel<T>::is_backbone_param(params.names()[i])) scales[i] = cfg.backbone_lr_multiplier;
  optimizer.weight_decay = cfg.weight_decay;
  optimizer.step(params, metrics.lr, scales);
  return metrics;
}

}  // namespace evcmf
