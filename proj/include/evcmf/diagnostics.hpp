#pragma once

// End-to-end gradient check of the full model in double precision, plus a
// deliberately broken operation used as a negative control.

#include <random>

#include "evcmf/grad_check.hpp"
#include "evcmf/model.hpp"
#include "evcmf/synth_data.hpp"
#include "evcmf/training.hpp"

namespace evcmf {

struct ModelGradCheck {
  GradCheckReport report;
  double loss = 0.0;
  std::size_t parameters = 0;
};

/// Checks d(MLM loss)/d(every parameter) on one synthetic clip with a fixed
/// region mask and a fixed corrupted caption. Each parameter tensor is
/// sampled at up to options.max_elements_per_param positions.
inline ModelGradCheck model_grad_check(RunConfig cfg, std::uint64_t seed, const GradCheckOptions& options) {
  SynthSettings settings;
  settings.frames = cfg.model.frames;
  settings.height = cfg.model.height;
  settings.width = cfg.model.width;
  settings.seed = seed;
  const auto sample = generate_clip(settings, 0);
  const auto vocab = build_vocab(sample.captions);
  cfg.model.decoder.vocab_size = vocab.size();
  require_valid(cfg);

  auto model = EvcModel<double>::initialize(cfg.model, seed);
  const auto patches = patchify<double>(sample.clip);
  std::mt19937_64 rng(seed);
  const auto text = corrupt_caption(vocab.encode_caption(sample.captions[0]), 0.5, rng);
  std::optional<MaskPlan> plan;
  if (cfg.model.encoder.feature_masking && !model.catalog().regions.empty())
    plan = sample_mask_plan(model.catalog(), cfg.model.frames / 2, seed);

  const auto& mc = cfg.model;
  auto objective = [&](const ParamStore<double>& p) {
    auto pyramid = extract_pyramid(patches, p, mc.backbone);
    auto fused = fuse_pyramid(pyramid, p, mc.encoder);
    auto final_rep = pool_final(apply_mask(fused, plan ? &*plan : nullptr));
    auto tokens = tokenize_visual(final_rep, p);
    return mlm_loss(decode_logits_from_tokens(TextBatch{text.input_ids, text.pad}, tokens, p, mc.decoder), text);
  };

  ModelGradCheck out;
  {
    NoGradGuard no_grad;
    out.loss = objective(model.params()).item();
  }
  for (std::size_t i = 0; i < model.params().size(); ++i) out.parameters += model.params().tensor(i).size();
  out.report = grad_check(model.params(), objective, options);
  return out;
}

/// y = x * x with a backward pass that returns 3x instead of 2x.
template <typename T>
Tensor<T> broken_square(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    const auto& in = self.parents[0]->data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * T(3) * in[i];
  });
}

/// Gradient check of sum(broken_square(x)); must report a large error.
inline GradCheckReport negative_control_grad_check() {
  ParamStore<double> p;
  p.add("x", Tensor<double>::from_data({4}, {0.5, -1.0, 1.5, 2.0}, true));
  return grad_check(p, [](const ParamStore<double>& s) { return sum(broken_square(s["x"])); });
}

}  // namespace evcmf
