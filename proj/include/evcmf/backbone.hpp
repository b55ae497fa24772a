#pragma once

// Hierarchical video feature extractor. A patch embedding followed by M
// residual mixer stages; stages after the first merge 2x2 neighbourhoods, so
// stage m has spatial stride 4 * 2^(m-1) and 2^(m-1) * base_channels channels.

#include <random>
#include <string>
#include <vector>

#include "evcmf/ops.hpp"
#include "evcmf/param_store.hpp"
#include "evcmf/video.hpp"

namespace evcmf {

struct BackboneConfig {
  std::size_t base_channels = 24;
  std::size_t stages = 4;
  /// Mixer hidden width as a multiple of the stage input width.
  std::size_t mixer_ratio = 2;

  std::size_t stage_channels(std::size_t m) const { return base_channels << (m - 1); }
  std::size_t stage_stride(std::size_t m) const { return std::size_t{4} << (m - 1); }
};

/// Inputs per spatio-temporal patch: 2 frames x 4 x 4 pixels x RGB.
inline constexpr std::size_t kPatchInputs = 2 * 4 * 4 * 3;

template <typename T>
struct FeaturePyramid {
  std::vector<Tensor<T>> stages;
};

/// Expected extents of stage m (1-based) for a T x H x W clip.
inline Shape stage_shape(const BackboneConfig& cfg, std::size_t m, std::size_t frames, std::size_t height,
                         std::size_t width) {
  const auto s = cfg.stage_stride(m);
  return {frames / 2, height / s, width / s, cfg.stage_channels(m)};
}

/// Rearranges a clip into non-overlapping 2x4x4 patches scaled to [0, 1]:
/// [T/2, H/4, W/4, 96], inner order (frame, row, col, channel).
template <typename T>
Tensor<T> patchify(const VideoClip& clip) {
  clip.validate();
  const std::size_t pt = clip.frames / 2, ph = clip.height / 4, pw = clip.width / 4;
  std::vector<T> out(pt * ph * pw * kPatchInputs);
  const T inv = T{1} / T{255};
  std::size_t o = 0;
  for (std::size_t t = 0; t < pt; ++t)
    for (std::size_t y = 0; y < ph; ++y)
      for (std::size_t x = 0; x < pw; ++x)
        for (std::size_t dt = 0; dt < 2; ++dt)
          for (std::size_t dy = 0; dy < 4; ++dy)
            for (std::size_t dx = 0; dx < 4; ++dx)
              for (std::size_t ch = 0; ch < 3; ++ch)
                out[o++] = static_cast<T>(clip.at(2 * t + dt, 4 * y + dy, 4 * x + dx, ch)) * inv;
  return Tensor<T>::from_data({pt, ph, pw, kPatchInputs}, std::move(out));
}

template <typename T>
void init_backbone_params(ParamStore<T>& params, const BackboneConfig& cfg, std::mt19937_64& rng) {
  if (cfg.stages == 0 || cfg.base_channels == 0 || cfg.mixer_ratio == 0) {
    throw ConfigError("backbone: stages, base_channels and mixer_ratio must be positive");
  }
  const std::size_t c1 = cfg.base_channels;
  params.add_uniform("backbone.patch_embed.weight", {kPatchInputs, c1}, kPatchInputs, rng);
  params.add_constant("backbone.patch_embed.bias", {c1}, T{0});
  for (std::size_t m = 1; m <= cfg.stages; ++m) {
    const std::string p = "backbone.stage" + std::to_string(m) + ".";
    const std::size_t in = m == 1 ? c1 : cfg.stage_channels(m - 1);
    const std::size_t hidden = in * cfg.mixer_ratio;
    params.add_uniform(p + "mixer.fc1.weight", {in, hidden}, in, rng);
    params.add_constant(p + "mixer.fc1.bias", {hidden}, T{0});
    params.add_uniform(p + "mixer.fc2.weight", {hidden, in}, hidden, rng);
    params.add_constant(p + "mixer.fc2.bias", {in}, T{0});
    if (m >= 2) {
      params.add_uniform(p + "merge.weight", {4 * in, cfg.stage_channels(m)}, 4 * in, rng);
      params.add_constant(p + "merge.bias", {cfg.stage_channels(m)}, T{0});
    }
  }
}

/// One affine projection of each patch to base_channels.
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& patches, const ParamStore<T>& params) {
  if (patches.rank() != 4 || patches.dim(3) != kPatchInputs) {
    throw ShapeError("patch_embed: expected [t,h,w," + std::to_string(kPatchInputs) + "], got " +
                     shape_str(patches.shape()));
  }
  return linear(patches, params["backbone.patch_embed.weight"], {params["backbone.patch_embed.bias"]});
}

template <typename T>
Tensor<T> patch_embed(const VideoClip& clip, const ParamStore<T>& params) {
  return patch_embed(patchify<T>(clip), params);
}

/// Residual feed-forward mixer, then (for m >= 2) a 2x2 patch merge.
template <typename T>
Tensor<T> stage_block(const Tensor<T>& x, std::size_t m, const ParamStore<T>& params,
                      const BackboneConfig& cfg) {
  if (m < 1 || m > cfg.stages) throw ConfigError("stage_block: stage index out of range");
  const std::size_t in = m == 1 ? cfg.base_channels : cfg.stage_channels(m - 1);
  if (x.rank() != 4 || x.dim(3) != in || (m >= 2 && (x.dim(1) % 2 || x.dim(2) % 2))) {
    throw ShapeError("stage_block " + std::to_string(m) + ": unexpected input " + shape_str(x.shape()));
  }
  const std::string p = "backbone.stage" + std::to_string(m) + ".";
  auto hidden = gelu(linear(x, params[p + "mixer.fc1.weight"], {params[p + "mixer.fc1.bias"]}));
  auto mixed = add(x, linear(hidden, params[p + "mixer.fc2.weight"], {params[p + "mixer.fc2.bias"]}));
  if (m == 1) return mixed;
  return linear(space_to_depth2(mixed), params[p + "merge.weight"], {params[p + "merge.bias"]});
}

/// Outputs of every stage, not only the last.
template <typename T>
FeaturePyramid<T> extract_pyramid(const Tensor<T>& patches, const ParamStore<T>& params,
                                  const BackboneConfig& cfg) {
  FeaturePyramid<T> pyr;
  Tensor<T> x = patch_embed(patches, params);
  for (std::size_t m = 1; m <= cfg.stages; ++m) {
    x = stage_block(x, m, params, cfg);
    pyr.stages.push_back(x);
  }
  return pyr;
}

template <typename T>
FeaturePyramid<T> extract_pyramid(const VideoClip& clip, const ParamStore<T>& params, const BackboneConfig& cfg) {
  return extract_pyramid(patchify<T>(clip), params, cfg);
}

}  // namespace evcmf
