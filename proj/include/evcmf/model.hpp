#pragma once

// Full captioning model: backbone -> fusion -> (training-time) region mask
// -> pooling -> visual tokens -> enhanced decoder.

#include <cstdint>
#include <memory>
#include <random>
#include <string>

#include "evcmf/config.hpp"

namespace evcmf {

template <typename T>
class EvcModel {
 public:
  EvcModel(ModelConfig config, ParamStore<T> params)
      : config_(std::move(config)),
        params_(std::move(params)),
        catalog_(std::make_shared<RegionCatalog>(
            catalog_for_map(config_.fused_rows(), config_.fused_cols(), config_.encoder))) {}

  /// Fresh parameters from a seeded fan-in uniform scheme.
  static EvcModel initialize(const ModelConfig& config, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParamStore<T> params;
    init_backbone_params(params, config.backbone, rng);
    init_encoder_params(params, config.backbone, config.encoder, rng);
    init_decoder_params(params, config.decoder, config.encoder.fused_channels, rng);
    return EvcModel(config, std::move(params));
  }

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  /// Region catalog for this model's fused map, computed once.
  const RegionCatalog& catalog() const { return *catalog_; }

  static bool is_backbone_param(const std::string& name) { return name.rfind("backbone.", 0) == 0; }

  /// Patches -> final video representation [T/2-1, H/32, W/32, C].
  /// A null plan disables masking.
  Tensor<T> encode(const Tensor<T>& patches, const MaskPlan* plan = nullptr) const {
    auto pyramid = extract_pyramid(patches, params_, config_.backbone);
    auto fused = fuse_pyramid(pyramid, params_, config_.encoder);
    return pool_final(apply_mask(fused, plan));
  }

  Tensor<T> encode(const VideoClip& clip) const { return encode(patchify<T>(clip), nullptr); }

  Tensor<T> visual_tokens(const Tensor<T>& final_rep) const { return tokenize_visual(final_rep, params_); }

  Tensor<T> logits(const TextBatch& text, const Tensor<T>& visual_tokens, DecodeTrace<T>* record = nullptr) const {
    return decode_logits_from_tokens(text, visual_tokens, params_, config_.decoder, record);
  }

  template <typename U>
  EvcModel<U> cast() const {
    return EvcModel<U>(config_, params_.template cast<U>());
  }

 private:
  ModelConfig config_;
  ParamStore<T> params_;
  std::shared_ptr<const RegionCatalog> catalog_;
};

}  // namespace evcmf
