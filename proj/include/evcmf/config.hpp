#pragma once

// Model, training and generation settings, the two shape presets, and their
// JSON form. Keys are full words. The full preset uses 32 frames at 224x224,
// g = 4, dx = dy = 2, delta = 0.3, Z = 4, d = 768, vocabulary 30,522, beam 4
// and generation cap 20.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "evcmf/decoder.hpp"
#include "evcmf/masked_encoder.hpp"
#include "json.hpp"

namespace evcmf {

struct ModelConfig {
  std::size_t frames = 8;   // T
  std::size_t height = 64;  // H
  std::size_t width = 64;   // W
  BackboneConfig backbone;
  EncoderConfig encoder;
  DecoderConfig decoder;

  std::size_t fused_rows() const { return height / 8; }
  std::size_t fused_cols() const { return width / 8; }
  Shape fused_shape() const { return {frames / 2, fused_rows(), fused_cols(), encoder.fused_channels}; }
  Shape final_shape() const { return {frames / 2 - 1, height / 32, width / 32, encoder.fused_channels}; }
  std::size_t visual_tokens() const { return (frames / 2 - 1) * (height / 32) * (width / 32); }
};

struct TrainConfig {
  double learning_rate = 4e-5;
  double warmup_ratio = 0.1;
  double weight_decay = 0.05;
  std::size_t batch_size = 6;
  std::size_t accumulation_steps = 4;
  std::size_t max_epochs = 50;
  /// Overrides the epoch-derived step count when nonzero.
  std::size_t max_steps = 0;
  double mask_rate = 0.5;
  std::size_t max_caption_length = 50;
  double backbone_lr_multiplier = 0.05;
  std::uint64_t seed = 42;
  /// Train on each clip's first caption only instead of a random reference.
  bool first_caption_only = false;
  std::size_t checkpoint_every = 0;
  std::size_t log_every = 10;
};

struct InferenceConfig {
  std::size_t beam_size = 4;
  std::size_t max_length = 20;
};

struct RunConfig {
  std::string preset = "toy";
  ModelConfig model;
  TrainConfig train;
  InferenceConfig inference;
};

/// Desk-scale preset: T=8, 64x64 frames, C1=8, C=32, d=64, Z=4, 4 heads.
inline RunConfig toy_preset() {
  RunConfig c;
  c.preset = "toy";
  c.model.frames = 8;
  c.model.height = c.model.width = 64;
  c.model.backbone.base_channels = 8;
  c.model.encoder.fused_channels = 32;
  // An 8x8 fused map cannot hold a 2g x 2g region with g = 4 strictly inside
  // the grid; use single-cell grid squares.
  c.model.encoder.grid_cell = 1;
  c.model.decoder.hidden = 64;
  c.model.decoder.heads = 4;
  c.model.decoder.layers = 4;
  c.model.decoder.ffn_hidden = 256;
  c.train.batch_size = 2;
  c.train.accumulation_steps = 4;
  c.train.max_caption_length = 16;
  return c;
}

/// Full-size shape: T=32, 224x224, C1=96, C=768, d=768, 12 heads, Z=4.
inline RunConfig full_preset() {
  RunConfig c;
  c.preset = "full";
  c.model.frames = 32;
  c.model.height = c.model.width = 224;
  c.model.backbone.base_channels = 96;
  c.model.encoder.fused_channels = 768;
  c.model.encoder.grid_cell = 4;
  c.model.decoder.hidden = 768;
  c.model.decoder.heads = 12;
  c.model.decoder.layers = 4;
  c.model.decoder.ffn_hidden = 3072;
  c.model.decoder.vocab_size = 30522;
  return c;
}

inline RunConfig preset_by_name(const std::string& name) {
  if (name == "toy") return toy_preset();
  if (name == "full") return full_preset();
  throw ConfigError("unknown preset '" + name + "' (expected toy or full)");
}

/// Every violated constraint, in a stable order. Empty means valid.
inline std::vector<std::string> validate(const RunConfig& c) {
  std::vector<std::string> errs;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) errs.push_back(msg);
  };
  const auto& m = c.model;
  check(m.frames >= 4 && m.frames % 2 == 0, "frames must be even and at least 4");
  check(m.height > 0 && m.height % 32 == 0, "frame_height must be a positive multiple of 32");
  check(m.width > 0 && m.width % 32 == 0, "frame_width must be a positive multiple of 32");
  check(m.backbone.base_channels > 0, "base_channels must be positive");
  check(m.backbone.stages >= 1 && m.backbone.stages <= 4, "backbone_stages must lie in [1, 4]");
  check(m.backbone.mixer_ratio > 0, "mixer_ratio must be positive");
  check(m.encoder.fused_channels > 0 && m.backbone.stages > 0 &&
            m.encoder.fused_channels % m.backbone.stages == 0,
        "fused_channels must be a positive multiple of backbone_stages");
  check(m.encoder.grid_cell > 0 && m.height % 8 == 0 && m.width % 8 == 0 &&
            m.fused_rows() % std::max<std::size_t>(m.encoder.grid_cell, 1) == 0 &&
            m.fused_cols() % std::max<std::size_t>(m.encoder.grid_cell, 1) == 0,
        "grid_size must divide the fused map (frame size / 8)");
  check(m.encoder.region_step_x > 0 && m.encoder.region_step_y > 0, "region steps must be positive");
  check(m.encoder.area_threshold >= 0.0 && m.encoder.area_threshold <= 1.0,
        "mask_area_threshold must lie in [0, 1]");
  check(m.decoder.hidden > 0 && m.decoder.heads > 0 && m.decoder.hidden % m.decoder.heads == 0,
        "hidden_size must be a positive multiple of attention_heads");
  check(m.decoder.layers >= 1, "decoder_layers must be at least 1");
  check(m.decoder.ffn_hidden > 0, "ffn_hidden_size must be positive");
  check(m.decoder.max_positions >= 3, "max_positions must be at least 3");
  const auto& t = c.train;
  check(t.learning_rate > 0.0, "learning_rate must be positive");
  check(t.warmup_ratio >= 0.0 && t.warmup_ratio < 1.0, "warmup_ratio must lie in [0, 1)");
  check(t.weight_decay >= 0.0, "weight_decay must be non-negative");
  check(t.batch_size >= 1, "batch_size must be at least 1");
  check(t.accumulation_steps >= 1, "gradient_accumulation_steps must be at least 1");
  check(t.max_epochs >= 1, "max_epochs must be at least 1");
  check(t.mask_rate >= 0.0 && t.mask_rate <= 1.0, "mask_rate must lie in [0, 1]");
  check(t.max_caption_length >= 3 && t.max_caption_length <= m.decoder.max_positions,
        "max_caption_length must lie in [3, max_positions]");
  check(t.backbone_lr_multiplier >= 0.0 && t.backbone_lr_multiplier <= 1.0,
        "backbone_lr_multiplier must lie in [0, 1]");
  check(c.inference.beam_size >= 1, "beam_size must be at least 1");
  check(c.inference.max_length >= 1 && c.inference.max_length + 2 <= m.decoder.max_positions,
        "max_generation_length must lie in [1, max_positions - 2]");
  return errs;
}

inline void require_valid(const RunConfig& c) {
  const auto errs = validate(c);
  if (errs.empty()) return;
  std::string msg = "invalid configuration:";
  for (const auto& e : errs) msg += "\n  - " + e;
  throw ConfigError(msg);
}

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& t = c.train;
  return {
      {"preset", c.preset},
      {"frames", m.frames},
      {"frame_height", m.height},
      {"frame_width", m.width},
      {"base_channels", m.backbone.base_channels},
      {"backbone_stages", m.backbone.stages},
      {"mixer_ratio", m.backbone.mixer_ratio},
      {"fused_channels", m.encoder.fused_channels},
      {"grid_size", m.encoder.grid_cell},
      {"region_step_x", m.encoder.region_step_x},
      {"region_step_y", m.encoder.region_step_y},
      {"mask_area_threshold", m.encoder.area_threshold},
      {"feature_masking", m.encoder.feature_masking},
      {"hidden_size", m.decoder.hidden},
      {"attention_heads", m.decoder.heads},
      {"decoder_layers", m.decoder.layers},
      {"ffn_hidden_size", m.decoder.ffn_hidden},
      {"vocabulary_size", m.decoder.vocab_size},
      {"max_positions", m.decoder.max_positions},
      {"enhanced_attention", m.decoder.enhanced},
      {"learning_rate", t.learning_rate},
      {"warmup_ratio", t.warmup_ratio},
      {"weight_decay", t.weight_decay},
      {"batch_size", t.batch_size},
      {"gradient_accumulation_steps", t.accumulation_steps},
      {"max_epochs", t.max_epochs},
      {"max_steps", t.max_steps},
      {"mask_rate", t.mask_rate},
      {"max_caption_length", t.max_caption_length},
      {"backbone_lr_multiplier", t.backbone_lr_multiplier},
      {"seed", t.seed},
      {"first_caption_only", t.first_caption_only},
      {"checkpoint_every", t.checkpoint_every},
      {"log_every", t.log_every},
      {"beam_size", c.inference.beam_size},
      {"max_generation_length", c.inference.max_length},
  };
}

/// Starts from the preset named by "preset" (default toy) and applies every
/// other key. Unknown keys and type errors are reported together.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  std::vector<std::string> errs;
  RunConfig c;
  try {
    c = preset_by_name(j.value("preset", std::string("toy")));
  } catch (const std::exception& e) {
    errs.push_back(e.what());
  }
  auto& m = c.model;
  auto& t = c.train;
  auto size_field = [&](std::size_t& dst) {
    return [&dst](const nlohmann::json& v) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
        throw std::invalid_argument("expected a non-negative integer");
      }
      dst = v.get<std::size_t>();
    };
  };
  auto real_field = [](double& dst) {
    return [&dst](const nlohmann::json& v) {
      if (!v.is_number()) throw std::invalid_argument("expected a number");
      dst = v.get<double>();
    };
  };
  auto bool_field = [](bool& dst) {
    return [&dst](const nlohmann::json& v) {
      if (!v.is_boolean()) throw std::invalid_argument("expected true or false");
      dst = v.get<bool>();
    };
  };
  std::uint64_t seed = t.seed;
  std::size_t seed_tmp = static_cast<std::size_t>(seed);
  const std::vector<std::pair<std::string, std::function<void(const nlohmann::json&)>>> fields = {
      {"frames", size_field(m.frames)},
      {"frame_height", size_field(m.height)},
      {"frame_width", size_field(m.width)},
      {"base_channels", size_field(m.backbone.base_channels)},
      {"backbone_stages", size_field(m.backbone.stages)},
      {"mixer_ratio", size_field(m.backbone.mixer_ratio)},
      {"fused_channels", size_field(m.encoder.fused_channels)},
      {"grid_size", size_field(m.encoder.grid_cell)},
      {"region_step_x", size_field(m.encoder.region_step_x)},
      {"region_step_y", size_field(m.encoder.region_step_y)},
      {"mask_area_threshold", real_field(m.encoder.area_threshold)},
      {"feature_masking", bool_field(m.encoder.feature_masking)},
      {"hidden_size", size_field(m.decoder.hidden)},
      {"attention_heads", size_field(m.decoder.heads)},
      {"decoder_layers", size_field(m.decoder.layers)},
      {"ffn_hidden_size", size_field(m.decoder.ffn_hidden)},
      {"vocabulary_size", size_field(m.decoder.vocab_size)},
      {"max_positions", size_field(m.decoder.max_positions)},
      {"enhanced_attention", bool_field(m.decoder.enhanced)},
      {"learning_rate", real_field(t.learning_rate)},
      {"warmup_ratio", real_field(t.warmup_ratio)},
      {"weight_decay", real_field(t.weight_decay)},
      {"batch_size", size_field(t.batch_size)},
      {"gradient_accumulation_steps", size_field(t.accumulation_steps)},
      {"max_epochs", size_field(t.max_epochs)},
      {"max_steps", size_field(t.max_steps)},
      {"mask_rate", real_field(t.mask_rate)},
      {"max_caption_length", size_field(t.max_caption_length)},
      {"backbone_lr_multiplier", real_field(t.backbone_lr_multiplier)},
      {"seed", size_field(seed_tmp)},
      {"first_caption_only", bool_field(t.first_caption_only)},
      {"checkpoint_every", size_field(t.checkpoint_every)},
      {"log_every", size_field(t.log_every)},
      {"beam_size", size_field(c.inference.beam_size)},
      {"max_generation_length", size_field(c.inference.max_length)},
  };
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "preset") continue;
    auto f = std::find_if(fields.begin(), fields.end(), [&](const auto& p) { return p.first == it.key(); });
    if (f == fields.end()) {
      errs.push_back("unknown key '" + it.key() + "'");
      continue;
    }
    try {
      f->second(it.value());
    } catch (const std::exception& e) {
      errs.push_back(it.key() + ": " + e.what());
    }
  }
  t.seed = seed_tmp;
  for (const auto& e : validate(c)) errs.push_back(e);
  if (!errs.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errs) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  return c;
}

}  // namespace evcmf
