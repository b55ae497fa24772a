#pragma once

// Pyramid fusion, the region catalog, per-frame region masking and the final
// spatio-temporal pooling that produces the video representation.

#include <atomic>
#include <cstdint>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "evcmf/backbone.hpp"

namespace evcmf {

struct EncoderConfig {
  std::size_t fused_channels = 64;
  /// Grid cell side g, in fused-map cells.
  std::size_t grid_cell = 4;
  std::size_t region_step_x = 2;
  std::size_t region_step_y = 2;
  /// Area threshold delta, as a fraction of the fused map.
  double area_threshold = 0.3;
  bool feature_masking = true;
};

/// Rectangle r(i, j, w*dx, h*dy) on a grid of g x g cells.
struct Region {
  std::size_t row = 0;     // anchor i
  std::size_t col = 0;     // anchor j
  std::size_t height = 0;  // h, in multiples of step_y
  std::size_t width = 0;   // w, in multiples of step_x
  std::size_t step_y = 1;
  std::size_t step_x = 1;
  std::size_t cell = 1;

  std::size_t cell_row_begin() const { return row * cell; }
  std::size_t cell_row_end() const { return (row + height * step_y) * cell; }
  std::size_t cell_col_begin() const { return col * cell; }
  std::size_t cell_col_end() const { return (col + width * step_x) * cell; }
  std::size_t area_cells() const { return (height * step_y * cell) * (width * step_x * cell); }

  bool contains(std::size_t y, std::size_t x) const {
    return y >= cell_row_begin() && y < cell_row_end() && x >= cell_col_begin() && x < cell_col_end();
  }

  auto key() const { return std::tie(row, col, height, width); }
  friend bool operator==(const Region& a, const Region& b) {
    return a.key() == b.key() && a.step_y == b.step_y && a.step_x == b.step_x && a.cell == b.cell;
  }
  friend bool operator<(const Region& a, const Region& b) { return a.key() < b.key(); }
};

struct RegionCatalogParams {
  std::size_t grid_rows = 0;  // G_y
  std::size_t grid_cols = 0;  // G_x
  std::size_t step_x = 2;
  std::size_t step_y = 2;
  std::size_t cell = 4;
  double threshold = 0.3;

  double canvas_cells() const {
    return static_cast<double>(grid_rows * cell) * static_cast<double>(grid_cols * cell);
  }
};

struct RegionCatalog {
  RegionCatalogParams params;
  std::vector<Region> regions;

  bool empty() const { return regions.empty(); }
  std::size_t size() const { return regions.size(); }
};

/// Every (i, j, h, w) with i, j >= 1, i + h*dy < G_y, j + w*dx < G_x and area
/// strictly below threshold * canvas, ordered lexicographically.
inline RegionCatalog enumerate_regions(const RegionCatalogParams& p) {
  RegionCatalog catalog{p, {}};
  if (p.step_x == 0 || p.step_y == 0 || p.cell == 0) return catalog;
  // strict bound; areas equal to threshold * canvas up to rounding are excluded
  const double limit = p.threshold * p.canvas_cells() * (1.0 - 1e-12);
  for (std::size_t i = 1; i < p.grid_rows; ++i)
    for (std::size_t j = 1; j < p.grid_cols; ++j)
      for (std::size_t h = 1; i + h * p.step_y < p.grid_rows; ++h)
        for (std::size_t w = 1; j + w * p.step_x < p.grid_cols; ++w) {
          Region r{i, j, h, w, p.step_y, p.step_x, p.cell};
          if (static_cast<double>(r.area_cells()) < limit) catalog.regions.push_back(r);
        }
  return catalog;
}

/// Catalog for a fused map of rows x cols cells under the encoder settings.
inline RegionCatalog catalog_for_map(std::size_t rows, std::size_t cols, const EncoderConfig& cfg) {
  if (cfg.grid_cell == 0 || rows % cfg.grid_cell || cols % cfg.grid_cell) {
    throw ConfigError("grid cell " + std::to_string(cfg.grid_cell) + " does not tile a " +
                      std::to_string(rows) + "x" + std::to_string(cols) + " feature map");
  }
  return enumerate_regions({rows / cfg.grid_cell, cols / cfg.grid_cell, cfg.region_step_x, cfg.region_step_y,
                            cfg.grid_cell, cfg.area_threshold});
}

/// One region per frame, drawn uniformly and independently.
struct MaskPlan {
  std::vector<Region> regions;
  std::uint64_t seed = 0;
};

inline MaskPlan sample_mask_plan(const RegionCatalog& catalog, std::size_t frames, std::uint64_t seed) {
  MaskPlan plan{{}, seed};
  if (frames == 0) return plan;
  if (catalog.empty()) {
    throw ConfigError("cannot sample a mask plan from an empty region catalog; disable feature masking instead");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, catalog.size() - 1);
  plan.regions.reserve(frames);
  for (std::size_t t = 0; t < frames; ++t) plan.regions.push_back(catalog.regions[pick(rng)]);
  return plan;
}

/// Number of apply_mask calls that actually masked, process-wide.
inline std::atomic<std::uint64_t>& mask_invocations() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

/// Zeroes the cells of frame t covered by plan->regions[t]. A null plan
/// returns the input unchanged.
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& fused, const MaskPlan* plan) {
  if (plan == nullptr) return fused;
  if (fused.rank() != 4) throw ShapeError("apply_mask: expected [t,h,w,c], got " + shape_str(fused.shape()));
  const std::size_t t = fused.dim(0), h = fused.dim(1), w = fused.dim(2);
  if (plan->regions.size() != t) {
    throw ContractError("apply_mask: plan has " + std::to_string(plan->regions.size()) + " regions for " +
                        std::to_string(t) + " frames");
  }
  std::vector<bool> keep(t * h * w, true);
  for (std::size_t f = 0; f < t; ++f) {
    const Region& r = plan->regions[f];
    if (r.cell_row_end() > h || r.cell_col_end() > w) {
      throw ContractError("apply_mask: region exceeds the " + std::to_string(h) + "x" + std::to_string(w) +
                          " feature map");
    }
    for (std::size_t y = r.cell_row_begin(); y < r.cell_row_end(); ++y)
      for (std::size_t x = r.cell_col_begin(); x < r.cell_col_end(); ++x) keep[(f * h + y) * w + x] = false;
  }
  mask_invocations().fetch_add(1, std::memory_order_relaxed);
  return zero_cells(fused, keep);
}

template <typename T>
void init_encoder_params(ParamStore<T>& params, const BackboneConfig& bb, const EncoderConfig& cfg,
                         std::mt19937_64& rng) {
  if (cfg.fused_channels == 0 || cfg.fused_channels % bb.stages != 0) {
    throw ConfigError("fused channels " + std::to_string(cfg.fused_channels) + " not divisible by " +
                      std::to_string(bb.stages) + " stages");
  }
  const std::size_t per_stage = cfg.fused_channels / bb.stages;
  for (std::size_t m = 1; m <= bb.stages; ++m) {
    const std::string p = "encoder.fuse" + std::to_string(m) + ".";
    params.add_uniform(p + "weight", {bb.stage_channels(m), per_stage}, bb.stage_channels(m), rng);
    params.add_constant(p + "bias", {per_stage}, T{0});
  }
}

/// Projects each stage to C/M channels, resizes it to stride 8 and
/// concatenates the stages along channels in order.
template <typename T>
Tensor<T> fuse_pyramid(const FeaturePyramid<T>& pyr, const ParamStore<T>& params, const EncoderConfig& cfg) {
  const std::size_t stages = pyr.stages.size();
  if (stages == 0 || cfg.fused_channels % stages != 0) {
    throw ConfigError("fused channels " + std::to_string(cfg.fused_channels) + " not divisible by " +
                      std::to_string(stages) + " stages");
  }
  // Stage 2 sits at stride 8; derive the target from stage 1 (stride 4).
  const auto& first = pyr.stages.front();
  if (first.dim(1) % 2 || first.dim(2) % 2) throw ShapeError("fuse_pyramid: stage 1 extents must be even");
  const std::size_t out_h = first.dim(1) / 2, out_w = first.dim(2) / 2;
  std::vector<Tensor<T>> parts;
  parts.reserve(stages);
  for (std::size_t m = 1; m <= stages; ++m) {
    const std::string p = "encoder.fuse" + std::to_string(m) + ".";
    auto projected = linear(pyr.stages[m - 1], params[p + "weight"], {params[p + "bias"]});
    parts.push_back(resize_spatial(projected, out_h, out_w));
  }
  return concat_last(parts);
}

/// Average pooling with kernel (2, 4, 4) and stride (1, 4, 4).
template <typename T>
Tensor<T> pool_final(const Tensor<T>& masked) {
  return avg_pool3d(masked, {2, 4, 4}, {1, 4, 4});
}

}  // namespace evcmf
