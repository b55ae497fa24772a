#pragma once

// Synthetic moving-shape clips with templated captions, the EVCF clip
// container and the JSON Lines dataset manifest.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include "evcmf/video.hpp"
#include "evcmf/vocabulary.hpp"
#include "json.hpp"

namespace evcmf {

inline const std::array<std::string, 3> kShapes{"square", "circle", "triangle"};
inline const std::array<std::string, 4> kColors{"red", "green", "blue", "yellow"};
inline const std::array<std::string, 4> kMotions{"left", "right", "up", "down"};

struct SynthSettings {
  std::size_t frames = 8;
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t seed = 7;
  std::size_t min_size = 10;
  std::size_t max_size = 16;
  std::size_t min_speed = 2;
  std::size_t max_speed = 4;
};

struct SynthClip {
  VideoClip clip;
  std::vector<std::string> captions;
  std::string shape;
  std::string color;
  std::string motion;
  /// Per-frame displacement in pixels (x, y).
  int step_x = 0;
  int step_y = 0;
};

namespace detail {

inline std::array<std::uint8_t, 3> color_rgb(const std::string& c) {
  if (c == "red") return {220, 40, 40};
  if (c == "green") return {40, 200, 60};
  if (c == "blue") return {40, 80, 230};
  return {230, 220, 40};
}

inline bool shape_covers(const std::string& shape, std::size_t size, std::size_t y, std::size_t x) {
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  if (shape == "square") return true;
  if (shape == "circle") {
    const double dy = static_cast<double>(y) - c, dx = static_cast<double>(x) - c;
    return dy * dy + dx * dx <= c * c + 0.5;
  }
  // Upward triangle: row y spans |x - c| <= y / 2.
  return std::abs(static_cast<double>(x) - c) <= static_cast<double>(y) / 2.0 + 0.25;
}

}  // namespace detail

inline constexpr std::uint8_t kBackgroundLevel = 16;

/// Caption paraphrases; index 0 is the canonical form.
inline std::string caption_variant(std::size_t variant, const std::string& color, const std::string& shape,
                                   const std::string& motion) {
  switch (variant) {
    case 0:
      return "a " + color + " " + shape + " moves " + motion;
    case 1:
      return "a " + color + " " + shape + " is moving " + motion;
    default:
      return "the " + color + " " + shape + " moves " + motion;
  }
}

inline bool caption_matches_template(const std::string& caption) {
  static const std::regex grammar(
      "^(a|the) (red|green|blue|yellow) (square|circle|triangle) (moves|is moving) (left|right|up|down)$");
  return std::regex_match(caption, grammar);
}

/// Deterministic clip for (settings.seed, index). Attribute combinations follow a
/// seeded permutation, so the first 48 indices are pairwise distinct.
inline SynthClip generate_clip(const SynthSettings& settings, std::size_t index) {
  const std::size_t combos = kShapes.size() * kColors.size() * kMotions.size();
  std::vector<std::size_t> order(combos);
  for (std::size_t i = 0; i < combos; ++i) order[i] = i;
  std::mt19937_64 perm_rng(settings.seed);
  std::shuffle(order.begin(), order.end(), perm_rng);
  const std::size_t combo = order[index % combos];

  SynthClip out;
  out.shape = kShapes[combo % kShapes.size()];
  out.color = kColors[(combo / kShapes.size()) % kColors.size()];
  out.motion = kMotions[combo / (kShapes.size() * kColors.size())];

  if (settings.min_size == 0 || settings.min_size > settings.max_size || settings.min_speed > settings.max_speed) {
    throw ConfigError("synthetic settings: inconsistent size/speed ranges");
  }
  const std::size_t travel_min = settings.min_size + settings.min_speed * (settings.frames - 1);
  if (travel_min > settings.height || travel_min > settings.width) {
    throw ConfigError("synthetic settings: a " + std::to_string(settings.height) + "x" + std::to_string(settings.width) +
                      " canvas is too small for a moving shape over " + std::to_string(settings.frames) + " frames");
  }

  std::seed_seq seq{static_cast<std::uint32_t>(settings.seed), static_cast<std::uint32_t>(settings.seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  auto uniform = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };

  std::size_t size = uniform(settings.min_size, settings.max_size);
  std::size_t speed = uniform(settings.min_speed, settings.max_speed);
  while (size + speed * (settings.frames - 1) > std::min(settings.height, settings.width)) {
    if (speed > settings.min_speed) {
      --speed;
    } else {
      --size;
    }
  }
  const std::size_t travel = speed * (settings.frames - 1);
  const bool horizontal = out.motion == "left" || out.motion == "right";
  const int sign = (out.motion == "right" || out.motion == "down") ? 1 : -1;
  out.step_x = horizontal ? sign * static_cast<int>(speed) : 0;
  out.step_y = horizontal ? 0 : sign * static_cast<int>(speed);

  // Start so the whole trajectory stays on the canvas.
  const std::size_t span_x = horizontal ? size + travel : size;
  const std::size_t span_y = horizontal ? size : size + travel;
  std::size_t x0 = uniform(0, settings.width - span_x);
  std::size_t y0 = uniform(0, settings.height - span_y);
  if (out.step_x < 0) x0 += travel;
  if (out.step_y < 0) y0 += travel;

  VideoClip& clip = out.clip;
  clip.frames = settings.frames;
  clip.height = settings.height;
  clip.width = settings.width;
  clip.pixels.assign(clip.pixel_count(), kBackgroundLevel);
  const auto rgb = detail::color_rgb(out.color);
  for (std::size_t t = 0; t < settings.frames; ++t) {
    const long ox = static_cast<long>(x0) + out.step_x * static_cast<long>(t);
    const long oy = static_cast<long>(y0) + out.step_y * static_cast<long>(t);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        if (!detail::shape_covers(out.shape, size, y, x)) continue;
        const std::size_t py = static_cast<std::size_t>(oy) + y, px = static_cast<std::size_t>(ox) + x;
        for (std::size_t ch = 0; ch < 3; ++ch) clip.pixels[((t * settings.height + py) * settings.width + px) * 3 + ch] = rgb[ch];
      }
  }

  const std::size_t n_captions = uniform(1, 3);
  for (std::size_t v = 0; v < n_captions; ++v) out.captions.push_back(caption_variant(v, out.color, out.shape, out.motion));
  return out;
}

// ---------------------------------------------------------------------------
// EVCF clip container: "EVCF", u32 T, H, W, 3 (little-endian), raw bytes.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline void write_clip(const std::filesystem::path& path, const VideoClip& clip) {
  if (clip.pixels.size() != clip.pixel_count()) throw ShapeError("write_clip: pixel buffer does not match extents");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("write_clip: cannot open " + path.string() + " for writing");
  os.write("EVCF", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(clip.frames));
  detail::put_u32(os, static_cast<std::uint32_t>(clip.height));
  detail::put_u32(os, static_cast<std::uint32_t>(clip.width));
  detail::put_u32(os, 3);
  os.write(reinterpret_cast<const char*>(clip.pixels.data()), static_cast<std::streamsize>(clip.pixels.size()));
  if (!os) throw InputError("write_clip: write failed for " + path.string());
}

inline VideoClip read_clip(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("read_clip: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::string where = path.string();
  if (bytes.size() < 4 || std::string(bytes.begin(), bytes.begin() + 4) != "EVCF") {
    throw FormatError(where + ": bad magic at offset 0 (expected \"EVCF\")");
  }
  if (bytes.size() < 20) throw FormatError(where + ": truncated header at offset " + std::to_string(bytes.size()));
  const std::uint32_t t = detail::get_u32(&bytes[4]);
  const std::uint32_t h = detail::get_u32(&bytes[8]);
  const std::uint32_t w = detail::get_u32(&bytes[12]);
  const std::uint32_t c = detail::get_u32(&bytes[16]);
  if (c != 3) throw FormatError(where + ": channel count " + std::to_string(c) + " at offset 16 (expected 3)");
  if (t == 0 || h == 0 || w == 0) throw FormatError(where + ": zero extent in header at offset 4");
  const unsigned __int128 payload = static_cast<unsigned __int128>(t) * h * w * 3;
  if (payload > (std::uint64_t{1} << 40)) throw FormatError(where + ": extents overflow at offset 4");
  const std::size_t need = static_cast<std::size_t>(payload);
  if (bytes.size() - 20 < need) {
    throw FormatError(where + ": truncated payload at offset " + std::to_string(bytes.size()) + " (expected " +
                      std::to_string(20 + need) + " bytes)");
  }
  if (bytes.size() - 20 > need) {
    throw FormatError(where + ": trailing data at offset " + std::to_string(20 + need));
  }
  VideoClip clip;
  clip.clip_id = path.stem().string();
  clip.frames = t;
  clip.height = h;
  clip.width = w;
  clip.pixels.assign(bytes.begin() + 20, bytes.end());
  return clip;
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
  std::string video_id;
  std::string clip_path;  // relative to the manifest's directory, or absolute
  std::vector<std::string> captions;
  std::string split;
};

inline bool valid_split(const std::string& s) { return s == "train" || s == "val" || s == "test"; }

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw InputError("write_manifest: cannot open " + path.string() + " for writing");
  for (const auto& e : entries) {
    nlohmann::json j{{"video_id", e.video_id}, {"clip_path", e.clip_path}, {"captions", e.captions}, {"split", e.split}};
    os << j.dump() << '\n';
  }
  if (!os) throw InputError("write_manifest: write failed for " + path.string());
}

/// Parses and validates a manifest; errors name the offending line.
inline std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("load_manifest: cannot open " + path.string());
  std::vector<ManifestEntry> out;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  const auto base = path.parent_path();
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    ManifestEntry e;
    try {
      const auto j = nlohmann::json::parse(line);
      e.video_id = j.at("video_id").get<std::string>();
      e.clip_path = j.at("clip_path").get<std::string>();
      e.captions = j.at("captions").get<std::vector<std::string>>();
      e.split = j.at("split").get<std::string>();
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(where + "malformed entry (" + ex.what() + ")");
    }
    if (!valid_split(e.split)) throw FormatError(where + "unknown split '" + e.split + "'");
    if (!seen.insert(e.video_id).second) throw FormatError(where + "duplicate video_id '" + e.video_id + "'");
    if (e.captions.empty()) throw FormatError(where + "entry '" + e.video_id + "' has no captions");
    const auto clip = std::filesystem::path(e.clip_path).is_absolute() ? std::filesystem::path(e.clip_path)
                                                                       : base / e.clip_path;
    if (!std::filesystem::exists(clip)) throw FormatError(where + "missing clip file " + clip.string());
    out.push_back(std::move(e));
  }
  return out;
}

inline std::filesystem::path resolve_clip_path(const std::filesystem::path& manifest, const ManifestEntry& e) {
  const std::filesystem::path p(e.clip_path);
  return p.is_absolute() ? p : manifest.parent_path() / p;
}

/// Splits n clips 80/10/10 in index order (train first).
inline std::string split_for_index(std::size_t index, std::size_t n) {
  const std::size_t held = n / 10;
  if (index < n - 2 * held) return "train";
  if (index < n - held) return "val";
  return "test";
}

inline std::string synth_video_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "clip_%05zu", index);
  return buf;
}

struct CorpusStats {
  std::size_t clips = 0;
  std::size_t captions = 0;
  std::size_t train = 0, val = 0, test = 0;
  std::size_t vocabulary = 0;
};

/// Writes clips/<id>.evcf, manifest.jsonl and references.jsonl under dir.
inline CorpusStats write_synthetic_corpus(const std::filesystem::path& dir, const SynthSettings& settings, std::size_t n) {
  std::filesystem::create_directories(dir / "clips");
  std::vector<ManifestEntry> entries;
  std::vector<std::string> all_captions;
  CorpusStats stats;
  std::ofstream refs(dir / "references.jsonl");
  if (!refs) throw InputError("cannot write " + (dir / "references.jsonl").string());
  for (std::size_t i = 0; i < n; ++i) {
    auto sc = generate_clip(settings, i);
    const std::string id = synth_video_id(i);
    sc.clip.clip_id = id;
    write_clip(dir / "clips" / (id + ".evcf"), sc.clip);
    ManifestEntry e{id, "clips/" + id + ".evcf", sc.captions, split_for_index(i, n)};
    refs << nlohmann::json{{"video_id", id}, {"captions", sc.captions}}.dump() << '\n';
    stats.captions += sc.captions.size();
    if (e.split == "train") ++stats.train;
    if (e.split == "val") ++stats.val;
    if (e.split == "test") ++stats.test;
    all_captions.insert(all_captions.end(), sc.captions.begin(), sc.captions.end());
    entries.push_back(std::move(e));
  }
  write_manifest(dir / "manifest.jsonl", entries);
  stats.clips = n;
  if (!all_captions.empty()) stats.vocabulary = build_vocab(all_captions).size();
  return stats;
}

}  // namespace evcmf
