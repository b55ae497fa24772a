#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "evcmf/error.hpp"

namespace evcmf {

/// Raw RGB frames, T x H x W x 3, row-major.
struct VideoClip {
  std::string clip_id;
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  std::size_t pixel_count() const { return frames * height * width * 3; }

  std::uint8_t at(std::size_t t, std::size_t y, std::size_t x, std::size_t ch) const {
    return pixels[((t * height + y) * width + x) * 3 + ch];
  }

  /// Throws ShapeError unless T is even and >= 4 and H, W are multiples of 32.
  void validate() const {
    if (frames < 4 || frames % 2 != 0) {
      throw ShapeError("clip " + clip_id + ": frame count " + std::to_string(frames) +
                       " must be even and at least 4");
    }
    if (height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0) {
      throw ShapeError("clip " + clip_id + ": frame size " + std::to_string(height) + "x" +
                       std::to_string(width) + " must be a positive multiple of 32");
    }
    if (pixels.size() != pixel_count()) {
      throw ShapeError("clip " + clip_id + ": pixel buffer has " + std::to_string(pixels.size()) +
                       " bytes, expected " + std::to_string(pixel_count()));
    }
  }
};

}  // namespace evcmf
