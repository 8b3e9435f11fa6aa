#pragma once

// Shared helpers for the test binaries.

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "oshx/dataset.hpp"
#include "oshx/image.hpp"
#include "oshx/rng.hpp"

namespace oshx::testing {

inline std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir =
      std::filesystem::temp_directory_path() / "oshx_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline ImageU8 solid_image(int side, uint8_t r, uint8_t g, uint8_t b) {
  ImageU8 img;
  img.width = side;
  img.height = side;
  img.channels = 3;
  img.pixels.resize(static_cast<size_t>(side) * side * 3);
  for (size_t i = 0; i < img.pixels.size(); i += 3) {
    img.pixels[i] = r;
    img.pixels[i + 1] = g;
    img.pixels[i + 2] = b;
  }
  return img;
}

/// In-memory manifest with the given per-class sample counts. Pixels are
/// class-colored solids with light noise, so tiny models can separate them
/// and pixel-identity checks stay meaningful.
inline DatasetManifest memory_manifest(const std::vector<int>& per_class,
                                       int side = 8, bool with_pixels = true) {
  DatasetManifest m;
  Rng rng(1);
  for (size_t c = 0; c < per_class.size(); ++c) {
    for (int i = 0; i < per_class[c]; ++i) {
      Sample s;
      s.id = std::string(kClassNames[c]) + "/" + std::to_string(i);
      s.label = static_cast<int>(c);
      if (with_pixels) {
        ImageU8 img = solid_image(side, static_cast<uint8_t>(40 + 50 * c),
                                  static_cast<uint8_t>(90 + 30 * c),
                                  static_cast<uint8_t>(200 - 40 * c));
        for (auto& px : img.pixels)
          px = static_cast<uint8_t>(
              std::clamp<int>(px + static_cast<int>(rng.below(9)) - 4, 0, 255));
        s.pixels = std::move(img);
      }
      m.samples.push_back(std::move(s));
    }
  }
  return m;
}

} // namespace oshx::testing
