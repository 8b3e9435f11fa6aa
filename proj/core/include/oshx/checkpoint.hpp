#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "oshx/dataset.hpp"
#include "oshx/model.hpp"

namespace oshx {

/// Checkpoint container, version 1:
///   magic "OSHX" | u32 LE version | u32 LE metadata length |
///   UTF-8 JSON metadata | raw little-endian f32 parameter blobs.
/// Metadata carries the arch spec, the task's class names, the training
/// normalization stats when available, and a parameter index (name, shape,
/// offset in floats from blob start, count) in save order. Blobs are always
/// 32-bit floats regardless of the numeric mode.

inline constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const ModelGraphT<T>& model,
                     const std::vector<std::string>& class_names,
                     const std::filesystem::path& path,
                     const NormalizationStats* normalization = nullptr);

template <typename T>
struct LoadedModelT {
  std::unique_ptr<ModelGraphT<T>> model;
  std::vector<std::string> class_names;
  std::optional<NormalizationStats> normalization;
};

/// Rebuilds the architecture from the stored spec and fills every parameter
/// from the blobs. expect_num_classes, when >= 0, must match the stored
/// spec (ConfigError otherwise). Bad magic/version raise FormatError;
/// truncation and index/payload disagreements raise CorruptError.
template <typename T>
LoadedModelT<T> load_checkpoint(const std::filesystem::path& path,
                                int expect_num_classes = -1);

} // namespace oshx
