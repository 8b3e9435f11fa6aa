#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "oshx/image.hpp"
#include "oshx/tensor.hpp"

namespace oshx {

/// The four tissue classes with their fixed integer codes. Directory names
/// under a dataset root must match these strings.
enum class ClassLabel : int { NT = 0, NVT = 1, VT = 2, NVR = 3 };

inline constexpr std::array<const char*, 4> kClassNames{"NT", "NVT", "VT",
                                                        "NVR"};
const char* class_name(ClassLabel c);
ClassLabel class_from_name(const std::string& name);

enum class Split : int { train = 0, val = 1, test = 2 };
const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct Sample {
  std::string id;
  std::filesystem::path path; // empty for in-memory samples
  std::optional<ImageU8> pixels;
  int label = 0; // index into DatasetManifest::class_names
  Split split = Split::train;
};

struct NormalizationStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};
};

struct DatasetManifest {
  std::vector<Sample> samples;
  /// label i in samples means class_names[i]; defaults to NT,NVT,VT,NVR.
  std::vector<std::string> class_names{kClassNames.begin(), kClassNames.end()};
  std::optional<NormalizationStats> normalization;
  uint64_t seed = 0;

  std::vector<int64_t> class_counts() const;
  std::vector<int64_t> class_counts(Split split) const;
  int64_t split_size(Split split) const;
};

/// Scans <root>/{NT,NVT,VT,NVR}/* in lexicographic path order. A missing
/// class directory yields a warning and an empty class; files that do not
/// sniff as JPEG/PNG/OSIM are skipped with a warning; an entirely empty
/// tree is fatal.
DatasetManifest load_manifest(const std::filesystem::path& root_dir,
                              uint64_t seed);

/// Decoded, bilinear-resized pixels as (3,side,side) in [0,1].
/// Normalization is applied separately (apply_normalization).
Tensor decode_and_resize(const Sample& sample, int side);

/// Per class: shuffle indices with the seed, assign the first
/// floor(f_train*n) to train, the next floor(f_val*n) to val, the remainder
/// to test. Classes with fewer than 3 samples go entirely to train.
/// Sample order is preserved; only split assignments change.
DatasetManifest split_stratified(const DatasetManifest& manifest,
                                 const std::array<double, 3>& fractions,
                                 uint64_t seed);

/// Inverse-frequency weights over the train split of the given classes:
/// w_c = N / (K * n_c) with N the total train count across the K classes.
/// task_classes holds label indices into manifest.class_names.
std::vector<double> compute_class_weights(const DatasetManifest& manifest,
                                          const std::vector<int>& task_classes);

/// Per-channel mean/stddev over the train split at the given side.
/// stddev is floored at 1e-6.
NormalizationStats compute_normalization(const DatasetManifest& manifest,
                                         int side);
Tensor apply_normalization(const Tensor& pixels, const NormalizationStats& s);

/// Keeps only samples of the listed classes and remaps labels to the
/// position in `classes` (so the model sees [0, K)). class_names shrinks
/// accordingly; splits and relative order are preserved.
DatasetManifest filter_for_task(const DatasetManifest& manifest,
                                const std::vector<ClassLabel>& classes);

struct Batch {
  Tensor pixels; // (B,3,S,S), normalized when stats are present
  std::vector<int> labels;
  std::vector<std::string> ids;
};

struct BatchOptions {
  int side = 128;
  int batch_size = 32;
  bool shuffle = false;
  bool augment = false; // train split only: h/v flips, p=0.5 each
  uint64_t seed = 0;
  bool normalize = true;
};

/// Deterministic batch stream over one split. Pixels are decoded and
/// resized once, cached, and re-emitted per epoch; each epoch covers every
/// split sample exactly once.
class BatchLoader {
public:
  BatchLoader(const DatasetManifest& manifest, Split split, BatchOptions opts);

  int64_t sample_count() const { return static_cast<int64_t>(order_.size()); }
  int batches_per_epoch() const;

  void begin_epoch(int epoch);
  bool next(Batch& out);

private:
  const DatasetManifest& manifest_;
  Split split_;
  BatchOptions opts_;
  std::vector<int> member_indices_; // indices into manifest.samples
  std::vector<int> order_;          // permutation of member_indices_ positions
  std::vector<std::vector<float>> cache_;
  int epoch_ = 0;
  size_t cursor_ = 0;
};

/// Convenience wrapper matching the one-shot call style.
BatchLoader make_batches(const DatasetManifest& manifest, Split split,
                         const BatchOptions& opts);

/// Writes a TCIA-layout synthetic dataset: four class directories, each with
/// per_class PNG files of procedurally textured tissue-like imagery. Classes
/// are separable by base hue and by dominant spatial frequency, so the tiny
/// presets can learn them. Identical seeds produce identical files.
void synth_generate(const std::filesystem::path& out_dir, int per_class,
                    int side, uint64_t seed);

/// Manifest persistence: UTF-8 JSON capturing samples (path-backed only),
/// class names, splits, normalization stats and seed.
void save_manifest(const DatasetManifest& manifest,
                   const std::filesystem::path& path);
DatasetManifest load_manifest_file(const std::filesystem::path& path);

} // namespace oshx
