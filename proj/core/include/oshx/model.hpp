#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "oshx/ops.hpp"
#include "oshx/rng.hpp"
#include "oshx/tensor.hpp"

namespace oshx {

enum class Arch { cnn, vit, resnet50, hybrid };
enum class ScalePreset { paper, tiny };

const char* arch_name(Arch a);
Arch arch_from_name(const std::string& name);
const char* scale_name(ScalePreset s);
ScalePreset scale_from_name(const std::string& name);

struct VitDims {
  int embed_dim = 768;
  int depth = 12;
  int heads = 12;
  int mlp_dim = 3072;
  int patch_size = 16;
};

struct ArchSpec {
  Arch name = Arch::cnn;
  ScalePreset scale = ScalePreset::paper;
  int num_classes = 4;
  int input_side = 128;
  VitDims vit_dims;
  double dropout_rate = 0.0;
  /// Table-3 default is ReLU in the fusion MLP; the flag switches to
  /// LeakyReLU(0.25).
  bool hybrid_mlp_leaky = false;

  static ArchSpec preset(Arch arch, ScalePreset scale, int num_classes);
  void validate() const;
};

/// Scale-derived constants that are not part of ArchSpec proper.
struct CnnDims {
  std::array<int, 3> block_filters; // 64/128/256 at paper scale
  int dense_width;                  // 1024 at paper scale
};
CnnDims cnn_dims(ScalePreset scale);
std::array<int, 2> hybrid_mlp_widths(ScalePreset scale); // {1024, 256} paper
/// Side the hybrid's ViT branch resamples its input copy to.
int vit_input_side(ScalePreset scale);
/// Penultimate feature length by arch and scale (cnn dense width, or the
/// flattened ViT patch tokens).
int64_t feature_length(Arch arch, ScalePreset scale);

template <typename T>
struct NamedParam {
  std::string name;
  TensorT<T> tensor;
};

/// An architecture instance: the ordered layer plan plus its parameters.
/// Parameter names are unique and stable across save/load. forward returns
/// pre-softmax logits of shape (N, num_classes).
template <typename T>
class ModelGraphT {
public:
  virtual ~ModelGraphT() = default;

  const ArchSpec& spec() const { return spec_; }
  int num_classes() const { return spec_.num_classes; }
  int input_side() const { return spec_.input_side; }

  virtual TensorT<T> forward(const TensorT<T>& batch, bool training,
                             Trace* trace = nullptr) = 0;

  /// Penultimate features in eval mode: (N, L). Only the cnn and vit
  /// architectures expose features; others raise a ConfigError.
  virtual TensorT<T> features(const TensorT<T>& batch, Trace* trace = nullptr);

  /// Hybrid helpers: frozen-branch features for a pixel batch, and the
  /// trainable head applied to such features. Non-hybrid models raise.
  virtual TensorT<T> branch_features(const TensorT<T>& batch);
  virtual TensorT<T> head_forward(const TensorT<T>& features, bool training);

  std::vector<NamedParam<T>>& parameters() { return params_; }
  const std::vector<NamedParam<T>>& parameters() const { return params_; }
  std::vector<NamedParam<T>*> trainable_parameters();

  const std::vector<std::string>& plan() const { return plan_; }

  /// Eval-mode forward of one zero sample, recording per-layer shapes.
  Trace shape_trace();

  Rng& dropout_rng() { return rng_; }
  void reseed_dropout(uint64_t seed) { rng_.reseed(seed); }

protected:
  void register_param(const std::string& name, TensorT<T> t);
  TensorT<T> find_param(const std::string& name) const;

  ArchSpec spec_;
  std::vector<NamedParam<T>> params_;
  std::vector<std::string> plan_;
  Rng rng_{0};
};

template <typename T>
std::unique_ptr<ModelGraphT<T>> build_cnn(const ArchSpec& spec, uint64_t seed);
template <typename T>
std::unique_ptr<ModelGraphT<T>> build_vit(const ArchSpec& spec, uint64_t seed);
template <typename T>
std::unique_ptr<ModelGraphT<T>> build_resnet50(const ArchSpec& spec,
                                               uint64_t seed);
/// Wraps trained (or initialized) branches; their parameters are frozen and
/// only the fusion MLP remains trainable. Branch scales must match the
/// hybrid spec's scale.
template <typename T>
std::unique_ptr<ModelGraphT<T>> build_hybrid(
    std::unique_ptr<ModelGraphT<T>> cnn, std::unique_ptr<ModelGraphT<T>> vit,
    const ArchSpec& spec, uint64_t seed);
/// Dispatch on spec.name; hybrid builds fresh branches from derived seeds.
template <typename T>
std::unique_ptr<ModelGraphT<T>> build_model(const ArchSpec& spec,
                                            uint64_t seed);

template <typename T>
struct FeatureVectorT {
  Arch source;
  TensorT<T> values; // length 1024 (cnn) or 150,528 (vit) at paper scale
};

/// Single-image feature extraction, eval mode. image is (3,H,W).
template <typename T>
FeatureVectorT<T> extract_features(ModelGraphT<T>& model,
                                   const TensorT<T>& image);

struct ParameterCounts {
  std::vector<std::pair<std::string, int64_t>> per_param;
  int64_t total = 0;
  /// Sum over parameters whose name starts with the prefix (layer counts).
  int64_t prefix(const std::string& p) const;
};

template <typename T>
ParameterCounts count_parameters(const ModelGraphT<T>& model);

} // namespace oshx
