#include "oshx/model.hpp"

#include <algorithm>
#include <cmath>

namespace oshx {

const char* arch_name(Arch a) {
  switch (a) {
    case Arch::cnn: return "cnn";
    case Arch::vit: return "vit";
    case Arch::resnet50: return "resnet50";
    case Arch::hybrid: return "hybrid";
  }
  return "?";
}

Arch arch_from_name(const std::string& name) {
  if (name == "cnn") return Arch::cnn;
  if (name == "vit") return Arch::vit;
  if (name == "resnet50") return Arch::resnet50;
  if (name == "hybrid") return Arch::hybrid;
  throw ConfigError("unknown architecture '" + name +
                    "' (expected cnn|vit|resnet50|hybrid)");
}

const char* scale_name(ScalePreset s) {
  return s == ScalePreset::paper ? "paper" : "tiny";
}

ScalePreset scale_from_name(const std::string& name) {
  if (name == "paper") return ScalePreset::paper;
  if (name == "tiny") return ScalePreset::tiny;
  throw ConfigError("unknown scale preset '" + name + "' (expected paper|tiny)");
}

CnnDims cnn_dims(ScalePreset scale) {
  if (scale == ScalePreset::paper) return {{64, 128, 256}, 1024};
  return {{8, 16, 32}, 128};
}

std::array<int, 2> hybrid_mlp_widths(ScalePreset scale) {
  if (scale == ScalePreset::paper) return {1024, 256};
  return {128, 32};
}

int vit_input_side(ScalePreset scale) {
  return scale == ScalePreset::paper ? 224 : 64;
}

int64_t feature_length(Arch arch, ScalePreset scale) {
  if (arch == Arch::cnn) return cnn_dims(scale).dense_width;
  if (arch == Arch::vit) {
    const ArchSpec spec = ArchSpec::preset(Arch::vit, scale, 4);
    const int grid = spec.input_side / spec.vit_dims.patch_size;
    return static_cast<int64_t>(grid) * grid * spec.vit_dims.embed_dim;
  }
  throw ConfigError(std::string("feature_length: unsupported architecture ") +
                    arch_name(arch));
}

ArchSpec ArchSpec::preset(Arch arch, ScalePreset scale, int num_classes) {
  ArchSpec spec;
  spec.name = arch;
  spec.scale = scale;
  spec.num_classes = num_classes;
  const bool paper = scale == ScalePreset::paper;
  spec.vit_dims = paper ? VitDims{768, 12, 12, 3072, 16}
                        : VitDims{64, 2, 4, 256, 16};
  switch (arch) {
    case Arch::cnn:
    case Arch::resnet50:
    case Arch::hybrid:
      spec.input_side = paper ? 128 : 64;
      break;
    case Arch::vit:
      spec.input_side = vit_input_side(scale);
      break;
  }
  spec.validate();
  return spec;
}

void ArchSpec::validate() const {
  if (num_classes < 2 || num_classes > 4)
    throw ConfigError("num_classes must be 2, 3 or 4, got " +
                      std::to_string(num_classes));
  if (input_side < 8)
    throw ConfigError("input_side must be >= 8, got " +
                      std::to_string(input_side));
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw ConfigError("dropout_rate must be in [0,1)");
  if (name == Arch::vit || name == Arch::hybrid) {
    if (vit_dims.embed_dim < 1 || vit_dims.depth < 1 || vit_dims.heads < 1 ||
        vit_dims.mlp_dim < 1 || vit_dims.patch_size < 1)
      throw ConfigError("vit dims must be positive");
    if (vit_dims.embed_dim % vit_dims.heads != 0)
      throw ConfigError("vit embed_dim " + std::to_string(vit_dims.embed_dim) +
                        " not divisible by heads " +
                        std::to_string(vit_dims.heads));
    const int side = name == Arch::vit ? input_side : vit_input_side(scale);
    if (side % vit_dims.patch_size != 0)
      throw ConfigError("vit input side " + std::to_string(side) +
                        " not divisible by patch size " +
                        std::to_string(vit_dims.patch_size));
  }
}

// ---- base class ------------------------------------------------------------

template <typename T>
TensorT<T> ModelGraphT<T>::features(const TensorT<T>&, Trace*) {
  throw ConfigError(std::string("unsupported architecture for feature "
                                "extraction: ") +
                    arch_name(spec_.name) + " (only cnn and vit)");
}

template <typename T>
TensorT<T> ModelGraphT<T>::branch_features(const TensorT<T>&) {
  throw UsageError("branch_features is only available on the hybrid model");
}

template <typename T>
TensorT<T> ModelGraphT<T>::head_forward(const TensorT<T>&, bool) {
  throw UsageError("head_forward is only available on the hybrid model");
}

template <typename T>
std::vector<NamedParam<T>*> ModelGraphT<T>::trainable_parameters() {
  std::vector<NamedParam<T>*> out;
  for (auto& p : params_)
    if (p.tensor.requires_grad()) out.push_back(&p);
  return out;
}

template <typename T>
void ModelGraphT<T>::register_param(const std::string& name, TensorT<T> t) {
  for (const auto& p : params_)
    if (p.name == name)
      throw ConfigError("duplicate parameter name '" + name + "'");
  t.set_requires_grad(true);
  params_.push_back({name, std::move(t)});
}

template <typename T>
TensorT<T> ModelGraphT<T>::find_param(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.tensor;
  throw UsageError("no parameter named '" + name + "'");
}

template <typename T>
Trace ModelGraphT<T>::shape_trace() {
  const int s = spec_.input_side;
  TensorT<T> probe = TensorT<T>::zeros({1, 3, s, s});
  Trace trace;
  trace.push_back({"input", {3, s, s}, {3, s, s}});
  forward(probe, false, &trace);
  return trace;
}

// ---- shared initializers ---------------------------------------------------

namespace {

template <typename T>
TensorT<T> init_uniform_fanin(Shape shape, int64_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
  return TensorT<T>::from_data(std::move(shape), std::move(data));
}

template <typename T>
TensorT<T> init_normal(Shape shape, double stddev, Rng& rng) {
  std::vector<T> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(rng.normal(0.0, stddev));
  return TensorT<T>::from_data(std::move(shape), std::move(data));
}

Shape drop_batch(const Shape& s) {
  return Shape(s.begin() + 1, s.end());
}

void trace_push(Trace* trace, const std::string& name, const Shape& in,
                const Shape& out) {
  if (trace) trace->push_back({name, in, out});
}

// ---- cnn --------------------------------------------------------------------

template <typename T>
class CnnModelT final : public ModelGraphT<T> {
public:
  CnnModelT(const ArchSpec& spec, uint64_t seed) {
    if (spec.name != Arch::cnn)
      throw ConfigError(std::string("build_cnn: spec names ") +
                        arch_name(spec.name));
    spec.validate();
    this->spec_ = spec;
    this->rng_.reseed(Rng::mix(seed, 0xD0));
    Rng rng(seed);
    const CnnDims dims = cnn_dims(spec.scale);
    int in_ch = 3;
    for (int b = 0; b < 3; ++b) {
      const int f = dims.block_filters[static_cast<size_t>(b)];
      for (int l = 0; l < 2; ++l) {
        const std::string base =
            "block" + std::to_string(b + 1) + ".conv" + std::to_string(l + 1);
        this->register_param(base + ".weight",
                             init_uniform_fanin<T>({f, in_ch, 3, 3},
                                                   int64_t(in_ch) * 9, rng));
        this->register_param(base + ".bias", TensorT<T>::zeros({f}));
        this->plan_.push_back(base + ": conv2d " + std::to_string(in_ch) +
                              "->" + std::to_string(f) +
                              " k3 s1 p1, leaky_relu(0.25)");
        in_ch = f;
      }
      this->plan_.push_back("pool" + std::to_string(b + 1) +
                            ": maxpool2d k2 s2");
    }
    this->plan_.push_back("gap: global_avg_pool");
    const int dense = dims.dense_width;
    this->register_param(
        "fc1.weight", init_uniform_fanin<T>({dense, in_ch}, in_ch, rng));
    this->register_param("fc1.bias", TensorT<T>::zeros({dense}));
    this->plan_.push_back("fc1: linear " + std::to_string(in_ch) + "->" +
                          std::to_string(dense) + ", leaky_relu(0.25)");
    this->register_param("fc2.weight",
                         init_uniform_fanin<T>({dense, dense}, dense, rng));
    this->register_param("fc2.bias", TensorT<T>::zeros({dense}));
    this->plan_.push_back("fc2: linear " + std::to_string(dense) + "->" +
                          std::to_string(dense) + ", leaky_relu(0.25)");
    this->register_param(
        "head.weight",
        init_uniform_fanin<T>({spec.num_classes, dense}, dense, rng));
    this->register_param("head.bias", TensorT<T>::zeros({spec.num_classes}));
    this->plan_.push_back("head: linear " + std::to_string(dense) + "->" +
                          std::to_string(spec.num_classes));
  }

  TensorT<T> forward(const TensorT<T>& batch, bool training,
                     Trace* trace = nullptr) override {
    TensorT<T> x = trunk(batch, trace);
    TensorT<T> logits =
        linear(x, this->find_param("head.weight"), this->find_param("head.bias"));
    trace_push(trace, "head", drop_batch(x.shape()), drop_batch(logits.shape()));
    (void)training; // this architecture's recipe has no dropout
    return logits;
  }

  TensorT<T> features(const TensorT<T>& batch, Trace* trace = nullptr) override {
    return trunk(batch, trace);
  }

private:
  void check_input(const TensorT<T>& batch) const {
    const int s = this->spec_.input_side;
    if (batch.ndim() != 4 || batch.dim(1) != 3 || batch.dim(2) != s ||
        batch.dim(3) != s)
      throw ShapeError("cnn forward: expected (N,3," + std::to_string(s) + "," +
                       std::to_string(s) + "), got " + shape_str(batch.shape()));
  }

  /// Everything through the second dense layer; its post-activation output
  /// is the model's feature vector.
  TensorT<T> trunk(const TensorT<T>& batch, Trace* trace) {
    check_input(batch);
    TensorT<T> x = batch;
    for (int b = 0; b < 3; ++b) {
      for (int l = 0; l < 2; ++l) {
        const std::string base =
            "block" + std::to_string(b + 1) + ".conv" + std::to_string(l + 1);
        Shape in = drop_batch(x.shape());
        x = leaky_relu(conv2d(x, this->find_param(base + ".weight"),
                              this->find_param(base + ".bias"), 1, 1),
                       0.25);
        trace_push(trace, base, in, drop_batch(x.shape()));
      }
      Shape in = drop_batch(x.shape());
      x = maxpool2d(x, 2, 2);
      trace_push(trace, "pool" + std::to_string(b + 1), in,
                 drop_batch(x.shape()));
    }
    Shape in = drop_batch(x.shape());
    x = global_avg_pool(x);
    trace_push(trace, "gap", in, drop_batch(x.shape()));
    in = drop_batch(x.shape());
    x = leaky_relu(
        linear(x, this->find_param("fc1.weight"), this->find_param("fc1.bias")),
        0.25);
    trace_push(trace, "fc1", in, drop_batch(x.shape()));
    in = drop_batch(x.shape());
    x = leaky_relu(
        linear(x, this->find_param("fc2.weight"), this->find_param("fc2.bias")),
        0.25);
    trace_push(trace, "fc2", in, drop_batch(x.shape()));
    return x;
  }
};

// ---- vit ---------------------------------------------------------------------

template <typename T>
class VitModelT final : public ModelGraphT<T> {
public:
  VitModelT(const ArchSpec& spec, uint64_t seed) {
    if (spec.name != Arch::vit)
      throw ConfigError(std::string("build_vit: spec names ") +
                        arch_name(spec.name));
    spec.validate();
    this->spec_ = spec;
    this->rng_.reseed(Rng::mix(seed, 0xD1));
    Rng rng(seed);
    const VitDims& vd = spec.vit_dims;
    grid_ = spec.input_side / vd.patch_size;
    tokens_ = grid_ * grid_;
    const int d = vd.embed_dim;
    this->register_param(
        "patch_embed.conv.weight",
        init_uniform_fanin<T>({d, 3, vd.patch_size, vd.patch_size},
                              int64_t(3) * vd.patch_size * vd.patch_size, rng));
    this->register_param("patch_embed.conv.bias", TensorT<T>::zeros({d}));
    this->plan_.push_back("patch_embed: conv2d 3->" + std::to_string(d) + " k" +
                          std::to_string(vd.patch_size) + " s" +
                          std::to_string(vd.patch_size) + ", " +
                          std::to_string(tokens_) + " tokens");
    this->register_param("cls_token", init_normal<T>({1, d}, 0.02, rng));
    this->register_param("pos_embed",
                         init_normal<T>({tokens_ + 1, d}, 0.02, rng));
    this->plan_.push_back("cls+pos: prepend CLS, add positional embeddings");
    for (int i = 0; i < vd.depth; ++i) {
      const std::string b = "blocks." + std::to_string(i) + ".";
      this->register_param(b + "ln1.gamma", TensorT<T>::full({d}, T(1)));
      this->register_param(b + "ln1.beta", TensorT<T>::zeros({d}));
      this->register_param(b + "attn.qkv.weight",
                           init_uniform_fanin<T>({3 * d, d}, d, rng));
      this->register_param(b + "attn.qkv.bias", TensorT<T>::zeros({3 * d}));
      this->register_param(b + "attn.proj.weight",
                           init_uniform_fanin<T>({d, d}, d, rng));
      this->register_param(b + "attn.proj.bias", TensorT<T>::zeros({d}));
      this->register_param(b + "ln2.gamma", TensorT<T>::full({d}, T(1)));
      this->register_param(b + "ln2.beta", TensorT<T>::zeros({d}));
      this->register_param(b + "mlp.fc1.weight",
                           init_uniform_fanin<T>({vd.mlp_dim, d}, d, rng));
      this->register_param(b + "mlp.fc1.bias", TensorT<T>::zeros({vd.mlp_dim}));
      this->register_param(b + "mlp.fc2.weight",
                           init_uniform_fanin<T>({d, vd.mlp_dim}, vd.mlp_dim,
                                                 rng));
      this->register_param(b + "mlp.fc2.bias", TensorT<T>::zeros({d}));
      this->plan_.push_back("block " + std::to_string(i) +
                            ": ln, attention(" + std::to_string(vd.heads) +
                            " heads), residual, ln, mlp " + std::to_string(d) +
                            "->" + std::to_string(vd.mlp_dim) + "->" +
                            std::to_string(d) + " gelu, residual");
    }
    this->register_param("final_ln.gamma", TensorT<T>::full({d}, T(1)));
    this->register_param("final_ln.beta", TensorT<T>::zeros({d}));
    this->register_param(
        "head.weight", init_uniform_fanin<T>({spec.num_classes, d}, d, rng));
    this->register_param("head.bias", TensorT<T>::zeros({spec.num_classes}));
    this->plan_.push_back("head: final layer_norm, CLS token, linear " +
                          std::to_string(d) + "->" +
                          std::to_string(spec.num_classes));
  }

  TensorT<T> forward(const TensorT<T>& batch, bool training,
                     Trace* trace = nullptr) override {
    TensorT<T> enc = encode(batch, training, trace); // (N, tokens+1, D)
    const int n = enc.dim(0);
    const int d = this->spec_.vit_dims.embed_dim;
    TensorT<T> cls = reshape(slice(enc, 1, 0, 1), {n, d});
    trace_push(trace, "cls", drop_batch(enc.shape()), {d});
    TensorT<T> logits =
        linear(cls, this->find_param("head.weight"), this->find_param("head.bias"));
    trace_push(trace, "head", {d}, drop_batch(logits.shape()));
    return logits;
  }

  /// Patch tokens after the final layer norm, CLS excluded, flattened
  /// row-major: (N, tokens * D).
  TensorT<T> features(const TensorT<T>& batch, Trace* trace = nullptr) override {
    TensorT<T> enc = encode(batch, false, trace);
    TensorT<T> patch_tokens = slice(enc, 1, 1, tokens_);
    TensorT<T> flat = flatten(patch_tokens, 1);
    trace_push(trace, "patch_tokens_flat", drop_batch(patch_tokens.shape()),
               drop_batch(flat.shape()));
    return flat;
  }

private:
  TensorT<T> encode(const TensorT<T>& batch, bool training, Trace* trace) {
    const int s = this->spec_.input_side;
    if (batch.ndim() != 4 || batch.dim(1) != 3 || batch.dim(2) != s ||
        batch.dim(3) != s)
      throw ShapeError("vit forward: expected (N,3," + std::to_string(s) + "," +
                       std::to_string(s) + "), got " + shape_str(batch.shape()));
    const VitDims& vd = this->spec_.vit_dims;
    const int n = batch.dim(0);
    const int d = vd.embed_dim;
    const double rate = this->spec_.dropout_rate;
    Rng& rng = this->rng_;

    TensorT<T> x = conv2d(batch, this->find_param("patch_embed.conv.weight"),
                          this->find_param("patch_embed.conv.bias"),
                          vd.patch_size, 0); // (N,D,g,g)
    trace_push(trace, "patch_embed.conv", {3, s, s}, drop_batch(x.shape()));
    x = permute(reshape(x, {n, d, tokens_}), {0, 2, 1}); // (N,T,D)
    trace_push(trace, "patch_embed.tokens", {d, grid_, grid_},
               drop_batch(x.shape()));
    TensorT<T> cls = repeat_leading(this->find_param("cls_token"), n);
    x = concat(cls, x, 1); // (N,T+1,D)
    trace_push(trace, "cls_concat", {tokens_, d}, drop_batch(x.shape()));
    x = add(x, this->find_param("pos_embed"));
    trace_push(trace, "pos_embed", drop_batch(x.shape()), drop_batch(x.shape()));
    x = dropout(x, rate, rng, training);

    for (int i = 0; i < vd.depth; ++i) {
      const std::string b = "blocks." + std::to_string(i) + ".";
      Trace* inner = (trace && i == 0) ? trace : nullptr;
      TensorT<T> h = layer_norm(x, this->find_param(b + "ln1.gamma"),
                                this->find_param(b + "ln1.beta"), 1e-6);
      if (inner) trace_push(inner, b + "ln1", drop_batch(x.shape()),
                            drop_batch(h.shape()));
      const size_t before = trace ? trace->size() : 0;
      TensorT<T> a = multi_head_attention(
          h, vd.heads, this->find_param(b + "attn.qkv.weight"),
          this->find_param(b + "attn.qkv.bias"),
          this->find_param(b + "attn.proj.weight"),
          this->find_param(b + "attn.proj.bias"), inner);
      if (inner)
        for (size_t r = before; r < trace->size(); ++r)
          (*trace)[r].name = b + (*trace)[r].name;
      a = dropout(a, rate, rng, training);
      x = add(x, a);
      TensorT<T> h2 = layer_norm(x, this->find_param(b + "ln2.gamma"),
                                 this->find_param(b + "ln2.beta"), 1e-6);
      if (inner) trace_push(inner, b + "ln2", drop_batch(x.shape()),
                            drop_batch(h2.shape()));
      TensorT<T> m = linear(h2, this->find_param(b + "mlp.fc1.weight"),
                            this->find_param(b + "mlp.fc1.bias"));
      if (inner) trace_push(inner, b + "mlp.fc1", drop_batch(h2.shape()),
                            drop_batch(m.shape()));
      m = dropout(gelu(m), rate, rng, training);
      m = linear(m, this->find_param(b + "mlp.fc2.weight"),
                 this->find_param(b + "mlp.fc2.bias"));
      if (inner) trace_push(inner, b + "mlp.fc2", {tokens_ + 1, vd.mlp_dim},
                            drop_batch(m.shape()));
      m = dropout(m, rate, rng, training);
      x = add(x, m);
      trace_push(trace, b + "out", drop_batch(x.shape()), drop_batch(x.shape()));
    }
    TensorT<T> out = layer_norm(x, this->find_param("final_ln.gamma"),
                                this->find_param("final_ln.beta"), 1e-6);
    trace_push(trace, "final_ln", drop_batch(x.shape()), drop_batch(out.shape()));
    return out;
  }

  int grid_ = 0;
  int tokens_ = 0;
};

// ---- resnet50 ----------------------------------------------------------------

template <typename T>
class ResNetModelT final : public ModelGraphT<T> {
public:
  ResNetModelT(const ArchSpec& spec, uint64_t seed) {
    if (spec.name != Arch::resnet50)
      throw ConfigError(std::string("build_resnet50: spec names ") +
                        arch_name(spec.name));
    spec.validate();
    this->spec_ = spec;
    Rng rng(seed);
    this->register_param("conv1.weight",
                         init_uniform_fanin<T>({64, 3, 7, 7}, 3 * 49, rng));
    this->register_param("conv1.bias", TensorT<T>::zeros({64}));
    this->plan_.push_back("conv1: conv2d 3->64 k7 s2 p3, relu");
    this->plan_.push_back("maxpool: maxpool2d k3 s2 p1");
    int in_ch = 64;
    for (int s = 0; s < 4; ++s) {
      const int planes = kStagePlanes[static_cast<size_t>(s)];
      const int blocks = kStageBlocks[static_cast<size_t>(s)];
      for (int b = 0; b < blocks; ++b) {
        const int stride = (s > 0 && b == 0) ? 2 : 1;
        const std::string base =
            "layer" + std::to_string(s + 1) + "." + std::to_string(b) + ".";
        add_conv(base + "conv1", planes, in_ch, 1, rng);
        add_conv(base + "conv2", planes, planes, 3, rng);
        add_conv(base + "conv3", planes * 4, planes, 1, rng);
        if (stride != 1 || in_ch != planes * 4)
          add_conv(base + "downsample", planes * 4, in_ch, 1, rng);
        in_ch = planes * 4;
      }
      this->plan_.push_back("layer" + std::to_string(s + 1) + ": " +
                            std::to_string(blocks) +
                            " bottleneck blocks, planes " +
                            std::to_string(planes) + ", expansion 4");
    }
    this->plan_.push_back("gap: global_avg_pool");
    this->register_param(
        "fc.weight", init_uniform_fanin<T>({spec.num_classes, 2048}, 2048, rng));
    this->register_param("fc.bias", TensorT<T>::zeros({spec.num_classes}));
    this->plan_.push_back("fc: linear 2048->" +
                          std::to_string(spec.num_classes));
  }

  TensorT<T> forward(const TensorT<T>& batch, bool training,
                     Trace* trace = nullptr) override {
    (void)training;
    const int s = this->spec_.input_side;
    if (batch.ndim() != 4 || batch.dim(1) != 3 || batch.dim(2) != s ||
        batch.dim(3) != s)
      throw ShapeError("resnet50 forward: expected (N,3," + std::to_string(s) +
                       "," + std::to_string(s) + "), got " +
                       shape_str(batch.shape()));
    TensorT<T> x = relu(conv2d(batch, this->find_param("conv1.weight"),
                               this->find_param("conv1.bias"), 2, 3));
    trace_push(trace, "conv1", {3, s, s}, drop_batch(x.shape()));
    Shape in = drop_batch(x.shape());
    x = maxpool2d(x, 3, 2, 1);
    trace_push(trace, "maxpool", in, drop_batch(x.shape()));
    int in_ch = 64;
    for (int st = 0; st < 4; ++st) {
      const int planes = kStagePlanes[static_cast<size_t>(st)];
      const int blocks = kStageBlocks[static_cast<size_t>(st)];
      in = drop_batch(x.shape());
      for (int b = 0; b < blocks; ++b) {
        const int stride = (st > 0 && b == 0) ? 2 : 1;
        const std::string base =
            "layer" + std::to_string(st + 1) + "." + std::to_string(b) + ".";
        x = bottleneck(x, base, stride, in_ch != planes * 4 || stride != 1);
        in_ch = planes * 4;
      }
      trace_push(trace, "layer" + std::to_string(st + 1), in,
                 drop_batch(x.shape()));
    }
    in = drop_batch(x.shape());
    x = global_avg_pool(x);
    trace_push(trace, "gap", in, drop_batch(x.shape()));
    in = drop_batch(x.shape());
    x = linear(x, this->find_param("fc.weight"), this->find_param("fc.bias"));
    trace_push(trace, "fc", in, drop_batch(x.shape()));
    return x;
  }

private:
  static constexpr std::array<int, 4> kStagePlanes{64, 128, 256, 512};
  static constexpr std::array<int, 4> kStageBlocks{3, 4, 6, 3};

  void add_conv(const std::string& name, int out_ch, int in_ch, int k,
                Rng& rng) {
    this->register_param(
        name + ".weight",
        init_uniform_fanin<T>({out_ch, in_ch, k, k},
                              static_cast<int64_t>(in_ch) * k * k, rng));
    this->register_param(name + ".bias", TensorT<T>::zeros({out_ch}));
  }

  TensorT<T> bottleneck(const TensorT<T>& x, const std::string& base,
                        int stride, bool project) {
    TensorT<T> h = relu(conv2d(x, this->find_param(base + "conv1.weight"),
                               this->find_param(base + "conv1.bias"), 1, 0));
    h = relu(conv2d(h, this->find_param(base + "conv2.weight"),
                    this->find_param(base + "conv2.bias"), stride, 1));
    h = conv2d(h, this->find_param(base + "conv3.weight"),
               this->find_param(base + "conv3.bias"), 1, 0);
    TensorT<T> identity = x;
    if (project)
      identity = conv2d(x, this->find_param(base + "downsample.weight"),
                        this->find_param(base + "downsample.bias"), stride, 0);
    return relu(add(h, identity));
  }
};

// ---- hybrid ------------------------------------------------------------------

template <typename T>
class HybridModelT final : public ModelGraphT<T> {
public:
  HybridModelT(std::unique_ptr<ModelGraphT<T>> cnn,
               std::unique_ptr<ModelGraphT<T>> vit, const ArchSpec& spec,
               uint64_t seed)
      : cnn_(std::move(cnn)), vit_(std::move(vit)) {
    if (spec.name != Arch::hybrid)
      throw ConfigError(std::string("build_hybrid: spec names ") +
                        arch_name(spec.name));
    spec.validate();
    if (!cnn_ || cnn_->spec().name != Arch::cnn)
      throw ConfigError("build_hybrid: first branch must be a cnn model");
    if (!vit_ || vit_->spec().name != Arch::vit)
      throw ConfigError("build_hybrid: second branch must be a vit model");
    if (cnn_->spec().scale != spec.scale || vit_->spec().scale != spec.scale)
      throw ConfigError(
          "build_hybrid: branch scales do not match the hybrid scale; "
          "feature lengths would disagree");
    this->spec_ = spec;
    cnn_len_ = feature_length(Arch::cnn, spec.scale);
    vit_len_ = feature_length(Arch::vit, spec.scale);
    const int64_t concat_len = cnn_len_ + vit_len_;
    // Branches are frozen inside the hybrid: only the fusion MLP trains.
    for (auto& p : cnn_->parameters()) {
      p.tensor.set_requires_grad(false);
      this->params_.push_back({"cnn." + p.name, p.tensor});
    }
    for (auto& p : vit_->parameters()) {
      p.tensor.set_requires_grad(false);
      this->params_.push_back({"vit." + p.name, p.tensor});
    }
    Rng rng(seed);
    const auto widths = hybrid_mlp_widths(spec.scale);
    this->register_param(
        "mlp.fc1.weight",
        init_uniform_fanin<T>({widths[0], static_cast<int>(concat_len)},
                              concat_len, rng));
    this->register_param("mlp.fc1.bias", TensorT<T>::zeros({widths[0]}));
    this->register_param(
        "mlp.fc2.weight",
        init_uniform_fanin<T>({widths[1], widths[0]}, widths[0], rng));
    this->register_param("mlp.fc2.bias", TensorT<T>::zeros({widths[1]}));
    this->register_param(
        "head.weight",
        init_uniform_fanin<T>({spec.num_classes, widths[1]}, widths[1], rng));
    this->register_param("head.bias", TensorT<T>::zeros({spec.num_classes}));
    const char* act = spec.hybrid_mlp_leaky ? "leaky_relu(0.25)" : "relu";
    this->plan_.push_back("branches: frozen cnn features (" +
                          std::to_string(cnn_len_) + ") + frozen vit features (" +
                          std::to_string(vit_len_) + "), concat " +
                          std::to_string(concat_len));
    this->plan_.push_back("mlp.fc1: linear " + std::to_string(concat_len) +
                          "->" + std::to_string(widths[0]) + ", " + act);
    this->plan_.push_back("mlp.fc2: linear " + std::to_string(widths[0]) +
                          "->" + std::to_string(widths[1]) + ", " + act);
    this->plan_.push_back("head: linear " + std::to_string(widths[1]) + "->" +
                          std::to_string(spec.num_classes));
  }

  TensorT<T> forward(const TensorT<T>& batch, bool training,
                     Trace* trace = nullptr) override {
    TensorT<T> f = branch_features_impl(batch, trace);
    return head_forward_impl(f, training, trace);
  }

  TensorT<T> branch_features(const TensorT<T>& batch) override {
    return branch_features_impl(batch, nullptr);
  }

  TensorT<T> head_forward(const TensorT<T>& features, bool training) override {
    return head_forward_impl(features, training, nullptr);
  }

private:
  TensorT<T> branch_features_impl(const TensorT<T>& batch, Trace* trace) {
    const int s = this->spec_.input_side;
    if (batch.ndim() != 4 || batch.dim(1) != 3 || batch.dim(2) != s ||
        batch.dim(3) != s)
      throw ShapeError("hybrid forward: expected (N,3," + std::to_string(s) +
                       "," + std::to_string(s) + "), got " +
                       shape_str(batch.shape()));
    TensorT<T> f_cnn = cnn_->features(batch).detach();
    trace_push(trace, "cnn_features", {3, s, s}, drop_batch(f_cnn.shape()));
    TensorT<T> vit_in = batch;
    const int vs = vit_->spec().input_side;
    if (vs != s) vit_in = resize_bilinear(batch, vs);
    TensorT<T> f_vit = vit_->features(vit_in).detach();
    trace_push(trace, "vit_features", {3, vs, vs}, drop_batch(f_vit.shape()));
    TensorT<T> f = concat(f_cnn, f_vit, 1);
    trace_push(trace, "concat", drop_batch(f_cnn.shape()),
               drop_batch(f.shape()));
    return f;
  }

  TensorT<T> head_forward_impl(const TensorT<T>& features, bool training,
                               Trace* trace) {
    (void)training; // the fusion MLP has no dropout
    if (features.ndim() != 2 ||
        features.dim(1) != static_cast<int>(cnn_len_ + vit_len_))
      throw ConfigError("hybrid head: feature length mismatch, expected (N," +
                        std::to_string(cnn_len_ + vit_len_) + "), got " +
                        shape_str(features.shape()));
    const bool leaky = this->spec_.hybrid_mlp_leaky;
    auto act = [leaky](const TensorT<T>& t) {
      return leaky ? leaky_relu(t, 0.25) : relu(t);
    };
    Shape in = drop_batch(features.shape());
    TensorT<T> x = act(linear(features, this->find_param("mlp.fc1.weight"),
                              this->find_param("mlp.fc1.bias")));
    trace_push(trace, "mlp.fc1", in, drop_batch(x.shape()));
    in = drop_batch(x.shape());
    x = act(linear(x, this->find_param("mlp.fc2.weight"),
                   this->find_param("mlp.fc2.bias")));
    trace_push(trace, "mlp.fc2", in, drop_batch(x.shape()));
    in = drop_batch(x.shape());
    x = linear(x, this->find_param("head.weight"),
               this->find_param("head.bias"));
    trace_push(trace, "head", in, drop_batch(x.shape()));
    return x;
  }

  std::unique_ptr<ModelGraphT<T>> cnn_;
  std::unique_ptr<ModelGraphT<T>> vit_;
  int64_t cnn_len_ = 0;
  int64_t vit_len_ = 0;
};

} // namespace

// ---- builders ----------------------------------------------------------------

template <typename T>
std::unique_ptr<ModelGraphT<T>> build_cnn(const ArchSpec& spec, uint64_t seed) {
  return std::make_unique<CnnModelT<T>>(spec, seed);
}

template <typename T>
std::unique_ptr<ModelGraphT<T>> build_vit(const ArchSpec& spec, uint64_t seed) {
  return std::make_unique<VitModelT<T>>(spec, seed);
}

template <typename T>
std::unique_ptr<ModelGraphT<T>> build_resnet50(const ArchSpec& spec,
                                               uint64_t seed) {
  return std::make_unique<ResNetModelT<T>>(spec, seed);
}

template <typename T>
std::unique_ptr<ModelGraphT<T>> build_hybrid(
    std::unique_ptr<ModelGraphT<T>> cnn, std::unique_ptr<ModelGraphT<T>> vit,
    const ArchSpec& spec, uint64_t seed) {
  return std::make_unique<HybridModelT<T>>(std::move(cnn), std::move(vit), spec,
                                           seed);
}

template <typename T>
std::unique_ptr<ModelGraphT<T>> build_model(const ArchSpec& spec,
                                            uint64_t seed) {
  switch (spec.name) {
    case Arch::cnn: return build_cnn<T>(spec, seed);
    case Arch::vit: return build_vit<T>(spec, seed);
    case Arch::resnet50: return build_resnet50<T>(spec, seed);
    case Arch::hybrid: {
      ArchSpec cnn_spec = ArchSpec::preset(Arch::cnn, spec.scale, spec.num_classes);
      ArchSpec vit_spec = ArchSpec::preset(Arch::vit, spec.scale, spec.num_classes);
      cnn_spec.dropout_rate = 0.0;
      vit_spec.dropout_rate = spec.dropout_rate;
      return build_hybrid<T>(build_cnn<T>(cnn_spec, Rng::mix(seed, 101)),
                             build_vit<T>(vit_spec, Rng::mix(seed, 102)), spec,
                             Rng::mix(seed, 103));
    }
  }
  throw ConfigError("build_model: unknown architecture");
}

template <typename T>
FeatureVectorT<T> extract_features(ModelGraphT<T>& model,
                                   const TensorT<T>& image) {
  if (image.ndim() != 3)
    throw ShapeError("extract_features: expected a single (3,H,W) image, got " +
                     shape_str(image.shape()));
  Shape batched = image.shape();
  batched.insert(batched.begin(), 1);
  TensorT<T> out = model.features(reshape(image.detach(), batched));
  FeatureVectorT<T> fv;
  fv.source = model.spec().name;
  fv.values = reshape(out, {static_cast<int>(out.numel())}).detach();
  return fv;
}

int64_t ParameterCounts::prefix(const std::string& p) const {
  int64_t acc = 0;
  for (const auto& [name, count] : per_param)
    if (name.rfind(p, 0) == 0) acc += count;
  return acc;
}

template <typename T>
ParameterCounts count_parameters(const ModelGraphT<T>& model) {
  ParameterCounts counts;
  for (const auto& p : model.parameters()) {
    counts.per_param.emplace_back(p.name, p.tensor.numel());
    counts.total += p.tensor.numel();
  }
  return counts;
}

// ---- instantiations ----------------------------------------------------------

template class ModelGraphT<float>;
template class ModelGraphT<double>;

#define OSHX_INSTANTIATE_MODEL(T)                                              \
  template std::unique_ptr<ModelGraphT<T>> build_cnn<T>(const ArchSpec&,       \
                                                        uint64_t);             \
  template std::unique_ptr<ModelGraphT<T>> build_vit<T>(const ArchSpec&,       \
                                                        uint64_t);             \
  template std::unique_ptr<ModelGraphT<T>> build_resnet50<T>(const ArchSpec&,  \
                                                             uint64_t);        \
  template std::unique_ptr<ModelGraphT<T>> build_hybrid<T>(                    \
      std::unique_ptr<ModelGraphT<T>>, std::unique_ptr<ModelGraphT<T>>,        \
      const ArchSpec&, uint64_t);                                              \
  template std::unique_ptr<ModelGraphT<T>> build_model<T>(const ArchSpec&,     \
                                                          uint64_t);           \
  template FeatureVectorT<T> extract_features<T>(ModelGraphT<T>&,              \
                                                 const TensorT<T>&);           \
  template ParameterCounts count_parameters<T>(const ModelGraphT<T>&);

OSHX_INSTANTIATE_MODEL(float)
OSHX_INSTANTIATE_MODEL(double)

#undef OSHX_INSTANTIATE_MODEL

} // namespace oshx
