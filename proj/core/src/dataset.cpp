#include "oshx/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "oshx/ops.hpp"
#include "oshx/parallel.hpp"
#include "oshx/rng.hpp"

namespace oshx {

namespace fs = std::filesystem;
using nlohmann::json;

const char* class_name(ClassLabel c) {
  return kClassNames[static_cast<size_t>(c)];
}

ClassLabel class_from_name(const std::string& name) {
  for (size_t i = 0; i < kClassNames.size(); ++i)
    if (name == kClassNames[i]) return static_cast<ClassLabel>(i);
  throw UsageError("unknown class name '" + name + "'");
}

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw UsageError("unknown split '" + name + "' (expected train|val|test)");
}

std::vector<int64_t> DatasetManifest::class_counts() const {
  std::vector<int64_t> counts(class_names.size(), 0);
  for (const auto& s : samples) counts[static_cast<size_t>(s.label)]++;
  return counts;
}

std::vector<int64_t> DatasetManifest::class_counts(Split split) const {
  std::vector<int64_t> counts(class_names.size(), 0);
  for (const auto& s : samples)
    if (s.split == split) counts[static_cast<size_t>(s.label)]++;
  return counts;
}

int64_t DatasetManifest::split_size(Split split) const {
  int64_t n = 0;
  for (const auto& s : samples) n += s.split == split ? 1 : 0;
  return n;
}

DatasetManifest load_manifest(const fs::path& root_dir, uint64_t seed) {
  DatasetManifest m;
  m.seed = seed;
  for (size_t ci = 0; ci < kClassNames.size(); ++ci) {
    const fs::path dir = root_dir / kClassNames[ci];
    if (!fs::is_directory(dir)) {
      std::cerr << "[oshx] warning: class directory missing: " << dir
                << " (class left empty)\n";
      continue;
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
      try {
        auto bytes = read_file_bytes(p);
        if (!sniff_decodable(bytes.data(), bytes.size())) {
          std::cerr << "[oshx] warning: skipping undecodable file " << p
                    << "\n";
          continue;
        }
      } catch (const IoError& e) {
        std::cerr << "[oshx] warning: skipping unreadable file " << p << ": "
                  << e.what() << "\n";
        continue;
      }
      Sample s;
      s.id = std::string(kClassNames[ci]) + "/" + p.filename().string();
      s.path = p;
      s.label = static_cast<int>(ci);
      m.samples.push_back(std::move(s));
    }
  }
  if (m.samples.empty())
    throw IoError("no samples found under " + root_dir.string());
  return m;
}

Tensor decode_and_resize(const Sample& sample, int side) {
  if (side < 8) throw UsageError("decode_and_resize: side must be >= 8");
  ImageU8 img;
  if (sample.pixels.has_value()) {
    img = *sample.pixels;
  } else {
    img = decode_image(sample.path);
  }
  Tensor chw = image_to_tensor(img);
  if (img.width == side && img.height == side) return chw;
  return resize_bilinear(chw, side);
}

DatasetManifest split_stratified(const DatasetManifest& manifest,
                                 const std::array<double, 3>& fractions,
                                 uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9)
    throw UsageError("split fractions must sum to 1, got " +
                     std::to_string(total));
  DatasetManifest out = manifest;
  out.seed = seed;
  for (size_t ci = 0; ci < out.class_names.size(); ++ci) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < out.samples.size(); ++i)
      if (out.samples[i].label == static_cast<int>(ci)) idx.push_back(i);
    if (idx.empty()) continue;
    if (idx.size() < 3) {
      std::cerr << "[oshx] warning: class " << out.class_names[ci] << " has "
                << idx.size() << " samples; assigning all to train\n";
      for (size_t i : idx) out.samples[i].split = Split::train;
      continue;
    }
    Rng rng(Rng::mix(seed, ci));
    rng.shuffle(idx);
    const auto n = static_cast<int64_t>(idx.size());
    const auto n_train = static_cast<int64_t>(
        std::floor(fractions[0] * static_cast<double>(n)));
    const auto n_val = static_cast<int64_t>(
        std::floor(fractions[1] * static_cast<double>(n)));
    for (int64_t i = 0; i < n; ++i) {
      Split s = i < n_train               ? Split::train
                : i < n_train + n_val     ? Split::val
                                          : Split::test;
      out.samples[idx[static_cast<size_t>(i)]].split = s;
    }
  }
  return out;
}

std::vector<double> compute_class_weights(const DatasetManifest& manifest,
                                          const std::vector<int>& task_classes) {
  const auto counts = manifest.class_counts(Split::train);
  const auto k = static_cast<double>(task_classes.size());
  double n_total = 0.0;
  for (int c : task_classes) {
    if (c < 0 || c >= static_cast<int>(counts.size()))
      throw UsageError("class index " + std::to_string(c) + " out of range");
    n_total += static_cast<double>(counts[static_cast<size_t>(c)]);
  }
  std::vector<double> weights;
  weights.reserve(task_classes.size());
  for (int c : task_classes) {
    const auto n_c = counts[static_cast<size_t>(c)];
    if (n_c == 0)
      throw UsageError("class " + manifest.class_names[static_cast<size_t>(c)] +
                       " has no train samples; cannot weight it");
    weights.push_back(n_total / (k * static_cast<double>(n_c)));
  }
  return weights;
}

NormalizationStats compute_normalization(const DatasetManifest& manifest,
                                         int side) {
  std::array<double, 3> sum{0, 0, 0}, sumsq{0, 0, 0};
  int64_t count = 0;
  for (const auto& s : manifest.samples) {
    if (s.split != Split::train) continue;
    const Tensor px = decode_and_resize(s, side);
    const auto& v = px.values();
    const int64_t plane = static_cast<int64_t>(side) * side;
    for (int c = 0; c < 3; ++c) {
      const float* p = v.data() + c * plane;
      double acc = 0.0, acc2 = 0.0;
      for (int64_t i = 0; i < plane; ++i) {
        acc += p[i];
        acc2 += static_cast<double>(p[i]) * p[i];
      }
      sum[static_cast<size_t>(c)] += acc;
      sumsq[static_cast<size_t>(c)] += acc2;
    }
    count += plane;
  }
  if (count == 0) throw UsageError("compute_normalization: train split is empty");
  NormalizationStats stats;
  for (int c = 0; c < 3; ++c) {
    const double mean = sum[static_cast<size_t>(c)] / static_cast<double>(count);
    const double var =
        sumsq[static_cast<size_t>(c)] / static_cast<double>(count) - mean * mean;
    stats.mean[static_cast<size_t>(c)] = mean;
    stats.stddev[static_cast<size_t>(c)] =
        std::max(std::sqrt(std::max(var, 0.0)), 1e-6);
  }
  return stats;
}

Tensor apply_normalization(const Tensor& pixels, const NormalizationStats& s) {
  const bool batched = pixels.ndim() == 4;
  if (!batched && pixels.ndim() != 3)
    throw ShapeError("apply_normalization: expected (3,H,W) or (N,3,H,W), got " +
                     shape_str(pixels.shape()));
  const int channels = batched ? pixels.dim(1) : pixels.dim(0);
  if (channels != 3)
    throw ShapeError("apply_normalization: expected 3 channels, got " +
                     shape_str(pixels.shape()));
  std::vector<float> out(pixels.values().size());
  const int64_t plane = pixels.numel() / (batched ? pixels.dim(0) * 3 : 3);
  const int64_t planes = pixels.numel() / plane;
  for (int64_t p = 0; p < planes; ++p) {
    const int c = static_cast<int>(p % 3);
    const float m = static_cast<float>(s.mean[static_cast<size_t>(c)]);
    const float inv =
        static_cast<float>(1.0 / s.stddev[static_cast<size_t>(c)]);
    const float* src = pixels.values().data() + p * plane;
    float* dst = out.data() + p * plane;
    for (int64_t i = 0; i < plane; ++i) dst[i] = (src[i] - m) * inv;
  }
  return Tensor::from_data(pixels.shape(), std::move(out));
}

DatasetManifest filter_for_task(const DatasetManifest& manifest,
                                const std::vector<ClassLabel>& classes) {
  if (classes.empty()) throw UsageError("filter_for_task: no classes given");
  DatasetManifest out;
  out.seed = manifest.seed;
  out.normalization = manifest.normalization;
  out.class_names.clear();
  std::map<int, int> remap; // old label -> new label
  for (size_t i = 0; i < classes.size(); ++i) {
    const std::string name = class_name(classes[i]);
    const auto it = std::find(manifest.class_names.begin(),
                              manifest.class_names.end(), name);
    if (it == manifest.class_names.end())
      throw UsageError("filter_for_task: class " + name +
                       " not present in manifest");
    remap[static_cast<int>(it - manifest.class_names.begin())] =
        static_cast<int>(i);
    out.class_names.push_back(name);
  }
  for (const auto& s : manifest.samples) {
    const auto it = remap.find(s.label);
    if (it == remap.end()) continue;
    Sample copy = s;
    copy.label = it->second;
    out.samples.push_back(std::move(copy));
  }
  return out;
}

// ---- batching --------------------------------------------------------------

BatchLoader::BatchLoader(const DatasetManifest& manifest, Split split,
                         BatchOptions opts)
    : manifest_(manifest), split_(split), opts_(opts) {
  if (opts_.batch_size < 1)
    throw UsageError("batch_size must be >= 1");
  if (opts_.side < 8) throw UsageError("side must be >= 8");
  if (opts_.normalize && !manifest.normalization.has_value())
    throw UsageError("BatchLoader: normalization requested but the manifest "
                     "has no stats; run compute_normalization first");
  for (size_t i = 0; i < manifest.samples.size(); ++i)
    if (manifest.samples[i].split == split)
      member_indices_.push_back(static_cast<int>(i));
  order_.resize(member_indices_.size());
  for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
  cache_.resize(member_indices_.size());
  parallel_for(0, static_cast<int64_t>(member_indices_.size()), [&](int64_t i) {
    Tensor px = decode_and_resize(
        manifest.samples[static_cast<size_t>(member_indices_[i])], opts_.side);
    if (opts_.normalize)
      px = apply_normalization(px, *manifest.normalization);
    cache_[static_cast<size_t>(i)] = px.values();
  });
}

int BatchLoader::batches_per_epoch() const {
  return static_cast<int>(
      (member_indices_.size() + static_cast<size_t>(opts_.batch_size) - 1) /
      static_cast<size_t>(opts_.batch_size));
}

void BatchLoader::begin_epoch(int epoch) {
  epoch_ = epoch;
  cursor_ = 0;
  for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
  if (opts_.shuffle) {
    Rng rng(Rng::mix(opts_.seed, 0xE0000 + static_cast<uint64_t>(epoch)));
    rng.shuffle(order_);
  }
}

bool BatchLoader::next(Batch& out) {
  if (cursor_ >= order_.size()) return false;
  const size_t take =
      std::min(static_cast<size_t>(opts_.batch_size), order_.size() - cursor_);
  const int side = opts_.side;
  const int64_t sample_len = static_cast<int64_t>(3) * side * side;
  std::vector<float> pixels(take * static_cast<size_t>(sample_len));
  out.labels.resize(take);
  out.ids.resize(take);
  const bool augmenting = opts_.augment && split_ == Split::train;
  for (size_t bi = 0; bi < take; ++bi) {
    const int pos = order_[cursor_ + bi];
    const auto& sample =
        manifest_.samples[static_cast<size_t>(member_indices_[pos])];
    const auto& src = cache_[static_cast<size_t>(pos)];
    float* dst = pixels.data() + bi * static_cast<size_t>(sample_len);
    std::copy(src.begin(), src.end(), dst);
    if (augmenting) {
      Rng rng(Rng::mix(opts_.seed,
                       0xA0000000ULL + static_cast<uint64_t>(epoch_) * 1000003 +
                           static_cast<uint64_t>(pos)));
      const bool hflip = rng.bernoulli(0.5);
      const bool vflip = rng.bernoulli(0.5);
      if (hflip) {
        for (int c = 0; c < 3; ++c)
          for (int y = 0; y < side; ++y) {
            float* row = dst + (static_cast<int64_t>(c) * side + y) * side;
            std::reverse(row, row + side);
          }
      }
      if (vflip) {
        for (int c = 0; c < 3; ++c)
          for (int y = 0; y < side / 2; ++y) {
            float* a = dst + (static_cast<int64_t>(c) * side + y) * side;
            float* b =
                dst + (static_cast<int64_t>(c) * side + (side - 1 - y)) * side;
            std::swap_ranges(a, a + side, b);
          }
      }
    }
    out.labels[bi] = sample.label;
    out.ids[bi] = sample.id;
  }
  out.pixels = Tensor::from_data({static_cast<int>(take), 3, side, side},
                                 std::move(pixels));
  cursor_ += take;
  return true;
}

BatchLoader make_batches(const DatasetManifest& manifest, Split split,
                         const BatchOptions& opts) {
  return BatchLoader(manifest, split, opts);
}

// ---- synthetic data --------------------------------------------------------

namespace {

struct SynthClassStyle {
  std::array<double, 3> base;
  double frequency;
};

// Distinct base hue and dominant spatial frequency per class.
constexpr std::array<SynthClassStyle, 4> kSynthStyles{{
    {{0.82, 0.64, 0.78}, 2.0},  // NT
    {{0.46, 0.36, 0.62}, 5.0},  // NVT
    {{0.72, 0.22, 0.36}, 9.0},  // VT
    {{0.26, 0.54, 0.60}, 14.0}, // NVR
}};

ImageU8 synth_image(int side, int class_code, Rng& rng) {
  const auto& style = kSynthStyles[static_cast<size_t>(class_code)];
  const double theta = rng.uniform(0.0, 3.14159265358979323846);
  const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  const double ct = std::cos(theta), st = std::sin(theta);
  constexpr double amp = 0.12;
  constexpr double noise_sigma = 0.04;
  ImageU8 img;
  img.width = side;
  img.height = side;
  img.channels = 3;
  img.pixels.resize(static_cast<size_t>(side) * side * 3);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double u = (x * ct + y * st) / side;
      const double wave =
          amp * std::sin(2.0 * 3.14159265358979323846 * style.frequency * u +
                         phase);
      for (int c = 0; c < 3; ++c) {
        double v = style.base[static_cast<size_t>(c)] + wave +
                   noise_sigma * rng.normal();
        v = std::clamp(v, 0.0, 1.0);
        img.pixels[(static_cast<size_t>(y) * side + x) * 3 +
                   static_cast<size_t>(c)] =
            static_cast<uint8_t>(v * 255.0 + 0.5);
      }
    }
  }
  return img;
}

} // namespace

void synth_generate(const fs::path& out_dir, int per_class, int side,
                    uint64_t seed) {
  if (per_class < 1) throw UsageError("synth_generate: per_class must be >= 1");
  if (side < 8) throw UsageError("synth_generate: side must be >= 8");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec)
    throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  for (size_t ci = 0; ci < kClassNames.size(); ++ci) {
    const fs::path dir = out_dir / kClassNames[ci];
    fs::create_directories(dir, ec);
    if (ec)
      throw IoError("cannot create " + dir.string() + ": " + ec.message());
    for (int i = 0; i < per_class; ++i) {
      Rng rng(Rng::mix(seed, ci * 1000000 + static_cast<uint64_t>(i)));
      const ImageU8 img = synth_image(side, static_cast<int>(ci), rng);
      std::ostringstream name;
      name << kClassNames[ci] << "_" << std::setw(4) << std::setfill('0') << i
           << ".png";
      write_file_bytes(dir / name.str(), encode_png(img));
    }
  }
}

// ---- manifest persistence --------------------------------------------------

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  json j;
  j["seed"] = manifest.seed;
  j["class_names"] = manifest.class_names;
  if (manifest.normalization) {
    j["normalization"] = {{"mean", manifest.normalization->mean},
                          {"stddev", manifest.normalization->stddev}};
  }
  json samples = json::array();
  for (const auto& s : manifest.samples) {
    if (s.path.empty())
      throw UsageError("save_manifest: in-memory sample '" + s.id +
                       "' cannot be serialized");
    samples.push_back({{"id", s.id},
                       {"path", s.path.string()},
                       {"label", s.label},
                       {"split", split_name(s.split)}});
  }
  j["samples"] = std::move(samples);
  const std::string text = j.dump(2);
  write_file_atomic(path, std::vector<uint8_t>(text.begin(), text.end()));
}

DatasetManifest load_manifest_file(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw FormatError("manifest " + path.string() + " is not valid JSON: " +
                      e.what());
  }
  DatasetManifest m;
  try {
    m.seed = j.at("seed").get<uint64_t>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    if (j.contains("normalization")) {
      NormalizationStats stats;
      stats.mean = j["normalization"].at("mean").get<std::array<double, 3>>();
      stats.stddev =
          j["normalization"].at("stddev").get<std::array<double, 3>>();
      m.normalization = stats;
    }
    for (const auto& js : j.at("samples")) {
      Sample s;
      s.id = js.at("id").get<std::string>();
      s.path = js.at("path").get<std::string>();
      s.label = js.at("label").get<int>();
      s.split = split_from_name(js.at("split").get<std::string>());
      if (s.label < 0 || s.label >= static_cast<int>(m.class_names.size()))
        throw FormatError("manifest sample '" + s.id + "' has label " +
                          std::to_string(s.label) + " out of range");
      m.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw FormatError("manifest " + path.string() + " is malformed: " +
                      e.what());
  }
  return m;
}

} // namespace oshx
