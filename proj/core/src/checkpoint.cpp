#include "oshx/checkpoint.hpp"

#include <cstring>

#include <nlohmann/json.hpp>

#include "oshx/image.hpp"

namespace oshx {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'O', 'S', 'H', 'X'};

void append_u32le(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(static_cast<uint8_t>(x & 0xFF));
  v.push_back(static_cast<uint8_t>((x >> 8) & 0xFF));
  v.push_back(static_cast<uint8_t>((x >> 16) & 0xFF));
  v.push_back(static_cast<uint8_t>((x >> 24) & 0xFF));
}

uint32_t read_u32le(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) |
         (static_cast<uint32_t>(p[3]) << 24);
}

json spec_to_json(const ArchSpec& spec) {
  return json{{"arch", arch_name(spec.name)},
              {"scale", scale_name(spec.scale)},
              {"num_classes", spec.num_classes},
              {"input_side", spec.input_side},
              {"vit_dims",
               {spec.vit_dims.embed_dim, spec.vit_dims.depth,
                spec.vit_dims.heads, spec.vit_dims.mlp_dim,
                spec.vit_dims.patch_size}},
              {"dropout_rate", spec.dropout_rate},
              {"hybrid_mlp_leaky", spec.hybrid_mlp_leaky}};
}

ArchSpec spec_from_json(const json& j) {
  ArchSpec spec;
  spec.name = arch_from_name(j.at("arch").get<std::string>());
  spec.scale = scale_from_name(j.at("scale").get<std::string>());
  spec.num_classes = j.at("num_classes").get<int>();
  spec.input_side = j.at("input_side").get<int>();
  const auto vd = j.at("vit_dims").get<std::vector<int>>();
  if (vd.size() != 5) throw CorruptError("checkpoint vit_dims malformed");
  spec.vit_dims = {vd[0], vd[1], vd[2], vd[3], vd[4]};
  spec.dropout_rate = j.at("dropout_rate").get<double>();
  spec.hybrid_mlp_leaky = j.value("hybrid_mlp_leaky", false);
  return spec;
}

} // namespace

template <typename T>
void save_checkpoint(const ModelGraphT<T>& model,
                     const std::vector<std::string>& class_names,
                     const fs::path& path,
                     const NormalizationStats* normalization) {
  json meta;
  meta["spec"] = spec_to_json(model.spec());
  meta["class_names"] = class_names;
  if (normalization) {
    meta["normalization"] = {{"mean", normalization->mean},
                             {"stddev", normalization->stddev}};
  }
  json index = json::array();
  int64_t offset = 0;
  for (const auto& p : model.parameters()) {
    index.push_back({{"name", p.name},
                     {"shape", p.tensor.shape()},
                     {"offset", offset},
                     {"count", p.tensor.numel()}});
    offset += p.tensor.numel();
  }
  meta["params"] = std::move(index);
  const std::string meta_text = meta.dump();

  std::vector<uint8_t> bytes;
  bytes.reserve(12 + meta_text.size() +
                static_cast<size_t>(offset) * sizeof(float));
  bytes.insert(bytes.end(), kMagic, kMagic + 4);
  append_u32le(bytes, kCheckpointVersion);
  append_u32le(bytes, static_cast<uint32_t>(meta_text.size()));
  bytes.insert(bytes.end(), meta_text.begin(), meta_text.end());
  for (const auto& p : model.parameters()) {
    for (const T v : p.tensor.values()) {
      const float f = static_cast<float>(v);
      uint8_t raw[4];
      std::memcpy(raw, &f, 4);
      bytes.insert(bytes.end(), raw, raw + 4);
    }
  }
  write_file_atomic(path, bytes);
}

template <typename T>
LoadedModelT<T> load_checkpoint(const fs::path& path, int expect_num_classes) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError(path.string() + " is not an OSHX checkpoint");
  const uint32_t version = read_u32le(bytes.data() + 4);
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + " has unsupported checkpoint version " +
                      std::to_string(version));
  const uint32_t meta_len = read_u32le(bytes.data() + 8);
  if (bytes.size() < 12 + static_cast<size_t>(meta_len))
    throw CorruptError(path.string() + " is truncated inside the metadata");
  json meta;
  try {
    meta = json::parse(bytes.begin() + 12, bytes.begin() + 12 + meta_len);
  } catch (const json::parse_error& e) {
    throw CorruptError(path.string() + " metadata is not valid JSON: " +
                       e.what());
  }

  ArchSpec spec;
  std::vector<std::string> class_names;
  std::optional<NormalizationStats> normalization;
  struct Entry {
    std::string name;
    Shape shape;
    int64_t offset;
    int64_t count;
  };
  std::vector<Entry> entries;
  int64_t total = 0;
  try {
    spec = spec_from_json(meta.at("spec"));
    class_names = meta.at("class_names").get<std::vector<std::string>>();
    if (meta.contains("normalization")) {
      NormalizationStats stats;
      stats.mean = meta["normalization"].at("mean").get<std::array<double, 3>>();
      stats.stddev =
          meta["normalization"].at("stddev").get<std::array<double, 3>>();
      normalization = stats;
    }
    for (const auto& je : meta.at("params")) {
      Entry e;
      e.name = je.at("name").get<std::string>();
      e.shape = je.at("shape").get<Shape>();
      e.offset = je.at("offset").get<int64_t>();
      e.count = je.at("count").get<int64_t>();
      if (e.count != shape_numel(e.shape) || e.offset != total)
        throw CorruptError(path.string() + ": parameter index entry '" +
                           e.name + "' is inconsistent");
      total += e.count;
      entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw CorruptError(path.string() + " metadata is malformed: " + e.what());
  }

  const size_t blob_start = 12 + meta_len;
  const size_t expect_bytes = static_cast<size_t>(total) * sizeof(float);
  if (bytes.size() - blob_start != expect_bytes)
    throw CorruptError(path.string() + ": parameter payload is " +
                       std::to_string(bytes.size() - blob_start) +
                       " bytes, index expects " + std::to_string(expect_bytes));

  if (expect_num_classes >= 0 && spec.num_classes != expect_num_classes)
    throw ConfigError("checkpoint " + path.string() + " was trained for " +
                      std::to_string(spec.num_classes) +
                      " classes but this context expects " +
                      std::to_string(expect_num_classes));

  LoadedModelT<T> loaded;
  loaded.class_names = std::move(class_names);
  loaded.normalization = normalization;
  loaded.model = build_model<T>(spec, 0);
  auto& params = loaded.model->parameters();
  if (params.size() != entries.size())
    throw CorruptError(path.string() + ": checkpoint has " +
                       std::to_string(entries.size()) +
                       " parameters, the rebuilt model has " +
                       std::to_string(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const Entry& e = entries[i];
    auto& p = params[i];
    if (p.name != e.name || p.tensor.shape() != e.shape)
      throw CorruptError(path.string() + ": parameter '" + e.name +
                         "' does not match the rebuilt model ('" + p.name +
                         "' " + shape_str(p.tensor.shape()) + ")");
    const uint8_t* src = bytes.data() + blob_start +
                         static_cast<size_t>(e.offset) * sizeof(float);
    // Leaf values are written in place; requires_grad flags are preserved.
    auto& node = *p.tensor.node_;
    for (int64_t j = 0; j < e.count; ++j) {
      float f;
      std::memcpy(&f, src + static_cast<size_t>(j) * 4, 4);
      node.value[static_cast<size_t>(j)] = static_cast<T>(f);
    }
  }
  return loaded;
}

template void save_checkpoint<float>(const ModelGraphT<float>&,
                                     const std::vector<std::string>&,
                                     const fs::path&,
                                     const NormalizationStats*);
template void save_checkpoint<double>(const ModelGraphT<double>&,
                                      const std::vector<std::string>&,
                                      const fs::path&,
                                      const NormalizationStats*);
template LoadedModelT<float> load_checkpoint<float>(const fs::path&, int);
template LoadedModelT<double> load_checkpoint<double>(const fs::path&, int);

} // namespace oshx
