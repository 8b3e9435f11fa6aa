#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "oracles.hpp"
#include "oshx/checkpoint.hpp"
#include "oshx/ops.hpp"
#include "oshx/train.hpp"
#include "util.hpp"

using namespace oshx;
using namespace oshx::testing;
namespace fs = std::filesystem;

namespace {

std::string slurp_text(const fs::path& p) {
  const auto bytes = read_file_bytes(p);
  return std::string(bytes.begin(), bytes.end());
}

/// Learnable four-class in-memory dataset with train/val/test splits.
DatasetManifest tiny_learnable_manifest(int per_class) {
  DatasetManifest m = memory_manifest(
      std::vector<int>(4, per_class), 64, true);
  m = split_stratified(m, {0.60, 0.15, 0.25}, 5);
  return m;
}

double recompute_val_loss(ModelGraphT<float>& model,
                          const DatasetManifest& manifest,
                          const std::vector<double>& weights, int batch_size) {
  BatchOptions opts;
  opts.side = model.input_side();
  opts.batch_size = batch_size;
  opts.normalize = manifest.normalization.has_value();
  BatchLoader loader(manifest, Split::val, opts);
  loader.begin_epoch(0);
  Batch b;
  double acc = 0.0;
  int64_t n = 0;
  while (loader.next(b)) {
    Tensor logits = model.forward(b.pixels, false);
    acc += static_cast<double>(
               weighted_cross_entropy(logits, b.labels, weights).item()) *
           static_cast<double>(b.labels.size());
    n += static_cast<int64_t>(b.labels.size());
  }
  return acc / static_cast<double>(n);
}

} // namespace

TEST_CASE("weighted cross entropy values") {
  SUBCASE("uniform logits over four classes cost ln 4") {
    TensorD logits = TensorD::zeros({2, 4});
    TensorD loss = weighted_cross_entropy(logits, {1, 3}, {1, 1, 1, 1});
    CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-9));
  }
  SUBCASE("scaled one-hot logits drive the loss monotonically to zero") {
    double prev = 1e9;
    for (double s : {1.0, 5.0, 10.0, 40.0}) {
      TensorD logits = TensorD::from_data({1, 3}, {s, 0.0, 0.0});
      const double loss =
          weighted_cross_entropy(logits, {0}, {1, 1, 1}).item();
      CHECK(loss < prev);
      prev = loss;
    }
    CHECK(prev < 1e-10);
  }
  SUBCASE("random logits match the per-sample scalar oracle") {
    Rng rng(8);
    std::vector<double> z(12);
    for (auto& v : z) v = rng.uniform(-2.0, 2.0);
    const std::vector<int> labels{2, 0, 3};
    const std::vector<double> weights{0.5, 1.0, 1.0, 2.0};
    TensorD logits = TensorD::from_data({3, 4}, z);
    const double loss = weighted_cross_entropy(logits, labels, weights).item();
    double num = 0.0, den = 0.0;
    for (int i = 0; i < 3; ++i) {
      double m = -1e300, lse = 0.0;
      for (int j = 0; j < 4; ++j) m = std::max(m, z[static_cast<size_t>(i) * 4 + j]);
      for (int j = 0; j < 4; ++j)
        lse += std::exp(z[static_cast<size_t>(i) * 4 + j] - m);
      lse = std::log(lse) + m;
      num += weights[static_cast<size_t>(labels[static_cast<size_t>(i)])] *
             (lse - z[static_cast<size_t>(i) * 4 + labels[static_cast<size_t>(i)]]);
      den += weights[static_cast<size_t>(labels[static_cast<size_t>(i)])];
    }
    CHECK(loss == doctest::Approx(num / den).epsilon(1e-6));
  }
  SUBCASE("all-equal weights reduce to the unweighted mean") {
    Rng rng(9);
    std::vector<double> z(20);
    for (auto& v : z) v = rng.uniform(-3.0, 3.0);
    const std::vector<int> labels{0, 4, 2, 1};
    TensorD logits = TensorD::from_data({4, 5}, z);
    const double weighted =
        weighted_cross_entropy(logits, labels, {2, 2, 2, 2, 2}).item();
    const double unweighted =
        weighted_cross_entropy(logits, labels, {1, 1, 1, 1, 1}).item();
    CHECK(std::abs(weighted - unweighted) < 1e-7);
  }
  SUBCASE("label out of range is a usage error") {
    TensorD logits = TensorD::zeros({1, 3});
    CHECK_THROWS_AS(weighted_cross_entropy(logits, {3}, {1, 1, 1}), UsageError);
  }
}

TEST_CASE("adam step") {
  TrainConfig cfg;
  cfg.learning_rate = 1e-4;
  SUBCASE("first step with unit gradients moves by ~lr") {
    NamedParam<double> p{"w", TensorD::zeros({4}, true)};
    p.tensor.node_->grad.assign(4, 1.0);
    std::vector<NamedParam<double>*> params{&p};
    AdamStateT<double> state;
    adam_step(params, state, cfg);
    for (double v : p.tensor.values())
      CHECK(v == doctest::Approx(-1e-4).epsilon(1e-7));
  }
  SUBCASE("zero gradients leave parameters unchanged") {
    NamedParam<double> p{"w", TensorD::full({3}, 0.7, true)};
    p.tensor.node_->grad.assign(3, 0.0);
    std::vector<NamedParam<double>*> params{&p};
    AdamStateT<double> state;
    adam_step(params, state, cfg);
    for (double v : p.tensor.values()) CHECK(v == 0.7);
  }
  SUBCASE("five steps on a scalar quadratic match the hand-rolled oracle") {
    NamedParam<double> p{"theta", TensorD::scalar(1.3, true)};
    std::vector<NamedParam<double>*> params{&p};
    AdamStateT<double> state;
    ScalarAdamOracle oracle;
    double theta_ref = 1.3;
    for (int step = 0; step < 5; ++step) {
      TensorD loss = mul(p.tensor, p.tensor); // theta^2, grad = 2 theta
      loss.backward();
      const double grad_ref = 2.0 * theta_ref;
      adam_step(params, state, cfg);
      theta_ref = oracle.step(theta_ref, grad_ref, cfg.learning_rate, cfg.beta1,
                              cfg.beta2, cfg.epsilon);
      CHECK(std::abs(p.tensor.item() - theta_ref) < 1e-10);
    }
  }
  SUBCASE("a missing gradient names the parameter") {
    NamedParam<double> p{"conv7.bias", TensorD::zeros({2}, true)};
    std::vector<NamedParam<double>*> params{&p};
    AdamStateT<double> state;
    CHECK_THROWS_WITH_AS(adam_step(params, state, cfg),
                         doctest::Contains("conv7.bias"), UsageError);
  }
  SUBCASE("adam strictly reduces a convex quadratic after 100 steps") {
    TrainConfig fast = cfg;
    fast.learning_rate = 0.05;
    NamedParam<double> p{"theta", TensorD::scalar(2.0, true)};
    std::vector<NamedParam<double>*> params{&p};
    AdamStateT<double> state;
    const double initial = 4.0;
    double last = initial;
    for (int step = 0; step < 100; ++step) {
      TensorD loss = mul(p.tensor, p.tensor);
      last = loss.item();
      loss.backward();
      adam_step(params, state, fast);
    }
    CHECK(last < initial);
  }
}

TEST_CASE("early stopping follows the crafted validation sequence") {
  // Losses [1.0, 0.8, 0.9, 0.85, 0.95, 0.99] with patience 3: the best is
  // epoch 2; epochs 3-5 fail to improve, so the loop stops after epoch 5
  // and the snapshot belongs to epoch 2.
  const std::vector<double> losses{1.0, 0.8, 0.9, 0.85, 0.95, 0.99};
  int snapshot_epoch = 0;
  EpochHooks hooks;
  hooks.run_train_epoch = [](int) { return 0.0; };
  hooks.evaluate_val = [&](int epoch) {
    return std::make_pair(losses[static_cast<size_t>(epoch - 1)], 0.5);
  };
  hooks.snapshot_best = [&](int epoch) { snapshot_epoch = epoch; };
  const auto records = run_training_loop(6, 3, hooks);
  CHECK(records.size() == 5);
  CHECK(records.back().epoch == 5);
  CHECK(snapshot_epoch == 2);

  EarlyStopper stopper(3);
  CHECK(stopper.update(1.0));
  CHECK(stopper.update(0.8));
  CHECK_FALSE(stopper.update(0.9));
  CHECK_FALSE(stopper.should_stop());
  CHECK_FALSE(stopper.update(0.85));
  CHECK_FALSE(stopper.should_stop());
  CHECK_FALSE(stopper.update(0.95));
  CHECK(stopper.should_stop());
  CHECK(stopper.best_epoch() == 2);
  CHECK(stopper.best_loss() == 0.8);
}

TEST_CASE("train returns the snapshot with the minimum validation loss") {
  DatasetManifest manifest = tiny_learnable_manifest(8);
  auto model = build_cnn<float>(ArchSpec::preset(Arch::cnn, ScalePreset::tiny, 4), 3);
  TrainConfig cfg;
  cfg.learning_rate = 3e-4;
  cfg.batch_size = 8;
  cfg.epochs = 4;
  cfg.early_stop_patience = 10;
  cfg.seed = 3;
  const TrainResult result = train(*model, manifest, cfg);
  CHECK(result.records.size() == 4);
  double min_val = 1e300;
  for (const auto& r : result.records) min_val = std::min(min_val, r.val_loss);
  CHECK(result.best_val_loss == min_val);
  // The returned parameters reproduce that loss.
  const double recomputed =
      recompute_val_loss(*model, manifest, {1, 1, 1, 1}, cfg.batch_size);
  CHECK(recomputed == doctest::Approx(min_val).epsilon(1e-6));
}

TEST_CASE("identical seeds give identical training runs") {
  DatasetManifest manifest = tiny_learnable_manifest(8);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = 3;
  cfg.seed = 11;
  auto run = [&]() {
    auto model = build_cnn<float>(ArchSpec::preset(Arch::cnn, ScalePreset::tiny, 4), 11);
    const TrainResult r = train(*model, manifest, cfg);
    const fs::path ckpt = fresh_dir("det") / "m.oshx";
    save_checkpoint(*model, {"NT", "NVT", "VT", "NVR"}, ckpt);
    return std::make_pair(r, read_file_bytes(ckpt));
  };
  const auto [r1, bytes1] = run();
  const auto [r2, bytes2] = run();
  REQUIRE(r1.records.size() == r2.records.size());
  for (size_t i = 0; i < r1.records.size(); ++i) {
    CHECK(r1.records[i].train_loss == r2.records[i].train_loss);
    CHECK(r1.records[i].val_loss == r2.records[i].val_loss);
    CHECK(r1.records[i].val_accuracy == r2.records[i].val_accuracy);
  }
  CHECK(bytes1 == bytes2);
}

TEST_CASE("non-finite loss aborts with location diagnostics") {
  DatasetManifest manifest = tiny_learnable_manifest(8);
  auto model = build_cnn<float>(ArchSpec::preset(Arch::cnn, ScalePreset::tiny, 4), 3);
  // Poison one parameter so the very first batch yields NaN.
  model->parameters()[0].tensor.node_->value[0] =
      std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  try {
    train(*model, manifest, cfg);
    FAIL("expected DivergedError");
  } catch (const DivergedError& e) {
    CHECK(e.epoch == 1);
    CHECK(e.batch_index == 0);
    CHECK_FALSE(std::isfinite(e.loss_value));
  }
}

TEST_CASE("hybrid training leaves branch parameters bitwise unchanged") {
  DatasetManifest manifest = tiny_learnable_manifest(8);
  auto model = build_model<float>(ArchSpec::preset(Arch::hybrid, ScalePreset::tiny, 4), 13);
  std::vector<std::vector<float>> before;
  for (const auto& p : model->parameters())
    if (!p.tensor.requires_grad()) before.push_back(p.tensor.values());
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 13;
  train(*model, manifest, cfg);
  size_t idx = 0;
  for (const auto& p : model->parameters()) {
    if (p.tensor.requires_grad()) continue;
    CHECK(std::memcmp(p.tensor.values().data(), before[idx].data(),
                      before[idx].size() * sizeof(float)) == 0);
    idx++;
  }
}

TEST_CASE("checkpoint persistence") {
  const fs::path dir = fresh_dir("ckpt");
  auto model = build_cnn<float>(ArchSpec::preset(Arch::cnn, ScalePreset::tiny, 3), 17);
  const std::vector<std::string> classes{"VT", "NVT", "NT"};
  NormalizationStats stats;
  stats.mean = {0.5, 0.4, 0.6};
  stats.stddev = {0.2, 0.25, 0.21};

  SUBCASE("save -> load -> save produces byte-identical files") {
    save_checkpoint(*model, classes, dir / "a.oshx", &stats);
    auto loaded = load_checkpoint<float>(dir / "a.oshx");
    CHECK(loaded.class_names == classes);
    REQUIRE(loaded.normalization.has_value());
    CHECK(loaded.normalization->mean == stats.mean);
    save_checkpoint(*loaded.model, loaded.class_names, dir / "b.oshx",
                    &*loaded.normalization);
    CHECK(read_file_bytes(dir / "a.oshx") == read_file_bytes(dir / "b.oshx"));
    // Parameters roundtrip bitwise.
    for (size_t i = 0; i < model->parameters().size(); ++i) {
      const auto& a = model->parameters()[i].tensor.values();
      const auto& b = loaded.model->parameters()[i].tensor.values();
      CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
    }
  }
  SUBCASE("truncated files raise a corruption error, no partial model") {
    save_checkpoint(*model, classes, dir / "t.oshx");
    auto bytes = read_file_bytes(dir / "t.oshx");
    bytes.resize(bytes.size() - 257);
    write_file_bytes(dir / "t.oshx", bytes);
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "t.oshx"), CorruptError);
  }
  SUBCASE("wrong num_classes context is an explicit mismatch error") {
    save_checkpoint(*model, classes, dir / "k.oshx");
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "k.oshx", 4), ConfigError);
  }
  SUBCASE("bad magic is a format error") {
    std::ofstream bad(dir / "bad.oshx", std::ios::binary);
    bad << "NOPE" << std::string(64, '\0');
    bad.close();
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "bad.oshx"), FormatError);
  }
}

TEST_CASE("epoch log format and determinism") {
  const fs::path dir = fresh_dir("epochlog");
  std::vector<EpochRecord> records;
  for (int e = 1; e <= 3; ++e)
    records.push_back({e, 1.0 / e, 0.9 / e, 0.5 + 0.1 * e, 0.25 * e});

  SUBCASE("three records make a four-line file") {
    epoch_log(records, dir / "log.csv");
    const std::string text = slurp_text(dir / "log.csv");
    CHECK(std::count(text.begin(), text.end(), '\n') == 4);
    CHECK(text.rfind("epoch,train_loss,val_loss,val_acc,seconds", 0) == 0);
  }
  SUBCASE("regenerating the file yields identical content") {
    epoch_log(records, dir / "a.csv");
    epoch_log(records, dir / "b.csv");
    CHECK(slurp_text(dir / "a.csv") == slurp_text(dir / "b.csv"));
  }
  SUBCASE("an empty record list writes only the header") {
    epoch_log({}, dir / "empty.csv");
    CHECK(slurp_text(dir / "empty.csv") ==
          "epoch,train_loss,val_loss,val_acc,seconds\n");
  }
  SUBCASE("subsequent appends do not repeat the header") {
    epoch_log({records[0]}, dir / "inc.csv");
    epoch_log({records[1]}, dir / "inc.csv");
    const std::string text = slurp_text(dir / "inc.csv");
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);
    CHECK(text.find("epoch,", 1) == std::string::npos);
  }
}

TEST_CASE("f64 numeric mode trains end to end") {
  DatasetManifest manifest = tiny_learnable_manifest(8);
  auto model = build_cnn<double>(ArchSpec::preset(Arch::cnn, ScalePreset::tiny, 4), 3);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.numeric_mode = NumericMode::f64;
  const TrainResult r = train(*model, manifest, cfg);
  CHECK(r.records.size() == 2);
  for (const auto& rec : r.records) CHECK(std::isfinite(rec.val_loss));
}
