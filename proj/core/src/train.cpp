#include "oshx/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "oshx/ops.hpp"

namespace oshx {

namespace fs = std::filesystem;

const char* numeric_mode_name(NumericMode m) {
  return m == NumericMode::f32 ? "f32" : "f64";
}

NumericMode numeric_mode_from_name(const std::string& name) {
  if (name == "f32") return NumericMode::f32;
  if (name == "f64") return NumericMode::f64;
  throw UsageError("unknown numeric mode '" + name + "' (expected f32|f64)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be > 0");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
    throw UsageError("beta1/beta2 must be in (0,1)");
  if (!(epsilon > 0.0)) throw UsageError("epsilon must be > 0");
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  if (epochs < 1) throw UsageError("epochs must be >= 1");
  if (early_stop_patience < 1) throw UsageError("patience must be >= 1");
}

int TrainConfig::default_epochs(Arch arch) {
  switch (arch) {
    case Arch::cnn: return 30;
    case Arch::vit: return 20;
    case Arch::resnet50: return 30;
    case Arch::hybrid: return 30;
  }
  return 30;
}

template <typename T>
void AdamStateT<T>::init(const std::vector<NamedParam<T>*>& params) {
  slots.clear();
  slots.resize(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    const size_t n = params[i]->tensor.values().size();
    slots[i].m.assign(n, 0.0);
    slots[i].v.assign(n, 0.0);
  }
  t = 0;
}

template <typename T>
void adam_step(std::vector<NamedParam<T>*>& params, AdamStateT<T>& state,
               const TrainConfig& cfg) {
  if (!state.initialized()) state.init(params);
  if (state.slots.size() != params.size())
    throw UsageError("adam_step: optimizer state does not match parameters");
  for (const auto* p : params)
    if (!p->tensor.has_grad())
      throw UsageError("adam_step: parameter '" + p->name + "' has no gradient");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& tensor = params[i]->tensor;
    auto& values = tensor.node_->value;
    const auto& grad = tensor.node_->grad;
    auto& slot = state.slots[i];
    for (size_t j = 0; j < values.size(); ++j) {
      const double g = static_cast<double>(grad[j]);
      slot.m[j] = cfg.beta1 * slot.m[j] + (1.0 - cfg.beta1) * g;
      slot.v[j] = cfg.beta2 * slot.v[j] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = slot.m[j] / bc1;
      const double v_hat = slot.v[j] / bc2;
      values[j] = static_cast<T>(static_cast<double>(values[j]) -
                                 cfg.learning_rate * m_hat /
                                     (std::sqrt(v_hat) + cfg.epsilon));
    }
    tensor.zero_grad();
  }
}

bool EarlyStopper::update(double val_loss) {
  epoch_ += 1;
  if (val_loss < best_loss_) {
    best_loss_ = val_loss;
    best_epoch_ = epoch_;
    return true;
  }
  return false;
}

bool EarlyStopper::should_stop() const {
  return epoch_ - best_epoch_ >= patience_;
}

std::vector<EpochRecord> run_training_loop(int max_epochs, int patience,
                                           const EpochHooks& hooks) {
  std::vector<EpochRecord> records;
  EarlyStopper stopper(patience);
  for (int epoch = 1; epoch <= max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = hooks.run_train_epoch(epoch);
    const auto [val_loss, val_acc] = hooks.evaluate_val(epoch);
    rec.val_loss = val_loss;
    rec.val_accuracy = val_acc;
    if (stopper.update(val_loss)) hooks.snapshot_best(epoch);
    rec.seconds = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    records.push_back(rec);
    if (hooks.on_epoch_end) hooks.on_epoch_end(rec);
    if (stopper.should_stop()) break;
  }
  return records;
}

namespace {

template <typename T>
TensorT<T> batch_pixels(const Batch& batch) {
  if constexpr (std::is_same_v<T, float>) {
    return batch.pixels;
  } else {
    return cast<T>(batch.pixels);
  }
}

/// Snapshot of the trainable parameter values.
template <typename T>
std::vector<std::vector<T>> copy_values(
    const std::vector<NamedParam<T>*>& params) {
  std::vector<std::vector<T>> out;
  out.reserve(params.size());
  for (const auto* p : params) out.push_back(p->tensor.values());
  return out;
}

template <typename T>
void restore_values(std::vector<NamedParam<T>*>& params,
                    const std::vector<std::vector<T>>& snapshot) {
  for (size_t i = 0; i < params.size(); ++i)
    params[i]->tensor.node_->value = snapshot[i];
}

/// Frozen-branch features for every sample of a split, in manifest order,
/// plus the labels. Used by the hybrid two-stage recipe.
template <typename T>
std::pair<TensorT<T>, std::vector<int>> cache_branch_features(
    ModelGraphT<T>& model, const DatasetManifest& manifest, Split split,
    const TrainConfig& cfg) {
  BatchOptions opts;
  opts.side = model.input_side();
  opts.batch_size = cfg.batch_size;
  opts.shuffle = false;
  opts.augment = false;
  opts.seed = cfg.seed;
  opts.normalize = manifest.normalization.has_value();
  BatchLoader loader(manifest, split, opts);
  loader.begin_epoch(0);
  std::vector<T> rows;
  std::vector<int> labels;
  Batch batch;
  int64_t width = 0;
  while (loader.next(batch)) {
    TensorT<T> f = model.branch_features(batch_pixels<T>(batch));
    width = f.dim(1);
    rows.insert(rows.end(), f.values().begin(), f.values().end());
    labels.insert(labels.end(), batch.labels.begin(), batch.labels.end());
  }
  const int n = static_cast<int>(labels.size());
  return {TensorT<T>::from_data({n, static_cast<int>(width)}, std::move(rows)),
          std::move(labels)};
}

template <typename T>
TensorT<T> gather_rows(const TensorT<T>& matrix, const std::vector<int>& idx) {
  const int width = matrix.dim(1);
  std::vector<T> out(idx.size() * static_cast<size_t>(width));
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(matrix.values().data() +
                    static_cast<int64_t>(idx[i]) * width,
                width, out.data() + i * static_cast<size_t>(width));
  return TensorT<T>::from_data({static_cast<int>(idx.size()), width},
                               std::move(out));
}

} // namespace

template <typename T>
TrainResult train(ModelGraphT<T>& model, const DatasetManifest& manifest,
                  const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  if (manifest.split_size(Split::train) == 0)
    throw UsageError("train: the manifest's train split is empty");
  if (manifest.split_size(Split::val) == 0)
    throw UsageError("train: the manifest's val split is empty");
  const int k = model.num_classes();
  std::vector<double> weights = cfg.class_weights;
  if (weights.empty()) weights.assign(static_cast<size_t>(k), 1.0);
  if (static_cast<int>(weights.size()) != k)
    throw UsageError("train: " + std::to_string(weights.size()) +
                     " class weights for " + std::to_string(k) + " classes");

  auto trainable = model.trainable_parameters();
  if (trainable.empty()) throw UsageError("train: no trainable parameters");
  AdamStateT<T> adam;
  adam.init(trainable);

  std::vector<std::vector<T>> best_snapshot = copy_values(trainable);
  TrainResult result;

  const bool hybrid = model.spec().name == Arch::hybrid;
  if (hybrid) {
    // Two-stage recipe: branches stay frozen, so their features per sample
    // are constants; compute them once and train the MLP on them.
    auto [train_feats, train_labels] =
        cache_branch_features(model, manifest, Split::train, cfg);
    auto [val_feats, val_labels] =
        cache_branch_features(model, manifest, Split::val, cfg);
    const int n_train = train_feats.dim(0);

    EpochHooks hooks;
    hooks.run_train_epoch = [&](int epoch) {
      Rng shuffle_rng(Rng::mix(cfg.seed, 0xE0000 + static_cast<uint64_t>(epoch)));
      std::vector<int> order(static_cast<size_t>(n_train));
      for (int i = 0; i < n_train; ++i) order[static_cast<size_t>(i)] = i;
      shuffle_rng.shuffle(order);
      double loss_acc = 0.0;
      int64_t seen = 0;
      int batch_index = 0;
      for (int start = 0; start < n_train; start += cfg.batch_size) {
        const int take = std::min(cfg.batch_size, n_train - start);
        std::vector<int> idx(order.begin() + start, order.begin() + start + take);
        std::vector<int> labels(static_cast<size_t>(take));
        for (int i = 0; i < take; ++i)
          labels[static_cast<size_t>(i)] =
              train_labels[static_cast<size_t>(idx[static_cast<size_t>(i)])];
        TensorT<T> feats = gather_rows(train_feats, idx);
        TensorT<T> logits = model.head_forward(feats, true);
        TensorT<T> loss = weighted_cross_entropy(logits, labels, weights);
        const double loss_v = static_cast<double>(loss.item());
        if (!std::isfinite(loss_v))
          throw DivergedError(epoch, batch_index, loss_v);
        loss.backward();
        adam_step(trainable, adam, cfg);
        loss_acc += loss_v * take;
        seen += take;
        batch_index++;
      }
      return loss_acc / static_cast<double>(seen);
    };
    hooks.evaluate_val = [&](int) {
      TensorT<T> logits = model.head_forward(val_feats, false);
      TensorT<T> loss = weighted_cross_entropy(logits, val_labels, weights);
      const auto pred = argmax_rows(logits);
      int64_t correct = 0;
      for (size_t i = 0; i < pred.size(); ++i)
        correct += pred[i] == val_labels[i] ? 1 : 0;
      return std::make_pair(static_cast<double>(loss.item()),
                            static_cast<double>(correct) /
                                static_cast<double>(pred.size()));
    };
    hooks.snapshot_best = [&](int epoch) {
      best_snapshot = copy_values(trainable);
      result.best_epoch = epoch;
    };
    hooks.on_epoch_end = on_epoch;
    result.records =
        run_training_loop(cfg.epochs, cfg.early_stop_patience, hooks);
  } else {
    BatchOptions train_opts;
    train_opts.side = model.input_side();
    train_opts.batch_size = cfg.batch_size;
    train_opts.shuffle = true;
    train_opts.augment = cfg.augment;
    train_opts.seed = cfg.seed;
    train_opts.normalize = manifest.normalization.has_value();
    BatchLoader train_loader(manifest, Split::train, train_opts);
    BatchOptions val_opts = train_opts;
    val_opts.shuffle = false;
    val_opts.augment = false;
    BatchLoader val_loader(manifest, Split::val, val_opts);

    EpochHooks hooks;
    hooks.run_train_epoch = [&](int epoch) {
      train_loader.begin_epoch(epoch);
      Batch batch;
      double loss_acc = 0.0;
      int64_t seen = 0;
      int batch_index = 0;
      while (train_loader.next(batch)) {
        TensorT<T> logits = model.forward(batch_pixels<T>(batch), true);
        TensorT<T> loss = weighted_cross_entropy(logits, batch.labels, weights);
        const double loss_v = static_cast<double>(loss.item());
        if (!std::isfinite(loss_v))
          throw DivergedError(epoch, batch_index, loss_v);
        loss.backward();
        adam_step(trainable, adam, cfg);
        loss_acc += loss_v * static_cast<double>(batch.labels.size());
        seen += static_cast<int64_t>(batch.labels.size());
        batch_index++;
      }
      return loss_acc / static_cast<double>(seen);
    };
    hooks.evaluate_val = [&](int) {
      val_loader.begin_epoch(0);
      Batch batch;
      double loss_acc = 0.0;
      int64_t seen = 0, correct = 0;
      while (val_loader.next(batch)) {
        TensorT<T> logits = model.forward(batch_pixels<T>(batch), false);
        TensorT<T> loss = weighted_cross_entropy(logits, batch.labels, weights);
        loss_acc +=
            static_cast<double>(loss.item()) * static_cast<double>(batch.labels.size());
        const auto pred = argmax_rows(logits);
        for (size_t i = 0; i < pred.size(); ++i)
          correct += pred[i] == batch.labels[i] ? 1 : 0;
        seen += static_cast<int64_t>(batch.labels.size());
      }
      return std::make_pair(loss_acc / static_cast<double>(seen),
                            static_cast<double>(correct) /
                                static_cast<double>(seen));
    };
    hooks.snapshot_best = [&](int epoch) {
      best_snapshot = copy_values(trainable);
      result.best_epoch = epoch;
    };
    hooks.on_epoch_end = on_epoch;
    result.records =
        run_training_loop(cfg.epochs, cfg.early_stop_patience, hooks);
  }

  restore_values(trainable, best_snapshot);
  result.best_val_loss = std::numeric_limits<double>::infinity();
  for (const auto& r : result.records)
    result.best_val_loss = std::min(result.best_val_loss, r.val_loss);
  return result;
}

void epoch_log(const std::vector<EpochRecord>& records, const fs::path& path) {
  bool need_header = true;
  {
    std::error_code ec;
    const auto size = fs::file_size(path, ec);
    need_header = ec || size == 0;
  }
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot open epoch log " + path.string());
  if (need_header) out << "epoch,train_loss,val_loss,val_acc,seconds\n";
  char line[160];
  for (const auto& r : records) {
    std::snprintf(line, sizeof(line), "%d,%.6f,%.6f,%.6f,%.3f\n", r.epoch,
                  r.train_loss, r.val_loss, r.val_accuracy, r.seconds);
    out << line;
  }
  if (!out) throw IoError("short write on epoch log " + path.string());
}

template struct AdamStateT<float>;
template struct AdamStateT<double>;
template void adam_step<float>(std::vector<NamedParam<float>*>&,
                               AdamStateT<float>&, const TrainConfig&);
template void adam_step<double>(std::vector<NamedParam<double>*>&,
                                AdamStateT<double>&, const TrainConfig&);
template TrainResult train<float>(
    ModelGraphT<float>&, const DatasetManifest&, const TrainConfig&,
    const std::function<void(const EpochRecord&)>&);
template TrainResult train<double>(
    ModelGraphT<double>&, const DatasetManifest&, const TrainConfig&,
    const std::function<void(const EpochRecord&)>&);

} // namespace oshx
