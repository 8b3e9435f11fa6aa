#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "oshx/dataset.hpp"
#include "oshx/model.hpp"

namespace oshx {

enum class NumericMode { f32, f64 };
const char* numeric_mode_name(NumericMode m);
NumericMode numeric_mode_from_name(const std::string& name);

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 32;
  int epochs = 30;
  int early_stop_patience = 5;
  uint64_t seed = 0;
  std::vector<double> class_weights; // per model class; empty = uniform
  NumericMode numeric_mode = NumericMode::f32;
  bool augment = false;

  void validate() const;
  /// Per-architecture epoch presets: cnn 30, vit 20, hybrid 30.
  static int default_epochs(Arch arch);
};

struct EpochRecord {
  int epoch = 0; // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double seconds = 0.0; // wall clock for the epoch
};

template <typename T>
struct AdamStateT {
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Slot> slots;
  int64_t t = 0;

  void init(const std::vector<NamedParam<T>*>& params);
  bool initialized() const { return !slots.empty(); }
};

using AdamState = AdamStateT<float>;

/// One Adam update with bias correction:
///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
///   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
/// Moments are kept in double. Every parameter must carry a gradient;
/// gradients are consumed (cleared) by the step.
template <typename T>
void adam_step(std::vector<NamedParam<T>*>& params, AdamStateT<T>& state,
               const TrainConfig& cfg);

/// Early stopping on validation loss: stop once `patience` epochs pass
/// without improvement over the best seen.
class EarlyStopper {
public:
  explicit EarlyStopper(int patience) : patience_(patience) {}
  /// Returns true when this epoch improved the best loss.
  bool update(double val_loss);
  bool should_stop() const;
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }
  int epoch() const { return epoch_; }

private:
  int patience_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  double best_loss_ = std::numeric_limits<double>::infinity();
};

/// The epoch loop with injectable phases, so the stopping/snapshot contract
/// is testable against crafted validation-loss sequences.
struct EpochHooks {
  std::function<double(int epoch)> run_train_epoch;
  std::function<std::pair<double, double>(int epoch)> evaluate_val;
  std::function<void(int epoch)> snapshot_best;
  std::function<void(const EpochRecord&)> on_epoch_end; // optional
};
std::vector<EpochRecord> run_training_loop(int max_epochs, int patience,
                                           const EpochHooks& hooks);

struct TrainResult {
  std::vector<EpochRecord> records;
  int best_epoch = 0;
  double best_val_loss = 0.0;
};

/// Trains the model on the manifest's train split, validating each epoch.
/// On return the model holds the parameter snapshot with the lowest
/// validation loss. For the hybrid architecture the frozen branch features
/// are computed once per split and the fusion MLP trains on them.
/// Raises DivergedError on a non-finite loss.
template <typename T>
TrainResult train(ModelGraphT<T>& model, const DatasetManifest& manifest,
                  const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch =
                      nullptr);

/// Appends CSV rows (epoch,train_loss,val_loss,val_acc,seconds); writes the
/// header first when the file is new or empty.
void epoch_log(const std::vector<EpochRecord>& records,
               const std::filesystem::path& path);

} // namespace oshx
