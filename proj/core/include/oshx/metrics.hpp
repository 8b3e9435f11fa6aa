#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "oshx/dataset.hpp"
#include "oshx/model.hpp"

namespace oshx {

enum class Task { binary, three_class, four_class };
const char* task_name(Task t);
Task task_from_name(const std::string& name);

/// The three supported classification tasks. Class order is the reporting
/// order: the binary and three-class tasks list VT (viable tumor, the
/// positive class) first; the four-class task uses the label-code order.
struct TaskSpec {
  Task name = Task::four_class;
  std::vector<ClassLabel> classes;

  static TaskSpec make(Task t);
  int k() const { return static_cast<int>(classes.size()); }
  std::vector<std::string> class_name_list() const;
};

/// K x K counts, rows = true class, columns = predicted class.
struct ConfusionMatrix {
  int k = 0;
  std::vector<int64_t> counts; // row-major

  int64_t& at(int truth, int pred) {
    return counts[static_cast<size_t>(truth) * k + pred];
  }
  int64_t at(int truth, int pred) const {
    return counts[static_cast<size_t>(truth) * k + pred];
  }
  int64_t total() const;
  int64_t diagonal() const;
};

ConfusionMatrix confusion(const std::vector<int>& truth,
                          const std::vector<int>& predicted, int k);

struct ClassScores {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

struct MetricsReport {
  std::string model_name;
  std::string task;
  std::string split;
  std::string averaging = "macro";
  double accuracy = 0.0;
  double precision = 0.0; // macro mean over classes
  double recall = 0.0;
  double f1 = 0.0;
  std::vector<ClassScores> per_class;
  std::vector<std::string> class_names;
};

/// One-vs-rest scores per class with macro averaging; overall accuracy is
/// diagonal/total. Zero-denominator precision/recall (and the f1 built on
/// them) report 0 rather than NaN.
MetricsReport metrics(const ConfusionMatrix& cm);

/// Deterministic eval-mode inference over one split, argmax prediction,
/// metrics as above. The manifest may be task-filtered already; otherwise
/// it is filtered here. Normalization stats are applied when present.
template <typename T>
MetricsReport evaluate(ModelGraphT<T>& model, const DatasetManifest& manifest,
                       const TaskSpec& task, Split split, int batch_size = 32);

enum class TableFormat { csv, markdown };
TableFormat table_format_from_name(const std::string& name);

/// One row per model with columns
/// (Model, Test Accuracy, Test Precision, Test Recall, Test F1-Score),
/// 4-decimal fixed formatting. All reports must share a task.
std::string emit_table(const std::vector<MetricsReport>& reports,
                       TableFormat format);

/// Standalone SVG grouped bar chart: one group per model, four metric bars
/// each, y axis [0,1], labeled axes and legend. Byte-deterministic.
void emit_chart(const std::vector<MetricsReport>& reports,
                const std::filesystem::path& path);

} // namespace oshx
