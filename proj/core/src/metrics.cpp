#include "oshx/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "oshx/ops.hpp"

namespace oshx {

namespace fs = std::filesystem;

const char* task_name(Task t) {
  switch (t) {
    case Task::binary: return "binary";
    case Task::three_class: return "three";
    case Task::four_class: return "four";
  }
  return "?";
}

Task task_from_name(const std::string& name) {
  if (name == "binary" || name == "two") return Task::binary;
  if (name == "three" || name == "three_class") return Task::three_class;
  if (name == "four" || name == "four_class") return Task::four_class;
  throw UsageError("unknown task '" + name + "' (expected binary|three|four)");
}

TaskSpec TaskSpec::make(Task t) {
  TaskSpec spec;
  spec.name = t;
  switch (t) {
    case Task::binary:
      spec.classes = {ClassLabel::VT, ClassLabel::NT};
      break;
    case Task::three_class:
      spec.classes = {ClassLabel::VT, ClassLabel::NVT, ClassLabel::NT};
      break;
    case Task::four_class:
      spec.classes = {ClassLabel::NT, ClassLabel::NVT, ClassLabel::VT,
                      ClassLabel::NVR};
      break;
  }
  return spec;
}

std::vector<std::string> TaskSpec::class_name_list() const {
  std::vector<std::string> names;
  names.reserve(classes.size());
  for (ClassLabel c : classes) names.emplace_back(class_name(c));
  return names;
}

int64_t ConfusionMatrix::total() const {
  int64_t acc = 0;
  for (int64_t c : counts) acc += c;
  return acc;
}

int64_t ConfusionMatrix::diagonal() const {
  int64_t acc = 0;
  for (int i = 0; i < k; ++i) acc += at(i, i);
  return acc;
}

ConfusionMatrix confusion(const std::vector<int>& truth,
                          const std::vector<int>& predicted, int k) {
  if (truth.size() != predicted.size())
    throw UsageError("confusion: " + std::to_string(truth.size()) +
                     " labels vs " + std::to_string(predicted.size()) +
                     " predictions");
  if (k < 1) throw UsageError("confusion: k must be >= 1");
  ConfusionMatrix cm;
  cm.k = k;
  cm.counts.assign(static_cast<size_t>(k) * k, 0);
  for (size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = predicted[i];
    if (t < 0 || t >= k || p < 0 || p >= k)
      throw UsageError("confusion: label pair (" + std::to_string(t) + "," +
                       std::to_string(p) + ") out of range [0," +
                       std::to_string(k) + ")");
    cm.at(t, p) += 1;
  }
  return cm;
}

MetricsReport metrics(const ConfusionMatrix& cm) {
  const int64_t total = cm.total();
  if (cm.k < 1 || total == 0)
    throw UsageError("metrics: empty confusion matrix");
  MetricsReport report;
  report.accuracy = static_cast<double>(cm.diagonal()) /
                    static_cast<double>(total);
  double psum = 0.0, rsum = 0.0, fsum = 0.0;
  for (int c = 0; c < cm.k; ++c) {
    ClassScores s;
    s.tp = cm.at(c, c);
    for (int j = 0; j < cm.k; ++j) {
      if (j == c) continue;
      s.fp += cm.at(j, c);
      s.fn += cm.at(c, j);
    }
    s.tn = total - s.tp - s.fp - s.fn;
    s.precision = (s.tp + s.fp) == 0
                      ? 0.0
                      : static_cast<double>(s.tp) /
                            static_cast<double>(s.tp + s.fp);
    s.recall = (s.tp + s.fn) == 0 ? 0.0
                                  : static_cast<double>(s.tp) /
                                        static_cast<double>(s.tp + s.fn);
    s.f1 = (s.precision + s.recall) == 0.0
               ? 0.0
               : 2.0 * s.precision * s.recall / (s.precision + s.recall);
    psum += s.precision;
    rsum += s.recall;
    fsum += s.f1;
    report.per_class.push_back(s);
  }
  report.precision = psum / cm.k;
  report.recall = rsum / cm.k;
  report.f1 = fsum / cm.k;
  return report;
}

template <typename T>
MetricsReport evaluate(ModelGraphT<T>& model, const DatasetManifest& manifest,
                       const TaskSpec& task, Split split, int batch_size) {
  if (model.num_classes() != task.k())
    throw ConfigError("evaluate: model has " +
                      std::to_string(model.num_classes()) +
                      " classes but task '" + task_name(task.name) +
                      "' has " + std::to_string(task.k()));
  const auto task_names = task.class_name_list();
  const DatasetManifest* view = &manifest;
  DatasetManifest filtered;
  if (manifest.class_names != task_names) {
    filtered = filter_for_task(manifest, task.classes);
    view = &filtered;
  }
  BatchOptions opts;
  opts.side = model.input_side();
  opts.batch_size = batch_size;
  opts.shuffle = false;
  opts.augment = false;
  opts.seed = view->seed;
  opts.normalize = view->normalization.has_value();
  BatchLoader loader(*view, split, opts);
  loader.begin_epoch(0);
  std::vector<int> truth, pred;
  Batch batch;
  while (loader.next(batch)) {
    TensorT<T> pixels;
    if constexpr (std::is_same_v<T, float>) {
      pixels = batch.pixels;
    } else {
      pixels = cast<T>(batch.pixels);
    }
    TensorT<T> logits = model.forward(pixels, false);
    const auto batch_pred = argmax_rows(logits);
    truth.insert(truth.end(), batch.labels.begin(), batch.labels.end());
    pred.insert(pred.end(), batch_pred.begin(), batch_pred.end());
  }
  if (truth.empty())
    throw UsageError(std::string("evaluate: split '") + split_name(split) +
                     "' has no samples for this task");
  MetricsReport report = metrics(confusion(truth, pred, task.k()));
  report.model_name = arch_name(model.spec().name);
  report.task = task_name(task.name);
  report.split = split_name(split);
  report.class_names = task_names;
  return report;
}

TableFormat table_format_from_name(const std::string& name) {
  if (name == "csv") return TableFormat::csv;
  if (name == "markdown" || name == "md") return TableFormat::markdown;
  throw UsageError("unknown table format '" + name +
                   "' (expected csv|markdown)");
}

namespace {

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

constexpr std::array<const char*, 5> kTableColumns{
    "Model", "Test Accuracy", "Test Precision", "Test Recall",
    "Test F1-Score"};

} // namespace

std::string emit_table(const std::vector<MetricsReport>& reports,
                       TableFormat format) {
  for (size_t i = 1; i < reports.size(); ++i)
    if (reports[i].task != reports[0].task)
      throw UsageError("emit_table: reports mix tasks '" + reports[0].task +
                       "' and '" + reports[i].task + "'");
  std::ostringstream os;
  if (format == TableFormat::csv) {
    for (size_t c = 0; c < kTableColumns.size(); ++c)
      os << (c ? "," : "") << kTableColumns[c];
    os << "\n";
    for (const auto& r : reports) {
      os << r.model_name << "," << fixed4(r.accuracy) << ","
         << fixed4(r.precision) << "," << fixed4(r.recall) << ","
         << fixed4(r.f1) << "\n";
    }
  } else {
    os << "|";
    for (const char* c : kTableColumns) os << " " << c << " |";
    os << "\n|";
    for (size_t c = 0; c < kTableColumns.size(); ++c) os << "---|";
    os << "\n";
    for (const auto& r : reports) {
      os << "| " << r.model_name << " | " << fixed4(r.accuracy) << " | "
         << fixed4(r.precision) << " | " << fixed4(r.recall) << " | "
         << fixed4(r.f1) << " |\n";
    }
  }
  return os.str();
}

void emit_chart(const std::vector<MetricsReport>& reports,
                const fs::path& path) {
  if (reports.empty()) throw UsageError("emit_chart: no reports");
  for (size_t i = 1; i < reports.size(); ++i)
    if (reports[i].task != reports[0].task)
      throw UsageError("emit_chart: reports mix tasks");

  constexpr std::array<const char*, 4> metric_names{"Accuracy", "Precision",
                                                    "Recall", "F1-Score"};
  constexpr std::array<const char*, 4> metric_colors{"#4e79a7", "#f28e2b",
                                                     "#59a14f", "#e15759"};
  const int n_models = static_cast<int>(reports.size());
  const double bar_w = 22.0, bar_gap = 4.0, group_gap = 30.0;
  const double plot_x = 60.0, plot_y = 20.0, plot_h = 300.0;
  const double group_w = 4 * bar_w + 3 * bar_gap;
  const double plot_w = n_models * (group_w + group_gap) + group_gap;
  const double width = plot_x + plot_w + 150.0;
  const double height = plot_y + plot_h + 60.0;

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
     << "\" height=\"" << height << "\" font-family=\"sans-serif\">\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height
     << "\" fill=\"white\"/>\n";
  // Axes and horizontal gridlines at 0.0 .. 1.0.
  for (int g = 0; g <= 5; ++g) {
    const double v = g / 5.0;
    const double y = plot_y + plot_h * (1.0 - v);
    os << "<line x1=\"" << plot_x << "\" y1=\"" << y << "\" x2=\""
       << plot_x + plot_w << "\" y2=\"" << y
       << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    os << "<text x=\"" << plot_x - 8 << "\" y=\"" << y + 4
       << "\" font-size=\"12\" text-anchor=\"end\">" << fixed4(v).substr(0, 3)
       << "</text>\n";
  }
  os << "<line x1=\"" << plot_x << "\" y1=\"" << plot_y << "\" x2=\"" << plot_x
     << "\" y2=\"" << plot_y + plot_h
     << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  os << "<line x1=\"" << plot_x << "\" y1=\"" << plot_y + plot_h << "\" x2=\""
     << plot_x + plot_w << "\" y2=\"" << plot_y + plot_h
     << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  os << "<text x=\"14\" y=\"" << plot_y + plot_h / 2
     << "\" font-size=\"12\" transform=\"rotate(-90 14 "
     << plot_y + plot_h / 2 << ")\" text-anchor=\"middle\">Score</text>\n";

  for (int m = 0; m < n_models; ++m) {
    const auto& r = reports[static_cast<size_t>(m)];
    const double gx = plot_x + group_gap + m * (group_w + group_gap);
    const std::array<double, 4> values{r.accuracy, r.precision, r.recall,
                                       r.f1};
    for (int j = 0; j < 4; ++j) {
      const double v = std::clamp(values[static_cast<size_t>(j)], 0.0, 1.0);
      const double h = plot_h * v;
      const double x = gx + j * (bar_w + bar_gap);
      const double y = plot_y + plot_h - h;
      os << "<rect class=\"bar\" x=\"" << x << "\" y=\"" << y << "\" width=\""
         << bar_w << "\" height=\"" << h << "\" fill=\""
         << metric_colors[static_cast<size_t>(j)] << "\"/>\n";
    }
    os << "<text x=\"" << gx + group_w / 2 << "\" y=\""
       << plot_y + plot_h + 18 << "\" font-size=\"12\" text-anchor=\"middle\">"
       << r.model_name << "</text>\n";
  }

  // Legend.
  const double lx = plot_x + plot_w + 16.0;
  for (int j = 0; j < 4; ++j) {
    const double ly = plot_y + 16.0 + j * 22.0;
    os << "<rect x=\"" << lx << "\" y=\"" << ly - 10
       << "\" width=\"14\" height=\"14\" fill=\""
       << metric_colors[static_cast<size_t>(j)] << "\"/>\n";
    os << "<text x=\"" << lx + 20 << "\" y=\"" << ly + 2
       << "\" font-size=\"12\">" << metric_names[static_cast<size_t>(j)]
       << "</text>\n";
  }
  os << "</svg>\n";
  const std::string text = os.str();
  write_file_atomic(path, std::vector<uint8_t>(text.begin(), text.end()));
}

template MetricsReport evaluate<float>(ModelGraphT<float>&,
                                       const DatasetManifest&, const TaskSpec&,
                                       Split, int);
template MetricsReport evaluate<double>(ModelGraphT<double>&,
                                        const DatasetManifest&,
                                        const TaskSpec&, Split, int);

} // namespace oshx
