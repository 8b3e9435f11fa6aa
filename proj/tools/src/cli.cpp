#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "oshx/checkpoint.hpp"
#include "oshx/dataset.hpp"
#include "oshx/gradcheck.hpp"
#include "oshx/metrics.hpp"
#include "oshx/model.hpp"
#include "oshx/ops.hpp"
#include "oshx/parallel.hpp"
#include "oshx/train.hpp"

namespace oshx::cli {

namespace fs = std::filesystem;
using nlohmann::json;

int run_synth(const SynthArgs& args) {
  synth_generate(args.out, args.per_class, args.side, args.seed);
  std::cout << "wrote " << args.per_class * 4 << " images ("
            << args.per_class << " per class, side " << args.side << ") to "
            << args.out.string() << "\n";
  return kExitOk;
}

void apply_config_file(TrainArgs& args, const fs::path& config,
                       const std::vector<std::string>& given) {
  const auto bytes = read_file_bytes(config);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw FormatError("config file " + config.string() + " is not valid JSON: " +
                      e.what());
  }
  auto not_given = [&given](const char* flag) {
    return std::find(given.begin(), given.end(), flag) == given.end();
  };
  auto take = [&](const char* flag, const char* key, auto& field) {
    if (j.contains(key) && not_given(flag)) {
      try {
        field = j.at(key).get<std::decay_t<decltype(field)>>();
      } catch (const json::exception& e) {
        throw FormatError("config key '" + std::string(key) + "': " + e.what());
      }
    }
  };
  std::string data_str, out_str;
  take("--arch", "arch", args.arch);
  take("--task", "task", args.task);
  take("--preset", "preset", args.preset);
  take("--seed", "seed", args.seed);
  take("--data", "data", data_str);
  take("--out", "out", out_str);
  take("--lr", "learning_rate", args.learning_rate);
  take("--batch-size", "batch_size", args.batch_size);
  take("--epochs", "epochs", args.epochs);
  take("--patience", "patience", args.patience);
  take("--dropout", "dropout_rate", args.dropout_rate);
  take("--augment", "augment", args.augment);
  take("--numeric-mode", "numeric_mode", args.numeric_mode);
  take("--mlp-leaky-relu", "hybrid_mlp_leaky", args.hybrid_mlp_leaky);
  take("--workers", "workers", args.workers);
  if (!data_str.empty()) args.data = data_str;
  if (!out_str.empty()) args.out = out_str;
}

namespace {

json resolved_config_json(const TrainArgs& args, const TrainConfig& cfg,
                          const ArchSpec& spec) {
  return json{{"arch", args.arch},
              {"task", args.task},
              {"preset", args.preset},
              {"seed", args.seed},
              {"data", args.data.string()},
              {"out", args.out.string()},
              {"learning_rate", cfg.learning_rate},
              {"beta1", cfg.beta1},
              {"beta2", cfg.beta2},
              {"epsilon", cfg.epsilon},
              {"batch_size", cfg.batch_size},
              {"epochs", cfg.epochs},
              {"patience", cfg.early_stop_patience},
              {"dropout_rate", spec.dropout_rate},
              {"augment", cfg.augment},
              {"numeric_mode", numeric_mode_name(cfg.numeric_mode)},
              {"hybrid_mlp_leaky", spec.hybrid_mlp_leaky},
              {"class_weights", cfg.class_weights},
              {"workers", worker_count()}};
}

void write_text(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::vector<uint8_t>(text.begin(), text.end()));
}

template <typename T>
std::unique_ptr<ModelGraphT<T>> load_branch(const fs::path& path, Arch expect,
                                            ScalePreset scale,
                                            int num_classes) {
  auto loaded = load_checkpoint<T>(path, num_classes);
  const ArchSpec& spec = loaded.model->spec();
  if (spec.name != expect)
    throw ConfigError("checkpoint " + path.string() + " holds a " +
                      arch_name(spec.name) + " model, expected " +
                      arch_name(expect));
  if (spec.scale != scale)
    throw ConfigError("checkpoint " + path.string() + " is " +
                      scale_name(spec.scale) + "-scale, expected " +
                      scale_name(scale));
  return std::move(loaded.model);
}

template <typename T>
int run_train_typed(const TrainArgs& args) {
  const Arch arch = arch_from_name(args.arch);
  const ScalePreset scale = scale_from_name(args.preset);
  const TaskSpec task = TaskSpec::make(task_from_name(args.task));
  if (args.workers > 0) set_worker_count(args.workers);

  fs::create_directories(args.out);

  DatasetManifest manifest = load_manifest(args.data, args.seed);
  manifest = split_stratified(manifest, {0.60, 0.15, 0.25}, args.seed);
  DatasetManifest filtered = filter_for_task(manifest, task.classes);

  ArchSpec spec = ArchSpec::preset(arch, scale, task.k());
  spec.dropout_rate = args.dropout_rate;
  spec.hybrid_mlp_leaky = args.hybrid_mlp_leaky;

  std::cout << "computing normalization stats on the train split...\n";
  const NormalizationStats stats =
      compute_normalization(filtered, spec.input_side);
  filtered.normalization = stats;

  std::vector<int> all_classes(static_cast<size_t>(task.k()));
  for (int i = 0; i < task.k(); ++i) all_classes[static_cast<size_t>(i)] = i;
  TrainConfig cfg;
  cfg.learning_rate = args.learning_rate;
  cfg.batch_size = args.batch_size;
  cfg.epochs = args.epochs > 0 ? args.epochs : TrainConfig::default_epochs(arch);
  cfg.early_stop_patience = args.patience;
  cfg.seed = args.seed;
  cfg.class_weights = compute_class_weights(filtered, all_classes);
  cfg.numeric_mode =
      std::is_same_v<T, double> ? NumericMode::f64 : NumericMode::f32;
  cfg.augment = args.augment;

  write_text(args.out / "config.json",
             resolved_config_json(args, cfg, spec).dump(2) + "\n");
  save_manifest(filtered, args.out / "manifest.json");

  std::unique_ptr<ModelGraphT<T>> model;
  if (arch == Arch::hybrid) {
    std::unique_ptr<ModelGraphT<T>> cnn_branch, vit_branch;
    if (!args.init_from.empty()) {
      if (args.init_from.size() != 2)
        throw UsageError("hybrid training expects exactly two --init-from "
                         "checkpoints (the cnn and vit branches)");
      for (const auto& p : args.init_from) {
        auto loaded = load_checkpoint<T>(p, task.k());
        const ArchSpec& bspec = loaded.model->spec();
        if (bspec.scale != scale)
          throw ConfigError("checkpoint " + p.string() + " is " +
                            scale_name(bspec.scale) + "-scale, expected " +
                            scale_name(scale));
        if (bspec.name == Arch::cnn && !cnn_branch)
          cnn_branch = std::move(loaded.model);
        else if (bspec.name == Arch::vit && !vit_branch)
          vit_branch = std::move(loaded.model);
        else
          throw ConfigError("checkpoint " + p.string() +
                            " does not supply a missing branch (holds " +
                            std::string(arch_name(bspec.name)) + ")");
      }
      if (!cnn_branch || !vit_branch)
        throw ConfigError("hybrid --init-from needs one cnn and one vit "
                          "checkpoint");
    } else {
      // Two-stage recipe: train each branch as its own classifier first.
      for (const Arch branch : {Arch::cnn, Arch::vit}) {
        ArchSpec bspec = ArchSpec::preset(branch, scale, task.k());
        if (branch == Arch::vit) bspec.dropout_rate = args.dropout_rate;
        TrainConfig bcfg = cfg;
        bcfg.epochs =
            args.epochs > 0 ? args.epochs : TrainConfig::default_epochs(branch);
        auto bmodel = build_model<T>(
            bspec, Rng::mix(args.seed, branch == Arch::cnn ? 101 : 102));
        std::cout << "training " << arch_name(branch) << " branch ("
                  << bcfg.epochs << " epochs max)...\n";
        const fs::path log_path =
            args.out / (std::string(arch_name(branch)) + "_branch_epochs.csv");
        fs::remove(log_path);
        train<T>(*bmodel, filtered, bcfg, [&](const EpochRecord& r) {
          epoch_log({r}, log_path);
        });
        save_checkpoint<T>(*bmodel, task.class_name_list(),
                           args.out /
                               (std::string(arch_name(branch)) + "_branch.oshx"),
                           &stats);
        if (branch == Arch::cnn)
          cnn_branch = std::move(bmodel);
        else
          vit_branch = std::move(bmodel);
      }
    }
    model = build_hybrid<T>(std::move(cnn_branch), std::move(vit_branch), spec,
                            Rng::mix(args.seed, 103));
  } else {
    if (!args.init_from.empty()) {
      if (args.init_from.size() != 1)
        throw UsageError("--init-from takes a single checkpoint for " +
                         args.arch);
      model = load_branch<T>(args.init_from[0], arch, scale, task.k());
    } else {
      model = build_model<T>(spec, args.seed);
    }
  }

  std::cout << "training " << args.arch << " (" << cfg.epochs
            << " epochs max, batch " << cfg.batch_size << ", lr "
            << cfg.learning_rate << ")...\n";
  const fs::path log_path = args.out / "epochs.csv";
  fs::remove(log_path);
  const TrainResult result =
      train<T>(*model, filtered, cfg, [&](const EpochRecord& r) {
        epoch_log({r}, log_path);
        std::printf("epoch %3d  train_loss %.6f  val_loss %.6f  val_acc %.4f"
                    "  (%.2fs)\n",
                    r.epoch, r.train_loss, r.val_loss, r.val_accuracy,
                    r.seconds);
        std::fflush(stdout);
      });

  save_checkpoint<T>(*model, task.class_name_list(), args.out / "model.oshx",
                     &stats);
  MetricsReport report = evaluate<T>(*model, filtered, task, Split::val,
                                     cfg.batch_size);
  write_text(args.out / "report_val.csv",
             emit_table({report}, TableFormat::csv));
  write_text(args.out / "report_val.md",
             emit_table({report}, TableFormat::markdown));

  std::cout << "best epoch " << result.best_epoch << " (val loss "
            << result.best_val_loss << ")\n";
  std::cout << "validation metrics (macro averaging):\n"
            << emit_table({report}, TableFormat::markdown);
  std::cout << "run directory: " << args.out.string() << "\n";
  return kExitOk;
}

} // namespace

int run_train(const TrainArgs& args) {
  if (numeric_mode_from_name(args.numeric_mode) == NumericMode::f64)
    return run_train_typed<double>(args);
  return run_train_typed<float>(args);
}

int run_eval(const EvalArgs& args) {
  if (args.workers > 0) set_worker_count(args.workers);
  auto loaded = load_checkpoint<float>(args.checkpoint);
  ModelGraphT<float>& model = *loaded.model;

  // The stored class names identify the task.
  TaskSpec task;
  bool matched = false;
  for (Task t : {Task::binary, Task::three_class, Task::four_class}) {
    TaskSpec candidate = TaskSpec::make(t);
    if (candidate.class_name_list() == loaded.class_names) {
      task = candidate;
      matched = true;
      break;
    }
  }
  if (!matched)
    throw ConfigError("checkpoint " + args.checkpoint.string() +
                      " does not carry a recognized task class list");
  if (model.num_classes() != task.k())
    throw ConfigError("checkpoint num_classes does not match its class list");

  DatasetManifest manifest;
  if (!args.manifest.empty()) {
    manifest = load_manifest_file(args.manifest);
  } else {
    manifest = load_manifest(args.data, args.seed);
    manifest = split_stratified(manifest, {0.60, 0.15, 0.25}, args.seed);
  }
  DatasetManifest filtered = filter_for_task(manifest, task.classes);
  if (loaded.normalization) {
    filtered.normalization = loaded.normalization; // train-time stats
  } else if (!filtered.normalization) {
    filtered.normalization = compute_normalization(filtered, model.input_side());
  }

  const Split split = split_from_name(args.split);
  MetricsReport report = evaluate<float>(model, filtered, task, split);
  std::cout << emit_table({report}, table_format_from_name(args.format));
  if (!args.chart.empty()) {
    emit_chart({report}, args.chart);
    std::cout << "chart written to " << args.chart.string() << "\n";
  }
  return kExitOk;
}

int run_predict(const PredictArgs& args) {
  auto loaded = load_checkpoint<float>(args.checkpoint);
  ModelGraphT<float>& model = *loaded.model;
  Sample sample;
  sample.id = args.image.string();
  sample.path = args.image;
  Tensor pixels = decode_and_resize(sample, model.input_side());
  if (loaded.normalization)
    pixels = apply_normalization(pixels, *loaded.normalization);
  const int s = model.input_side();
  Tensor batch = reshape(pixels, {1, 3, s, s});
  Tensor probs = softmax(model.forward(batch, false));
  std::vector<std::pair<double, int>> ranked;
  for (int c = 0; c < model.num_classes(); ++c)
    ranked.emplace_back(probs.values()[static_cast<size_t>(c)], c);
  std::sort(ranked.begin(), ranked.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  for (const auto& [p, c] : ranked) {
    const std::string name =
        c < static_cast<int>(loaded.class_names.size())
            ? loaded.class_names[static_cast<size_t>(c)]
            : "class" + std::to_string(c);
    std::printf("%-4s %.6f\n", name.c_str(), p);
  }
  return kExitOk;
}

int run_gradcheck(const GradcheckArgs& args) {
  GradCheckOptions opts;
  opts.base_seed = args.seed;
  opts.seeds_per_op = args.seeds_per_op;
  const auto checks = standard_op_checks();
  const GradCheckReport report = run_gradcheck(checks, opts);
  for (const auto& r : report.results)
    std::printf("%-24s max_rel_err %.3e  %s\n", r.name.c_str(), r.max_rel_err,
                r.pass ? "PASS" : "FAIL");
  if (!report.all_pass) {
    std::cout << "gradient check FAILED for:";
    for (const auto& r : report.results)
      if (!r.pass) std::cout << " " << r.name;
    std::cout << "\n";
    return kExitFailure;
  }
  std::cout << "all " << report.results.size()
            << " ops pass (tolerance " << opts.tolerance << ", "
            << opts.seeds_per_op << " seeds per op, h=" << opts.h << ")\n";
  return kExitOk;
}

} // namespace oshx::cli
