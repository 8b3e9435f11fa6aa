#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cli.hpp"
#include "oshx/errors.hpp"

namespace {

using namespace oshx;
using namespace oshx::cli;

std::vector<std::string> given_options(const CLI::App* sub) {
  std::vector<std::string> names;
  for (const CLI::Option* opt : sub->get_options()) {
    if (opt->count() > 0 && !opt->get_lnames().empty())
      names.push_back("--" + opt->get_lnames()[0]);
  }
  return names;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"osteosarcoma H&E histopathology classifiers: data synthesis, "
               "training, evaluation, prediction and gradient self-checks"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--out", synth_args.out, "output directory")->required();
  synth->add_option("--per-class", synth_args.per_class, "images per class")
      ->check(CLI::PositiveNumber);
  synth->add_option("--side", synth_args.side, "image side in pixels");
  synth->add_option("--seed", synth_args.seed, "generator seed");

  TrainArgs train_args;
  std::string train_config;
  auto* train = app.add_subcommand("train", "train a classifier");
  train->add_option("--arch", train_args.arch, "cnn|vit|resnet50|hybrid")
      ->required();
  train->add_option("--data", train_args.data, "dataset root directory")
      ->required();
  train->add_option("--task", train_args.task, "binary|three|four");
  train->add_option("--preset", train_args.preset, "paper|tiny");
  train->add_option("--seed", train_args.seed, "run seed");
  train->add_option("--out", train_args.out, "run directory")->required();
  train->add_option("--config", train_config,
                    "JSON config file (flags override it)");
  train->add_option("--init-from", train_args.init_from,
                    "checkpoint(s) to start from; hybrid takes two");
  train->add_option("--lr", train_args.learning_rate, "learning rate");
  train->add_option("--batch-size", train_args.batch_size, "batch size");
  train->add_option("--epochs", train_args.epochs,
                    "max epochs (0 = architecture preset)");
  train->add_option("--patience", train_args.patience,
                    "early-stopping patience");
  train->add_option("--dropout", train_args.dropout_rate, "dropout rate");
  train->add_flag("--augment", train_args.augment,
                  "enable flip augmentation on the train split");
  train->add_option("--numeric-mode", train_args.numeric_mode, "f32|f64");
  train->add_flag("--mlp-leaky-relu", train_args.hybrid_mlp_leaky,
                  "use LeakyReLU(0.25) in the fusion MLP instead of ReLU");
  train->add_option("--workers", train_args.workers,
                    "worker threads (default: OSHX_WORKERS or hardware)");

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", eval_args.checkpoint, "OSHX checkpoint")
      ->required();
  eval->add_option("--data", eval_args.data, "dataset root directory");
  eval->add_option("--manifest", eval_args.manifest,
                   "saved manifest JSON (reuses its exact split)");
  eval->add_option("--split", eval_args.split, "val|test");
  eval->add_option("--format", eval_args.format, "csv|markdown");
  eval->add_option("--chart", eval_args.chart, "write an SVG bar chart here");
  eval->add_option("--seed", eval_args.seed,
                   "split seed when rebuilding the manifest from --data");
  eval->add_option("--workers", eval_args.workers, "worker threads");

  PredictArgs predict_args;
  auto* predict = app.add_subcommand("predict", "classify one image");
  predict->add_option("--checkpoint", predict_args.checkpoint, "OSHX checkpoint")
      ->required();
  predict->add_option("--image", predict_args.image, "image file")->required();

  GradcheckArgs grad_args;
  auto* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference check of every differentiable op");
  gradcheck->add_option("--seed", grad_args.seed, "base seed");
  gradcheck->add_option("--seeds-per-op", grad_args.seeds_per_op,
                        "random seeds per op");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return run_synth(synth_args);
    if (train->parsed()) {
      if (!train_config.empty())
        apply_config_file(train_args, train_config, given_options(train));
      if (eval_args.data.empty() && train_args.data.empty())
        throw UsageError("--data is required");
      return run_train(train_args);
    }
    if (eval->parsed()) {
      if (eval_args.data.empty() && eval_args.manifest.empty())
        throw UsageError("eval needs --data or --manifest");
      return run_eval(eval_args);
    }
    if (predict->parsed()) return run_predict(predict_args);
    if (gradcheck->parsed()) return run_gradcheck(grad_args);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DivergedError& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
