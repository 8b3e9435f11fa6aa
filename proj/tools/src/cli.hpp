#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace oshx::cli {

/// Exit code contract: 0 success, 1 computational failure, 2 usage error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

struct SynthArgs {
  std::filesystem::path out;
  int per_class = 16;
  int side = 64;
  uint64_t seed = 0;
};
int run_synth(const SynthArgs& args);

struct TrainArgs {
  std::string arch = "cnn";
  std::filesystem::path data;
  std::string task = "four";
  std::string preset = "tiny";
  uint64_t seed = 0;
  std::filesystem::path out;
  std::vector<std::filesystem::path> init_from;
  double learning_rate = 1e-4;
  int batch_size = 32;
  int epochs = 0; // 0 = architecture preset (cnn 30, vit 20, hybrid 30)
  int patience = 5;
  double dropout_rate = 0.0;
  bool augment = false;
  std::string numeric_mode = "f32";
  bool hybrid_mlp_leaky = false;
  int workers = 0; // 0 = environment default
};
int run_train(const TrainArgs& args);

struct EvalArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  std::filesystem::path manifest; // optional: reuse a saved manifest
  std::filesystem::path chart;    // optional: write the SVG here
  std::string split = "test";
  std::string format = "markdown";
  uint64_t seed = 0;
  int workers = 0;
};
int run_eval(const EvalArgs& args);

struct PredictArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path image;
};
int run_predict(const PredictArgs& args);

struct GradcheckArgs {
  uint64_t seed = 20240901;
  int seeds_per_op = 10;
};
int run_gradcheck(const GradcheckArgs& args);

/// Applies values from a JSON config file to TrainArgs fields that were not
/// set explicitly on the command line (`given` holds the long option names
/// that were). Flags win over the file, the file wins over defaults.
void apply_config_file(TrainArgs& args, const std::filesystem::path& config,
                       const std::vector<std::string>& given);

} // namespace oshx::cli
