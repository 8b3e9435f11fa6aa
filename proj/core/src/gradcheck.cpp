#include "oshx/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "oshx/ops.hpp"
#include "oshx/rng.hpp"

namespace oshx {
namespace {

TensorD rand_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) v = rng.uniform(lo, hi);
  return TensorD::from_data(std::move(shape), std::move(data), true);
}

/// Magnitudes in [0.2, 1.0] with random sign. Keeps relu/leaky_relu inputs
/// away from the kink at 0, where finite differences are meaningless.
TensorD rand_tensor_off_zero(Rng& rng, Shape shape) {
  std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) {
    const double mag = rng.uniform(0.2, 1.0);
    v = rng.bernoulli(0.5) ? mag : -mag;
  }
  return TensorD::from_data(std::move(shape), std::move(data), true);
}

/// A shuffled grid of well-separated values in [-1,1]. Keeps maxpool window
/// maxima unique by margins far larger than the difference step, where a
/// near-tie would make the max nondifferentiable.
TensorD rand_tensor_distinct(Rng& rng, Shape shape) {
  const auto n = static_cast<size_t>(shape_numel(shape));
  std::vector<double> data(n);
  for (size_t i = 0; i < n; ++i)
    data[i] = -1.0 + 2.0 * (static_cast<double>(i) + 0.5) /
                         static_cast<double>(n);
  rng.shuffle(data);
  return TensorD::from_data(std::move(shape), std::move(data), true);
}

double objective(const ForwardFn& f, const std::vector<TensorD>& inputs,
                 const std::vector<double>& probe) {
  const TensorD out = f(inputs);
  double acc = 0.0;
  for (size_t i = 0; i < probe.size(); ++i)
    acc += static_cast<double>(out.values()[i]) * probe[i];
  return acc;
}

} // namespace

double finite_diff_max_rel_err(const ForwardFn& f, std::vector<TensorD> inputs,
                               uint64_t probe_seed, double h) {
  for (auto& t : inputs) t.set_requires_grad(true);

  TensorD out = f(inputs);
  Rng probe_rng(Rng::mix(probe_seed, 0x9e37));
  std::vector<double> probe(static_cast<size_t>(out.numel()));
  for (auto& p : probe) p = probe_rng.uniform(-1.0, 1.0);

  // Analytic side.
  TensorD probe_t = TensorD::from_data(out.shape(), probe);
  TensorD loss = sum(mul(out, probe_t));
  loss.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs)
    analytic.push_back(t.has_grad() ? t.grad()
                                    : std::vector<double>(t.values().size(), 0.0));

  // Numeric side: plain re-evaluation, no backward involved.
  double worst = 0.0;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& vals = inputs[ti].raw();
    for (size_t j = 0; j < vals.size(); ++j) {
      const double keep = vals[j];
      vals[j] = keep + h;
      const double lp = objective(f, inputs, probe);
      vals[j] = keep - h;
      const double lm = objective(f, inputs, probe);
      vals[j] = keep;
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = analytic[ti][j];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

std::vector<OpCheck> standard_op_checks() {
  std::vector<OpCheck> checks;
  auto add_check = [&](std::string name,
                       std::function<double(uint64_t, double)> run) {
    checks.push_back({std::move(name), std::move(run)});
  };

  add_check("conv2d", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {2, 5, 5});
    auto w = rand_tensor(rng, {3, 2, 3, 3});
    auto b = rand_tensor(rng, {3});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) {
          return conv2d(in[0], in[1], in[2], 1, 1);
        },
        {x, w, b}, seed, h);
  });
  add_check("conv2d_strided", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {2, 3, 6, 6});
    auto w = rand_tensor(rng, {4, 3, 3, 3});
    auto b = rand_tensor(rng, {4});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) {
          return conv2d(in[0], in[1], in[2], 2, 0);
        },
        {x, w, b}, seed, h);
  });
  add_check("maxpool2d", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto x = rand_tensor_distinct(rng, {1, 6, 6});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) { return maxpool2d(in[0], 2, 2); },
        {x}, seed, h);
  });
  add_check("maxpool2d_padded", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto x = rand_tensor_distinct(rng, {2, 2, 5, 5});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) {
          return maxpool2d(in[0], 3, 2, 1);
        },
        {x}, seed, h);
  });
  add_check("linear", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {2, 4});
    auto w = rand_tensor(rng, {3, 4});
    auto b = rand_tensor(rng, {3});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) {
          return linear(in[0], in[1], in[2]);
        },
        {x, w, b}, seed, h);
  });
  add_check("matmul", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto a = rand_tensor(rng, {2, 3, 4});
    auto b = rand_tensor(rng, {2, 4, 2});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) { return matmul(in[0], in[1]); },
        {a, b}, seed, h);
  });
  add_check("multi_head_attention", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto tokens = rand_tensor(rng, {3, 4});
    auto qkv_w = rand_tensor(rng, {12, 4});
    auto qkv_b = rand_tensor(rng, {12});
    auto proj_w = rand_tensor(rng, {4, 4});
    auto proj_b = rand_tensor(rng, {4});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) {
          return multi_head_attention(in[0], 2, in[1], in[2], in[3], in[4]);
        },
        {tokens, qkv_w, qkv_b, proj_w, proj_b}, seed, h);
  });
  add_check("layer_norm", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {3, 5});
    auto g = rand_tensor(rng, {5}, 0.5, 1.5);
    auto b = rand_tensor(rng, {5});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) {
          return layer_norm(in[0], in[1], in[2], 1e-5);
        },
        {x, g, b}, seed, h);
  });
  add_check("softmax", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {2, 4});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) { return softmax(in[0]); }, {x},
        seed, h);
  });
  add_check("softmax_axis0", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {3, 4});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) { return softmax(in[0], 0); }, {x},
        seed, h);
  });
  add_check("gelu", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {2, 5}, -2.0, 2.0);
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) { return gelu(in[0]); }, {x}, seed,
        h);
  });
  add_check("relu", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto x = rand_tensor_off_zero(rng, {2, 5});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) { return relu(in[0]); }, {x}, seed,
        h);
  });
  add_check("leaky_relu", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto x = rand_tensor_off_zero(rng, {2, 5});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) { return leaky_relu(in[0], 0.25); },
        {x}, seed, h);
  });
  add_check("global_avg_pool", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {2, 3, 4, 4});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) { return global_avg_pool(in[0]); },
        {x}, seed, h);
  });
  add_check("add_broadcast", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto a = rand_tensor(rng, {2, 3});
    auto b = rand_tensor(rng, {3});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) { return add(in[0], in[1]); },
        {a, b}, seed, h);
  });
  add_check("mul", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto a = rand_tensor(rng, {2, 3});
    auto b = rand_tensor(rng, {2, 3});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) { return mul(in[0], in[1]); },
        {a, b}, seed, h);
  });
  add_check("scale_mean", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {7});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) { return scale(mean(in[0]), 3.5); },
        {x}, seed, h);
  });
  add_check("reshape_flatten", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {2, 3, 4});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) {
          return flatten(reshape(in[0], {3, 2, 4}), 1);
        },
        {x}, seed, h);
  });
  add_check("permute", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {2, 3, 4});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) {
          return permute(in[0], {2, 0, 1});
        },
        {x}, seed, h);
  });
  add_check("slice_concat", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto a = rand_tensor(rng, {2, 3});
    auto b = rand_tensor(rng, {2, 2});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) {
          return slice(concat(in[0], in[1], 1), 1, 1, 3);
        },
        {a, b}, seed, h);
  });
  add_check("repeat_leading", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {2, 3});
    return finite_diff_max_rel_err(
        [](const std::vector<TensorD>& in) { return repeat_leading(in[0], 3); },
        {x}, seed, h);
  });
  add_check("dropout", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {3, 4});
    // A fresh generator per evaluation pins the mask, so the perturbed
    // forwards see the same dropout pattern as the recorded one.
    const uint64_t mask_seed = Rng::mix(seed, 77);
    return finite_diff_max_rel_err(
        [mask_seed](const std::vector<TensorD>& in) {
          Rng mask_rng(mask_seed);
          return dropout(in[0], 0.3, mask_rng, true);
        },
        {x}, seed, h);
  });
  add_check("weighted_cross_entropy", [](uint64_t seed, double h) {
    Rng rng(seed);
    auto logits = rand_tensor(rng, {3, 4}, -2.0, 2.0);
    std::vector<int> labels(3);
    for (auto& y : labels) y = static_cast<int>(rng.below(4));
    const std::vector<double> weights{0.5, 1.0, 1.0, 2.0};
    return finite_diff_max_rel_err(
        [labels, weights](const std::vector<TensorD>& in) {
          return weighted_cross_entropy(in[0], labels, weights);
        },
        {logits}, seed, h);
  });
  return checks;
}

GradCheckReport run_gradcheck(const std::vector<OpCheck>& checks,
                              const GradCheckOptions& opts) {
  GradCheckReport report;
  report.all_pass = true;
  for (const auto& check : checks) {
    OpCheckResult r;
    r.name = check.name;
    for (int s = 0; s < opts.seeds_per_op; ++s) {
      const uint64_t seed = Rng::mix(opts.base_seed, static_cast<uint64_t>(s));
      r.max_rel_err = std::max(r.max_rel_err, check.run(seed, opts.h));
    }
    r.pass = r.max_rel_err < opts.tolerance;
    report.all_pass = report.all_pass && r.pass;
    report.results.push_back(std::move(r));
  }
  return report;
}

} // namespace oshx
