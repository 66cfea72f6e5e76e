#pragma once

#include <cstdint>
#include <functional>

#include <json.hpp>

#include "hypo/autodiff.hpp"
#include "hypo/params.hpp"

namespace hypo {

// Optimization and regularization settings shared by both models.
struct TrainConfig {
  // Learning-rate schedule: linear warm-up, constant, then exponential decay
  // by `decay_rate` every `decay_steps` (defaults to constant_steps).
  std::int64_t warmup_steps = 200;
  std::int64_t constant_steps = 2000;
  std::int64_t decay_steps = 0;
  double peak_lr = 2e-3;
  double decay_rate = 0.5;

  double label_smoothing_uncertainty = 0.1;
  double dropout_rate = 0.2;
  double l2_weight = 1e-5;
  double clip_factor = 2.0;

  // Adam constants.
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  // Loop control.
  int batch_size = 32;
  std::int64_t max_steps = 4000;
  int max_epochs = 0;  // 0: bounded by max_steps only
  std::int64_t eval_interval = 500;
  int patience = 3;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Learning rate for the update that takes the store from `step` to step+1.
double learning_rate(const TrainConfig& cfg, std::int64_t step);

// One Adam update of every entry; throws NumericError naming the first
// parameter with a non-finite gradient before touching any value.
void adam_step(ParameterStore& store, const TrainConfig& cfg);

// Scales all gradients when the global norm exceeds clip_factor times its
// moving average (decay 0.99). Returns true when clipping happened.
bool clip_gradients(ParameterStore& store, const TrainConfig& cfg);

// Max relative error |a - n| / max(|a|, |n|, 1e-8) between reverse-mode
// and central-difference gradients over every scalar in the store.
// `forward` must build a scalar loss deterministically. The five-point
// stencil allows a larger eps, which keeps round-off in the difference
// small next to gradients of order 1e-8.
using LossClosure = std::function<Var(Tape&, ParameterStore&)>;
enum class Stencil { kCentral2, kCentral4 };
struct GradCheckWorst {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};
double grad_check(const LossClosure& forward, ParameterStore& store, double eps = 1e-5,
                  GradCheckWorst* worst_out = nullptr, Stencil stencil = Stencil::kCentral2);

}  // namespace hypo
