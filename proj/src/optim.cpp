#include "hypo/optim.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "hypo/error.hpp"

namespace hypo {

void TrainConfig::validate() const {
  if (warmup_steps < 0 || constant_steps < 0 || decay_steps < 0) throw ConfigError("schedule phases must be >= 0");
  if (!(peak_lr > 0.0)) throw ConfigError("peak_lr must be positive");
  if (!(decay_rate > 0.0 && decay_rate <= 1.0)) throw ConfigError("decay_rate must be in (0, 1]");
  if (label_smoothing_uncertainty < 0.0 || label_smoothing_uncertainty >= 1.0) {
    throw ConfigError("label_smoothing_uncertainty must be in [0, 1)");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout_rate must be in [0, 1)");
  if (l2_weight < 0.0) throw ConfigError("l2_weight must be >= 0");
  if (!(clip_factor > 0.0)) throw ConfigError("clip_factor must be positive");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (max_steps <= 0) throw ConfigError("max_steps must be positive");
  if (eval_interval <= 0) throw ConfigError("eval_interval must be positive");
  if (patience <= 0) throw ConfigError("patience must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"warmup_steps", c.warmup_steps},
       {"constant_steps", c.constant_steps},
       {"decay_steps", c.decay_steps},
       {"peak_lr", c.peak_lr},
       {"decay_rate", c.decay_rate},
       {"label_smoothing_uncertainty", c.label_smoothing_uncertainty},
       {"dropout_rate", c.dropout_rate},
       {"l2_weight", c.l2_weight},
       {"clip_factor", c.clip_factor},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"batch_size", c.batch_size},
       {"max_steps", c.max_steps},
       {"max_epochs", c.max_epochs},
       {"eval_interval", c.eval_interval},
       {"patience", c.patience},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.constant_steps = j.value("constant_steps", d.constant_steps);
  c.decay_steps = j.value("decay_steps", d.decay_steps);
  c.peak_lr = j.value("peak_lr", d.peak_lr);
  c.decay_rate = j.value("decay_rate", d.decay_rate);
  c.label_smoothing_uncertainty = j.value("label_smoothing_uncertainty", d.label_smoothing_uncertainty);
  c.dropout_rate = j.value("dropout_rate", d.dropout_rate);
  c.l2_weight = j.value("l2_weight", d.l2_weight);
  c.clip_factor = j.value("clip_factor", d.clip_factor);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.eval_interval = j.value("eval_interval", d.eval_interval);
  c.patience = j.value("patience", d.patience);
  c.seed = j.value("seed", d.seed);
}

double learning_rate(const TrainConfig& cfg, std::int64_t step) {
  if (step < 0) step = 0;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const std::int64_t plateau_end = cfg.warmup_steps + cfg.constant_steps;
  if (step <= plateau_end) return cfg.peak_lr;
  std::int64_t period = cfg.decay_steps > 0 ? cfg.decay_steps : cfg.constant_steps;
  if (period <= 0) period = 1;
  const double excess = static_cast<double>(step - plateau_end) / static_cast<double>(period);
  return cfg.peak_lr * std::pow(cfg.decay_rate, excess);
}

void adam_step(ParameterStore& store, const TrainConfig& cfg) {
  for (const auto& [name, e] : store.entries()) {
    if (!all_finite(e.grad.matrix())) throw NumericError("adam_step: non-finite gradient in parameter " + name);
  }
  const std::int64_t t = store.step + 1;
  const double lr = learning_rate(cfg, t);
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (auto& [name, e] : store.entries()) {
    auto p = e.value.matrix().array();
    auto m = e.adam_m.matrix().array();
    auto v = e.adam_v.matrix().array();
    const Eigen::ArrayXXd g = e.grad.matrix().array() + cfg.l2_weight * p;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.square();
    p -= lr * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps);
  }
  store.step = t;
}

bool clip_gradients(ParameterStore& store, const TrainConfig& cfg) {
  const double norm = store.grad_norm();
  if (!store.clip.initialized) {
    store.clip.initialized = true;
    store.clip.norm_average = norm;
  }
  const double threshold = cfg.clip_factor * store.clip.norm_average;
  bool clipped = false;
  double post = norm;
  if (norm > threshold && norm > 0.0) {
    const double factor = threshold / norm;
    for (auto& [name, e] : store.entries()) e.grad.matrix() *= factor;
    post = threshold;
    clipped = true;
  }
  store.clip.norm_average = 0.99 * store.clip.norm_average + 0.01 * post;
  return clipped;
}

double grad_check(const LossClosure& forward, ParameterStore& store, double eps, GradCheckWorst* worst_out,
                  Stencil stencil) {
  auto eval = [&] {
    Tape tape(false);
    Var loss = forward(tape, store);
    return tape.value(loss)(0, 0);
  };
  const double first = eval();
  const double second = eval();
  if (std::bit_cast<std::uint64_t>(first) != std::bit_cast<std::uint64_t>(second)) {
    throw HarnessError("grad_check: forward pass is not deterministic (is dropout enabled?)");
  }

  store.zero_grad();
  {
    Tape tape(true);
    Var loss = forward(tape, store);
    tape.backward(loss);
  }
  double worst = 0.0;
  for (auto& [name, e] : store.entries()) {
    const Matrix analytic = e.grad.matrix();
    auto data = e.value.data();
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double saved = data[k];
      auto at = [&](double offset) {
        data[k] = saved + offset;
        return eval();
      };
      double numeric;
      if (stencil == Stencil::kCentral2) {
        numeric = (at(eps) - at(-eps)) / (2.0 * eps);
      } else {
        numeric = (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
      }
      data[k] = saved;
      const double a = analytic.data()[k];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      if (err > worst) {
        worst = err;
        if (worst_out) *worst_out = {name, k, a, numeric};
      }
    }
  }
  return worst;
}

}  // namespace hypo
