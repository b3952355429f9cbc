#include "promuse/optim.hpp"

#include <cmath>

#include "promuse/errors.hpp"

namespace promuse {

AdamW::AdamW(AdamWConfig cfg) : cfg_(cfg) {
  if (cfg_.learning_rate <= 0.0) throw ValueError("AdamW: learning rate must be positive");
  if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0)
    throw ValueError("AdamW: betas must lie in [0,1)");
  if (cfg_.epsilon <= 0.0) throw ValueError("AdamW: epsilon must be positive");
  if (cfg_.weight_decay < 0.0) throw ValueError("AdamW: weight decay must be >= 0");
}

void AdamW::step(ParameterSet& params) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

  for (const auto& e : params.entries()) {
    if (!e.trainable) continue;
    Tensor t = e.tensor;
    if (!t.has_grad())
      throw ValueError("AdamW: trainable parameter '" + e.name +
                       "' has no gradient; run backward first");
    auto& mom = moments_[e.name];
    const auto n = t.values().size();
    if (mom.m.empty()) {
      mom.m.assign(n, 0.0);
      mom.v.assign(n, 0.0);
    }
    const auto& g = t.grad();
    auto& w = t.mutable_values();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g[i];
      mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * gi;
      mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double m_hat = mom.m[i] / bc1;
      const double v_hat = mom.v[i] / bc2;
      // Decoupled decay: applied to the raw weight, independent of moments.
      w[i] -= cfg_.learning_rate * (m_hat / (std::sqrt(v_hat) + cfg_.epsilon) +
                                    cfg_.weight_decay * w[i]);
    }
  }

  for (const auto& e : params.entries())
    if (e.trainable) e.tensor.drop_grad();
}

void AdamW::decay_lr(double factor) {
  if (factor <= 0.0)
    throw ValueError("exp_lr_decay: factor must be positive, got " + std::to_string(factor));
  if (factor > 1.0)
    throw ValueError("exp_lr_decay: factor must be <= 1, got " + std::to_string(factor));
  cfg_.learning_rate *= factor;
}

}  // namespace promuse
