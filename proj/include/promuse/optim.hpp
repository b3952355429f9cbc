#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "promuse/params.hpp"

namespace promuse {

struct AdamWConfig {
  double learning_rate = 1e-5;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// AdamW with decoupled weight decay and bias correction. Moment buffers are
// keyed by parameter name and exist only for trainable entries; frozen
// parameters are never touched.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {});

  // One update over all trainable entries, in registration order. Requires a
  // populated grad slot on every trainable entry; clears grads afterwards.
  void step(ParameterSet& params);

  // Multiplies the learning rate by `factor` (0 < factor <= 1), once per call.
  void decay_lr(double factor);

  double learning_rate() const { return cfg_.learning_rate; }
  std::int64_t step_count() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  bool has_state(const std::string& name) const { return moments_.count(name) > 0; }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::unordered_map<std::string, Moments> moments_;
};

// Spec-facing aliases for the two optimizer operations.
inline void adamw_step(ParameterSet& params, AdamW& state) { state.step(params); }
inline void exp_lr_decay(AdamW& state, double factor) { state.decay_lr(factor); }

}  // namespace promuse
