#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "promuse/params.hpp"
#include "promuse/tensor.hpp"

namespace testutil {

// Central finite differences against the analytic gradient of `f`, evaluated
// as a pure function of the leaf tensors it closes over. Checked coordinates
// are `probe` indices into `leaf` (all coordinates when empty).
struct FdReport {
  double max_rel_err = 0.0;
  std::int64_t checked = 0;
};

inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
  return std::fabs(analytic - numeric) / denom;
}

// `loss_fn` must rebuild the graph from scratch on each call so that leaf
// value perturbations propagate. Returns the max relative error over probes.
inline FdReport finite_diff_check(promuse::Tensor leaf,
                                  const std::function<promuse::Tensor()>& loss_fn,
                                  std::vector<std::int64_t> probe = {},
                                  double h = 1e-5) {
  using promuse::Tensor;
  leaf.set_requires_grad(true);
  leaf.drop_grad();
  Tensor loss = loss_fn();
  promuse::backward(loss);
  std::vector<double> analytic(leaf.numel(), 0.0);
  if (leaf.has_grad()) analytic = leaf.grad();

  if (probe.empty()) {
    probe.resize(leaf.numel());
    for (std::int64_t i = 0; i < leaf.numel(); ++i) probe[i] = i;
  }

  FdReport rep;
  auto& vals = leaf.mutable_values();
  for (auto idx : probe) {
    const double orig = vals[idx];
    vals[idx] = orig + h;
    const double up = loss_fn().item();
    vals[idx] = orig - h;
    const double down = loss_fn().item();
    vals[idx] = orig;
    const double numeric = (up - down) / (2.0 * h);
    rep.max_rel_err = std::max(rep.max_rel_err, rel_err(analytic[idx], numeric));
    ++rep.checked;
  }
  leaf.drop_grad();
  return rep;
}

// Samples up to `max_probes` coordinates of a tensor, deterministic in rng.
inline std::vector<std::int64_t> sample_probes(promuse::Rng& rng, std::int64_t numel,
                                               std::int64_t max_probes) {
  std::vector<std::int64_t> out;
  if (numel <= max_probes) {
    for (std::int64_t i = 0; i < numel; ++i) out.push_back(i);
    return out;
  }
  for (std::int64_t i = 0; i < max_probes; ++i)
    out.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(numel))));
  return out;
}

}  // namespace testutil
