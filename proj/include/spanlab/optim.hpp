#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spanlab/model.hpp"

namespace spanlab {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Decoupled; applied to tensors whose spec has decay = true.
  double weight_decay = 0.1;

  std::vector<std::string> problems() const;
};

/// Linear warmup from 0 to peak_lr over warmup_steps, then linear decay to 0 at total_steps.
struct Schedule {
  std::int64_t warmup_steps = 10000;
  double peak_lr = 1e-4;
  std::int64_t total_steps = 100000;

  std::vector<std::string> problems() const;
};

double lr_at(const Schedule& schedule, std::int64_t step);

template <class T>
struct OptimizerState {
  AdamWConfig config;
  ParamSet<T> m;
  ParamSet<T> v;
  std::int64_t step = 0;

  static OptimizerState zeros_for(const ParamSet<T>& params, AdamWConfig config) {
    return OptimizerState{config, params.zeros_like(), params.zeros_like(), 0};
  }
};

/// One bias-corrected AdamW update:
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
/// Throws NonFiniteError, leaving params and state untouched, when a gradient is NaN/Inf.
template <class T>
void optimizer_step(ParamSet<T>& params, const ParamSet<T>& grads, OptimizerState<T>& state, double lr);

/// Rescales grads so their global L2 norm is at most max_norm. Returns the norm before clipping.
template <class T>
double clip_global_norm(ParamSet<T>& grads, double max_norm);

}  // namespace spanlab
