#include "spanlab/optim.hpp"

#include <cmath>

namespace spanlab {

std::vector<std::string> AdamWConfig::problems() const {
  std::vector<std::string> out;
  if (!(beta1 >= 0.0 && beta1 < 1.0)) out.push_back("optimizer.beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) out.push_back("optimizer.beta2 must be in [0, 1)");
  if (!(epsilon > 0.0)) out.push_back("optimizer.epsilon must be positive");
  if (!(weight_decay >= 0.0)) out.push_back("optimizer.weight_decay must be >= 0");
  return out;
}

std::vector<std::string> Schedule::problems() const {
  std::vector<std::string> out;
  if (!(warmup_steps > 0 && warmup_steps < total_steps)) {
    out.push_back("schedule requires 0 < warmup_steps < total_steps");
  }
  if (!(peak_lr > 0.0)) out.push_back("schedule.peak_lr must be positive");
  return out;
}

double lr_at(const Schedule& s, std::int64_t step) {
  if (step < 0 || step > s.total_steps) {
    throw ValidationError("step " + std::to_string(step) + " outside schedule [0, " + std::to_string(s.total_steps) +
                          "]");
  }
  if (step <= s.warmup_steps) {
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  return s.peak_lr * static_cast<double>(s.total_steps - step) / static_cast<double>(s.total_steps - s.warmup_steps);
}

template <class T>
void optimizer_step(ParamSet<T>& params, const ParamSet<T>& grads, OptimizerState<T>& state, double lr) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw ValidationError("optimizer: gradient/state layout does not match parameters");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads.tensors[i].rows() != params.tensors[i].rows() || grads.tensors[i].cols() != params.tensors[i].cols()) {
      throw ValidationError("optimizer: shape mismatch for " + params.specs[i].name);
    }
    if (!grads.tensors[i].allFinite()) {
      throw NonFiniteError("gradient", "non-finite gradient in " + params.specs[i].name);
    }
  }
  const AdamWConfig& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const T bc1 = static_cast<T>(1.0 - std::pow(c.beta1, t));
  const T bc2 = static_cast<T>(1.0 - std::pow(c.beta2, t));
  const T b1 = static_cast<T>(c.beta1);
  const T b2 = static_cast<T>(c.beta2);
  const T eps = static_cast<T>(c.epsilon);
  const T lr_t = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.tensors[i];
    auto& m = state.m.tensors[i];
    auto& v = state.v.tensors[i];
    const auto& g = grads.tensors[i];
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
    const T wd = params.specs[i].decay ? static_cast<T>(c.weight_decay) : T(0);
    p.array() -= lr_t * ((m.array() / bc1) / ((v.array() / bc2).sqrt() + eps) + wd * p.array());
  }
}

template <class T>
double clip_global_norm(ParamSet<T>& grads, double max_norm) {
  const double norm = std::sqrt(static_cast<double>(grads.squared_norm()));
  if (max_norm > 0.0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto& g : grads.tensors) g *= scale;
  }
  return norm;
}

template void optimizer_step<float>(ParamSet<float>&, const ParamSet<float>&, OptimizerState<float>&, double);
template void optimizer_step<double>(ParamSet<double>&, const ParamSet<double>&, OptimizerState<double>&, double);
template double clip_global_norm<float>(ParamSet<float>&, double);
template double clip_global_norm<double>(ParamSet<double>&, double);

}  // namespace spanlab
