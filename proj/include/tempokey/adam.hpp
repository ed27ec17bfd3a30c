#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "tempokey/autograd.hpp"

namespace tk {

template <typename T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
};

// One bias-corrected Adam update. Moments are created lazily on the first
// call and must keep matching the parameter shapes afterwards.
template <typename T>
void adam_step(std::span<Tensor<T>* const> params,
               std::span<const Tensor<T>* const> grads, AdamState<T>& state) {
  if (params.size() != grads.size()) {
    throw ShapeError("adam_step: parameter and gradient counts differ");
  }
  if (state.first_moment.empty()) {
    for (const auto* p : params) {
      state.first_moment.emplace_back(p->shape());
      state.second_moment.emplace_back(p->shape());
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: state tracks a different parameter set");
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.shape() != p.shape()) throw ShapeError("adam_step: moment shape mismatch");
    const Tensor<T>* g = grads[i];
    // A parameter that received no gradient this step sees g = 0.
    if (g && !g->empty() && g->shape() != p.shape()) {
      throw ShapeError("adam_step: gradient shape mismatch");
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = (g && !g->empty()) ? static_cast<double>((*g)[j]) : 0.0;
      const double mj = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
      const double vj = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double m_hat = mj / correction1;
      const double v_hat = vj / correction2;
      p[j] = static_cast<T>(p[j] - state.lr * m_hat / (std::sqrt(v_hat) + state.eps));
    }
  }
}

template <typename T>
void adam_step(std::span<Var<T>> params, AdamState<T>& state) {
  std::vector<Tensor<T>*> values;
  std::vector<const Tensor<T>*> grads;
  values.reserve(params.size());
  grads.reserve(params.size());
  for (auto& p : params) {
    values.push_back(&p.value());
    grads.push_back(&p.grad());
  }
  adam_step<T>(std::span<Tensor<T>* const>(values),
               std::span<const Tensor<T>* const>(grads), state);
}

}  // namespace tk
