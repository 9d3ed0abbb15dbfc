#include "plsm/adam.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace plsm {

Adam::Adam(AdamConfig config) : config_(config) {
  if (!(config_.learning_rate > 0.0)) throw std::invalid_argument("Adam: learning rate must be positive");
  if (config_.beta1 < 0.0 || config_.beta1 >= 1.0) throw std::invalid_argument("Adam: beta1 must be in [0, 1)");
  if (config_.beta2 < 0.0 || config_.beta2 >= 1.0) throw std::invalid_argument("Adam: beta2 must be in [0, 1)");
  if (!(config_.epsilon > 0.0)) throw std::invalid_argument("Adam: epsilon must be positive");
}

void Adam::step(std::span<Tensor* const> params, std::span<const Tensor* const> grads) {
  if (params.size() != grads.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  if (m_.empty()) {
    for (const Tensor* p : params) {
      m_.emplace_back(p->shape(), 0.0);
      v_.emplace_back(p->shape(), 0.0);
    }
  }
  if (m_.size() != params.size()) {
    throw ShapeError("adam_step: optimizer was initialised for " + std::to_string(m_.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i]->shape() || params[i]->shape() != m_[i].shape()) {
      throw ShapeError("adam_step: parameter " + std::to_string(i) + " has shape " +
                       shape_string(params[i]->shape()) + " but gradient has shape " +
                       shape_string(grads[i]->shape()));
    }
  }

  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i]->data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      p[j] -= config_.learning_rate * m_hat / (std::sqrt(v_hat) + config_.epsilon);
    }
    params[i]->require_finite("adam_step");
  }
}

}  // namespace plsm
