#pragma once

#include "plsm/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace plsm {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction. Moment buffers are created lazily on the first
/// step and must keep matching the parameter shapes afterwards.
class Adam {
public:
  explicit Adam(AdamConfig config = {});

  /// One update of every parameter from its gradient. The step counter is
  /// incremented before the bias correction is computed.
  void step(std::span<Tensor* const> params, std::span<const Tensor* const> grads);

  std::uint64_t step_count() const { return step_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

private:
  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

}  // namespace plsm
