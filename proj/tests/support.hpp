#pragma once

#include "plsm/autodiff.hpp"
#include "plsm/rng.hpp"
#include "plsm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace plsm::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

using Builder = std::function<Var(Tape&, std::vector<Var>&)>;

/// Largest relative error between reverse-mode gradients of `build` and
/// central differences (step h) over every entry of every input. The
/// denominator is floored at 1e-6 so exact zeros do not divide by zero.
inline double gradient_check(const Builder& build, std::vector<Tensor> inputs, double h = 1e-5) {
  auto evaluate = [&](bool backward, std::vector<Tensor>* grads) {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.parameter(t));
    Var loss = build(tape, vars);
    const double value = loss.value().item();
    if (backward) {
      tape.backward(loss);
      for (const Tensor& t : inputs) grads->push_back(*tape.gradient_for(t));
    }
    return value;
  };
  std::vector<Tensor> analytic;
  evaluate(true, &analytic);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double saved = inputs[i][j];
      inputs[i][j] = saved + h;
      const double up = evaluate(false, nullptr);
      inputs[i][j] = saved - h;
      const double down = evaluate(false, nullptr);
      inputs[i][j] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i][j];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& name)
      : path_(std::filesystem::temp_directory_path() / ("plsm_test_" + name)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

private:
  std::filesystem::path path_;
};

}  // namespace plsm::test
