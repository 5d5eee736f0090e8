#pragma once

#include <gridmind/tensor.hpp>

#include <vector>

namespace gridmind {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// adaptive-moment descent with bias correction, constant learning rate
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg);

  // consumes accumulated gradients; an all-zero gradient moves nothing
  void step();
  void zero_grad();
  long long steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  long long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace gridmind
