#pragma once

#include <string>
#include <vector>

#include "mgpt/tensor.hpp"

namespace mgpt {

// A named leaf tensor plus rows the optimizer must never move (e.g. the PAD
// row of an embedding table, pinned at zero).
struct ParamRef {
  std::string name;
  Tensor tensor;
  std::vector<size_t> frozen_rows;
};

class ParamSet {
 public:
  void add(Tensor t, std::vector<size_t> frozen_rows = {});
  const std::vector<ParamRef>& entries() const { return params_; }
  std::vector<ParamRef>& entries() { return params_; }
  size_t total_values() const;
  void zero_grads();

 private:
  std::vector<ParamRef> params_;
};

// Adam with bias correction. step() consumes the accumulated gradients and
// zeroes them afterwards; a NaN gradient aborts with the parameter's name.
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(ParamSet& params);
  size_t step_count() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace mgpt
