#include "mgpt/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace mgpt {

void ParamSet::add(Tensor t, std::vector<size_t> frozen_rows) {
  if (!t.requires_grad()) {
    throw std::invalid_argument("ParamSet: tensor '" + t.name() +
                                "' does not require grad");
  }
  params_.push_back({t.name(), std::move(t), std::move(frozen_rows)});
}

size_t ParamSet::total_values() const {
  size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

void ParamSet::zero_grads() {
  for (auto& p : params_) p.tensor.zero_grad();
}

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(ParamSet& params) {
  auto& entries = params.entries();
  if (m_.empty()) {
    m_.resize(entries.size());
    v_.resize(entries.size());
    for (size_t i = 0; i < entries.size(); ++i) {
      m_[i].assign(entries[i].tensor.size(), 0.0);
      v_[i].assign(entries[i].tensor.size(), 0.0);
    }
  }
  if (m_.size() != entries.size()) {
    throw std::runtime_error("Adam: parameter set changed between steps");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < entries.size(); ++i) {
    auto& p = entries[i];
    const size_t cols = p.tensor.cols();
    auto& g = p.tensor.raw_grad();
    for (size_t row : p.frozen_rows)
      for (size_t j = 0; j < cols; ++j) g[row * cols + j] = 0.0;
    for (double gv : g) {
      if (std::isnan(gv) || std::isinf(gv)) {
        throw std::runtime_error("Adam: non-finite gradient in parameter '" + p.name +
                                 "'");
      }
    }
    auto& vals = p.tensor.raw_values();
    for (size_t k = 0; k < vals.size(); ++k) {
      m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g[k];
      v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g[k] * g[k];
      const double mhat = m_[i][k] / bc1;
      const double vhat = v_[i][k] / bc2;
      vals[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
  params.zero_grads();
}

}  // namespace mgpt
