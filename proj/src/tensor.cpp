#include "mgpt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <utility>

namespace mgpt {

namespace {

thread_local Tape* g_current_tape = nullptr;

std::string shape_str(const Tensor& t) {
  return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

void ensure_grad(const std::shared_ptr<Tensor::Data>& d) {
  if (d->g.empty()) d->g.assign(d->v.size(), 0.0);
}

bool track(const Tensor& out) {
  return Tape::current() != nullptr && out.requires_grad();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a) + " vs " + shape_str(b));
  }
}

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace

Tensor make_tensor(size_t rows, size_t cols, bool requires_grad) {
  auto d = std::make_shared<Tensor::Data>();
  d->rows = rows;
  d->cols = cols;
  d->v.assign(rows * cols, 0.0);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::zeros(size_t rows, size_t cols) { return make_tensor(rows, cols, false); }

Tensor Tensor::full(size_t rows, size_t cols, double value) {
  Tensor t = make_tensor(rows, cols, false);
  std::fill(t.d_->v.begin(), t.d_->v.end(), value);
  return t;
}

Tensor Tensor::from_values(size_t rows, size_t cols, std::vector<double> values) {
  if (values.size() != rows * cols) {
    throw std::invalid_argument("from_values: " + std::to_string(values.size()) +
                                " values for shape " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  }
  Tensor t = make_tensor(rows, cols, false);
  t.d_->v = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value) { return full(1, 1, value); }

Tensor Tensor::identity(size_t n) {
  Tensor t = make_tensor(n, n, false);
  for (size_t i = 0; i < n; ++i) t.d_->v[i * n + i] = 1.0;
  return t;
}

Tensor Tensor::parameter(size_t rows, size_t cols, std::vector<double> values,
                         std::string name) {
  Tensor t = from_values(rows, cols, std::move(values));
  t.d_->requires_grad = true;
  t.d_->name = std::move(name);
  ensure_grad(t.d_);
  return t;
}

double Tensor::value() const {
  if (!is_scalar()) {
    throw std::invalid_argument("value(): tensor is " + shape_str(*this) + ", not 1x1");
  }
  return d_->v[0];
}

std::vector<double>& Tensor::raw_grad() {
  ensure_grad(d_);
  return d_->g;
}

void Tensor::zero_grad() {
  ensure_grad(d_);
  std::fill(d_->g.begin(), d_->g.end(), 0.0);
}

Tape::Tape() {
  prev_ = g_current_tape;
  g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::function<void()> backward_step) {
  nodes_.push_back(std::move(backward_step));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.is_scalar()) {
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss));
  }
  if (ran_) {
    throw std::runtime_error("backward: tape already replayed; reset() first");
  }
  ran_ = true;
  auto d = loss.ptr();
  ensure_grad(d);
  d->g[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void Tape::reset() {
  nodes_.clear();
  ran_ = false;
}

namespace {

// Output construction shared by all ops: requires_grad propagates from the
// inputs only while a tape is active.
Tensor op_output(size_t rows, size_t cols, std::initializer_list<const Tensor*> ins) {
  bool rg = false;
  if (Tape::current()) {
    for (const Tensor* t : ins) rg = rg || (*t).requires_grad();
  }
  return make_tensor(rows, cols, rg);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = op_output(a.rows(), a.cols(), {&a, &b});
  const auto &av = a.ptr()->v, &bv = b.ptr()->v;
  auto& ov = out.ptr()->v;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (track(out)) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    Tape::current()->record([ad, bd, od] {
      if (ad->requires_grad) {
        ensure_grad(ad);
        for (size_t i = 0; i < od->g.size(); ++i) ad->g[i] += od->g[i];
      }
      if (bd->requires_grad) {
        ensure_grad(bd);
        for (size_t i = 0; i < od->g.size(); ++i) bd->g[i] += od->g[i];
      }
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& b) {
  if (b.size() != a.cols()) {
    throw std::invalid_argument("add_rowvec: vector of " + std::to_string(b.size()) +
                                " entries against " + shape_str(a));
  }
  Tensor out = op_output(a.rows(), a.cols(), {&a, &b});
  const auto &av = a.ptr()->v, &bv = b.ptr()->v;
  auto& ov = out.ptr()->v;
  const size_t n = a.cols();
  for (size_t i = 0; i < a.rows(); ++i)
    for (size_t j = 0; j < n; ++j) ov[i * n + j] = av[i * n + j] + bv[j];
  if (track(out)) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    Tape::current()->record([ad, bd, od, n] {
      if (ad->requires_grad) {
        ensure_grad(ad);
        for (size_t i = 0; i < od->g.size(); ++i) ad->g[i] += od->g[i];
      }
      if (bd->requires_grad) {
        ensure_grad(bd);
        for (size_t i = 0; i < od->rows; ++i)
          for (size_t j = 0; j < n; ++j) bd->g[j] += od->g[i * n + j];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = op_output(a.rows(), a.cols(), {&a, &b});
  const auto &av = a.ptr()->v, &bv = b.ptr()->v;
  auto& ov = out.ptr()->v;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (track(out)) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    Tape::current()->record([ad, bd, od] {
      if (ad->requires_grad) {
        ensure_grad(ad);
        for (size_t i = 0; i < od->g.size(); ++i) ad->g[i] += od->g[i] * bd->v[i];
      }
      if (bd->requires_grad) {
        ensure_grad(bd);
        for (size_t i = 0; i < od->g.size(); ++i) bd->g[i] += od->g[i] * ad->v[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = op_output(a.rows(), a.cols(), {&a});
  const auto& av = a.ptr()->v;
  auto& ov = out.ptr()->v;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  if (track(out)) {
    auto ad = a.ptr();
    auto od = out.ptr();
    Tape::current()->record([ad, od, c] {
      ensure_grad(ad);
      for (size_t i = 0; i < od->g.size(); ++i) ad->g[i] += od->g[i] * c;
    });
  }
  return out;
}

Tensor add_const(const Tensor& a, double c) {
  Tensor out = op_output(a.rows(), a.cols(), {&a});
  const auto& av = a.ptr()->v;
  auto& ov = out.ptr()->v;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + c;
  if (track(out)) {
    auto ad = a.ptr();
    auto od = out.ptr();
    Tape::current()->record([ad, od] {
      ensure_grad(ad);
      for (size_t i = 0; i < od->g.size(); ++i) ad->g[i] += od->g[i];
    });
  }
  return out;
}

Tensor clamp_min(const Tensor& a, double c) {
  Tensor out = op_output(a.rows(), a.cols(), {&a});
  const auto& av = a.ptr()->v;
  auto& ov = out.ptr()->v;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::max(av[i], c);
  if (track(out)) {
    auto ad = a.ptr();
    auto od = out.ptr();
    Tape::current()->record([ad, od, c] {
      ensure_grad(ad);
      for (size_t i = 0; i < od->g.size(); ++i)
        if (ad->v[i] > c) ad->g[i] += od->g[i];
    });
  }
  return out;
}

Tensor pow_elem(const Tensor& a, double exponent) {
  const auto& av = a.ptr()->v;
  if (exponent < 1.0) {
    for (double x : av)
      if (x <= 0.0)
        throw std::domain_error("pow_elem: nonpositive entry with exponent < 1");
  }
  Tensor out = op_output(a.rows(), a.cols(), {&a});
  auto& ov = out.ptr()->v;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::pow(av[i], exponent);
  if (track(out)) {
    auto ad = a.ptr();
    auto od = out.ptr();
    Tape::current()->record([ad, od, exponent] {
      ensure_grad(ad);
      for (size_t i = 0; i < od->g.size(); ++i)
        ad->g[i] += od->g[i] * exponent * std::pow(ad->v[i], exponent - 1.0);
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a) +
                                " vs " + shape_str(b));
  }
  const size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = op_output(m, n, {&a, &b});
  const auto &av = a.ptr()->v, &bv = b.ptr()->v;
  auto& ov = out.ptr()->v;
  for (size_t i = 0; i < m; ++i) {
    for (size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv[p * n];
      double* orow = &ov[i * n];
      for (size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  if (track(out)) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    Tape::current()->record([ad, bd, od, m, k, n] {
      if (ad->requires_grad) {
        ensure_grad(ad);
        // dA = G * B^T
        for (size_t i = 0; i < m; ++i)
          for (size_t p = 0; p < k; ++p) {
            double s = 0.0;
            const double* grow = &od->g[i * n];
            const double* brow = &bd->v[p * n];
            for (size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            ad->g[i * k + p] += s;
          }
      }
      if (bd->requires_grad) {
        ensure_grad(bd);
        // dB = A^T * G
        for (size_t p = 0; p < k; ++p)
          for (size_t i = 0; i < m; ++i) {
            const double aip = ad->v[i * k + p];
            if (aip == 0.0) continue;
            const double* grow = &od->g[i * n];
            double* brow = &bd->g[p * n];
            for (size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
          }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  const size_t m = a.rows(), n = a.cols();
  Tensor out = op_output(n, m, {&a});
  const auto& av = a.ptr()->v;
  auto& ov = out.ptr()->v;
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
  if (track(out)) {
    auto ad = a.ptr();
    auto od = out.ptr();
    Tape::current()->record([ad, od, m, n] {
      ensure_grad(ad);
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) ad->g[i * n + j] += od->g[j * m + i];
    });
  }
  return out;
}

Tensor activation(const Tensor& x, Activation kind, double leaky_slope) {
  Tensor out = op_output(x.rows(), x.cols(), {&x});
  const auto& xv = x.ptr()->v;
  auto& ov = out.ptr()->v;
  switch (kind) {
    case Activation::LeakyRelu:
      for (size_t i = 0; i < ov.size(); ++i)
        ov[i] = xv[i] > 0.0 ? xv[i] : leaky_slope * xv[i];
      break;
    case Activation::Elu:
      for (size_t i = 0; i < ov.size(); ++i)
        ov[i] = xv[i] > 0.0 ? xv[i] : std::expm1(xv[i]);
      break;
    case Activation::Gelu:
      for (size_t i = 0; i < ov.size(); ++i) ov[i] = gelu_value(xv[i]);
      break;
    case Activation::Relu:
      for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::max(xv[i], 0.0);
      break;
  }
  if (track(out)) {
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape::current()->record([xd, od, kind, leaky_slope] {
      ensure_grad(xd);
      for (size_t i = 0; i < od->g.size(); ++i) {
        const double x = xd->v[i];
        double d = 0.0;
        switch (kind) {
          case Activation::LeakyRelu: d = x > 0.0 ? 1.0 : leaky_slope; break;
          case Activation::Elu: d = x > 0.0 ? 1.0 : std::exp(x); break;
          case Activation::Gelu: d = gelu_grad(x); break;
          case Activation::Relu: d = x > 0.0 ? 1.0 : 0.0; break;
        }
        xd->g[i] += od->g[i] * d;
      }
    });
  }
  return out;
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return activation(x, Activation::LeakyRelu, slope);
}
Tensor elu(const Tensor& x) { return activation(x, Activation::Elu); }
Tensor gelu(const Tensor& x) { return activation(x, Activation::Gelu); }
Tensor relu(const Tensor& x) { return activation(x, Activation::Relu); }

Tensor softmax_rows(const Tensor& x) {
  const size_t m = x.rows(), n = x.cols();
  Tensor out = op_output(m, n, {&x});
  const auto& xv = x.ptr()->v;
  auto& ov = out.ptr()->v;
  for (size_t i = 0; i < m; ++i) {
    const double* row = &xv[i * n];
    double mx = row[0];
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (size_t j = 0; j < n; ++j) {
      ov[i * n + j] = std::exp(row[j] - mx);
      sum += ov[i * n + j];
    }
    for (size_t j = 0; j < n; ++j) ov[i * n + j] /= sum;
  }
  if (track(out)) {
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape::current()->record([xd, od, m, n] {
      ensure_grad(xd);
      for (size_t i = 0; i < m; ++i) {
        const double* y = &od->v[i * n];
        const double* g = &od->g[i * n];
        double dot = 0.0;
        for (size_t j = 0; j < n; ++j) dot += g[j] * y[j];
        for (size_t j = 0; j < n; ++j) xd->g[i * n + j] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const size_t m = x.rows(), n = x.cols();
  if (gain.size() != n || bias.size() != n) {
    throw std::invalid_argument("layer_norm: gain/bias must hold " + std::to_string(n) +
                                " entries");
  }
  constexpr double kEps = 1e-5;
  Tensor out = op_output(m, n, {&x, &gain, &bias});
  const auto &xv = x.ptr()->v, &gv = gain.ptr()->v, &bv = bias.ptr()->v;
  auto& ov = out.ptr()->v;
  std::vector<double> inv_std(m), means(m);
  for (size_t i = 0; i < m; ++i) {
    const double* row = &xv[i * n];
    double mean = 0.0;
    for (size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + kEps);
    means[i] = mean;
    inv_std[i] = inv;
    for (size_t j = 0; j < n; ++j)
      ov[i * n + j] = gv[j] * (row[j] - mean) * inv + bv[j];
  }
  if (track(out)) {
    auto xd = x.ptr(), gd = gain.ptr(), bd = bias.ptr(), od = out.ptr();
    Tape::current()->record([xd, gd, bd, od, m, n, means, inv_std] {
      for (size_t i = 0; i < m; ++i) {
        const double* row = &xd->v[i * n];
        const double* g = &od->g[i * n];
        const double inv = inv_std[i];
        if (gd->requires_grad) {
          ensure_grad(gd);
          for (size_t j = 0; j < n; ++j)
            gd->g[j] += g[j] * (row[j] - means[i]) * inv;
        }
        if (bd->requires_grad) {
          ensure_grad(bd);
          for (size_t j = 0; j < n; ++j) bd->g[j] += g[j];
        }
        if (xd->requires_grad) {
          ensure_grad(xd);
          // dL/dx via normalized values xhat: standard layer-norm backward.
          double sum_gh = 0.0, sum_gh_xhat = 0.0;
          for (size_t j = 0; j < n; ++j) {
            const double gh = g[j] * gd->v[j];
            const double xhat = (row[j] - means[i]) * inv;
            sum_gh += gh;
            sum_gh_xhat += gh * xhat;
          }
          const double invn = 1.0 / static_cast<double>(n);
          for (size_t j = 0; j < n; ++j) {
            const double gh = g[j] * gd->v[j];
            const double xhat = (row[j] - means[i]) * inv;
            xd->g[i * n + j] +=
                inv * (gh - invn * sum_gh - xhat * invn * sum_gh_xhat);
          }
        }
      }
    });
  }
  return out;
}

Tensor lp_pool_rows(const Tensor& x, double p) {
  if (p < 1.0) throw std::domain_error("lp_pool: p must be >= 1");
  const size_t g = x.rows(), t = x.cols();
  const auto& xv = x.ptr()->v;
  for (double v : xv)
    if (v < 0.0) throw std::domain_error("lp_pool: negative input");
  Tensor out = op_output(1, t, {&x});
  auto& ov = out.ptr()->v;
  std::vector<double> sums(t, 0.0);
  for (size_t v = 0; v < g; ++v)
    for (size_t j = 0; j < t; ++j) sums[j] += std::pow(xv[v * t + j], p);
  for (size_t j = 0; j < t; ++j) ov[j] = std::pow(sums[j], 1.0 / p);
  if (track(out)) {
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape::current()->record([xd, od, g, t, p, sums] {
      ensure_grad(xd);
      for (size_t j = 0; j < t; ++j) {
        if (sums[j] <= 0.0) continue;
        const double outer = std::pow(sums[j], 1.0 / p - 1.0);
        for (size_t v = 0; v < g; ++v) {
          const double xv = xd->v[v * t + j];
          if (xv == 0.0 && p > 1.0) continue;
          xd->g[v * t + j] += od->g[j] * outer * std::pow(xv, p - 1.0);
        }
      }
    });
  }
  return out;
}

namespace {

constexpr double kNormFloor = 1e-12;

}  // namespace

Tensor l2_normalize_rows(const Tensor& x, double denom_scale) {
  const size_t m = x.rows(), n = x.cols();
  Tensor out = op_output(m, n, {&x});
  const auto& xv = x.ptr()->v;
  auto& ov = out.ptr()->v;
  std::vector<double> norms(m);
  for (size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (size_t j = 0; j < n; ++j) s += xv[i * n + j] * xv[i * n + j];
    norms[i] = std::max(std::sqrt(s), kNormFloor);
    const double inv = 1.0 / (denom_scale * norms[i]);
    for (size_t j = 0; j < n; ++j) ov[i * n + j] = xv[i * n + j] * inv;
  }
  if (track(out)) {
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape::current()->record([xd, od, m, n, denom_scale, norms] {
      ensure_grad(xd);
      for (size_t i = 0; i < m; ++i) {
        const double r = norms[i];
        const double* row = &xd->v[i * n];
        const double* g = &od->g[i * n];
        double true_norm = 0.0;
        for (size_t j = 0; j < n; ++j) true_norm += row[j] * row[j];
        true_norm = std::sqrt(true_norm);
        if (true_norm < kNormFloor) {
          // Floored row: output is linear in x.
          for (size_t j = 0; j < n; ++j)
            xd->g[i * n + j] += g[j] / (denom_scale * r);
          continue;
        }
        double dot = 0.0;
        for (size_t j = 0; j < n; ++j) dot += g[j] * row[j];
        const double inv = 1.0 / (denom_scale * r);
        for (size_t j = 0; j < n; ++j)
          xd->g[i * n + j] += inv * (g[j] - row[j] * dot / (r * r));
      }
    });
  }
  return out;
}

Tensor l2_normalize_cols(const Tensor& x, double denom_scale) {
  const size_t m = x.rows(), n = x.cols();
  Tensor out = op_output(m, n, {&x});
  const auto& xv = x.ptr()->v;
  auto& ov = out.ptr()->v;
  std::vector<double> norms(n);
  for (size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (size_t i = 0; i < m; ++i) s += xv[i * n + j] * xv[i * n + j];
    norms[j] = std::max(std::sqrt(s), kNormFloor);
  }
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j)
      ov[i * n + j] = xv[i * n + j] / (denom_scale * norms[j]);
  if (track(out)) {
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape::current()->record([xd, od, m, n, denom_scale, norms] {
      ensure_grad(xd);
      for (size_t j = 0; j < n; ++j) {
        const double r = norms[j];
        double true_norm = 0.0, dot = 0.0;
        for (size_t i = 0; i < m; ++i) {
          true_norm += xd->v[i * n + j] * xd->v[i * n + j];
          dot += od->g[i * n + j] * xd->v[i * n + j];
        }
        true_norm = std::sqrt(true_norm);
        const double inv = 1.0 / (denom_scale * r);
        if (true_norm < kNormFloor) {
          for (size_t i = 0; i < m; ++i) xd->g[i * n + j] += od->g[i * n + j] * inv;
          continue;
        }
        for (size_t i = 0; i < m; ++i)
          xd->g[i * n + j] +=
              inv * (od->g[i * n + j] - xd->v[i * n + j] * dot / (r * r));
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const size_t n = parts[0].cols();
  size_t m = 0;
  for (const Tensor& p : parts) {
    if (p.cols() != n) throw std::invalid_argument("concat_rows: column mismatch");
    m += p.rows();
  }
  bool rg = false;
  if (Tape::current())
    for (const Tensor& p : parts) rg = rg || p.requires_grad();
  Tensor out = make_tensor(m, n, rg);
  auto& ov = out.ptr()->v;
  size_t row = 0;
  for (const Tensor& p : parts) {
    std::copy(p.ptr()->v.begin(), p.ptr()->v.end(), ov.begin() + row * n);
    row += p.rows();
  }
  if (track(out)) {
    std::vector<std::shared_ptr<Tensor::Data>> srcs;
    for (const Tensor& p : parts) srcs.push_back(p.ptr());
    auto od = out.ptr();
    Tape::current()->record([srcs, od, n] {
      size_t row = 0;
      for (const auto& s : srcs) {
        if (s->requires_grad) {
          ensure_grad(s);
          for (size_t i = 0; i < s->v.size(); ++i) s->g[i] += od->g[row * n + i];
        }
        row += s->rows;
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const size_t m = parts[0].rows();
  size_t n = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != m) throw std::invalid_argument("concat_cols: row mismatch");
    n += p.cols();
  }
  bool rg = false;
  if (Tape::current())
    for (const Tensor& p : parts) rg = rg || p.requires_grad();
  Tensor out = make_tensor(m, n, rg);
  auto& ov = out.ptr()->v;
  size_t col = 0;
  for (const Tensor& p : parts) {
    const size_t pc = p.cols();
    for (size_t i = 0; i < m; ++i)
      std::copy(p.ptr()->v.begin() + i * pc, p.ptr()->v.begin() + (i + 1) * pc,
                ov.begin() + i * n + col);
    col += pc;
  }
  if (track(out)) {
    std::vector<std::shared_ptr<Tensor::Data>> srcs;
    for (const Tensor& p : parts) srcs.push_back(p.ptr());
    auto od = out.ptr();
    Tape::current()->record([srcs, od, m, n] {
      size_t col = 0;
      for (const auto& s : srcs) {
        const size_t pc = s->cols;
        if (s->requires_grad) {
          ensure_grad(s);
          for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < pc; ++j)
              s->g[i * pc + j] += od->g[i * n + col + j];
        }
        col += pc;
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, size_t r0, size_t r1) {
  if (r0 >= r1 || r1 > x.rows()) {
    throw std::invalid_argument("slice_rows: [" + std::to_string(r0) + ", " +
                                std::to_string(r1) + ") out of range for " +
                                shape_str(x));
  }
  const size_t n = x.cols(), m = r1 - r0;
  Tensor out = op_output(m, n, {&x});
  const auto& xv = x.ptr()->v;
  std::copy(xv.begin() + r0 * n, xv.begin() + r1 * n, out.ptr()->v.begin());
  if (track(out)) {
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape::current()->record([xd, od, r0, m, n] {
      ensure_grad(xd);
      for (size_t i = 0; i < m * n; ++i) xd->g[r0 * n + i] += od->g[i];
    });
  }
  return out;
}

Tensor scale_rows(const Tensor& x, const Tensor& w) {
  if (w.size() != x.rows()) {
    throw std::invalid_argument("scale_rows: weight count " + std::to_string(w.size()) +
                                " != rows of " + shape_str(x));
  }
  const size_t m = x.rows(), n = x.cols();
  Tensor out = op_output(m, n, {&x, &w});
  const auto &xv = x.ptr()->v, &wv = w.ptr()->v;
  auto& ov = out.ptr()->v;
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) ov[i * n + j] = xv[i * n + j] * wv[i];
  if (track(out)) {
    auto xd = x.ptr(), wd = w.ptr(), od = out.ptr();
    Tape::current()->record([xd, wd, od, m, n] {
      if (xd->requires_grad) {
        ensure_grad(xd);
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < n; ++j)
            xd->g[i * n + j] += od->g[i * n + j] * wd->v[i];
      }
      if (wd->requires_grad) {
        ensure_grad(wd);
        for (size_t i = 0; i < m; ++i) {
          double s = 0.0;
          for (size_t j = 0; j < n; ++j) s += od->g[i * n + j] * xd->v[i * n + j];
          wd->g[i] += s;
        }
      }
    });
  }
  return out;
}

Tensor scale_cols(const Tensor& x, const Tensor& w) {
  if (w.size() != x.cols()) {
    throw std::invalid_argument("scale_cols: weight count " + std::to_string(w.size()) +
                                " != cols of " + shape_str(x));
  }
  const size_t m = x.rows(), n = x.cols();
  Tensor out = op_output(m, n, {&x, &w});
  const auto &xv = x.ptr()->v, &wv = w.ptr()->v;
  auto& ov = out.ptr()->v;
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) ov[i * n + j] = xv[i * n + j] * wv[j];
  if (track(out)) {
    auto xd = x.ptr(), wd = w.ptr(), od = out.ptr();
    Tape::current()->record([xd, wd, od, m, n] {
      if (xd->requires_grad) {
        ensure_grad(xd);
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < n; ++j)
            xd->g[i * n + j] += od->g[i * n + j] * wd->v[j];
      }
      if (wd->requires_grad) {
        ensure_grad(wd);
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < n; ++j)
            wd->g[j] += od->g[i * n + j] * xd->v[i * n + j];
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  Tensor out = op_output(1, 1, {&x});
  double s = 0.0;
  for (double v : x.ptr()->v) s += v;
  out.ptr()->v[0] = s;
  if (track(out)) {
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape::current()->record([xd, od] {
      ensure_grad(xd);
      for (size_t i = 0; i < xd->g.size(); ++i) xd->g[i] += od->g[0];
    });
  }
  return out;
}

Tensor mean_rows(const Tensor& x) {
  const size_t m = x.rows(), n = x.cols();
  Tensor out = op_output(1, n, {&x});
  const auto& xv = x.ptr()->v;
  auto& ov = out.ptr()->v;
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) ov[j] += xv[i * n + j];
  for (size_t j = 0; j < n; ++j) ov[j] /= static_cast<double>(m);
  if (track(out)) {
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape::current()->record([xd, od, m, n] {
      ensure_grad(xd);
      const double invm = 1.0 / static_cast<double>(m);
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) xd->g[i * n + j] += od->g[j] * invm;
    });
  }
  return out;
}

Tensor row_sums(const Tensor& x) {
  const size_t m = x.rows(), n = x.cols();
  Tensor out = op_output(m, 1, {&x});
  const auto& xv = x.ptr()->v;
  auto& ov = out.ptr()->v;
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) ov[i] += xv[i * n + j];
  if (track(out)) {
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape::current()->record([xd, od, m, n] {
      ensure_grad(xd);
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) xd->g[i * n + j] += od->g[i];
    });
  }
  return out;
}

Tensor abs_sum(const Tensor& x) {
  Tensor out = op_output(1, 1, {&x});
  double s = 0.0;
  for (double v : x.ptr()->v) s += std::abs(v);
  out.ptr()->v[0] = s;
  if (track(out)) {
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape::current()->record([xd, od] {
      ensure_grad(xd);
      for (size_t i = 0; i < xd->g.size(); ++i) {
        const double v = xd->v[i];
        if (v > 0.0)
          xd->g[i] += od->g[0];
        else if (v < 0.0)
          xd->g[i] -= od->g[0];
      }
    });
  }
  return out;
}

Tensor square_sum(const Tensor& x) {
  Tensor out = op_output(1, 1, {&x});
  double s = 0.0;
  for (double v : x.ptr()->v) s += v * v;
  out.ptr()->v[0] = s;
  if (track(out)) {
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape::current()->record([xd, od] {
      ensure_grad(xd);
      for (size_t i = 0; i < xd->g.size(); ++i) xd->g[i] += od->g[0] * 2.0 * xd->v[i];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<size_t>& indices) {
  const size_t n = x.cols();
  for (size_t idx : indices)
    if (idx >= x.rows())
      throw std::out_of_range("gather_rows: index " + std::to_string(idx) +
                              " out of range for " + shape_str(x));
  Tensor out = op_output(indices.size(), n, {&x});
  const auto& xv = x.ptr()->v;
  auto& ov = out.ptr()->v;
  for (size_t k = 0; k < indices.size(); ++k)
    std::copy(xv.begin() + indices[k] * n, xv.begin() + (indices[k] + 1) * n,
              ov.begin() + k * n);
  if (track(out)) {
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape::current()->record([xd, od, indices, n] {
      ensure_grad(xd);
      for (size_t k = 0; k < indices.size(); ++k)
        for (size_t j = 0; j < n; ++j)
          xd->g[indices[k] * n + j] += od->g[k * n + j];
    });
  }
  return out;
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<size_t>& targets) {
  const size_t m = logits.rows(), n = logits.cols();
  if (targets.size() != m) {
    throw std::invalid_argument("cross_entropy_rows: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(m) + " rows");
  }
  if (m == 0) throw std::invalid_argument("cross_entropy_rows: empty batch");
  for (size_t t : targets)
    if (t >= n) throw std::out_of_range("cross_entropy_rows: target column out of range");
  Tensor out = op_output(1, 1, {&logits});
  const auto& lv = logits.ptr()->v;
  double total = 0.0;
  for (size_t i = 0; i < m; ++i) {
    const double* row = &lv[i * n];
    double mx = row[0];
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
    total += mx + std::log(sum) - row[targets[i]];
  }
  out.ptr()->v[0] = total / static_cast<double>(m);
  if (track(out)) {
    auto ld = logits.ptr();
    auto od = out.ptr();
    Tape::current()->record([ld, od, targets, m, n] {
      ensure_grad(ld);
      const double g = od->g[0] / static_cast<double>(m);
      for (size_t i = 0; i < m; ++i) {
        const double* row = &ld->v[i * n];
        double mx = row[0];
        for (size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
        for (size_t j = 0; j < n; ++j) {
          const double p = std::exp(row[j] - mx) / sum;
          ld->g[i * n + j] += g * (p - (j == targets[i] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

}  // namespace mgpt
