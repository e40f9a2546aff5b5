#pragma once

// Shared test helpers: plain-loop reference implementations (no Eigen, no tape)
// and a finite-difference gradient checker.

#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "megt/autodiff.hpp"
#include "megt/tensor.hpp"

namespace testutil {

using megt::Tensor;
using megt::ad::Tape;
using megt::ad::Var;

inline Tensor random_tensor(std::size_t r, std::size_t c, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(r, c);
  for (double& x : t.values()) x = dist(gen);
  return t;
}

inline Tensor loop_matmul(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

inline Tensor loop_transpose(const Tensor& a) {
  Tensor out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline Tensor loop_softmax(const Tensor& a) {
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double mx = a(i, 0);
    for (std::size_t j = 1; j < a.cols(); ++j) mx = std::max(mx, a(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) z += std::exp(a(i, j) - mx);
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = std::exp(a(i, j) - mx) / z;
  }
  return out;
}

inline Tensor loop_scale(Tensor a, double s) {
  for (double& x : a.values()) x *= s;
  return a;
}

inline Tensor cols_of(const Tensor& a, std::size_t begin, std::size_t count) {
  Tensor out(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = a(i, begin + j);
  return out;
}

inline Tensor rows_of(const Tensor& a, std::size_t begin, std::size_t count) {
  Tensor out(count, a.cols());
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(begin + i, j);
  return out;
}

/// Literal multi-head attention: per head softmax(QK^T/sqrt(dh)) V, concat, W_o.
inline Tensor loop_mha(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv, const Tensor& wo,
                       std::size_t heads) {
  const Tensor q = loop_matmul(x, wq), k = loop_matmul(x, wk), v = loop_matmul(x, wv);
  const std::size_t n = x.rows(), d = wq.cols(), dh = d / heads;
  Tensor cat(n, d);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += q(i, h * dh + c) * k(j, h * dh + c);
        s[j] = dot / std::sqrt(double(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += s[j] / z * v(j, h * dh + c);
        cat(i, h * dh + c) = acc;
      }
    }
  }
  return loop_matmul(cat, wo);
}

inline double condition_number(const Tensor& a) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const Mat> m(a.values().data(), a.rows(), a.cols());
  const Eigen::JacobiSVD<Mat> svd(m);
  const auto& s = svd.singularValues();
  return s(0) / s(s.size() - 1);
}

/// softmax(2 X X^T / sqrt(m)) for Gaussian X, redrawn until its 2-norm
/// condition number is at most max_cond.
inline Tensor well_conditioned_attention(std::size_t m, std::uint64_t seed, double max_cond = 5.0) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd;
  for (;;) {
    Tensor x(m, m);
    for (double& v : x.values()) v = nd(gen);
    const Tensor a = loop_softmax(loop_scale(loop_matmul(x, loop_transpose(x)), 2.0 / std::sqrt(double(m))));
    if (condition_number(a) <= max_cond) return a;
  }
}

inline void check_close(const Tensor& a, const Tensor& b, double tol) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  CHECK(megt::max_abs_diff(a, b) <= tol);
}

/// Gradient check of L = sum(R o f(inputs)) for a fixed random R, every
/// coordinate of every input, central differences with step h.
inline double grad_check(const std::function<Var(Tape&, std::vector<Var>&)>& f, std::vector<Tensor> inputs,
                         std::uint64_t seed = 11, double h = 1e-5) {
  Tensor readout;
  auto loss = [&](Tape& tape) {
    std::vector<Var> vars;
    for (Tensor& t : inputs) vars.push_back(tape.parameter(t));
    const Var out = f(tape, vars);
    if (readout.empty()) readout = random_tensor(out.rows(), out.cols(), seed);
    return megt::ad::sum(megt::ad::hadamard(out, tape.constant(readout)));
  };
  for (Tensor& t : inputs) t.zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  double worst = 0.0;
  for (Tensor& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + h;
      double up, down;
      {
        Tape tape(false);
        up = loss(tape).value()[0];
      }
      t[i] = orig - h;
      {
        Tape tape(false);
        down = loss(tape).value()[0];
      }
      t[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double rel = std::abs(analytic[i] - numeric) / std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace testutil
