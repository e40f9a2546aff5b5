#include "megt/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace megt {

InitSpec InitSpec::parse(std::string_view name) {
  if (name == "xavier_uniform") return {InitScheme::xavier_uniform, 0.0};
  if (name == "zeros") return {InitScheme::zeros, 0.0};
  if (name == "normal") return {InitScheme::normal, 0.02};
  if (name.starts_with("normal(") && name.ends_with(")")) {
    const std::string inner(name.substr(7, name.size() - 8));
    try {
      std::size_t used = 0;
      const double sigma = std::stod(inner, &used);
      if (used == inner.size() && sigma >= 0.0) return {InitScheme::normal, sigma};
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("unknown init scheme '" + std::string(name) + "'");
}

Tensor init_params(std::size_t rows, std::size_t cols, const InitSpec& spec, Rng rng) {
  Tensor t(rows, cols);
  switch (spec.scheme) {
    case InitScheme::zeros:
      break;
    case InitScheme::xavier_uniform: {
      const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
      for (double& x : t.values()) x = rng.uniform(-a, a);
      break;
    }
    case InitScheme::normal:
      for (double& x : t.values()) x = spec.sigma * rng.normal();
      break;
  }
  return t;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h) {
  Tensor grad(x.rows(), x.cols());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw OracleError(i, "finite_diff_grad: non-finite function value at coordinate " +
                               std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {
std::function<void(std::string_view)>& warning_sink() {
  static std::function<void(std::string_view)> sink;
  return sink;
}
}  // namespace

void warn(std::string_view message) {
  if (auto& sink = warning_sink()) {
    sink(message);
  } else {
    std::cerr << "warning: " << message << '\n';
  }
}

void set_warning_sink(std::function<void(std::string_view)> sink) {
  warning_sink() = std::move(sink);
}

}  // namespace megt
