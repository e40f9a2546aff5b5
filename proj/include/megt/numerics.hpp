#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>

#include "megt/errors.hpp"
#include "megt/rng.hpp"
#include "megt/tensor.hpp"

namespace megt {

enum class InitScheme { xavier_uniform, normal, zeros };

struct InitSpec {
  InitScheme scheme = InitScheme::xavier_uniform;
  double sigma = 0.02;  // normal only

  /// Accepts "xavier_uniform", "zeros", "normal" or "normal(<sigma>)".
  static InitSpec parse(std::string_view name);
};

/// Xavier-uniform draws U(-a, a) with a = sqrt(6 / (rows + cols)).
Tensor init_params(std::size_t rows, std::size_t cols, const InitSpec& spec, Rng rng);

/// Raised by finite_diff_grad when the function is not finite at a probe point.
class OracleError : public Error {
public:
  OracleError(std::size_t coordinate, const std::string& what)
      : Error(what), coordinate_(coordinate) {}
  std::size_t coordinate() const noexcept { return coordinate_; }

private:
  std::size_t coordinate_;
};

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h = 1e-6);

/// |a - n| / max(|a|, |n|, floor). The floor keeps near-zero gradients from
/// turning rounding noise into large relative errors.
double relative_error(double analytic, double numeric, double floor = 1e-6);

void warn(std::string_view message);
/// Redirects warnings (default: stderr). Pass nullptr to restore the default.
void set_warning_sink(std::function<void(std::string_view)> sink);

}  // namespace megt
