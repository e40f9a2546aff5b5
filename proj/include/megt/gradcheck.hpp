#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "megt/autodiff.hpp"
#include "megt/rng.hpp"

namespace megt {

struct GradCheckOptions {
  double step = 1e-6;            // central-difference h
  double tolerance = 1e-4;       // max relative error
  double floor = 1e-5;           // relative-error denominator floor
  std::size_t per_param = 4;     // coordinates sampled per parameter tensor
};

struct CoordinateCheck {
  std::string param;
  std::size_t coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct ScopeReport {
  std::string scope;
  std::size_t checked = 0;
  CoordinateCheck worst;
  std::vector<CoordinateCheck> failures;
  bool passed() const { return failures.empty(); }
};

/// A scalar function of named parameters, rebuilt on a fresh tape per call.
struct GradCheckCase {
  std::string scope;
  std::vector<std::pair<std::string, Tensor*>> params;
  std::function<ad::Var(ad::Tape&)> loss;
};

/// Compares backward() against central differences on sampled coordinates.
ScopeReport run_gradcheck(const GradCheckCase& c, const GradCheckOptions& opt, Rng rng);

/// Scopes: attention, egt, gtl, mffm, model, or all (every scope in that order).
std::vector<std::string> gradcheck_scopes(const std::string& scope);
std::vector<ScopeReport> gradcheck(const std::string& scope, std::uint64_t seed,
                                   const GradCheckOptions& opt = {});

}  // namespace megt
