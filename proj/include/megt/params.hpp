#pragma once

#include <functional>
#include <string>

#include "megt/tensor.hpp"

namespace megt {

/// Visitor over named parameters in canonical order.
using ParamVisitor = std::function<void(const std::string& name, Tensor& value)>;

}  // namespace megt
