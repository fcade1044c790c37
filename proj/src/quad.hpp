#pragma once

#include <boost/multiprecision/eigen.hpp>
#include <boost/multiprecision/float128.hpp>

namespace revattn {

// 113-bit significand; used only by the finite-difference probe.
using Quad = boost::multiprecision::float128;

}  // namespace revattn
