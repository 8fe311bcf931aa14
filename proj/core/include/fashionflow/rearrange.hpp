#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "fashionflow/tensor.hpp"

namespace ff {

using AxisSizes = std::map<std::string, std::int64_t>;

// Resolved plan for an einops-style pattern such as "b c f h w -> (b f) c h w".
// Axis names are whitespace-separated identifiers; parentheses group axes into
// one; "->" or the unicode arrow separates input from output.
struct RearrangePlan {
  Shape input_shape;
  Shape output_shape;
  std::vector<std::string> input_axes;   // elementary axes, input order
  std::vector<std::string> output_axes;  // elementary axes, output order
  AxisSizes sizes;                       // every elementary axis resolved
  std::vector<int> permutation;          // output elementary axis -> input elementary axis
  std::string inverse_pattern;
};

RearrangePlan plan_rearrange(const Shape& input, std::string_view pattern, const AxisSizes& sizes = {});

// Swaps the two sides of a pattern.
std::string invert_pattern(std::string_view pattern);

// Materializes a permuted/regrouped copy.
Tensor rearrange(const Tensor& t, std::string_view pattern, const AxisSizes& sizes = {});
Tensor apply_plan(const Tensor& t, const RearrangePlan& plan);

}  // namespace ff
