#include "fashionflow/rearrange.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "fashionflow/errors.hpp"

namespace ff {
namespace {

using Groups = std::vector<std::vector<std::string>>;

struct Sides {
  std::string_view lhs;
  std::string_view rhs;
};

Sides split_arrow(std::string_view pattern) {
  static constexpr std::string_view kAscii = "->";
  static constexpr std::string_view kUnicode = "\xE2\x86\x92";  // U+2192
  auto pos = pattern.find(kAscii);
  std::size_t len = kAscii.size();
  if (pos == std::string_view::npos) {
    pos = pattern.find(kUnicode);
    len = kUnicode.size();
  }
  if (pos == std::string_view::npos) throw ShapeError("rearrange pattern has no arrow: '" + std::string(pattern) + "'");
  return {pattern.substr(0, pos), pattern.substr(pos + len)};
}

Groups parse_side(std::string_view side, std::string_view pattern) {
  Groups groups;
  bool in_group = false;
  std::size_t i = 0;
  while (i < side.size()) {
    const char c = side[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if (c == '(') {
      if (in_group) throw ShapeError("nested parentheses in pattern '" + std::string(pattern) + "'");
      in_group = true;
      groups.emplace_back();
      ++i;
    } else if (c == ')') {
      if (!in_group) throw ShapeError("unbalanced ')' in pattern '" + std::string(pattern) + "'");
      in_group = false;
      ++i;
    } else if (std::isalnum(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i;
      while (j < side.size() && (std::isalnum(static_cast<unsigned char>(side[j])) || side[j] == '_')) ++j;
      std::string name(side.substr(i, j - i));
      if (in_group) {
        groups.back().push_back(std::move(name));
      } else {
        groups.push_back({std::move(name)});
      }
      i = j;
    } else {
      throw ShapeError("unexpected character '" + std::string(1, c) + "' in pattern '" + std::string(pattern) + "'");
    }
  }
  if (in_group) throw ShapeError("unbalanced '(' in pattern '" + std::string(pattern) + "'");
  return groups;
}

std::vector<std::string> flatten(const Groups& g) {
  std::vector<std::string> out;
  for (const auto& group : g) out.insert(out.end(), group.begin(), group.end());
  return out;
}

}  // namespace

std::string invert_pattern(std::string_view pattern) {
  auto [lhs, rhs] = split_arrow(pattern);
  return std::string(rhs) + " -> " + std::string(lhs);
}

RearrangePlan plan_rearrange(const Shape& input, std::string_view pattern, const AxisSizes& sizes) {
  auto [lhs_text, rhs_text] = split_arrow(pattern);
  const Groups lhs = parse_side(lhs_text, pattern);
  const Groups rhs = parse_side(rhs_text, pattern);

  if (lhs.size() != input.size()) {
    throw ShapeError("pattern '" + std::string(pattern) + "' names " + std::to_string(lhs.size()) +
                     " input axes but tensor has shape " + to_string(input));
  }

  RearrangePlan plan;
  plan.input_shape = input;
  plan.input_axes = flatten(lhs);
  plan.output_axes = flatten(rhs);

  std::set<std::string> seen;
  for (const auto& name : plan.input_axes) {
    if (!seen.insert(name).second) throw ShapeError("axis '" + name + "' appears twice on the input side");
  }
  std::set<std::string> seen_out;
  for (const auto& name : plan.output_axes) {
    if (!seen.count(name)) throw ShapeError("output axis '" + name + "' does not appear on the input side");
    if (!seen_out.insert(name).second) throw ShapeError("axis '" + name + "' appears twice on the output side");
  }
  for (const auto& name : plan.input_axes) {
    if (!seen_out.count(name)) throw ShapeError("input axis '" + name + "' is missing from the output side");
  }

  for (std::size_t g = 0; g < lhs.size(); ++g) {
    const auto& group = lhs[g];
    const std::int64_t length = input[g];
    std::int64_t known = 1;
    const std::string* unknown = nullptr;
    for (const auto& name : group) {
      auto it = sizes.find(name);
      if (it != sizes.end()) {
        if (it->second <= 0) throw ShapeError("axis '" + name + "' given non-positive size");
        known *= it->second;
      } else if (group.size() == 1) {
        unknown = &name;
      } else if (unknown) {
        throw ShapeError("axis '" + name + "' cannot be factored: group has more than one unknown size");
      } else {
        unknown = &name;
      }
    }
    if (group.empty()) {
      if (length != 1) throw ShapeError("empty group must match an axis of length 1");
      continue;
    }
    if (unknown) {
      if (known == 0 || length % known != 0) {
        throw ShapeError("axis '" + *unknown + "' cannot be factored from length " + std::to_string(length));
      }
      plan.sizes[*unknown] = length / known;
      for (const auto& name : group) {
        if (&name != unknown) plan.sizes[name] = sizes.at(name);
      }
    } else {
      if (known != length) {
        throw ShapeError("axis '" + group.front() + "' grouping multiplies to " + std::to_string(known) +
                         " but input length is " + std::to_string(length));
      }
      for (const auto& name : group) plan.sizes[name] = sizes.at(name);
    }
  }

  for (const auto& group : rhs) {
    std::int64_t len = 1;
    for (const auto& name : group) len *= plan.sizes.at(name);
    plan.output_shape.push_back(len);
  }

  plan.permutation.reserve(plan.output_axes.size());
  for (const auto& name : plan.output_axes) {
    auto it = std::find(plan.input_axes.begin(), plan.input_axes.end(), name);
    plan.permutation.push_back(static_cast<int>(it - plan.input_axes.begin()));
  }
  plan.inverse_pattern = invert_pattern(pattern);
  return plan;
}

Tensor apply_plan(const Tensor& t, const RearrangePlan& plan) {
  if (t.shape() != plan.input_shape) {
    throw ShapeError("rearrange plan built for " + to_string(plan.input_shape) + " applied to " + to_string(t.shape()));
  }
  const std::size_t m = plan.input_axes.size();
  std::vector<std::int64_t> in_len(m), in_stride(m);
  for (std::size_t i = 0; i < m; ++i) in_len[i] = plan.sizes.at(plan.input_axes[i]);
  std::int64_t s = 1;
  for (std::size_t i = m; i-- > 0;) {
    in_stride[i] = s;
    s *= in_len[i];
  }

  // Output-order lengths and source strides, merging runs that stay contiguous.
  std::vector<std::int64_t> len, stride;
  for (int p : plan.permutation) {
    const std::int64_t l = in_len[static_cast<std::size_t>(p)];
    const std::int64_t st = in_stride[static_cast<std::size_t>(p)];
    if (l == 1) continue;
    if (!len.empty() && stride.back() == st * l) {
      len.back() *= l;
      stride.back() = st;
    } else {
      len.push_back(l);
      stride.push_back(st);
    }
  }

  Tensor out(plan.output_shape);
  const Scalar* src = t.ptr();
  Scalar* dst = out.ptr();
  const std::int64_t total = out.size();
  if (total == 0) return out;
  if (len.empty()) {
    dst[0] = src[0];
    return out;
  }
  const std::size_t r = len.size();
  const std::int64_t inner_len = len[r - 1];
  const std::int64_t inner_stride = stride[r - 1];
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t base = 0;
  for (std::int64_t written = 0; written < total; written += inner_len) {
    if (inner_stride == 1) {
      std::copy_n(src + base, inner_len, dst + written);
    } else {
      const Scalar* p = src + base;
      for (std::int64_t k = 0; k < inner_len; ++k) dst[written + k] = p[k * inner_stride];
    }
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ++idx[ax];
      base += stride[ax];
      if (idx[ax] < len[ax]) break;
      base -= stride[ax] * len[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

Tensor rearrange(const Tensor& t, std::string_view pattern, const AxisSizes& sizes) {
  return apply_plan(t, plan_rearrange(t.shape(), pattern, sizes));
}

}  // namespace ff
