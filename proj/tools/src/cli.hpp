#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "fashionflow/tensor.hpp"

namespace ff::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kContractError = 1;  // usage, shape, config, numeric
inline constexpr int kIoError = 2;        // filesystem and file format

// Runs one subcommand. `args` excludes the program name. Reports go to `out`,
// diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Writes frames (f, 3, H, W) in [-1, 1] side by side as a binary PPM.
void write_frame_grid(const std::string& path, const Tensor& video);

}  // namespace ff::cli
