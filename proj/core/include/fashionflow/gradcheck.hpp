#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fashionflow/autograd.hpp"

namespace ff {

// ||a - b|| / max(||a||, ||b||, 1e-30)
double relative_error(const std::vector<double>& a, const std::vector<double>& b);

struct GradCheckOptions {
  double step = 1e-2;            // central-difference step
  int coords_per_leaf = 12;      // sampled coordinates per leaf (all when smaller)
};

// Compares backward() against central differences for the probe loss
// sum(out * R), R fixed random, evaluated in double from the forward values.
// `build` must bind every leaf with tape.param(). Returns the relative error
// over the sampled coordinates of all leaves.
double check_gradients(const std::function<Var(Tape&)>& build, const std::vector<Parameter*>& leaves, Rng& rng,
                       const GradCheckOptions& options = {});

struct LayerGradReport {
  std::string layer;
  int trials = 0;
  double max_rel_error = 0;
};

// Randomised finite-difference trials for every layer type: linear, group
// norm, conv2d, conv1d, pseudo-3D conv, spatial / temporal / cross attention,
// the VAE encoder and decoder, and the timestep embedding.
std::vector<LayerGradReport> run_layer_grad_checks(int trials, std::uint64_t seed,
                                                   const GradCheckOptions& options = {});

}  // namespace ff
