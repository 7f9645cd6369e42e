#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "aggpose/tensor.hpp"

namespace aggpose {

/// A scalar-valued probe: the output of `forward` is contracted against a
/// fixed random tensor, so every output element contributes to the gradient.
struct GradcheckCase {
  std::vector<std::pair<std::string, Tensor<double>>> inputs;  // leaves, perturbed in place
  std::function<Tensor<double>()> forward;
};

struct GradcheckOptions {
  double epsilon = 1e-5;
  /// Coordinates sampled across all inputs; 0 checks every coordinate.
  Index max_coordinates = 0;
  /// Every input receives at least this many checked coordinates (or all of
  /// them when smaller).
  Index min_per_input = 4;
  /// The error denominator is at least this fraction of the probe's whole
  /// gradient norm. Gradients that vanish identically (key biases under
  /// softmax shift invariance) are then scored by their finite-difference
  /// noise against the probe scale instead of 0/0.
  double relative_floor = 1e-4;
};

struct TensorError {
  std::string name;
  double rel_error = 0.0;
  Index checked = 0;
};

/// Norm-wise relative error ||g_a - g_n|| / max(||g_a||, ||g_n||, floor) per input,
/// over the checked coordinates. `rng_seed` drives the contraction tensor and
/// coordinate sampling.
std::vector<TensorError> gradcheck(GradcheckCase& probe, std::uint64_t rng_seed, const GradcheckOptions& options = {});

struct ScopeReport {
  std::string scope;
  double tolerance = 0.0;
  double worst_rel_error = 0.0;
  std::string worst_tensor;
  int seeds = 0;
  Index coordinates = 0;
  double seconds = 0.0;
  bool passed() const { return worst_rel_error < tolerance; }
};

/// Names accepted by run_gradcheck_scope, in execution order.
const std::vector<std::string>& gradcheck_scopes();
bool is_gradcheck_scope(const std::string& name);

/// Builds the scope's probe at 64-bit for each seed derive_seed(base_seed, i)
/// and keeps the worst error. Throws std::invalid_argument on an unknown name.
ScopeReport run_gradcheck_scope(const std::string& scope, int seeds = 10, std::uint64_t base_seed = 0);

}  // namespace aggpose
