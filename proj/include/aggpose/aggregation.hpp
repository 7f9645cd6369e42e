#pragma once

#include <optional>
#include <vector>

#include "aggpose/blocks.hpp"

namespace aggpose {

/// Feature maps [B,C_i,H_i,W_i] ordered from the finest level (level 1, 1/4
/// of the input) to the coarsest. Each level halves both spatial sides.
template <typename T>
struct PyramidFeatures {
  std::vector<Tensor<T>> levels;

  int size() const { return static_cast<int>(levels.size()); }
  /// 1-based access.
  const Tensor<T>& level(int i) const { return levels.at(static_cast<std::size_t>(i - 1)); }
  /// Throws ShapeError unless batch sizes agree and consecutive levels differ
  /// by exactly 2x per side. `channels`, if non-empty, must match per level.
  void validate(const std::vector<Index>& channels = {}) const;
};

/// Moves level-`from` features onto the grid and width of level `to`:
/// pointwise projection + GELU, then a stride-2 overlapped patch embed when
/// going coarser or a 2x bilinear upsample when going finer. Levels must be
/// adjacent; from == to is the identity.
template <typename T>
class CrossLevelRoute {
 public:
  CrossLevelRoute() = default;
  CrossLevelRoute(int from, int to, Index from_channels, Index to_channels, Rng& rng);

  int from() const { return from_; }
  int to() const { return to_; }
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(const ParameterCollector<T>& c) const;

  Linear<T> proj;
  OverlappedPatchEmbed<T> down;  // only when from < to

 private:
  int from_ = 1;
  int to_ = 1;
};

/// x_j <- MixFfnBranch(concat(route(j-1 -> j), x_j, route(j+1 -> j))) + x_j,
/// where neighbours outside the pyramid are left out of the concat.
template <typename T>
class LevelFusion {
 public:
  LevelFusion() = default;
  LevelFusion(int level, const std::vector<Index>& channels, int expansion, Rng& rng);

  int level() const { return level_; }
  /// Number of maps in the concat (2 at the pyramid boundary, 3 inside, 1 for a
  /// single-level pyramid).
  int arity() const;
  /// Routed neighbour (or x_j itself) as it enters the concat.
  Tensor<T> route(const PyramidFeatures<T>& features, int from) const;
  Tensor<T> operator()(const PyramidFeatures<T>& features) const;
  void collect(const ParameterCollector<T>& c) const;
  void zero_branch() { ffn.zero_branch(); }

  std::optional<CrossLevelRoute<T>> from_finer;
  std::optional<CrossLevelRoute<T>> from_coarser;
  MixFfn<T> ffn;

 private:
  int level_ = 1;
};

/// One synchronous exchange across all levels: every fusion reads the
/// pre-fusion pyramid.
template <typename T>
class PyramidFusion {
 public:
  PyramidFusion() = default;
  PyramidFusion(const std::vector<Index>& channels, const std::vector<int>& expansions, Rng& rng);

  PyramidFeatures<T> operator()(const PyramidFeatures<T>& features) const;
  void collect(const ParameterCollector<T>& c) const;
  void zero_branches();

  std::vector<LevelFusion<T>> levels;
};

}  // namespace aggpose
