#include "aggpose/aggregation.hpp"

#include "aggpose/profile.hpp"

namespace aggpose {

template <typename T>
void PyramidFeatures<T>::validate(const std::vector<Index>& channels) const {
  if (levels.empty()) throw ShapeError("pyramid: no levels");
  if (!channels.empty() && channels.size() != levels.size()) {
    throw ShapeError("pyramid: " + std::to_string(levels.size()) + " levels but " +
                     std::to_string(channels.size()) + " channel entries");
  }
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const Tensor<T>& x = levels[i];
    if (x.rank() != 4) throw ShapeError("pyramid: level " + std::to_string(i + 1) + " is not [B,C,H,W]");
    if (!channels.empty() && x.dim(1) != channels[i]) {
      throw ShapeError("pyramid: level " + std::to_string(i + 1) + " has " + std::to_string(x.dim(1)) +
                       " channels, expected " + std::to_string(channels[i]));
    }
    if (i == 0) continue;
    const Tensor<T>& prev = levels[i - 1];
    if (x.dim(0) != prev.dim(0) || prev.dim(2) != 2 * x.dim(2) || prev.dim(3) != 2 * x.dim(3)) {
      throw ShapeError("pyramid: level " + std::to_string(i + 1) + " " + to_string(x.shape()) +
                       " is not half of level " + std::to_string(i) + " " + to_string(prev.shape()));
    }
  }
}

// ---------------------------------------------------------------------------

template <typename T>
CrossLevelRoute<T>::CrossLevelRoute(int from, int to, Index from_channels, Index to_channels, Rng& rng)
    : from_(from), to_(to) {
  if (from < 1 || to < 1 || from - to > 1 || to - from > 1) {
    throw ShapeError("route: levels " + std::to_string(from) + " -> " + std::to_string(to) +
                     " are not adjacent");
  }
  if (from == to) return;
  proj = Linear<T>(from_channels, to_channels, rng);
  if (from < to) {
    down = OverlappedPatchEmbed<T>(PatchEmbedConfig{3, 2, 1, to_channels, to_channels}, rng);
  }
}

template <typename T>
Tensor<T> CrossLevelRoute<T>::operator()(const Tensor<T>& x) const {
  if (from_ == to_) return x;
  const Index h = x.dim(2), w = x.dim(3);
  const Tensor<T> projected = map_from_tokens(gelu(proj(tokens_from_map(x))), h, w);
  if (from_ < to_) return down(projected);
  return bilinear_upsample(projected, 2);
}

template <typename T>
void CrossLevelRoute<T>::collect(const ParameterCollector<T>& c) const {
  if (from_ == to_) return;
  proj.collect(c.sub("proj"));
  if (from_ < to_) down.collect(c.sub("embed"));
}

// ---------------------------------------------------------------------------

template <typename T>
LevelFusion<T>::LevelFusion(int level, const std::vector<Index>& channels, int expansion, Rng& rng)
    : level_(level) {
  const int count = static_cast<int>(channels.size());
  if (level < 1 || level > count) {
    throw ShapeError("fusion: level " + std::to_string(level) + " outside pyramid of " + std::to_string(count));
  }
  const Index cj = channels[static_cast<std::size_t>(level - 1)];
  if (level > 1) {
    from_finer.emplace(level - 1, level, channels[static_cast<std::size_t>(level - 2)], cj, rng);
  }
  if (level < count) {
    from_coarser.emplace(level + 1, level, channels[static_cast<std::size_t>(level)], cj, rng);
  }
  MixFfnConfig cfg;
  cfg.channels = cj;
  cfg.expansion = expansion;
  cfg.in_channels = cj * arity();
  ffn = MixFfn<T>(cfg, rng);
}

template <typename T>
int LevelFusion<T>::arity() const {
  return 1 + (from_finer ? 1 : 0) + (from_coarser ? 1 : 0);
}

template <typename T>
Tensor<T> LevelFusion<T>::route(const PyramidFeatures<T>& features, int from) const {
  if (from == level_) return features.level(level_);
  const CrossLevelRoute<T>* r = nullptr;
  if (from == level_ - 1 && from_finer) r = &*from_finer;
  if (from == level_ + 1 && from_coarser) r = &*from_coarser;
  if (r == nullptr) {
    throw ShapeError("fusion: no route from level " + std::to_string(from) + " to level " + std::to_string(level_));
  }
  Tensor<T> out = (*r)(features.level(from));
  const Tensor<T>& target = features.level(level_);
  if (out.shape() != target.shape()) {
    throw ShapeError("fusion: routed level " + std::to_string(from) + " has shape " + to_string(out.shape()) +
                     ", level " + std::to_string(level_) + " is " + to_string(target.shape()));
  }
  return out;
}

template <typename T>
Tensor<T> LevelFusion<T>::operator()(const PyramidFeatures<T>& features) const {
  if (features.size() < level_) throw ShapeError("fusion: pyramid too small for level " + std::to_string(level_));
  ScopedTimer timer("fusion");
  std::vector<Tensor<T>> parts;
  if (from_finer) parts.push_back(route(features, level_ - 1));
  parts.push_back(features.level(level_));
  if (from_coarser) parts.push_back(route(features, level_ + 1));
  const Tensor<T>& x = features.level(level_);
  const Index h = x.dim(2), w = x.dim(3);
  const Tensor<T> joined = parts.size() == 1 ? parts[0] : concat(parts, 1);
  const Tensor<T> update = ffn.branch(tokens_from_map(joined), h, w);
  return add(x, map_from_tokens(update, h, w));
}

template <typename T>
void LevelFusion<T>::collect(const ParameterCollector<T>& c) const {
  if (from_finer) from_finer->collect(c.sub("from" + std::to_string(level_ - 1)));
  if (from_coarser) from_coarser->collect(c.sub("from" + std::to_string(level_ + 1)));
  ffn.collect(c.sub("ffn"));
}

// ---------------------------------------------------------------------------

template <typename T>
PyramidFusion<T>::PyramidFusion(const std::vector<Index>& channels, const std::vector<int>& expansions, Rng& rng) {
  if (channels.empty()) throw ShapeError("fusion: empty pyramid");
  if (expansions.size() < channels.size()) throw ShapeError("fusion: missing expansion ratios");
  for (int j = 1; j <= static_cast<int>(channels.size()); ++j) {
    levels.emplace_back(j, channels, expansions[static_cast<std::size_t>(j - 1)], rng);
  }
}

template <typename T>
PyramidFeatures<T> PyramidFusion<T>::operator()(const PyramidFeatures<T>& features) const {
  if (features.size() == 0) throw ShapeError("fusion: empty pyramid");
  if (features.size() != static_cast<int>(levels.size())) {
    throw ShapeError("fusion: pyramid has " + std::to_string(features.size()) + " levels, module expects " +
                     std::to_string(levels.size()));
  }
  features.validate();
  PyramidFeatures<T> out;
  out.levels.reserve(levels.size());
  for (const LevelFusion<T>& f : levels) out.levels.push_back(f(features));
  return out;
}

template <typename T>
void PyramidFusion<T>::collect(const ParameterCollector<T>& c) const {
  for (const LevelFusion<T>& f : levels) {
    f.collect(c.sub("level" + std::to_string(f.level())).at_level(f.level()));
  }
}

template <typename T>
void PyramidFusion<T>::zero_branches() {
  for (LevelFusion<T>& f : levels) f.zero_branch();
}

template struct PyramidFeatures<float>;
template struct PyramidFeatures<double>;
template class CrossLevelRoute<float>;
template class CrossLevelRoute<double>;
template class LevelFusion<float>;
template class LevelFusion<double>;
template class PyramidFusion<float>;
template class PyramidFusion<double>;

}  // namespace aggpose
