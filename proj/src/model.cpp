#include "aggpose/model.hpp"

#include <cstdio>
#include <stdexcept>

#include "aggpose/profile.hpp"

namespace aggpose {

int ModelConfig::depth(int level, int stage) const {
  if (level < 1 || level > levels() || stage < level || stage > levels()) return 0;
  return depths[static_cast<std::size_t>(level - 1)][static_cast<std::size_t>(stage - level)];
}

void ModelConfig::validate() const {
  auto fail = [this](const std::string& what) {
    throw std::invalid_argument("model config '" + variant + "': " + what);
  };
  const auto count = static_cast<std::size_t>(levels());
  if (count == 0) fail("no levels");
  if (depths.size() != count || heads.size() != count || gamma.size() != count || expansion.size() != count) {
    fail("channels, depths, heads, gamma and expansion must all list one entry per level");
  }
  for (std::size_t i = 0; i < count; ++i) {
    if (channels[i] <= 0) fail("channels must be positive");
    if (i > 0 && channels[i] <= channels[i - 1]) fail("channels must increase strictly with level");
    if (depths[i].size() != count - i) {
      fail("level " + std::to_string(i + 1) + " needs " + std::to_string(count - i) + " stage depths");
    }
    for (int d : depths[i]) {
      if (d < 1) fail("every active level needs at least one block per stage");
    }
    AttentionConfig attn{channels[i], heads[i], gamma[i]};
    try {
      attn.validate();
    } catch (const std::exception& e) {
      fail("level " + std::to_string(i + 1) + ": " + e.what());
    }
    if (expansion[i] < 1) fail("expansion must be >= 1");
  }
  if (num_keypoints < 1) fail("num_keypoints must be >= 1");
  const Index divisor = Index(1) << (count + 1);
  if (input_height <= 0 || input_width <= 0 || input_height % divisor != 0 || input_width % divisor != 0) {
    fail("input size " + std::to_string(input_height) + "x" + std::to_string(input_width) +
         " must be divisible by " + std::to_string(divisor));
  }
  for (std::size_t i = 0; i < count; ++i) {
    const int level = static_cast<int>(i) + 1;
    const int r = AttentionConfig{channels[i], heads[i], gamma[i]}.tile();
    if (level_height(level) % r != 0 || level_width(level) % r != 0) {
      fail("level " + std::to_string(level) + " grid " + std::to_string(level_height(level)) + "x" +
           std::to_string(level_width(level)) + " not divisible by reduction tile " + std::to_string(r));
    }
  }
}

nlohmann::json ModelConfig::to_json() const {
  return nlohmann::json{{"variant", variant},
                        {"channels", channels},
                        {"depths", depths},
                        {"heads", heads},
                        {"gamma", gamma},
                        {"expansion", expansion},
                        {"num_keypoints", num_keypoints},
                        {"input_size", {input_height, input_width}}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  static const char* keys[] = {"variant", "channels", "depths", "heads", "gamma", "expansion", "num_keypoints",
                               "input_size"};
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || key == k;
    if (!known) throw std::invalid_argument("model config: unknown key '" + key + "'");
  }
  ModelConfig cfg;
  const std::string variant = j.value("variant", std::string("custom"));
  const int kp = j.value("num_keypoints", -1);
  if (j.size() == 1 || (j.size() == 2 && kp > 0)) {
    // A bare variant name selects the named preset.
    cfg = named(variant, kp > 0 ? kp : (variant == "aggpose-t" ? 21 : 17));
    return cfg;
  }
  cfg.variant = variant;
  j.at("channels").get_to(cfg.channels);
  j.at("depths").get_to(cfg.depths);
  j.at("heads").get_to(cfg.heads);
  j.at("gamma").get_to(cfg.gamma);
  if (j.contains("expansion")) {
    j.at("expansion").get_to(cfg.expansion);
  } else {
    cfg.expansion.assign(cfg.channels.size(), 4);
  }
  cfg.num_keypoints = j.at("num_keypoints").get<int>();
  const auto size = j.at("input_size").get<std::vector<Index>>();
  if (size.size() != 2) throw std::invalid_argument("model config: input_size must be [height, width]");
  cfg.input_height = size[0];
  cfg.input_width = size[1];
  cfg.validate();
  return cfg;
}

std::string ModelConfig::hash() const {
  const std::string text = to_json().dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ModelConfig ModelConfig::aggpose_l(int num_keypoints) {
  ModelConfig c;
  c.variant = "aggpose-l";
  c.channels = {64, 128, 320, 512};
  c.depths = {{3, 3, 3, 3}, {6, 3, 3}, {40, 3}, {3}};
  c.heads = {1, 2, 5, 8};
  c.gamma = {64, 16, 4, 1};
  c.expansion = {4, 4, 4, 4};
  c.num_keypoints = num_keypoints;
  return c;
}

ModelConfig ModelConfig::aggpose_s(int num_keypoints) {
  ModelConfig c = aggpose_l(num_keypoints);
  c.variant = "aggpose-s";
  c.depths = {{3, 3, 3, 3}, {4, 3, 3}, {6, 3}, {3}};
  return c;
}

ModelConfig ModelConfig::aggpose_t(int num_keypoints) {
  ModelConfig c;
  c.variant = "aggpose-t";
  c.channels = {8, 16};
  c.depths = {{1, 1}, {1}};
  c.heads = {1, 2};
  c.gamma = {16, 4};
  c.expansion = {4, 4};
  c.num_keypoints = num_keypoints;
  c.input_height = 64;
  c.input_width = 48;
  return c;
}

ModelConfig ModelConfig::named(const std::string& name, int num_keypoints) {
  if (name == "aggpose-l") return aggpose_l(num_keypoints);
  if (name == "aggpose-s") return aggpose_s(num_keypoints);
  if (name == "aggpose-t") return aggpose_t(num_keypoints);
  throw std::invalid_argument("unknown model variant '" + name + "' (expected aggpose-l, aggpose-s, aggpose-t)");
}

// ---------------------------------------------------------------------------

template <typename T>
AggPoseModel<T>::AggPoseModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int levels = cfg_.levels();
  stem_ = OverlappedPatchEmbed<T>(PatchEmbedConfig{7, 4, 3, 3, cfg_.channels[0]}, rng);
  for (int stage = 1; stage <= levels; ++stage) {
    if (stage > 1) {
      level_embeds_.emplace_back(
          PatchEmbedConfig{3, 2, 1, cfg_.channels[static_cast<std::size_t>(stage - 2)],
                           cfg_.channels[static_cast<std::size_t>(stage - 1)]},
          rng);
    }
    std::vector<std::vector<TransformerBlock<T>>> stage_blocks;
    for (int level = 1; level <= stage; ++level) {
      const auto li = static_cast<std::size_t>(level - 1);
      AttentionConfig attn{cfg_.channels[li], cfg_.heads[li], cfg_.gamma[li]};
      MixFfnConfig ffn{cfg_.channels[li], cfg_.expansion[li], 0};
      std::vector<TransformerBlock<T>> level_blocks;
      for (int b = 0; b < cfg_.depth(level, stage); ++b) level_blocks.emplace_back(attn, ffn, rng);
      stage_blocks.push_back(std::move(level_blocks));
    }
    blocks_.push_back(std::move(stage_blocks));
    const std::vector<Index> stage_channels(cfg_.channels.begin(), cfg_.channels.begin() + stage);
    const std::vector<int> stage_expansion(cfg_.expansion.begin(), cfg_.expansion.begin() + stage);
    fusions_.emplace_back(stage_channels, stage_expansion, rng);
  }
  head_norm_ = LayerNorm<T>(cfg_.channels[0]);
  head_proj_ = Linear<T>(cfg_.channels[0], cfg_.num_keypoints, rng);
  head_proj_.zero();
  register_parameters();
}

template <typename T>
void AggPoseModel<T>::register_parameters() {
  params_.clear();
  ParameterCollector<T> root(params_, "", 0);
  stem_.collect(root.sub("stage1").sub("embed").at_level(1));
  for (int stage = 1; stage <= cfg_.levels(); ++stage) {
    const auto sc = root.sub("stage" + std::to_string(stage));
    if (stage > 1) level_embeds_[static_cast<std::size_t>(stage - 2)].collect(sc.sub("embed").at_level(stage));
    const auto& stage_blocks = blocks_[static_cast<std::size_t>(stage - 1)];
    for (int level = 1; level <= stage; ++level) {
      const auto lc = sc.sub("level" + std::to_string(level)).at_level(level);
      const auto& level_blocks = stage_blocks[static_cast<std::size_t>(level - 1)];
      for (std::size_t b = 0; b < level_blocks.size(); ++b) level_blocks[b].collect(lc.sub("block" + std::to_string(b)));
    }
    fusions_[static_cast<std::size_t>(stage - 1)].collect(sc.sub("fuse"));
  }
  head_norm_.collect(root.sub("head").sub("norm"));
  head_proj_.collect(root.sub("head").sub("proj"));
}

template <typename T>
typename AggPoseModel<T>::Output AggPoseModel<T>::forward_with_features(const Tensor<T>& images) const {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.input_height ||
      images.dim(3) != cfg_.input_width) {
    throw ShapeError("model: expected images [B,3," + std::to_string(cfg_.input_height) + "," +
                     std::to_string(cfg_.input_width) + "], got " + to_string(images.shape()));
  }
  PyramidFeatures<T> pyramid;
  pyramid.levels.push_back(stem_(images));
  for (int stage = 1; stage <= cfg_.levels(); ++stage) {
    if (stage > 1) pyramid.levels.push_back(level_embeds_[static_cast<std::size_t>(stage - 2)](pyramid.levels.back()));
    const auto& stage_blocks = blocks_[static_cast<std::size_t>(stage - 1)];
    for (int level = 1; level <= stage; ++level) {
      Tensor<T>& map = pyramid.levels[static_cast<std::size_t>(level - 1)];
      const Index h = map.dim(2), w = map.dim(3);
      Tensor<T> tokens = tokens_from_map(map);
      for (const TransformerBlock<T>& block : stage_blocks[static_cast<std::size_t>(level - 1)]) {
        tokens = block(tokens, h, w);
      }
      map = map_from_tokens(tokens, h, w);
    }
    pyramid = fusions_[static_cast<std::size_t>(stage - 1)](pyramid);
  }
  const Tensor<T>& fine = pyramid.levels.front();
  const Index h = fine.dim(2), w = fine.dim(3);
  Tensor<T> heat;
  {
    ScopedTimer timer("head");
    heat = head_proj_(head_norm_(tokens_from_map(fine)));
  }
  return Output{map_from_tokens(heat, h, w), std::move(pyramid)};
}

template <typename T>
Index AggPoseModel<T>::parameter_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

template <typename T>
const Parameter<T>& AggPoseModel<T>::parameter(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("model has no parameter '" + name + "'");
}

template <typename T>
void AggPoseModel<T>::set_frozen_levels(const std::set<int>& levels) {
  frozen_ = levels;
  for (auto& p : params_) p.value.set_requires_grad(levels.count(p.level) == 0);
}

template <typename T>
AggPoseModel<T> AggPoseModel<T>::clone() const {
  AggPoseModel copy(cfg_, 0);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto src = params_[i].value.data();
    auto dst = copy.params_[i].value.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  copy.set_frozen_levels(frozen_);
  return copy;
}

template <typename T>
void AggPoseModel<T>::zero_residual_branches() {
  for (auto& stage : blocks_) {
    for (auto& level : stage) {
      for (auto& block : level) block.zero_branches();
    }
  }
  for (auto& f : fusions_) f.zero_branches();
}

template class AggPoseModel<float>;
template class AggPoseModel<double>;

}  // namespace aggpose
