#include "aggpose/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

#include "aggpose/aggregation.hpp"
#include "aggpose/blocks.hpp"
#include "aggpose/model.hpp"
#include "aggpose/ops.hpp"
#include "aggpose/rng.hpp"

namespace aggpose {

namespace {

using D = double;

Tensor<D> uniform_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<D> t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

// Contraction with a fixed tensor, evaluated without recording.
double probe_value(GradcheckCase& probe, const Tensor<D>& weights) {
  const Tensor<D> out = probe.forward();
  double acc = 0.0;
  for (Index i = 0; i < out.numel(); ++i) acc += out.ptr()[i] * weights.ptr()[i];
  return acc;
}

std::vector<Index> pick_coordinates(Index count, Index quota, Rng& rng) {
  std::vector<Index> idx(static_cast<std::size_t>(count));
  std::iota(idx.begin(), idx.end(), Index{0});
  if (quota >= count) return idx;
  for (Index i = 0; i < quota; ++i) {
    const auto j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(count - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(quota));
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Parameters drawn from [-0.5, 0.5] so every nonlinearity leaves its linear
// regime; layer-norm gains are centred on 1.
void randomize(const ParameterList<D>& params, Rng& rng) {
  for (const auto& p : params) {
    Tensor<D> t = p.value;
    const bool gain = p.name.size() >= 5 && p.name.compare(p.name.size() - 5, 5, "gamma") == 0;
    for (auto& v : t.mutable_data()) v = (gain ? 1.0 : 0.0) + rng.uniform(-0.5, 0.5);
  }
}

template <typename Module>
ParameterList<D> params_of(const Module& m, const std::string& prefix) {
  ParameterList<D> list;
  m.collect(ParameterCollector<D>(list, prefix + ".", 0));
  return list;
}

void add_params(GradcheckCase& c, const ParameterList<D>& params) {
  for (const auto& p : params) c.inputs.emplace_back(p.name, p.value);
}

using Builder = std::function<std::vector<GradcheckCase>(Rng&)>;

std::vector<GradcheckCase> build_patch_embed(Rng& rng) {
  PatchEmbedConfig cfg;
  cfg.in_channels = 3;
  cfg.out_channels = 6;
  auto embed = std::make_shared<OverlappedPatchEmbed<D>>(cfg, rng);
  PatchEmbedConfig inner{3, 2, 1, 4, 6};
  auto embed2 = std::make_shared<OverlappedPatchEmbed<D>>(inner, rng);
  std::vector<GradcheckCase> cases(2);
  const auto p1 = params_of(*embed, "embed7");
  const auto p2 = params_of(*embed2, "embed3");
  randomize(p1, rng);
  randomize(p2, rng);
  Tensor<D> x = uniform_tensor({2, 3, 12, 8}, rng);
  cases[0].inputs.emplace_back("x", x);
  add_params(cases[0], p1);
  cases[0].forward = [embed, x] { return (*embed)(x); };
  Tensor<D> y = uniform_tensor({1, 4, 6, 4}, rng);
  cases[1].inputs.emplace_back("x", y);
  add_params(cases[1], p2);
  cases[1].forward = [embed2, y] { return (*embed2)(y); };
  return cases;
}

std::vector<GradcheckCase> build_attention(Rng& rng) {
  std::vector<GradcheckCase> cases;
  for (int reduction : {1, 4}) {
    AttentionConfig cfg{8, 2, reduction};
    auto attn = std::make_shared<EfficientSelfAttention<D>>(cfg, rng);
    const auto params = params_of(*attn, "attn_r" + std::to_string(reduction));
    randomize(params, rng);
    Tensor<D> x = uniform_tensor({2, 16, 8}, rng);
    GradcheckCase c;
    c.inputs.emplace_back("x", x);
    add_params(c, params);
    c.forward = [attn, x] { return (*attn)(x, 4, 4); };
    cases.push_back(std::move(c));
  }
  return cases;
}

std::vector<GradcheckCase> build_mix_ffn(Rng& rng) {
  std::vector<GradcheckCase> cases;
  MixFfnConfig cfg{6, 2, 0};
  auto ffn = std::make_shared<MixFfn<D>>(cfg, rng);
  const auto params = params_of(*ffn, "ffn");
  randomize(params, rng);
  Tensor<D> x = uniform_tensor({2, 12, 6}, rng);
  GradcheckCase c;
  c.inputs.emplace_back("x", x);
  add_params(c, params);
  c.forward = [ffn, x] { return (*ffn)(x, 4, 3); };
  cases.push_back(std::move(c));
  return cases;
}

std::vector<GradcheckCase> build_transformer_block(Rng& rng) {
  auto block = std::make_shared<TransformerBlock<D>>(AttentionConfig{8, 2, 4}, MixFfnConfig{8, 2, 0}, rng);
  const auto params = params_of(*block, "block");
  randomize(params, rng);
  Tensor<D> x = uniform_tensor({1, 16, 8}, rng);
  GradcheckCase c;
  c.inputs.emplace_back("x", x);
  add_params(c, params);
  c.forward = [block, x] { return (*block)(x, 4, 4); };
  return {std::move(c)};
}

std::vector<GradcheckCase> build_routing(Rng& rng) {
  std::vector<GradcheckCase> cases;
  auto down = std::make_shared<CrossLevelRoute<D>>(1, 2, 4, 6, rng);
  auto up = std::make_shared<CrossLevelRoute<D>>(2, 1, 6, 4, rng);
  const auto pd = params_of(*down, "route12");
  const auto pu = params_of(*up, "route21");
  randomize(pd, rng);
  randomize(pu, rng);
  Tensor<D> fine = uniform_tensor({2, 4, 8, 6}, rng);
  Tensor<D> coarse = uniform_tensor({2, 6, 4, 3}, rng);
  GradcheckCase c1;
  c1.inputs.emplace_back("x", fine);
  add_params(c1, pd);
  c1.forward = [down, fine] { return (*down)(fine); };
  GradcheckCase c2;
  c2.inputs.emplace_back("x", coarse);
  add_params(c2, pu);
  c2.forward = [up, coarse] { return (*up)(coarse); };
  cases.push_back(std::move(c1));
  cases.push_back(std::move(c2));
  return cases;
}

std::vector<GradcheckCase> build_fusion(Rng& rng) {
  std::vector<GradcheckCase> cases;
  // Synchronous exchange on a 2-level pyramid; both outputs are contracted.
  {
    const std::vector<Index> channels{4, 6};
    auto fuse = std::make_shared<PyramidFusion<D>>(channels, std::vector<int>{2, 2}, rng);
    const auto params = params_of(*fuse, "fuse2");
    randomize(params, rng);
    Tensor<D> l1 = uniform_tensor({1, 4, 8, 4}, rng);
    Tensor<D> l2 = uniform_tensor({1, 6, 4, 2}, rng);
    GradcheckCase c;
    c.inputs.emplace_back("level1", l1);
    c.inputs.emplace_back("level2", l2);
    add_params(c, params);
    c.forward = [fuse, l1, l2] {
      const auto out = (*fuse)(PyramidFeatures<D>{{l1, l2}});
      return concat(std::vector<Tensor<D>>{reshape(out.levels[0], {out.levels[0].numel()}), reshape(out.levels[1], {out.levels[1].numel()})}, 0);
    };
    cases.push_back(std::move(c));
  }
  // Middle level of a 3-level pyramid: both neighbours enter the concat.
  {
    const std::vector<Index> channels{4, 6, 8};
    auto fuse = std::make_shared<LevelFusion<D>>(2, channels, 2, rng);
    const auto params = params_of(*fuse, "fuse3_level2");
    randomize(params, rng);
    Tensor<D> l1 = uniform_tensor({1, 4, 8, 8}, rng);
    Tensor<D> l2 = uniform_tensor({1, 6, 4, 4}, rng);
    Tensor<D> l3 = uniform_tensor({1, 8, 2, 2}, rng);
    GradcheckCase c;
    c.inputs.emplace_back("level1", l1);
    c.inputs.emplace_back("level2", l2);
    c.inputs.emplace_back("level3", l3);
    add_params(c, params);
    c.forward = [fuse, l1, l2, l3] { return (*fuse)(PyramidFeatures<D>{{l1, l2, l3}}); };
    cases.push_back(std::move(c));
  }
  return cases;
}

std::vector<GradcheckCase> build_head(Rng& rng) {
  auto norm = std::make_shared<LayerNorm<D>>(8);
  auto proj = std::make_shared<Linear<D>>(8, 5, rng);
  ParameterList<D> params;
  ParameterCollector<D> root(params, "head.", 0);
  norm->collect(root.sub("norm"));
  proj->collect(root.sub("proj"));
  randomize(params, rng);
  Tensor<D> x = uniform_tensor({1, 8, 4, 3}, rng);
  GradcheckCase c;
  c.inputs.emplace_back("x", x);
  add_params(c, params);
  c.forward = [norm, proj, x] {
    const Tensor<D> tokens = (*proj)((*norm)(tokens_from_map(x)));
    return map_from_tokens(tokens, 4, 3);
  };
  return {std::move(c)};
}

std::vector<GradcheckCase> build_loss(Rng& rng) {
  Tensor<D> pred = uniform_tensor({2, 3, 4, 3}, rng);
  Tensor<D> target = uniform_tensor({2, 3, 4, 3}, rng);
  Tensor<D> mask({2, 3});
  for (auto& v : mask.mutable_data()) v = rng.uniform() < 0.6 ? 1.0 : 0.0;
  mask.mutable_data()[0] = 1.0;
  GradcheckCase c;
  c.inputs.emplace_back("pred", pred);
  c.inputs.emplace_back("target", target);
  c.forward = [pred, target, mask] { return masked_mse(pred, target, mask); };
  return {std::move(c)};
}

std::vector<GradcheckCase> build_end_to_end(Rng& rng) {
  ModelConfig cfg = ModelConfig::aggpose_t(5);
  cfg.input_height = 32;
  cfg.input_width = 32;
  auto model = std::make_shared<AggPoseModel<D>>(cfg, rng.next_u64());
  randomize(model->parameters(), rng);
  Tensor<D> x = uniform_tensor({1, 3, 32, 32}, rng);
  Tensor<D> target = uniform_tensor({1, 5, 8, 8}, rng, 0.0, 1.0);
  Tensor<D> mask({1, 5}, 1.0);
  mask.mutable_data()[2] = 0.0;
  GradcheckCase c;
  c.inputs.emplace_back("image", x);
  add_params(c, model->parameters());
  c.forward = [model, x, target, mask] { return masked_mse(model->forward(x), target, mask); };
  return {std::move(c)};
}

struct ScopeSpec {
  Builder build;
  double tolerance;
  Index max_coordinates;
};

const std::map<std::string, ScopeSpec>& registry() {
  static const std::map<std::string, ScopeSpec> r = {
      {"patch_embed", {build_patch_embed, 1e-5, 0}},
      {"attention", {build_attention, 1e-5, 0}},
      {"mix_ffn", {build_mix_ffn, 1e-5, 0}},
      {"transformer_block", {build_transformer_block, 1e-5, 0}},
      {"routing", {build_routing, 1e-5, 0}},
      {"fusion", {build_fusion, 1e-5, 0}},
      {"head", {build_head, 1e-5, 0}},
      {"loss", {build_loss, 1e-5, 0}},
      {"end_to_end", {build_end_to_end, 1e-4, 5000}},
  };
  return r;
}

}  // namespace

std::vector<TensorError> gradcheck(GradcheckCase& probe, std::uint64_t rng_seed, const GradcheckOptions& options) {
  if (!probe.forward) throw std::invalid_argument("gradcheck: probe has no forward function");
  Rng rng(rng_seed);
  const Tensor<D> first = probe.forward();
  Tensor<D> weights(first.shape());
  for (auto& v : weights.mutable_data()) v = rng.normal();

  for (auto& [name, t] : probe.inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<D> tape;
    Tensor<D> loss;
    {
      auto rec = tape.record();
      loss = sum(mul(probe.forward(), weights));
    }
    // A forward that never touches the inputs records nothing; its analytic
    // gradient is zero everywhere.
    if (tape.size() > 0) tape.backward(loss);
  }

  Index total = 0;
  for (const auto& [name, t] : probe.inputs) total += t.numel();

  struct Sums {
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    Index checked = 0;
  };
  std::vector<Sums> sums;
  double total_a2 = 0.0;
  for (auto& [name, t] : probe.inputs) {
    Index quota = t.numel();
    if (options.max_coordinates > 0 && total > options.max_coordinates) {
      const auto share = static_cast<Index>(std::llround(static_cast<double>(options.max_coordinates) *
                                                         static_cast<double>(t.numel()) / static_cast<double>(total)));
      quota = std::min(t.numel(), std::max(std::min(t.numel(), options.min_per_input), share));
    }
    const auto coords = pick_coordinates(t.numel(), quota, rng);
    const auto grad = t.grad();
    Tensor<D> handle = t;
    auto values = handle.mutable_data();
    Sums s;
    for (Index i : coords) {
      const auto u = static_cast<std::size_t>(i);
      const double saved = values[u];
      values[u] = saved + options.epsilon;
      const double plus = probe_value(probe, weights);
      values[u] = saved - options.epsilon;
      const double minus = probe_value(probe, weights);
      values[u] = saved;
      const double numeric = (plus - minus) / (2.0 * options.epsilon);
      const double analytic = grad.empty() ? 0.0 : grad[u];
      s.diff2 += (analytic - numeric) * (analytic - numeric);
      s.a2 += analytic * analytic;
      s.n2 += numeric * numeric;
    }
    s.checked = static_cast<Index>(coords.size());
    total_a2 += s.a2;
    sums.push_back(s);
  }
  const double floor = std::max(options.relative_floor * std::sqrt(total_a2), std::numeric_limits<double>::min());
  std::vector<TensorError> errors;
  for (std::size_t i = 0; i < sums.size(); ++i) {
    const double denom = std::max(std::sqrt(std::max(sums[i].a2, sums[i].n2)), floor);
    errors.push_back({probe.inputs[i].first, std::sqrt(sums[i].diff2) / denom, sums[i].checked});
  }
  for (auto& [name, t] : probe.inputs) t.zero_grad();
  return errors;
}

const std::vector<std::string>& gradcheck_scopes() {
  static const std::vector<std::string> names = {"patch_embed", "attention", "mix_ffn", "transformer_block", "routing",
                                                 "fusion",      "head",      "loss",    "end_to_end"};
  return names;
}

bool is_gradcheck_scope(const std::string& name) { return registry().count(name) > 0; }

ScopeReport run_gradcheck_scope(const std::string& scope, int seeds, std::uint64_t base_seed) {
  const auto it = registry().find(scope);
  if (it == registry().end()) throw std::invalid_argument("unknown gradcheck scope '" + scope + "'");
  if (seeds < 1) throw std::invalid_argument("gradcheck needs at least one seed");
  const auto start = std::chrono::steady_clock::now();
  ScopeReport report;
  report.scope = scope;
  report.tolerance = it->second.tolerance;
  report.seeds = seeds;
  GradcheckOptions options;
  options.max_coordinates = it->second.max_coordinates;
  for (int s = 0; s < seeds; ++s) {
    const std::uint64_t seed = derive_seed(base_seed, static_cast<std::uint64_t>(s));
    Rng rng(seed);
    auto cases = it->second.build(rng);
    for (std::size_t c = 0; c < cases.size(); ++c) {
      for (const auto& e : gradcheck(cases[c], derive_seed(seed, c, 1), options)) {
        report.coordinates += e.checked;
        if (e.rel_error >= report.worst_rel_error) {
          report.worst_rel_error = e.rel_error;
          report.worst_tensor = e.name;
        }
      }
    }
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace aggpose
