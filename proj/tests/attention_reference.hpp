#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "aggpose/blocks.hpp"

namespace aggpose::testing {

// Textbook multi-head attention over all N tokens, written with plain loops.
inline std::vector<double> reference_attention(const EfficientSelfAttention<double>& m, const Tensor<double>& x) {
  const Index b = x.dim(0), n = x.dim(1), c = x.dim(2);
  const int heads = m.config().heads;
  const Index dh = c / heads;
  auto project = [&](const Linear<double>& l) {
    std::vector<double> out(static_cast<std::size_t>(b * n * c));
    for (Index i = 0; i < b * n; ++i) {
      for (Index o = 0; o < c; ++o) {
        double acc = l.bias.data()[o];
        for (Index k = 0; k < c; ++k) acc += x.data()[i * c + k] * l.weight.data()[k * c + o];
        out[static_cast<std::size_t>(i * c + o)] = acc;
      }
    }
    return out;
  };
  const auto q = project(m.query), k = project(m.key), v = project(m.value);
  std::vector<double> ctx(static_cast<std::size_t>(b * n * c), 0.0);
  for (Index bi = 0; bi < b; ++bi) {
    for (int h = 0; h < heads; ++h) {
      for (Index i = 0; i < n; ++i) {
        std::vector<double> logits(static_cast<std::size_t>(n));
        double mx = -1e300;
        for (Index j = 0; j < n; ++j) {
          double dot = 0;
          for (Index d = 0; d < dh; ++d) {
            dot += q[static_cast<std::size_t>((bi * n + i) * c + h * dh + d)] *
                   k[static_cast<std::size_t>((bi * n + j) * c + h * dh + d)];
          }
          logits[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, logits[static_cast<std::size_t>(j)]);
        }
        double z = 0;
        for (auto& l : logits) z += (l = std::exp(l - mx));
        for (Index j = 0; j < n; ++j) {
          for (Index d = 0; d < dh; ++d) {
            ctx[static_cast<std::size_t>((bi * n + i) * c + h * dh + d)] +=
                logits[static_cast<std::size_t>(j)] / z * v[static_cast<std::size_t>((bi * n + j) * c + h * dh + d)];
          }
        }
      }
    }
  }
  std::vector<double> out(ctx.size());
  for (Index i = 0; i < b * n; ++i) {
    for (Index o = 0; o < c; ++o) {
      double acc = m.out.bias.data()[o];
      for (Index kk = 0; kk < c; ++kk) acc += ctx[static_cast<std::size_t>(i * c + kk)] * m.out.weight.data()[kk * c + o];
      out[static_cast<std::size_t>(i * c + o)] = acc;
    }
  }
  return out;
}

}  // namespace aggpose::testing
