#include "aggpose/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace aggpose {

namespace {

template <typename T>
void require_rank(const char* op, const Tensor<T>& x, int rank) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(x.shape()));
  }
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(Index m, Index n, Index k, const T* a, const T* b, T* c) {
  for (Index i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (Index p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (Index j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(Index m, Index n, Index k, const T* a, const T* b, T* c) {
  for (Index p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (Index i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + i * n;
      for (Index j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T, via an explicit transpose of B.
template <typename T>
void gemm_nt(Index m, Index n, Index k, const T* a, const T* b, T* c) {
  std::vector<T> bt(static_cast<std::size_t>(k * n));
  for (Index j = 0; j < n; ++j) {
    for (Index p = 0; p < k; ++p) bt[static_cast<std::size_t>(p * n + j)] = b[j * k + p];
  }
  gemm_nn(m, n, k, a, bt.data(), c);
}

Shape strides_of(const Shape& shape) {
  Shape strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    strides[static_cast<std::size_t>(i)] =
        strides[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
  }
  return strides;
}

// Walks an axis permutation of a tensor of shape `in_shape` in output order,
// calling visit(in_offset, out_offset, run_length, in_step) for each run of the
// innermost output axis.
template <typename Visit>
void permute_walk(const Shape& in_shape, const std::vector<int>& axes, Visit&& visit) {
  const std::size_t r = axes.size();
  const Index total = numel(in_shape);
  if (r == 0) {
    visit(Index(0), Index(0), Index(1), Index(1));
    return;
  }
  const Shape in_strides = strides_of(in_shape);
  Shape out_shape(r), step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[static_cast<std::size_t>(axes[i])];
    step[i] = in_strides[static_cast<std::size_t>(axes[i])];
  }
  const Index inner = out_shape[r - 1];
  const Index inner_step = step[r - 1];
  std::vector<Index> counter(r, 0);
  Index in_off = 0;
  for (Index out = 0; out < total; out += inner) {
    visit(in_off, out, inner, inner_step);
    for (int ax = static_cast<int>(r) - 2; ax >= 0; --ax) {
      const auto a = static_cast<std::size_t>(ax);
      ++counter[a];
      in_off += step[a];
      if (counter[a] < out_shape[a]) break;
      in_off -= step[a] * out_shape[a];
      counter[a] = 0;
    }
  }
}

template <typename T>
void accumulate(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Products

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const bool batched = a.rank() == 3;
  if (!((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3)) ||
      a.dim(-1) != b.dim(-2) || (batched && a.dim(0) != b.dim(0))) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const Index batch = batched ? a.dim(0) : 1;
  const Index m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  Tensor<T> out(out_shape);
  for (Index i = 0; i < batch; ++i) {
    gemm_nn(m, n, k, a.ptr() + i * m * k, b.ptr() + i * k * n, out.mutable_ptr() + i * m * n);
  }
  if (auto* tape = detail::tape_for(out, {&a, &b})) {
    tape->push([a, b, out, batch, m, n, k]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      if (a.requires_grad()) {
        T* ga = a.grad_buffer().data();
        for (Index i = 0; i < batch; ++i) gemm_nt(m, k, n, g + i * m * n, b.ptr() + i * k * n, ga + i * m * k);
      }
      if (b.requires_grad()) {
        T* gb = b.grad_buffer().data();
        for (Index i = 0; i < batch; ++i) gemm_tn(k, n, m, a.ptr() + i * m * k, g + i * m * n, gb + i * k * n);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
    throw ShapeError("matmul_nt: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const Index batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  Tensor<T> out(Shape{batch, m, n});
  for (Index i = 0; i < batch; ++i) {
    gemm_nt(m, n, k, a.ptr() + i * m * k, b.ptr() + i * n * k, out.mutable_ptr() + i * m * n);
  }
  if (auto* tape = detail::tape_for(out, {&a, &b})) {
    tape->push([a, b, out, batch, m, n, k]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      if (a.requires_grad()) {
        T* ga = a.grad_buffer().data();
        for (Index i = 0; i < batch; ++i) gemm_nn(m, k, n, g + i * m * n, b.ptr() + i * n * k, ga + i * m * k);
      }
      if (b.requires_grad()) {
        T* gb = b.grad_buffer().data();
        for (Index i = 0; i < batch; ++i) gemm_tn(n, k, m, g + i * m * n, a.ptr() + i * m * k, gb + i * n * k);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (w.rank() != 2 || x.rank() < 1 || x.dim(-1) != w.dim(0) ||
      (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(1)))) {
    throw ShapeError("linear: incompatible shapes x=" + to_string(x.shape()) + " w=" +
                     to_string(w.shape()) + (bias.defined() ? " b=" + to_string(bias.shape()) : ""));
  }
  const Index k = w.dim(0), n = w.dim(1);
  const Index rows = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  T* o = out.mutable_ptr();
  if (bias.defined()) {
    for (Index r = 0; r < rows; ++r) std::copy(bias.ptr(), bias.ptr() + n, o + r * n);
  }
  gemm_nn(rows, n, k, x.ptr(), w.ptr(), o);
  if (auto* tape = detail::tape_for(out, {&x, &w, &bias})) {
    tape->push([x, w, bias, out, rows, n, k]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      if (x.requires_grad()) gemm_nt(rows, k, n, g, w.ptr(), x.grad_buffer().data());
      if (w.requires_grad()) gemm_tn(k, n, rows, x.ptr(), g, w.grad_buffer().data());
      if (bias.defined() && bias.requires_grad()) {
        T* gb = bias.grad_buffer().data();
        for (Index r = 0; r < rows; ++r) {
          for (Index j = 0; j < n; ++j) gb[j] += g[r * n + j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  T* o = out.mutable_ptr();
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  const Index n = a.numel();
  for (Index i = 0; i < n; ++i) o[i] = pa[i] + pb[i];
  if (auto* tape = detail::tape_for(out, {&a, &b})) {
    tape->push([a, b, out]() mutable {
      if (!out.has_grad()) return;
      if (a.requires_grad()) accumulate(a.grad_buffer(), out.grad());
      if (b.requires_grad()) accumulate(b.grad_buffer(), out.grad());
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  Tensor<T> out(a.shape());
  T* o = out.mutable_ptr();
  const Index n = a.numel();
  for (Index i = 0; i < n; ++i) o[i] = a.ptr()[i] - b.ptr()[i];
  if (auto* tape = detail::tape_for(out, {&a, &b})) {
    tape->push([a, b, out]() mutable {
      if (!out.has_grad()) return;
      if (a.requires_grad()) accumulate(a.grad_buffer(), out.grad());
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        auto g = out.grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  T* o = out.mutable_ptr();
  const Index n = a.numel();
  for (Index i = 0; i < n; ++i) o[i] = a.ptr()[i] * b.ptr()[i];
  if (auto* tape = detail::tape_for(out, {&a, &b})) {
    tape->push([a, b, out, n]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      if (a.requires_grad()) {
        T* ga = a.grad_buffer().data();
        for (Index i = 0; i < n; ++i) ga[i] += g[i] * b.ptr()[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad_buffer().data();
        for (Index i = 0; i < n; ++i) gb[i] += g[i] * a.ptr()[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  const Index n = a.numel();
  for (Index i = 0; i < n; ++i) out.mutable_ptr()[i] = a.ptr()[i] * factor;
  if (auto* tape = detail::tape_for(out, {&a})) {
    tape->push([a, out, factor, n]() mutable {
      if (!out.has_grad()) return;
      T* ga = a.grad_buffer().data();
      const T* g = out.grad().data();
      for (Index i = 0; i < n; ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.rank() != 1 || x.rank() < 1 || x.dim(-1) != bias.dim(0)) {
    throw ShapeError("add_bias: bias " + to_string(bias.shape()) + " does not match last axis of " +
                     to_string(x.shape()));
  }
  const Index n = bias.dim(0);
  const Index rows = x.numel() / n;
  Tensor<T> out(x.shape());
  for (Index r = 0; r < rows; ++r) {
    for (Index j = 0; j < n; ++j) out.mutable_ptr()[r * n + j] = x.ptr()[r * n + j] + bias.ptr()[j];
  }
  if (auto* tape = detail::tape_for(out, {&x, &bias})) {
    tape->push([x, bias, out, rows, n]() mutable {
      if (!out.has_grad()) return;
      if (x.requires_grad()) accumulate(x.grad_buffer(), out.grad());
      if (bias.requires_grad()) {
        T* gb = bias.grad_buffer().data();
        const T* g = out.grad().data();
        for (Index r = 0; r < rows; ++r) {
          for (Index j = 0; j < n; ++j) gb[j] += g[r * n + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  Tensor<T> out(x.shape());
  const Index n = x.numel();
  for (Index i = 0; i < n; ++i) {
    const T v = x.ptr()[i];
    out.mutable_ptr()[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  if (auto* tape = detail::tape_for(out, {&x})) {
    tape->push([x, out, n, inv_sqrt2]() mutable {
      if (!out.has_grad()) return;
      const T inv_sqrt_2pi = T(0.39894228040143267794);
      T* gx = x.grad_buffer().data();
      const T* g = out.grad().data();
      for (Index i = 0; i < n; ++i) {
        const T v = x.ptr()[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const Index c = x.dim(-1);
  if ((gamma.defined() && (gamma.rank() != 1 || gamma.dim(0) != c)) ||
      (beta.defined() && (beta.rank() != 1 || beta.dim(0) != c))) {
    throw ShapeError("layer_norm: affine parameters do not match last axis of " + to_string(x.shape()));
  }
  const Index rows = x.numel() / c;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<T> rstd(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * c;
    T mu = 0;
    for (Index j = 0; j < c; ++j) mu += xr[j];
    mu /= T(c);
    T var = 0;
    for (Index j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= T(c);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[static_cast<std::size_t>(r)] = rs;
    T* o = out.mutable_ptr() + r * c;
    T* xh = xhat.data() + r * c;
    for (Index j = 0; j < c; ++j) {
      xh[j] = (xr[j] - mu) * rs;
      T v = xh[j];
      if (gamma.defined()) v *= gamma.ptr()[j];
      if (beta.defined()) v += beta.ptr()[j];
      o[j] = v;
    }
  }
  if (auto* tape = detail::tape_for(out, {&x, &gamma, &beta})) {
    tape->push([x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), rows, c]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      if (gamma.defined() && gamma.requires_grad()) {
        T* gg = gamma.grad_buffer().data();
        for (Index r = 0; r < rows; ++r) {
          for (Index j = 0; j < c; ++j) gg[j] += g[r * c + j] * xhat[static_cast<std::size_t>(r * c + j)];
        }
      }
      if (beta.defined() && beta.requires_grad()) {
        T* gb = beta.grad_buffer().data();
        for (Index r = 0; r < rows; ++r) {
          for (Index j = 0; j < c; ++j) gb[j] += g[r * c + j];
        }
      }
      if (!x.requires_grad()) return;
      T* gx = x.grad_buffer().data();
      std::vector<T> dxh(static_cast<std::size_t>(c));
      for (Index r = 0; r < rows; ++r) {
        const T* xh = xhat.data() + r * c;
        T mean_d = 0, mean_dx = 0;
        for (Index j = 0; j < c; ++j) {
          T d = g[r * c + j];
          if (gamma.defined()) d *= gamma.ptr()[j];
          dxh[static_cast<std::size_t>(j)] = d;
          mean_d += d;
          mean_dx += d * xh[j];
        }
        mean_d /= T(c);
        mean_dx /= T(c);
        const T rs = rstd[static_cast<std::size_t>(r)];
        for (Index j = 0; j < c; ++j) {
          gx[r * c + j] += rs * (dxh[static_cast<std::size_t>(j)] - mean_d - xh[j] * mean_dx);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_lastaxis(const Tensor<T>& x) {
  const Index c = x.dim(-1);
  const Index rows = x.numel() / c;
  for (Index i = 0; i < x.numel(); ++i) {
    if (!std::isfinite(x.ptr()[i])) throw NumericError("softmax: non-finite input value");
  }
  Tensor<T> out(x.shape());
  for (Index r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * c;
    T* o = out.mutable_ptr() + r * c;
    const T mx = *std::max_element(xr, xr + c);
    T total = 0;
    for (Index j = 0; j < c; ++j) {
      o[j] = std::exp(xr[j] - mx);
      total += o[j];
    }
    const T inv = T(1) / total;
    for (Index j = 0; j < c; ++j) o[j] *= inv;
  }
  if (auto* tape = detail::tape_for(out, {&x})) {
    tape->push([x, out, rows, c]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      const T* y = out.ptr();
      T* gx = x.grad_buffer().data();
      for (Index r = 0; r < rows; ++r) {
        T dot = 0;
        for (Index j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
        for (Index j = 0; j < c; ++j) gx[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (auto* tape = detail::tape_for(out, {&x})) {
    tape->push([x, out]() mutable {
      if (!out.has_grad()) return;
      accumulate(x.grad_buffer(), out.grad());
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& axes) {
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) {
    throw ShapeError("permute: axis list length does not match rank of " + to_string(x.shape()));
  }
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  Shape out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int a = axes[static_cast<std::size_t>(i)];
    if (a < 0 || a >= r || seen[static_cast<std::size_t>(a)]) {
      throw ShapeError("permute: invalid axis permutation for " + to_string(x.shape()));
    }
    seen[static_cast<std::size_t>(a)] = true;
    out_shape[static_cast<std::size_t>(i)] = x.dim(a);
  }
  Tensor<T> out(out_shape);
  const T* src = x.ptr();
  T* dst = out.mutable_ptr();
  permute_walk(x.shape(), axes, [&](Index in_off, Index out_off, Index len, Index stride) {
    for (Index j = 0; j < len; ++j) dst[out_off + j] = src[in_off + j * stride];
  });
  if (auto* tape = detail::tape_for(out, {&x})) {
    tape->push([x, out, axes]() mutable {
      if (!out.has_grad()) return;
      T* gx = x.grad_buffer().data();
      const T* g = out.grad().data();
      permute_walk(x.shape(), axes, [&](Index in_off, Index out_off, Index len, Index stride) {
        for (Index j = 0; j < len; ++j) gx[in_off + j * stride] += g[out_off + j];
      });
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int r = parts[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range for " + to_string(parts[0].shape()));
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (static_cast<int>(s.size()) != r) throw ShapeError("concat: rank mismatch " + to_string(s));
    out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
    s[static_cast<std::size_t>(axis)] = out_shape[static_cast<std::size_t>(axis)];
    for (int i = 0; i < r; ++i) {
      if (i != axis && s[static_cast<std::size_t>(i)] != parts[0].shape()[static_cast<std::size_t>(i)]) {
        throw ShapeError("concat: shape mismatch " + to_string(p.shape()) + " vs " +
                         to_string(parts[0].shape()));
      }
    }
  }
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<std::size_t>(i)];
  const Index out_row = out_shape[static_cast<std::size_t>(axis)] * inner;
  Tensor<T> out(out_shape);
  Index offset = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    const Index row = p.dim(axis) * inner;
    for (Index o = 0; o < outer; ++o) {
      std::copy(p.ptr() + o * row, p.ptr() + (o + 1) * row, out.mutable_ptr() + o * out_row + offset);
    }
    offset += row;
    needs_grad = needs_grad || p.requires_grad();
  }
  Tape<T>* tape = Tape<T>::active();
  if (tape != nullptr && needs_grad) {
    out.set_requires_grad(true);
    tape->push([parts, out, axis, outer, inner, out_row]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      Index off = 0;
      for (auto& p : parts) {
        const Index row = p.dim(axis) * inner;
        if (p.requires_grad()) {
          T* gp = p.grad_buffer().data();
          for (Index o = 0; o < outer; ++o) {
            for (Index j = 0; j < row; ++j) gp[o * row + j] += g[o * out_row + off + j];
          }
        }
        off += row;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, Index start, Index length) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r || start < 0 || length <= 0 || start + length > x.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") invalid for axis " + std::to_string(axis) + " of " + to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  const Index in_row = x.dim(axis) * inner;
  const Index out_row = length * inner;
  const Index off = start * inner;
  Tensor<T> out(out_shape);
  for (Index o = 0; o < outer; ++o) {
    std::copy(x.ptr() + o * in_row + off, x.ptr() + o * in_row + off + out_row, out.mutable_ptr() + o * out_row);
  }
  if (auto* tape = detail::tape_for(out, {&x})) {
    tape->push([x, out, outer, in_row, out_row, off]() mutable {
      if (!out.has_grad()) return;
      T* gx = x.grad_buffer().data();
      const T* g = out.grad().data();
      for (Index o = 0; o < outer; ++o) {
        for (Index j = 0; j < out_row; ++j) gx[o * in_row + off + j] += g[o * out_row + j];
      }
    });
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, const std::vector<Index>& sizes, int axis) {
  const Index total = std::accumulate(sizes.begin(), sizes.end(), Index(0));
  if (total != x.dim(axis)) {
    throw ShapeError("split: sizes do not sum to axis length of " + to_string(x.shape()));
  }
  std::vector<Tensor<T>> parts;
  Index start = 0;
  for (Index s : sizes) {
    parts.push_back(slice(x, axis, start, s));
    start += s;
  }
  return parts;
}

// ---------------------------------------------------------------------------
// Spatial

template <typename T>
Tensor<T> depthwise_conv3x3(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank("depthwise_conv3x3", x, 4);
  const Index batch = x.dim(0), ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (w.shape() != Shape{ch, 3, 3} || b.shape() != Shape{ch}) {
    throw ShapeError("depthwise_conv3x3: channel mismatch x=" + to_string(x.shape()) + " w=" +
                     to_string(w.shape()) + " b=" + to_string(b.shape()));
  }
  Tensor<T> out(x.shape());
  for (Index n = 0; n < batch; ++n) {
    for (Index c = 0; c < ch; ++c) {
      const T* src = x.ptr() + (n * ch + c) * h * wd;
      T* dst = out.mutable_ptr() + (n * ch + c) * h * wd;
      const T* k = w.ptr() + c * 9;
      std::fill(dst, dst + h * wd, b.ptr()[c]);
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const T kv = k[ky * 3 + kx];
          const Index dy = ky - 1, dx = kx - 1;
          const Index y0 = std::max<Index>(0, -dy), y1 = std::min(h, h - dy);
          const Index x0 = std::max<Index>(0, -dx), x1 = std::min(wd, wd - dx);
          for (Index y = y0; y < y1; ++y) {
            const T* srow = src + (y + dy) * wd + dx;
            T* drow = dst + y * wd;
            for (Index xx = x0; xx < x1; ++xx) drow[xx] += kv * srow[xx];
          }
        }
      }
    }
  }
  if (auto* tape = detail::tape_for(out, {&x, &w, &b})) {
    tape->push([x, w, b, out, batch, ch, h, wd]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      T* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
      T* gw = w.requires_grad() ? w.grad_buffer().data() : nullptr;
      T* gb = b.requires_grad() ? b.grad_buffer().data() : nullptr;
      for (Index n = 0; n < batch; ++n) {
        for (Index c = 0; c < ch; ++c) {
          const Index base = (n * ch + c) * h * wd;
          const T* gp = g + base;
          const T* src = x.ptr() + base;
          if (gb) {
            T s = 0;
            for (Index i = 0; i < h * wd; ++i) s += gp[i];
            gb[c] += s;
          }
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              const Index dy = ky - 1, dx = kx - 1;
              const Index y0 = std::max<Index>(0, -dy), y1 = std::min(h, h - dy);
              const Index x0 = std::max<Index>(0, -dx), x1 = std::min(wd, wd - dx);
              const T kv = w.ptr()[c * 9 + ky * 3 + kx];
              T acc = 0;
              for (Index y = y0; y < y1; ++y) {
                const T* grow = gp + y * wd;
                const Index sidx = (y + dy) * wd + dx;
                for (Index xx = x0; xx < x1; ++xx) {
                  acc += grow[xx] * src[sidx + xx];
                  if (gx) gx[base + sidx + xx] += kv * grow[xx];
                }
              }
              if (gw) gw[c * 9 + ky * 3 + kx] += acc;
            }
          }
        }
      }
    });
  }
  return out;
}

namespace {

struct Interp {
  std::vector<Index> lo, hi;
  std::vector<double> frac;
};

// align_corners = false source coordinates, clamped at the borders.
Interp interp_table(Index in, Index out, int factor) {
  Interp t;
  t.lo.resize(static_cast<std::size_t>(out));
  t.hi.resize(static_cast<std::size_t>(out));
  t.frac.resize(static_cast<std::size_t>(out));
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
    if (src < 0) src = 0;
    Index i0 = static_cast<Index>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const Index i1 = std::min(i0 + 1, in - 1);
    t.lo[static_cast<std::size_t>(o)] = i0;
    t.hi[static_cast<std::size_t>(o)] = i1;
    t.frac[static_cast<std::size_t>(o)] = src - static_cast<double>(i0);
  }
  return t;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int factor) {
  require_rank("bilinear_upsample", x, 4);
  if (factor < 2 || (factor & (factor - 1)) != 0) {
    throw ShapeError("bilinear_upsample: factor must be a power of two >= 2, got " + std::to_string(factor));
  }
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index oh = h * factor, ow = w * factor;
  const Interp ty = interp_table(h, oh, factor);
  const Interp tx = interp_table(w, ow, factor);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), oh, ow});
  for (Index p = 0; p < planes; ++p) {
    const T* src = x.ptr() + p * h * w;
    T* dst = out.mutable_ptr() + p * oh * ow;
    for (Index oy = 0; oy < oh; ++oy) {
      const auto sy = static_cast<std::size_t>(oy);
      const T fy = static_cast<T>(ty.frac[sy]);
      const T* r0 = src + ty.lo[sy] * w;
      const T* r1 = src + ty.hi[sy] * w;
      for (Index ox = 0; ox < ow; ++ox) {
        const auto sx = static_cast<std::size_t>(ox);
        const T fx = static_cast<T>(tx.frac[sx]);
        const Index x0 = tx.lo[sx], x1 = tx.hi[sx];
        const T top = r0[x0] * (T(1) - fx) + r0[x1] * fx;
        const T bot = r1[x0] * (T(1) - fx) + r1[x1] * fx;
        dst[oy * ow + ox] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  if (auto* tape = detail::tape_for(out, {&x})) {
    tape->push([x, out, planes, h, w, oh, ow, ty, tx]() mutable {
      if (!out.has_grad()) return;
      T* gx = x.grad_buffer().data();
      const T* g = out.grad().data();
      for (Index p = 0; p < planes; ++p) {
        T* gsrc = gx + p * h * w;
        const T* gdst = g + p * oh * ow;
        for (Index oy = 0; oy < oh; ++oy) {
          const auto sy = static_cast<std::size_t>(oy);
          const T fy = static_cast<T>(ty.frac[sy]);
          T* r0 = gsrc + ty.lo[sy] * w;
          T* r1 = gsrc + ty.hi[sy] * w;
          for (Index ox = 0; ox < ow; ++ox) {
            const auto sx = static_cast<std::size_t>(ox);
            const T fx = static_cast<T>(tx.frac[sx]);
            const T gv = gdst[oy * ow + ox];
            const Index x0 = tx.lo[sx], x1 = tx.hi[sx];
            r0[x0] += gv * (T(1) - fy) * (T(1) - fx);
            r0[x1] += gv * (T(1) - fy) * fx;
            r1[x0] += gv * fy * (T(1) - fx);
            r1[x1] += gv * fy * fx;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> unfold_patches(const Tensor<T>& x, int kernel, int stride, int padding) {
  require_rank("unfold_patches", x, 4);
  if (kernel <= 0 || stride <= 0 || padding < 0) {
    throw ShapeError("unfold_patches: invalid geometry kernel=" + std::to_string(kernel) + " stride=" +
                     std::to_string(stride) + " padding=" + std::to_string(padding));
  }
  const Index batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index oh = conv_out_size(h, kernel, stride, padding);
  const Index ow = conv_out_size(w, kernel, stride, padding);
  if (oh < 1 || ow < 1) {
    throw ShapeError("unfold_patches: geometry (k=" + std::to_string(kernel) + ", s=" + std::to_string(stride) +
                     ", p=" + std::to_string(padding) + ") yields empty output for " + to_string(x.shape()));
  }
  const Index cols = ch * kernel * kernel;
  Tensor<T> out(Shape{batch, oh * ow, cols});
  // Source offset per (row, col) entry; -1 for padding.
  std::vector<Index> src_index(static_cast<std::size_t>(oh * ow * cols));
  for (Index oy = 0; oy < oh; ++oy) {
    for (Index ox = 0; ox < ow; ++ox) {
      Index* row = src_index.data() + (oy * ow + ox) * cols;
      for (Index c = 0; c < ch; ++c) {
        for (Index ky = 0; ky < kernel; ++ky) {
          for (Index kx = 0; kx < kernel; ++kx) {
            const Index iy = oy * stride - padding + ky;
            const Index ix = ox * stride - padding + kx;
            const bool inside = iy >= 0 && iy < h && ix >= 0 && ix < w;
            row[(c * kernel + ky) * kernel + kx] = inside ? (c * h + iy) * w + ix : -1;
          }
        }
      }
    }
  }
  const Index plane = ch * h * w;
  const Index per_batch = oh * ow * cols;
  for (Index n = 0; n < batch; ++n) {
    const T* src = x.ptr() + n * plane;
    T* dst = out.mutable_ptr() + n * per_batch;
    for (Index i = 0; i < per_batch; ++i) {
      const Index s = src_index[static_cast<std::size_t>(i)];
      dst[i] = s >= 0 ? src[s] : T(0);
    }
  }
  if (auto* tape = detail::tape_for(out, {&x})) {
    tape->push([x, out, src_index = std::move(src_index), batch, plane, per_batch]() mutable {
      if (!out.has_grad()) return;
      T* gx = x.grad_buffer().data();
      const T* g = out.grad().data();
      for (Index n = 0; n < batch; ++n) {
        for (Index i = 0; i < per_batch; ++i) {
          const Index s = src_index[static_cast<std::size_t>(i)];
          if (s >= 0) gx[n * plane + s] += g[n * per_batch + i];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (auto* tape = detail::tape_for(out, {&x})) {
    tape->push([x, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      for (T& v : x.grad_buffer()) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> masked_mse(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& mask) {
  require_rank("masked_mse", pred, 4);
  require_same_shape("masked_mse", pred, target);
  if (mask.shape() != Shape{pred.dim(0), pred.dim(1)}) {
    throw ShapeError("masked_mse: mask " + to_string(mask.shape()) + " does not match heatmaps " +
                     to_string(pred.shape()));
  }
  const Index maps = pred.dim(0) * pred.dim(1);
  const Index hw = pred.dim(2) * pred.dim(3);
  T weight_total = 0;
  for (T m : mask.data()) weight_total += m;
  T loss = 0;
  if (weight_total > T(0)) {
    for (Index i = 0; i < maps; ++i) {
      const T m = mask.ptr()[i];
      if (m == T(0)) continue;
      T acc = 0;
      for (Index j = 0; j < hw; ++j) {
        const T d = pred.ptr()[i * hw + j] - target.ptr()[i * hw + j];
        acc += d * d;
      }
      loss += m * acc;
    }
    loss /= weight_total * static_cast<T>(hw);
  }
  Tensor<T> out = Tensor<T>::scalar(loss);
  if (auto* tape = detail::tape_for(out, {&pred, &target})) {
    tape->push([pred, target, mask, out, maps, hw, weight_total]() mutable {
      if (!out.has_grad() || weight_total <= T(0)) return;
      const T g = out.grad()[0] * T(2) / (weight_total * static_cast<T>(hw));
      T* gp = pred.requires_grad() ? pred.grad_buffer().data() : nullptr;
      T* gt = target.requires_grad() ? target.grad_buffer().data() : nullptr;
      for (Index i = 0; i < maps; ++i) {
        const T m = mask.ptr()[i];
        if (m == T(0)) continue;
        for (Index j = 0; j < hw; ++j) {
          const T d = m * g * (pred.ptr()[i * hw + j] - target.ptr()[i * hw + j]);
          if (gp) gp[i * hw + j] += d;
          if (gt) gt[i * hw + j] -= d;
        }
      }
    });
  }
  return out;
}

#define AGGPOSE_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> gelu(const Tensor<T>&);                                                    \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> softmax_lastaxis(const Tensor<T>&);                                        \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                        \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                \
  template Tensor<T> slice(const Tensor<T>&, int, Index, Index);                                \
  template std::vector<Tensor<T>> split(const Tensor<T>&, const std::vector<Index>&, int);      \
  template Tensor<T> depthwise_conv3x3(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);   \
  template Tensor<T> bilinear_upsample(const Tensor<T>&, int);                                  \
  template Tensor<T> unfold_patches(const Tensor<T>&, int, int, int);                           \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                    \
  template Tensor<T> masked_mse(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);

AGGPOSE_INSTANTIATE_OPS(float)
AGGPOSE_INSTANTIATE_OPS(double)

}  // namespace aggpose
