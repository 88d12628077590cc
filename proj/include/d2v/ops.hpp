#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "d2v/errors.hpp"
#include "d2v/rng.hpp"
#include "d2v/tensor.hpp"

namespace d2v {

namespace detail {

template <class Real>
void check_finite(std::string_view op, const std::vector<Real>& values) {
  for (Real v : values)
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite result");
}

template <class Real>
Tensor<Real> make_result(std::string_view op, Shape shape, std::vector<Real> values) {
  check_finite(op, values);
  return Tensor<Real>(std::move(shape), std::move(values));
}

/// Records `backward` on the active graph when any input requires a gradient.
/// The callback receives the upstream gradient of `out`.
template <class Real, class Backward>
void connect(std::string_view op, Tensor<Real>& out, std::span<const Tensor<Real>> inputs,
             Backward&& backward) {
  Graph<Real>* graph = active_graph<Real>();
  if (graph == nullptr) return;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return;
  for (const auto& t : inputs)
    if (t.requires_grad() && !t.tracked()) graph->note_leaf(t.node());
  out.node()->requires_grad = true;
  out.node()->leaf = false;
  graph->record(op, [out_node = out.node(), fn = std::forward<Backward>(backward)]() {
    if (out_node->grad.empty()) return;
    fn(out_node->grad);
  });
}

template <class Real, class Backward>
void connect(std::string_view op, Tensor<Real>& out, std::initializer_list<Tensor<Real>> inputs,
             Backward&& backward) {
  connect(op, out, std::span<const Tensor<Real>>(inputs.begin(), inputs.size()),
          std::forward<Backward>(backward));
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline std::size_t resolve_axis(const Shape& shape, int axis, std::string_view op) {
  const int rank = static_cast<int>(shape.size());
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw ConfigError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                      shape_str(shape));
  return static_cast<std::size_t>(a);
}

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

/// Returns the repeat period of b inside a, or throws when b is neither the
/// same shape nor a trailing-axis suffix of a.
inline std::size_t broadcast_period(const Shape& a, const Shape& b, std::string_view op) {
  if (a == b) return numel(a);
  bool suffix = b.size() <= a.size();
  for (std::size_t i = 0; suffix && i < b.size(); ++i)
    suffix = b[b.size() - 1 - i] == a[a.size() - 1 - i];
  if (!suffix)
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  return numel(b);
}

template <class Real>
void require_rank(const Tensor<Real>& t, std::size_t rank, std::string_view op) {
  if (t.rank() != rank)
    throw ConfigError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                      shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  const std::size_t period = detail::broadcast_period(a.shape(), b.shape(), "add");
  std::vector<Real> out(a.numel());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i % period];
  auto result = detail::make_result("add", a.shape(), std::move(out));
  detail::connect<Real>("add", result, {a, b}, [an = a.node(), bn = b.node(), period](const std::vector<Real>& g) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i % period] += g[i];
    }
  });
  return result;
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  const std::size_t period = detail::broadcast_period(a.shape(), b.shape(), "sub");
  std::vector<Real> out(a.numel());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i % period];
  auto result = detail::make_result("sub", a.shape(), std::move(out));
  detail::connect<Real>("sub", result, {a, b}, [an = a.node(), bn = b.node(), period](const std::vector<Real>& g) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i % period] -= g[i];
    }
  });
  return result;
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  const std::size_t period = detail::broadcast_period(a.shape(), b.shape(), "mul");
  std::vector<Real> out(a.numel());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i % period];
  auto result = detail::make_result("mul", a.shape(), std::move(out));
  detail::connect<Real>("mul", result, {a, b}, [an = a.node(), bn = b.node(), period](const std::vector<Real>& g) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bn->value[i % period];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i % period] += g[i] * an->value[i];
    }
  });
  return result;
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real s) {
  std::vector<Real> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  auto result = detail::make_result("scale", a.shape(), std::move(out));
  detail::connect<Real>("scale", result, {a}, [an = a.node(), s](const std::vector<Real>& g) {
    an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += s * g[i];
  });
  return result;
}

/// Exact (erf-based) GELU.
template <class Real>
Tensor<Real> gelu(const Tensor<Real>& a) {
  const auto av = a.data();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = Real(0.5) * av[i] * (Real(1) + std::erf(av[i] * Real(std::numbers::sqrt2 / 2)));
  auto result = detail::make_result("gelu", a.shape(), std::move(out));
  detail::connect<Real>("gelu", result, {a}, [an = a.node()](const std::vector<Real>& g) {
    an->ensure_grad();
    const Real inv_sqrt_2pi = Real(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Real x = an->value[i];
      const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(std::numbers::sqrt2 / 2)));
      const Real pdf = inv_sqrt_2pi * std::exp(Real(-0.5) * x * x);
      an->grad[i] += g[i] * (cdf + x * pdf);
    }
  });
  return result;
}

// ---------------------------------------------------------------- linear algebra

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ConfigError("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<Real> out(m * n, Real(0));
  const Real* ap = a.data().data();
  const Real* bp = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    Real* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = ap[i * k + p];
      const Real* brow = bp + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  auto result = detail::make_result("matmul", Shape{m, n}, std::move(out));
  detail::connect<Real>("matmul", result, {a, b}, [an = a.node(), bn = b.node(), m, k, n](const std::vector<Real>& g) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          Real acc = 0;
          const Real* grow = g.data() + i * n;
          const Real* brow = bn->value.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          an->grad[i * k + p] += acc;
        }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const Real aip = an->value[i * k + p];
          const Real* grow = g.data() + i * n;
          Real* dst = bn->grad.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) dst[j] += aip * grow[j];
        }
    }
  });
  return result;
}

template <class Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<Real> out(r * c);
  const auto av = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  auto result = detail::make_result("transpose", Shape{c, r}, std::move(out));
  detail::connect<Real>("transpose", result, {a}, [an = a.node(), r, c](const std::vector<Real>& g) {
    an->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) an->grad[i * c + j] += g[j * r + i];
  });
  return result;
}

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
  if (numel(shape) != a.numel())
    throw ConfigError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<Real> out(a.data().begin(), a.data().end());
  auto result = detail::make_result("reshape", std::move(shape), std::move(out));
  detail::connect<Real>("reshape", result, {a}, [an = a.node()](const std::vector<Real>& g) {
    an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
  });
  return result;
}

template <class Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& weight, const Tensor<Real>& bias) {
  return add(matmul(x, weight), bias);
}

// ---------------------------------------------------------------- reductions

template <class Real>
Tensor<Real> sum(const Tensor<Real>& a) {
  double acc = 0;
  for (Real v : a.data()) acc += v;
  auto result = detail::make_result("sum", Shape{}, std::vector<Real>{static_cast<Real>(acc)});
  detail::connect<Real>("sum", result, {a}, [an = a.node()](const std::vector<Real>& g) {
    an->ensure_grad();
    for (auto& v : an->grad) v += g[0];
  });
  return result;
}

template <class Real>
Tensor<Real> mean_all(const Tensor<Real>& a) {
  if (a.numel() == 0) return Tensor<Real>::scalar(Real(0));
  return scale(sum(a), Real(1) / static_cast<Real>(a.numel()));
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& a, int axis) {
  const auto ax = detail::resolve_axis(a.shape(), axis, "mean");
  const auto s = detail::split_axis(a.shape(), ax);
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<Real> out(s.outer * s.inner);
  const auto av = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.inner; ++j) {
      double acc = 0;
      for (std::size_t i = 0; i < s.n; ++i) acc += av[(o * s.n + i) * s.inner + j];
      out[o * s.inner + j] = static_cast<Real>(acc / static_cast<double>(s.n));
    }
  auto result = detail::make_result("mean", std::move(shape), std::move(out));
  detail::connect<Real>("mean", result, {a}, [an = a.node(), s](const std::vector<Real>& g) {
    an->ensure_grad();
    const Real inv = Real(1) / static_cast<Real>(s.n);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.n; ++i)
        for (std::size_t j = 0; j < s.inner; ++j)
          an->grad[(o * s.n + i) * s.inner + j] += g[o * s.inner + j] * inv;
  });
  return result;
}

/// Population variance along an axis.
template <class Real>
Tensor<Real> variance(const Tensor<Real>& a, int axis) {
  const auto ax = detail::resolve_axis(a.shape(), axis, "variance");
  const auto s = detail::split_axis(a.shape(), ax);
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<Real> out(s.outer * s.inner);
  std::vector<Real> means(s.outer * s.inner);
  const auto av = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.inner; ++j) {
      double mu = 0;
      for (std::size_t i = 0; i < s.n; ++i) mu += av[(o * s.n + i) * s.inner + j];
      mu /= static_cast<double>(s.n);
      double var = 0;
      for (std::size_t i = 0; i < s.n; ++i) {
        const double d = av[(o * s.n + i) * s.inner + j] - mu;
        var += d * d;
      }
      means[o * s.inner + j] = static_cast<Real>(mu);
      out[o * s.inner + j] = static_cast<Real>(var / static_cast<double>(s.n));
    }
  auto result = detail::make_result("variance", std::move(shape), std::move(out));
  detail::connect<Real>("variance", result, {a}, [an = a.node(), s, means = std::move(means)](const std::vector<Real>& g) {
    an->ensure_grad();
    const Real k = Real(2) / static_cast<Real>(s.n);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.n; ++i)
        for (std::size_t j = 0; j < s.inner; ++j) {
          const std::size_t idx = (o * s.n + i) * s.inner + j;
          an->grad[idx] += g[o * s.inner + j] * k * (an->value[idx] - means[o * s.inner + j]);
        }
  });
  return result;
}

template <class Real>
Tensor<Real> softmax(const Tensor<Real>& a, int axis) {
  const auto ax = detail::resolve_axis(a.shape(), axis, "softmax");
  const auto s = detail::split_axis(a.shape(), ax);
  const auto av = a.data();
  std::vector<Real> out(av.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.inner; ++j) {
      const std::size_t base = o * s.n * s.inner + j;
      Real mx = av[base];
      for (std::size_t i = 1; i < s.n; ++i) mx = std::max(mx, av[base + i * s.inner]);
      Real total = 0;
      for (std::size_t i = 0; i < s.n; ++i) {
        const Real e = std::exp(av[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] /= total;
    }
  auto result = detail::make_result("softmax", a.shape(), std::move(out));
  detail::connect<Real>("softmax", result, {a}, [an = a.node(), yn = result.node(), s](const std::vector<Real>& g) {
    an->ensure_grad();
    const auto& y = yn->value;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t j = 0; j < s.inner; ++j) {
        const std::size_t base = o * s.n * s.inner + j;
        Real dot = 0;
        for (std::size_t i = 0; i < s.n; ++i) dot += g[base + i * s.inner] * y[base + i * s.inner];
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t idx = base + i * s.inner;
          an->grad[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
  return result;
}

/**
 * Standardizes along `axis`: (x - mean) / sqrt(var + eps), population variance.
 * With eps = 0 a zero-variance slice yields a NumericError.
 */
template <class Real>
Tensor<Real> normalize(const Tensor<Real>& a, int axis, Real eps) {
  const auto ax = detail::resolve_axis(a.shape(), axis, "normalize");
  const auto s = detail::split_axis(a.shape(), ax);
  const auto av = a.data();
  std::vector<Real> out(av.size());
  std::vector<Real> inv_std(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.inner; ++j) {
      const std::size_t base = o * s.n * s.inner + j;
      double mu = 0;
      for (std::size_t i = 0; i < s.n; ++i) mu += av[base + i * s.inner];
      mu /= static_cast<double>(s.n);
      double var = 0;
      for (std::size_t i = 0; i < s.n; ++i) {
        const double d = av[base + i * s.inner] - mu;
        var += d * d;
      }
      var /= static_cast<double>(s.n);
      const double denom = std::sqrt(var + static_cast<double>(eps));
      if (!(denom > 0))
        throw NumericError("normalize: zero variance along axis " + std::to_string(ax) + " of " +
                           shape_str(a.shape()));
      const double inv = 1.0 / denom;
      inv_std[o * s.inner + j] = static_cast<Real>(inv);
      for (std::size_t i = 0; i < s.n; ++i)
        out[base + i * s.inner] = static_cast<Real>((av[base + i * s.inner] - mu) * inv);
    }
  auto result = detail::make_result("normalize", a.shape(), std::move(out));
  detail::connect<Real>("normalize", result, {a},
                        [an = a.node(), yn = result.node(), s, inv_std = std::move(inv_std)](const std::vector<Real>& g) {
    an->ensure_grad();
    const auto& y = yn->value;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t j = 0; j < s.inner; ++j) {
        const std::size_t base = o * s.n * s.inner + j;
        double g_mean = 0, gy_mean = 0;
        for (std::size_t i = 0; i < s.n; ++i) {
          g_mean += g[base + i * s.inner];
          gy_mean += static_cast<double>(g[base + i * s.inner]) * y[base + i * s.inner];
        }
        g_mean /= static_cast<double>(s.n);
        gy_mean /= static_cast<double>(s.n);
        const double inv = inv_std[o * s.inner + j];
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t idx = base + i * s.inner;
          an->grad[idx] += static_cast<Real>(inv * (g[idx] - g_mean - y[idx] * gy_mean));
        }
      }
  });
  return result;
}

template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& shift,
                        Real eps = Real(1e-5)) {
  return add(mul(normalize(x, -1, eps), gain), shift);
}

// ---------------------------------------------------------------- indexing

template <class Real>
Tensor<Real> concat(std::span<const Tensor<Real>> parts, int axis) {
  if (parts.empty()) throw ConfigError("concat: no inputs");
  const auto ax = detail::resolve_axis(parts[0].shape(), axis, "concat");
  Shape shape = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != shape.size())
      throw ConfigError("concat: rank mismatch " + shape_str(probe) + " vs " + shape_str(shape));
    probe[ax] = shape[ax];
    if (probe != shape)
      throw ConfigError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    total += p.dim(ax);
  }
  shape[ax] = total;
  const auto outer_split = detail::split_axis(shape, ax);
  std::vector<Real> out(numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t width = p.dim(ax) * outer_split.inner;
    const auto pv = p.data();
    for (std::size_t o = 0; o < outer_split.outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * width), width,
                  out.begin() + static_cast<std::ptrdiff_t>(o * total * outer_split.inner + offset));
    offset += width;
  }
  auto result = detail::make_result("concat", std::move(shape), std::move(out));
  std::vector<std::shared_ptr<TensorNode<Real>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  const std::size_t row = total * outer_split.inner;
  detail::connect<Real>("concat", result, parts,
                        [nodes = std::move(nodes), offsets = std::move(offsets), outer = outer_split.outer,
                         inner = outer_split.inner, ax, row](const std::vector<Real>& g) {
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      auto& n = *nodes[k];
      if (!n.requires_grad) continue;
      n.ensure_grad();
      const std::size_t width = n.shape[ax] * inner;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < width; ++i) n.grad[o * width + i] += g[o * row + offsets[k] + i];
    }
  });
  return result;
}

template <class Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, int axis) {
  return concat(std::span<const Tensor<Real>>(parts), axis);
}

/// Contiguous range [start, start + length) along an axis.
template <class Real>
Tensor<Real> slice(const Tensor<Real>& a, int axis, std::size_t start, std::size_t length) {
  const auto ax = detail::resolve_axis(a.shape(), axis, "slice");
  if (start + length > a.dim(ax))
    throw ConfigError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                      ") exceeds " + shape_str(a.shape()));
  const auto s = detail::split_axis(a.shape(), ax);
  Shape shape = a.shape();
  shape[ax] = length;
  std::vector<Real> out(s.outer * length * s.inner);
  const auto av = a.data();
  const std::size_t width = length * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((o * s.n + start) * s.inner), width,
                out.begin() + static_cast<std::ptrdiff_t>(o * width));
  auto result = detail::make_result("slice", std::move(shape), std::move(out));
  detail::connect<Real>("slice", result, {a}, [an = a.node(), s, start, width](const std::vector<Real>& g) {
    an->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < width; ++i) an->grad[(o * s.n + start) * s.inner + i] += g[o * width + i];
  });
  return result;
}

/// Selects rows (first-axis slices) by index; indices may repeat.
template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& a, std::span<const std::size_t> rows) {
  if (a.rank() == 0) throw ConfigError("gather_rows: scalar input");
  const std::size_t width = a.numel() / a.dim(0);
  for (std::size_t r : rows)
    if (r >= a.dim(0))
      throw StateError("gather_rows: index " + std::to_string(r) + " out of range for " + shape_str(a.shape()));
  Shape shape = a.shape();
  shape[0] = rows.size();
  std::vector<Real> out(rows.size() * width);
  const auto av = a.data();
  for (std::size_t k = 0; k < rows.size(); ++k)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(rows[k] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(k * width));
  auto result = detail::make_result("gather_rows", std::move(shape), std::move(out));
  detail::connect<Real>("gather_rows", result, {a},
                        [an = a.node(), idx = std::vector<std::size_t>(rows.begin(), rows.end()), width](const std::vector<Real>& g) {
    an->ensure_grad();
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t i = 0; i < width; ++i) an->grad[idx[k] * width + i] += g[k * width + i];
  });
  return result;
}

template <class Real>
Tensor<Real> embedding(const Tensor<Real>& table, std::span<const int> ids) {
  detail::require_rank(table, 2, "embedding");
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= table.dim(0))
      throw InputError("embedding: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(table.dim(0)));
    rows.push_back(static_cast<std::size_t>(id));
  }
  return gather_rows(table, std::span<const std::size_t>(rows));
}

/// Copy of x[T,H] with the listed rows replaced by v[H].
template <class Real>
Tensor<Real> row_replace(const Tensor<Real>& x, std::span<const std::size_t> rows, const Tensor<Real>& v) {
  detail::require_rank(x, 2, "row_replace");
  const std::size_t width = x.dim(1);
  if (v.numel() != width)
    throw ConfigError("row_replace: replacement " + shape_str(v.shape()) + " vs rows of " + shape_str(x.shape()));
  std::vector<Real> out(x.data().begin(), x.data().end());
  std::vector<char> replaced(x.dim(0), 0);
  for (std::size_t r : rows) {
    if (r >= x.dim(0))
      throw StateError("row_replace: row " + std::to_string(r) + " out of range for " + shape_str(x.shape()));
    replaced[r] = 1;
    std::copy(v.data().begin(), v.data().end(), out.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  auto result = detail::make_result("row_replace", x.shape(), std::move(out));
  detail::connect<Real>("row_replace", result, {x, v},
                        [xn = x.node(), vn = v.node(), replaced = std::move(replaced), width](const std::vector<Real>& g) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (std::size_t r = 0; r < replaced.size(); ++r)
        if (!replaced[r])
          for (std::size_t i = 0; i < width; ++i) xn->grad[r * width + i] += g[r * width + i];
    }
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (std::size_t r = 0; r < replaced.size(); ++r)
        if (replaced[r])
          for (std::size_t i = 0; i < width; ++i) vn->grad[i] += g[r * width + i];
    }
  });
  return result;
}

// ---------------------------------------------------------------- convolution

/// Output length of a valid (unpadded) 1-D convolution.
inline std::size_t conv_out_length(std::size_t length, std::size_t kernel, std::size_t stride) {
  return length < kernel ? 0 : (length - kernel) / stride + 1;
}

/// im2col over a channels-last signal x[N, C]: row t holds x[t*stride .. t*stride+kernel).
template <class Real>
Tensor<Real> frames(const Tensor<Real>& x, std::size_t kernel, std::size_t stride) {
  detail::require_rank(x, 2, "frames");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t out_len = conv_out_length(n, kernel, stride);
  if (out_len == 0)
    throw ConfigError("frames: input length " + std::to_string(n) + " shorter than kernel " + std::to_string(kernel));
  const std::size_t width = kernel * c;
  std::vector<Real> out(out_len * width);
  const auto xv = x.data();
  for (std::size_t t = 0; t < out_len; ++t)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(t * stride * c), width,
                out.begin() + static_cast<std::ptrdiff_t>(t * width));
  auto result = detail::make_result("frames", Shape{out_len, width}, std::move(out));
  detail::connect<Real>("frames", result, {x}, [xn = x.node(), out_len, width, stride, c](const std::vector<Real>& g) {
    xn->ensure_grad();
    for (std::size_t t = 0; t < out_len; ++t)
      for (std::size_t i = 0; i < width; ++i) xn->grad[t * stride * c + i] += g[t * width + i];
  });
  return result;
}

/// Valid 1-D convolution, channels-last: x[N, Cin], weight[k, Cin, Cout], bias[Cout] -> [Nout, Cout].
template <class Real>
Tensor<Real> conv1d(const Tensor<Real>& x, const Tensor<Real>& weight, const Tensor<Real>& bias, std::size_t stride) {
  detail::require_rank(weight, 3, "conv1d");
  if (x.rank() != 2 || weight.dim(1) != x.dim(1))
    throw ConfigError("conv1d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(weight.shape()));
  const std::size_t kernel = weight.dim(0);
  auto cols = frames(x, kernel, stride);
  return add(matmul(cols, reshape(weight, Shape{kernel * weight.dim(1), weight.dim(2)})), bias);
}

// ---------------------------------------------------------------- stochastic

/// Inverted dropout; identity when p == 0.
template <class Real>
Tensor<Real> dropout(const Tensor<Real>& a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  std::vector<Real> keep(a.numel());
  const Real s = Real(1.0 / (1.0 - p));
  for (auto& k : keep) k = rng.bernoulli(p) ? Real(0) : s;
  return mul(a, Tensor<Real>(a.shape(), std::move(keep)));
}

// ---------------------------------------------------------------- losses

/// Mean over elements of the Smooth L1 penalty on r = pred - target.
template <class Real>
Tensor<Real> smooth_l1_loss(const Tensor<Real>& pred, const Tensor<Real>& target, Real beta) {
  if (pred.shape() != target.shape())
    throw StateError("smooth_l1_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  if (!(beta > 0)) throw ConfigError("smooth_l1_loss: beta must be positive");
  if (pred.numel() == 0) return Tensor<Real>::scalar(Real(0));
  double acc = 0;
  const auto pv = pred.data();
  const auto tv = target.data();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double r = static_cast<double>(pv[i]) - tv[i];
    const double ar = std::abs(r);
    acc += ar <= beta ? 0.5 * r * r / beta : ar - 0.5 * beta;
  }
  const double n = static_cast<double>(pv.size());
  auto result = detail::make_result("smooth_l1_loss", Shape{}, std::vector<Real>{static_cast<Real>(acc / n)});
  detail::connect<Real>("smooth_l1_loss", result, {pred, target},
                        [pn = pred.node(), tn = target.node(), beta, n](const std::vector<Real>& g) {
    const std::size_t count = pn->value.size();
    for (std::size_t i = 0; i < count; ++i) {
      const Real r = pn->value[i] - tn->value[i];
      const Real d = (std::abs(r) <= beta ? r / beta : (r > 0 ? Real(1) : Real(-1))) * g[0] / static_cast<Real>(n);
      if (pn->requires_grad) {
        pn->ensure_grad();
        pn->grad[i] += d;
      }
      if (tn->requires_grad) {
        tn->ensure_grad();
        tn->grad[i] -= d;
      }
    }
  });
  return result;
}

/// Mean over elements of r^2 / 2.
template <class Real>
Tensor<Real> l2_loss(const Tensor<Real>& pred, const Tensor<Real>& target) {
  if (pred.shape() != target.shape())
    throw StateError("l2_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  if (pred.numel() == 0) return Tensor<Real>::scalar(Real(0));
  double acc = 0;
  const auto pv = pred.data();
  const auto tv = target.data();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double r = static_cast<double>(pv[i]) - tv[i];
    acc += 0.5 * r * r;
  }
  const double n = static_cast<double>(pv.size());
  auto result = detail::make_result("l2_loss", Shape{}, std::vector<Real>{static_cast<Real>(acc / n)});
  detail::connect<Real>("l2_loss", result, {pred, target}, [pn = pred.node(), tn = target.node(), n](const std::vector<Real>& g) {
    const std::size_t count = pn->value.size();
    for (std::size_t i = 0; i < count; ++i) {
      const Real d = (pn->value[i] - tn->value[i]) * g[0] / static_cast<Real>(n);
      if (pn->requires_grad) {
        pn->ensure_grad();
        pn->grad[i] += d;
      }
      if (tn->requires_grad) {
        tn->ensure_grad();
        tn->grad[i] -= d;
      }
    }
  });
  return result;
}

}  // namespace d2v
