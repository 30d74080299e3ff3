#include "lmdir/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace lmdir::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
Graph<T>* graph_of(std::initializer_list<const Var<T>*> vars) {
  for (const Var<T>* v : vars) {
    if (v->graph() != nullptr) return v->graph();
  }
  throw Error(ErrorCode::InvalidArgument, "operation on a Var without a graph");
}

template <typename T>
Tensor<T>* grad_of(const std::shared_ptr<Node<T>>& n) {
  return n->requires_grad ? &n->grad_ref() : nullptr;
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  const std::int64_t n = src.size();
  for (std::int64_t i = 0; i < n; ++i) d[i] += s[i];
}

// Rows of (..., C) as (rows, C).
template <typename T>
std::int64_t rows_of(const Tensor<T>& t) {
  return t.size() / t.dim(-1);
}

template <typename T>
T pairwise_sum(const T* p, std::int64_t n, std::int64_t stride) {
  if (n <= 8) {
    T s = 0;
    for (std::int64_t i = 0; i < n; ++i) s += p[i * stride];
    return s;
  }
  const std::int64_t half = n / 2;
  return pairwise_sum(p, half, stride) + pairwise_sum(p + half * stride, n - half, stride);
}

// Maps a padded coordinate back into [0, n), or -1 for zero padding.
inline std::int64_t source_index(std::int64_t i, std::int64_t n, PadMode mode) {
  if (i >= 0 && i < n) return i;
  if (mode == PadMode::Zero) return -1;
  if (n == 1) return 0;
  if (i < 0) i = -i;
  if (i >= n) i = 2 * n - 2 - i;
  return i;
}

template <typename T>
void softmax_rows_inplace(T* data, std::int64_t rows, std::int64_t cols, std::int64_t row_stride) {
  for (std::int64_t r = 0; r < rows; ++r) {
    T* row = data + r * row_stride;
    T m = row[0];
    for (std::int64_t c = 1; c < cols; ++c) m = std::max(m, row[c]);
    T s = 0;
    for (std::int64_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - m);
      s += row[c];
    }
    const T inv = T(1) / s;
    for (std::int64_t c = 0; c < cols; ++c) row[c] *= inv;
  }
}

constexpr double kNormEps = 1e-12;

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_shape(b.shape(), a.shape(), "add");
  Tensor<T> out = a.value();
  accumulate(out, b.value());
  return graph_of({&a, &b})->emit(std::move(out), {&a, &b}, [&] {
    return [na = a.node(), nb = b.node()](const Tensor<T>& g) {
      if (auto* ga = grad_of(na)) accumulate(*ga, g);
      if (auto* gb = grad_of(nb)) accumulate(*gb, g);
    };
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_shape(b.shape(), a.shape(), "sub");
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return graph_of({&a, &b})->emit(std::move(out), {&a, &b}, [&] {
    return [na = a.node(), nb = b.node()](const Tensor<T>& g) {
      if (auto* ga = grad_of(na)) accumulate(*ga, g);
      if (auto* gb = grad_of(nb)) {
        for (std::int64_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
      }
    };
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_shape(b.shape(), a.shape(), "mul");
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return graph_of({&a, &b})->emit(std::move(out), {&a, &b}, [&] {
    return [na = a.node(), nb = b.node()](const Tensor<T>& g) {
      if (auto* ga = grad_of(na)) {
        for (std::int64_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * nb->value[i];
      }
      if (auto* gb = grad_of(nb)) {
        for (std::int64_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * na->value[i];
      }
    };
  });
}

template <typename T>
Var<T> affine(const Var<T>& x, T scale, T shift) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = scale * v + shift;
  return graph_of({&x})->emit(std::move(out), {&x}, [&] {
    return [nx = x.node(), scale](const Tensor<T>& g) {
      auto& gx = nx->grad_ref();
      for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += scale * g[i];
    };
  });
}

template <typename T>
Var<T> add_channels(const Var<T>& x, const Var<T>& bias) {
  const std::int64_t c = x.dim(-1);
  require_shape(bias.shape(), Shape{c}, "add_channels bias");
  Tensor<T> out = x.value();
  const std::int64_t rows = rows_of(out);
  for (std::int64_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * c;
    for (std::int64_t j = 0; j < c; ++j) row[j] += bias.value()[j];
  }
  return graph_of({&x, &bias})->emit(std::move(out), {&x, &bias}, [&] {
    return [nx = x.node(), nb = bias.node(), rows, c](const Tensor<T>& g) {
      if (auto* gx = grad_of(nx)) accumulate(*gx, g);
      if (auto* gb = grad_of(nb)) {
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t j = 0; j < c; ++j) (*gb)[j] += g[r * c + j];
        }
      }
    };
  });
}

template <typename T>
Var<T> mul_channels(const Var<T>& x, const Var<T>& scale) {
  const std::int64_t c = x.dim(-1);
  require_shape(scale.shape(), Shape{c}, "mul_channels scale");
  Tensor<T> out = x.value();
  const std::int64_t rows = rows_of(out);
  for (std::int64_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * c;
    for (std::int64_t j = 0; j < c; ++j) row[j] *= scale.value()[j];
  }
  return graph_of({&x, &scale})->emit(std::move(out), {&x, &scale}, [&] {
    return [nx = x.node(), ns = scale.node(), rows, c](const Tensor<T>& g) {
      if (auto* gx = grad_of(nx)) {
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t j = 0; j < c; ++j) (*gx)[r * c + j] += g[r * c + j] * ns->value[j];
        }
      }
      if (auto* gs = grad_of(ns)) {
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t j = 0; j < c; ++j) (*gs)[j] += g[r * c + j] * nx->value[r * c + j];
        }
      }
    };
  });
}

namespace {

template <typename T>
Var<T> linear_impl(const Var<T>& x, const Var<T>& w, const Var<T>* b) {
  require_rank(w.shape(), 2, "linear weight");
  const std::int64_t k = w.dim(0);
  const std::int64_t n = w.dim(1);
  if (x.dim(-1) != k) {
    throw Error(ErrorCode::ShapeMismatch, "linear: input " + shape_string(x.shape()) + " vs weight " +
                                              shape_string(w.shape()));
  }
  if (b != nullptr) require_shape(b->shape(), Shape{n}, "linear bias");
  const std::int64_t m = x.value().size() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  MatMap<T> y(out.data(), m, n);
  y.noalias() = ConstMatMap<T>(x.value().data(), m, k) * ConstMatMap<T>(w.value().data(), k, n);
  if (b != nullptr) y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->value().data(), n);

  auto make = [&] {
    return [nx = x.node(), nw = w.node(), nb = b ? b->node() : nullptr, m, k, n](const Tensor<T>& g) {
      ConstMatMap<T> dy(g.data(), m, n);
      if (auto* gx = grad_of(nx)) {
        MatMap<T>(gx->data(), m, k).noalias() += dy * ConstMatMap<T>(nw->value.data(), k, n).transpose();
      }
      if (auto* gw = grad_of(nw)) {
        MatMap<T>(gw->data(), k, n).noalias() += ConstMatMap<T>(nx->value.data(), m, k).transpose() * dy;
      }
      if (nb) {
        if (auto* gb = grad_of(nb)) {
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb->data(), n) += dy.colwise().sum();
        }
      }
    };
  };
  if (b != nullptr) return graph_of({&x, &w, b})->emit(std::move(out), {&x, &w, b}, make);
  return graph_of({&x, &w})->emit(std::move(out), {&x, &w}, make);
}

}  // namespace

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w) {
  return linear_impl<T>(x, w, nullptr);
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return linear_impl<T>(x, w, &b);
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, PadMode pad) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  const std::int64_t kh = w.dim(0);
  const std::int64_t kw = w.dim(1);
  const std::int64_t cin = w.dim(2);
  const std::int64_t cout = w.dim(3);
  if (kh != kw || kh % 2 == 0 || x.dim(3) != cin || stride < 1) {
    throw Error(ErrorCode::ShapeMismatch, "conv2d: input " + shape_string(x.shape()) + " vs weight " +
                                              shape_string(w.shape()));
  }
  require_shape(b.shape(), Shape{cout}, "conv2d bias");
  const std::int64_t bsz = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::int64_t p = kh / 2;
  const std::int64_t ho = (h + 2 * p - kh) / stride + 1;
  const std::int64_t wo = (wd + 2 * p - kw) / stride + 1;
  const std::int64_t m = bsz * ho * wo;
  const std::int64_t kdim = kh * kw * cin;

  // im2col: one row per output pixel, (kh, kw, cin) per row.
  Tensor<T> cols(Shape{m, kdim});
  const T* in = x.value().data();
  for (std::int64_t bi = 0; bi < bsz; ++bi) {
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        T* row = cols.data() + ((bi * ho + oy) * wo + ox) * kdim;
        for (std::int64_t dy = 0; dy < kh; ++dy) {
          const std::int64_t sy = source_index(oy * stride - p + dy, h, pad);
          for (std::int64_t dx = 0; dx < kw; ++dx) {
            const std::int64_t sx = source_index(ox * stride - p + dx, wd, pad);
            T* dst = row + (dy * kw + dx) * cin;
            if (sy < 0 || sx < 0) continue;
            const T* src = in + ((bi * h + sy) * wd + sx) * cin;
            std::copy(src, src + cin, dst);
          }
        }
      }
    }
  }
  Tensor<T> out(Shape{bsz, ho, wo, cout});
  MatMap<T> y(out.data(), m, cout);
  y.noalias() = ConstMatMap<T>(cols.data(), m, kdim) * ConstMatMap<T>(w.value().data(), kdim, cout);
  y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().data(), cout);

  return graph_of({&x, &w, &b})->emit(std::move(out), {&x, &w, &b}, [&] {
    return [nx = x.node(), nw = w.node(), nb = b.node(), cols = std::move(cols), bsz, h, wd, ho, wo, kh, kw,
            cin, cout, m, kdim, stride, p, pad](const Tensor<T>& g) {
      ConstMatMap<T> dy(g.data(), m, cout);
      if (auto* gw = grad_of(nw)) {
        MatMap<T>(gw->data(), kdim, cout).noalias() += ConstMatMap<T>(cols.data(), m, kdim).transpose() * dy;
      }
      if (auto* gb = grad_of(nb)) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb->data(), cout) += dy.colwise().sum();
      }
      if (auto* gx = grad_of(nx)) {
        RowMat<T> dcols = dy * ConstMatMap<T>(nw->value.data(), kdim, cout).transpose();
        T* dx = gx->data();
        for (std::int64_t bi = 0; bi < bsz; ++bi) {
          for (std::int64_t oy = 0; oy < ho; ++oy) {
            for (std::int64_t ox = 0; ox < wo; ++ox) {
              const T* row = dcols.data() + ((bi * ho + oy) * wo + ox) * kdim;
              for (std::int64_t dyi = 0; dyi < kh; ++dyi) {
                const std::int64_t sy = source_index(oy * stride - p + dyi, h, pad);
                if (sy < 0) continue;
                for (std::int64_t dxi = 0; dxi < kw; ++dxi) {
                  const std::int64_t sx = source_index(ox * stride - p + dxi, wd, pad);
                  if (sx < 0) continue;
                  const T* src = row + (dyi * kw + dxi) * cin;
                  T* dst = dx + ((bi * h + sy) * wd + sx) * cin;
                  for (std::int64_t c = 0; c < cin; ++c) dst[c] += src[c];
                }
              }
            }
          }
        }
      }
    };
  });
}

template <typename T>
Var<T> depthwise_conv3x3(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require_rank(x.shape(), 4, "depthwise_conv3x3 input");
  const std::int64_t bsz = x.dim(0), h = x.dim(1), wd = x.dim(2), c = x.dim(3);
  require_shape(w.shape(), Shape{3, 3, c}, "depthwise_conv3x3 weight");
  require_shape(b.shape(), Shape{c}, "depthwise_conv3x3 bias");
  Tensor<T> out(x.shape());
  const T* in = x.value().data();
  const T* wt = w.value().data();
  for (std::int64_t bi = 0; bi < bsz; ++bi) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t xx = 0; xx < wd; ++xx) {
        T* dst = out.data() + ((bi * h + y) * wd + xx) * c;
        std::copy(b.value().data(), b.value().data() + c, dst);
        for (int dy = 0; dy < 3; ++dy) {
          const std::int64_t sy = y + dy - 1;
          if (sy < 0 || sy >= h) continue;
          for (int dx = 0; dx < 3; ++dx) {
            const std::int64_t sx = xx + dx - 1;
            if (sx < 0 || sx >= wd) continue;
            const T* src = in + ((bi * h + sy) * wd + sx) * c;
            const T* k = wt + (dy * 3 + dx) * c;
            for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += src[ch] * k[ch];
          }
        }
      }
    }
  }
  return graph_of({&x, &w, &b})->emit(std::move(out), {&x, &w, &b}, [&] {
    return [nx = x.node(), nw = w.node(), nb = b.node(), bsz, h, wd, c](const Tensor<T>& g) {
      Tensor<T>* gx = grad_of(nx);
      Tensor<T>* gw = grad_of(nw);
      Tensor<T>* gb = grad_of(nb);
      const T* in = nx->value.data();
      const T* wt = nw->value.data();
      for (std::int64_t bi = 0; bi < bsz; ++bi) {
        for (std::int64_t y = 0; y < h; ++y) {
          for (std::int64_t xx = 0; xx < wd; ++xx) {
            const T* gy = g.data() + ((bi * h + y) * wd + xx) * c;
            if (gb) {
              for (std::int64_t ch = 0; ch < c; ++ch) (*gb)[ch] += gy[ch];
            }
            for (int dy = 0; dy < 3; ++dy) {
              const std::int64_t sy = y + dy - 1;
              if (sy < 0 || sy >= h) continue;
              for (int dx = 0; dx < 3; ++dx) {
                const std::int64_t sx = xx + dx - 1;
                if (sx < 0 || sx >= wd) continue;
                const std::int64_t src_off = ((bi * h + sy) * wd + sx) * c;
                const std::int64_t k_off = (dy * 3 + dx) * c;
                if (gx) {
                  T* d = gx->data() + src_off;
                  for (std::int64_t ch = 0; ch < c; ++ch) d[ch] += gy[ch] * wt[k_off + ch];
                }
                if (gw) {
                  T* d = gw->data() + k_off;
                  for (std::int64_t ch = 0; ch < c; ++ch) d[ch] += gy[ch] * in[src_off + ch];
                }
              }
            }
          }
        }
      }
    };
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const std::int64_t c = x.dim(-1);
  require_shape(gamma.shape(), Shape{c}, "layer_norm gamma");
  require_shape(beta.shape(), Shape{c}, "layer_norm beta");
  const std::int64_t rows = rows_of(x.value());
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> rstd(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* src = x.value().data() + r * c;
    T mean = 0;
    for (std::int64_t j = 0; j < c; ++j) mean += src[j];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::int64_t j = 0; j < c; ++j) var += (src[j] - mean) * (src[j] - mean);
    var /= static_cast<T>(c);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::int64_t j = 0; j < c; ++j) {
      const T xh = (src[j] - mean) * rs;
      xhat[r * c + j] = xh;
      out[r * c + j] = xh * gamma.value()[j] + beta.value()[j];
    }
  }
  return graph_of({&x, &gamma, &beta})->emit(std::move(out), {&x, &gamma, &beta}, [&] {
    return [nx = x.node(), ng = gamma.node(), nb = beta.node(), xhat = std::move(xhat), rstd = std::move(rstd),
            rows, c](const Tensor<T>& g) {
      Tensor<T>* gx = grad_of(nx);
      Tensor<T>* gg = grad_of(ng);
      Tensor<T>* gb = grad_of(nb);
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* gy = g.data() + r * c;
        const T* xh = xhat.data() + r * c;
        if (gg) {
          for (std::int64_t j = 0; j < c; ++j) (*gg)[j] += gy[j] * xh[j];
        }
        if (gb) {
          for (std::int64_t j = 0; j < c; ++j) (*gb)[j] += gy[j];
        }
        if (gx) {
          T mean_d = 0, mean_dx = 0;
          for (std::int64_t j = 0; j < c; ++j) {
            const T d = gy[j] * ng->value[j];
            mean_d += d;
            mean_dx += d * xh[j];
          }
          mean_d /= static_cast<T>(c);
          mean_dx /= static_cast<T>(c);
          T* dst = gx->data() + r * c;
          for (std::int64_t j = 0; j < c; ++j) {
            const T d = gy[j] * ng->value[j];
            dst[j] += rstd[r] * (d - mean_d - xh[j] * mean_dx);
          }
        }
      }
    };
  });
}

namespace {

template <typename T, typename F, typename DF>
Var<T> pointwise(const Var<T>& x, F f, DF df) {
  Tensor<T> out(x.shape());
  const T* in = x.value().data();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return graph_of({&x})->emit(std::move(out), {&x}, [&] {
    return [nx = x.node(), df](const Tensor<T>& g) {
      auto& gx = nx->grad_ref();
      const T* in = nx->value.data();
      for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(in[i]);
    };
  });
}

}  // namespace

template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  return pointwise<T>(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v); });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return pointwise<T>(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  return pointwise<T>(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  return pointwise<T>(
      x, [lo, hi](T v) { return std::min(hi, std::max(lo, v)); },
      [lo, hi](T v) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> softmax_last(const Var<T>& x, AttentionTrace<T>* trace) {
  const std::int64_t c = x.dim(-1);
  const std::int64_t rows = rows_of(x.value());
  Tensor<T> out = x.value();
  softmax_rows_inplace(out.data(), rows, c, c);
  if (trace) trace->maps.push_back(out.reshaped(Shape{rows, c}));
  Graph<T>* graph = graph_of({&x});
  Tensor<T> saved = graph->recording() ? out : Tensor<T>();
  return graph->emit(std::move(out), {&x}, [&] {
    return [nx = x.node(), rows, c, y = std::move(saved)](const Tensor<T>& g) {
      auto& gx = nx->grad_ref();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* yr = y.data() + r * c;
        const T* gr = g.data() + r * c;
        T dot = 0;
        for (std::int64_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
        for (std::int64_t j = 0; j < c; ++j) gx[r * c + j] += yr[j] * (gr[j] - dot);
      }
    };
  });
}

template <typename T>
Var<T> softmax_spatial(const Var<T>& x, AttentionTrace<T>* trace) {
  require_rank(x.shape(), 4, "softmax_spatial input");
  const std::int64_t bsz = x.dim(0);
  const std::int64_t c = x.dim(3);
  const std::int64_t n = x.dim(1) * x.dim(2);
  Tensor<T> out = x.value();
  for (std::int64_t bi = 0; bi < bsz; ++bi) {
    T* base = out.data() + bi * n * c;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T m = base[ch];
      for (std::int64_t i = 1; i < n; ++i) m = std::max(m, base[i * c + ch]);
      T s = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        T& v = base[i * c + ch];
        v = std::exp(v - m);
        s += v;
      }
      for (std::int64_t i = 0; i < n; ++i) base[i * c + ch] /= s;
    }
    if (trace) {
      // One row per channel.
      Tensor<T> map(Shape{c, n});
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t ch = 0; ch < c; ++ch) map[ch * n + i] = base[i * c + ch];
      }
      trace->maps.push_back(std::move(map));
    }
  }
  Graph<T>* graph = graph_of({&x});
  Tensor<T> saved = graph->recording() ? out : Tensor<T>();
  return graph->emit(std::move(out), {&x}, [&] {
    return [nx = x.node(), y = std::move(saved), bsz, n, c](const Tensor<T>& g) {
      auto& gx = nx->grad_ref();
      for (std::int64_t bi = 0; bi < bsz; ++bi) {
        const std::int64_t off = bi * n * c;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          T dot = 0;
          for (std::int64_t i = 0; i < n; ++i) dot += g[off + i * c + ch] * y[off + i * c + ch];
          for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t idx = off + i * c + ch;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    };
  });
}

template <typename T>
Var<T> slice_last(const Var<T>& x, std::int64_t begin, std::int64_t end) {
  const std::int64_t c = x.dim(-1);
  if (begin < 0 || end > c || begin >= end) {
    throw Error(ErrorCode::ShapeMismatch, "slice_last: [" + std::to_string(begin) + ", " + std::to_string(end) +
                                              ") out of range for " + shape_string(x.shape()));
  }
  const std::int64_t rows = rows_of(x.value());
  const std::int64_t w = end - begin;
  Shape shape = x.shape();
  shape.back() = w;
  Tensor<T> out(shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* src = x.value().data() + r * c + begin;
    std::copy(src, src + w, out.data() + r * w);
  }
  return graph_of({&x})->emit(std::move(out), {&x}, [&] {
    return [nx = x.node(), rows, c, w, begin](const Tensor<T>& g) {
      auto& gx = nx->grad_ref();
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t j = 0; j < w; ++j) gx[r * c + begin + j] += g[r * w + j];
      }
    };
  });
}

template <typename T>
Var<T> concat_last(const Var<T>& a, const Var<T>& b) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 1, sb.begin())) {
    throw Error(ErrorCode::ShapeMismatch, "concat_last: " + shape_string(sa) + " vs " + shape_string(sb));
  }
  const std::int64_t ca = sa.back(), cb = sb.back(), c = ca + cb;
  const std::int64_t rows = rows_of(a.value());
  Shape shape = sa;
  shape.back() = c;
  Tensor<T> out(shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    std::copy(a.value().data() + r * ca, a.value().data() + (r + 1) * ca, out.data() + r * c);
    std::copy(b.value().data() + r * cb, b.value().data() + (r + 1) * cb, out.data() + r * c + ca);
  }
  return graph_of({&a, &b})->emit(std::move(out), {&a, &b}, [&] {
    return [na = a.node(), nb = b.node(), rows, ca, cb, c](const Tensor<T>& g) {
      if (auto* ga = grad_of(na)) {
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t j = 0; j < ca; ++j) (*ga)[r * ca + j] += g[r * c + j];
        }
      }
      if (auto* gb = grad_of(nb)) {
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t j = 0; j < cb; ++j) (*gb)[r * cb + j] += g[r * c + ca + j];
        }
      }
    };
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (shape_numel(shape) != x.value().size()) {
    throw Error(ErrorCode::ShapeMismatch, "reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return graph_of({&x})->emit(std::move(out), {&x}, [&] {
    return [nx = x.node()](const Tensor<T>& g) { accumulate(nx->grad_ref(), g); };
  });
}

template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, int r) {
  require_rank(x.shape(), 4, "pixel_shuffle input");
  const std::int64_t bsz = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
  if (cin % (r * r) != 0) {
    throw Error(ErrorCode::ShapeMismatch, "pixel_shuffle: channels not divisible by r^2 in " +
                                              shape_string(x.shape()));
  }
  const std::int64_t c = cin / (r * r);
  Tensor<T> out(Shape{bsz, h * r, w * r, c});
  auto index_pair = [=](std::int64_t bi, std::int64_t y, std::int64_t xx, std::int64_t ch, std::int64_t i,
                        std::int64_t j) {
    const std::int64_t src = ((bi * h + y) * w + xx) * cin + ch * r * r + i * r + j;
    const std::int64_t dst = ((bi * h * r + y * r + i) * w * r + xx * r + j) * c + ch;
    return std::pair{src, dst};
  };
  for (std::int64_t bi = 0; bi < bsz; ++bi)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t xx = 0; xx < w; ++xx)
        for (std::int64_t ch = 0; ch < c; ++ch)
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < r; ++j) {
              auto [s, d] = index_pair(bi, y, xx, ch, i, j);
              out[d] = x.value()[s];
            }
  return graph_of({&x})->emit(std::move(out), {&x}, [&] {
    return [nx = x.node(), index_pair, bsz, h, w, c, r](const Tensor<T>& g) {
      auto& gx = nx->grad_ref();
      for (std::int64_t bi = 0; bi < bsz; ++bi)
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t xx = 0; xx < w; ++xx)
            for (std::int64_t ch = 0; ch < c; ++ch)
              for (int i = 0; i < r; ++i)
                for (int j = 0; j < r; ++j) {
                  auto [s, d] = index_pair(bi, y, xx, ch, i, j);
                  gx[s] += g[d];
                }
    };
  });
}

template <typename T>
Var<T> mean_tokens(const Var<T>& x) {
  if (x.rank() < 2) throw Error(ErrorCode::ShapeMismatch, "mean_tokens needs rank >= 2");
  const std::int64_t c = x.dim(-1);
  const std::int64_t r = x.dim(-2);
  const std::int64_t outer = x.value().size() / (r * c);
  Shape shape(x.shape().begin(), x.shape().end() - 2);
  shape.push_back(c);
  Tensor<T> out(shape);
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t j = 0; j < c; ++j) {
      out[o * c + j] = pairwise_sum(x.value().data() + o * r * c + j, r, c) / static_cast<T>(r);
    }
  }
  return graph_of({&x})->emit(std::move(out), {&x}, [&] {
    return [nx = x.node(), outer, r, c](const Tensor<T>& g) {
      auto& gx = nx->grad_ref();
      const T inv = T(1) / static_cast<T>(r);
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < r; ++i)
          for (std::int64_t j = 0; j < c; ++j) gx[(o * r + i) * c + j] += g[o * c + j] * inv;
    };
  });
}

template <typename T>
Var<T> crop_spatial(const Var<T>& x, std::int64_t h, std::int64_t w) {
  require_rank(x.shape(), 4, "crop_spatial input");
  const std::int64_t bsz = x.dim(0), hi = x.dim(1), wi = x.dim(2), c = x.dim(3);
  if (h > hi || w > wi || h < 1 || w < 1) {
    throw Error(ErrorCode::ShapeMismatch, "crop_spatial: cannot crop " + shape_string(x.shape()) + " to " +
                                              std::to_string(h) + "x" + std::to_string(w));
  }
  Tensor<T> out(Shape{bsz, h, w, c});
  for (std::int64_t bi = 0; bi < bsz; ++bi)
    for (std::int64_t y = 0; y < h; ++y) {
      const T* src = x.value().data() + ((bi * hi + y) * wi) * c;
      std::copy(src, src + w * c, out.data() + ((bi * h + y) * w) * c);
    }
  return graph_of({&x})->emit(std::move(out), {&x}, [&] {
    return [nx = x.node(), bsz, h, w, hi, wi, c](const Tensor<T>& g) {
      auto& gx = nx->grad_ref();
      for (std::int64_t bi = 0; bi < bsz; ++bi)
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t k = 0; k < w * c; ++k) gx[((bi * hi + y) * wi) * c + k] += g[((bi * h + y) * w) * c + k];
    };
  });
}

template <typename T>
Var<T> channel_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& temperature,
                         AttentionTrace<T>* trace) {
  require_shape(k.shape(), q.shape(), "channel_attention key");
  require_shape(v.shape(), q.shape(), "channel_attention value");
  require_rank(temperature.shape(), 1, "channel_attention temperature");
  if (q.rank() < 2) throw Error(ErrorCode::ShapeMismatch, "channel_attention needs rank >= 2");
  const std::int64_t bsz = q.dim(0);
  const std::int64_t c = q.dim(-1);
  const std::int64_t n = q.value().size() / (bsz * c);
  const std::int64_t heads = temperature.dim(0);
  if (heads < 1 || c % heads != 0) {
    throw Error(ErrorCode::ShapeMismatch, "channel_attention: " + std::to_string(c) + " channels over " +
                                              std::to_string(heads) + " heads");
  }
  const std::int64_t d = c / heads;
  const T eps = T(kNormEps);

  auto normalize = [&](const Tensor<T>& src, Tensor<T>& dst, std::vector<T>& norms) {
    dst = Tensor<T>(src.shape());
    norms.assign(static_cast<std::size_t>(bsz * c), T(0));
    for (std::int64_t bi = 0; bi < bsz; ++bi) {
      T* nr = norms.data() + bi * c;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* row = src.data() + (bi * n + i) * c;
        for (std::int64_t j = 0; j < c; ++j) nr[j] += row[j] * row[j];
      }
      for (std::int64_t j = 0; j < c; ++j) nr[j] = std::max(std::sqrt(nr[j]), eps);
      for (std::int64_t i = 0; i < n; ++i) {
        const T* row = src.data() + (bi * n + i) * c;
        T* out = dst.data() + (bi * n + i) * c;
        for (std::int64_t j = 0; j < c; ++j) out[j] = row[j] / nr[j];
      }
    }
  };
  Tensor<T> qn, kn;
  std::vector<T> qnorm, knorm;
  normalize(q.value(), qn, qnorm);
  normalize(k.value(), kn, knorm);

  Tensor<T> out(q.shape());
  std::vector<RowMat<T>> logits(static_cast<std::size_t>(bsz * heads));
  std::vector<RowMat<T>> attn(static_cast<std::size_t>(bsz * heads));
  for (std::int64_t bi = 0; bi < bsz; ++bi) {
    for (std::int64_t hh = 0; hh < heads; ++hh) {
      const std::int64_t off = bi * n * c + hh * d;
      ConstStridedMap<T> qh(qn.data() + off, n, d, Eigen::OuterStride<>(c));
      ConstStridedMap<T> kh(kn.data() + off, n, d, Eigen::OuterStride<>(c));
      ConstStridedMap<T> vh(v.value().data() + off, n, d, Eigen::OuterStride<>(c));
      RowMat<T>& s = logits[bi * heads + hh];
      s.noalias() = qh.transpose() * kh;
      RowMat<T>& a = attn[bi * heads + hh];
      a = s * temperature.value()[hh];
      softmax_rows_inplace(a.data(), d, d, d);
      StridedMap<T>(out.data() + off, n, d, Eigen::OuterStride<>(c)).noalias() = vh * a.transpose();
      if (trace) trace->maps.emplace_back(Shape{d, d}, std::vector<T>(a.data(), a.data() + d * d));
    }
  }

  return graph_of({&q, &k, &v, &temperature})->emit(std::move(out), {&q, &k, &v, &temperature}, [&] {
    return [nq = q.node(), nk = k.node(), nv = v.node(), nt = temperature.node(), qn = std::move(qn),
            kn = std::move(kn), qnorm = std::move(qnorm), knorm = std::move(knorm), logits = std::move(logits),
            attn = std::move(attn), bsz, n, c, heads, d, eps](const Tensor<T>& g) {
      Tensor<T>* gq = grad_of(nq);
      Tensor<T>* gk = grad_of(nk);
      Tensor<T>* gv = grad_of(nv);
      Tensor<T>* gt = grad_of(nt);
      // Backward through column normalisation y = x / max(|x|, eps).
      auto unnormalize = [&](const RowMat<T>& dhat, const Tensor<T>& hat, const std::vector<T>& norms,
                             Tensor<T>& dst, std::int64_t bi, std::int64_t off) {
        for (std::int64_t j = 0; j < d; ++j) {
          const T nrm = norms[bi * c + (off % c) + j];
          T dot = 0;
          for (std::int64_t i = 0; i < n; ++i) dot += dhat(i, j) * hat[off + i * c + j];
          const bool clipped = !(nrm > eps);
          for (std::int64_t i = 0; i < n; ++i) {
            const T dh = dhat(i, j);
            dst[off + i * c + j] += clipped ? dh / eps : (dh - hat[off + i * c + j] * dot) / nrm;
          }
        }
      };
      for (std::int64_t bi = 0; bi < bsz; ++bi) {
        for (std::int64_t hh = 0; hh < heads; ++hh) {
          const std::int64_t off = bi * n * c + hh * d;
          const RowMat<T>& a = attn[bi * heads + hh];
          const RowMat<T>& s = logits[bi * heads + hh];
          ConstStridedMap<T> dout(g.data() + off, n, d, Eigen::OuterStride<>(c));
          ConstStridedMap<T> vh(nv->value.data() + off, n, d, Eigen::OuterStride<>(c));
          if (gv) StridedMap<T>(gv->data() + off, n, d, Eigen::OuterStride<>(c)).noalias() += dout * a;
          RowMat<T> da = dout.transpose() * vh;
          RowMat<T> dz(d, d);
          for (std::int64_t i = 0; i < d; ++i) {
            T dot = 0;
            for (std::int64_t j = 0; j < d; ++j) dot += a(i, j) * da(i, j);
            for (std::int64_t j = 0; j < d; ++j) dz(i, j) = a(i, j) * (da(i, j) - dot);
          }
          if (gt) (*gt)[hh] += dz.cwiseProduct(s).sum();
          const T tau = nt->value[hh];
          RowMat<T> ds = dz * tau;
          if (gq) {
            ConstStridedMap<T> kh(kn.data() + off, n, d, Eigen::OuterStride<>(c));
            RowMat<T> dqh = kh * ds.transpose();
            unnormalize(dqh, qn, qnorm, *gq, bi, off);
          }
          if (gk) {
            ConstStridedMap<T> qh(qn.data() + off, n, d, Eigen::OuterStride<>(c));
            RowMat<T> dkh = qh * ds;
            unnormalize(dkh, kn, knorm, *gk, bi, off);
          }
        }
      }
    };
  });
}

template <typename T>
Var<T> token_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, T scale,
                       AttentionTrace<T>* trace) {
  require_rank(q.shape(), 2, "token_attention query");
  require_rank(k.shape(), 2, "token_attention key");
  require_shape(v.shape(), k.shape(), "token_attention value");
  const std::int64_t nq = q.dim(0), nk = k.dim(0), c = q.dim(1);
  if (k.dim(1) != c || heads < 1 || c % heads != 0) {
    throw Error(ErrorCode::ShapeMismatch, "token_attention: query " + shape_string(q.shape()) + ", key " +
                                              shape_string(k.shape()) + ", heads " + std::to_string(heads));
  }
  const std::int64_t d = c / heads;
  Tensor<T> out(Shape{nq, c});
  std::vector<RowMat<T>> probs(static_cast<std::size_t>(heads));
  for (std::int64_t hh = 0; hh < heads; ++hh) {
    ConstStridedMap<T> qh(q.value().data() + hh * d, nq, d, Eigen::OuterStride<>(c));
    ConstStridedMap<T> kh(k.value().data() + hh * d, nk, d, Eigen::OuterStride<>(c));
    ConstStridedMap<T> vh(v.value().data() + hh * d, nk, d, Eigen::OuterStride<>(c));
    RowMat<T>& p = probs[hh];
    p.noalias() = (qh * kh.transpose()) * scale;
    softmax_rows_inplace(p.data(), nq, nk, nk);
    StridedMap<T>(out.data() + hh * d, nq, d, Eigen::OuterStride<>(c)).noalias() = p * vh;
    if (trace) trace->maps.emplace_back(Shape{nq, nk}, std::vector<T>(p.data(), p.data() + nq * nk));
  }
  return graph_of({&q, &k, &v})->emit(std::move(out), {&q, &k, &v}, [&] {
    return [nqn = q.node(), nkn = k.node(), nvn = v.node(), probs = std::move(probs), nq, nk, c, d, heads,
            scale](const Tensor<T>& g) {
      Tensor<T>* gq = grad_of(nqn);
      Tensor<T>* gk = grad_of(nkn);
      Tensor<T>* gv = grad_of(nvn);
      for (std::int64_t hh = 0; hh < heads; ++hh) {
        const RowMat<T>& p = probs[hh];
        ConstStridedMap<T> dout(g.data() + hh * d, nq, d, Eigen::OuterStride<>(c));
        ConstStridedMap<T> qh(nqn->value.data() + hh * d, nq, d, Eigen::OuterStride<>(c));
        ConstStridedMap<T> kh(nkn->value.data() + hh * d, nk, d, Eigen::OuterStride<>(c));
        ConstStridedMap<T> vh(nvn->value.data() + hh * d, nk, d, Eigen::OuterStride<>(c));
        if (gv) StridedMap<T>(gv->data() + hh * d, nk, d, Eigen::OuterStride<>(c)).noalias() += p.transpose() * dout;
        RowMat<T> dp = dout * vh.transpose();
        RowMat<T> ds(nq, nk);
        for (std::int64_t i = 0; i < nq; ++i) {
          T dot = 0;
          for (std::int64_t j = 0; j < nk; ++j) dot += dp(i, j) * p(i, j);
          for (std::int64_t j = 0; j < nk; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * scale;
        }
        if (gq) StridedMap<T>(gq->data() + hh * d, nq, d, Eigen::OuterStride<>(c)).noalias() += ds * kh;
        if (gk) StridedMap<T>(gk->data() + hh * d, nk, d, Eigen::OuterStride<>(c)).noalias() += ds.transpose() * qh;
      }
    };
  });
}

template <typename T>
Var<T> l1_loss(const Var<T>& y, const Tensor<T>& target) {
  require_shape(target.shape(), y.shape(), "l1_loss target");
  const std::int64_t n = target.size();
  double sum = 0;
  for (std::int64_t i = 0; i < n; ++i) sum += std::abs(static_cast<double>(y.value()[i]) - target[i]);
  Tensor<T> out(Shape{1}, static_cast<T>(sum / static_cast<double>(n)));
  return graph_of({&y})->emit(std::move(out), {&y}, [&] {
    return [ny = y.node(), target, n](const Tensor<T>& g) {
      auto& gy = ny->grad_ref();
      const T s = g[0] / static_cast<T>(n);
      for (std::int64_t i = 0; i < n; ++i) {
        const T r = ny->value[i] - target[i];
        gy[i] += r > T(0) ? s : (r < T(0) ? -s : T(0));
      }
    };
  });
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
  require_shape(weights.shape(), x.shape(), "weighted_sum weights");
  T sum = 0;
  for (std::int64_t i = 0; i < weights.size(); ++i) sum += x.value()[i] * weights[i];
  return graph_of({&x})->emit(Tensor<T>(Shape{1}, sum), {&x}, [&] {
    return [nx = x.node(), weights](const Tensor<T>& g) {
      auto& gx = nx->grad_ref();
      for (std::int64_t i = 0; i < weights.size(); ++i) gx[i] += g[0] * weights[i];
    };
  });
}

#define LMDIR_INSTANTIATE_OPS(T)                                                                    \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                \
  template Var<T> affine(const Var<T>&, T, T);                                                      \
  template Var<T> add_channels(const Var<T>&, const Var<T>&);                                       \
  template Var<T> mul_channels(const Var<T>&, const Var<T>&);                                       \
  template Var<T> linear(const Var<T>&, const Var<T>&);                                             \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                              \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, PadMode);                \
  template Var<T> depthwise_conv3x3(const Var<T>&, const Var<T>&, const Var<T>&);                   \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                       \
  template Var<T> gelu(const Var<T>&);                                                              \
  template Var<T> relu(const Var<T>&);                                                              \
  template Var<T> silu(const Var<T>&);                                                              \
  template Var<T> clamp(const Var<T>&, T, T);                                                       \
  template Var<T> softmax_last(const Var<T>&, AttentionTrace<T>*);                                  \
  template Var<T> softmax_spatial(const Var<T>&, AttentionTrace<T>*);                               \
  template Var<T> slice_last(const Var<T>&, std::int64_t, std::int64_t);                            \
  template Var<T> concat_last(const Var<T>&, const Var<T>&);                                        \
  template Var<T> reshape(const Var<T>&, Shape);                                                    \
  template Var<T> pixel_shuffle(const Var<T>&, int);                                                \
  template Var<T> mean_tokens(const Var<T>&);                                                       \
  template Var<T> crop_spatial(const Var<T>&, std::int64_t, std::int64_t);                          \
  template Var<T> channel_attention(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&,     \
                                    AttentionTrace<T>*);                                            \
  template Var<T> token_attention(const Var<T>&, const Var<T>&, const Var<T>&, int, T,              \
                                  AttentionTrace<T>*);                                              \
  template Var<T> l1_loss(const Var<T>&, const Tensor<T>&);                                         \
  template Var<T> weighted_sum(const Var<T>&, const Tensor<T>&);

LMDIR_INSTANTIATE_OPS(float)
LMDIR_INSTANTIATE_OPS(double)

}  // namespace lmdir::ops
