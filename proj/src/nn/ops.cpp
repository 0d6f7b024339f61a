#include "scgan/nn/ops.hpp"

#include <algorithm>
#include <cmath>

#include "kernels.hpp"

namespace scgan::nn {
namespace {

void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected NCHW tensor, got " + to_string(s));
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

// Unfolds one sample [C,H,W] into columns [C*k*k, Ho*Wo].
template <typename T>
void im2col(const T* x, int channels, int height, int width, int k, int stride, int pad, int out_h,
            int out_w, T* col) {
  const int plane = out_h * out_w;
  for (int c = 0; c < channels; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * height * width;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * plane;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* dst = row + static_cast<std::size_t>(oy) * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(dst, dst + out_w, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < width) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int channels, int height, int width, int k, int stride, int pad, int out_h,
            int out_w, T* x) {
  const int plane = out_h * out_w;
  for (int c = 0; c < channels; ++c) {
    T* xc = x + static_cast<std::size_t>(c) * height * width;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * plane;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) continue;
          const T* src = row + static_cast<std::size_t>(oy) * out_w;
          T* dst = xc + static_cast<std::size_t>(iy) * width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

inline int reflect_index(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

template <typename T, typename F, typename G>
Tensor<T> elementwise(const Tensor<T>& x, F forward, G derivative_from_output) {
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
  return Tensor<T>::make(x.shape(), std::move(out), {x}, [derivative_from_output](Node<T>& self) {
    auto& input = *self.inputs[0];
    if (!input.requires_grad) return;
    auto& g = input.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * derivative_from_output(input.value[i], self.value[i]);
  });
}

}  // namespace

bool all_finite(std::span<const float> values) {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding) {
  require_rank4(x.shape(), "conv2d");
  require_rank4(weight.shape(), "conv2d weight");
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int co = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != ci || weight.dim(3) != k)
    throw ShapeError("conv2d: weight " + to_string(weight.shape()) + " incompatible with input " +
                     to_string(x.shape()));
  if (bias.defined() && (bias.size() != static_cast<std::size_t>(co)))
    throw ShapeError("conv2d: bias must have " + std::to_string(co) + " entries");
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  const int out_h = (h + 2 * padding - k) / stride + 1;
  const int out_w = (w + 2 * padding - k) / stride + 1;
  if (h + 2 * padding < k || w + 2 * padding < k || out_h < 1 || out_w < 1)
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " smaller than kernel " +
                     std::to_string(k));

  const int kdim = ci * k * k;
  const int plane = out_h * out_w;
  const bool direct = (k == 1 && stride == 1 && padding == 0);
  const std::size_t in_sample = static_cast<std::size_t>(ci) * h * w;
  const std::size_t col_sample = static_cast<std::size_t>(kdim) * plane;
  const std::size_t out_sample = static_cast<std::size_t>(co) * plane;

  // Columns are kept for the backward pass only when a graph is recorded.
  const bool track = x.requires_grad() || weight.requires_grad() ||
                     (bias.defined() && bias.requires_grad());
  std::vector<T> cols;
  std::vector<T> scratch;
  if (!direct) {
    if (track)
      cols.resize(col_sample * n);
    else
      scratch.resize(col_sample);
  }

  std::vector<T> out(out_sample * n);
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  for (int s = 0; s < n; ++s) {
    const T* col;
    if (direct) {
      col = xd + s * in_sample;
    } else {
      T* dst = track ? cols.data() + s * col_sample : scratch.data();
      im2col(xd + s * in_sample, ci, h, w, k, stride, padding, out_h, out_w, dst);
      col = dst;
    }
    T* o = out.data() + s * out_sample;
    if (bias.defined()) {
      const auto b = bias.data();
      for (int c = 0; c < co; ++c) std::fill(o + c * plane, o + (c + 1) * plane, b[c]);
    }
    kernels::gemm(false, false, co, plane, kdim, T(1), wd, kdim, col, plane,
                  bias.defined() ? T(1) : T(0), o, plane);
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor<T>::make(
      {n, co, out_h, out_w}, std::move(out), std::move(inputs),
      [=, cols = std::move(cols)](Node<T>& self) {
        Node<T>& xin = *self.inputs[0];
        Node<T>& win = *self.inputs[1];
        Node<T>* bin = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
        const T* dy = self.grad.data();
        if (win.requires_grad) {
          auto& dw = win.grad_buffer();
          for (int s = 0; s < n; ++s) {
            const T* col = direct ? xin.value.data() + s * in_sample : cols.data() + s * col_sample;
            kernels::gemm(false, true, co, kdim, plane, T(1), dy + s * out_sample, plane, col, plane,
                          T(1), dw.data(), kdim);
          }
        }
        if (bin && bin->requires_grad) {
          auto& db = bin->grad_buffer();
          for (int s = 0; s < n; ++s)
            for (int c = 0; c < co; ++c) {
              const T* row = dy + s * out_sample + static_cast<std::size_t>(c) * plane;
              T acc = 0;
              for (int i = 0; i < plane; ++i) acc += row[i];
              db[c] += acc;
            }
        }
        if (xin.requires_grad) {
          auto& dx = xin.grad_buffer();
          std::vector<T> dcol(direct ? 0 : col_sample);
          for (int s = 0; s < n; ++s) {
            if (direct) {
              kernels::gemm(true, false, kdim, plane, co, T(1), win.value.data(), kdim,
                            dy + s * out_sample, plane, T(1), dx.data() + s * in_sample, plane);
            } else {
              kernels::gemm(true, false, kdim, plane, co, T(1), win.value.data(), kdim,
                            dy + s * out_sample, plane, T(0), dcol.data(), plane);
              col2im(dcol.data(), ci, h, w, k, stride, padding, out_h, out_w,
                     dx.data() + s * in_sample);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& x, int pad) {
  require_rank4(x.shape(), "reflect_pad");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (pad < 0 || pad >= h || pad >= w)
    throw ShapeError("reflect_pad: pad " + std::to_string(pad) + " too large for " + to_string(x.shape()));
  const int oh = h + 2 * pad, ow = w + 2 * pad;
  std::vector<T> out(static_cast<std::size_t>(n) * c * oh * ow);
  const auto in = x.data();
  for (int p = 0; p < n * c; ++p) {
    const T* src = in.data() + static_cast<std::size_t>(p) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(p) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      const int sy = reflect_index(y - pad, h);
      for (int xx = 0; xx < ow; ++xx) dst[y * ow + xx] = src[sy * w + reflect_index(xx - pad, w)];
    }
  }
  return Tensor<T>::make({n, c, oh, ow}, std::move(out), {x}, [=](Node<T>& self) {
    Node<T>& input = *self.inputs[0];
    if (!input.requires_grad) return;
    auto& g = input.grad_buffer();
    for (int p = 0; p < n * c; ++p) {
      const T* src = self.grad.data() + static_cast<std::size_t>(p) * oh * ow;
      T* dst = g.data() + static_cast<std::size_t>(p) * h * w;
      for (int y = 0; y < oh; ++y) {
        const int sy = reflect_index(y - pad, h);
        for (int xx = 0; xx < ow; ++xx) dst[sy * w + reflect_index(xx - pad, w)] += src[y * ow + xx];
      }
    }
  });
}

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        double eps) {
  require_rank4(x.shape(), "instance_norm");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t m = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c))
    throw ShapeError("instance_norm: affine parameters must have " + std::to_string(c) + " entries");

  const auto in = x.data();
  const auto g = gamma.data();
  const auto b = beta.data();
  std::vector<T> out(in.size());
  std::vector<T> normalized(in.size());
  std::vector<T> inv_std(static_cast<std::size_t>(n) * c);
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * m;
      double mean = 0;
      for (std::size_t i = 0; i < m; ++i) mean += in[base + i];
      mean /= static_cast<double>(m);
      double var = 0;
      for (std::size_t i = 0; i < m; ++i) {
        const double d = in[base + i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const double istd = 1.0 / std::sqrt(var + eps);
      inv_std[s * c + ch] = static_cast<T>(istd);
      for (std::size_t i = 0; i < m; ++i) {
        const T xh = static_cast<T>((in[base + i] - mean) * istd);
        normalized[base + i] = xh;
        out[base + i] = g[ch] * xh + b[ch];
      }
    }
  }
  return Tensor<T>::make(
      x.shape(), std::move(out), {x, gamma, beta},
      [=, normalized = std::move(normalized), inv_std = std::move(inv_std)](Node<T>& self) {
        Node<T>& xin = *self.inputs[0];
        Node<T>& gin = *self.inputs[1];
        Node<T>& bin = *self.inputs[2];
        const T* dy = self.grad.data();
        for (int s = 0; s < n; ++s) {
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * m;
            double sum_dy = 0, sum_dy_xh = 0;
            for (std::size_t i = 0; i < m; ++i) {
              sum_dy += dy[base + i];
              sum_dy_xh += static_cast<double>(dy[base + i]) * normalized[base + i];
            }
            if (gin.requires_grad) gin.grad_buffer()[ch] += static_cast<T>(sum_dy_xh);
            if (bin.requires_grad) bin.grad_buffer()[ch] += static_cast<T>(sum_dy);
            if (xin.requires_grad) {
              auto& dx = xin.grad_buffer();
              const double gm = gin.value[ch];
              const double scale_factor = gm * inv_std[s * c + ch] / static_cast<double>(m);
              for (std::size_t i = 0; i < m; ++i) {
                dx[base + i] += static_cast<T>(
                    scale_factor * (static_cast<double>(m) * dy[base + i] - sum_dy -
                                    normalized[base + i] * sum_dy_xh));
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return elementwise(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T, T y) { return y > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope) {
  const T a = static_cast<T>(slope);
  return elementwise(
      x, [a](T v) { return v > T(0) ? v : a * v; }, [a](T v, T) { return v > T(0) ? T(1) : a; });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return elementwise(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return elementwise(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return Tensor<T>::make(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  const T f = static_cast<T>(factor);
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * f;
  return Tensor<T>::make(x.shape(), std::move(out), {x}, [f](Node<T>& self) {
    Node<T>& input = *self.inputs[0];
    if (!input.requires_grad) return;
    auto& g = input.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * f;
  });
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  require_rank4(x.shape(), "upsample_nearest2x");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = 2 * h, ow = 2 * w;
  std::vector<T> out(static_cast<std::size_t>(n) * c * oh * ow);
  const auto in = x.data();
  for (int p = 0; p < n * c; ++p) {
    const T* src = in.data() + static_cast<std::size_t>(p) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(p) * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
  }
  return Tensor<T>::make({n, c, oh, ow}, std::move(out), {x}, [=](Node<T>& self) {
    Node<T>& input = *self.inputs[0];
    if (!input.requires_grad) return;
    auto& g = input.grad_buffer();
    for (int p = 0; p < n * c; ++p) {
      const T* src = self.grad.data() + static_cast<std::size_t>(p) * oh * ow;
      T* dst = g.data() + static_cast<std::size_t>(p) * h * w;
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
    }
  });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank4(a.shape(), "concat_channels");
  require_rank4(b.shape(), "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw ShapeError("concat_channels: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  const std::size_t sa = ca * plane, sb = cb * plane;
  std::vector<T> out(n * (sa + sb));
  for (int s = 0; s < n; ++s) {
    std::copy_n(a.data().data() + s * sa, sa, out.data() + s * (sa + sb));
    std::copy_n(b.data().data() + s * sb, sb, out.data() + s * (sa + sb) + sa);
  }
  return Tensor<T>::make({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                         [=](Node<T>& self) {
                           Node<T>& ain = *self.inputs[0];
                           Node<T>& bin = *self.inputs[1];
                           for (int s = 0; s < n; ++s) {
                             const T* g = self.grad.data() + s * (sa + sb);
                             if (ain.requires_grad) {
                               T* d = ain.grad_buffer().data() + s * sa;
                               for (std::size_t i = 0; i < sa; ++i) d[i] += g[i];
                             }
                             if (bin.requires_grad) {
                               T* d = bin.grad_buffer().data() + s * sb;
                               for (std::size_t i = 0; i < sb; ++i) d[i] += g[sa + i];
                             }
                           }
                         });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int end) {
  require_rank4(x.shape(), "slice_channels");
  const int n = x.dim(0), c = x.dim(1);
  if (begin < 0 || end > c || begin >= end)
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + to_string(x.shape()));
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const std::size_t in_sample = c * plane;
  const std::size_t out_sample = (end - begin) * plane;
  std::vector<T> out(n * out_sample);
  for (int s = 0; s < n; ++s)
    std::copy_n(x.data().data() + s * in_sample + begin * plane, out_sample,
                out.data() + s * out_sample);
  return Tensor<T>::make({n, end - begin, x.dim(2), x.dim(3)}, std::move(out), {x},
                         [=](Node<T>& self) {
                           Node<T>& input = *self.inputs[0];
                           if (!input.requires_grad) return;
                           auto& g = input.grad_buffer();
                           for (int s = 0; s < n; ++s) {
                             T* d = g.data() + s * in_sample + begin * plane;
                             const T* src = self.grad.data() + s * out_sample;
                             for (std::size_t i = 0; i < out_sample; ++i) d[i] += src[i];
                           }
                         });
}

template <typename T>
Tensor<T> self_attention(const Tensor<T>& x, const AttentionWeights<T>& w, std::vector<T>* weights,
                         std::size_t cache_limit) {
  require_rank4(x.shape(), "self_attention");
  const int n = x.dim(0), c = x.dim(1);
  const int p = x.dim(2) * x.dim(3);
  const int ck = w.wq.dim(0);
  if (w.wq.size() != static_cast<std::size_t>(ck) * c || w.wk.size() != w.wq.size() ||
      w.wv.size() != static_cast<std::size_t>(c) * c || w.bq.size() != static_cast<std::size_t>(ck) ||
      w.bk.size() != static_cast<std::size_t>(ck) || w.bv.size() != static_cast<std::size_t>(c) ||
      w.gamma.size() != 1)
    throw ShapeError("self_attention: projection shapes incompatible with " + to_string(x.shape()));

  const std::size_t feat = static_cast<std::size_t>(c) * p;
  const std::size_t keys = static_cast<std::size_t>(ck) * p;
  const std::size_t att = static_cast<std::size_t>(p) * p;
  const T gamma = w.gamma.data()[0];

  auto project = [&](const Tensor<T>& weight, const Tensor<T>& bias, int rows, const T* xs, T* dst) {
    const auto b = bias.data();
    for (int r = 0; r < rows; ++r) std::fill(dst + static_cast<std::size_t>(r) * p, dst + static_cast<std::size_t>(r + 1) * p, b[r]);
    kernels::gemm(false, false, rows, p, c, T(1), weight.data().data(), c, xs, p, T(1), dst, p);
  };

  // Query rows are processed in blocks small enough for the block of the
  // P x P attention matrix to stay in cache. Backward reuses the stored
  // probabilities when the full matrices fit under cache_limit and recomputes
  // each block otherwise.
  const int block = std::clamp(65536 / std::max(p, 1), 1, p);
  const bool cache = n * att <= cache_limit;
  auto attention_block = [=](const T* qs, const T* ks, int r0, int rows, T* dst) {
    kernels::gemm(true, false, rows, p, ck, T(1), qs + r0, p, ks, p, T(0), dst, p);
    kernels::softmax_rows(dst, rows, p);
  };

  std::vector<T> q(n * keys), k(n * keys), v(n * feat), o(n * feat);
  std::vector<T> out(x.data().begin(), x.data().end());
  std::vector<T> scratch(static_cast<std::size_t>(block) * p);
  std::vector<T> probs(cache ? n * att : 0);
  if (weights) weights->assign(n * att, T(0));
  for (int s = 0; s < n; ++s) {
    const T* xs = x.data().data() + s * feat;
    T* qs = q.data() + s * keys;
    T* ks = k.data() + s * keys;
    T* vs = v.data() + s * feat;
    T* os = o.data() + s * feat;
    project(w.wq, w.bq, ck, xs, qs);
    project(w.wk, w.bk, ck, xs, ks);
    project(w.wv, w.bv, c, xs, vs);
    for (int r0 = 0; r0 < p; r0 += block) {
      const int rows = std::min(block, p - r0);
      T* a = cache ? probs.data() + s * att + static_cast<std::size_t>(r0) * p : scratch.data();
      attention_block(qs, ks, r0, rows, a);
      if (weights)
        std::copy(a, a + static_cast<std::size_t>(rows) * p, weights->begin() + s * att + static_cast<std::size_t>(r0) * p);
      // O[:, r0:r0+rows] = V A_blk^T
      kernels::gemm(false, true, c, rows, p, T(1), vs, p, a, p, T(0), os + r0, p);
    }
    T* ys = out.data() + s * feat;
    for (std::size_t i = 0; i < feat; ++i) ys[i] += gamma * os[i];
  }

  return Tensor<T>::make(
      x.shape(), std::move(out), {x, w.wq, w.bq, w.wk, w.bk, w.wv, w.bv, w.gamma},
      [=, q = std::move(q), k = std::move(k), v = std::move(v), o = std::move(o),
       probs = std::move(probs)](Node<T>& self) {
        Node<T>& xin = *self.inputs[0];
        Node<T>& wq = *self.inputs[1];
        Node<T>& bq = *self.inputs[2];
        Node<T>& wk = *self.inputs[3];
        Node<T>& bk = *self.inputs[4];
        Node<T>& wv = *self.inputs[5];
        Node<T>& bv = *self.inputs[6];
        Node<T>& gm = *self.inputs[7];
        const T* dy = self.grad.data();

        if (gm.requires_grad) {
          double acc = 0;
          for (std::size_t i = 0; i < o.size(); ++i) acc += static_cast<double>(dy[i]) * o[i];
          gm.grad_buffer()[0] += static_cast<T>(acc);
        }
        if (xin.requires_grad) {
          auto& dx = xin.grad_buffer();
          for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
        }
        // With gamma == 0 every gradient below the residual gain is exactly zero.
        if (gamma == T(0)) return;

        std::vector<T> d_o(feat), dv(feat), dq(keys), dk(keys);
        std::vector<T> ab(cache ? 0 : static_cast<std::size_t>(block) * p), db(static_cast<std::size_t>(block) * p);
        auto param_grads = [&](Node<T>& weight, Node<T>& bias, int rows, const T* dproj,
                               const T* xs, T* dxs) {
          if (weight.requires_grad)
            kernels::gemm(false, true, rows, c, p, T(1), dproj, p, xs, p, T(1),
                          weight.grad_buffer().data(), c);
          if (bias.requires_grad) {
            auto& dbias = bias.grad_buffer();
            for (int r = 0; r < rows; ++r) {
              T acc = 0;
              for (int i = 0; i < p; ++i) acc += dproj[static_cast<std::size_t>(r) * p + i];
              dbias[r] += acc;
            }
          }
          if (dxs)
            kernels::gemm(true, false, c, p, rows, T(1), weight.value.data(), c, dproj, p, T(1), dxs, p);
        };

        for (int s = 0; s < n; ++s) {
          const T* xs = xin.value.data() + s * feat;
          const T* qs = q.data() + s * keys;
          const T* ks = k.data() + s * keys;
          const T* vs = v.data() + s * feat;
          for (std::size_t i = 0; i < feat; ++i) d_o[i] = gamma * dy[s * feat + i];
          std::fill(dv.begin(), dv.end(), T(0));
          std::fill(dk.begin(), dk.end(), T(0));
          for (int r0 = 0; r0 < p; r0 += block) {
            const int rows = std::min(block, p - r0);
            const T* a = probs.data() + s * att + static_cast<std::size_t>(r0) * p;
            if (!cache) {
              attention_block(qs, ks, r0, rows, ab.data());
              a = ab.data();
            }
            // dV += dO_blk A_blk ; dA_blk = dO_blk^T V
            kernels::gemm(false, false, c, p, rows, T(1), d_o.data() + r0, p, a, p, T(1), dv.data(), p);
            kernels::gemm(true, false, rows, p, c, T(1), d_o.data() + r0, p, vs, p, T(0), db.data(), p);
            // dE = A * (dA - <A, dA>) per row, in place.
            kernels::softmax_backward_rows(a, db.data(), rows, p);
            // E = Q^T K  =>  dQ_blk = K dE_blk^T, dK += Q_blk dE_blk
            kernels::gemm(false, true, ck, rows, p, T(1), ks, p, db.data(), p, T(0), dq.data() + r0, p);
            kernels::gemm(false, false, ck, p, rows, T(1), qs + r0, p, db.data(), p, T(1), dk.data(), p);
          }

          T* dxs = xin.requires_grad ? xin.grad_buffer().data() + s * feat : nullptr;
          param_grads(wq, bq, ck, dq.data(), xs, dxs);
          param_grads(wk, bk, ck, dk.data(), xs, dxs);
          param_grads(wv, bv, c, dv.data(), xs, dxs);
        }
      });
}

template <typename T>
Tensor<T> mean_squared_error(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mean_squared_error");
  const auto av = a.data();
  const auto bv = b.data();
  double acc = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = static_cast<double>(av[i]) - bv[i];
    acc += d * d;
  }
  const double inv_n = 1.0 / static_cast<double>(av.size());
  return Tensor<T>::make({1}, {static_cast<T>(acc * inv_n)}, {a, b}, [inv_n](Node<T>& self) {
    Node<T>& ain = *self.inputs[0];
    Node<T>& bin = *self.inputs[1];
    const double g = self.grad[0] * 2.0 * inv_n;
    for (std::size_t i = 0; i < ain.value.size(); ++i) {
      const double d = (static_cast<double>(ain.value[i]) - bin.value[i]) * g;
      if (ain.requires_grad) ain.grad_buffer()[i] += static_cast<T>(d);
      if (bin.requires_grad) bin.grad_buffer()[i] -= static_cast<T>(d);
    }
  });
}

template <typename T>
Tensor<T> mean_absolute_error(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mean_absolute_error");
  const auto av = a.data();
  const auto bv = b.data();
  double acc = 0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += std::abs(static_cast<double>(av[i]) - bv[i]);
  const double inv_n = 1.0 / static_cast<double>(av.size());
  return Tensor<T>::make({1}, {static_cast<T>(acc * inv_n)}, {a, b}, [inv_n](Node<T>& self) {
    Node<T>& ain = *self.inputs[0];
    Node<T>& bin = *self.inputs[1];
    const T g = static_cast<T>(self.grad[0] * inv_n);
    for (std::size_t i = 0; i < ain.value.size(); ++i) {
      const T diff = ain.value[i] - bin.value[i];
      const T sgn = diff > T(0) ? g : (diff < T(0) ? -g : T(0));
      if (ain.requires_grad) ain.grad_buffer()[i] += sgn;
      if (bin.requires_grad) bin.grad_buffer()[i] -= sgn;
    }
  });
}

template <typename T>
Tensor<T> mean_squared_error_to(const Tensor<T>& a, double target) {
  const auto av = a.data();
  double acc = 0;
  for (T v : av) {
    const double d = static_cast<double>(v) - target;
    acc += d * d;
  }
  const double inv_n = 1.0 / static_cast<double>(av.size());
  return Tensor<T>::make({1}, {static_cast<T>(acc * inv_n)}, {a}, [inv_n, target](Node<T>& self) {
    Node<T>& ain = *self.inputs[0];
    if (!ain.requires_grad) return;
    auto& g = ain.grad_buffer();
    const double s = self.grad[0] * 2.0 * inv_n;
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += static_cast<T>((static_cast<double>(ain.value[i]) - target) * s);
  });
}

#define SCGAN_INSTANTIATE_OPS(T)                                                                 \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);     \
  template Tensor<T> reflect_pad(const Tensor<T>&, int);                                         \
  template Tensor<T> instance_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double); \
  template Tensor<T> relu(const Tensor<T>&);                                                     \
  template Tensor<T> leaky_relu(const Tensor<T>&, double);                                       \
  template Tensor<T> tanh(const Tensor<T>&);                                                     \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, double);                                            \
  template Tensor<T> upsample_nearest2x(const Tensor<T>&);                                       \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> slice_channels(const Tensor<T>&, int, int);                                 \
  template Tensor<T> self_attention(const Tensor<T>&, const AttentionWeights<T>&, std::vector<T>*, std::size_t); \
  template Tensor<T> mean_squared_error(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> mean_absolute_error(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> mean_squared_error_to(const Tensor<T>&, double);

SCGAN_INSTANTIATE_OPS(float)
SCGAN_INSTANTIATE_OPS(double)

}  // namespace scgan::nn
