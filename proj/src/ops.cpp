#include "qarv/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace qarv::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

[[noreturn]] void fail(const std::string& op, const std::string& what) {
  throw std::invalid_argument(op + ": " + what);
}

template <typename T>
void require_same_shape(const std::string& op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
void require_rank(const std::string& op, const Tensor<T>& a, std::size_t rank) {
  if (a.rank() != rank)
    fail(op, "expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
}

// Looks up the node for `t` among the recorded inputs of `out`; nullptr when
// `t` does not need a gradient.
template <typename T>
typename Tensor<T>::Node* recorded(typename Tensor<T>::Node& out, const Tensor<T>& t) {
  if (!t.defined()) return nullptr;
  for (auto& in : out.inputs)
    if (in.get() == t.node()) return in.get();
  return nullptr;
}

template <typename T>
T gauss_cdf(T x) {
  return T(0.5) * std::erfc(-x * T(std::numbers::sqrt2 / 2));
}

template <typename T>
T gauss_pdf(T x) {
  return T(std::numbers::inv_sqrtpi / std::numbers::sqrt2) * std::exp(T(-0.5) * x * x);
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  auto out = make_result<T>(a.shape(), {&a, &b});
  auto o = out.mutable_values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  if (out.requires_grad()) {
    out.node()->backward = [a, b](typename Tensor<T>::Node& self) {
      for (auto* in : {recorded(self, a), recorded(self, b)}) {
        if (!in) continue;
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  auto out = make_result<T>(a.shape(), {&a, &b});
  auto o = out.mutable_values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] - bv[i];
  if (out.requires_grad()) {
    out.node()->backward = [a, b](typename Tensor<T>::Node& self) {
      if (auto* in = recorded(self, a)) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (auto* in = recorded(self, b)) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  auto out = make_result<T>(a.shape(), {&a, &b});
  auto o = out.mutable_values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  if (out.requires_grad()) {
    out.node()->backward = [a, b](typename Tensor<T>::Node& self) {
      auto av = a.values(), bv = b.values();
      if (auto* in = recorded(self, a)) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
      }
      if (auto* in = recorded(self, b)) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  auto out = make_result<T>(a.shape(), {&a});
  auto o = out.mutable_values();
  auto av = a.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * factor;
  if (out.requires_grad()) {
    out.node()->backward = [factor](typename Tensor<T>::Node& self) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    };
  }
  return out;
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  auto out = make_result<T>(a.shape(), {&a});
  auto o = out.mutable_values();
  auto av = a.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::exp(av[i]);
  if (out.requires_grad()) {
    out.node()->backward = [](typename Tensor<T>::Node& self) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
    };
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  auto out = make_result<T>(a.shape(), {&a});
  auto o = out.mutable_values();
  auto av = a.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * gauss_cdf(av[i]);
  if (out.requires_grad()) {
    out.node()->backward = [a](typename Tensor<T>::Node& self) {
      auto av = a.values();
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T x = av[i];
        g[i] += self.grad[i] * (gauss_cdf(x) + x * gauss_pdf(x));
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  if (!(lo <= hi)) fail("clamp", "empty range");
  auto out = make_result<T>(a.shape(), {&a});
  auto o = out.mutable_values();
  auto av = a.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::clamp(av[i], lo, hi);
  if (out.requires_grad()) {
    out.node()->backward = [a, lo, hi](typename Tensor<T>::Node& self) {
      auto av = a.values();
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T up = self.grad[i];
        const bool pass = (av[i] >= lo && av[i] <= hi) || (av[i] < lo && up < 0) ||
                          (av[i] > hi && up > 0);
        if (pass) g[i] += up;
      }
    };
  }
  return out;
}

// ----------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  auto out = make_result<T>(Shape{}, {&a});
  T acc = 0;
  for (T v : a.values()) acc += v;
  out.mutable_values()[0] = acc;
  if (out.requires_grad()) {
    out.node()->backward = [](typename Tensor<T>::Node& self) {
      auto& g = self.inputs[0]->grad_buffer();
      for (auto& v : g) v += self.grad[0];
    };
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) fail("mean", "empty tensor");
  return scale(sum(a), T(1) / T(a.numel()));
}

template <typename T>
Tensor<T> sum_per_sample(const Tensor<T>& a) {
  if (a.rank() < 1) fail("sum_per_sample", "needs a batch axis");
  const std::size_t n = a.dim(0), per = a.numel() / std::max<std::size_t>(n, 1);
  auto out = make_result<T>(Shape{n}, {&a});
  auto av = a.values();
  for (std::size_t s = 0; s < n; ++s) {
    T acc = 0;
    for (std::size_t i = 0; i < per; ++i) acc += av[s * per + i];
    out.mutable_values()[s] = acc;
  }
  if (out.requires_grad()) {
    out.node()->backward = [n, per](typename Tensor<T>::Node& self) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < per; ++i) g[s * per + i] += self.grad[s];
    };
  }
  return out;
}

template <typename T>
Tensor<T> mse_per_sample(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mse_per_sample", a, b);
  if (a.rank() < 1 || a.numel() == 0) fail("mse_per_sample", "empty input");
  const std::size_t n = a.dim(0), per = a.numel() / n;
  auto out = make_result<T>(Shape{n}, {&a, &b});
  auto av = a.values(), bv = b.values();
  for (std::size_t s = 0; s < n; ++s) {
    T acc = 0;
    for (std::size_t i = 0; i < per; ++i) {
      const T d = av[s * per + i] - bv[s * per + i];
      acc += d * d;
    }
    out.mutable_values()[s] = acc / T(per);
  }
  if (out.requires_grad()) {
    out.node()->backward = [a, b, n, per](typename Tensor<T>::Node& self) {
      auto av = a.values(), bv = b.values();
      auto* ga = recorded(self, a);
      auto* gb = recorded(self, b);
      for (std::size_t s = 0; s < n; ++s) {
        const T k = T(2) * self.grad[s] / T(per);
        for (std::size_t i = 0; i < per; ++i) {
          const std::size_t j = s * per + i;
          const T d = k * (av[j] - bv[j]);
          if (ga) ga->grad_buffer()[j] += d;
          if (gb) gb->grad_buffer()[j] -= d;
        }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& a, std::span<const T> weights) {
  if (weights.size() != a.numel()) fail("weighted_sum", "weight count does not match");
  auto out = make_result<T>(Shape{}, {&a});
  T acc = 0;
  auto av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) acc += weights[i] * av[i];
  out.mutable_values()[0] = acc;
  if (out.requires_grad()) {
    std::vector<T> w(weights.begin(), weights.end());
    out.node()->backward = [w = std::move(w)](typename Tensor<T>::Node& self) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * w[i];
    };
  }
  return out;
}

// --------------------------------------------------------------------- linear

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  const std::size_t n = x.dim(0), in = x.dim(1), outc = weight.dim(0);
  if (weight.dim(1) != in) fail("linear", "weight " + shape_str(weight.shape()) +
                                              " incompatible with input " + shape_str(x.shape()));
  if (bias.numel() != outc) fail("linear", "bias size mismatch");
  auto out = make_result<T>(Shape{n, outc}, {&x, &weight, &bias});
  MatMap<T> y(out.mutable_values().data(), n, outc);
  ConstMatMap<T> xm(x.values().data(), n, in);
  ConstMatMap<T> wm(weight.values().data(), outc, in);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bm(bias.values().data(), outc);
  y.noalias() = xm * wm.transpose();
  y.rowwise() += bm;
  if (out.requires_grad()) {
    out.node()->backward = [x, weight, bias, n, in, outc](typename Tensor<T>::Node& self) {
      ConstMatMap<T> gy(self.grad.data(), n, outc);
      if (auto* gx = recorded(self, x)) {
        MatMap<T> g(gx->grad_buffer().data(), n, in);
        g.noalias() += gy * ConstMatMap<T>(weight.values().data(), outc, in);
      }
      if (auto* gw = recorded(self, weight)) {
        MatMap<T> g(gw->grad_buffer().data(), outc, in);
        g.noalias() += gy.transpose() * ConstMatMap<T>(x.values().data(), n, in);
      }
      if (auto* gb = recorded(self, bias)) {
        auto& g = gb->grad_buffer();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < outc; ++c) g[c] += self.grad[r * outc + c];
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------- convolution

namespace {

struct ConvGeom {
  std::size_t cin, h, w, k, stride, pad, ho, wo;
  PadMode mode;
};

// Source index along one axis, or -1 when it falls into zero padding.
inline long source_index(long i, long extent, PadMode mode) {
  if (i >= 0 && i < extent) return i;
  if (mode == PadMode::kZero) return -1;
  return std::clamp(i, 0L, extent - 1);
}

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t p = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c) {
    const T* plane = x + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((c * g.k + ky) * g.k + kx) * p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = source_index(long(oy * g.stride + ky) - long(g.pad), long(g.h), g.mode);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = source_index(long(ox * g.stride + kx) - long(g.pad), long(g.w), g.mode);
            row[oy * g.wo + ox] = (iy < 0 || ix < 0) ? T(0) : plane[iy * long(g.w) + ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx) {
  const std::size_t p = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c) {
    T* plane = dx + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((c * g.k + ky) * g.k + kx) * p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = source_index(long(oy * g.stride + ky) - long(g.pad), long(g.h), g.mode);
          if (iy < 0) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = source_index(long(ox * g.stride + kx) - long(g.pad), long(g.w), g.mode);
            if (ix >= 0) plane[iy * long(g.w) + ix] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding, PadMode mode) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  if (stride == 0) fail("conv2d", "stride must be >= 1");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin || weight.dim(3) != k)
    fail("conv2d", "weight " + shape_str(weight.shape()) + " incompatible with input " +
                       shape_str(x.shape()));
  if (bias.numel() != cout) fail("conv2d", "bias size mismatch");
  if (h + 2 * padding < k || w + 2 * padding < k) fail("conv2d", "kernel larger than padded input");
  const ConvGeom g{cin, h, w, k, stride, padding, (h + 2 * padding - k) / stride + 1,
                   (w + 2 * padding - k) / stride + 1, mode};
  const std::size_t kk = cin * k * k, p = g.ho * g.wo;
  const bool pointwise = (k == 1 && stride == 1 && padding == 0);

  auto out = make_result<T>(Shape{n, cout, g.ho, g.wo}, {&x, &weight, &bias});
  ConstMatMap<T> wm(weight.values().data(), cout, kk);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bm(bias.values().data(), cout);
  Buffer<T> cols(pointwise ? 0 : kk * p);
  for (std::size_t s = 0; s < n; ++s) {
    const T* xs = x.values().data() + s * cin * h * w;
    const T* src = xs;
    if (!pointwise) {
      im2col(xs, g, cols.data());
      src = cols.data();
    }
    MatMap<T> y(out.mutable_values().data() + s * cout * p, cout, p);
    y.noalias() = wm * ConstMatMap<T>(src, kk, p);
    y.colwise() += bm;
  }

  if (out.requires_grad()) {
    out.node()->backward = [x, weight, bias, g, n, cout, kk, p,
                            pointwise](typename Tensor<T>::Node& self) {
      auto* gx = recorded(self, x);
      auto* gw = recorded(self, weight);
      auto* gb = recorded(self, bias);
      ConstMatMap<T> wm(weight.values().data(), cout, kk);
      Buffer<T> cols(pointwise ? 0 : kk * p);
      std::vector<T> dcols(pointwise ? 0 : kk * p);
      const std::size_t in_per = g.cin * g.h * g.w;
      for (std::size_t s = 0; s < n; ++s) {
        ConstMatMap<T> gy(self.grad.data() + s * cout * p, cout, p);
        if (gb) {
          auto& gbv = gb->grad_buffer();
          for (std::size_t c = 0; c < cout; ++c) gbv[c] += gy.row(c).sum();
        }
        if (gw) {
          const T* src = x.values().data() + s * in_per;
          if (!pointwise) {
            im2col(src, g, cols.data());
            src = cols.data();
          }
          MatMap<T>(gw->grad_buffer().data(), cout, kk).noalias() +=
              gy * ConstMatMap<T>(src, kk, p).transpose();
        }
        if (gx) {
          T* dx = gx->grad_buffer().data() + s * in_per;
          if (pointwise) {
            MatMap<T>(dx, kk, p).noalias() += wm.transpose() * gy;
          } else {
            MatMap<T>(dcols.data(), kk, p).noalias() = wm.transpose() * gy;
            col2im_add(dcols.data(), g, dx);
          }
        }
      }
    };
  }
  return out;
}

namespace {

// Copies one plane into a (h + 2p) x (w + 2p) buffer with the given fill.
template <typename T>
void pad_plane(const T* src, std::size_t h, std::size_t w, std::size_t pad, PadMode mode, T* dst) {
  const std::size_t pw = w + 2 * pad, ph = h + 2 * pad;
  for (std::size_t y = 0; y < ph; ++y) {
    const long sy = source_index(long(y) - long(pad), long(h), mode);
    for (std::size_t x = 0; x < pw; ++x) {
      const long sx = source_index(long(x) - long(pad), long(w), mode);
      dst[y * pw + x] = (sy < 0 || sx < 0) ? T(0) : src[sy * long(w) + sx];
    }
  }
}

// Adjoint of pad_plane: folds the padded gradient back onto the plane.
template <typename T>
void unpad_plane_add(const T* src, std::size_t h, std::size_t w, std::size_t pad, PadMode mode,
                     T* dst) {
  const std::size_t pw = w + 2 * pad, ph = h + 2 * pad;
  for (std::size_t y = 0; y < ph; ++y) {
    const long sy = source_index(long(y) - long(pad), long(h), mode);
    if (sy < 0) continue;
    for (std::size_t x = 0; x < pw; ++x) {
      const long sx = source_index(long(x) - long(pad), long(w), mode);
      if (sx >= 0) dst[sy * long(w) + sx] += src[y * pw + x];
    }
  }
}

struct TapRange {
  std::size_t begin, end;
};

// Kernel rows ky with 0 <= o + ky - pad < extent.
inline TapRange tap_range(std::size_t o, std::size_t extent, std::size_t pad, std::size_t k) {
  const std::size_t begin = o < pad ? pad - o : 0;
  const std::size_t end = std::min(k, extent + pad - o);
  return {begin, end};
}

// Outputs o with 0 <= o + tap - pad < extent.
inline TapRange out_range(std::size_t tap, std::size_t extent, std::size_t pad) {
  if (extent + pad <= tap) return {0, 0};
  return {tap < pad ? pad - tap : 0, std::min(extent, extent + pad - tap)};
}

}  // namespace

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           PadMode mode) {
  require_rank("depthwise_conv2d", x, 4);
  require_rank("depthwise_conv2d", weight, 3);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t k = weight.dim(1);
  if (weight.dim(0) != c || weight.dim(2) != k || k % 2 == 0)
    fail("depthwise_conv2d", "weight " + shape_str(weight.shape()) + " incompatible with input " +
                                 shape_str(x.shape()));
  if (bias.numel() != c) fail("depthwise_conv2d", "bias size mismatch");
  const std::size_t pad = k / 2, pw = w + 2 * pad, ph = h + 2 * pad;

  auto out = make_result<T>(x.shape(), {&x, &weight, &bias});
  std::vector<T> padded(ph * pw);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (s * c + ch) * h * w;
      const T* kern = weight.values().data() + ch * k * k;
      T* y = out.mutable_values().data() + off;
      std::fill(y, y + h * w, bias.values()[ch]);
      if (mode == PadMode::kZero) {
        // Only taps that land inside the plane contribute.
        const T* __restrict src = x.values().data() + off;
        for (std::size_t oy = 0; oy < h; ++oy) {
          const TapRange ry = tap_range(oy, h, pad, k);
          T* __restrict yrow = y + oy * w;
          for (std::size_t ky = ry.begin; ky < ry.end; ++ky) {
            const T* __restrict row = src + (oy + ky - pad) * w;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const T wv = kern[ky * k + kx];
              const auto [lo, hi] = out_range(kx, w, pad);
              for (std::size_t ox = lo; ox < hi; ++ox) yrow[ox] += wv * row[ox + kx - pad];
            }
          }
        }
        continue;
      }
      pad_plane(x.values().data() + off, h, w, pad, mode, padded.data());
      for (std::size_t oy = 0; oy < h; ++oy)
        for (std::size_t ky = 0; ky < k; ++ky) {
          const T* row = padded.data() + (oy + ky) * pw;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const T wv = kern[ky * k + kx];
            for (std::size_t ox = 0; ox < w; ++ox) y[oy * w + ox] += wv * row[ox + kx];
          }
        }
    }
  }

  if (out.requires_grad()) {
    out.node()->backward = [x, weight, bias, n, c, h, w, k, pad, mode](typename Tensor<T>::Node& self) {
      auto* gx = recorded(self, x);
      auto* gw = recorded(self, weight);
      auto* gb = recorded(self, bias);
      const std::size_t pw = w + 2 * pad, ph = h + 2 * pad;
      std::vector<T> padded(ph * pw), dpadded(ph * pw);
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t off = (s * c + ch) * h * w;
          const T* gy = self.grad.data() + off;
          if (gb) {
            T acc = 0;
            for (std::size_t i = 0; i < h * w; ++i) acc += gy[i];
            gb->grad_buffer()[ch] += acc;
          }
          if (mode == PadMode::kZero) {
            const T* src = x.values().data() + off;
            const T* kern = weight.values().data() + ch * k * k;
            T* gk = gw ? gw->grad_buffer().data() + ch * k * k : nullptr;
            T* gsrc = gx ? gx->grad_buffer().data() + off : nullptr;
            for (std::size_t oy = 0; oy < h; ++oy) {
              const TapRange ry = tap_range(oy, h, pad, k);
              const T* __restrict g = gy + oy * w;
              for (std::size_t ky = ry.begin; ky < ry.end; ++ky) {
                const std::size_t iy = oy + ky - pad;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const auto [lo, hi] = out_range(kx, w, pad);
                  if (lo >= hi) continue;
                  const std::size_t first = iy * w + lo + kx - pad, len = hi - lo;
                  const T* __restrict gl = g + lo;
                  if (gk) {
                    const T* __restrict row = src + first;
                    T acc = 0;
                    for (std::size_t i = 0; i < len; ++i) acc += gl[i] * row[i];
                    gk[ky * k + kx] += acc;
                  }
                  if (gsrc) {
                    const T wv = kern[ky * k + kx];
                    T* __restrict row = gsrc + first;
                    for (std::size_t i = 0; i < len; ++i) row[i] += wv * gl[i];
                  }
                }
              }
            }
            continue;
          }
          if (gw) {
            pad_plane(x.values().data() + off, h, w, pad, mode, padded.data());
            T* gk = gw->grad_buffer().data() + ch * k * k;
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                T acc = 0;
                for (std::size_t oy = 0; oy < h; ++oy) {
                  const T* row = padded.data() + (oy + ky) * pw + kx;
                  for (std::size_t ox = 0; ox < w; ++ox) acc += gy[oy * w + ox] * row[ox];
                }
                gk[ky * k + kx] += acc;
              }
          }
          if (gx) {
            std::fill(dpadded.begin(), dpadded.end(), T(0));
            const T* kern = weight.values().data() + ch * k * k;
            for (std::size_t oy = 0; oy < h; ++oy)
              for (std::size_t ky = 0; ky < k; ++ky) {
                T* row = dpadded.data() + (oy + ky) * pw;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const T wv = kern[ky * k + kx];
                  for (std::size_t ox = 0; ox < w; ++ox) row[ox + kx] += wv * gy[oy * w + ox];
                }
              }
            unpad_plane_add(dpadded.data(), h, w, pad, mode, gx->grad_buffer().data() + off);
          }
        }
      }
    };
  }
  return out;
}

// -------------------------------------------------------------- normalization

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x) {
  require_rank("layer_norm", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (c < 2) fail("layer_norm", "needs at least 2 channels");
  if (hw == 0 || n == 0) fail("layer_norm", "zero-size axis");
  auto out = make_result<T>(x.shape(), {&x});
  std::vector<T> inv_std(n * hw);
  std::vector<T> mu(hw), var(hw);
  auto xv = x.values();
  auto yv = out.mutable_values();
  for (std::size_t s = 0; s < n; ++s) {
    const T* xs = xv.data() + s * c * hw;
    T* ys = yv.data() + s * c * hw;
    std::fill(mu.begin(), mu.end(), T(0));
    std::fill(var.begin(), var.end(), T(0));
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) mu[p] += xs[ch * hw + p];
    for (std::size_t p = 0; p < hw; ++p) mu[p] /= T(c);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) {
        const T d = xs[ch * hw + p] - mu[p];
        var[p] += d * d;
      }
    T* is = inv_std.data() + s * hw;
    for (std::size_t p = 0; p < hw; ++p) is[p] = T(1) / std::sqrt(var[p] / T(c) + T(kNormEps));
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) ys[ch * hw + p] = (xs[ch * hw + p] - mu[p]) * is[p];
  }
  if (out.requires_grad()) {
    out.node()->backward = [inv_std = std::move(inv_std), n, c, hw](typename Tensor<T>::Node& self) {
      auto& gx = self.inputs[0]->grad_buffer();
      std::vector<T> mg(hw), mgy(hw);
      for (std::size_t s = 0; s < n; ++s) {
        const T* y = self.value.data() + s * c * hw;
        const T* gy = self.grad.data() + s * c * hw;
        std::fill(mg.begin(), mg.end(), T(0));
        std::fill(mgy.begin(), mgy.end(), T(0));
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < hw; ++p) {
            mg[p] += gy[ch * hw + p];
            mgy[p] += gy[ch * hw + p] * y[ch * hw + p];
          }
        const T* is = inv_std.data() + s * hw;
        T* g = gx.data() + s * c * hw;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < hw; ++p) {
            const std::size_t i = ch * hw + p;
            g[i] += is[p] * (gy[i] - mg[p] / T(c) - y[i] * mgy[p] / T(c));
          }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups) {
  require_rank("group_norm", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups == 0 || c == 0 || c % groups != 0)
    fail("group_norm", std::to_string(c) + " channels not divisible into " + std::to_string(groups) +
                           " groups");
  if (hw == 0 || n == 0) fail("group_norm", "zero-size axis");
  const std::size_t len = (c / groups) * hw, sets = n * groups;
  auto out = make_result<T>(x.shape(), {&x});
  std::vector<T> inv_std(sets);
  auto xv = x.values();
  auto yv = out.mutable_values();
  for (std::size_t g = 0; g < sets; ++g) {
    const T* xs = xv.data() + g * len;
    T mu = 0;
    for (std::size_t i = 0; i < len; ++i) mu += xs[i];
    mu /= T(len);
    T var = 0;
    for (std::size_t i = 0; i < len; ++i) var += (xs[i] - mu) * (xs[i] - mu);
    inv_std[g] = T(1) / std::sqrt(var / T(len) + T(kNormEps));
    for (std::size_t i = 0; i < len; ++i) yv[g * len + i] = (xs[i] - mu) * inv_std[g];
  }
  if (out.requires_grad()) {
    out.node()->backward = [inv_std = std::move(inv_std), sets, len](typename Tensor<T>::Node& self) {
      auto& gx = self.inputs[0]->grad_buffer();
      for (std::size_t g = 0; g < sets; ++g) {
        const T* y = self.value.data() + g * len;
        const T* gy = self.grad.data() + g * len;
        T mg = 0, mgy = 0;
        for (std::size_t i = 0; i < len; ++i) {
          mg += gy[i];
          mgy += gy[i] * y[i];
        }
        mg /= T(len);
        mgy /= T(len);
        for (std::size_t i = 0; i < len; ++i)
          gx[g * len + i] += inv_std[g] * (gy[i] - mg - y[i] * mgy);
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x) {
  require_rank("instance_norm", x, 4);
  return group_norm(x, x.dim(1));
}

template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank("channel_affine", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (weight.numel() != c || bias.numel() != c) fail("channel_affine", "parameter size mismatch");
  auto out = make_result<T>(x.shape(), {&x, &weight, &bias});
  auto xv = x.values();
  auto yv = out.mutable_values();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T a = weight.values()[ch], b = bias.values()[ch];
      const std::size_t off = (s * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) yv[off + p] = xv[off + p] * a + b;
    }
  if (out.requires_grad()) {
    out.node()->backward = [x, weight, bias, n, c, hw](typename Tensor<T>::Node& self) {
      auto* gx = recorded(self, x);
      auto* gw = recorded(self, weight);
      auto* gb = recorded(self, bias);
      auto xv = x.values();
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t off = (s * c + ch) * hw;
          T sg = 0, sgx = 0;
          for (std::size_t p = 0; p < hw; ++p) {
            sg += self.grad[off + p];
            sgx += self.grad[off + p] * xv[off + p];
          }
          if (gw) gw->grad_buffer()[ch] += sgx;
          if (gb) gb->grad_buffer()[ch] += sg;
          if (gx) {
            const T a = weight.values()[ch];
            auto& g = gx->grad_buffer();
            for (std::size_t p = 0; p < hw; ++p) g[off + p] += self.grad[off + p] * a;
          }
        }
    };
  }
  return out;
}

template <typename T>
Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& scale_shift) {
  require_rank("modulate", x, 4);
  require_rank("modulate", scale_shift, 2);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (scale_shift.dim(0) != n || scale_shift.dim(1) != 2 * c)
    fail("modulate", "scale/shift " + shape_str(scale_shift.shape()) + " incompatible with " +
                         shape_str(x.shape()));
  auto out = make_result<T>(x.shape(), {&x, &scale_shift});
  auto xv = x.values();
  auto ss = scale_shift.values();
  auto yv = out.mutable_values();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T a = T(1) + ss[s * 2 * c + ch], b = ss[s * 2 * c + c + ch];
      const std::size_t off = (s * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) yv[off + p] = xv[off + p] * a + b;
    }
  if (out.requires_grad()) {
    out.node()->backward = [x, scale_shift, n, c, hw](typename Tensor<T>::Node& self) {
      auto* gx = recorded(self, x);
      auto* gs = recorded(self, scale_shift);
      auto xv = x.values();
      auto ss = scale_shift.values();
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t off = (s * c + ch) * hw;
          if (gs) {
            T sg = 0, sgx = 0;
            for (std::size_t p = 0; p < hw; ++p) {
              sg += self.grad[off + p];
              sgx += self.grad[off + p] * xv[off + p];
            }
            auto& g = gs->grad_buffer();
            g[s * 2 * c + ch] += sgx;
            g[s * 2 * c + c + ch] += sg;
          }
          if (gx) {
            const T a = T(1) + ss[s * 2 * c + ch];
            auto& g = gx->grad_buffer();
            for (std::size_t p = 0; p < hw; ++p) g[off + p] += self.grad[off + p] * a;
          }
        }
    };
  }
  return out;
}

// ------------------------------------------------------------ rearrangements

namespace {

// Index map of pixel_shuffle: for each output element, its input element.
std::vector<std::size_t> shuffle_map(std::size_t n, std::size_t c, std::size_t h, std::size_t w,
                                     std::size_t r) {
  // Input (n, c*r*r, h, w) -> output (n, c, h*r, w*r).
  std::vector<std::size_t> map(n * c * r * r * h * w);
  const std::size_t oh = h * r, ow = w * r;
  std::size_t o = 0;
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          const std::size_t ic = ch * r * r + (y % r) * r + (x % r);
          map[o++] = ((s * c * r * r + ic) * h + y / r) * w + x / r;
        }
  return map;
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape shape, std::vector<std::size_t> map) {
  auto out = make_result<T>(std::move(shape), {&x});
  auto xv = x.values();
  auto yv = out.mutable_values();
  for (std::size_t i = 0; i < map.size(); ++i) yv[i] = xv[map[i]];
  if (out.requires_grad()) {
    out.node()->backward = [map = std::move(map)](typename Tensor<T>::Node& self) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += self.grad[i];
    };
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r) {
  require_rank("pixel_shuffle", x, 4);
  const std::size_t n = x.dim(0), cr = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (r == 0 || cr % (r * r) != 0)
    fail("pixel_shuffle", std::to_string(cr) + " channels not divisible by r^2 = " +
                              std::to_string(r * r));
  const std::size_t c = cr / (r * r);
  return gather(x, Shape{n, c, h * r, w * r}, shuffle_map(n, c, h, w, r));
}

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r) {
  require_rank("pixel_unshuffle", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), oh = x.dim(2), ow = x.dim(3);
  if (r == 0 || oh % r != 0 || ow % r != 0) fail("pixel_unshuffle", "spatial size not divisible by r");
  const std::size_t h = oh / r, w = ow / r;
  // Invert the shuffle permutation.
  auto fwd = shuffle_map(n, c, h, w, r);
  std::vector<std::size_t> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
  return gather(x, Shape{n, c * r * r, h, w}, std::move(inv));
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || a.rank() != b.rank() || a.dim(0) != b.dim(0))
    fail("concat_channels", "incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  for (std::size_t i = 2; i < a.rank(); ++i)
    if (a.dim(i) != b.dim(i))
      fail("concat_channels", "spatial mismatch " + shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()));
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t inner = a.numel() / (n * std::max<std::size_t>(ca, 1));
  Shape shape = a.shape();
  shape[1] = ca + cb;
  auto out = make_result<T>(shape, {&a, &b});
  auto yv = out.mutable_values();
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(a.values().data() + s * ca * inner, ca * inner, yv.data() + s * (ca + cb) * inner);
    std::copy_n(b.values().data() + s * cb * inner, cb * inner,
                yv.data() + (s * (ca + cb) + ca) * inner);
  }
  if (out.requires_grad()) {
    out.node()->backward = [a, b, n, ca, cb, inner](typename Tensor<T>::Node& self) {
      if (auto* ga = recorded(self, a)) {
        auto& g = ga->grad_buffer();
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t i = 0; i < ca * inner; ++i)
            g[s * ca * inner + i] += self.grad[s * (ca + cb) * inner + i];
      }
      if (auto* gb = recorded(self, b)) {
        auto& g = gb->grad_buffer();
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t i = 0; i < cb * inner; ++i)
            g[s * cb * inner + i] += self.grad[(s * (ca + cb) + ca) * inner + i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (x.rank() < 2 || begin >= end || end > x.dim(1))
    fail("slice_channels", "bad range [" + std::to_string(begin) + ", " + std::to_string(end) +
                               ") for " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c), cs = end - begin;
  Shape shape = x.shape();
  shape[1] = cs;
  auto out = make_result<T>(shape, {&x});
  auto yv = out.mutable_values();
  for (std::size_t s = 0; s < n; ++s)
    std::copy_n(x.values().data() + (s * c + begin) * inner, cs * inner, yv.data() + s * cs * inner);
  if (out.requires_grad()) {
    out.node()->backward = [n, c, cs, begin, inner](typename Tensor<T>::Node& self) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < cs * inner; ++i)
          g[(s * c + begin) * inner + i] += self.grad[s * cs * inner + i];
    };
  }
  return out;
}

template <typename T>
Tensor<T> tile_spatial(const Tensor<T>& tile, std::size_t n, std::size_t height, std::size_t width) {
  require_rank("tile_spatial", tile, 4);
  if (tile.dim(0) != 1) fail("tile_spatial", "tile batch must be 1");
  const std::size_t c = tile.dim(1), th = tile.dim(2), tw = tile.dim(3);
  if (th == 0 || tw == 0 || height % th != 0 || width % tw != 0)
    fail("tile_spatial", "grid " + std::to_string(height) + "x" + std::to_string(width) +
                             " is not a multiple of the tile");
  std::vector<std::size_t> map;
  map.reserve(n * c * height * width);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) map.push_back((ch * th + y % th) * tw + x % tw);
  return gather(tile, Shape{n, c, height, width}, std::move(map));
}

template <typename T>
Tensor<T> pad_replicate(const Tensor<T>& x, std::size_t height, std::size_t width) {
  require_rank("pad_replicate", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (height < h || width < w || h == 0 || w == 0) fail("pad_replicate", "target smaller than input");
  std::vector<std::size_t> map;
  map.reserve(n * c * height * width);
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t xx = 0; xx < width; ++xx)
        map.push_back((p * h + std::min(y, h - 1)) * w + std::min(xx, w - 1));
  return gather(x, Shape{n, c, height, width}, std::move(map));
}

template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::size_t height, std::size_t width) {
  require_rank("crop", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (height > h || width > w) fail("crop", "target larger than input");
  std::vector<std::size_t> map;
  map.reserve(n * c * height * width);
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t xx = 0; xx < width; ++xx) map.push_back((p * h + y) * w + xx);
  return gather(x, Shape{n, c, height, width}, std::move(map));
}

#define QARV_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                              \
  template Tensor<T> exp(const Tensor<T>&);                                                   \
  template Tensor<T> gelu(const Tensor<T>&);                                                  \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                           \
  template Tensor<T> sum(const Tensor<T>&);                                                   \
  template Tensor<T> mean(const Tensor<T>&);                                                  \
  template Tensor<T> sum_per_sample(const Tensor<T>&);                                        \
  template Tensor<T> mse_per_sample(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> weighted_sum(const Tensor<T>&, std::span<const T>);                      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, \
                            std::size_t, PadMode);                                            \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                      PadMode);                                               \
  template Tensor<T> layer_norm(const Tensor<T>&);                                            \
  template Tensor<T> group_norm(const Tensor<T>&, std::size_t);                               \
  template Tensor<T> instance_norm(const Tensor<T>&);                                         \
  template Tensor<T> channel_affine(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);    \
  template Tensor<T> modulate(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> pixel_shuffle(const Tensor<T>&, std::size_t);                            \
  template Tensor<T> pixel_unshuffle(const Tensor<T>&, std::size_t);                          \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> slice_channels(const Tensor<T>&, std::size_t, std::size_t);              \
  template Tensor<T> tile_spatial(const Tensor<T>&, std::size_t, std::size_t, std::size_t);   \
  template Tensor<T> pad_replicate(const Tensor<T>&, std::size_t, std::size_t);               \
  template Tensor<T> crop(const Tensor<T>&, std::size_t, std::size_t);

QARV_INSTANTIATE_OPS(float)
QARV_INSTANTIATE_OPS(double)

}  // namespace qarv::nn
