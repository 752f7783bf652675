#include "dualformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dualformer {

namespace {

template <typename S>
using Node = detail::Node<S>;

template <typename S>
using MatMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMatrix<S>>;

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
}

void require_rank(const Shape& shape, std::size_t rank, const char* op) {
  if (shape.size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got " + to_string(shape));
}

struct AxisView {
  Index outer = 1, length = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, int axis, const char* op) {
  if (axis < 0) axis += static_cast<int>(shape.size());
  if (axis < 0 || axis >= static_cast<int>(shape.size()))
    throw ShapeError(std::string(op) + ": axis out of range for " + to_string(shape));
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= shape[i];
  v.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

int normalize_axis(int axis, std::size_t rank) {
  return axis < 0 ? axis + static_cast<int>(rank) : axis;
}

thread_local std::uint64_t g_macs = 0;

}  // namespace

std::uint64_t& mac_counter() { return g_macs; }

Index conv_output_size(Index input, Index kernel, Index stride, Index padding) {
  return (input + 2 * padding - kernel) / stride + 1;
}

// ---------------------------------------------------------------- elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "add");
  return detail::make_result<S>(a.shape(), a.data() + b.data(), "add", {a, b},
                                [](Node<S>& self) {
                                  self.inputs[0]->accumulate(self.grad);
                                  self.inputs[1]->accumulate(self.grad);
                                });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "sub");
  return detail::make_result<S>(a.shape(), a.data() - b.data(), "sub", {a, b},
                                [](Node<S>& self) {
                                  self.inputs[0]->accumulate(self.grad);
                                  self.inputs[1]->accumulate(-self.grad);
                                });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "mul");
  return detail::make_result<S>(
      a.shape(), a.data().cwiseProduct(b.data()), "mul", {a, b}, [](Node<S>& self) {
        auto& x = *self.inputs[0];
        auto& y = *self.inputs[1];
        if (x.requires_grad) x.accumulate(self.grad.cwiseProduct(y.value));
        if (y.requires_grad) y.accumulate(self.grad.cwiseProduct(x.value));
      });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  return detail::make_result<S>(a.shape(), a.data() * factor, "scale", {a},
                                [factor](Node<S>& self) {
                                  self.inputs[0]->accumulate(self.grad * factor);
                                });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S value) {
  Vector<S> out = a.data().array() + value;
  return detail::make_result<S>(a.shape(), std::move(out), "add_scalar", {a},
                                [](Node<S>& self) { self.inputs[0]->accumulate(self.grad); });
}

template <typename S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& bias) {
  if (x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw ShapeError("add_bias: bias " + to_string(bias.shape()) +
                     " does not match axis 1 of " + to_string(x.shape()));
  const AxisView v = axis_view(x.shape(), 1, "add_bias");
  Vector<S> out = x.data();
  for (Index o = 0; o < v.outer; ++o)
    for (Index c = 0; c < v.length; ++c)
      out.segment((o * v.length + c) * v.inner, v.inner).array() += bias[c];
  return detail::make_result<S>(x.shape(), std::move(out), "add_bias", {x, bias},
                                [v](Node<S>& self) {
                                  self.inputs[0]->accumulate(self.grad);
                                  auto& b = *self.inputs[1];
                                  if (!b.requires_grad) return;
                                  Vector<S> g = Vector<S>::Zero(v.length);
                                  for (Index o = 0; o < v.outer; ++o)
                                    for (Index c = 0; c < v.length; ++c)
                                      g[c] += self.grad.segment((o * v.length + c) * v.inner, v.inner).sum();
                                  b.accumulate(g);
                                });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  Vector<S> out(1);
  out[0] = a.data().sum();
  return detail::make_result<S>({1}, std::move(out), "sum", {a}, [](Node<S>& self) {
    auto& x = *self.inputs[0];
    x.accumulate(Vector<S>::Constant(x.value.size(), self.grad[0]));
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.numel()));
}

// ---------------------------------------------------------------- linear algebra

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Vector<S> out(m * n);
  MatMap<S>(out.data(), m, n).noalias() = a.matrix() * b.matrix();
  mac_counter() += static_cast<std::uint64_t>(m * k * n);
  return detail::make_result<S>({m, n}, std::move(out), "matmul", {a, b},
                                [m, k, n](Node<S>& self) {
                                  auto& x = *self.inputs[0];
                                  auto& y = *self.inputs[1];
                                  ConstMatMap<S> g(self.grad.data(), m, n);
                                  if (x.requires_grad) {
                                    ConstMatMap<S> ym(y.value.data(), k, n);
                                    MatMap<S>(x.grad_buffer().data(), m, k).noalias() += g * ym.transpose();
                                  }
                                  if (y.requires_grad) {
                                    ConstMatMap<S> xm(x.value.data(), m, k);
                                    MatMap<S>(y.grad_buffer().data(), k, n).noalias() += xm.transpose() * g;
                                  }
                                });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  require_rank(a.shape(), 2, "transpose");
  const Index m = a.dim(0), n = a.dim(1);
  Vector<S> out(m * n);
  MatMap<S>(out.data(), n, m) = a.matrix().transpose();
  return detail::make_result<S>({n, m}, std::move(out), "transpose", {a},
                                [m, n](Node<S>& self) {
                                  Vector<S> g(m * n);
                                  MatMap<S>(g.data(), m, n) = ConstMatMap<S>(self.grad.data(), n, m).transpose();
                                  self.inputs[0]->accumulate(g);
                                });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (num_elements(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  return detail::make_result<S>(std::move(shape), a.data(), "reshape", {a},
                                [](Node<S>& self) { self.inputs[0]->accumulate(self.grad); });
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.dim(0))
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(w.shape()));
  if (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(1)))
    throw ShapeError("linear: bias " + to_string(b.shape()) + " does not match weight " +
                     to_string(w.shape()));
  const Index in = w.dim(0), out_dim = w.dim(1), rows = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = out_dim;
  Vector<S> out(rows * out_dim);
  MatMap<S> om(out.data(), rows, out_dim);
  om.noalias() = ConstMatMap<S>(x.data().data(), rows, in) * w.matrix();
  if (b.defined()) om.rowwise() += b.data().transpose();
  mac_counter() += static_cast<std::uint64_t>(rows * in * out_dim);
  std::vector<Tensor<S>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return detail::make_result<S>(
      std::move(shape), std::move(out), "linear", std::move(inputs),
      [rows, in, out_dim](Node<S>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        ConstMatMap<S> g(self.grad.data(), rows, out_dim);
        if (xn.requires_grad)
          MatMap<S>(xn.grad_buffer().data(), rows, in).noalias() +=
              g * ConstMatMap<S>(wn.value.data(), in, out_dim).transpose();
        if (wn.requires_grad)
          MatMap<S>(wn.grad_buffer().data(), in, out_dim).noalias() +=
              ConstMatMap<S>(xn.value.data(), rows, in).transpose() * g;
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad)
          self.inputs[2]->accumulate(g.colwise().sum().transpose());
      });
}

// ---------------------------------------------------------------- nonlinearities

template <typename S>
Tensor<S> softmax(const Tensor<S>& a, int axis) {
  const AxisView v = axis_view(a.shape(), axis, "softmax");
  Vector<S> out(a.numel());
  const S* x = a.data().data();
  for (Index o = 0; o < v.outer; ++o)
    for (Index i = 0; i < v.inner; ++i) {
      const Index base = o * v.length * v.inner + i;
      S mx = x[base];
      for (Index l = 1; l < v.length; ++l) mx = std::max(mx, x[base + l * v.inner]);
      S total = 0;
      for (Index l = 0; l < v.length; ++l) {
        const S e = std::exp(x[base + l * v.inner] - mx);
        out[base + l * v.inner] = e;
        total += e;
      }
      for (Index l = 0; l < v.length; ++l) out[base + l * v.inner] /= total;
    }
  return detail::make_result<S>(a.shape(), std::move(out), "softmax", {a}, [v](Node<S>& self) {
    Vector<S> g(self.value.size());
    const S* y = self.value.data();
    const S* dy = self.grad.data();
    for (Index o = 0; o < v.outer; ++o)
      for (Index i = 0; i < v.inner; ++i) {
        const Index base = o * v.length * v.inner + i;
        S dot = 0;
        for (Index l = 0; l < v.length; ++l) dot += y[base + l * v.inner] * dy[base + l * v.inner];
        for (Index l = 0; l < v.length; ++l) {
          const Index j = base + l * v.inner;
          g[j] = y[j] * (dy[j] - dot);
        }
      }
    self.inputs[0]->accumulate(g);
  });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  Vector<S> out = (S(1) + (-a.data().array()).exp()).inverse().matrix();
  return detail::make_result<S>(a.shape(), std::move(out), "sigmoid", {a}, [](Node<S>& self) {
    const auto y = self.value.array();
    self.inputs[0]->accumulate((self.grad.array() * y * (S(1) - y)).matrix());
  });
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  constexpr S inv_sqrt2 = S(0.70710678118654752440);
  Vector<S> out(a.numel());
  const S* x = a.data().data();
  for (Index i = 0; i < a.numel(); ++i) out[i] = S(0.5) * x[i] * (S(1) + std::erf(x[i] * inv_sqrt2));
  return detail::make_result<S>(a.shape(), std::move(out), "gelu", {a}, [](Node<S>& self) {
    constexpr S inv_sqrt2 = S(0.70710678118654752440);
    constexpr S inv_sqrt_2pi = S(0.39894228040143267794);
    auto& in = *self.inputs[0];
    Vector<S> g(in.value.size());
    for (Index i = 0; i < g.size(); ++i) {
      const S x = in.value[i];
      const S cdf = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
      const S pdf = inv_sqrt_2pi * std::exp(S(-0.5) * x * x);
      g[i] = self.grad[i] * (cdf + x * pdf);
    }
    in.accumulate(g);
  });
}

// ---------------------------------------------------------------- convolution

namespace {

template <typename S>
void im2col(const S* x, Index channels, Index height, Index width, Index kh, Index kw,
            Index stride, Index pad, Index oh, Index ow, S* col) {
  for (Index c = 0; c < channels; ++c)
    for (Index ky = 0; ky < kh; ++ky)
      for (Index kx = 0; kx < kw; ++kx) {
        S* dst = col + ((c * kh + ky) * kw + kx) * oh * ow;
        const S* src = x + c * height * width;
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * stride - pad + ky;
          S* row = dst + oy * ow;
          if (iy < 0 || iy >= height) {
            std::fill(row, row + ow, S(0));
            continue;
          }
          for (Index ox = 0; ox < ow; ++ox) {
            const Index ix = ox * stride - pad + kx;
            row[ox] = (ix >= 0 && ix < width) ? src[iy * width + ix] : S(0);
          }
        }
      }
}

template <typename S>
void col2im(const S* col, Index channels, Index height, Index width, Index kh, Index kw,
            Index stride, Index pad, Index oh, Index ow, S* x) {
  for (Index c = 0; c < channels; ++c)
    for (Index ky = 0; ky < kh; ++ky)
      for (Index kx = 0; kx < kw; ++kx) {
        const S* srcc = col + ((c * kh + ky) * kw + kx) * oh * ow;
        S* dst = x + c * height * width;
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) continue;
          for (Index ox = 0; ox < ow; ++ox) {
            const Index ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < width) dst[iy * width + ix] += srcc[oy * ow + ox];
          }
        }
      }
}

struct ConvGeometry {
  Index batch, channels, height, width;
  Index out_channels, kh, kw, oh, ow;
  Index stride, pad, groups;
  Index cin_g() const { return channels / groups; }
  Index cout_g() const { return out_channels / groups; }
  Index patch() const { return cin_g() * kh * kw; }
  Index out_pixels() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  bool depthwise() const { return cin_g() == 1 && cout_g() == 1; }
};

template <typename S>
void depthwise_forward(const ConvGeometry& g, const S* x, const S* w, S* y) {
  for (Index b = 0; b < g.batch; ++b)
    for (Index c = 0; c < g.channels; ++c) {
      const S* in = x + (b * g.channels + c) * g.height * g.width;
      S* out = y + (b * g.channels + c) * g.out_pixels();
      std::fill(out, out + g.out_pixels(), S(0));
      for (Index ky = 0; ky < g.kh; ++ky)
        for (Index kx = 0; kx < g.kw; ++kx) {
          const S wv = w[(c * g.kh + ky) * g.kw + kx];
          for (Index oy = 0; oy < g.oh; ++oy) {
            const Index iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.height) continue;
            for (Index ox = 0; ox < g.ow; ++ox) {
              const Index ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.width) out[oy * g.ow + ox] += wv * in[iy * g.width + ix];
            }
          }
        }
    }
}

template <typename S>
void depthwise_backward(const ConvGeometry& g, const S* x, const S* w, const S* dy, S* dx,
                        S* dw) {
  for (Index b = 0; b < g.batch; ++b)
    for (Index c = 0; c < g.channels; ++c) {
      const S* in = x + (b * g.channels + c) * g.height * g.width;
      const S* go = dy + (b * g.channels + c) * g.out_pixels();
      S* gi = dx ? dx + (b * g.channels + c) * g.height * g.width : nullptr;
      for (Index ky = 0; ky < g.kh; ++ky)
        for (Index kx = 0; kx < g.kw; ++kx) {
          const Index widx = (c * g.kh + ky) * g.kw + kx;
          const S wv = w[widx];
          S acc = 0;
          for (Index oy = 0; oy < g.oh; ++oy) {
            const Index iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.height) continue;
            for (Index ox = 0; ox < g.ow; ++ox) {
              const Index ix = ox * g.stride - g.pad + kx;
              if (ix < 0 || ix >= g.width) continue;
              const S d = go[oy * g.ow + ox];
              acc += d * in[iy * g.width + ix];
              if (gi) gi[iy * g.width + ix] += wv * d;
            }
          }
          if (dw) dw[widx] += acc;
        }
    }
}

}  // namespace

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                 const Conv2dOptions& options) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  if (options.stride < 1 || options.padding < 0 || options.groups < 1)
    throw ShapeError("conv2d: stride must be >= 1, padding >= 0, groups >= 1");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3),
                 0,        0,        options.stride, options.padding, options.groups};
  if (g.channels % g.groups != 0 || g.out_channels % g.groups != 0 || w.dim(1) != g.cin_g())
    throw ShapeError("conv2d: weight " + to_string(w.shape()) + " incompatible with input " +
                     to_string(x.shape()) + " and groups=" + std::to_string(g.groups));
  if (g.kh > g.height + 2 * g.pad || g.kw > g.width + 2 * g.pad)
    throw ShapeError("conv2d: kernel " + to_string(w.shape()) + " larger than padded input " +
                     to_string(x.shape()));
  if (b.defined() && (b.rank() != 1 || b.dim(0) != g.out_channels))
    throw ShapeError("conv2d: bias " + to_string(b.shape()) + " does not match " +
                     std::to_string(g.out_channels) + " output channels");
  g.oh = conv_output_size(g.height, g.kh, g.stride, g.pad);
  g.ow = conv_output_size(g.width, g.kw, g.stride, g.pad);

  Vector<S> out(g.batch * g.out_channels * g.out_pixels());
  if (g.depthwise()) {
    depthwise_forward(g, x.data().data(), w.data().data(), out.data());
  } else {
    RowMatrix<S> col;
    if (!g.pointwise()) col.resize(g.patch(), g.out_pixels());
    for (Index bi = 0; bi < g.batch; ++bi)
      for (Index gi = 0; gi < g.groups; ++gi) {
        const S* xin = x.data().data() + (bi * g.channels + gi * g.cin_g()) * g.height * g.width;
        ConstMatMap<S> wg(w.data().data() + gi * g.cout_g() * g.patch(), g.cout_g(), g.patch());
        MatMap<S> yg(out.data() + (bi * g.out_channels + gi * g.cout_g()) * g.out_pixels(),
                     g.cout_g(), g.out_pixels());
        if (g.pointwise()) {
          yg.noalias() = wg * ConstMatMap<S>(xin, g.patch(), g.out_pixels());
        } else {
          im2col(xin, g.cin_g(), g.height, g.width, g.kh, g.kw, g.stride, g.pad, g.oh, g.ow,
                 col.data());
          yg.noalias() = wg * col;
        }
      }
  }
  if (b.defined())
    for (Index bi = 0; bi < g.batch; ++bi)
      for (Index o = 0; o < g.out_channels; ++o)
        out.segment((bi * g.out_channels + o) * g.out_pixels(), g.out_pixels()).array() += b[o];
  mac_counter() += static_cast<std::uint64_t>(g.batch * g.out_channels * g.patch() * g.out_pixels());

  std::vector<Tensor<S>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return detail::make_result<S>(
      {g.batch, g.out_channels, g.oh, g.ow}, std::move(out), "conv2d", std::move(inputs),
      [g](Node<S>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        S* dx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
        S* dw = wn.requires_grad ? wn.grad_buffer().data() : nullptr;
        if (g.depthwise()) {
          depthwise_backward(g, xn.value.data(), wn.value.data(), self.grad.data(), dx, dw);
        } else {
          RowMatrix<S> col, dcol;
          if (!g.pointwise()) {
            col.resize(g.patch(), g.out_pixels());
            dcol.resize(g.patch(), g.out_pixels());
          }
          for (Index bi = 0; bi < g.batch; ++bi)
            for (Index gi = 0; gi < g.groups; ++gi) {
              const Index xoff = (bi * g.channels + gi * g.cin_g()) * g.height * g.width;
              const S* xin = xn.value.data() + xoff;
              ConstMatMap<S> wg(wn.value.data() + gi * g.cout_g() * g.patch(), g.cout_g(), g.patch());
              ConstMatMap<S> dy(self.grad.data() + (bi * g.out_channels + gi * g.cout_g()) * g.out_pixels(),
                                g.cout_g(), g.out_pixels());
              if (g.pointwise()) {
                ConstMatMap<S> xm(xin, g.patch(), g.out_pixels());
                if (dw)
                  MatMap<S>(dw + gi * g.cout_g() * g.patch(), g.cout_g(), g.patch()).noalias() +=
                      dy * xm.transpose();
                if (dx) MatMap<S>(dx + xoff, g.patch(), g.out_pixels()).noalias() += wg.transpose() * dy;
              } else {
                if (dw) {
                  im2col(xin, g.cin_g(), g.height, g.width, g.kh, g.kw, g.stride, g.pad, g.oh, g.ow,
                         col.data());
                  MatMap<S>(dw + gi * g.cout_g() * g.patch(), g.cout_g(), g.patch()).noalias() +=
                      dy * col.transpose();
                }
                if (dx) {
                  dcol.noalias() = wg.transpose() * dy;
                  col2im(dcol.data(), g.cin_g(), g.height, g.width, g.kh, g.kw, g.stride, g.pad,
                         g.oh, g.ow, dx + xoff);
                }
              }
            }
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
          Vector<S> db = Vector<S>::Zero(g.out_channels);
          for (Index bi = 0; bi < g.batch; ++bi)
            for (Index o = 0; o < g.out_channels; ++o)
              db[o] += self.grad.segment((bi * g.out_channels + o) * g.out_pixels(), g.out_pixels()).sum();
          self.inputs[2]->accumulate(db);
        }
      });
}

// ---------------------------------------------------------------- normalization

template <typename S>
Tensor<S> batch_norm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                       Tensor<S>& running_mean, Tensor<S>& running_var, bool training,
                       S momentum, S eps) {
  require_rank(x.shape(), 4, "batch_norm2d");
  const Index B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C)
    throw ShapeError("batch_norm2d: parameters do not match " + std::to_string(C) + " channels");
  const Index count = B * P;
  Vector<S> mu(C), inv_std(C);
  const S* xd = x.data().data();
  if (training) {
    for (Index c = 0; c < C; ++c) {
      S m = 0;
      for (Index b = 0; b < B; ++b) m += x.data().segment((b * C + c) * P, P).sum();
      m /= static_cast<S>(count);
      S v = 0;
      for (Index b = 0; b < B; ++b)
        v += (x.data().segment((b * C + c) * P, P).array() - m).square().sum();
      v /= static_cast<S>(count);
      mu[c] = m;
      inv_std[c] = S(1) / std::sqrt(v + eps);
      const S unbiased = count > 1 ? v * static_cast<S>(count) / static_cast<S>(count - 1) : v;
      running_mean.mutable_data()[c] = (S(1) - momentum) * running_mean[c] + momentum * m;
      running_var.mutable_data()[c] = (S(1) - momentum) * running_var[c] + momentum * unbiased;
    }
  } else {
    mu = running_mean.data();
    inv_std = (running_var.data().array() + eps).rsqrt().matrix();
  }
  Vector<S> xhat(x.numel()), out(x.numel());
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c) {
      const Index off = (b * C + c) * P;
      for (Index p = 0; p < P; ++p) {
        xhat[off + p] = (xd[off + p] - mu[c]) * inv_std[c];
        out[off + p] = gamma[c] * xhat[off + p] + beta[c];
      }
    }
  return detail::make_result<S>(
      x.shape(), std::move(out), "batch_norm2d", {x, gamma, beta},
      [B, C, P, training, xhat = std::move(xhat), inv_std](Node<S>& self) {
        auto& xn = *self.inputs[0];
        auto& gn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        const S* dy = self.grad.data();
        Vector<S> dgamma = Vector<S>::Zero(C), dbeta = Vector<S>::Zero(C);
        for (Index b = 0; b < B; ++b)
          for (Index c = 0; c < C; ++c) {
            const Index off = (b * C + c) * P;
            for (Index p = 0; p < P; ++p) {
              dgamma[c] += dy[off + p] * xhat[off + p];
              dbeta[c] += dy[off + p];
            }
          }
        if (xn.requires_grad) {
          Vector<S>& dx = xn.grad_buffer();
          const S n = static_cast<S>(B * P);
          for (Index b = 0; b < B; ++b)
            for (Index c = 0; c < C; ++c) {
              const Index off = (b * C + c) * P;
              const S gm = gn.value[c];
              for (Index p = 0; p < P; ++p) {
                if (training)
                  dx[off + p] += gm * inv_std[c] / n *
                                 (n * dy[off + p] - dbeta[c] - xhat[off + p] * dgamma[c]);
                else
                  dx[off + p] += gm * inv_std[c] * dy[off + p];
              }
            }
        }
        gn.accumulate(dgamma);
        bn.accumulate(dbeta);
      });
}

template <typename S>
Tensor<S> layer_norm_channels(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                              S eps) {
  require_rank(x.shape(), 4, "layer_norm_channels");
  const Index B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  if (gamma.numel() != C || beta.numel() != C)
    throw ShapeError("layer_norm_channels: parameters do not match " + std::to_string(C) +
                     " channels");
  Vector<S> xhat(x.numel()), out(x.numel()), inv_std(B * P);
  const S* xd = x.data().data();
  for (Index b = 0; b < B; ++b) {
    const S* base = xd + b * C * P;
    for (Index p = 0; p < P; ++p) {
      S m = 0;
      for (Index c = 0; c < C; ++c) m += base[c * P + p];
      m /= static_cast<S>(C);
      S v = 0;
      for (Index c = 0; c < C; ++c) v += (base[c * P + p] - m) * (base[c * P + p] - m);
      v /= static_cast<S>(C);
      const S is = S(1) / std::sqrt(v + eps);
      inv_std[b * P + p] = is;
      for (Index c = 0; c < C; ++c) {
        const Index j = (b * C + c) * P + p;
        xhat[j] = (base[c * P + p] - m) * is;
        out[j] = gamma[c] * xhat[j] + beta[c];
      }
    }
  }
  return detail::make_result<S>(
      x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
      [B, C, P, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<S>& self) {
        auto& xn = *self.inputs[0];
        auto& gn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        const S* dy = self.grad.data();
        Vector<S> dgamma = Vector<S>::Zero(C), dbeta = Vector<S>::Zero(C);
        S* dx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
        const S n = static_cast<S>(C);
        for (Index b = 0; b < B; ++b)
          for (Index p = 0; p < P; ++p) {
            S sum_g = 0, sum_gx = 0;
            for (Index c = 0; c < C; ++c) {
              const Index j = (b * C + c) * P + p;
              const S gh = dy[j] * gn.value[c];
              sum_g += gh;
              sum_gx += gh * xhat[j];
              dgamma[c] += dy[j] * xhat[j];
              dbeta[c] += dy[j];
            }
            if (!dx) continue;
            const S is = inv_std[b * P + p];
            for (Index c = 0; c < C; ++c) {
              const Index j = (b * C + c) * P + p;
              const S gh = dy[j] * gn.value[c];
              dx[j] += is / n * (n * gh - sum_g - xhat[j] * sum_gx);
            }
          }
        gn.accumulate(dgamma);
        bn.accumulate(dbeta);
      });
}

// ---------------------------------------------------------------- layout

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  require_rank(x.shape(), 4, "global_avg_pool");
  const Index B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  Vector<S> out(B * C);
  for (Index i = 0; i < B * C; ++i) out[i] = x.data().segment(i * P, P).mean();
  return detail::make_result<S>({B, C}, std::move(out), "global_avg_pool", {x},
                                [B, C, P](Node<S>& self) {
                                  Vector<S> g(B * C * P);
                                  for (Index i = 0; i < B * C; ++i)
                                    g.segment(i * P, P).setConstant(self.grad[i] / static_cast<S>(P));
                                  self.inputs[0]->accumulate(g);
                                });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  axis = normalize_axis(axis, ref.size());
  Shape shape = ref;
  shape.at(axis) = 0;
  std::vector<Index> lengths;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != ref.size())
      throw ShapeError("concat: rank mismatch " + to_string(s) + " vs " + to_string(ref));
    lengths.push_back(s.at(axis));
    s[axis] = ref[axis];
    if (s != ref)
      throw ShapeError("concat: shapes " + to_string(p.shape()) + " and " + to_string(ref) +
                       " differ off the concat axis");
    shape[axis] += lengths.back();
  }
  const AxisView v = axis_view(shape, axis, "concat");
  Vector<S> out(num_elements(shape));
  Index offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Index chunk = lengths[k] * v.inner;
    for (Index o = 0; o < v.outer; ++o)
      out.segment(o * v.length * v.inner + offset, chunk) = parts[k].data().segment(o * chunk, chunk);
    offset += chunk;
  }
  return detail::make_result<S>(std::move(shape), std::move(out), "concat", parts,
                                [v, lengths](Node<S>& self) {
                                  Index offset = 0;
                                  for (std::size_t k = 0; k < lengths.size(); ++k) {
                                    const Index chunk = lengths[k] * v.inner;
                                    auto& in = *self.inputs[k];
                                    if (in.requires_grad) {
                                      Vector<S>& g = in.grad_buffer();
                                      for (Index o = 0; o < v.outer; ++o)
                                        g.segment(o * chunk, chunk) +=
                                            self.grad.segment(o * v.length * v.inner + offset, chunk);
                                    }
                                    offset += chunk;
                                  }
                                });
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, Index begin, Index length) {
  axis = normalize_axis(axis, x.rank());
  const AxisView v = axis_view(x.shape(), axis, "slice");
  if (begin < 0 || length <= 0 || begin + length > v.length)
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + length) + ") outside axis of " + to_string(x.shape()));
  Shape shape = x.shape();
  shape[axis] = length;
  const Index chunk = length * v.inner;
  Vector<S> out(v.outer * chunk);
  for (Index o = 0; o < v.outer; ++o)
    out.segment(o * chunk, chunk) = x.data().segment((o * v.length + begin) * v.inner, chunk);
  return detail::make_result<S>(std::move(shape), std::move(out), "slice", {x},
                                [v, begin, chunk](Node<S>& self) {
                                  Vector<S>& g = self.inputs[0]->grad_buffer();
                                  for (Index o = 0; o < v.outer; ++o)
                                    g.segment((o * v.length + begin) * v.inner, chunk) +=
                                        self.grad.segment(o * chunk, chunk);
                                });
}

namespace {

// Index of element (b, c, y, x) of the space_to_depth output inside the
// depth_to_space output of the same data, i.e. the permutation both ops share.
struct CellMap {
  Index B, C, h, w, k;
  Index depth_index(Index b, Index c, Index dy, Index dx, Index y, Index x) const {
    return ((b * C * k * k + c * k * k + dy * k + dx) * h + y) * w + x;
  }
  Index space_index(Index b, Index c, Index dy, Index dx, Index y, Index x) const {
    return ((b * C + c) * h * k + (y * k + dy)) * (w * k) + x * k + dx;
  }
  template <typename F>
  void for_each(F&& f) const {
    for (Index b = 0; b < B; ++b)
      for (Index c = 0; c < C; ++c)
        for (Index dy = 0; dy < k; ++dy)
          for (Index dx = 0; dx < k; ++dx)
            for (Index y = 0; y < h; ++y)
              for (Index x = 0; x < w; ++x)
                f(depth_index(b, c, dy, dx, y, x), space_index(b, c, dy, dx, y, x));
  }
};

}  // namespace

template <typename S>
Tensor<S> depth_to_space(const Tensor<S>& x, Index k) {
  require_rank(x.shape(), 4, "depth_to_space");
  if (k < 1 || x.dim(1) % (k * k) != 0)
    throw ShapeError("depth_to_space: channels of " + to_string(x.shape()) +
                     " not divisible by k^2 = " + std::to_string(k * k));
  const CellMap m{x.dim(0), x.dim(1) / (k * k), x.dim(2), x.dim(3), k};
  Vector<S> out(x.numel());
  m.for_each([&](Index d, Index s) { out[s] = x[d]; });
  return detail::make_result<S>({m.B, m.C, m.h * k, m.w * k}, std::move(out), "depth_to_space",
                                {x}, [m](Node<S>& self) {
                                  Vector<S> g(self.grad.size());
                                  m.for_each([&](Index d, Index s) { g[d] = self.grad[s]; });
                                  self.inputs[0]->accumulate(g);
                                });
}

template <typename S>
Tensor<S> space_to_depth(const Tensor<S>& x, Index k) {
  require_rank(x.shape(), 4, "space_to_depth");
  if (k < 1 || x.dim(2) % k != 0 || x.dim(3) % k != 0)
    throw ShapeError("space_to_depth: spatial dims of " + to_string(x.shape()) +
                     " not divisible by " + std::to_string(k));
  const CellMap m{x.dim(0), x.dim(1), x.dim(2) / k, x.dim(3) / k, k};
  Vector<S> out(x.numel());
  m.for_each([&](Index d, Index s) { out[d] = x[s]; });
  return detail::make_result<S>({m.B, m.C * k * k, m.h, m.w}, std::move(out), "space_to_depth",
                                {x}, [m](Node<S>& self) {
                                  Vector<S> g(self.grad.size());
                                  m.for_each([&](Index d, Index s) { g[s] = self.grad[d]; });
                                  self.inputs[0]->accumulate(g);
                                });
}

template <typename S>
Tensor<S> nchw_to_tokens(const Tensor<S>& x) {
  require_rank(x.shape(), 4, "nchw_to_tokens");
  const Index B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  Vector<S> out(x.numel());
  for (Index b = 0; b < B; ++b)
    MatMap<S>(out.data() + b * P * C, P, C) =
        ConstMatMap<S>(x.data().data() + b * C * P, C, P).transpose();
  return detail::make_result<S>({B, P, C}, std::move(out), "nchw_to_tokens", {x},
                                [B, C, P](Node<S>& self) {
                                  Vector<S>& g = self.inputs[0]->grad_buffer();
                                  for (Index b = 0; b < B; ++b)
                                    MatMap<S>(g.data() + b * C * P, C, P) +=
                                        ConstMatMap<S>(self.grad.data() + b * P * C, P, C).transpose();
                                });
}

template <typename S>
Tensor<S> tokens_to_nchw(const Tensor<S>& x, Index height, Index width) {
  require_rank(x.shape(), 3, "tokens_to_nchw");
  const Index B = x.dim(0), P = x.dim(1), C = x.dim(2);
  if (P != height * width)
    throw ShapeError("tokens_to_nchw: " + std::to_string(P) + " tokens cannot form " +
                     std::to_string(height) + "x" + std::to_string(width));
  Vector<S> out(x.numel());
  for (Index b = 0; b < B; ++b)
    MatMap<S>(out.data() + b * C * P, C, P) =
        ConstMatMap<S>(x.data().data() + b * P * C, P, C).transpose();
  return detail::make_result<S>({B, C, height, width}, std::move(out), "tokens_to_nchw", {x},
                                [B, C, P](Node<S>& self) {
                                  Vector<S>& g = self.inputs[0]->grad_buffer();
                                  for (Index b = 0; b < B; ++b)
                                    MatMap<S>(g.data() + b * P * C, P, C) +=
                                        ConstMatMap<S>(self.grad.data() + b * C * P, C, P).transpose();
                                });
}

template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "cross_entropy");
  const Index B = logits.dim(0), K = logits.dim(1);
  if (static_cast<Index>(labels.size()) != B)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(B));
  RowMatrix<S> probs(B, K);
  S loss = 0;
  for (Index b = 0; b < B; ++b) {
    if (labels[b] < 0 || labels[b] >= K)
      throw ContractError("cross_entropy: label " + std::to_string(labels[b]) + " out of range");
    auto row = logits.matrix().row(b);
    const S mx = row.maxCoeff();
    const S lse = mx + std::log((row.array() - mx).exp().sum());
    probs.row(b) = (row.array() - lse).exp();
    loss += lse - row[labels[b]];
  }
  Vector<S> out(1);
  out[0] = loss / static_cast<S>(B);
  std::vector<int> owned(labels.begin(), labels.end());
  return detail::make_result<S>({1}, std::move(out), "cross_entropy", {logits},
                                [B, K, probs = std::move(probs), owned](Node<S>& self) {
                                  RowMatrix<S> g = probs;
                                  for (Index b = 0; b < B; ++b) g(b, owned[b]) -= S(1);
                                  g *= self.grad[0] / static_cast<S>(B);
                                  self.inputs[0]->accumulate(Eigen::Map<const Vector<S>>(g.data(), B * K));
                                });
}

template <typename S>
Tensor<S> vanilla_attention(const Tensor<S>& x, const Tensor<S>& wq, const Tensor<S>& wk,
                            const Tensor<S>& wv) {
  if (wq.rank() != 2 || wk.shape() != wq.shape() || wv.rank() != 2 || wv.dim(0) != wq.dim(0))
    throw ShapeError("vanilla_attention: projections " + to_string(wq.shape()) + ", " +
                     to_string(wk.shape()) + ", " + to_string(wv.shape()) + " disagree");
  const Tensor<S> q = matmul(x, wq);
  const Tensor<S> k = matmul(x, wk);
  const Tensor<S> v = matmul(x, wv);
  const S temperature = S(1) / std::sqrt(static_cast<S>(wq.dim(1)));
  return matmul(softmax(scale(matmul(q, transpose(k)), temperature), 1), v);
}

#define DUALFORMER_INSTANTIATE_OPS(S)                                                        \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                 \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                 \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                 \
  template Tensor<S> scale(const Tensor<S>&, S);                                              \
  template Tensor<S> add_scalar(const Tensor<S>&, S);                                         \
  template Tensor<S> add_bias(const Tensor<S>&, const Tensor<S>&);                            \
  template Tensor<S> sum(const Tensor<S>&);                                                   \
  template Tensor<S> mean(const Tensor<S>&);                                                  \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                              \
  template Tensor<S> transpose(const Tensor<S>&);                                             \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                        \
  template Tensor<S> softmax(const Tensor<S>&, int);                                          \
  template Tensor<S> sigmoid(const Tensor<S>&);                                               \
  template Tensor<S> gelu(const Tensor<S>&);                                                  \
  template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);            \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,             \
                            const Conv2dOptions&);                                            \
  template Tensor<S> batch_norm2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,       \
                                  Tensor<S>&, Tensor<S>&, bool, S, S);                        \
  template Tensor<S> layer_norm_channels(const Tensor<S>&, const Tensor<S>&,                  \
                                         const Tensor<S>&, S);                                \
  template Tensor<S> global_avg_pool(const Tensor<S>&);                                       \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, int);                              \
  template Tensor<S> slice(const Tensor<S>&, int, Index, Index);                              \
  template Tensor<S> depth_to_space(const Tensor<S>&, Index);                                 \
  template Tensor<S> space_to_depth(const Tensor<S>&, Index);                                 \
  template Tensor<S> nchw_to_tokens(const Tensor<S>&);                                        \
  template Tensor<S> tokens_to_nchw(const Tensor<S>&, Index, Index);                          \
  template Tensor<S> cross_entropy(const Tensor<S>&, std::span<const int>);                   \
  template Tensor<S> vanilla_attention(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,  \
                                       const Tensor<S>&);

DUALFORMER_INSTANTIATE_OPS(float)
DUALFORMER_INSTANTIATE_OPS(double)

}  // namespace dualformer
