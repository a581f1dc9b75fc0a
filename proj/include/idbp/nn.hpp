#pragma once

// Minimal trainable plain CNN: 2-D convolutions with symmetric padding,
// ReLU, residual output, L1 loss, Adam, and a finite-difference gradient
// checker. Templated on the scalar so tests can run in double precision.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <new>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "idbp/error.hpp"
#include "idbp/image.hpp"

namespace idbp::nn {

/// Eigen picks its vectorized peel from each buffer's runtime address, which
/// changes float summation order. Fixing the alignment of every buffer keeps
/// training bit-reproducible across allocations and processes.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t alignment = 64;

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept
  {
  }

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{alignment})); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{alignment}); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept
  {
    return true;
  }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <class T>
struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  Buffer<T> data;

  Tensor() = default;
  Tensor(int c, int h, int w, T fill = T(0)) : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  [[nodiscard]] std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] T& at(int c, int y, int x) { return data[c * plane_size() + static_cast<std::size_t>(y) * width + x]; }
  [[nodiscard]] T at(int c, int y, int x) const { return data[c * plane_size() + static_cast<std::size_t>(y) * width + x]; }
  [[nodiscard]] bool same_shape(const Tensor& o) const
  {
    return channels == o.channels && height == o.height && width == o.width;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

template <class T>
Tensor<T> tensor_from_image(const Image& img)
{
  if (img.channels() != 1) {
    throw std::invalid_argument("tensor_from_image: expected a single-channel image");
  }
  Tensor<T> t(1, img.height(), img.width());
  auto s = img.samples();
  std::transform(s.begin(), s.end(), t.data.begin(), [](double v) { return static_cast<T>(v); });
  return t;
}

template <class T>
Image image_from_tensor(const Tensor<T>& t)
{
  if (t.channels != 1) {
    throw std::invalid_argument("image_from_tensor: expected a single-channel tensor");
  }
  std::vector<double> v(t.data.begin(), t.data.end());
  return Image(t.width, t.height, ColorSpace::Gray, std::move(v));
}

// ---------------------------------------------------------------------------
// Layers

template <class T>
struct Conv2d {
  int in_channels = 1;
  int out_channels = 1;
  int kernel_h = 3;
  int kernel_w = 3;
  Buffer<T> weight;  // [out][in][kh][kw]
  Buffer<T> bias;    // [out]

  Conv2d() = default;
  Conv2d(int in, int out, int kh = 3, int kw = 3)
      : in_channels(in), out_channels(out), kernel_h(kh), kernel_w(kw),
        weight(static_cast<std::size_t>(out) * in * kh * kw, T(0)), bias(static_cast<std::size_t>(out), T(0))
  {
  }

  [[nodiscard]] int fan_in() const { return in_channels * kernel_h * kernel_w; }
  [[nodiscard]] T& w(int o, int i, int u, int v)
  {
    return weight[((static_cast<std::size_t>(o) * in_channels + i) * kernel_h + u) * kernel_w + v];
  }
  [[nodiscard]] T w(int o, int i, int u, int v) const
  {
    return weight[((static_cast<std::size_t>(o) * in_channels + i) * kernel_h + u) * kernel_w + v];
  }

  friend bool operator==(const Conv2d&, const Conv2d&) = default;
};

struct ReLU {
  friend bool operator==(const ReLU&, const ReLU&) = default;
};

template <class T>
using Layer = std::variant<Conv2d<T>, ReLU>;

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstRowMap = Eigen::Map<const RowMat<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

inline constexpr int kColumnChunk = 4096;

/// Row-wise description of one kernel tap: output pixel (y, x) reads source
/// row rows[y] and column cols[x]. Columns inside [x_begin, x_end) map to
/// x + shift, so those spans are contiguous.
struct TapGeometry {
  std::vector<int> rows;
  std::vector<int> cols;
  int x_begin = 0;
  int x_end = 0;
  int shift = 0;
};

/// Taps are centered: tap (u, v) reads (y + u - kh/2, x + v - kw/2) with
/// symmetric boundary extension.
inline std::vector<TapGeometry> conv_taps(int h, int w, int kh, int kw)
{
  std::vector<TapGeometry> taps;
  taps.reserve(static_cast<std::size_t>(kh) * kw);
  for (int u = 0; u < kh; ++u) {
    for (int v = 0; v < kw; ++v) {
      TapGeometry t;
      t.shift = v - kw / 2;
      t.rows.resize(static_cast<std::size_t>(h));
      t.cols.resize(static_cast<std::size_t>(w));
      for (int y = 0; y < h; ++y) {
        t.rows[static_cast<std::size_t>(y)] = reflect_index(y + u - kh / 2, h);
      }
      for (int x = 0; x < w; ++x) {
        t.cols[static_cast<std::size_t>(x)] = reflect_index(x + t.shift, w);
      }
      t.x_begin = std::clamp(-t.shift, 0, w);
      t.x_end = std::clamp(w - t.shift, t.x_begin, w);
      taps.push_back(std::move(t));
    }
  }
  return taps;
}

/// im2col for output rows [y0, y0 + n_rows) into a row-major matrix with
/// `ld` columns; column j is pixel (y0 * w + j).
template <class T>
void fill_columns(int in_channels, const Tensor<T>& x, const std::vector<TapGeometry>& taps, int y0, int n_rows, T* col,
                  std::size_t ld)
{
  const std::size_t hw = x.plane_size();
  const int w = x.width;
  const int kk = static_cast<int>(taps.size());
  for (int ci = 0; ci < in_channels; ++ci) {
    const T* src = x.data.data() + ci * hw;
    for (int t = 0; t < kk; ++t) {
      const TapGeometry& g = taps[static_cast<std::size_t>(t)];
      T* dst = col + static_cast<std::size_t>(ci * kk + t) * ld;
      for (int r = 0; r < n_rows; ++r) {
        const T* srow = src + static_cast<std::size_t>(g.rows[static_cast<std::size_t>(y0 + r)]) * w;
        T* drow = dst + static_cast<std::size_t>(r) * w;
        for (int xx = 0; xx < g.x_begin; ++xx) {
          drow[xx] = srow[g.cols[static_cast<std::size_t>(xx)]];
        }
        std::copy(srow + g.x_begin + g.shift, srow + g.x_end + g.shift, drow + g.x_begin);
        for (int xx = g.x_end; xx < w; ++xx) {
          drow[xx] = srow[g.cols[static_cast<std::size_t>(xx)]];
        }
      }
    }
  }
}

/// Transpose of fill_columns: accumulates `dcol` (ld columns) into the
/// input gradient.
template <class T>
void scatter_columns(int in_channels, const T* dcol, std::size_t ld, const std::vector<TapGeometry>& taps, int y0,
                     int n_rows, Tensor<T>& grad_input)
{
  const std::size_t hw = grad_input.plane_size();
  const int w = grad_input.width;
  const int kk = static_cast<int>(taps.size());
  for (int ci = 0; ci < in_channels; ++ci) {
    T* dst = grad_input.data.data() + ci * hw;
    for (int t = 0; t < kk; ++t) {
      const TapGeometry& g = taps[static_cast<std::size_t>(t)];
      const T* src = dcol + static_cast<std::size_t>(ci * kk + t) * ld;
      for (int r = 0; r < n_rows; ++r) {
        T* drow = dst + static_cast<std::size_t>(g.rows[static_cast<std::size_t>(y0 + r)]) * w;
        const T* __restrict srow = src + static_cast<std::size_t>(r) * w;
        for (int xx = 0; xx < g.x_begin; ++xx) {
          drow[g.cols[static_cast<std::size_t>(xx)]] += srow[xx];
        }
        T* __restrict dshift = drow + g.shift;
        for (int xx = g.x_begin; xx < g.x_end; ++xx) {
          dshift[xx] += srow[xx];
        }
        for (int xx = g.x_end; xx < w; ++xx) {
          drow[g.cols[static_cast<std::size_t>(xx)]] += srow[xx];
        }
      }
    }
  }
}

/// Rows of output processed per GEMM so that a chunk holds about
/// kColumnChunk pixels.
inline int rows_per_chunk(int h, int w) { return std::clamp(kColumnChunk / std::max(w, 1), 1, h); }

template <class T>
void reshape(Tensor<T>& t, int c, int h, int w)
{
  t.channels = c;
  t.height = h;
  t.width = w;
  t.data.resize(static_cast<std::size_t>(c) * h * w);
}

}  // namespace detail

/// Reusable buffers for convolution passes. Keeping one alive across calls
/// avoids re-faulting large temporaries.
template <class T>
struct ConvScratch {
  Buffer<T> columns;   // im2col of the last forward input (whole image when it fits one chunk)
  Buffer<T> dcolumns;  // backward temporaries
  bool columns_complete = false;
};

/// "Same"-size convolution (cross-correlation) with symmetric boundary
/// extension, as a chunked im2col GEMM into `y`. Summation order per output
/// sample is fixed, so results depend on nothing but the inputs.
template <class T>
void conv2d_forward_into(const Conv2d<T>& layer, const Tensor<T>& x, Tensor<T>& y, ConvScratch<T>& scratch)
{
  if (x.channels != layer.in_channels) {
    throw std::invalid_argument("conv2d_forward: input has " + std::to_string(x.channels) + " channels, layer expects " +
                                std::to_string(layer.in_channels));
  }
  const std::size_t hw = x.plane_size();
  const int k = layer.fan_in();
  detail::reshape(y, layer.out_channels, x.height, x.width);
  const auto taps = detail::conv_taps(x.height, x.width, layer.kernel_h, layer.kernel_w);
  detail::ConstRowMap<T> wm(layer.weight.data(), layer.out_channels, k);
  const int chunk_rows = detail::rows_per_chunk(x.height, x.width);
  const std::size_t ld = static_cast<std::size_t>(chunk_rows) * x.width;
  scratch.columns.resize(ld * k);
  for (int y0 = 0; y0 < x.height; y0 += chunk_rows) {
    const int n_rows = std::min(chunk_rows, x.height - y0);
    const int n = n_rows * x.width;
    const std::size_t p0 = static_cast<std::size_t>(y0) * x.width;
    detail::fill_columns(layer.in_channels, x, taps, y0, n_rows, scratch.columns.data(), ld);
    detail::ConstStridedMap<T> col(scratch.columns.data(), k, n, Eigen::OuterStride<>(static_cast<Eigen::Index>(ld)));
    detail::StridedMap<T> out(y.data.data() + p0, layer.out_channels, n, Eigen::OuterStride<>(static_cast<Eigen::Index>(hw)));
    out.noalias() = wm * col;
    for (int o = 0; o < layer.out_channels; ++o) {
      out.row(o).array() += layer.bias[static_cast<std::size_t>(o)];
    }
  }
  scratch.columns_complete = chunk_rows == x.height;
}

template <class T>
Tensor<T> conv2d_forward(const Conv2d<T>& layer, const Tensor<T>& x)
{
  Tensor<T> y;
  ConvScratch<T> scratch;
  conv2d_forward_into(layer, x, y, scratch);
  return y;
}

template <class T>
struct ConvGradients {
  Buffer<T> weight;
  Buffer<T> bias;
};

/// Accumulates parameter gradients into `grads` and, if `grad_input` is
/// non-null, overwrites it with the gradient with respect to the layer input.
/// Reuses the im2col matrix left in `scratch` by the forward pass when it
/// covers the whole input.
template <class T>
void conv2d_backward_accumulate(const Conv2d<T>& layer, const Tensor<T>& x, const Tensor<T>& grad_out,
                                ConvGradients<T>& grads, Tensor<T>* grad_input, ConvScratch<T>& scratch)
{
  if (x.channels != layer.in_channels || grad_out.channels != layer.out_channels || grad_out.height != x.height ||
      grad_out.width != x.width) {
    throw std::invalid_argument("conv2d_backward: shape mismatch");
  }
  if (grads.weight.size() != layer.weight.size() || grads.bias.size() != layer.bias.size()) {
    throw std::invalid_argument("conv2d_backward: gradient buffers do not match the layer");
  }
  const std::size_t hw = x.plane_size();
  const int k = layer.fan_in();
  const auto taps = detail::conv_taps(x.height, x.width, layer.kernel_h, layer.kernel_w);
  detail::ConstRowMap<T> wm(layer.weight.data(), layer.out_channels, k);
  detail::RowMap<T> dw(grads.weight.data(), layer.out_channels, k);
  if (grad_input != nullptr) {
    detail::reshape(*grad_input, x.channels, x.height, x.width);
    std::fill(grad_input->data.begin(), grad_input->data.end(), T(0));
  }
  const int chunk_rows = detail::rows_per_chunk(x.height, x.width);
  const std::size_t ld = static_cast<std::size_t>(chunk_rows) * x.width;
  const bool reuse = scratch.columns_complete && chunk_rows == x.height && scratch.columns.size() == ld * k;
  scratch.columns.resize(ld * k);
  scratch.dcolumns.resize(ld * k);
  for (int y0 = 0; y0 < x.height; y0 += chunk_rows) {
    const int n_rows = std::min(chunk_rows, x.height - y0);
    const int n = n_rows * x.width;
    const std::size_t p0 = static_cast<std::size_t>(y0) * x.width;
    if (!reuse) {
      detail::fill_columns(layer.in_channels, x, taps, y0, n_rows, scratch.columns.data(), ld);
    }
    detail::ConstStridedMap<T> col(scratch.columns.data(), k, n, Eigen::OuterStride<>(static_cast<Eigen::Index>(ld)));
    detail::ConstStridedMap<T> g(grad_out.data.data() + p0, layer.out_channels, n,
                                 Eigen::OuterStride<>(static_cast<Eigen::Index>(hw)));
    dw.noalias() += g * col.transpose();
    for (int o = 0; o < layer.out_channels; ++o) {
      grads.bias[static_cast<std::size_t>(o)] += g.row(o).sum();
    }
    if (grad_input != nullptr) {
      detail::StridedMap<T> dcol(scratch.dcolumns.data(), k, n, Eigen::OuterStride<>(static_cast<Eigen::Index>(ld)));
      dcol.noalias() = wm.transpose() * g;
      detail::scatter_columns(layer.in_channels, scratch.dcolumns.data(), ld, taps, y0, n_rows, *grad_input);
    }
  }
  scratch.columns_complete = false;
}

template <class T>
struct ConvBackward {
  Tensor<T> grad_input;
  Buffer<T> grad_weight;
  Buffer<T> grad_bias;
};

template <class T>
ConvBackward<T> conv2d_backward(const Conv2d<T>& layer, const Tensor<T>& x, const Tensor<T>& grad_out)
{
  ConvGradients<T> g{Buffer<T>(layer.weight.size(), T(0)), Buffer<T>(layer.bias.size(), T(0))};
  ConvBackward<T> out;
  ConvScratch<T> scratch;
  conv2d_backward_accumulate(layer, x, grad_out, g, &out.grad_input, scratch);
  out.grad_weight = std::move(g.weight);
  out.grad_bias = std::move(g.bias);
  return out;
}

template <class T>
Tensor<T> relu_forward(Tensor<T> x)
{
  for (T& v : x.data) {
    v = v > T(0) ? v : T(0);
  }
  return x;
}

/// Gradient passes where the forward input was strictly positive.
template <class T>
Tensor<T> relu_backward(const Tensor<T>& forward_input, Tensor<T> grad_out)
{
  if (!forward_input.same_shape(grad_out)) {
    throw std::invalid_argument("relu_backward: shape mismatch");
  }
  for (std::size_t i = 0; i < grad_out.data.size(); ++i) {
    if (!(forward_input.data[i] > T(0))) {
      grad_out.data[i] = T(0);
    }
  }
  return grad_out;
}

// ---------------------------------------------------------------------------
// Loss

template <class T>
struct LossAndGrad {
  double loss = 0.0;
  Tensor<T> grad;
};

/// Mean absolute error; gradient sign(pred - target) / N with sign(0) = 0.
template <class T>
LossAndGrad<T> l1_residual_loss(const Tensor<T>& pred_noise, const Tensor<T>& true_noise, std::size_t normalizer = 0)
{
  if (!pred_noise.same_shape(true_noise)) {
    throw std::invalid_argument("l1_residual_loss: shape mismatch");
  }
  const double n = static_cast<double>(normalizer == 0 ? pred_noise.size() : normalizer);
  LossAndGrad<T> out{0.0, Tensor<T>(pred_noise.channels, pred_noise.height, pred_noise.width)};
  const T step = static_cast<T>(1.0 / n);
  double sum = 0.0;
  for (std::size_t i = 0; i < pred_noise.size(); ++i) {
    const T d = pred_noise.data[i] - true_noise.data[i];
    sum += std::abs(static_cast<double>(d));
    out.grad.data[i] = d > T(0) ? step : (d < T(0) ? -step : T(0));
  }
  out.loss = sum / n;
  return out;
}

// ---------------------------------------------------------------------------
// Network

/// Per-layer inputs of a forward pass (the last activation is the network
/// output) with the convolution scratch buffers that backward() reuses.
/// Keep one alive across training samples to recycle its memory.
template <class T>
struct ForwardTrace {
  std::vector<Tensor<T>> activations;
  std::vector<ConvScratch<T>> scratch;
  Tensor<T> grad_a;
  Tensor<T> grad_b;

  [[nodiscard]] const Tensor<T>& output() const { return activations.back(); }
};

template <class T>
class ConvNet {
 public:
  std::vector<Layer<T>> layers;
  /// When set the network predicts noise and denoise() returns input - net(input).
  bool residual = true;

  void validate() const
  {
    int channels = -1;
    bool any_conv = false;
    for (const auto& layer : layers) {
      if (const auto* conv = std::get_if<Conv2d<T>>(&layer)) {
        if (channels != -1 && conv->in_channels != channels) {
          throw std::invalid_argument("ConvNet: layer channel counts do not chain");
        }
        if (conv->weight.size() != static_cast<std::size_t>(conv->out_channels) * conv->fan_in() ||
            conv->bias.size() != static_cast<std::size_t>(conv->out_channels)) {
          throw std::invalid_argument("ConvNet: parameter buffer sizes inconsistent");
        }
        if (conv->kernel_h % 2 == 0 || conv->kernel_w % 2 == 0) {
          throw std::invalid_argument("ConvNet: kernels must have odd size");
        }
        channels = conv->out_channels;
        any_conv = true;
      }
    }
    if (!any_conv) {
      throw std::invalid_argument("ConvNet: no convolution layers");
    }
  }

  [[nodiscard]] int input_channels() const
  {
    for (const auto& layer : layers) {
      if (const auto* conv = std::get_if<Conv2d<T>>(&layer)) {
        return conv->in_channels;
      }
    }
    return 0;
  }

  /// Parameter buffers in canonical order: (weight, bias) per conv layer.
  [[nodiscard]] std::vector<std::span<T>> parameters()
  {
    std::vector<std::span<T>> out;
    for (auto& layer : layers) {
      if (auto* conv = std::get_if<Conv2d<T>>(&layer)) {
        out.emplace_back(conv->weight);
        out.emplace_back(conv->bias);
      }
    }
    return out;
  }
  [[nodiscard]] std::vector<std::span<const T>> parameters() const
  {
    std::vector<std::span<const T>> out;
    for (const auto& layer : layers) {
      if (const auto* conv = std::get_if<Conv2d<T>>(&layer)) {
        out.emplace_back(conv->weight);
        out.emplace_back(conv->bias);
      }
    }
    return out;
  }

  [[nodiscard]] std::size_t parameter_count() const
  {
    std::size_t n = 0;
    for (auto p : parameters()) {
      n += p.size();
    }
    return n;
  }

  [[nodiscard]] bool all_finite() const
  {
    for (auto p : parameters()) {
      for (T v : p) {
        if (!std::isfinite(static_cast<double>(v))) {
          return false;
        }
      }
    }
    return true;
  }

  /// Raw network output (the noise estimate for residual networks).
  [[nodiscard]] Tensor<T> forward(Tensor<T> x) const
  {
    Tensor<T> next;
    ConvScratch<T> scratch;
    for (const auto& layer : layers) {
      if (const auto* conv = std::get_if<Conv2d<T>>(&layer)) {
        conv2d_forward_into(*conv, x, next, scratch);
        std::swap(x, next);
      } else {
        x = relu_forward(std::move(x));
      }
    }
    return x;
  }

  void forward_trace(const Tensor<T>& x, ForwardTrace<T>& tr) const
  {
    tr.activations.resize(layers.size() + 1);
    tr.scratch.resize(layers.size());
    detail::reshape(tr.activations[0], x.channels, x.height, x.width);
    std::copy(x.data.begin(), x.data.end(), tr.activations[0].data.begin());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const Tensor<T>& in = tr.activations[i];
      Tensor<T>& out = tr.activations[i + 1];
      if (const auto* conv = std::get_if<Conv2d<T>>(&layers[i])) {
        conv2d_forward_into(*conv, in, out, tr.scratch[i]);
      } else {
        detail::reshape(out, in.channels, in.height, in.width);
        std::transform(in.data.begin(), in.data.end(), out.data.begin(), [](T v) { return v > T(0) ? v : T(0); });
      }
    }
  }

  [[nodiscard]] ForwardTrace<T> forward_trace(const Tensor<T>& x) const
  {
    ForwardTrace<T> tr;
    forward_trace(x, tr);
    return tr;
  }

  template <class U>
  [[nodiscard]] ConvNet<U> cast() const
  {
    ConvNet<U> out;
    out.residual = residual;
    for (const auto& layer : layers) {
      if (const auto* conv = std::get_if<Conv2d<T>>(&layer)) {
        Conv2d<U> c(conv->in_channels, conv->out_channels, conv->kernel_h, conv->kernel_w);
        std::transform(conv->weight.begin(), conv->weight.end(), c.weight.begin(), [](T v) { return static_cast<U>(v); });
        std::transform(conv->bias.begin(), conv->bias.end(), c.bias.begin(), [](T v) { return static_cast<U>(v); });
        out.layers.emplace_back(std::move(c));
      } else {
        out.layers.emplace_back(ReLU{});
      }
    }
    return out;
  }

  friend bool operator==(const ConvNet&, const ConvNet&) = default;
};

/// One buffer per parameter tensor, in ConvNet::parameters() order.
template <class T>
using ParamBuffers = std::vector<Buffer<T>>;

template <class T>
ParamBuffers<T> zeros_like(const ConvNet<T>& net)
{
  ParamBuffers<T> out;
  for (auto p : net.parameters()) {
    out.emplace_back(p.size(), T(0));
  }
  return out;
}

/// Backpropagates `grad_output` through a recorded forward pass, adding the
/// parameter gradients into `grads`.
template <class T>
void backward(const ConvNet<T>& net, ForwardTrace<T>& trace, const Tensor<T>& grad_output, ParamBuffers<T>& grads)
{
  std::vector<int> param_index(net.layers.size(), -1);
  int first_conv = -1;
  for (std::size_t i = 0, p = 0; i < net.layers.size(); ++i) {
    if (std::holds_alternative<Conv2d<T>>(net.layers[i])) {
      param_index[i] = static_cast<int>(p);
      p += 2;
      if (first_conv < 0) {
        first_conv = static_cast<int>(i);
      }
    }
  }
  Tensor<T>* grad = &trace.grad_a;
  Tensor<T>* spare = &trace.grad_b;
  detail::reshape(*grad, grad_output.channels, grad_output.height, grad_output.width);
  std::copy(grad_output.data.begin(), grad_output.data.end(), grad->data.begin());
  for (int i = static_cast<int>(net.layers.size()) - 1; i >= 0; --i) {
    const auto idx = static_cast<std::size_t>(i);
    const auto& input = trace.activations[idx];
    if (const auto* conv = std::get_if<Conv2d<T>>(&net.layers[idx])) {
      const auto pi = static_cast<std::size_t>(param_index[idx]);
      ConvGradients<T> g{std::move(grads[pi]), std::move(grads[pi + 1])};
      conv2d_backward_accumulate(*conv, input, *grad, g, i == first_conv ? nullptr : spare, trace.scratch[idx]);
      grads[pi] = std::move(g.weight);
      grads[pi + 1] = std::move(g.bias);
      std::swap(grad, spare);
    } else {
      if (!input.same_shape(*grad)) {
        throw std::invalid_argument("backward: relu shape mismatch");
      }
      for (std::size_t j = 0; j < grad->data.size(); ++j) {
        if (!(input.data[j] > T(0))) {
          grad->data[j] = T(0);
        }
      }
    }
  }
}

/// Deterministic He-normal initialization (zero biases).
template <class T>
void he_initialize(ConvNet<T>& net, std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  for (auto& layer : net.layers) {
    if (auto* conv = std::get_if<Conv2d<T>>(&layer)) {
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / conv->fan_in()));
      for (T& w : conv->weight) {
        w = static_cast<T>(dist(rng));
      }
      std::fill(conv->bias.begin(), conv->bias.end(), T(0));
    }
  }
}

/// Plain conv/ReLU stack with kernels `k x k`; widths lists channel counts
/// from input to output (e.g. {1, 32, 32, 1}).
template <class T>
ConvNet<T> make_plain_cnn(const std::vector<int>& widths, std::uint64_t seed, int k = 3, bool residual = true)
{
  if (widths.size() < 2) {
    throw std::invalid_argument("make_plain_cnn: need at least input and output widths");
  }
  ConvNet<T> net;
  net.residual = residual;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    net.layers.emplace_back(Conv2d<T>(widths[i], widths[i + 1], k, k));
    if (i + 2 < widths.size()) {
      net.layers.emplace_back(ReLU{});
    }
  }
  he_initialize(net, seed);
  net.validate();
  return net;
}

// ---------------------------------------------------------------------------
// Adam

template <class T>
struct AdamState {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  ParamBuffers<T> first_moment;
  ParamBuffers<T> second_moment;
};

template <class T>
AdamState<T> make_adam(const ConvNet<T>& net, double learning_rate = 3e-4)
{
  AdamState<T> s;
  s.learning_rate = learning_rate;
  s.first_moment = zeros_like(net);
  s.second_moment = zeros_like(net);
  return s;
}

/// Bias-corrected Adam update. Returns false, leaving parameters, moments and
/// the step counter untouched, when any gradient is non-finite.
template <class T>
bool adam_step(AdamState<T>& s, std::vector<std::span<T>> params, const ParamBuffers<T>& grads)
{
  if (params.size() != grads.size() || s.first_moment.size() != grads.size() || s.second_moment.size() != grads.size()) {
    throw std::invalid_argument("adam_step: parameter/gradient/moment counts differ");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (params[i].size() != grads[i].size() || s.first_moment[i].size() != grads[i].size() ||
        s.second_moment[i].size() != grads[i].size()) {
      throw std::invalid_argument("adam_step: shape mismatch in parameter " + std::to_string(i));
    }
    for (T g : grads[i]) {
      if (!std::isfinite(static_cast<double>(g))) {
        return false;
      }
    }
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto& m = s.first_moment[i];
    auto& v = s.second_moment[i];
    for (std::size_t j = 0; j < grads[i].size(); ++j) {
      const double g = grads[i][j];
      const double mj = s.beta1 * m[j] + (1.0 - s.beta1) * g;
      const double vj = s.beta2 * v[j] + (1.0 - s.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double m_hat = mj / c1;
      const double v_hat = vj / c2;
      params[i][j] = static_cast<T>(params[i][j] - s.learning_rate * m_hat / (std::sqrt(v_hat) + s.epsilon));
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Training

/// Noisy inputs and their noise realizations (the residual targets).
/// Samples may differ in spatial size.
template <class T>
struct TrainBatch {
  std::vector<Tensor<T>> inputs;
  std::vector<Tensor<T>> targets;

  void validate() const
  {
    if (inputs.empty() || inputs.size() != targets.size()) {
      throw std::invalid_argument("TrainBatch: need >= 1 sample and matching targets");
    }
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (!inputs[i].same_shape(targets[i])) {
        throw std::invalid_argument("TrainBatch: input/target shape mismatch at sample " + std::to_string(i));
      }
    }
  }
};

struct StepResult {
  double loss = 0.0;
  bool applied = false;
};

/// Mean L1 loss over every element in the batch, one Adam update.
template <class T>
StepResult train_step(ConvNet<T>& net, const TrainBatch<T>& batch, AdamState<T>& adam, ForwardTrace<T>& trace)
{
  batch.validate();
  std::size_t total = 0;
  for (const auto& t : batch.targets) {
    total += t.size();
  }
  auto grads = zeros_like(net);
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
    net.forward_trace(batch.inputs[i], trace);
    const auto lg = l1_residual_loss(trace.output(), batch.targets[i], total);
    loss += lg.loss;
    backward(net, trace, lg.grad, grads);
  }
  StepResult r;
  r.loss = loss;
  r.applied = adam_step(adam, net.parameters(), grads);
  return r;
}

struct TrainReport {
  std::vector<double> loss_trace;
  int skipped_steps = 0;
};

/// Runs `steps` Adam steps on batches drawn from `next_batch(rng)`, where the
/// generator is seeded from `seed`. Fully deterministic.
template <class T, class BatchSource>
TrainReport train(ConvNet<T>& net, BatchSource&& next_batch, int steps, AdamState<T>& adam, std::uint64_t seed)
{
  if (steps < 1) {
    throw std::invalid_argument("train: steps must be >= 1");
  }
  net.validate();
  std::mt19937_64 rng(seed);
  ForwardTrace<T> trace;
  TrainReport report;
  report.loss_trace.reserve(static_cast<std::size_t>(steps));
  for (int s = 0; s < steps; ++s) {
    const TrainBatch<T> batch = next_batch(rng);
    const auto r = train_step(net, batch, adam, trace);
    report.loss_trace.push_back(r.loss);
    if (!r.applied) {
      ++report.skipped_steps;
    }
  }
  if (!net.all_finite()) {
    throw NumericalError("train: parameters became non-finite");
  }
  return report;
}

// ---------------------------------------------------------------------------
// Gradient verification

struct GradcheckOptions {
  double step = 1e-5;
  int samples = 40;
  std::uint64_t seed = 0;
  /// Applied to the analytic gradients before comparison (negative controls).
  std::function<void(ParamBuffers<double>&)> corrupt;
};

struct GradcheckResult {
  double max_relative_error = 0.0;
  int checked = 0;
  int skipped_at_kinks = 0;
};

namespace detail {

/// Sign pattern of every ReLU input and of the loss residual; a perturbation
/// that changes it crossed a kink of the piecewise-linear loss.
inline std::vector<bool> kink_signature(const ConvNet<double>& net, const Tensor<double>& input, const Tensor<double>& target)
{
  const auto acts = net.forward_trace(input).activations;
  std::vector<bool> sig;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (std::holds_alternative<ReLU>(net.layers[i])) {
      for (double v : acts[i].data) {
        sig.push_back(v > 0.0);
      }
    }
  }
  const auto& out = acts.back();
  for (std::size_t i = 0; i < out.size(); ++i) {
    sig.push_back(out.data[i] > target.data[i]);
  }
  return sig;
}

}  // namespace detail

/// Central finite differences of the L1 training loss over a random subset
/// of parameters, compared with backpropagation. Perturbations that cross a
/// ReLU or loss kink are skipped and counted.
inline GradcheckResult gradcheck(ConvNet<double> net, const Tensor<double>& input, const Tensor<double>& target,
                                 const GradcheckOptions& opts = {})
{
  auto loss_of = [&](const ConvNet<double>& n) { return l1_residual_loss(n.forward(input), target).loss; };
  auto grads = zeros_like(net);
  {
    auto trace = net.forward_trace(input);
    const auto lg = l1_residual_loss(trace.output(), target);
    backward(net, trace, lg.grad, grads);
  }
  if (opts.corrupt) {
    opts.corrupt(grads);
  }
  const auto base_sig = detail::kink_signature(net, input, target);
  std::mt19937_64 rng(opts.seed);
  GradcheckResult res;
  const auto n_tensors = grads.size();
  std::uniform_int_distribution<std::size_t> pick_tensor(0, n_tensors - 1);
  int attempts = 0;
  while (res.checked < opts.samples && attempts < 20 * opts.samples) {
    ++attempts;
    const std::size_t ti = pick_tensor(rng);
    std::uniform_int_distribution<std::size_t> pick_elem(0, grads[ti].size() - 1);
    const std::size_t ei = pick_elem(rng);
    auto params = net.parameters();
    const double orig = params[ti][ei];
    params[ti][ei] = orig + opts.step;
    const bool kink_plus = detail::kink_signature(net, input, target) != base_sig;
    const double lp = loss_of(net);
    params[ti][ei] = orig - opts.step;
    const bool kink_minus = detail::kink_signature(net, input, target) != base_sig;
    const double lm = loss_of(net);
    params[ti][ei] = orig;
    if (kink_plus || kink_minus) {
      ++res.skipped_at_kinks;
      continue;
    }
    const double fd = (lp - lm) / (2.0 * opts.step);
    const double an = grads[ti][ei];
    const double scale = std::max({std::abs(fd), std::abs(an), 1e-10});
    res.max_relative_error = std::max(res.max_relative_error, std::abs(fd - an) / scale);
    ++res.checked;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Weight files
//
// Layout (little-endian):
//   "IDBPNN1"                   7-byte magic
//   u8   residual flag
//   u32  layer count
//   per layer: u8 kind (0 = conv, 1 = relu); conv adds u32 kh, kw, in, out
//   per conv layer, in manifest order: f32 weights [out][in][kh][kw], f32 bias [out]

inline constexpr std::array<char, 7> kWeightMagic{'I', 'D', 'B', 'P', 'N', 'N', '1'};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v)
{
  const std::array<unsigned char, 4> b{static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                       static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b.data()), 4);
}

inline std::uint32_t get_u32(std::istream& in)
{
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) {
    throw InputError("weight file truncated");
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& out, float f)
{
  std::uint32_t bits = 0;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

inline float get_f32(std::istream& in)
{
  const std::uint32_t bits = get_u32(in);
  float f = 0;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace detail

inline void write_weights(const ConvNet<float>& net, std::ostream& out)
{
  out.write(kWeightMagic.data(), kWeightMagic.size());
  out.put(static_cast<char>(net.residual ? 1 : 0));
  detail::put_u32(out, static_cast<std::uint32_t>(net.layers.size()));
  for (const auto& layer : net.layers) {
    if (const auto* conv = std::get_if<Conv2d<float>>(&layer)) {
      out.put(0);
      detail::put_u32(out, static_cast<std::uint32_t>(conv->kernel_h));
      detail::put_u32(out, static_cast<std::uint32_t>(conv->kernel_w));
      detail::put_u32(out, static_cast<std::uint32_t>(conv->in_channels));
      detail::put_u32(out, static_cast<std::uint32_t>(conv->out_channels));
    } else {
      out.put(1);
    }
  }
  for (auto p : net.parameters()) {
    for (float v : p) {
      detail::put_f32(out, v);
    }
  }
}

inline ConvNet<float> read_weights(std::istream& in)
{
  std::array<char, 7> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kWeightMagic) {
    throw InputError("weight file: bad magic (expected IDBPNN1)");
  }
  ConvNet<float> net;
  const int residual = in.get();
  if (residual != 0 && residual != 1) {
    throw InputError("weight file: bad residual flag");
  }
  net.residual = residual == 1;
  const std::uint32_t count = detail::get_u32(in);
  if (count == 0 || count > 1024) {
    throw InputError("weight file: implausible layer count");
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const int kind = in.get();
    if (kind == 0) {
      const auto kh = detail::get_u32(in), kw = detail::get_u32(in), ci = detail::get_u32(in), co = detail::get_u32(in);
      if (kh == 0 || kw == 0 || ci == 0 || co == 0 || kh > 15 || kw > 15 || ci > 4096 || co > 4096) {
        throw InputError("weight file: implausible conv shape");
      }
      net.layers.emplace_back(Conv2d<float>(static_cast<int>(ci), static_cast<int>(co), static_cast<int>(kh),
                                            static_cast<int>(kw)));
    } else if (kind == 1) {
      net.layers.emplace_back(ReLU{});
    } else {
      throw InputError("weight file: unknown layer kind");
    }
  }
  for (auto p : net.parameters()) {
    for (float& v : p) {
      v = detail::get_f32(in);
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw InputError("weight file: trailing bytes after parameters");
  }
  try {
    net.validate();
  } catch (const std::invalid_argument& e) {
    throw InputError(std::string("weight file: ") + e.what());
  }
  return net;
}

inline void save_weights(const ConvNet<float>& net, const std::filesystem::path& path)
{
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw InputError("cannot write weight file '" + path.string() + "'");
  }
  write_weights(net, out);
}

inline ConvNet<float> load_weights(const std::filesystem::path& path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw InputError("cannot open weight file '" + path.string() + "'");
  }
  return read_weights(in);
}

}  // namespace idbp::nn
