#pragma once

// Planar floating-point images, color conversion, bicubic resampling and PSNR.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "idbp/error.hpp"

namespace idbp {

enum class ColorSpace { Gray, RGB, YCbCr };

inline const char* to_string(ColorSpace cs)
{
  switch (cs) {
    case ColorSpace::Gray: return "Gray";
    case ColorSpace::RGB: return "RGB";
    case ColorSpace::YCbCr: return "YCbCr";
  }
  return "?";
}

struct Extent {
  int width = 0;
  int height = 0;

  [[nodiscard]] std::size_t area() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
  friend bool operator==(const Extent&, const Extent&) = default;
};

/// Planar image with samples nominally in [0,1]. Samples are never clamped
/// implicitly; clamping happens only when exporting to a file.
class Image {
 public:
  Image() = default;

  Image(int width, int height, ColorSpace cs, double fill = 0.0)
      : width_(width), height_(height), colorspace_(cs)
  {
    if (width < 1 || height < 1) {
      throw std::invalid_argument("Image: dimensions must be positive, got " + std::to_string(width) + "x" +
                                  std::to_string(height));
    }
    data_.assign(static_cast<std::size_t>(channels()) * extent().area(), fill);
  }

  Image(int width, int height, ColorSpace cs, std::vector<double> samples)
      : width_(width), height_(height), colorspace_(cs), data_(std::move(samples))
  {
    if (width < 1 || height < 1) {
      throw std::invalid_argument("Image: dimensions must be positive");
    }
    if (data_.size() != static_cast<std::size_t>(channels()) * extent().area()) {
      throw std::invalid_argument("Image: sample count does not match width*height*channels");
    }
  }

  static Image gray(int width, int height, double fill = 0.0) { return Image(width, height, ColorSpace::Gray, fill); }

  [[nodiscard]] int width() const { return width_; }
  [[nodiscard]] int height() const { return height_; }
  [[nodiscard]] Extent extent() const { return {width_, height_}; }
  [[nodiscard]] ColorSpace colorspace() const { return colorspace_; }
  [[nodiscard]] int channels() const { return colorspace_ == ColorSpace::Gray ? 1 : 3; }
  [[nodiscard]] bool empty() const { return data_.empty(); }
  [[nodiscard]] std::size_t plane_size() const { return extent().area(); }

  [[nodiscard]] std::span<double> plane(int c) { return {data_.data() + c * plane_size(), plane_size()}; }
  [[nodiscard]] std::span<const double> plane(int c) const { return {data_.data() + c * plane_size(), plane_size()}; }

  [[nodiscard]] double& at(int c, int y, int x) { return data_[c * plane_size() + static_cast<std::size_t>(y) * width_ + x]; }
  [[nodiscard]] double at(int c, int y, int x) const
  {
    return data_[c * plane_size() + static_cast<std::size_t>(y) * width_ + x];
  }
  [[nodiscard]] double& operator()(int y, int x) { return at(0, y, x); }
  [[nodiscard]] double operator()(int y, int x) const { return at(0, y, x); }

  [[nodiscard]] std::span<double> samples() { return data_; }
  [[nodiscard]] std::span<const double> samples() const { return data_; }

  /// Single plane `c` as a gray image.
  [[nodiscard]] Image channel(int c) const
  {
    auto p = plane(c);
    return Image(width_, height_, ColorSpace::Gray, std::vector<double>(p.begin(), p.end()));
  }

  [[nodiscard]] bool all_finite() const
  {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  /// Copy with the colorspace tag replaced; channel counts must agree.
  [[nodiscard]] Image retagged(ColorSpace cs) const
  {
    Image out(width_, height_, cs, data_);
    return out;
  }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  ColorSpace colorspace_ = ColorSpace::Gray;
  std::vector<double> data_;
};

/// Stack three gray planes into one 3-channel image.
inline Image merge_planes(const Image& a, const Image& b, const Image& c, ColorSpace cs)
{
  if (a.extent() != b.extent() || a.extent() != c.extent()) {
    throw std::invalid_argument("merge_planes: plane dimensions differ");
  }
  std::vector<double> data;
  data.reserve(3 * a.plane_size());
  for (const Image* p : {&a, &b, &c}) {
    auto s = p->plane(0);
    data.insert(data.end(), s.begin(), s.end());
  }
  return Image(a.width(), a.height(), cs, std::move(data));
}

// ---------------------------------------------------------------------------
// Color conversion (full-range BT.601)

namespace bt601 {
inline constexpr double kr = 0.299;
inline constexpr double kg = 0.587;
inline constexpr double kb = 0.114;
inline constexpr double cb_scale = 2.0 * (1.0 - kb);  // 1.772
inline constexpr double cr_scale = 2.0 * (1.0 - kr);  // 1.402
}  // namespace bt601

inline Image rgb_to_ycbcr(const Image& img)
{
  if (img.colorspace() != ColorSpace::RGB) {
    throw std::invalid_argument(std::string("rgb_to_ycbcr: expected RGB image, got ") + to_string(img.colorspace()));
  }
  Image out(img.width(), img.height(), ColorSpace::YCbCr);
  auto r = img.plane(0), g = img.plane(1), b = img.plane(2);
  auto y = out.plane(0), cb = out.plane(1), cr = out.plane(2);
  for (std::size_t i = 0; i < img.plane_size(); ++i) {
    const double luma = bt601::kr * r[i] + bt601::kg * g[i] + bt601::kb * b[i];
    y[i] = luma;
    cb[i] = (b[i] - luma) / bt601::cb_scale + 0.5;
    cr[i] = (r[i] - luma) / bt601::cr_scale + 0.5;
  }
  return out;
}

inline Image ycbcr_to_rgb(const Image& img)
{
  if (img.colorspace() != ColorSpace::YCbCr) {
    throw std::invalid_argument(std::string("ycbcr_to_rgb: expected YCbCr image, got ") + to_string(img.colorspace()));
  }
  Image out(img.width(), img.height(), ColorSpace::RGB);
  auto y = img.plane(0), cb = img.plane(1), cr = img.plane(2);
  auto r = out.plane(0), g = out.plane(1), b = out.plane(2);
  for (std::size_t i = 0; i < img.plane_size(); ++i) {
    const double red = y[i] + bt601::cr_scale * (cr[i] - 0.5);
    const double blue = y[i] + bt601::cb_scale * (cb[i] - 0.5);
    r[i] = red;
    b[i] = blue;
    g[i] = (y[i] - bt601::kr * red - bt601::kb * blue) / bt601::kg;
  }
  return out;
}

/// Luminance plane of any image: Y of RGB/YCbCr, or the gray plane itself.
inline Image luma(const Image& img)
{
  switch (img.colorspace()) {
    case ColorSpace::Gray: return img;
    case ColorSpace::YCbCr: return img.channel(0);
    case ColorSpace::RGB: {
      Image out = Image::gray(img.width(), img.height());
      auto r = img.plane(0), g = img.plane(1), b = img.plane(2);
      auto y = out.plane(0);
      for (std::size_t i = 0; i < img.plane_size(); ++i) {
        y[i] = bt601::kr * r[i] + bt601::kg * g[i] + bt601::kb * b[i];
      }
      return out;
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Boundary handling and bicubic resampling

/// Mirror an index into [0, n) reflecting about the edge samples without
/// repeating them (-1 -> 1, n -> n-2).
[[nodiscard]] constexpr int reflect_index(int i, int n)
{
  if (n == 1) {
    return 0;
  }
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) {
    i += period;
  }
  return i < n ? i : period - i;
}

/// Keys cubic convolution kernel with a = -0.5.
[[nodiscard]] constexpr double keys_cubic(double x)
{
  constexpr double a = -0.5;
  const double ax = x < 0 ? -x : x;
  if (ax <= 1.0) {
    return ((a + 2.0) * ax - (a + 3.0)) * ax * ax + 1.0;
  }
  if (ax < 2.0) {
    return ((a * ax - 5.0 * a) * ax + 8.0 * a) * ax - 4.0 * a;
  }
  return 0.0;
}

/// Positive rational scale factor num/den.
struct Rational {
  int num = 1;
  int den = 1;

  [[nodiscard]] double value() const { return static_cast<double>(num) / den; }
  /// round(n * num / den), halves rounded up.
  [[nodiscard]] int scale_length(int n) const
  {
    const long long scaled = 2LL * n * num + den;
    return static_cast<int>(scaled / (2LL * den));
  }
};

namespace detail {

struct ResampleTaps {
  std::vector<int> offsets;    // first tap index into row of `indices`
  std::vector<int> counts;
  std::vector<int> indices;    // reflected source indices
  std::vector<double> weights;
};

/// Per-output-sample taps for one axis. Output sample centers are mapped
/// onto the input grid with pixel-center alignment; for downscaling the
/// kernel is stretched by 1/scale (anti-aliasing).
inline ResampleTaps resample_taps(int in_len, int out_len, double scale)
{
  ResampleTaps t;
  const double stretch = scale < 1.0 ? scale : 1.0;
  const double support = 2.0 / stretch;
  for (int o = 0; o < out_len; ++o) {
    const double center = (o + 0.5) / scale - 0.5;
    const int first = static_cast<int>(std::floor(center - support)) + 1;
    const int last = static_cast<int>(std::ceil(center + support)) - 1;
    t.offsets.push_back(static_cast<int>(t.indices.size()));
    double total = 0.0;
    const std::size_t begin = t.weights.size();
    for (int j = first; j <= last; ++j) {
      const double w = stretch * keys_cubic(stretch * (center - j));
      if (w == 0.0) {
        continue;
      }
      t.indices.push_back(reflect_index(j, in_len));
      t.weights.push_back(w);
      total += w;
    }
    for (std::size_t k = begin; k < t.weights.size(); ++k) {
      t.weights[k] /= total;
    }
    t.counts.push_back(static_cast<int>(t.weights.size() - begin));
  }
  return t;
}

}  // namespace detail

/// Separable Keys (a = -0.5) bicubic resize of every plane by `factor`.
/// Output size per axis is round(n * factor).
inline Image bicubic_resize(const Image& img, Rational factor)
{
  if (factor.num < 1 || factor.den < 1) {
    throw std::invalid_argument("bicubic_resize: factor must be a positive rational");
  }
  const int out_w = factor.scale_length(img.width());
  const int out_h = factor.scale_length(img.height());
  if (out_w < 1 || out_h < 1) {
    throw std::invalid_argument("bicubic_resize: degenerate output size " + std::to_string(out_w) + "x" +
                                std::to_string(out_h));
  }
  const double scale = factor.value();
  const auto tx = detail::resample_taps(img.width(), out_w, scale);
  const auto ty = detail::resample_taps(img.height(), out_h, scale);

  Image out(out_w, out_h, img.colorspace());
  std::vector<double> tmp(static_cast<std::size_t>(img.height()) * out_w);
  for (int c = 0; c < img.channels(); ++c) {
    auto src = img.plane(c);
    for (int y = 0; y < img.height(); ++y) {
      const double* row = src.data() + static_cast<std::size_t>(y) * img.width();
      for (int x = 0; x < out_w; ++x) {
        double acc = 0.0;
        const int off = tx.offsets[x];
        for (int k = 0; k < tx.counts[x]; ++k) {
          acc += tx.weights[off + k] * row[tx.indices[off + k]];
        }
        tmp[static_cast<std::size_t>(y) * out_w + x] = acc;
      }
    }
    auto dst = out.plane(c);
    for (int y = 0; y < out_h; ++y) {
      const int off = ty.offsets[y];
      double* row = dst.data() + static_cast<std::size_t>(y) * out_w;
      std::fill(row, row + out_w, 0.0);
      for (int k = 0; k < ty.counts[y]; ++k) {
        const double w = ty.weights[off + k];
        const double* srow = tmp.data() + static_cast<std::size_t>(ty.indices[off + k]) * out_w;
        for (int x = 0; x < out_w; ++x) {
          row[x] += w * srow[x];
        }
      }
    }
  }
  return out;
}

inline Image bicubic_resize(const Image& img, int integer_factor) { return bicubic_resize(img, Rational{integer_factor, 1}); }

/// Center crop so both dimensions are multiples of `multiple`.
inline Image crop_to_multiple(const Image& img, int multiple)
{
  const int w = img.width() - img.width() % multiple;
  const int h = img.height() - img.height() % multiple;
  if (w < 1 || h < 1) {
    throw InputError("image " + std::to_string(img.width()) + "x" + std::to_string(img.height()) +
                     " is smaller than the scale factor");
  }
  const int x0 = (img.width() - w) / 2;
  const int y0 = (img.height() - h) / 2;
  Image out(w, h, img.colorspace());
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        out.at(c, y, x) = img.at(c, y + y0, x + x0);
      }
    }
  }
  return out;
}

inline Image clamp01(Image img)
{
  for (double& v : img.samples()) {
    v = std::clamp(v, 0.0, 1.0);
  }
  return img;
}

// ---------------------------------------------------------------------------
// PSNR

enum class PsnrChannel { Y, All };

struct PsnrReport {
  double value = 0.0;  // dB; +inf when the images are identical
  PsnrChannel channel = PsnrChannel::Y;
  int border_crop = 0;

  [[nodiscard]] bool identical() const { return std::isinf(value) && value > 0; }
};

/// 10*log10(1/MSE) over samples in [0,1], optionally on luminance only and
/// excluding `border_crop` pixels on every side.
inline PsnrReport psnr(const Image& a, const Image& b, PsnrChannel channel = PsnrChannel::Y, int border_crop = 0)
{
  if (a.extent() != b.extent()) {
    throw std::invalid_argument("psnr: dimension mismatch");
  }
  if (border_crop < 0 || 2 * border_crop >= a.width() || 2 * border_crop >= a.height()) {
    throw std::invalid_argument("psnr: border crop leaves no pixels");
  }
  const Image pa = channel == PsnrChannel::Y ? luma(a) : a;
  const Image pb = channel == PsnrChannel::Y ? luma(b) : b;
  if (pa.channels() != pb.channels()) {
    throw std::invalid_argument("psnr: channel count mismatch");
  }
  double sum = 0.0;
  std::size_t count = 0;
  for (int c = 0; c < pa.channels(); ++c) {
    for (int y = border_crop; y < pa.height() - border_crop; ++y) {
      for (int x = border_crop; x < pa.width() - border_crop; ++x) {
        const double d = pa.at(c, y, x) - pb.at(c, y, x);
        sum += d * d;
        ++count;
      }
    }
  }
  const double mse = sum / static_cast<double>(count);
  PsnrReport r;
  r.channel = channel;
  r.border_crop = border_crop;
  r.value = mse == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / mse);
  return r;
}

inline double rms_difference(const Image& a, const Image& b)
{
  if (a.extent() != b.extent() || a.channels() != b.channels()) {
    throw std::invalid_argument("rms_difference: shape mismatch");
  }
  double sum = 0.0;
  auto sa = a.samples(), sb = b.samples();
  for (std::size_t i = 0; i < sa.size(); ++i) {
    sum += (sa[i] - sb[i]) * (sa[i] - sb[i]);
  }
  return std::sqrt(sum / static_cast<double>(sa.size()));
}

}  // namespace idbp
