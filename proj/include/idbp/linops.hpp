#pragma once

// Degradation operator H (blur then decimate), its exact adjoint, and the
// backward projection onto {z : Hz = y} solved with conjugate gradients.

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "idbp/error.hpp"
#include "idbp/image.hpp"

namespace idbp {

struct Kernel2D {
  int rows = 1;
  int cols = 1;
  int anchor_row = 0;
  int anchor_col = 0;
  std::vector<double> taps{1.0};

  [[nodiscard]] double at(int r, int c) const { return taps[static_cast<std::size_t>(r) * cols + c]; }
  [[nodiscard]] double sum() const { return std::accumulate(taps.begin(), taps.end(), 0.0); }

  static Kernel2D identity() { return {}; }

  void validate() const
  {
    if (rows < 1 || cols < 1 || taps.size() != static_cast<std::size_t>(rows) * cols) {
      throw InputError("kernel: tap count does not match its dimensions");
    }
    if (anchor_row < 0 || anchor_row >= rows || anchor_col < 0 || anchor_col >= cols) {
      throw InputError("kernel: anchor lies outside the support");
    }
    for (double t : taps) {
      if (!std::isfinite(t)) {
        throw InputError("kernel: non-finite tap");
      }
    }
  }

  friend bool operator==(const Kernel2D&, const Kernel2D&) = default;
};

/// Pixel-centered bicubic anti-aliasing lowpass for decimation by `scale`:
/// separable Keys (a = -0.5) kernel stretched by `scale`, normalized.
/// Support is 4*scale - 1 taps per axis with the anchor at the center.
inline Kernel2D make_bicubic_kernel(int scale)
{
  if (scale < 2 || scale > 4) {
    throw std::invalid_argument("make_bicubic_kernel: scale must be 2, 3 or 4");
  }
  const int radius = 2 * scale - 1;
  const int n = 2 * radius + 1;
  std::vector<double> w1(static_cast<std::size_t>(n));
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    w1[static_cast<std::size_t>(i)] = keys_cubic(static_cast<double>(i - radius) / scale);
    total += w1[static_cast<std::size_t>(i)];
  }
  for (double& w : w1) {
    w /= total;
  }
  Kernel2D k{n, n, radius, radius, std::vector<double>(static_cast<std::size_t>(n) * n)};
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      k.taps[static_cast<std::size_t>(r) * n + c] = w1[static_cast<std::size_t>(r)] * w1[static_cast<std::size_t>(c)];
    }
  }
  return k;
}

/// Sampled isotropic Gaussian of odd `size`, normalized to unit sum.
inline Kernel2D make_gaussian_kernel(int size = 7, double sigma = 1.6)
{
  if (size < 3 || size % 2 == 0) {
    throw std::invalid_argument("make_gaussian_kernel: size must be odd and >= 3");
  }
  if (!(sigma > 0.0)) {
    throw std::invalid_argument("make_gaussian_kernel: sigma must be positive");
  }
  const int radius = size / 2;
  Kernel2D k{size, size, radius, radius, std::vector<double>(static_cast<std::size_t>(size) * size)};
  double total = 0.0;
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const double dr = r - radius, dc = c - radius;
      const double v = std::exp(-(dr * dr + dc * dc) / (2.0 * sigma * sigma));
      k.taps[static_cast<std::size_t>(r) * size + c] = v;
      total += v;
    }
  }
  for (double& t : k.taps) {
    t /= total;
  }
  return k;
}

/// Plain-text kernel: header "rows cols anchor_r anchor_c", then one
/// whitespace-separated line of taps per row.
inline Kernel2D parse_kernel_text(std::istream& in)
{
  std::string header;
  if (!std::getline(in, header)) {
    throw InputError("kernel file: missing header line");
  }
  std::istringstream hs(header);
  Kernel2D k;
  std::string extra;
  if (!(hs >> k.rows >> k.cols >> k.anchor_row >> k.anchor_col) || (hs >> extra)) {
    throw InputError("kernel file: header must be 'rows cols anchor_r anchor_c'");
  }
  if (k.rows < 1 || k.cols < 1 || k.rows > 256 || k.cols > 256) {
    throw InputError("kernel file: unreasonable kernel dimensions");
  }
  k.taps.clear();
  std::string line;
  int row = 0;
  while (row < k.rows && std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<double> vals;
    double v = 0;
    while (ls >> v) {
      vals.push_back(v);
    }
    if (!ls.eof()) {
      throw InputError("kernel file: non-numeric entry in row " + std::to_string(row));
    }
    if (vals.empty()) {
      continue;
    }
    if (static_cast<int>(vals.size()) != k.cols) {
      throw InputError("kernel file: row " + std::to_string(row) + " has " + std::to_string(vals.size()) +
                       " entries, expected " + std::to_string(k.cols));
    }
    k.taps.insert(k.taps.end(), vals.begin(), vals.end());
    ++row;
  }
  if (row != k.rows) {
    throw InputError("kernel file: expected " + std::to_string(k.rows) + " rows, found " + std::to_string(row));
  }
  k.validate();
  return k;
}

inline Kernel2D load_kernel_file(const std::filesystem::path& path)
{
  std::ifstream in(path);
  if (!in) {
    throw InputError("cannot open kernel file '" + path.string() + "'");
  }
  return parse_kernel_text(in);
}

inline void save_kernel_file(const Kernel2D& k, const std::filesystem::path& path)
{
  std::ofstream out(path);
  if (!out) {
    throw InputError("cannot write kernel file '" + path.string() + "'");
  }
  out << k.rows << ' ' << k.cols << ' ' << k.anchor_row << ' ' << k.anchor_col << '\n';
  out.precision(17);
  for (int r = 0; r < k.rows; ++r) {
    for (int c = 0; c < k.cols; ++c) {
      out << (c ? " " : "") << k.at(r, c);
    }
    out << '\n';
  }
}

/// Kernel from a textual spec: "bicubic", "gaussian:SIZE,SIGMA",
/// "gaussian" (7, 1.6), "identity", or "file:PATH".
inline Kernel2D parse_kernel_spec(const std::string& spec, int scale)
{
  if (spec == "bicubic") {
    return make_bicubic_kernel(scale);
  }
  if (spec == "identity") {
    return Kernel2D::identity();
  }
  if (spec == "gaussian") {
    return make_gaussian_kernel(7, 1.6);
  }
  if (spec.rfind("gaussian:", 0) == 0) {
    std::istringstream ss(spec.substr(9));
    int size = 0;
    double sigma = 0;
    char comma = 0;
    if (!(ss >> size >> comma >> sigma) || comma != ',') {
      throw InputError("kernel spec '" + spec + "': expected gaussian:SIZE,SIGMA");
    }
    try {
      return make_gaussian_kernel(size, sigma);
    } catch (const std::invalid_argument& e) {
      throw InputError(std::string("kernel spec '") + spec + "': " + e.what());
    }
  }
  if (spec.rfind("file:", 0) == 0) {
    return load_kernel_file(spec.substr(5));
  }
  throw InputError("unknown kernel spec '" + spec + "'");
}

/// H = decimate(s, phase) o blur(kernel), symmetric boundary extension.
/// Output sample i takes HR position phase + s*i, so a delta at HR
/// position s*i (phase 0) lands on LR position i.
struct DegradationOperator {
  Kernel2D kernel;
  int scale = 1;
  int phase = 0;

  [[nodiscard]] Extent low_res_extent(Extent hr) const
  {
    return {(hr.width - phase + scale - 1) / scale, (hr.height - phase + scale - 1) / scale};
  }

  void validate() const
  {
    kernel.validate();
    if (scale < 1) {
      throw std::invalid_argument("DegradationOperator: scale must be >= 1");
    }
    if (phase < 0 || phase >= scale) {
      throw std::invalid_argument("DegradationOperator: phase must lie in [0, scale)");
    }
  }
};

namespace detail {

/// Reflected HR source index for every (LR position, tap) pair on one axis.
/// Blur is a true convolution: out[p] = sum_u k[u] x[p + anchor - u].
inline std::vector<int> operator_index_table(int hr_len, int lr_len, int taps, int anchor, int scale, int phase)
{
  std::vector<int> table(static_cast<std::size_t>(lr_len) * taps);
  for (int i = 0; i < lr_len; ++i) {
    const int p = phase + scale * i;
    for (int u = 0; u < taps; ++u) {
      table[static_cast<std::size_t>(i) * taps + u] = reflect_index(p + anchor - u, hr_len);
    }
  }
  return table;
}

inline void require_single_channel(const Image& img, const char* who)
{
  if (img.channels() != 1) {
    throw std::invalid_argument(std::string(who) + ": expected a single-channel image");
  }
}

}  // namespace detail

inline Image apply_H(const DegradationOperator& op, const Image& x)
{
  detail::require_single_channel(x, "apply_H");
  const Kernel2D& k = op.kernel;
  const Extent lr = op.low_res_extent(x.extent());
  const auto rows = detail::operator_index_table(x.height(), lr.height, k.rows, k.anchor_row, op.scale, op.phase);
  const auto cols = detail::operator_index_table(x.width(), lr.width, k.cols, k.anchor_col, op.scale, op.phase);
  Image out = Image::gray(lr.width, lr.height);
  for (int i = 0; i < lr.height; ++i) {
    for (int j = 0; j < lr.width; ++j) {
      double acc = 0.0;
      for (int u = 0; u < k.rows; ++u) {
        const int sy = rows[static_cast<std::size_t>(i) * k.rows + u];
        for (int v = 0; v < k.cols; ++v) {
          acc += k.at(u, v) * x(sy, cols[static_cast<std::size_t>(j) * k.cols + v]);
        }
      }
      out(i, j) = acc;
    }
  }
  return out;
}

/// Exact transpose of apply_H: scatters every LR sample back through the
/// same reflected taps.
inline Image apply_Ht(const DegradationOperator& op, const Image& v, Extent hr)
{
  detail::require_single_channel(v, "apply_Ht");
  const Extent lr = op.low_res_extent(hr);
  if (v.extent() != lr) {
    throw std::invalid_argument("apply_Ht: low-resolution dimensions " + std::to_string(v.width()) + "x" +
                                std::to_string(v.height()) + " inconsistent with operator (expected " +
                                std::to_string(lr.width) + "x" + std::to_string(lr.height) + ")");
  }
  const Kernel2D& k = op.kernel;
  const auto rows = detail::operator_index_table(hr.height, lr.height, k.rows, k.anchor_row, op.scale, op.phase);
  const auto cols = detail::operator_index_table(hr.width, lr.width, k.cols, k.anchor_col, op.scale, op.phase);
  Image out = Image::gray(hr.width, hr.height);
  for (int i = 0; i < lr.height; ++i) {
    for (int j = 0; j < lr.width; ++j) {
      const double val = v(i, j);
      for (int u = 0; u < k.rows; ++u) {
        const int sy = rows[static_cast<std::size_t>(i) * k.rows + u];
        for (int w = 0; w < k.cols; ++w) {
          out(sy, cols[static_cast<std::size_t>(j) * k.cols + w]) += k.at(u, w) * val;
        }
      }
    }
  }
  return out;
}

/// Explicit matrix of apply_H for small HR sizes, assembled column by
/// column from unit impulses. Row-major pixel ordering.
inline Eigen::MatrixXd build_dense_operator(const DegradationOperator& op, Extent hr)
{
  if (hr.width > 32 || hr.height > 32) {
    throw std::invalid_argument("build_dense_operator: HR size limited to 32x32");
  }
  const Extent lr = op.low_res_extent(hr);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(lr.area()), static_cast<Eigen::Index>(hr.area()));
  Image impulse = Image::gray(hr.width, hr.height);
  for (std::size_t col = 0; col < hr.area(); ++col) {
    impulse.samples()[col] = 1.0;
    const Image response = apply_H(op, impulse);
    impulse.samples()[col] = 0.0;
    for (std::size_t row = 0; row < lr.area(); ++row) {
      m(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(col)) = response.samples()[row];
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Conjugate gradients

struct CgConfig {
  double tolerance = 1e-6;  // on ||A a - b|| / ||b||
  int max_iters = 100;

  void validate() const
  {
    if (!(tolerance > 0.0) || max_iters < 1) {
      throw std::invalid_argument("CgConfig: tolerance must be > 0 and max_iters >= 1");
    }
  }
};

struct CgResult {
  std::vector<double> solution;
  int iterations = 0;
  bool converged = false;
  double relative_residual = 0.0;
  std::vector<double> residual_history;  // relative residual, starting at 1
};

using LinearMap = std::function<void(std::span<const double>, std::span<double>)>;

/// Conjugate gradients for a symmetric positive (semi-)definite map, from a
/// zero initial guess. Non-convergence is reported, not thrown.
inline CgResult cg_solve(const LinearMap& apply_A, std::span<const double> b, const CgConfig& cfg = {})
{
  cfg.validate();
  const std::size_t n = b.size();
  CgResult res;
  res.solution.assign(n, 0.0);
  auto dot = [](std::span<const double> a, std::span<const double> c) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      s += a[i] * c[i];
    }
    return s;
  };
  const double b_norm = std::sqrt(dot(b, b));
  if (!std::isfinite(b_norm)) {
    throw NumericalError("cg_solve: right-hand side is not finite");
  }
  res.residual_history.push_back(b_norm == 0.0 ? 0.0 : 1.0);
  if (b_norm == 0.0) {
    res.converged = true;
    return res;
  }
  std::vector<double> r(b.begin(), b.end());
  std::vector<double> p = r;
  std::vector<double> ap(n);
  double rr = dot(r, r);
  for (int it = 0; it < cfg.max_iters; ++it) {
    apply_A(p, ap);
    const double pap = dot(p, ap);
    if (!std::isfinite(pap)) {
      throw NumericalError("cg_solve: operator produced non-finite values");
    }
    if (pap <= 0.0) {
      break;  // direction in the null space; the current iterate is the best available
    }
    const double alpha = rr / pap;
    for (std::size_t i = 0; i < n; ++i) {
      res.solution[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    const double rr_new = dot(r, r);
    res.iterations = it + 1;
    res.relative_residual = std::sqrt(rr_new) / b_norm;
    res.residual_history.push_back(res.relative_residual);
    if (res.relative_residual <= cfg.tolerance) {
      res.converged = true;
      return res;
    }
    const double beta = rr_new / rr;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = r[i] + beta * p[i];
    }
    rr = rr_new;
  }
  res.relative_residual = res.residual_history.back();
  return res;
}

struct ProjectionResult {
  Image z;
  CgResult cg;
  double constraint_residual = 0.0;  // ||H z - y|| / ||y||
};

inline double l2_norm(std::span<const double> v)
{
  double s = 0.0;
  for (double x : v) {
    s += x * x;
  }
  return std::sqrt(s);
}

/// Nearest point to `x_tilde` on {z : Hz = y}: z = H^T a + x_tilde with
/// (H H^T) a = y - H x_tilde solved matrix-free.
inline ProjectionResult project_onto_constraint(const DegradationOperator& op, const Image& x_tilde, const Image& y,
                                                const CgConfig& cfg = {})
{
  detail::require_single_channel(x_tilde, "project_onto_constraint");
  detail::require_single_channel(y, "project_onto_constraint");
  const Extent hr = x_tilde.extent();
  const Extent lr = op.low_res_extent(hr);
  if (y.extent() != lr) {
    throw std::invalid_argument("project_onto_constraint: y does not match H applied to x_tilde");
  }
  Image residual = apply_H(op, x_tilde);
  {
    auto rs = residual.samples();
    auto ys = y.samples();
    for (std::size_t i = 0; i < rs.size(); ++i) {
      rs[i] = ys[i] - rs[i];
    }
  }
  LinearMap hht = [&](std::span<const double> in, std::span<double> out) {
    Image v(lr.width, lr.height, ColorSpace::Gray, std::vector<double>(in.begin(), in.end()));
    const Image back = apply_H(op, apply_Ht(op, v, hr));
    std::copy(back.samples().begin(), back.samples().end(), out.begin());
  };
  ProjectionResult result;
  result.cg = cg_solve(hht, residual.samples(), cfg);
  const Image a(lr.width, lr.height, ColorSpace::Gray, result.cg.solution);
  result.z = apply_Ht(op, a, hr);
  {
    auto zs = result.z.samples();
    auto xs = x_tilde.samples();
    for (std::size_t i = 0; i < zs.size(); ++i) {
      zs[i] += xs[i];
    }
  }
  if (!result.z.all_finite()) {
    throw NumericalError("project_onto_constraint: non-finite result");
  }
  const Image hz = apply_H(op, result.z);
  std::vector<double> diff(hz.samples().begin(), hz.samples().end());
  for (std::size_t i = 0; i < diff.size(); ++i) {
    diff[i] -= y.samples()[i];
  }
  const double y_norm = l2_norm(y.samples());
  result.constraint_residual = y_norm == 0.0 ? l2_norm(diff) : l2_norm(diff) / y_norm;
  return result;
}

}  // namespace idbp
