#pragma once

// Built-in invariant checks, runnable from the CLI without any data files.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "idbp/denoiser_bank.hpp"
#include "idbp/idbp.hpp"
#include "idbp/image.hpp"
#include "idbp/linops.hpp"
#include "idbp/nn.hpp"
#include "idbp/schedule.hpp"

namespace idbp {

struct SelftestOptions {
  /// Negative control: evaluates the adjoint with a negated, flipped kernel.
  bool corrupt_adjoint = false;
  std::uint64_t seed = 1;
};

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace detail {

inline Image random_image(int w, int h, std::mt19937_64& rng)
{
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img = Image::gray(w, h);
  for (double& v : img.samples()) {
    v = u(rng);
  }
  return img;
}

inline double dot(const Image& a, const Image& b)
{
  double s = 0.0;
  for (std::size_t i = 0; i < a.samples().size(); ++i) {
    s += a.samples()[i] * b.samples()[i];
  }
  return s;
}

inline Eigen::VectorXd as_vector(const Image& img)
{
  return Eigen::Map<const Eigen::VectorXd>(img.samples().data(), static_cast<Eigen::Index>(img.samples().size()));
}

inline Kernel2D negated_flip(const Kernel2D& k)
{
  Kernel2D f = k;
  for (int r = 0; r < k.rows; ++r) {
    for (int c = 0; c < k.cols; ++c) {
      f.taps[static_cast<std::size_t>(r) * k.cols + c] = -k.at(k.rows - 1 - r, k.cols - 1 - c);
    }
  }
  f.anchor_row = k.rows - 1 - k.anchor_row;
  f.anchor_col = k.cols - 1 - k.anchor_col;
  return f;
}

inline std::vector<DegradationOperator> selftest_operators()
{
  return {{make_bicubic_kernel(2), 2, 0}, {make_bicubic_kernel(3), 3, 0}, {make_gaussian_kernel(7, 1.6), 3, 0}};
}

}  // namespace detail

inline std::vector<CheckResult> run_selftest(const SelftestOptions& opts = {})
{
  std::vector<CheckResult> results;
  std::mt19937_64 rng(opts.seed);
  auto report = [&](std::string name, bool ok, std::string detail) {
    results.push_back({std::move(name), ok, std::move(detail)});
  };

  {
    double worst = 0.0;
    for (const auto& op : detail::selftest_operators()) {
      DegradationOperator adj = op;
      if (opts.corrupt_adjoint) {
        adj.kernel = detail::negated_flip(op.kernel);
      }
      for (int t = 0; t < 20; ++t) {
        const Image x = detail::random_image(24, 24, rng);
        const Extent lr = op.low_res_extent(x.extent());
        const Image v = detail::random_image(lr.width, lr.height, rng);
        const Image hx = apply_H(op, x);
        const Image htv = apply_Ht(adj, v, x.extent());
        const double defect = std::abs(detail::dot(hx, v) - detail::dot(x, htv)) /
                              (l2_norm(hx.samples()) * l2_norm(v.samples()));
        worst = std::max(worst, defect);
      }
    }
    report("adjoint", worst <= 1e-9, "max relative defect " + csv_number(worst));
  }

  {
    double worst_h = 0.0, worst_p = 0.0;
    for (const auto& op : detail::selftest_operators()) {
      const Extent hr{12, 12};
      const Eigen::MatrixXd H = build_dense_operator(op, hr);
      const Image x = detail::random_image(hr.width, hr.height, rng);
      worst_h = std::max(worst_h, (H * detail::as_vector(x) - detail::as_vector(apply_H(op, x))).cwiseAbs().maxCoeff());
      const Extent lr = op.low_res_extent(hr);
      const Image y = detail::random_image(lr.width, lr.height, rng);
      const Eigen::MatrixXd hht = H * H.transpose();
      const Eigen::VectorXd xv = detail::as_vector(x);
      const Eigen::VectorXd a = hht.ldlt().solve(detail::as_vector(y) - H * xv);
      const Eigen::VectorXd z_dense = H.transpose() * a + xv;
      CgConfig cg;
      cg.tolerance = 1e-10;
      cg.max_iters = 500;
      const auto proj = project_onto_constraint(op, x, y, cg);
      worst_p = std::max(worst_p, (z_dense - detail::as_vector(proj.z)).cwiseAbs().maxCoeff());
    }
    report("dense_operator", worst_h <= 1e-12, "max |Hx - apply_H x| " + csv_number(worst_h));
    report("projection_vs_dense", worst_p <= 1e-5, "max abs diff " + csv_number(worst_p));
  }

  {
    auto net = nn::make_plain_cnn<double>({1, 4, 4, 1}, opts.seed);
    nn::Tensor<double> in(1, 10, 10), target(1, 10, 10);
    std::normal_distribution<double> n(0.0, 0.3);
    for (auto& v : in.data) {
      v = n(rng);
    }
    for (auto& v : target.data) {
      v = n(rng);
    }
    nn::GradcheckOptions g;
    g.samples = 40;
    g.seed = opts.seed;
    const auto res = nn::gradcheck(net, in, target, g);
    report("gradcheck", res.checked >= 20 && res.max_relative_error <= 1e-4,
           "max relative error " + csv_number(res.max_relative_error) + " over " + std::to_string(res.checked) +
               " parameters");
  }

  {
    bool ok = true;
    for (int s : {2, 3}) {
      const DeltaSchedule sched{s, 30, std::nullopt};
      ok = ok && delta_at(sched, 0) == 12.0 * s && delta_at(sched, 29) == s;
    }
    const DeltaSchedule floored{3, 30, 10.0};
    const auto first = first_floor_index(floored);
    ok = ok && first.has_value();
    for (int k = first.value_or(30); k < 30; ++k) {
      ok = ok && delta_at(floored, k) == 10.0;
    }
    report("schedule", ok, "endpoints 12s and s; floor 10 binds from k=" + std::to_string(first.value_or(-1)));
  }

  {
    // Identity denoisers isolate the projection contract from learned weights.
    std::vector<BankEntry> entries;
    for (double level : {5.0, 25.0}) {
      BankEntry e;
      e.level = {level};
      e.net = make_denoiser(1, 0.0);
      entries.push_back(std::move(e));
    }
    const DenoiserBank bank(std::move(entries));
    const DegradationOperator op{make_bicubic_kernel(2), 2, 0};
    const Image x = detail::random_image(32, 32, rng);
    IDBPConfig cfg;
    cfg.n_iters = 5;
    const auto sr = idbp_superresolve(apply_H(op, x), op, bank, cfg);
    double worst = sr.final_constraint_residual;
    for (const auto& r : sr.trace) {
      worst = std::max(worst, r.constraint_residual);
    }
    report("projection_residual", worst <= 1e-4, "max ||Hz - y||/||y|| " + csv_number(worst));
  }
  return results;
}

inline bool print_selftest(const std::vector<CheckResult>& results, std::ostream& os)
{
  bool all = true;
  for (const auto& r : results) {
    os << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
    all = all && r.passed;
  }
  return all;
}

}  // namespace idbp
