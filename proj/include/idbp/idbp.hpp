#pragma once

// Iterative denoising and backward projection for super-resolution.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "idbp/adapt.hpp"
#include "idbp/denoiser_bank.hpp"
#include "idbp/error.hpp"
#include "idbp/image.hpp"
#include "idbp/linops.hpp"
#include "idbp/schedule.hpp"

namespace idbp {

struct IDBPConfig {
  double sigma_e = 0.0;  // observation noise, 0-255 scale
  int n_iters = 30;
  std::optional<double> delta_floor;
  CgConfig cg;
  std::optional<AdaptConfig> adapt;
  /// Patch source for adaptation; the LR input when empty.
  std::optional<Image> adapt_source;
  /// PSNR border crop against ground truth; the scale factor when negative.
  int border_crop = -1;

  void validate() const
  {
    if (n_iters < 1) {
      throw std::invalid_argument("IDBPConfig: n_iters must be >= 1");
    }
    if (!(sigma_e >= 0.0)) {
      throw std::invalid_argument("IDBPConfig: sigma_e must be >= 0");
    }
    cg.validate();
    if (adapt) {
      adapt->validate();
    }
  }
};

struct IterationRecord {
  int iter = 0;  // 1-based
  double delta = 0.0;
  double sigma_total = 0.0;
  double bank_level = 0.0;
  Provenance provenance = Provenance::Offline;
  double constraint_residual = 0.0;
  int cg_iterations = 0;
  bool cg_converged = true;
  double psnr = std::numeric_limits<double>::quiet_NaN();  // of x_k, when ground truth is given
};

struct SRResult {
  Image output;
  std::vector<IterationRecord> trace;
  std::vector<double> adapted_levels;
  DenoiserOverlay adapted;
  double init_psnr = std::numeric_limits<double>::quiet_NaN();
  double output_psnr = std::numeric_limits<double>::quiet_NaN();
  double final_constraint_residual = std::numeric_limits<double>::quiet_NaN();
  int cg_failures = 0;
};

inline DeltaSchedule make_schedule(const DegradationOperator& op, const IDBPConfig& cfg)
{
  return {op.scale, cfg.n_iters, cfg.delta_floor};
}

/// Super-resolves a single-channel LR image y = H x (+ noise).
/// x_0 = bicubic(y); for k = 1..K: z_k = P(x_{k-1}), x_k = D(z_k; sigma_e + delta_{k-1}).
/// Returns P(x_K) when sigma_e = 0, else x_K.
inline SRResult idbp_superresolve(const Image& y, const DegradationOperator& op, const DenoiserBank& bank,
                                  const IDBPConfig& cfg, const Image* ground_truth = nullptr)
{
  cfg.validate();
  op.validate();
  bank.validate();
  if (y.channels() != 1) {
    throw std::invalid_argument("idbp_superresolve: single-channel (luma) input required");
  }
  if (!y.all_finite()) {
    throw NumericalError("idbp_superresolve: input has non-finite samples");
  }
  const Extent hr{y.width() * op.scale, y.height() * op.scale};
  if (op.low_res_extent(hr) != y.extent()) {
    throw std::invalid_argument("idbp_superresolve: operator phase inconsistent with input size");
  }
  if (ground_truth != nullptr && (ground_truth->extent() != hr || ground_truth->channels() != 1)) {
    throw std::invalid_argument("idbp_superresolve: ground truth must be single-channel at s x input size");
  }
  const int crop_px = cfg.border_crop < 0 ? op.scale : cfg.border_crop;
  auto score = [&](const Image& x) {
    return ground_truth == nullptr ? std::numeric_limits<double>::quiet_NaN()
                                   : psnr(x, *ground_truth, PsnrChannel::Y, crop_px).value;
  };

  const DeltaSchedule sched = make_schedule(op, cfg);
  std::vector<double> adapt_levels;
  if (cfg.adapt) {
    adapt_levels = tail_levels(bank, sched, cfg.sigma_e, cfg.adapt->tail_count);
  }

  SRResult result;
  Image x = bicubic_resize(y, op.scale);
  result.init_psnr = score(x);
  bool adapted = false;
  for (int k = 1; k <= cfg.n_iters; ++k) {
    IterationRecord rec;
    rec.iter = k;
    rec.delta = delta_at(sched, k - 1);
    rec.sigma_total = cfg.sigma_e + rec.delta;

    const auto proj = project_onto_constraint(op, x, y, cfg.cg);
    rec.constraint_residual = proj.constraint_residual;
    rec.cg_iterations = proj.cg.iterations;
    rec.cg_converged = proj.cg.converged;
    if (!proj.cg.converged) {
      ++result.cg_failures;
    }

    Selection sel = select_denoiser(bank, {rec.sigma_total});
    if (cfg.adapt && !adapted &&
        std::find(adapt_levels.begin(), adapt_levels.end(), sel.level.sigma255) != adapt_levels.end()) {
      const Image& source = cfg.adapt_source ? *cfg.adapt_source : y;
      auto outcome = adapt_for_schedule(bank, sched, cfg.sigma_e, source, *cfg.adapt);
      result.adapted = std::move(outcome.overlay);
      result.adapted_levels = std::move(outcome.levels);
      adapted = true;
    }
    if (adapted) {
      sel = select_denoiser(bank, {rec.sigma_total}, &result.adapted);
    }
    rec.bank_level = sel.level.sigma255;
    rec.provenance = sel.provenance;

    x = denoise(*sel.net, proj.z);
    if (!x.all_finite()) {
      throw NumericalError("idbp_superresolve: denoiser produced non-finite values at iteration " +
                           std::to_string(k));
    }
    rec.psnr = score(x);
    result.trace.push_back(rec);
  }
  if (cfg.sigma_e == 0.0) {
    auto proj = project_onto_constraint(op, x, y, cfg.cg);
    if (!proj.cg.converged) {
      ++result.cg_failures;
    }
    result.final_constraint_residual = proj.constraint_residual;
    result.output = std::move(proj.z);
  } else {
    result.output = std::move(x);
  }
  result.output_psnr = score(result.output);
  return result;
}

struct ColorSRResult {
  Image output;  // RGB
  SRResult luma;
};

/// Luma through IDBP, chroma by bicubic upsampling.
inline ColorSRResult superresolve_color(const Image& y_rgb, const DegradationOperator& op, const DenoiserBank& bank,
                                        const IDBPConfig& cfg, const Image* ground_truth_rgb = nullptr)
{
  if (y_rgb.colorspace() != ColorSpace::RGB) {
    throw std::invalid_argument("superresolve_color: RGB input required");
  }
  const Image ycc = rgb_to_ycbcr(y_rgb);
  std::optional<Image> gt_luma;
  if (ground_truth_rgb != nullptr) {
    gt_luma = luma(*ground_truth_rgb);
  }
  ColorSRResult out;
  out.luma = idbp_superresolve(ycc.channel(0), op, bank, cfg, gt_luma ? &*gt_luma : nullptr);
  const Image cb = bicubic_resize(ycc.channel(1), op.scale);
  const Image cr = bicubic_resize(ycc.channel(2), op.scale);
  out.output = ycbcr_to_rgb(merge_planes(out.luma.output, cb, cr, ColorSpace::YCbCr));
  return out;
}

/// Shortest round-trip decimal; empty for missing values.
inline std::string csv_number(double v)
{
  if (std::isnan(v)) {
    return "";
  }
  if (std::isinf(v)) {
    return v > 0 ? "inf" : "-inf";
  }
  return format_level(v);
}

inline void write_trace_csv(const SRResult& r, std::ostream& out)
{
  out << "iter,delta,sigma_total,bank_level,provenance,constraint_residual,cg_iterations,psnr\n";
  for (const auto& t : r.trace) {
    out << t.iter << "," << csv_number(t.delta) << "," << csv_number(t.sigma_total) << "," << csv_number(t.bank_level)
        << "," << to_string(t.provenance) << "," << csv_number(t.constraint_residual) << "," << t.cg_iterations << ","
        << csv_number(t.psnr) << "\n";
  }
}

inline void write_trace_csv(const SRResult& r, const std::filesystem::path& path)
{
  std::ofstream out(path);
  if (!out) {
    throw InputError("cannot write '" + path.string() + "'");
  }
  write_trace_csv(r, out);
}

}  // namespace idbp
