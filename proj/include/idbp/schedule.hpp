#pragma once

// Geometric schedule of the artificial noise level delta used to pick the
// denoiser at every iteration.

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "idbp/denoiser_bank.hpp"

namespace idbp {

/// delta_k = s * 12^(1 - k/(K-1)), k = 0..K-1, optionally floored.
struct DeltaSchedule {
  int scale = 2;
  int n_iters = 30;
  std::optional<double> floor;

  void validate() const
  {
    if (scale < 1 || n_iters < 1) {
      throw std::invalid_argument("DeltaSchedule: scale and n_iters must be >= 1");
    }
    if (floor && !(*floor >= 0.0)) {
      throw std::invalid_argument("DeltaSchedule: floor must be >= 0");
    }
  }
};

inline double delta_at(const DeltaSchedule& sched, int k)
{
  sched.validate();
  if (k < 0 || k >= sched.n_iters) {
    throw std::out_of_range("delta_at: index " + std::to_string(k) + " outside [0, " + std::to_string(sched.n_iters) +
                            ")");
  }
  const double s = sched.scale;
  // Written so both endpoints are exact: 12^1 and 12^0.
  const double t = sched.n_iters == 1 ? 0.0 : static_cast<double>(k) / (sched.n_iters - 1);
  const double d = s * std::pow(12.0, 1.0 - t);
  return sched.floor ? std::max(d, *sched.floor) : d;
}

inline std::vector<double> schedule_values(const DeltaSchedule& sched)
{
  std::vector<double> v;
  for (int k = 0; k < sched.n_iters; ++k) {
    v.push_back(delta_at(sched, k));
  }
  return v;
}

/// First k with delta_k clamped by the floor, if any.
inline std::optional<int> first_floor_index(const DeltaSchedule& sched)
{
  if (!sched.floor) {
    return std::nullopt;
  }
  DeltaSchedule raw = sched;
  raw.floor.reset();
  for (int k = 0; k < sched.n_iters; ++k) {
    if (delta_at(raw, k) <= *sched.floor) {
      return k;
    }
  }
  return std::nullopt;
}

/// Bank level chosen at every iteration for total noise sigma_e + delta_k.
inline std::vector<double> selected_levels(const DenoiserBank& bank, const DeltaSchedule& sched, double sigma_e255)
{
  std::vector<double> out;
  for (int k = 0; k < sched.n_iters; ++k) {
    out.push_back(select_denoiser(bank, {sigma_e255 + delta_at(sched, k)}).level.sigma255);
  }
  return out;
}

/// The `count` smallest distinct levels in the selection sequence, ascending.
/// With a binding floor the tail is the single level used once it binds.
inline std::vector<double> tail_levels(const DenoiserBank& bank, const DeltaSchedule& sched, double sigma_e255,
                                       int count = 2)
{
  auto levels = selected_levels(bank, sched, sigma_e255);
  if (first_floor_index(sched)) {
    return {levels.back()};
  }
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  if (static_cast<int>(levels.size()) > count) {
    levels.resize(static_cast<std::size_t>(count));
  }
  return levels;
}

}  // namespace idbp
