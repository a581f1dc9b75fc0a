#pragma once

// Test-time fine-tuning of bank denoisers on patches of the low-resolution
// input itself.

#include <algorithm>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "idbp/denoiser_bank.hpp"
#include "idbp/error.hpp"
#include "idbp/image.hpp"
#include "idbp/nn.hpp"
#include "idbp/parallel.hpp"
#include "idbp/patch.hpp"
#include "idbp/schedule.hpp"

namespace idbp {

struct AdaptConfig {
  std::vector<int> patch_sizes{34, 40, 50};
  int batch = 32;
  int steps = 320;
  double learning_rate = 3e-4;
  double downscale_prob = 0.5;
  Rational downscale_factor{9, 10};
  double mirror_prob = 0.5;  // per axis, independently
  int tail_count = 2;        // how many of the smallest scheduled levels to fine-tune
  int heldout_patches = 200;
  int workers = 1;
  std::uint64_t seed = 0;

  void validate() const
  {
    if (patch_sizes.empty() || batch < 1 || steps < 1 || !(learning_rate > 0) || tail_count < 1 || workers < 1 ||
        heldout_patches < 1) {
      throw std::invalid_argument("AdaptConfig: invalid parameters (steps, batch and sizes must be positive)");
    }
    for (int s : patch_sizes) {
      if (s < 1) {
        throw std::invalid_argument("AdaptConfig: patch sizes must be positive");
      }
    }
    if (!(downscale_prob >= 0 && downscale_prob <= 1) || !(mirror_prob >= 0 && mirror_prob <= 1)) {
      throw std::invalid_argument("AdaptConfig: probabilities must lie in [0, 1]");
    }
    if (downscale_factor.num < 1 || downscale_factor.den < 1) {
      throw std::invalid_argument("AdaptConfig: downscale factor must be positive");
    }
  }
};

/// Augmenting patch sampler over one source image: optional downscale, two
/// independent mirror flips, one of four rotations, then a square crop of a
/// size drawn uniformly from those that fit.
class PatchSampler {
 public:
  PatchSampler(const Image& source, const AdaptConfig& cfg) : cfg_(cfg), full_(source)
  {
    cfg_.validate();
    if (source.channels() != 1 || !source.all_finite()) {
      throw std::invalid_argument("PatchSampler: source must be a finite single-channel image");
    }
    full_sizes_ = feasible(full_);
    if (full_sizes_.empty()) {
      throw InputError("adaptation source " + std::to_string(source.width()) + "x" + std::to_string(source.height()) +
                       " is smaller than every patch size");
    }
    if (cfg_.downscale_prob > 0) {
      small_ = bicubic_resize(full_, cfg_.downscale_factor);
      small_sizes_ = feasible(small_);
    }
  }

  [[nodiscard]] const std::vector<int>& sizes(bool downscaled) const
  {
    return downscaled && !small_sizes_.empty() ? small_sizes_ : full_sizes_;
  }

  Image operator()(std::mt19937_64& rng) const
  {
    // The downscale draw is always consumed so the stream does not depend on
    // feasibility. If nothing fits after downscaling, the full image is used.
    const bool down = std::bernoulli_distribution(cfg_.downscale_prob)(rng) && !small_sizes_.empty();
    Image img = down ? small_ : full_;
    if (std::bernoulli_distribution(cfg_.mirror_prob)(rng)) {
      img = mirror_vertical(img);
    }
    if (std::bernoulli_distribution(cfg_.mirror_prob)(rng)) {
      img = mirror_horizontal(img);
    }
    img = rotate90(img, std::uniform_int_distribution<int>(0, 3)(rng));
    const auto& choices = sizes(down);
    const int size = choices[std::uniform_int_distribution<std::size_t>(0, choices.size() - 1)(rng)];
    const int x0 = std::uniform_int_distribution<int>(0, img.width() - size)(rng);
    const int y0 = std::uniform_int_distribution<int>(0, img.height() - size)(rng);
    return crop(img, x0, y0, size, size);
  }

 private:
  [[nodiscard]] std::vector<int> feasible(const Image& img) const
  {
    std::vector<int> out;
    for (int s : cfg_.patch_sizes) {
      if (s <= std::min(img.width(), img.height())) {
        out.push_back(s);
      }
    }
    return out;
  }

  AdaptConfig cfg_;
  Image full_;
  Image small_;
  std::vector<int> full_sizes_;
  std::vector<int> small_sizes_;
};

inline Image sample_patch(const Image& source, const AdaptConfig& cfg, std::mt19937_64& rng)
{
  return PatchSampler(source, cfg)(rng);
}

/// Noisy input and residual target at the denoiser's own level.
inline nn::TrainBatch<float> make_batch(const PatchSampler& sampler, int batch, double sigma255, std::mt19937_64& rng)
{
  nn::TrainBatch<float> b;
  for (int i = 0; i < batch; ++i) {
    auto pair = make_noisy_pair(sampler(rng), sigma255, rng);
    b.inputs.push_back(std::move(pair.noisy));
    b.targets.push_back(std::move(pair.noise));
  }
  return b;
}

/// Warm-started copy of `net` trained on patches of `source`. `net` itself is
/// not touched.
inline Denoiser fine_tune(const Denoiser& net, const Image& source, NoiseLevel level, const AdaptConfig& cfg,
                          std::uint64_t seed, nn::TrainReport* report = nullptr)
{
  cfg.validate();
  const PatchSampler sampler(source, cfg);
  Denoiser tuned = net;
  auto adam = nn::make_adam(tuned, cfg.learning_rate);
  auto tr = nn::train(
      tuned, [&](std::mt19937_64& rng) { return make_batch(sampler, cfg.batch, level.sigma255, rng); }, cfg.steps, adam,
      seed);
  if (report != nullptr) {
    *report = std::move(tr);
  }
  return tuned;
}

/// Self-denoising score on image-specific patches drawn from a stream disjoint
/// from any training seed.
inline DenoiseScore self_denoise_score(const Denoiser& net, const Image& source, NoiseLevel level,
                                       const AdaptConfig& cfg, std::uint64_t seed)
{
  const PatchSampler sampler(source, cfg);
  std::mt19937_64 rng(mix_seed(seed, 0xE7A1));
  std::vector<Image> patches;
  for (int i = 0; i < cfg.heldout_patches; ++i) {
    patches.push_back(sampler(rng));
  }
  return score_denoiser(net, patches, level.sigma255, mix_seed(seed, 0xE7A2));
}

struct AdaptOutcome {
  DenoiserOverlay overlay;
  std::vector<double> levels;
};

/// Fine-tunes the tail levels of the schedule (two, or one when the floor
/// binds). Level i of the tail uses seed mix_seed(cfg.seed, i).
inline AdaptOutcome adapt_for_schedule(const DenoiserBank& bank, const DeltaSchedule& sched, double sigma_e255,
                                       const Image& source, const AdaptConfig& cfg)
{
  cfg.validate();
  AdaptOutcome out;
  out.levels = tail_levels(bank, sched, sigma_e255, cfg.tail_count);
  std::vector<Denoiser> tuned(out.levels.size());
  parallel_for(out.levels.size(), cfg.workers, [&](std::size_t i) {
    const auto& entry = bank.entry(bank.nearest_index(out.levels[i]));
    tuned[i] = fine_tune(entry.net, source, entry.level, cfg, mix_seed(cfg.seed, i));
  });
  for (std::size_t i = 0; i < out.levels.size(); ++i) {
    out.overlay.emplace(out.levels[i], std::move(tuned[i]));
  }
  return out;
}

}  // namespace idbp
