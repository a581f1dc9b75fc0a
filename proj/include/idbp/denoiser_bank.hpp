#pragma once

// Noise-level indexed bank of residual CNN denoisers: inference, nearest-level
// selection, offline training from a grayscale corpus, and on-disk layout.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "idbp/error.hpp"
#include "idbp/image.hpp"
#include "idbp/nn.hpp"
#include "idbp/parallel.hpp"
#include "idbp/patch.hpp"
#include "idbp/png_io.hpp"

namespace idbp {

inline constexpr double kMaxBankSigma = 50.0;

/// Noise standard deviation on the 0-255 scale.
struct NoiseLevel {
  double sigma255 = 0.0;

  [[nodiscard]] double unit() const { return sigma255 / 255.0; }
  friend auto operator<=>(const NoiseLevel&, const NoiseLevel&) = default;
};

/// Shortest decimal that round-trips ("2", "2.5").
inline std::string format_level(double sigma255)
{
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, sigma255);
  return std::string(buf, end);
}

using Denoiser = nn::ConvNet<float>;

enum class Provenance { Offline, FineTuned };

inline const char* to_string(Provenance p) { return p == Provenance::Offline ? "offline" : "fine_tuned"; }

/// Channel widths of the bank architecture (3x3 kernels, ReLU in between).
inline const std::vector<int>& denoiser_widths()
{
  static const std::vector<int> widths{1, 32, 32, 32, 32, 32, 1};
  return widths;
}

/// He-initialized bank architecture. The last layer is scaled by
/// `output_gain` so a fresh network starts close to the identity denoiser.
inline Denoiser make_denoiser(std::uint64_t seed, double output_gain = 1.0)
{
  Denoiser net = nn::make_plain_cnn<float>(denoiser_widths(), seed);
  auto& last = std::get<nn::Conv2d<float>>(net.layers.back());
  for (float& w : last.weight) {
    w = static_cast<float>(w * output_gain);
  }
  return net;
}

/// Residual inference: input - net(input). Not clamped.
inline Image denoise(const Denoiser& net, const Image& img)
{
  if (img.channels() != 1) {
    throw std::invalid_argument("denoise: single-channel image required");
  }
  const auto out = net.forward(nn::tensor_from_image<float>(img));
  Image result = img;
  auto s = result.samples();
  if (out.size() != s.size()) {
    throw std::invalid_argument("denoise: network must map one channel to one channel");
  }
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = net.residual ? s[i] - static_cast<double>(out.data[i]) : static_cast<double>(out.data[i]);
  }
  return result;
}

struct EntryMeta {
  int steps = 0;
  std::uint64_t seed = 0;
  double heldout_psnr_noisy = std::nan("");
  double heldout_psnr_denoised = std::nan("");
};

struct BankEntry {
  NoiseLevel level;
  Denoiser net;
  Provenance provenance = Provenance::Offline;
  EntryMeta meta;
};

class DenoiserBank {
 public:
  DenoiserBank() = default;
  explicit DenoiserBank(std::vector<BankEntry> entries) : entries_(std::move(entries)) { validate(); }

  void validate() const
  {
    if (entries_.size() < 2) {
      throw std::invalid_argument("DenoiserBank: at least 2 levels required");
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const double s = entries_[i].level.sigma255;
      if (!(s >= 0.0 && s <= kMaxBankSigma)) {
        throw std::invalid_argument("DenoiserBank: level " + format_level(s) + " outside [0, 50]");
      }
      if (i > 0 && !(entries_[i - 1].level.sigma255 < s)) {
        throw std::invalid_argument("DenoiserBank: levels must be strictly increasing (" +
                                    format_level(entries_[i - 1].level.sigma255) + " then " + format_level(s) + ")");
      }
      entries_[i].net.validate();
      if (entries_[i].net.input_channels() != 1) {
        throw std::invalid_argument("DenoiserBank: denoisers must be single-channel");
      }
    }
  }

  [[nodiscard]] const std::vector<BankEntry>& entries() const { return entries_; }
  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] const BankEntry& entry(std::size_t i) const { return entries_.at(i); }

  [[nodiscard]] std::vector<double> levels() const
  {
    std::vector<double> out;
    for (const auto& e : entries_) {
      out.push_back(e.level.sigma255);
    }
    return out;
  }

  /// Index of the level nearest to sigma255; ties go to the higher level.
  [[nodiscard]] std::size_t nearest_index(double sigma255) const
  {
    std::size_t best = 0;
    double best_d = std::abs(entries_[0].level.sigma255 - sigma255);
    for (std::size_t i = 1; i < entries_.size(); ++i) {
      const double d = std::abs(entries_[i].level.sigma255 - sigma255);
      if (d <= best_d) {
        best = i;
        best_d = d;
      }
    }
    return best;
  }

 private:
  std::vector<BankEntry> entries_;
};

/// Fine-tuned replacements keyed by bank level.
using DenoiserOverlay = std::map<double, Denoiser>;

struct Selection {
  const Denoiser* net = nullptr;
  NoiseLevel level;
  Provenance provenance = Provenance::Offline;
};

/// Nearest bank level (ties upward); the overlay, when given, supplies the
/// network for that level if it has one.
inline Selection select_denoiser(const DenoiserBank& bank, NoiseLevel sigma, const DenoiserOverlay* overlay = nullptr)
{
  if (bank.size() == 0) {
    throw std::invalid_argument("select_denoiser: empty bank");
  }
  const BankEntry& e = bank.entry(bank.nearest_index(sigma.sigma255));
  Selection s{&e.net, e.level, e.provenance};
  if (overlay != nullptr) {
    if (auto it = overlay->find(e.level.sigma255); it != overlay->end()) {
      s.net = &it->second;
      s.provenance = Provenance::FineTuned;
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Offline training

struct OfflineTrainConfig {
  int patch_size = 40;
  int steps = 2000;
  int batch = 32;
  double learning_rate = 3e-4;
  /// Bottom fraction of every corpus image reserved for held-out evaluation.
  double heldout_fraction = 0.2;
  int heldout_patches = 128;
  /// Scale on the He-initialized last layer; small values start near identity.
  double output_gain = 0.1;
  int workers = 1;

  static std::vector<double> default_levels()
  {
    std::vector<double> v;
    for (int s = 2; s <= 50; s += 2) {
      v.push_back(s);
    }
    return v;
  }
  static std::vector<double> desk_levels() { return {2, 4, 7, 10, 15, 25, 40, 50}; }

  static OfflineTrainConfig desk()
  {
    OfflineTrainConfig c;
    c.steps = 300;
    return c;
  }

  void validate() const
  {
    if (patch_size < 8 || steps < 1 || batch < 1 || !(learning_rate > 0) || heldout_patches < 1 ||
        !(heldout_fraction > 0 && heldout_fraction < 1) || !(output_gain >= 0) || workers < 1) {
      throw std::invalid_argument("OfflineTrainConfig: invalid parameters");
    }
  }
};

/// Grayscale training corpus split by rows into training and held-out parts.
struct Corpus {
  std::vector<std::string> names;
  std::vector<Image> train;
  std::vector<Image> heldout;
};

inline std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir)
{
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) {
    throw InputError("not a directory: '" + dir.string() + "'");
  }
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (e.is_regular_file() && ext == ".png") {
      out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline Corpus load_corpus(const std::filesystem::path& dir, const OfflineTrainConfig& cfg)
{
  Corpus c;
  for (const auto& p : list_pngs(dir)) {
    const Image img = luma(load_png(p));
    const int held = static_cast<int>(std::lround(img.height() * cfg.heldout_fraction));
    const int kept = img.height() - held;
    if (img.width() < cfg.patch_size || kept < cfg.patch_size || held < cfg.patch_size) {
      continue;
    }
    c.names.push_back(p.filename().string());
    c.train.push_back(crop(img, 0, 0, img.width(), kept));
    c.heldout.push_back(crop(img, 0, kept, img.width(), held));
  }
  if (c.train.empty()) {
    throw InputError("corpus '" + dir.string() + "' has no usable PNG images (need at least " +
                     std::to_string(cfg.patch_size) + " px in each region)");
  }
  return c;
}

/// Uniform image, uniform position, uniform dihedral transform.
inline Image random_patch(const std::vector<Image>& images, int size, std::mt19937_64& rng)
{
  const auto& img = images[std::uniform_int_distribution<std::size_t>(0, images.size() - 1)(rng)];
  const int x0 = std::uniform_int_distribution<int>(0, img.width() - size)(rng);
  const int y0 = std::uniform_int_distribution<int>(0, img.height() - size)(rng);
  Image p = crop(img, x0, y0, size, size);
  if (std::bernoulli_distribution(0.5)(rng)) {
    p = mirror_horizontal(p);
  }
  return rotate90(p, std::uniform_int_distribution<int>(0, 3)(rng));
}

struct DenoiseScore {
  double psnr_noisy = 0.0;
  double psnr_denoised = 0.0;
  [[nodiscard]] double gain() const { return psnr_denoised - psnr_noisy; }
};

/// Pooled-MSE PSNR of noisy and denoised versions of the given clean patches.
/// Noise comes from `seed` so different networks see identical inputs.
inline DenoiseScore score_denoiser(const Denoiser& net, const std::vector<Image>& clean, double sigma255,
                                   std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  double se_noisy = 0.0, se_denoised = 0.0;
  std::size_t n = 0;
  for (const auto& patch : clean) {
    const auto pair = make_noisy_pair(patch, sigma255, rng);
    const Image noisy = nn::image_from_tensor(pair.noisy);
    const Image out = denoise(net, noisy);
    auto c = patch.samples(), a = noisy.samples(), b = out.samples();
    for (std::size_t i = 0; i < c.size(); ++i) {
      se_noisy += (a[i] - c[i]) * (a[i] - c[i]);
      se_denoised += (b[i] - c[i]) * (b[i] - c[i]);
    }
    n += c.size();
  }
  auto to_db = [n](double se) {
    return se == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(static_cast<double>(n) / se);
  };
  return {to_db(se_noisy), to_db(se_denoised)};
}

inline std::vector<Image> heldout_patches(const Corpus& corpus, const OfflineTrainConfig& cfg, std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  std::vector<Image> out;
  for (int i = 0; i < cfg.heldout_patches; ++i) {
    out.push_back(random_patch(corpus.heldout, cfg.patch_size, rng));
  }
  return out;
}

struct LevelReport {
  double sigma255 = 0.0;
  DenoiseScore heldout;
  double final_loss = 0.0;
  int skipped_steps = 0;
};

/// Trains one level from scratch. Deterministic in `seed`.
inline BankEntry train_level(const Corpus& corpus, double sigma255, const OfflineTrainConfig& cfg, std::uint64_t seed,
                             LevelReport* report = nullptr)
{
  cfg.validate();
  BankEntry e;
  e.level = {sigma255};
  e.net = make_denoiser(mix_seed(seed, 0), cfg.output_gain);
  e.meta.steps = cfg.steps;
  e.meta.seed = seed;
  auto adam = nn::make_adam(e.net, cfg.learning_rate);
  auto batches = [&](std::mt19937_64& rng) {
    nn::TrainBatch<float> b;
    for (int i = 0; i < cfg.batch; ++i) {
      auto pair = make_noisy_pair(random_patch(corpus.train, cfg.patch_size, rng), sigma255, rng);
      b.inputs.push_back(std::move(pair.noisy));
      b.targets.push_back(std::move(pair.noise));
    }
    return b;
  };
  const auto tr = nn::train(e.net, batches, cfg.steps, adam, mix_seed(seed, 1));
  // The held-out set depends only on the corpus and config, never on the level seed.
  const auto held = heldout_patches(corpus, cfg, 0x5eedULL);
  const auto score = score_denoiser(e.net, held, sigma255, mix_seed(0x5eedULL, static_cast<std::uint64_t>(sigma255 * 1000)));
  e.meta.heldout_psnr_noisy = score.psnr_noisy;
  e.meta.heldout_psnr_denoised = score.psnr_denoised;
  if (report != nullptr) {
    report->sigma255 = sigma255;
    report->heldout = score;
    report->final_loss = tr.loss_trace.back();
    report->skipped_steps = tr.skipped_steps;
  }
  return e;
}

struct TrainedBank {
  DenoiserBank bank;
  std::vector<LevelReport> reports;
};

/// Trains every level (in parallel when cfg.workers > 1; results do not depend
/// on the worker count). Level i uses seed mix_seed(seed, i).
inline TrainedBank train_bank(const std::vector<double>& levels, const std::filesystem::path& corpus_dir,
                              const OfflineTrainConfig& cfg, std::uint64_t seed,
                              const std::function<void(const LevelReport&)>& on_level = {})
{
  cfg.validate();
  if (levels.size() < 2) {
    throw std::invalid_argument("train_bank: at least 2 levels required");
  }
  const Corpus corpus = load_corpus(corpus_dir, cfg);
  std::vector<BankEntry> entries(levels.size());
  std::vector<LevelReport> reports(levels.size());
  std::mutex report_mutex;
  parallel_for(levels.size(), cfg.workers, [&](std::size_t i) {
    entries[i] = train_level(corpus, levels[i], cfg, mix_seed(seed, i), &reports[i]);
    if (on_level) {
      std::lock_guard lock(report_mutex);
      on_level(reports[i]);
    }
  });
  return {DenoiserBank(std::move(entries)), std::move(reports)};
}

// ---------------------------------------------------------------------------
// Persistence: <dir>/manifest.txt with "sigma255 filename" lines, one weight
// file per level plus a key=value sidecar (<file>.meta).

inline constexpr const char* kManifestName = "manifest.txt";

inline std::string weight_filename(double sigma255) { return "sigma_" + format_level(sigma255) + ".idbpnn"; }

inline void save_bank(const DenoiserBank& bank, const std::filesystem::path& dir)
{
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / kManifestName);
  if (!manifest) {
    throw InputError("cannot write bank manifest in '" + dir.string() + "'");
  }
  for (const auto& e : bank.entries()) {
    const std::string file = weight_filename(e.level.sigma255);
    nn::save_weights(e.net, dir / file);
    std::ofstream meta(dir / (file + ".meta"));
    meta << "sigma255=" << format_level(e.level.sigma255) << "\n"
         << "steps=" << e.meta.steps << "\n"
         << "seed=" << e.meta.seed << "\n"
         << "provenance=" << to_string(e.provenance) << "\n"
         << "heldout_psnr_noisy=" << format_level(e.meta.heldout_psnr_noisy) << "\n"
         << "heldout_psnr_denoised=" << format_level(e.meta.heldout_psnr_denoised) << "\n";
    manifest << format_level(e.level.sigma255) << " " << file << "\n";
  }
}

namespace detail {

inline double parse_double(const std::string& s, const std::string& what)
{
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw InputError(what + ": cannot parse number '" + s + "'");
  }
  return v;
}

inline std::map<std::string, std::string> read_key_values(const std::filesystem::path& path)
{
  std::ifstream in(path);
  if (!in) {
    throw InputError("cannot open '" + path.string() + "'");
  }
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (line.empty() || line[0] == '#' || eq == std::string::npos) {
      continue;
    }
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace detail

inline DenoiserBank load_bank(const std::filesystem::path& dir)
{
  std::ifstream manifest(dir / kManifestName);
  if (!manifest) {
    throw InputError("bank manifest '" + (dir / kManifestName).string() + "' not found");
  }
  std::vector<BankEntry> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') {
      continue;
    }
    std::istringstream ls(line);
    std::string level_text, file, extra;
    if (!(ls >> level_text >> file) || (ls >> extra)) {
      throw InputError("bank manifest line " + std::to_string(lineno) + ": expected 'sigma255 filename'");
    }
    BankEntry e;
    e.level = {detail::parse_double(level_text, "bank manifest line " + std::to_string(lineno))};
    if (!entries.empty() && !(entries.back().level.sigma255 < e.level.sigma255)) {
      throw InputError("bank manifest line " + std::to_string(lineno) + ": level " + level_text +
                       (entries.back().level.sigma255 == e.level.sigma255 ? " is duplicated" : " is out of order"));
    }
    e.net = nn::load_weights(dir / file);
    const auto meta_path = dir / (file + ".meta");
    if (std::filesystem::exists(meta_path)) {
      const auto kv = detail::read_key_values(meta_path);
      if (auto it = kv.find("sigma255"); it != kv.end() &&
                                          detail::parse_double(it->second, meta_path.string()) != e.level.sigma255) {
        throw InputError("'" + meta_path.string() + "' level does not match the manifest");
      }
      if (auto it = kv.find("steps"); it != kv.end()) {
        e.meta.steps = std::stoi(it->second);
      }
      if (auto it = kv.find("seed"); it != kv.end()) {
        e.meta.seed = std::stoull(it->second);
      }
      if (auto it = kv.find("provenance"); it != kv.end() && it->second == "fine_tuned") {
        e.provenance = Provenance::FineTuned;
      }
      if (auto it = kv.find("heldout_psnr_noisy"); it != kv.end()) {
        e.meta.heldout_psnr_noisy = std::strtod(it->second.c_str(), nullptr);
      }
      if (auto it = kv.find("heldout_psnr_denoised"); it != kv.end()) {
        e.meta.heldout_psnr_denoised = std::strtod(it->second.c_str(), nullptr);
      }
    }
    entries.push_back(std::move(e));
  }
  try {
    return DenoiserBank(std::move(entries));
  } catch (const std::invalid_argument& ex) {
    throw InputError("bank '" + dir.string() + "': " + ex.what());
  }
}

/// FNV-1a over levels and serialized weights; identifies a bank in run records.
inline std::uint64_t bank_fingerprint(const DenoiserBank& bank)
{
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const std::string& bytes) {
    for (unsigned char c : bytes) {
      h = (h ^ c) * 1099511628211ULL;
    }
  };
  for (const auto& e : bank.entries()) {
    feed(format_level(e.level.sigma255));
    std::ostringstream os(std::ios::binary);
    nn::write_weights(e.net, os);
    feed(os.str());
  }
  return h;
}

}  // namespace idbp
