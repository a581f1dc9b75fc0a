#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "idbp/denoiser_bank.hpp"

using namespace idbp;
namespace fs = std::filesystem;

namespace {

DenoiserBank synthetic_bank(const std::vector<double>& levels)
{
  std::vector<BankEntry> entries;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    BankEntry e;
    e.level = {levels[i]};
    e.net = make_denoiser(100 + i, 0.1);
    e.meta.steps = static_cast<int>(i);
    e.meta.seed = 7 * i;
    entries.push_back(std::move(e));
  }
  return DenoiserBank(std::move(entries));
}

fs::path fresh_dir(const std::string& name)
{
  const auto dir = fs::temp_directory_path() / "idbp_test_bank" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p)
{
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double rms(const Image& a, const Image& b)
{
  double ss = 0;
  for (std::size_t i = 0; i < a.samples().size(); ++i) {
    ss += std::pow(a.samples()[i] - b.samples()[i], 2);
  }
  return std::sqrt(ss / static_cast<double>(a.samples().size()));
}

}  // namespace

TEST(Levels, Formatting)
{
  EXPECT_EQ(format_level(2), "2");
  EXPECT_EQ(format_level(2.5), "2.5");
  EXPECT_EQ(weight_filename(15), "sigma_15.idbpnn");
  EXPECT_EQ(OfflineTrainConfig::default_levels().size(), 25u);
  EXPECT_EQ(OfflineTrainConfig::default_levels().back(), 50.0);
}

TEST(Denoise, ZeroNetworkIsIdentity)
{
  const Denoiser net = make_denoiser(1, 0.0);
  Image img = Image::gray(9, 7);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-0.2, 1.2);
  for (double& v : img.samples()) {
    v = u(rng);
  }
  const Image out = denoise(net, img);
  // Not clamped: values outside [0, 1] pass through (up to float rounding).
  for (std::size_t i = 0; i < img.samples().size(); ++i) {
    EXPECT_NEAR(out.samples()[i], img.samples()[i], 1e-7);
  }
  EXPECT_THROW(denoise(net, Image(4, 4, ColorSpace::RGB)), std::invalid_argument);
}

TEST(Bank, Invariants)
{
  EXPECT_THROW(synthetic_bank({25}), std::invalid_argument);
  EXPECT_THROW(synthetic_bank({10, 10}), std::invalid_argument);
  EXPECT_THROW(synthetic_bank({10, 5}), std::invalid_argument);
  EXPECT_THROW(synthetic_bank({10, 55}), std::invalid_argument);
  EXPECT_NO_THROW(synthetic_bank({0, 50}));
}

TEST(Select, Rules)
{
  const auto bank = synthetic_bank({2, 4, 6, 8, 10, 12, 14});
  EXPECT_EQ(select_denoiser(bank, {8}).level.sigma255, 8);
  EXPECT_EQ(select_denoiser(bank, {8}).net, &bank.entry(3).net);
  EXPECT_EQ(select_denoiser(bank, {0.5}).level.sigma255, 2);
  EXPECT_EQ(select_denoiser(bank, {60}).level.sigma255, 14);
  EXPECT_EQ(select_denoiser(bank, {11}).level.sigma255, 12);
  EXPECT_EQ(select_denoiser(bank, {10.9}).level.sigma255, 10);
  EXPECT_EQ(select_denoiser(bank, {11.1}).level.sigma255, 12);
}

TEST(Select, MonotoneAndTotal)
{
  const auto bank = synthetic_bank({2, 4, 7, 10, 15, 25, 40, 50});
  double prev = -1;
  for (double s = 0; s <= 80; s += 0.05) {
    const auto sel = select_denoiser(bank, {s});
    ASSERT_NE(sel.net, nullptr);
    ASSERT_GE(sel.level.sigma255, prev);
    prev = sel.level.sigma255;
  }
}

TEST(Select, OverlayReplacesOnlyItsLevel)
{
  const auto bank = synthetic_bank({5, 15, 25});
  DenoiserOverlay overlay;
  overlay.emplace(15.0, make_denoiser(9));
  const auto hit = select_denoiser(bank, {14}, &overlay);
  EXPECT_EQ(hit.provenance, Provenance::FineTuned);
  EXPECT_EQ(hit.net, &overlay.at(15.0));
  const auto miss = select_denoiser(bank, {24}, &overlay);
  EXPECT_EQ(miss.provenance, Provenance::Offline);
  EXPECT_EQ(miss.net, &bank.entry(2).net);
}

TEST(Persistence, RoundTripBitExact)
{
  const auto bank = synthetic_bank({2, 4.5, 25});
  const auto dir = fresh_dir("roundtrip");
  save_bank(bank, dir);
  const auto back = load_bank(dir);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.entry(i).level, bank.entry(i).level);
    EXPECT_EQ(back.entry(i).net.layers, bank.entry(i).net.layers);
    EXPECT_EQ(back.entry(i).meta.steps, bank.entry(i).meta.steps);
    EXPECT_EQ(back.entry(i).meta.seed, bank.entry(i).meta.seed);
  }
  EXPECT_EQ(bank_fingerprint(back), bank_fingerprint(bank));
  EXPECT_NE(bank_fingerprint(back), bank_fingerprint(synthetic_bank({2, 4.5, 26})));
}

TEST(Persistence, CorruptManifestsRejected)
{
  const auto bank = synthetic_bank({5, 15, 25});
  const auto dir = fresh_dir("corrupt");
  save_bank(bank, dir);
  auto write_manifest = [&](const std::string& text) { std::ofstream(dir / kManifestName) << text; };

  write_manifest("5 sigma_5.idbpnn\n15 sigma_15.idbpnn\n15 sigma_15.idbpnn\n");
  EXPECT_THROW(load_bank(dir), InputError);
  write_manifest("15 sigma_15.idbpnn\n5 sigma_5.idbpnn\n");
  EXPECT_THROW(load_bank(dir), InputError);
  write_manifest("5 sigma_5.idbpnn\n");
  EXPECT_THROW(load_bank(dir), InputError);
  write_manifest("5 sigma_5.idbpnn\n15 missing.idbpnn\n");
  EXPECT_THROW(load_bank(dir), InputError);
  write_manifest("5 sigma_5.idbpnn extra\n15 sigma_15.idbpnn\n");
  EXPECT_THROW(load_bank(dir), InputError);
  // Level in the manifest disagrees with the sidecar of the file it names.
  write_manifest("5 sigma_5.idbpnn\n16 sigma_15.idbpnn\n");
  EXPECT_THROW(load_bank(dir), InputError);

  write_manifest("# comment\n5 sigma_5.idbpnn\n\n25 sigma_25.idbpnn\n");
  EXPECT_EQ(load_bank(dir).size(), 2u);
  EXPECT_THROW(load_bank(dir / "nope"), InputError);
}

TEST(Corpus, ErrorsAndSplit)
{
  EXPECT_THROW(list_pngs("/nonexistent/dir"), InputError);
  const auto empty = fresh_dir("empty_corpus");
  OfflineTrainConfig cfg;
  EXPECT_THROW(load_corpus(empty, cfg), InputError);

  const auto corpus = load_corpus(IDBP_TEST_DATA "/train", cfg);
  EXPECT_EQ(corpus.train.size(), corpus.heldout.size());
  EXPECT_GE(corpus.train.size(), 5u);
  for (std::size_t i = 0; i < corpus.train.size(); ++i) {
    EXPECT_EQ(corpus.train[i].width(), corpus.heldout[i].width());
    EXPECT_GE(corpus.heldout[i].height(), cfg.patch_size);
  }
}

TEST(NoisyPair, ExactResidualAndStatistics)
{
  std::mt19937_64 rng(3);
  const Image clean = Image::gray(64, 64, 0.4);
  const auto p = make_noisy_pair(clean, 25, rng);
  double sum = 0, ss = 0;
  for (std::size_t i = 0; i < p.noise.data.size(); ++i) {
    ASSERT_EQ(p.noisy.data[i] - 0.4f, p.noise.data[i]);
    sum += p.noise.data[i];
    ss += static_cast<double>(p.noise.data[i]) * p.noise.data[i];
  }
  const double n = static_cast<double>(p.noise.data.size());
  EXPECT_NEAR(sum / n, 0.0, 4 * 25.0 / 255 / 64);
  EXPECT_NEAR(std::sqrt(ss / n), 25.0 / 255, 0.05 * 25.0 / 255);

  const auto zero = make_noisy_pair(clean, 0, rng);
  for (float v : zero.noise.data) {
    ASSERT_EQ(v, 0.0f);
  }
  EXPECT_THROW(make_noisy_pair(clean, -1, rng), std::invalid_argument);
}

TEST(Training, SameSeedSameFilesAnyWorkerCount)
{
  OfflineTrainConfig cfg;
  cfg.steps = 3;
  cfg.batch = 4;
  cfg.heldout_patches = 4;
  cfg.workers = 1;
  const auto a = train_bank({5, 25}, IDBP_TEST_DATA "/train", cfg, 17);
  cfg.workers = 2;
  const auto b = train_bank({5, 25}, IDBP_TEST_DATA "/train", cfg, 17);
  const auto c = train_bank({5, 25}, IDBP_TEST_DATA "/train", cfg, 18);
  const auto da = fresh_dir("det_a"), db = fresh_dir("det_b");
  save_bank(a.bank, da);
  save_bank(b.bank, db);
  for (const auto& name : {"manifest.txt", "sigma_5.idbpnn", "sigma_25.idbpnn", "sigma_25.idbpnn.meta"}) {
    EXPECT_EQ(slurp(da / name), slurp(db / name)) << name;
  }
  EXPECT_NE(bank_fingerprint(a.bank), bank_fingerprint(c.bank));
  EXPECT_THROW(train_bank({5}, IDBP_TEST_DATA "/train", cfg, 1), std::invalid_argument);
}

TEST(Training, Sigma25DenoiserLearnsConstantsAndNoise)
{
  // Short run of the desk recipe at a single level.
  const OfflineTrainConfig cfg = OfflineTrainConfig::desk();
  const auto corpus = load_corpus(IDBP_TEST_DATA "/train", cfg);
  LevelReport report;
  const BankEntry e = train_level(corpus, 25, cfg, 123, &report);
  EXPECT_EQ(report.skipped_steps, 0);
  EXPECT_GE(report.heldout.gain(), 3.0);

  const Image flat = Image::gray(48, 48, 0.5);
  EXPECT_LE(rms(denoise(e.net, flat), flat), 2.0 / 255);

  std::mt19937_64 rng(4);
  const auto pair = make_noisy_pair(flat, 25, rng);
  const Image noisy = nn::image_from_tensor(pair.noisy);
  EXPECT_LE(rms(denoise(e.net, noisy), flat), 0.4 * rms(noisy, flat));
}
