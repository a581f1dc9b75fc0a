// idbp: command-line front end (train-bank, superresolve, benchmark, selftest).

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "idbp/bench.hpp"
#include "idbp/config.hpp"
#include "idbp/denoiser_bank.hpp"
#include "idbp/error.hpp"
#include "idbp/idbp.hpp"
#include "idbp/png_io.hpp"
#include "idbp/selftest.hpp"

namespace fs = std::filesystem;
using namespace idbp;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvariant = 1;
constexpr int kExitInput = 2;

/// Flag values as given on the command line, keyed by config name.
struct Overrides {
  std::optional<std::string> config;
  std::map<std::string, std::string> values;
  bool ia = false;
};

void add_common(CLI::App* app, Overrides& o, const std::vector<std::string>& keys)
{
  app->add_option("--config", o.config, "key=value config file; flags override it");
  auto flag = [&](const std::string& key, const std::string& name, const std::string& help) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      return;
    }
    app->add_option_function<std::string>(name, [&o, key](const std::string& v) { o.values[key] = v; }, help);
  };
  flag("scale", "--scale", "integer scale factor s");
  flag("kernel", "--kernel", "bicubic | gaussian | gaussian:SIZE,SIGMA | identity | file:PATH");
  flag("recon_kernel", "--recon-kernel", "kernel assumed for reconstruction (benchmark 'custom' protocol)");
  flag("sigma_e", "--sigma-e", "observation noise level (0-255 scale)");
  flag("iters", "--iters", "IDBP iterations");
  flag("delta_floor", "--delta-floor", "lower bound on delta (0-255 scale), or none");
  flag("bank", "--bank", "denoiser bank directory");
  flag("seed", "--seed", "master seed");
  flag("out", "--out", "output directory");
  flag("workers", "--workers", "worker threads (0 = hardware threads)");
  flag("protocols", "--protocols", "comma-separated benchmark protocols");
  flag("ia_steps", "--ia-steps", "Adam steps per adapted denoiser");
  flag("profile", "--profile", "bank profile: desk (8 levels) or default (25 levels)");
  flag("levels", "--levels", "comma-separated bank levels (0-255 scale)");
  flag("train_steps", "--steps", "Adam steps per bank level (0 = profile default)");
  if (std::find(keys.begin(), keys.end(), "ia") != keys.end()) {
    app->add_flag("--ia", o.ia, "enable image-adaptive fine-tuning");
  }
}

RunConfig resolve(const Overrides& o)
{
  RunConfig cfg;
  if (o.config) {
    cfg.load_file(*o.config);
  }
  for (const auto& [k, v] : o.values) {
    cfg.set(k, v);
  }
  if (o.ia) {
    cfg.ia = true;
  }
  return cfg;
}

void write_text(const fs::path& path, const std::string& text)
{
  std::ofstream out(path);
  if (!out) {
    throw InputError("cannot write '" + path.string() + "'");
  }
  out << text;
}

std::string hex64(std::uint64_t v)
{
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string level_list(const std::vector<double>& levels)
{
  std::string s = "[";
  for (std::size_t i = 0; i < levels.size(); ++i) {
    s += (i ? "," : "") + format_level(levels[i]);
  }
  return s + "]";
}

DenoiserBank require_bank(const RunConfig& cfg)
{
  if (cfg.bank.empty()) {
    throw InputError("no denoiser bank given (--bank DIR)");
  }
  return load_bank(cfg.bank);
}

int cmd_train_bank(const RunConfig& cfg, const std::string& corpus)
{
  OfflineTrainConfig tcfg = cfg.profile == "desk" ? OfflineTrainConfig::desk() : OfflineTrainConfig{};
  if (cfg.train_steps > 0) {
    tcfg.steps = cfg.train_steps;
  }
  tcfg.workers = cfg.workers > 0 ? cfg.workers : default_worker_count();
  std::vector<double> levels;
  if (cfg.levels.empty()) {
    levels = cfg.profile == "desk" ? OfflineTrainConfig::desk_levels() : OfflineTrainConfig::default_levels();
  } else {
    for (const auto& t : split_list(cfg.levels)) {
      levels.push_back(detail::parse_double(t, "--levels"));
    }
  }
  if (!fs::is_directory(corpus)) {
    throw InputError("corpus directory '" + corpus + "' does not exist");
  }
  std::cout << "training " << levels.size() << " levels, " << tcfg.steps << " steps each\n" << std::flush;
  auto trained = train_bank(levels, corpus, tcfg, cfg.seed, [](const LevelReport& r) {
    std::cout << "sigma " << format_level(r.sigma255) << ": held-out PSNR " << csv_number(r.heldout.psnr_noisy)
              << " -> " << csv_number(r.heldout.psnr_denoised) << " dB (gain " << csv_number(r.heldout.gain())
              << ")\n"
              << std::flush;
  });
  save_bank(trained.bank, cfg.out);
  write_text(fs::path(cfg.out) / "config.txt", cfg.to_text());
  std::cout << "bank written to " << cfg.out << " (fingerprint " << hex64(bank_fingerprint(trained.bank)) << ")\n";
  return kExitOk;
}

int cmd_superresolve(const RunConfig& cfg, const std::string& input, const std::string& ground_truth, bool save_adapted)
{
  const DenoiserBank bank = require_bank(cfg);
  const Image lr = load_png(input);
  DegradationOperator op{parse_kernel_spec(cfg.kernel, cfg.scale), cfg.scale, 0};
  IDBPConfig icfg;
  icfg.sigma_e = cfg.sigma_e;
  icfg.n_iters = cfg.iters;
  icfg.delta_floor = cfg.delta_floor;
  if (cfg.ia) {
    AdaptConfig a;
    a.steps = cfg.ia_steps;
    a.seed = cfg.seed;
    icfg.adapt = a;
  }
  std::optional<Image> gt;
  if (!ground_truth.empty()) {
    gt = load_png(ground_truth);
  }
  SRResult sr;
  Image out;
  if (lr.channels() == 1) {
    sr = idbp_superresolve(lr, op, bank, icfg, gt ? &*gt : nullptr);
    out = sr.output;
  } else {
    auto color = superresolve_color(lr, op, bank, icfg, gt ? &*gt : nullptr);
    sr = std::move(color.luma);
    out = std::move(color.output);
  }
  const fs::path dir(cfg.out);
  fs::create_directories(dir);
  save_png(out, dir / "output.png");
  write_trace_csv(sr, dir / "trace.csv");
  write_text(dir / "config.txt", cfg.to_text());
  std::string manifest = cfg.to_text();
  manifest += "input=" + input + "\n";
  manifest += "bank_fingerprint=" + hex64(bank_fingerprint(bank)) + "\n";
  manifest += "adapted_levels=" + level_list(sr.adapted_levels) + "\n";
  manifest += "cg_failures=" + std::to_string(sr.cg_failures) + "\n";
  if (gt) {
    manifest += "output_psnr_y=" + csv_number(sr.output_psnr) + "\n";
  }
  write_text(dir / "run_manifest.txt", manifest);
  if (save_adapted) {
    for (const auto& [level, net] : sr.adapted) {
      nn::save_weights(net, dir / ("adapted_" + weight_filename(level)));
    }
  }
  if (sr.cg_failures > 0) {
    std::cerr << "warning: " << sr.cg_failures << " projections did not reach the CG tolerance\n";
  }
  std::cout << "wrote " << (dir / "output.png").string() << " (" << out.width() << "x" << out.height() << ")";
  if (gt) {
    std::cout << ", Y-PSNR " << csv_number(sr.output_psnr) << " dB";
  }
  std::cout << "\n";
  return kExitOk;
}

int cmd_benchmark(const RunConfig& cfg, const std::string& dataset)
{
  const DenoiserBank bank = require_bank(cfg);
  BenchmarkOptions opts;
  opts.config = cfg;
  opts.dataset = dataset;
  opts.log = &std::cout;
  const auto report = run_benchmark(bank, opts);
  std::string manifest = cfg.to_text();
  manifest += "dataset=" + dataset + "\n";
  manifest += "bank_fingerprint=" + hex64(bank_fingerprint(bank)) + "\n";
  write_text(fs::path(cfg.out) / "config.txt", manifest);
  write_table(report, std::cout);
  if (report.max_constraint_residual > 1e-4) {
    std::cerr << "invariant violated: constraint residual " << report.max_constraint_residual << "\n";
    return kExitInvariant;
  }
  return kExitOk;
}

int cmd_selftest(bool corrupt_adjoint)
{
  SelftestOptions opts;
  opts.corrupt_adjoint = corrupt_adjoint;
  return print_selftest(run_selftest(opts), std::cout) ? kExitOk : kExitInvariant;
}

}  // namespace

int main(int argc, char** argv)
{
  CLI::App app{"Super-resolution by iterative denoising and backward projection"};
  app.require_subcommand(1);

  Overrides train_o, sr_o, bench_o;
  std::string corpus, input, ground_truth, dataset;
  bool save_adapted = false, corrupt_adjoint = false;

  auto* train = app.add_subcommand("train-bank", "train the offline denoiser bank");
  train->add_option("corpus", corpus, "directory of training PNGs")->required();
  add_common(train, train_o, {"seed", "out", "workers", "profile", "levels", "train_steps"});

  auto* sr = app.add_subcommand("superresolve", "super-resolve one PNG");
  sr->add_option("input", input, "low-resolution PNG")->required();
  sr->add_option("--ground-truth", ground_truth, "high-resolution reference for PSNR tracing");
  sr->add_flag("--save-adapted", save_adapted, "write fine-tuned weights next to the output");
  add_common(sr, sr_o, {"scale", "kernel", "sigma_e", "ia", "iters", "delta_floor", "bank", "seed", "out", "ia_steps"});

  auto* bench = app.add_subcommand("benchmark", "run the benchmark protocols on a ground-truth set");
  bench->add_option("dataset", dataset, "directory of ground-truth PNGs")->required();
  add_common(bench, bench_o,
             {"scale", "kernel", "recon_kernel", "sigma_e", "ia", "iters", "delta_floor", "bank", "seed", "out",
              "workers", "protocols", "ia_steps"});

  auto* self = app.add_subcommand("selftest", "run the built-in invariant checks");
  self->add_flag("--corrupt-adjoint", corrupt_adjoint, "negative control: break the adjoint")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    if (train->parsed()) {
      return cmd_train_bank(resolve(train_o), corpus);
    }
    if (sr->parsed()) {
      return cmd_superresolve(resolve(sr_o), input, ground_truth, save_adapted);
    }
    if (bench->parsed()) {
      return cmd_benchmark(resolve(bench_o), dataset);
    }
    return cmd_selftest(corrupt_adjoint);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInvariant;
  }
}
