#pragma once

// Benchmark harness: synthesize LR inputs with the artifact's own H, run the
// bicubic baseline and IDBP with and without adaptation, and report Y-PSNR.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "idbp/adapt.hpp"
#include "idbp/config.hpp"
#include "idbp/denoiser_bank.hpp"
#include "idbp/error.hpp"
#include "idbp/idbp.hpp"
#include "idbp/image.hpp"
#include "idbp/linops.hpp"
#include "idbp/parallel.hpp"
#include "idbp/png_io.hpp"

namespace idbp {

struct Protocol {
  std::string name;
  std::string kernel;        // synthesis kernel spec
  int scale = 2;
  std::string recon_kernel;  // assumed during reconstruction; empty = same
};

inline std::vector<Protocol> standard_protocols()
{
  return {{"bicubic_x2", "bicubic", 2, ""},
          {"bicubic_x3", "bicubic", 3, ""},
          {"gaussian_x3", "gaussian:7,1.6", 3, ""},
          {"gaussian_x3_bicubic_recon", "gaussian:7,1.6", 3, "bicubic"}};
}

/// Resolves a comma-separated list of protocol names. "custom" builds one from
/// the config's scale/kernel/recon_kernel.
inline std::vector<Protocol> resolve_protocols(const RunConfig& cfg)
{
  std::vector<Protocol> out;
  for (const auto& name : split_list(cfg.protocols)) {
    if (name == "custom") {
      out.push_back({"custom", cfg.kernel, cfg.scale, cfg.recon_kernel});
      continue;
    }
    bool found = false;
    for (const auto& p : standard_protocols()) {
      if (p.name == name) {
        out.push_back(p);
        found = true;
      }
    }
    if (!found) {
      throw InputError("unknown protocol '" + name + "'");
    }
  }
  if (out.empty()) {
    throw InputError("no protocols selected");
  }
  return out;
}

inline std::string describe_kernel(const std::string& spec, int scale)
{
  const Kernel2D k = parse_kernel_spec(spec, scale);
  std::ostringstream os;
  os << spec << " (" << k.rows << "x" << k.cols << ")";
  if (spec.rfind("gaussian", 0) == 0) {
    double sigma = 1.6;
    if (const auto colon = spec.find(','); colon != std::string::npos) {
      sigma = std::stod(spec.substr(colon + 1));
    }
    os << " sigma " << format_level(sigma);
  }
  return os.str();
}

inline const std::vector<std::string>& method_names(bool with_ia)
{
  static const std::vector<std::string> base{"bicubic", "idbp_cnn"};
  static const std::vector<std::string> all{"bicubic", "idbp_cnn", "idbp_cnn_ia"};
  return with_ia ? all : base;
}

struct BenchRow {
  std::string protocol;
  std::string image;
  std::string method;
  double psnr = 0.0;
};

struct CurvePoint {
  std::string protocol;
  std::string image;
  std::string method;
  int iter = 0;  // 0 is the bicubic initialization
  double psnr = 0.0;
};

/// Self-denoising score of one adapted level against its offline original.
struct AdaptRow {
  std::string protocol;
  std::string image;
  double level = 0.0;
  double offline_psnr = 0.0;
  double adapted_psnr = 0.0;
};

struct TimingRow {
  std::string protocol;
  std::string image;
  std::string stage;
  double seconds = 0.0;
};

struct BenchmarkReport {
  std::vector<Protocol> protocols;
  std::vector<std::string> methods;
  std::vector<BenchRow> rows;
  std::vector<CurvePoint> curves;
  std::vector<AdaptRow> adaptation;
  std::vector<TimingRow> timings;
  int iters = 0;
  double max_constraint_residual = 0.0;
  int cg_failures = 0;

  /// Mean PSNR per (protocol, method), computed from rows only.
  [[nodiscard]] std::map<std::pair<std::string, std::string>, std::pair<double, int>> averages() const
  {
    std::map<std::pair<std::string, std::string>, std::pair<double, int>> acc;
    for (const auto& r : rows) {
      auto& a = acc[{r.protocol, r.method}];
      a.first += r.psnr;
      a.second += 1;
    }
    for (auto& [key, a] : acc) {
      a.first /= a.second;
    }
    return acc;
  }

  [[nodiscard]] double average(const std::string& protocol, const std::string& method) const
  {
    const auto acc = averages();
    const auto it = acc.find({protocol, method});
    if (it == acc.end()) {
      throw std::out_of_range("no rows for " + protocol + "/" + method);
    }
    return it->second.first;
  }
};

struct BenchmarkOptions {
  RunConfig config;
  std::filesystem::path dataset;
  /// When set, per-image outputs and CSVs are written below config.out.
  bool write_files = true;
  std::ostream* log = nullptr;
};

namespace detail {

struct ImageJob {
  std::size_t protocol = 0;
  std::size_t image = 0;
};

struct ImageOutcome {
  std::vector<BenchRow> rows;
  std::vector<CurvePoint> curves;
  std::vector<AdaptRow> adaptation;
  std::vector<TimingRow> timings;
  std::map<std::string, Image> outputs;
  double max_constraint_residual = 0.0;
  int cg_failures = 0;
};

inline double seconds_since(std::chrono::steady_clock::time_point t0)
{
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// LR synthesis y = H x (+ noise) on every channel.
inline Image synthesize_lr(const Image& gt, const DegradationOperator& op, double sigma_e, std::uint64_t seed)
{
  std::vector<Image> planes;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma_e / 255.0);
  for (int c = 0; c < gt.channels(); ++c) {
    Image p = apply_H(op, gt.channel(c));
    if (sigma_e > 0) {
      for (double& v : p.samples()) {
        v += noise(rng);
      }
    }
    planes.push_back(std::move(p));
  }
  if (planes.size() == 1) {
    return planes[0];
  }
  return merge_planes(planes[0], planes[1], planes[2], gt.colorspace());
}

inline Image upscale_output(const Image& lr, const DegradationOperator& op, const DenoiserBank& bank,
                            const IDBPConfig& cfg, const Image& gt, SRResult& sr)
{
  if (lr.channels() == 1) {
    sr = idbp_superresolve(lr, op, bank, cfg, &gt);
    return sr.output;
  }
  auto color = superresolve_color(lr, op, bank, cfg, &gt);
  sr = std::move(color.luma);
  return color.output;
}

}  // namespace detail

inline void write_table(const BenchmarkReport& report, std::ostream& os)
{
  const auto avg = report.averages();
  for (const auto& p : report.protocols) {
    os << p.name << ": synthesis kernel " << describe_kernel(p.kernel, p.scale) << ", scale " << p.scale;
    if (!p.recon_kernel.empty()) {
      os << ", reconstruction kernel " << describe_kernel(p.recon_kernel, p.scale);
    }
    os << "\n";
    os << "  " << std::left << std::setw(24) << "image";
    for (const auto& m : report.methods) {
      os << std::right << std::setw(14) << m;
    }
    os << "\n";
    std::vector<std::string> images;
    for (const auto& r : report.rows) {
      if (r.protocol == p.name && std::find(images.begin(), images.end(), r.image) == images.end()) {
        images.push_back(r.image);
      }
    }
    auto cell = [](double v) {
      std::ostringstream c;
      c << std::fixed << std::setprecision(2) << v;
      return c.str();
    };
    for (const auto& img : images) {
      os << "  " << std::left << std::setw(24) << img;
      for (const auto& m : report.methods) {
        for (const auto& r : report.rows) {
          if (r.protocol == p.name && r.image == img && r.method == m) {
            os << std::right << std::setw(14) << cell(r.psnr);
          }
        }
      }
      os << "\n";
    }
    os << "  " << std::left << std::setw(24) << "average";
    for (const auto& m : report.methods) {
      const auto it = avg.find({p.name, m});
      os << std::right << std::setw(14) << (it == avg.end() ? std::string("-") : cell(it->second.first));
    }
    os << "\n\n";
  }
}

inline BenchmarkReport run_benchmark(const DenoiserBank& bank, const BenchmarkOptions& opts)
{
  const RunConfig& cfg = opts.config;
  BenchmarkReport report;
  report.protocols = resolve_protocols(cfg);
  report.methods = method_names(cfg.ia);
  report.iters = cfg.iters;

  const auto files = list_pngs(opts.dataset);
  if (files.empty()) {
    throw InputError("dataset '" + opts.dataset.string() + "' contains no PNG images");
  }
  std::vector<Image> originals;
  std::vector<std::string> names;
  for (const auto& f : files) {
    originals.push_back(load_png(f));
    names.push_back(f.stem().string());
  }

  std::vector<detail::ImageJob> jobs;
  for (std::size_t p = 0; p < report.protocols.size(); ++p) {
    for (std::size_t i = 0; i < originals.size(); ++i) {
      jobs.push_back({p, i});
    }
  }
  std::vector<detail::ImageOutcome> outcomes(jobs.size());
  std::mutex log_mutex;
  const int workers = cfg.workers > 0 ? cfg.workers : default_worker_count();

  parallel_for(jobs.size(), workers, [&](std::size_t j) {
    const Protocol& proto = report.protocols[jobs[j].protocol];
    const std::size_t idx = jobs[j].image;
    const std::string& name = names[idx];
    auto& res = outcomes[j];
    const std::uint64_t job_seed = mix_seed(mix_seed(cfg.seed, jobs[j].protocol), idx);

    DegradationOperator synth{parse_kernel_spec(proto.kernel, proto.scale), proto.scale, 0};
    DegradationOperator recon = synth;
    if (!proto.recon_kernel.empty()) {
      recon.kernel = parse_kernel_spec(proto.recon_kernel, proto.scale);
    }
    const Image gt = crop_to_multiple(originals[idx], proto.scale);
    const Image gt_eval = gt.channels() == 1 ? gt : luma(gt);

    auto t0 = std::chrono::steady_clock::now();
    const Image lr = detail::synthesize_lr(gt, synth, cfg.sigma_e, mix_seed(job_seed, 1));
    res.timings.push_back({proto.name, name, "synthesize", detail::seconds_since(t0)});

    auto add_row = [&](const std::string& method, const Image& out) {
      res.rows.push_back({proto.name, name, method, psnr(clamp01(out), gt, PsnrChannel::Y, proto.scale).value});
      res.outputs[method] = out;
    };

    t0 = std::chrono::steady_clock::now();
    add_row("bicubic", bicubic_resize(lr, proto.scale));
    res.timings.push_back({proto.name, name, "bicubic", detail::seconds_since(t0)});

    IDBPConfig icfg;
    icfg.sigma_e = cfg.sigma_e;
    icfg.n_iters = cfg.iters;
    icfg.delta_floor = cfg.delta_floor;

    for (const auto& method : report.methods) {
      if (method == "bicubic") {
        continue;
      }
      IDBPConfig mcfg = icfg;
      if (method == "idbp_cnn_ia") {
        AdaptConfig acfg;
        acfg.steps = cfg.ia_steps;
        acfg.seed = mix_seed(job_seed, 2);
        mcfg.adapt = acfg;
      }
      t0 = std::chrono::steady_clock::now();
      SRResult sr;
      const Image out = detail::upscale_output(lr, recon, bank, mcfg, gt_eval, sr);
      res.timings.push_back({proto.name, name, method, detail::seconds_since(t0)});
      add_row(method, out);
      res.curves.push_back({proto.name, name, method, 0, sr.init_psnr});
      for (const auto& rec : sr.trace) {
        res.curves.push_back({proto.name, name, method, rec.iter, rec.psnr});
        res.max_constraint_residual = std::max(res.max_constraint_residual, rec.constraint_residual);
      }
      res.cg_failures += sr.cg_failures;

      if (method == "idbp_cnn_ia") {
        t0 = std::chrono::steady_clock::now();
        const Image source = lr.channels() == 1 ? lr : luma(lr);
        for (const auto& [level, tuned] : sr.adapted) {
          const auto& offline = bank.entry(bank.nearest_index(level));
          const auto seed = mix_seed(job_seed, 3);
          const auto before = self_denoise_score(offline.net, source, offline.level, *mcfg.adapt, seed);
          const auto after = self_denoise_score(tuned, source, offline.level, *mcfg.adapt, seed);
          res.adaptation.push_back({proto.name, name, level, before.psnr_denoised, after.psnr_denoised});
        }
        res.timings.push_back({proto.name, name, "adapt_eval", detail::seconds_since(t0)});
      }
    }
    if (opts.log != nullptr) {
      std::lock_guard lock(log_mutex);
      *opts.log << proto.name << " " << name;
      for (const auto& r : res.rows) {
        *opts.log << " " << r.method << "=" << csv_number(r.psnr);
      }
      *opts.log << "\n" << std::flush;
    }
  });

  for (auto& o : outcomes) {
    report.rows.insert(report.rows.end(), o.rows.begin(), o.rows.end());
    report.curves.insert(report.curves.end(), o.curves.begin(), o.curves.end());
    report.adaptation.insert(report.adaptation.end(), o.adaptation.begin(), o.adaptation.end());
    report.timings.insert(report.timings.end(), o.timings.begin(), o.timings.end());
    report.max_constraint_residual = std::max(report.max_constraint_residual, o.max_constraint_residual);
    report.cg_failures += o.cg_failures;
  }

  if (opts.write_files) {
    namespace fs = std::filesystem;
    const fs::path out(cfg.out);
    fs::create_directories(out);
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      const fs::path dir = out / report.protocols[jobs[j].protocol].name;
      fs::create_directories(dir);
      for (const auto& [method, img] : outcomes[j].outputs) {
        save_png(img, dir / (names[jobs[j].image] + "_" + method + ".png"));
      }
    }
    auto open = [&](const std::string& file) {
      std::ofstream f(out / file);
      if (!f) {
        throw InputError("cannot write '" + (out / file).string() + "'");
      }
      return f;
    };
    {
      auto f = open("results.csv");
      f << "protocol,image,method,psnr_y\n";
      for (const auto& r : report.rows) {
        f << r.protocol << "," << r.image << "," << r.method << "," << csv_number(r.psnr) << "\n";
      }
    }
    {
      auto f = open("averages.csv");
      f << "protocol,method,mean_psnr_y,images\n";
      for (const auto& [key, a] : report.averages()) {
        f << key.first << "," << key.second << "," << csv_number(a.first) << "," << a.second << "\n";
      }
    }
    {
      auto f = open("curves.csv");
      f << "protocol,image,method,iter,psnr_y\n";
      for (const auto& c : report.curves) {
        f << c.protocol << "," << c.image << "," << c.method << "," << c.iter << "," << csv_number(c.psnr) << "\n";
      }
    }
    if (!report.adaptation.empty()) {
      auto f = open("adaptation.csv");
      f << "protocol,image,level,offline_self_psnr,adapted_self_psnr\n";
      for (const auto& a : report.adaptation) {
        f << a.protocol << "," << a.image << "," << csv_number(a.level) << "," << csv_number(a.offline_psnr) << ","
          << csv_number(a.adapted_psnr) << "\n";
      }
    }
    {
      // Wall-clock numbers live apart from the reproducible outputs.
      auto f = open("timings.csv");
      f << "protocol,image,stage,seconds\n";
      for (const auto& t : report.timings) {
        f << t.protocol << "," << t.image << "," << t.stage << "," << t.seconds << "\n";
      }
    }
    {
      auto f = open("table.txt");
      write_table(report, f);
    }
  }
  return report;
}

}  // namespace idbp
