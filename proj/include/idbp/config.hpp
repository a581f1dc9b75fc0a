#pragma once

// Flat key=value run configuration shared by every CLI command.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "idbp/denoiser_bank.hpp"
#include "idbp/error.hpp"

namespace idbp {

struct RunConfig {
  int scale = 2;
  std::string kernel = "bicubic";
  /// Kernel assumed during reconstruction; empty means the same as `kernel`.
  std::string recon_kernel;
  double sigma_e = 0.0;
  bool ia = false;
  int iters = 30;
  std::optional<double> delta_floor;
  std::string bank;
  std::uint64_t seed = 0;
  std::string out = "out";
  int workers = 0;  // 0: one per hardware thread
  std::string protocols = "bicubic_x2,bicubic_x3,gaussian_x3";
  int ia_steps = 320;
  // train-bank
  std::string profile = "desk";
  std::string levels;  // comma-separated; empty means the profile's levels
  int train_steps = 0;  // 0: the profile's default

  static const std::vector<std::string>& keys()
  {
    static const std::vector<std::string> k{"scale",     "kernel", "recon_kernel", "sigma_e",  "ia",
                                            "iters",     "delta_floor", "bank",    "seed",     "out",
                                            "workers",   "protocols",   "ia_steps", "profile", "levels",
                                            "train_steps"};
    return k;
  }

  void set(const std::string& key, const std::string& value)
  {
    auto as_int = [&](int lo) {
      int v = 0;
      std::size_t used = 0;
      try {
        v = std::stoi(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != value.size() || v < lo) {
        throw InputError("config: '" + key + "' expects an integer >= " + std::to_string(lo) + ", got '" + value + "'");
      }
      return v;
    };
    auto as_double = [&] {
      double v = 0.0;
      std::size_t used = 0;
      try {
        v = std::stod(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != value.size() || !(v >= 0.0)) {
        throw InputError("config: '" + key + "' expects a non-negative number, got '" + value + "'");
      }
      return v;
    };
    if (key == "scale") {
      scale = as_int(1);
    } else if (key == "kernel") {
      kernel = value;
    } else if (key == "recon_kernel") {
      recon_kernel = value;
    } else if (key == "sigma_e") {
      sigma_e = as_double();
    } else if (key == "ia") {
      if (value == "1" || value == "true" || value == "on") {
        ia = true;
      } else if (value == "0" || value == "false" || value == "off") {
        ia = false;
      } else {
        throw InputError("config: 'ia' expects true/false, got '" + value + "'");
      }
    } else if (key == "iters") {
      iters = as_int(1);
    } else if (key == "delta_floor") {
      if (value.empty() || value == "none") {
        delta_floor.reset();
      } else {
        delta_floor = as_double();
      }
    } else if (key == "bank") {
      bank = value;
    } else if (key == "seed") {
      try {
        std::size_t used = 0;
        seed = std::stoull(value, &used);
        if (used != value.size() || value[0] == '-') {
          throw std::invalid_argument("seed");
        }
      } catch (const std::exception&) {
        throw InputError("config: 'seed' expects a non-negative integer, got '" + value + "'");
      }
    } else if (key == "out") {
      out = value;
    } else if (key == "workers") {
      workers = as_int(0);
    } else if (key == "protocols") {
      protocols = value;
    } else if (key == "ia_steps") {
      ia_steps = as_int(1);
    } else if (key == "profile") {
      if (value != "desk" && value != "default") {
        throw InputError("config: 'profile' must be desk or default, got '" + value + "'");
      }
      profile = value;
    } else if (key == "levels") {
      levels = value;
    } else if (key == "train_steps") {
      train_steps = as_int(0);
    } else {
      throw InputError("config: unknown key '" + key + "'");
    }
  }

  void load_text(std::istream& in, const std::string& origin)
  {
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') {
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw InputError(origin + ":" + std::to_string(lineno) + ": expected key=value");
      }
      auto trim = [](std::string s) {
        s.erase(0, s.find_first_not_of(" \t\r"));
        s.erase(s.find_last_not_of(" \t\r") + 1);
        return s;
      };
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  void load_file(const std::filesystem::path& path)
  {
    std::ifstream in(path);
    if (!in) {
      throw InputError("cannot open config file '" + path.string() + "'");
    }
    load_text(in, path.string());
  }

  [[nodiscard]] std::string to_text() const
  {
    std::ostringstream os;
    os << "scale=" << scale << "\n"
       << "kernel=" << kernel << "\n"
       << "recon_kernel=" << recon_kernel << "\n"
       << "sigma_e=" << format_level(sigma_e) << "\n"
       << "ia=" << (ia ? "true" : "false") << "\n"
       << "iters=" << iters << "\n"
       << "delta_floor=" << (delta_floor ? format_level(*delta_floor) : std::string("none")) << "\n"
       << "bank=" << bank << "\n"
       << "seed=" << seed << "\n"
       << "out=" << out << "\n"
       << "workers=" << workers << "\n"
       << "protocols=" << protocols << "\n"
       << "ia_steps=" << ia_steps << "\n"
       << "profile=" << profile << "\n"
       << "levels=" << levels << "\n"
       << "train_steps=" << train_steps << "\n";
    return os.str();
  }
};

inline std::vector<std::string> split_list(const std::string& s, char sep = ',')
{
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) {
      out.push_back(item);
    }
  }
  return out;
}

}  // namespace idbp
