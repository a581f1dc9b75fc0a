// Trains a tiny two-level bank on one image, degrades a crop of it by the
// bicubic x2 operator and reconstructs it.
//
//   superresolve_sample <image.png> [out.png]

#include <iostream>

#include "idbp/denoiser_bank.hpp"
#include "idbp/idbp.hpp"
#include "idbp/png_io.hpp"

int main(int argc, char** argv)
{
  if (argc < 2) {
    std::cerr << "usage: superresolve_sample <image.png> [out.png]\n";
    return 2;
  }
  const idbp::Image hr = idbp::crop_to_multiple(idbp::luma(idbp::load_png(argv[1])), 2);

  idbp::OfflineTrainConfig tcfg;
  tcfg.steps = 40;
  tcfg.batch = 8;
  idbp::Corpus corpus;
  corpus.train = {hr};
  corpus.heldout = {hr};
  std::vector<idbp::BankEntry> entries;
  for (double sigma : {5.0, 20.0}) {
    entries.push_back(idbp::train_level(corpus, sigma, tcfg, 7));
  }
  const idbp::DenoiserBank bank(std::move(entries));

  const idbp::DegradationOperator op{idbp::make_bicubic_kernel(2), 2, 0};
  const idbp::Image lr = idbp::apply_H(op, hr);
  idbp::IDBPConfig cfg;
  cfg.n_iters = 10;
  const auto result = idbp::idbp_superresolve(lr, op, bank, cfg, &hr);

  std::cout << "bicubic  " << result.init_psnr << " dB\n"
            << "idbp     " << result.output_psnr << " dB\n";
  if (argc > 2) {
    idbp::save_png(result.output, argv[2]);
  }
  return 0;
}
