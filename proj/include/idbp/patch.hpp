#pragma once

// Patch geometry and synthetic noise shared by offline training and
// test-time adaptation.

#include <random>
#include <stdexcept>
#include <string>

#include "idbp/image.hpp"
#include "idbp/nn.hpp"

namespace idbp {

inline Image crop(const Image& img, int x0, int y0, int w, int h)
{
  if (x0 < 0 || y0 < 0 || w < 1 || h < 1 || x0 + w > img.width() || y0 + h > img.height()) {
    throw std::invalid_argument("crop: window " + std::to_string(w) + "x" + std::to_string(h) + "+" +
                                std::to_string(x0) + "+" + std::to_string(y0) + " outside image");
  }
  Image out(w, h, img.colorspace());
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
      }
    }
  }
  return out;
}

inline Image mirror_horizontal(const Image& img)
{
  Image out(img.width(), img.height(), img.colorspace());
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < img.height(); ++y) {
      for (int x = 0; x < img.width(); ++x) {
        out.at(c, y, x) = img.at(c, y, img.width() - 1 - x);
      }
    }
  }
  return out;
}

inline Image mirror_vertical(const Image& img)
{
  Image out(img.width(), img.height(), img.colorspace());
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < img.height(); ++y) {
      for (int x = 0; x < img.width(); ++x) {
        out.at(c, y, x) = img.at(c, img.height() - 1 - y, x);
      }
    }
  }
  return out;
}

/// Counter-clockwise rotation by quarter_turns * 90 degrees.
inline Image rotate90(const Image& img, int quarter_turns)
{
  const int q = ((quarter_turns % 4) + 4) % 4;
  if (q == 0) {
    return img;
  }
  const int w = img.width(), h = img.height();
  const int ow = q == 2 ? w : h;
  const int oh = q == 2 ? h : w;
  Image out(ow, oh, img.colorspace());
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        int sx = 0, sy = 0;
        switch (q) {
          case 1: sx = w - 1 - y; sy = x; break;
          case 2: sx = w - 1 - x; sy = h - 1 - y; break;
          default: sx = y; sy = h - 1 - x; break;
        }
        out.at(c, y, x) = img.at(c, sy, sx);
      }
    }
  }
  return out;
}

/// A noisy patch and its residual target. noise == noisy - clean holds
/// exactly in float.
struct NoisyPair {
  nn::Tensor<float> noisy;
  nn::Tensor<float> noise;
};

/// Adds i.i.d. N(0, (sigma255/255)^2) noise.
inline NoisyPair make_noisy_pair(const Image& clean, double sigma255, std::mt19937_64& rng)
{
  if (clean.channels() != 1) {
    throw std::invalid_argument("make_noisy_pair: single-channel patch required");
  }
  if (!(sigma255 >= 0.0)) {
    throw std::invalid_argument("make_noisy_pair: sigma must be >= 0");
  }
  NoisyPair p;
  p.noisy = nn::tensor_from_image<float>(clean);
  p.noise = nn::Tensor<float>(1, clean.height(), clean.width());
  if (sigma255 == 0.0) {
    return p;
  }
  std::normal_distribution<double> dist(0.0, sigma255 / 255.0);
  for (std::size_t i = 0; i < p.noise.data.size(); ++i) {
    const float c = p.noisy.data[i];
    p.noisy.data[i] = static_cast<float>(c + dist(rng));
    p.noise.data[i] = p.noisy.data[i] - c;
  }
  return p;
}

}  // namespace idbp
