// SPDX-License-Identifier: Apache-2.0
//
// MNIST-shaped synthetic digits and an IDX writer, for tests that must not
// depend on the real files.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>

#include "dsdi/datasets.hpp"

namespace dsdi::testing {

inline void put_be32(std::ofstream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

// Digit-like images: a thick ring or bar whose position depends on the label,
// with saturated strokes and a soft edge, as in MNIST.
inline RawMnist synthetic_mnist(Index count, std::uint64_t seed) {
  RawMnist raw;
  raw.count = count;
  raw.rows = 28;
  raw.cols = 28;
  raw.pixels.resize(static_cast<std::size_t>(count * 784));
  raw.labels.resize(static_cast<std::size_t>(count));
  std::mt19937_64 rng(seed);
  for (Index i = 0; i < count; ++i) {
    const int label = static_cast<int>(rng() % 10);
    raw.labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(label);
    const double cx = 10.0 + label * 0.8 + static_cast<double>(rng() % 3);
    const double cy = 12.0 + static_cast<double>(rng() % 4);
    const double radius = 5.0 + (label % 4);
    for (int r = 0; r < 28; ++r)
      for (int c = 0; c < 28; ++c) {
        const double d = std::abs(std::hypot(c - cx, r - cy) - radius);
        const double v = std::clamp(2.0 - d, 0.0, 1.0);
        raw.pixels[static_cast<std::size_t>(i * 784 + r * 28 + c)] =
            static_cast<std::uint8_t>(std::lround(255.0 * v));
      }
  }
  return raw;
}

inline void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels, const RawMnist& raw) {
  std::ofstream im(images, std::ios::binary);
  put_be32(im, 0x00000803);
  put_be32(im, static_cast<std::uint32_t>(raw.count));
  put_be32(im, static_cast<std::uint32_t>(raw.rows));
  put_be32(im, static_cast<std::uint32_t>(raw.cols));
  im.write(reinterpret_cast<const char*>(raw.pixels.data()),
           static_cast<std::streamsize>(raw.pixels.size()));
  std::ofstream lb(labels, std::ios::binary);
  put_be32(lb, 0x00000801);
  put_be32(lb, static_cast<std::uint32_t>(raw.count));
  lb.write(reinterpret_cast<const char*>(raw.labels.data()),
           static_cast<std::streamsize>(raw.labels.size()));
}

/// Writes the four standard MNIST file names into `dir`.
inline void write_mnist_dir(const std::filesystem::path& dir, const MnistSet& set) {
  std::filesystem::create_directories(dir);
  write_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", set.train);
  write_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", set.test);
}

}  // namespace dsdi::testing
