// SPDX-License-Identifier: Apache-2.0
//
// MNIST IDX parsing, the three derived multi-domain datasets, train/validation
// splitting, per-domain mini-batch sampling, and the on-disk dataset format.
//
// On-disk format (little-endian), one file per domain:
//   bytes 0..3   magic "DSDS"
//   bytes 4..7   u32 format version (1)
//   bytes 8..11  u32 n, number of images
//   bytes 12..15 u32 C*H*W, values per image
//   n*C*H*W f32 pixels, row-major [n,C,H,W]
//   n u8 labels
// A `dataset.json` sidecar in the same directory records C/H/W, roles, and the
// generation metadata.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dsdi/random.hpp"
#include "dsdi/tensor.hpp"
#include "json.hpp"

namespace dsdi {

/// Raw MNIST images as stored in an IDX pair. Pixels stay as bytes; `pixel()`
/// scales them to [0,1].
struct RawMnist {
  Index count = 0;
  Index rows = 0;
  Index cols = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> labels;

  Index image_size() const { return rows * cols; }
  float pixel(Index image, Index offset) const {
    return static_cast<float>(pixels[static_cast<std::size_t>(image * image_size() + offset)]) /
           255.0f;
  }
};

/// Parses an IDX image file (magic 0x00000803) and label file (0x00000801).
RawMnist load_idx(const std::filesystem::path& images_path,
                  const std::filesystem::path& labels_path);

struct MnistSet {
  RawMnist train;
  RawMnist test;
};

/// Loads the four standard files (train-images-idx3-ubyte, ...) from `dir`.
MnistSet load_mnist_dir(const std::filesystem::path& dir);

struct DomainDataset {
  int domain_id = 0;
  std::string name;
  Index channels = 0;
  Index height = 0;
  Index width = 0;
  int n_classes = 0;
  Tensor<float> images;  // [n, C, H, W], values in [0,1]
  std::vector<int> labels;
  std::vector<int> digits;      // MNIST digit each image was made from
  std::vector<int> attributes;  // Colored-MNIST color id; empty otherwise
  nlohmann::json meta;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index image_size() const { return channels * height * width; }
};

struct Rgb {
  const char* name;
  int r, g, b;
};

constexpr int kBcmSourceDomains = 3;
constexpr Index kBcmImagesPerSource = 1000;
constexpr float kForegroundThreshold = 0.5f;

/// Background color of each class in each source domain. Fixed, pairwise
/// distinct within a domain and disjoint across domains.
const std::array<std::array<Rgb, 10>, kBcmSourceDomains>& bcm_source_palettes();
/// Digit colors: red, green, blue for the sources, orange for the target.
const std::array<Rgb, kBcmSourceDomains + 1>& bcm_digit_colors();
/// Target background for `label`: the same class's background in source domain label % 3.
const Rgb& bcm_target_background(int label);

struct BcmDatasets {
  std::vector<DomainDataset> sources;
  DomainDataset target;
};

/// Three 1000-image source domains from a seeded subset of the training
/// images, plus a 10000-image target domain built from the test images.
BcmDatasets gen_background_colored_mnist(const MnistSet& mnist, std::uint64_t seed);

/// Merged train+test images divided evenly over one domain per noise rate.
std::vector<DomainDataset> gen_colored_mnist(const MnistSet& mnist,
                                             std::span<const double> noise_rates,
                                             std::uint64_t seed);

/// Merged train+test images divided evenly over one domain per angle (degrees).
std::vector<DomainDataset> gen_rotated_mnist(const MnistSet& mnist, std::span<const double> angles,
                                             std::uint64_t seed);

/// Rotates an H x W single-channel image about its center with bilinear
/// interpolation; samples falling outside the image read as zero.
void rotate_image(std::span<const float> src, Index height, Index width, double degrees,
                  std::span<float> dst);

struct SplitPlan {
  std::vector<Index> train_indices;
  std::vector<Index> val_indices;
  double fraction = 0.0;
};

/// Seeded shuffle of [0, n) followed by a partition; |val| = round(fraction * n).
SplitPlan split_train_val(Index n, double fraction, std::uint64_t seed);

template <typename Scalar>
struct DomainBatch {
  Tensor<Scalar> images;
  std::vector<int> labels;
  std::vector<int> domains;

  Index size() const { return static_cast<Index>(labels.size()); }
};

/// Copies the selected images into a batch tagged with `domain_index`.
template <typename Scalar>
DomainBatch<Scalar> gather_batch(const DomainDataset& dataset, std::span<const Index> indices,
                                 int domain_index);

template <typename Scalar>
DomainBatch<Scalar> concat_batches(std::span<const DomainBatch<Scalar>> batches);

/// Draws fixed-size batches from a pool of indices in reshuffled epochs. A
/// batch that crosses an epoch boundary continues into the next permutation.
class BatchSampler {
 public:
  BatchSampler(std::vector<Index> pool, std::uint64_t seed);

  std::vector<Index> next(Index batch_size);
  std::size_t epoch() const { return epoch_; }

  /// Text serialization of the full sampler state, for resumable training.
  std::string state() const;
  void restore(const std::string& state);

 private:
  void reshuffle();

  std::vector<Index> pool_;
  std::vector<Index> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  Rng rng_;
};

/// One batch per domain; batch j carries domain index j.
template <typename Scalar>
std::vector<DomainBatch<Scalar>> sample_batch(std::span<const DomainDataset* const> domains,
                                              std::span<BatchSampler> samplers,
                                              Index batch_size);

// ---------------------------------------------------------------------------
// Files

void write_domain_file(const std::filesystem::path& path, const DomainDataset& dataset);
/// Reads pixels and labels; shape comes from the sidecar (channels, height, width).
DomainDataset read_domain_file(const std::filesystem::path& path, Index channels, Index height,
                               Index width);

struct DatasetBundle {
  std::string kind;  // "bcm", "cmnist", or "rmnist"
  std::vector<DomainDataset> domains;
  std::vector<int> source_ids;
  std::vector<int> target_ids;
  nlohmann::json sidecar;
};

/// Writes one .dsds file per domain plus dataset.json. Returns the sidecar.
nlohmann::json write_dataset_dir(const std::filesystem::path& dir, const DatasetBundle& bundle,
                                 std::uint64_t seed);
DatasetBundle read_dataset_dir(const std::filesystem::path& dir);

DatasetBundle make_bcm_bundle(BcmDatasets data);
DatasetBundle make_cmnist_bundle(std::vector<DomainDataset> domains);
DatasetBundle make_rmnist_bundle(std::vector<DomainDataset> domains);

}  // namespace dsdi
