// SPDX-License-Identifier: Apache-2.0
#include "dsdi/datasets.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>

#include "dsdi/errors.hpp"
#include "dsdi/hash.hpp"

namespace dsdi {

static_assert(std::endian::native == std::endian::little, "DSDS I/O assumes a little-endian host");

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
constexpr char kDsdsMagic[4] = {'D', 'S', 'D', 'S'};
constexpr std::uint32_t kDsdsVersion = 1;
constexpr double kColoredLabelNoise = 0.25;

std::vector<Index> iota_indices(Index n) {
  std::vector<Index> out(static_cast<std::size_t>(n));
  std::iota(out.begin(), out.end(), Index{0});
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                        const std::string& file) {
  if (offset + 4 > bytes.size())
    throw ParseError(file + ": truncated header", static_cast<std::int64_t>(bytes.size()));
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

std::uint32_t read_le32(const std::vector<std::uint8_t>& bytes, std::size_t offset) {
  std::uint32_t v;
  std::memcpy(&v, bytes.data() + offset, 4);
  return v;
}

// An image of `merged` index i: train images first, then test images.
struct MergedView {
  const MnistSet& mnist;
  Index size() const { return mnist.train.count + mnist.test.count; }
  const RawMnist& raw(Index i) const { return i < mnist.train.count ? mnist.train : mnist.test; }
  Index local(Index i) const { return i < mnist.train.count ? i : i - mnist.train.count; }
};

void check_mnist_shape(const MnistSet& mnist) {
  if (mnist.train.rows != mnist.test.rows || mnist.train.cols != mnist.test.cols)
    throw InputError("train and test images differ in size");
}

// Contiguous near-equal chunks: the first n % k chunks get one extra element.
std::vector<std::pair<Index, Index>> even_chunks(Index n, Index k) {
  std::vector<std::pair<Index, Index>> out;
  Index start = 0;
  for (Index j = 0; j < k; ++j) {
    const Index len = n / k + (j < n % k ? 1 : 0);
    out.emplace_back(start, start + len);
    start += len;
  }
  return out;
}

DomainDataset empty_domain(int id, std::string name, Index channels, const RawMnist& like,
                           Index n, int classes) {
  DomainDataset d;
  d.domain_id = id;
  d.name = std::move(name);
  d.channels = channels;
  d.height = like.rows;
  d.width = like.cols;
  d.n_classes = classes;
  d.images = Tensor<float>({n, channels, like.rows, like.cols});
  d.labels.resize(static_cast<std::size_t>(n));
  d.digits.resize(static_cast<std::size_t>(n));
  return d;
}

nlohmann::json rgb_json(const Rgb& c) { return {{"name", c.name}, {"rgb", {c.r, c.g, c.b}}}; }

// Writes one Background-Colored-MNIST image into `dst` ([3, H, W]).
void paint_bcm(const RawMnist& raw, Index image, const Rgb& digit, const Rgb& background,
               float* dst) {
  const Index hw = raw.image_size();
  const float fg[3] = {digit.r / 255.0f, digit.g / 255.0f, digit.b / 255.0f};
  const float bg[3] = {background.r / 255.0f, background.g / 255.0f, background.b / 255.0f};
  for (Index p = 0; p < hw; ++p) {
    const float v = raw.pixel(image, p);
    const bool foreground = v > kForegroundThreshold;
    for (int c = 0; c < 3; ++c) dst[c * hw + p] = foreground ? fg[c] * v : bg[c];
  }
}

std::string file_sha256(const std::filesystem::path& path) {
  return dsdi::sha256_hex(read_file(path));
}

}  // namespace

// ---------------------------------------------------------------------------
// IDX

RawMnist load_idx(const std::filesystem::path& images_path,
                  const std::filesystem::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  const std::string img_name = images_path.filename().string();
  const std::string lab_name = labels_path.filename().string();

  if (read_be32(img, 0, img_name) != kIdxImagesMagic)
    throw ParseError(img_name + ": bad magic, expected 0x00000803", 0);
  if (read_be32(lab, 0, lab_name) != kIdxLabelsMagic)
    throw ParseError(lab_name + ": bad magic, expected 0x00000801", 0);

  RawMnist raw;
  raw.count = read_be32(img, 4, img_name);
  raw.rows = read_be32(img, 8, img_name);
  raw.cols = read_be32(img, 12, img_name);
  const Index label_count = read_be32(lab, 4, lab_name);
  if (label_count != raw.count)
    throw ParseError(lab_name + ": label count " + std::to_string(label_count) +
                         " does not match image count " + std::to_string(raw.count),
                     4);

  const std::size_t pixel_bytes = static_cast<std::size_t>(raw.count * raw.rows * raw.cols);
  if (img.size() < 16 + pixel_bytes)
    throw ParseError(img_name + ": truncated pixel data, expected " +
                         std::to_string(16 + pixel_bytes) + " bytes",
                     static_cast<std::int64_t>(img.size()));
  if (lab.size() < 8 + static_cast<std::size_t>(raw.count))
    throw ParseError(lab_name + ": truncated label data, expected " +
                         std::to_string(8 + raw.count) + " bytes",
                     static_cast<std::int64_t>(lab.size()));

  raw.pixels.assign(img.begin() + 16, img.begin() + 16 + static_cast<std::ptrdiff_t>(pixel_bytes));
  raw.labels.assign(lab.begin() + 8, lab.begin() + 8 + raw.count);
  for (Index i = 0; i < raw.count; ++i)
    if (raw.labels[static_cast<std::size_t>(i)] > 9)
      throw ParseError(lab_name + ": label out of range", 8 + i);
  return raw;
}

MnistSet load_mnist_dir(const std::filesystem::path& dir) {
  MnistSet set{load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte"),
               load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte")};
  check_mnist_shape(set);
  return set;
}

// ---------------------------------------------------------------------------
// Background-Colored-MNIST

const std::array<std::array<Rgb, 10>, kBcmSourceDomains>& bcm_source_palettes() {
  // 30 named colors shuffled once with seed 2021 and dealt 10 per domain.
  static const std::array<std::array<Rgb, 10>, kBcmSourceDomains> palettes = {{
      {{{"indigo", 75, 0, 130},
        {"rosybrown", 188, 143, 143},
        {"yellow", 255, 255, 0},
        {"olive", 128, 128, 0},
        {"black", 0, 0, 0},
        {"brown", 165, 42, 42},
        {"fuchsia", 255, 0, 255},
        {"plum", 221, 160, 221},
        {"darkolivegreen", 85, 107, 47},
        {"white", 255, 255, 255}}},
      {{{"aqua", 0, 255, 255},
        {"lavender", 230, 230, 250},
        {"tan", 210, 180, 140},
        {"orchid", 218, 112, 214},
        {"maroon", 128, 0, 0},
        {"sienna", 160, 82, 45},
        {"purple", 128, 0, 128},
        {"gray", 128, 128, 128},
        {"turquoise", 64, 224, 208},
        {"khaki", 240, 230, 140}}},
      {{{"gold", 255, 215, 0},
        {"silver", 192, 192, 192},
        {"steelblue", 70, 130, 180},
        {"teal", 0, 128, 128},
        {"navy", 0, 0, 128},
        {"violet", 238, 130, 238},
        {"darkslateblue", 72, 61, 139},
        {"slategray", 112, 128, 144},
        {"pink", 255, 192, 203},
        {"beige", 245, 245, 220}}},
  }};
  return palettes;
}

const std::array<Rgb, kBcmSourceDomains + 1>& bcm_digit_colors() {
  static const std::array<Rgb, kBcmSourceDomains + 1> colors = {{
      {"red", 255, 0, 0},
      {"green", 0, 255, 0},
      {"blue", 0, 0, 255},
      {"orange", 255, 165, 0},
  }};
  return colors;
}

const Rgb& bcm_target_background(int label) {
  if (label < 0 || label > 9) throw InputError("label out of range: " + std::to_string(label));
  return bcm_source_palettes()[static_cast<std::size_t>(label % kBcmSourceDomains)]
                              [static_cast<std::size_t>(label)];
}

BcmDatasets gen_background_colored_mnist(const MnistSet& mnist, std::uint64_t seed) {
  const RawMnist& train = mnist.train;
  const RawMnist& test = mnist.test;
  if (train.count < kBcmSourceDomains * kBcmImagesPerSource)
    throw InputError("training set has fewer than " +
                     std::to_string(kBcmSourceDomains * kBcmImagesPerSource) + " images");

  Rng rng(derive_seed(seed, 0));
  std::vector<Index> order = iota_indices(train.count);
  shuffle_in_place(order, rng);

  const Index hw = train.image_size();
  BcmDatasets out;
  for (int d = 0; d < kBcmSourceDomains; ++d) {
    const Rgb& digit = bcm_digit_colors()[static_cast<std::size_t>(d)];
    DomainDataset ds = empty_domain(d, std::string("bcm_source_") + digit.name, 3, train,
                                    kBcmImagesPerSource, 10);
    for (Index i = 0; i < kBcmImagesPerSource; ++i) {
      const Index src = order[static_cast<std::size_t>(d * kBcmImagesPerSource + i)];
      const int label = train.labels[static_cast<std::size_t>(src)];
      const auto& bg = bcm_source_palettes()[static_cast<std::size_t>(d)]
                                            [static_cast<std::size_t>(label)];
      paint_bcm(train, src, digit, bg, ds.images.data() + i * 3 * hw);
      ds.labels[static_cast<std::size_t>(i)] = label;
      ds.digits[static_cast<std::size_t>(i)] = label;
    }
    nlohmann::json palette = nlohmann::json::array();
    for (const auto& c : bcm_source_palettes()[static_cast<std::size_t>(d)])
      palette.push_back(rgb_json(c));
    ds.meta = {{"digit_color", rgb_json(digit)}, {"backgrounds", palette}};
    out.sources.push_back(std::move(ds));
  }

  const Rgb& orange = bcm_digit_colors()[kBcmSourceDomains];
  DomainDataset target = empty_domain(kBcmSourceDomains, "bcm_target_orange", 3, test,
                                      test.count, 10);
  for (Index i = 0; i < test.count; ++i) {
    const int label = test.labels[static_cast<std::size_t>(i)];
    paint_bcm(test, i, orange, bcm_target_background(label), target.images.data() + i * 3 * hw);
    target.labels[static_cast<std::size_t>(i)] = label;
    target.digits[static_cast<std::size_t>(i)] = label;
  }
  nlohmann::json palette = nlohmann::json::array();
  for (int c = 0; c < 10; ++c) palette.push_back(rgb_json(bcm_target_background(c)));
  target.meta = {{"digit_color", rgb_json(orange)}, {"backgrounds", palette}};
  out.target = std::move(target);
  return out;
}

// ---------------------------------------------------------------------------
// Colored-MNIST and Rotated-MNIST

std::vector<DomainDataset> gen_colored_mnist(const MnistSet& mnist,
                                             std::span<const double> noise_rates,
                                             std::uint64_t seed) {
  if (noise_rates.empty()) throw ConfigError("at least one noise rate is required");
  for (double d : noise_rates)
    if (!(d >= 0.0 && d <= 1.0))
      throw ConfigError("noise rate " + std::to_string(d) + " outside [0,1]");
  check_mnist_shape(mnist);

  const MergedView merged{mnist};
  Rng order_rng(derive_seed(seed, 0));
  std::vector<Index> order = iota_indices(merged.size());
  shuffle_in_place(order, order_rng);

  const auto chunks = even_chunks(merged.size(), static_cast<Index>(noise_rates.size()));
  const Index hw = mnist.train.image_size();
  std::vector<DomainDataset> out;
  for (std::size_t j = 0; j < noise_rates.size(); ++j) {
    const auto [begin, end] = chunks[j];
    std::ostringstream name;
    name << "cmnist_noise_" << noise_rates[j];
    DomainDataset ds =
        empty_domain(static_cast<int>(j), name.str(), 2, mnist.train, end - begin, 2);
    ds.attributes.resize(static_cast<std::size_t>(end - begin));
    Rng rng(derive_seed(seed, 100 + j));
    for (Index i = 0; i < end - begin; ++i) {
      const Index g = order[static_cast<std::size_t>(begin + i)];
      const RawMnist& raw = merged.raw(g);
      const Index local = merged.local(g);
      const int digit = raw.labels[static_cast<std::size_t>(local)];
      const int coarse = digit < 5 ? 0 : 1;
      const int y = coarse ^ (uniform01(rng) < kColoredLabelNoise ? 1 : 0);
      const int z = y ^ (uniform01(rng) < noise_rates[j] ? 1 : 0);
      // Channel 0 is red (z = 1), channel 1 is green (z = 0).
      float* dst = ds.images.data() + i * 2 * hw;
      float* on = dst + (z == 1 ? 0 : hw);
      float* off = dst + (z == 1 ? hw : 0);
      for (Index p = 0; p < hw; ++p) {
        on[p] = raw.pixel(local, p);
        off[p] = 0.0f;
      }
      ds.labels[static_cast<std::size_t>(i)] = y;
      ds.digits[static_cast<std::size_t>(i)] = digit;
      ds.attributes[static_cast<std::size_t>(i)] = z;
    }
    ds.meta = {{"noise_rate", noise_rates[j]}, {"label_noise", kColoredLabelNoise}};
    out.push_back(std::move(ds));
  }
  return out;
}

void rotate_image(std::span<const float> src, Index height, Index width, double degrees,
                  std::span<float> dst) {
  const auto n = static_cast<std::size_t>(height * width);
  if (src.size() != n || dst.size() != n) throw ShapeError("rotate_image: buffer size mismatch");
  if (degrees == 0.0) {
    std::copy(src.begin(), src.end(), dst.begin());
    return;
  }
  const double theta = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  auto at = [&](Index r, Index col) -> double {
    if (r < 0 || r >= height || col < 0 || col >= width) return 0.0;
    return src[static_cast<std::size_t>(r * width + col)];
  };
  // Inverse map; positive angles turn the picture counter-clockwise on screen.
  for (Index r = 0; r < height; ++r) {
    for (Index col = 0; col < width; ++col) {
      const double dx = static_cast<double>(col) - cx;
      const double dy = static_cast<double>(r) - cy;
      const double sx = cx + c * dx - s * dy;
      const double sy = cy + s * dx + c * dy;
      const double fx = std::floor(sx);
      const double fy = std::floor(sy);
      const double ax = sx - fx;
      const double ay = sy - fy;
      const auto x0 = static_cast<Index>(fx);
      const auto y0 = static_cast<Index>(fy);
      const double v = (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x0 + 1)) +
                       ay * ((1 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1));
      dst[static_cast<std::size_t>(r * width + col)] = static_cast<float>(v);
    }
  }
}

std::vector<DomainDataset> gen_rotated_mnist(const MnistSet& mnist, std::span<const double> angles,
                                             std::uint64_t seed) {
  if (angles.empty()) throw ConfigError("at least one angle is required");
  check_mnist_shape(mnist);

  const MergedView merged{mnist};
  Rng order_rng(derive_seed(seed, 0));
  std::vector<Index> order = iota_indices(merged.size());
  shuffle_in_place(order, order_rng);

  const auto chunks = even_chunks(merged.size(), static_cast<Index>(angles.size()));
  const Index h = mnist.train.rows;
  const Index w = mnist.train.cols;
  std::vector<float> gray(static_cast<std::size_t>(h * w));
  std::vector<DomainDataset> out;
  for (std::size_t j = 0; j < angles.size(); ++j) {
    const auto [begin, end] = chunks[j];
    std::ostringstream name;
    name << "rmnist_" << angles[j];
    DomainDataset ds =
        empty_domain(static_cast<int>(j), name.str(), 1, mnist.train, end - begin, 10);
    for (Index i = 0; i < end - begin; ++i) {
      const Index g = order[static_cast<std::size_t>(begin + i)];
      const RawMnist& raw = merged.raw(g);
      const Index local = merged.local(g);
      for (Index p = 0; p < h * w; ++p) gray[static_cast<std::size_t>(p)] = raw.pixel(local, p);
      rotate_image(gray, h, w, angles[j],
                   std::span<float>(ds.images.data() + i * h * w, static_cast<std::size_t>(h * w)));
      const int digit = raw.labels[static_cast<std::size_t>(local)];
      ds.labels[static_cast<std::size_t>(i)] = digit;
      ds.digits[static_cast<std::size_t>(i)] = digit;
    }
    ds.meta = {{"angle", angles[j]}};
    out.push_back(std::move(ds));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits and batches

SplitPlan split_train_val(Index n, double fraction, std::uint64_t seed) {
  if (n < 5) throw InputError("split needs at least 5 samples, got " + std::to_string(n));
  if (!(fraction >= 0.0 && fraction < 1.0))
    throw ConfigError("validation fraction must lie in [0,1)");
  Rng rng(seed);
  std::vector<Index> order = iota_indices(n);
  shuffle_in_place(order, rng);
  const auto n_val = static_cast<std::ptrdiff_t>(std::llround(fraction * static_cast<double>(n)));
  SplitPlan plan;
  plan.fraction = fraction;
  plan.val_indices.assign(order.begin(), order.begin() + n_val);
  plan.train_indices.assign(order.begin() + n_val, order.end());
  std::sort(plan.val_indices.begin(), plan.val_indices.end());
  std::sort(plan.train_indices.begin(), plan.train_indices.end());
  return plan;
}

template <typename Scalar>
DomainBatch<Scalar> gather_batch(const DomainDataset& dataset, std::span<const Index> indices,
                                 int domain_index) {
  const Index k = static_cast<Index>(indices.size());
  const Index per = dataset.image_size();
  DomainBatch<Scalar> batch;
  batch.images = Tensor<Scalar>({k, dataset.channels, dataset.height, dataset.width});
  batch.labels.resize(indices.size());
  batch.domains.assign(indices.size(), domain_index);
  for (Index i = 0; i < k; ++i) {
    const Index src = indices[static_cast<std::size_t>(i)];
    if (src < 0 || src >= dataset.size()) throw InputError("batch index out of range");
    batch.images.array().segment(i * per, per) =
        dataset.images.array().segment(src * per, per).template cast<Scalar>();
    batch.labels[static_cast<std::size_t>(i)] = dataset.labels[static_cast<std::size_t>(src)];
  }
  return batch;
}

template <typename Scalar>
DomainBatch<Scalar> concat_batches(std::span<const DomainBatch<Scalar>> batches) {
  if (batches.empty()) return {};
  Shape shape = batches.front().images.shape();
  Index total = 0;
  for (const auto& b : batches) {
    if (!std::equal(shape.begin() + 1, shape.end(), b.images.shape().begin() + 1,
                    b.images.shape().end()))
      throw ShapeError("concat_batches: image shapes differ");
    total += b.size();
  }
  shape[0] = total;
  DomainBatch<Scalar> out;
  out.images = Tensor<Scalar>(shape);
  Index offset = 0;
  for (const auto& b : batches) {
    out.images.array().segment(offset, b.images.size()) = b.images.array();
    offset += b.images.size();
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    out.domains.insert(out.domains.end(), b.domains.begin(), b.domains.end());
  }
  return out;
}

BatchSampler::BatchSampler(std::vector<Index> pool, std::uint64_t seed)
    : pool_(std::move(pool)), rng_(seed) {
  if (pool_.empty()) throw InputError("cannot sample from an empty domain");
  reshuffle();
}

void BatchSampler::reshuffle() {
  order_ = pool_;
  shuffle_in_place(order_, rng_);
  cursor_ = 0;
}

std::vector<Index> BatchSampler::next(Index batch_size) {
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  while (static_cast<Index>(out.size()) < batch_size) {
    if (cursor_ == order_.size()) {
      reshuffle();
      ++epoch_;
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

std::string BatchSampler::state() const {
  std::ostringstream out;
  out << cursor_ << ' ' << epoch_ << ' ' << order_.size();
  for (Index i : order_) out << ' ' << i;
  out << ' ' << rng_;
  return out.str();
}

void BatchSampler::restore(const std::string& state) {
  std::istringstream in(state);
  std::size_t cursor = 0, epoch = 0, n = 0;
  in >> cursor >> epoch >> n;
  if (!in || n != pool_.size() || cursor > n) throw InputError("sampler state does not match pool");
  std::vector<Index> order(n);
  for (auto& i : order) in >> i;
  Rng rng;
  in >> rng;
  if (!in) throw InputError("malformed sampler state");
  order_ = std::move(order);
  cursor_ = cursor;
  epoch_ = epoch;
  rng_ = rng;
}

template <typename Scalar>
std::vector<DomainBatch<Scalar>> sample_batch(std::span<const DomainDataset* const> domains,
                                              std::span<BatchSampler> samplers,
                                              Index batch_size) {
  if (domains.size() != samplers.size())
    throw InputError("one sampler per domain is required");
  std::vector<DomainBatch<Scalar>> out;
  out.reserve(domains.size());
  for (std::size_t j = 0; j < domains.size(); ++j) {
    const auto idx = samplers[j].next(batch_size);
    out.push_back(gather_batch<Scalar>(*domains[j], idx, static_cast<int>(j)));
  }
  return out;
}

#define DSDI_INSTANTIATE_BATCH(S)                                                             \
  template DomainBatch<S> gather_batch<S>(const DomainDataset&, std::span<const Index>, int); \
  template DomainBatch<S> concat_batches<S>(std::span<const DomainBatch<S>>);                 \
  template std::vector<DomainBatch<S>> sample_batch<S>(std::span<const DomainDataset* const>, \
                                                       std::span<BatchSampler>, Index);
DSDI_INSTANTIATE_BATCH(float)
DSDI_INSTANTIATE_BATCH(double)
#undef DSDI_INSTANTIATE_BATCH

// ---------------------------------------------------------------------------
// Files

void write_domain_file(const std::filesystem::path& path, const DomainDataset& dataset) {
  if (dataset.images.size() != dataset.size() * dataset.image_size())
    throw ShapeError("domain images do not match labels");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  const std::uint32_t header[3] = {kDsdsVersion, static_cast<std::uint32_t>(dataset.size()),
                                   static_cast<std::uint32_t>(dataset.image_size())};
  out.write(kDsdsMagic, 4);
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  out.write(reinterpret_cast<const char*>(dataset.images.data()),
            static_cast<std::streamsize>(dataset.images.size() * sizeof(float)));
  std::vector<std::uint8_t> labels(dataset.labels.begin(), dataset.labels.end());
  out.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size()));
  if (!out) throw InputError("failed writing " + path.string());
}

DomainDataset read_domain_file(const std::filesystem::path& path, Index channels, Index height,
                               Index width) {
  const auto bytes = read_file(path);
  const std::string name = path.filename().string();
  if (bytes.size() < 16) throw ParseError(name + ": truncated header", static_cast<std::int64_t>(bytes.size()));
  if (std::memcmp(bytes.data(), kDsdsMagic, 4) != 0) throw ParseError(name + ": bad magic", 0);
  if (read_le32(bytes, 4) != kDsdsVersion) throw ParseError(name + ": unsupported version", 4);
  const Index n = read_le32(bytes, 8);
  const Index per = read_le32(bytes, 12);
  if (per != channels * height * width)
    throw ParseError(name + ": image size " + std::to_string(per) + " disagrees with sidecar", 12);
  const std::size_t expected =
      16 + static_cast<std::size_t>(n * per) * sizeof(float) + static_cast<std::size_t>(n);
  if (bytes.size() < expected)
    throw ParseError(name + ": truncated, expected " + std::to_string(expected) + " bytes",
                     static_cast<std::int64_t>(bytes.size()));

  DomainDataset d;
  d.channels = channels;
  d.height = height;
  d.width = width;
  d.images = Tensor<float>({n, channels, height, width});
  std::memcpy(d.images.data(), bytes.data() + 16, static_cast<std::size_t>(n * per) * sizeof(float));
  const std::size_t label_offset = 16 + static_cast<std::size_t>(n * per) * sizeof(float);
  d.labels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(label_offset),
                  bytes.begin() + static_cast<std::ptrdiff_t>(label_offset + n));
  return d;
}

DatasetBundle make_bcm_bundle(BcmDatasets data) {
  DatasetBundle b;
  b.kind = "bcm";
  b.domains = std::move(data.sources);
  b.domains.push_back(std::move(data.target));
  b.source_ids = {0, 1, 2};
  b.target_ids = {3};
  return b;
}

DatasetBundle make_cmnist_bundle(std::vector<DomainDataset> domains) {
  DatasetBundle b;
  b.kind = "cmnist";
  b.domains = std::move(domains);
  // The domain with the largest color flip rate is held out.
  const int n = static_cast<int>(b.domains.size());
  for (int j = 0; j + 1 < n; ++j) b.source_ids.push_back(j);
  b.target_ids = {n - 1};
  return b;
}

DatasetBundle make_rmnist_bundle(std::vector<DomainDataset> domains) {
  DatasetBundle b;
  b.kind = "rmnist";
  b.domains = std::move(domains);
  const int n = static_cast<int>(b.domains.size());
  for (int j = 0; j + 1 < n; ++j) b.source_ids.push_back(j);
  b.target_ids = {n - 1};
  return b;
}

nlohmann::json write_dataset_dir(const std::filesystem::path& dir, const DatasetBundle& bundle,
                                 std::uint64_t seed) {
  if (bundle.domains.empty()) throw InputError("dataset has no domains");
  std::filesystem::create_directories(dir);
  const auto& first = bundle.domains.front();
  nlohmann::json side = {{"format", "DSDS"},
                         {"version", kDsdsVersion},
                         {"kind", bundle.kind},
                         {"seed", seed},
                         {"channels", first.channels},
                         {"height", first.height},
                         {"width", first.width},
                         {"n_classes", first.n_classes},
                         {"source_domains", bundle.source_ids},
                         {"target_domains", bundle.target_ids},
                         {"foreground_threshold", kForegroundThreshold}};
  nlohmann::json domains = nlohmann::json::array();
  for (const auto& d : bundle.domains) {
    const std::string file = d.name + ".dsds";
    write_domain_file(dir / file, d);
    const bool is_target =
        std::find(bundle.target_ids.begin(), bundle.target_ids.end(), d.domain_id) !=
        bundle.target_ids.end();
    domains.push_back({{"id", d.domain_id},
                       {"name", d.name},
                       {"file", file},
                       {"role", is_target ? "target" : "source"},
                       {"count", d.size()},
                       {"sha256", file_sha256(dir / file)},
                       {"meta", d.meta}});
  }
  side["domains"] = domains;
  std::ofstream out(dir / "dataset.json");
  out << side.dump(2) << '\n';
  if (!out) throw InputError("cannot write " + (dir / "dataset.json").string());
  return side;
}

DatasetBundle read_dataset_dir(const std::filesystem::path& dir) {
  std::ifstream in(dir / "dataset.json");
  if (!in) throw InputError("missing " + (dir / "dataset.json").string());
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("dataset.json: " + std::string(e.what()), static_cast<std::int64_t>(e.byte));
  }
  DatasetBundle b;
  try {
    b.kind = side.at("kind").get<std::string>();
    const Index c = side.at("channels").get<Index>();
    const Index h = side.at("height").get<Index>();
    const Index w = side.at("width").get<Index>();
    const int classes = side.at("n_classes").get<int>();
    b.source_ids = side.at("source_domains").get<std::vector<int>>();
    b.target_ids = side.at("target_domains").get<std::vector<int>>();
    for (const auto& entry : side.at("domains")) {
      const auto path = dir / entry.at("file").get<std::string>();
      const std::string expected = entry.at("sha256").get<std::string>();
      if (file_sha256(path) != expected)
        throw InputError(path.string() + ": checksum does not match dataset.json");
      DomainDataset d = read_domain_file(path, c, h, w);
      d.domain_id = entry.at("id").get<int>();
      d.name = entry.at("name").get<std::string>();
      d.n_classes = classes;
      d.meta = entry.at("meta");
      if (d.size() != entry.at("count").get<Index>())
        throw InputError(path.string() + ": image count disagrees with dataset.json");
      for (int y : d.labels)
        if (y >= classes) throw InputError(path.string() + ": label out of range");
      b.domains.push_back(std::move(d));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError("dataset.json: " + std::string(e.what()));
  }
  for (std::size_t j = 0; j < b.domains.size(); ++j)
    if (b.domains[j].domain_id != static_cast<int>(j))
      throw InputError("dataset.json: domain ids must be 0..N-1 in order");
  b.sidecar = std::move(side);
  return b;
}

}  // namespace dsdi
