#include "fgc/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "fgc/error.hpp"
#include "fgc/rng.hpp"

namespace fgc::data {

std::span<const double> Dataset::image(std::size_t id) const {
  if (id >= size()) {
    throw ContractError("instance id " + std::to_string(id) + " outside dataset of " +
                        std::to_string(size()));
  }
  return std::span<const double>(images).subspan(id * image_size(), image_size());
}

Tensor Dataset::batch_images(std::span<const std::size_t> ids) const {
  std::vector<double> values;
  values.reserve(ids.size() * image_size());
  for (std::size_t id : ids) {
    auto img = image(id);
    values.insert(values.end(), img.begin(), img.end());
  }
  return Tensor({ids.size(), channels, height, width}, std::move(values));
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> ids) const {
  std::vector<int> out;
  out.reserve(ids.size());
  for (std::size_t id : ids) {
    if (id >= size()) throw ContractError("instance id out of range");
    out.push_back(labels[id]);
  }
  return out;
}

ChannelStats compute_stats(std::span<const double> raw, std::size_t channels,
                           std::size_t pixels_per_channel) {
  const std::size_t per_image = channels * pixels_per_channel;
  if (per_image == 0 || raw.size() % per_image != 0 || raw.empty()) {
    throw DimensionError("compute_stats: pixel buffer does not divide into images");
  }
  const std::size_t n = raw.size() / per_image;
  const double count = static_cast<double>(n * pixels_per_channel);
  ChannelStats s{std::vector<double>(channels, 0.0), std::vector<double>(channels, 0.0)};
  for (std::size_t c = 0; c < channels; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = raw.data() + i * per_image + c * pixels_per_channel;
      for (std::size_t k = 0; k < pixels_per_channel; ++k) acc += p[k];
    }
    s.mean[c] = acc / count;
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = raw.data() + i * per_image + c * pixels_per_channel;
      for (std::size_t k = 0; k < pixels_per_channel; ++k) {
        const double d = p[k] - s.mean[c];
        sq += d * d;
      }
    }
    s.stddev[c] = std::sqrt(sq / count);
    if (!(s.stddev[c] > 0.0)) s.stddev[c] = 1.0;
  }
  return s;
}

void normalize(std::vector<double>& images, std::size_t channels, std::size_t pixels_per_channel,
               const ChannelStats& stats) {
  if (stats.mean.size() != channels || stats.stddev.size() != channels) {
    throw DimensionError("normalization statistics do not match the channel count");
  }
  const std::size_t per_image = channels * pixels_per_channel;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::size_t c = (i % per_image) / pixels_per_channel;
    images[i] = (images[i] - stats.mean[c]) / stats.stddev[c];
  }
}

std::vector<double> denormalize(const Dataset& ds) {
  std::vector<double> raw(ds.images.size());
  const std::size_t hw = ds.height * ds.width;
  const std::size_t per_image = ds.image_size();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const std::size_t c = (i % per_image) / hw;
    raw[i] = ds.images[i] * ds.stats.stddev[c] + ds.stats.mean[c];
  }
  return raw;
}

Geometry geometry_from(const std::string& name) {
  if (name == "bars") return Geometry::bars;
  if (name == "rings") return Geometry::rings;
  if (name == "blobs") return Geometry::blobs;
  throw ConfigError("unknown class geometry '" + name + "' (expected bars, rings or blobs)");
}

std::string to_string(Geometry g) {
  switch (g) {
    case Geometry::bars: return "bars";
    case Geometry::rings: return "rings";
    case Geometry::blobs: return "blobs";
  }
  return "bars";
}

namespace {

// Noise-free class template, values in [0,1].
std::vector<double> class_template(Geometry g, std::size_t cls, std::size_t classes,
                                   std::size_t size) {
  std::vector<double> img(size * size, 0.0);
  const double center = (static_cast<double>(size) - 1.0) / 2.0;
  const double s = static_cast<double>(size);
  const double width = 0.8;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) - center;
      const double dy = static_cast<double>(y) - center;
      double d = 0.0;
      switch (g) {
        case Geometry::bars: {
          const double theta = std::numbers::pi * static_cast<double>(cls) /
                               static_cast<double>(classes);
          const double along = dx * std::cos(theta) + dy * std::sin(theta);
          const double across = -dx * std::sin(theta) + dy * std::cos(theta);
          const double overshoot = std::max(0.0, std::abs(along) - 0.4 * s);
          d = std::hypot(across, overshoot);
          break;
        }
        case Geometry::rings: {
          const double r = s * (0.1 + 0.3 * static_cast<double>(cls) /
                                          static_cast<double>(classes - 1));
          d = std::abs(std::hypot(dx, dy) - r);
          break;
        }
        case Geometry::blobs: {
          const double phi = 2.0 * std::numbers::pi * static_cast<double>(cls) /
                             static_cast<double>(classes);
          const double bx = 0.28 * s * std::cos(phi), by = 0.28 * s * std::sin(phi);
          d = std::hypot(dx - bx, dy - by) / (0.12 * s / width);
          break;
        }
      }
      img[y * size + x] = std::exp(-(d * d) / (2.0 * width * width));
    }
  }
  return img;
}

void check_geometry(const SynthOptions& o) {
  if (o.classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (o.per_class == 0) throw ConfigError("synthetic dataset needs instances per class");
  if (o.noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");
  if (!(o.contrast > 0.0)) throw ConfigError("contrast must be positive");
  if (o.image_size < 8) {
    throw ConfigError("image size " + std::to_string(o.image_size) +
                      " is too small for the class geometry (minimum 8)");
  }
  if (o.geometry == Geometry::rings &&
      0.3 * static_cast<double>(o.image_size) / static_cast<double>(o.classes - 1) < 1.0) {
    throw ConfigError("image size " + std::to_string(o.image_size) + " is too small for " +
                      std::to_string(o.classes) + " distinct ring radii");
  }
  if (o.geometry == Geometry::bars && o.classes > o.image_size) {
    throw ConfigError("image size " + std::to_string(o.image_size) + " is too small for " +
                      std::to_string(o.classes) + " distinct bar orientations");
  }
}

}  // namespace

Dataset synth_clusters(const SynthOptions& options, const std::optional<ChannelStats>& stats,
                       Split split) {
  check_geometry(options);
  Dataset ds;
  ds.channels = 1;
  ds.height = ds.width = options.image_size;
  ds.classes = options.classes;
  ds.split = split;
  const std::size_t pixels = options.image_size * options.image_size;
  std::vector<std::vector<double>> templates;
  for (std::size_t c = 0; c < options.classes; ++c) {
    templates.push_back(class_template(options.geometry, c, options.classes, options.image_size));
  }
  Rng rng(options.seed);
  const std::size_t n = options.classes * options.per_class;
  ds.images.resize(n * pixels);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % options.classes;
    ds.labels[i] = static_cast<int>(cls);
    double* dst = ds.images.data() + i * pixels;
    for (std::size_t p = 0; p < pixels; ++p) {
      dst[p] = options.contrast * templates[cls][p] + (options.noise_sigma > 0.0 ? options.noise_sigma * rng.normal() : 0.0);
    }
  }
  ds.stats = stats ? *stats : compute_stats(ds.images, 1, pixels);
  normalize(ds.images, 1, pixels, ds.stats);
  return ds;
}

namespace {

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset) {
  return (static_cast<std::uint32_t>(bytes[offset]) << 24) |
         (static_cast<std::uint32_t>(bytes[offset + 1]) << 16) |
         (static_cast<std::uint32_t>(bytes[offset + 2]) << 8) |
         static_cast<std::uint32_t>(bytes[offset + 3]);
}

void write_be32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

Dataset read_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path,
                 const std::optional<ChannelStats>& stats, Split split) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (img.size() < 16) {
    throw ParseError(images_path.string() + ": truncated header, expected 16 bytes, got " +
                     std::to_string(img.size()));
  }
  if (read_be32(img, 0) != 0x00000803) {
    throw ParseError(images_path.string() + ": bad magic, expected 0x00000803");
  }
  if (lab.size() < 8) {
    throw ParseError(labels_path.string() + ": truncated header, expected 8 bytes, got " +
                     std::to_string(lab.size()));
  }
  if (read_be32(lab, 0) != 0x00000801) {
    throw ParseError(labels_path.string() + ": bad magic, expected 0x00000801");
  }
  const std::size_t n = read_be32(img, 4), h = read_be32(img, 8), w = read_be32(img, 12);
  const std::size_t n_labels = read_be32(lab, 4);
  const std::size_t img_expected = 16 + n * h * w;
  if (img.size() != img_expected) {
    throw ParseError(images_path.string() + ": expected " + std::to_string(img_expected) +
                     " bytes, got " + std::to_string(img.size()));
  }
  if (lab.size() != 8 + n_labels) {
    throw ParseError(labels_path.string() + ": expected " + std::to_string(8 + n_labels) +
                     " bytes, got " + std::to_string(lab.size()));
  }
  if (n != n_labels) {
    throw ParseError("image count " + std::to_string(n) + " does not match label count " +
                     std::to_string(n_labels));
  }
  if (n == 0 || h == 0 || w == 0) throw ParseError(images_path.string() + ": empty image set");
  Dataset ds;
  ds.channels = 1;
  ds.height = h;
  ds.width = w;
  ds.split = split;
  ds.images.resize(n * h * w);
  for (std::size_t i = 0; i < ds.images.size(); ++i) ds.images[i] = img[16 + i] / 255.0;
  ds.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.classes = static_cast<std::size_t>(max_label) + 1;
  ds.stats = stats ? *stats : compute_stats(ds.images, 1, h * w);
  normalize(ds.images, 1, h * w, ds.stats);
  return ds;
}

void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
  if (ds.channels != 1) throw ContractError("IDX export supports single-channel images only");
  for (int y : ds.labels) {
    if (y < 0 || y > 255) throw ContractError("IDX labels must fit in one byte");
  }
  const auto raw = denormalize(ds);
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw ConfigError("cannot write IDX files next to " + images_path.string());
  write_be32(img, 0x00000803);
  write_be32(img, static_cast<std::uint32_t>(ds.size()));
  write_be32(img, static_cast<std::uint32_t>(ds.height));
  write_be32(img, static_cast<std::uint32_t>(ds.width));
  std::vector<unsigned char> bytes(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(raw[i], 0.0, 1.0) * 255.0));
  }
  img.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  write_be32(lab, 0x00000801);
  write_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int y : ds.labels) lab.put(static_cast<char>(y));
}

BatchPlan batches(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed,
                  std::size_t epoch) {
  if (batch_size == 0 || batch_size > dataset_size) {
    throw ConfigError("batch size " + std::to_string(batch_size) + " must lie in [1, " +
                      std::to_string(dataset_size) + "]");
  }
  BatchPlan plan{seed, epoch, {}};
  std::vector<std::size_t> order(dataset_size);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, epoch));
  rng.shuffle(std::span<std::size_t>(order));
  for (std::size_t start = 0; start < dataset_size; start += batch_size) {
    const std::size_t end = std::min(dataset_size, start + batch_size);
    plan.batches.emplace_back(order.begin() + static_cast<long>(start),
                              order.begin() + static_cast<long>(end));
  }
  return plan;
}

}  // namespace fgc::data
