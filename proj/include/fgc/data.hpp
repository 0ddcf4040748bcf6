#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fgc/tensor.hpp"

namespace fgc::data {

enum class Split { train, test };

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

// Images are stored normalized (per channel, with `stats`); instance ids are
// the row positions 0..N-1 and never change.
struct Dataset {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  std::vector<double> images;  // [N, C, H, W]
  std::vector<int> labels;
  Split split = Split::train;
  ChannelStats stats;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  std::span<const double> image(std::size_t id) const;

  Tensor batch_images(std::span<const std::size_t> ids) const;
  std::vector<int> batch_labels(std::span<const std::size_t> ids) const;
};

// Per-channel mean and (population) standard deviation of raw pixels.
ChannelStats compute_stats(std::span<const double> raw, std::size_t channels,
                           std::size_t pixels_per_channel);
void normalize(std::vector<double>& images, std::size_t channels, std::size_t pixels_per_channel,
               const ChannelStats& stats);
// Inverse of normalize, yielding raw pixel values.
std::vector<double> denormalize(const Dataset& ds);

enum class Geometry { bars, rings, blobs };
Geometry geometry_from(const std::string& name);
std::string to_string(Geometry g);

struct SynthOptions {
  std::size_t classes = 4;
  std::size_t per_class = 500;
  std::size_t image_size = 16;
  Geometry geometry = Geometry::bars;
  double noise_sigma = 0.3;
  // Peak template intensity. At 1.0 the default noise leaves the classes
  // trivially separable and every gate pattern ends up class-pure.
  double contrast = 0.3;
  std::uint64_t seed = 0;
};

// Single-channel images in [0,contrast] before noise: each class is one parametric
// pattern (bar orientation, ring radius or blob position) and every instance
// adds i.i.d. Gaussian pixel noise. Normalized with `stats` when given,
// otherwise with the dataset's own statistics.
Dataset synth_clusters(const SynthOptions& options,
                       const std::optional<ChannelStats>& stats = std::nullopt,
                       Split split = Split::train);

// IDX ubyte files: images magic 0x00000803 (N, H, W), labels 0x00000801.
// Pixels are scaled to [0,1] and normalized with `stats` or the file's own.
Dataset read_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path,
                 const std::optional<ChannelStats>& stats = std::nullopt,
                 Split split = Split::train);
// Writes raw pixels clamped to [0,1] and quantized to bytes.
void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

struct BatchPlan {
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::vector<std::vector<std::size_t>> batches;
};

// Seeded Fisher-Yates permutation of 0..N-1 cut into batches; the last short
// batch is kept.
BatchPlan batches(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed,
                  std::size_t epoch);

}  // namespace fgc::data
