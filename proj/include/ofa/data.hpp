#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ofa/tensor.hpp"

namespace ofa::data {

/// Square RGB images stored as planar uint8 (3, R, R) per item.
struct Dataset {
  int n_classes = 0;
  int resolution = 64;
  std::vector<uint8_t> pixels;
  std::vector<int> labels;
  std::vector<int64_t> ids;  // stable item ids, used for split assignment

  size_t size() const { return labels.size(); }
  size_t image_bytes() const { return static_cast<size_t>(3) * resolution * resolution; }
  const uint8_t* image(size_t i) const { return pixels.data() + i * image_bytes(); }
  void push(const uint8_t* planar, int label, int64_t id);
  Dataset subset(std::span<const size_t> idx) const;
};

struct Normalization {
  std::array<float, 3> mean{0.0f, 0.0f, 0.0f};
  std::array<float, 3> std{1.0f, 1.0f, 1.0f};
};

struct DatasetSpec {
  std::string kind = "synthetic";  // synthetic | tiny_imagenet
  std::string root;                // tiny_imagenet only
  int n_classes = 8;
  int train_per_class = 50;  // 0 = everything available
  int test_per_class = 20;
  int resolution = 64;
  uint64_t seed = 7;
  double val_fraction = 0.15;
  bool augment = false;  // random crop + horizontal flip on training batches
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);
void to_json(nlohmann::json& j, const Normalization& n);
void from_json(const nlohmann::json& j, Normalization& n);

struct Splits {
  Dataset train, val, test;
  Normalization norm;
};

Splits load_dataset(const DatasetSpec& spec);

/// Class-conditional Gaussian blobs on a noisy background. Each class owns a
/// colour and a centre; images jitter both.
Dataset synthetic_images(int n_classes, int per_class, int resolution, uint64_t seed);

/// Train and test (official val annotations) splits of a Tiny-ImageNet tree.
std::pair<Dataset, Dataset> load_tiny_imagenet(const std::filesystem::path& root, int n_classes, int train_per_class,
                                               int test_per_class, int resolution);

/// Moves the round(fraction * n) items with the smallest seeded hash of their
/// id into the second split. Both halves keep their original order.
std::pair<Dataset, Dataset> split_holdout(const Dataset& d, double fraction, uint64_t seed);

Normalization compute_normalization(const Dataset& d);

/// Normalized float batch (B, 3, R, R) of the given items.
Tensor batch_tensor(const Dataset& d, std::span<const size_t> idx, const Normalization& norm);
/// Same, with random 4-pixel-padded crops and horizontal flips.
Tensor augmented_batch(const Dataset& d, std::span<const size_t> idx, const Normalization& norm,
                       std::mt19937_64& rng);
std::vector<int> batch_labels(const Dataset& d, std::span<const size_t> idx);

/// Seeded shuffle of 0..n-1 for `epoch`, cut into batches; the last one may
/// be short.
std::vector<std::vector<size_t>> make_batches(size_t n, int batch_size, uint64_t seed, int64_t epoch);
/// In-order batches, for evaluation.
std::vector<std::vector<size_t>> sequential_batches(size_t n, int batch_size);

/// Bilinear (half-pixel centres) resize of a (B, C, H, H) batch to r x r,
/// r in {48, 56, 64}. r equal to the input size returns the input.
Tensor resize_batch(const Tensor& x, int r);

struct Image {
  int width = 0, height = 0;
  std::vector<uint8_t> rgb;  // interleaved
};

Image read_image(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& img);
/// Planar (3, r, r) bytes of `img` resized to r x r.
std::vector<uint8_t> to_planar(const Image& img, int r);

}  // namespace ofa::data
