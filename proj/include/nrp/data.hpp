#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nrp/tensor.hpp"

namespace nrp::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Images [N,C,H,W] in [0,1] with one label per image.
struct ImageBatch {
  Tensor images;
  std::vector<int> labels;
  std::int64_t size() const { return images.defined() ? images.dim(0) : 0; }
};

/// Whole dataset held as u8 pixels (the on-disk contract) plus labels.
struct Dataset {
  std::int64_t count = 0;
  int channels = 3;
  int height = 32;
  int width = 32;
  int num_classes = 10;
  std::vector<std::uint8_t> pixels;  // count * C * H * W, channel-major per image
  std::vector<int> labels;

  std::int64_t image_bytes() const { return static_cast<std::int64_t>(channels) * height * width; }
  /// Decodes the given samples to f32 (u8 / 255).
  ImageBatch batch(std::span<const std::int64_t> indices, DType dtype = DType::F32) const;
  ImageBatch slice(std::int64_t begin, std::int64_t count, DType dtype = DType::F32) const;
  /// First `n` samples as a new dataset.
  Dataset head(std::int64_t n) const;
  void validate() const;
};

/// Oriented-grating textures, one orientation/frequency/colour signature per
/// class, on random backgrounds with pixel noise. Fully determined by SyntheticSpec.
struct SyntheticSpec {
  std::int64_t count = 2000;
  int num_classes = 10;
  int size = 32;
  double contrast = 0.07;
  double color_cue = 0.0;
  double noise = 0.02;
  double orientation_jitter = 0.06;  // radians
  std::uint64_t seed = 1;
};
Dataset make_synthetic(const SyntheticSpec& spec);

/// CIFAR-10 binary: records of 1 label byte + 3072 pixel bytes (R, G, B planes).
Dataset read_cifar10_file(const std::filesystem::path& path);
/// Reads data_batch_1..5 (train) or test_batch (test) from a directory.
Dataset load_cifar10(const std::filesystem::path& dir, bool train);

/// "IMGB" container: magic, u32 LE count/C/H/W, count label bytes, pixel bytes.
Dataset read_imgb(const std::filesystem::path& path);
void write_imgb(const Dataset& data, const std::filesystem::path& path);

/// Source description parsed from a string:
///   synthetic[:count=N,seed=S,classes=K,size=H]   cifar10:<dir>[:train|test]   imgb:<file>
struct DatasetHandle {
  enum class Source { Synthetic, Cifar10, Imgb };
  Source source = Source::Synthetic;
  std::filesystem::path path;
  bool train = true;
  SyntheticSpec synthetic;

  static DatasetHandle parse(const std::string& text);
  std::string describe() const;
};
Dataset load_dataset(const DatasetHandle& handle);

/// Visits a dataset in batches, in an order fixed by the seed (or in storage
/// order when seed is empty). Epochs reshuffle from a forked stream.
class BatchStream {
 public:
  BatchStream(const Dataset& data, std::int64_t batch_size, std::optional<std::uint64_t> seed,
              bool drop_last = false);
  /// Next batch; wraps into a new epoch when the current one is exhausted.
  ImageBatch next();
  /// Batches in one epoch.
  std::int64_t batches_per_epoch() const;
  std::int64_t epoch() const { return epoch_; }

 private:
  void reshuffle();

  const Dataset* data_;
  std::int64_t batch_size_;
  std::optional<std::uint64_t> seed_;
  bool drop_last_;
  std::vector<std::int64_t> order_;
  std::int64_t cursor_ = 0;
  std::int64_t epoch_ = 0;
};

/// Writes `bytes` to `path` atomically (temporary sibling, then rename).
void atomic_write(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void atomic_write_text(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace nrp::io
