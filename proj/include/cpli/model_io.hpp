#pragma once

#include "cpli/network.hpp"
#include "cpli/tensor.hpp"
#include "cpli/trace.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpli {

/// Malformed input file; `offset` is the byte position where parsing failed.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class ChecksumError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class VersionError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  std::string dataset;
  double accuracy = 0;
  double pixel_mean = 0;  // inputs are fed as (x - mean) / std
  double pixel_std = 1;

  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct Checkpoint {
  NetworkSpec spec;
  ModelWeights weights;
  CheckpointMeta meta;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

struct DatasetHandle {
  Tensor images;  // [count, channels, h, w], values in [0, 1]
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::string split;

  std::size_t count() const { return labels.size(); }
  Dims image_dims() const;
  Tensor image(std::size_t i) const;
  /// Subset in the given index order.
  DatasetHandle subset(const std::vector<std::size_t>& indices) const;
  void validate() const;
};

/// IDX container (big-endian magic 0x000008NN, NN = rank). Images load as
/// [count, 1, rows, cols] scaled to [0, 1].
Tensor load_idx_images(const std::filesystem::path& path);
std::vector<std::size_t> load_idx_labels(const std::filesystem::path& path);
DatasetHandle load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                       std::size_t num_classes = 10, std::string split = "train");

/// CIFAR-10 binary batch: 3073-byte records, label byte then 3x32x32 planes.
DatasetHandle load_cifar_binary(const std::filesystem::path& path, std::string split = "train");
DatasetHandle parse_cifar_binary(const std::vector<std::uint8_t>& bytes, std::string split = "train");

struct SynthOptions {
  double blob_sigma = 1.5;
  double jitter = 1.0;     // std of blob-centre displacement, pixels
  double noise = 0.1;      // additive pixel noise std
  std::size_t distractors = 0;  // extra blobs at uniformly random positions
};

/// Gaussian-blob images with one blob position (and channel tint) per class.
DatasetHandle synth_dataset(std::uint64_t seed, std::size_t count, std::size_t classes,
                            const Dims& dims, const SynthOptions& opt = {},
                            std::string split = "train");

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string network_spec_to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const std::string& text);

/// Tab-separated, one record per line after a header line.
void write_trace(std::ostream& os, const PruneTrace& trace);
PruneTrace read_trace(std::istream& is);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace cpli
