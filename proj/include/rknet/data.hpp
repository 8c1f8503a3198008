#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rknet/rng.hpp"
#include "rknet/tensor.hpp"

namespace rknet {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Images (N,C,H,W) stored as float32, labels in [0, num_classes).
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  int num_classes = 0;
  std::string split;

  std::size_t size() const { return labels.size(); }
  // Copies the selected samples, converted to `dtype`.
  Tensor gather(std::span<const std::size_t> indices, DType dtype) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
};

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

ChannelStats channel_stats(const Dataset& data);
void normalize(Dataset& data, const ChannelStats& stats);

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;

// One binary batch file: `records` records of 1 label byte + 3072 channel-planar
// pixel bytes, scaled to [0,1].
Dataset parse_cifar10_batch(const std::string& path, std::size_t records = kCifarRecordsPerFile);

enum class Normalization {
  PerChannel,  // mean/std from the training split, applied to both splits
  DivideOnly,  // x / 255 only
};

struct CifarData {
  Dataset train;
  Dataset test;
};

// Reads data_batch_1..5.bin and test_batch.bin from `dir`.
CifarData load_cifar10_binary(const std::string& dir,
                              Normalization norm = Normalization::PerChannel,
                              std::size_t records_per_file = kCifarRecordsPerFile);

/// Filled square, disk, plus-shaped cross and horizontal stripes, drawn in
/// white at a jittered center on black, plus Gaussian noise on every channel.
/// Sample i has label i % classes, so classes are exactly balanced.
Dataset gen_synthetic_shapes(std::size_t n_per_class, int classes = 4, int size = 16,
                             double noise = 0.1, std::uint64_t seed = 0,
                             const std::string& split = "synthetic");

/// Pad-4 random crop plus horizontal flip for one sample.
struct AugmentDraw {
  int dy = 4;  // crop offset into the padded image, 0..8; 4 is the centre
  int dx = 4;
  bool flip = false;
};

AugmentDraw draw_augment(CounterRng& rng);
// Applies `draw` to sample `index` of a (N,C,32,32) batch in place.
void augment_sample(Tensor& batch, std::size_t index, const AugmentDraw& draw);
// Augments every sample of a (N,C,32,32) batch with successive draws from `rng`.
Tensor augment_cifar(const Tensor& x, CounterRng& rng);

}  // namespace rknet
