#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "rknet/network.hpp"
#include "rknet/rng.hpp"

namespace rknet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training progress stored next to the weights.
struct TrainingState {
  std::uint64_t epoch = 0;
  CounterRng rng;
};

struct Checkpoint {
  RkNetModel model;
  TrainingState state;
};

// Layout: "RKNT", u32 version, u32 count, then per tensor: u16 name length,
// name, u8 dtype (0 f32, 1 f64, 2 u8, 3 u64), u8 rank, u32 dims, raw
// little-endian values. Parameters and batch-norm running statistics are
// stored under their registry names; "meta.config", "meta.epoch" and
// "meta.rng" carry what is needed to rebuild the model and resume.
void save_checkpoint(RkNetModel& model, const std::string& path, const TrainingState& state = {});

// Throws CheckpointError on bad magic, version mismatch, truncation, or an
// unknown or missing tensor; nothing is returned in that case.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace rknet
