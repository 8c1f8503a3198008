#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rknet/autodiff.hpp"
#include "rknet/blocks.hpp"
#include "rknet/model_spec.hpp"
#include "rknet/ops.hpp"
#include "rknet/rng.hpp"

namespace rknet {

struct ForwardResult {
  Var logits;
  std::vector<Var> period_states;  // final state of each period, before its transition
};

/// One period: r step blocks of a single kind.
struct Period {
  BlockKind kind = BlockKind::Erk;
  std::vector<ErkStepBlock> erk;
  std::vector<IrkStepBlock> irk;
  std::vector<TimeChannelStepBlock> time;

  std::size_t steps() const { return erk.size() + irk.size() + time.size(); }
};

/// Preprocessor -> periods separated by transitions -> postprocessor.
class RkNetModel {
 public:
  // Validates `spec`; throws RuleViolationError naming the first broken rule.
  RkNetModel(ModelSpec spec, std::uint64_t seed, DType dtype = DType::Float32);
  // Copies would silently share subnetworks, so models only move.
  RkNetModel(const RkNetModel&) = delete;
  RkNetModel& operator=(const RkNetModel&) = delete;
  RkNetModel(RkNetModel&&) = default;
  RkNetModel& operator=(RkNetModel&&) = default;

  const ModelSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  DType dtype() const { return dtype_; }

  // `rng` is needed only for dropout in train mode.
  ForwardResult forward(Tape& tape, Var x, Mode mode, CounterRng* rng = nullptr,
                        const BlockProbe* probe = nullptr);
  // Eval-mode logits without recording gradients.
  Tensor predict(const Tensor& x);

  // Deduplicated, in a stable order; names are unique.
  ParameterList parameters();
  BufferList buffers();

  std::size_t num_periods() const { return periods_.size(); }
  Period& period(std::size_t p) { return periods_.at(p); }
  Conv2d& preprocessor() { return pre_; }
  TransitionLayer& transition(std::size_t i) { return transitions_.at(i); }
  BatchNorm2d& post_norm(std::size_t i) { return post_bn_.at(i); }
  Linear& classifier() { return fc_; }

  // Makes every step of period `p` the identity map.
  void zero_increment(std::size_t p);

  double dropout() const { return dropout_; }
  void set_dropout(double p);

  // Trained h_n/u per time-channel period, indexed [period][step]; other
  // periods yield empty rows.
  std::vector<std::vector<double>> step_ratios() const;
  bool has_time_channel() const;

 private:
  ModelSpec spec_;
  std::uint64_t seed_;
  DType dtype_;
  double dropout_ = 0.0;
  Conv2d pre_;
  std::vector<Period> periods_;
  std::vector<TransitionLayer> transitions_;
  std::vector<BatchNorm2d> post_bn_;
  Linear fc_;
};

RkNetModel build_model(const ModelSpec& spec, std::uint64_t seed, DType dtype = DType::Float32);

// Global-average-pools each state and concatenates in order: (N, sum of channels).
Var multiscale_collect(const std::vector<Var>& states);

}  // namespace rknet
