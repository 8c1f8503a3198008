#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rknet/autodiff.hpp"
#include "rknet/ops.hpp"
#include "rknet/rng.hpp"

namespace rknet {

/// Instrumentation hooks. Each receives a mutable forward value so tests can
/// perturb it and observe what changes downstream.
struct BlockProbe {
  // After ERK group i (0-based) is produced.
  std::function<void(std::size_t stage, Tensor& group)> erk_group;
  // After all of Stage-I has run, once per initial value v_j.
  std::function<void(std::size_t stage, Tensor& initial)> irk_initial;
  // After the Stage-II update of stage i.
  std::function<void(std::size_t stage, Tensor& updated)> irk_updated;
  // Every time a Stage-II subnetwork executes.
  std::function<void(std::size_t stage)> irk_update_call;
};

struct ForwardContext {
  Mode mode = Mode::Eval;
  // Required for dropout in train mode.
  CounterRng* rng = nullptr;
  double dropout = 0.0;
  const BlockProbe* probe = nullptr;
};

// Collected (name, pointer) pairs; pointers stay valid while the owner lives.
using ParameterList = std::vector<Parameter*>;
using BufferList = std::vector<std::pair<std::string, Tensor*>>;

struct Conv2d {
  Conv2d() = default;
  Conv2d(std::string name, std::size_t out, std::size_t in, std::size_t kernel, std::size_t stride,
         std::size_t pad, DType dtype, const CounterRng& init);
  Var forward(Tape& tape, Var x);

  Parameter weight;
  std::size_t stride = 1;
  std::size_t pad = 0;
};

struct BatchNorm2d {
  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, std::size_t channels, DType dtype);
  Var forward(Tape& tape, Var x, Mode mode);
  void collect(ParameterList& params, BufferList& buffers);

  std::string name;
  Parameter gamma;
  Parameter beta;
  BatchNormStats stats;
};

// Xavier-initialized weight (out, in) and zero bias.
struct Linear {
  Linear() = default;
  Linear(const std::string& name, std::size_t out, std::size_t in, DType dtype,
         const CounterRng& init);
  Var forward(Tape& tape, Var x);

  Parameter weight;
  Parameter bias;
};

/// Recipe shared by every growth unit in a block.
struct SubnetConfig {
  bool bottleneck = false;
  std::size_t bottleneck_width = 0;
  bool linear_test_mode = false;
};

/// One growth: BN -> ReLU -> 3x3 conv, or BN -> ReLU -> 1x1 -> BN -> ReLU -> 3x3
/// with a bottleneck. `raw_channels` extra inputs are concatenated after the
/// first BN/ReLU so they reach the conv untouched. In linear test mode the
/// unit is a single bias-free 1x1 conv.
class GrowthUnit {
 public:
  GrowthUnit(const std::string& name, std::size_t features, std::size_t raw_channels,
             std::size_t growth, const SubnetConfig& config, DType dtype, const CounterRng& init);

  Var forward(Tape& tape, Var features, std::optional<Var> raw, ForwardContext& ctx);

  std::size_t in_features() const { return features_; }
  std::size_t out_channels() const { return growth_; }
  // Weight of the conv that produces the unit's output.
  Parameter& final_weight() { return bottleneck_ ? conv2_->weight : conv1_.weight; }
  // Weight of the first conv (the only one in linear test mode).
  Parameter& first_weight() { return conv1_.weight; }
  void collect(ParameterList& params, BufferList& buffers);

 private:
  std::size_t features_;
  std::size_t raw_;
  std::size_t growth_;
  bool linear_;
  bool bottleneck_;
  std::optional<BatchNorm2d> bn1_;
  Conv2d conv1_;
  std::optional<BatchNorm2d> bn2_;
  std::optional<Conv2d> conv2_;
};

using GrowthUnitPtr = std::shared_ptr<GrowthUnit>;

struct ErkStepResult {
  Var y_next;
  std::vector<Var> groups;  // s groups of mk channels, group i standing for h b_i z_i
};

/// One explicit RK time-step built from a restricted dense block.
///
/// Stage subnetwork i reads concat(y_n, group_1, ..., group_{i-1}) and grows m
/// times at rate k; its m growths concatenated form group i. The step ends
/// with the summation y_{n+1} = y_n + sum_i group_i.
class ErkStepBlock {
 public:
  ErkStepBlock(const std::string& name, std::size_t stages, std::size_t m, std::size_t k,
               const SubnetConfig& config, DType dtype, const CounterRng& init);
  // Shares the subnetworks of `other`.
  ErkStepBlock(const ErkStepBlock& other) = default;

  ErkStepResult forward(Tape& tape, Var y, ForwardContext& ctx);

  std::size_t stages() const { return s_; }
  std::size_t state_channels() const { return m_ * k_; }
  GrowthUnit& unit(std::size_t stage, std::size_t growth) { return *units_.at(stage).at(growth); }
  // Zeroes every final conv weight so each group is exactly zero.
  void zero_increment();
  void collect(ParameterList& params, BufferList& buffers);

 private:
  std::size_t s_, m_, k_;
  std::vector<std::vector<GrowthUnitPtr>> units_;
};

struct IrkStepResult {
  Var y_next;
  std::vector<Var> initials;  // v_1..v_s from Stage-I
  std::vector<Var> updated;   // updated h b_i z_i from Stage-II
};

/// One implicit RK time-step built from a restricted clique block.
///
/// Stage-I: v_j = J_j(concat(y_n, v_1..v_{j-1})).
/// Stage-II, i = 1..s in order: u_i = I_i(concat(u_1..u_{i-1}, v_{i+1}..v_s)),
/// y_n excluded. Each stage is updated exactly once; y_{n+1} = y_n + sum_i u_i.
class IrkStepBlock {
 public:
  IrkStepBlock(const std::string& name, std::size_t stages, std::size_t k,
               const SubnetConfig& config, DType dtype, const CounterRng& init);
  IrkStepBlock(const IrkStepBlock& other) = default;

  IrkStepResult forward(Tape& tape, Var y, ForwardContext& ctx);

  std::size_t stages() const { return s_; }
  std::size_t state_channels() const { return k_; }
  GrowthUnit& initializer(std::size_t stage) { return *init_units_.at(stage); }
  GrowthUnit& updater(std::size_t stage) { return *update_units_.at(stage); }
  // Zeroes the final conv weights of the Stage-II subnetworks.
  void zero_increment();
  void collect(ParameterList& params, BufferList& buffers);

 private:
  std::size_t s_, k_;
  std::vector<GrowthUnitPtr> init_units_;
  std::vector<GrowthUnitPtr> update_units_;
};

struct TimeStepResult {
  Var y_next;
  Var t_over_u;  // accumulated T/u after this step
  Var ratio;     // h_n / u
};

/// Euler time-step with an explicit time channel and a trainable step ratio.
///
/// A constant plane holding T/u joins the dense block input (it bypasses
/// BN/ReLU). The block grows m times at rate k to produce Q(T/u, y_n), and
/// y_{n+1} = y_n + ratio * Q with ratio = sign * exp(theta).
class TimeChannelStepBlock {
 public:
  TimeChannelStepBlock(const std::string& name, std::size_t m, std::size_t k, int sign,
                       const SubnetConfig& config, DType dtype, const CounterRng& init);
  // New step-ratio parameter, subnetwork shared with `other`.
  TimeChannelStepBlock(const std::string& name, const TimeChannelStepBlock& other);

  TimeStepResult forward(Tape& tape, Var y, Var t_over_u, ForwardContext& ctx);

  std::size_t state_channels() const { return m_ * k_; }
  double ratio() const;
  // Throws if `ratio` does not carry the period's sign.
  void set_ratio(double ratio);
  int sign() const { return sign_; }
  Parameter& theta() { return theta_; }
  GrowthUnit& unit(std::size_t growth) { return *units_.at(growth); }
  void zero_increment();
  void collect(ParameterList& params, BufferList& buffers);

 private:
  std::size_t m_, k_;
  int sign_;
  Parameter theta_;
  std::vector<GrowthUnitPtr> units_;
};

/// Global pool -> FC(C -> C/2) + ReLU -> FC(C/2 -> C) + sigmoid, multiplied
/// channelwise onto the input.
class AttentionGate {
 public:
  AttentionGate(const std::string& name, std::size_t channels, DType dtype,
                const CounterRng& init);
  Var forward(Tape& tape, Var x);
  Linear& squeeze() { return fc1_; }
  Linear& excite() { return fc2_; }
  void collect(ParameterList& params);

 private:
  Linear fc1_;
  Linear fc2_;
};

/// BN -> ReLU -> 1x1 conv [-> attention gate] -> 2x2 average pool, stride 2.
class TransitionLayer {
 public:
  TransitionLayer(const std::string& name, std::size_t in, std::size_t out, bool attentional,
                  DType dtype, const CounterRng& init);
  Var forward(Tape& tape, Var y, ForwardContext& ctx);

  Conv2d& conv() { return conv_; }
  BatchNorm2d& norm() { return bn_; }
  AttentionGate* gate() { return gate_ ? &*gate_ : nullptr; }
  void collect(ParameterList& params, BufferList& buffers);

 private:
  BatchNorm2d bn_;
  Conv2d conv_;
  std::optional<AttentionGate> gate_;
};

}  // namespace rknet
