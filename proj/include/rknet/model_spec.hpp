#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

namespace rknet {

enum class BlockKind { Erk, Irk, TimeChannel };

std::string to_string(BlockKind kind);
BlockKind block_kind_from_string(std::string_view text);

/// One period: r time-steps of an s-stage method at a fixed state size.
struct PeriodSpec {
  int s = 1;
  int r = 1;
  int k = 12;
  // Growths per stage. Always 1 for IRK periods.
  int m = 1;
  BlockKind kind = BlockKind::Erk;
  bool bottleneck = false;
  // Applies to the transition that follows this period.
  bool attentional_transition = false;

  // mk for ERK and time-channel periods, k for IRK periods.
  int state_channels() const { return kind == BlockKind::Irk ? k : m * k; }
  // Width of the 1x1 bottleneck conv: k for IRK, 4k otherwise.
  int bottleneck_width() const { return kind == BlockKind::Irk ? k : 4 * k; }

  friend bool operator==(const PeriodSpec&, const PeriodSpec&) = default;
};

struct InputShape {
  int channels = 3;
  int height = 32;
  int width = 32;
  friend bool operator==(const InputShape&, const InputShape&) = default;
};

struct ModelSpec {
  std::vector<PeriodSpec> periods;
  bool multiscale = false;
  int num_classes = 10;
  InputShape input_shape;
  int preprocessor_channels = 0;
  // Reuse one set of increment weights for all time-steps of a period.
  bool share_weights = false;
  // Growth units collapse to a single bias-free 1x1 conv (affine oracle tests).
  bool linear_test_mode = false;
  // Sign of u for time-channel periods; every ratio h_n/u carries it.
  int u_sign = 1;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

enum class Rule {
  ErkRule1,
  ErkRule2,
  ErkRule3,
  IrkRule1,
  IrkRule2,
  IrkRule3,
  TimeChannel,
  Spatial,
  Config,
};

// "ERK Rule 1", "IRK Rule 3", ...
std::string rule_label(Rule rule);

struct Violation {
  Rule rule;
  std::string message;  // prefixed with "[<rule label>] "
};

class ModelNameError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A conversion or build request that breaks a block construction rule.
class RuleViolationError : public std::invalid_argument {
 public:
  explicit RuleViolationError(Violation v)
      : std::invalid_argument(v.message), violation_(std::move(v)) {}
  const Violation& violation() const { return violation_; }

 private:
  Violation violation_;
};

// name = "RKNet-" term {"_" term} ; term = int "x" int ; int = nonzero-digit {digit}
// The multiplication sign U+00D7 is accepted in place of 'x'.
std::vector<std::pair<int, int>> parse_model_name(std::string_view name);
std::string render_model_name(const std::vector<std::pair<int, int>>& terms);
std::string render_model_name(const ModelSpec& spec);

std::vector<Violation> validate_spec(const ModelSpec& spec);

// Each block i: m = input_channels[i] / k, s = depth[i] / m, giving an ERK period with r = 1.
ModelSpec convert_densenet(const std::vector<int>& block_depths, int growth_rate,
                           const std::vector<int>& input_channels_per_block,
                           int num_classes = 10, InputShape input_shape = {});
// Each clique block with L Stage-I layers becomes an IRK period with s = L, r = 1.
ModelSpec convert_cliquenet(const std::vector<int>& stage1_layers, int growth_rate,
                            int num_classes = 10, InputShape input_shape = {});

// Trainable parameter count derived from layer shapes (BN running stats excluded).
std::int64_t count_parameters(const ModelSpec& spec);
std::int64_t conv_parameter_count(int out_channels, int in_channels, int kernel);

// Model config JSON: name, k, m, kind, bottleneck, attentional_transition (scalar or per-period
// list), multiscale, num_classes, input_shape; optional share_weights, linear_test_mode, u_sign,
// preprocessor_channels.
ModelSpec spec_from_json(const nlohmann::json& config);
nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec load_spec_file(const std::string& path);

}  // namespace rknet
