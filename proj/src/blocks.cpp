#include "rknet/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace rknet {

namespace {

Tensor he_normal(const Shape& shape, std::size_t fan_in, DType dtype, CounterRng rng) {
  Tensor t(shape, dtype);
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, std * rng.normal());
  return t;
}

Tensor xavier_uniform(std::size_t out, std::size_t in, DType dtype, CounterRng rng) {
  Tensor t({out, in}, dtype);
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(-limit, limit));
  return t;
}

Var concat_or_single(const std::vector<Var>& parts) {
  return parts.size() == 1 ? parts.front() : ops::concat_channels(parts);
}

Var sum_onto(Var base, const std::vector<Var>& terms) {
  Var acc = base;
  for (const auto& t : terms) acc = ops::add(acc, t);
  return acc;
}

void probe_value(Tape& tape, Var v, const std::function<void(std::size_t, Tensor&)>& hook,
                 std::size_t index) {
  if (hook) hook(index, tape.mutable_value(v));
}

void require_channels(Var y, std::size_t expected, const char* block) {
  const auto& shape = y.shape();
  if (shape.size() != 4 || shape[1] != expected) {
    throw ShapeError(std::string(block) + ": state must have " + std::to_string(expected) +
                     " channels, got shape " + shape_to_string(shape));
  }
}

}  // namespace

Conv2d::Conv2d(std::string name, std::size_t out, std::size_t in, std::size_t kernel,
               std::size_t stride_, std::size_t pad_, DType dtype, const CounterRng& init)
    : weight(name, he_normal({out, in, kernel, kernel}, in * kernel * kernel, dtype, init.fork(name))),
      stride(stride_),
      pad(pad_) {}

Var Conv2d::forward(Tape& tape, Var x) {
  return ops::conv2d(x, tape.parameter(weight), stride, pad);
}

BatchNorm2d::BatchNorm2d(const std::string& name_, std::size_t channels, DType dtype)
    : name(name_),
      gamma(name_ + ".gamma", Tensor::full({channels}, 1.0, dtype)),
      beta(name_ + ".beta", Tensor::zeros({channels}, dtype)),
      stats(channels, dtype) {}

Var BatchNorm2d::forward(Tape& tape, Var x, Mode mode) {
  return ops::batchnorm2d(x, tape.parameter(gamma), tape.parameter(beta), stats, mode);
}

void BatchNorm2d::collect(ParameterList& params, BufferList& buffers) {
  params.push_back(&gamma);
  params.push_back(&beta);
  buffers.emplace_back(name + ".running_mean", &stats.mean);
  buffers.emplace_back(name + ".running_var", &stats.var);
}

Linear::Linear(const std::string& name, std::size_t out, std::size_t in, DType dtype,
               const CounterRng& init)
    : weight(name + ".weight", xavier_uniform(out, in, dtype, init.fork(name + ".weight"))),
      bias(name + ".bias", Tensor::zeros({out}, dtype)) {}

Var Linear::forward(Tape& tape, Var x) {
  return ops::fully_connected(x, tape.parameter(weight), tape.parameter(bias));
}

GrowthUnit::GrowthUnit(const std::string& name, std::size_t features, std::size_t raw_channels,
                       std::size_t growth, const SubnetConfig& config, DType dtype,
                       const CounterRng& init)
    : features_(features),
      raw_(raw_channels),
      growth_(growth),
      linear_(config.linear_test_mode),
      bottleneck_(config.bottleneck && !config.linear_test_mode) {
  const std::size_t in = features + raw_channels;
  if (linear_) {
    conv1_ = Conv2d(name + ".conv", growth, in, 1, 1, 0, dtype, init);
    return;
  }
  bn1_.emplace(name + ".bn1", features, dtype);
  if (bottleneck_) {
    if (config.bottleneck_width == 0) {
      throw std::invalid_argument(name + ": bottleneck width must be positive");
    }
    conv1_ = Conv2d(name + ".conv1", config.bottleneck_width, in, 1, 1, 0, dtype, init);
    bn2_.emplace(name + ".bn2", config.bottleneck_width, dtype);
    conv2_.emplace(name + ".conv2", growth, config.bottleneck_width, 3, 1, 1, dtype, init);
  } else {
    conv1_ = Conv2d(name + ".conv", growth, in, 3, 1, 1, dtype, init);
  }
}

Var GrowthUnit::forward(Tape& tape, Var features, std::optional<Var> raw, ForwardContext& ctx) {
  require_channels(features, features_, "growth unit");
  if (raw.has_value() != (raw_ > 0)) {
    throw std::invalid_argument("growth unit: raw input presence does not match construction");
  }
  auto drop = [&](Var v) {
    if (ctx.mode == Mode::Train && ctx.dropout > 0.0) {
      if (!ctx.rng) throw std::invalid_argument("dropout in train mode needs an rng");
      return ops::dropout(v, ctx.dropout, ctx.mode, *ctx.rng);
    }
    return v;
  };
  if (linear_) {
    Var in = raw ? ops::concat_channels({features, *raw}) : features;
    return conv1_.forward(tape, in);
  }
  Var h = ops::relu(bn1_->forward(tape, features, ctx.mode));
  if (raw) h = ops::concat_channels({h, *raw});
  h = drop(conv1_.forward(tape, h));
  if (bottleneck_) {
    h = ops::relu(bn2_->forward(tape, h, ctx.mode));
    h = drop(conv2_->forward(tape, h));
  }
  return h;
}

void GrowthUnit::collect(ParameterList& params, BufferList& buffers) {
  if (bn1_) bn1_->collect(params, buffers);
  params.push_back(&conv1_.weight);
  if (bn2_) bn2_->collect(params, buffers);
  if (conv2_) params.push_back(&conv2_->weight);
}

ErkStepBlock::ErkStepBlock(const std::string& name, std::size_t stages, std::size_t m,
                           std::size_t k, const SubnetConfig& config, DType dtype,
                           const CounterRng& init)
    : s_(stages), m_(m), k_(k) {
  if (stages < 1 || m < 1 || k < 1) {
    throw std::invalid_argument(name + ": ERK block needs positive s, m and k");
  }
  const std::size_t c = m * k;
  for (std::size_t i = 0; i < s_; ++i) {
    std::vector<GrowthUnitPtr> stage;
    for (std::size_t u = 0; u < m_; ++u) {
      stage.push_back(std::make_shared<GrowthUnit>(
          name + ".stage" + std::to_string(i + 1) + ".growth" + std::to_string(u + 1),
          c * (1 + i) + k * u, 0, k, config, dtype, init));
    }
    units_.push_back(std::move(stage));
  }
}

ErkStepResult ErkStepBlock::forward(Tape& tape, Var y, ForwardContext& ctx) {
  require_channels(y, state_channels(), "ERK step");
  ErkStepResult result;
  for (std::size_t i = 0; i < s_; ++i) {
    std::vector<Var> inputs{y};
    inputs.insert(inputs.end(), result.groups.begin(), result.groups.end());
    Var features = concat_or_single(inputs);
    std::vector<Var> growths;
    for (std::size_t u = 0; u < m_; ++u) {
      Var g = units_[i][u]->forward(tape, features, std::nullopt, ctx);
      growths.push_back(g);
      if (u + 1 < m_) features = ops::concat_channels({features, g});
    }
    Var group = concat_or_single(growths);
    if (ctx.probe) probe_value(tape, group, ctx.probe->erk_group, i);
    result.groups.push_back(group);
  }
  result.y_next = sum_onto(y, result.groups);
  return result;
}

void ErkStepBlock::zero_increment() {
  for (auto& stage : units_) {
    for (auto& unit : stage) unit->final_weight().value.fill(0.0);
  }
}

void ErkStepBlock::collect(ParameterList& params, BufferList& buffers) {
  for (auto& stage : units_) {
    for (auto& unit : stage) unit->collect(params, buffers);
  }
}

IrkStepBlock::IrkStepBlock(const std::string& name, std::size_t stages, std::size_t k,
                           const SubnetConfig& config, DType dtype, const CounterRng& init)
    : s_(stages), k_(k) {
  if (stages <= 1) {
    throw std::invalid_argument(name + ": IRK block needs more than one stage");
  }
  if (k < 1) throw std::invalid_argument(name + ": IRK block needs positive k");
  for (std::size_t j = 0; j < s_; ++j) {
    init_units_.push_back(std::make_shared<GrowthUnit>(name + ".init" + std::to_string(j + 1),
                                                       k * (1 + j), 0, k, config, dtype, init));
  }
  for (std::size_t i = 0; i < s_; ++i) {
    update_units_.push_back(std::make_shared<GrowthUnit>(
        name + ".update" + std::to_string(i + 1), k * (s_ - 1), 0, k, config, dtype, init));
  }
}

IrkStepResult IrkStepBlock::forward(Tape& tape, Var y, ForwardContext& ctx) {
  require_channels(y, state_channels(), "IRK step");
  IrkStepResult result;
  for (std::size_t j = 0; j < s_; ++j) {
    std::vector<Var> inputs{y};
    inputs.insert(inputs.end(), result.initials.begin(), result.initials.end());
    result.initials.push_back(init_units_[j]->forward(tape, concat_or_single(inputs), std::nullopt, ctx));
  }
  if (ctx.probe && ctx.probe->irk_initial) {
    for (std::size_t j = 0; j < s_; ++j) probe_value(tape, result.initials[j], ctx.probe->irk_initial, j);
  }
  for (std::size_t i = 0; i < s_; ++i) {
    std::vector<Var> inputs(result.updated.begin(), result.updated.end());
    inputs.insert(inputs.end(), result.initials.begin() + static_cast<std::ptrdiff_t>(i) + 1,
                  result.initials.end());
    if (ctx.probe && ctx.probe->irk_update_call) ctx.probe->irk_update_call(i);
    Var u = update_units_[i]->forward(tape, concat_or_single(inputs), std::nullopt, ctx);
    if (ctx.probe) probe_value(tape, u, ctx.probe->irk_updated, i);
    result.updated.push_back(u);
  }
  result.y_next = sum_onto(y, result.updated);
  return result;
}

void IrkStepBlock::zero_increment() {
  for (auto& unit : update_units_) unit->final_weight().value.fill(0.0);
}

void IrkStepBlock::collect(ParameterList& params, BufferList& buffers) {
  for (auto& unit : init_units_) unit->collect(params, buffers);
  for (auto& unit : update_units_) unit->collect(params, buffers);
}

TimeChannelStepBlock::TimeChannelStepBlock(const std::string& name, std::size_t m, std::size_t k,
                                           int sign, const SubnetConfig& config, DType dtype,
                                           const CounterRng& init)
    : m_(m), k_(k), sign_(sign), theta_(name + ".theta", Tensor::zeros({1}, dtype)) {
  if (m < 1 || k < 1) throw std::invalid_argument(name + ": time-channel block needs positive m, k");
  if (sign != 1 && sign != -1) throw std::invalid_argument(name + ": sign must be +1 or -1");
  for (std::size_t u = 0; u < m_; ++u) {
    units_.push_back(std::make_shared<GrowthUnit>(name + ".growth" + std::to_string(u + 1),
                                                  m * k + k * u, 1, k, config, dtype, init));
  }
}

TimeChannelStepBlock::TimeChannelStepBlock(const std::string& name,
                                           const TimeChannelStepBlock& other)
    : m_(other.m_),
      k_(other.k_),
      sign_(other.sign_),
      theta_(name + ".theta", Tensor::zeros({1}, other.theta_.value.dtype())),
      units_(other.units_) {}

TimeStepResult TimeChannelStepBlock::forward(Tape& tape, Var y, Var t_over_u,
                                             ForwardContext& ctx) {
  require_channels(y, state_channels(), "time-channel step");
  const auto& shape = y.shape();
  Var plane = ops::broadcast_scalar(t_over_u, {shape[0], 1, shape[2], shape[3]});
  Var features = y;
  std::vector<Var> growths;
  for (std::size_t u = 0; u < m_; ++u) {
    Var g = units_[u]->forward(tape, features, plane, ctx);
    growths.push_back(g);
    if (u + 1 < m_) features = ops::concat_channels({features, g});
  }
  Var q = concat_or_single(growths);
  TimeStepResult result;
  result.ratio = ops::exp(tape.parameter(theta_));
  if (sign_ < 0) result.ratio = ops::scale(result.ratio, -1.0);
  result.y_next = ops::add(y, ops::scale_by(q, result.ratio));
  result.t_over_u = ops::add(t_over_u, result.ratio);
  return result;
}

double TimeChannelStepBlock::ratio() const { return sign_ * std::exp(theta_.value.at(0)); }

void TimeChannelStepBlock::set_ratio(double ratio) {
  if (!(ratio * sign_ > 0) || !std::isfinite(ratio)) {
    throw std::invalid_argument("step ratio " + std::to_string(ratio) +
                                " must be finite and carry the period sign " +
                                std::to_string(sign_));
  }
  theta_.value.set(0, std::log(std::abs(ratio)));
}

void TimeChannelStepBlock::zero_increment() {
  for (auto& unit : units_) unit->final_weight().value.fill(0.0);
}

void TimeChannelStepBlock::collect(ParameterList& params, BufferList& buffers) {
  params.push_back(&theta_);
  for (auto& unit : units_) unit->collect(params, buffers);
}

AttentionGate::AttentionGate(const std::string& name, std::size_t channels, DType dtype,
                             const CounterRng& init) {
  if (channels < 2) {
    throw std::invalid_argument(name + ": attentional gate needs at least 2 channels");
  }
  fc1_ = Linear(name + ".fc1", channels / 2, channels, dtype, init);
  fc2_ = Linear(name + ".fc2", channels, channels / 2, dtype, init);
}

Var AttentionGate::forward(Tape& tape, Var x) {
  const auto& shape = x.shape();
  if (shape.size() != 4 || shape[1] != fc2_.weight.value.dim(0)) {
    throw ShapeError("attentional gate expects " + std::to_string(fc2_.weight.value.dim(0)) +
                     " channels, got shape " + shape_to_string(shape));
  }
  Var g = ops::global_avg_pool(x);
  g = ops::relu(fc1_.forward(tape, g));
  g = ops::sigmoid(fc2_.forward(tape, g));
  return ops::scale_channels(x, g);
}

void AttentionGate::collect(ParameterList& params) {
  params.push_back(&fc1_.weight);
  params.push_back(&fc1_.bias);
  params.push_back(&fc2_.weight);
  params.push_back(&fc2_.bias);
}

TransitionLayer::TransitionLayer(const std::string& name, std::size_t in, std::size_t out,
                                 bool attentional, DType dtype, const CounterRng& init)
    : bn_(name + ".bn", in, dtype), conv_(name + ".conv", out, in, 1, 1, 0, dtype, init) {
  if (attentional) gate_.emplace(name + ".gate", out, dtype, init);
}

Var TransitionLayer::forward(Tape& tape, Var y, ForwardContext& ctx) {
  const auto& shape = y.shape();
  if (shape.size() != 4 || shape[2] % 2 != 0 || shape[3] % 2 != 0) {
    throw ShapeError("transition needs even spatial dims, got shape " + shape_to_string(shape));
  }
  Var h = conv_.forward(tape, ops::relu(bn_.forward(tape, y, ctx.mode)));
  if (ctx.mode == Mode::Train && ctx.dropout > 0.0) {
    if (!ctx.rng) throw std::invalid_argument("dropout in train mode needs an rng");
    h = ops::dropout(h, ctx.dropout, ctx.mode, *ctx.rng);
  }
  if (gate_) h = gate_->forward(tape, h);
  return ops::avgpool2d(h, 2, 2);
}

void TransitionLayer::collect(ParameterList& params, BufferList& buffers) {
  bn_.collect(params, buffers);
  params.push_back(&conv_.weight);
  if (gate_) gate_->collect(params);
}

}  // namespace rknet
