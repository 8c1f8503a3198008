#include "rknet/network.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace rknet {

namespace {

std::string step_name(std::size_t p, std::size_t n) {
  return "period" + std::to_string(p + 1) + ".step" + std::to_string(n + 1);
}

ModelSpec checked(ModelSpec spec) {
  const auto violations = validate_spec(spec);
  if (!violations.empty()) throw RuleViolationError(violations.front());
  return spec;
}

}  // namespace

RkNetModel::RkNetModel(ModelSpec spec, std::uint64_t seed, DType dtype)
    : spec_(checked(std::move(spec))), seed_(seed), dtype_(dtype) {
  const CounterRng init(seed);
  const auto& ps = spec_.periods;
  pre_ = Conv2d("pre.conv", static_cast<std::size_t>(spec_.preprocessor_channels),
                static_cast<std::size_t>(spec_.input_shape.channels), 3, 1, 1, dtype, init);
  std::size_t classifier_in = 0;
  for (std::size_t d = 0; d < ps.size(); ++d) {
    const auto& p = ps[d];
    SubnetConfig cfg;
    cfg.bottleneck = p.bottleneck;
    cfg.bottleneck_width = static_cast<std::size_t>(p.bottleneck_width());
    cfg.linear_test_mode = spec_.linear_test_mode;
    const auto s = static_cast<std::size_t>(p.s);
    const auto k = static_cast<std::size_t>(p.k);
    const auto m = static_cast<std::size_t>(p.m);
    Period period;
    period.kind = p.kind;
    for (std::size_t n = 0; n < static_cast<std::size_t>(p.r); ++n) {
      const auto name = step_name(d, n);
      const bool share = spec_.share_weights && n > 0;
      switch (p.kind) {
        case BlockKind::Erk:
          if (share) {
            period.erk.push_back(period.erk.front());
          } else {
            period.erk.emplace_back(name, s, m, k, cfg, dtype, init);
          }
          break;
        case BlockKind::Irk:
          if (share) {
            period.irk.push_back(period.irk.front());
          } else {
            period.irk.emplace_back(name, s, k, cfg, dtype, init);
          }
          break;
        case BlockKind::TimeChannel:
          if (share) {
            period.time.emplace_back(name, period.time.front());
          } else {
            period.time.emplace_back(name, m, k, spec_.u_sign, cfg, dtype, init);
          }
          break;
      }
    }
    periods_.push_back(std::move(period));
    const auto c = static_cast<std::size_t>(p.state_channels());
    if (d + 1 < ps.size()) {
      transitions_.emplace_back("transition" + std::to_string(d + 1), c,
                                static_cast<std::size_t>(ps[d + 1].state_channels()),
                                p.attentional_transition, dtype, init);
    }
    if (spec_.multiscale || d + 1 == ps.size()) {
      post_bn_.emplace_back("post.bn" + std::to_string(d + 1), c, dtype);
      classifier_in += c;
    }
  }
  fc_ = Linear("post.fc", static_cast<std::size_t>(spec_.num_classes), classifier_in, dtype, init);
}

ForwardResult RkNetModel::forward(Tape& tape, Var x, Mode mode, CounterRng* rng,
                                  const BlockProbe* probe) {
  const auto& in = spec_.input_shape;
  const auto& shape = x.shape();
  if (shape.size() != 4 || shape[1] != static_cast<std::size_t>(in.channels) ||
      shape[2] != static_cast<std::size_t>(in.height) ||
      shape[3] != static_cast<std::size_t>(in.width)) {
    throw ShapeError("model expects input (N," + std::to_string(in.channels) + "," +
                     std::to_string(in.height) + "," + std::to_string(in.width) + "), got " +
                     shape_to_string(shape));
  }
  if (x.dtype() != dtype_) {
    throw std::invalid_argument("model dtype is " + to_string(dtype_) + ", input is " +
                                to_string(x.dtype()));
  }
  ForwardContext ctx{mode, rng, dropout_, probe};
  ForwardResult result;
  Var y = pre_.forward(tape, x);
  for (std::size_t d = 0; d < periods_.size(); ++d) {
    auto& period = periods_[d];
    for (auto& block : period.erk) y = block.forward(tape, y, ctx).y_next;
    for (auto& block : period.irk) y = block.forward(tape, y, ctx).y_next;
    if (!period.time.empty()) {
      Var t = tape.constant(Tensor::zeros({1}, dtype_), "time_origin");
      for (auto& block : period.time) {
        auto step = block.forward(tape, y, t, ctx);
        y = step.y_next;
        t = step.t_over_u;
      }
    }
    result.period_states.push_back(y);
    if (d < transitions_.size()) y = transitions_[d].forward(tape, y, ctx);
  }
  std::vector<Var> collected;
  const std::size_t first = spec_.multiscale ? 0 : periods_.size() - 1;
  for (std::size_t d = first; d < periods_.size(); ++d) {
    auto& bn = post_bn_[d - first];
    collected.push_back(ops::relu(bn.forward(tape, result.period_states[d], mode)));
  }
  result.logits = fc_.forward(tape, multiscale_collect(collected));
  return result;
}

Tensor RkNetModel::predict(const Tensor& x) {
  Tape tape(false);
  return forward(tape, tape.constant(x, "input"), Mode::Eval).logits.value();
}

ParameterList RkNetModel::parameters() {
  ParameterList params;
  BufferList buffers;
  params.push_back(&pre_.weight);
  for (std::size_t d = 0; d < periods_.size(); ++d) {
    for (auto& b : periods_[d].erk) b.collect(params, buffers);
    for (auto& b : periods_[d].irk) b.collect(params, buffers);
    for (auto& b : periods_[d].time) b.collect(params, buffers);
    if (d < transitions_.size()) transitions_[d].collect(params, buffers);
  }
  for (auto& bn : post_bn_) bn.collect(params, buffers);
  params.push_back(&fc_.weight);
  params.push_back(&fc_.bias);
  std::unordered_set<const Parameter*> seen;
  ParameterList unique;
  for (auto* p : params) {
    if (seen.insert(p).second) unique.push_back(p);
  }
  return unique;
}

BufferList RkNetModel::buffers() {
  ParameterList params;
  BufferList buffers;
  for (std::size_t d = 0; d < periods_.size(); ++d) {
    for (auto& b : periods_[d].erk) b.collect(params, buffers);
    for (auto& b : periods_[d].irk) b.collect(params, buffers);
    for (auto& b : periods_[d].time) b.collect(params, buffers);
    if (d < transitions_.size()) transitions_[d].collect(params, buffers);
  }
  for (auto& bn : post_bn_) bn.collect(params, buffers);
  std::unordered_set<const Tensor*> seen;
  BufferList unique;
  for (auto& b : buffers) {
    if (seen.insert(b.second).second) unique.push_back(b);
  }
  return unique;
}

void RkNetModel::zero_increment(std::size_t p) {
  auto& period = periods_.at(p);
  for (auto& b : period.erk) b.zero_increment();
  for (auto& b : period.irk) b.zero_increment();
  for (auto& b : period.time) b.zero_increment();
}

void RkNetModel::set_dropout(double p) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw std::invalid_argument("dropout rate must lie in [0, 1), got " + std::to_string(p));
  }
  dropout_ = p;
}

std::vector<std::vector<double>> RkNetModel::step_ratios() const {
  std::vector<std::vector<double>> out;
  for (const auto& period : periods_) {
    std::vector<double> row;
    for (const auto& b : period.time) row.push_back(b.ratio());
    out.push_back(std::move(row));
  }
  return out;
}

bool RkNetModel::has_time_channel() const {
  for (const auto& period : periods_) {
    if (!period.time.empty()) return true;
  }
  return false;
}

RkNetModel build_model(const ModelSpec& spec, std::uint64_t seed, DType dtype) {
  return RkNetModel(spec, seed, dtype);
}

Var multiscale_collect(const std::vector<Var>& states) {
  if (states.empty()) throw std::invalid_argument("multiscale_collect needs at least one state");
  std::vector<Var> pooled;
  for (const auto& s : states) pooled.push_back(ops::global_avg_pool(s));
  return pooled.size() == 1 ? pooled.front() : ops::concat_channels(pooled);
}

}  // namespace rknet
