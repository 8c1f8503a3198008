#include "rknet/train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "rknet/checkpoint.hpp"

namespace rknet {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument(msg); };
  if (epochs < 1) fail("training needs at least 1 epoch, got " + std::to_string(epochs));
  if (batch_size < 1) fail("batch size must be positive, got " + std::to_string(batch_size));
  if (!(lr0 >= 0)) fail("lr0 must be non-negative");
  if (!(momentum >= 0 && momentum < 1)) fail("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0)) fail("weight decay must be non-negative");
  if (!(lr_drop_factor > 0)) fail("lr drop factor must be positive");
  double prev = 0;
  for (double p : lr_drop_points) {
    if (!(p > prev && p < 1)) fail("lr drop points must lie in (0, 1) and strictly increase");
    prev = p;
  }
  const double p = dropout();
  if (!(p >= 0 && p < 1)) fail("dropout rate must lie in [0, 1)");
}

double lr_at_epoch(const TrainConfig& config, int epoch) {
  if (epoch < 0 || epoch >= config.epochs) {
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(config.epochs) + ")");
  }
  double lr = config.lr0;
  for (double point : config.lr_drop_points) {
    if (epoch >= static_cast<int>(std::floor(point * config.epochs))) lr /= config.lr_drop_factor;
  }
  return lr;
}

void sgd_nesterov_update(Tensor& value, const Tensor& grad, Tensor& velocity, double lr,
                         double momentum, double weight_decay) {
  require_same_shape(value, grad, "sgd_nesterov_update (grad)");
  require_same_shape(value, velocity, "sgd_nesterov_update (velocity)");
  require_same_dtype(value, grad, "sgd_nesterov_update (grad)");
  require_same_dtype(value, velocity, "sgd_nesterov_update (velocity)");
  visit_dtype(value.dtype(), [&]<typename T>(std::type_identity<T>) {
    auto w = value.data<T>();
    auto g = grad.data<T>();
    auto v = velocity.data<T>();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]) + weight_decay * static_cast<double>(w[i]);
      const double vi = momentum * static_cast<double>(v[i]) + gi;
      v[i] = static_cast<T>(vi);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * (gi + momentum * vi));
    }
  });
}

void sgd_nesterov_step(std::span<Parameter* const> params, std::vector<Tensor>& velocity,
                       double lr, double momentum, double weight_decay) {
  if (velocity.empty()) {
    for (const auto* p : params) velocity.push_back(Tensor::zeros(p->value.shape(), p->value.dtype()));
  }
  if (velocity.size() != params.size()) {
    throw std::invalid_argument("optimizer holds velocity for " + std::to_string(velocity.size()) +
                                " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    sgd_nesterov_update(params[i]->value, params[i]->grad, velocity[i], lr, momentum,
                        weight_decay);
  }
}

std::string metrics_csv_header() { return "epoch,lr,train_loss,train_acc,test_loss,test_acc"; }

std::string metrics_csv_row(const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6f,%.6f", m.epoch, m.lr, m.train_loss,
                m.train_acc, m.test_loss, m.test_acc);
  return buf;
}

namespace {

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (logits.at(n * K + k) > logits.at(n * K + best)) best = k;
    }
    if (static_cast<int>(best) == labels[n]) ++correct;
  }
  return correct;
}

void check_compatible(const RkNetModel& model, const Dataset& data) {
  if (data.num_classes > model.spec().num_classes) {
    throw std::invalid_argument("dataset '" + data.split + "' has " +
                                std::to_string(data.num_classes) + " classes, model outputs " +
                                std::to_string(model.spec().num_classes));
  }
  if (data.size() == 0) throw std::invalid_argument("dataset '" + data.split + "' is empty");
}

[[noreturn]] void report_non_finite(const Tape& tape, int epoch, std::size_t batch) {
  std::ostringstream msg;
  msg << "non-finite loss at epoch " << epoch << ", batch " << batch;
  if (auto id = tape.first_non_finite()) {
    msg << "; first non-finite tensor is node " << *id << " (" << tape.op_name(*id) << ")";
  }
  throw NonFiniteError(msg.str());
}

}  // namespace

EvalResult evaluate(RkNetModel& model, const Dataset& data, std::size_t batch_size) {
  check_compatible(model, data);
  if (batch_size == 0) throw std::invalid_argument("evaluation batch size must be positive");
  double loss_sum = 0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, data.size());
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto labels = data.gather_labels(idx);
    Tape tape(false);
    auto out = model.forward(tape, tape.constant(data.gather(idx, model.dtype()), "input"),
                             Mode::Eval);
    const Var loss = ops::softmax_cross_entropy(out.logits, labels);
    loss_sum += loss.value().item() * static_cast<double>(idx.size());
    correct += count_correct(out.logits.value(), labels);
  }
  const auto n = static_cast<double>(data.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

std::vector<EpochMetrics> train_epochs(RkNetModel& model, const Dataset& train,
                                       const Dataset& test, const TrainConfig& config,
                                       const TrainOptions& options) {
  config.validate();
  check_compatible(model, train);
  check_compatible(model, test);
  if (config.augment) {
    const auto& s = train.images.shape();
    if (s[2] != 32 || s[3] != 32) {
      throw std::invalid_argument("augmentation needs 32x32 images, got " + shape_to_string(s));
    }
  }
  namespace fs = std::filesystem;
  std::ofstream csv;
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    csv.open(fs::path(options.out_dir) / "metrics.csv", std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write metrics.csv under " + options.out_dir);
    csv << metrics_csv_header() << '\n';
  }

  model.set_dropout(config.dropout());
  const CounterRng root(config.seed);
  const auto params = model.parameters();
  std::vector<Tensor> velocity;
  std::vector<EpochMetrics> history;
  double best_acc = -1;
  const auto bs = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at_epoch(config, epoch);
    const auto e = static_cast<std::uint64_t>(epoch);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng shuffle = root.fork("shuffle").fork(e);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double loss_sum = 0;
    std::size_t correct = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += bs, ++batch_index) {
      const std::span<const std::size_t> idx(order.data() + start,
                                             std::min(bs, order.size() - start));
      Tensor x = train.gather(idx, model.dtype());
      if (config.augment) {
        for (std::size_t b = 0; b < idx.size(); ++b) {
          CounterRng aug = root.fork("augment").fork(e).fork(idx[b]);
          augment_sample(x, b, draw_augment(aug));
        }
      }
      const auto labels = train.gather_labels(idx);
      CounterRng drop = root.fork("dropout").fork(e).fork(batch_index);
      for (auto* p : params) p->zero_grad();
      Tape tape;
      auto out = model.forward(tape, tape.constant(std::move(x), "input"), Mode::Train, &drop);
      const Var loss = ops::softmax_cross_entropy(out.logits, labels);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) report_non_finite(tape, epoch, batch_index);
      tape.backward(loss);
      sgd_nesterov_step(params, velocity, lr, config.momentum, config.weight_decay);
      loss_sum += lv * static_cast<double>(idx.size());
      correct += count_correct(out.logits.value(), labels);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = loss_sum / static_cast<double>(train.size());
    m.train_acc = static_cast<double>(correct) / static_cast<double>(train.size());
    const auto ev = evaluate(model, test);
    m.test_loss = ev.loss;
    m.test_acc = ev.accuracy;
    history.push_back(m);

    if (csv.is_open()) {
      csv << metrics_csv_row(m) << '\n';
      csv.flush();
      const TrainingState state{e + 1, CounterRng(config.seed, e + 1)};
      save_checkpoint(model, (fs::path(options.out_dir) / "final.ckpt").string(), state);
      if (m.test_acc > best_acc) {
        best_acc = m.test_acc;
        save_checkpoint(model, (fs::path(options.out_dir) / "best.ckpt").string(), state);
      }
    }
    if (options.log) *options.log << metrics_csv_row(m) << std::endl;
    if (options.on_epoch) options.on_epoch(m);
  }
  return history;
}

}  // namespace rknet
