#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rknet/data.hpp"
#include "rknet/network.hpp"

namespace rknet {

struct TrainConfig {
  int epochs = 300;
  int batch_size = 64;
  double lr0 = 0.1;
  double momentum = 0.9;  // Nesterov
  double weight_decay = 1e-4;
  std::vector<double> lr_drop_points{0.5, 0.75};
  double lr_drop_factor = 10.0;
  bool augment = false;
  // Unset: 0.2 without augmentation, 0 with it.
  std::optional<double> dropout_p;
  std::uint64_t seed = 0;

  double dropout() const { return dropout_p.value_or(augment ? 0.0 : 0.2); }
  // Throws std::invalid_argument describing the first bad field.
  void validate() const;
};

// Step schedule: lr0 divided by lr_drop_factor at each floor(point * epochs).
double lr_at_epoch(const TrainConfig& config, int epoch);

// g = grad + wd * value; v = momentum * v + g; value -= lr * (g + momentum * v).
void sgd_nesterov_update(Tensor& value, const Tensor& grad, Tensor& velocity, double lr,
                         double momentum, double weight_decay);
// Updates every parameter from its grad; `velocity` is resized on first use.
void sgd_nesterov_step(std::span<Parameter* const> params, std::vector<Tensor>& velocity,
                       double lr, double momentum, double weight_decay);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;
  double test_loss = 0;
  double test_acc = 0;

  friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
};

/// Raised when the loss turns NaN or infinite; names the first bad tensor.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Eval mode, no augmentation, no dropout.
EvalResult evaluate(RkNetModel& model, const Dataset& data, std::size_t batch_size = 200);

struct TrainOptions {
  // When set, metrics.csv, final.ckpt and best.ckpt are written here.
  std::string out_dir;
  // Progress lines, one per epoch.
  std::ostream* log = nullptr;
  std::function<void(const EpochMetrics&)> on_epoch;
};

std::vector<EpochMetrics> train_epochs(RkNetModel& model, const Dataset& train,
                                       const Dataset& test, const TrainConfig& config,
                                       const TrainOptions& options = {});

}  // namespace rknet
