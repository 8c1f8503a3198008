#include "rknet/cli.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "rknet/checkpoint.hpp"
#include "rknet/data.hpp"
#include "rknet/model_spec.hpp"
#include "rknet/network.hpp"
#include "rknet/rk.hpp"
#include "rknet/train.hpp"

namespace rknet::cli {

namespace {

using nlohmann::json;

// A user-facing input problem: exit code 1.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

// Model spec from a config file: either the model object itself or {"model": ..., "train": ...}.
json model_section(const json& config) {
  return config.contains("model") ? config.at("model") : config;
}

TrainConfig train_section(const json& config) {
  TrainConfig tc;
  if (!config.contains("train")) return tc;
  const auto& t = config.at("train");
  try {
    tc.epochs = t.value("epochs", tc.epochs);
    tc.batch_size = t.value("batch_size", tc.batch_size);
    tc.lr0 = t.value("lr0", tc.lr0);
    tc.momentum = t.value("momentum", tc.momentum);
    tc.weight_decay = t.value("weight_decay", tc.weight_decay);
    tc.lr_drop_points = t.value("lr_drop_points", tc.lr_drop_points);
    tc.lr_drop_factor = t.value("lr_drop_factor", tc.lr_drop_factor);
    tc.augment = t.value("augment", tc.augment);
    if (t.contains("dropout")) tc.dropout_p = t.at("dropout").get<double>();
    tc.seed = t.value("seed", tc.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config section 'train': ") + e.what());
  }
  return tc;
}

struct DataOptions {
  std::string source;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 100;
  double noise = 0.15;
};

void add_data_options(CLI::App* cmd, DataOptions& d) {
  cmd->add_option("--data", d.source, "synthetic | cifar10:<dir>")->required();
  cmd->add_option("--train-per-class", d.train_per_class, "synthetic training samples per class")
      ->capture_default_str();
  cmd->add_option("--test-per-class", d.test_per_class, "synthetic test samples per class")
      ->capture_default_str();
  cmd->add_option("--noise", d.noise, "synthetic noise standard deviation")->capture_default_str();
}

struct Splits {
  Dataset train;
  Dataset test;
};

Splits load_data(const DataOptions& d, const ModelSpec& spec, std::uint64_t seed) {
  const auto& in = spec.input_shape;
  if (d.source == "synthetic") {
    if (in.channels != 3 || in.height != in.width) {
      throw UsageError("synthetic data is 3-channel square; model expects " +
                       std::to_string(in.channels) + "x" + std::to_string(in.height) + "x" +
                       std::to_string(in.width));
    }
    const int classes = std::min(4, spec.num_classes);
    const CounterRng root(seed);
    Splits s;
    s.train = gen_synthetic_shapes(d.train_per_class, classes, in.height, d.noise,
                                   root.fork("data.train").next_u64(), "train");
    s.test = gen_synthetic_shapes(d.test_per_class, classes, in.height, d.noise,
                                  root.fork("data.test").next_u64(), "test");
    return s;
  }
  const std::string prefix = "cifar10:";
  if (d.source.rfind(prefix, 0) == 0) {
    if (in.channels != 3 || in.height != 32 || in.width != 32) {
      throw UsageError("CIFAR-10 images are 3x32x32; the model input shape differs");
    }
    auto c = load_cifar10_binary(d.source.substr(prefix.size()));
    return {std::move(c.train), std::move(c.test)};
  }
  throw UsageError("unknown --data '" + d.source + "' (expected synthetic or cifar10:<dir>)");
}

DType parse_dtype(const std::string& s) {
  if (s == "float32") return DType::Float32;
  if (s == "float64") return DType::Float64;
  throw UsageError("unknown dtype '" + s + "' (float32 or float64)");
}

int cmd_build(const std::string& config_path, bool summary, std::ostream& out,
              std::ostream& err) {
  const ModelSpec spec = spec_from_json(model_section(read_json_file(config_path)));
  const auto violations = validate_spec(spec);
  if (!violations.empty()) {
    for (const auto& v : violations) err << v.message << '\n';
    return kValidationError;
  }
  if (!summary) {
    out << "total_parameters=" << count_parameters(spec) << '\n';
    return kOk;
  }
  RkNetModel model(spec, 0);
  const auto params = model.parameters();
  out << render_model_name(spec) << '\n';
  out << "period,kind,s,r,k,m,channels,params\n";
  for (std::size_t d = 0; d < spec.periods.size(); ++d) {
    const auto& p = spec.periods[d];
    const std::string prefix = "period" + std::to_string(d + 1) + ".";
    std::int64_t n = 0;
    for (const auto* q : params) {
      if (q->name.rfind(prefix, 0) == 0) n += static_cast<std::int64_t>(q->value.numel());
    }
    out << d + 1 << ',' << to_string(p.kind) << ',' << p.s << ',' << p.r << ',' << p.k << ','
        << p.m << ',' << p.state_channels() << ',' << n << '\n';
  }
  out << "total_parameters=" << count_parameters(spec) << '\n';
  return kOk;
}

struct TrainArgs {
  std::string config;
  DataOptions data;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<double> lr;
  std::optional<double> dropout;
  bool augment = false;
  std::string dtype = "float32";
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const json config = read_json_file(a.config);
  const ModelSpec spec = spec_from_json(model_section(config));
  TrainConfig tc = train_section(config);
  if (a.seed) tc.seed = *a.seed;
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.batch_size) tc.batch_size = *a.batch_size;
  if (a.lr) tc.lr0 = *a.lr;
  if (a.dropout) tc.dropout_p = *a.dropout;
  if (a.augment) tc.augment = true;
  tc.validate();
  RkNetModel model(spec, tc.seed, parse_dtype(a.dtype));
  const auto data = load_data(a.data, spec, tc.seed);
  TrainOptions opts;
  opts.out_dir = a.out_dir;
  opts.log = &out;
  out << metrics_csv_header() << '\n';
  train_epochs(model, data.train, data.test, tc, opts);
  return kOk;
}

int cmd_eval(const std::string& ckpt_path, const DataOptions& data,
             std::optional<std::uint64_t> seed, std::ostream& out) {
  auto ckpt = load_checkpoint(ckpt_path);
  const auto splits = load_data(data, ckpt.model.spec(), seed.value_or(ckpt.state.rng.key()));
  const auto r = evaluate(ckpt.model, splits.test);
  out << "loss=" << fixed6(r.loss) << " acc=" << fixed6(r.accuracy) << '\n';
  return kOk;
}

struct ConvertArgs {
  std::string from;
  std::vector<int> layers;
  int growth = 0;
  std::vector<int> channels;
  int num_classes = 10;
  std::string out_path;
};

int cmd_convert(const ConvertArgs& a, std::ostream& out) {
  ModelSpec spec;
  if (a.from == "densenet") {
    if (a.channels.empty()) throw UsageError("--from densenet needs --channels");
    std::vector<int> channels = a.channels;
    if (channels.size() == 1) channels.assign(a.layers.size(), channels.front());
    spec = convert_densenet(a.layers, a.growth, channels, a.num_classes);
  } else if (a.from == "cliquenet") {
    spec = convert_cliquenet(a.layers, a.growth, a.num_classes);
  } else {
    throw UsageError("--from must be densenet or cliquenet");
  }
  const auto violations = validate_spec(spec);
  if (!violations.empty()) throw RuleViolationError(violations.front());
  const json config = spec_to_json(spec);
  out << render_model_name(spec) << '\n';
  if (!a.out_path.empty()) {
    std::ofstream f(a.out_path);
    if (!f) throw std::runtime_error("cannot write '" + a.out_path + "'");
    f << config.dump(2) << '\n';
  } else {
    out << config.dump(2) << '\n';
  }
  return kOk;
}

struct OrderArgs {
  std::vector<std::string> methods{"euler", "heun", "rk4", "implicit_midpoint", "gauss2"};
  std::string problem = "decay";
  double h0 = 0.1;
  int levels = 4;
  std::string out_path;
};

int cmd_verify_order(const OrderArgs& a, std::ostream& out) {
  std::vector<rk::ButcherTableau> tabs;
  for (const auto& m : a.methods) tabs.push_back(rk::tableau_library(m));
  std::vector<rk::OdeProblem> problems;
  if (a.problem == "all") {
    for (const auto& p : rk::problem_names()) problems.push_back(rk::problem_library(p));
  } else {
    problems.push_back(rk::problem_library(a.problem));
  }
  if (a.levels < 3) throw UsageError("--levels must be at least 3");
  if (!(a.h0 > 0)) throw UsageError("--h0 must be positive");
  std::ostringstream csv;
  csv << "method,problem,h,error,estimated_order\n";
  for (const auto& prob : problems) {
    for (const auto& tab : tabs) {
      const auto est = rk::estimate_order_detailed(tab, prob, a.h0, a.levels);
      for (const auto& lv : est.levels) {
        csv << tab.name << ',' << prob.name << ',' << shortest(lv.h) << ',' << shortest(lv.error)
            << ',' << (lv.local_order ? shortest(*lv.local_order) : "") << '\n';
      }
      out << "method=" << tab.name << " problem=" << prob.name << " order=" << fixed6(est.order)
          << '\n';
    }
  }
  if (a.out_path.empty()) {
    out << csv.str();
  } else {
    std::ofstream f(a.out_path);
    if (!f) throw std::runtime_error("cannot write '" + a.out_path + "'");
    f << csv.str();
  }
  return kOk;
}

int cmd_inspect_steps(const std::string& ckpt_path, std::ostream& out, std::ostream& err) {
  auto ckpt = load_checkpoint(ckpt_path);
  if (!ckpt.model.has_time_channel()) {
    err << ckpt_path << ": model " << render_model_name(ckpt.model.spec())
        << " has no time-channel periods, so there are no step ratios to inspect\n";
    return kValidationError;
  }
  out << "period,step,ratio\n";
  const auto ratios = ckpt.model.step_ratios();
  for (std::size_t p = 0; p < ratios.size(); ++p) {
    for (std::size_t n = 0; n < ratios[p].size(); ++n) {
      out << p + 1 << ',' << n + 1 << ',' << shortest(ratios[p][n]) << '\n';
    }
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Runge-Kutta networks: build, train, evaluate, convert and verify"};
  app.name("rknet");
  app.require_subcommand(1);

  std::string config;
  bool summary = false;
  auto* build = app.add_subcommand("build", "Validate a model config and report its size");
  build->add_option("--config", config, "model config JSON")->required();
  build->add_flag("--print-summary", summary, "print a per-period table");

  TrainArgs targs;
  auto* train = app.add_subcommand(
      "train", "Train a model; flags override values from the config's \"train\" section");
  train->add_option("--config", targs.config, "model config JSON")->required();
  add_data_options(train, targs.data);
  train->add_option("--out", targs.out_dir, "output directory")->required();
  train->add_option("--seed", targs.seed, "seed for init, data order, dropout (default 0)");
  train->add_option("--epochs", targs.epochs, "number of epochs");
  train->add_option("--batch-size", targs.batch_size, "mini-batch size");
  train->add_option("--lr", targs.lr, "initial learning rate");
  train->add_option("--dropout", targs.dropout, "dropout rate (default 0.2, 0 with --augment)");
  train->add_flag("--augment", targs.augment, "pad-crop-flip augmentation (32x32 data)");
  train->add_option("--dtype", targs.dtype, "float32 or float64")->capture_default_str();

  std::string ckpt;
  DataOptions edata;
  std::optional<std::uint64_t> eseed;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  add_data_options(eval, edata);
  eval->add_option("--seed", eseed, "synthetic data seed (default: the training seed)");

  ConvertArgs cargs;
  auto* convert = app.add_subcommand("convert", "Convert a DenseNet or CliqueNet layout");
  convert->add_option("--from", cargs.from, "densenet | cliquenet")->required();
  convert->add_option("--layers", cargs.layers, "per-block layer counts, comma separated")
      ->required()
      ->delimiter(',');
  convert->add_option("--growth", cargs.growth, "growth rate k")->required();
  convert->add_option("--channels", cargs.channels, "DenseNet block input channels")
      ->delimiter(',');
  convert->add_option("--num-classes", cargs.num_classes)->capture_default_str();
  convert->add_option("--out", cargs.out_path, "write the config JSON here");

  OrderArgs oargs;
  auto* order = app.add_subcommand("verify-order", "Estimate integrator convergence orders");
  order->add_option("--methods", oargs.methods, "tableau names, comma separated")
      ->delimiter(',')
      ->capture_default_str();
  order->add_option("--problem", oargs.problem, "decay | logistic | all")->capture_default_str();
  order->add_option("--h0", oargs.h0, "coarsest step size")->capture_default_str();
  order->add_option("--levels", oargs.levels, "number of step halvings + 1")
      ->capture_default_str();
  order->add_option("--out", oargs.out_path, "write the CSV here instead of stdout");

  std::string ickpt;
  auto* inspect = app.add_subcommand("inspect-steps", "Print trained step ratios h_n/u");
  inspect->add_option("--checkpoint", ickpt, "checkpoint file")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kValidationError;
  }

  try {
    if (*build) return cmd_build(config, summary, out, err);
    if (*train) return cmd_train(targs, out);
    if (*eval) return cmd_eval(ckpt, edata, eseed, out);
    if (*convert) return cmd_convert(cargs, out);
    if (*order) return cmd_verify_order(oargs, out);
    if (*inspect) return cmd_inspect_steps(ickpt, out, err);
  } catch (const rk::ConvergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kValidationError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kValidationError;
}

}  // namespace rknet::cli
