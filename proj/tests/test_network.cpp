#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <fstream>
#include <iterator>
#include <set>

#include "doctest.h"
#include "gradient_suite.hpp"
#include "rknet/checkpoint.hpp"
#include "rknet/network.hpp"
#include "support.hpp"

using namespace rknet;
using namespace rknet::testing;

namespace {

ModelSpec spec_of(const std::string& json) { return spec_from_json(nlohmann::json::parse(json)); }

const char* kMixed = R"({"name":"RKNet-2x2_2x1_1x2","k":4,"kind":["ERK","IRK","TimeChannel"],
    "m":[2,1,2],"input_shape":[3,16,16],"num_classes":5,"attentional_transition":true})";

bool same_parameters(RkNetModel& a, RkNetModel& b) {
  auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->name != pb[i]->name || !(pa[i]->value == pb[i]->value)) return false;
  }
  return true;
}

std::string read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  f << bytes;
}

}  // namespace

TEST_CASE("construction is deterministic in the seed") {
  const auto spec = spec_of(kMixed);
  RkNetModel a(spec, 11), b(spec, 11), c(spec, 12);
  CHECK(same_parameters(a, b));
  CHECK_FALSE(same_parameters(a, c));
  CounterRng rng(1);
  const Tensor x = random_normal({3, 3, 16, 16}, rng, DType::Float32);
  CHECK(a.predict(x) == b.predict(x));
}

TEST_CASE("parameter names are unique and the count matches the analytic count") {
  const auto spec = spec_of(kMixed);
  RkNetModel model(spec, 0);
  std::set<std::string> names;
  std::int64_t total = 0;
  for (auto* p : model.parameters()) {
    CHECK(names.insert(p->name).second);
    total += static_cast<std::int64_t>(p->value.numel());
  }
  CHECK(total == count_parameters(spec));
  CHECK(names.count("pre.conv") == 1);
  CHECK(names.count("post.fc.weight") == 1);
  CHECK(names.count("period3.step2.theta") == 1);
}

TEST_CASE("forward produces (N, classes) logits and per-period states") {
  const auto spec = spec_of(kMixed);
  RkNetModel model(spec, 3);
  CounterRng rng(2);
  const Tensor x = random_normal({2, 3, 16, 16}, rng, DType::Float32);
  Tape tape(false);
  auto r = model.forward(tape, tape.constant(x), Mode::Eval);
  CHECK(r.logits.shape() == Shape{2, 5});
  REQUIRE(r.period_states.size() == 3);
  CHECK(r.period_states[0].shape() == Shape{2, 8, 16, 16});
  CHECK(r.period_states[1].shape() == Shape{2, 4, 8, 8});
  CHECK(r.period_states[2].shape() == Shape{2, 8, 4, 4});
  CHECK_THROWS_AS(model.forward(tape, tape.constant(Tensor({2, 3, 8, 8}, DType::Float32)), Mode::Eval),
                  ShapeError);
  CHECK_THROWS(model.forward(tape, tape.constant(x.to(DType::Float64)), Mode::Eval));
}

TEST_CASE("eval-mode predictions do not depend on the batch") {
  RkNetModel model(spec_of(kMixed), 4);
  CounterRng rng(3);
  const Tensor x = random_normal({4, 3, 16, 16}, rng, DType::Float32);
  const Tensor all = model.predict(x);
  for (std::size_t n = 0; n < 4; ++n) {
    Tensor one({1, 3, 16, 16}, DType::Float32);
    for (std::size_t i = 0; i < one.numel(); ++i) one.set(i, x.at(n * one.numel() + i));
    const Tensor row = model.predict(one);
    for (std::size_t c = 0; c < 5; ++c) CHECK(std::abs(row.at(c) - all.at(n * 5 + c)) < 1e-6);
  }
}

TEST_CASE("with identity periods the network reduces to pre -> transitions -> post") {
  const auto spec = spec_of(kMixed);
  RkNetModel model(spec, 5);
  for (std::size_t p = 0; p < model.num_periods(); ++p) model.zero_increment(p);
  CounterRng rng(4);
  const Tensor x = random_normal({2, 3, 16, 16}, rng, DType::Float32);
  Tape tape(false);
  ForwardContext ctx;
  Var h = model.preprocessor().forward(tape, tape.constant(x));
  for (std::size_t p = 0; p + 1 < model.num_periods(); ++p) h = model.transition(p).forward(tape, h, ctx);
  h = ops::relu(model.post_norm(0).forward(tape, h, Mode::Eval));
  const Tensor manual = model.classifier().forward(tape, ops::global_avg_pool(h)).value();
  CHECK(max_abs_diff(model.predict(x), manual) < 1e-6);
}

TEST_CASE("multiscale_collect pools each state and concatenates in order") {
  Tape tape(false);
  Tensor a({2, 2, 4, 4}, DType::Float64), b({2, 3, 2, 2}, DType::Float64);
  for (std::size_t i = 0; i < a.numel(); ++i) a.set(i, static_cast<double>(i / 16));
  for (std::size_t i = 0; i < b.numel(); ++i) b.set(i, 10.0 + static_cast<double>(i / 4));
  auto out = multiscale_collect({tape.constant(a), tape.constant(b)});
  CHECK(out.shape() == Shape{2, 5});
  CHECK(out.value().to_vector() == std::vector<double>{0, 1, 10, 11, 12, 2, 3, 13, 14, 15});
  auto single = multiscale_collect({tape.constant(a)});
  CHECK(single.shape() == Shape{2, 2});
  CHECK_THROWS(multiscale_collect({}));
}

TEST_CASE("multiscale changes only the postprocessor") {
  auto off = spec_of(kMixed);
  auto on = off;
  on.multiscale = true;
  RkNetModel a(off, 6), b(on, 6);
  CHECK(b.classifier().weight.value.dim(1) == 8 + 4 + 8);
  CHECK(a.classifier().weight.value.dim(1) == 8);
  CounterRng rng(5);
  const Tensor x = random_normal({2, 3, 16, 16}, rng, DType::Float32);
  Tape tape(false);
  auto ra = a.forward(tape, tape.constant(x), Mode::Eval);
  auto rb = b.forward(tape, tape.constant(x), Mode::Eval);
  for (std::size_t p = 0; p < 3; ++p) CHECK(ra.period_states[p].value() == rb.period_states[p].value());
  CHECK(rb.logits.shape() == Shape{2, 5});
}

TEST_CASE("shared weights reuse step 0's subnetworks") {
  auto spec = spec_of(R"({"name":"RKNet-2x3_1x3","k":4,"kind":["ERK","TimeChannel"],"input_shape":[3,8,8]})");
  auto shared = spec;
  shared.share_weights = true;
  RkNetModel plain(spec, 1), tied(shared, 1);
  CHECK(count_parameters(shared) < count_parameters(spec));
  auto& p0 = tied.period(0);
  CHECK(&p0.erk[0].unit(1, 0) == &p0.erk[2].unit(1, 0));
  auto& p1 = tied.period(1);
  CHECK(&p1.time[0].unit(0) == &p1.time[1].unit(0));
  CHECK(&p1.time[0].theta() != &p1.time[1].theta());
  std::int64_t total = 0;
  for (auto* p : tied.parameters()) total += static_cast<std::int64_t>(p->value.numel());
  CHECK(total == count_parameters(shared));
}

TEST_CASE("tiny models pass the central finite-difference check") {
  for (const auto& c : run_model_gradient_checks()) {
    INFO(c.name << ": " << c.result.worst);
    CHECK(c.result.coordinates >= 50);
    CHECK(c.result.max_rel_error < kGradTolerance);
  }
}

TEST_CASE("checkpoint round trip is bitwise") {
  const std::string path = "network_roundtrip.ckpt", again = "network_roundtrip2.ckpt";
  RkNetModel model(spec_of(kMixed), 7);
  // Move the running statistics and step ratios away from their defaults.
  CounterRng rng(6);
  const Tensor x = random_normal({4, 3, 16, 16}, rng, DType::Float32);
  {
    Tape tape(false);
    model.forward(tape, tape.constant(x), Mode::Train);
  }
  model.period(2).time[1].set_ratio(0.6);
  const TrainingState state{17, CounterRng(99, 17)};
  save_checkpoint(model, path, state);

  auto loaded = load_checkpoint(path);
  CHECK(loaded.state.epoch == 17);
  CHECK(loaded.state.rng == state.rng);
  CHECK(loaded.model.spec() == model.spec());
  CHECK(loaded.model.seed() == 7);
  CHECK(same_parameters(model, loaded.model));
  auto ba = model.buffers(), bb = loaded.model.buffers();
  REQUIRE(ba.size() == bb.size());
  for (std::size_t i = 0; i < ba.size(); ++i) {
    CHECK(ba[i].first == bb[i].first);
    CHECK(*ba[i].second == *bb[i].second);
  }
  CHECK(model.predict(x) == loaded.model.predict(x));

  save_checkpoint(loaded.model, again, loaded.state);
  CHECK(read_bytes(path) == read_bytes(again));
  std::remove(again.c_str());

  const std::string bytes = read_bytes(path);
  const std::string bad = "bad.ckpt";
  auto expect_error = [&](const std::string& content, const std::string& fragment) {
    write_bytes(bad, content);
    try {
      load_checkpoint(bad);
      FAIL("load succeeded: " << fragment);
    } catch (const CheckpointError& e) {
      INFO(std::string(e.what()));
      CHECK(std::string(e.what()).find(fragment) != std::string::npos);
    }
  };
  expect_error("XKNT" + bytes.substr(4), "magic");
  std::string version = bytes;
  version[4] = 2;
  expect_error(version, "version");
  expect_error(bytes.substr(0, bytes.size() / 2), "truncated");
  expect_error(bytes + "x", "trailing");
  std::string renamed = bytes;
  const auto at = renamed.find("post.fc.weight");
  REQUIRE(at != std::string::npos);
  renamed[at] = 'q';
  expect_error(renamed, "unknown tensor(s) in checkpoint: 'qost.fc.weight'");
  CHECK_THROWS_AS(load_checkpoint("does-not-exist.ckpt"), CheckpointError);
  std::remove(bad.c_str());
  std::remove(path.c_str());
}
