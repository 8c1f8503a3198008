#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "rknet/model_spec.hpp"
#include "rknet/network.hpp"
#include "rknet/rng.hpp"

using namespace rknet;
using Terms = std::vector<std::pair<int, int>>;

namespace {

std::int64_t built_parameter_count(const ModelSpec& spec) {
  RkNetModel model(spec, 1);
  std::int64_t n = 0;
  for (const auto* p : model.parameters()) n += static_cast<std::int64_t>(p->value.numel());
  return n;
}

ModelSpec spec_of(const std::string& json) { return spec_from_json(nlohmann::json::parse(json)); }

bool cites(const std::vector<Violation>& vs, Rule rule) {
  return std::any_of(vs.begin(), vs.end(), [&](const Violation& v) { return v.rule == rule; });
}

}  // namespace

TEST_CASE("model names parse into (s, r) terms") {
  CHECK(parse_model_name("RKNet-3x2_4x1_2x5_1x1") == Terms{{3, 2}, {4, 1}, {2, 5}, {1, 1}});
  CHECK(parse_model_name("RKNet-1x1") == Terms{{1, 1}});
  CHECK(parse_model_name("RKNet-5\xC3\x97" "1_12x3") == Terms{{5, 1}, {12, 3}});
  for (const char* bad : {"RKNet-0x2", "RKNet-3x0", "RKNet-03x1", "RKNet-3x", "RKNet-", "rknet-1x1",
                          "RKNet-1x1_", "RKNet-1x1__2x2", "RKNet-1*1", "RKNet-1x1 "}) {
    INFO(bad);
    CHECK_THROWS_AS(parse_model_name(bad), ModelNameError);
  }
}

TEST_CASE("render and parse are inverse") {
  CHECK(render_model_name(Terms{{3, 1}, {3, 1}, {3, 1}}) == "RKNet-3x1_3x1_3x1");
  CHECK(render_model_name(Terms{{5, 1}, {5, 1}, {5, 1}}) == "RKNet-5x1_5x1_5x1");
  CounterRng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    Terms terms(1 + rng.below(5));
    for (auto& [s, r] : terms) {
      s = 1 + static_cast<int>(rng.below(20));
      r = 1 + static_cast<int>(rng.below(20));
    }
    const auto name = render_model_name(terms);
    CHECK(parse_model_name(name) == terms);
    CHECK(render_model_name(parse_model_name(name)) == name);
  }
}

TEST_CASE("validation cites the broken rule") {
  auto irk = spec_of(R"({"name":"RKNet-1x1","kind":"IRK","k":12})");
  auto v = validate_spec(irk);
  REQUIRE(v.size() == 1);
  CHECK(v[0].rule == Rule::IrkRule3);
  CHECK(v[0].message.find("Rule 3") != std::string::npos);

  auto erk = spec_of(R"({"name":"RKNet-3x1","k":12,"m":2})");
  CHECK(validate_spec(erk).empty());
  CHECK(erk.periods[0].state_channels() == 24);

  auto irk_m = spec_of(R"({"name":"RKNet-2x1","kind":"IRK","k":12,"m":2,"preprocessor_channels":12})");
  CHECK(cites(validate_spec(irk_m), Rule::IrkRule1));

  auto pre = erk;
  pre.preprocessor_channels = 20;
  CHECK(cites(validate_spec(pre), Rule::ErkRule1));

  auto tc = spec_of(R"({"name":"RKNet-2x3","kind":"TimeChannel"})");
  CHECK(cites(validate_spec(tc), Rule::TimeChannel));

  for (const auto& viol : validate_spec(irk_m)) {
    CHECK(viol.message.rfind("[" + rule_label(viol.rule) + "] ", 0) == 0);
  }
}

TEST_CASE("spatial feasibility: each transition needs even dims of at least 2") {
  auto periods = [](int count) {
    std::string name = "RKNet-1x1";
    for (int i = 1; i < count; ++i) name += "_1x1";
    return spec_of(R"({"name":")" + name + R"("})");
  };
  // 32 -> 16 -> 8 -> 4 -> 2 -> 1: six periods still fit, seven do not.
  CHECK(validate_spec(periods(6)).empty());
  CHECK(cites(validate_spec(periods(7)), Rule::Spatial));
  auto odd = periods(2);
  odd.input_shape = {3, 15, 15};
  CHECK(cites(validate_spec(odd), Rule::Spatial));
}

TEST_CASE("DenseNet conversion follows Rules 1 and 3") {
  const auto spec = convert_densenet({12}, 12, {24});
  REQUIRE(spec.periods.size() == 1);
  CHECK(spec.periods[0].m == 2);
  CHECK(spec.periods[0].s == 6);
  CHECK(spec.periods[0].r == 1);
  CHECK(validate_spec(spec).empty());

  try {
    convert_densenet({12}, 12, {25});
    FAIL("expected a Rule 1 violation");
  } catch (const RuleViolationError& e) {
    CHECK(e.violation().rule == Rule::ErkRule1);
  }
  try {
    convert_densenet({7}, 12, {24});
    FAIL("expected a Rule 3 violation");
  } catch (const RuleViolationError& e) {
    CHECK(e.violation().rule == Rule::ErkRule3);
  }
  CHECK_THROWS_AS(convert_densenet({12, 12}, 12, {24}), ConfigError);

  CounterRng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 1 + static_cast<int>(rng.below(16));
    const int m = 1 + static_cast<int>(rng.below(4));
    const int s = 1 + static_cast<int>(rng.below(6));
    CHECK(validate_spec(convert_densenet({s * m, s * m}, k, {m * k, m * k})).empty());
  }
}

TEST_CASE("CliqueNet conversion") {
  const auto spec = convert_cliquenet({5, 5, 5}, 80);
  CHECK(render_model_name(spec) == "RKNet-5x1_5x1_5x1");
  for (const auto& p : spec.periods) {
    CHECK(p.kind == BlockKind::Irk);
    CHECK(p.k == 80);
    CHECK(p.state_channels() == 80);
  }
  CHECK(render_model_name(convert_cliquenet({3, 3, 3}, 36)) == "RKNet-3x1_3x1_3x1");
  try {
    convert_cliquenet({1}, 12);
    FAIL("expected a Rule 3 violation");
  } catch (const RuleViolationError& e) {
    CHECK(e.violation().rule == Rule::IrkRule3);
  }
}

TEST_CASE("analytic parameter count equals the built model's count") {
  CHECK(conv_parameter_count(8, 4, 1) == 32);
  const std::vector<std::string> configs{
      R"({"name":"RKNet-1x1","k":4})",
      R"({"name":"RKNet-3x2_2x1","k":6,"m":2})",
      R"({"name":"RKNet-2x1_3x2","k":5,"kind":"IRK","bottleneck":true})",
      R"({"name":"RKNet-2x2_2x1_3x1","k":4,"kind":["ERK","IRK","ERK"],"m":[2,1,1],
          "attentional_transition":true,"multiscale":true})",
      R"({"name":"RKNet-1x4_1x2","k":3,"m":2,"kind":"TimeChannel","bottleneck":true})",
      R"({"name":"RKNet-2x3","k":4,"kind":"IRK","share_weights":true})",
      R"({"name":"RKNet-3x2","k":4,"m":2,"share_weights":true,"bottleneck":true})",
      R"({"name":"RKNet-1x3","k":4,"kind":"TimeChannel","share_weights":true})",
      R"({"name":"RKNet-4x1","k":2,"linear_test_mode":true,"num_classes":3})",
      R"({"name":"RKNet-1x2","k":2,"kind":"TimeChannel","linear_test_mode":true})",
  };
  for (const auto& c : configs) {
    INFO(c);
    const auto spec = spec_of(c);
    CHECK(count_parameters(spec) == built_parameter_count(spec));
  }
  auto small = spec_of(R"({"name":"RKNet-3x1_3x1","k":6})");
  auto big = spec_of(R"({"name":"RKNet-3x1_3x1","k":12})");
  CHECK(count_parameters(big) > count_parameters(small));
}

TEST_CASE("IRKNet-3x1_3x1_3x1 with k=36 keeps 36 state channels in every period") {
  const auto spec = convert_cliquenet({3, 3, 3}, 36);
  RkNetModel model(spec, 0);
  for (std::size_t p = 0; p < model.num_periods(); ++p) {
    CHECK(model.period(p).irk.front().state_channels() == 36);
  }
  CHECK(model.preprocessor().weight.value.dim(0) == 36);
}

TEST_CASE("config JSON round trip") {
  const auto spec = spec_of(R"({"name":"RKNet-2x2_3x1","k":[4,6],"m":[2,1],"kind":["ERK","IRK"],
      "bottleneck":[false,true],"attentional_transition":true,"multiscale":true,"num_classes":7,
      "input_shape":[3,16,16],"u_sign":-1})");
  CHECK(spec.periods[1].kind == BlockKind::Irk);
  CHECK(spec.periods[1].bottleneck);
  CHECK(spec.input_shape == InputShape{3, 16, 16});
  CHECK(spec_from_json(spec_to_json(spec)) == spec);
  CHECK(spec_to_json(spec).at("name") == "RKNet-2x2_3x1");

  const std::string path = "model_spec_roundtrip.json";
  {
    std::ofstream f(path);
    f << spec_to_json(spec).dump();
  }
  CHECK(load_spec_file(path) == spec);
  std::remove(path.c_str());

  CHECK_THROWS_AS(spec_of(R"({"k":4})"), ConfigError);
  CHECK_THROWS_AS(spec_of(R"({"name":"RKNet-1x1_1x1","k":[4,4,4]})"), ConfigError);
  CHECK_THROWS_AS(spec_of(R"({"name":"RKNet-1x1","kind":"RNN"})"), ConfigError);
  CHECK_THROWS_AS(spec_of(R"({"name":"RKNet-1x1","k":"four"})"), ConfigError);
  CHECK_THROWS_AS(spec_of(R"({"name":"RKNet-0x1"})"), ModelNameError);
}

TEST_CASE("building an invalid spec throws with the rule") {
  auto irk = spec_of(R"({"name":"RKNet-1x1","kind":"IRK"})");
  CHECK_THROWS_AS(RkNetModel(irk, 0), RuleViolationError);
}
