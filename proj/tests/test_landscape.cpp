#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "scratchdet/landscape.hpp"

using namespace scratchdet;

namespace {

std::string tmp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("gradient_fluctuation worked example") {
  // norms [1,3,2] with W=2: raw |Δ| = [2,1]; averages = [2, 1.5]
  auto out = gradient_fluctuation({1.0, 3.0, 2.0}, 2);
  REQUIRE(out == std::vector<double>{2.0, 1.5});

  // fewer than two norms: undefined, empty
  REQUIRE(gradient_fluctuation({5.0}, 3).empty());
  REQUIRE(gradient_fluctuation({}, 3).empty());
  REQUIRE_THROWS_AS(gradient_fluctuation({1.0, 2.0}, 0), ContractError);

  // window 1 reproduces the raw series
  auto raw = gradient_fluctuation({0.0, 4.0, 1.0, 1.0}, 1);
  REQUIRE(raw == std::vector<double>{4.0, 3.0, 0.0});

  // long window vs explicit trailing mean
  std::vector<double> norms{2.0, 5.0, 1.0, 1.5, 9.0};
  auto got = gradient_fluctuation(norms, 3);
  std::vector<double> rawd{3.0, 4.0, 0.5, 7.5};
  REQUIRE(got.size() == 4);
  REQUIRE_THAT(got[0], Catch::Matchers::WithinAbs(3.0, 1e-15));
  REQUIRE_THAT(got[1], Catch::Matchers::WithinAbs((3.0 + 4.0) / 2, 1e-15));
  REQUIRE_THAT(got[2], Catch::Matchers::WithinAbs((3 + 4 + 0.5) / 3.0, 1e-15));
  REQUIRE_THAT(got[3], Catch::Matchers::WithinAbs((4 + 0.5 + 7.5) / 3.0, 1e-15));
}

TEST_CASE("record_step computes norm and smoothed fluctuation online") {
  TrainingTrace t;
  t.window = 2;
  Tensor g1({1}, {1.0});
  Tensor g2({1}, {3.0});
  Tensor g3({1}, {2.0});
  record_step(t, 1, 0.5, {&g1}, 0.01);
  record_step(t, 2, 0.4, {&g2}, 0.01);
  record_step(t, 3, 0.3, {&g3}, 0.001);
  REQUIRE_FALSE(t.records[0].grad_fluct.has_value());
  REQUIRE(t.records[1].grad_fluct == 2.0);
  REQUIRE(t.records[2].grad_fluct == 1.5);
  REQUIRE(t.records[2].lr == 0.001);

  // the online values equal the standalone function on the same norms
  std::vector<double> norms;
  for (const auto& r : t.records) norms.push_back(r.grad_norm);
  auto offline = gradient_fluctuation(norms, t.window);
  for (size_t i = 1; i < t.records.size(); ++i)
    REQUIRE(*t.records[i].grad_fluct == offline[i - 1]);

  REQUIRE_THROWS_AS(record_step(t, 3, 0.2, {&g1}, 0.01), ContractError);
}

TEST_CASE("divergence_check rules") {
  auto make = [](std::vector<double> losses) {
    TrainingTrace t;
    int64_t s = 1;
    for (double l : losses) {
      TraceRecord r;
      r.step = s++;
      r.loss = l;
      t.records.push_back(r);
    }
    return t;
  };

  // healthy run
  auto ok = divergence_check(make({10, 9, 8, 7}), 10.0, 2);
  REQUIRE(ok.status == DivergenceStatus::converging);
  REQUIRE(ok.reason == DivergenceReason::none);

  // NaN loss trips immediately
  auto nan = divergence_check(
      make({10, std::numeric_limits<double>::quiet_NaN()}), 10.0, 100);
  REQUIRE(nan.status == DivergenceStatus::diverged);
  REQUIRE(nan.reason == DivergenceReason::non_finite_loss);
  REQUIRE(nan.first_bad_step == 2);

  // sustained blowup: above 10x initial for `patience` consecutive steps
  auto blow = divergence_check(make({1, 50, 200, 150, 120}), 10.0, 3);
  REQUIRE(blow.status == DivergenceStatus::diverged);
  REQUIRE(blow.reason == DivergenceReason::sustained_blowup);
  REQUIRE(blow.first_bad_step == 2);

  // a dip below threshold resets the run counter
  auto reset = divergence_check(make({1, 50, 2, 50, 2, 50}), 10.0, 2);
  REQUIRE(reset.status == DivergenceStatus::converging);

  // exactly at threshold is not a blowup (strict >)
  auto edge = divergence_check(make({1, 10, 10, 10, 10}), 10.0, 2);
  REQUIRE(edge.status == DivergenceStatus::converging);

  REQUIRE_THROWS_AS(divergence_check(TrainingTrace{}, 10.0, 2), ContractError);
}

TEST_CASE("trace CSV export is deterministic and round-trips") {
  TrainingTrace t;
  t.window = 50;
  Tensor g({2}, {0.6, 0.8});
  record_step(t, 1, 1.0 / 3.0, {&g}, 0.01);
  Tensor g2({2}, {3.0, 4.0});
  record_step(t, 2, 0.25, {&g2}, 0.01);

  std::string p1 = tmp_path("trace_a.csv"), p2 = tmp_path("trace_b.csv");
  export_trace(t, p1);
  export_trace(t, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), {});
  std::string s2((std::istreambuf_iterator<char>(f2)), {});
  REQUIRE(s1 == s2);
  REQUIRE(s1.rfind("step,loss,grad_norm,grad_fluct,lr\n", 0) == 0);
  // first data row has an empty fluctuation field
  REQUIRE(s1.find("1,0.33333333333333331,1,,0.01\n") != std::string::npos);

  TrainingTrace back = load_trace(p1, 50);
  REQUIRE(back.records.size() == 2);
  REQUIRE(back.records[0].loss == t.records[0].loss);
  REQUIRE(back.records[0].grad_norm == 1.0);
  REQUIRE_FALSE(back.records[0].grad_fluct.has_value());
  REQUIRE(back.records[1].grad_norm == 5.0);
  REQUIRE(back.records[1].grad_fluct == t.records[1].grad_fluct);
  REQUIRE(back.records[1].lr == 0.01);

  std::remove(p1.c_str());
  std::remove(p2.c_str());
}
