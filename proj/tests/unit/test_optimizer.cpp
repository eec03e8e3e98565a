#include <doctest.h>

#include <cmath>

#include "cascade/error.hpp"
#include "cascade/optimizer.hpp"
#include "fixtures.hpp"

using namespace cascade;

namespace {

SweepResult constant_grid(const MarkovJointModel& m, const CascadeSpec& spec, std::size_t rows, std::size_t cols,
                          const ThresholdVector& t) {
  SweepResult r;
  for (std::size_t i = 0; i < rows; ++i) r.grid.lambdas_cost.push_back(0.01 * (i + 1));
  for (std::size_t j = 0; j < cols; ++j) r.grid.lambdas_abs.push_back(0.1 * j);
  r.cells.assign(rows, std::vector<SweepCell>(cols));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      auto& c = r.cells[i][j];
      c.lambda_cost = r.grid.lambdas_cost[i];
      c.lambda_abstention = r.grid.lambdas_abs[j];
      c.thresholds = t;
      c.performance = analytic_performance(m, spec, t);
      c.train_loss = analytic_loss(m, spec, t, c.lambda_cost, c.lambda_abstention);
      c.converged = true;
    }
  r.overall_loss = mean_cell_loss(r.cells);
  return r;
}

double defer_probability(const MarkovJointModel& m, const ThresholdVector& t) {
  return interval_prob(m.marginals()[0], t.abstention[0], t.deferral[0]);
}

}  // namespace

TEST_CASE("prohibitive cost keeps queries at the first model") {
  const auto m = fixtures::model_k2(0.6);
  const auto spec = fixtures::two_models(1.0, 10.0);
  const auto cell = optimize_thresholds(m, spec, 1e3, 0.1);
  CHECK(validate_thresholds(spec, cell.thresholds) == std::nullopt);
  CHECK(defer_probability(m, cell.thresholds) <= 0.01);
}

TEST_CASE("prohibitive abstention price removes abstention") {
  const auto m = fixtures::model_k2(0.6);
  for (auto arch : {Architecture::EarlyAbstention, Architecture::FinalModelAbstention}) {
    const auto spec = fixtures::two_models(1.0, 10.0, arch);
    const auto cell = optimize_thresholds(m, spec, 0.01, 1e3);
    CHECK(cell.performance.p_abstention <= 1e-3);
    CHECK(cell.converged);
  }
}

TEST_CASE("final-model architecture pins upstream abstention to zero") {
  const auto m = fixtures::model_k3(0.6, 0.7);
  const auto spec = fixtures::chain({1.0, 4.0, 20.0}, Architecture::FinalModelAbstention);
  OptimizerOptions opts;
  opts.n_starts = 3;
  const auto cell = optimize_thresholds(m, spec, 0.005, 0.2, opts);
  CHECK(cell.thresholds.abstention[0] == 0.0);
  CHECK(cell.thresholds.abstention[1] == 0.0);
  CHECK(validate_thresholds(spec, cell.thresholds) == std::nullopt);
}

TEST_CASE("optimizer reaches the brute-force grid minimum for two models") {
  const auto m = fixtures::model_k2(0.7);
  const auto spec = fixtures::two_models(1.0, 10.0);
  const std::vector<std::pair<double, double>> prefs = {{0.005, 0.3}, {0.03, 0.6}};
  const auto oracle = brute_force_oracle(m, spec, prefs, 101);
  for (std::size_t p = 0; p < prefs.size(); ++p) {
    const auto cell = optimize_thresholds(m, spec, prefs[p].first, prefs[p].second);
    CHECK(cell.train_loss <= oracle[p].loss + 1e-3);
    CHECK(oracle[p].loss == doctest::Approx(analytic_loss(m, spec, oracle[p].thresholds, prefs[p].first,
                                                          prefs[p].second))
                                .epsilon(1e-12));
  }
}

TEST_CASE("single-model oracle agrees with the optimizer within grid spacing") {
  const MarkovJointModel m({fixtures::two_bump()}, {});
  const auto spec = fixtures::chain({1.0});
  const auto oracle = brute_force_oracle(m, spec, 0.0, 0.4, 1001);
  const auto cell = optimize_thresholds(m, spec, 0.0, 0.4);
  // With lambda_a = 0.4 abstaining pays whenever 1 - Phi > 0.4.
  CHECK(std::abs(cell.thresholds.abstention[0] - 0.6) <= 1e-3);
  CHECK(std::abs(oracle.thresholds.abstention[0] - cell.thresholds.abstention[0]) <= 1e-3);
  CHECK(cell.train_loss <= oracle.loss + 1e-9);
}

TEST_CASE("oracle without preferences minimises the answered error") {
  const auto m = fixtures::model_k2(0.5);
  const auto spec = fixtures::two_models();
  const auto o = brute_force_oracle(m, spec, 0.0, 0.0, 41);
  CHECK(o.loss == doctest::Approx(analytic_performance(m, spec, o.thresholds).p_error_no_abstain).epsilon(1e-14));
  // Abstaining is free, so the grid optimum abstains on nearly everything.
  CHECK(o.loss <= 1e-3);
}

TEST_CASE("oracle enforces its budget and inputs") {
  const auto m = fixtures::model_k3(0.5, 0.5);
  const auto spec = fixtures::chain({1.0, 2.0, 3.0});
  CHECK_THROWS_AS(brute_force_oracle(m, spec, 0.0, 0.0, 201), Error);
  CHECK_THROWS_AS(brute_force_oracle(fixtures::model_k2(0.1), fixtures::two_models(), 0.0, 0.0, 5), Error);
}

TEST_CASE("one-cell sweep") {
  const auto m = fixtures::model_k2(0.5);
  const auto spec = fixtures::two_models();
  PreferenceGrid g{{0.01}, {0.3}};
  const auto r = sweep_preference_grid(m, spec, g);
  REQUIRE(r.cells.size() == 1);
  REQUIRE(r.cells[0].size() == 1);
  CHECK(r.overall_loss == r.cells[0][0].train_loss);
  CHECK(r.cells[0][0].train_loss == doctest::Approx(analytic_loss(m, spec, r.cells[0][0].thresholds, 0.01, 0.3))
                                        .epsilon(1e-14));
}

TEST_CASE("architectures coincide once abstention is priced out") {
  const auto m = fixtures::model_k2(0.8);
  const auto spec = fixtures::two_models(1.0, 10.0);
  PreferenceGrid g{{0.001, 0.01, 0.05}, {1e3, 2e3}};
  const auto c = compare_architectures(m, spec, g);
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j) {
      CHECK(c.early.cells[i][j].performance.p_abstention <= 1e-3);
      CHECK(c.final.cells[i][j].performance.p_abstention <= 1e-3);
      CHECK(std::abs(c.early.cells[i][j].train_loss - c.final.cells[i][j].train_loss) <= 1e-4);
    }
}

TEST_CASE("early abstention is never worse than final-model abstention") {
  for (double rho : {0.0, 0.8}) {
    const auto m = fixtures::model_k2(rho);
    const auto spec = fixtures::two_models(1.0, 10.0);
    const auto g = PreferenceGrid::default_for(spec, 4, 4);
    const auto c = compare_architectures(m, spec, g);
    CHECK(c.nesting_violations == 0);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j)
        CHECK(c.early_raw.cells[i][j].train_loss <= c.final_raw.cells[i][j].train_loss + kNestingTolerance);
    CHECK(c.early_raw.overall_loss <= c.final_raw.overall_loss + 1e-6);
    CHECK(c.cells[0][0].pct_delta_loss ==
          doctest::Approx(percent_change(c.early.cells[0][0].train_loss, c.final.cells[0][0].train_loss)));
  }
}

TEST_CASE("optimal loss is nondecreasing in each preference parameter") {
  const auto m = fixtures::model_k2(0.6);
  const auto spec = fixtures::two_models(1.0, 10.0);
  PreferenceGrid g{{0.001, 0.004, 0.016, 0.064}, {0.0, 0.2, 0.4, 0.8}};
  const auto r = sweep_preference_grid(m, spec, g);
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j) {
      if (i) CHECK(r.cells[i][j].train_loss >= r.cells[i - 1][j].train_loss - 1e-6);
      if (j) CHECK(r.cells[i][j].train_loss >= r.cells[i][j - 1].train_loss - 1e-6);
    }
}

TEST_CASE("smoothing leaves a constant grid alone") {
  const auto m = fixtures::model_k2(0.5);
  const auto spec = fixtures::two_models();
  const auto base = constant_grid(m, spec, 4, 5, {{0.6}, {0.2, 0.3}});
  const auto s = smooth_threshold_grid(base, 10.0, m, spec);
  REQUIRE(s.smoothing.has_value());
  CHECK(s.smoothing->flagged.empty());
  CHECK(s.smoothing->flagged_fraction == 0.0);
  CHECK(to_json(SweepResult{s.grid, s.architecture, s.cells, s.overall_loss, std::nullopt}) == to_json(base));
}

TEST_CASE("smoothing replaces an injected outlier by its neighbour mean") {
  const auto m = fixtures::model_k2(0.5);
  const auto spec = fixtures::two_models();
  auto grid = constant_grid(m, spec, 4, 4, {{0.4}, {0.1, 0.2}});
  auto& bad = grid.cells[1][2];
  bad.thresholds = {{0.9}, {0.6, 0.7}};
  bad.train_loss = analytic_loss(m, spec, bad.thresholds, bad.lambda_cost, bad.lambda_abstention);
  const auto s = smooth_threshold_grid(grid, 10.0, m, spec);
  REQUIRE(s.smoothing->flagged.size() == 1);
  CHECK(s.smoothing->flagged[0] == std::pair<std::size_t, std::size_t>{1, 2});
  CHECK(s.smoothing->flagged_fraction == doctest::Approx(1.0 / 16.0));
  const auto& fixed = s.cells[1][2];
  CHECK(fixed.thresholds.deferral[0] == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(fixed.thresholds.abstention[1] == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(fixed.train_loss == doctest::Approx(analytic_loss(m, spec, fixed.thresholds, fixed.lambda_cost,
                                                          fixed.lambda_abstention))
                                .epsilon(1e-14));

  // Applying again finds nothing and changes nothing.
  const auto again = smooth_threshold_grid(s, 10.0, m, spec);
  CHECK(again.smoothing->flagged.empty());
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(again.cells[i][j].thresholds == s.cells[i][j].thresholds);
}

TEST_CASE("smoothing reports a cell whose neighbours are all flagged") {
  const auto m = fixtures::model_k2(0.5);
  const auto spec = fixtures::two_models();
  auto grid = constant_grid(m, spec, 2, 2, {{0.4}, {0.1, 0.2}});
  // Alternating pattern: every cell deviates from its neighbours, which agree.
  grid.cells[0][0].thresholds = grid.cells[1][1].thresholds = {{0.9}, {0.6, 0.7}};
  const auto s = smooth_threshold_grid(grid, 10.0, m, spec);
  CHECK(s.smoothing->flagged.size() == 4);
  CHECK(s.smoothing->unresolved.size() == 4);
  CHECK(s.cells[0][0].thresholds == grid.cells[0][0].thresholds);
}

TEST_CASE("smoothing preconditions") {
  const auto m = fixtures::model_k2(0.5);
  const auto spec = fixtures::two_models();
  const auto thin = constant_grid(m, spec, 1, 5, {{0.6}, {0.2, 0.3}});
  CHECK_THROWS_AS(smooth_threshold_grid(thin, 10.0, m, spec), Error);
  const auto sq = constant_grid(m, spec, 2, 2, {{0.6}, {0.2, 0.3}});
  CHECK_THROWS_AS(smooth_threshold_grid(sq, 0.0, m, spec), Error);
}

TEST_CASE("sweeps are deterministic and serialise losslessly") {
  const auto m = fixtures::model_k2(0.7);
  const auto spec = fixtures::two_models(1.0, 10.0);
  const auto g = PreferenceGrid::default_for(spec, 3, 3);
  const auto a = sweep_preference_grid(m, spec, g);
  const auto b = sweep_preference_grid(m, spec, g);
  CHECK(to_json(a).dump() == to_json(b).dump());
  const auto back = sweep_result_from_json(nlohmann::json::parse(to_json(a).dump()));
  CHECK(to_json(back).dump() == to_json(a).dump());
  CHECK(back.overall_loss == a.overall_loss);
  CHECK(back.cells[2][1].thresholds == a.cells[2][1].thresholds);

  auto j = to_json(a);
  j.erase("cells");
  CHECK_THROWS_AS(sweep_result_from_json(j), Error);
}

TEST_CASE("preference grid defaults and validation") {
  const auto spec = fixtures::two_models(1.0, 10.0);
  const auto g = PreferenceGrid::default_for(spec);
  CHECK(g.rows() == 10);
  CHECK(g.cols() == 10);
  CHECK(g.lambdas_cost.front() * 11.0 == doctest::Approx(1e-2));
  CHECK(g.lambdas_cost.back() * 11.0 == doctest::Approx(1.0));
  CHECK(g.lambdas_abs.front() == 0.0);
  CHECK(g.lambdas_abs.back() == 1.0);
  CHECK_NOTHROW(validate_grid(g));
  CHECK_THROWS_AS(validate_grid({{0.1, 0.1}, {0.0}}), Error);
  CHECK_THROWS_AS(validate_grid({{-0.1}, {0.0}}), Error);
  CHECK_THROWS_AS(validate_grid({{}, {0.0}}), Error);
}

TEST_CASE("percent change convention") {
  CHECK(percent_change(0.186, 0.211) == doctest::Approx(-11.848).epsilon(1e-4));
  CHECK(percent_change(0.0, 0.0) == 0.0);
  CHECK(std::isnan(percent_change(0.1, 0.0)));
}
