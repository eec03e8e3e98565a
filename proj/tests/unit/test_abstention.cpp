#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "cascade/abstention.hpp"
#include "cascade/error.hpp"
#include "cascade/joint_density.hpp"
#include "fixtures.hpp"

using namespace cascade;

namespace {

struct Experiment {
  PRCurve curve;
  double baseline;
};

// Train on 300 queries, evaluate on 10^4; the upstream confidence stands in for the raw signal.
Experiment predict_abstention(double rho, double rate, std::uint64_t seed) {
  const auto model = fixtures::model_k2(rho);
  const auto train = sample_joint(model, 300, seed);
  const auto test = sample_joint(model, 10000, seed + 1);
  std::vector<double> final_train;
  std::vector<std::vector<double>> up_train, up_test;
  for (const auto& r : train) {
    final_train.push_back(r[1]);
    up_train.push_back({r[0]});
  }
  const auto labels = label_abstentions(final_train, rate);
  const auto clf = fit_abstention_classifier(up_train, labels);
  std::vector<bool> y;
  for (const auto& r : test) {
    up_test.push_back({r[0]});
    y.push_back(r[1] < labels.xi_k);
  }
  auto curve = precision_recall(clf, up_test, y);
  return {curve, curve.baseline};
}

}  // namespace

TEST_CASE("label_abstentions order statistics") {
  std::vector<double> ten, twenty;
  for (int i = 1; i <= 10; ++i) ten.push_back(i / 10.0);
  for (int i = 1; i <= 20; ++i) twenty.push_back(i / 20.0);
  // Ten scores fall below the minimum sample size.
  CHECK_THROWS_AS(label_abstentions(ten, 0.2), Error);
  const auto l = label_abstentions(twenty, 0.2);
  CHECK(std::count(l.labels.begin(), l.labels.end(), true) == 4);
  CHECK(l.xi_k == 0.25);
  CHECK(l.realized_rate() == 0.2);
  CHECK(l.labels[3]);
  CHECK_FALSE(l.labels[4]);
}

TEST_CASE("label_abstentions realised rate on uniform draws") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> xs(1000);
  for (auto& v : xs) v = u(rng);
  const auto l = label_abstentions(xs, 0.3);
  CHECK(l.realized_rate() >= 0.29);
  CHECK(l.realized_rate() <= 0.31);
  for (double rate : {0.05, 0.2, 0.3, 0.77}) {
    const auto m = label_abstentions(xs, rate);
    CHECK(std::abs(m.realized_rate() - rate) <= 1.0 / 1000.0 + 1e-12);
  }
}

TEST_CASE("label_abstentions rejects degenerate input") {
  try {
    label_abstentions(std::vector<double>(50, 0.4), 0.2);
    FAIL("constant scores accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Degenerate);
  }
  std::vector<double> xs(30);
  for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = i / 30.0;
  CHECK_THROWS_AS(label_abstentions(xs, 0.0), Error);
  CHECK_THROWS_AS(label_abstentions(xs, 1.0), Error);
}

TEST_CASE("separable single feature gives a near-perfect classifier") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<double>> up;
  std::vector<double> fin;
  for (int i = 0; i < 400; ++i) {
    const double x = u(rng);
    up.push_back({x});
    fin.push_back(x);  // abstain exactly when the upstream score is low
  }
  const auto labels = label_abstentions(fin, 0.3);
  const auto clf = fit_abstention_classifier(up, labels);
  // Mann-Whitney AUC.
  double wins = 0, pairs = 0;
  for (std::size_t a = 0; a < up.size(); ++a)
    for (std::size_t b = 0; b < up.size(); ++b)
      if (labels.labels[a] && !labels.labels[b]) {
        const double sa = clf.score(up[a]), sb = clf.score(up[b]);
        wins += sa > sb ? 1.0 : (sa == sb ? 0.5 : 0.0);
        pairs += 1.0;
      }
  CHECK(wins / pairs >= 0.999);

  AbstentionLabeling one_class{0.3, 0.0, std::vector<bool>(400, false)};
  try {
    fit_abstention_classifier(up, one_class);
    FAIL("single-class labels accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Degenerate);
  }
}

TEST_CASE("precision-recall curve matches a brute-force threshold scan") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> d(0, 30);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> s(500);
  std::vector<bool> y(500);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = d(rng) / 30.0;
    y[i] = u(rng) < s[i];
  }
  const auto c = precision_recall_from_scores(s, y);
  auto distinct = s;
  std::sort(distinct.rbegin(), distinct.rend());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  REQUIRE(c.points.size() == distinct.size());
  const double pos = static_cast<double>(std::count(y.begin(), y.end(), true));
  for (std::size_t p = 0; p < distinct.size(); ++p) {
    double tp = 0, pred = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= distinct[p]) {
        pred += 1;
        tp += y[i];
      }
    CHECK(c.points[p].threshold == distinct[p]);
    CHECK(c.points[p].recall == doctest::Approx(tp / pos).epsilon(1e-15));
    CHECK(c.points[p].precision == doctest::Approx(tp / pred).epsilon(1e-15));
    if (p) CHECK(c.points[p].recall >= c.points[p - 1].recall);
  }
  CHECK(c.points.back().recall == 1.0);
  CHECK(c.points.back().precision == c.baseline);
  CHECK(c.baseline == pos / 500.0);

  double ap = 0, prev = 0;
  for (const auto& p : c.points) {
    ap += (p.recall - prev) * p.precision;
    prev = p.recall;
  }
  CHECK(average_precision(c) == doctest::Approx(ap).epsilon(1e-15));
  for (double r : {0.0, 0.1, 0.5, 1.0}) {
    const auto it = std::find_if(c.points.begin(), c.points.end(), [&](const PRPoint& p) { return p.recall >= r; });
    CHECK(precision_at_recall(c, r) == it->precision);
  }
}

TEST_CASE("precision-recall edge cases") {
  std::vector<double> perfect = {0.9, 0.8, 0.7, 0.2, 0.1, 0.05};
  std::vector<bool> y = {true, true, true, false, false, false};
  const auto c = precision_recall_from_scores(perfect, y);
  for (const auto& p : c.points)
    if (p.recall < 1.0 || p.threshold >= 0.7) CHECK(p.precision == 1.0);
  CHECK(precision_at_recall(c, 1.0) == 1.0);

  const auto flat = precision_recall_from_scores(std::vector<double>(6, 0.4), y);
  REQUIRE(flat.points.size() == 1);
  CHECK(flat.points[0].recall == 1.0);
  CHECK(flat.points[0].precision == 0.5);
  CHECK(flat.baseline == 0.5);

  try {
    precision_recall_from_scores(perfect, std::vector<bool>(6, false));
    FAIL("no positives accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Degenerate);
  }
}

TEST_CASE("upstream confidences predict the final abstention when correlated") {
  const auto strong = predict_abstention(0.8, 0.3, 10);
  CHECK(precision_at_recall(strong.curve, 0.2) >= strong.baseline + 0.15);
  for (const auto& p : strong.curve.points)
    if (p.recall >= 0.01 && p.recall <= 0.5) CHECK(p.precision > strong.baseline);

  const auto none = predict_abstention(0.0, 0.3, 20);
  // Precision is only stable once a few hundred predictions are made.
  for (const auto& p : none.curve.points)
    if (p.recall * none.baseline * 10000 >= 200) CHECK(std::abs(p.precision - none.baseline) <= 0.07);
}

TEST_CASE("average precision grows with correlation") {
  double prev = 0.0;
  for (double rho : {0.0, 0.4, 0.8}) {
    const auto e = predict_abstention(rho, 0.3, 30);
    const double ap = average_precision(e.curve);
    CHECK(ap >= prev);
    prev = ap;
  }
}

TEST_CASE("cost savings examples") {
  const auto w = cost_savings_estimate(0.30, 0.20, 0.80, 0.10);
  CHECK(std::abs(w.early_fraction - 0.075) <= 1e-12);
  CHECK(std::abs(w.total_cost_factor - 0.9325) <= 1e-12);
  CHECK(std::abs(w.new_abstention_rate - 0.315) <= 1e-12);

  const auto none = cost_savings_estimate(0.30, 0.0, 0.80, 0.10);
  CHECK(none.total_cost_factor == 1.0);
  CHECK(none.new_abstention_rate == 0.30);

  const auto all = cost_savings_estimate(0.30, 1.0, 1.0, 0.10);
  CHECK(std::abs(all.early_fraction - 0.3) <= 1e-15);
  CHECK(std::abs(all.total_cost_factor - 0.73) <= 1e-12);
  CHECK(all.new_abstention_rate == 0.30);

  CHECK_THROWS_AS(cost_savings_estimate(0.3, 0.2, 0.0, 0.1), Error);
  CHECK_THROWS_AS(cost_savings_estimate(0.0, 0.2, 0.5, 0.1), Error);
  CHECK_THROWS_AS(cost_savings_estimate(0.3, 0.2, 0.5, 1.5), Error);
}

TEST_CASE("cost savings properties") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 2000; ++i) {
    const double a = 0.05 + 0.5 * u(rng), r = u(rng), p = 0.5 + 0.5 * u(rng), c = 0.01 + 0.98 * u(rng);
    const auto s = cost_savings_estimate(a, r, p, c);
    if (s.early_fraction > 1.0) continue;  // more early exits than queries is outside the model
    CHECK(s.total_cost_factor > c);
    CHECK(s.total_cost_factor <= 1.0);
    CHECK(s.new_abstention_rate >= a);
  }
  CHECK(cost_savings_estimate(0.3, 0.4, 1.0, 0.1).new_abstention_rate == 0.3);
  CHECK(cost_savings_estimate(0.3, 0.4, 0.9, 0.1).new_abstention_rate > 0.3);
  CHECK(cost_savings_estimate(0.3, 0.4, 0.9, 0.1).total_cost_factor < 1.0);
}

TEST_CASE("precision-recall JSON round trip") {
  PRCurve c{{{0.25, 1.0, 0.9}, {0.5, 2.0 / 3.0, 0.4}, {1.0, 0.4, 0.1}}, 0.4};
  const auto back = pr_curve_from_json(nlohmann::json::parse(to_json(c).dump()));
  CHECK(back.baseline == c.baseline);
  REQUIRE(back.points.size() == 3);
  CHECK(back.points[1].precision == c.points[1].precision);
  auto bad = to_json(c);
  bad["points"][0].erase("recall");
  try {
    pr_curve_from_json(bad);
    FAIL("malformed curve accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Schema);
  }
}
