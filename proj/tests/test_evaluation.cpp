#include <doctest.h>

#include <cmath>
#include <sstream>

#include "eval_oracle.hpp"
#include "udc/error.hpp"
#include "udc/evaluation.hpp"

using namespace udc;
using udc::testing::oracle_evaluate;

namespace {

std::vector<ScoredPrediction> perfect(std::size_t n, int classes) {
  std::vector<ScoredPrediction> out;
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i) % classes;
    out.push_back({"p" + std::to_string(i), c, c, static_cast<double>(i % 7)});
  }
  return out;
}

}  // namespace

TEST_CASE("deferred selection") {
  std::vector<ScoredPrediction> ten;
  for (int i = 0; i < 10; ++i) ten.push_back({"d" + std::to_string(i), 0, 0, 0.1 * i});
  CHECK(select_deferred(ten, 0.0).deferred.empty());
  auto s = select_deferred(ten, 0.2);
  REQUIRE(s.deferred.size() == 2);
  CHECK(s.deferred[0].instance_id == "d9");
  CHECK(s.deferred[1].instance_id == "d8");
  CHECK(s.kept.size() == 8);
  CHECK(select_deferred(ten, 0.3).deferred.size() == 3);
  CHECK_THROWS_AS(select_deferred(ten, 1.0), InvalidArgument);

  std::vector<ScoredPrediction> tied{{"b", 0, 0, 1.0}, {"a", 0, 0, 1.0}, {"c", 0, 0, 0.5}};
  CHECK(select_deferred(tied, 0.34).deferred[0].instance_id == "a");

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto items = udc::testing::random_fixture(seed, 200);
    for (double r : {0.1, 0.2, 0.3, 0.4, 0.5}) {
      auto split = select_deferred(items, r);
      auto sorted = items;
      std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
        return a.score > b.score || (a.score == b.score && a.instance_id < b.instance_id);
      });
      const std::size_t k = udc::testing::oracle_deferred_count(r, items.size());
      REQUIRE(split.deferred.size() == k);
      for (std::size_t i = 0; i < k; ++i) CHECK(split.deferred[i].instance_id == sorted[i].instance_id);
    }
  }
}

TEST_CASE("deferred counts are exact for decimal ratios") {
  CHECK(deferred_count(0.3, 10) == 3);
  CHECK(deferred_count(0.1, 30) == 3);
  CHECK(deferred_count(0.7, 10) == 7);
  CHECK(deferred_count(0.25, 10) == 2);
  for (std::size_t n = 1; n <= 500; ++n) {
    for (double r : {0.1, 0.2, 0.3, 0.4, 0.15, 0.35}) CHECK(deferred_count(r, n) == udc::testing::oracle_deferred_count(r, n));
  }
}

TEST_CASE("classification metrics") {
  std::vector<int> truth{0, 1, 2, 1}, same{0, 1, 2, 1};
  auto all = classification_metrics(same, truth);
  CHECK(all.accuracy == 1.0);
  CHECK(all.micro_f1 == 1.0);
  CHECK(all.macro_f1 == 1.0);

  // Class 0: TP=1, FP=1, FN=0 -> F1 = 2/3. Class 1: TP=0, FP=0, FN=1 -> F1 = 0.
  std::vector<int> t2{0, 1}, p2{0, 0};
  auto m = classification_metrics(p2, t2);
  CHECK(m.accuracy == 0.5);
  CHECK(m.micro_f1 == 0.5);
  CHECK(m.macro_f1 == doctest::Approx((2.0 / 3.0 + 0.0) / 2.0).epsilon(1e-15));

  // A class that is only predicted, never true, does not enter the macro average.
  std::vector<int> t3{0, 0, 1}, p3{0, 2, 1};
  auto m3 = classification_metrics(p3, t3);
  CHECK(m3.macro_f1 == doctest::Approx((2.0 / 3.0 + 1.0) / 2.0).epsilon(1e-15));

  auto items = udc::testing::random_fixture(9, 300);
  std::vector<int> pred, tr;
  for (const auto& p : items) {
    pred.push_back(p.predicted_class);
    tr.push_back(p.true_class);
  }
  auto r = classification_metrics(pred, tr);
  CHECK(std::abs(r.micro_f1 - r.accuracy) <= 1e-12);

  std::vector<int> empty;
  CHECK_THROWS_AS(classification_metrics(empty, empty), InvalidArgument);
}

TEST_CASE("evaluate against the brute-force evaluator") {
  DeferralPolicy policy;
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    auto items = udc::testing::random_fixture(seed, 200);
    auto report = evaluate(items, policy, "fixture", seed);
    REQUIRE(report.rows.size() == policy.ratios.size() * policy.modes.size());
    for (const auto& row : report.rows) {
      auto o = oracle_evaluate(items, row.ratio, row.mode);
      CHECK(row.metrics.accuracy == o.metrics.accuracy);
      CHECK(row.metrics.micro_f1 == o.metrics.micro_f1);
      CHECK(row.metrics.macro_f1 == o.metrics.macro_f1);
      CHECK(row.n_deferred == o.deferred);
      CHECK(row.seed == seed);
    }
  }
}

TEST_CASE("perfect and oracle scorers") {
  DeferralPolicy policy;
  auto report = evaluate(perfect(50, 3), policy, "perfect", 0);
  for (const auto& row : report.rows) {
    CHECK(row.metrics.accuracy == 1.0);
    CHECK(row.metrics.micro_f1 == 1.0);
    CHECK(row.metrics.macro_f1 == 1.0);
    CHECK(row.improvement_ratio == 0.0);
  }

  auto items = udc::testing::with_oracle_scores(udc::testing::random_fixture(3, 200));
  std::size_t correct = 0;
  for (const auto& p : items) correct += p.predicted_class == p.true_class;
  const double error_rate = 1.0 - static_cast<double>(correct) / 200.0;
  for (double r : policy.ratios) {
    auto m = deferral_metrics(select_deferred(items, r), MetricMode::combined);
    const std::size_t k = deferred_count(r, 200);
    CHECK(static_cast<std::size_t>(std::llround(m.accuracy * 200)) == std::min<std::size_t>(200, correct + k));
    if (r >= error_rate) CHECK(m.accuracy == 1.0);
  }
}

TEST_CASE("improvement ratio is relative to ratio zero") {
  auto items = udc::testing::random_fixture(77, 200);
  auto report = evaluate(items, DeferralPolicy{}, "x", 0);
  for (const auto& row : report.rows) {
    auto base = oracle_evaluate(items, 0.0, row.mode).metrics.micro_f1;
    CHECK(row.improvement_ratio == doctest::Approx((row.metrics.micro_f1 - base) / base).epsilon(1e-12));
  }
}

TEST_CASE("random deferral baseline") {
  auto perfect_items = perfect(100, 4);
  for (auto mode : {MetricMode::remaining_only, MetricMode::combined}) {
    CHECK(random_deferral_baseline(perfect_items, 0.3, mode, 20, 1).accuracy == 1.0);
  }

  auto items = udc::testing::random_fixture(5, 200);
  for (auto mode : {MetricMode::remaining_only, MetricMode::combined}) {
    auto zero = random_deferral_baseline(items, 0.0, mode, 10, 1);
    auto eval0 = deferral_metrics(select_deferred(items, 0.0), mode);
    CHECK(zero.accuracy == doctest::Approx(eval0.accuracy).epsilon(1e-15));
  }

  // 30% errors, combined, r = 0.2: expected accuracy 0.7 + 0.2 * 0.3 = 0.76.
  std::vector<ScoredPrediction> thirty;
  for (int i = 0; i < 1000; ++i) thirty.push_back({"t" + std::to_string(i), i % 10 < 3 ? 1 : 0, 0, 0.0});
  auto m = random_deferral_baseline(thirty, 0.2, MetricMode::combined, 100, 42);
  // Each trial defers 200 of 1000; the number of fixed errors is hypergeometric.
  const double n = 1000, k = 200, errors = 300;
  const double var = k * (errors / n) * (1 - errors / n) * (n - k) / (n - 1) / (n * n);
  CHECK(std::abs(m.accuracy - 0.76) <= 3.0 * std::sqrt(var / 100.0));
  CHECK(random_deferral_baseline(thirty, 0.2, MetricMode::combined, 100, 42).accuracy == m.accuracy);
  CHECK_THROWS_AS(random_deferral_baseline(thirty, 0.2, MetricMode::combined, 0, 42), InvalidArgument);
}

TEST_CASE("report output") {
  auto report = evaluate(perfect(10, 2), DeferralPolicy{}, "perfect", 7);
  std::ostringstream csv;
  write_report_csv(report, csv);
  std::istringstream lines(csv.str());
  std::string header, first;
  std::getline(lines, header);
  std::getline(lines, first);
  CHECK(header == "scorer,ratio,mode,accuracy,micro_f1,macro_f1,improvement_ratio,n_deferred,seed");
  CHECK(first == "perfect,0.0000,remaining_only,1.000000,1.000000,1.000000,0.000000,0,7");
  const std::string table = format_report_table(report);
  CHECK(table.find("micro_f1") != std::string::npos);
  CHECK(table.find("macro_f1") != std::string::npos);
  CHECK(table.find("1.000 (0.0%)") != std::string::npos);

  DeferralPolicy bad;
  bad.ratios = {0.2, 0.1};
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad.ratios = {1.0};
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  CHECK(parse_metric_mode("combined") == MetricMode::combined);
  CHECK_THROWS_AS(parse_metric_mode("both"), InvalidArgument);
}
