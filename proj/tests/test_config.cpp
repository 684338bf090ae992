#include <doctest.h>

#include "temp_dir.hpp"
#include "udc/config.hpp"
#include "udc/error.hpp"

using namespace udc;
using nlohmann::json;

TEST_CASE("defaults are materialized") {
  RunConfig c;
  auto j = to_json(c);
  CHECK(j["seed"] == 42);
  CHECK(j["encoder"]["embed_dim"] == 200);
  CHECK(j["encoder"]["kernel_sizes"] == json::array({3, 4, 5}));
  CHECK(j["encoder"]["filters_per_kernel"] == 100);
  CHECK(j["encoder"]["dropout_p"] == 0.5);
  CHECK(j["split"]["train"] == 0.7);
  CHECK(j["train"]["learning_rate"] == 0.001);
  CHECK(j["train"]["beta1"] == 0.9);
  CHECK(j["train"]["max_epochs"] == 30);
  CHECK(j["train"]["patience"] == 5);
  CHECK(j["metric"]["margin"] == 0.5);
  CHECK(j["metric"]["lambda"] == 0.1);
  CHECK(j["scorers"].size() == 4);
  CHECK(j["scorers"][0]["num_samples"] == 100);
  CHECK(j["deferral"]["ratios"] == json::array({0.0, 0.1, 0.2, 0.3, 0.4}));
  CHECK(j["deferral"]["random_baseline_trials"] == 100);
}

TEST_CASE("configs round trip losslessly") {
  RunConfig c;
  c.seed = 7;
  c.out = "somewhere";
  c.dataset.path = "data.jsonl";
  c.dataset.format = DatasetFormat::csv;
  c.dataset.num_classes = 5;
  c.encoder.embed_dim = 50;
  c.encoder.kernel_sizes = {2, 3};
  c.metric.enable = false;
  c.metric.loss.margin = 12.5;
  c.metric.weight = 0.25;
  c.scorers = {ScorerConfig{ScorerKind::distance_knn, 100, 7}};
  c.deferral.ratios = {0.0, 0.25};
  c.deferral.modes = {MetricMode::combined};
  c.sweep = {{0.5, 0.1}, {100.0, 0.2}};
  c.triage.top_ratio = 0.3;
  c.propagate();
  const auto text = to_json(c).dump(2);
  const auto back = run_config_from_json(json::parse(text));
  CHECK(to_json(back).dump(2) == text);
  CHECK(back.train.seed == 7);
  CHECK(back.split.seed == 7);
  CHECK_FALSE(back.train.metric_enabled);
  CHECK(back.train.metric.margin == 12.5);
  CHECK(back.scorers[0].seed == 7);
  CHECK(back.dataset.num_classes == 5);
}

TEST_CASE("partial configs keep the remaining defaults") {
  auto c = run_config_from_json(json::parse(R"({"encoder": {"embed_dim": 50}, "train": {"max_epochs": 3}})"));
  CHECK(c.encoder.embed_dim == 50);
  CHECK(c.encoder.filters_per_kernel == 100);
  CHECK(c.train.max_epochs == 3);
  CHECK(c.train.batch_size == 32);
}

TEST_CASE("invalid configs are rejected") {
  CHECK_THROWS_AS(run_config_from_json(json::parse(R"({"encodr": {}})")), InvalidArgument);
  CHECK_THROWS_AS(run_config_from_json(json::parse(R"({"train": {"lr": 0.1}})")), InvalidArgument);
  CHECK_THROWS_AS(run_config_from_json(json::parse(R"({"encoder": {"embed_dim": "big"}})")), InvalidArgument);
  CHECK_THROWS_AS(run_config_from_json(json::parse(R"({"scorers": [{"kind": "magic"}]})")), InvalidArgument);
  CHECK_THROWS_AS(run_config_from_json(json::parse(R"({"encoder": {"kind": "lstm"}})")), InvalidArgument);
  auto c = run_config_from_json(json::parse(R"({"split": {"train": 0.9}})"));
  CHECK_THROWS_AS(c.validate(), InvalidArgument);

  udc::testing::TempDir dir("config");
  udc::testing::write_file(dir / "broken.json", "{ nope");
  CHECK_THROWS_AS(load_run_config(dir / "broken.json"), InvalidArgument);
  CHECK_THROWS_AS(load_run_config(dir / "absent.json"), InvalidArgument);
}
