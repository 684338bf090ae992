#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "synthetic_corpus.hpp"
#include "temp_dir.hpp"
#include "udc/checkpoint.hpp"
#include "udc/commands.hpp"
#include "udc/metric_loss.hpp"
#include "udc/triage.hpp"
#include "udc/uncertainty.hpp"

using nlohmann::json;
using udc::testing::read_file;
using udc::testing::TempDir;
using udc::testing::write_file;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(UDC_CLI_PATH) + " " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json small_config(const fs::path& dataset, const fs::path& out) {
  return json{
      {"seed", 11},
      {"out", out.string()},
      {"dataset", {{"path", dataset.string()}, {"format", "jsonl"}}},
      {"encoder", {{"embed_dim", 16}, {"kernel_sizes", {2, 3}}, {"filters_per_kernel", 8}, {"max_len", 60}}},
      {"train", {{"max_epochs", 2}, {"patience", 2}, {"batch_size", 16}}},
      {"scorers",
       {{{"kind", "dropout_entropy"}, {"num_samples", 10}},
        {{"kind", "dropout_baseline"}, {"num_samples", 10}},
        {{"kind", "pl_variance"}, {"num_samples", 10}},
        {{"kind", "distance_knn"}, {"knn_k", 5}}}},
      {"deferral", {{"ratios", {0.0, 0.1, 0.2, 0.3}}, {"random_baseline_trials", 5}}},
  };
}

struct Workspace {
  TempDir dir{"cli"};
  fs::path dataset = dir / "data.jsonl";

  Workspace() {
    udc::testing::SyntheticCorpusSpec spec;
    spec.docs_per_class = 60;
    spec.max_length = 60;
    udc::testing::write_dataset_jsonl(udc::testing::make_synthetic_corpus(spec), dataset);
  }

  fs::path config(const std::string& name, const json& j) {
    const auto p = dir / (name + ".json");
    write_file(p, j.dump(2));
    return p;
  }
};

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("exit codes") {
  Workspace ws;
  const auto log = ws.dir / "log.txt";
  CHECK(run_cli("--help", log) == 0);
  CHECK(run_cli("", log) == 1);
  CHECK(run_cli("frobnicate", log) == 1);
  CHECK(run_cli("evaluate", log) == 1);
  CHECK(run_cli("--config /definitely/missing.json train", log) == 1);

  auto bad_split = small_config(ws.dataset, ws.dir / "run");
  bad_split["split"] = {{"train", 0.9}};
  CHECK(run_cli("--config " + ws.config("bad", bad_split).string() + " train", log) == 1);
  CHECK(read_file(log).find("udc:") != std::string::npos);

  auto missing_data = small_config(ws.dir / "nothing.jsonl", ws.dir / "run");
  CHECK(run_cli("--config " + ws.config("missing", missing_data).string() + " train", log) == 2);
  CHECK(run_cli("--out " + (ws.dir / "run").string() + " --dataset " + ws.dataset.string() +
                    " --format jsonl score --checkpoint " + (ws.dir / "nope.ckpt").string(),
                log) == 2);
}

TEST_CASE("train, score, evaluate, export and triage end to end") {
  Workspace ws;
  const auto out = ws.dir / "run";
  const auto log = ws.dir / "log.txt";
  const auto cfg = ws.config("run", small_config(ws.dataset, out)).string();

  REQUIRE(run_cli("--config " + cfg + " train", log) == 0);
  for (const char* f : {"effective_config.json", "vocab.txt", "model.ckpt", "train_log.csv"}) {
    CHECK(fs::exists(out / f));
  }
  auto effective = json::parse(read_file(out / "effective_config.json"));
  CHECK(effective["encoder"]["dropout_p"] == 0.5);
  CHECK(effective["metric"]["margin"] == 0.5);
  CHECK(effective["seed"] == 11);
  CHECK(read_csv(out / "train_log.csv").size() == 3);
  auto loaded = udc::load_checkpoint(out / "model.ckpt");
  CHECK(loaded.config.embed_dim == 16);
  CHECK(loaded.config.num_classes == 4);

  REQUIRE(run_cli("--config " + cfg + " score", log) == 0);
  const auto de_path = out / "scores_test_dropout_entropy.jsonl";
  const auto first_scores = read_file(de_path);
  auto de = read_jsonl(de_path);
  REQUIRE(de.size() == 48);
  for (const auto& r : de) {
    CHECK(r["score"].get<double>() >= 0.0);
    CHECK(r["score"].get<double>() <= std::log(4.0) + 1e-9);
    CHECK(r.contains("true_label"));
    int total = 0;
    for (int h : r["histogram"]) total += h;
    CHECK(total == 10);
  }
  for (const auto& r : read_jsonl(out / "scores_test_pl_variance.jsonl")) CHECK(r["score"].get<double>() <= 0.0);
  CHECK(read_jsonl(out / "scores_test_distance_knn.jsonl").size() == 48);

  SUBCASE("scores are reproducible") {
    REQUIRE(run_cli("--config " + cfg + " score", log) == 0);
    CHECK(read_file(de_path) == first_scores);
  }

  SUBCASE("evaluate writes the report") {
    REQUIRE(run_cli("--config " + cfg + " evaluate " + de_path.string() + " " +
                        (out / "scores_test_dropout_baseline.jsonl").string(),
                    log) == 0);
    auto rows = read_csv(out / "report.csv");
    REQUIRE(!rows.empty());
    CHECK(rows[0] == std::vector<std::string>{"scorer", "ratio", "mode", "accuracy", "micro_f1", "macro_f1",
                                              "improvement_ratio", "n_deferred", "seed"});
    // 3 scorers (two files + random) x 2 modes x 4 ratios
    CHECK(rows.size() == 1 + 3 * 2 * 4);
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i][1] == "0.3000") CHECK(rows[i][7] == "14");
      if (rows[i][1] == "0.0000") CHECK(rows[i][6] == "0.000000");
    }
    CHECK(read_file(out / "report.txt").find("dropout_entropy") != std::string::npos);

    auto other = read_jsonl(de_path);
    other.pop_back();
    std::ofstream short_file(ws.dir / "short.jsonl");
    for (const auto& r : other) short_file << r.dump() << '\n';
    short_file.close();
    CHECK(run_cli("--config " + cfg + " evaluate " + de_path.string() + " " + (ws.dir / "short.jsonl").string(),
                  log) == 2);
  }

  SUBCASE("exported features reproduce the printed statistics") {
    REQUIRE(run_cli("--config " + cfg + " export-features", log) == 0);
    auto rows = read_csv(out / "features_test.csv");
    REQUIRE(rows.size() == 49);
    CHECK(rows[0].size() == 2 + 16);
    CHECK(rows[0][0] == "id");
    std::vector<std::string> ids;
    auto batch = udc::read_features_csv(out / "features_test.csv", &ids);
    CHECK(ids.size() == 48);
    auto stats = udc::distance_statistics(batch, udc::ClassPartition::from_labels(batch.labels));
    REQUIRE(stats.ok());
    char expect[32];
    std::snprintf(expect, sizeof expect, "ratio %.9g", *stats.ratio);
    CHECK(read_file(log).find(expect) != std::string::npos);
  }

  SUBCASE("triage export") {
    REQUIRE(run_cli("--config " + cfg + " triage-export --top-ratio 0 --scores " + de_path.string(), log) == 0);
    CHECK(read_jsonl(out / "triage_queue.jsonl").empty());
    REQUIRE(run_cli("--config " + cfg + " triage-export --top-ratio 0.25 --scores " + de_path.string(), log) == 0);
    auto queue = read_jsonl(out / "triage_queue.jsonl");
    REQUIRE(queue.size() == 12);
    for (std::size_t i = 1; i < queue.size(); ++i) {
      CHECK(queue[i - 1]["score"].get<double>() >= queue[i]["score"].get<double>());
    }
    CHECK(!queue[0]["text"].get<std::string>().empty());
    double freq = 0.0;
    for (const auto& cf : queue[0]["top3"]) freq += cf["freq"].get<double>();
    CHECK(freq <= 1.0 + 1e-12);
    CHECK(udc::read_triage_queue(out / "triage_queue.jsonl").items.size() == 12);
  }
}

TEST_CASE("metric weight zero trains the same model as a disabled metric") {
  Workspace ws;
  const auto log = ws.dir / "log.txt";
  auto off = small_config(ws.dataset, ws.dir / "off");
  off["metric"] = {{"enable", false}};
  auto zero = small_config(ws.dataset, ws.dir / "zero");
  zero["metric"] = {{"enable", true}, {"weight", 0.0}};
  REQUIRE(run_cli("--config " + ws.config("off", off).string() + " train", log) == 0);
  REQUIRE(run_cli("--config " + ws.config("zero", zero).string() + " train", log) == 0);
  CHECK(read_file(ws.dir / "off" / "model.ckpt") == read_file(ws.dir / "zero" / "model.ckpt"));
}

TEST_CASE("zero dropout gives zero entropy") {
  Workspace ws;
  const auto log = ws.dir / "log.txt";
  auto cfg = small_config(ws.dataset, ws.dir / "nodrop");
  cfg["encoder"]["dropout_p"] = 0.0;
  cfg["train"]["max_epochs"] = 1;
  cfg["scorers"] = {{{"kind", "dropout_entropy"}, {"num_samples", 10}}};
  const auto path = ws.config("nodrop", cfg).string();
  REQUIRE(run_cli("--config " + path + " train", log) == 0);
  REQUIRE(run_cli("--config " + path + " score", log) == 0);
  for (const auto& r : read_jsonl(ws.dir / "nodrop" / "scores_test_dropout_entropy.jsonl")) {
    CHECK(r["score"].get<double>() == 0.0);
  }
}

TEST_CASE("evaluate on hand-made score files") {
  TempDir dir("cli");
  const auto log = dir / "log.txt";
  // 20 instances, 6 wrong; the oracle scorer ranks the wrong ones first.
  std::ofstream oracle(dir / "oracle.jsonl"), perfect(dir / "perfect.jsonl");
  for (int i = 0; i < 20; ++i) {
    const int truth = i % 3;
    const bool wrong = i < 6;
    json r{{"id", "x" + std::to_string(i)},
           {"scorer", "dropout_entropy"},
           {"score", wrong ? 1.0 : 0.0},
           {"predicted_class", wrong ? (truth + 1) % 3 : truth},
           {"true_label", truth}};
    oracle << r.dump() << '\n';
    r["predicted_class"] = truth;
    r["scorer"] = "pl_variance";
    perfect << r.dump() << '\n';
  }
  oracle.close();
  perfect.close();
  write_file(dir / "cfg.json", json{{"out", (dir / "out").string()},
                                    {"deferral", {{"ratios", {0.0, 0.2, 0.3}}, {"modes", {"combined"}}}}}
                                   .dump());
  REQUIRE(run_cli("--config " + (dir / "cfg.json").string() + " evaluate " + (dir / "oracle.jsonl").string() + " " +
                      (dir / "perfect.jsonl").string(),
                  log) == 0);
  auto rows = read_csv(dir / "out" / "report.csv");
  int checked = 0;
  for (const auto& row : rows) {
    if (row[0] == "dropout_entropy") {
      const double expected = row[1] == "0.0000" ? 0.7 : row[1] == "0.2000" ? 0.9 : 1.0;
      CHECK(std::stod(row[3]) == doctest::Approx(expected));
      ++checked;
    } else if (row[0] == "pl_variance") {
      CHECK(row[3] == "1.000000");
      CHECK(row[4] == "1.000000");
      CHECK(row[5] == "1.000000");
      ++checked;
    }
  }
  CHECK(checked == 6);
}

TEST_CASE("sweep writes one row per point") {
  Workspace ws;
  const auto log = ws.dir / "log.txt";
  auto cfg = small_config(ws.dataset, ws.dir / "sweep");
  cfg["train"]["max_epochs"] = 1;
  cfg["sweep"] = {{{"margin", 0.5}, {"lambda", 0.1}}, {{"margin", 2.0}, {"lambda", 0.2}}};
  REQUIRE(run_cli("--config " + ws.config("sweep", cfg).string() + " train", log) == 0);
  auto rows = read_csv(ws.dir / "sweep" / "sweep.csv");
  REQUIRE(rows.size() == 3);
  CHECK(rows[0][0] == "index");
  CHECK(rows[2][1].rfind("2", 0) == 0);
  CHECK(fs::exists(ws.dir / "sweep" / "sweep" / "1" / "model.ckpt"));
}
