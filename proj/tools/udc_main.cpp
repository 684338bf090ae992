// udc: train, score, evaluate and triage uncertainty-aware text classifiers.
//
// Settings come from three layers: built-in defaults, then --config FILE, then
// command-line flags. The materialized result is written to
// <out>/effective_config.json by every command that produces files.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "udc/commands.hpp"
#include "udc/error.hpp"

namespace {

namespace fs = std::filesystem;

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string dataset;
  std::string format;
};

udc::RunConfig resolve(const GlobalFlags& flags) {
  udc::RunConfig config = flags.config.empty() ? udc::RunConfig() : udc::load_run_config(flags.config);
  if (flags.seed) config.seed = *flags.seed;
  if (!flags.out.empty()) config.out = flags.out;
  if (!flags.dataset.empty()) config.dataset.path = flags.dataset;
  if (!flags.format.empty()) config.dataset.format = udc::parse_dataset_format(flags.format);
  config.propagate();
  config.validate();
  return config;
}

fs::path default_checkpoint(const udc::RunConfig& config, const std::string& flag) {
  return flag.empty() ? fs::path(config.out) / "model.ckpt" : fs::path(flag);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Uncertainty-aware deep text classification"};
  app.require_subcommand(1);

  GlobalFlags flags;
  app.add_option("--config", flags.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", flags.seed, "Master seed (overrides the config)");
  app.add_option("--out", flags.out, "Output directory (overrides the config)");
  app.add_option("--dataset", flags.dataset, "Dataset path (overrides the config)");
  app.add_option("--format", flags.format, "Dataset format: newsgroups_dirs, jsonl or csv");

  auto* train = app.add_subcommand("train", "Train a classifier, or every point of the configured sweep");

  std::string checkpoint;
  std::string split = "test";
  auto* score = app.add_subcommand("score", "Write one uncertainty score file per configured scorer");
  score->add_option("--checkpoint", checkpoint, "Model checkpoint (default <out>/model.ckpt)");
  score->add_option("--split", split, "train, valid or test");

  std::vector<std::string> score_files;
  auto* evaluate = app.add_subcommand("evaluate", "Selective-prediction report over score files");
  evaluate->add_option("scores", score_files, "Score JSONL files")->required();

  auto* export_features = app.add_subcommand("export-features", "Export deterministic features as CSV");
  export_features->add_option("--checkpoint", checkpoint, "Model checkpoint (default <out>/model.ckpt)");
  export_features->add_option("--split", split, "train, valid or test");

  std::string scores_path;
  std::optional<double> top_ratio;
  auto* triage_export = app.add_subcommand("triage-export", "Write the most uncertain instances as a triage queue");
  triage_export->add_option("--scores", scores_path, "Score JSONL file")->required();
  triage_export->add_option("--top-ratio", top_ratio, "Fraction to export (default triage.top_ratio)");

  udc::ServeOptions serve_options;
  std::string queue, labels, static_dir;
  auto* serve = app.add_subcommand("serve", "Serve the triage queue over HTTP");
  serve->add_option("--queue", queue, "Triage queue JSONL")->required();
  serve->add_option("--labels", labels, "Append-only label store (default <queue dir>/labels.jsonl)");
  serve->add_option("--host", serve_options.host, "Bind address");
  serve->add_option("--port", serve_options.port, "Bind port");
  serve->add_option("--static", static_dir, "Directory with the built UI bundle");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (serve->parsed()) {
      serve_options.queue = queue;
      serve_options.labels = labels.empty() ? fs::path(queue).parent_path() / "labels.jsonl" : fs::path(labels);
      serve_options.static_dir = static_dir;
      udc::cmd_serve(serve_options, std::cerr);
      return 0;
    }
    const udc::RunConfig config = resolve(flags);
    if (train->parsed()) {
      udc::cmd_train(config, std::cerr);
    } else if (score->parsed()) {
      for (const auto& p : udc::cmd_score(config, default_checkpoint(config, checkpoint), udc::parse_split_name(split),
                                          std::cerr)) {
        std::cout << p.string() << '\n';
      }
    } else if (evaluate->parsed()) {
      std::vector<fs::path> files(score_files.begin(), score_files.end());
      udc::cmd_evaluate(config, files, std::cout);
    } else if (export_features->parsed()) {
      udc::cmd_export_features(config, default_checkpoint(config, checkpoint), udc::parse_split_name(split),
                               std::cout);
    } else if (triage_export->parsed()) {
      std::cout << udc::cmd_triage_export(config, scores_path, top_ratio.value_or(config.triage.top_ratio), std::cerr)
                       .string()
                << '\n';
    }
  } catch (const udc::InvalidArgument& e) {
    std::cerr << "udc: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "udc: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
