// Command-line front end: train, evaluate, probe, compare, serve.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "da6/interpretability.hpp"
#include "da6/service.hpp"
#include "da6/training.hpp"

namespace fs = std::filesystem;
using namespace da6;

namespace {

int cmd_train(const fs::path& config_path, std::optional<std::uint64_t> seed, const fs::path& out, bool resume,
              bool quiet) {
  const auto ckpt_path = out / "checkpoint.ckpt";
  if (resume && fs::exists(ckpt_path)) {
    auto trainer = train::Trainer::resume(load_checkpoint(ckpt_path));
    std::cerr << "resuming at episode " << trainer.episode() << "\n";
    trainer.run(out, quiet ? nullptr : &std::cerr);
    return 0;
  }
  auto cfg = train::load_train_config(config_path);
  if (seed) cfg.seed = *seed;
  train::Trainer trainer(cfg);
  trainer.run(out, quiet ? nullptr : &std::cerr);
  return 0;
}

int cmd_evaluate(const fs::path& ckpt, int episodes, std::uint64_t seed, bool random, bool json) {
  const auto set = train::load_policies(ckpt);
  const auto summary = random ? train::evaluate_random(set.spec, episodes, seed) : train::evaluate(set, episodes, seed);
  if (json) {
    std::cout << summary.to_json().dump(2) << "\n";
  } else {
    std::cout << summary.table();
  }
  return 0;
}

int cmd_probe(const fs::path& scenario_path, const fs::path& ckpt, const std::string& layer, const std::string& agg,
              const std::string& format, const std::optional<fs::path>& out) {
  const auto scenario = interp::load_scenario(scenario_path);
  const auto set = train::load_policies(ckpt);
  const interp::ProbeOptions opt{interp::LayerSelector::parse(layer), interp::parse_aggregation(agg)};
  const auto report = interp::run_scenario(scenario, set, opt);
  std::cout << "action " << kActionNames[report.action] << "\nscores";
  for (double s : report.scores) std::cout << " " << train::format_number(s);
  std::cout << "\n";
  if (!out) {
    for (const auto& h : report.heatmaps) std::cout << "# " << h.aggregation << "\n" << interp::render_heatmap(h, format);
    return 0;
  }
  fs::create_directories(*out);
  std::ofstream(*out / "report.json") << interp::report_json(report).dump(2) << "\n";
  for (const auto& h : report.heatmaps) {
    const auto name = "heatmap" + (h.aggregation == "mean-heads" ? std::string() : "_" + h.aggregation) + "." + format;
    std::ofstream(*out / name) << interp::render_heatmap(h, format);
  }
  std::cout << "wrote " << out->string() << "\n";
  return 0;
}

int cmd_compare(const fs::path& scenario_path, const std::vector<fs::path>& ckpts, const fs::path& out,
                const std::string& layer, const std::string& agg) {
  const auto scenario = interp::load_scenario(scenario_path);
  std::vector<train::PolicySet> sets;
  for (const auto& c : ckpts) sets.push_back(train::load_policies(c));
  const interp::ProbeOptions opt{interp::LayerSelector::parse(layer), interp::parse_aggregation(agg)};
  const auto index = interp::compare_variants(scenario, sets, out, opt);
  for (const auto& e : index["entries"]) {
    std::cout << e["checkpoint"].get<std::string>() << " (" << e["variant"].get<std::string>() << "): "
              << e["action"].get<std::string>() << "\n";
  }
  std::cout << "wrote " << (out / "index.json").string() << "\n";
  return 0;
}

int cmd_serve(const fs::path& config_path) {
  service::serve(service::load_service_config(config_path), &std::cerr);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional-attention multi-agent RL toolkit"};
  app.require_subcommand(1);

  auto* train_cmd = app.add_subcommand("train", "Train independent learners from a JSON config");
  fs::path config, out;
  std::optional<std::uint64_t> seed;
  bool resume = false, quiet = false;
  train_cmd->add_option("--config", config, "Training config (JSON)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--seed", seed, "Override the config seed");
  train_cmd->add_option("--out", out, "Output directory")->required();
  train_cmd->add_flag("--resume", resume, "Continue from <out>/checkpoint.ckpt if present");
  train_cmd->add_flag("--quiet", quiet, "No per-episode log");

  auto* eval_cmd = app.add_subcommand("evaluate", "Greedy rollouts of a checkpoint");
  fs::path ckpt;
  int episodes = 100;
  std::uint64_t eval_seed = 0;
  bool random = false, json = false;
  eval_cmd->add_option("--checkpoint", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--episodes", episodes, "Episodes to play")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", eval_seed, "Evaluation seed");
  eval_cmd->add_flag("--random", random, "Uniform random actions instead of the policy");
  eval_cmd->add_flag("--json", json, "Print the summary as JSON");

  auto* probe_cmd = app.add_subcommand("probe", "Attention heatmap of one checkpoint on a staged scenario");
  fs::path scenario, probe_ckpt;
  std::string layer = "last", agg = "mean-heads", format = "csv";
  std::optional<fs::path> probe_out;
  probe_cmd->add_option("--scenario", scenario, "Scenario file (JSON)")->required()->check(CLI::ExistingFile);
  probe_cmd->add_option("--checkpoint", probe_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  probe_cmd->add_option("--layer", layer, "Encoder layer: last or a zero-based index");
  probe_cmd->add_option("--agg", agg, "mean-heads or per-head")->check(CLI::IsMember({"mean-heads", "per-head"}));
  probe_cmd->add_option("--format", format, "Heatmap format")->check(CLI::IsMember({"csv", "pgm"}));
  probe_cmd->add_option("--out", probe_out, "Write report.json and heatmaps here instead of stdout");

  auto* compare_cmd = app.add_subcommand("compare", "Run one scenario against several checkpoints");
  std::vector<fs::path> compare_ckpts;
  fs::path compare_out = "compare_out";
  compare_cmd->add_option("--scenario", scenario, "Scenario file (JSON)")->required()->check(CLI::ExistingFile);
  compare_cmd->add_option("--checkpoints", compare_ckpts, "Comma-separated checkpoint files")
      ->required()
      ->delimiter(',')
      ->check(CLI::ExistingFile);
  compare_cmd->add_option("--out", compare_out, "Output directory");
  compare_cmd->add_option("--layer", layer, "Encoder layer: last or a zero-based index");
  compare_cmd->add_option("--agg", agg, "mean-heads or per-head")->check(CLI::IsMember({"mean-heads", "per-head"}));

  auto* serve_cmd = app.add_subcommand("serve", "HTTP inference service for the probe UI");
  fs::path serve_config;
  serve_cmd->add_option("--config", serve_config, "Service config (JSON)")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train_cmd) return cmd_train(config, seed, out, resume, quiet);
    if (*eval_cmd) return cmd_evaluate(ckpt, episodes, eval_seed, random, json);
    if (*probe_cmd) return cmd_probe(scenario, probe_ckpt, layer, agg, format, probe_out);
    if (*compare_cmd) return cmd_compare(scenario, compare_ckpts, compare_out, layer, agg);
    if (*serve_cmd) return cmd_serve(serve_config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
