// probcoll: run collision-prediction RL sweeps, summarize their metrics, replay rollout logs.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "probcoll/harness.hpp"

namespace {

std::vector<double> parse_thresholds(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    const double v = std::stod(item, &used);
    if (used != item.size()) throw std::runtime_error("bad threshold '" + item + "'");
    out.push_back(v);
  }
  if (out.empty() || !std::is_sorted(out.begin(), out.end()))
    throw std::runtime_error("thresholds must be a nonempty ascending list");
  return out;
}

int cmd_run(const std::string& config_path, const std::string& out_dir, int jobs) {
  auto config = probcoll::load_config(config_path);
  if (!out_dir.empty()) config.output_dir = out_dir;
  const auto records = probcoll::run_experiment(config, jobs, &std::cerr);
  std::cout << "wrote " << records.size() << " records to " << config.output_dir << "/metrics.csv\n";
  return 0;
}

int cmd_summarize(const std::string& metrics_path, const std::string& thresholds_text) {
  std::ifstream in(metrics_path);
  if (!in) throw std::runtime_error("cannot open " + metrics_path);
  const auto records = probcoll::read_metrics_csv(in);
  const auto thresholds = parse_thresholds(thresholds_text);
  const auto dir = std::filesystem::path(metrics_path).parent_path();
  std::ostringstream s, t;
  probcoll::write_crash_summary_csv(s, records, thresholds);
  probcoll::write_task_curve_csv(t, records);
  probcoll::detail::write_file_atomically(dir / "crash_summary.csv", s.str());
  probcoll::detail::write_file_atomically(dir / "task_curve.csv", t.str());

  for (const auto& [point, recs] : probcoll::group_by_point(records)) {
    const auto& g = recs.front().params;
    std::printf("point %zu  %s  lambda_coll=%g lambda_std=%g lambda_const=%g\n", point,
                probcoll::to_string(g.estimator).c_str(), g.lambda_coll, g.lambda_std, g.lambda_const);
    const auto summary = probcoll::crash_speed_summary(recs, thresholds);
    std::printf("  crashes at speed >= s (mean +- std over %zu seeds):\n", summary.per_seed.size());
    for (std::size_t k = 0; k < thresholds.size(); ++k)
      std::printf("    s=%-6g %8.2f +- %.2f\n", thresholds[k], summary.mean_counts[k], summary.std_counts[k]);
    const auto curve = probcoll::task_performance_curve(recs);
    const auto& last = curve.back();
    std::printf("  final iteration %d task speed: mean %.3f std %.3f min %.3f max %.3f\n", last.iteration, last.mean,
                last.std, last.min, last.max);
  }
  std::printf("wrote %s and %s\n", (dir / "crash_summary.csv").string().c_str(),
              (dir / "task_curve.csv").string().c_str());
  return 0;
}

int cmd_replay(const std::string& log_path) {
  std::ifstream in(log_path);
  if (!in) throw std::runtime_error("cannot open " + log_path);
  const auto checks = probcoll::replay_rollout_log(nlohmann::json::parse(in));
  int mismatches = 0;
  for (const auto& c : checks) {
    const bool ok = c.collision_matches && c.max_state_error == 0.0;
    if (!ok) ++mismatches;
    std::printf("rollout %3zu  steps %3zu  %s", c.rollout, c.steps, c.collided ? "crash" : "safe ");
    if (c.collided) std::printf(" at %.3f m/s", c.crash_speed);
    std::printf("  state error %.3g  %s\n", c.max_state_error, ok ? "ok" : "MISMATCH");
  }
  std::printf("%zu rollouts replayed, %d mismatches\n", checks.size(), mismatches);
  return mismatches == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probabilistic collision prediction: experiment runner"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  int jobs = 1;
  auto* run = app.add_subcommand("run", "Run every grid point x seed of a config");
  run->add_option("--config", config_path, "JSON experiment config")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out_dir, "Output directory (overrides output_dir)");
  run->add_option("--jobs", jobs, "Parallel jobs")->check(CLI::PositiveNumber);

  std::string metrics_path, thresholds = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1";
  auto* summarize = app.add_subcommand("summarize", "Crash-speed summary and task curve from metrics.csv");
  summarize->add_option("--metrics", metrics_path, "metrics.csv path")->required()->check(CLI::ExistingFile);
  summarize->add_option("--thresholds", thresholds, "Comma-separated ascending speed thresholds (m/s)");

  std::string log_path;
  auto* replay = app.add_subcommand("replay", "Re-simulate a rollout log and check it");
  replay->add_option("--rollout-log", log_path, "Rollout log JSON")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(config_path, out_dir, jobs);
    if (*summarize) return cmd_summarize(metrics_path, thresholds);
    if (*replay) return cmd_replay(log_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
