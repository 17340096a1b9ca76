#pragma once

// Config-driven experiment runner: grid points x seeds, each a full RL loop with
// per-iteration checkpoints, plus the CSV summaries.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "probcoll/common.hpp"
#include "probcoll/cost.hpp"
#include "probcoll/ensemble.hpp"
#include "probcoll/profiles.hpp"
#include "probcoll/rl.hpp"

namespace probcoll {

namespace fs = std::filesystem;

struct ExperimentConfig {
  ProfileKind profile = ProfileKind::quadrotor_sim;
  int horizon = 6;
  double delta_t = 0.2;
  double target_speed = 0.5;
  EstimatorMode estimator = EstimatorMode::risk_averse;
  std::vector<double> lambda_coll{10.0};
  std::vector<double> lambda_std{0.0};
  std::vector<double> lambda_const{0.0};
  int bootstraps = 50;
  double keep_prob = 0.8;
  int eval_passes = 10;
  int hidden_width = 40;
  int batch_size = 32;
  double learning_rate = 1e-3;
  int sgd_iters = 300;
  bool warm_start = true;
  int n_iterations = 20;
  int rollouts_per_iteration = 20;
  int max_steps = 20;
  double max_speed = 1.0;
  double max_steer = 0.0;
  bool task_cost_terminal_only = false;
  bool include_state = false;
  std::string tail_policy = "discard";
  std::string environment_file;    // empty: profile default
  std::string demonstrations_file; // empty: none
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<double> thresholds{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::string output_dir = "out";
  bool rollout_logs = true;
  bool checkpoints = true;
};

inline ExperimentConfig default_config(ProfileKind kind) {
  const Profile p = make_profile(kind);
  ExperimentConfig c;
  c.profile = kind;
  c.horizon = p.horizon;
  c.delta_t = p.world.kinematics.delta_t;
  c.target_speed = p.target_speed;
  c.lambda_coll = {p.lambda_coll};
  c.bootstraps = p.ensemble.bootstraps;
  c.keep_prob = p.ensemble.keep_prob;
  c.eval_passes = p.ensemble.eval_passes;
  c.hidden_width = p.ensemble.hidden_width;
  c.batch_size = p.ensemble.batch_size;
  c.learning_rate = p.ensemble.adam.learning_rate;
  c.sgd_iters = p.sgd_iters;
  c.n_iterations = p.n_iterations;
  c.rollouts_per_iteration = p.rollouts_per_iteration;
  c.max_steps = p.world.max_steps;
  c.max_speed = p.max_speed;
  c.max_steer = p.max_steer;
  return c;
}

inline void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& m) { throw std::runtime_error("config: " + m); };
  if (c.horizon < 1) fail("horizon must be >= 1");
  if (!(c.delta_t > 0.0)) fail("delta_t must be positive");
  if (!(c.target_speed > 0.0)) fail("target_speed must be positive");
  if (c.lambda_coll.empty() || c.lambda_std.empty() || c.lambda_const.empty()) fail("lambda grids must be nonempty");
  for (const auto* grid : {&c.lambda_coll, &c.lambda_std, &c.lambda_const})
    for (double v : *grid)
      if (!(v >= 0.0)) fail("lambdas must be non-negative");
  if (c.bootstraps < 1) fail("bootstraps must be >= 1");
  if (!(c.keep_prob > 0.0 && c.keep_prob <= 1.0)) fail("keep_prob must lie in (0, 1]");
  if (c.eval_passes < 1 || c.hidden_width < 1 || c.batch_size < 1 || c.sgd_iters < 1) fail("sizes must be >= 1");
  if (!(c.learning_rate > 0.0)) fail("learning_rate must be positive");
  if (c.n_iterations < 1 || c.rollouts_per_iteration < 0 || c.max_steps < 1) fail("bad iteration counts");
  if (!(c.max_speed > 0.0)) fail("max_speed must be positive");
  if (c.profile == ProfileKind::car_sim && !(c.max_steer > 0.0)) fail("max_steer must be positive for car_sim");
  if (c.tail_policy != "discard" && c.tail_policy != "pad") fail("tail_policy must be 'discard' or 'pad'");
  if (c.seeds.empty()) fail("seeds must be nonempty");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size()) fail("seeds must be distinct");
  if (c.thresholds.empty() || !std::is_sorted(c.thresholds.begin(), c.thresholds.end()))
    fail("thresholds must be nonempty and ascending");
  if (c.output_dir.empty()) fail("output_dir must be set");
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"profile", to_string(c.profile)},
          {"horizon", c.horizon},
          {"delta_t", c.delta_t},
          {"target_speed", c.target_speed},
          {"estimator", to_string(c.estimator)},
          {"lambda_coll", c.lambda_coll},
          {"lambda_std", c.lambda_std},
          {"lambda_const", c.lambda_const},
          {"bootstraps", c.bootstraps},
          {"keep_prob", c.keep_prob},
          {"eval_passes", c.eval_passes},
          {"hidden_width", c.hidden_width},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"sgd_iters", c.sgd_iters},
          {"warm_start", c.warm_start},
          {"n_iterations", c.n_iterations},
          {"rollouts_per_iteration", c.rollouts_per_iteration},
          {"max_steps", c.max_steps},
          {"max_speed", c.max_speed},
          {"max_steer", c.max_steer},
          {"task_cost_terminal_only", c.task_cost_terminal_only},
          {"include_state", c.include_state},
          {"tail_policy", c.tail_policy},
          {"environment_file", c.environment_file},
          {"demonstrations_file", c.demonstrations_file},
          {"seeds", c.seeds},
          {"thresholds", c.thresholds},
          {"output_dir", c.output_dir},
          {"rollout_logs", c.rollout_logs},
          {"checkpoints", c.checkpoints}};
}

/// Reads a JSON config. "profile" selects the defaults every other key overrides;
/// unknown keys are rejected. With keep_prob = 1 and no explicit eval_passes, a
/// single pass per model is used.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) throw std::runtime_error("config: expected a JSON object");
  ExperimentConfig c = default_config(profile_from_string(j.value("profile", std::string("quadrotor_sim"))));
  const auto known = to_json(c);
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw std::runtime_error("config: unknown key '" + key + "'");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("horizon", c.horizon);
    get("delta_t", c.delta_t);
    get("target_speed", c.target_speed);
    if (j.contains("estimator")) c.estimator = estimator_from_string(j.at("estimator").get<std::string>());
    get("lambda_coll", c.lambda_coll);
    get("lambda_std", c.lambda_std);
    get("lambda_const", c.lambda_const);
    get("bootstraps", c.bootstraps);
    get("keep_prob", c.keep_prob);
    if (j.contains("eval_passes"))
      get("eval_passes", c.eval_passes);
    else if (c.keep_prob == 1.0)
      c.eval_passes = 1;
    get("hidden_width", c.hidden_width);
    get("batch_size", c.batch_size);
    get("learning_rate", c.learning_rate);
    get("sgd_iters", c.sgd_iters);
    get("warm_start", c.warm_start);
    get("n_iterations", c.n_iterations);
    get("rollouts_per_iteration", c.rollouts_per_iteration);
    get("max_steps", c.max_steps);
    get("max_speed", c.max_speed);
    get("max_steer", c.max_steer);
    get("task_cost_terminal_only", c.task_cost_terminal_only);
    get("include_state", c.include_state);
    get("tail_policy", c.tail_policy);
    get("environment_file", c.environment_file);
    get("demonstrations_file", c.demonstrations_file);
    get("seeds", c.seeds);
    get("thresholds", c.thresholds);
    get("output_dir", c.output_dir);
    get("rollout_logs", c.rollout_logs);
    get("checkpoints", c.checkpoints);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  return parse_config(nlohmann::json::parse(in));
}

struct GridPoint {
  EstimatorMode estimator = EstimatorMode::risk_averse;
  double lambda_coll = 0.0;
  double lambda_std = 0.0;
  double lambda_const = 0.0;
};

/// lambda_coll x (lambda_std | lambda_const | nothing), by estimator mode.
inline std::vector<GridPoint> grid_points(const ExperimentConfig& c) {
  std::vector<GridPoint> out;
  for (double coll : c.lambda_coll) {
    switch (c.estimator) {
      case EstimatorMode::risk_averse:
        for (double s : c.lambda_std) out.push_back({c.estimator, coll, s, 0.0});
        break;
      case EstimatorMode::const_penalty:
        for (double k : c.lambda_const) out.push_back({c.estimator, coll, 0.0, k});
        break;
      case EstimatorMode::plain:
        out.push_back({c.estimator, coll, 0.0, 0.0});
        break;
    }
  }
  return out;
}

struct MetricsRecord {
  std::size_t point = 0;
  GridPoint params;
  std::uint64_t seed = 0;
  int iteration = 0;
  int rollouts = 0;
  std::vector<double> crash_speeds;
  std::size_t successes = 0;
  double mean_task_speed = 0.0;
  std::size_t task_steps = 0;
  std::size_t samples_added = 0;
};

// ---------------------------------------------------------------------------
// CSV files. Column sets are fixed:
//   metrics.csv       point,estimator,lambda_coll,lambda_std,lambda_const,seed,iteration,
//                     rollouts,crashes,successes,mean_task_speed,task_steps,samples_added,crash_speeds
//                     (crash_speeds: ';'-separated, empty when no crash)
//   crash_summary.csv point,estimator,lambda_coll,lambda_std,lambda_const,threshold,mean_count,std_count,seeds
//   task_curve.csv    point,estimator,lambda_coll,lambda_std,lambda_const,iteration,mean,std,min,max,seeds
// Measured reals use %.17g so files round-trip exactly; grid values use %g.
// ---------------------------------------------------------------------------

inline constexpr const char* kMetricsHeader =
    "point,estimator,lambda_coll,lambda_std,lambda_const,seed,iteration,rollouts,crashes,successes,"
    "mean_task_speed,task_steps,samples_added,crash_speeds";
inline constexpr const char* kCrashSummaryHeader =
    "point,estimator,lambda_coll,lambda_std,lambda_const,threshold,mean_count,std_count,seeds";
inline constexpr const char* kTaskCurveHeader =
    "point,estimator,lambda_coll,lambda_std,lambda_const,iteration,mean,std,min,max,seeds";

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::string exact(double v) { return fmt("%.17g", v); }

inline std::string point_columns(std::size_t point, const GridPoint& g) {
  return std::to_string(point) + ',' + to_string(g.estimator) + ',' + fmt("%g", g.lambda_coll) + ',' +
         fmt("%g", g.lambda_std) + ',' + fmt("%g", g.lambda_const);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRecord>& records) {
  os << kMetricsHeader << '\n';
  for (const auto& r : records) {
    os << detail::point_columns(r.point, r.params) << ',' << r.seed << ',' << r.iteration << ',' << r.rollouts << ','
       << r.crash_speeds.size() << ',' << r.successes << ',' << detail::exact(r.mean_task_speed) << ','
       << r.task_steps << ',' << r.samples_added << ',';
    for (std::size_t i = 0; i < r.crash_speeds.size(); ++i) os << (i ? ";" : "") << detail::exact(r.crash_speeds[i]);
    os << '\n';
  }
}

inline std::vector<MetricsRecord> read_metrics_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || detail::split(line, ',').size() != 14 || line.rfind("point,", 0) != 0)
    throw std::runtime_error("metrics.csv: unexpected header");
  std::vector<MetricsRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 14) throw std::runtime_error("metrics.csv: expected 14 columns in '" + line + "'");
    MetricsRecord r;
    try {
      r.point = std::stoul(f[0]);
      r.params = {estimator_from_string(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4])};
      r.seed = std::stoull(f[5]);
      r.iteration = std::stoi(f[6]);
      r.rollouts = std::stoi(f[7]);
      const auto crashes = std::stoul(f[8]);
      r.successes = std::stoul(f[9]);
      r.mean_task_speed = std::stod(f[10]);
      r.task_steps = std::stoul(f[11]);
      r.samples_added = std::stoul(f[12]);
      if (!f[13].empty())
        for (const auto& v : detail::split(f[13], ';')) r.crash_speeds.push_back(std::stod(v));
      if (r.crash_speeds.size() != crashes) throw std::runtime_error("crash count mismatch");
    } catch (const std::exception& e) {
      throw std::runtime_error("metrics.csv: bad row '" + line + "': " + e.what());
    }
    out.push_back(std::move(r));
  }
  return out;
}

namespace detail {

/// Sample std (divisor N-1), 0 for fewer than two values.
inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace detail

struct CrashSummary {
  std::vector<double> thresholds;
  std::vector<double> mean_counts;  // averaged over seeds
  std::vector<double> std_counts;   // sample std over seeds
  std::map<std::uint64_t, std::vector<std::size_t>> per_seed;
};

/// Speeds this far below a threshold still count as reaching it. Grid speeds come
/// back from cos/sin products a few ulps short of their nominal value.
inline constexpr double kSpeedTolerance = 1e-9;

/// For each threshold s: crashes at speed >= s, summed over iterations, averaged over seeds.
/// Expects the records of a single grid point.
inline CrashSummary crash_speed_summary(const std::vector<MetricsRecord>& records, const std::vector<double>& thresholds) {
  require(std::is_sorted(thresholds.begin(), thresholds.end()), "crash_speed_summary: thresholds must be ascending");
  CrashSummary s;
  s.thresholds = thresholds;
  for (const auto& r : records) {
    auto& counts = s.per_seed[r.seed];
    counts.resize(thresholds.size(), 0);
    for (double v : r.crash_speeds)
      for (std::size_t k = 0; k < thresholds.size(); ++k)
        if (v >= thresholds[k] - kSpeedTolerance) ++counts[k];
  }
  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    std::vector<double> c;
    for (const auto& [seed, counts] : s.per_seed) c.push_back(static_cast<double>(counts[k]));
    s.mean_counts.push_back(detail::mean_of(c));
    s.std_counts.push_back(detail::sample_std(c));
  }
  return s;
}

struct CurvePoint {
  int iteration = 0;
  double mean = 0.0;
  double std = 0.0;  // sample std across seeds
  double min = 0.0;
  double max = 0.0;
  std::size_t seeds = 0;
};

/// Per-iteration statistics across seeds of the mean task speed. Expects the
/// records of a single grid point.
inline std::vector<CurvePoint> task_performance_curve(const std::vector<MetricsRecord>& records) {
  std::map<int, std::vector<double>> by_iter;
  for (const auto& r : records) by_iter[r.iteration].push_back(r.mean_task_speed);
  require(!by_iter.empty(), "task_performance_curve: need at least one seed");
  std::vector<CurvePoint> out;
  for (const auto& [it, v] : by_iter)
    out.push_back({it, detail::mean_of(v), detail::sample_std(v), *std::min_element(v.begin(), v.end()),
                   *std::max_element(v.begin(), v.end()), v.size()});
  return out;
}

inline std::map<std::size_t, std::vector<MetricsRecord>> group_by_point(const std::vector<MetricsRecord>& records) {
  std::map<std::size_t, std::vector<MetricsRecord>> out;
  for (const auto& r : records) out[r.point].push_back(r);
  return out;
}

inline void write_crash_summary_csv(std::ostream& os, const std::vector<MetricsRecord>& records,
                                    const std::vector<double>& thresholds) {
  os << kCrashSummaryHeader << '\n';
  for (const auto& [point, recs] : group_by_point(records)) {
    const auto s = crash_speed_summary(recs, thresholds);
    for (std::size_t k = 0; k < thresholds.size(); ++k)
      os << detail::point_columns(point, recs.front().params) << ',' << detail::fmt("%g", thresholds[k]) << ','
         << detail::exact(s.mean_counts[k]) << ',' << detail::exact(s.std_counts[k]) << ',' << s.per_seed.size()
         << '\n';
  }
}

inline void write_task_curve_csv(std::ostream& os, const std::vector<MetricsRecord>& records) {
  os << kTaskCurveHeader << '\n';
  for (const auto& [point, recs] : group_by_point(records))
    for (const auto& c : task_performance_curve(recs))
      os << detail::point_columns(point, recs.front().params) << ',' << c.iteration << ',' << detail::exact(c.mean)
         << ',' << detail::exact(c.std) << ',' << detail::exact(c.min) << ',' << detail::exact(c.max) << ','
         << c.seeds << '\n';
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

/// Simulator and learner for one grid point, resolved from config and profile.
struct RunSetup {
  World world;
  LearnerSetup learner;
  StartDistribution starts;
  EnsembleConfig ensemble;
};

inline RunSetup make_run_setup(const ExperimentConfig& c, const GridPoint& g) {
  Profile p = make_profile(c.profile);
  p.horizon = c.horizon;
  p.world.kinematics.delta_t = c.delta_t;
  p.world.max_steps = c.max_steps;
  p.max_speed = c.max_speed;
  p.max_steer = c.max_steer;
  if (!c.environment_file.empty()) p.world.env = sim::load_environment(c.environment_file);

  RunSetup s;
  s.world = p.world;
  s.starts = p.starts;
  s.learner.library = p.library();
  s.learner.layout = p.layout();
  s.learner.layout.include_state = c.include_state;
  s.learner.sgd_iters = c.sgd_iters;
  s.learner.tail = c.tail_policy == "pad" ? TailPolicy::pad : TailPolicy::discard;
  auto& cost = s.learner.cost;
  cost.lambda_coll = g.lambda_coll;
  cost.lambda_std = g.lambda_std;
  cost.lambda_const = g.lambda_const;
  cost.estimator = g.estimator;
  cost.target_speed = c.target_speed;
  cost.objective = p.objective;
  cost.task_cost_terminal_only = c.task_cost_terminal_only;
  s.ensemble = p.ensemble;
  s.ensemble.bootstraps = c.bootstraps;
  s.ensemble.keep_prob = c.keep_prob;
  s.ensemble.eval_passes = c.eval_passes;
  s.ensemble.hidden_width = c.hidden_width;
  s.ensemble.batch_size = c.batch_size;
  s.ensemble.adam.learning_rate = c.learning_rate;
  s.ensemble.warm_start = c.warm_start;
  return s;
}

/// Everything one (grid point, seed) run depends on. Output location, the other
/// grid points, the other seeds and the iteration count are absent, so a finished
/// run can be extended by raising n_iterations.
inline nlohmann::json run_key(const ExperimentConfig& c, const GridPoint& g, std::uint64_t seed) {
  auto j = to_json(c);
  for (const char* k : {"output_dir", "seeds", "n_iterations", "lambda_coll", "lambda_std", "lambda_const", "estimator", "thresholds",
                        "rollout_logs", "checkpoints"})
    j.erase(k);
  j["point"] = {{"estimator", to_string(g.estimator)},
                {"lambda_coll", g.lambda_coll},
                {"lambda_std", g.lambda_std},
                {"lambda_const", g.lambda_const}};
  j["seed"] = seed;
  return j;
}

namespace detail {

inline nlohmann::json record_to_json(const MetricsRecord& r) {
  return {{"iteration", r.iteration},        {"rollouts", r.rollouts},         {"crash_speeds", r.crash_speeds},
          {"successes", r.successes},        {"mean_task_speed", r.mean_task_speed},
          {"task_steps", r.task_steps},      {"samples_added", r.samples_added}};
}

inline MetricsRecord record_from_json(const nlohmann::json& j, std::size_t point, const GridPoint& g,
                                      std::uint64_t seed) {
  MetricsRecord r;
  r.point = point;
  r.params = g;
  r.seed = seed;
  r.iteration = j.at("iteration").get<int>();
  r.rollouts = j.at("rollouts").get<int>();
  r.crash_speeds = j.at("crash_speeds").get<std::vector<double>>();
  r.successes = j.at("successes").get<std::size_t>();
  r.mean_task_speed = j.at("mean_task_speed").get<double>();
  r.task_steps = j.at("task_steps").get<std::size_t>();
  r.samples_added = j.at("samples_added").get<std::size_t>();
  return r;
}

inline void write_file_atomically(const fs::path& path, const std::string& contents) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << contents;
    if (!out.flush()) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

/// Full RL loop for one (grid point, seed). Resumes from the last completed
/// iteration when the run directory holds a checkpoint for the same run key.
///
/// Run directory layout (runs/p<point>_s<seed>/):
///   state.json           {"version":1, "key":{...}, "completed":k, "records":[...]}
///   ensemble_<k>.ckpt    ensemble after k completed iterations
///   dataset_<k>.bin      aggregated dataset after k completed iterations
/// state.json is replaced last, so it always names a complete checkpoint.
inline std::vector<MetricsRecord> run_single(const ExperimentConfig& c, std::size_t point, const GridPoint& g,
                                             std::uint64_t seed, std::ostream* progress = nullptr,
                                             std::mutex* progress_mutex = nullptr) {
  const RunSetup setup = make_run_setup(c, g);
  const fs::path dir = fs::path(c.output_dir) / "runs" / ("p" + std::to_string(point) + "_s" + std::to_string(seed));
  const fs::path log_dir = fs::path(c.output_dir) / "logs" / ("p" + std::to_string(point) + "_s" + std::to_string(seed));
  const auto key = run_key(c, g, seed);
  const int obs_w = setup.world.camera.width, obs_h = setup.world.camera.height;

  BootstrapEnsemble ensemble(setup.learner.layout.input_dim(), setup.ensemble, derive_seed(seed, {0xE5}));
  Dataset dataset;
  std::vector<MetricsRecord> records;
  int start = 0;

  const fs::path state_path = dir / "state.json";
  if (c.checkpoints && fs::exists(state_path)) {
    const auto state = nlohmann::json::parse(detail::read_file(state_path));
    if (state.at("key") != key)
      throw std::runtime_error("run directory " + dir.string() + " holds a run with a different configuration");
    start = state.at("completed").get<int>();
    for (const auto& jr : state.at("records")) records.push_back(detail::record_from_json(jr, point, g, seed));
    std::ifstream ein(dir / ("ensemble_" + std::to_string(start) + ".ckpt"));
    ensemble = load_checkpoint(ein);
    std::ifstream din(dir / ("dataset_" + std::to_string(start) + ".bin"), std::ios::binary);
    dataset = load_dataset(din);
  } else if (!c.demonstrations_file.empty()) {
    std::ifstream din(c.demonstrations_file, std::ios::binary);
    if (!din) throw std::runtime_error("cannot open demonstrations file " + c.demonstrations_file);
    dataset = load_dataset(din);
    if (!dataset.empty()) {
      Rng demo_rng = make_rng(seed, {0xD0});
      train(ensemble, dataset.training_set(setup.learner.layout), setup.learner.sgd_iters, demo_rng);
    }
  }

  const InitStateSampler sampler = [&](Rng& rng, int index) { return setup.starts.sample(rng, index); };
  for (int it = start; it < c.n_iterations; ++it) {
    Rng rng = make_rng(seed, {0xA1, static_cast<std::uint64_t>(it)});
    auto result = run_iteration(setup.world, setup.learner, ensemble, dataset, c.rollouts_per_iteration, sampler, rng, it);
    const auto& m = result.metrics;
    MetricsRecord r;
    r.point = point;
    r.params = g;
    r.seed = seed;
    r.iteration = it;
    r.rollouts = m.rollouts;
    r.crash_speeds = m.crash_speeds;
    r.successes = static_cast<std::size_t>(std::count(m.success.begin(), m.success.end(), true));
    r.mean_task_speed = m.mean_task_speed;
    r.task_steps = m.task_steps;
    r.samples_added = m.samples_added;
    records.push_back(r);

    if (c.rollout_logs) {
      fs::create_directories(log_dir);
      detail::write_file_atomically(log_dir / ("iter_" + std::to_string(it) + ".json"),
                                    rollout_log_json(setup.world, result.rollouts, it).dump() + "\n");
    }
    if (c.checkpoints) {
      fs::create_directories(dir);
      const int done = it + 1;
      std::ostringstream ens_out, ds_out;
      save_checkpoint(ens_out, ensemble, done);
      save_dataset(ds_out, dataset, setup.learner.layout.horizon, obs_w, obs_h);
      detail::write_file_atomically(dir / ("ensemble_" + std::to_string(done) + ".ckpt"), ens_out.str());
      detail::write_file_atomically(dir / ("dataset_" + std::to_string(done) + ".bin"), ds_out.str());
      nlohmann::json state{{"version", 1}, {"key", key}, {"completed", done}, {"records", nlohmann::json::array()}};
      for (const auto& rec : records) state["records"].push_back(detail::record_to_json(rec));
      detail::write_file_atomically(state_path, state.dump() + "\n");
      std::error_code ec;
      fs::remove(dir / ("ensemble_" + std::to_string(it) + ".ckpt"), ec);
      fs::remove(dir / ("dataset_" + std::to_string(it) + ".bin"), ec);
    }
    if (progress) {
      std::unique_lock<std::mutex> lock;
      if (progress_mutex) lock = std::unique_lock<std::mutex>(*progress_mutex);
      *progress << "point " << point << " seed " << seed << " iteration " << it << ": crashes "
                << r.crash_speeds.size() << "/" << r.rollouts << ", mean task speed "
                << detail::fmt("%.3f", r.mean_task_speed) << " m/s\n"
                << std::flush;
    }
  }
  return records;
}

/// Writes metrics.csv, crash_summary.csv and task_curve.csv into `dir`.
inline void write_outputs(const fs::path& dir, const std::vector<MetricsRecord>& records,
                          const std::vector<double>& thresholds) {
  std::ostringstream m, s, t;
  write_metrics_csv(m, records);
  write_crash_summary_csv(s, records, thresholds);
  write_task_curve_csv(t, records);
  detail::write_file_atomically(dir / "metrics.csv", m.str());
  detail::write_file_atomically(dir / "crash_summary.csv", s.str());
  detail::write_file_atomically(dir / "task_curve.csv", t.str());
}

/// Runs every grid point x seed as an independent job on `jobs` threads. Records
/// come back ordered by (point, seed position in config, iteration) whatever the
/// scheduling. If a job fails, the records of all completed iterations are still
/// written before the error propagates.
inline std::vector<MetricsRecord> run_experiment(const ExperimentConfig& c, int jobs = 1,
                                                 std::ostream* progress = nullptr) {
  validate(c);
  const fs::path out(c.output_dir);
  std::error_code ec;
  fs::create_directories(out, ec);
  {
    std::ofstream probe(out / "config.json");
    if (ec || !probe) throw std::runtime_error("output directory " + out.string() + " is not writable");
    probe << to_json(c).dump(2) << '\n';
  }

  const auto points = grid_points(c);
  struct Job {
    std::size_t point;
    std::uint64_t seed;
  };
  std::vector<Job> queue;
  for (std::size_t p = 0; p < points.size(); ++p)
    for (auto seed : c.seeds) queue.push_back({p, seed});

  std::vector<std::vector<MetricsRecord>> results(queue.size());
  std::vector<std::exception_ptr> errors(queue.size());
  std::atomic<std::size_t> next{0};
  std::mutex progress_mutex;
  auto worker = [&] {
    for (std::size_t k = next++; k < queue.size(); k = next++) {
      try {
        results[k] = run_single(c, queue[k].point, points[queue[k].point], queue[k].seed, progress, &progress_mutex);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const int threads = std::clamp(jobs, 1, static_cast<int>(std::max<std::size_t>(1, queue.size())));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<MetricsRecord> records;
  for (std::size_t k = 0; k < queue.size(); ++k) {
    if (errors[k] && c.checkpoints) {
      // Salvage the iterations this job did finish.
      const fs::path state = out / "runs" / ("p" + std::to_string(queue[k].point) + "_s" + std::to_string(queue[k].seed)) / "state.json";
      if (fs::exists(state)) {
        const auto saved = nlohmann::json::parse(detail::read_file(state));
        for (const auto& jr : saved.at("records"))
          results[k].push_back(detail::record_from_json(jr, queue[k].point, points[queue[k].point], queue[k].seed));
      }
    }
    records.insert(records.end(), results[k].begin(), results[k].end());
  }
  write_outputs(out, records, c.thresholds);
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return records;
}

}  // namespace probcoll
