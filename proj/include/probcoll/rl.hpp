#pragma once

// Outer model-based RL loop: MPC rollouts, subsequence labeling, aggregation and
// retraining.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "probcoll/common.hpp"
#include "probcoll/cost.hpp"
#include "probcoll/ensemble.hpp"
#include "probcoll/features.hpp"
#include "probcoll/planner.hpp"
#include "probcoll/sim.hpp"

namespace probcoll {

/// Everything the simulator needs to execute and observe a rollout.
struct World {
  sim::Environment env;
  Kinematics kinematics;
  sim::CameraSpec camera;
  double body_radius = 0.05;
  int max_steps = 20;
};

enum class Termination { collision, max_steps };

struct Rollout {
  std::vector<sim::VehicleState> states;  // steps() + 1 entries
  std::vector<sim::Control> controls;
  std::vector<sim::Observation> observations;  // observation at states[t], one per control
  std::vector<std::size_t> chosen_index;
  std::vector<double> chosen_cost;
  bool collided = false;
  double crash_speed = 0.0;  // m/s, meaningful only when collided
  Termination termination = Termination::max_steps;

  std::size_t steps() const { return controls.size(); }
};

struct PolicyDecision {
  sim::Control control = sim::Control::Zero();
  std::size_t index = 0;
  double cost = 0.0;
};

using Policy = std::function<PolicyDecision(const sim::VehicleState&, const sim::Observation&)>;

/// Executes the policy until a collision or max_steps. A start state already in
/// collision yields a zero-step rollout.
inline Rollout rollout(const World& world, const Policy& policy, const sim::VehicleState& init) {
  require(world.max_steps >= 1, "rollout: max_steps must be >= 1");
  Rollout r;
  r.states.push_back(init);
  if (sim::check_collision(init, world.env, world.body_radius)) {
    r.collided = true;
    r.crash_speed = init.speed();
    r.termination = Termination::collision;
    return r;
  }
  for (int t = 0; t < world.max_steps; ++t) {
    const auto& s = r.states.back();
    auto obs = sim::render_camera(s, world.env, world.camera);
    const auto decision = policy(s, obs);
    const auto next = sim::step(s, decision.control, world.kinematics.delta_t, world.kinematics.dynamics);
    r.observations.push_back(std::move(obs));
    r.controls.push_back(decision.control);
    r.chosen_index.push_back(decision.index);
    r.chosen_cost.push_back(decision.cost);
    r.states.push_back(next);
    if (sim::check_collision(next, world.env, world.body_radius)) {
      r.collided = true;
      r.crash_speed = next.speed();
      r.termination = Termination::collision;
      break;
    }
  }
  return r;
}

struct LabeledSample {
  sim::VehicleState state;
  ControlSequence controls;  // exactly H
  sim::Observation observation;
  int label = 0;
  std::uint32_t tag = 0;  // provenance: iteration that produced it
};

/// What to do with time indices whose H-step window runs past the end of a
/// collision-free rollout. The collision outcome of such windows is unobserved.
enum class TailPolicy { discard, pad };

/// One sample per time index t; label 1 iff the collision happened in (t, t+H].
/// Windows cut short by a collision repeat the last executed control.
inline std::vector<LabeledSample> extract_samples(const Rollout& r, int horizon,
                                                  TailPolicy tail = TailPolicy::discard, std::uint32_t tag = 0) {
  require(horizon >= 1, "extract_samples: horizon must be >= 1");
  const std::size_t n = r.steps();
  const auto h = static_cast<std::size_t>(horizon);
  std::vector<LabeledSample> out;
  for (std::size_t t = 0; t < n; ++t) {
    if (!r.collided && tail == TailPolicy::discard && t + h > n) break;
    LabeledSample s;
    s.state = r.states[t];
    s.observation = r.observations[t];
    s.controls.reserve(h);
    for (std::size_t k = 0; k < h; ++k) s.controls.push_back(r.controls[std::min(t + k, n - 1)]);
    // The collision state is states[n]; it lies in (t, t+H] iff n <= t + H.
    s.label = r.collided && n <= t + h ? 1 : 0;
    s.tag = tag;
    out.push_back(std::move(s));
  }
  return out;
}

/// Append-only aggregate of every labeled subsequence collected so far.
class Dataset {
 public:
  void append(std::vector<LabeledSample> samples) {
    for (auto& s : samples) samples_.push_back(std::move(s));
  }

  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  const std::vector<LabeledSample>& samples() const { return samples_; }

  TrainingSet training_set(const FeatureLayout& layout) const {
    TrainingSet ts;
    ts.inputs.resize(layout.input_dim(), static_cast<Eigen::Index>(samples_.size()));
    ts.labels.reserve(samples_.size());
    for (std::size_t i = 0; i < samples_.size(); ++i) {
      const auto& s = samples_[i];
      ts.inputs.col(static_cast<Eigen::Index>(i)) = layout.encode(s.state, s.controls, s.observation);
      ts.labels.push_back(static_cast<double>(s.label));
    }
    return ts;
  }

 private:
  std::vector<LabeledSample> samples_;
};

/// Draws the start state of rollout `index` within an iteration.
using InitStateSampler = std::function<sim::VehicleState(Rng&, int index)>;

/// How the learner turns experience into a planner.
struct LearnerSetup {
  ActionLibrary library;
  CostParams cost;
  FeatureLayout layout;
  int sgd_iters = 500;
  TailPolicy tail = TailPolicy::discard;
};

struct IterationMetrics {
  int iteration = 0;
  int rollouts = 0;
  std::vector<double> crash_speeds;  // one per colliding rollout
  std::vector<bool> success;         // rollout reached max_steps without collision
  double mean_task_speed = 0.0;      // over non-crashed steps
  std::size_t task_steps = 0;
  std::size_t samples_added = 0;
};

/// Forward velocity component for the directed objective, speed otherwise.
inline double task_speed(const sim::VehicleState& s, TaskObjective objective) {
  return objective == TaskObjective::directed_velocity ? s.velocity.x() : s.speed();
}

struct IterationResult {
  IterationMetrics metrics;
  std::vector<Rollout> rollouts;
};

/// One pass of the outer loop: sample rollouts with MPC under the current model,
/// aggregate their labeled subsequences, retrain. All randomness is derived from a
/// single draw of `rng`: start state, planner noise and training each get their
/// own substream.
inline IterationResult run_iteration(const World& world, const LearnerSetup& setup, BootstrapEnsemble& ensemble,
                                     Dataset& dataset, int n_rollouts, const InitStateSampler& sampler, Rng& rng,
                                     int iteration = 0) {
  require(n_rollouts >= 0, "run_iteration: n_rollouts must be >= 0");
  setup.cost.validate();
  const std::uint64_t seed = rng();
  IterationResult result;
  auto& m = result.metrics;
  m.iteration = iteration;
  m.rollouts = n_rollouts;
  if (n_rollouts == 0) return result;

  if (dataset.empty()) ensemble.accept_random_prior();
  const EnsembleEstimator estimator(ensemble, setup.layout);
  double speed_sum = 0.0;
  for (int i = 0; i < n_rollouts; ++i) {
    const auto ri = static_cast<std::uint64_t>(i);
    Rng init_rng = make_rng(seed, {0, ri});
    Rng plan_rng = make_rng(seed, {1, ri});
    const Policy policy = [&](const sim::VehicleState& s, const sim::Observation& o) {
      const auto sel = mpc_select(s, o, setup.library, estimator, setup.cost, world.kinematics, plan_rng);
      return PolicyDecision{sel.first_action, sel.index, sel.costs[sel.index]};
    };
    auto r = rollout(world, policy, sampler(init_rng, i));
    const std::size_t safe_steps = r.collided ? r.steps() - std::min<std::size_t>(r.steps(), 1) : r.steps();
    for (std::size_t t = 1; t <= safe_steps; ++t) speed_sum += task_speed(r.states[t], setup.cost.objective);
    m.task_steps += safe_steps;
    if (r.collided) m.crash_speeds.push_back(r.crash_speed);
    m.success.push_back(!r.collided);
    auto samples = extract_samples(r, setup.layout.horizon, setup.tail, static_cast<std::uint32_t>(iteration));
    m.samples_added += samples.size();
    dataset.append(std::move(samples));
    result.rollouts.push_back(std::move(r));
  }
  m.mean_task_speed = m.task_steps > 0 ? speed_sum / static_cast<double>(m.task_steps) : 0.0;

  if (!dataset.empty()) {
    Rng train_rng = make_rng(seed, {2});
    train(ensemble, dataset.training_set(setup.layout), setup.sgd_iters, train_rng);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Dataset file (binary, little-endian, version 1):
//
//   char[4] "PCDS"; u32 version = 1; u32 horizon; u32 obs_width; u32 obs_height;
//   u64 count; then per sample:
//     u32 tag; u32 label; f64 px, py, vx, vy, heading;
//     f64 controls[2*horizon]; f64 pixels[obs_width*obs_height]
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("dataset: truncated file");
  return v;
}

}  // namespace detail

inline void save_dataset(std::ostream& os, const Dataset& ds, int horizon, int obs_width, int obs_height) {
  using detail::put;
  os.write("PCDS", 4);
  put<std::uint32_t>(os, 1);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(horizon));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(obs_width));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(obs_height));
  put<std::uint64_t>(os, ds.size());
  for (const auto& s : ds.samples()) {
    require(static_cast<int>(s.controls.size()) == horizon, "save_dataset: control length mismatch");
    require(s.observation.width == obs_width && s.observation.height == obs_height,
            "save_dataset: observation size mismatch");
    put<std::uint32_t>(os, s.tag);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.label));
    for (double v : {s.state.position.x(), s.state.position.y(), s.state.velocity.x(), s.state.velocity.y(),
                     s.state.heading})
      put(os, v);
    for (const auto& u : s.controls) {
      put(os, u.x());
      put(os, u.y());
    }
    for (Eigen::Index i = 0; i < s.observation.pixels.size(); ++i) put(os, s.observation.pixels(i));
  }
}

inline Dataset load_dataset(std::istream& is) {
  using detail::get;
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "PCDS", 4) != 0) throw std::runtime_error("dataset: bad magic");
  if (get<std::uint32_t>(is) != 1) throw std::runtime_error("dataset: unsupported version");
  const auto horizon = get<std::uint32_t>(is);
  const auto w = static_cast<int>(get<std::uint32_t>(is));
  const auto h = static_cast<int>(get<std::uint32_t>(is));
  const auto count = get<std::uint64_t>(is);
  std::vector<LabeledSample> samples;
  samples.reserve(count);
  for (std::uint64_t k = 0; k < count; ++k) {
    LabeledSample s;
    s.tag = get<std::uint32_t>(is);
    s.label = static_cast<int>(get<std::uint32_t>(is));
    if (s.label != 0 && s.label != 1) throw std::runtime_error("dataset: label must be 0 or 1");
    s.state.position.x() = get<double>(is);
    s.state.position.y() = get<double>(is);
    s.state.velocity.x() = get<double>(is);
    s.state.velocity.y() = get<double>(is);
    s.state.heading = get<double>(is);
    for (std::uint32_t t = 0; t < horizon; ++t) {
      const double a = get<double>(is);
      const double b = get<double>(is);
      s.controls.emplace_back(a, b);
    }
    s.observation = {Eigen::VectorXd(static_cast<Eigen::Index>(w) * h), w, h};
    for (Eigen::Index i = 0; i < s.observation.pixels.size(); ++i) s.observation.pixels(i) = get<double>(is);
    samples.push_back(std::move(s));
  }
  Dataset ds;
  ds.append(std::move(samples));
  return ds;
}

// ---------------------------------------------------------------------------
// Rollout log (JSON, version 1), one file per iteration:
//
//   { "version": 1, "iteration": i, "delta_t": s, "dynamics": "velocity_integrator"|"unicycle",
//     "wheelbase": m, "body_radius": m, "environment": {...environment file...},
//     "rollouts": [ { "collided": bool, "crash_speed": m/s, "termination": "collision"|"max_steps",
//                     "states": [[px, py, vx, vy, heading], ...],
//                     "controls": [[u0, u1], ...], "chosen": [index, ...], "costs": [c, ...] } ] }
//
// Reals use the shortest round-trip representation, so a replay reproduces them exactly.
// ---------------------------------------------------------------------------

inline nlohmann::json rollout_log_json(const World& world, const std::vector<Rollout>& rollouts, int iteration) {
  nlohmann::json j;
  j["version"] = 1;
  j["iteration"] = iteration;
  j["delta_t"] = world.kinematics.delta_t;
  j["dynamics"] = world.kinematics.dynamics.kind == sim::DynamicsKind::unicycle ? "unicycle" : "velocity_integrator";
  j["wheelbase"] = world.kinematics.dynamics.wheelbase;
  j["body_radius"] = world.body_radius;
  j["environment"] = sim::environment_to_json(world.env);
  j["rollouts"] = nlohmann::json::array();
  for (const auto& r : rollouts) {
    nlohmann::json jr;
    jr["collided"] = r.collided;
    jr["crash_speed"] = r.crash_speed;
    jr["termination"] = r.termination == Termination::collision ? "collision" : "max_steps";
    jr["states"] = nlohmann::json::array();
    for (const auto& s : r.states)
      jr["states"].push_back({s.position.x(), s.position.y(), s.velocity.x(), s.velocity.y(), s.heading});
    jr["controls"] = nlohmann::json::array();
    for (const auto& u : r.controls) jr["controls"].push_back({u.x(), u.y()});
    jr["chosen"] = r.chosen_index;
    jr["costs"] = r.chosen_cost;
    j["rollouts"].push_back(std::move(jr));
  }
  return j;
}

struct ReplayCheck {
  std::size_t rollout = 0;
  std::size_t steps = 0;
  bool collided = false;
  double crash_speed = 0.0;
  double max_state_error = 0.0;  // between logged and re-simulated states
  bool collision_matches = true;
};

/// Re-executes each logged control sequence through the simulator from the logged
/// start state and compares against the logged trajectory.
inline std::vector<ReplayCheck> replay_rollout_log(const nlohmann::json& log) {
  if (log.value("version", 0) != 1) throw std::runtime_error("rollout log: unsupported version");
  Kinematics kin;
  kin.delta_t = log.at("delta_t").get<double>();
  kin.dynamics.kind = log.at("dynamics").get<std::string>() == "unicycle" ? sim::DynamicsKind::unicycle
                                                                          : sim::DynamicsKind::velocity_integrator;
  kin.dynamics.wheelbase = log.at("wheelbase").get<double>();
  const double body = log.at("body_radius").get<double>();
  const auto env = sim::environment_from_json(log.at("environment"));
  std::vector<ReplayCheck> out;
  std::size_t idx = 0;
  for (const auto& jr : log.at("rollouts")) {
    ReplayCheck c;
    c.rollout = idx++;
    const auto& js = jr.at("states");
    if (js.empty()) throw std::runtime_error("rollout log: rollout without states");
    auto unpack = [](const nlohmann::json& a) {
      sim::VehicleState s;
      s.position = {a.at(0).get<double>(), a.at(1).get<double>()};
      s.velocity = {a.at(2).get<double>(), a.at(3).get<double>()};
      s.heading = a.at(4).get<double>();
      return s;
    };
    sim::VehicleState s = unpack(js.at(0));
    bool hit = sim::check_collision(s, env, body);
    const auto& jc = jr.at("controls");
    c.steps = jc.size();
    for (std::size_t t = 0; t < jc.size(); ++t) {
      s = sim::step(s, sim::Control(jc[t].at(0).get<double>(), jc[t].at(1).get<double>()), kin.delta_t, kin.dynamics);
      const auto logged = unpack(js.at(t + 1));
      c.max_state_error = std::max({c.max_state_error, (s.position - logged.position).norm(),
                                    (s.velocity - logged.velocity).norm(), std::abs(s.heading - logged.heading)});
      hit = sim::check_collision(s, env, body);
    }
    c.collided = jr.at("collided").get<bool>();
    c.crash_speed = jr.at("crash_speed").get<double>();
    c.collision_matches = hit == c.collided;
    out.push_back(c);
  }
  return out;
}

}  // namespace probcoll
