#include <gtest/gtest.h>

#include <sstream>

#include "fixtures.hpp"
#include "probcoll/profiles.hpp"
#include "probcoll/rl.hpp"

using namespace probcoll;
using sim::Control;
using sim::Vec2;
using sim::VehicleState;

namespace {

/// A rollout with n steps of control (0.1 k, 0); collided marks states[n].
Rollout synthetic(std::size_t n, bool collided) {
  Rollout r;
  r.states.resize(n + 1);
  for (std::size_t k = 0; k <= n; ++k) r.states[k].position = Vec2(static_cast<double>(k), 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    r.controls.emplace_back(0.1 * static_cast<double>(k), 0.0);
    r.observations.push_back({Eigen::VectorXd::Constant(2, static_cast<double>(k)), 2, 1});
    r.chosen_index.push_back(k);
    r.chosen_cost.push_back(0.0);
  }
  r.collided = collided;
  r.termination = collided ? Termination::collision : Termination::max_steps;
  return r;
}

World wall_world() {
  World w;
  w.env.segments = {{Vec2(1.0, -5.0), Vec2(1.0, 5.0)}};
  w.kinematics = {{sim::DynamicsKind::velocity_integrator, 0.0}, 0.2};
  w.camera = {4, 2, 1.5, 3.0};
  w.max_steps = 30;
  return w;
}

Policy constant(Control u) {
  return [u](const VehicleState&, const sim::Observation&) { return PolicyDecision{u, 0, 0.0}; };
}

/// Quadrotor profile shrunk so an iteration runs in well under a second.
struct SmallLearner {
  Profile profile = quadrotor_profile();
  LearnerSetup setup;
  EnsembleConfig ens;

  SmallLearner() {
    profile.world.camera.width = 8;
    profile.world.camera.height = 2;
    profile.world.max_steps = 8;
    profile.horizon = 3;
    setup.library = profile.library();
    setup.cost.lambda_coll = profile.lambda_coll;
    setup.cost.target_speed = profile.target_speed;
    setup.layout = profile.layout();
    setup.sgd_iters = 20;
    ens.bootstraps = 2;
    ens.eval_passes = 1;
    ens.hidden_width = 8;
  }

  BootstrapEnsemble ensemble(std::uint64_t seed) const { return {setup.layout.input_dim(), ens, seed}; }

  InitStateSampler sampler() const {
    return [this](Rng& rng, int i) { return profile.starts.sample(rng, i); };
  }
};

}  // namespace

TEST(ExtractSamples, CollisionAtStepFiveHorizonFour) {
  const auto r = synthetic(5, true);
  const auto s = extract_samples(r, 4);
  ASSERT_EQ(s.size(), 5u);
  EXPECT_EQ(s[0].label, 0);
  for (std::size_t t = 1; t <= 4; ++t) EXPECT_EQ(s[t].label, 1) << t;
  // t=3 window covers controls 3, 4 then repeats 4.
  EXPECT_EQ(s[3].controls[0], r.controls[3]);
  EXPECT_EQ(s[3].controls[1], r.controls[4]);
  EXPECT_EQ(s[3].controls[2], r.controls[4]);
  EXPECT_EQ(s[3].controls[3], r.controls[4]);
  EXPECT_EQ(s[2].observation.pixels, r.observations[2].pixels);
  EXPECT_EQ(s[2].state.position, r.states[2].position);
}

TEST(ExtractSamples, CollisionFreeTail) {
  const auto r = synthetic(6, false);
  const auto dropped = extract_samples(r, 4, TailPolicy::discard);
  ASSERT_EQ(dropped.size(), 3u);
  for (const auto& s : dropped) EXPECT_EQ(s.label, 0);
  const auto padded = extract_samples(r, 4, TailPolicy::pad, 7);
  ASSERT_EQ(padded.size(), 6u);
  EXPECT_EQ(padded[5].controls[3], r.controls[5]);
  for (const auto& s : padded) {
    EXPECT_EQ(s.label, 0);
    EXPECT_EQ(s.tag, 7u);
    EXPECT_EQ(s.controls.size(), 4u);
  }
}

TEST(ExtractSamples, EdgeCases) {
  EXPECT_TRUE(extract_samples(synthetic(0, true), 3).empty());
  const auto one = extract_samples(synthetic(1, true), 3);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].label, 1);
  EXPECT_TRUE(extract_samples(synthetic(2, false), 3).empty());
  EXPECT_THROW(extract_samples(synthetic(2, false), 0), ContractViolation);
}

TEST(ExtractSamples, MatchesBruteForceRescan) {
  Rng rng(2024);
  int collided = 0, truncated = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto w = fixture::random_world(rng);
    const auto r = fixture::random_rollout(w, rng);
    const int h = 1 + static_cast<int>(rng() % 8);
    collided += r.collided;
    truncated += r.collided && r.steps() > 0 && static_cast<int>(r.steps()) < h;
    for (auto tail : {TailPolicy::discard, TailPolicy::pad})
      EXPECT_EQ(fixture::compare_labels(w, r, h, tail), "") << "trial " << trial;
  }
  EXPECT_GT(collided, 20);
  EXPECT_GT(truncated, 0);
}

TEST(Rollout, StartInsideObstacleHasNoSteps) {
  World w = wall_world();
  w.env.circles = {{Vec2::Zero(), 0.5}};
  int calls = 0;
  const Policy p = [&](const VehicleState&, const sim::Observation&) {
    ++calls;
    return PolicyDecision{};
  };
  const auto r = rollout(w, p, VehicleState{});
  EXPECT_TRUE(r.collided);
  EXPECT_EQ(r.steps(), 0u);
  EXPECT_EQ(r.states.size(), 1u);
  EXPECT_EQ(calls, 0);
}

TEST(Rollout, EmptyWorldRunsToCap) {
  World w = wall_world();
  w.env.segments.clear();
  const auto r = rollout(w, constant(Control(0.5, 0.0)), VehicleState{});
  EXPECT_FALSE(r.collided);
  EXPECT_EQ(r.termination, Termination::max_steps);
  EXPECT_EQ(r.steps(), 30u);
  EXPECT_EQ(r.states.size(), 31u);
  EXPECT_EQ(r.observations.size(), 30u);
}

TEST(Rollout, TimeToContactAndCrashSpeed) {
  // 0.1 m per step toward a wall at x = 1 with a 0.05 m body: contact once x >= 0.95.
  const auto r = rollout(wall_world(), constant(Control(0.5, 0.0)), VehicleState{});
  EXPECT_TRUE(r.collided);
  EXPECT_EQ(r.steps(), 10u);
  EXPECT_DOUBLE_EQ(r.crash_speed, 0.5);
  const auto still = rollout(wall_world(), constant(Control::Zero()), VehicleState{});
  EXPECT_FALSE(still.collided);
}

TEST(RunIteration, ZeroRolloutsLeavesEverythingUntouched) {
  SmallLearner L;
  auto ens = L.ensemble(1);
  Dataset ds;
  Rng rng(5);
  const auto res = run_iteration(L.profile.world, L.setup, ens, ds, 0, L.sampler(), rng, 3);
  EXPECT_EQ(res.metrics.rollouts, 0);
  EXPECT_EQ(res.metrics.iteration, 3);
  EXPECT_TRUE(res.rollouts.empty());
  EXPECT_TRUE(ds.empty());
  EXPECT_EQ(ens.status(), EnsembleStatus::untrained);
}

TEST(RunIteration, Bookkeeping) {
  SmallLearner L;
  auto ens = L.ensemble(1);
  Dataset ds;
  Rng rng(9);
  std::size_t total = 0;
  for (int it = 0; it < 3; ++it) {
    const auto res = run_iteration(L.profile.world, L.setup, ens, ds, 4, L.sampler(), rng, it);
    const auto& m = res.metrics;
    ASSERT_EQ(res.rollouts.size(), 4u);
    EXPECT_EQ(m.success.size(), 4u);
    std::size_t crashes = 0, safe = 0, samples = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& r = res.rollouts[i];
      crashes += r.collided;
      EXPECT_EQ(m.success[i], !r.collided);
      safe += r.collided ? r.steps() - 1 : r.steps();
      samples += extract_samples(r, L.setup.layout.horizon).size();
    }
    EXPECT_EQ(m.crash_speeds.size(), crashes);
    EXPECT_EQ(m.task_steps, safe);
    EXPECT_EQ(m.samples_added, samples);
    total += samples;
    EXPECT_EQ(ds.size(), total);
    for (const auto& s : ds.samples()) EXPECT_LE(s.tag, static_cast<std::uint32_t>(it));
    EXPECT_EQ(ens.status(), EnsembleStatus::trained);
  }
}

TEST(RunIteration, SameSeedSameRollouts) {
  SmallLearner L;
  auto run = [&] {
    auto ens = L.ensemble(4);
    Dataset ds;
    Rng rng(77);
    std::vector<std::size_t> chosen;
    for (int it = 0; it < 2; ++it) {
      const auto res = run_iteration(L.profile.world, L.setup, ens, ds, 3, L.sampler(), rng, it);
      for (const auto& r : res.rollouts) chosen.insert(chosen.end(), r.chosen_index.begin(), r.chosen_index.end());
    }
    return chosen;
  };
  EXPECT_EQ(run(), run());
}

TEST(DatasetFile, RoundTrip) {
  Rng rng(3);
  Dataset ds;
  for (int k = 0; k < 3; ++k) {
    World w = fixture::random_world(rng);
    w.max_steps = 12;
    ds.append(extract_samples(fixture::random_rollout(w, rng), 3, TailPolicy::pad, static_cast<std::uint32_t>(k)));
  }
  ASSERT_FALSE(ds.empty());
  std::stringstream buf;
  save_dataset(buf, ds, 3, 4, 2);
  const auto back = load_dataset(buf);
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& a = ds.samples()[i];
    const auto& b = back.samples()[i];
    EXPECT_EQ(a.tag, b.tag);
    EXPECT_EQ(a.label, b.label);
    EXPECT_EQ(a.state.position, b.state.position);
    EXPECT_EQ(a.state.velocity, b.state.velocity);
    EXPECT_EQ(a.controls, b.controls);
    EXPECT_EQ(a.observation.pixels, b.observation.pixels);
  }
  std::stringstream bad("PCDX");
  EXPECT_THROW(load_dataset(bad), std::runtime_error);
  std::stringstream full;
  save_dataset(full, ds, 3, 4, 2);
  std::stringstream shortened(full.str().substr(0, full.str().size() - 5));
  EXPECT_THROW(load_dataset(shortened), std::runtime_error);
}

TEST(RolloutLog, ReplayReproducesTrajectories) {
  SmallLearner L;
  auto ens = L.ensemble(2);
  Dataset ds;
  Rng rng(11);
  const auto res = run_iteration(L.profile.world, L.setup, ens, ds, 5, L.sampler(), rng, 0);
  auto log = nlohmann::json::parse(rollout_log_json(L.profile.world, res.rollouts, 0).dump());
  const auto checks = replay_rollout_log(log);
  ASSERT_EQ(checks.size(), 5u);
  for (std::size_t i = 0; i < checks.size(); ++i) {
    EXPECT_EQ(checks[i].max_state_error, 0.0);
    EXPECT_TRUE(checks[i].collision_matches);
    EXPECT_EQ(checks[i].collided, res.rollouts[i].collided);
    EXPECT_EQ(checks[i].steps, res.rollouts[i].steps());
  }
  log["rollouts"][0]["controls"][0][0] = 0.9876;
  EXPECT_GT(replay_rollout_log(log)[0].max_state_error, 0.0);
  log["version"] = 2;
  EXPECT_THROW(replay_rollout_log(log), std::runtime_error);
}
