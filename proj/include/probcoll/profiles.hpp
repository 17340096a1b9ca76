#pragma once

// Built-in simulated setups: a quadrotor flying forward past one cylinder, and a
// car driving down a walled corridor with one obstacle.

#include <numbers>
#include <string>
#include <vector>

#include "probcoll/common.hpp"
#include "probcoll/cost.hpp"
#include "probcoll/ensemble.hpp"
#include "probcoll/planner.hpp"
#include "probcoll/rl.hpp"
#include "probcoll/sim.hpp"

namespace probcoll {

enum class ProfileKind { quadrotor_sim, car_sim };

inline std::string to_string(ProfileKind k) { return k == ProfileKind::car_sim ? "car_sim" : "quadrotor_sim"; }

inline ProfileKind profile_from_string(const std::string& s) {
  if (s == "quadrotor_sim") return ProfileKind::quadrotor_sim;
  if (s == "car_sim") return ProfileKind::car_sim;
  throw std::runtime_error("unknown profile '" + s + "'");
}

/// Start-state distribution. `index` is the rollout number within an iteration.
struct StartDistribution {
  std::vector<sim::VehicleState> fixed;  // cycled through by index when nonempty
  sim::Vec2 base = sim::Vec2::Zero();
  double lateral_half_width = 0.0;       // y ~ base.y + U[-w, w]

  sim::VehicleState sample(Rng& rng, int index) const {
    if (!fixed.empty()) return fixed[static_cast<std::size_t>(index) % fixed.size()];
    sim::VehicleState s;
    s.position = base + sim::Vec2(0.0, uniform(rng, -lateral_half_width, lateral_half_width));
    return s;
  }
};

struct Profile {
  ProfileKind kind = ProfileKind::quadrotor_sim;
  World world;
  StartDistribution starts;
  int horizon = 6;
  double target_speed = 0.5;
  double lambda_coll = 1.0;
  TaskObjective objective = TaskObjective::directed_velocity;
  double max_speed = 1.0;
  double max_steer = 0.0;  // car only
  EnsembleConfig ensemble;
  int sgd_iters = 500;
  int n_iterations = 20;
  int rollouts_per_iteration = 20;

  ActionLibrary library() const {
    return kind == ProfileKind::car_sim ? build_car_library(horizon, max_speed, max_steer)
                                        : build_quadrotor_library(horizon, max_speed);
  }

  FeatureLayout layout() const {
    FeatureLayout l;
    l.horizon = horizon;
    l.control_scale = kind == ProfileKind::car_sim ? sim::Vec2(max_speed, max_steer) : sim::Vec2(max_speed, max_speed);
    l.observation_size = world.camera.width * world.camera.height;
    l.observation_scale = 1.0 / world.camera.height;
    return l;
  }
};

/// 4 m x 4 m arena, one 0.2 m cylinder 1.5 m ahead of the start line; starts spread
/// laterally across the cylinder's blocking band.
inline Profile quadrotor_profile() {
  Profile p;
  p.kind = ProfileKind::quadrotor_sim;
  p.world.env.circles = {{sim::Vec2(0.0, 0.0), 0.2}};
  p.world.env.bounds = {sim::Vec2(-2.0, -2.0), sim::Vec2(2.0, 2.0)};
  p.world.kinematics = {{sim::DynamicsKind::velocity_integrator, 0.0}, 0.2};
  p.world.camera = {16, 16, std::numbers::pi / 2.0, 3.0};
  p.world.body_radius = 0.05;
  p.world.max_steps = 20;
  p.starts.base = sim::Vec2(-1.5, 0.0);
  p.starts.lateral_half_width = 0.3;
  p.horizon = 6;
  p.target_speed = 0.5;
  p.lambda_coll = 10.0;
  p.objective = TaskObjective::directed_velocity;
  p.max_speed = 1.0;
  p.ensemble.bootstraps = 50;
  p.ensemble.keep_prob = 0.8;
  p.ensemble.eval_passes = 10;
  p.sgd_iters = 300;
  p.n_iterations = 20;
  p.rollouts_per_iteration = 20;
  return p;
}

/// 10 m corridor between side walls 2 m apart, one obstacle in the middle, four
/// fixed starts; rollouts end after a collision or 10 steps.
inline Profile car_profile() {
  Profile p;
  p.kind = ProfileKind::car_sim;
  p.world.env.circles = {{sim::Vec2(4.0, 0.0), 0.3}};
  p.world.env.segments = {{sim::Vec2(-1.0, -1.0), sim::Vec2(9.0, -1.0)}, {sim::Vec2(-1.0, 1.0), sim::Vec2(9.0, 1.0)}};
  p.world.env.bounds = {sim::Vec2(-1.5, -1.5), sim::Vec2(9.5, 1.5)};
  p.world.kinematics = {{sim::DynamicsKind::unicycle, 0.26}, 0.5};
  p.world.camera = {32, 18, 1.4, 5.0};
  p.world.body_radius = 0.1;
  p.world.max_steps = 10;
  for (double y : {-0.45, -0.15, 0.15, 0.45}) {
    sim::VehicleState s;
    s.position = sim::Vec2(0.0, y);
    p.starts.fixed.push_back(s);
  }
  p.horizon = 4;
  p.target_speed = 1.2;
  p.lambda_coll = 10.0;
  p.objective = TaskObjective::speed_magnitude;
  p.max_speed = 2.0;
  p.max_steer = 0.35;
  p.ensemble.bootstraps = 5;
  p.ensemble.keep_prob = 0.95;
  p.ensemble.eval_passes = 10;
  p.sgd_iters = 300;
  p.n_iterations = 10;
  p.rollouts_per_iteration = 20;
  return p;
}

inline Profile make_profile(ProfileKind k) { return k == ProfileKind::car_sim ? car_profile() : quadrotor_profile(); }

}  // namespace probcoll
