#pragma once

#include <span>
#include <stdexcept>
#include <string>

#include "probcoll/common.hpp"
#include "probcoll/ensemble.hpp"
#include "probcoll/sim.hpp"

namespace probcoll {

enum class EstimatorMode { risk_averse, const_penalty, plain };

/// directed_velocity: track (target_speed, 0) in the world frame ("fly forward").
/// speed_magnitude: track |v| = target_speed in any direction.
enum class TaskObjective { directed_velocity, speed_magnitude };

struct CostParams {
  double lambda_coll = 1.0;
  double lambda_std = 0.0;
  double lambda_const = 0.0;
  double target_speed = 0.5;  // m/s
  EstimatorMode estimator = EstimatorMode::risk_averse;
  TaskObjective objective = TaskObjective::directed_velocity;
  bool task_cost_terminal_only = false;

  void validate() const {
    require(lambda_coll >= 0.0 && lambda_std >= 0.0 && lambda_const >= 0.0, "CostParams: lambdas must be >= 0");
    require(target_speed > 0.0, "CostParams: target_speed must be positive");
  }
};

inline double task_cost(const sim::VehicleState& s, const sim::Control& /*u*/, const CostParams& p) {
  if (p.objective == TaskObjective::directed_velocity) return (s.velocity - sim::Vec2(p.target_speed, 0.0)).squaredNorm();
  const double e = s.velocity.norm() - p.target_speed;
  return e * e;
}

/// Velocity-dependent collision cost: lambda_coll * |v|^2.
inline double collision_cost(const sim::Vec2& velocity, double lambda_coll) {
  require(lambda_coll >= 0.0, "collision_cost: lambda_coll must be non-negative");
  return lambda_coll * velocity.squaredNorm();
}

/// Maps ensemble statistics to the collision probability used by the cost.
inline double collision_probability(const PredictionStats& stats, const CostParams& p) {
  switch (p.estimator) {
    case EstimatorMode::risk_averse:
      return risk_averse_prob(stats, p.lambda_std);
    case EstimatorMode::const_penalty:
      return const_penalty_prob(stats, p.lambda_const);
    case EstimatorMode::plain:
      return nn::logistic(stats.mean);
  }
  return nn::logistic(stats.mean);
}

/// Task cost over the rolled-out states (all H+1, or the terminal one only) plus one
/// any-step collision probability times the collision cost at the terminal velocity.
inline double total_sequence_cost(std::span<const sim::VehicleState> states, std::span<const sim::Control> controls,
                                  double p_coll, const CostParams& p) {
  require(p_coll >= 0.0 && p_coll <= 1.0, "total_sequence_cost: p_coll must lie in [0, 1]");
  require(!controls.empty() && states.size() == controls.size() + 1,
          "total_sequence_cost: need H+1 states for H controls");
  double cost = 0.0;
  if (p.task_cost_terminal_only) {
    cost = task_cost(states.back(), controls.back(), p);
  } else {
    for (std::size_t h = 0; h < states.size(); ++h)
      cost += task_cost(states[h], controls[std::min(h, controls.size() - 1)], p);
  }
  return cost + p_coll * collision_cost(states.back().velocity, p.lambda_coll);
}

inline std::string to_string(EstimatorMode m) {
  switch (m) {
    case EstimatorMode::risk_averse:
      return "risk_averse";
    case EstimatorMode::const_penalty:
      return "const_penalty";
    case EstimatorMode::plain:
      return "plain";
  }
  return "plain";
}

inline EstimatorMode estimator_from_string(const std::string& s) {
  if (s == "risk_averse") return EstimatorMode::risk_averse;
  if (s == "const_penalty") return EstimatorMode::const_penalty;
  if (s == "plain") return EstimatorMode::plain;
  throw std::runtime_error("unknown estimator mode '" + s + "'");
}

}  // namespace probcoll
