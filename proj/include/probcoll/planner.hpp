#pragma once

// Receding-horizon MPC over a fixed library of constant-control sequences.

#include <concepts>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "probcoll/common.hpp"
#include "probcoll/cost.hpp"
#include "probcoll/ensemble.hpp"
#include "probcoll/features.hpp"
#include "probcoll/sim.hpp"

namespace probcoll {

using ControlSequence = std::vector<sim::Control>;

struct ActionLibrary {
  std::vector<ControlSequence> sequences;
  std::string profile;
  int horizon = 0;

  std::size_t size() const { return sequences.size(); }
};

/// 19 headings every 10 degrees across +-90 about +x, times 10 speeds
/// max_speed * k / 10 for k = 1..10. Index = heading * 10 + speed.
inline ActionLibrary build_quadrotor_library(int horizon, double max_speed) {
  require(horizon >= 1 && max_speed > 0.0, "build_quadrotor_library: need H >= 1 and max_speed > 0");
  constexpr int kHeadings = 19, kSpeeds = 10;
  ActionLibrary lib{{}, "quadrotor", horizon};
  lib.sequences.reserve(kHeadings * kSpeeds);
  for (int a = 0; a < kHeadings; ++a) {
    const double angle = (a - (kHeadings - 1) / 2) * (std::numbers::pi / 2.0) / ((kHeadings - 1) / 2);
    for (int k = 1; k <= kSpeeds; ++k) {
      const double speed = max_speed * k / kSpeeds;
      const sim::Control u(speed * std::cos(angle), speed * std::sin(angle));
      lib.sequences.emplace_back(static_cast<std::size_t>(horizon), u);
    }
  }
  return lib;
}

/// 7 steering angles max_steer * (k - 3) / 3, times 7 speeds max_speed * k / 7.
/// Index = steer * 7 + speed.
inline ActionLibrary build_car_library(int horizon, double max_speed, double max_steer) {
  require(horizon >= 1 && max_speed > 0.0 && max_steer > 0.0,
          "build_car_library: need H >= 1, max_speed > 0, max_steer > 0");
  constexpr int kSteers = 7, kSpeeds = 7;
  ActionLibrary lib{{}, "car", horizon};
  lib.sequences.reserve(kSteers * kSpeeds);
  for (int a = 0; a < kSteers; ++a) {
    const double steer = max_steer * (a - 3) / 3.0;
    for (int k = 1; k <= kSpeeds; ++k)
      lib.sequences.emplace_back(static_cast<std::size_t>(horizon), sim::Control(max_speed * k / kSpeeds, steer));
  }
  return lib;
}

/// Known dynamics used both by the planner's internal rollouts and the simulator.
struct Kinematics {
  sim::Dynamics dynamics;
  double delta_t = 0.2;
};

inline std::vector<sim::VehicleState> roll_dynamics(const sim::VehicleState& start, std::span<const sim::Control> seq,
                                                    const Kinematics& kin) {
  std::vector<sim::VehicleState> states;
  states.reserve(seq.size() + 1);
  states.push_back(start);
  for (const auto& u : seq) states.push_back(sim::step(states.back(), u, kin.delta_t, kin.dynamics));
  return states;
}

/// Anything that yields statistics of the collision pre-activation for
/// (state, control sequence, observation).
template <class E>
concept CollisionEstimator = requires(const E& e, const sim::VehicleState& s, std::span<const sim::Control> seq,
                                      const sim::Observation& o, Rng& rng) {
  { e.stats(s, seq, o, rng) } -> std::convertible_to<PredictionStats>;
};

/// Estimators that can pre-bind the per-step shared inputs for batched scoring.
template <class E>
concept BindableEstimator = CollisionEstimator<E> && requires(const E& e, const sim::VehicleState& s,
                                                              std::span<const sim::Control> seq,
                                                              const sim::Observation& o, Rng& rng) {
  { e.bind(s, o).stats(seq, rng) } -> std::convertible_to<PredictionStats>;
};

/// The bootstrap ensemble behind the estimator interface.
class EnsembleEstimator {
 public:
  EnsembleEstimator(const BootstrapEnsemble& ens, FeatureLayout layout) : ens_(&ens), layout_(layout) {
    require(layout.input_dim() == ens.input_dim(), "EnsembleEstimator: feature layout does not match ensemble");
  }

  class Bound {
   public:
    Bound(const BootstrapEnsemble& ens, const FeatureLayout& layout, const sim::VehicleState& s,
          const sim::Observation& o)
        : layout_(&layout), query_(ens, layout.encode_shared(s, o)) {}

    PredictionStats stats(std::span<const sim::Control> seq, Rng& rng) const {
      return query_.stats(layout_->encode_controls(seq), rng);
    }

   private:
    const FeatureLayout* layout_;
    EnsembleQuery query_;
  };

  Bound bind(const sim::VehicleState& s, const sim::Observation& o) const { return Bound(*ens_, layout_, s, o); }

  PredictionStats stats(const sim::VehicleState& s, std::span<const sim::Control> seq, const sim::Observation& o,
                        Rng& rng) const {
    return bind(s, o).stats(seq, rng);
  }

  const FeatureLayout& layout() const { return layout_; }

 private:
  const BootstrapEnsemble* ens_;
  FeatureLayout layout_;
};

namespace detail {

inline double score(const sim::VehicleState& state, std::span<const sim::Control> seq, const PredictionStats& stats,
                    const CostParams& params, const Kinematics& kin) {
  const auto states = roll_dynamics(state, seq, kin);
  return total_sequence_cost(states, seq, collision_probability(stats, params), params);
}

}  // namespace detail

/// Rolls the known dynamics over `seq`, queries the estimator once for the whole
/// sequence, and returns the risk-adjusted total cost.
template <CollisionEstimator E>
double evaluate_sequence(const sim::VehicleState& state, const sim::Observation& obs,
                         std::span<const sim::Control> seq, const E& estimator, const CostParams& params,
                         const Kinematics& kin, Rng& rng) {
  return detail::score(state, seq, estimator.stats(state, seq, obs, rng), params, kin);
}

struct Selection {
  sim::Control first_action = sim::Control::Zero();
  std::size_t index = 0;
  std::vector<double> costs;
};

/// Index of the minimum; ties go to the lowest index.
inline std::size_t argmin_lowest_index(std::span<const double> costs) {
  require(!costs.empty(), "argmin: empty cost vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < costs.size(); ++i)
    if (costs[i] < costs[best]) best = i;
  return best;
}

/// Scores every library sequence and returns the first action of the cheapest.
/// Candidate i draws its dropout noise from a substream seeded by (one draw of
/// `rng`, i), so costs do not depend on evaluation order; each cost equals
/// evaluate_sequence called with that substream.
template <CollisionEstimator E>
Selection mpc_select(const sim::VehicleState& state, const sim::Observation& obs, const ActionLibrary& library,
                     const E& estimator, const CostParams& params, const Kinematics& kin, Rng& rng) {
  require(library.size() >= 1, "mpc_select: library must be nonempty");
  const std::uint64_t step_seed = rng();
  Selection sel;
  sel.costs.resize(library.size());
  if constexpr (BindableEstimator<E>) {
    const auto bound = estimator.bind(state, obs);
    for (std::size_t i = 0; i < library.size(); ++i) {
      Rng cand_rng = make_rng(step_seed, {i});
      sel.costs[i] = detail::score(state, library.sequences[i], bound.stats(library.sequences[i], cand_rng), params, kin);
    }
  } else {
    for (std::size_t i = 0; i < library.size(); ++i) {
      Rng cand_rng = make_rng(step_seed, {i});
      sel.costs[i] = evaluate_sequence(state, obs, library.sequences[i], estimator, params, kin, cand_rng);
    }
  }
  sel.index = argmin_lowest_index(sel.costs);
  sel.first_action = library.sequences[sel.index].front();
  return sel;
}

}  // namespace probcoll
