#pragma once

// Random worlds and rollouts shared by the unit and acceptance tests.

#include <vector>

#include "oracles.hpp"
#include "probcoll/rl.hpp"

namespace fixture {

using namespace probcoll;

/// A cluttered 6 m box with a few cylinders and one wall.
inline World random_world(Rng& rng) {
  World w;
  const int n = static_cast<int>(rng() % 5);
  for (int k = 0; k < n; ++k)
    w.env.circles.push_back({sim::Vec2(uniform(rng, -2.5, 2.5), uniform(rng, -2.5, 2.5)), uniform(rng, 0.1, 0.6)});
  w.env.segments.push_back({sim::Vec2(uniform(rng, -3, 3), uniform(rng, -3, 3)), sim::Vec2(uniform(rng, -3, 3), uniform(rng, -3, 3))});
  w.env.bounds = {sim::Vec2(-3.0, -3.0), sim::Vec2(3.0, 3.0)};
  w.kinematics = {{sim::DynamicsKind::velocity_integrator, 0.0}, 0.25};
  w.camera = {4, 2, 1.5, 3.0};
  w.body_radius = uniform(rng, 0.02, 0.2);
  w.max_steps = 1 + static_cast<int>(rng() % 25);
  return w;
}

/// Uniformly random velocity commands up to 1.5 m/s per axis.
inline Rollout random_rollout(const World& w, Rng& rng) {
  sim::VehicleState s0;
  s0.position = sim::Vec2(uniform(rng, -2.8, 2.8), uniform(rng, -2.8, 2.8));
  std::size_t k = 0;
  const Policy policy = [&](const sim::VehicleState&, const sim::Observation&) {
    return PolicyDecision{sim::Control(uniform(rng, -1.5, 1.5), uniform(rng, -1.5, 1.5)), k++, 0.0};
  };
  return rollout(w, policy, s0);
}

/// Contact flags of every visited state, from the oracle geometry.
inline std::vector<bool> oracle_contacts(const World& w, const Rollout& r) {
  std::vector<oracle::Disc> discs;
  for (const auto& c : w.env.circles) discs.push_back({c.center.x(), c.center.y(), c.radius});
  std::vector<oracle::Wall> walls;
  for (const auto& s : w.env.segments) walls.push_back({s.a.x(), s.a.y(), s.b.x(), s.b.y()});
  const oracle::Box box{w.env.bounds.min.x(), w.env.bounds.min.y(), w.env.bounds.max.x(), w.env.bounds.max.y()};
  std::vector<bool> out;
  for (const auto& s : r.states)
    out.push_back(oracle::in_contact(s.position.x(), s.position.y(), discs, walls, box, w.body_radius));
  return out;
}

/// Empty string when extract_samples agrees with the brute-force rescan, else a description.
inline std::string compare_labels(const World& w, const Rollout& r, int horizon, TailPolicy tail) {
  const auto samples = extract_samples(r, horizon, tail);
  const auto windows = oracle::rescan_windows(oracle_contacts(w, r), horizon, tail == TailPolicy::pad);
  if (samples.size() != windows.size())
    return "count " + std::to_string(samples.size()) + " vs " + std::to_string(windows.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto& o = windows[i];
    if (s.label != o.label) return "label at t=" + std::to_string(o.t);
    if (s.state.position != r.states[o.t].position) return "state at t=" + std::to_string(o.t);
    if (s.observation.pixels != r.observations[o.t].pixels) return "observation at t=" + std::to_string(o.t);
    for (std::size_t k = 0; k < o.control_index.size(); ++k)
      if (s.controls[k] != r.controls[o.control_index[k]]) return "control at t=" + std::to_string(o.t);
  }
  return {};
}

}  // namespace fixture
