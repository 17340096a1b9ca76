#pragma once

#include <Eigen/Dense>

#include <span>

#include "probcoll/common.hpp"
#include "probcoll/sim.hpp"

namespace probcoll {

/// Network input layout: [scaled controls u_{t:t+H} | state (optional) | pixels].
/// The control block varies per candidate sequence; the rest is shared by all
/// candidates at one planning step.
struct FeatureLayout {
  int horizon = 6;
  sim::Vec2 control_scale{1.0, 1.0};  // each control component is divided by this
  bool include_state = false;
  int observation_size = 256;
  double observation_scale = 1.0;  // multiplies every pixel

  int varying_dim() const { return 2 * horizon; }
  int shared_dim() const { return (include_state ? 4 : 0) + observation_size; }
  int input_dim() const { return varying_dim() + shared_dim(); }

  Eigen::VectorXd encode_controls(std::span<const sim::Control> seq) const {
    require(static_cast<int>(seq.size()) == horizon, "FeatureLayout: control sequence length must equal H");
    Eigen::VectorXd v(varying_dim());
    for (int h = 0; h < horizon; ++h) v.segment<2>(2 * h) = seq[static_cast<std::size_t>(h)].cwiseQuotient(control_scale);
    return v;
  }

  Eigen::VectorXd encode_shared(const sim::VehicleState& s, const sim::Observation& obs) const {
    require(obs.pixels.size() == observation_size, "FeatureLayout: observation size mismatch");
    Eigen::VectorXd v(shared_dim());
    int k = 0;
    if (include_state) {
      v.segment<2>(0) = s.position;
      v.segment<2>(2) = s.velocity;
      k = 4;
    }
    v.segment(k, observation_size) = obs.pixels * observation_scale;
    return v;
  }

  Eigen::VectorXd encode(const sim::VehicleState& s, std::span<const sim::Control> seq,
                         const sim::Observation& obs) const {
    Eigen::VectorXd v(input_dim());
    v << encode_controls(seq), encode_shared(s, obs);
    return v;
  }
};

}  // namespace probcoll
