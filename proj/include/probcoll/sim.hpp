#pragma once

// Planar world: vehicle kinematics, obstacle map, collision indicator and a
// raycast inverse-depth camera.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "probcoll/common.hpp"

namespace probcoll::sim {

using Vec2 = Eigen::Vector2d;

/// Quadrotor: commanded (vx, vy) in m/s. Car: (speed m/s, steering angle rad).
using Control = Eigen::Vector2d;

struct VehicleState {
  Vec2 position = Vec2::Zero();
  Vec2 velocity = Vec2::Zero();
  double heading = 0.0;  // rad, (-pi, pi]; stays 0 for the quadrotor

  double speed() const { return velocity.norm(); }

  friend bool operator==(const VehicleState& a, const VehicleState& b) {
    return a.position == b.position && a.velocity == b.velocity && a.heading == b.heading;
  }
};

inline double wrap_angle(double a) {
  constexpr double pi = std::numbers::pi;
  a = std::remainder(a, 2.0 * pi);  // [-pi, pi]
  return a <= -pi ? a + 2.0 * pi : a;
}

enum class DynamicsKind { velocity_integrator, unicycle };

struct Dynamics {
  DynamicsKind kind = DynamicsKind::velocity_integrator;
  double wheelbase = 0.3;  // m, unicycle only
};

/// One Euler step. The unicycle advances along the midpoint heading, so constant
/// controls trace chords of the exact circular arc.
inline VehicleState step(const VehicleState& s, const Control& u, double dt, const Dynamics& dyn) {
  require(dt > 0.0, "step: delta_t must be positive");
  VehicleState next = s;
  if (dyn.kind == DynamicsKind::velocity_integrator) {
    next.position = s.position + u * dt;
    next.velocity = u;
    return next;
  }
  const double speed = u(0);
  const double dheading = speed / dyn.wheelbase * std::tan(u(1)) * dt;
  const double mid = s.heading + 0.5 * dheading;
  next.position = s.position + speed * dt * Vec2(std::cos(mid), std::sin(mid));
  next.heading = wrap_angle(s.heading + dheading);
  next.velocity = speed * Vec2(std::cos(next.heading), std::sin(next.heading));
  return next;
}

struct Circle {
  Vec2 center;
  double radius;
};

struct Segment {
  Vec2 a, b;
};

struct Bounds {
  Vec2 min{-1e6, -1e6};
  Vec2 max{1e6, 1e6};
};

/// Obstacle map. Bounds act as an invisible geofence: leaving them counts as a
/// collision but they are not rendered.
struct Environment {
  std::vector<Circle> circles;
  std::vector<Segment> segments;
  Bounds bounds;

  void validate() const {
    for (const auto& c : circles) require(c.radius > 0.0, "Environment: circle radius must be positive");
    require(bounds.min.x() < bounds.max.x() && bounds.min.y() < bounds.max.y(), "Environment: empty bounds");
  }
};

inline double distance_to_segment(const Vec2& p, const Segment& s) {
  const Vec2 ab = s.b - s.a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0.0 ? std::clamp((p - s.a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (s.a + t * ab - p).norm();
}

/// Closed test: touching counts as a collision.
inline bool check_collision(const VehicleState& s, const Environment& env, double body_radius) {
  const Vec2& p = s.position;
  for (const auto& c : env.circles)
    if ((p - c.center).norm() <= c.radius + body_radius) return true;
  for (const auto& seg : env.segments)
    if (distance_to_segment(p, seg) <= body_radius) return true;
  const auto& b = env.bounds;
  return p.x() - body_radius <= b.min.x() || p.x() + body_radius >= b.max.x() ||
         p.y() - body_radius <= b.min.y() || p.y() + body_radius >= b.max.y();
}

/// Smallest t >= 0 with origin + t*dir on the circle; 0 when the origin is inside.
inline std::optional<double> ray_circle(const Vec2& origin, const Vec2& dir, const Circle& c) {
  const Vec2 oc = origin - c.center;
  const double b = dir.dot(oc);
  const double cc = oc.squaredNorm() - c.radius * c.radius;
  if (cc <= 0.0) return 0.0;
  const double disc = b * b - cc;
  if (disc < 0.0) return std::nullopt;
  const double t = -b - std::sqrt(disc);
  if (t < 0.0) return std::nullopt;
  return t;
}

inline std::optional<double> ray_segment(const Vec2& origin, const Vec2& dir, const Segment& s) {
  const Vec2 e = s.b - s.a;
  const double denom = dir.x() * e.y() - dir.y() * e.x();
  if (denom == 0.0) return std::nullopt;
  const Vec2 w = s.a - origin;
  const double t = (w.x() * e.y() - w.y() * e.x()) / denom;
  const double u = (w.x() * dir.y() - w.y() * dir.x()) / denom;
  if (t < 0.0 || u < 0.0 || u > 1.0) return std::nullopt;
  return t;
}

struct CameraSpec {
  int width = 16;
  int height = 16;
  double fov = std::numbers::pi / 2.0;  // rad
  double max_depth = 4.0;               // m
};

/// Row-major grayscale image in [0, 1].
struct Observation {
  Eigen::VectorXd pixels;
  int width = 0;
  int height = 0;

  double at(int row, int col) const { return pixels(row * width + col); }
};

/// Bearing of column `col` relative to the heading; column 0 is the leftmost.
inline double column_bearing(const CameraSpec& cam, int col) {
  return 0.5 * cam.fov - (col + 0.5) * cam.fov / cam.width;
}

/// Casts one ray per column. Intensity is 1 - min(depth, max_depth) / max_depth, where
/// depth is measured along the optical axis (a flat wall facing the camera renders
/// uniformly). Rays that hit nothing give 0. Each column is replicated down all rows.
inline Observation render_camera(const VehicleState& s, const Environment& env, const CameraSpec& cam) {
  require(cam.width >= 1 && cam.height >= 1, "render_camera: image must be at least 1x1");
  require(cam.fov > 0.0 && cam.fov < std::numbers::pi, "render_camera: fov must lie in (0, pi)");
  require(cam.max_depth > 0.0, "render_camera: max_depth must be positive");
  Observation obs{Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cam.width) * cam.height), cam.width, cam.height};
  for (int col = 0; col < cam.width; ++col) {
    const double bearing = column_bearing(cam, col);
    const double angle = s.heading + bearing;
    const Vec2 dir(std::cos(angle), std::sin(angle));
    double t = std::numeric_limits<double>::infinity();
    for (const auto& c : env.circles)
      if (auto hit = ray_circle(s.position, dir, c)) t = std::min(t, *hit);
    for (const auto& seg : env.segments)
      if (auto hit = ray_segment(s.position, dir, seg)) t = std::min(t, *hit);
    if (!std::isfinite(t)) continue;
    const double depth = t * std::cos(bearing);
    const double value = 1.0 - std::min(depth, cam.max_depth) / cam.max_depth;
    for (int row = 0; row < cam.height; ++row) obs.pixels(row * cam.width + col) = value;
  }
  return obs;
}

// ---------------------------------------------------------------------------
// Environment description file (JSON, version 1):
//
//   { "version": 1,
//     "bounds":   { "min": [x, y], "max": [x, y] },
//     "circles":  [ { "center": [x, y], "radius": r }, ... ],
//     "segments": [ { "a": [x, y], "b": [x, y] }, ... ] }
//
// All lengths in meters. Unknown keys are rejected.
// ---------------------------------------------------------------------------

inline nlohmann::json vec_to_json(const Vec2& v) { return nlohmann::json::array({v.x(), v.y()}); }

inline Vec2 vec_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 2) throw std::runtime_error("environment: expected [x, y]");
  return {j[0].get<double>(), j[1].get<double>()};
}

inline nlohmann::json environment_to_json(const Environment& env) {
  nlohmann::json j;
  j["version"] = 1;
  j["bounds"] = {{"min", vec_to_json(env.bounds.min)}, {"max", vec_to_json(env.bounds.max)}};
  j["circles"] = nlohmann::json::array();
  for (const auto& c : env.circles) j["circles"].push_back({{"center", vec_to_json(c.center)}, {"radius", c.radius}});
  j["segments"] = nlohmann::json::array();
  for (const auto& s : env.segments) j["segments"].push_back({{"a", vec_to_json(s.a)}, {"b", vec_to_json(s.b)}});
  return j;
}

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                                const char* where) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw std::runtime_error(std::string(where) + ": unknown key '" + key + "'");
  }
}

inline Environment environment_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"version", "bounds", "circles", "segments"}, "environment");
  if (j.value("version", 0) != 1) throw std::runtime_error("environment: unsupported version");
  Environment env;
  if (j.contains("bounds")) {
    reject_unknown_keys(j["bounds"], {"min", "max"}, "environment.bounds");
    env.bounds = {vec_from_json(j["bounds"].at("min")), vec_from_json(j["bounds"].at("max"))};
  }
  for (const auto& c : j.value("circles", nlohmann::json::array())) {
    reject_unknown_keys(c, {"center", "radius"}, "environment.circles");
    env.circles.push_back({vec_from_json(c.at("center")), c.at("radius").get<double>()});
  }
  for (const auto& s : j.value("segments", nlohmann::json::array())) {
    reject_unknown_keys(s, {"a", "b"}, "environment.segments");
    env.segments.push_back({vec_from_json(s.at("a")), vec_from_json(s.at("b"))});
  }
  try {
    env.validate();
  } catch (const ContractViolation& e) {
    throw std::runtime_error(e.what());
  }
  return env;
}

inline Environment load_environment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open environment file " + path);
  return environment_from_json(nlohmann::json::parse(in));
}

inline void save_environment(const std::string& path, const Environment& env) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write environment file " + path);
  out << environment_to_json(env).dump(2) << '\n';
}

}  // namespace probcoll::sim
