#pragma once

// Independent reference implementations used by the unit and acceptance tests.
// They share no code with the library beyond the parameter container.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include "probcoll/nn.hpp"
#include "probcoll/sim.hpp"

namespace oracle {

using ld = long double;

inline ld relu(ld v) { return v > 0 ? v : 0; }

inline ld softplus(ld y) { return y > 0 ? y + std::log1p(std::exp(-y)) : std::log1p(std::exp(y)); }

inline ld bce(ld f, ld y) { return y * softplus(-f) + (1 - y) * softplus(f); }

/// Straight transcription of the layer equations in long double, row-major weights.
struct Net {
  int dims[4]{};
  std::vector<ld> w[3], b[3];

  explicit Net(const probcoll::nn::MlpParams& p) {
    dims[0] = p.input_dim();
    dims[1] = p.hidden_widths()[0];
    dims[2] = p.hidden_widths()[1];
    dims[3] = 1;
    for (int k = 0; k < 3; ++k) {
      const auto& W = p.layers[k].weight;
      for (Eigen::Index i = 0; i < W.rows(); ++i)
        for (Eigen::Index j = 0; j < W.cols(); ++j) w[k].push_back(W(i, j));
      for (Eigen::Index i = 0; i < W.rows(); ++i) b[k].push_back(p.layers[k].bias(i));
    }
  }

  // z_out = W_k a + b_k
  std::vector<ld> affine(int k, const std::vector<ld>& a) const {
    std::vector<ld> z(static_cast<std::size_t>(dims[k + 1]));
    for (int i = 0; i < dims[k + 1]; ++i) {
      ld s = b[k][i];
      for (int j = 0; j < dims[k]; ++j) s += w[k][static_cast<std::size_t>(i) * dims[k] + j] * a[j];
      z[i] = s;
    }
    return z;
  }
};

/// Per-example activations; masks hold 0/1 and scale is 1/keep_prob.
struct Trace {
  std::vector<ld> x, z1, a1, z2, a2;
  ld f = 0;
};

inline std::vector<ld> hidden(const std::vector<ld>& z, const std::vector<double>& mask, ld scale) {
  std::vector<ld> a(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) a[i] = relu(z[i]) * mask[i] * scale;
  return a;
}

inline ld output_from_a1(const Net& n, const std::vector<ld>& a1, const std::vector<double>& m2, ld scale) {
  const auto a2 = hidden(n.affine(1, a1), m2, scale);
  return n.affine(2, a2)[0];
}

inline Trace trace(const Net& n, const std::vector<ld>& x, const std::vector<double>& m1,
                   const std::vector<double>& m2, ld scale) {
  Trace t;
  t.x = x;
  t.z1 = n.affine(0, x);
  t.a1 = hidden(t.z1, m1, scale);
  t.z2 = n.affine(1, t.a1);
  t.a2 = hidden(t.z2, m2, scale);
  t.f = n.affine(2, t.a2)[0];
  return t;
}

struct Example {
  std::vector<ld> x;
  ld label = 0;
  std::vector<double> m1, m2;
};

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

/// Relative error with a floor on the denominator so exact zeros compare cleanly.
inline double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Central differences of the mean cross-entropy, in long double, for every
/// coordinate of `grad` (laid out like the library's MlpParams).
inline GradCheck finite_difference_check(const probcoll::nn::MlpParams& params, const std::vector<Example>& batch,
                                         double keep_prob, const probcoll::nn::MlpParams& grad, double h) {
  Net net(params);
  const ld scale = 1.0L / keep_prob;
  const ld n = static_cast<ld>(batch.size());
  std::vector<Trace> traces;
  for (const auto& e : batch) traces.push_back(trace(net, e.x, e.m1, e.m2, scale));
  GradCheck out;
  auto record = [&](double analytic, ld plus, ld minus) {
    const double numeric = static_cast<double>((plus - minus) / (2 * static_cast<ld>(h)) / n);
    out.max_rel_error = std::max(out.max_rel_error, rel_error(analytic, numeric));
    ++out.coordinates;
  };

  // First layer: only hidden unit i moves, so propagate the change incrementally.
  const int in = net.dims[0], h1 = net.dims[1], h2 = net.dims[2];
  auto layer0_loss = [&](int i, int j, ld delta) {
    ld total = 0;
    for (std::size_t e = 0; e < batch.size(); ++e) {
      const auto& t = traces[e];
      const ld xj = j < 0 ? 1 : t.x[j];
      const ld a1_new = relu(t.z1[i] + delta * xj) * batch[e].m1[i] * scale;
      const ld da = a1_new - t.a1[i];
      ld f = net.b[2][0];
      for (int r = 0; r < h2; ++r) {
        const ld z2 = t.z2[r] + net.w[1][static_cast<std::size_t>(r) * h1 + i] * da;
        f += net.w[2][r] * relu(z2) * batch[e].m2[r] * scale;
      }
      total += bce(f, batch[e].label);
    }
    return total;
  };
  const auto& g0 = grad.layers[0];
  for (int i = 0; i < h1; ++i) {
    for (int j = 0; j < in; ++j) record(g0.weight(i, j), layer0_loss(i, j, h), layer0_loss(i, j, -h));
    record(g0.bias(i), layer0_loss(i, -1, h), layer0_loss(i, -1, -h));
  }

  // Later layers: recompute from the cached first hidden activations.
  auto tail_loss = [&](const Net& m) {
    ld total = 0;
    for (std::size_t e = 0; e < batch.size(); ++e)
      total += bce(output_from_a1(m, traces[e].a1, batch[e].m2, scale), batch[e].label);
    return total;
  };
  Net work = net;
  auto nudge = [&](ld& v, double analytic) {
    const ld saved = v;
    v = saved + h;
    const ld plus = tail_loss(work);
    v = saved - h;
    const ld minus = tail_loss(work);
    v = saved;
    record(analytic, plus, minus);
  };
  for (int k = 1; k < 3; ++k) {
    const auto& gk = grad.layers[k];
    const int rows = net.dims[k + 1], cols = net.dims[k];
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cols; ++j) nudge(work.w[k][static_cast<std::size_t>(i) * cols + j], gk.weight(i, j));
      nudge(work.b[k][i], gk.bias(i));
    }
  }
  return out;
}

/// Smallest t >= 0 with |origin + t dir - c| = r, from the quadratic.
inline std::optional<double> ray_circle(double ox, double oy, double dx, double dy, double cx, double cy, double r) {
  const double px = ox - cx, py = oy - cy;
  const double a = dx * dx + dy * dy;
  const double b = 2 * (px * dx + py * dy);
  const double c = px * px + py * py - r * r;
  const double disc = b * b - 4 * a * c;
  if (disc < 0) return std::nullopt;
  const double t0 = (-b - std::sqrt(disc)) / (2 * a);
  const double t1 = (-b + std::sqrt(disc)) / (2 * a);
  if (t0 >= 0) return t0;
  if (t1 >= 0) return 0.0;  // origin inside
  return std::nullopt;
}

struct Disc {
  double cx, cy, r;
};

struct Wall {
  double ax, ay, bx, by;
};

struct Box {
  double x0, y0, x1, y1;
};

/// Contact test from squared distances; walls by clamped projection.
inline bool in_contact(double px, double py, const std::vector<Disc>& discs, const std::vector<Wall>& walls,
                       const Box& box, double body) {
  for (const auto& d : discs) {
    const double rr = d.r + body;
    if ((px - d.cx) * (px - d.cx) + (py - d.cy) * (py - d.cy) <= rr * rr) return true;
  }
  for (const auto& w : walls) {
    const double ex = w.bx - w.ax, ey = w.by - w.ay;
    const double len2 = ex * ex + ey * ey;
    double u = len2 > 0 ? ((px - w.ax) * ex + (py - w.ay) * ey) / len2 : 0.0;
    u = std::clamp(u, 0.0, 1.0);
    const double qx = w.ax + u * ex - px, qy = w.ay + u * ey - py;
    if (qx * qx + qy * qy <= body * body) return true;
  }
  return px - body <= box.x0 || px + body >= box.x1 || py - body <= box.y0 || py + body >= box.y1;
}

struct Window {
  std::size_t t;
  int label;
  std::vector<std::size_t> control_index;  // which executed control fills each slot
};

/// Labels every start index by scanning the contact flags of states t+1..t+H
/// directly. `contact[k]` is the contact flag of state k, n controls, n+1 states.
/// Windows of a contact-free rollout that run past the end are dropped or padded.
inline std::vector<Window> rescan_windows(const std::vector<bool>& contact, int horizon, bool pad) {
  std::vector<Window> out;
  const std::size_t n = contact.size() - 1;
  bool any = false;
  for (bool c : contact) any = any || c;
  for (std::size_t t = 0; t < n; ++t) {
    Window w{t, 0, {}};
    bool complete = true;
    for (int k = 1; k <= horizon; ++k) {
      const std::size_t i = t + static_cast<std::size_t>(k);
      if (i > n) {
        complete = false;
      } else if (contact[i]) {
        w.label = 1;
      }
      w.control_index.push_back(std::min(i - 1, n - 1));
    }
    if (!complete && !any && !pad) continue;
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace oracle
