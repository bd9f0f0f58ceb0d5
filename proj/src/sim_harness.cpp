// Closed-loop intersection simulation: route construction, scenario
// generation, the tau-stepped episode loop (noise sampling, filtering,
// coordination, SAT collision checks, metrics), and the Monte Carlo driver.
//
// Conventions. The field is an `area` x `area` square centred on the
// origin with right-hand traffic: the eastbound lane centre runs along
// y = -lane_width/2, westbound along y = +lane_width/2, northbound along
// x = +lane_width/2, southbound along x = -lane_width/2. All routes are
// rotations of the eastbound ones by multiples of pi/2. Routes extend 20 m
// past the field so vehicles march off the edge instead of chasing a
// stationary reference; a vehicle counts as exited once |x| or |y| exceeds
// area/2 + 1.

#include "dtn/sim_harness.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <utility>

#include <Eigen/Eigenvalues>

#include "dtn/dynamics.hpp"
#include "dtn/estimation.hpp"

namespace dtn {
namespace {

constexpr double kSampleSpacing = 0.25;  // route polyline spacing (m)
constexpr double kSpawnOffset = 5.0;     // default spawn arc length (m)
constexpr double kExitMargin = 1.0;      // past the field edge => exited
constexpr double kRouteOverrun = 20.0;   // route extension beyond the field

double wrap_to(double angle, double anchor) {
  return angle + 2.0 * M_PI * std::round((anchor - angle) / (2.0 * M_PI));
}

// --- route construction ----------------------------------------------------

struct Segment {
  bool is_arc = false;
  Vec2 a = Vec2::Zero();  // straight endpoints
  Vec2 b = Vec2::Zero();
  Vec2 center = Vec2::Zero();  // arc geometry
  double radius = 0.0;
  double phi0 = 0.0;  // start/end polar angles; sign of (phi1 - phi0) gives
  double phi1 = 0.0;  // the travel direction (ccw positive)

  double length() const {
    return is_arc ? radius * std::abs(phi1 - phi0) : (b - a).norm();
  }
  Vec2 point(double s) const {
    if (!is_arc) return a + (s / length()) * (b - a);
    const double dir = phi1 >= phi0 ? 1.0 : -1.0;
    const double phi = phi0 + dir * s / radius;
    return center + radius * Vec2(std::cos(phi), std::sin(phi));
  }
  double tangent(double s) const {
    if (!is_arc) {
      const Vec2 d = b - a;
      return std::atan2(d.y(), d.x());
    }
    const double dir = phi1 >= phi0 ? 1.0 : -1.0;
    return phi0 + dir * s / radius + dir * M_PI / 2.0;
  }
};

Segment line_between(const Vec2& a, const Vec2& b) {
  Segment s;
  s.a = a;
  s.b = b;
  return s;
}

Route sample_route(const std::vector<Segment>& segments) {
  Route r;
  r.points.push_back(segments.front().point(0.0));
  r.heading.push_back(segments.front().tangent(0.0));
  r.arclen.push_back(0.0);
  double total = 0.0;
  for (const Segment& seg : segments) {
    const double len = seg.length();
    const int n = std::max(1, static_cast<int>(std::ceil(len / kSampleSpacing)));
    for (int j = 1; j <= n; ++j) {
      const double s = len * j / n;
      r.points.push_back(seg.point(s));
      r.heading.push_back(wrap_to(seg.tangent(s), r.heading.back()));
      r.arclen.push_back(total + s);
    }
    total += len;
  }
  return r;
}

Route eastbound_route(Intention maneuver, double area, double half) {
  const double exit_reach = area / 2.0 + kRouteOverrun;
  const Vec2 start(-area / 2.0, -half);
  std::vector<Segment> segs;
  if (maneuver == Intention::straight) {
    segs.push_back(line_between(start, Vec2(exit_reach, -half)));
  } else if (maneuver == Intention::left) {
    // Wide ccw arc through the middle of the junction onto the northbound
    // exit lane.
    segs.push_back(line_between(start, Vec2(-2.0 * half, -half)));
    Segment arc;
    arc.is_arc = true;
    arc.center = Vec2(-2.0 * half, 2.0 * half);
    arc.radius = 3.0 * half;
    arc.phi0 = -M_PI / 2.0;
    arc.phi1 = 0.0;
    segs.push_back(arc);
    segs.push_back(line_between(Vec2(half, 2.0 * half), Vec2(half, exit_reach)));
  } else {
    // Tight cw arc hugging the corner onto the southbound exit lane.
    segs.push_back(line_between(start, Vec2(-2.0 * half, -half)));
    Segment arc;
    arc.is_arc = true;
    arc.center = Vec2(-2.0 * half, -2.0 * half);
    arc.radius = half;
    arc.phi0 = M_PI / 2.0;
    arc.phi1 = 0.0;
    segs.push_back(arc);
    segs.push_back(
        line_between(Vec2(-half, -2.0 * half), Vec2(-half, -exit_reach)));
  }
  return sample_route(segs);
}

// --- obstacle kinematics ---------------------------------------------------

// Advances (s, v) by dt under constant acceleration a with v clamped to
// [lo, hi]; closed form, no sub-stepping.
void advance_clamped(double& s, double& v, double a, double dt, double lo,
                     double hi) {
  if (dt <= 0.0) return;
  if (a > 1e-12) {
    const double t_sat = (hi - v) / a;
    if (t_sat >= dt) {
      s += v * dt + 0.5 * a * dt * dt;
      v += a * dt;
      return;
    }
    if (t_sat > 0.0) {
      s += v * t_sat + 0.5 * a * t_sat * t_sat;
      dt -= t_sat;
    }
    v = hi;
    s += v * dt;
  } else if (a < -1e-12) {
    const double t_sat = (lo - v) / a;
    if (t_sat >= dt) {
      s += v * dt + 0.5 * a * dt * dt;
      v += a * dt;
      return;
    }
    if (t_sat > 0.0) {
      s += v * t_sat + 0.5 * a * t_sat * t_sat;
      dt -= t_sat;
    }
    v = lo;
    s += v * dt;
  } else {
    s += v * dt;
  }
}

// Arc length and speed of an obstacle `elapsed` seconds after its entry.
std::pair<double, double> obstacle_state(const DynamicObstacle& o,
                                         double elapsed) {
  const double lo = std::max(0.0, o.speed_min);
  const double hi = std::max(lo, o.speed_max);
  double v = std::clamp(o.speed, lo, hi);
  double s = o.spawn_arclen;
  std::vector<std::pair<double, double>> sched = o.accel_schedule;
  std::sort(sched.begin(), sched.end());
  double t = 0.0;
  double accel = 0.0;
  for (const auto& [tb, ab] : sched) {
    const double t_break = std::max(tb, 0.0);
    if (t_break >= elapsed) break;
    advance_clamped(s, v, accel, t_break - t, lo, hi);
    t = t_break;
    accel = ab;
  }
  advance_clamped(s, v, accel, elapsed - t, lo, hi);
  return {s, v};
}

// --- misc helpers ----------------------------------------------------------

// Symmetric PSD square root (eigenvalues clamped at zero); used to sample
// from the spawn covariances, which are diagonal in the defaults but need
// not be.
Mat4 psd_sqrt(const Mat4& m) {
  Eigen::SelfAdjointEigenSolver<Mat4> eig(0.5 * (m + m.transpose()));
  return eig.eigenvectors() *
         eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
         eig.eigenvectors().transpose();
}

std::array<Vec2, 4> rect_corners(const RectPose& r) {
  const Vec2 ux(std::cos(r.heading), std::sin(r.heading));
  const Vec2 uy(-ux.y(), ux.x());
  const Vec2 ex = 0.5 * r.length * ux;
  const Vec2 ey = 0.5 * r.width * uy;
  return {r.center + ex + ey, r.center + ex - ey, r.center - ex - ey,
          r.center - ex + ey};
}

}  // namespace

// --- Route -----------------------------------------------------------------

Vec2 Route::position_at(double s) const {
  if (points.empty()) return Vec2::Zero();
  if (s <= arclen.front()) return points.front();
  if (s >= arclen.back()) return points.back();
  const auto it = std::lower_bound(arclen.begin(), arclen.end(), s);
  const std::size_t i = static_cast<std::size_t>(it - arclen.begin());
  const double den = arclen[i] - arclen[i - 1];
  const double f = den > 0.0 ? (s - arclen[i - 1]) / den : 0.0;
  return points[i - 1] + f * (points[i] - points[i - 1]);
}

double Route::heading_at(double s) const {
  if (heading.empty()) return 0.0;
  if (s <= arclen.front()) return heading.front();
  if (s >= arclen.back()) return heading.back();
  const auto it = std::lower_bound(arclen.begin(), arclen.end(), s);
  const std::size_t i = static_cast<std::size_t>(it - arclen.begin());
  const double den = arclen[i] - arclen[i - 1];
  const double f = den > 0.0 ? (s - arclen[i - 1]) / den : 0.0;
  return heading[i - 1] + f * (heading[i] - heading[i - 1]);
}

double Route::project(const Vec2& p) const {
  if (points.empty()) return 0.0;
  std::size_t best = 0;
  double best_d2 = (points[0] - p).squaredNorm();
  for (std::size_t i = 1; i < points.size(); ++i) {
    const double d2 = (points[i] - p).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = i;
    }
  }
  // Refine on the two segments adjacent to the closest sample.
  double best_s = arclen[best];
  for (std::size_t i : {best > 0 ? best - 1 : best, best}) {
    if (i + 1 >= points.size()) continue;
    const Vec2 d = points[i + 1] - points[i];
    const double len2 = d.squaredNorm();
    if (len2 <= 0.0) continue;
    const double f = std::clamp((p - points[i]).dot(d) / len2, 0.0, 1.0);
    const Vec2 q = points[i] + f * d;
    const double d2 = (q - p).squaredNorm();
    if (d2 <= best_d2) {
      best_d2 = d2;
      best_s = arclen[i] + f * (arclen[i + 1] - arclen[i]);
    }
  }
  return best_s;
}

Route reference_route(EntryLane entry, Intention maneuver, double area,
                      double lane_width) {
  if (area <= 0.0 || lane_width <= 0.0 || lane_width * 4.0 > area)
    throw std::invalid_argument(
        "reference_route: need area > 0 and lane_width in (0, area/4]");
  Route r = eastbound_route(maneuver, area, lane_width / 2.0);
  const int k = static_cast<int>(entry);
  if (k != 0) {
    const double c = std::cos(k * M_PI / 2.0);
    const double s = std::sin(k * M_PI / 2.0);
    Mat2 rot;
    rot << c, -s, s, c;
    for (Vec2& p : r.points) p = rot * p;
    for (double& h : r.heading) h += k * M_PI / 2.0;
  }
  // Put the entry heading on the principal branch; the rest stays continuous.
  const double shift =
      2.0 * M_PI * std::round(r.heading.front() / (2.0 * M_PI));
  if (shift != 0.0)
    for (double& h : r.heading) h -= shift;
  return r;
}

std::vector<Vec4> route_reference(const Route& route, double s0, int N,
                                  double tau, double v_ref) {
  std::vector<Vec4> ref(static_cast<std::size_t>(N) + 1);
  for (int k = 0; k <= N; ++k) {
    const double s = s0 + k * tau * v_ref;
    const Vec2 p = route.position_at(s);
    ref[k] = Vec4(p.x(), p.y(), route.heading_at(s), v_ref);
  }
  return ref;
}

void cold_start_profile(const Route& route, const VehicleState& start, int N,
                        double tau, double wheelbase, double delta_max,
                        std::vector<VehicleState>& states,
                        std::vector<ControlInput>& inputs) {
  states.assign(static_cast<std::size_t>(N) + 1, start);
  inputs.assign(static_cast<std::size_t>(N), ControlInput{});
  const double s0 = route.project(Vec2(start.x, start.y));
  const double v = std::clamp(start.v, 1.0, 15.0);
  const double branch = start.theta - wrap_to(route.heading_at(s0), start.theta);
  for (int k = 1; k <= N; ++k) {
    const double s = s0 + k * tau * v;
    const Vec2 p = route.position_at(s);
    states[k] = VehicleState{p.x(), p.y(), route.heading_at(s) + branch, v};
  }
  for (int k = 0; k < N; ++k) {
    const double s = s0 + k * tau * v;
    const double ds = 0.5;
    const double kappa =
        (route.heading_at(s + ds) - route.heading_at(std::max(0.0, s - ds))) /
        (ds + std::min(ds, s));
    inputs[k].a = 0.0;
    inputs[k].delta =
        std::clamp(std::atan(wheelbase * kappa), -delta_max, delta_max);
  }
}

// --- scenarios ---------------------------------------------------------------

IntersectionScenario single_straight() {
  IntersectionScenario sc;
  sc.name = "single_straight";
  SpawnSpec v;
  v.id = 0;
  v.entry = EntryLane::east_bound;
  v.maneuver = Intention::straight;
  sc.vehicles.push_back(v);
  return sc;
}

IntersectionScenario two_crossing() {
  IntersectionScenario sc;
  sc.name = "two_crossing";
  SpawnSpec a;
  a.id = 0;
  a.entry = EntryLane::east_bound;
  a.maneuver = Intention::straight;
  a.entry_time = 0.0;
  SpawnSpec b;
  b.id = 1;
  b.entry = EntryLane::north_bound;
  b.maneuver = Intention::straight;
  b.entry_time = 1.0;
  sc.vehicles = {a, b};
  return sc;
}

IntersectionScenario left_turn_4() {
  IntersectionScenario sc;
  sc.name = "left_turn_4";
  const std::array<EntryLane, 4> legs = {
      EntryLane::east_bound, EntryLane::west_bound, EntryLane::north_bound,
      EntryLane::south_bound};
  const std::array<Intention, 4> moves = {Intention::left, Intention::straight,
                                          Intention::straight,
                                          Intention::straight};
  const std::array<double, 4> times = {0.0, 0.3, 0.6, 0.9};
  for (int i = 0; i < 4; ++i) {
    SpawnSpec v;
    v.id = i;
    v.entry = legs[static_cast<std::size_t>(i)];
    v.maneuver = moves[static_cast<std::size_t>(i)];
    v.entry_time = times[static_cast<std::size_t>(i)];
    sc.vehicles.push_back(v);
  }
  return sc;
}

IntersectionScenario mixed_12() {
  IntersectionScenario sc;
  sc.name = "mixed_12";
  // Three waves, one vehicle per leg per wave; 6 straight / 3 left / 3 right.
  const std::array<std::array<Intention, 4>, 3> moves = {{
      {Intention::left, Intention::straight, Intention::straight,
       Intention::right},
      {Intention::straight, Intention::left, Intention::right,
       Intention::straight},
      {Intention::right, Intention::straight, Intention::left,
       Intention::straight},
  }};
  int id = 0;
  for (int wave = 0; wave < 3; ++wave) {
    for (int leg = 0; leg < 4; ++leg) {
      SpawnSpec v;
      v.id = id++;
      v.entry = static_cast<EntryLane>(leg);
      v.maneuver = moves[static_cast<std::size_t>(wave)]
                        [static_cast<std::size_t>(leg)];
      v.entry_time = 2.5 * wave + 0.25 * leg;
      sc.vehicles.push_back(v);
    }
  }
  return sc;
}

IntersectionScenario flow_scenario(const VehicleFlow& flow,
                                   std::uint64_t seed) {
  if (flow.count < 1)
    throw std::invalid_argument("flow_scenario: count must be >= 1");
  const double total =
      flow.straight_fraction + flow.left_fraction + flow.right_fraction;
  if (std::abs(total - 1.0) > 1e-6 || flow.straight_fraction < 0.0 ||
      flow.left_fraction < 0.0 || flow.right_fraction < 0.0)
    throw std::invalid_argument(
        "flow_scenario: maneuver fractions must be nonnegative and sum to 1");
  if (flow.mean_headway <= 0.0)
    throw std::invalid_argument("flow_scenario: mean_headway must be > 0");

  Rng rng = make_stream(seed, 0, 0, RngPurpose::scenario);
  IntersectionScenario sc;
  sc.name = "flow";
  std::array<double, 4> next_time = {0.0, 0.0, 0.0, 0.0};
  for (int i = 0; i < flow.count; ++i) {
    const int leg = std::min(3, static_cast<int>(rng.next_double() * 4.0));
    const double u = rng.next_double();
    Intention man = Intention::right;
    if (u < flow.straight_fraction)
      man = Intention::straight;
    else if (u < flow.straight_fraction + flow.left_fraction)
      man = Intention::left;
    SpawnSpec v;
    v.id = i;
    v.entry = static_cast<EntryLane>(leg);
    v.maneuver = man;
    v.entry_time = next_time[static_cast<std::size_t>(leg)];
    // Headways between 0.5x and 1.5x the mean keep same-lane spawns apart.
    next_time[static_cast<std::size_t>(leg)] +=
        flow.mean_headway * (0.5 + rng.next_double());
    sc.vehicles.push_back(v);
  }
  std::stable_sort(sc.vehicles.begin(), sc.vehicles.end(),
                   [](const SpawnSpec& a, const SpawnSpec& b) {
                     return a.entry_time < b.entry_time;
                   });
  return sc;
}

IntersectionScenario inject_obstacle(IntersectionScenario scenario,
                                     const DynamicObstacle& obstacle) {
  scenario.obstacles.push_back(obstacle);
  return scenario;
}

// --- SAT -------------------------------------------------------------------

bool sat_collision(const RectPose& a, const RectPose& b) {
  if (a.length <= 0.0 || a.width <= 0.0 || b.length <= 0.0 || b.width <= 0.0)
    throw std::invalid_argument("sat_collision: extents must be positive");
  const std::array<Vec2, 4> ca = rect_corners(a);
  const std::array<Vec2, 4> cb = rect_corners(b);
  const std::array<Vec2, 4> axes = {
      Vec2(std::cos(a.heading), std::sin(a.heading)),
      Vec2(-std::sin(a.heading), std::cos(a.heading)),
      Vec2(std::cos(b.heading), std::sin(b.heading)),
      Vec2(-std::sin(b.heading), std::cos(b.heading))};
  for (const Vec2& axis : axes) {
    double lo_a = std::numeric_limits<double>::infinity(), hi_a = -lo_a;
    double lo_b = lo_a, hi_b = -lo_a;
    for (int i = 0; i < 4; ++i) {
      const double pa = axis.dot(ca[static_cast<std::size_t>(i)]);
      const double pb = axis.dot(cb[static_cast<std::size_t>(i)]);
      lo_a = std::min(lo_a, pa);
      hi_a = std::max(hi_a, pa);
      lo_b = std::min(lo_b, pb);
      hi_b = std::max(hi_b, pb);
    }
    // Strict gap on some axis => separated; boundary contact stays a hit.
    if (hi_a < lo_b || hi_b < lo_a) return false;
  }
  return true;
}

// --- episode ---------------------------------------------------------------

namespace {

struct SimAgent {
  SpawnSpec spec;
  Route route;
  double spawn_arclen = kSpawnOffset;
  bool spawned = false;
  bool exited = false;
  double entry_t = 0.0;
  double exit_t = 0.0;
  VehicleState truth;
  StateEstimate est;
  Rng process{0};
  Rng measure{0};
  double speed_sum = 0.0;
  long speed_steps = 0;
};

struct ObstacleRuntime {
  DynamicObstacle spec;
  Route route;
};

}  // namespace

EpisodeResult run_episode(const IntersectionScenario& scenario,
                          const FrameworkConfig& config, std::uint64_t seed,
                          const EpisodeObserver& observer) {
  const Parameters& P = config.params;
  const double tau = P.tau;
  const int N = P.horizon;
  if (tau <= 0.0 || N < 1)
    throw std::invalid_argument("run_episode: need tau > 0 and horizon >= 1");
  if (config.timeout <= 0.0)
    throw std::invalid_argument("run_episode: timeout must be positive");

  std::vector<SimAgent> agents;
  agents.reserve(scenario.vehicles.size());
  std::set<int> ids_seen;
  for (const SpawnSpec& spec : scenario.vehicles) {
    if (!ids_seen.insert(spec.id).second)
      throw std::invalid_argument("run_episode: duplicate vehicle id");
    if (spec.entry_time < 0.0 || spec.spawn_speed <= 0.0)
      throw std::invalid_argument(
          "run_episode: entry_time must be >= 0 and spawn_speed > 0");
    SimAgent ag;
    ag.spec = spec;
    ag.route = reference_route(spec.entry, spec.maneuver, scenario.area,
                               scenario.lane_width);
    ag.spawn_arclen = spec.spawn_arclen >= 0.0 ? spec.spawn_arclen
                                               : kSpawnOffset;
    ag.process = make_stream(seed, 0, spec.id, RngPurpose::process_noise);
    ag.measure = make_stream(seed, 0, spec.id, RngPurpose::measurement_noise);
    agents.push_back(std::move(ag));
  }
  std::vector<ObstacleRuntime> obstacles;
  for (const DynamicObstacle& ob : scenario.obstacles) {
    ObstacleRuntime rt;
    rt.spec = ob;
    rt.route = reference_route(ob.entry, Intention::straight, scenario.area,
                               scenario.lane_width);
    obstacles.push_back(std::move(rt));
  }

  Coordinator coordinator(P, config.safety, config.negotiation,
                          config.attention);
  const Mat4 hat0_sqrt = psd_sqrt(P.sigma_hat0);
  const Mat4 tilde0_sqrt = psd_sqrt(P.sigma_tilde0_prior);
  const double exit_reach = scenario.area / 2.0 + kExitMargin;
  const Mat4 G_eff = config.process_noise ? P.G_noise : Mat4::Zero();
  const MeasurementModel meas{P.C_meas, P.D_noise};

  const auto spawn = [&](SimAgent& ag) {
    const Vec2 p = ag.route.position_at(ag.spawn_arclen);
    const double h = ag.route.heading_at(ag.spawn_arclen);
    const Vec4 nominal(p.x(), p.y(), h, ag.spec.spawn_speed);
    Rng spawn_rng = make_stream(seed, 0, ag.spec.id, RngPurpose::spawn);
    Vec4 xhat = nominal;
    Vec4 xtrue = nominal;
    if (config.process_noise) {
      xhat = nominal + hat0_sqrt * spawn_rng.normal4();
      xtrue = xhat + tilde0_sqrt * spawn_rng.normal4();
    }
    Vec4 y = P.C_meas * xtrue;
    if (config.measurement_noise) y += P.D_noise * ag.measure.normal4();
    y(2) = wrap_to(y(2), (P.C_meas * xhat)(2));
    const Mat4 innov =
        innovation_covariance(P.C_meas, P.D_noise, P.sigma_tilde0_prior);
    const Mat4 gain = kalman_gain(P.sigma_tilde0_prior, P.C_meas, innov);
    ag.est.mean_prior = xhat;
    ag.est.cov_prior = P.sigma_tilde0_prior;
    ag.est.mean_posterior = xhat + gain * (y - P.C_meas * xhat);
    ag.est.cov_posterior =
        joseph_posterior(P.sigma_tilde0_prior, gain, P.C_meas, P.D_noise);
    ag.truth = VehicleState::from_vec(xtrue);
  };

  // Current pose of obstacle `o` at sim time t, or nullopt once it has left.
  const auto obstacle_pose = [&](const ObstacleRuntime& rt, double t,
                                 RectPose& pose, double& speed) {
    const double elapsed = t - rt.spec.entry_time;
    if (elapsed < -1e-9) return false;
    const auto [s, v] = obstacle_state(rt.spec, elapsed);
    if (s > rt.route.length() - 1e-9) return false;
    const Vec2 p = rt.route.position_at(s);
    if (std::abs(p.x()) > exit_reach + 5.0 || std::abs(p.y()) > exit_reach + 5.0)
      return false;
    pose.center = p;
    pose.heading = rt.route.heading_at(s);
    pose.length = rt.spec.length;
    pose.width = rt.spec.width;
    speed = v;
    return true;
  };

  EpisodeResult result;
  std::set<std::pair<int, int>> collided;
  double cycle_ms_sum = 0.0;
  int cycle_count = 0;
  bool any_pending = !agents.empty();

  for (int cycle = 0;; ++cycle) {
    const double t = cycle * tau;
    if (t >= config.timeout - 1e-9) break;

    any_pending = false;
    for (SimAgent& ag : agents) {
      if (!ag.spawned && ag.spec.entry_time <= t + 1e-9) {
        spawn(ag);
        ag.spawned = true;
        ag.entry_t = t;
      }
      any_pending = any_pending || !ag.spawned;
    }

    std::vector<SimAgent*> active;
    for (SimAgent& ag : agents)
      if (ag.spawned && !ag.exited) active.push_back(&ag);
    if (active.empty()) {
      if (!any_pending) break;
      continue;
    }

    // Obstacle broadcast: constant-velocity predicted means.
    std::vector<ObstacleTrack> tracks;
    for (const ObstacleRuntime& rt : obstacles) {
      RectPose pose;
      double speed = 0.0;
      if (!obstacle_pose(rt, t, pose, speed)) continue;
      ObstacleTrack track;
      track.position.resize(static_cast<std::size_t>(N) + 1);
      const Vec2 vel =
          speed * Vec2(std::cos(pose.heading), std::sin(pose.heading));
      for (int k = 0; k <= N; ++k)
        track.position[static_cast<std::size_t>(k)] =
            pose.center + k * tau * vel;
      tracks.push_back(std::move(track));
    }

    // Cycle inputs.
    std::vector<CycleInput> inputs;
    std::vector<int> ids;
    inputs.reserve(active.size());
    for (SimAgent* ag : active) {
      CycleInput ci;
      ci.id = ag->spec.id;
      ci.estimate = ag->est;
      ci.intention = ag->spec.maneuver;
      const double s_now =
          ag->route.project(ag->est.mean_posterior.head<2>());
      ci.reference = route_reference(ag->route, s_now, N, tau, P.limits.v_max);
      double s_goal;
      double v_term;
      const LocalDecision* prev = coordinator.previous_plan(ci.id);
      if (prev != nullptr && prev->horizon() == N) {
        const Vec4& xN = prev->means.back();
        const double vN = std::clamp(xN(3), 0.0, P.limits.v_max);
        s_goal = ag->route.project(xN.head<2>()) + tau * vN;
        v_term = std::clamp(xN(3), 1.0, P.limits.v_max);
      } else {
        const double vh =
            std::clamp(ag->est.mean_posterior(3), 1.0, P.limits.v_max);
        s_goal = s_now + N * tau * vh;
        v_term = vh;
      }
      s_goal = std::min(s_goal, ag->route.length());
      const Vec2 goal_p = ag->route.position_at(s_goal);
      ci.terminal.center = Vec4(goal_p.x(), goal_p.y(),
                                ag->route.heading_at(s_goal), v_term);
      ci.terminal.half_width =
          Vec4(P.terminal_pos_tol, P.terminal_pos_tol, P.terminal_heading_tol,
               P.terminal_speed_tol);
      ci.terminal.cov_cap = P.sigma_terminal;
      VehicleState start = VehicleState::from_vec(ag->est.mean_posterior);
      start.v = std::max(start.v, 0.0);
      cold_start_profile(ag->route, start, N, tau, P.geometry.wheelbase,
                         P.limits.delta_max, ci.cold_nominal, ci.cold_inputs);
      inputs.push_back(std::move(ci));
      ids.push_back(ag->spec.id);
    }

    const auto t0 = std::chrono::steady_clock::now();
    const CycleResult cr = coordinator.coordinate_step(inputs, tracks);
    const double ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
    ++cycle_count;
    cycle_ms_sum += ms;
    result.metrics.max_cycle_ms = std::max(result.metrics.max_cycle_ms, ms);
    result.metrics.residual_trace.push_back(
        cr.diagnostics.negotiation.report.primal);
    if (cr.diagnostics.negotiation.converged &&
        cr.diagnostics.negotiation.outer_iterations <= 2)
      ++result.metrics.cycles_within_2;
    if (cr.diagnostics.hard_failure) ++result.metrics.hard_failures;
    if (observer) observer(cycle, t, ids, cr);

    // Apply commands, log, and filter.
    for (std::size_t k = 0; k < active.size(); ++k) {
      SimAgent& ag = *active[k];
      const ControlInput u = cr.commands[k].input;
      ag.speed_sum += ag.truth.v;
      ++ag.speed_steps;
      if (config.keep_log) {
        TrajectoryRow row;
        row.t = t;
        row.vehicle = ag.spec.id;
        row.x = ag.truth.x;
        row.y = ag.truth.y;
        row.theta = ag.truth.theta;
        row.v = ag.truth.v;
        row.a = u.a;
        row.delta = u.delta;
        const LocalDecision* plan = coordinator.previous_plan(ag.spec.id);
        if (plan != nullptr && plan->covs.size() >= 2) {
          row.sigma_xx = plan->covs[1](0, 0);
          row.sigma_yy = plan->covs[1](1, 1);
          row.sigma_xy = plan->covs[1](0, 1);
        }
        row.neighbors = cr.diagnostics.neighbor_sets[k];
        result.log.push_back(std::move(row));
      }
      const Vec4 w = config.process_noise ? ag.process.normal4() : Vec4::Zero();
      const VehicleState next =
          step_nonlinear(ag.truth, u, tau, P.geometry.wheelbase, G_eff, w);
      const LinearDiscreteModel model = discretize(
          linearize(VehicleState::from_vec(ag.est.mean_posterior), u,
                    P.geometry.wheelbase),
          tau, P.G_noise);
      Vec4 y = P.C_meas * next.vec();
      if (config.measurement_noise) y += P.D_noise * ag.measure.normal4();
      const Vec4 predicted =
          model.A * ag.est.mean_posterior + model.B * u.vec() + model.r;
      y(2) = wrap_to(y(2), (P.C_meas * predicted)(2));
      ag.est = filter_update(ag.est, model, meas, u, y);
      ag.truth = next;
    }

    // Collision checks at the stepped poses.
    std::vector<RectPose> poses(active.size());
    for (std::size_t k = 0; k < active.size(); ++k) {
      poses[k].center = Vec2(active[k]->truth.x, active[k]->truth.y);
      poses[k].heading = active[k]->truth.theta;
      poses[k].length = P.geometry.length;
      poses[k].width = P.geometry.width;
    }
    for (std::size_t i = 0; i < active.size(); ++i)
      for (std::size_t j = i + 1; j < active.size(); ++j)
        if (sat_collision(poses[i], poses[j]))
          collided.insert({std::min(active[i]->spec.id, active[j]->spec.id),
                           std::max(active[i]->spec.id, active[j]->spec.id)});
    for (std::size_t o = 0; o < obstacles.size(); ++o) {
      RectPose pose;
      double speed = 0.0;
      if (!obstacle_pose(obstacles[o], t + tau, pose, speed)) continue;
      for (std::size_t i = 0; i < active.size(); ++i)
        if (sat_collision(poses[i], pose))
          collided.insert(
              {active[i]->spec.id, 100000 + static_cast<int>(o)});
    }

    // Exits.
    for (SimAgent* ag : active) {
      if (std::abs(ag->truth.x) > exit_reach ||
          std::abs(ag->truth.y) > exit_reach) {
        ag->exited = true;
        ag->exit_t = t + tau;
        coordinator.forget(ag->spec.id);
      }
    }
  }

  RunMetrics& m = result.metrics;
  double speed_sum = 0.0;
  long speed_steps = 0;
  for (const SimAgent& ag : agents) {
    if (!ag.spawned) continue;
    ++m.vehicles;
    speed_sum += ag.speed_sum;
    speed_steps += ag.speed_steps;
    if (ag.exited) {
      m.total_passing_time += ag.exit_t - ag.entry_t;
    } else {
      m.total_passing_time += config.timeout;
      m.timed_out = true;
    }
  }
  m.collisions = static_cast<int>(collided.size());
  m.avg_speed = speed_steps > 0 ? speed_sum / speed_steps : 0.0;
  m.cycles = cycle_count;
  m.mean_cycle_ms = cycle_count > 0 ? cycle_ms_sum / cycle_count : 0.0;
  return result;
}

// --- Monte Carlo -------------------------------------------------------------

std::vector<std::uint64_t> monte_carlo_seeds(std::uint64_t base_seed,
                                             int runs) {
  std::vector<std::uint64_t> seeds;
  seeds.reserve(static_cast<std::size_t>(std::max(0, runs)));
  for (int r = 0; r < runs; ++r)
    seeds.push_back(Rng::stream(base_seed, r, 0, 0).next_u64());
  return seeds;
}

MonteCarloResult monte_carlo(const IntersectionScenario& scenario,
                             const FrameworkConfig& config,
                             const std::vector<std::uint64_t>& seeds,
                             int workers) {
  MonteCarloResult result;
  result.seeds = seeds;
  result.runs.resize(seeds.size());
  if (seeds.empty()) return result;

  FrameworkConfig run_config = config;
  run_config.keep_log = false;

  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  const auto work = [&]() {
    for (std::size_t i; (i = next.fetch_add(1)) < seeds.size();) {
      try {
        result.runs[i] = run_episode(scenario, run_config, seeds[i]).metrics;
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  const int pool = std::clamp<int>(workers, 1, static_cast<int>(seeds.size()));
  if (pool <= 1) {
    work();
  } else {
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(pool));
    for (int w = 0; w < pool; ++w) threads.emplace_back(work);
    for (std::thread& th : threads) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  for (const RunMetrics& run : result.runs) {
    if (run.collisions > 0) ++result.collision_runs;
    result.mean_avg_speed += run.avg_speed;
    result.mean_passing_time += run.total_passing_time;
    result.mean_cycle_ms += run.mean_cycle_ms;
  }
  const double n = static_cast<double>(result.runs.size());
  result.mean_avg_speed /= n;
  result.mean_passing_time /= n;
  result.mean_cycle_ms /= n;
  return result;
}

// --- artifacts ----------------------------------------------------------------

bool write_trajectory_csv(const std::string& path,
                          const std::vector<TrajectoryRow>& rows) {
  std::ofstream out(path);
  if (!out) return false;
  out << "run,t,vehicle,x,y,theta,v,a,delta,sigma_xx,sigma_yy,sigma_xy,"
         "neighbors\n";
  out.precision(12);
  for (const TrajectoryRow& r : rows) {
    out << r.run << ',' << r.t << ',' << r.vehicle << ',' << r.x << ',' << r.y
        << ',' << r.theta << ',' << r.v << ',' << r.a << ',' << r.delta << ','
        << r.sigma_xx << ',' << r.sigma_yy << ',' << r.sigma_xy << ',';
    for (std::size_t i = 0; i < r.neighbors.size(); ++i) {
      if (i > 0) out << ';';
      out << r.neighbors[i];
    }
    out << '\n';
  }
  return static_cast<bool>(out);
}

bool write_runs_csv(const std::string& path, const MonteCarloResult& result) {
  std::ofstream out(path);
  if (!out) return false;
  out << "run,seed,n_vehicles,collisions,avg_speed,total_passing_time,"
         "mean_cycle_ms,cycles,cycles_within_2,hard_failures,timed_out\n";
  out.precision(12);
  for (std::size_t i = 0; i < result.runs.size(); ++i) {
    const RunMetrics& r = result.runs[i];
    out << i << ',' << result.seeds[i] << ',' << r.vehicles << ','
        << r.collisions << ',' << r.avg_speed << ',' << r.total_passing_time
        << ',' << r.mean_cycle_ms << ',' << r.cycles << ','
        << r.cycles_within_2 << ',' << r.hard_failures << ','
        << (r.timed_out ? 1 : 0) << '\n';
  }
  return static_cast<bool>(out);
}

}  // namespace dtn
