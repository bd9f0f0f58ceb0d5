#ifndef DTN_SIM_HARNESS_HPP
#define DTN_SIM_HARNESS_HPP

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dtn/admm_dtn.hpp"
#include "dtn/rng.hpp"
#include "dtn/types.hpp"

namespace dtn {

// ---------------------------------------------------------------------------
// Routes through the four-way intersection.
//
// The field is an area x area square centred on the origin. Each road is
// lane_width wide per direction and carries right-hand traffic, so the
// eastbound lane centre sits at y = -lane_width/2, the westbound at
// y = +lane_width/2, northbound at x = +lane_width/2, southbound at
// x = -lane_width/2. Left turns follow a wide constant-radius arc through
// the middle of the junction; right turns a tight one that hugs the corner.
// ---------------------------------------------------------------------------

/// Compass entry leg: the side of the field the vehicle comes FROM.
enum class EntryLane { east_bound = 0, north_bound = 1, west_bound = 2,
                       south_bound = 3 };

/// Dense polyline route with arc-length parameterisation. Headings are the
/// exact tangents of the generating segments (straights and circular arcs),
/// not finite differences of the sampled points.
struct Route {
  std::vector<Vec2> points;      // samples, ~0.25 m apart
  std::vector<double> heading;   // tangent heading at each sample (unwrapped)
  std::vector<double> arclen;    // cumulative arc length, arclen[0] = 0

  double length() const { return arclen.empty() ? 0.0 : arclen.back(); }
  /// Interpolated position at arc length s (clamped to [0, length]).
  Vec2 position_at(double s) const;
  /// Interpolated (unwrapped) tangent heading at arc length s.
  double heading_at(double s) const;
  /// Arc length of the point on the route closest to p.
  double project(const Vec2& p) const;
};

/// Route for one entry leg and maneuver on the standard intersection.
/// `area` is the field side length, `lane_width` the per-direction lane
/// width. Samples are spaced ~0.25 m; arc lengths of the curved pieces match
/// the analytic value to within one sample.
Route reference_route(EntryLane entry, Intention maneuver, double area = 80.0,
                      double lane_width = 10.0);

/// Reference states for one planning cycle: position/heading sampled at arc
/// lengths s0 + k v_ref tau (k = 0..N), speed component v_ref.
std::vector<Vec4> route_reference(const Route& route, double s0, int N,
                                  double tau, double v_ref);

/// Constant-speed route-following profile for cold starts: states k = 0..N
/// (state 0 = `start`), inputs k = 0..N-1 with zero acceleration and
/// curvature-matched steering, clamped to |delta| <= delta_max.
void cold_start_profile(const Route& route, const VehicleState& start, int N,
                        double tau, double wheelbase, double delta_max,
                        std::vector<VehicleState>& states,
                        std::vector<ControlInput>& inputs);

// ---------------------------------------------------------------------------
// Scenario description.
// ---------------------------------------------------------------------------

struct SpawnSpec {
  int id = 0;
  EntryLane entry = EntryLane::east_bound;
  Intention maneuver = Intention::straight;
  double entry_time = 0.0;   // s; the vehicle joins the loop at this time
  double spawn_speed = 9.5;  // nominal speed at spawn (m/s)
  /// Spawn arc length along the route. Negative = use the default offset.
  double spawn_arclen = -1.0;
};

/// Non-CAV agent: drives the straight route of its lane with a piecewise
/// constant-acceleration speed profile clamped to the declared range, and is
/// broadcast to the planners as a constant-velocity prediction with an
/// inflated position covariance.
struct DynamicObstacle {
  EntryLane entry = EntryLane::east_bound;
  double entry_time = 0.0;    // s
  double spawn_arclen = 0.0;  // along the straight route for `entry`
  double speed = 5.0;         // initial speed (m/s)
  double speed_min = 0.0;     // declared speed range; the profile never
  double speed_max = 10.0;    // leaves it
  /// (start time s, acceleration m/s^2) breakpoints, sorted by time; empty
  /// means constant speed. Times are measured from entry_time.
  std::vector<std::pair<double, double>> accel_schedule;
  double length = 4.2;  // footprint rectangle
  double width = 2.1;
};

struct IntersectionScenario {
  std::string name = "scenario";
  double area = 80.0;        // side length of the square field (m)
  double lane_width = 10.0;  // per-direction lane width (m)
  std::vector<SpawnSpec> vehicles;
  std::vector<DynamicObstacle> obstacles;
};

/// Mix description for randomly generated traffic.
struct VehicleFlow {
  int count = 12;
  double straight_fraction = 0.5;  // fractions sum to 1
  double left_fraction = 0.25;
  double right_fraction = 0.25;
  double mean_headway = 2.5;  // s between spawns on the same leg
};

/// Canned scenarios -------------------------------------------------------

/// One eastbound vehicle going straight through.
IntersectionScenario single_straight();
/// Two crossing streams (eastbound + northbound), staggered so both reach
/// the conflict point at roughly the same time.
IntersectionScenario two_crossing();
/// The four-vehicle unprotected left turn: one eastbound left-turner against
/// straight traffic from the three other legs.
IntersectionScenario left_turn_4();
/// Twelve vehicles in three waves (6 straight / 3 left / 3 right).
IntersectionScenario mixed_12();
/// Random scenario drawn from a flow description (entry legs, maneuvers and
/// spawn times sampled from `seed`; fractions must sum to 1 within 1e-6).
IntersectionScenario flow_scenario(const VehicleFlow& flow, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Closed-loop episode.
// ---------------------------------------------------------------------------

/// Everything the closed loop needs besides the scenario: planner
/// parameters, negotiation schedule, neighbor selection, and which noise
/// sources are actually sampled (the planner always assumes both).
struct FrameworkConfig {
  Parameters params{};
  SafetyParams safety{};
  NegotiationConfig negotiation{};
  AttentionSettings attention{};
  bool process_noise = true;      // sample G w_k and the spawn scatter
  bool measurement_noise = true;  // sample D v_k
  double timeout = 60.0;          // episode wall clock limit (sim s)
  bool keep_log = true;           // record per-step trajectory rows
};

/// Oriented rectangle footprint (vehicle or obstacle).
struct RectPose {
  Vec2 center = Vec2::Zero();
  double heading = 0.0;
  double length = 4.2;
  double width = 2.1;
};

/// Separating-axis overlap test for two oriented rectangles. Boundary
/// contact counts as a collision (the test is inclusive).
bool sat_collision(const RectPose& a, const RectPose& b);

/// One logged step of one vehicle.
struct TrajectoryRow {
  int run = 0;
  double t = 0.0;
  int vehicle = 0;
  double x = 0.0, y = 0.0, theta = 0.0, v = 0.0;  // true state
  double a = 0.0, delta = 0.0;                    // applied command
  double sigma_xx = 0.0, sigma_yy = 0.0, sigma_xy = 0.0;  // planned position
                                                          // cov at k = 1
  std::vector<int> neighbors;  // negotiated partner ids this cycle
};

struct RunMetrics {
  int collisions = 0;       // distinct vehicle pairs that ever overlapped
  double avg_speed = 0.0;   // mean true speed over all active vehicle-steps
  /// Sum over vehicles of (exit time - entry time); a vehicle still inside
  /// at the timeout contributes the full timeout value.
  double total_passing_time = 0.0;
  double mean_cycle_ms = 0.0;  // mean coordinate_step wall time
  double max_cycle_ms = 0.0;
  std::vector<double> residual_trace;  // final primal residual per cycle
  int cycles = 0;
  int cycles_within_2 = 0;  // cycles converged in <= 2 outer iterations
  int hard_failures = 0;    // cycles where some vehicle braked on fallback
  int vehicles = 0;
  bool timed_out = false;
};

struct EpisodeResult {
  RunMetrics metrics;
  std::vector<TrajectoryRow> log;  // empty when keep_log is false
};

/// Called once per planning cycle with the ids that took part (same order as
/// the cycle inputs) and the full cycle result, before commands are applied.
using EpisodeObserver =
    std::function<void(int cycle, double t, const std::vector<int>& ids,
                       const CycleResult& result)>;

/// Runs one closed-loop episode: spawn vehicles per the scenario, filter
/// their noisy measurements, call the coordinator every tau seconds, apply
/// the first command through the nonlinear dynamics, and check all footprint
/// pairs for overlap. Ends when every vehicle has left the field or at the
/// timeout. Deterministic in (scenario, config, seed).
EpisodeResult run_episode(const IntersectionScenario& scenario,
                          const FrameworkConfig& config, std::uint64_t seed,
                          const EpisodeObserver& observer = {});

// ---------------------------------------------------------------------------
// Monte Carlo driver.
// ---------------------------------------------------------------------------

struct MonteCarloResult {
  std::vector<std::uint64_t> seeds;
  std::vector<RunMetrics> runs;  // aligned with seeds
  int collision_runs = 0;        // runs with at least one colliding pair
  double mean_avg_speed = 0.0;
  double mean_passing_time = 0.0;
  double mean_cycle_ms = 0.0;
};

/// Derived per-run seeds: splits of a single base seed by run index.
std::vector<std::uint64_t> monte_carlo_seeds(std::uint64_t base_seed, int runs);

/// Runs one episode per seed on a pool of `workers` threads. Each run is
/// keyed only by its own seed, so the result is identical for any worker
/// count. Logs are dropped; only metrics are kept.
MonteCarloResult monte_carlo(const IntersectionScenario& scenario,
                             const FrameworkConfig& config,
                             const std::vector<std::uint64_t>& seeds,
                             int workers);

// ---------------------------------------------------------------------------
// Artifacts.
// ---------------------------------------------------------------------------

/// trajectory CSV: run,t,vehicle,x,y,theta,v,a,delta,sigma_xx,sigma_yy,
/// sigma_xy,neighbors (neighbors joined with ';'). Returns false on I/O
/// failure.
bool write_trajectory_csv(const std::string& path,
                          const std::vector<TrajectoryRow>& rows);

/// per-run CSV: run,seed,n_vehicles,collisions,avg_speed,total_passing_time,
/// mean_cycle_ms,cycles,cycles_within_2,hard_failures,timed_out.
bool write_runs_csv(const std::string& path, const MonteCarloResult& result);

}  // namespace dtn

#endif  // DTN_SIM_HARNESS_HPP
