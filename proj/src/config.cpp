// Versioned, strictly validated JSON configuration. Every key is optional
// and overrides a baked-in default (the simulation-parameter table), unknown
// keys are rejected by name at any nesting level, and serialize/parse
// round-trips the effective configuration exactly.

#include "dtn/config.hpp"

#include <array>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "dtn/attention.hpp"

namespace dtn {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& origin, const std::string& msg) {
  throw std::runtime_error(origin + ": " + msg);
}

void check_keys(const json& j, const std::string& origin,
                const std::string& scope,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    fail(origin, "\"" + scope + "\" must be a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known)
      fail(origin, "unknown key \"" +
                       (scope.empty() ? item.key() : scope + "." + item.key()) +
                       "\"");
  }
}

template <typename T>
void read_field(const json& j, const std::string& origin,
                const std::string& scope, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception& e) {
    fail(origin, "bad value for \"" + scope + "." + key + "\": " + e.what());
  }
}

void read_diag4(const json& j, const std::string& origin,
                const std::string& scope, const char* key, Mat4& out) {
  if (!j.contains(key)) return;
  std::array<double, 4> d{};
  try {
    j.at(key).get_to(d);
  } catch (const json::exception& e) {
    fail(origin, "bad value for \"" + scope + "." + key +
                     "\" (expect 4 numbers): " + e.what());
  }
  out = Vec4(d[0], d[1], d[2], d[3]).asDiagonal();
}

void read_diag2(const json& j, const std::string& origin,
                const std::string& scope, const char* key, Mat2& out) {
  if (!j.contains(key)) return;
  std::array<double, 2> d{};
  try {
    j.at(key).get_to(d);
  } catch (const json::exception& e) {
    fail(origin, "bad value for \"" + scope + "." + key +
                     "\" (expect 2 numbers): " + e.what());
  }
  out = Vec2(d[0], d[1]).asDiagonal();
}

json diag_of(const Mat4& m) {
  return json::array({m(0, 0), m(1, 1), m(2, 2), m(3, 3)});
}

void require(bool ok, const std::string& origin, const std::string& msg) {
  if (!ok) fail(origin, msg);
}

void validate(const RunConfig& c, const std::string& origin) {
  const Parameters& p = c.framework.params;
  require(c.version == 1, origin, "\"version\" must be 1");
  require(c.scenario == "single_straight" || c.scenario == "two_crossing" ||
              c.scenario == "left_turn_4" || c.scenario == "mixed_12" ||
              c.scenario == "flow",
          origin,
          "\"scenario\" must be one of single_straight, two_crossing, "
          "left_turn_4, mixed_12, flow");
  require(p.horizon >= 1 && p.horizon <= 200, origin,
          "\"parameters.horizon\" must be in [1, 200]");
  require(p.tau > 0.0 && p.tau <= 1.0, origin,
          "\"parameters.tau\" must be in (0, 1]");
  require(p.limits.v_max > 0.0, origin, "\"parameters.v_max\" must be > 0");
  require(p.limits.a_min < 0.0 && p.limits.a_max > 0.0, origin,
          "\"parameters.a_min\"/\"parameters.a_max\" must bracket zero");
  require(p.limits.delta_max > 0.0 && p.limits.delta_max < M_PI / 2.0, origin,
          "\"parameters.delta_max\" must be in (0, pi/2)");
  require(p.geometry.length > 0.0 && p.geometry.width > 0.0 &&
              p.geometry.wheelbase > 0.0,
          origin, "\"parameters\" vehicle geometry must be positive");
  require(p.xi > 0.0 && p.xi < 0.5, origin,
          "\"parameters.xi\" must be in (0, 0.5)");
  require(p.d_min > 0.0 && p.d_max >= p.d_min, origin,
          "\"parameters.d_min\"/\"parameters.d_max\" must satisfy 0 < d_min "
          "<= d_max");
  require(p.eta >= 0.0, origin, "\"parameters.eta\" must be >= 0");
  const NegotiationConfig& n = c.framework.negotiation;
  require(n.rounds_mean >= 1 && n.rounds_cov >= 1, origin,
          "\"negotiation\" round counts must be >= 1");
  require(n.relaxation > 0.0 && n.relaxation <= 1.0, origin,
          "\"negotiation.relaxation\" must be in (0, 1]");
  require(n.penalty > 0.0, origin, "\"negotiation.penalty\" must be > 0");
  require(n.max_outer >= 1, origin, "\"negotiation.max_outer\" must be >= 1");
  require(n.eps_primal >= 0.0 && n.eps_dual >= 0.0, origin,
          "\"negotiation\" termination tolerances must be >= 0");
  require(n.stop_delta >= 0.0, origin,
          "\"negotiation.stop_delta\" must be >= 0");
  const SafetyParams& s = c.framework.safety;
  require(s.margin_mean >= 0.0 && s.margin_cov >= 0.0 &&
              s.margin_state >= 0.0 && s.margin_terminal >= 0.0,
          origin, "\"safety\" margins must be >= 0");
  require(s.cull_distance > 0.0, origin,
          "\"safety.cull_distance\" must be > 0");
  require(c.attention_mode == "on" || c.attention_mode == "off" ||
              c.attention_mode == "fallback",
          origin, "\"attention.mode\" must be one of on, off, fallback");
  require(c.framework.attention.k_max >= 0, origin,
          "\"attention.k_max\" must be >= 0");
  require(c.framework.attention.d_cmu > 0.0, origin,
          "\"attention.d_cmu\" must be > 0");
  require(c.framework.timeout > 0.0, origin, "\"run.timeout\" must be > 0");
  require(c.runs >= 0, origin, "\"run.runs\" must be >= 0");
  require(c.workers >= 0, origin, "\"run.workers\" must be >= 0");
  require(c.flow.count >= 1, origin, "\"flow.count\" must be >= 1");
  require(c.flow.mean_headway > 0.0, origin,
          "\"flow.mean_headway\" must be > 0");
  const double frac_total = c.flow.straight_fraction + c.flow.left_fraction +
                            c.flow.right_fraction;
  require(c.flow.straight_fraction >= 0.0 && c.flow.left_fraction >= 0.0 &&
              c.flow.right_fraction >= 0.0 &&
              std::abs(frac_total - 1.0) <= 1e-6,
          origin, "\"flow\" maneuver fractions must be >= 0 and sum to 1");
}

}  // namespace

RunConfig default_config() { return RunConfig{}; }

RunConfig parse_config(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(origin, e.what());
  }
  if (!j.is_object()) fail(origin, "top level must be a JSON object");
  check_keys(j, origin, "",
             {"version", "scenario", "flow", "parameters", "negotiation",
              "safety", "attention", "noise", "run"});

  RunConfig c = default_config();
  read_field(j, origin, "", "version", c.version);
  read_field(j, origin, "", "scenario", c.scenario);

  if (j.contains("flow")) {
    const json& f = j.at("flow");
    check_keys(f, origin, "flow",
               {"count", "straight_fraction", "left_fraction",
                "right_fraction", "mean_headway"});
    read_field(f, origin, "flow", "count", c.flow.count);
    read_field(f, origin, "flow", "straight_fraction",
               c.flow.straight_fraction);
    read_field(f, origin, "flow", "left_fraction", c.flow.left_fraction);
    read_field(f, origin, "flow", "right_fraction", c.flow.right_fraction);
    read_field(f, origin, "flow", "mean_headway", c.flow.mean_headway);
  }

  if (j.contains("parameters")) {
    const json& p = j.at("parameters");
    check_keys(p, origin, "parameters",
               {"horizon", "tau", "v_max", "a_min", "a_max", "delta_max",
                "vehicle_length", "vehicle_width", "wheelbase", "q_diag",
                "r_diag", "process_noise_diag", "measurement_noise_diag",
                "initial_plan_cov_diag", "initial_estimate_cov_diag",
                "terminal_cov_diag", "xi", "d_min", "d_max", "eta",
                "terminal_pos_tol", "terminal_heading_tol",
                "terminal_speed_tol"});
    Parameters& pp = c.framework.params;
    read_field(p, origin, "parameters", "horizon", pp.horizon);
    read_field(p, origin, "parameters", "tau", pp.tau);
    read_field(p, origin, "parameters", "v_max", pp.limits.v_max);
    read_field(p, origin, "parameters", "a_min", pp.limits.a_min);
    read_field(p, origin, "parameters", "a_max", pp.limits.a_max);
    read_field(p, origin, "parameters", "delta_max", pp.limits.delta_max);
    read_field(p, origin, "parameters", "vehicle_length", pp.geometry.length);
    read_field(p, origin, "parameters", "vehicle_width", pp.geometry.width);
    read_field(p, origin, "parameters", "wheelbase", pp.geometry.wheelbase);
    read_diag4(p, origin, "parameters", "q_diag", pp.Q);
    read_diag2(p, origin, "parameters", "r_diag", pp.R);
    read_diag4(p, origin, "parameters", "process_noise_diag", pp.G_noise);
    read_diag4(p, origin, "parameters", "measurement_noise_diag", pp.D_noise);
    read_diag4(p, origin, "parameters", "initial_plan_cov_diag",
               pp.sigma_hat0);
    read_diag4(p, origin, "parameters", "initial_estimate_cov_diag",
               pp.sigma_tilde0_prior);
    read_diag4(p, origin, "parameters", "terminal_cov_diag",
               pp.sigma_terminal);
    read_field(p, origin, "parameters", "xi", pp.xi);
    read_field(p, origin, "parameters", "d_min", pp.d_min);
    read_field(p, origin, "parameters", "d_max", pp.d_max);
    read_field(p, origin, "parameters", "eta", pp.eta);
    read_field(p, origin, "parameters", "terminal_pos_tol",
               pp.terminal_pos_tol);
    read_field(p, origin, "parameters", "terminal_heading_tol",
               pp.terminal_heading_tol);
    read_field(p, origin, "parameters", "terminal_speed_tol",
               pp.terminal_speed_tol);
  }

  if (j.contains("negotiation")) {
    const json& n = j.at("negotiation");
    check_keys(n, origin, "negotiation",
               {"rounds_mean", "rounds_cov", "relaxation", "stop_delta",
                "penalty", "max_outer", "eps_primal", "eps_dual"});
    NegotiationConfig& nn = c.framework.negotiation;
    read_field(n, origin, "negotiation", "rounds_mean", nn.rounds_mean);
    read_field(n, origin, "negotiation", "rounds_cov", nn.rounds_cov);
    read_field(n, origin, "negotiation", "relaxation", nn.relaxation);
    read_field(n, origin, "negotiation", "stop_delta", nn.stop_delta);
    read_field(n, origin, "negotiation", "penalty", nn.penalty);
    read_field(n, origin, "negotiation", "max_outer", nn.max_outer);
    read_field(n, origin, "negotiation", "eps_primal", nn.eps_primal);
    read_field(n, origin, "negotiation", "eps_dual", nn.eps_dual);
  }

  if (j.contains("safety")) {
    const json& s = j.at("safety");
    check_keys(s, origin, "safety",
               {"margin_mean", "margin_cov", "margin_state",
                "margin_terminal", "cull_distance", "ellipse_semi_major",
                "ellipse_semi_minor"});
    SafetyParams& ss = c.framework.safety;
    read_field(s, origin, "safety", "margin_mean", ss.margin_mean);
    read_field(s, origin, "safety", "margin_cov", ss.margin_cov);
    read_field(s, origin, "safety", "margin_state", ss.margin_state);
    read_field(s, origin, "safety", "margin_terminal", ss.margin_terminal);
    read_field(s, origin, "safety", "cull_distance", ss.cull_distance);
    read_field(s, origin, "safety", "ellipse_semi_major",
               ss.semi_major_override);
    read_field(s, origin, "safety", "ellipse_semi_minor",
               ss.semi_minor_override);
  }

  if (j.contains("attention")) {
    const json& a = j.at("attention");
    check_keys(a, origin, "attention", {"mode", "k_max", "d_cmu", "weights"});
    read_field(a, origin, "attention", "mode", c.attention_mode);
    read_field(a, origin, "attention", "k_max", c.framework.attention.k_max);
    read_field(a, origin, "attention", "d_cmu", c.framework.attention.d_cmu);
    read_field(a, origin, "attention", "weights", c.weights_path);
  }

  if (j.contains("noise")) {
    const json& n = j.at("noise");
    check_keys(n, origin, "noise", {"process", "measurement"});
    read_field(n, origin, "noise", "process", c.framework.process_noise);
    read_field(n, origin, "noise", "measurement",
               c.framework.measurement_noise);
  }

  if (j.contains("run")) {
    const json& r = j.at("run");
    check_keys(r, origin, "run",
               {"seed", "runs", "workers", "out", "timeout"});
    read_field(r, origin, "run", "seed", c.seed);
    read_field(r, origin, "run", "runs", c.runs);
    read_field(r, origin, "run", "workers", c.workers);
    read_field(r, origin, "run", "out", c.out_dir);
    read_field(r, origin, "run", "timeout", c.framework.timeout);
  }

  validate(c, origin);
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open config file");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path);
}

std::string serialize_config(const RunConfig& c) {
  const Parameters& p = c.framework.params;
  json j;
  j["version"] = c.version;
  j["scenario"] = c.scenario;
  j["flow"] = {{"count", c.flow.count},
               {"straight_fraction", c.flow.straight_fraction},
               {"left_fraction", c.flow.left_fraction},
               {"right_fraction", c.flow.right_fraction},
               {"mean_headway", c.flow.mean_headway}};
  j["parameters"] = {
      {"horizon", p.horizon},
      {"tau", p.tau},
      {"v_max", p.limits.v_max},
      {"a_min", p.limits.a_min},
      {"a_max", p.limits.a_max},
      {"delta_max", p.limits.delta_max},
      {"vehicle_length", p.geometry.length},
      {"vehicle_width", p.geometry.width},
      {"wheelbase", p.geometry.wheelbase},
      {"q_diag", diag_of(p.Q)},
      {"r_diag", json::array({p.R(0, 0), p.R(1, 1)})},
      {"process_noise_diag", diag_of(p.G_noise)},
      {"measurement_noise_diag", diag_of(p.D_noise)},
      {"initial_plan_cov_diag", diag_of(p.sigma_hat0)},
      {"initial_estimate_cov_diag", diag_of(p.sigma_tilde0_prior)},
      {"terminal_cov_diag", diag_of(p.sigma_terminal)},
      {"xi", p.xi},
      {"d_min", p.d_min},
      {"d_max", p.d_max},
      {"eta", p.eta},
      {"terminal_pos_tol", p.terminal_pos_tol},
      {"terminal_heading_tol", p.terminal_heading_tol},
      {"terminal_speed_tol", p.terminal_speed_tol}};
  const NegotiationConfig& n = c.framework.negotiation;
  j["negotiation"] = {
      {"rounds_mean", n.rounds_mean},   {"rounds_cov", n.rounds_cov},
      {"relaxation", n.relaxation},     {"stop_delta", n.stop_delta},
      {"penalty", n.penalty},           {"max_outer", n.max_outer},
      {"eps_primal", n.eps_primal},     {"eps_dual", n.eps_dual}};
  const SafetyParams& s = c.framework.safety;
  j["safety"] = {{"margin_mean", s.margin_mean},
                 {"margin_cov", s.margin_cov},
                 {"margin_state", s.margin_state},
                 {"margin_terminal", s.margin_terminal},
                 {"cull_distance", s.cull_distance},
                 {"ellipse_semi_major", s.semi_major_override},
                 {"ellipse_semi_minor", s.semi_minor_override}};
  j["attention"] = {{"mode", c.attention_mode},
                    {"k_max", c.framework.attention.k_max},
                    {"d_cmu", c.framework.attention.d_cmu},
                    {"weights", c.weights_path}};
  j["noise"] = {{"process", c.framework.process_noise},
                {"measurement", c.framework.measurement_noise}};
  j["run"] = {{"seed", c.seed},
              {"runs", c.runs},
              {"workers", c.workers},
              {"out", c.out_dir},
              {"timeout", c.framework.timeout}};
  return j.dump(2) + "\n";
}

bool save_config(const std::string& path, const RunConfig& config) {
  std::ofstream out(path);
  if (!out) return false;
  out << serialize_config(config);
  return static_cast<bool>(out);
}

IntersectionScenario scenario_from_config(const RunConfig& config) {
  if (config.scenario == "single_straight") return single_straight();
  if (config.scenario == "two_crossing") return two_crossing();
  if (config.scenario == "left_turn_4") return left_turn_4();
  if (config.scenario == "mixed_12") return mixed_12();
  if (config.scenario == "flow") return flow_scenario(config.flow, config.seed);
  throw std::runtime_error(
      "unknown scenario \"" + config.scenario +
      "\" (valid: single_straight, two_crossing, left_turn_4, mixed_12, "
      "flow)");
}

void resolve_attention(RunConfig& config) {
  AttentionSettings& a = config.framework.attention;
  if (config.attention_mode == "off") {
    a.mode = AttentionSettings::Mode::all_pairs;
  } else if (config.attention_mode == "fallback") {
    a.mode = AttentionSettings::Mode::fallback;
  } else if (config.attention_mode == "on") {
    if (config.weights_path.empty())
      throw std::runtime_error(
          "attention mode \"on\" requires a weights file (--weights or "
          "attention.weights)");
    a.params = load_attention_params(config.weights_path);
    a.mode = AttentionSettings::Mode::learned;
  } else {
    throw std::runtime_error("unknown attention mode \"" +
                             config.attention_mode + "\"");
  }
}

}  // namespace dtn
