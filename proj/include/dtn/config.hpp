#ifndef DTN_CONFIG_HPP
#define DTN_CONFIG_HPP

#include <cstdint>
#include <string>

#include "dtn/sim_harness.hpp"

namespace dtn {

/// Effective run configuration: scenario choice plus every override the
/// JSON schema exposes. Defaults reproduce the canonical four-vehicle
/// unprotected-left-turn demo.
struct RunConfig {
  int version = 1;
  /// One of: single_straight, two_crossing, left_turn_4, mixed_12, flow.
  std::string scenario = "left_turn_4";
  VehicleFlow flow{};  // used when scenario == "flow"
  FrameworkConfig framework{};
  /// "fallback" (geometric scorer), "on" (learned weights, requires
  /// weights_path), or "off" (all-pairs coupling).
  std::string attention_mode = "fallback";
  std::string weights_path;
  std::uint64_t seed = 1;
  int runs = 100;
  int workers = 0;  // 0 = hardware concurrency
  std::string out_dir = "out";
};

/// Baked-in defaults (simulation-parameter table values).
RunConfig default_config();

/// Parses and validates a JSON config. Unknown keys anywhere are rejected by
/// name; malformed JSON reports the parser's line/column message; values
/// outside their documented ranges name the offending key. `origin` prefixes
/// error messages (usually the file path). Throws std::runtime_error.
RunConfig parse_config(const std::string& text, const std::string& origin);

/// parse_config over a file's contents. Throws std::runtime_error when the
/// file cannot be read.
RunConfig load_config(const std::string& path);

/// Serializes the effective configuration; parse_config(serialize_config(c))
/// reproduces c exactly (round-trip invariant).
std::string serialize_config(const RunConfig& config);

/// Writes serialize_config(config) to `path`; false on I/O failure.
bool save_config(const std::string& path, const RunConfig& config);

/// Builds the scenario named by the config (flow scenarios are sampled from
/// config.seed). Throws std::runtime_error on an unknown scenario name,
/// listing the valid ones.
IntersectionScenario scenario_from_config(const RunConfig& config);

/// Applies attention_mode/weights_path onto framework.attention: "off" maps
/// to all-pairs coupling, "fallback" to the geometric scorer, "on" loads the
/// weights file (throws std::runtime_error when no weights path is set or
/// the file fails shape validation).
void resolve_attention(RunConfig& config);

}  // namespace dtn

#endif  // DTN_CONFIG_HPP
