// Command-line driver: single episodes, Monte Carlo batches, and SVG plots.
//
//   dtn_sim run        [--config F] [--seed N] [--out DIR] [--attention M]
//                      [--weights F] [--no-noise]
//   dtn_sim montecarlo [--config F] [--seed N] [--runs N] [--workers N] ...
//   dtn_sim plot KIND LOG [--out DIR]     KIND in {trajectories,
//                                          metrics-vs-count, residuals}
//
// Exit codes: 0 clean, 1 configuration/usage error, 2 collision during the
// run, 3 solver hard failure (collision takes precedence).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dtn/config.hpp"
#include "dtn/sim_harness.hpp"
#include "dtn/svg_plot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliOverrides {
  std::string config_path;
  std::string out_dir;
  std::string attention;
  std::string weights;
  std::uint64_t seed = 0;
  int runs = -1;
  int workers = -1;
  bool no_noise = false;
  bool seed_set = false;
};

dtn::RunConfig effective_config(const CliOverrides& ov) {
  dtn::RunConfig cfg = ov.config_path.empty()
                           ? dtn::default_config()
                           : dtn::load_config(ov.config_path);
  if (ov.seed_set) cfg.seed = ov.seed;
  if (ov.runs >= 0) cfg.runs = ov.runs;
  if (ov.workers >= 0) cfg.workers = ov.workers;
  if (!ov.out_dir.empty()) cfg.out_dir = ov.out_dir;
  if (!ov.attention.empty()) cfg.attention_mode = ov.attention;
  if (!ov.weights.empty()) cfg.weights_path = ov.weights;
  if (ov.no_noise) {
    cfg.framework.process_noise = false;
    cfg.framework.measurement_noise = false;
  }
  return cfg;
}

json metrics_to_json(const dtn::RunMetrics& m) {
  return json{{"collisions", m.collisions},
              {"avg_speed", m.avg_speed},
              {"total_passing_time", m.total_passing_time},
              {"mean_cycle_ms", m.mean_cycle_ms},
              {"max_cycle_ms", m.max_cycle_ms},
              {"cycles", m.cycles},
              {"cycles_within_2", m.cycles_within_2},
              {"hard_failures", m.hard_failures},
              {"vehicles", m.vehicles},
              {"timed_out", m.timed_out},
              {"residual_trace", m.residual_trace}};
}

bool write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) return false;
  out << text;
  return static_cast<bool>(out);
}

int cmd_run(const CliOverrides& ov) {
  dtn::RunConfig cfg = effective_config(ov);
  dtn::resolve_attention(cfg);
  const dtn::IntersectionScenario scenario = dtn::scenario_from_config(cfg);

  const dtn::EpisodeResult episode =
      dtn::run_episode(scenario, cfg.framework, cfg.seed);
  const dtn::RunMetrics& m = episode.metrics;

  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  dtn::save_config((out / "config.json").string(), cfg);
  dtn::write_trajectory_csv((out / "trajectory.csv").string(), episode.log);
  json mj = metrics_to_json(m);
  mj["scenario"] = scenario.name;
  mj["seed"] = cfg.seed;
  write_text(out / "metrics.json", mj.dump(2) + "\n");
  if (!episode.log.empty())
    dtn::svg_trajectories((out / "trajectories.svg").string(), episode.log,
                          scenario.area, scenario.lane_width);

  std::cout << "scenario " << scenario.name << " seed " << cfg.seed << ": "
            << m.vehicles << " vehicles, " << m.collisions << " collisions, "
            << "avg speed " << m.avg_speed << " m/s, total passing time "
            << m.total_passing_time << " s, mean cycle " << m.mean_cycle_ms
            << " ms" << (m.timed_out ? ", TIMED OUT" : "") << "\n"
            << "artifacts in " << out.string() << "\n";
  if (m.collisions > 0) return 2;
  if (m.hard_failures > 0) return 3;
  return 0;
}

int cmd_montecarlo(const CliOverrides& ov) {
  dtn::RunConfig cfg = effective_config(ov);
  if (cfg.runs <= 0) {
    std::cerr << "montecarlo: need runs >= 1 (--runs or run.runs)\n";
    return 1;
  }
  dtn::resolve_attention(cfg);
  const dtn::IntersectionScenario scenario = dtn::scenario_from_config(cfg);
  const std::vector<std::uint64_t> seeds =
      dtn::monte_carlo_seeds(cfg.seed, cfg.runs);
  const int workers =
      cfg.workers > 0
          ? cfg.workers
          : std::max(1u, std::thread::hardware_concurrency());

  const dtn::MonteCarloResult result =
      dtn::monte_carlo(scenario, cfg.framework, seeds, workers);

  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  dtn::save_config((out / "config.json").string(), cfg);

  // Idempotent re-runs: identical seeds must reproduce the table verbatim.
  std::ostringstream tmp;
  {
    const fs::path tmp_path = out / "runs.csv.tmp";
    dtn::write_runs_csv(tmp_path.string(), result);
    std::ifstream in(tmp_path);
    tmp << in.rdbuf();
    fs::remove(tmp_path);
  }
  const fs::path runs_path = out / "runs.csv";
  bool verified = false;
  if (fs::exists(runs_path)) {
    std::ifstream in(runs_path);
    std::ostringstream existing;
    existing << in.rdbuf();
    verified = existing.str() == tmp.str();
  }
  if (!verified) write_text(runs_path, tmp.str());

  json mj{{"scenario", scenario.name},
          {"base_seed", cfg.seed},
          {"runs", static_cast<int>(result.runs.size())},
          {"collision_runs", result.collision_runs},
          {"mean_avg_speed", result.mean_avg_speed},
          {"mean_passing_time", result.mean_passing_time},
          {"mean_cycle_ms", result.mean_cycle_ms}};
  write_text(out / "metrics.json", mj.dump(2) + "\n");

  std::cout << "scenario " << scenario.name << ": " << result.runs.size()
            << " runs, " << result.collision_runs << " collision runs, "
            << "mean avg speed " << result.mean_avg_speed
            << " m/s, mean passing time " << result.mean_passing_time
            << " s, mean cycle " << result.mean_cycle_ms << " ms\n"
            << (verified ? "runs.csv verified (identical rows)\n" : "")
            << "artifacts in " << out.string() << "\n";
  return 0;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cols;
  std::stringstream ss(line);
  std::string col;
  while (std::getline(ss, col, ',')) cols.push_back(col);
  if (!line.empty() && line.back() == ',') cols.push_back("");
  return cols;
}

int plot_trajectories(const std::string& log, const fs::path& out_dir) {
  std::ifstream in(log);
  std::string header;
  if (!std::getline(in, header)) {
    std::cerr << "plot: empty log " << log << "\n";
    return 1;
  }
  const std::vector<std::string> cols = split_csv_line(header);
  std::map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < cols.size(); ++i) idx[cols[i]] = i;
  for (const char* need : {"vehicle", "x", "y", "sigma_xx", "sigma_yy"})
    if (idx.find(need) == idx.end()) {
      std::cerr << "plot: " << log << " missing column \"" << need << "\"\n";
      return 1;
    }
  std::vector<dtn::TrajectoryRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> v = split_csv_line(line);
    if (v.size() < cols.size()) continue;
    dtn::TrajectoryRow r;
    r.vehicle = std::stoi(v[idx["vehicle"]]);
    r.x = std::stod(v[idx["x"]]);
    r.y = std::stod(v[idx["y"]]);
    r.sigma_xx = std::stod(v[idx["sigma_xx"]]);
    r.sigma_yy = std::stod(v[idx["sigma_yy"]]);
    rows.push_back(r);
  }
  if (rows.empty()) {
    std::cerr << "plot: empty log " << log << "\n";
    return 1;
  }
  const fs::path svg = out_dir / "trajectories.svg";
  if (!dtn::svg_trajectories(svg.string(), rows)) {
    std::cerr << "plot: failed to write " << svg << "\n";
    return 1;
  }
  std::cout << "wrote " << svg.string() << "\n";
  return 0;
}

int plot_residuals(const std::string& log, const fs::path& out_dir) {
  std::ifstream in(log);
  if (!in) {
    std::cerr << "plot: cannot open " << log << "\n";
    return 1;
  }
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    std::cerr << "plot: " << log << ": " << e.what() << "\n";
    return 1;
  }
  if (!j.contains("residual_trace") || !j["residual_trace"].is_array() ||
      j["residual_trace"].empty()) {
    std::cerr << "plot: " << log
              << " has no residual_trace (use a single-run metrics.json)\n";
    return 1;
  }
  dtn::PlotSeries series;
  series.label = "primal residual";
  int cycle = 0;
  for (const auto& v : j["residual_trace"])
    series.points.push_back({static_cast<double>(cycle++), v.get<double>()});
  const fs::path svg = out_dir / "residuals.svg";
  if (!dtn::svg_line_chart(svg.string(), "Negotiation residuals", "cycle",
                           "sum of squared slack residuals", {series},
                           /*log_y=*/true)) {
    std::cerr << "plot: failed to write " << svg << "\n";
    return 1;
  }
  std::cout << "wrote " << svg.string() << "\n";
  return 0;
}

int plot_metrics_vs_count(const std::string& log, const fs::path& out_dir) {
  std::ifstream in(log);
  std::string header;
  if (!std::getline(in, header)) {
    std::cerr << "plot: empty log " << log << "\n";
    return 1;
  }
  const std::vector<std::string> cols = split_csv_line(header);
  std::map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < cols.size(); ++i) idx[cols[i]] = i;
  for (const char* need :
       {"n_vehicles", "collisions", "avg_speed", "mean_cycle_ms"})
    if (idx.find(need) == idx.end()) {
      std::cerr << "plot: " << log << " missing column \"" << need << "\"\n";
      return 1;
    }
  struct Acc {
    double speed = 0.0, collisions = 0.0, cycle_ms = 0.0;
    int n = 0;
  };
  std::map<int, Acc> by_count;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> v = split_csv_line(line);
    if (v.size() < cols.size()) continue;
    Acc& a = by_count[std::stoi(v[idx["n_vehicles"]])];
    a.speed += std::stod(v[idx["avg_speed"]]);
    a.collisions += std::stod(v[idx["collisions"]]);
    a.cycle_ms += std::stod(v[idx["mean_cycle_ms"]]);
    ++a.n;
  }
  if (by_count.empty()) {
    std::cerr << "plot: empty log " << log << "\n";
    return 1;
  }
  dtn::PlotSeries speed{"mean avg speed (m/s)", {}};
  dtn::PlotSeries coll{"mean collisions per run", {}};
  dtn::PlotSeries ms{"mean cycle time (ms)", {}};
  for (const auto& [count, acc] : by_count) {
    speed.points.push_back({static_cast<double>(count), acc.speed / acc.n});
    coll.points.push_back(
        {static_cast<double>(count), acc.collisions / acc.n});
    ms.points.push_back({static_cast<double>(count), acc.cycle_ms / acc.n});
  }
  const fs::path svg = out_dir / "metrics_vs_count.svg";
  if (!dtn::svg_line_chart(svg.string(), "Metrics vs vehicle count",
                           "vehicles", "metric", {speed, coll, ms})) {
    std::cerr << "plot: failed to write " << svg << "\n";
    return 1;
  }
  std::cout << "wrote " << svg.string() << "\n";
  return 0;
}

int cmd_plot(const std::string& kind, const std::string& log,
             const std::string& out_dir) {
  if (kind != "trajectories" && kind != "metrics-vs-count" &&
      kind != "residuals") {
    std::cerr << "plot: unknown kind \"" << kind
              << "\" (valid: trajectories, metrics-vs-count, residuals)\n";
    return 1;
  }
  if (!fs::exists(log)) {
    std::cerr << "plot: log not found: " << log << "\n";
    return 1;
  }
  const fs::path out(out_dir.empty() ? "." : out_dir);
  fs::create_directories(out);
  if (kind == "trajectories") return plot_trajectories(log, out);
  if (kind == "residuals") return plot_residuals(log, out);
  return plot_metrics_vs_count(log, out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Distributed covariance-steering trajectory negotiation: intersection "
      "simulator"};
  app.require_subcommand(1);

  CliOverrides ov;
  std::string plot_kind, plot_log;

  const auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", ov.config_path, "JSON config file");
    cmd->add_option("--seed", ov.seed, "base RNG seed")
        ->each([&](const std::string&) { ov.seed_set = true; });
    cmd->add_option("--runs", ov.runs, "Monte Carlo run count");
    cmd->add_option("--workers", ov.workers, "worker threads (0 = auto)");
    cmd->add_option("--out", ov.out_dir, "output directory");
    cmd->add_option("--attention", ov.attention,
                    "neighbor selection: on, off, or fallback")
        ->check(CLI::IsMember({"on", "off", "fallback"}));
    cmd->add_option("--weights", ov.weights, "attention weights file (JSON)");
    cmd->add_flag("--no-noise", ov.no_noise,
                  "disable process and measurement noise sampling");
  };

  CLI::App* run = app.add_subcommand("run", "run one episode");
  add_common(run);
  CLI::App* mc =
      app.add_subcommand("montecarlo", "run a batch of seeded episodes");
  add_common(mc);
  CLI::App* plot = app.add_subcommand("plot", "render an SVG from a log");
  plot->add_option("kind", plot_kind,
                   "trajectories | metrics-vs-count | residuals")
      ->required();
  plot->add_option("log", plot_log, "input log (CSV or metrics JSON)")
      ->required();
  plot->add_option("--out", ov.out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (run->parsed()) return cmd_run(ov);
    if (mc->parsed()) return cmd_montecarlo(ov);
    return cmd_plot(plot_kind, plot_log, ov.out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
