#include "dtn/attention.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "dtn/rng.hpp"

namespace dtn {

using nlohmann::json;

std::vector<int> CommunicationGraph::neighbors(int i) const {
  std::vector<int> out;
  for (int j = 0; j < count; ++j) {
    if (edge(i, j)) out.push_back(j);
  }
  return out;
}

CommunicationGraph build_graph(const std::vector<Vec2>& positions, double d_cmu) {
  if (d_cmu <= 0.0) throw std::invalid_argument("build_graph: d_cmu must be > 0");
  CommunicationGraph g;
  g.count = static_cast<int>(positions.size());
  g.adjacency.assign(g.count, std::vector<bool>(g.count, false));
  for (int i = 0; i < g.count; ++i) {
    for (int j = i + 1; j < g.count; ++j) {
      const bool within = (positions[i] - positions[j]).norm() <= d_cmu;
      g.adjacency[i][j] = within;
      g.adjacency[j][i] = within;
    }
  }
  return g;
}

namespace {

Eigen::MatrixXd parse_matrix(const json& j, const std::string& where, int rows,
                             int cols) {
  if (!j.is_array() || static_cast<int>(j.size()) != rows) {
    throw std::runtime_error("attention weights: bad shape at " + where +
                             " (expected " + std::to_string(rows) + " rows)");
  }
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    const auto& row = j[r];
    if (!row.is_array() || static_cast<int>(row.size()) != cols) {
      throw std::runtime_error("attention weights: bad shape at " + where +
                               " row " + std::to_string(r) + " (expected " +
                               std::to_string(cols) + " cols)");
    }
    for (int c = 0; c < cols; ++c) m(r, c) = row[c].get<double>();
  }
  return m;
}

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw std::runtime_error("attention weights: unknown key '" + it.key() +
                               "' in " + where);
    }
  }
}

}  // namespace

AttentionModelParams load_attention_params(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("attention weights: cannot open " + path);
  json root = json::parse(in);

  reject_unknown_keys(root, {"d_x", "d_k", "heads", "layers"}, "top level");
  AttentionModelParams p;
  p.d_x = root.at("d_x").get<int>();
  p.d_k = root.at("d_k").get<int>();
  p.heads = root.at("heads").get<int>();
  if (p.d_x < 1 || p.d_k < 1 || p.heads < 1) {
    throw std::runtime_error("attention weights: dimensions must be positive");
  }

  const json& layers = root.at("layers");
  reject_unknown_keys(layers, {"embedding", "query", "key", "value", "combine"},
                      "layers");

  const json& emb = layers.at("embedding");
  if (!emb.is_array() || emb.empty()) {
    throw std::runtime_error("attention weights: layers.embedding must be a "
                             "nonempty array");
  }
  for (size_t l = 0; l < emb.size(); ++l) {
    reject_unknown_keys(emb[l], {"W", "b"},
                        "layers.embedding[" + std::to_string(l) + "]");
    const json& Wj = emb[l].at("W");
    const int rows = static_cast<int>(Wj.size());
    const int cols = rows > 0 ? static_cast<int>(Wj[0].size()) : 0;
    Eigen::MatrixXd W = parse_matrix(Wj, "embedding[" + std::to_string(l) + "].W",
                                     rows, cols);
    const json& bj = emb[l].at("b");
    if (static_cast<int>(bj.size()) != rows) {
      throw std::runtime_error("attention weights: embedding bias length "
                               "mismatch at layer " + std::to_string(l));
    }
    Eigen::VectorXd b(rows);
    for (int r = 0; r < rows; ++r) b[r] = bj[r].get<double>();
    if (l > 0 && W.cols() != p.embed_W.back().rows()) {
      throw std::runtime_error("attention weights: embedding layer " +
                               std::to_string(l) + " input width mismatch");
    }
    p.embed_W.push_back(std::move(W));
    p.embed_b.push_back(std::move(b));
  }
  if (p.embed_W.back().rows() != p.d_x) {
    throw std::runtime_error(
        "attention weights: final embedding width must equal d_x");
  }

  auto parse_heads = [&](const char* name, std::vector<Eigen::MatrixXd>& dst) {
    const json& arr = layers.at(name);
    if (!arr.is_array() || static_cast<int>(arr.size()) != p.heads) {
      throw std::runtime_error(std::string("attention weights: layers.") + name +
                               " must list one matrix per head");
    }
    for (int hidx = 0; hidx < p.heads; ++hidx) {
      dst.push_back(parse_matrix(arr[hidx],
                                 std::string("layers.") + name + "[" +
                                     std::to_string(hidx) + "]",
                                 p.d_k, p.d_x));
    }
  };
  parse_heads("query", p.Wq);
  parse_heads("key", p.Wk);
  parse_heads("value", p.Wv);

  const json& comb = layers.at("combine");
  reject_unknown_keys(comb, {"w", "b"}, "layers.combine");
  const json& cw = comb.at("w");
  if (static_cast<int>(cw.size()) != p.heads) {
    throw std::runtime_error(
        "attention weights: layers.combine.w must have one entry per head");
  }
  p.combine_w.resize(p.heads);
  for (int hidx = 0; hidx < p.heads; ++hidx) p.combine_w[hidx] = cw[hidx].get<double>();
  p.combine_b = comb.at("b").get<double>();
  return p;
}

AttentionModelParams random_attention_params(uint64_t seed, int raw_dim, int d_x,
                                             int d_k, int heads) {
  Rng rng(seed);
  auto rand_mat = [&](int rows, int cols) {
    Eigen::MatrixXd m(rows, cols);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) m(r, c) = scale * rng.next_normal();
    }
    return m;
  };
  AttentionModelParams p;
  p.d_x = d_x;
  p.d_k = d_k;
  p.heads = heads;
  p.embed_W = {rand_mat(64, raw_dim), rand_mat(64, 64), rand_mat(d_x, 64)};
  p.embed_b = {Eigen::VectorXd::Zero(64), Eigen::VectorXd::Zero(64),
               Eigen::VectorXd::Zero(d_x)};
  for (int hidx = 0; hidx < heads; ++hidx) {
    p.Wq.push_back(rand_mat(d_k, d_x));
    p.Wk.push_back(rand_mat(d_k, d_x));
    p.Wv.push_back(rand_mat(d_k, d_x));
  }
  p.combine_w = Eigen::VectorXd::Constant(heads, 1.0 / heads);
  p.combine_b = 0.0;
  return p;
}

Eigen::MatrixXd raw_features(const std::vector<AgentSnapshot>& agents, int ego) {
  const int m = static_cast<int>(agents.size());
  if (ego < 0 || ego >= m) throw std::invalid_argument("raw_features: bad ego");
  const VehicleState& es = agents[ego].state;
  const double c = std::cos(-es.theta), s = std::sin(-es.theta);
  Mat2 to_ego;
  to_ego << c, -s, s, c;

  Eigen::MatrixXd feats(m, 10);
  int row = 0;
  auto fill = [&](int idx) {
    const VehicleState& a = agents[idx].state;
    const Vec2 rel_p = to_ego * Vec2(a.x - es.x, a.y - es.y);
    const Vec2 vel_a(a.v * std::cos(a.theta), a.v * std::sin(a.theta));
    const Vec2 vel_e(es.v * std::cos(es.theta), es.v * std::sin(es.theta));
    const Vec2 rel_v = to_ego * (vel_a - vel_e);
    const double rel_h = wrap_angle(a.theta - es.theta);
    feats(row, 0) = rel_p[0];
    feats(row, 1) = rel_p[1];
    feats(row, 2) = rel_v[0];
    feats(row, 3) = rel_v[1];
    feats(row, 4) = std::cos(rel_h);
    feats(row, 5) = std::sin(rel_h);
    feats(row, 6) = a.v;
    feats(row, 7) = agents[idx].intention == Intention::straight ? 1.0 : 0.0;
    feats(row, 8) = agents[idx].intention == Intention::left ? 1.0 : 0.0;
    feats(row, 9) = agents[idx].intention == Intention::right ? 1.0 : 0.0;
    ++row;
  };
  fill(ego);
  for (int i = 0; i < m; ++i) {
    if (i != ego) fill(i);
  }
  return feats;
}

Eigen::MatrixXd embed_features(const std::vector<AgentSnapshot>& agents, int ego,
                               const AttentionModelParams& params) {
  Eigen::MatrixXd acts = raw_features(agents, ego);
  if (params.raw_dim() != acts.cols()) {
    throw std::runtime_error("embed_features: first layer expects " +
                             std::to_string(params.raw_dim()) +
                             " inputs, features have " +
                             std::to_string(acts.cols()));
  }
  const size_t num_layers = params.embed_W.size();
  for (size_t l = 0; l < num_layers; ++l) {
    acts = (acts * params.embed_W[l].transpose()).rowwise() +
           params.embed_b[l].transpose();
    if (l + 1 < num_layers) acts = acts.cwiseMax(0.0);  // rectifier, last linear
  }
  return acts;
}

AttentionWeightsSet attention_weights(const AttentionModelParams& params,
                                      const Eigen::MatrixXd& embeddings) {
  const int m = static_cast<int>(embeddings.rows()) - 1;  // non-ego count
  if (m < 1) {
    throw std::invalid_argument("attention_weights: need at least one neighbor");
  }
  AttentionWeightsSet out;
  out.per_head.resize(params.heads, m);
  out.value_out.resize(params.heads, params.d_k);
  const double scale = 1.0 / std::sqrt(static_cast<double>(params.d_k));

  for (int hidx = 0; hidx < params.heads; ++hidx) {
    const Eigen::VectorXd q0 = params.Wq[hidx] * embeddings.row(0).transpose();
    Eigen::VectorXd logits(m);
    for (int i = 0; i < m; ++i) {
      const Eigen::VectorXd ki = params.Wk[hidx] * embeddings.row(i + 1).transpose();
      logits[i] = scale * q0.dot(ki);
    }
    const double peak = logits.maxCoeff();
    Eigen::VectorXd w = (logits.array() - peak).exp();
    w /= w.sum();
    out.per_head.row(hidx) = w.transpose();

    Eigen::VectorXd agg = Eigen::VectorXd::Zero(params.d_k);
    for (int i = 0; i < m; ++i) {
      agg += w[i] * (params.Wv[hidx] * embeddings.row(i + 1).transpose());
    }
    out.value_out.row(hidx) = agg.transpose();
  }

  // Head combination: affine map per head, clamped and renormalized. A
  // degenerate all-nonpositive combination falls back to the head average.
  Eigen::VectorXd combined =
      (out.per_head.transpose() * params.combine_w).array() + params.combine_b;
  combined = combined.cwiseMax(0.0);
  const double total = combined.sum();
  if (total > 1e-12) {
    combined /= total;
  } else {
    combined = out.per_head.colwise().mean().transpose();
    combined /= combined.sum();
  }
  out.combined = combined;
  return out;
}

std::vector<int> select_neighbors(const Eigen::VectorXd& scores,
                                  const std::vector<int>& candidate_ids,
                                  const CommunicationGraph& graph, int ego,
                                  int k_max, const std::vector<Vec2>& positions,
                                  double floor_radius) {
  if (k_max < 1) throw std::invalid_argument("select_neighbors: k_max < 1");
  if (scores.size() != static_cast<Eigen::Index>(candidate_ids.size())) {
    throw std::invalid_argument("select_neighbors: score/id size mismatch");
  }
  std::vector<int> order(candidate_ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return candidate_ids[a] < candidate_ids[b];  // tie: smaller id wins
  });

  std::set<int> selected;
  for (int idx : order) {
    if (static_cast<int>(selected.size()) >= k_max) break;
    const int id = candidate_ids[idx];
    if (graph.edge(ego, id)) selected.insert(id);
  }
  // Safety floor: anything within stopping range stays coupled regardless of
  // attention scores.
  for (int id : candidate_ids) {
    if (graph.edge(ego, id) &&
        (positions[id] - positions[ego]).norm() <= floor_radius) {
      selected.insert(id);
    }
  }
  return {selected.begin(), selected.end()};
}

Eigen::VectorXd fallback_scores(const std::vector<AgentSnapshot>& agents,
                                int ego, double horizon_seconds) {
  const int m = static_cast<int>(agents.size());
  if (ego < 0 || ego >= m) throw std::invalid_argument("fallback_scores: bad ego");
  Eigen::VectorXd scores(m - 1);
  const VehicleState& es = agents[ego].state;
  const Vec2 pe(es.x, es.y);
  const Vec2 ve(es.v * std::cos(es.theta), es.v * std::sin(es.theta));
  int row = 0;
  for (int i = 0; i < m; ++i) {
    if (i == ego) continue;
    const VehicleState& a = agents[i].state;
    const Vec2 dp = Vec2(a.x, a.y) - pe;
    const Vec2 dv =
        Vec2(a.v * std::cos(a.theta), a.v * std::sin(a.theta)) - ve;
    // Closest approach of ||dp + t dv|| on [0, horizon].
    double t_star = 0.0;
    const double dv2 = dv.squaredNorm();
    if (dv2 > 1e-12) t_star = std::clamp(-dp.dot(dv) / dv2, 0.0, horizon_seconds);
    const double min_sep = (dp + t_star * dv).norm();
    scores[row++] = 1.0 / std::max(min_sep, 0.5);
  }
  const double total = scores.sum();
  if (total > 0.0) scores /= total;
  return scores;
}

double safety_floor_radius(const Limits& limits, double tau) {
  const double braking = std::abs(limits.a_min);
  const double stop = limits.v_max * limits.v_max / (2.0 * braking) +
                      limits.v_max * tau;
  return 1.5 * stop;
}

}  // namespace dtn
