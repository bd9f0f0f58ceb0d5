// Interactive neighbor selection: a communication graph bounded by range,
// multi-head scaled dot-product attention over embedded vehicle features (the
// value aggregation is computed but only the weights drive selection), a
// deterministic geometric fallback scorer, and a hard safety floor that keeps
// imminent threats coupled regardless of scores.
//
// Weights file format (JSON, strict shape validation, unknown keys rejected):
//   {
//     "d_x": 32, "d_k": 16, "heads": 2,
//     "layers": {
//       "embedding": [ {"W": [[...]], "b": [...]}, ... ],   // rectifier MLP,
//                                                           // last layer linear
//       "query": [ [[...]] per head ],   // d_k x d_x, row-major
//       "key":   [ [[...]] per head ],
//       "value": [ [[...]] per head ],
//       "combine": {"w": [...heads...], "b": 0.0}
//     }
//   }
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dtn/types.hpp"

namespace dtn {

/// Driving intention carried in the feature one-hot code.
enum class Intention { straight = 0, left = 1, right = 2 };

/// Undirected communication graph: edge iff distance <= d_cmu (inclusive).
struct CommunicationGraph {
  int count = 0;
  std::vector<std::vector<bool>> adjacency;

  bool edge(int i, int j) const { return i != j && adjacency[i][j]; }
  std::vector<int> neighbors(int i) const;
};

CommunicationGraph build_graph(const std::vector<Vec2>& positions, double d_cmu);

/// Model parameters; see the file-format comment above.
struct AttentionModelParams {
  int d_x = 32;
  int d_k = 16;
  int heads = 2;
  std::vector<Eigen::MatrixXd> embed_W;  // per layer
  std::vector<Eigen::VectorXd> embed_b;
  std::vector<Eigen::MatrixXd> Wq, Wk, Wv;  // per head, d_k x d_x
  Eigen::VectorXd combine_w;                // per head
  double combine_b = 0.0;

  /// Raw feature dimension the first embedding layer expects.
  int raw_dim() const {
    return embed_W.empty() ? 0 : static_cast<int>(embed_W.front().cols());
  }
};

/// Loads and shape-checks a weights file. Throws std::runtime_error with the
/// offending key/shape on any mismatch or unknown key.
AttentionModelParams load_attention_params(const std::string& path);

/// Deterministic random-initialized parameters (for tests and golden runs).
AttentionModelParams random_attention_params(uint64_t seed, int raw_dim = 10,
                                             int d_x = 32, int d_k = 16,
                                             int heads = 2);

/// Kinematic snapshot consumed by the feature builder.
struct AgentSnapshot {
  VehicleState state;
  Intention intention = Intention::straight;
};

/// Raw 10-dim features of every agent in the ego frame (ego row first, then
/// the supplied others in their given order): relative position (2), relative
/// velocity (2), cos/sin of relative heading (2), speed (1), one-hot
/// intention (3).
Eigen::MatrixXd raw_features(const std::vector<AgentSnapshot>& agents, int ego);

/// Runs the embedding MLP on each row of raw features. Throws
/// std::runtime_error when the parameter shapes do not match.
Eigen::MatrixXd embed_features(const std::vector<AgentSnapshot>& agents, int ego,
                               const AttentionModelParams& params);

/// Per-head simplex weight rows over the M non-ego rows, plus the combined
/// selection distribution. Value aggregation is exposed for inspection only.
struct AttentionWeightsSet {
  Eigen::MatrixXd per_head;   // heads x M
  Eigen::VectorXd combined;   // M, simplex
  Eigen::MatrixXd value_out;  // heads x d_k (unused for selection)
};

/// Scaled dot-product attention of the ego query against neighbor keys:
/// softmax(q0 . k_i / sqrt(d_k)) per head; heads are combined with the affine
/// map (w, b), clamped at zero, and renormalized to a distribution.
AttentionWeightsSet attention_weights(const AttentionModelParams& params,
                                      const Eigen::MatrixXd& embeddings);

/// Top-k_max graph neighbors by combined weight (ties to the smaller id),
/// then union with the safety floor: every vehicle within `floor_radius` of
/// the ego is always selected.
std::vector<int> select_neighbors(const Eigen::VectorXd& scores,
                                  const std::vector<int>& candidate_ids,
                                  const CommunicationGraph& graph, int ego,
                                  int k_max,
                                  const std::vector<Vec2>& positions,
                                  double floor_radius);

/// Fallback criticality scores (default when no weights file is configured):
/// inverse minimum separation over the horizon under constant-velocity
/// extrapolation, clipped and normalized to a distribution over the non-ego
/// agents (same order as raw_features rows 1..M).
Eigen::VectorXd fallback_scores(const std::vector<AgentSnapshot>& agents,
                                int ego, double horizon_seconds);

/// Safety floor radius: 1.5 x the maximum stopping distance
/// v_max^2 / (2 a_brake) + v_max tau.
double safety_floor_radius(const Limits& limits, double tau);

}  // namespace dtn
