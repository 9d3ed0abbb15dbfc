#pragma once

#include "plsm/envs.hpp"
#include "plsm/model.hpp"
#include "plsm/tensor.hpp"

#include <json.hpp>

#include <map>
#include <span>
#include <vector>

namespace plsm {

// ---------------------------------------------------------------------------
// Multi-step Hits@1
// ---------------------------------------------------------------------------

struct HitsResult {
  std::map<int, double> accuracy;  // horizon -> fraction of hits
  std::size_t reference_size = 0;

  nlohmann::json to_json() const;
};

/// Fraction of rows i whose nearest reference row (squared L2, ties to the
/// lowest index) is reference i.
double hits_rate(const Tensor& predicted, const Tensor& references);

/// One sample per episode: encode the first observation, roll out N actions in
/// latent space and rank against the encoded observations at step N of every
/// episode.
HitsResult hits_at_1(const WorldModel& model, const TransitionDataset& dataset, std::span<const int> horizons);
double hits_at_1(const WorldModel& model, const TransitionDataset& dataset, int horizon);

// ---------------------------------------------------------------------------
// Delta clustering and empirical mutual information
// ---------------------------------------------------------------------------

struct ClusterReport {
  std::vector<int> per_action_count;  // distinct clusters hit by each action
  int marginal_count = 0;
  Tensor centroids;                   // [marginal_count, D], normalized units
  std::vector<std::vector<double>> per_action_frequency;  // [A][marginal_count]
  std::vector<double> action_weight;  // empirical P(a)
  double empirical_mi = 0.0;          // bits

  int max_per_action() const;
  nlohmann::json to_json() const;
};

/// Greedy first-fit epsilon-ball clustering of delta rows in input order, after
/// dividing every row by the mean row norm (skipped when that mean is 0).
ClusterReport cluster_deltas(const Tensor& deltas, std::span<const int> actions, int action_count, double epsilon);

/// Predicted deltas of every transition in the dataset, clustered.
ClusterReport delta_clusters(const WorldModel& model, const TransitionDataset& dataset, double epsilon);

/// Shannon entropy in bits of a (not necessarily normalized) histogram.
double entropy_bits(std::span<const double> counts);

/// sum_a P(a) H[cluster | a]. For a deterministic model H[delta | z, a] = 0, so
/// this estimates I(z; delta | a).
double empirical_mi(const ClusterReport& report);

// ---------------------------------------------------------------------------
// Norm diagnostics
// ---------------------------------------------------------------------------

struct NormDiagnostics {
  double mean_query_norm = 0.0;        // mean ||h|| of the query-path model
  double mean_latent_norm = 0.0;       // mean ||z|| of the baseline
  double query_weight_norm = 0.0;      // first dynamics layer, query-path model
  double baseline_weight_norm = 0.0;   // first dynamics layer, baseline
  double norm_ratio = 0.0;             // mean ||h|| / mean ||z||
  double weight_ratio = 0.0;           // query / baseline weight norm
  double squared_norm_ratio = 0.0;     // mean ||h||^2 / mean ||z||^2, the penalized quantity

  nlohmann::json to_json() const;
};

NormDiagnostics norm_diagnostics(const WorldModel& query_model, const WorldModel& baseline,
                                 const TransitionDataset& dataset);

// ---------------------------------------------------------------------------
// Linear probes
// ---------------------------------------------------------------------------

struct RidgeModel {
  Tensor weights;    // [D, K]
  Tensor intercept;  // [1, K]
  Tensor predict(const Tensor& x) const;
};

/// Ridge regression with an unpenalized intercept: centre X and Y, then solve
/// (X^T X + alpha I) W = X^T Y.
RidgeModel ridge_fit(const Tensor& x, const Tensor& y, double alpha);

/// 1 - SS_res / SS_tot summed over output columns.
double r_squared(const Tensor& y, const Tensor& predicted);

/// Held-out R^2: first `train_fraction` of the rows fit, the rest score.
double probe_r2(const Tensor& x, const Tensor& y, double alpha = 1e-3, double train_fraction = 0.8);

struct ProbeReport {
  std::vector<double> latent;             // R^2(z -> position of object k)
  std::vector<double> query;              // R^2(h -> position of object k), all transitions
  std::vector<double> query_conditioned;  // same, only transitions whose action moves object k

  double mean_latent() const;
  double mean_query() const;
  double mean_query_conditioned() const;
  nlohmann::json to_json() const;
};

ProbeReport decode_probe(const WorldModel& model, const TransitionDataset& dataset, double alpha = 1e-3);

// ---------------------------------------------------------------------------
// Collapse
// ---------------------------------------------------------------------------

struct CollapseReport {
  std::vector<double> variance;  // per latent dimension
  double mean_variance = 0.0;
};

CollapseReport collapse_metric(const WorldModel& model, const TransitionDataset& dataset);

/// Encodes the observations at the given (episode, t) pairs in fixed-size chunks.
Tensor encode_observations(const WorldModel& model, const TransitionDataset& dataset,
                           std::span<const std::pair<std::size_t, std::size_t>> at);

}  // namespace plsm
