#include "plsm/eval.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace plsm {

namespace {

using Pairs = std::vector<std::pair<std::size_t, std::size_t>>;

constexpr std::size_t kChunk = 2048;

Pairs all_transitions(const TransitionDataset& dataset) {
  Pairs out;
  for (std::size_t e = 0; e < dataset.episodes; ++e)
    for (std::size_t t = 0; t + 1 < dataset.steps(); ++t) out.emplace_back(e, t);
  return out;
}

double row_sqnorm_at(const Tensor& t, std::size_t r) {
  double s = 0.0;
  for (std::size_t c = 0; c < t.cols(); ++c) s += t.at(r, c) * t.at(r, c);
  return s;
}

double mean_row_norm(const Tensor& t) {
  double total = 0.0;
  for (std::size_t r = 0; r < t.rows(); ++r) total += std::sqrt(row_sqnorm_at(t, r));
  return t.rows() ? total / static_cast<double>(t.rows()) : 0.0;
}

double mean_row_sqnorm(const Tensor& t) {
  double total = 0.0;
  for (std::size_t r = 0; r < t.rows(); ++r) total += row_sqnorm_at(t, r);
  return t.rows() ? total / static_cast<double>(t.rows()) : 0.0;
}

void append_rows(std::vector<double>& out, const Tensor& t) {
  out.insert(out.end(), t.data().begin(), t.data().end());
}

/// Runs `f(obs, actions)` over chunks of transitions and stacks the results.
template <typename F>
Tensor map_transitions(const TransitionDataset& dataset, const Pairs& at, std::size_t width, F f) {
  std::vector<double> values;
  values.reserve(at.size() * width);
  for (std::size_t start = 0; start < at.size(); start += kChunk) {
    const std::span<const std::pair<std::size_t, std::size_t>> chunk(at.data() + start,
                                                                     std::min(kChunk, at.size() - start));
    append_rows(values, f(dataset.observation_batch(chunk), dataset.action_batch(chunk)));
  }
  return Tensor({at.size(), width}, std::move(values));
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor encode_observations(const WorldModel& model, const TransitionDataset& dataset,
                           std::span<const std::pair<std::size_t, std::size_t>> at) {
  const auto width = static_cast<std::size_t>(model.config().latent_dim);
  std::vector<double> values;
  values.reserve(at.size() * width);
  for (std::size_t start = 0; start < at.size(); start += kChunk) {
    append_rows(values, model.encode(dataset.observation_batch(at.subspan(start, std::min(kChunk, at.size() - start)))));
  }
  return Tensor({at.size(), width}, std::move(values));
}

nlohmann::json HitsResult::to_json() const {
  nlohmann::json j;
  j["reference_size"] = reference_size;
  j["accuracy"] = nlohmann::json::object();
  for (const auto& [h, acc] : accuracy) j["accuracy"][std::to_string(h)] = acc;
  return j;
}

double hits_rate(const Tensor& predicted, const Tensor& references) {
  if (predicted.shape() != references.shape() || predicted.rank() != 2) {
    throw ShapeError("hits_rate: predicted " + shape_string(predicted.shape()) + " and references " +
                     shape_string(references.shape()) + " differ");
  }
  const std::size_t n = predicted.rows(), d = predicted.cols();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      double dist = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = predicted.at(i, c) - references.at(j, c);
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = j;
      }
    }
    if (best == i) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

HitsResult hits_at_1(const WorldModel& model, const TransitionDataset& dataset, std::span<const int> horizons) {
  HitsResult result;
  result.reference_size = dataset.episodes;
  Pairs starts;
  for (std::size_t e = 0; e < dataset.episodes; ++e) starts.emplace_back(e, 0);
  const Tensor start_obs = dataset.observation_batch(starts);
  for (int horizon : horizons) {
    if (horizon < 1 || static_cast<std::size_t>(horizon) + 1 > dataset.steps()) {
      throw std::invalid_argument("hits_at_1: horizon " + std::to_string(horizon) + " needs episodes of at least " +
                                  std::to_string(horizon + 1) + " observations, dataset has " +
                                  std::to_string(dataset.steps()));
    }
    std::vector<Tensor> actions;
    for (int t = 0; t < horizon; ++t) {
      Pairs at;
      for (std::size_t e = 0; e < dataset.episodes; ++e) at.emplace_back(e, static_cast<std::size_t>(t));
      actions.push_back(dataset.action_batch(at));
    }
    Pairs targets;
    for (std::size_t e = 0; e < dataset.episodes; ++e) targets.emplace_back(e, static_cast<std::size_t>(horizon));
    const Tensor predicted = model.rollout(start_obs, actions);
    const Tensor references = encode_observations(model, dataset, targets);
    result.accuracy[horizon] = hits_rate(predicted, references);
  }
  return result;
}

double hits_at_1(const WorldModel& model, const TransitionDataset& dataset, int horizon) {
  const int h[] = {horizon};
  return hits_at_1(model, dataset, h).accuracy.at(horizon);
}

// ---------------------------------------------------------------------------

int ClusterReport::max_per_action() const {
  return per_action_count.empty() ? 0 : *std::max_element(per_action_count.begin(), per_action_count.end());
}

nlohmann::json ClusterReport::to_json() const {
  nlohmann::json j;
  j["marginal_count"] = marginal_count;
  j["per_action_count"] = per_action_count;
  j["action_weight"] = action_weight;
  j["per_action_frequency"] = per_action_frequency;
  j["empirical_mi_bits"] = empirical_mi;
  std::vector<std::vector<double>> c;
  for (std::size_t r = 0; r < centroids.rows(); ++r) {
    c.emplace_back(centroids.data().begin() + static_cast<std::ptrdiff_t>(r * centroids.cols()),
                   centroids.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * centroids.cols()));
  }
  j["centroids"] = c;
  return j;
}

ClusterReport cluster_deltas(const Tensor& deltas, std::span<const int> actions, int action_count, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("delta_clusters: epsilon must be positive");
  if (deltas.empty() || deltas.rows() == 0) throw std::invalid_argument("delta_clusters: empty dataset");
  if (deltas.rows() != actions.size()) throw ShapeError("delta_clusters: one action per delta row required");
  const std::size_t n = deltas.rows(), d = deltas.cols();
  const double scale = mean_row_norm(deltas);
  const double inv = scale > 0.0 ? 1.0 / scale : 1.0;

  std::vector<double> centroids;
  std::vector<std::size_t> assignment(n);
  std::size_t count = 0;
  std::vector<double> point(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) point[c] = deltas.at(i, c) * inv;
    std::size_t found = count;
    for (std::size_t k = 0; k < count && found == count; ++k) {
      double dist = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = point[c] - centroids[k * d + c];
        dist += diff * diff;
      }
      if (std::sqrt(dist) <= epsilon) found = k;
    }
    if (found == count) {
      centroids.insert(centroids.end(), point.begin(), point.end());
      ++count;
    }
    assignment[i] = found;
  }

  ClusterReport report;
  report.marginal_count = static_cast<int>(count);
  report.centroids = Tensor({count, d}, std::move(centroids));
  const auto A = static_cast<std::size_t>(action_count);
  report.per_action_frequency.assign(A, std::vector<double>(count, 0.0));
  report.action_weight.assign(A, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = static_cast<std::size_t>(actions[i]);
    if (a >= A) throw std::out_of_range("delta_clusters: action index out of range");
    report.per_action_frequency[a][assignment[i]] += 1.0;
    report.action_weight[a] += 1.0;
  }
  report.per_action_count.assign(A, 0);
  for (std::size_t a = 0; a < A; ++a) {
    for (double& f : report.per_action_frequency[a]) {
      if (f > 0.0) ++report.per_action_count[a];
      if (report.action_weight[a] > 0.0) f /= report.action_weight[a];
    }
    report.action_weight[a] /= static_cast<double>(n);
  }
  report.empirical_mi = empirical_mi(report);
  return report;
}

ClusterReport delta_clusters(const WorldModel& model, const TransitionDataset& dataset, double epsilon) {
  const Pairs at = all_transitions(dataset);
  if (at.empty()) throw std::invalid_argument("delta_clusters: empty dataset");
  const auto width = static_cast<std::size_t>(model.config().latent_dim);
  const Tensor deltas = map_transitions(dataset, at, width, [&](const Tensor& obs, const Tensor& act) {
    return model.predict_delta(model.encode(obs), act);
  });
  std::vector<int> actions;
  actions.reserve(at.size());
  for (const auto& [e, t] : at) actions.push_back(dataset.action_index(e, t));
  return cluster_deltas(deltas, actions, static_cast<int>(dataset.action_size()), epsilon);
}

double entropy_bits(std::span<const double> counts) {
  double total = 0.0;
  for (double c : counts) total += c;
  if (total <= 0.0) return 0.0;
  double h = 0.0;
  for (double c : counts) {
    if (c > 0.0) {
      const double p = c / total;
      h -= p * std::log2(p);
    }
  }
  return h;
}

double empirical_mi(const ClusterReport& report) {
  double mi = 0.0;
  for (std::size_t a = 0; a < report.action_weight.size(); ++a) {
    if (report.action_weight[a] > 0.0) mi += report.action_weight[a] * entropy_bits(report.per_action_frequency[a]);
  }
  return mi;
}

// ---------------------------------------------------------------------------

nlohmann::json NormDiagnostics::to_json() const {
  return {{"mean_query_norm", mean_query_norm},         {"mean_latent_norm", mean_latent_norm},
          {"query_weight_norm", query_weight_norm},     {"baseline_weight_norm", baseline_weight_norm},
          {"norm_ratio", norm_ratio},                   {"weight_ratio", weight_ratio},
          {"squared_norm_ratio", squared_norm_ratio}};
}

NormDiagnostics norm_diagnostics(const WorldModel& query_model, const WorldModel& baseline,
                                 const TransitionDataset& dataset) {
  if (!uses_query(query_model.variant())) {
    throw std::invalid_argument("norm_diagnostics: variant " + to_string(query_model.variant()) + " has no query code");
  }
  const Pairs at = all_transitions(dataset);
  const auto hq = static_cast<std::size_t>(query_model.config().query_dim);
  const Tensor h = map_transitions(dataset, at, hq, [&](const Tensor& obs, const Tensor& act) {
    return query_model.query(query_model.encode(obs), act);
  });
  const Tensor z = encode_observations(baseline, dataset, at);

  NormDiagnostics d;
  d.mean_query_norm = mean_row_norm(h);
  d.mean_latent_norm = mean_row_norm(z);
  d.query_weight_norm = frobenius_norm(query_model.dynamics_net().layers().front().weight);
  d.baseline_weight_norm = frobenius_norm(baseline.dynamics_net().layers().front().weight);
  d.norm_ratio = d.mean_latent_norm > 0.0 ? d.mean_query_norm / d.mean_latent_norm
                                          : std::numeric_limits<double>::infinity();
  d.weight_ratio = d.query_weight_norm / d.baseline_weight_norm;
  const double zz = mean_row_sqnorm(z);
  d.squared_norm_ratio = zz > 0.0 ? mean_row_sqnorm(h) / zz : std::numeric_limits<double>::infinity();
  return d;
}

// ---------------------------------------------------------------------------

Tensor RidgeModel::predict(const Tensor& x) const {
  Tensor out = matmul(x, weights);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) += intercept[c];
  return out;
}

RidgeModel ridge_fit(const Tensor& x, const Tensor& y, double alpha) {
  if (x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows()) {
    throw ShapeError("ridge_fit: design " + shape_string(x.shape()) + " and targets " + shape_string(y.shape()) +
                     " disagree");
  }
  if (!(alpha > 0.0)) throw std::invalid_argument("ridge_fit: alpha must be positive");
  using Matrix = Eigen::MatrixXd;
  const auto n = static_cast<Eigen::Index>(x.rows());
  const auto d = static_cast<Eigen::Index>(x.cols());
  const auto k = static_cast<Eigen::Index>(y.cols());
  Matrix X(n, d), Y(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) X(i, j) = x.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
    for (Eigen::Index j = 0; j < k; ++j) Y(i, j) = y.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
  }
  const Eigen::RowVectorXd x_mean = X.colwise().mean();
  const Eigen::RowVectorXd y_mean = Y.colwise().mean();
  X.rowwise() -= x_mean;
  Y.rowwise() -= y_mean;
  Matrix gram = X.transpose() * X;
  gram.diagonal().array() += alpha;
  const Matrix W = gram.ldlt().solve(X.transpose() * Y);
  const Eigen::RowVectorXd b = y_mean - x_mean * W;

  RidgeModel model{Tensor({x.cols(), y.cols()}), Tensor({1, y.cols()})};
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < k; ++j) model.weights.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = W(i, j);
  for (Eigen::Index j = 0; j < k; ++j) model.intercept[static_cast<std::size_t>(j)] = b(j);
  model.weights.require_finite("ridge_fit");
  return model;
}

double r_squared(const Tensor& y, const Tensor& predicted) {
  if (y.shape() != predicted.shape()) throw ShapeError("r_squared: shapes differ");
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t c = 0; c < y.cols(); ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < y.rows(); ++r) mean += y.at(r, c);
    mean /= static_cast<double>(y.rows());
    for (std::size_t r = 0; r < y.rows(); ++r) {
      ss_res += (y.at(r, c) - predicted.at(r, c)) * (y.at(r, c) - predicted.at(r, c));
      ss_tot += (y.at(r, c) - mean) * (y.at(r, c) - mean);
    }
  }
  if (ss_tot <= 0.0) return ss_res <= 0.0 ? 1.0 : 0.0;
  return 1.0 - ss_res / ss_tot;
}

double probe_r2(const Tensor& x, const Tensor& y, double alpha, double train_fraction) {
  const std::size_t n = x.rows();
  const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n)));
  if (n_train < 2 || n_train >= n) throw std::invalid_argument("probe_r2: too few samples for the split");
  std::vector<std::size_t> train_idx(n_train), test_idx(n - n_train);
  for (std::size_t i = 0; i < n; ++i) (i < n_train ? train_idx[i] : test_idx[i - n_train]) = i;
  const RidgeModel fit = ridge_fit(gather_rows(x, train_idx), gather_rows(y, train_idx), alpha);
  const Tensor y_test = gather_rows(y, test_idx);
  return r_squared(y_test, fit.predict(gather_rows(x, test_idx)));
}

namespace {

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

double ProbeReport::mean_latent() const { return mean_of(latent); }
double ProbeReport::mean_query() const { return mean_of(query); }
double ProbeReport::mean_query_conditioned() const { return mean_of(query_conditioned); }

nlohmann::json ProbeReport::to_json() const {
  nlohmann::json j = {{"latent", latent}, {"query", query}, {"query_conditioned", query_conditioned}};
  j["mean_latent"] = mean_latent();
  if (!query.empty()) {
    j["mean_query"] = mean_query();
    j["mean_query_conditioned"] = mean_query_conditioned();
  }
  return j;
}

ProbeReport decode_probe(const WorldModel& model, const TransitionDataset& dataset, double alpha) {
  const Pairs at = all_transitions(dataset);
  const Tensor z = encode_observations(model, dataset, at);
  const bool has_query = uses_query(model.variant());
  Tensor h;
  if (has_query) {
    const auto hq = static_cast<std::size_t>(model.config().query_dim);
    h = map_transitions(dataset, at, hq, [&](const Tensor& obs, const Tensor& act) {
      return model.query(model.encode(obs), act);
    });
  }

  ProbeReport report;
  const auto objects = static_cast<std::size_t>(dataset.config.present());
  for (std::size_t k = 0; k < objects; ++k) {
    Tensor y({at.size(), 2});
    std::vector<std::size_t> addressed;
    for (std::size_t i = 0; i < at.size(); ++i) {
      const Position p = dataset.factor(at[i].first, at[i].second, k);
      y.at(i, 0) = p.row;
      y.at(i, 1) = p.col;
      const int action = dataset.action_index(at[i].first, at[i].second);
      const bool moves_k = dataset.config.kind != EnvKind::shapes || static_cast<std::size_t>(action / 4) == k;
      if (moves_k) addressed.push_back(i);
    }
    report.latent.push_back(probe_r2(z, y, alpha));
    if (has_query) {
      report.query.push_back(probe_r2(h, y, alpha));
      report.query_conditioned.push_back(probe_r2(gather_rows(h, addressed), gather_rows(y, addressed), alpha));
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

CollapseReport collapse_metric(const WorldModel& model, const TransitionDataset& dataset) {
  Pairs at;
  for (std::size_t e = 0; e < dataset.episodes; ++e)
    for (std::size_t t = 0; t < dataset.steps(); ++t) at.emplace_back(e, t);
  const Tensor z = encode_observations(model, dataset, at);
  CollapseReport report;
  const double n = static_cast<double>(z.rows());
  for (std::size_t c = 0; c < z.cols(); ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < z.rows(); ++r) mean += z.at(r, c);
    mean /= n;
    double var = 0.0;
    for (std::size_t r = 0; r < z.rows(); ++r) var += (z.at(r, c) - mean) * (z.at(r, c) - mean);
    report.variance.push_back(var / n);
  }
  report.mean_variance = mean_of(report.variance);
  return report;
}

}  // namespace plsm
