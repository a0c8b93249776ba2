#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "grqo/objective.hpp"
#include "grqo/tensor.hpp"

namespace grqo {

// ---------------------------------------------------------------------------
// Query-level rewards and group-normalized advantages (plain doubles; these
// are treated as constants by the optimizer)
// ---------------------------------------------------------------------------

// r_i = -min_j C[i][j]: best achievable matching cost, negated.
inline std::vector<double> query_rewards(const CostMatrix& costs) {
  if (costs.n_gt() < 1)
    throw std::invalid_argument("query_rewards: no ground truth");
  std::vector<double> r(static_cast<std::size_t>(costs.n_query()));
  for (int i = 0; i < costs.n_query(); ++i) {
    double m = costs.values.at(i, 0);
    for (int j = 1; j < costs.n_gt(); ++j) m = std::min(m, costs.values.at(i, j));
    r[static_cast<std::size_t>(i)] = -m;
  }
  return r;
}

// (r - mean) / population-std; all zeros when the group is too small or the
// spread is below eps.
inline std::vector<double> group_advantages(const std::vector<double>& rewards,
                                            double eps = 1e-6) {
  const std::size_t n = rewards.size();
  if (n < 2) return std::vector<double>(n, 0.0);
  double mu = 0.0;
  for (double r : rewards) mu += r;
  mu /= double(n);
  double var = 0.0;
  for (double r : rewards) var += (r - mu) * (r - mu);
  var /= double(n);
  const double sigma = std::sqrt(var);
  if (sigma < eps) return std::vector<double>(n, 0.0);
  std::vector<double> a(n);
  for (std::size_t i = 0; i < n; ++i) a[i] = (rewards[i] - mu) / sigma;
  return a;
}

// Per-query mean over decoder layers of the group-normalized advantages.
inline std::vector<double> layerwise_advantages(const std::vector<CostMatrix>& per_layer,
                                                double eps = 1e-6) {
  if (per_layer.empty())
    throw std::invalid_argument("layerwise_advantages: no layers");
  const int nq = per_layer[0].n_query();
  for (const auto& cm : per_layer)
    if (cm.n_query() != nq || cm.n_gt() != per_layer[0].n_gt())
      throw std::invalid_argument("layerwise_advantages: layer shape mismatch");
  std::vector<double> acc(static_cast<std::size_t>(nq), 0.0);
  for (const auto& cm : per_layer) {
    const auto a = group_advantages(query_rewards(cm), eps);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += a[i];
  }
  for (auto& v : acc) v /= double(per_layer.size());
  return acc;
}

// Zeroes the reward weight for queries whose objectness probability falls
// below floor_fraction of uniform mass.
inline std::vector<double> alpha_mask(const std::vector<double>& objectness_probs,
                                      double base_alpha, double floor_fraction = 0.5) {
  const std::size_t n = objectness_probs.size();
  if (n == 0) throw std::invalid_argument("alpha_mask: empty distribution");
  const double threshold = floor_fraction / double(n);
  std::vector<double> m(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    if (objectness_probs[i] >= threshold) m[i] = base_alpha;
  return m;
}

struct RewardGroup {
  std::vector<double> rewards;
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> advantages;
  std::vector<double> alpha;
};

inline RewardGroup make_reward_group(const std::vector<CostMatrix>& per_layer_costs,
                                     const std::vector<double>& objectness_probs,
                                     double base_alpha, double floor_fraction = 0.5,
                                     double eps = 1e-6) {
  RewardGroup g;
  g.rewards = query_rewards(per_layer_costs.back());
  double mu = 0.0;
  for (double r : g.rewards) mu += r;
  g.mean = g.rewards.empty() ? 0.0 : mu / double(g.rewards.size());
  double var = 0.0;
  for (double r : g.rewards) var += (r - g.mean) * (r - g.mean);
  g.stddev = g.rewards.empty() ? 0.0 : std::sqrt(var / double(g.rewards.size()));
  g.advantages = layerwise_advantages(per_layer_costs, eps);
  g.alpha = alpha_mask(objectness_probs, base_alpha, floor_fraction);
  return g;
}

// ---------------------------------------------------------------------------
// Objectness distributions and the k3 KL estimator
// ---------------------------------------------------------------------------

struct ObjectnessPair {
  std::vector<double> current;    // O_theta over the selected token set
  std::vector<double> reference;  // O_ref over the same indices

  void validate() const {
    if (current.size() != reference.size() || current.empty())
      throw std::invalid_argument("ObjectnessPair: index sets differ");
    double sc = 0.0, sr = 0.0;
    for (std::size_t i = 0; i < current.size(); ++i) {
      if (!(current[i] > 0.0 && current[i] < 1.0) ||
          !(reference[i] > 0.0 && reference[i] < 1.0))
        throw std::invalid_argument("ObjectnessPair: probabilities must lie in (0,1)");
      sc += current[i];
      sr += reference[i];
    }
    if (std::abs(sc - 1.0) > 1e-6 || std::abs(sr - 1.0) > 1e-6)
      throw std::invalid_argument("ObjectnessPair: distributions must sum to 1");
  }
};

// Floor for objectness probabilities entering the KL term. The k3 estimator
// is a trust-region penalty: it is only meaningful for ratios near 1, and its
// gradient grows like ref/cur^2, so letting a 16-way softmax tail reach the
// generic log-guard clamp (1e-8) turns the penalty into a 1e6-scale gradient
// bomb that dominates every other term. A 1e-4 floor bounds the ratio at a
// few hundred while staying far below any realistic objectness mass.
inline constexpr double kObjectnessFloor = 1e-4;

// Trust-region half-width for the graph KL: the ratio is clamped to
// [1/kKlRatioClamp, kKlRatioClamp] before entering k3, so the penalty value
// saturates (~R - ln R - 1) and its gradient vanishes once the distributions
// have diverged beyond any range where a quadratic-ish pull makes sense —
// the same reasoning as clipped policy ratios in proximal policy updates.
// Within the region the estimator is untouched.
inline constexpr double kKlRatioClamp = 10.0;

// k3 estimator at one query: ratio - log(ratio) - 1, ratio = ref/cur.
inline double kl_k3(double current_prob, double reference_prob) {
  const double ratio = reference_prob / current_prob;
  return ratio - std::log(ratio) - 1.0;
}

inline std::vector<double> kl_k3(const ObjectnessPair& pair) {
  pair.validate();
  std::vector<double> out(pair.current.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = kl_k3(pair.current[i], pair.reference[i]);
  return out;
}

// Graph version: gradient flows through the current distribution only.
template <typename T>
Ptr<T> kl_k3_graph(const Ptr<T>& current_probs, const MatT<T>& reference_probs) {
  if (current_probs->rows() != reference_probs.rows ||
      current_probs->cols() != reference_probs.cols)
    throw std::invalid_argument("kl_k3_graph: shape mismatch");
  auto ref = constant(reference_probs);
  auto raw = div(ref, current_probs);
  auto lo = constant(MatT<T>::full(raw->rows(), raw->cols(), T(1.0 / kKlRatioClamp)));
  auto hi = constant(MatT<T>::full(raw->rows(), raw->cols(), T(kKlRatioClamp)));
  auto ratio = emin(emax(raw, lo), hi);
  return add_const(sub(ratio, log_(ratio)), T(-1));
}

// ---------------------------------------------------------------------------
// GRQO loss
// ---------------------------------------------------------------------------

enum class GradMode { kScoreWeighted, kDirect };

inline GradMode parse_grad_mode(const std::string& s) {
  if (s == "score-weighted") return GradMode::kScoreWeighted;
  if (s == "direct") return GradMode::kDirect;
  throw std::invalid_argument("unknown gradient mode: " + s);
}

inline std::string to_string(GradMode m) {
  return m == GradMode::kScoreWeighted ? "score-weighted" : "direct";
}

// L = -(1/N_q) sum_i (score_i - beta * KL_i).
//   score-weighted: score_i = alpha_i * A_i * log O_theta(q_i), A constant;
//   direct:         score_i = alpha_i * A_i, A differentiable through r_i
//                   (group statistics held constant by the caller).
// All tensor arguments must share one shape holding the N_q entries.
template <typename T>
Ptr<T> grqo_loss(const Ptr<T>& advantages, const std::vector<double>& alpha,
                 const Ptr<T>& log_objectness, const Ptr<T>& kl_terms, double beta,
                 GradMode mode) {
  const auto n = static_cast<std::size_t>(advantages->value.size());
  if (n != alpha.size() || !advantages->value.same_shape(log_objectness->value) ||
      !advantages->value.same_shape(kl_terms->value))
    throw std::invalid_argument("grqo_loss: length mismatch");

  MatT<T> am(advantages->rows(), advantages->cols());
  for (std::size_t i = 0; i < n; ++i) am.d[i] = T(alpha[i]);
  auto alpha_node = constant(am);

  Ptr<T> score;
  if (mode == GradMode::kScoreWeighted)
    score = mul(mul(alpha_node, advantages), log_objectness);
  else
    score = mul(alpha_node, advantages);
  auto term = sub(score, scale(kl_terms, T(beta)));
  return neg(mean_all(term));
}

// Differentiable per-query rewards r_i = -min_j C[i][j] for the direct
// gradient mode; the min is taken through a subgradient at the argmin.
template <typename T>
Ptr<T> differentiable_rewards(const Ptr<T>& class_probs, const Ptr<T>& pred_boxes,
                              const std::vector<Instance>& gts,
                              const std::vector<int>& prompt_classes,
                              const CostWeights& w = {}, const FocalParams& fp = {}) {
  w.validate();
  if (gts.empty()) throw std::invalid_argument("differentiable_rewards: no ground truth");
  const int nq = pred_boxes->rows();

  auto one = constant(MatT<T>::full(nq, 1, T(1)));
  std::vector<Ptr<T>> cols;
  for (const auto& gt : gts) {
    const auto it = std::find(prompt_classes.begin(), prompt_classes.end(), gt.class_id);
    if (it == prompt_classes.end())
      throw std::invalid_argument("differentiable_rewards: gt class not prompted");
    const int col = static_cast<int>(it - prompt_classes.begin());

    auto p = slice_cols(class_probs, col, col + 1);
    auto one_minus_p = sub(one, p);
    auto pos = scale(mul(powc(one_minus_p, T(fp.gamma_f)),
                         neg(log_(clamp_min(p, T(kProbClamp))))),
                     T(fp.alpha_f));
    auto negb = scale(mul(powc(p, T(fp.gamma_f)),
                          neg(log_(clamp_min(one_minus_p, T(kProbClamp))))),
                      T(1.0 - fp.alpha_f));
    auto cf = sub(pos, negb);

    auto gt_mat = constant(boxes_to_mat<T>(std::vector<Box>(static_cast<std::size_t>(nq), gt.box)));
    auto cl = row_sum(abs_(sub(pred_boxes, gt_mat)));
    auto cg = neg(giou_rows(pred_boxes, gt_mat));

    cols.push_back(add(add(scale(cf, T(w.lambda_focal)), scale(cl, T(w.lambda_l1))),
                       scale(cg, T(w.lambda_giou))));
  }
  auto costs = cols.size() == 1 ? cols[0] : concat_cols(cols);
  return row_max(neg(costs));  // -min over gt columns
}

}  // namespace grqo
