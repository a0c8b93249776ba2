#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "grqo/geometry.hpp"
#include "grqo/tensor.hpp"

namespace grqo {

// ---------------------------------------------------------------------------
// Matching costs (plain doubles; the matcher never needs gradients)
// ---------------------------------------------------------------------------

struct CostWeights {
  double lambda_focal = 2.0;
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;

  void validate() const {
    if (lambda_focal < 0 || lambda_l1 < 0 || lambda_giou < 0)
      throw std::invalid_argument("CostWeights: weights must be nonnegative");
    if (lambda_focal == 0 && lambda_l1 == 0 && lambda_giou == 0)
      throw std::invalid_argument("CostWeights: at least one weight must be positive");
  }
};

struct FocalParams {
  double alpha_f = 0.25;
  double gamma_f = 2.0;
};

inline constexpr double kProbClamp = 1e-8;

inline double clamp_prob(double p) {
  return std::min(std::max(p, kProbClamp), 1.0 - kProbClamp);
}

// Positive branch when is_target, negative branch otherwise.
inline double focal_cost(double p, bool is_target, const FocalParams& fp = {}) {
  p = clamp_prob(p);
  if (is_target)
    return fp.alpha_f * std::pow(1.0 - p, fp.gamma_f) * (-std::log(p));
  return (1.0 - fp.alpha_f) * std::pow(p, fp.gamma_f) * (-std::log(1.0 - p));
}

// Matching uses pos(p) - neg(p): the decrease in loss if this query became
// the target, relative to staying background.
inline double focal_match_cost(double p, const FocalParams& fp = {}) {
  return focal_cost(p, true, fp) - focal_cost(p, false, fp);
}

inline double l1_cost(const Box& a, const Box& b) {
  return std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) + std::abs(a.w - b.w) +
         std::abs(a.h - b.h);
}

inline double giou_cost(const Box& a, const Box& b) { return -giou(a, b); }

struct CostMatrix {
  MatD values;  // n_query rows, n_gt columns
  int n_query() const { return values.rows; }
  int n_gt() const { return values.cols; }
};

// Predicted probabilities are per prompted class; prompt_classes maps column
// index -> class id so ground-truth class ids can be looked up.
inline CostMatrix cost_matrix(const MatD& probs, const std::vector<Box>& boxes,
                              const std::vector<Instance>& gts,
                              const std::vector<int>& prompt_classes,
                              const CostWeights& w = {}, const FocalParams& fp = {}) {
  w.validate();
  if (gts.empty())
    throw std::invalid_argument("cost_matrix: no ground truth in image");
  if (probs.rows != static_cast<int>(boxes.size()))
    throw std::invalid_argument("cost_matrix: probs/boxes row mismatch");
  if (probs.cols != static_cast<int>(prompt_classes.size()))
    throw std::invalid_argument("cost_matrix: probs/prompt_classes col mismatch");

  std::vector<int> gt_col(gts.size());
  for (std::size_t j = 0; j < gts.size(); ++j) {
    auto it = std::find(prompt_classes.begin(), prompt_classes.end(), gts[j].class_id);
    if (it == prompt_classes.end())
      throw std::invalid_argument("cost_matrix: ground-truth class " +
                                  std::to_string(gts[j].class_id) + " not prompted");
    gt_col[j] = static_cast<int>(it - prompt_classes.begin());
  }

  CostMatrix cm;
  cm.values = MatD(probs.rows, static_cast<int>(gts.size()));
  for (int i = 0; i < probs.rows; ++i) {
    for (std::size_t j = 0; j < gts.size(); ++j) {
      const double cf = focal_match_cost(probs.at(i, gt_col[j]), fp);
      const double cl = l1_cost(boxes[static_cast<std::size_t>(i)], gts[j].box);
      const double cg = giou_cost(boxes[static_cast<std::size_t>(i)], gts[j].box);
      cm.values.at(i, static_cast<int>(j)) =
          w.lambda_focal * cf + w.lambda_l1 * cl + w.lambda_giou * cg;
    }
  }
  return cm;
}

// ---------------------------------------------------------------------------
// Hungarian assignment (Jonker-Volgenant shortest augmenting path)
// ---------------------------------------------------------------------------

struct Assignment {
  // (query, gt) pairs sorted by query index; every gt appears exactly once.
  std::vector<std::pair<int, int>> pairs;
};

namespace detail {

// Minimum-cost perfect matching of all rows into distinct columns;
// requires rows <= cols. Returns (total cost, col index per row).
inline std::pair<double, std::vector<int>> jv_solve(
    const MatD& cost, const std::vector<int>& row_ids, const std::vector<int>& col_ids) {
  const int n = static_cast<int>(row_ids.size());
  const int m = static_cast<int>(col_ids.size());
  if (n == 0) return {0.0, {}};
  const double kInf = std::numeric_limits<double>::infinity();

  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(m) + 1, 0.0);
  std::vector<int> match(static_cast<std::size_t>(m) + 1, 0);  // col -> row (1-based)
  std::vector<int> way(static_cast<std::size_t>(m) + 1, 0);

  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m) + 1, kInf);
    std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = match[static_cast<std::size_t>(j0)];
      double delta = kInf;
      int j1 = -1;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost.at(row_ids[static_cast<std::size_t>(i0 - 1)],
                                   col_ids[static_cast<std::size_t>(j - 1)]) -
                           u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  double total = 0.0;
  for (int j = 1; j <= m; ++j) {
    const int i = match[static_cast<std::size_t>(j)];
    if (i > 0) {
      row_to_col[static_cast<std::size_t>(i - 1)] = j - 1;
      total += cost.at(row_ids[static_cast<std::size_t>(i - 1)],
                       col_ids[static_cast<std::size_t>(j - 1)]);
    }
  }
  return {total, row_to_col};
}

}  // namespace detail

// Minimizes total cost; ties broken by the lexicographically smallest
// sequence of (query, gt) pairs listed in ascending query order.
inline Assignment hungarian(const CostMatrix& cm) {
  const int nq = cm.n_query();
  const int ng = cm.n_gt();
  if (ng > nq)
    throw std::invalid_argument("hungarian: more ground truths (" + std::to_string(ng) +
                                ") than queries (" + std::to_string(nq) + ")");
  for (double x : cm.values.d)
    if (!std::isfinite(x)) throw std::invalid_argument("hungarian: non-finite cost");

  // Transposed view: rows are ground truths (all must match), columns queries.
  MatD t(ng, nq);
  for (int i = 0; i < nq; ++i)
    for (int j = 0; j < ng; ++j) t.at(j, i) = cm.values.at(i, j);

  std::vector<int> all_gts(static_cast<std::size_t>(ng));
  for (int j = 0; j < ng; ++j) all_gts[static_cast<std::size_t>(j)] = j;
  std::vector<int> all_qs(static_cast<std::size_t>(nq));
  for (int i = 0; i < nq; ++i) all_qs[static_cast<std::size_t>(i)] = i;

  double target = detail::jv_solve(t, all_gts, all_qs).first;
  const double eps = 1e-9 * std::max(1.0, std::abs(target));

  // Walk queries in ascending order; give each the smallest gt index that
  // still admits an optimal completion by the later queries.
  Assignment out;
  std::vector<int> remaining = all_gts;
  for (int q = 0; q < nq && !remaining.empty(); ++q) {
    std::vector<int> later_qs;
    for (int i = q + 1; i < nq; ++i) later_qs.push_back(i);
    for (std::size_t jj = 0; jj < remaining.size(); ++jj) {
      if (static_cast<int>(remaining.size()) - 1 > static_cast<int>(later_qs.size()))
        break;  // every remaining query is needed; q must take some gt
      std::vector<int> rest = remaining;
      rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(jj));
      const double sub = detail::jv_solve(t, rest, later_qs).first;
      const double here = cm.values.at(q, remaining[jj]);
      if (here + sub <= target + eps) {
        out.pairs.emplace_back(q, remaining[jj]);
        target -= here;
        remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(jj));
        break;
      }
    }
  }
  if (!remaining.empty())
    throw std::logic_error("hungarian: refinement failed to place all ground truths");
  return out;
}

// ---------------------------------------------------------------------------
// Training losses (graph-valued)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Ptr<T> neg_log_clamped(const Ptr<T>& p) {
  return neg(log_(clamp_min(p, T(kProbClamp))));
}

}  // namespace detail

// Sigmoid focal classification loss over all query x prompted-class logits.
// Matched queries carry a one-hot target at their gt's class column; all
// other entries are background. Normalized by the number of ground truths.
template <typename T>
Ptr<T> focal_loss(const Ptr<T>& class_logits, const Assignment& assign,
                  const std::vector<Instance>& gts,
                  const std::vector<int>& prompt_classes, const FocalParams& fp = {}) {
  const int nq = class_logits->rows();
  const int pc = class_logits->cols();
  MatT<T> target = MatT<T>::zeros(nq, pc);
  for (const auto& [q, g] : assign.pairs) {
    const int cid = gts[static_cast<std::size_t>(g)].class_id;
    const auto it = std::find(prompt_classes.begin(), prompt_classes.end(), cid);
    if (it == prompt_classes.end())
      throw std::invalid_argument("focal_loss: matched class not prompted");
    target.at(q, static_cast<int>(it - prompt_classes.begin())) = T(1);
  }
  auto t = constant(target);
  MatT<T> ones_m = MatT<T>::full(nq, pc, T(1));
  auto one = constant(ones_m);
  auto not_t = sub(one, t);

  auto p = sigmoid(class_logits);
  auto one_minus_p = sub(one, p);
  auto pos = scale(mul(powc(one_minus_p, T(fp.gamma_f)), detail::neg_log_clamped(p)),
                   T(fp.alpha_f));
  auto negb = scale(mul(powc(p, T(fp.gamma_f)), detail::neg_log_clamped(one_minus_p)),
                    T(1.0 - fp.alpha_f));
  auto elems = add(mul(t, pos), mul(not_t, negb));
  const T inv = T(1) / T(std::max<std::size_t>(gts.size(), 1));
  return scale(sum_all(elems), inv);
}

namespace detail {

// Splits an n x 4 (cx, cy, w, h) node into corner columns.
template <typename T>
struct CornerCols {
  Ptr<T> x0, y0, x1, y1, area;
};

template <typename T>
CornerCols<T> corner_cols(const Ptr<T>& boxes) {
  auto cx = slice_cols(boxes, 0, 1);
  auto cy = slice_cols(boxes, 1, 2);
  auto w = slice_cols(boxes, 2, 3);
  auto h = slice_cols(boxes, 3, 4);
  auto hw = scale(w, T(0.5));
  auto hh = scale(h, T(0.5));
  CornerCols<T> c;
  c.x0 = sub(cx, hw);
  c.y0 = sub(cy, hh);
  c.x1 = add(cx, hw);
  c.y1 = add(cy, hh);
  c.area = mul(w, h);
  return c;
}

}  // namespace detail

// Differentiable per-row GIoU between two n x 4 center-format box matrices.
template <typename T>
Ptr<T> giou_rows(const Ptr<T>& pred, const Ptr<T>& gt) {
  if (pred->cols() != 4 || gt->cols() != 4 || pred->rows() != gt->rows())
    throw std::invalid_argument("giou_rows: want matching n x 4 inputs");
  auto a = detail::corner_cols(pred);
  auto b = detail::corner_cols(gt);
  auto zero = constant(MatT<T>::zeros(pred->rows(), 1));
  auto iw = emax(sub(emin(a.x1, b.x1), emax(a.x0, b.x0)), zero);
  auto ih = emax(sub(emin(a.y1, b.y1), emax(a.y0, b.y0)), zero);
  auto inter = mul(iw, ih);
  auto uni = sub(add(a.area, b.area), inter);
  auto hull = mul(sub(emax(a.x1, b.x1), emin(a.x0, b.x0)),
                  sub(emax(a.y1, b.y1), emin(a.y0, b.y0)));
  auto iou_v = div(inter, uni);
  return sub(iou_v, div(sub(hull, uni), hull));
}

template <typename T>
MatT<T> boxes_to_mat(const std::vector<Box>& boxes) {
  MatT<T> m(static_cast<int>(boxes.size()), 4);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    m.at(static_cast<int>(i), 0) = T(boxes[i].cx);
    m.at(static_cast<int>(i), 1) = T(boxes[i].cy);
    m.at(static_cast<int>(i), 2) = T(boxes[i].w);
    m.at(static_cast<int>(i), 3) = T(boxes[i].h);
  }
  return m;
}

namespace detail {

template <typename T>
std::pair<Ptr<T>, Ptr<T>> matched_rows(const Ptr<T>& pred_boxes, const Assignment& assign,
                                       const std::vector<Instance>& gts) {
  if (assign.pairs.empty())
    throw std::invalid_argument("box loss: empty assignment");
  std::vector<int> qidx;
  std::vector<Box> gt_boxes;
  for (const auto& [q, g] : assign.pairs) {
    qidx.push_back(q);
    gt_boxes.push_back(gts[static_cast<std::size_t>(g)].box);
  }
  return {gather_rows(pred_boxes, qidx), constant(boxes_to_mat<T>(gt_boxes))};
}

}  // namespace detail

template <typename T>
Ptr<T> l1_loss(const Ptr<T>& pred_boxes, const Assignment& assign,
               const std::vector<Instance>& gts) {
  auto [p, g] = detail::matched_rows(pred_boxes, assign, gts);
  const T inv = T(1) / T(gts.size());
  return scale(sum_all(abs_(sub(p, g))), inv);
}

template <typename T>
Ptr<T> giou_loss(const Ptr<T>& pred_boxes, const Assignment& assign,
                 const std::vector<Instance>& gts) {
  auto [p, g] = detail::matched_rows(pred_boxes, assign, gts);
  auto ones = constant(MatT<T>::full(p->rows(), 1, T(1)));
  const T inv = T(1) / T(gts.size());
  return scale(sum_all(sub(ones, giou_rows(p, g))), inv);
}

// Symmetric InfoNCE between per-class prompt embeddings and their class
// anchors, negatives drawn from the other classes present in the batch.
template <typename T>
Ptr<T> contrastive_loss(const Ptr<T>& prompt_embeddings, const Ptr<T>& anchor_table,
                        const std::vector<int>& present_classes, double temperature) {
  const int p = prompt_embeddings->rows();
  if (p == 0 || p != static_cast<int>(present_classes.size()))
    throw std::invalid_argument("contrastive_loss: one embedding per present class");
  auto anchors = gather_rows(anchor_table, present_classes);
  auto pn = l2_normalize_rows(prompt_embeddings);
  auto an = l2_normalize_rows(anchors);
  auto sim = scale(matmul(pn, transpose(an)), T(1.0 / temperature));

  MatT<T> eye = MatT<T>::zeros(p, p);
  for (int i = 0; i < p; ++i) eye.at(i, i) = T(1);
  auto diag = constant(eye);

  auto fwd = sum_all(mul(log_softmax_rows(sim), diag));
  auto bwd = sum_all(mul(log_softmax_rows(transpose(sim)), diag));
  return scale(add(fwd, bwd), T(-0.5 / p));
}

}  // namespace grqo
