#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grqo/geometry.hpp"
#include "grqo/model.hpp"
#include "grqo/rng.hpp"
#include "grqo/synthdata.hpp"

namespace grqo {

struct Detection {
  int class_id = 0;
  Box box{0.5, 0.5, 0.1, 0.1};
  double score = 0.0;
};

// Greedy one-to-one matching in descending score order (ties to the lower
// detection index): a detection is a true positive iff some unmatched ground
// truth of the same class overlaps it at IoU >= threshold; among candidates
// the highest-IoU ground truth is consumed. Returns flags in rank order;
// order_out (optional) receives the rank -> input-index permutation.
inline std::vector<bool> match_detections(const std::vector<Detection>& dets,
                                          const std::vector<Instance>& gts,
                                          double iou_threshold,
                                          std::vector<int>* order_out = nullptr) {
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return dets[static_cast<std::size_t>(a)].score > dets[static_cast<std::size_t>(b)].score;
  });

  std::vector<bool> gt_used(gts.size(), false);
  std::vector<bool> tp;
  tp.reserve(dets.size());
  for (int di : order) {
    const Detection& d = dets[static_cast<std::size_t>(di)];
    int best = -1;
    double best_iou = iou_threshold;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      if (gt_used[gi] || gts[gi].class_id != d.class_id) continue;
      const double v = iou(d.box, gts[gi].box);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(gi);
        best_iou = v;
      }
    }
    if (best >= 0) {
      gt_used[static_cast<std::size_t>(best)] = true;
      tp.push_back(true);
    } else {
      tp.push_back(false);
    }
  }
  if (order_out) *order_out = order;
  return tp;
}

// 101-point interpolated average precision over rank-ordered TP flags.
inline double average_precision(const std::vector<bool>& ranked_tp, int n_gt) {
  if (n_gt < 1) throw std::invalid_argument("average_precision: need >= 1 ground truth");
  std::vector<double> prec, rec;
  prec.reserve(ranked_tp.size());
  rec.reserve(ranked_tp.size());
  int tp = 0;
  for (std::size_t i = 0; i < ranked_tp.size(); ++i) {
    if (ranked_tp[i]) ++tp;
    prec.push_back(double(tp) / double(i + 1));
    rec.push_back(double(tp) / double(n_gt));
  }
  // Precision envelope: best precision at recall >= r.
  double ap = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = double(k) / 100.0;
    double best = 0.0;
    for (std::size_t i = 0; i < prec.size(); ++i)
      if (rec[i] >= r - 1e-12) best = std::max(best, prec[i]);
    ap += best;
  }
  return ap / 101.0;
}

struct ClassEval {
  int class_id = 0;
  double ap = 0.0;    // mean over thresholds
  double ap50 = 0.0;  // at IoU 0.5
};

struct EvalReport {
  std::string split;
  int prompts_per_class = 0;
  std::uint64_t seed = 0;
  std::vector<double> thresholds;
  std::vector<ClassEval> per_class;     // classes with >= 1 ground truth
  std::vector<int> excluded_classes;    // zero ground truth in the split
  double ap50 = 0.0;                    // mean over evaluated classes
  double map = 0.0;                     // mean over classes and thresholds
};

inline std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i <= 9; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

// Pools matches across scenes (COCO-style): matching is per scene, ranking
// is global by score (ties: earlier scene, then earlier detection).
inline EvalReport evaluate_detections(
    const std::vector<std::vector<Detection>>& dets_per_scene,
    const std::vector<std::vector<Instance>>& gts_per_scene, int num_classes,
    const std::vector<double>& thresholds = coco_thresholds()) {
  if (dets_per_scene.size() != gts_per_scene.size())
    throw std::invalid_argument("evaluate_detections: scene count mismatch");
  if (thresholds.empty()) throw std::invalid_argument("evaluate_detections: no thresholds");

  std::vector<int> gt_count(static_cast<std::size_t>(num_classes), 0);
  for (const auto& gts : gts_per_scene)
    for (const auto& g : gts) {
      if (g.class_id < 0 || g.class_id >= num_classes)
        throw std::invalid_argument("evaluate_detections: class id out of range");
      ++gt_count[static_cast<std::size_t>(g.class_id)];
    }

  EvalReport rep;
  rep.thresholds = thresholds;

  struct Entry {
    double score;
    int scene, det;
    bool tp;
  };

  for (int c = 0; c < num_classes; ++c) {
    if (gt_count[static_cast<std::size_t>(c)] == 0) {
      rep.excluded_classes.push_back(c);
      continue;
    }
    ClassEval ce;
    ce.class_id = c;
    double ap_sum = 0.0;
    for (double thr : thresholds) {
      std::vector<Entry> pooled;
      for (std::size_t s = 0; s < dets_per_scene.size(); ++s) {
        std::vector<Detection> cls_dets;
        std::vector<int> back;
        for (std::size_t d = 0; d < dets_per_scene[s].size(); ++d)
          if (dets_per_scene[s][d].class_id == c) {
            cls_dets.push_back(dets_per_scene[s][d]);
            back.push_back(static_cast<int>(d));
          }
        std::vector<int> order;
        auto tp = match_detections(cls_dets, gts_per_scene[s], thr, &order);
        for (std::size_t r = 0; r < tp.size(); ++r)
          pooled.push_back(Entry{cls_dets[static_cast<std::size_t>(order[r])].score,
                                 static_cast<int>(s),
                                 back[static_cast<std::size_t>(order[r])], tp[r]});
      }
      std::sort(pooled.begin(), pooled.end(), [](const Entry& a, const Entry& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.scene != b.scene) return a.scene < b.scene;
        return a.det < b.det;
      });
      std::vector<bool> flags;
      flags.reserve(pooled.size());
      for (const auto& e : pooled) flags.push_back(e.tp);
      const double ap = average_precision(flags, gt_count[static_cast<std::size_t>(c)]);
      ap_sum += ap;
      if (std::abs(thr - 0.5) < 1e-9) ce.ap50 = ap;
    }
    ce.ap = ap_sum / double(thresholds.size());
    rep.per_class.push_back(ce);
  }

  if (!rep.per_class.empty()) {
    for (const auto& ce : rep.per_class) {
      rep.ap50 += ce.ap50;
      rep.map += ce.ap;
    }
    rep.ap50 /= double(rep.per_class.size());
    rep.map /= double(rep.per_class.size());
  }
  return rep;
}

// All (query, class) pairs of the final decoder layer as detections, scored
// by the sigmoid of the class logit.
template <typename T>
std::vector<Detection> detect(const ModelParams<T>& params, const Scene& scene,
                              const PromptSetT<T>& prompt_set) {
  NoGradGuard ng;
  auto out = forward(params, scene, prompt_set);
  const auto& logits = out.class_logits.back()->value;
  const auto boxes = out.layer_boxes(static_cast<int>(out.boxes.size()) - 1);
  std::vector<Detection> dets;
  dets.reserve(static_cast<std::size_t>(logits.rows) * logits.cols);
  for (int q = 0; q < logits.rows; ++q)
    for (int k = 0; k < logits.cols; ++k) {
      const double s = 1.0 / (1.0 + std::exp(-double(logits.at(q, k))));
      dets.push_back(Detection{prompt_set.class_ids[static_cast<std::size_t>(k)],
                               boxes[static_cast<std::size_t>(q)], s});
    }
  return dets;
}

// Full-vocabulary evaluation of a split under the prompt-pool protocol:
// one seeded draw of exactly prompts_per_class pool entries per class forms
// the prompt ensemble (mean-pooled), reused for every scene.
template <typename T>
EvalReport map_over(const ModelParams<T>& params, const Split& target,
                    const Split& pool_split, const PromptPool& pool,
                    int prompts_per_class,
                    const std::vector<double>& thresholds = coco_thresholds(),
                    std::uint64_t seed = 0) {
  if (prompts_per_class < 1)
    throw std::invalid_argument("map_over: prompts_per_class must be >= 1");
  NoGradGuard ng;
  std::vector<int> classes(static_cast<std::size_t>(params.cfg.num_classes));
  std::iota(classes.begin(), classes.end(), 0);
  Rng rng(mix_seed(seed, 0xe7a1ULL));
  auto ps = sample_prompts(params, pool_split, pool, classes, prompts_per_class, rng);

  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Instance>> gts;
  dets.reserve(target.scenes.size());
  gts.reserve(target.scenes.size());
  for (const auto& scene : target.scenes) {
    dets.push_back(detect(params, scene, ps));
    gts.push_back(scene.instances);
  }
  EvalReport rep = evaluate_detections(dets, gts, params.cfg.num_classes, thresholds);
  rep.split = target.name;
  rep.prompts_per_class = prompts_per_class;
  rep.seed = seed;
  return rep;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  nlohmann::json per_class50 = nlohmann::json::object();
  for (const auto& ce : r.per_class) {
    per_class[std::to_string(ce.class_id)] = ce.ap;
    per_class50[std::to_string(ce.class_id)] = ce.ap50;
  }
  return nlohmann::json{{"split", r.split},
                        {"prompts_per_class", r.prompts_per_class},
                        {"seed", r.seed},
                        {"thresholds", r.thresholds},
                        {"ap50", r.ap50},
                        {"map", r.map},
                        {"per_class_ap", per_class},
                        {"per_class_ap50", per_class50},
                        {"excluded_classes", r.excluded_classes}};
}

inline std::string report_csv_header(int num_classes) {
  std::string h = "run_id,split,prompts_per_class,seed,ap50,map";
  for (int c = 0; c < num_classes; ++c) h += ",ap_c" + std::to_string(c);
  return h;
}

inline std::string report_csv_row(const EvalReport& r, const std::string& run_id,
                                  int num_classes) {
  std::ostringstream os;
  os.precision(10);
  os << run_id << ',' << r.split << ',' << r.prompts_per_class << ',' << r.seed << ','
     << r.ap50 << ',' << r.map;
  std::map<int, double> ap;
  for (const auto& ce : r.per_class) ap[ce.class_id] = ce.ap;
  for (int c = 0; c < num_classes; ++c) {
    os << ',';
    auto it = ap.find(c);
    if (it != ap.end()) os << it->second;
  }
  return os.str();
}

}  // namespace grqo
