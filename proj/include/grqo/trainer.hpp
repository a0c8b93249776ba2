#pragma once
// Training loops for the detector: plain supervised fine-tuning, and group
// relative query optimization (GRQO) on top of a supervised warmup, in which
// per-query rewards derived from matching costs are group-normalized into
// advantages and the objectness distribution is tethered to a frozen
// reference via a k3 KL penalty.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "grqo/evalkit.hpp"
#include "grqo/grqo.hpp"
#include "grqo/model.hpp"
#include "grqo/objective.hpp"
#include "grqo/rng.hpp"
#include "grqo/synthdata.hpp"
#include "grqo/tensor.hpp"

namespace grqo {

// ---------------------------------------------------------------------------
// Model configuration <-> JSON
// ---------------------------------------------------------------------------

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"image_size", c.image_size},
                        {"patch", c.patch},
                        {"channels", c.channels},
                        {"heads", c.heads},
                        {"enc_blocks", c.enc_blocks},
                        {"fusion_blocks", c.fusion_blocks},
                        {"dec_layers", c.dec_layers},
                        {"num_queries", c.num_queries},
                        {"ffn_mult", c.ffn_mult},
                        {"num_classes", c.num_classes},
                        {"cls_temperature", c.cls_temperature},
                        {"locality_scale", c.locality_scale},
                        {"locality_sigma_min", c.locality_sigma_min},
                        {"init_proposal_size", c.init_proposal_size}};
}

namespace detail {

// Strict field reader: every key in `j` must be consumed by a `take` call.
class StrictJson {
 public:
  StrictJson(const nlohmann::json& j, std::string where)
      : j_(j), where_(std::move(where)) {
    if (!j_.is_object())
      throw std::invalid_argument(where_ + ": expected a JSON object");
  }

  template <typename T>
  void take(const char* key, T& out) {
    auto it = j_.find(key);
    if (it != j_.end()) {
      try {
        out = it->get<T>();
      } catch (const nlohmann::json::exception&) {
        throw std::invalid_argument(where_ + ": bad value for '" + key + "'");
      }
      seen_.insert(key);
    }
  }

  const nlohmann::json* object(const char* key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key()))
        throw std::invalid_argument(where_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  detail::StrictJson r(j, "model config");
  r.take("image_size", c.image_size);
  r.take("patch", c.patch);
  r.take("channels", c.channels);
  r.take("heads", c.heads);
  r.take("enc_blocks", c.enc_blocks);
  r.take("fusion_blocks", c.fusion_blocks);
  r.take("dec_layers", c.dec_layers);
  r.take("num_queries", c.num_queries);
  r.take("ffn_mult", c.ffn_mult);
  r.take("num_classes", c.num_classes);
  r.take("cls_temperature", c.cls_temperature);
  r.take("locality_scale", c.locality_scale);
  r.take("locality_sigma_min", c.locality_sigma_min);
  r.take("init_proposal_size", c.init_proposal_size);
  r.finish();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::string mode = "sft";  // "sft" | "grqo"
  int epochs = 6;
  int sft_warmup_epochs = 1;  // grqo: supervised epochs before the RL phase
  int batch_size = 8;
  double lr = 3e-4;
  std::string lr_schedule = "cosine";  // "cosine" | "constant"
  double grad_clip = 1.0;              // per-tensor L2 cap; 0 disables
  int m_prompts = 1;                   // exemplars per class per batch

  double lambda_focal = 2.0;
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;
  double contrastive_weight = 1.0;

  double alpha = 1e3;   // reward term weight
  double beta = 0.04;   // KL penalty weight
  std::string grad_mode = "score-weighted";  // | "direct"
  bool layerwise_rewards = true;
  double floor_fraction = 0.5;               // objectness floor, fraction of uniform
  std::string reward_norm = "relative";      // | "absolute" (raw, unnormalized)
  int reference_refresh_epochs = 1;          // re-snapshot cadence; 0 = frozen for the run

  std::uint64_t seed = 1;
  int eval_prompts_per_class = 8;
  bool eval_each_epoch = true;

  ModelConfig model;

  CostWeights cost_weights() const { return CostWeights{lambda_focal, lambda_l1, lambda_giou}; }

  void validate() const {
    if (mode != "sft" && mode != "grqo")
      throw std::invalid_argument("TrainConfig: mode must be 'sft' or 'grqo'");
    if (lr_schedule != "cosine" && lr_schedule != "constant")
      throw std::invalid_argument("TrainConfig: lr_schedule must be 'cosine' or 'constant'");
    if (grad_mode != "score-weighted" && grad_mode != "direct")
      throw std::invalid_argument("TrainConfig: grad_mode must be 'score-weighted' or 'direct'");
    if (reward_norm != "relative" && reward_norm != "absolute")
      throw std::invalid_argument("TrainConfig: reward_norm must be 'relative' or 'absolute'");
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (lr <= 0) throw std::invalid_argument("TrainConfig: lr must be positive");
    if (grad_clip < 0) throw std::invalid_argument("TrainConfig: grad_clip must be >= 0");
    if (m_prompts < 1) throw std::invalid_argument("TrainConfig: m_prompts must be >= 1");
    if (alpha < 0 || beta < 0)
      throw std::invalid_argument("TrainConfig: alpha and beta must be >= 0");
    if (floor_fraction < 0 || floor_fraction > 1)
      throw std::invalid_argument("TrainConfig: floor_fraction must be in [0, 1]");
    if (sft_warmup_epochs < 0)
      throw std::invalid_argument("TrainConfig: sft_warmup_epochs must be >= 0");
    if (mode == "grqo" && sft_warmup_epochs >= epochs)
      throw std::invalid_argument("TrainConfig: grqo mode needs at least one epoch after warmup");
    if (reference_refresh_epochs < 0)
      throw std::invalid_argument("TrainConfig: reference_refresh_epochs must be >= 0");
    if (eval_prompts_per_class < 1)
      throw std::invalid_argument("TrainConfig: eval_prompts_per_class must be >= 1");
    if (contrastive_weight < 0)
      throw std::invalid_argument("TrainConfig: contrastive_weight must be >= 0");
    cost_weights().validate();
    model.validate();
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"mode", mode},
                          {"epochs", epochs},
                          {"sft_warmup_epochs", sft_warmup_epochs},
                          {"batch_size", batch_size},
                          {"lr", lr},
                          {"lr_schedule", lr_schedule},
                          {"grad_clip", grad_clip},
                          {"m_prompts", m_prompts},
                          {"lambda_focal", lambda_focal},
                          {"lambda_l1", lambda_l1},
                          {"lambda_giou", lambda_giou},
                          {"contrastive_weight", contrastive_weight},
                          {"alpha", alpha},
                          {"beta", beta},
                          {"grad_mode", grad_mode},
                          {"layerwise_rewards", layerwise_rewards},
                          {"floor_fraction", floor_fraction},
                          {"reward_norm", reward_norm},
                          {"reference_refresh_epochs", reference_refresh_epochs},
                          {"seed", seed},
                          {"eval_prompts_per_class", eval_prompts_per_class},
                          {"eval_each_epoch", eval_each_epoch},
                          {"model", model_config_to_json(model)}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    detail::StrictJson r(j, "train config");
    r.take("mode", c.mode);
    r.take("epochs", c.epochs);
    r.take("sft_warmup_epochs", c.sft_warmup_epochs);
    r.take("batch_size", c.batch_size);
    r.take("lr", c.lr);
    r.take("lr_schedule", c.lr_schedule);
    r.take("grad_clip", c.grad_clip);
    r.take("m_prompts", c.m_prompts);
    r.take("lambda_focal", c.lambda_focal);
    r.take("lambda_l1", c.lambda_l1);
    r.take("lambda_giou", c.lambda_giou);
    r.take("contrastive_weight", c.contrastive_weight);
    r.take("alpha", c.alpha);
    r.take("beta", c.beta);
    r.take("grad_mode", c.grad_mode);
    r.take("layerwise_rewards", c.layerwise_rewards);
    r.take("floor_fraction", c.floor_fraction);
    r.take("reward_norm", c.reward_norm);
    r.take("reference_refresh_epochs", c.reference_refresh_epochs);
    r.take("seed", c.seed);
    r.take("eval_prompts_per_class", c.eval_prompts_per_class);
    r.take("eval_each_epoch", c.eval_each_epoch);
    if (const auto* m = r.object("model")) c.model = model_config_from_json(*m);
    r.finish();
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Checkpoint container
//
// Layout: 5-byte magic "GRQO1", u32 format version, u64 JSON header length,
// the header (model config, caller metadata, and an ordered tensor
// directory), then the tensor payloads as row-major little-endian f32 in
// directory order. Written on a little-endian host; the loader verifies
// magic and version.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[5] = {'G', 'R', 'Q', 'O', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  nlohmann::json meta;  // caller-provided (step, epoch, config, ...)
  std::map<std::string, MatT<float>> tensors;
};

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelParams<float>& params,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json dir = nlohmann::json::array();
  for (const auto& [name, node] : params.tensors)
    dir.push_back({{"name", name}, {"rows", node->rows()}, {"cols", node->cols()}});
  nlohmann::json header{{"model", model_config_to_json(params.cfg)},
                        {"meta", meta},
                        {"tensors", dir}};
  const std::string hs = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint64_t>(os, hs.size());
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, node] : params.tensors) {
    const auto& m = node->value;
    os.write(reinterpret_cast<const char*>(m.d.data()),
             static_cast<std::streamsize>(m.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[sizeof(kCheckpointMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("load_checkpoint: unsupported format version " +
                             std::to_string(version));
  const auto hlen = detail::read_le<std::uint64_t>(is);
  std::string hs(hlen, '\0');
  is.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw std::runtime_error("load_checkpoint: truncated header in " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("load_checkpoint: malformed header: ") + e.what());
  }

  Checkpoint c;
  c.model = model_config_from_json(header.at("model"));
  c.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const int rows = entry.at("rows").get<int>();
    const int cols = entry.at("cols").get<int>();
    if (rows < 0 || cols < 0)
      throw std::runtime_error("load_checkpoint: bad tensor shape for " + name);
    MatT<float> m(rows, cols);
    is.read(reinterpret_cast<char*>(m.d.data()),
            static_cast<std::streamsize>(m.size() * sizeof(float)));
    if (!is) throw std::runtime_error("load_checkpoint: truncated payload at " + name);
    c.tensors.emplace(name, std::move(m));
  }
  return c;
}

// Field-by-field architecture comparison with a message naming the first
// mismatch, so a checkpoint trained at a different query count (etc.) is
// rejected loudly rather than misloaded.
inline void require_same_arch(const ModelConfig& have, const ModelConfig& want) {
  auto fail = [](const char* field, auto a, auto b) {
    std::ostringstream os;
    os << "checkpoint architecture mismatch: " << field << " is " << a
       << " but the requested config has " << b;
    throw std::runtime_error(os.str());
  };
  if (have.image_size != want.image_size) fail("image_size", have.image_size, want.image_size);
  if (have.patch != want.patch) fail("patch", have.patch, want.patch);
  if (have.channels != want.channels) fail("channels", have.channels, want.channels);
  if (have.heads != want.heads) fail("heads", have.heads, want.heads);
  if (have.enc_blocks != want.enc_blocks) fail("enc_blocks", have.enc_blocks, want.enc_blocks);
  if (have.fusion_blocks != want.fusion_blocks)
    fail("fusion_blocks", have.fusion_blocks, want.fusion_blocks);
  if (have.dec_layers != want.dec_layers) fail("dec_layers", have.dec_layers, want.dec_layers);
  if (have.num_queries != want.num_queries)
    fail("num_queries", have.num_queries, want.num_queries);
  if (have.ffn_mult != want.ffn_mult) fail("ffn_mult", have.ffn_mult, want.ffn_mult);
  if (have.num_classes != want.num_classes)
    fail("num_classes", have.num_classes, want.num_classes);
}

// Rebuilds live parameters from a checkpoint: fresh leaves initialized from
// the stored config, then every tensor overwritten from the payload. Any
// name or shape disagreement is an error.
inline ModelParams<float> checkpoint_params(const Checkpoint& c) {
  ModelParams<float> p = init_params<float>(c.model, 0);
  if (p.tensors.size() != c.tensors.size())
    throw std::runtime_error("checkpoint_params: tensor set does not match architecture");
  for (auto& [name, node] : p.tensors) {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end())
      throw std::runtime_error("checkpoint_params: missing tensor " + name);
    if (!node->value.same_shape(it->second))
      throw std::runtime_error("checkpoint_params: shape mismatch for " + name);
    node->value = it->second;
  }
  return p;
}

inline ModelParams<float> load_checkpoint_params(const std::string& path,
                                                 const ModelConfig& expected) {
  Checkpoint c = load_checkpoint(path);
  require_same_arch(c.model, expected);
  return checkpoint_params(c);
}

// CRC over names, shapes, and raw payload bytes; used to prove the frozen
// reference never moves during GRQO training.
inline std::uint32_t params_crc(const ModelParams<float>& params) {
  std::vector<std::uint8_t> buf;
  for (const auto& [name, node] : params.tensors) {
    buf.insert(buf.end(), name.begin(), name.end());
    const std::int32_t shape[2] = {node->rows(), node->cols()};
    const auto* sp = reinterpret_cast<const std::uint8_t*>(shape);
    buf.insert(buf.end(), sp, sp + sizeof(shape));
    const auto* dp = reinterpret_cast<const std::uint8_t*>(node->value.d.data());
    buf.insert(buf.end(), dp, dp + node->value.size() * sizeof(float));
  }
  return detail::crc32(buf.data(), buf.size());
}

// ---------------------------------------------------------------------------
// Optimizer: Adam with bias correction, per-tensor gradient norm clipping,
// and an optional cosine learning-rate schedule.
// ---------------------------------------------------------------------------

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long t = 0;
  std::map<std::string, std::vector<double>> m, v;
};

inline double lr_at(const TrainConfig& cfg, long step, long total_steps) {
  if (cfg.lr_schedule == "constant" || total_steps <= 0) return cfg.lr;
  const double frac = std::min(1.0, double(step) / double(total_steps));
  return cfg.lr * 0.5 * (1.0 + std::cos(frac * 3.14159265358979323846));
}

// Scales `g` in place so its L2 norm is at most max_norm (0 = no cap);
// returns the pre-clip norm.
inline double clip_grad_norm(MatT<float>& g, double max_norm) {
  double sq = 0.0;
  for (float x : g.d) sq += double(x) * double(x);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& x : g.d) x = static_cast<float>(double(x) * s);
  }
  return norm;
}

inline void adam_step(AdamState& st, ModelParams<float>& params, double lr,
                      double grad_clip) {
  ++st.t;
  const double bc1 = 1.0 - std::pow(st.beta1, double(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, double(st.t));
  for (auto& [name, node] : params.tensors) {
    MatT<float> g = node->grad.size() == node->value.size()
                        ? node->grad
                        : MatT<float>(node->rows(), node->cols());
    clip_grad_norm(g, grad_clip);
    auto& m = st.m[name];
    auto& v = st.v[name];
    if (m.empty()) m.assign(g.size(), 0.0);
    if (v.empty()) v.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = double(g.d[i]);
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * gi;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi;
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      node->value.d[i] =
          static_cast<float>(double(node->value.d[i]) - lr * mh / (std::sqrt(vh) + st.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

struct StepLog {
  int step = 0;   // global, 0-based
  int epoch = 0;  // 1-based
  std::string phase;  // "sft" | "warmup" | "grqo"
  double lr = 0.0;
  double loss = 0.0;         // optimized total
  double focal = 0.0;        // lambda-weighted detection terms, batch means
  double l1 = 0.0;
  double giou = 0.0;
  double contrastive = 0.0;  // weight applied
  double reward = 0.0;       // mean score term (pre-negation); 0 outside grqo
  double kl = 0.0;           // raw mean k3 KL over queries; 0 outside grqo
};

struct EpochLog {
  int epoch = 0;
  std::string phase;
  double mean_loss = 0.0;
  double mean_kl = 0.0;  // over this epoch's grqo steps (0 if none)
  bool evaluated = false;
  double val_id_ap50 = 0.0, val_id_map = 0.0;
  double val_ood_ap50 = 0.0, val_ood_map = 0.0;
};

struct TrainResult {
  TrainConfig cfg;
  std::vector<StepLog> steps;
  std::vector<EpochLog> epochs;
  ModelParams<float> params;      // final weights
  std::uint32_t reference_crc = 0;  // 0 when no reference was ever armed
  double best_val_id_ap50 = -1.0;
  int best_epoch = 0;
  std::string metrics_csv;  // full contents of metrics.csv
  std::string out_dir;      // empty when nothing was persisted
};

namespace detail {

inline std::string fmt_g(double v) {
  std::ostringstream os;
  os.precision(12);
  os << v;
  return os.str();
}

inline std::string metrics_csv_header() {
  return "kind,step,epoch,phase,lr,loss,focal,l1,giou,contrastive,reward,kl,"
         "val_id_ap50,val_id_map,val_ood_ap50,val_ood_map";
}

inline std::string step_csv_row(const StepLog& s) {
  std::ostringstream os;
  os << "step," << s.step << ',' << s.epoch << ',' << s.phase << ',' << fmt_g(s.lr) << ','
     << fmt_g(s.loss) << ',' << fmt_g(s.focal) << ',' << fmt_g(s.l1) << ',' << fmt_g(s.giou)
     << ',' << fmt_g(s.contrastive) << ',' << fmt_g(s.reward) << ',' << fmt_g(s.kl)
     << ",,,,";
  return os.str();
}

inline std::string epoch_csv_row(const EpochLog& e, int last_step) {
  std::ostringstream os;
  os << "epoch," << last_step << ',' << e.epoch << ',' << e.phase << ",," << fmt_g(e.mean_loss)
     << ",,,,,," << fmt_g(e.mean_kl) << ',';
  if (e.evaluated)
    os << fmt_g(e.val_id_ap50) << ',' << fmt_g(e.val_id_map) << ',' << fmt_g(e.val_ood_ap50)
       << ',' << fmt_g(e.val_ood_map);
  else
    os << ",,,";
  return os.str();
}

// Deep value copy with fresh leaves; shares nothing with the source graph.
inline ModelParams<float> clone_params(const ModelParams<float>& src) {
  ModelParams<float> dst;
  dst.cfg = src.cfg;
  for (const auto& [name, node] : src.tensors) dst.tensors.emplace(name, leaf(node->value));
  return dst;
}

struct ScenePieces {
  Ptr<float> loss;  // detection (+ grqo) terms for one scene
  double focal = 0, l1 = 0, giou = 0;  // lambda-weighted values
  double reward = 0, kl = 0;
  bool grqo = false;
};

// Builds the per-scene training objective. Detection terms are matched and
// applied at every decoder layer. In the GRQO phase the per-layer cost
// matrices are reused as the reward source, and the reference objectness row
// is computed from the frozen model on the same prompt draw, at the query
// slots the current model selected.
inline ScenePieces scene_loss(const ModelParams<float>& params,
                              const ModelParams<float>* reference, const Scene& scene,
                              const PromptSetT<float>& prompts,
                              const PromptSetT<float>* ref_prompts,
                              const TrainConfig& cfg, bool grqo_phase) {
  const CostWeights w = cfg.cost_weights();
  auto out = forward(params, scene, prompts);
  const int nq = cfg.model.num_queries;
  const int nl = cfg.model.dec_layers;
  const int kp = static_cast<int>(prompts.class_ids.size());

  ScenePieces sp;
  std::vector<CostMatrix> costs(static_cast<std::size_t>(nl));
  Ptr<float> det;
  for (int l = 0; l < nl; ++l) {
    const auto& logits = out.class_logits[static_cast<std::size_t>(l)];
    MatD probs(nq, kp);
    for (std::size_t i = 0; i < probs.d.size(); ++i)
      probs.d[i] = 1.0 / (1.0 + std::exp(-double(logits->value.d[i])));
    const auto boxes = out.layer_boxes(l);
    costs[static_cast<std::size_t>(l)] =
        cost_matrix(probs, boxes, scene.instances, prompts.class_ids, w);
    const auto assign = hungarian(costs[static_cast<std::size_t>(l)]);

    auto lf = scale(focal_loss(logits, assign, scene.instances, prompts.class_ids),
                    float(w.lambda_focal));
    auto l1 = scale(l1_loss(out.boxes[static_cast<std::size_t>(l)], assign, scene.instances),
                    float(w.lambda_l1));
    auto lg = scale(giou_loss(out.boxes[static_cast<std::size_t>(l)], assign, scene.instances),
                    float(w.lambda_giou));
    sp.focal += double(lf->value.d[0]);
    sp.l1 += double(l1->value.d[0]);
    sp.giou += double(lg->value.d[0]);
    auto lsum = add(add(lf, l1), lg);
    det = det ? add(det, lsum) : lsum;
  }
  sp.loss = det;
  if (!grqo_phase) return sp;

  // --- objectness distributions -------------------------------------------
  auto obj_row = transpose(out.objectness_logits);  // 1 x N_q
  auto probs_node = clamp_min(softmax_rows(obj_row), float(kObjectnessFloor));
  auto logp_node = log_softmax_rows(obj_row);

  MatT<float> ref_row(1, nq);
  {
    NoGradGuard ng;
    auto ref_scores = token_scores(*reference, scene, *ref_prompts);  // N_I x 1
    std::vector<double> sel(static_cast<std::size_t>(nq));
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < nq; ++i) {
      sel[static_cast<std::size_t>(i)] =
          double(ref_scores->value.d[static_cast<std::size_t>(out.indices[static_cast<std::size_t>(i)])]);
      mx = std::max(mx, sel[static_cast<std::size_t>(i)]);
    }
    double z = 0.0;
    for (auto& s : sel) {
      s = std::exp(s - mx);
      z += s;
    }
    for (int i = 0; i < nq; ++i)
      ref_row.d[static_cast<std::size_t>(i)] =
          static_cast<float>(std::max(sel[static_cast<std::size_t>(i)] / z, kObjectnessFloor));
  }
  auto kl_node = kl_k3_graph(probs_node, ref_row);

  // --- rewards -> advantages ------------------------------------------------
  std::vector<CostMatrix> reward_costs;
  if (cfg.layerwise_rewards)
    reward_costs = costs;
  else
    reward_costs.push_back(costs.back());

  std::vector<double> obj_probs(static_cast<std::size_t>(nq));
  for (int i = 0; i < nq; ++i)
    obj_probs[static_cast<std::size_t>(i)] = double(probs_node->value.d[static_cast<std::size_t>(i)]);

  const bool relative = cfg.reward_norm == "relative";
  std::vector<double> adv_values;
  std::vector<double> alpha;
  if (relative) {
    const auto g = make_reward_group(reward_costs, obj_probs, cfg.alpha, cfg.floor_fraction);
    adv_values = g.advantages;
    alpha = g.alpha;
  } else {
    // Raw layer-mean rewards, deliberately without group normalization.
    adv_values.assign(static_cast<std::size_t>(nq), 0.0);
    for (const auto& cm : reward_costs) {
      const auto r = query_rewards(cm);
      for (std::size_t i = 0; i < adv_values.size(); ++i)
        adv_values[i] += r[i] / double(reward_costs.size());
    }
    alpha = alpha_mask(obj_probs, cfg.alpha, cfg.floor_fraction);
  }

  Ptr<float> adv;
  if (cfg.grad_mode == "score-weighted") {
    MatT<float> am(1, nq);
    for (int i = 0; i < nq; ++i) am.d[static_cast<std::size_t>(i)] = float(adv_values[static_cast<std::size_t>(i)]);
    adv = constant(am);
  } else {
    // Direct mode: rewards stay differentiable; the group statistics are
    // frozen at their current values, mirroring group_advantages exactly.
    const std::vector<int> layer_ids = [&] {
      std::vector<int> v;
      if (cfg.layerwise_rewards)
        for (int l = 0; l < nl; ++l) v.push_back(l);
      else
        v.push_back(nl - 1);
      return v;
    }();
    Ptr<float> sum;
    for (std::size_t li = 0; li < layer_ids.size(); ++li) {
      const int l = layer_ids[li];
      auto dr = transpose(differentiable_rewards(
          sigmoid(out.class_logits[static_cast<std::size_t>(l)]),
          out.boxes[static_cast<std::size_t>(l)], scene.instances, prompts.class_ids, w));
      Ptr<float> a;
      if (relative) {
        const auto r = query_rewards(reward_costs[li]);
        double mu = 0.0;
        for (double x : r) mu += x;
        mu /= double(r.size());
        double var = 0.0;
        for (double x : r) var += (x - mu) * (x - mu);
        const double sigma = std::sqrt(var / double(r.size()));
        if (r.size() < 2 || sigma < 1e-6)
          a = scale(dr, 0.0f);  // degenerate group: advantages pinned at zero
        else
          a = scale(add_const(dr, float(-mu)), float(1.0 / sigma));
      } else {
        a = dr;
      }
      sum = sum ? add(sum, a) : a;
    }
    adv = scale(sum, float(1.0 / double(layer_ids.size())));
  }

  const GradMode gm = parse_grad_mode(cfg.grad_mode);
  auto gl = grqo_loss(adv, alpha, logp_node, kl_node, cfg.beta, gm);
  sp.loss = add(sp.loss, gl);
  sp.grqo = true;

  for (int i = 0; i < nq; ++i) {
    const double a = adv->value.d[static_cast<std::size_t>(i)];
    const double s = gm == GradMode::kScoreWeighted
                         ? alpha[static_cast<std::size_t>(i)] * a *
                               double(logp_node->value.d[static_cast<std::size_t>(i)])
                         : alpha[static_cast<std::size_t>(i)] * a;
    sp.reward += s / nq;
    sp.kl += double(kl_node->value.d[static_cast<std::size_t>(i)]) / nq;
  }
  return sp;
}

}  // namespace detail

// Initial weights for a run; exposed so callers can reproduce the starting
// point of train() for the same config.
inline ModelParams<float> initial_params(const TrainConfig& cfg) {
  return init_params<float>(cfg.model, mix_seed(cfg.seed, 0x696e6974ULL));
}

// ---------------------------------------------------------------------------
// train(): both modes share one loop. GRQO runs sft_warmup_epochs of
// supervised training, snapshots the model as the frozen reference, then
// adds the group-relative objective. An external reference checkpoint may be
// supplied instead (requires sft_warmup_epochs == 0).
//
// With out_dir set, writes config.json, metrics.csv, reference.ckpt (grqo),
// best.ckpt (by validation AP50 on the in-domain split), and last.ckpt.
// ---------------------------------------------------------------------------
inline TrainResult train(const TrainConfig& cfg, const Dataset& data,
                         const std::string& out_dir = "",
                         const Checkpoint* external_reference = nullptr) {
  cfg.validate();
  const int k = data.spec.num_classes();
  if (cfg.model.num_classes != k)
    throw std::invalid_argument("train: model num_classes != dataset classes");
  if (cfg.model.image_size != data.spec.image_size)
    throw std::invalid_argument("train: model image_size != dataset image size");
  if (cfg.mode == "grqo" && cfg.sft_warmup_epochs == 0 && !external_reference)
    throw std::invalid_argument(
        "train: grqo with sft_warmup_epochs == 0 needs a reference checkpoint");
  if (external_reference && cfg.sft_warmup_epochs != 0)
    throw std::invalid_argument(
        "train: choose warmup snapshot or external reference, not both");

  namespace fs = std::filesystem;
  if (!out_dir.empty()) fs::create_directories(out_dir);

  TrainResult res;
  res.cfg = cfg;
  res.out_dir = out_dir;
  res.params = initial_params(cfg);

  const PromptPool train_pool = build_pool(data.pool_train, k);
  const PromptPool val_id_pool = build_pool(data.pool_val_id, k);
  const PromptPool val_ood_pool = build_pool(data.pool_val_ood, k);

  ModelParams<float> reference;
  bool have_reference = false;
  auto arm_reference = [&](const ModelParams<float>& src) {
    reference = detail::clone_params(src);
    res.reference_crc = params_crc(reference);
    have_reference = true;
    if (!out_dir.empty())
      save_checkpoint(out_dir + "/reference.ckpt", reference,
                      {{"role", "frozen reference"}});
  };
  if (cfg.mode == "grqo" && external_reference) {
    require_same_arch(external_reference->model, cfg.model);
    arm_reference(checkpoint_params(*external_reference));
  }

  const int n_train = static_cast<int>(data.train.scenes.size());
  const long steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = steps_per_epoch * cfg.epochs;

  AdamState adam;
  std::string csv = detail::metrics_csv_header() + "\n";
  long step = 0;

  std::vector<int> order(static_cast<std::size_t>(n_train));
  for (int i = 0; i < n_train; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const bool grqo_phase = cfg.mode == "grqo" && (cfg.sft_warmup_epochs == 0
                                                       ? true
                                                       : epoch > cfg.sft_warmup_epochs);
    const std::string phase =
        cfg.mode == "sft" ? "sft" : (grqo_phase ? "grqo" : "warmup");
    if (grqo_phase && !have_reference)
      throw std::logic_error("train: grqo phase reached without a reference");

    Rng order_rng(mix_seed(cfg.seed, 0x6f726400ULL + std::uint64_t(epoch)));
    order_rng.shuffle(order);

    double loss_sum = 0.0, kl_sum = 0.0;
    long grqo_steps = 0;

    for (long b = 0; b < steps_per_epoch; ++b) {
      const int lo = static_cast<int>(b) * cfg.batch_size;
      const int hi = std::min(lo + cfg.batch_size, n_train);
      const int bs = hi - lo;

      std::set<int> cls;
      for (int i = lo; i < hi; ++i)
        for (const auto& inst : data.train.scenes[static_cast<std::size_t>(
                 order[static_cast<std::size_t>(i)])].instances)
          cls.insert(inst.class_id);
      const std::vector<int> batch_classes(cls.begin(), cls.end());

      Rng prompt_rng(mix_seed(cfg.seed, 0x70720000ULL + std::uint64_t(epoch) * 1000003ULL +
                                            std::uint64_t(b)));
      const PromptDraw draw =
          draw_prompts(data.pool_train, train_pool, batch_classes, cfg.m_prompts, prompt_rng);
      auto prompts = encode_prompt_draw(res.params, draw);
      // With both weights exactly zero the group-relative term is identically
      // zero; skip building it so the degenerate configuration IS supervised
      // training, gradient for gradient.
      const bool live_grqo = grqo_phase && !(cfg.alpha == 0.0 && cfg.beta == 0.0);
      PromptSetT<float> ref_prompts;
      if (live_grqo) {
        NoGradGuard ng;
        ref_prompts = encode_prompt_draw(reference, draw);
      }

      StepLog log;
      log.step = static_cast<int>(step);
      log.epoch = epoch;
      log.phase = phase;
      log.lr = lr_at(cfg, step, total_steps);

      Ptr<float> acc;
      for (int i = lo; i < hi; ++i) {
        const Scene& scene =
            data.train.scenes[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        auto sp = detail::scene_loss(res.params, have_reference ? &reference : nullptr,
                                     scene, prompts, live_grqo ? &ref_prompts : nullptr,
                                     cfg, live_grqo);
        acc = acc ? add(acc, sp.loss) : sp.loss;
        log.focal += sp.focal / bs;
        log.l1 += sp.l1 / bs;
        log.giou += sp.giou / bs;
        log.reward += sp.reward / bs;
        log.kl += sp.kl / bs;
      }
      auto batch_loss = scale(acc, float(1.0 / bs));
      if (cfg.contrastive_weight > 0) {
        auto con = scale(contrastive_loss(prompts.embeddings, res.params.at("anchors"),
                                          batch_classes, cfg.model.cls_temperature),
                         float(cfg.contrastive_weight));
        log.contrastive = double(con->value.d[0]);
        batch_loss = add(batch_loss, con);
      }
      log.loss = double(batch_loss->value.d[0]);
      if (!std::isfinite(log.loss))
        throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) +
                                 " (diverged)");

      for (auto& [name, node] : res.params.tensors) node->zero_grad();
      backward(batch_loss);
      adam_step(adam, res.params, log.lr, cfg.grad_clip);

      loss_sum += log.loss;
      if (grqo_phase) {
        kl_sum += log.kl;
        ++grqo_steps;
      }
      csv += detail::step_csv_row(log) + "\n";
      res.steps.push_back(std::move(log));
      ++step;
    }

    // Reference lifecycle at epoch boundaries.
    if (cfg.mode == "grqo" && !grqo_phase && epoch == cfg.sft_warmup_epochs)
      arm_reference(res.params);
    else if (cfg.mode == "grqo" && grqo_phase && cfg.reference_refresh_epochs > 0 &&
             epoch < cfg.epochs &&
             (epoch - cfg.sft_warmup_epochs) % cfg.reference_refresh_epochs == 0)
      arm_reference(res.params);

    if (have_reference) {
      // The reference must be bit-frozen and outside the gradient graph.
      if (params_crc(reference) != res.reference_crc)
        throw std::logic_error("train: reference weights drifted");
      for (const auto& [name, node] : reference.tensors)
        if (node->grad.size() != 0)
          throw std::logic_error("train: gradient reached reference tensor " + name);
    }

    EpochLog el;
    el.epoch = epoch;
    el.phase = phase;
    el.mean_loss = loss_sum / double(steps_per_epoch);
    el.mean_kl = grqo_steps ? kl_sum / double(grqo_steps) : 0.0;
    if (cfg.eval_each_epoch) {
      el.evaluated = true;
      auto rid = map_over(res.params, data.val_id, data.pool_val_id, val_id_pool,
                          cfg.eval_prompts_per_class, coco_thresholds(),
                          mix_seed(cfg.seed, 0xee00ULL + std::uint64_t(epoch)));
      auto rood = map_over(res.params, data.val_ood, data.pool_val_ood, val_ood_pool,
                           cfg.eval_prompts_per_class, coco_thresholds(),
                           mix_seed(cfg.seed, 0xef00ULL + std::uint64_t(epoch)));
      el.val_id_ap50 = rid.ap50;
      el.val_id_map = rid.map;
      el.val_ood_ap50 = rood.ap50;
      el.val_ood_map = rood.map;
      if (el.val_id_ap50 > res.best_val_id_ap50) {
        res.best_val_id_ap50 = el.val_id_ap50;
        res.best_epoch = epoch;
        if (!out_dir.empty())
          save_checkpoint(out_dir + "/best.ckpt", res.params,
                          {{"step", step},
                           {"epoch", epoch},
                           {"val_id_ap50", el.val_id_ap50},
                           {"train_config", cfg.to_json()}});
      }
    }
    csv += detail::epoch_csv_row(el, static_cast<int>(step) - 1) + "\n";
    res.epochs.push_back(std::move(el));
  }

  res.metrics_csv = std::move(csv);
  if (!out_dir.empty()) {
    {
      std::ofstream os(out_dir + "/config.json", std::ios::trunc);
      os << cfg.to_json().dump(2) << "\n";
    }
    {
      std::ofstream os(out_dir + "/metrics.csv", std::ios::trunc);
      os << res.metrics_csv;
    }
    save_checkpoint(out_dir + "/last.ckpt", res.params,
                    {{"step", step},
                     {"epoch", cfg.epochs},
                     {"train_config", cfg.to_json()}});
    if (cfg.eval_each_epoch && res.best_epoch == 0)
      save_checkpoint(out_dir + "/best.ckpt", res.params,
                      {{"step", step}, {"epoch", cfg.epochs}, {"train_config", cfg.to_json()}});
  }
  return res;
}

inline TrainResult train_sft(TrainConfig cfg, const Dataset& data,
                             const std::string& out_dir = "") {
  cfg.mode = "sft";
  return train(cfg, data, out_dir);
}

inline TrainResult train_grqo(TrainConfig cfg, const Dataset& data,
                              const std::string& out_dir = "",
                              const Checkpoint* reference = nullptr) {
  cfg.mode = "grqo";
  return train(cfg, data, out_dir, reference);
}

}  // namespace grqo
