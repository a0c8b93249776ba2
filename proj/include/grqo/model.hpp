#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "grqo/geometry.hpp"
#include "grqo/rng.hpp"
#include "grqo/synthdata.hpp"
#include "grqo/tensor.hpp"

namespace grqo {

// ---------------------------------------------------------------------------
// Architecture configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  int image_size = 64;
  int patch = 8;
  int channels = 64;  // C
  int heads = 4;
  int enc_blocks = 2;    // image encoder depth
  int fusion_blocks = 2; // bidirectional image/prompt fusion depth
  int dec_layers = 3;    // decoder depth (one box refinement per layer)
  int num_queries = 16;  // N_q
  int ffn_mult = 2;
  int num_classes = 12;  // class-anchor table size
  double cls_temperature = 0.07;
  // Decoder image cross-attention carries a Gaussian locality prior centered
  // on each query's current box; sigma scales with box size.
  double locality_scale = 0.75;
  double locality_sigma_min = 0.06;
  double init_proposal_size = 0.2;

  int grid() const { return image_size / patch; }
  int n_tokens() const { return grid() * grid(); }
  int head_dim() const { return channels / heads; }

  void validate() const {
    if (image_size % patch != 0) throw std::invalid_argument("config: patch must divide image");
    if (channels % heads != 0) throw std::invalid_argument("config: heads must divide channels");
    if (channels % 4 != 0) throw std::invalid_argument("config: channels must be divisible by 4");
    if (num_queries > n_tokens())
      throw std::invalid_argument("config: more queries than image tokens");
    if (dec_layers < 1 || enc_blocks < 0 || fusion_blocks < 0)
      throw std::invalid_argument("config: bad depths");
  }
};

// ---------------------------------------------------------------------------
// Parameters: named leaf tensors in a deterministically ordered map
// ---------------------------------------------------------------------------

template <typename T>
struct ModelParams {
  ModelConfig cfg;
  std::map<std::string, Ptr<T>> tensors;

  Ptr<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("missing parameter " + name);
    return it->second;
  }
  const Ptr<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("missing parameter " + name);
    return it->second;
  }

  std::size_t count_scalars() const {
    std::size_t n = 0;
    for (const auto& [k, v] : tensors) n += v->value.size();
    return n;
  }
};

namespace detail {

template <typename T>
void add_linear(ModelParams<T>& p, const std::string& prefix, int in, int out, Rng& rng) {
  p.tensors[prefix + ".w"] = leaf(xavier_init<T>(in, out, rng));
  p.tensors[prefix + ".b"] = leaf(MatT<T>::zeros(1, out));
}

template <typename T>
void add_attention(ModelParams<T>& p, const std::string& prefix, int c, Rng& rng) {
  add_linear(p, prefix + ".q", c, c, rng);
  add_linear(p, prefix + ".k", c, c, rng);
  add_linear(p, prefix + ".v", c, c, rng);
  add_linear(p, prefix + ".o", c, c, rng);
}

template <typename T>
void add_layernorm(ModelParams<T>& p, const std::string& prefix, int c) {
  p.tensors[prefix + ".g"] = leaf(MatT<T>::full(1, c, T(1)));
  p.tensors[prefix + ".b"] = leaf(MatT<T>::zeros(1, c));
}

template <typename T>
void add_ffn(ModelParams<T>& p, const std::string& prefix, int c, int mult, Rng& rng) {
  add_linear(p, prefix + ".in", c, c * mult, rng);
  add_linear(p, prefix + ".out", c * mult, c, rng);
}

}  // namespace detail

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams<T> p;
  p.cfg = cfg;
  Rng rng(mix_seed(seed, 0x6d6f64656cULL));
  const int c = cfg.channels;

  detail::add_linear(p, "patch_embed", cfg.patch * cfg.patch * 3, c, rng);

  for (int e = 0; e < cfg.enc_blocks; ++e) {
    const std::string b = "enc." + std::to_string(e);
    detail::add_layernorm(p, b + ".ln1", c);
    detail::add_attention(p, b + ".attn", c, rng);
    detail::add_layernorm(p, b + ".ln2", c);
    detail::add_ffn(p, b + ".ffn", c, cfg.ffn_mult, rng);
  }

  // Prompt encoder: box-coordinate projection, learnable content query,
  // in-box cross-attention, one self-attention + feed-forward block, and an
  // alignment projection.
  detail::add_linear(p, "prompt.box_proj", 4 * c, c, rng);
  p.tensors["prompt.content"] = leaf(normal_init<T>(1, c, 0.02, rng));
  detail::add_layernorm(p, "prompt.ln_q", c);
  detail::add_attention(p, "prompt.cross", c, rng);
  detail::add_layernorm(p, "prompt.ln_s", c);
  detail::add_attention(p, "prompt.self", c, rng);
  detail::add_layernorm(p, "prompt.ln_f", c);
  detail::add_ffn(p, "prompt.ffn", c, cfg.ffn_mult, rng);
  detail::add_linear(p, "prompt.align", c, c, rng);

  for (int f = 0; f < cfg.fusion_blocks; ++f) {
    const std::string b = "fuse." + std::to_string(f);
    detail::add_layernorm(p, b + ".img_ln1", c);
    detail::add_attention(p, b + ".img_self", c, rng);
    detail::add_layernorm(p, b + ".img_ln2", c);
    detail::add_attention(p, b + ".img_cross", c, rng);  // image attends to prompts
    detail::add_layernorm(p, b + ".pr_ln", c);
    detail::add_attention(p, b + ".pr_cross", c, rng);   // prompts attend to image
    detail::add_layernorm(p, b + ".img_ln3", c);
    detail::add_ffn(p, b + ".img_ffn", c, cfg.ffn_mult, rng);
    detail::add_layernorm(p, b + ".pr_ln2", c);
    detail::add_ffn(p, b + ".pr_ffn", c, cfg.ffn_mult, rng);
  }

  p.tensors["queries.content"] = leaf(normal_init<T>(cfg.num_queries, c, 0.02, rng));
  const double s = cfg.init_proposal_size;
  p.tensors["queries.proposal_size"] =
      leaf(MatT<T>::full(1, 2, T(std::log(s / (1.0 - s)))));
  detail::add_linear(p, "queries.box_pos", 4 * c, c, rng);

  for (int l = 0; l < cfg.dec_layers; ++l) {
    const std::string b = "dec." + std::to_string(l);
    detail::add_layernorm(p, b + ".ln1", c);
    detail::add_attention(p, b + ".self", c, rng);
    detail::add_layernorm(p, b + ".ln2", c);
    detail::add_attention(p, b + ".img_cross", c, rng);
    detail::add_layernorm(p, b + ".ln3", c);
    detail::add_attention(p, b + ".pr_cross", c, rng);
    detail::add_layernorm(p, b + ".ln4", c);
    detail::add_ffn(p, b + ".ffn", c, cfg.ffn_mult, rng);
    detail::add_layernorm(p, b + ".ln_box", c);
    // Zero-initialized refinement head: layer boxes start at the proposals.
    p.tensors[b + ".offset.w"] = leaf(MatT<T>::zeros(c, 4));
    p.tensors[b + ".offset.b"] = leaf(MatT<T>::zeros(1, 4));
  }

  p.tensors["anchors"] = leaf(normal_init<T>(cfg.num_classes, c, 1.0 / std::sqrt(double(c)), rng));
  return p;
}

// ---------------------------------------------------------------------------
// Shared building blocks
// ---------------------------------------------------------------------------

namespace detail {

// Fixed sine/cosine features of a scalar coordinate, dims values.
template <typename T>
void sincos_into(double x, int dims, T* out) {
  const int half = dims / 2;
  for (int k = 0; k < half; ++k) {
    const double freq = 2.0 * 3.14159265358979323846 /
                        std::pow(10000.0, double(2 * k) / double(dims));
    out[2 * k] = T(std::sin(x * freq));
    out[2 * k + 1] = T(std::cos(x * freq));
  }
}

template <typename T>
MatT<T> grid_positions(const ModelConfig& cfg) {
  const int g = cfg.grid(), c = cfg.channels;
  MatT<T> pos(g * g, c);
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      T* row = &pos.at(gy * g + gx, 0);
      sincos_into((gx + 0.5) / g, c / 2, row);
      sincos_into((gy + 0.5) / g, c / 2, row + c / 2);
    }
  return pos;
}

// Box (cx, cy, w, h) -> 4C sine/cosine features.
template <typename T>
MatT<T> box_features(const std::vector<Box>& boxes, int c) {
  MatT<T> f(static_cast<int>(boxes.size()), 4 * c);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    T* row = &f.at(static_cast<int>(i), 0);
    sincos_into(boxes[i].cx, c, row);
    sincos_into(boxes[i].cy, c, row + c);
    sincos_into(boxes[i].w, c, row + 2 * c);
    sincos_into(boxes[i].h, c, row + 3 * c);
  }
  return f;
}

template <typename T>
Ptr<T> linear(const ModelParams<T>& p, const std::string& prefix, const Ptr<T>& x) {
  return add_rowvec(matmul(x, p.at(prefix + ".w")), p.at(prefix + ".b"));
}

template <typename T>
Ptr<T> layernorm(const ModelParams<T>& p, const std::string& prefix, const Ptr<T>& x) {
  return layer_norm_rows(x, p.at(prefix + ".g"), p.at(prefix + ".b"));
}

template <typename T>
Ptr<T> ffn(const ModelParams<T>& p, const std::string& prefix, const Ptr<T>& x) {
  return linear(p, prefix + ".out", gelu(linear(p, prefix + ".in", x)));
}

// Multi-head attention. q_in: n x C, kv_in: m x C. The optional bias (n x m)
// is added to every head's pre-softmax scores and treated as a constant.
template <typename T>
Ptr<T> attention(const ModelParams<T>& p, const std::string& prefix, const Ptr<T>& q_in,
                 const Ptr<T>& kv_in, const MatT<T>* bias = nullptr) {
  const int c = p.cfg.channels, h = p.cfg.heads, dh = p.cfg.head_dim();
  auto q = linear(p, prefix + ".q", q_in);
  auto k = linear(p, prefix + ".k", kv_in);
  auto v = linear(p, prefix + ".v", kv_in);
  const T inv_sqrt = T(1.0 / std::sqrt(double(dh)));
  std::vector<Ptr<T>> heads;
  heads.reserve(static_cast<std::size_t>(h));
  for (int i = 0; i < h; ++i) {
    auto qh = slice_cols(q, i * dh, (i + 1) * dh);
    auto kh = slice_cols(k, i * dh, (i + 1) * dh);
    auto vh = slice_cols(v, i * dh, (i + 1) * dh);
    auto scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    heads.push_back(matmul(softmax_rows(scores, bias), vh));
  }
  auto merged = h == 1 ? heads[0] : concat_cols(heads);
  return linear(p, prefix + ".o", merged);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Image encoder
// ---------------------------------------------------------------------------

template <typename T>
struct FeatureTokens {
  Ptr<T> tokens;                                 // N_I x C
  std::vector<std::array<double, 2>> positions;  // normalized grid centers
};

inline std::vector<std::array<double, 2>> token_centers(const ModelConfig& cfg) {
  const int g = cfg.grid();
  std::vector<std::array<double, 2>> out;
  out.reserve(static_cast<std::size_t>(g) * g);
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) out.push_back({(gx + 0.5) / g, (gy + 0.5) / g});
  return out;
}

namespace detail {

// Patch embedding + fixed positions. Each token depends only on its own
// patch's pixels, which the prompt encoder's locality mask relies on.
template <typename T>
Ptr<T> patch_tokens(const ModelParams<T>& p, const Scene& scene) {
  const ModelConfig& cfg = p.cfg;
  if (scene.width != cfg.image_size || scene.height != cfg.image_size ||
      scene.pixels.size() !=
          static_cast<std::size_t>(cfg.image_size) * cfg.image_size * 3)
    throw std::invalid_argument("encode_image: wrong image shape");

  const int g = cfg.grid(), ps = cfg.patch;
  MatT<T> patches(g * g, ps * ps * 3);
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      T* row = &patches.at(gy * g + gx, 0);
      int k = 0;
      for (int y = 0; y < ps; ++y)
        for (int x = 0; x < ps; ++x) {
          const std::size_t o =
              ((static_cast<std::size_t>(gy * ps + y)) * cfg.image_size + (gx * ps + x)) * 3;
          row[k++] = T(scene.pixels[o]);
          row[k++] = T(scene.pixels[o + 1]);
          row[k++] = T(scene.pixels[o + 2]);
        }
    }
  return add(linear(p, "patch_embed", constant(std::move(patches))),
             constant(grid_positions<T>(cfg)));
}

}  // namespace detail

template <typename T>
FeatureTokens<T> encode_image(const ModelParams<T>& p, const Scene& scene) {
  const ModelConfig& cfg = p.cfg;
  auto tokens = detail::patch_tokens(p, scene);
  for (int e = 0; e < cfg.enc_blocks; ++e) {
    const std::string b = "enc." + std::to_string(e);
    auto x = detail::layernorm(p, b + ".ln1", tokens);
    tokens = add(tokens, detail::attention(p, b + ".attn", x, x));
    tokens = add(tokens, detail::ffn(p, b + ".ffn", detail::layernorm(p, b + ".ln2", tokens)));
  }
  return FeatureTokens<T>{tokens, token_centers(cfg)};
}

// ---------------------------------------------------------------------------
// Visual prompt encoding
// ---------------------------------------------------------------------------

struct PromptRequest {
  const Scene* scene = nullptr;
  Box box{0.5, 0.5, 0.1, 0.1};
};

// One embedding per request: learnable content + box-coordinate features
// cross-attend over the reference image restricted to in-box token centers,
// then one self-attention/feed-forward block over the whole prompt set, an
// alignment projection, and row normalization. The reference tokens come
// straight from the patch embedding, so each is a function of its own patch
// only and the in-box mask fully isolates the prompt from outside pixels.
template <typename T>
Ptr<T> encode_prompts(const ModelParams<T>& p, const std::vector<PromptRequest>& reqs) {
  if (reqs.empty()) throw std::invalid_argument("encode_prompts: empty request");
  const ModelConfig& cfg = p.cfg;
  const int g = cfg.grid();

  std::vector<Box> boxes;
  boxes.reserve(reqs.size());
  for (const auto& r : reqs) boxes.push_back(r.box);
  auto box_pos = detail::linear(p, "prompt.box_proj",
                                constant(detail::box_features<T>(boxes, cfg.channels)));

  // Reference scenes are often shared between requests; embed each once.
  std::vector<Ptr<T>> scene_tokens(reqs.size());
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    scene_tokens[i] = nullptr;
    for (std::size_t j = 0; j < i; ++j)
      if (reqs[j].scene == reqs[i].scene) {
        scene_tokens[i] = scene_tokens[j];
        break;
      }
    if (!scene_tokens[i]) scene_tokens[i] = detail::patch_tokens(p, *reqs[i].scene);
  }

  std::vector<Ptr<T>> rows;
  rows.reserve(reqs.size());
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    const CornerBox cb = to_corners(reqs[i].box);
    MatT<T> mask(1, g * g);
    bool any = false;
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx) {
        const double tx = (gx + 0.5) / g, ty = (gy + 0.5) / g;
        const bool in = tx >= cb.x0 && tx <= cb.x1 && ty >= cb.y0 && ty <= cb.y1;
        mask.at(0, gy * g + gx) = in ? T(0) : T(-1e9);
        any = any || in;
      }
    if (!any) throw std::invalid_argument("prompt box below resolution");

    auto q = add(p.at("prompt.content"), slice_rows(box_pos, static_cast<int>(i), static_cast<int>(i) + 1));
    auto attended = detail::attention(p, "prompt.cross", detail::layernorm(p, "prompt.ln_q", q),
                                      scene_tokens[i], &mask);
    rows.push_back(add(q, attended));
  }

  auto set = rows.size() == 1 ? rows[0] : concat_rows(rows);
  auto s = detail::layernorm(p, "prompt.ln_s", set);
  set = add(set, detail::attention(p, "prompt.self", s, s));
  set = add(set, detail::ffn(p, "prompt.ffn", detail::layernorm(p, "prompt.ln_f", set)));
  return l2_normalize_rows(detail::linear(p, "prompt.align", set));
}

template <typename T>
struct PromptSetT {
  std::vector<int> class_ids;
  Ptr<T> embeddings;  // K_present x C, unit-norm rows
};

// A resolved prompt draw: which pool exemplars represent which class. Pure
// function of the rng, so the same draw can be encoded by several models
// (e.g. the current and the frozen reference).
struct PromptDraw {
  std::vector<int> class_ids;
  std::vector<PromptRequest> requests;  // class_ids.size() * m entries
  int m = 1;
};

inline PromptDraw draw_prompts(const Split& pool_split, const PromptPool& pool,
                               const std::vector<int>& class_ids, int m, Rng& rng) {
  if (class_ids.empty()) throw std::invalid_argument("sample_prompts: no classes");
  if (m < 1) throw std::invalid_argument("sample_prompts: M must be >= 1");
  PromptDraw d;
  d.class_ids = class_ids;
  d.m = m;
  for (int cid : class_ids) {
    if (cid < 0 || cid >= static_cast<int>(pool.per_class.size()) ||
        pool.per_class[static_cast<std::size_t>(cid)].empty())
      throw std::invalid_argument("sample_prompts: class " + std::to_string(cid) +
                                  " absent from pool");
    const auto& entries = pool.per_class[static_cast<std::size_t>(cid)];
    const auto picks = rng.sample_indices(static_cast<int>(entries.size()), m);
    for (auto idx : picks) {
      const PromptRef& ref = entries[static_cast<std::size_t>(idx)];
      d.requests.push_back(PromptRequest{
          &pool_split.scenes[static_cast<std::size_t>(ref.scene_index)], ref.box});
    }
  }
  return d;
}

// Encodes a draw as one prompt set, mean-pools per class, re-normalizes.
template <typename T>
PromptSetT<T> encode_prompt_draw(const ModelParams<T>& p, const PromptDraw& d) {
  auto raw = encode_prompts(p, d.requests);  // (K_present * m) x C

  const int k = static_cast<int>(d.class_ids.size());
  PromptSetT<T> out;
  out.class_ids = d.class_ids;
  if (d.m == 1) {
    out.embeddings = raw;
    return out;
  }
  MatT<T> avg = MatT<T>::zeros(k, k * d.m);
  for (int c = 0; c < k; ++c)
    for (int j = 0; j < d.m; ++j) avg.at(c, c * d.m + j) = T(1.0 / d.m);
  out.embeddings = l2_normalize_rows(matmul(constant(std::move(avg)), raw));
  return out;
}

// Draws M exemplars per class from the pool (without replacement where the
// pool allows) and encodes them.
template <typename T>
PromptSetT<T> sample_prompts(const ModelParams<T>& p, const Split& pool_split,
                             const PromptPool& pool, const std::vector<int>& class_ids,
                             int m, Rng& rng) {
  return encode_prompt_draw(p, draw_prompts(pool_split, pool, class_ids, m, rng));
}

// ---------------------------------------------------------------------------
// Fusion, query selection, decoding
// ---------------------------------------------------------------------------

template <typename T>
std::pair<Ptr<T>, Ptr<T>> fuse(const ModelParams<T>& p, Ptr<T> image, Ptr<T> prompts) {
  for (int f = 0; f < p.cfg.fusion_blocks; ++f) {
    const std::string b = "fuse." + std::to_string(f);
    auto xi = detail::layernorm(p, b + ".img_ln1", image);
    image = add(image, detail::attention(p, b + ".img_self", xi, xi));
    image = add(image, detail::attention(p, b + ".img_cross",
                                          detail::layernorm(p, b + ".img_ln2", image), prompts));
    prompts = add(prompts, detail::attention(p, b + ".pr_cross",
                                             detail::layernorm(p, b + ".pr_ln", prompts), image));
    image = add(image, detail::ffn(p, b + ".img_ffn", detail::layernorm(p, b + ".img_ln3", image)));
    prompts = add(prompts, detail::ffn(p, b + ".pr_ffn", detail::layernorm(p, b + ".pr_ln2", prompts)));
  }
  return {image, prompts};
}

template <typename T>
struct Selection {
  std::vector<int> indices;   // selected token ids, descending score order
  Ptr<T> objectness_logits;   // N_q x 1, the raw selected scores
  Ptr<T> proposal_logits;     // N_q x 4 in logit space
  std::vector<Box> proposals; // sigmoid of the above, as plain boxes
};

// Token score: max over the prompt axis of I' v'^T. Top-N_q tokens win,
// ties to the lower token index; proposal boxes take the token's grid center
// and a learnable global initial size.
template <typename T>
Selection<T> select_queries(const ModelParams<T>& p, const Ptr<T>& image,
                            const Ptr<T>& prompts, int n_q) {
  if (n_q > image->rows())
    throw std::invalid_argument("select_queries: more queries than tokens");
  auto scores = row_max(matmul(image, transpose(prompts)));  // N_I x 1

  std::vector<int> order(static_cast<std::size_t>(image->rows()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores->value.at(a, 0) > scores->value.at(b, 0);
  });
  order.resize(static_cast<std::size_t>(n_q));

  Selection<T> sel;
  sel.indices = order;
  sel.objectness_logits = gather_rows(scores, order);

  const int g = p.cfg.grid();
  auto logit = [](double x) { return std::log(x / (1.0 - x)); };
  MatT<T> centers(n_q, 2);
  for (int i = 0; i < n_q; ++i) {
    const int t = order[static_cast<std::size_t>(i)];
    centers.at(i, 0) = T(logit(((t % g) + 0.5) / g));
    centers.at(i, 1) = T(logit(((t / g) + 0.5) / g));
  }
  sel.proposal_logits =
      concat_cols<T>({constant(std::move(centers)), tile_rows(p.at("queries.proposal_size"), n_q)});

  for (int i = 0; i < n_q; ++i) {
    auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    sel.proposals.emplace_back(sig(double(sel.proposal_logits->value.at(i, 0))),
                               sig(double(sel.proposal_logits->value.at(i, 1))),
                               std::max(sig(double(sel.proposal_logits->value.at(i, 2))), 1.1e-6),
                               std::max(sig(double(sel.proposal_logits->value.at(i, 3))), 1.1e-6));
  }
  return sel;
}

// Cosine-similarity class logits against the fused prompt set.
template <typename T>
Ptr<T> classify(const Ptr<T>& states, const Ptr<T>& prompts, double temperature) {
  return scale(matmul(l2_normalize_rows(states), transpose(l2_normalize_rows(prompts))),
               T(1.0 / temperature));
}

template <typename T>
struct QueryOutput {
  std::vector<int> indices;
  Ptr<T> objectness_logits;          // N_q x 1
  std::vector<Box> proposals;
  std::vector<Ptr<T>> class_logits;  // per layer, N_q x K_present
  std::vector<Ptr<T>> boxes;         // per layer, N_q x 4 (cx, cy, w, h)

  // Plain boxes for matching; sigmoid output can underflow the Box validity
  // floor, so clamp just above it.
  std::vector<Box> layer_boxes(int layer) const {
    const auto& m = boxes[static_cast<std::size_t>(layer)]->value;
    std::vector<Box> out;
    out.reserve(static_cast<std::size_t>(m.rows));
    for (int i = 0; i < m.rows; ++i)
      out.emplace_back(std::min(std::max(double(m.at(i, 0)), 0.0), 1.0),
                       std::min(std::max(double(m.at(i, 1)), 0.0), 1.0),
                       std::max(double(m.at(i, 2)), 1.1e-6),
                       std::max(double(m.at(i, 3)), 1.1e-6));
    return out;
  }
};

namespace detail {

template <typename T>
MatT<T> sigmoid_values(const MatT<T>& logits) {
  MatT<T> out = logits;
  for (auto& x : out.d) x = T(1) / (T(1) + std::exp(-x));
  return out;
}

// Gaussian locality prior over image tokens, centered on each query's
// current (detached) box; added to cross-attention scores as a constant.
template <typename T>
MatT<T> locality_bias(const ModelConfig& cfg, const MatT<T>& boxes_sigmoid) {
  const int g = cfg.grid();
  MatT<T> bias(boxes_sigmoid.rows, g * g);
  for (int i = 0; i < boxes_sigmoid.rows; ++i) {
    const double cx = double(boxes_sigmoid.at(i, 0));
    const double cy = double(boxes_sigmoid.at(i, 1));
    const double extent =
        std::max(double(boxes_sigmoid.at(i, 2)), double(boxes_sigmoid.at(i, 3)));
    const double sigma =
        std::max(cfg.locality_scale * extent * 0.5, cfg.locality_sigma_min);
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx) {
        const double dx = (gx + 0.5) / g - cx;
        const double dy = (gy + 0.5) / g - cy;
        bias.at(i, gy * g + gx) = T(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      }
  }
  return bias;
}

}  // namespace detail

// L decoder blocks with per-layer box refinement in logit space. Query
// positions are sine/cosine features of the selection anchors (token grid
// center + configured initial size), so they are constants of the forward;
// the refined boxes feed back through the locality prior only.
template <typename T>
QueryOutput<T> decode(const ModelParams<T>& p, const Selection<T>& sel,
                      const Ptr<T>& image, const Ptr<T>& prompts) {
  const ModelConfig& cfg = p.cfg;
  const int nq = static_cast<int>(sel.indices.size());

  QueryOutput<T> out;
  out.indices = sel.indices;
  out.objectness_logits = sel.objectness_logits;
  out.proposals = sel.proposals;

  auto states = p.at("queries.content");
  if (states->rows() != nq)
    throw std::invalid_argument("decode: query count mismatch");
  auto box_logits = sel.proposal_logits;

  const int g = cfg.grid();
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(nq));
  for (int i = 0; i < nq; ++i) {
    const int t = sel.indices[static_cast<std::size_t>(i)];
    anchors.emplace_back(((t % g) + 0.5) / g, ((t / g) + 0.5) / g,
                         cfg.init_proposal_size, cfg.init_proposal_size);
  }
  auto qpos = detail::linear(p, "queries.box_pos",
                             constant(detail::box_features<T>(anchors, cfg.channels)));

  for (int l = 0; l < cfg.dec_layers; ++l) {
    const std::string b = "dec." + std::to_string(l);

    const MatT<T> cur_boxes = detail::sigmoid_values(box_logits->value);

    auto x1 = add(detail::layernorm(p, b + ".ln1", states), qpos);
    states = add(states, detail::attention(p, b + ".self", x1, x1));

    const MatT<T> bias = detail::locality_bias(cfg, cur_boxes);
    states = add(states, detail::attention(
                             p, b + ".img_cross",
                             add(detail::layernorm(p, b + ".ln2", states), qpos), image, &bias));
    states = add(states, detail::attention(p, b + ".pr_cross",
                                           add(detail::layernorm(p, b + ".ln3", states), qpos),
                                           prompts));
    states = add(states, detail::ffn(p, b + ".ffn", detail::layernorm(p, b + ".ln4", states)));

    auto offsets = detail::linear(p, b + ".offset",
                                  detail::layernorm(p, b + ".ln_box", states));
    box_logits = add(box_logits, offsets);

    out.boxes.push_back(sigmoid(box_logits));
    out.class_logits.push_back(classify(states, prompts, cfg.cls_temperature));
  }
  return out;
}

// Full pipeline: encode, fuse, select, decode.
template <typename T>
QueryOutput<T> forward(const ModelParams<T>& p, const Scene& scene,
                       const PromptSetT<T>& prompt_set) {
  auto image = encode_image(p, scene);
  auto [fused_img, fused_pr] = fuse(p, image.tokens, prompt_set.embeddings);
  auto sel = select_queries(p, fused_img, fused_pr, p.cfg.num_queries);
  return decode(p, sel, fused_img, fused_pr);
}

// Encoder-side token scores only (enough for the frozen reference in KL
// regularization): fused token scores before any decoding.
template <typename T>
Ptr<T> token_scores(const ModelParams<T>& p, const Scene& scene,
                    const PromptSetT<T>& prompt_set) {
  auto image = encode_image(p, scene);
  auto [fused_img, fused_pr] = fuse(p, image.tokens, prompt_set.embeddings);
  return row_max(matmul(fused_img, transpose(fused_pr)));
}

}  // namespace grqo
