#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grqo/geometry.hpp"
#include "grqo/rng.hpp"

namespace grqo {

class SchemaError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ChecksumError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Dataset specification. Classes are shape x hue-family pairs; the OOD split
// moves hue and scale into bands disjoint from the training ranges.
// ---------------------------------------------------------------------------

struct DatasetSpec {
  int image_size = 64;
  int num_shapes = 4;        // circle, square, triangle, cross
  int num_hue_families = 3;  // red, green, blue

  double train_scale_lo = 0.14, train_scale_hi = 0.28;
  double ood_scale_lo = 0.29, ood_scale_hi = 0.35;
  double hue_jitter = 0.05;                      // train: family hue +- jitter
  double ood_hue_offset_lo = 0.06, ood_hue_offset_hi = 0.10;
  double rotation_max_deg = 25.0;
  double sat_lo = 0.75, sat_hi = 0.95;
  double value_lo = 0.80, value_hi = 1.00;
  double bg_base = 0.25, bg_noise = 0.12;

  int min_instances = 1;
  int max_instances = 5;
  int max_instances_ood = 3;  // larger OOD shapes need more room
  double max_overlap_iou = 0.4;

  int train_count = 2000, val_id_count = 200, val_ood_count = 200;
  int pool_min_prompts_per_class = 64;

  int num_classes() const { return num_shapes * num_hue_families; }

  void validate() const {
    if (image_size <= 0 || num_shapes < 1 || num_shapes > 4 || num_hue_families < 1 ||
        num_hue_families > 3)
      throw SchemaError("DatasetSpec: bad class structure");
    if (train_count <= 0 || val_id_count <= 0 || val_ood_count <= 0)
      throw SchemaError("DatasetSpec: split counts must be positive");
    // The domain gap requires strictly disjoint appearance ranges.
    if (!(train_scale_hi < ood_scale_lo))
      throw SchemaError("DatasetSpec: OOD scale range overlaps training range");
    if (!(hue_jitter < ood_hue_offset_lo))
      throw SchemaError("DatasetSpec: OOD hue band overlaps training jitter");
  }
};

struct Scene {
  std::string scene_id;
  std::uint64_t seed = 0;
  std::string domain;  // "in" or "ood"
  int width = 0, height = 0;
  std::vector<float> pixels;  // h*w*3, row-major RGB, each value k/255
  std::vector<Instance> instances;
};

struct Split {
  std::string name;
  std::vector<Scene> scenes;
};

struct PromptRef {
  int scene_index = 0;  // into the pool split's scene list
  Box box{0.5, 0.5, 0.1, 0.1};
};

struct PromptPool {
  std::vector<std::vector<PromptRef>> per_class;
};

struct Dataset {
  DatasetSpec spec;
  std::uint64_t master_seed = 0;
  Split train, val_id, val_ood;
  Split pool_train, pool_val_id, pool_val_ood;
};

// ---------------------------------------------------------------------------
// Shape geometry. Shapes are normalized so the tight bounding box of the
// unrotated shape has min dimension == scale; boxes therefore always span at
// least one patch-token center when scale exceeds the patch pitch.
// ---------------------------------------------------------------------------

namespace shapes {

enum Kind { kCircle = 0, kSquare = 1, kTriangle = 2, kCross = 3 };

struct Placed {
  Kind kind;
  double cx, cy, scale, theta;  // rotation in radians
};

inline double cross_arm_ratio() { return 0.34; }

// Point-in-shape test in image coordinates.
inline bool inside(const Placed& s, double px, double py) {
  // Rotate into shape-local coordinates.
  const double dx = px - s.cx, dy = py - s.cy;
  const double ct = std::cos(-s.theta), st = std::sin(-s.theta);
  const double x = dx * ct - dy * st;
  const double y = dx * st + dy * ct;
  switch (s.kind) {
    case kCircle: {
      const double r = s.scale / 2;
      return x * x + y * y <= r * r;
    }
    case kSquare: {
      const double a = s.scale / 2;
      return std::abs(x) <= a && std::abs(y) <= a;
    }
    case kTriangle: {
      // Equilateral, height == scale, apex up.
      const double h = s.scale;
      const double top = -h / 2, bot = h / 2;
      if (y < top || y > bot) return false;
      const double half_w_here = (y - top) / h * (h / std::sqrt(3.0));
      return std::abs(x) <= half_w_here;
    }
    case kCross: {
      const double L = s.scale / 2;
      const double t = s.scale * cross_arm_ratio() / 2;
      return (std::abs(x) <= L && std::abs(y) <= t) ||
             (std::abs(x) <= t && std::abs(y) <= L);
    }
  }
  return false;
}

// Tight axis-aligned box of the rotated shape, analytically.
inline Box tight_box(const Placed& s) {
  const double ct = std::cos(s.theta), st = std::sin(s.theta);
  auto hull_of = [&](const std::vector<std::array<double, 2>>& pts) {
    double xmin = 1e9, xmax = -1e9, ymin = 1e9, ymax = -1e9;
    for (const auto& p : pts) {
      const double rx = p[0] * ct - p[1] * st;
      const double ry = p[0] * st + p[1] * ct;
      xmin = std::min(xmin, rx);
      xmax = std::max(xmax, rx);
      ymin = std::min(ymin, ry);
      ymax = std::max(ymax, ry);
    }
    return Box(s.cx + (xmin + xmax) / 2, s.cy + (ymin + ymax) / 2, xmax - xmin,
               ymax - ymin);
  };
  switch (s.kind) {
    case kCircle:
      return Box(s.cx, s.cy, s.scale, s.scale);
    case kSquare: {
      const double a = s.scale / 2;
      return hull_of({{-a, -a}, {a, -a}, {a, a}, {-a, a}});
    }
    case kTriangle: {
      const double h = s.scale;
      const double hw = h / std::sqrt(3.0);
      return hull_of({{0, -h / 2}, {-hw, h / 2}, {hw, h / 2}});
    }
    case kCross: {
      const double L = s.scale / 2;
      const double t = s.scale * cross_arm_ratio() / 2;
      return hull_of({{-L, -t}, {L, -t}, {L, t}, {-L, t},
                      {-t, -L}, {t, -L}, {t, L}, {-t, L}});
    }
  }
  throw std::logic_error("tight_box: unknown shape");
}

}  // namespace shapes

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace detail {

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, t};
  }
}

inline float quantize(double x) {
  const double c = std::min(std::max(x, 0.0), 1.0);
  return float(std::lround(c * 255.0)) / 255.0f;
}

// Coverage of one pixel by a shape via a 4x4 subsample grid.
inline double pixel_coverage(const shapes::Placed& s, int px, int py, int img) {
  int hit = 0;
  for (int sy = 0; sy < 4; ++sy)
    for (int sx = 0; sx < 4; ++sx) {
      const double x = (px + (sx + 0.5) / 4.0) / img;
      const double y = (py + (sy + 0.5) / 4.0) / img;
      if (shapes::inside(s, x, y)) ++hit;
    }
  return hit / 16.0;
}

}  // namespace detail

// Appearance draws behind each instance, exposed for range auditing.
struct GenTrace {
  std::vector<shapes::Placed> placed;
  std::vector<double> hues;
};

// Deterministic function of (seed, spec, domain). Draw order is part of the
// format: n_instances, then per instance (class, scale, rotation, hue, sat,
// value, then placement attempts), then background noise row-major.
inline Scene gen_scene(std::uint64_t seed, const DatasetSpec& spec,
                       const std::string& domain, GenTrace* trace = nullptr) {
  spec.validate();
  if (domain != "in" && domain != "ood")
    throw std::invalid_argument("gen_scene: domain must be 'in' or 'ood'");
  const bool ood = domain == "ood";
  Rng rng(seed);

  const int img = spec.image_size;
  Scene scene;
  scene.seed = seed;
  scene.domain = domain;
  scene.width = img;
  scene.height = img;

  const int max_inst = ood ? spec.max_instances_ood : spec.max_instances;
  const int want = spec.min_instances +
                   int(rng.uniform_int(std::uint64_t(max_inst - spec.min_instances + 1)));

  std::vector<shapes::Placed> placed;
  std::vector<std::array<double, 3>> colors;
  for (int k = 0; k < want; ++k) {
    const int class_id = int(rng.uniform_int(std::uint64_t(spec.num_classes())));
    const int shape_kind = class_id % spec.num_shapes;
    const int hue_family = class_id / spec.num_shapes;

    const double scale = ood ? rng.uniform(spec.ood_scale_lo, spec.ood_scale_hi)
                             : rng.uniform(spec.train_scale_lo, spec.train_scale_hi);
    const double theta = rng.uniform(-spec.rotation_max_deg, spec.rotation_max_deg) *
                         (3.14159265358979323846 / 180.0);
    const double base_hue = double(hue_family) / 3.0;
    const double hue = ood ? base_hue + rng.uniform(spec.ood_hue_offset_lo, spec.ood_hue_offset_hi)
                           : base_hue + rng.uniform(-spec.hue_jitter, spec.hue_jitter);
    const double sat = rng.uniform(spec.sat_lo, spec.sat_hi);
    const double val = rng.uniform(spec.value_lo, spec.value_hi);

    // Rejection-sample a center keeping the tight box inside the frame and
    // overlap with earlier instances at or below the IoU cap.
    bool ok = false;
    shapes::Placed cand{static_cast<shapes::Kind>(shape_kind), 0, 0, scale, theta};
    for (int attempt = 0; attempt < 500 && !ok; ++attempt) {
      cand.cx = rng.uniform(0.0, 1.0);
      cand.cy = rng.uniform(0.0, 1.0);
      Box b(0.5, 0.5, 0.1, 0.1);
      try {
        b = shapes::tight_box(cand);
      } catch (const std::invalid_argument&) {
        continue;  // box spills outside [0,1]
      }
      const CornerBox c = to_corners(b);
      if (c.x0 < 0.01 || c.y0 < 0.01 || c.x1 > 0.99 || c.y1 > 0.99) continue;
      ok = true;
      for (const auto& other : placed) {
        if (iou(b, shapes::tight_box(other)) > spec.max_overlap_iou) {
          ok = false;
          break;
        }
      }
    }
    if (!ok) continue;  // crowded scene: drop this instance

    placed.push_back(cand);
    colors.push_back(detail::hsv_to_rgb(hue, sat, val));
    scene.instances.push_back(Instance{class_id, shapes::tight_box(cand)});
    if (trace) {
      trace->placed.push_back(cand);
      trace->hues.push_back(hue);
    }
  }

  // Background value noise, then paint instances in order.
  scene.pixels.assign(static_cast<std::size_t>(img) * img * 3, 0.0f);
  std::vector<double> canvas(static_cast<std::size_t>(img) * img * 3);
  for (int y = 0; y < img; ++y)
    for (int x = 0; x < img; ++x) {
      const double v = spec.bg_base + spec.bg_noise * (rng.uniform() - 0.5);
      const std::size_t o = (static_cast<std::size_t>(y) * img + x) * 3;
      canvas[o] = canvas[o + 1] = canvas[o + 2] = v;
    }
  for (std::size_t k = 0; k < placed.size(); ++k) {
    const Box b = shapes::tight_box(placed[k]);
    const CornerBox c = to_corners(b);
    const int x0 = std::max(0, int(std::floor(c.x0 * img)) - 1);
    const int x1 = std::min(img - 1, int(std::ceil(c.x1 * img)) + 1);
    const int y0 = std::max(0, int(std::floor(c.y0 * img)) - 1);
    const int y1 = std::min(img - 1, int(std::ceil(c.y1 * img)) + 1);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double cov = detail::pixel_coverage(placed[k], x, y, img);
        if (cov <= 0.0) continue;
        const std::size_t o = (static_cast<std::size_t>(y) * img + x) * 3;
        for (int ch = 0; ch < 3; ++ch)
          canvas[o + ch] = (1 - cov) * canvas[o + ch] + cov * colors[k][static_cast<std::size_t>(ch)];
      }
  }
  for (std::size_t i = 0; i < canvas.size(); ++i)
    scene.pixels[i] = detail::quantize(canvas[i]);
  return scene;
}

// ---------------------------------------------------------------------------
// Split construction
// ---------------------------------------------------------------------------

namespace detail {

inline Split gen_split(const std::string& name, int count, const std::string& domain,
                       const DatasetSpec& spec, std::uint64_t master_seed,
                       std::uint64_t split_tag) {
  Split s;
  s.name = name;
  s.scenes.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::uint64_t seed =
        mix_seed(master_seed, split_tag * 1000003u + static_cast<std::uint64_t>(i));
    Scene sc = gen_scene(seed, spec, domain);
    sc.scene_id = name + "/" + std::to_string(i);
    s.scenes.push_back(std::move(sc));
  }
  return s;
}

// Grows a pool split until every class holds at least the required number of
// exemplars.
inline Split gen_pool(const std::string& name, const std::string& domain,
                      const DatasetSpec& spec, std::uint64_t master_seed,
                      std::uint64_t split_tag) {
  Split s;
  s.name = name;
  std::vector<int> counts(static_cast<std::size_t>(spec.num_classes()), 0);
  int i = 0;
  auto lacking = [&] {
    for (int c : counts)
      if (c < spec.pool_min_prompts_per_class) return true;
    return false;
  };
  while (lacking()) {
    if (i > 100000) throw std::logic_error("gen_pool: class coverage not reached");
    const std::uint64_t seed =
        mix_seed(master_seed, split_tag * 1000003u + static_cast<std::uint64_t>(i));
    Scene sc = gen_scene(seed, spec, domain);
    sc.scene_id = name + "/" + std::to_string(i);
    for (const auto& inst : sc.instances) ++counts[static_cast<std::size_t>(inst.class_id)];
    s.scenes.push_back(std::move(sc));
    ++i;
  }
  return s;
}

}  // namespace detail

inline PromptPool build_pool(const Split& pool_split, int num_classes) {
  PromptPool p;
  p.per_class.assign(static_cast<std::size_t>(num_classes), {});
  for (std::size_t si = 0; si < pool_split.scenes.size(); ++si)
    for (const auto& inst : pool_split.scenes[si].instances)
      p.per_class[static_cast<std::size_t>(inst.class_id)].push_back(
          PromptRef{static_cast<int>(si), inst.box});
  return p;
}

inline Dataset build_splits(const DatasetSpec& spec, std::uint64_t master_seed) {
  spec.validate();
  Dataset d;
  d.spec = spec;
  d.master_seed = master_seed;
  d.train = detail::gen_split("train", spec.train_count, "in", spec, master_seed, 1);
  d.val_id = detail::gen_split("val_id", spec.val_id_count, "in", spec, master_seed, 2);
  d.val_ood = detail::gen_split("val_ood", spec.val_ood_count, "ood", spec, master_seed, 3);
  d.pool_train = detail::gen_pool("pool_train", "in", spec, master_seed, 4);
  d.pool_val_id = detail::gen_pool("pool_val_id", "in", spec, master_seed, 5);
  d.pool_val_ood = detail::gen_pool("pool_val_ood", "ood", spec, master_seed, 6);
  return d;
}

// ---------------------------------------------------------------------------
// On-disk format: manifest.json plus one headerless scenes_<split>.bin of
// 8-bit RGB payloads in manifest order. All manifest numbers are decimal.
// ---------------------------------------------------------------------------

inline constexpr int kDatasetVersion = 1;

namespace detail {

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

inline std::vector<std::uint8_t> encode_pixels(const Scene& s) {
  std::vector<std::uint8_t> bytes(s.pixels.size());
  for (std::size_t i = 0; i < s.pixels.size(); ++i)
    bytes[i] = static_cast<std::uint8_t>(std::lround(double(s.pixels[i]) * 255.0));
  return bytes;
}

inline nlohmann::json spec_to_json(const DatasetSpec& s) {
  return nlohmann::json{{"image_size", s.image_size},
                        {"num_shapes", s.num_shapes},
                        {"num_hue_families", s.num_hue_families},
                        {"train_scale_lo", s.train_scale_lo},
                        {"train_scale_hi", s.train_scale_hi},
                        {"ood_scale_lo", s.ood_scale_lo},
                        {"ood_scale_hi", s.ood_scale_hi},
                        {"hue_jitter", s.hue_jitter},
                        {"ood_hue_offset_lo", s.ood_hue_offset_lo},
                        {"ood_hue_offset_hi", s.ood_hue_offset_hi},
                        {"rotation_max_deg", s.rotation_max_deg},
                        {"sat_lo", s.sat_lo},
                        {"sat_hi", s.sat_hi},
                        {"value_lo", s.value_lo},
                        {"value_hi", s.value_hi},
                        {"bg_base", s.bg_base},
                        {"bg_noise", s.bg_noise},
                        {"min_instances", s.min_instances},
                        {"max_instances", s.max_instances},
                        {"max_instances_ood", s.max_instances_ood},
                        {"max_overlap_iou", s.max_overlap_iou},
                        {"train_count", s.train_count},
                        {"val_id_count", s.val_id_count},
                        {"val_ood_count", s.val_ood_count},
                        {"pool_min_prompts_per_class", s.pool_min_prompts_per_class}};
}

inline DatasetSpec spec_from_json(const nlohmann::json& j) {
  DatasetSpec s;
  try {
    j.at("image_size").get_to(s.image_size);
    j.at("num_shapes").get_to(s.num_shapes);
    j.at("num_hue_families").get_to(s.num_hue_families);
    j.at("train_scale_lo").get_to(s.train_scale_lo);
    j.at("train_scale_hi").get_to(s.train_scale_hi);
    j.at("ood_scale_lo").get_to(s.ood_scale_lo);
    j.at("ood_scale_hi").get_to(s.ood_scale_hi);
    j.at("hue_jitter").get_to(s.hue_jitter);
    j.at("ood_hue_offset_lo").get_to(s.ood_hue_offset_lo);
    j.at("ood_hue_offset_hi").get_to(s.ood_hue_offset_hi);
    j.at("rotation_max_deg").get_to(s.rotation_max_deg);
    j.at("sat_lo").get_to(s.sat_lo);
    j.at("sat_hi").get_to(s.sat_hi);
    j.at("value_lo").get_to(s.value_lo);
    j.at("value_hi").get_to(s.value_hi);
    j.at("bg_base").get_to(s.bg_base);
    j.at("bg_noise").get_to(s.bg_noise);
    j.at("min_instances").get_to(s.min_instances);
    j.at("max_instances").get_to(s.max_instances);
    j.at("max_instances_ood").get_to(s.max_instances_ood);
    j.at("max_overlap_iou").get_to(s.max_overlap_iou);
    j.at("train_count").get_to(s.train_count);
    j.at("val_id_count").get_to(s.val_id_count);
    j.at("val_ood_count").get_to(s.val_ood_count);
    j.at("pool_min_prompts_per_class").get_to(s.pool_min_prompts_per_class);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("manifest spec: ") + e.what());
  }
  return s;
}

}  // namespace detail

// Spec (de)serialization for config files; the same schema the dataset
// manifest embeds.
inline nlohmann::json spec_to_json(const DatasetSpec& s) { return detail::spec_to_json(s); }
inline DatasetSpec spec_from_json(const nlohmann::json& j) { return detail::spec_from_json(j); }

// The CRC used for payload integrity, usable by callers to fingerprint
// dataset artifacts.
inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
  return detail::crc32(data, n);
}

inline void save_dataset(const std::string& dir, const Dataset& d) {
  nlohmann::json manifest;
  manifest["version"] = kDatasetVersion;
  manifest["master_seed"] = d.master_seed;
  manifest["spec"] = detail::spec_to_json(d.spec);

  const Split* splits[] = {&d.train,      &d.val_id,      &d.val_ood,
                           &d.pool_train, &d.pool_val_id, &d.pool_val_ood};
  manifest["splits"] = nlohmann::json::object();
  for (const Split* sp : splits) {
    nlohmann::json records = nlohmann::json::array();
    std::ofstream bin(dir + "/scenes_" + sp->name + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("save_dataset: cannot open " + sp->name + " payload");
    for (const Scene& sc : sp->scenes) {
      const auto bytes = detail::encode_pixels(sc);
      bin.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
      nlohmann::json insts = nlohmann::json::array();
      for (const auto& in : sc.instances)
        insts.push_back({{"class_id", in.class_id},
                         {"cx", in.box.cx},
                         {"cy", in.box.cy},
                         {"w", in.box.w},
                         {"h", in.box.h}});
      records.push_back({{"scene_id", sc.scene_id},
                         {"seed", sc.seed},
                         {"domain", sc.domain},
                         {"instances", std::move(insts)},
                         {"crc32", detail::crc32(bytes.data(), bytes.size())}});
    }
    manifest["splits"][sp->name] = std::move(records);
  }

  std::ofstream mf(dir + "/manifest.json");
  if (!mf) throw std::runtime_error("save_dataset: cannot write manifest");
  mf << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw SchemaError("load_dataset: missing manifest.json");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("load_dataset: malformed manifest: ") + e.what());
  }

  if (!manifest.contains("version") || !manifest["version"].is_number_integer())
    throw SchemaError("load_dataset: missing version");
  if (manifest["version"].get<int>() != kDatasetVersion)
    throw SchemaError("load_dataset: unsupported version " +
                      manifest["version"].dump());

  Dataset d;
  d.spec = detail::spec_from_json(manifest.at("spec"));
  d.spec.validate();
  try {
    manifest.at("master_seed").get_to(d.master_seed);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("load_dataset: ") + e.what());
  }

  const int img = d.spec.image_size;
  const std::size_t scene_bytes = static_cast<std::size_t>(img) * img * 3;

  auto load_split = [&](const std::string& name) {
    Split sp;
    sp.name = name;
    if (!manifest.at("splits").contains(name))
      throw SchemaError("load_dataset: manifest missing split " + name);
    std::ifstream bin(dir + "/scenes_" + name + ".bin", std::ios::binary);
    if (!bin) throw SchemaError("load_dataset: missing payload for " + name);
    std::vector<std::uint8_t> bytes(scene_bytes);
    for (const auto& rec : manifest["splits"][name]) {
      Scene sc;
      try {
        rec.at("scene_id").get_to(sc.scene_id);
        rec.at("seed").get_to(sc.seed);
        rec.at("domain").get_to(sc.domain);
        for (const auto& in : rec.at("instances")) {
          const int cid = in.at("class_id").get<int>();
          if (cid < 0 || cid >= d.spec.num_classes())
            throw SchemaError("load_dataset: class_id out of range");
          sc.instances.push_back(
              Instance{cid, Box(in.at("cx").get<double>(), in.at("cy").get<double>(),
                                in.at("w").get<double>(), in.at("h").get<double>())});
        }
      } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("load_dataset: bad scene record: ") + e.what());
      }
      bin.read(reinterpret_cast<char*>(bytes.data()),
               static_cast<std::streamsize>(scene_bytes));
      if (static_cast<std::size_t>(bin.gcount()) != scene_bytes)
        throw ChecksumError("load_dataset: truncated payload in " + name);
      const std::uint32_t crc = detail::crc32(bytes.data(), bytes.size());
      if (crc != rec.at("crc32").get<std::uint32_t>())
        throw ChecksumError("load_dataset: checksum mismatch for " + sc.scene_id);
      sc.width = img;
      sc.height = img;
      sc.pixels.resize(scene_bytes);
      for (std::size_t i = 0; i < scene_bytes; ++i)
        sc.pixels[i] = float(bytes[i]) / 255.0f;
      sp.scenes.push_back(std::move(sc));
    }
    return sp;
  };

  d.train = load_split("train");
  d.val_id = load_split("val_id");
  d.val_ood = load_split("val_ood");
  d.pool_train = load_split("pool_train");
  d.pool_val_id = load_split("pool_val_id");
  d.pool_val_ood = load_split("pool_val_ood");
  return d;
}

}  // namespace grqo
