#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>

#include "grqo/synthdata.hpp"

using namespace grqo;

namespace {

DatasetSpec small_spec() {
  DatasetSpec s;
  s.train_count = 60;
  s.val_id_count = 30;
  s.val_ood_count = 30;
  s.pool_min_prompts_per_class = 8;
  return s;
}

std::string temp_dir(const char* tag) {
  const std::string d = std::string("/tmp/grqo_test_") + tag;
  std::remove((d + "/manifest.json").c_str());
  (void)system(("mkdir -p " + d).c_str());
  return d;
}

}  // namespace

TEST_CASE("scene generation is deterministic", "[synthdata]") {
  const DatasetSpec spec;
  const Scene a = gen_scene(12345, spec, "in");
  const Scene b = gen_scene(12345, spec, "in");
  REQUIRE(a.pixels.size() == b.pixels.size());
  CHECK(a.pixels == b.pixels);
  REQUIRE(a.instances.size() == b.instances.size());
  for (std::size_t i = 0; i < a.instances.size(); ++i) {
    CHECK(a.instances[i].class_id == b.instances[i].class_id);
    CHECK(a.instances[i].box.cx == b.instances[i].box.cx);
    CHECK(a.instances[i].box.w == b.instances[i].box.w);
  }
  const Scene c = gen_scene(12346, spec, "in");
  CHECK(a.pixels != c.pixels);
}

TEST_CASE("ood scenes draw appearance from held-out ranges", "[synthdata]") {
  const DatasetSpec spec;
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    GenTrace in_trace, ood_trace;
    gen_scene(seed, spec, "in", &in_trace);
    gen_scene(seed + 1000, spec, "ood", &ood_trace);
    for (std::size_t k = 0; k < in_trace.placed.size(); ++k) {
      CHECK(in_trace.placed[k].scale >= spec.train_scale_lo);
      CHECK(in_trace.placed[k].scale <= spec.train_scale_hi);
      const double base = std::floor(in_trace.hues[k] * 3.0 + 0.5) / 3.0;
      CHECK(std::abs(in_trace.hues[k] - base) <= spec.hue_jitter + 1e-12);
    }
    for (std::size_t k = 0; k < ood_trace.placed.size(); ++k) {
      ++checked;
      CHECK(ood_trace.placed[k].scale >= spec.ood_scale_lo);
      CHECK(ood_trace.placed[k].scale <= spec.ood_scale_hi);
      // Offset from the nearest family hue sits inside the OOD band,
      // outside the training jitter.
      double off = ood_trace.hues[k] - std::floor(ood_trace.hues[k] * 3.0) / 3.0;
      CHECK(off >= spec.ood_hue_offset_lo - 1e-12);
      CHECK(off <= spec.ood_hue_offset_hi + 1e-12);
      CHECK(off > spec.hue_jitter);
    }
  }
  CHECK(checked > 20);
  CHECK_THROWS_AS(gen_scene(1, spec, "weird"), std::invalid_argument);
}

TEST_CASE("analytic boxes agree with dense shape sampling", "[synthdata]") {
  // Oracle: scan a fine grid of inside() hits and take its bounding box; the
  // analytic tight box must agree to sub-pixel precision.
  Rng rng(71);
  const int grid = 512;  // 8 samples per 64-px image pixel
  for (int trial = 0; trial < 120; ++trial) {
    shapes::Placed p;
    p.kind = static_cast<shapes::Kind>(rng.uniform_int(4));
    p.scale = rng.uniform(0.14, 0.42);
    p.theta = rng.uniform(-25.0, 25.0) * 3.14159265358979 / 180.0;
    p.cx = rng.uniform(0.3, 0.7);
    p.cy = rng.uniform(0.3, 0.7);

    double x0 = 2, x1 = -1, y0 = 2, y1 = -1;
    for (int gy = 0; gy < grid; ++gy)
      for (int gx = 0; gx < grid; ++gx) {
        const double x = (gx + 0.5) / grid, y = (gy + 0.5) / grid;
        if (shapes::inside(p, x, y)) {
          x0 = std::min(x0, x);
          x1 = std::max(x1, x);
          y0 = std::min(y0, y);
          y1 = std::max(y1, y);
        }
      }
    REQUIRE(x1 > 0);
    const Box analytic = shapes::tight_box(p);
    const CornerBox c = to_corners(analytic);
    const double tol = 1.5 / grid * 64 / 64;  // sampled extent quantization
    INFO("kind " << int(p.kind) << " scale " << p.scale << " theta " << p.theta);
    CHECK(std::abs(c.x0 - x0) < tol + 1.0 / grid);
    CHECK(std::abs(c.x1 - x1) < tol + 1.0 / grid);
    CHECK(std::abs(c.y0 - y0) < tol + 1.0 / grid);
    CHECK(std::abs(c.y1 - y1) < tol + 1.0 / grid);
  }
}

TEST_CASE("rendered shapes stay inside annotations to 1.5 px", "[synthdata]") {
  const DatasetSpec spec;
  const int img = spec.image_size;
  int scenes_checked = 0, colored_seen = 0;
  for (std::uint64_t seed = 100; seed < 220; ++seed) {
    const std::string domain = (seed % 2 == 0) ? "in" : "ood";
    GenTrace trace;
    const Scene sc = gen_scene(seed, spec, domain, &trace);
    ++scenes_checked;

    // Containment: every saturated pixel lies in some annotation box
    // dilated by 1.5 px. The background is gray, so channel spread flags
    // shape pixels.
    for (int y = 0; y < img; ++y)
      for (int x = 0; x < img; ++x) {
        const std::size_t o = (static_cast<std::size_t>(y) * img + x) * 3;
        const float r = sc.pixels[o], g = sc.pixels[o + 1], b = sc.pixels[o + 2];
        const float spread = std::max({r, g, b}) - std::min({r, g, b});
        if (spread < 0.10f) continue;
        ++colored_seen;
        const double px = (x + 0.5) / img, py = (y + 0.5) / img;
        bool inside_any = false;
        for (const auto& inst : sc.instances) {
          const CornerBox c = to_corners(inst.box);
          const double m = 1.5 / img;
          if (px >= c.x0 - m && px <= c.x1 + m && py >= c.y0 - m && py <= c.y1 + m) {
            inside_any = true;
            break;
          }
        }
        if (!inside_any) {
          INFO("seed " << seed << " pixel " << x << "," << y);
          REQUIRE(inside_any);
        }
      }

    // Tightness: the per-instance coverage mask's bounding box matches the
    // annotation within 1.5 px on every side.
    for (std::size_t k = 0; k < trace.placed.size(); ++k) {
      int mx0 = img, mx1 = -1, my0 = img, my1 = -1;
      for (int y = 0; y < img; ++y)
        for (int x = 0; x < img; ++x)
          if (detail::pixel_coverage(trace.placed[k], x, y, img) > 0.02) {
            mx0 = std::min(mx0, x);
            mx1 = std::max(mx1, x);
            my0 = std::min(my0, y);
            my1 = std::max(my1, y);
          }
      REQUIRE(mx1 >= 0);
      const CornerBox c = to_corners(sc.instances[k].box);
      INFO("seed " << seed << " instance " << k);
      CHECK(std::abs(c.x0 * img - mx0) <= 1.5);
      CHECK(std::abs(c.x1 * img - (mx1 + 1)) <= 1.5);
      CHECK(std::abs(c.y0 * img - my0) <= 1.5);
      CHECK(std::abs(c.y1 * img - (my1 + 1)) <= 1.5);

      // Boxes stay inside the unit square.
      CHECK(c.x0 >= 0.0);
      CHECK(c.y0 >= 0.0);
      CHECK(c.x1 <= 1.0);
      CHECK(c.y1 <= 1.0);
    }

    // Overlap cap between any two instances.
    for (std::size_t a = 0; a < sc.instances.size(); ++a)
      for (std::size_t b2 = a + 1; b2 < sc.instances.size(); ++b2)
        CHECK(iou(sc.instances[a].box, sc.instances[b2].box) <= spec.max_overlap_iou + 1e-9);
  }
  CHECK(scenes_checked == 120);
  CHECK(colored_seen > 1000);
}

TEST_CASE("split construction partitions ids and covers classes", "[synthdata]") {
  const DatasetSpec spec = small_spec();
  const Dataset d = build_splits(spec, 2024);

  CHECK(d.train.scenes.size() == 60);
  CHECK(d.val_id.scenes.size() == 30);
  CHECK(d.val_ood.scenes.size() == 30);

  std::set<std::string> ids;
  std::size_t total = 0;
  for (const Split* sp : {&d.train, &d.val_id, &d.val_ood, &d.pool_train,
                          &d.pool_val_id, &d.pool_val_ood}) {
    total += sp->scenes.size();
    for (const auto& sc : sp->scenes) ids.insert(sc.scene_id);
  }
  CHECK(ids.size() == total);  // pairwise disjoint ids

  // Every class shows up a reasonable number of times per target split
  // (scaled-down bound for the scaled-down spec).
  for (const Split* sp : {&d.train, &d.val_id, &d.val_ood}) {
    std::vector<int> counts(static_cast<std::size_t>(spec.num_classes()), 0);
    for (const auto& sc : sp->scenes)
      for (const auto& in : sc.instances) ++counts[static_cast<std::size_t>(in.class_id)];
    for (int c = 0; c < spec.num_classes(); ++c) {
      INFO(sp->name << " class " << c);
      CHECK(counts[static_cast<std::size_t>(c)] >= 2);
    }
  }

  // Prompt pools reach the requested per-class depth.
  for (const Split* pool : {&d.pool_train, &d.pool_val_id, &d.pool_val_ood}) {
    const PromptPool p = build_pool(*pool, spec.num_classes());
    for (int c = 0; c < spec.num_classes(); ++c)
      CHECK(p.per_class[static_cast<std::size_t>(c)].size() >=
            static_cast<std::size_t>(spec.pool_min_prompts_per_class));
  }

  // Domains recorded correctly.
  for (const auto& sc : d.val_ood.scenes) CHECK(sc.domain == "ood");
  for (const auto& sc : d.train.scenes) CHECK(sc.domain == "in");
}

TEST_CASE("dataset save and load round-trip", "[synthdata]") {
  const std::string dir = temp_dir("roundtrip");
  DatasetSpec spec = small_spec();
  spec.train_count = 12;
  spec.val_id_count = 6;
  spec.val_ood_count = 6;
  spec.pool_min_prompts_per_class = 3;
  const Dataset d = build_splits(spec, 77);
  save_dataset(dir, d);
  const Dataset back = load_dataset(dir);

  CHECK(back.master_seed == 77);
  CHECK(back.spec.train_scale_hi == spec.train_scale_hi);
  const Split* orig[] = {&d.train, &d.val_id, &d.val_ood, &d.pool_train};
  const Split* got[] = {&back.train, &back.val_id, &back.val_ood, &back.pool_train};
  for (int s = 0; s < 4; ++s) {
    REQUIRE(got[s]->scenes.size() == orig[s]->scenes.size());
    for (std::size_t i = 0; i < orig[s]->scenes.size(); ++i) {
      const Scene& a = orig[s]->scenes[i];
      const Scene& b = got[s]->scenes[i];
      CHECK(a.scene_id == b.scene_id);
      CHECK(a.seed == b.seed);
      CHECK(a.domain == b.domain);
      CHECK(a.pixels == b.pixels);  // bit-exact
      REQUIRE(a.instances.size() == b.instances.size());
      for (std::size_t k = 0; k < a.instances.size(); ++k) {
        CHECK(a.instances[k].class_id == b.instances[k].class_id);
        CHECK(a.instances[k].box.cx == b.instances[k].box.cx);
        CHECK(a.instances[k].box.cy == b.instances[k].box.cy);
        CHECK(a.instances[k].box.w == b.instances[k].box.w);
        CHECK(a.instances[k].box.h == b.instances[k].box.h);
      }
    }
  }

  // Scenes regenerate bit-exactly from their manifest seeds.
  for (const auto& sc : back.val_id.scenes) {
    const Scene regen = gen_scene(sc.seed, back.spec, sc.domain);
    CHECK(regen.pixels == sc.pixels);
  }
}

TEST_CASE("dataset corruption detection", "[synthdata]") {
  const std::string dir = temp_dir("corrupt");
  DatasetSpec spec = small_spec();
  spec.train_count = 4;
  spec.val_id_count = 2;
  spec.val_ood_count = 2;
  spec.pool_min_prompts_per_class = 2;
  save_dataset(dir, build_splits(spec, 5));

  SECTION("truncated payload fails the checksum") {
    std::ifstream in(dir + "/scenes_train.bin", std::ios::binary | std::ios::ate);
    const auto size = in.tellg();
    in.close();
    (void)system(("head -c " + std::to_string(long(size) - 100) + " " + dir +
                  "/scenes_train.bin > " + dir + "/tmp.bin && mv " + dir + "/tmp.bin " +
                  dir + "/scenes_train.bin")
                     .c_str());
    CHECK_THROWS_AS(load_dataset(dir), ChecksumError);
  }

  SECTION("flipped byte fails the checksum") {
    std::fstream f(dir + "/scenes_val_id.bin",
                   std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(100);
    char c;
    f.seekg(100);
    f.get(c);
    f.seekp(100);
    c = static_cast<char>(c ^ 0x7F);
    f.put(c);
    f.close();
    CHECK_THROWS_AS(load_dataset(dir), ChecksumError);
  }

  SECTION("malformed manifest is a schema error") {
    std::ofstream mf(dir + "/manifest.json");
    mf << "{ not json";
    mf.close();
    CHECK_THROWS_AS(load_dataset(dir), SchemaError);
  }

  SECTION("unsupported version is a schema error") {
    std::ifstream in(dir + "/manifest.json");
    nlohmann::json j;
    in >> j;
    in.close();
    j["version"] = 999;
    std::ofstream out(dir + "/manifest.json");
    out << j.dump();
    out.close();
    CHECK_THROWS_AS(load_dataset(dir), SchemaError);
  }

  SECTION("class structure mismatch is a schema error") {
    std::ifstream in(dir + "/manifest.json");
    nlohmann::json j;
    in >> j;
    in.close();
    j["spec"]["num_shapes"] = 1;  // class ids in records now exceed K
    std::ofstream out(dir + "/manifest.json");
    out << j.dump();
    out.close();
    CHECK_THROWS_AS(load_dataset(dir), SchemaError);
  }
}
