// End-to-end smoke tests for the command-line tool: every subcommand runs
// against a miniature corpus, artifacts land where documented, and the
// exit-code contract holds (0 ok, 2 usage, 3 validation).

#include <sys/wait.h>

#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <grqo/synthdata.hpp>
#include <grqo/trainer.hpp>

using namespace grqo;
namespace fs = std::filesystem;

#define GRQO_STR2(x) #x
#define GRQO_STR(x) GRQO_STR2(x)

namespace {

std::string tool_path() { return GRQO_STR(GRQO_TOOL_PATH); }

std::string fresh_dir(const std::string& tag) {
  const auto p = fs::temp_directory_path() /
                 ("grqo_cli_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

struct CmdResult {
  int code = -1;
  std::string out;
};

CmdResult run_cmd(const std::string& cmd, const std::string& scratch) {
  const std::string out_file = scratch + "/cmd_out.txt";
  const int rc = std::system((cmd + " >" + out_file + " 2>&1").c_str());
  CmdResult r;
  r.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  std::ifstream is(out_file);
  std::ostringstream os;
  os << is.rdbuf();
  r.out = os.str();
  return r;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(bool(is));
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

DatasetSpec tiny_spec() {
  DatasetSpec s;
  s.num_shapes = 2;
  s.num_hue_families = 2;
  s.max_instances = 3;
  s.max_instances_ood = 2;
  s.train_count = 16;
  s.val_id_count = 4;
  s.val_ood_count = 4;
  s.pool_min_prompts_per_class = 4;
  return s;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.channels = 16;
  m.heads = 2;
  m.enc_blocks = 1;
  m.fusion_blocks = 1;
  m.dec_layers = 2;
  m.num_queries = 6;
  m.num_classes = 4;
  return m;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> f;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      f.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  f.push_back(cur);
  return f;
}

}  // namespace

TEST_CASE("command-line pipeline: gen-data, train, eval, ablate, plot", "[cli]") {
  const std::string dir = fresh_dir("pipeline");
  const std::string tool = tool_path();
  REQUIRE(fs::exists(tool));

  {
    std::ofstream os(dir + "/spec.json");
    os << spec_to_json(tiny_spec()).dump(2) << "\n";
  }
  {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.sft_warmup_epochs = 1;
    cfg.eval_each_epoch = true;
    cfg.eval_prompts_per_class = 2;
    cfg.seed = 11;
    cfg.model = tiny_model();
    cfg.mode = "sft";
    std::ofstream os(dir + "/train.json");
    os << cfg.to_json().dump(2) << "\n";
  }

  SECTION("full pipeline") {
    // gen-data, twice: artifacts must be byte-identical for one seed.
    auto g1 = run_cmd(tool + " gen-data --out " + dir + "/data --seed 7 --spec " + dir +
                          "/spec.json",
                      dir);
    INFO(g1.out);
    REQUIRE(g1.code == 0);
    REQUIRE(fs::exists(dir + "/data/manifest.json"));
    auto g2 = run_cmd(tool + " gen-data --out " + dir + "/data2 --seed 7 --spec " + dir +
                          "/spec.json",
                      dir);
    REQUIRE(g2.code == 0);
    CHECK(slurp(dir + "/data/manifest.json") == slurp(dir + "/data2/manifest.json"));
    CHECK(slurp(dir + "/data/scenes_train.bin") == slurp(dir + "/data2/scenes_train.bin"));

    // train writes metrics.csv plus a run manifest with the promised fields.
    auto t = run_cmd(tool + " train --data " + dir + "/data --mode sft --config " + dir +
                         "/train.json --out " + dir + "/run_sft",
                     dir);
    INFO(t.out);
    REQUIRE(t.code == 0);
    CHECK(fs::exists(dir + "/run_sft/metrics.csv"));
    CHECK(fs::exists(dir + "/run_sft/last.ckpt"));
    CHECK(fs::exists(dir + "/run_sft/best.ckpt"));
    const auto manifest = nlohmann::json::parse(slurp(dir + "/run_sft/run_manifest.json"));
    for (const char* key :
         {"run_id", "command_line", "config", "dataset_checksum_crc32", "build_id",
          "timestamps"})
      CHECK(manifest.contains(key));
    CHECK(manifest["config"]["mode"] == "sft");

    // A run directory is immutable once written.
    auto t2 = run_cmd(tool + " train --data " + dir + "/data --mode sft --config " + dir +
                          "/train.json --out " + dir + "/run_sft",
                      dir);
    CHECK(t2.code == 3);

    // eval: two invocations whose report rows differ only in the ensemble
    // size column (and the measurements that follow from it).
    auto e1 = run_cmd(tool + " eval --ckpt " + dir + "/run_sft/last.ckpt --data " + dir +
                          "/data --split ood --prompts-per-class 1 --seed 3",
                      dir);
    auto e64 = run_cmd(tool + " eval --ckpt " + dir + "/run_sft/last.ckpt --data " + dir +
                           "/data --split ood --prompts-per-class 64 --seed 3",
                       dir);
    REQUIRE(e1.code == 0);
    REQUIRE(e64.code == 0);
    auto row = [](const std::string& out) {
      std::istringstream is(out);
      std::string header, r;
      REQUIRE(std::getline(is, header));
      REQUIRE(std::getline(is, r));
      CHECK(header.rfind("run_id,split,prompts_per_class,seed", 0) == 0);
      return split_fields(r);
    };
    const auto r1 = row(e1.out), r64 = row(e64.out);
    CHECK(r1[0] == r64[0]);
    CHECK(r1[1] == "val_ood");
    CHECK(r64[1] == "val_ood");
    CHECK(r1[2] == "1");
    CHECK(r64[2] == "64");
    CHECK(r1[3] == r64[3]);

    // ablate --axis component: exactly these four cells.
    auto a = run_cmd(tool + " ablate --axis component --data " + dir + "/data --out " + dir +
                         "/sweep",
                     dir);
    INFO(a.out);
    REQUIRE(a.code == 0);
    std::set<std::string> cells;
    for (const auto& e : fs::directory_iterator(dir + "/sweep"))
      if (e.is_directory()) cells.insert(e.path().filename().string());
    CHECK(cells == std::set<std::string>{"sft", "reward-only", "kl-only", "grqo"});
    for (const auto& c : cells) {
      CHECK(fs::exists(dir + "/sweep/" + c + "/metrics.csv"));
      CHECK(fs::exists(dir + "/sweep/" + c + "/run_manifest.json"));
    }
    const std::string summary = slurp(dir + "/sweep/summary.csv");
    CHECK(std::count(summary.begin(), summary.end(), '\n') == 5);  // header + 4 cells

    // plot consumes metrics.csv from run directories.
    auto p1 = run_cmd(tool + " plot --runs " + dir + "/sweep/sft " + dir +
                          "/sweep/grqo --out " + dir + "/curves.svg",
                      dir);
    REQUIRE(p1.code == 0);
    CHECK(slurp(dir + "/curves.svg").rfind("<svg", 0) == 0);
    auto p2 = run_cmd(tool + " plot --runs " + dir + "/run_sft --out " + dir + "/curves.csv",
                      dir);
    REQUIRE(p2.code == 0);
    CHECK(slurp(dir + "/curves.csv").rfind("run,epoch,phase,mean_loss", 0) == 0);
  }

  SECTION("worker processes cover ablation cells") {
    auto g = run_cmd(tool + " gen-data --out " + dir + "/data --seed 7 --spec " + dir +
                         "/spec.json",
                     dir);
    REQUIRE(g.code == 0);
    auto a = run_cmd("GRQO_NUM_WORKERS=2 " + tool + " ablate --axis reward-design --data " +
                         dir + "/data --out " + dir + "/sweep_rd",
                     dir);
    INFO(a.out);
    REQUIRE(a.code == 0);
    CHECK(fs::exists(dir + "/sweep_rd/relative/metrics.csv"));
    CHECK(fs::exists(dir + "/sweep_rd/absolute/metrics.csv"));
    CHECK(fs::exists(dir + "/sweep_rd/summary.csv"));
  }

  SECTION("exit codes separate usage, validation, and success") {
    CHECK(run_cmd(tool + " train --bogus-flag", dir).code == 2);
    CHECK(run_cmd(tool + " ablate --axis nonsense --data x --out y", dir).code == 2);
    CHECK(run_cmd(tool + " train --data " + dir + "/missing --mode sft --config " + dir +
                      "/train.json --out " + dir + "/r",
                  dir)
              .code == 3);
    CHECK(run_cmd(tool + " gen-data --out " + dir + "/d --seed 1 --spec " + dir +
                      "/train.json",
                  dir)
              .code == 3);  // wrong schema
    auto g = run_cmd(tool + " gen-data --out " + dir + "/data --seed 7 --spec " + dir +
                         "/spec.json",
                     dir);
    REQUIRE(g.code == 0);
    CHECK(run_cmd(tool + " train --data " + dir + "/data --mode grqo --config " + dir +
                      "/train.json --out " + dir + "/r2",
                  dir)
              .code == 3);  // config says sft, flag says grqo
  }

  fs::remove_all(dir);
}
