// grqo command line: dataset generation, training, evaluation, ablation
// sweeps, and training-curve plots. Every training run directory receives a
// run manifest (command line, resolved config, dataset checksum, build id)
// written before the first step, so any run can be reproduced from its
// artifacts alone.
//
// Exit codes: 0 success, 2 usage, 3 validation (bad config, missing paths,
// schema errors), 4 runtime failure.

#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <climits>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <grqo/evalkit.hpp>
#include <grqo/synthdata.hpp>
#include <grqo/trainer.hpp>

#ifndef GRQO_BUILD_ID
#define GRQO_BUILD_ID "unknown"
#endif

namespace {

namespace fs = std::filesystem;

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kValidation = 3;
constexpr int kRuntime = 4;

std::string utc_now(const char* fmt) {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::strftime(buf, sizeof buf, fmt, &tm);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::invalid_argument("cannot read " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::string quote_arg(const std::string& a) {
  if (a.find_first_of(" \t\"") == std::string::npos) return a;
  std::string q = "\"";
  for (char c : a) {
    if (c == '"' || c == '\\') q += '\\';
    q += c;
  }
  return q + "\"";
}

std::string join_args(const std::vector<std::string>& args) {
  std::string s;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (i) s += ' ';
    s += quote_arg(args[i]);
  }
  return s;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

// The dataset directory is summarized by the CRC of its manifest, which
// already embeds the generator settings, every split seed, and each
// payload's own CRC.
std::uint32_t dataset_checksum(const std::string& data_dir) {
  const std::string bytes = read_file(data_dir + "/manifest.json");
  return grqo::crc32(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size());
}

void require_dir(const std::string& path, const std::string& what) {
  if (!fs::is_directory(path)) throw std::invalid_argument(what + " not found: " + path);
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw std::invalid_argument(what + " not found: " + path);
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out, std::uint64_t seed, const std::string& spec_file) {
  grqo::DatasetSpec spec;
  if (!spec_file.empty()) {
    require_file(spec_file, "spec file");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(spec_file));
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument(std::string("spec file: ") + e.what());
    }
    spec = grqo::spec_from_json(j);
  }
  spec.validate();
  const grqo::Dataset d = grqo::build_splits(spec, seed);
  fs::create_directories(out);
  grqo::save_dataset(out, d);
  std::cout << "wrote " << out << ": " << d.train.scenes.size() << " train / "
            << d.val_id.scenes.size() << " val_id / " << d.val_ood.scenes.size()
            << " val_ood scenes, pools " << d.pool_train.scenes.size() << "/"
            << d.pool_val_id.scenes.size() << "/" << d.pool_val_ood.scenes.size() << ", "
            << spec.num_classes() << " classes, seed " << seed << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train — shared by the subcommand and in-process ablation cells so both
// produce identical run directories.
// ---------------------------------------------------------------------------

struct TrainInvocation {
  std::string data_dir, mode, config_path, out_dir;
  std::string command_line;  // as issued (or as an ablation worker would issue)
};

grqo::TrainConfig load_train_config(const std::string& path, const std::string& mode) {
  require_file(path, "config file");
  nlohmann::json raw;
  try {
    raw = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config file: ") + e.what());
  }
  if (raw.contains("mode") && raw["mode"].is_string() &&
      raw["mode"].get<std::string>() != mode)
    throw std::invalid_argument("config file sets mode \"" + raw["mode"].get<std::string>() +
                                "\" but --mode is \"" + mode + "\"");
  grqo::TrainConfig cfg = grqo::TrainConfig::from_json(raw);
  cfg.mode = mode;
  cfg.validate();
  return cfg;
}

void write_run_manifest(const TrainInvocation& inv, const grqo::TrainConfig& cfg,
                        std::uint32_t data_crc, const std::string& run_id) {
  const std::string path = inv.out_dir + "/run_manifest.json";
  if (fs::exists(path))
    throw std::invalid_argument("refusing to overwrite existing run at " + inv.out_dir);
  nlohmann::json m{{"run_id", run_id},
                   {"command_line", inv.command_line},
                   {"config", cfg.to_json()},
                   {"data_dir", inv.data_dir},
                   {"dataset_checksum_crc32", data_crc},
                   {"build_id", GRQO_BUILD_ID},
                   {"timestamps", {{"started_utc", utc_now("%Y-%m-%dT%H:%M:%SZ")}}}};
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << m.dump(2) << "\n";
}

int run_train(const TrainInvocation& inv) {
  require_dir(inv.data_dir, "data directory");
  const grqo::TrainConfig cfg = load_train_config(inv.config_path, inv.mode);
  const grqo::Dataset data = grqo::load_dataset(inv.data_dir);
  if (cfg.model.num_classes != data.spec.num_classes() ||
      cfg.model.image_size != data.spec.image_size)
    throw std::invalid_argument(
        "config model expects " + std::to_string(cfg.model.num_classes) + " classes / " +
        std::to_string(cfg.model.image_size) + "px but the dataset has " +
        std::to_string(data.spec.num_classes()) + " classes / " +
        std::to_string(data.spec.image_size) + "px");

  const std::uint32_t crc = dataset_checksum(inv.data_dir);
  const std::string run_id =
      inv.mode + "-s" + std::to_string(cfg.seed) + "-" + utc_now("%Y%m%d%H%M%S");
  fs::create_directories(inv.out_dir);
  write_run_manifest(inv, cfg, crc, run_id);

  const grqo::TrainResult res = grqo::train(cfg, data, inv.out_dir);

  std::cout << "run " << run_id << ": " << res.steps.size() << " steps over "
            << res.epochs.size() << " epochs -> " << inv.out_dir << "\n";
  for (const auto& e : res.epochs)
    if (e.evaluated)
      std::cout << "  epoch " << e.epoch << " [" << e.phase << "] loss " << e.mean_loss
                << " val_id ap50 " << e.val_id_ap50 << " map " << e.val_id_map
                << " val_ood ap50 " << e.val_ood_ap50 << " map " << e.val_ood_map << "\n";
  if (res.best_val_id_ap50 >= 0)
    std::cout << "  best epoch " << res.best_epoch << " val_id ap50 " << res.best_val_id_ap50
              << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& split,
             int prompts_per_class, std::uint64_t seed) {
  require_file(ckpt, "checkpoint");
  require_dir(data_dir, "data directory");
  if (prompts_per_class < 1)
    throw std::invalid_argument("--prompts-per-class must be >= 1");

  const grqo::Checkpoint c = grqo::load_checkpoint(ckpt);
  const grqo::ModelParams<float> params = grqo::checkpoint_params(c);
  const grqo::Dataset data = grqo::load_dataset(data_dir);
  const int k = data.spec.num_classes();
  if (params.cfg.num_classes != k || params.cfg.image_size != data.spec.image_size)
    throw std::invalid_argument(
        "checkpoint expects " + std::to_string(params.cfg.num_classes) + " classes / " +
        std::to_string(params.cfg.image_size) + "px but the dataset has " + std::to_string(k) +
        " classes / " + std::to_string(data.spec.image_size) + "px");

  const grqo::Split& target = split == "id" ? data.val_id : data.val_ood;
  const grqo::Split& pool_split = split == "id" ? data.pool_val_id : data.pool_val_ood;
  const grqo::PromptPool pool = grqo::build_pool(pool_split, k);
  const grqo::EvalReport rep = grqo::map_over(params, target, pool_split, pool,
                                              prompts_per_class, grqo::coco_thresholds(), seed);
  const std::string run_id = fs::path(ckpt).stem().string();
  std::cout << grqo::report_csv_header(k) << "\n"
            << grqo::report_csv_row(rep, run_id, k) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct Cell {
  std::string name;
  grqo::TrainConfig cfg;
};

std::string fmt_g(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

std::vector<Cell> make_cells(const std::string& axis, const grqo::TrainConfig& base) {
  std::vector<Cell> cells;
  auto grqo_cfg = [&base] {
    grqo::TrainConfig c = base;
    c.mode = "grqo";
    return c;
  };
  if (axis == "component") {
    grqo::TrainConfig sft = base;
    sft.mode = "sft";
    cells.push_back({"sft", sft});
    grqo::TrainConfig reward_only = grqo_cfg();
    reward_only.beta = 0.0;
    cells.push_back({"reward-only", reward_only});
    grqo::TrainConfig kl_only = grqo_cfg();
    kl_only.alpha = 0.0;
    cells.push_back({"kl-only", kl_only});
    cells.push_back({"grqo", grqo_cfg()});
  } else if (axis == "reward-design") {
    grqo::TrainConfig rel = grqo_cfg();
    rel.reward_norm = "relative";
    cells.push_back({"relative", rel});
    grqo::TrainConfig abs = grqo_cfg();
    abs.reward_norm = "absolute";
    cells.push_back({"absolute", abs});
  } else if (axis == "loss-weights") {
    const double grid[][2] = {{1.0, 0.4},    {1.0, 0.04},   {10.0, 0.04},
                              {1e3, 0.04},   {1e4, 0.04},   {1e3, 0.004}};
    for (const auto& ab : grid) {
      grqo::TrainConfig c = grqo_cfg();
      c.alpha = ab[0];
      c.beta = ab[1];
      cells.push_back({"alpha" + fmt_g(ab[0]) + "_beta" + fmt_g(ab[1]), c});
    }
  } else if (axis == "prompt-count") {
    for (int m : {1, 8, 64}) {
      grqo::TrainConfig c = grqo_cfg();
      c.m_prompts = m;
      cells.push_back({"m" + std::to_string(m), c});
    }
  } else {
    throw std::invalid_argument("unknown ablation axis: " + axis);
  }
  return cells;
}

std::string self_exe_path(const char* argv0) {
  std::error_code ec;
  fs::path p = fs::read_symlink("/proc/self/exe", ec);
  if (!ec) return p.string();
  return argv0;
}

int spawn_worker(const std::string& exe, const std::vector<std::string>& args) {
  std::vector<std::string> argv_s;
  argv_s.push_back(exe);
  argv_s.insert(argv_s.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_s) argv.push_back(s.data());
  argv.push_back(nullptr);
  const pid_t pid = fork();
  if (pid < 0) throw std::runtime_error("ablate: fork failed");
  if (pid == 0) {
    execv(exe.c_str(), argv.data());
    _exit(127);
  }
  return pid;
}

struct EpochRow {
  int epoch = 0;
  std::string phase;
  double loss = 0.0;
  bool evaluated = false;
  double id50 = 0.0, idmap = 0.0, ood50 = 0.0, oodmap = 0.0;
};

std::vector<EpochRow> read_epoch_rows(const std::string& metrics_path) {
  require_file(metrics_path, "metrics file");
  std::ifstream is(metrics_path);
  std::string line;
  std::vector<EpochRow> rows;
  bool header = true;
  while (std::getline(is, line)) {
    if (header) {
      if (line.rfind("kind,", 0) != 0)
        throw std::invalid_argument(metrics_path + " is not a metrics file");
      header = false;
      continue;
    }
    const auto f = split_csv_line(line);
    if (f.size() != 16 || f[0] != "epoch") continue;
    EpochRow r;
    r.epoch = std::stoi(f[2]);
    r.phase = f[3];
    r.loss = std::stod(f[5]);
    if (!f[12].empty()) {
      r.evaluated = true;
      r.id50 = std::stod(f[12]);
      r.idmap = std::stod(f[13]);
      r.ood50 = std::stod(f[14]);
      r.oodmap = std::stod(f[15]);
    }
    rows.push_back(r);
  }
  if (rows.empty()) throw std::invalid_argument(metrics_path + " has no epoch rows");
  return rows;
}

int ablate_workers() {
  const char* env = std::getenv("GRQO_NUM_WORKERS");
  if (!env || !*env) return 1;
  const int w = std::atoi(env);
  return std::max(1, std::min(w, 16));
}

int cmd_ablate(const std::string& axis, const std::string& data_dir, const std::string& out_dir,
               const char* argv0) {
  require_dir(data_dir, "data directory");
  const grqo::Dataset data = grqo::load_dataset(data_dir);

  grqo::TrainConfig base;
  base.model.num_classes = data.spec.num_classes();
  base.model.image_size = data.spec.image_size;
  base.eval_each_epoch = true;

  const std::vector<Cell> cells = make_cells(axis, base);
  fs::create_directories(out_dir);

  // Each cell becomes its own run directory driven through the train
  // subcommand (in-process when GRQO_NUM_WORKERS <= 1, worker processes
  // otherwise), so cell artifacts are indistinguishable from manual runs.
  struct Job {
    TrainInvocation inv;
    std::string cell;
  };
  std::vector<Job> jobs;
  for (const auto& cell : cells) {
    const std::string cell_dir = (fs::path(out_dir) / cell.name).string();
    fs::create_directories(cell_dir);
    const std::string cfg_path = cell_dir + "/config_in.json";
    {
      std::ofstream os(cfg_path, std::ios::trunc);
      if (!os) throw std::runtime_error("cannot write " + cfg_path);
      os << cell.cfg.to_json().dump(2) << "\n";
    }
    TrainInvocation inv;
    inv.data_dir = data_dir;
    inv.mode = cell.cfg.mode;
    inv.config_path = cfg_path;
    inv.out_dir = cell_dir;
    inv.command_line = join_args({"grqo", "train", "--data", data_dir, "--mode", cell.cfg.mode,
                                  "--config", cfg_path, "--out", cell_dir});
    jobs.push_back({inv, cell.name});
  }

  const int workers = ablate_workers();
  if (workers <= 1) {
    for (const auto& job : jobs) {
      std::cout << "[cell " << job.cell << "]\n";
      run_train(job.inv);
    }
  } else {
    const std::string exe = self_exe_path(argv0);
    std::size_t next = 0;
    int running = 0;
    std::map<pid_t, std::string> live;
    std::vector<std::string> failed;
    while (next < jobs.size() || running > 0) {
      while (running < workers && next < jobs.size()) {
        const auto& job = jobs[next++];
        const pid_t pid = spawn_worker(
            exe, {"train", "--data", job.inv.data_dir, "--mode", job.inv.mode, "--config",
                  job.inv.config_path, "--out", job.inv.out_dir});
        live[pid] = job.cell;
        ++running;
      }
      int status = 0;
      const pid_t done = waitpid(-1, &status, 0);
      if (done < 0) throw std::runtime_error("ablate: waitpid failed");
      const auto it = live.find(done);
      if (it == live.end()) continue;
      const bool ok = WIFEXITED(status) && WEXITSTATUS(status) == 0;
      std::cout << "[cell " << it->second << "] " << (ok ? "done" : "FAILED") << "\n";
      if (!ok) failed.push_back(it->second);
      live.erase(it);
      --running;
    }
    if (!failed.empty())
      throw std::runtime_error("ablate: cell " + failed.front() + " failed");
  }

  // Summary over the cells' final evaluated epochs, read back from each
  // cell's metrics.csv.
  const std::string summary_path = (fs::path(out_dir) / "summary.csv").string();
  std::ofstream os(summary_path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + summary_path);
  os << "cell,mode,alpha,beta,reward_norm,m_prompts,final_epoch,val_id_ap50,val_id_map,"
        "val_ood_ap50,val_ood_map\n";
  os.precision(10);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto rows = read_epoch_rows(jobs[i].inv.out_dir + "/metrics.csv");
    const EpochRow* last = nullptr;
    for (const auto& r : rows)
      if (r.evaluated) last = &r;
    if (!last) throw std::runtime_error("ablate: cell " + cells[i].name + " has no eval rows");
    const auto& c = cells[i].cfg;
    os << cells[i].name << ',' << c.mode << ',' << c.alpha << ',' << c.beta << ','
       << c.reward_norm << ',' << c.m_prompts << ',' << last->epoch << ',' << last->id50 << ','
       << last->idmap << ',' << last->ood50 << ',' << last->oodmap << "\n";
  }
  os.close();
  std::cout << "wrote " << summary_path << " (" << cells.size() << " cells)\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// plot — consumes run directories' metrics.csv only.
// ---------------------------------------------------------------------------

struct RunCurve {
  std::string name;
  std::vector<EpochRow> rows;
};

int cmd_plot(const std::vector<std::string>& runs, const std::string& out) {
  const std::string ext = fs::path(out).extension().string();
  if (ext != ".svg" && ext != ".csv")
    throw std::invalid_argument("--out must end in .svg or .csv");

  std::vector<RunCurve> curves;
  for (const auto& dir : runs) {
    require_dir(dir, "run directory");
    RunCurve c;
    c.name = fs::path(dir).filename().string();
    if (c.name.empty()) c.name = fs::path(dir).parent_path().filename().string();
    c.rows = read_epoch_rows((fs::path(dir) / "metrics.csv").string());
    curves.push_back(std::move(c));
  }

  if (ext == ".csv") {
    std::ofstream os(out, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + out);
    os << "run,epoch,phase,mean_loss,val_id_ap50,val_id_map,val_ood_ap50,val_ood_map\n";
    os.precision(10);
    for (const auto& c : curves)
      for (const auto& r : c.rows) {
        os << c.name << ',' << r.epoch << ',' << r.phase << ',' << r.loss << ',';
        if (r.evaluated)
          os << r.id50 << ',' << r.idmap << ',' << r.ood50 << ',' << r.oodmap;
        else
          os << ",,,";
        os << "\n";
      }
    std::cout << "wrote " << out << "\n";
    return kOk;
  }

  // SVG: validation AP50 per epoch, one solid polyline per run (in-domain)
  // plus a dashed one (out-of-domain).
  int emin = INT_MAX, emax = INT_MIN;
  double ymax = 0.0;
  bool any = false;
  for (const auto& c : curves)
    for (const auto& r : c.rows)
      if (r.evaluated) {
        any = true;
        emin = std::min(emin, r.epoch);
        emax = std::max(emax, r.epoch);
        ymax = std::max({ymax, r.id50, r.ood50});
      }
  if (!any) throw std::invalid_argument("no evaluated epochs in the given runs");
  if (emax == emin) emax = emin + 1;
  ymax = std::max(ymax * 1.08, 0.1);

  const double W = 800, H = 480, L = 64, R = 24, T = 40, B = 48;
  auto sx = [&](double e) { return L + (e - emin) / double(emax - emin) * (W - L - R); };
  auto sy = [&](double v) { return H - B - v / ymax * (H - T - B); };
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  const int ncolor = 6;

  std::ostringstream svg;
  svg.precision(6);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << W << " " << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
      << "validation AP50 by epoch</text>\n";
  // Axes and ticks.
  svg << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = ymax * i / 4.0, y = sy(v);
    svg << "<line x1=\"" << L - 4 << "\" y1=\"" << y << "\" x2=\"" << W - R << "\" y2=\"" << y
        << "\" stroke=\"#ddd\"/>\n<text x=\"" << L - 8 << "\" y=\"" << y + 4
        << "\" text-anchor=\"end\">" << int(v * 1000) / 1000.0 << "</text>\n";
  }
  const int stride = std::max(1, (emax - emin) / 10);
  for (int e = emin; e <= emax; e += stride) {
    const double x = sx(e);
    svg << "<line x1=\"" << x << "\" y1=\"" << H - B << "\" x2=\"" << x << "\" y2=\""
        << H - B + 4 << "\" stroke=\"black\"/>\n<text x=\"" << x << "\" y=\"" << H - B + 18
        << "\" text-anchor=\"middle\">" << e << "</text>\n";
  }
  svg << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10
      << "\" text-anchor=\"middle\">epoch</text>\n";

  for (std::size_t i = 0; i < curves.size(); ++i) {
    const char* color = colors[i % ncolor];
    for (int pass = 0; pass < 2; ++pass) {  // 0: val_id solid, 1: val_ood dashed
      std::ostringstream pts;
      for (const auto& r : curves[i].rows)
        if (r.evaluated)
          pts << sx(r.epoch) << "," << sy(pass == 0 ? r.id50 : r.ood50) << " ";
      svg << "<polyline points=\"" << pts.str() << "\" fill=\"none\" stroke=\"" << color
          << "\" stroke-width=\"2\""
          << (pass == 1 ? " stroke-dasharray=\"6 4\"" : "") << "/>\n";
      for (const auto& r : curves[i].rows)
        if (r.evaluated)
          svg << "<circle cx=\"" << sx(r.epoch) << "\" cy=\""
              << sy(pass == 0 ? r.id50 : r.ood50) << "\" r=\"2.5\" fill=\"" << color
              << "\"/>\n";
    }
    const double ly = T + 8 + 16 * double(i);
    svg << "<line x1=\"" << L + 10 << "\" y1=\"" << ly << "\" x2=\"" << L + 34 << "\" y2=\""
        << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n<text x=\"" << L + 40
        << "\" y=\"" << ly + 4 << "\">" << curves[i].name << " (solid id, dashed ood)</text>\n";
  }
  svg << "</svg>\n";

  std::ofstream os(out, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + out);
  os << svg.str();
  std::cout << "wrote " << out << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"grqo: prompted shape detection experiments"};
  app.require_subcommand(1);

  std::string out_dir, data_dir, spec_file, mode, config_file, ckpt, split, plot_out;
  std::uint64_t seed = 0;
  int prompts_per_class = 1;
  std::string axis;
  std::vector<std::string> run_dirs;

  auto* gen = app.add_subcommand("gen-data", "generate a dataset directory");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--seed", seed, "master seed")->required();
  gen->add_option("--spec", spec_file, "dataset spec JSON (defaults if omitted)");

  auto* tr = app.add_subcommand("train", "train a detector");
  tr->add_option("--data", data_dir, "dataset directory")->required();
  tr->add_option("--mode", mode, "sft or grqo")
      ->required()
      ->check(CLI::IsMember({"sft", "grqo"}));
  tr->add_option("--config", config_file, "training config JSON")->required();
  tr->add_option("--out", out_dir, "run output directory")->required();

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a validation split");
  ev->add_option("--ckpt", ckpt, "checkpoint file")->required();
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--split", split, "id or ood")
      ->required()
      ->check(CLI::IsMember({"id", "ood"}));
  ev->add_option("--prompts-per-class", prompts_per_class, "prompt ensemble size")->required();
  ev->add_option("--seed", seed, "prompt draw seed")->required();

  auto* ab = app.add_subcommand("ablate", "run an ablation sweep");
  ab->add_option("--axis", axis, "component|reward-design|loss-weights|prompt-count")
      ->required()
      ->check(CLI::IsMember({"component", "reward-design", "loss-weights", "prompt-count"}));
  ab->add_option("--data", data_dir, "dataset directory")->required();
  ab->add_option("--out", out_dir, "sweep output directory")->required();

  auto* pl = app.add_subcommand("plot", "emit curves from run directories' metrics.csv");
  pl->add_option("--runs", run_dirs, "run directories")->required()->expected(-1);
  pl->add_option("--out", plot_out, "output file (.svg or .csv)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(out_dir, seed, spec_file);
    if (tr->parsed()) {
      TrainInvocation inv;
      inv.data_dir = data_dir;
      inv.mode = mode;
      inv.config_path = config_file;
      inv.out_dir = out_dir;
      std::vector<std::string> args(argv, argv + argc);
      inv.command_line = join_args(args);
      return run_train(inv);
    }
    if (ev->parsed()) return cmd_eval(ckpt, data_dir, split, prompts_per_class, seed);
    if (ab->parsed()) return cmd_ablate(axis, data_dir, out_dir, argv[0]);
    if (pl->parsed()) return cmd_plot(run_dirs, plot_out);
  } catch (const grqo::SchemaError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
