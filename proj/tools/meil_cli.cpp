// meil: generate datasets, train incremental radiance fields, evaluate
// checkpoints and build comparison reports.
//
// Exit codes: 0 ok, 2 configuration/input error, 3 numeric divergence, 4 I/O error.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "CLI11.hpp"
#include "meil/checkpoint.hpp"
#include "meil/config.hpp"
#include "meil/dataset_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr const char* kResolvedConfig = "config.resolved.json";
constexpr const char* kProvenance = "provenance.json";
constexpr const char* kCheckpoint = "checkpoint.bin";
constexpr const char* kHeldout = "heldout";  // evaluation-only views inside a dataset directory

enum ExitCode { kOk = 0, kConfigExit = 2, kNumericExit = 3, kIoExit = 4 };

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool out_required) {
  cmd->add_option("--config", o.config, "JSON experiment config (defaults: CI-scale reference benchmark)");
  cmd->add_option("--seed", o.seed, "Override the config seed");
  cmd->add_flag("--deterministic", o.deterministic, "Omit wall-clock timings from CSV outputs so reruns are byte-identical");
  auto* out = cmd->add_option("--out", o.out, "Output directory");
  if (out_required) out->required();
}

meil::ExperimentConfig resolve_config(const CommonOptions& o) {
  meil::ExperimentConfig cfg = o.config.empty() ? meil::parse_config(json::object()) : meil::load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (std::getenv("MEIL_THREADS")) cfg.threads = meil::thread_count();
  return cfg;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw meil::IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os || !(os << text)) throw meil::IoError("cannot write " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw meil::IoError("missing file " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw meil::IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

/// Run configuration, with the method/past-ray source fixed when the run was created.
meil::ExperimentConfig run_config(const fs::path& run) {
  const fs::path p = run / kResolvedConfig;
  if (!fs::exists(p)) throw meil::IoError("missing " + p.string() + " (not a training run directory?)");
  meil::ExperimentConfig cfg = meil::load_config(p.string());
  if (std::getenv("MEIL_THREADS")) cfg.threads = meil::thread_count();
  return cfg;
}

meil::TrainConfig train_config(const meil::ExperimentConfig& cfg, int tasks) {
  meil::TrainConfig t = cfg.resolved_train();
  if (cfg.method == meil::Method::Replay && t.replay_capacity == 0) t.replay_capacity = meil::matched_replay_capacity(t, tasks);
  return t;
}

void write_metrics_csv(const fs::path& path, const meil::MetricsLog& log) {
  std::string s = "method,trained,evaluated,psnr_db,msssim,aux_bytes,wall_s\n";
  for (const auto& e : log.entries)
    s += e.method + "," + std::to_string(e.trained) + "," + std::to_string(e.evaluated) + "," + fmt(e.psnr_db) + "," + fmt(e.msssim) + "," +
         std::to_string(e.aux_bytes) + "," + fmt(e.wall_s, 3) + "\n";
  write_text(path, s);
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

int cmd_generate(const CommonOptions& o) {
  const meil::ExperimentConfig cfg = resolve_config(o);
  const fs::path out(o.out);
  std::clog << "generate: " << cfg.trajectory.tasks << " tasks x " << cfg.trajectory.views << " views at " << cfg.camera.width << "x"
            << cfg.camera.height << " -> " << out << "\n";
  const auto tasks =
      meil::build_tasks(cfg.scene, cfg.trajectory, cfg.camera, cfg.train.samples.z_near, cfg.train.samples.z_far);
  meil::save_dataset(tasks, out);
  json prov = {{"tool", "meil generate"},
               {"version", kVersion},
               {"seed", cfg.seed},
               {"config_hash", meil::hex64(meil::config_hash(cfg))},
               {"dataset_hash", meil::hex64(meil::dataset_hash(out))}};
  if (cfg.heldout_eval) {
    meil::save_dataset(meil::build_heldout_tasks(cfg.scene, cfg.trajectory, cfg.camera, cfg.train.samples.z_near, cfg.train.samples.z_far),
                       out / kHeldout);
    prov["heldout_hash"] = meil::hex64(meil::dataset_hash(out / kHeldout));
  }
  write_text(out / kResolvedConfig, meil::config_to_json(cfg).dump(2) + "\n");
  write_text(out / kProvenance, prov.dump(2) + "\n");
  return kOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Evaluation views for a run: the training views, or the held-out set stored next to them.
std::vector<meil::Task> evaluation_tasks(const meil::ExperimentConfig& cfg, const fs::path& data, const std::vector<meil::Task>& train) {
  if (!cfg.heldout_eval) return {};
  const fs::path dir = data / kHeldout;
  if (!fs::exists(dir)) throw meil::IoError("held-out evaluation requested but " + dir.string() + " is missing (generate with eval.split = heldout)");
  auto held = meil::load_dataset(dir);
  if (held.size() != train.size()) throw meil::IoError("held-out set in " + dir.string() + " has a different task count");
  return held;
}

/// Trains one method into `run`; the config already names that single method.
int train_one(const CommonOptions& o, meil::ExperimentConfig cfg, const fs::path& data, const fs::path& run, bool resume) {
  const auto tasks = meil::load_dataset(data);
  const auto evals = evaluation_tasks(cfg, data, tasks);
  const std::string data_hash = meil::hex64(meil::dataset_hash(data));
  if (tasks.front().intr.width != cfg.camera.width || tasks.front().intr.height != cfg.camera.height)
    std::clog << "train: note: dataset resolution differs from the config camera; using the dataset's\n";
  const meil::TrainConfig tcfg = train_config(cfg, static_cast<int>(tasks.size()));
  const std::string cfg_hash = meil::hex64(meil::config_hash(cfg));

  ensure_dir(run);
  meil::MethodState state;
  meil::MetricsLog log;
  const fs::path ckpt = run / kCheckpoint;
  if (resume && fs::exists(ckpt)) {
    const json prov = read_json(run / kProvenance);
    if (prov.value("config_hash", "") != cfg_hash) throw meil::ConfigError("resume: config differs from the one the run was started with");
    if (prov.value("dataset_hash", "") != data_hash) throw meil::ConfigError("resume: dataset differs from the one the run was started with");
    std::tie(state, log) = meil::load_checkpoint(ckpt);
    if (state.kind != cfg.method) throw meil::ConfigError("resume: checkpoint holds a different method");
    cfg.train.arch.validate(state.nerf);
    std::clog << "train: resuming after task " << state.tasks_trained << "\n";
  } else {
    state = meil::make_state(cfg.method, tcfg);
  }
  write_text(run / kResolvedConfig, meil::config_to_json(cfg).dump(2) + "\n");
  const json prov = {{"tool", "meil train"},
                     {"version", kVersion},
                     {"method", meil::method_name(cfg.method)},
                     {"seed", cfg.seed},
                     {"config_hash", cfg_hash},
                     {"dataset", fs::absolute(data).lexically_normal().string()},
                     {"dataset_hash", data_hash},
                     {"evaluation", cfg.heldout_eval ? "heldout" : "train"}};
  write_text(run / kProvenance, prov.dump(2) + "\n");

  json timings = json::array();
  meil::SequenceHooks hooks;
  hooks.progress = [](const meil::IterationInfo& it) {
    const int every = std::max(1, it.total / 10);
    if ((it.iteration + 1) % every == 0 || it.iteration + 1 == it.total)
      std::clog << "  task " << it.task << "  " << (it.iteration + 1) << "/" << it.total << "  loss " << it.loss << "\n";
  };
  hooks.after_task = [&](const meil::MethodState& s, const meil::MetricsLog& l) {
    meil::MetricsLog stored = l;
    for (auto& e : stored.entries) {
      if (e.trained == s.tasks_trained) timings.push_back({{"task", e.trained}, {"wall_s", e.wall_s}});
      if (o.deterministic) e.wall_s = 0.0;
    }
    meil::save_checkpoint(ckpt, s, stored);
    write_metrics_csv(run / "metrics.csv", stored);
    const auto& last = stored.entries.back();
    std::clog << "train: " << meil::method_name(s.kind) << " finished task " << s.tasks_trained << "; task-1 PSNR "
              << fmt(stored.at(s.tasks_trained, 1).psnr_db, 2) << " dB, latest-task PSNR " << fmt(last.psnr_db, 2) << " dB\n";
  };
  std::clog << "train: " << meil::method_name(cfg.method) << " on " << tasks.size() << " tasks, seed " << cfg.seed << ", " << tcfg.threads
            << " thread(s)\n";
  log = meil::run_sequence(tasks, state, tcfg, hooks, std::move(log), evals);
  write_text(run / "timings.json", timings.dump(2) + "\n");
  return kOk;
}

std::string shell_quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

int exit_status(int raw) {
  if (raw == -1 || !WIFEXITED(raw)) return kIoExit;
  return WEXITSTATUS(raw);
}

int cmd_train(const CommonOptions& o, const std::string& data, const std::string& method_list, const std::string& past_rays, bool resume,
              bool parallel) {
  meil::ExperimentConfig cfg = resolve_config(o);
  if (!method_list.empty()) {
    cfg.methods.clear();
    std::stringstream ss(method_list);
    for (std::string name; std::getline(ss, name, ',');) {
      const meil::Method m = meil::parse_method(name);
      if (std::find(cfg.methods.begin(), cfg.methods.end(), m) != cfg.methods.end()) throw meil::ConfigError("--method: '" + name + "' listed twice");
      cfg.methods.push_back(m);
    }
    if (cfg.methods.empty()) throw meil::ConfigError("--method: no method given");
  }
  if (!past_rays.empty()) cfg.train.past_rays = meil::detail::parse_past_rays(past_rays);
  const fs::path out(o.out);
  const std::vector<meil::Method> methods = cfg.methods;
  auto single = [&](meil::Method m) {
    meil::ExperimentConfig one = cfg;
    one.method = m;
    one.methods = {m};
    return one;
  };
  if (methods.size() == 1) return train_one(o, single(methods.front()), data, out, resume);

  // One sub-run per method. A divergence stops only that method.
  const fs::path data_dir(data);
  meil::load_dataset(data_dir);  // fail fast on a missing dataset before any method starts
  std::vector<int> codes(methods.size(), kOk);
  if (parallel) {
    const std::string self = fs::read_symlink("/proc/self/exe").string();
    std::vector<std::thread> workers;
    for (std::size_t i = 0; i < methods.size(); ++i) {
      const fs::path run = out / meil::method_name(methods[i]);
      ensure_dir(run);
      const fs::path cfg_file = run / "config.requested.json";
      write_text(cfg_file, meil::config_to_json(single(methods[i])).dump(2) + "\n");
      std::string cmd = shell_quote(self) + " train --config " + shell_quote(cfg_file.string()) + " --data " + shell_quote(data) + " --out " +
                        shell_quote(run.string()) + (o.deterministic ? " --deterministic" : "") + (resume ? " --resume" : "") + " 2>" +
                        shell_quote((run / "train.log").string());
      workers.emplace_back([&codes, i, cmd] { codes[i] = exit_status(std::system(cmd.c_str())); });
    }
    for (auto& w : workers) w.join();
  } else {
    for (std::size_t i = 0; i < methods.size(); ++i) {
      try {
        codes[i] = train_one(o, single(methods[i]), data_dir, out / meil::method_name(methods[i]), resume);
      } catch (const meil::NumericError& e) {
        std::cerr << "numeric divergence in " << meil::method_name(methods[i]) << ": " << e.what() << "; continuing with the next method\n";
        codes[i] = kNumericExit;
      }
    }
  }
  int worst = kOk;
  for (std::size_t i = 0; i < methods.size(); ++i) {
    std::clog << "train: " << meil::method_name(methods[i]) << " -> " << (codes[i] == kOk ? "ok" : "exit " + std::to_string(codes[i])) << "\n";
    if (codes[i] != kOk && (worst == kOk || codes[i] == kNumericExit)) worst = codes[i];
  }
  return worst;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

std::string dataset_of(const fs::path& run, const std::string& data) {
  if (!data.empty()) return data;
  return read_json(run / kProvenance).at("dataset").get<std::string>();
}

int cmd_eval(const CommonOptions& o, const std::string& run_dir, const std::string& data) {
  const fs::path run(run_dir);
  const meil::ExperimentConfig cfg = run_config(run);
  auto [state, log] = meil::load_checkpoint(run / kCheckpoint);
  const fs::path data_dir = dataset_of(run, data);
  const auto train_tasks = meil::load_dataset(data_dir);
  const auto held = evaluation_tasks(cfg, data_dir, train_tasks);
  const auto& tasks = held.empty() ? train_tasks : held;
  if (state.tasks_trained > static_cast<int>(tasks.size())) throw meil::ConfigError("eval: checkpoint has more tasks than the dataset");
  const fs::path out = o.out.empty() ? run / "eval" : fs::path(o.out);
  ensure_dir(out);
  const meil::Trainer trainer(train_config(cfg, static_cast<int>(tasks.size())));
  std::string csv = "method,trained,evaluated,view,psnr_db,msssim\n";
  for (int t = 1; t <= state.tasks_trained; ++t) {
    const meil::Task& task = tasks[static_cast<std::size_t>(t - 1)];
    const auto renders = trainer.render_task(state, task);
    for (std::size_t v = 0; v < renders.size(); ++v) {
      csv += std::string(meil::method_name(state.kind)) + "," + std::to_string(state.tasks_trained) + "," + std::to_string(t) + "," +
             std::to_string(v) + "," + fmt(meil::psnr(renders[v], task.views[v].image)) + "," +
             fmt(meil::ms_ssim(renders[v], task.views[v].image)) + "\n";
      meil::write_png(out / ("render_t" + std::to_string(t) + "_v" + std::to_string(v) + ".png"), renders[v]);
    }
  }
  write_text(out / "eval.csv", csv);
  std::clog << "eval: wrote " << (out / "eval.csv") << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

meil::ImageBuffer tile(const std::vector<std::vector<const meil::ImageBuffer*>>& rows, int gap) {
  const int w = rows.front().front()->width, h = rows.front().front()->height;
  const int cols = static_cast<int>(rows.front().size());
  meil::ImageBuffer grid(cols * w + (cols - 1) * gap, static_cast<int>(rows.size()) * h + (static_cast<int>(rows.size()) - 1) * gap);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          grid.set_pixel(static_cast<int>(r) * (h + gap) + y, static_cast<int>(c) * (w + gap) + x, rows[r][c]->pixel(y, x));
  return grid;
}

int cmd_report(const CommonOptions& o, const std::vector<std::string>& runs, const std::string& data) {
  const fs::path out(o.out);
  ensure_dir(out);
  std::string final_table = "method,tasks,avg_psnr_db,avg_msssim,task1_psnr_after_task1_db,task1_psnr_final_db,aux_bytes\n";
  std::string task1 = "method,trained,psnr_db,msssim\n";
  std::string memory = "method,trained,aux_bytes\n";
  std::string per_task = "method,trained,evaluated,psnr_db,msssim\n";

  std::vector<meil::Task> tasks;
  std::vector<std::vector<meil::ImageBuffer>> recon;  // [run][task] middle view
  std::string dataset_hash;
  for (const std::string& r : runs) {
    const fs::path run(r);
    const std::string hash = read_json(run / kProvenance).value("dataset_hash", "");
    if (dataset_hash.empty()) dataset_hash = hash;
    else if (hash != dataset_hash) throw meil::ConfigError("report: run " + r + " was trained on a different dataset; refusing to aggregate");
    const auto [state, log] = meil::load_checkpoint(run / kCheckpoint);
    if (state.tasks_trained < 1) throw meil::ConfigError("report: run " + r + " has no trained tasks");
    const std::string name = meil::method_name(state.kind);
    const int T = state.tasks_trained;
    double avg_ms = 0.0;
    for (int t = 1; t <= T; ++t) avg_ms += log.at(T, t).msssim / T;
    final_table += name + "," + std::to_string(T) + "," + fmt(log.average_psnr(T)) + "," + fmt(avg_ms) + "," + fmt(log.at(1, 1).psnr_db) +
                   "," + fmt(log.at(T, 1).psnr_db) + "," + std::to_string(log.at(T, 1).aux_bytes) + "\n";
    for (int k = 1; k <= T; ++k) {
      task1 += name + "," + std::to_string(k) + "," + fmt(log.at(k, 1).psnr_db) + "," + fmt(log.at(k, 1).msssim) + "\n";
      memory += name + "," + std::to_string(k) + "," + std::to_string(log.at(k, 1).aux_bytes) + "\n";
    }
    for (const auto& e : log.entries)
      per_task += e.method + "," + std::to_string(e.trained) + "," + std::to_string(e.evaluated) + "," + fmt(e.psnr_db) + "," +
                  fmt(e.msssim) + "\n";

    if (tasks.empty()) tasks = meil::load_dataset(dataset_of(run, data));
    const meil::ExperimentConfig cfg = run_config(run);
    const meil::Trainer trainer(train_config(cfg, static_cast<int>(tasks.size())));
    std::vector<meil::ImageBuffer> mine;
    for (int t = 1; t <= T; ++t) {
      meil::Task one = tasks[static_cast<std::size_t>(t - 1)];
      const meil::View mid = one.views[one.views.size() / 2];
      one.views = {mid, mid};
      mine.push_back(trainer.render_task(state, one).front());
    }
    recon.push_back(std::move(mine));
  }
  write_text(out / "final_table.csv", final_table);
  write_text(out / "task1_over_time.csv", task1);
  write_text(out / "memory_vs_T.csv", memory);
  write_text(out / "per_task.csv", per_task);

  // Rows: tasks. Columns: ground truth, then each run's reconstruction (black if not trained).
  const meil::ImageBuffer blank(tasks.front().intr.width, tasks.front().intr.height);
  std::vector<std::vector<const meil::ImageBuffer*>> rows;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    std::vector<const meil::ImageBuffer*> row{&tasks[t].views[tasks[t].views.size() / 2].image};
    for (const auto& run : recon) row.push_back(t < run.size() ? &run[t] : &blank);
    rows.push_back(std::move(row));
  }
  meil::write_png(out / "grid.png", tile(rows, 2));
  std::clog << "report: wrote " << runs.size() << " run(s) to " << out << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Incremental radiance-field training with a ray generator and self-distillation"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  CommonOptions gen_o, train_o, eval_o, report_o;
  auto* gen = app.add_subcommand("generate", "Render the synthetic task sequence to a dataset directory");
  add_common(gen, gen_o, true);

  auto* train = app.add_subcommand("train", "Train one method over the task sequence");
  add_common(train, train_o, true);
  std::string train_data, train_method, train_past;
  bool resume = false, parallel = false;
  train->add_option("--data", train_data, "Dataset directory written by 'generate'")->required();
  train->add_option("--method", train_method,
                    "Comma-separated list of meil | incre | joint | ewc | packnet | replay (overrides the config); "
                    "several methods train into <out>/<method>");
  train->add_flag("--parallel-methods", parallel, "Train several methods concurrently, one process each");
  train->add_option("--past-rays", train_past, "generator | ground_truth | random (overrides the config)");
  train->add_flag("--resume", resume, "Continue from the run's checkpoint if present");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on every trained task");
  add_common(eval, eval_o, false);
  std::string eval_run, eval_data;
  eval->add_option("--run", eval_run, "Training run directory")->required();
  eval->add_option("--data", eval_data, "Dataset directory (default: the one recorded at training time)");

  auto* report = app.add_subcommand("report", "Build comparison CSVs and a reconstruction grid from runs");
  add_common(report, report_o, true);
  std::vector<std::string> report_runs;
  std::string report_data;
  report->add_option("runs", report_runs, "Training run directories")->required();
  report->add_option("--data", report_data, "Dataset directory (default: the one recorded by the first run)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigExit;
  }

  try {
    if (*gen) return cmd_generate(gen_o);
    if (*train) return cmd_train(train_o, train_data, train_method, train_past, resume, parallel);
    if (*eval) return cmd_eval(eval_o, eval_run, eval_data);
    if (*report) return cmd_report(report_o, report_runs, report_data);
  } catch (const meil::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const meil::DomainError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kConfigExit;
  } catch (const meil::NumericError& e) {
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return kNumericExit;
  } catch (const meil::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIoExit;
  }
  return kOk;
}
