#pragma once

// Subcommands of the cgdmer tool. run_cli() is the whole program; main()
// only forwards argv so tests can drive it in-process.

#include <malloc.h>

#include <CLI11.hpp>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "cgdmer/app/pipeline.hpp"
#include "cgdmer/util/digest.hpp"
#include "cgdmer/verify/suites.hpp"

namespace cgdmer::app {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Keeps freed activation buffers in the heap instead of returning them to
/// the kernel after every step; page faults were ~10% of a training step.
inline void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
}

struct RunError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- configuration from flags ------------------------------------------------

/// --config plus one --<dotted.key> flag per config field, applied in the
/// order given after the file is loaded.
struct ConfigFlags {
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    train::TrainConfig probe;
    train::visit_fields(probe, [&](const char* key, auto&) {
      const std::string k = key;
      cmd->add_option_function<std::string>("--" + k, [this, k](const std::string& v) { overrides.emplace_back(k, v); },
                                            "override " + k)
          ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    });
  }

  bool overridden(const std::string& key) const {
    for (const auto& [k, v] : overrides)
      if (k == key) return true;
    return false;
  }

  train::TrainConfig resolve() const {
    train::TrainConfig c = config_path.empty() ? train::TrainConfig{} : train::load_config(config_path);
    for (const auto& [k, v] : overrides) train::apply_override(c, k, v);
    return c;
  }

  /// A checkpoint's config with only the keys that cannot change the model or
  /// the split overridden.
  train::TrainConfig over_checkpoint(train::TrainConfig c) const {
    static const std::vector<std::string> prefixes{"eval.", "data.path", "train.out_dir", "train.epochs",
                                                   "train.checkpoint_every"};
    for (const auto& [k, v] : overrides) {
      bool ok = false;
      for (const auto& p : prefixes) ok = ok || k.rfind(p, 0) == 0;
      if (!ok) throw train::ConfigError("'" + k + "' cannot be changed when loading a checkpoint");
      train::apply_override(c, k, v);
    }
    return c;
  }
};

inline json manifest(const std::string& command, const train::TrainConfig& cfg, const std::string& dataset,
                     json extra = json::object()) {
  json m{{"command", command},
         {"config", train::to_json(cfg)},
         {"config_digest", eval::config_digest(cfg)},
         {"seeds", {{"seed", cfg.seed}, {"split_seed", cfg.split_seed}}}};
  if (!dataset.empty()) m["dataset"] = {{"path", dataset}, {"git_blob_sha1", util::git_blob_sha1(dataset)}};
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = *it;
  return m;
}

inline void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw RunError("cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw RunError("error while writing " + path);
}

inline data::Dataset load_dataset(const train::TrainConfig& cfg) {
  if (cfg.dataset.empty()) throw train::ConfigError("no dataset: pass --data or set data.path");
  return data::read_dataset(cfg.dataset);
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw RunError("cannot create directory " + dir + ": " + ec.message());
}

inline std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(prec) << v;
  return s.str();
}

// ---- trials ------------------------------------------------------------------

struct Trial {
  std::string label;
  train::TrainConfig cfg;
  TrialResult result;
};

/// Runs the trials on `workers` threads. Each trial owns its model, RNG and
/// corpus, so results do not depend on the worker count.
inline void run_trials(std::vector<Trial>& trials, const data::Dataset& ds, std::size_t workers, std::ostream& log) {
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  auto work = [&] {
    for (std::size_t i; (i = next++) < trials.size();) {
      try {
        trials[i].result = run_trial(trials[i].cfg, ds);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
        next = trials.size();
        return;
      }
      std::lock_guard<std::mutex> lock(mu);
      log << "  " << trials[i].label << " seed " << trials[i].cfg.seed << ": zero-shot " << fmt(trials[i].result.zero_shot)
          << ", probe@1% " << fmt(trials[i].result.probe_1pct) << "\n"
          << std::flush;
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, trials.size()));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

/// Dataset for ablate/sweep: data.path when set, otherwise a fresh synthetic
/// corpus written into the output directory so the manifest can digest it.
inline std::string trial_dataset(train::TrainConfig& cfg, std::size_t count) {
  if (!cfg.dataset.empty()) return cfg.dataset;
  cfg.dataset = (fs::path(cfg.out_dir) / "data.ndjson").string();
  data::write_dataset(synthetic_dataset(count, cfg.seed, cfg.leads, cfg.length), cfg.dataset);
  return cfg.dataset;
}

// ---- commands ----------------------------------------------------------------

inline int cmd_gen(const ConfigFlags& flags, std::size_t count, const std::string& out_path, std::ostream& out) {
  train::TrainConfig cfg = flags.resolve();
  cfg.validate();
  if (count == 0) throw train::ConfigError("--count must be >= 1");
  const auto parent = fs::path(out_path).parent_path();
  if (!parent.empty()) ensure_dir(parent.string());
  data::write_dataset(synthetic_dataset(count, cfg.seed, cfg.leads, cfg.length), out_path);
  cfg.dataset = out_path;
  write_json(out_path + ".manifest.json", manifest("gen", cfg, out_path, {{"count", count}}));
  out << "wrote " << count << " records (" << cfg.leads << "x" << cfg.length << ") to " << out_path << "\n";
  return 0;
}

inline int cmd_pretrain(const ConfigFlags& flags, const std::string* resume, std::uint64_t stop_after, std::ostream& out) {
  State st;
  train::TrainConfig cfg;
  if (resume) {
    const std::string path =
        resume->empty() ? (fs::path(flags.resolve().out_dir) / "checkpoint.bin").string() : *resume;
    st = train::load_checkpoint<float>(path);
    cfg = flags.over_checkpoint(st.config);
    cfg.validate();
    if (cfg.epochs != st.config.epochs) {
      // a different epoch count would bend the cosine schedule mid-run
      throw train::ConfigError("train.epochs cannot change on resume");
    }
    st.config = cfg;
    out << "resuming " << path << " at step " << st.step() << "\n";
  } else {
    cfg = flags.resolve();
    cfg.validate();
  }
  Corpus c = resume ? make_corpus(cfg, load_dataset(cfg), st.vocab) : make_corpus(cfg, load_dataset(cfg));
  if (!resume) st = new_state(cfg, c);

  ensure_dir(cfg.out_dir);
  const fs::path dir(cfg.out_dir);
  write_json((dir / "pretrain.manifest.json").string(),
             manifest("pretrain", cfg, cfg.dataset,
                      {{"train_size", c.split.train.size()}, {"vocab_size", c.vocab.size()}, {"resumed_at", st.step()}}));
  c.vocab.save((dir / "vocab.txt").string());

  train::MetricsLog log((dir / "metrics.csv").string(), (dir / "epochs.json").string(), st.step());
  const std::string ckpt = (dir / "checkpoint.bin").string();
  const std::uint64_t bpe = st.batches_per_epoch();
  double epoch_sum = 0;
  std::size_t epoch_steps = 0;
  PretrainOptions opt;
  opt.hooks.on_step = [&](const train::LossReport& r) {
    log.append(r);
    epoch_sum += r.full;
    ++epoch_steps;
  };
  opt.hooks.on_epoch_end = [&](std::uint64_t epoch) {
    train::save_checkpoint(st, ckpt);
    log.write_epochs(bpe);
    out << "epoch " << epoch + 1 << "/" << cfg.epochs << "  mean L_Full " << fmt(epoch_sum / double(epoch_steps))
        << "\n"
        << std::flush;
    epoch_sum = 0;
    epoch_steps = 0;
  };
  opt.hooks.on_checkpoint = [&] { train::save_checkpoint(st, ckpt); };
  if (stop_after) opt.stop_step = stop_after;
  pretrain(st, c, opt);
  log.write_epochs(bpe);
  train::save_checkpoint(st, ckpt);
  out << "checkpoint " << ckpt << " at step " << st.step() << "\n";
  return 0;
}

/// Loads a checkpoint (default <out_dir>/checkpoint.bin) with its corpus.
inline std::pair<State, Corpus> restore(const ConfigFlags& flags, const std::string& checkpoint) {
  const std::string path = checkpoint.empty() ? (fs::path(flags.resolve().out_dir) / "checkpoint.bin").string() : checkpoint;
  State st = train::load_checkpoint<float>(path);
  st.config = flags.over_checkpoint(st.config);
  st.config.validate();
  Corpus c = make_corpus(st.config, load_dataset(st.config), st.vocab);
  return {std::move(st), std::move(c)};
}

inline std::string output_path(const std::string& given, const train::TrainConfig& cfg, const std::string& name) {
  if (!given.empty()) return given;
  ensure_dir(cfg.out_dir);
  return (fs::path(cfg.out_dir) / name).string();
}

inline int cmd_probe(const ConfigFlags& flags, const std::string& checkpoint, std::vector<double> fractions,
                     const std::string& out_path, std::ostream& out) {
  for (double f : fractions)
    if (!(f > 0 && f <= 1)) throw train::ConfigError("--fractions must lie in (0, 1], got " + std::to_string(f));
  auto [st, c] = restore(flags, checkpoint);
  const std::string path = output_path(out_path, st.config, "probe.json");
  const auto results = probe(st, c, fractions);
  json reports = json::array();
  for (std::size_t i = 0; i < results.size(); ++i) {
    json r = eval::eval_report("linear_probe", st.config, results[i].auc, c.class_names());
    r["label_fraction"] = fractions[i];
    r["train_count"] = results[i].train_count;
    reports.push_back(r);
    out << "probe " << fmt(100 * fractions[i], 0) << "% labels (" << results[i].train_count << " train): macro AUC "
        << fmt(results[i].auc.macro) << "\n";
    for (const auto& w : results[i].warnings) out << "  warning: " << w << "\n";
  }
  write_json(path, reports);
  write_json(path + ".manifest.json", manifest("probe", st.config, st.config.dataset, {{"fractions", fractions}}));
  return 0;
}

inline int cmd_zeroshot(const ConfigFlags& flags, const std::string& checkpoint, const std::string& out_path,
                        const std::string& embeddings, std::ostream& out) {
  auto [st, c] = restore(flags, checkpoint);
  const std::string path = output_path(out_path, st.config, "zeroshot.json");
  const auto r = zero_shot(st, c);
  write_json(path, eval::eval_report("zero_shot", st.config, r.auc, c.class_names()));
  if (!embeddings.empty()) eval::export_embeddings(*st.model, samples(c, c.split.test, st.config), embeddings);
  write_json(path + ".manifest.json", manifest("zeroshot", st.config, st.config.dataset, {{"prompts", c.prompts.prompts}}));
  out << "zero-shot macro AUC " << fmt(r.auc.macro) << "\n";
  for (std::size_t k = 0; k < r.auc.per_class.size(); ++k) {
    out << "  " << c.class_names()[k] << ": " << (r.auc.per_class[k] ? fmt(*r.auc.per_class[k]) : "skipped") << "\n";
  }
  return 0;
}

struct TrialOptions {
  std::size_t seeds = 3;
  std::size_t workers = 1;
  std::size_t count = 400;
};

inline int cmd_ablate(const ConfigFlags& flags, const TrialOptions& to, std::ostream& out) {
  train::TrainConfig cfg = flags.resolve();
  if (to.seeds == 0) throw train::ConfigError("--seeds must be >= 1");
  std::vector<Trial> trials;
  for (const auto& v : ablation_ladder()) {
    for (std::size_t s = 0; s < to.seeds; ++s) {
      Trial t{v.name, with_variant(cfg, v), {}};
      t.cfg.seed = cfg.seed + s;
      t.cfg.validate();
      trials.push_back(std::move(t));
    }
  }
  ensure_dir(cfg.out_dir);
  const std::string data_path = trial_dataset(cfg, to.count);
  for (auto& t : trials) t.cfg.dataset = data_path;
  write_json((fs::path(cfg.out_dir) / "ablate.manifest.json").string(),
             manifest("ablate", cfg, data_path, {{"trial_seeds", trials.size() / ablation_ladder().size()}}));
  const data::Dataset ds = data::read_dataset(data_path);
  out << "ablation: " << ablation_ladder().size() << " variants x " << to.seeds << " seeds\n";
  run_trials(trials, ds, to.workers, out);

  std::ofstream csv(fs::path(cfg.out_dir) / "ablation.csv");
  csv << "variant,seed,lambda0,lambda1,lambda2,lambda3,zero_shot_auc,probe_1pct_auc,final_loss\n";
  for (const auto& t : trials) {
    csv << t.label << ',' << t.cfg.seed << ',' << t.cfg.lambda0 << ',' << t.cfg.lambda1 << ',' << t.cfg.lambda2 << ','
        << t.cfg.lambda3 << ',' << train::format_double(t.result.zero_shot) << ','
        << train::format_double(t.result.probe_1pct) << ',' << train::format_double(t.result.final_loss) << '\n';
  }
  json summary = json::array();
  out << "\nvariant      zero-shot  probe@1%   (median over seeds)\n";
  std::map<std::string, double> zs_median;
  for (const auto& v : ablation_ladder()) {
    std::vector<double> zs, pr;
    for (const auto& t : trials)
      if (t.label == v.name) {
        zs.push_back(t.result.zero_shot);
        pr.push_back(t.result.probe_1pct);
      }
    zs_median[v.name] = median(zs);
    summary.push_back({{"variant", v.name}, {"zero_shot_median", median(zs)}, {"probe_1pct_median", median(pr)}});
    out << std::left << std::setw(12) << v.name << " " << fmt(median(zs)) << "     " << fmt(median(pr)) << "\n";
  }
  const double gain = zs_median[ablation_ladder().back().name] - zs_median[ablation_ladder().front().name];
  out << "full minus contrastive-only (zero-shot): " << std::showpos << fmt(gain) << std::noshowpos << "\n";
  write_json((fs::path(cfg.out_dir) / "ablation.json").string(), {{"variants", summary}, {"full_minus_contrastive", gain}});
  return 0;
}

inline int cmd_sweep(const ConfigFlags& flags, const TrialOptions& to, bool grid, std::ostream& out) {
  train::TrainConfig cfg = flags.resolve();
  if (to.seeds == 0) throw train::ConfigError("--seeds must be >= 1");
  std::vector<std::pair<std::size_t, double>> points;
  if (grid) {
    for (std::size_t n : sweep_patch_counts())
      for (double r : sweep_mask_ratios()) points.emplace_back(n, r);
  } else {
    for (std::size_t n : sweep_patch_counts()) points.emplace_back(n, cfg.mask_ratio);
    for (double r : sweep_mask_ratios())
      if (std::find(points.begin(), points.end(), std::pair{cfg.patch_count, r}) == points.end())
        points.emplace_back(cfg.patch_count, r);
  }
  std::vector<Trial> trials;
  for (auto [n, r] : points) {
    for (std::size_t s = 0; s < to.seeds; ++s) {
      Trial t{"N=" + std::to_string(n) + " r=" + fmt(r, 2), cfg, {}};
      t.cfg.patch_count = n;
      t.cfg.mask_ratio = r;
      t.cfg.seed = cfg.seed + s;
      t.cfg.validate();
      ecg::masked_per_lead(n, r);  // throws when the ratio leaves nothing masked or nothing visible
      trials.push_back(std::move(t));
    }
  }
  ensure_dir(cfg.out_dir);
  const std::string data_path = trial_dataset(cfg, to.count);
  write_json((fs::path(cfg.out_dir) / "sweep.manifest.json").string(),
             manifest("sweep", cfg, data_path, {{"trial_seeds", to.seeds}, {"grid", grid}}));
  const data::Dataset ds = data::read_dataset(data_path);
  out << "sweep: " << points.size() << " settings x " << to.seeds << " seeds\n";
  run_trials(trials, ds, to.workers, out);
  std::ofstream csv(fs::path(cfg.out_dir) / "sweep.csv");
  csv << "patch_count,mask_ratio,seed,zero_shot_auc,probe_1pct_auc,final_loss\n";
  for (const auto& t : trials) {
    csv << t.cfg.patch_count << ',' << t.cfg.mask_ratio << ',' << t.cfg.seed << ','
        << train::format_double(t.result.zero_shot) << ',' << train::format_double(t.result.probe_1pct) << ','
        << train::format_double(t.result.final_loss) << '\n';
  }
  out << "wrote " << (fs::path(cfg.out_dir) / "sweep.csv").string() << "\n";
  return 0;
}

inline int report_suite(const verify::SuiteReport& r, const std::string& name, std::ostream& out) {
  r.print(out);
  out << name << ": " << r.checks.size() - r.failures() << "/" << r.checks.size() << " passed in " << fmt(r.seconds, 2)
      << " s\n";
  if (!r.passed()) throw RunError(name + ": " + std::to_string(r.failures()) + " check(s) failed");
  return 0;
}

// ---- entry point -------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"cgdmer: masked ECG/report pretraining with disentangled alignment"};
  app.name("cgdmer");
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", "cgdmer 1.0");

  ConfigFlags flags;
  std::string out_path, checkpoint, embeddings, resume_path;
  std::size_t count = 2000, instances = 20;
  std::vector<double> fractions{0.01, 0.1, 1.0};
  TrialOptions to;
  bool grid = false;

  auto with_config = [&](CLI::App* cmd) {
    flags.attach(cmd);
    cmd->add_option_function<std::string>("--data", [&](const std::string& v) { flags.overrides.emplace_back("data.path", v); },
                                          "dataset file (data.path)");
    return cmd;
  };
  auto* gen = with_config(app.add_subcommand("gen", "write a synthetic ECG/report dataset"));
  gen->add_option("--count", count, "number of records")->capture_default_str();
  gen->add_option("--out", out_path, "output NDJSON file")->required();

  auto* pre = with_config(app.add_subcommand("pretrain", "pretrain on the training split"));
  pre->add_option_function<std::string>("--out", [&](const std::string& v) { flags.overrides.emplace_back("train.out_dir", v); },
                                        "output directory (train.out_dir)");
  auto* resume = pre->add_option("--resume", resume_path, "resume from a checkpoint (default <out_dir>/checkpoint.bin)")
                     ->expected(0, 1);
  std::uint64_t stop_after = 0;
  pre->add_option("--stop-after", stop_after, "stop at this global step (continue later with --resume)");

  auto* prb = with_config(app.add_subcommand("probe", "linear probes on frozen features"));
  prb->add_option("--checkpoint", checkpoint, "checkpoint file (default <out_dir>/checkpoint.bin)");
  prb->add_option("--fractions", fractions, "label fractions of the training split")->delimiter(',')->capture_default_str();
  prb->add_option("--out", out_path, "evaluation JSON (default <out_dir>/probe.json)");

  auto* zs = with_config(app.add_subcommand("zeroshot", "zero-shot classification from class prompts"));
  zs->add_option("--checkpoint", checkpoint, "checkpoint file (default <out_dir>/checkpoint.bin)");
  zs->add_option("--out", out_path, "evaluation JSON (default <out_dir>/zeroshot.json)");
  zs->add_option("--embeddings", embeddings, "also export test-split embeddings as NDJSON");

  auto trial_flags = [&](CLI::App* cmd) {
    with_config(cmd);
    cmd->add_option_function<std::string>("--out", [&](const std::string& v) { flags.overrides.emplace_back("train.out_dir", v); },
                                          "output directory (train.out_dir)");
    cmd->add_option("--seeds", to.seeds, "seeds per setting")->capture_default_str();
    cmd->add_option("--parallel-trials", to.workers, "trials run concurrently")->capture_default_str();
    cmd->add_option("--count", to.count, "records to generate when no dataset is given")->capture_default_str();
    return cmd;
  };
  auto* abl = trial_flags(app.add_subcommand("ablate", "objective ladder: contrastive-only up to the full loss"));
  auto* swp = trial_flags(app.add_subcommand("sweep", "patch count and mask ratio sweep"));
  swp->add_flag("--grid", grid, "full N x r product instead of one factor at a time");
  abl->get_option("--seeds")->default_val(3);
  swp->get_option("--seeds")->default_val(1);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gc->add_option("--instances", instances, "random instances per check")->capture_default_str();
  auto* lc = app.add_subcommand("losscheck", "analytic and scalar-oracle loss checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion& e) {
    out << e.what() << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen(flags, count, out_path, out);
    if (pre->parsed()) return cmd_pretrain(flags, resume->count() ? &resume_path : nullptr, stop_after, out);
    if (prb->parsed()) return cmd_probe(flags, checkpoint, fractions, out_path, out);
    if (zs->parsed()) return cmd_zeroshot(flags, checkpoint, out_path, embeddings, out);
    if (abl->parsed()) return cmd_ablate(flags, to, out);
    if (swp->parsed()) return cmd_sweep(flags, to, grid, out);
    if (gc->parsed()) return report_suite(verify::gradcheck(instances), "gradcheck", out);
    if (lc->parsed()) return report_suite(verify::losscheck(), "losscheck", out);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << "\n";
    return 1;
  }
  return 1;
}

}  // namespace cgdmer::app
