#pragma once

// Dataset -> split -> vocabulary -> pretraining -> evaluation, shared by the
// command-line tool and the acceptance runner.

#include <array>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cgdmer/eval/evaluate.hpp"
#include "cgdmer/train/checkpoint.hpp"

namespace cgdmer::app {

using train::TrainConfig;
using Sample = train::Sample<float>;
using State = train::TrainState<float>;

/// A dataset with everything derived from (dataset, split_seed, prompts).
struct Corpus {
  data::Dataset ds;
  eval::Split split;
  eval::PromptSet prompts;
  text::Vocab vocab;

  const std::vector<std::string>& class_names() const { return ds.meta.class_names; }
  std::size_t classes() const { return ds.meta.class_names.size(); }
  std::vector<std::size_t> labels() const {
    std::vector<std::size_t> y;
    for (const auto& r : ds.records) y.push_back(r.label);
    return y;
  }
};

inline std::map<std::string, std::string> prompt_table(const TrainConfig& cfg) {
  return cfg.prompts.empty() ? eval::default_prompt_table() : eval::load_prompt_table(cfg.prompts);
}

/// Splits the records and builds the vocabulary from training reports plus
/// the class prompts, so prompt words are never out of vocabulary.
inline Corpus make_corpus(const TrainConfig& cfg, data::Dataset ds) {
  if (ds.meta.leads != cfg.leads || ds.meta.length != cfg.length) {
    throw train::ConfigError("dataset is " + std::to_string(ds.meta.leads) + "x" + std::to_string(ds.meta.length) +
                             " but the config expects data.leads=" + std::to_string(cfg.leads) +
                             ", data.length=" + std::to_string(cfg.length));
  }
  Corpus c;
  c.ds = std::move(ds);
  c.split = eval::split_records(c.ds.records, c.classes(), cfg.split_seed);
  if (c.split.train.empty() || c.split.test.empty()) throw train::ConfigError("dataset too small to split");
  c.prompts = eval::make_prompts(c.class_names(), prompt_table(cfg));
  std::vector<std::string> text;
  for (std::size_t i : c.split.train) text.push_back(c.ds.records[i].report);
  text.insert(text.end(), c.prompts.prompts.begin(), c.prompts.prompts.end());
  c.vocab = text::Vocab::build(text);
  return c;
}

/// Same corpus with a vocabulary restored from a checkpoint.
inline Corpus make_corpus(const TrainConfig& cfg, data::Dataset ds, text::Vocab vocab) {
  Corpus c = make_corpus(cfg, std::move(ds));
  c.vocab = std::move(vocab);
  return c;
}

inline data::Dataset synthetic_dataset(std::size_t count, std::uint64_t seed, std::size_t leads, std::size_t length) {
  auto specs = data::default_classes(leads);
  data::CorpusConfig cc{leads, length, 10.0};
  return {{data::kDatasetFormatVersion, leads, length, data::class_names(specs)}, data::generate(specs, count, seed, cc)};
}

inline std::vector<Sample> samples(const Corpus& c, const std::vector<std::size_t>& idx, const TrainConfig& cfg) {
  return train::prepare<float>(c.ds.records, idx, c.vocab, cfg);
}

struct PretrainOptions {
  train::TrainHooks hooks;
  std::uint64_t stop_step = ~std::uint64_t(0);
};

inline State new_state(const TrainConfig& cfg, const Corpus& c) {
  return train::init_state<float>(cfg, c.vocab, c.split.train.size());
}

/// Continues `st` on the training split.
inline void pretrain(State& st, const Corpus& c, const PretrainOptions& opt = {}) {
  const auto data = samples(c, c.split.train, st.config);
  train::run_training(st, data, opt.hooks, opt.stop_step);
}

struct Evaluation {
  double zero_shot = 0;
  eval::AucResult zero_shot_auc;
  std::vector<double> fractions;
  std::vector<eval::ProbeResult> probes;
};

inline eval::ZeroShotResult zero_shot(const State& st, const Corpus& c) {
  const auto test = samples(c, c.split.test, st.config);
  return eval::zero_shot(*st.model, st.vocab, test, c.prompts, st.config.temperature);
}

/// Linear probes on frozen features at each label fraction of the training
/// split, all scored on the test split.
inline std::vector<eval::ProbeResult> probe(const State& st, const Corpus& c, const std::vector<double>& fractions) {
  const auto& cfg = st.config;
  const auto labels = c.labels();
  const auto train_s = samples(c, c.split.train, cfg);
  const auto test_s = samples(c, c.split.test, cfg);
  const auto f_train = eval::select_features(eval::extract_features(*st.model, train_s), cfg.probe_features);
  const auto f_test = eval::select_features(eval::extract_features(*st.model, test_s), cfg.probe_features);
  std::vector<std::size_t> y_test;
  for (const auto& s : test_s) y_test.push_back(s.label);

  std::vector<eval::ProbeResult> out;
  for (double frac : fractions) {
    const auto chosen = eval::label_subsample(c.split.train, labels, c.classes(), frac, cfg.seed);
    std::vector<std::vector<double>> x;
    std::vector<std::size_t> y;
    for (std::size_t k = 0, i = 0; k < c.split.train.size(); ++k) {
      if (i < chosen.size() && chosen[i] == c.split.train[k]) {
        x.push_back(f_train[k]);
        y.push_back(labels[chosen[i]]);
        ++i;
      }
    }
    out.push_back(eval::linear_probe(x, y, f_test, y_test, c.classes(), eval::ProbeConfig::from(cfg)));
  }
  return out;
}

inline Evaluation evaluate(const State& st, const Corpus& c, const std::vector<double>& fractions = {0.01, 0.1, 1.0}) {
  Evaluation e;
  e.zero_shot_auc = zero_shot(st, c).auc;
  e.zero_shot = e.zero_shot_auc.macro;
  e.fractions = fractions;
  e.probes = probe(st, c, fractions);
  return e;
}

// ---- ablation ladder and sweeps -------------------------------------------------

struct Variant {
  std::string name;
  double lambda0, lambda1, lambda2, lambda3;
};

/// Contrastive-only, then each generative / disentangling term added in turn.
inline const std::vector<Variant>& ablation_ladder() {
  static const std::vector<Variant> v{
      {"contrastive", 0, 0, 0, 0},
      {"+e_rec", 1, 0, 0, 0},
      {"+t_rec", 1, 1, 0, 0},
      {"+orth", 1, 1, 1, 0},
      {"+siglip", 1, 1, 1, 1},
  };
  return v;
}

inline TrainConfig with_variant(TrainConfig cfg, const Variant& v) {
  cfg.lambda0 = v.lambda0;
  cfg.lambda1 = v.lambda1;
  cfg.lambda2 = v.lambda2;
  cfg.lambda3 = v.lambda3;
  return cfg;
}

inline const std::vector<std::size_t>& sweep_patch_counts() {
  static const std::vector<std::size_t> n{10, 25, 50, 100};
  return n;
}

inline const std::vector<double>& sweep_mask_ratios() {
  static const std::vector<double> r{0.25, 0.5, 0.75, 0.9};
  return r;
}

struct TrialResult {
  double zero_shot = 0;
  double probe_1pct = 0;
  double final_loss = 0;
};

/// Pretrain from scratch with `cfg` and evaluate zero-shot plus a 1% probe.
inline TrialResult run_trial(const TrainConfig& cfg, const data::Dataset& ds) {
  cfg.validate();
  Corpus c = make_corpus(cfg, ds);
  State st = new_state(cfg, c);
  TrialResult r;
  PretrainOptions opt;
  opt.hooks.on_step = [&](const train::LossReport& rep) { r.final_loss = rep.full; };
  pretrain(st, c, opt);
  r.zero_shot = zero_shot(st, c).auc.macro;
  r.probe_1pct = probe(st, c, {0.01}).front().auc.macro;
  return r;
}

template <typename V>
double median(V v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace cgdmer::app
