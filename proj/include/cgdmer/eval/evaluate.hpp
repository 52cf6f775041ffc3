#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgdmer/train/trainer.hpp"
#include "cgdmer/util/digest.hpp"

namespace cgdmer::eval {

using json = nlohmann::json;

struct EvalError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// M x C scores with binary labels, both row-major.
struct ScoreMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;

  double score(std::size_t i, std::size_t c) const { return scores[i * cols + c]; }
  bool positive(std::size_t i, std::size_t c) const { return labels[i * cols + c] != 0; }

  static ScoreMatrix one_hot(std::vector<double> scores, const std::vector<std::size_t>& label, std::size_t classes) {
    ScoreMatrix m;
    m.rows = label.size();
    m.cols = classes;
    m.scores = std::move(scores);
    m.labels.assign(m.rows * classes, 0);
    for (std::size_t i = 0; i < m.rows; ++i) {
      if (label[i] >= classes) throw EvalError("label " + std::to_string(label[i]) + " out of range");
      m.labels[i * classes + label[i]] = 1;
    }
    return m;
  }
};

struct AucResult {
  std::vector<std::optional<double>> per_class;  // nullopt for skipped classes
  std::vector<std::size_t> skipped;              // no positive or no negative
  double macro = 0;
};

/// Mann-Whitney AUC of one column, ties sharing their average rank.
inline double class_auc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  const std::size_t n = s.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] < s[b]; });
  double rank_sum = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && s[order[j]] == s[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (y[order[k]]) {
        rank_sum += avg;
        ++pos;
      }
    }
    i = j;
  }
  const double np = static_cast<double>(pos), nn = static_cast<double>(n - pos);
  return (rank_sum - np * (np + 1) / 2) / (np * nn);
}

inline AucResult macro_auc(const ScoreMatrix& m) {
  if (m.rows == 0 || m.cols == 0) throw EvalError("macro_auc: empty score matrix");
  if (m.scores.size() != m.rows * m.cols || m.labels.size() != m.rows * m.cols) {
    throw EvalError("macro_auc: scores/labels do not match " + std::to_string(m.rows) + "x" + std::to_string(m.cols));
  }
  for (double v : m.scores) {
    if (!std::isfinite(v)) throw EvalError("macro_auc: non-finite score");
  }
  AucResult r;
  r.per_class.resize(m.cols);
  double total = 0;
  std::size_t used = 0;
  std::vector<double> s(m.rows);
  std::vector<std::uint8_t> y(m.rows);
  for (std::size_t c = 0; c < m.cols; ++c) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < m.rows; ++i) {
      s[i] = m.score(i, c);
      y[i] = m.positive(i, c);
      pos += y[i];
    }
    if (pos == 0 || pos == m.rows) {
      r.skipped.push_back(c);
      continue;
    }
    r.per_class[c] = class_auc(s, y);
    total += *r.per_class[c];
    ++used;
  }
  if (used == 0) throw EvalError("macro_auc: no class has both positive and negative samples");
  r.macro = total / static_cast<double>(used);
  return r;
}

// ---- splits ------------------------------------------------------------------

struct Split {
  std::vector<std::size_t> train, val, test;
};

/// Stratified 70/10/20 split. Each class is shuffled with its own stream of
/// split_seed; index lists come back sorted.
inline Split stratified_split(const std::vector<std::size_t>& labels, std::size_t classes, std::uint64_t split_seed) {
  Split out;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) idx.push_back(i);
    }
    Rng rng(derive_seed(split_seed, {salt::kSplit, c}));
    idx = [&] {
      auto p = train::permutation(idx.size(), rng);
      std::vector<std::size_t> r;
      for (std::size_t k : p) r.push_back(idx[k]);
      return r;
    }();
    const auto n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::llround(0.7 * n));
    const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::llround(0.1 * n)));
    out.train.insert(out.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.val.insert(out.val.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                   idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    out.test.insert(out.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  }
  for (auto* v : {&out.train, &out.val, &out.test}) std::sort(v->begin(), v->end());
  return out;
}

inline Split split_records(const std::vector<data::SignalRecord>& records, std::size_t classes, std::uint64_t split_seed) {
  std::vector<std::size_t> labels;
  labels.reserve(records.size());
  for (const auto& r : records) labels.push_back(r.label);
  return stratified_split(labels, classes, split_seed);
}

/// Stratified subsample of `pool` keeping round(fraction * n_c), at least
/// one, of every class present in the pool.
inline std::vector<std::size_t> label_subsample(const std::vector<std::size_t>& pool, const std::vector<std::size_t>& labels,
                                                std::size_t classes, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw EvalError("label fraction must lie in (0, 1]");
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i : pool) {
      if (labels.at(i) == c) idx.push_back(i);
    }
    if (idx.empty()) continue;
    Rng rng(derive_seed(seed, {salt::kProbe, c}));
    const auto p = train::permutation(idx.size(), rng);
    const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * double(idx.size()))));
    for (std::size_t k = 0; k < keep; ++k) out.push_back(idx[p[k]]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---- features ----------------------------------------------------------------

/// Frozen per-sample ECG representations.
struct Features {
  std::vector<std::vector<double>> pooled;    // E
  std::vector<std::vector<double>> shared;    // h_sh
  std::vector<std::vector<double>> specific;  // h_sp
};

template <typename T>
std::vector<double> to_double(const Tensor<T>& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

template <typename T>
Features extract_features(const model::CgdmerModel<T>& m, const std::vector<train::Sample<T>>& samples) {
  NoGradGuard no_grad;
  Features f;
  for (const auto& s : samples) {
    auto e = m.ecg().pooled_representation(s.grid);
    auto pair = m.heads().project(e, model::Modality::kEcg);
    f.pooled.push_back(to_double(e));
    f.shared.push_back(to_double(pair.shared));
    f.specific.push_back(to_double(pair.specific));
  }
  return f;
}

/// Rows of the representation named by eval.probe_features.
inline std::vector<std::vector<double>> select_features(const Features& f, const std::string& which) {
  if (which == "E") return f.pooled;
  if (which == "h_sh") return f.shared;
  if (which == "concat") {
    std::vector<std::vector<double>> out = f.shared;
    for (std::size_t i = 0; i < out.size(); ++i) out[i].insert(out[i].end(), f.specific[i].begin(), f.specific[i].end());
    return out;
  }
  throw EvalError("unknown probe feature set '" + which + "' (expected E, h_sh or concat)");
}

// ---- linear probe --------------------------------------------------------------

struct ProbeConfig {
  std::size_t epochs = 200;
  double lr = 1e-3;
  double weight_decay = 1e-5;
  std::size_t batch = 64;
  std::uint64_t seed = 0;

  static ProbeConfig from(const train::TrainConfig& c) {
    return {c.probe_epochs, c.probe_lr, c.probe_weight_decay, c.probe_batch, c.seed};
  }
};

struct ProbeResult {
  AucResult auc;
  std::vector<std::size_t> classes;  // trained classes, in column order
  std::vector<std::string> warnings;
  std::size_t train_count = 0;
};

/// Logistic regression per class (sigmoid + BCE) on standardized features,
/// AdamW at a constant rate over shuffled minibatches. Classes without a
/// training example are dropped with a warning.
inline ProbeResult linear_probe(const std::vector<std::vector<double>>& x_train, const std::vector<std::size_t>& y_train,
                                const std::vector<std::vector<double>>& x_test, const std::vector<std::size_t>& y_test,
                                std::size_t classes, const ProbeConfig& cfg) {
  if (x_train.empty() || x_test.empty()) throw EvalError("linear_probe: empty train or test set");
  if (x_train.size() != y_train.size() || x_test.size() != y_test.size()) throw EvalError("linear_probe: label count mismatch");
  if (cfg.epochs == 0 || cfg.batch == 0) throw EvalError("linear_probe: epochs and batch must be positive");
  const std::size_t f = x_train[0].size();
  for (const auto* set : {&x_train, &x_test}) {
    for (const auto& row : *set) {
      if (row.size() != f) throw EvalError("linear_probe: ragged feature rows");
    }
  }

  ProbeResult res;
  res.train_count = x_train.size();
  std::vector<std::size_t> count(classes, 0);
  for (std::size_t y : y_train) {
    if (y >= classes) throw EvalError("linear_probe: label out of range");
    ++count[y];
  }
  std::vector<long> column(classes, -1);
  for (std::size_t c = 0; c < classes; ++c) {
    if (count[c] == 0) {
      res.warnings.push_back("class " + std::to_string(c) + " has no training example at this fraction; dropped");
      continue;
    }
    column[c] = static_cast<long>(res.classes.size());
    res.classes.push_back(c);
  }
  const std::size_t k = res.classes.size();
  if (k == 0) throw EvalError("linear_probe: no class left to train");

  std::vector<double> mu(f, 0), sd(f, 0);
  for (const auto& r : x_train)
    for (std::size_t j = 0; j < f; ++j) mu[j] += r[j];
  for (double& v : mu) v /= static_cast<double>(x_train.size());
  for (const auto& r : x_train)
    for (std::size_t j = 0; j < f; ++j) sd[j] += (r[j] - mu[j]) * (r[j] - mu[j]);
  for (double& v : sd) {
    v = std::sqrt(v / static_cast<double>(x_train.size()));
    if (v < 1e-8) v = 1;
  }
  auto standardize = [&](const std::vector<double>& r) {
    std::vector<double> z(f);
    for (std::size_t j = 0; j < f; ++j) z[j] = (r[j] - mu[j]) / sd[j];
    return z;
  };

  // params: W [f, k], b [k]
  std::vector<Tensor<double>> params{Tensor<double>::zeros({f, k}), Tensor<double>::zeros({k})};
  AdamWConfig ac;
  ac.lr_max = ac.lr_min = cfg.lr;
  ac.weight_decay = cfg.weight_decay;
  ac.total_steps = 1;
  OptimizerState<double> opt(ac, params);

  std::vector<std::vector<double>> z;
  z.reserve(x_train.size());
  for (const auto& r : x_train) z.push_back(standardize(r));
  Rng rng(derive_seed(cfg.seed, {salt::kProbe}));
  std::vector<double> logit(k);
  for (std::size_t ep = 0; ep < cfg.epochs; ++ep) {
    const auto order = train::permutation(z.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      const double scale = 1.0 / static_cast<double>((end - start) * k);
      std::vector<std::vector<double>> grads{std::vector<double>(f * k, 0.0), std::vector<double>(k, 0.0)};
      const auto w = params[0].data();
      const auto b = params[1].data();
      for (std::size_t p = start; p < end; ++p) {
        const std::size_t i = order[p];
        for (std::size_t c = 0; c < k; ++c) logit[c] = b[c];
        for (std::size_t j = 0; j < f; ++j)
          for (std::size_t c = 0; c < k; ++c) logit[c] += z[i][j] * w[j * k + c];
        for (std::size_t c = 0; c < k; ++c) {
          const double target = column[y_train[i]] == static_cast<long>(c) ? 1.0 : 0.0;
          const double g = (1.0 / (1.0 + std::exp(-logit[c])) - target) * scale;
          grads[1][c] += g;
          for (std::size_t j = 0; j < f; ++j) grads[0][j * k + c] += g * z[i][j];
        }
      }
      adamw_step(params, grads, opt);
    }
  }

  // Score the test split; only rows of trained classes carry a label.
  std::vector<double> scores;
  std::vector<std::size_t> labels;
  const auto w = params[0].data();
  const auto b = params[1].data();
  std::vector<std::uint8_t> lab;
  for (std::size_t i = 0; i < x_test.size(); ++i) {
    const auto zi = standardize(x_test[i]);
    for (std::size_t c = 0; c < k; ++c) {
      double v = b[c];
      for (std::size_t j = 0; j < f; ++j) v += zi[j] * w[j * k + c];
      scores.push_back(v);
      lab.push_back(column[y_test[i]] == static_cast<long>(c) ? 1 : 0);
    }
  }
  ScoreMatrix sm;
  sm.rows = x_test.size();
  sm.cols = k;
  sm.scores = std::move(scores);
  sm.labels = std::move(lab);
  AucResult sub = macro_auc(sm);
  res.auc.per_class.assign(classes, std::nullopt);
  for (std::size_t c = 0; c < k; ++c) res.auc.per_class[res.classes[c]] = sub.per_class[c];
  for (std::size_t c = 0; c < classes; ++c) {
    if (!res.auc.per_class[c]) res.auc.skipped.push_back(c);
  }
  res.auc.macro = sub.macro;
  return res;
}

// ---- zero-shot ---------------------------------------------------------------

/// One descriptive sentence per class, indexed like the dataset's class names.
struct PromptSet {
  std::vector<std::string> prompts;
};

inline const std::map<std::string, std::string>& default_prompt_table() {
  static const std::map<std::string, std::string> t{
      {"normal sinus rhythm", "Normal sinus rhythm with a regular heart rate between 60 and 90 beats per minute."},
      {"sinus tachycardia", "Sinus tachycardia with a fast regular heart rate above 120 beats per minute."},
      {"sinus bradycardia", "Sinus bradycardia with a slow regular heart rate below 50 beats per minute."},
      {"irregular rhythm", "Irregular rhythm with variable RR intervals."},
  };
  return t;
}

/// Prompts for `class_names` from `table`; a class without an entry is an error.
inline PromptSet make_prompts(const std::vector<std::string>& class_names,
                              const std::map<std::string, std::string>& table = default_prompt_table()) {
  PromptSet p;
  for (const auto& name : class_names) {
    auto it = table.find(name);
    if (it == table.end() || it->second.empty()) throw EvalError("no prompt for class '" + name + "'");
    p.prompts.push_back(it->second);
  }
  return p;
}

inline std::map<std::string, std::string> load_prompt_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw EvalError("cannot read prompt file '" + path + "'");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw EvalError("prompt file '" + path + "' must be a JSON object");
  std::map<std::string, std::string> t;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it->is_string()) throw EvalError("prompt for '" + it.key() + "' is not a string");
    t[it.key()] = it->get<std::string>();
  }
  return t;
}

/// L2-normalized shared embeddings, the only input zero-shot scoring accepts.
struct SharedEmbeddings {
  std::vector<std::vector<double>> rows;
};

template <typename T>
SharedEmbeddings ecg_shared_embeddings(const model::CgdmerModel<T>& m, const std::vector<train::Sample<T>>& samples) {
  NoGradGuard no_grad;
  SharedEmbeddings out;
  for (const auto& s : samples) {
    auto h = m.heads().shared(m.ecg().pooled_representation(s.grid), model::Modality::kEcg);
    out.rows.push_back(to_double(l2_normalize(h)));
  }
  return out;
}

template <typename T>
SharedEmbeddings text_shared_embeddings(const model::CgdmerModel<T>& m, const text::Vocab& vocab,
                                        const std::vector<std::string>& sentences) {
  NoGradGuard no_grad;
  SharedEmbeddings out;
  const std::size_t max_len = m.config().text.max_len;
  for (const auto& s : sentences) {
    auto h = m.heads().shared(m.text().pooled_text_representation(vocab.encode(s, max_len)), model::Modality::kText);
    out.rows.push_back(to_double(l2_normalize(h)));
  }
  return out;
}

/// Cosine similarity <ecg_i, prompt_c> of normalized shared embeddings, [M x C].
inline std::vector<double> similarities(const SharedEmbeddings& ecg, const SharedEmbeddings& prompts) {
  std::vector<double> s;
  s.reserve(ecg.rows.size() * prompts.rows.size());
  for (const auto& e : ecg.rows) {
    for (const auto& p : prompts.rows) {
      if (p.size() != e.size()) throw EvalError("zero_shot: embedding widths differ");
      double dot = 0;
      for (std::size_t j = 0; j < e.size(); ++j) dot += e[j] * p[j];
      s.push_back(dot);
    }
  }
  return s;
}

/// Class probabilities softmax_c(sim(i, c) / temperature) per sample. The
/// similarities act as logits; identical prompts give uniform rows.
inline ScoreMatrix zero_shot_scores(const SharedEmbeddings& ecg, const SharedEmbeddings& prompts,
                                    const std::vector<std::size_t>& labels, double temperature = 0.07) {
  if (ecg.rows.size() != labels.size()) throw EvalError("zero_shot: label count mismatch");
  if (!(temperature > 0)) throw EvalError("zero_shot: temperature must be positive");
  const std::size_t c = prompts.rows.size();
  for (std::size_t y : labels) {
    if (y >= c) throw EvalError("zero_shot: no prompt for class index " + std::to_string(y));
  }
  std::vector<double> s = similarities(ecg, prompts);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double* row = s.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0;
    for (std::size_t k = 0; k < c; ++k) z += (row[k] = std::exp((row[k] - mx) / temperature));
    for (std::size_t k = 0; k < c; ++k) row[k] /= z;
  }
  return ScoreMatrix::one_hot(std::move(s), labels, c);
}

struct ZeroShotResult {
  ScoreMatrix scores;
  AucResult auc;
};

template <typename T>
ZeroShotResult zero_shot(const model::CgdmerModel<T>& m, const text::Vocab& vocab, const std::vector<train::Sample<T>>& samples,
                         const PromptSet& prompts, double temperature = 0.07) {
  std::vector<std::size_t> labels;
  for (const auto& s : samples) labels.push_back(s.label);
  ZeroShotResult r;
  r.scores = zero_shot_scores(ecg_shared_embeddings(m, samples), text_shared_embeddings(m, vocab, prompts.prompts), labels,
                              temperature);
  r.auc = macro_auc(r.scores);
  return r;
}

// ---- reports -----------------------------------------------------------------

inline std::string config_digest(const train::TrainConfig& c) { return util::sha1_hex(train::to_json(c).dump()); }

inline json eval_report(const std::string& task, const train::TrainConfig& cfg, const AucResult& auc,
                        const std::vector<std::string>& class_names) {
  json per = json::object();
  for (std::size_t c = 0; c < auc.per_class.size(); ++c) {
    const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
    per[name] = auc.per_class[c] ? json(*auc.per_class[c]) : json(nullptr);
  }
  return {{"task", task},
          {"split_seed", cfg.split_seed},
          {"per_class_auc", per},
          {"macro_auc", auc.macro},
          {"config_digest", config_digest(cfg)}};
}

/// One JSON object per line: {id, label, h_sh, h_sp} of the ECG side.
template <typename T>
void export_embeddings(const model::CgdmerModel<T>& m, const std::vector<train::Sample<T>>& samples, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  const Features f = extract_features(m, samples);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out << json{{"id", samples[i].id}, {"label", samples[i].label}, {"h_sh", f.shared[i]}, {"h_sp", f.specific[i]}}.dump()
        << '\n';
  }
  if (!out) throw std::runtime_error("error while writing " + path);
}

}  // namespace cgdmer::eval
