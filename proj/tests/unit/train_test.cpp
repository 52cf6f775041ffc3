#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cgdmer/numerics/grad_check.hpp"
#include "cgdmer/train/checkpoint.hpp"

namespace cgdmer::train {
namespace {

namespace fs = std::filesystem;

TrainConfig tiny_config() {
  TrainConfig c;
  c.leads = 2;
  c.length = 40;
  c.patch_count = 4;
  c.d = 8;
  c.d_proj = 6;
  c.heads = 2;
  c.ffn_dim = 12;
  c.conv_depth = 2;
  c.conv_kernel = 3;
  c.conv_groups = 2;
  c.ecg_encoder_layers = 1;
  c.ecg_decoder_layers = 1;
  c.text_encoder_layers = 1;
  c.text_decoder_layers = 1;
  c.text_max_len = 24;
  c.mask_ratio = 0.5;
  c.text_mask_rate = 0.3;
  c.batch_size = 4;
  c.epochs = 2;
  c.lr_max = 1e-3;
  return c;
}

struct Fixture {
  data::Dataset ds;
  text::Vocab vocab;
  std::vector<std::size_t> indices;
};

Fixture make_fixture(const TrainConfig& c, std::size_t n, std::uint64_t seed = 3) {
  Fixture f;
  auto specs = data::default_classes(c.leads);
  data::CorpusConfig cc{c.leads, c.length, 10.0};
  f.ds = {{data::kDatasetFormatVersion, c.leads, c.length, data::class_names(specs)}, data::generate(specs, n, seed, cc)};
  std::vector<std::string> reports;
  for (const auto& r : f.ds.records) reports.push_back(r.report);
  f.vocab = text::Vocab::build(reports);
  for (std::size_t i = 0; i < n; ++i) f.indices.push_back(i);
  return f;
}

template <typename T>
std::vector<const Sample<T>*> all_of(const std::vector<Sample<T>>& v) {
  std::vector<const Sample<T>*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

std::string temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cgdmer_train_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

TEST(Config, JsonRoundTripAndOverrides) {
  TrainConfig c = tiny_config();
  c.infonce_mode = "literal";
  c.dataset = "x.ndjson";
  TrainConfig back = from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  apply_override(back, "model.d", "16");
  apply_override(back, "loss.infonce_mode", "standard");
  apply_override(back, "train.grad_cache", "false");
  EXPECT_EQ(back.d, 16u);
  EXPECT_EQ(back.infonce_mode, "standard");
  EXPECT_FALSE(back.grad_cache);
}

TEST(Config, RejectsUnknownKeysAndBadTypes) {
  EXPECT_THROW(from_json(json{{"model", {{"depth", 3}}}}), ConfigError);
  EXPECT_THROW(from_json(json{{"model", {{"d", "wide"}}}}), ConfigError);
  EXPECT_THROW(from_json(json{{"train", {{"epochs", -1}}}}), ConfigError);
  TrainConfig c;
  EXPECT_THROW(apply_override(c, "nope", "1"), ConfigError);
}

TEST(Config, ValidateCatchesCrossFieldErrors) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.patch_count = 33;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.d = 130;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.mask_ratio = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lambda2 = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.infonce_mode = "fancy";
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Registry, CountMatchesAnalyticFormula) {
  for (const TrainConfig& c : {TrainConfig{}, tiny_config()}) {
    for (std::size_t vocab : {7u, 60u}) {
      auto mc = c.model_config(vocab);
      model::CgdmerModel<float> m(mc, 1);
      EXPECT_EQ(m.store().total_numel(), model::analytic_param_count(mc));
    }
  }
}

TEST(Registry, EveryParameterReceivesGradient) {
  TrainConfig c = tiny_config();
  c.grad_cache = false;
  auto f = make_fixture(c, 4);
  auto samples = prepare<double>(f.ds.records, f.indices, f.vocab, c);
  model::CgdmerModel<double> m(c.model_config(f.vocab.size()), 5, 0.5);
  auto g = forward_batch(m, all_of(samples), c, 0);
  backward(g.full);
  for (std::size_t i = 0; i < m.store().size(); ++i) {
    auto grad = m.store().tensors()[i].grad();
    const bool any = std::any_of(grad.begin(), grad.end(), [](double x) { return x != 0.0; });
    EXPECT_TRUE(any) << m.store().names()[i];
  }
}

TEST(TrainStep, FullGradientPassesGradCheckOnOnePercentSample) {
  TrainConfig c = tiny_config();
  auto f = make_fixture(c, 3);
  auto samples = prepare<double>(f.ds.records, f.indices, f.vocab, c);
  model::CgdmerModel<double> m(c.model_config(f.vocab.size()), 9, 0.2);
  auto batch = all_of(samples);
  GradCheckOptions opt;
  opt.coord_fraction = 0.01;
  opt.seed = 4;
  auto res = grad_check([&] { return forward_batch(m, batch, c, 0).full; }, m.store().tensors(), opt);
  EXPECT_TRUE(res.passed) << "rel " << res.max_rel_error << " at " << m.store().names()[res.worst_leaf] << "["
                          << res.worst_index << "] analytic " << res.analytic << " numeric " << res.numeric;
  EXPECT_GE(res.coords_checked, m.store().total_numel() / 100);
}

TEST(TrainStep, GradCacheMatchesMonolithicGradient) {
  TrainConfig c = tiny_config();
  auto f = make_fixture(c, 5);
  auto samples = prepare<double>(f.ds.records, f.indices, f.vocab, c);
  model::CgdmerModel<double> m(c.model_config(f.vocab.size()), 2, 0.3);
  auto batch = all_of(samples);

  c.grad_cache = false;
  m.store().zero_grad();
  auto mono = accumulate_gradients(m, batch, c, 7);
  std::vector<std::vector<double>> g_mono;
  for (const auto& p : m.store().tensors()) g_mono.push_back(p.grad());

  c.grad_cache = true;
  m.store().zero_grad();
  auto cached = accumulate_gradients(m, batch, c, 7);
  EXPECT_NEAR(mono.full, cached.full, 1e-12);
  EXPECT_NEAR(mono.e_rec, cached.e_rec, 1e-12);
  EXPECT_NEAR(mono.t_rec, cached.t_rec, 1e-12);
  for (std::size_t i = 0; i < g_mono.size(); ++i) {
    auto g = m.store().tensors()[i].grad();
    for (std::size_t k = 0; k < g.size(); ++k) {
      ASSERT_NEAR(g[k], g_mono[i][k], 1e-10 * std::max(1.0, std::abs(g_mono[i][k]))) << m.store().names()[i];
    }
  }
}

TEST(TrainStep, ZeroLambdasGiveFullEqualToCons) {
  TrainConfig c = tiny_config();
  c.lambda0 = c.lambda1 = c.lambda2 = c.lambda3 = 0;
  auto f = make_fixture(c, 4);
  auto samples = prepare<float>(f.ds.records, f.indices, f.vocab, c);
  auto st = init_state<float>(c, f.vocab, samples.size());
  auto rep = train_step(st, all_of(samples));
  EXPECT_EQ(rep.full, rep.cons);
  EXPECT_GT(rep.e_rec, 0);
  EXPECT_GT(rep.t_rec, 0);
}

TEST(TrainStep, SingleSampleBatchRuns) {
  TrainConfig c = tiny_config();
  auto f = make_fixture(c, 1);
  auto samples = prepare<float>(f.ds.records, f.indices, f.vocab, c);
  auto st = init_state<float>(c, f.vocab, 1);
  auto rep = train_step(st, all_of(samples));
  EXPECT_EQ(rep.cons, 0.0);
  EXPECT_TRUE(std::isfinite(rep.full));
}

TEST(TrainStep, NonFiniteLossNamesTermAndBatch) {
  TrainConfig c = tiny_config();
  auto f = make_fixture(c, 4);
  auto samples = prepare<float>(f.ds.records, f.indices, f.vocab, c);
  auto st = init_state<float>(c, f.vocab, samples.size());
  st.model->store().at("ecg.head.bias").mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train_step(st, all_of(samples));
    FAIL();
  } catch (const NonFiniteLoss& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("e_rec"), std::string::npos) << msg;
    EXPECT_NE(msg.find("rec-0"), std::string::npos) << msg;
  }
}

TEST(Metrics, HeaderAndRowRoundTrip) {
  const auto dir = temp_dir("metrics");
  {
    MetricsLog log(dir + "/m.csv", dir + "/e.json");
    log.append({0, 2e-4, 1.0 / 3.0, 2.5, 0.1, 1.2, 0.7, 5.5});
  }
  std::ifstream in(dir + "/m.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "step,lr,e_rec,t_rec,orth,siglip,cons,full");
  auto r = parse_metrics_row(row);
  EXPECT_EQ(r.e_rec, 1.0 / 3.0);
  EXPECT_EQ(r.lr, 2e-4);
}

std::vector<std::string> run_to_csv(const TrainConfig& c, const Fixture& f, const std::string& dir) {
  auto samples = prepare<float>(f.ds.records, f.indices, f.vocab, c);
  auto st = init_state<float>(c, f.vocab, samples.size());
  MetricsLog log(dir + "/metrics.csv", dir + "/epochs.json");
  TrainHooks hooks;
  hooks.on_step = [&](const LossReport& r) { log.append(r); };
  run_training(st, samples, hooks);
  std::vector<std::string> lines;
  std::ifstream in(dir + "/metrics.csv");
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

TEST(Determinism, SameSeedSameCsv) {
  TrainConfig c = tiny_config();
  auto f = make_fixture(c, 10);
  auto a = run_to_csv(c, f, temp_dir("det_a"));
  auto b = run_to_csv(c, f, temp_dir("det_b"));
  ASSERT_EQ(a.size(), 1 + 2 * 3u);
  EXPECT_EQ(a, b);
  c.seed = 1;
  EXPECT_NE(run_to_csv(c, f, temp_dir("det_c")), a);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TrainConfig c = tiny_config();
  auto f = make_fixture(c, 6);
  auto samples = prepare<float>(f.ds.records, f.indices, f.vocab, c);
  auto st = init_state<float>(c, f.vocab, samples.size());
  run_training(st, samples, {}, 3);
  const auto path = temp_dir("ckpt") + "/c.bin";
  save_checkpoint(st, path);
  auto back = load_checkpoint<float>(path);
  EXPECT_EQ(back.step(), 3u);
  EXPECT_EQ(back.vocab.tokens(), st.vocab.tokens());
  EXPECT_EQ(to_json(back.config), to_json(st.config));
  EXPECT_TRUE(back.epoch_rng == st.epoch_rng);
  for (std::size_t i = 0; i < st.model->store().size(); ++i) {
    auto a = st.model->store().tensors()[i].values();
    auto b = back.model->store().tensors()[i].values();
    ASSERT_EQ(0, std::memcmp(a.data(), b.data(), a.size() * sizeof(float))) << st.model->store().names()[i];
    EXPECT_EQ(st.optimizer.m[i], back.optimizer.m[i]);
    EXPECT_EQ(st.optimizer.v[i], back.optimizer.v[i]);
  }
}

TEST(Checkpoint, RejectsBadFiles) {
  TrainConfig c = tiny_config();
  auto f = make_fixture(c, 2);
  auto st = init_state<float>(c, f.vocab, 2);
  const auto dir = temp_dir("ckpt_bad");
  const auto path = dir + "/c.bin";
  save_checkpoint(st, path);
  std::ifstream in(path, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto write = [&](const std::vector<char>& b) {
    std::ofstream(dir + "/x.bin", std::ios::binary).write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  auto message = [&]() -> std::string {
    try {
      load_checkpoint<float>(dir + "/x.bin");
    } catch (const CheckpointError& e) {
      return e.what();
    }
    return "";
  };

  auto b = bytes;
  b[0] = 'X';
  write(b);
  EXPECT_NE(message().find("not a checkpoint"), std::string::npos);

  b = bytes;
  b[4] = 9;
  write(b);
  auto m = message();
  EXPECT_NE(m.find("version 9"), std::string::npos) << m;
  EXPECT_NE(m.find("version 1"), std::string::npos) << m;

  b = bytes;
  b.resize(b.size() - 100);
  write(b);
  m = message();
  EXPECT_NE(m.find("expected " + std::to_string(bytes.size())), std::string::npos) << m;
  EXPECT_NE(m.find(std::to_string(bytes.size() - 100)), std::string::npos) << m;
}

TEST(Checkpoint, ResumeMidEpochMatchesUninterruptedRun) {
  TrainConfig c = tiny_config();
  c.epochs = 3;
  c.dropout = 0.1;
  auto f = make_fixture(c, 10);  // 3 batches per epoch, last one partial
  auto samples = prepare<float>(f.ds.records, f.indices, f.vocab, c);

  auto ref = init_state<float>(c, f.vocab, samples.size());
  std::vector<LossReport> ref_rows;
  run_training(ref, samples, {[&](const LossReport& r) { ref_rows.push_back(r); }, nullptr, nullptr});

  auto first = init_state<float>(c, f.vocab, samples.size());
  std::vector<LossReport> rows;
  TrainHooks hooks{[&](const LossReport& r) { rows.push_back(r); }, nullptr, nullptr};
  run_training(first, samples, hooks, 4);
  const auto path = temp_dir("resume") + "/c.bin";
  save_checkpoint(first, path);
  auto resumed = load_checkpoint<float>(path);
  run_training(resumed, samples, hooks);

  ASSERT_EQ(rows.size(), ref_rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(metrics_row(rows[i]), metrics_row(ref_rows[i]));
  for (std::size_t i = 0; i < ref.model->store().size(); ++i) {
    EXPECT_EQ(ref.model->store().tensors()[i].values(), resumed.model->store().tensors()[i].values());
  }
}

TEST(Training, ToyCorpusLossFallsFromEpochOneToFive) {
  // median over three seeds of mean L_Full, epoch 5 vs epoch 1
  TrainConfig c;
  c.leads = 4;
  c.length = 200;
  c.patch_count = 10;
  c.d = 32;
  c.d_proj = 16;
  c.heads = 2;
  c.ecg_encoder_layers = 1;
  c.ecg_decoder_layers = 1;
  c.text_encoder_layers = 1;
  c.text_decoder_layers = 1;
  c.text_max_len = 32;
  c.batch_size = 16;
  c.epochs = 5;
  c.lr_max = 1e-3;
  auto f = make_fixture(c, 64, 21);
  std::vector<double> drop;
  for (std::uint64_t seed : {0, 1, 2}) {
    c.seed = seed;
    auto samples = prepare<float>(f.ds.records, f.indices, f.vocab, c);
    auto st = init_state<float>(c, f.vocab, samples.size());
    std::vector<double> epoch_sum(5, 0.0);
    run_training(st, samples, {[&](const LossReport& r) { epoch_sum[r.step / 4] += r.full; }, nullptr, nullptr});
    drop.push_back(epoch_sum[0] / 4 - epoch_sum[4] / 4);
  }
  std::sort(drop.begin(), drop.end());
  EXPECT_GT(drop[1], 0.0);
}

}  // namespace
}  // namespace cgdmer::train
