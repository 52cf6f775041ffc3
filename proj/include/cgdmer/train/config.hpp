#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "cgdmer/model/model.hpp"
#include "cgdmer/numerics/optim.hpp"

namespace cgdmer::train {

using json = nlohmann::json;

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Every knob of a run. Serialized as nested JSON whose dotted paths are the
/// keys listed in visit_fields.
struct TrainConfig {
  std::uint64_t seed = 0;

  std::string dataset;
  std::size_t leads = 12;
  std::size_t length = 1000;
  std::uint64_t split_seed = 0;

  std::size_t d = 128;
  std::size_t d_proj = 128;
  std::size_t heads = 4;
  std::size_t ffn_dim = 0;  // 0 means 4 * d
  std::size_t patch_count = 50;
  double mask_ratio = 0.75;
  std::size_t conv_depth = 2;
  std::size_t conv_kernel = 5;
  std::size_t conv_groups = 4;
  std::size_t ecg_encoder_layers = 4;
  std::size_t ecg_decoder_layers = 2;
  std::size_t text_encoder_layers = 2;
  std::size_t text_decoder_layers = 2;
  std::size_t text_max_len = 64;
  double text_mask_rate = 0.15;
  double dropout = 0.0;

  double temperature = 0.07;
  double lambda0 = 1.0, lambda1 = 1.0, lambda2 = 1.0, lambda3 = 1.0;
  std::string infonce_mode = "standard";

  double lr_max = 2e-4;
  double lr_min = 0.0;
  double weight_decay = 1e-5;
  std::uint64_t warmup_steps = 0;
  double grad_clip = 0.0;  // global norm; 0 disables
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  bool grad_cache = true;
  std::uint64_t checkpoint_every = 0;  // steps; 0 = epoch ends only
  std::string out_dir = "run";

  std::string probe_features = "h_sh";  // E | h_sh | concat
  std::size_t probe_epochs = 200;
  double probe_lr = 1e-3;
  double probe_weight_decay = 1e-5;
  std::size_t probe_batch = 64;
  std::string prompts;  // optional JSON file {class name: sentence}

  std::size_t patch_length() const { return patch_count ? length / patch_count : 0; }
  std::size_t resolved_ffn() const { return ffn_dim ? ffn_dim : 4 * d; }

  model::ModelConfig model_config(std::size_t vocab_size) const {
    model::ModelConfig m;
    auto& tk = m.ecg.tokenizer;
    tk.leads = leads;
    tk.patch_count = patch_count;
    tk.patch_length = patch_length();
    tk.model_dim = d;
    tk.conv_depth = conv_depth;
    tk.kernel = conv_kernel;
    tk.groups = conv_groups;
    m.ecg.encoder = {ecg_encoder_layers, heads, d, resolved_ffn(), dropout};
    m.ecg.decoder = {ecg_decoder_layers, heads, d, resolved_ffn(), dropout};
    m.ecg.mask_ratio = mask_ratio;
    m.text.vocab_size = vocab_size;
    m.text.max_len = text_max_len;
    m.text.encoder = {text_encoder_layers, heads, d, resolved_ffn(), dropout};
    m.text.decoder = {text_decoder_layers, heads, d, resolved_ffn(), dropout};
    m.text.mask_rate = text_mask_rate;
    m.d_proj = d_proj;
    return m;
  }

  model::AlignConfig align_config() const {
    model::AlignConfig a;
    a.temperature = temperature;
    a.lambda0 = lambda0;
    a.lambda1 = lambda1;
    a.lambda2 = lambda2;
    a.lambda3 = lambda3;
    a.infonce_mode = model::parse_infonce_mode(infonce_mode);
    return a;
  }

  AdamWConfig adamw_config(std::uint64_t total_steps) const {
    AdamWConfig c;
    c.lr_max = lr_max;
    c.lr_min = lr_min;
    c.weight_decay = weight_decay;
    c.beta1 = beta1;
    c.beta2 = beta2;
    c.eps = eps;
    c.total_steps = total_steps;
    c.warmup_steps = warmup_steps;
    return c;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (leads == 0 || length == 0) fail("data.leads and data.length must be positive");
    if (patch_count == 0 || length % patch_count != 0) {
      fail("model.patch_count " + std::to_string(patch_count) + " must divide data.length " + std::to_string(length) +
           " (valid: " + ecg::divisors_of(length) + ")");
    }
    if (d == 0 || d % heads != 0) fail("model.d " + std::to_string(d) + " not divisible by model.heads " + std::to_string(heads));
    if (epochs == 0) fail("train.epochs must be >= 1");
    if (batch_size == 0) fail("train.batch_size must be >= 1");
    if (!(grad_clip >= 0)) fail("optim.grad_clip must be >= 0");
    if (probe_features != "E" && probe_features != "h_sh" && probe_features != "concat") {
      fail("eval.probe_features must be E, h_sh or concat, got '" + probe_features + "'");
    }
    if (probe_epochs == 0 || probe_batch == 0 || !(probe_lr > 0) || probe_weight_decay < 0) {
      fail("eval.probe_* settings must be positive");
    }
    try {
      model_config(text::Vocab::kUnk + 1).validate();
      align_config().validate();
      adamw_config(1).validate();
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
  }
};

/// Calls v(dotted_key, field) for every field. Works on const and non-const configs.
template <typename Config, typename Visitor>
void visit_fields(Config& c, Visitor&& v) {
  v("seed", c.seed);
  v("data.path", c.dataset);
  v("data.leads", c.leads);
  v("data.length", c.length);
  v("data.split_seed", c.split_seed);
  v("model.d", c.d);
  v("model.d_proj", c.d_proj);
  v("model.heads", c.heads);
  v("model.ffn_dim", c.ffn_dim);
  v("model.patch_count", c.patch_count);
  v("model.mask_ratio", c.mask_ratio);
  v("model.conv_depth", c.conv_depth);
  v("model.conv_kernel", c.conv_kernel);
  v("model.conv_groups", c.conv_groups);
  v("model.ecg_encoder_layers", c.ecg_encoder_layers);
  v("model.ecg_decoder_layers", c.ecg_decoder_layers);
  v("model.text_encoder_layers", c.text_encoder_layers);
  v("model.text_decoder_layers", c.text_decoder_layers);
  v("model.text_max_len", c.text_max_len);
  v("model.text_mask_rate", c.text_mask_rate);
  v("model.dropout", c.dropout);
  v("loss.temperature", c.temperature);
  v("loss.lambda0", c.lambda0);
  v("loss.lambda1", c.lambda1);
  v("loss.lambda2", c.lambda2);
  v("loss.lambda3", c.lambda3);
  v("loss.infonce_mode", c.infonce_mode);
  v("optim.lr_max", c.lr_max);
  v("optim.lr_min", c.lr_min);
  v("optim.weight_decay", c.weight_decay);
  v("optim.warmup_steps", c.warmup_steps);
  v("optim.grad_clip", c.grad_clip);
  v("optim.beta1", c.beta1);
  v("optim.beta2", c.beta2);
  v("optim.eps", c.eps);
  v("train.epochs", c.epochs);
  v("train.batch_size", c.batch_size);
  v("train.grad_cache", c.grad_cache);
  v("train.checkpoint_every", c.checkpoint_every);
  v("train.out_dir", c.out_dir);
  v("eval.probe_features", c.probe_features);
  v("eval.probe_epochs", c.probe_epochs);
  v("eval.probe_lr", c.probe_lr);
  v("eval.probe_weight_decay", c.probe_weight_decay);
  v("eval.probe_batch", c.probe_batch);
  v("eval.prompts", c.prompts);
}

namespace detail {

inline json::json_pointer pointer_of(const std::string& dotted) {
  std::string p;
  std::stringstream ss(dotted);
  for (std::string part; std::getline(ss, part, '.');) p += "/" + part;
  return json::json_pointer(p);
}

template <typename F>
void assign(const std::string& key, const json& j, F& field) {
  using V = std::remove_cvref_t<F>;
  auto bad = [&](const char* want) {
    throw ConfigError("config key '" + key + "': expected " + want + ", got " + j.dump());
  };
  if constexpr (std::is_same_v<V, bool>) {
    if (!j.is_boolean()) bad("a boolean");
    field = j.get<bool>();
  } else if constexpr (std::is_same_v<V, std::string>) {
    if (!j.is_string()) bad("a string");
    field = j.get<std::string>();
  } else if constexpr (std::is_floating_point_v<V>) {
    if (!j.is_number()) bad("a number");
    field = j.get<double>();
  } else {
    if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0)) bad("a nonnegative integer");
    field = j.get<V>();
  }
}

inline void flatten(const json& j, const std::string& prefix, std::vector<std::string>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) flatten(*it, key, out);
    else out.push_back(key);
  }
}

}  // namespace detail

inline json to_json(const TrainConfig& c) {
  json j = json::object();
  visit_fields(c, [&](const char* key, const auto& field) { j[detail::pointer_of(key)] = field; });
  return j;
}

/// Reads a nested config over the defaults. Unknown keys and type mismatches
/// are errors. Does not validate cross-field constraints.
inline TrainConfig from_json(const json& j, TrainConfig base = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  std::vector<std::string> keys;
  detail::flatten(j, "", keys);
  for (const auto& k : keys) {
    bool known = false;
    visit_fields(base, [&](const char* key, auto&) { known = known || k == key; });
    if (!known) throw ConfigError("unknown config key '" + k + "'");
  }
  visit_fields(base, [&](const char* key, auto& field) {
    auto ptr = detail::pointer_of(key);
    if (j.contains(ptr)) detail::assign(key, j.at(ptr), field);
  });
  return base;
}

/// Applies "dotted.key" = value, where value is parsed as JSON when it
/// parses and taken as a plain string otherwise.
inline void apply_override(TrainConfig& c, const std::string& key, const std::string& value) {
  json v = json::parse(value, nullptr, false);
  if (v.is_discarded()) v = value;
  json patch;
  patch[detail::pointer_of(key)] = v;
  c = from_json(patch, c);
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file '" + path + "' is not valid JSON");
  return from_json(j);
}

}  // namespace cgdmer::train
