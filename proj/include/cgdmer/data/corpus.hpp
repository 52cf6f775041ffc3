#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <span>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cgdmer/numerics/random.hpp"

namespace cgdmer::data {

struct ClassSpec {
  std::string name;
  double rate_lo = 60.0;  // beats/min
  double rate_hi = 90.0;
  double jitter = 0.02;   // relative std of RR intervals
  std::vector<std::string> templates;  // "{rate}" is replaced by the mean rate
  std::vector<double> lead_scale;      // length L
};

struct SignalRecord {
  std::string id;
  std::size_t leads = 0;
  std::size_t length = 0;
  std::vector<float> ecg;  // row-major [lead][sample]
  std::string report;
  std::size_t label = 0;
  std::string class_name;
  double mean_rate_bpm = 0.0;  // generator-side only, not persisted

  std::span<const float> lead(std::size_t l) const { return std::span<const float>(ecg).subspan(l * length, length); }
};

struct CorpusConfig {
  std::size_t leads = 12;
  std::size_t length = 1000;
  double duration_s = 10.0;

  double sample_rate() const { return static_cast<double>(length) / duration_s; }
};

/// Class-agnostic lead gains; the first twelve loosely follow limb and
/// precordial QRS polarity.
inline std::vector<double> lead_profile(std::size_t leads) {
  static const double base[] = {0.7, 1.0, 0.4, -0.85, 0.3, 0.7, -0.5, 0.6, 0.9, 1.2, 1.1, 0.9};
  std::vector<double> p(leads);
  for (std::size_t l = 0; l < leads; ++l) p[l] = base[l % 12] * (l < 12 ? 1.0 : 0.8);
  return p;
}

inline std::vector<ClassSpec> default_classes(std::size_t leads) {
  std::vector<ClassSpec> c{
      {"normal sinus rhythm", 60, 90, 0.02,
       {"Normal sinus rhythm at {rate} bpm.", "Sinus rhythm, rate {rate}. Normal ECG.",
        "Regular sinus rhythm with a heart rate of {rate} beats per minute, within normal limits."},
       {}},
      {"sinus tachycardia", 120, 180, 0.02,
       {"Sinus tachycardia at {rate} bpm.", "Tachycardia, rate {rate}. Rapid regular rhythm.",
        "Sinus tachycardia with a fast heart rate of {rate} beats per minute."},
       {}},
      {"sinus bradycardia", 35, 50, 0.02,
       {"Sinus bradycardia at {rate} bpm.", "Bradycardia, rate {rate}. Slow regular rhythm.",
        "Marked sinus bradycardia with a slow heart rate of {rate} beats per minute."},
       {}},
      {"irregular rhythm", 60, 100, 0.15,
       {"Irregular rhythm at {rate} bpm.", "Irregularly irregular rhythm, rate {rate}.",
        "Irregular rhythm with variable RR intervals, heart rate {rate} beats per minute."},
       {}},
  };
  const auto profile = lead_profile(leads);
  for (std::size_t k = 0; k < c.size(); ++k) {
    c[k].lead_scale.resize(leads);
    for (std::size_t l = 0; l < leads; ++l) {
      c[k].lead_scale[l] = profile[l] * (1.0 + 0.1 * std::sin(1.7 * double(l + 1) * double(k + 1)));
    }
  }
  return c;
}

inline void validate_classes(const std::vector<ClassSpec>& specs, const CorpusConfig& cfg) {
  if (specs.size() < 2) throw std::invalid_argument("corpus: need at least 2 classes");
  if (cfg.leads == 0 || cfg.length == 0 || !(cfg.duration_s > 0)) throw std::invalid_argument("corpus: empty signal shape");
  for (const auto& s : specs) {
    if (!(s.rate_lo > 0 && s.rate_lo <= s.rate_hi)) throw std::invalid_argument("corpus: bad rate band for " + s.name);
    if (2.0 * 60.0 / s.rate_lo > cfg.duration_s) {
      throw std::invalid_argument("corpus: class '" + s.name + "' rate band starting at " + std::to_string(s.rate_lo) +
                                  " bpm fits fewer than 2 beats in " + std::to_string(cfg.duration_s) + " s");
    }
    if (s.templates.empty()) throw std::invalid_argument("corpus: class '" + s.name + "' has no report template");
    if (s.lead_scale.size() != cfg.leads) throw std::invalid_argument("corpus: lead_scale length != L for " + s.name);
    if (!(s.jitter >= 0 && s.jitter < 0.4)) throw std::invalid_argument("corpus: jitter must lie in [0, 0.4)");
  }
}

/// RR intervals (seconds) covering the record plus margins. The jitter
/// factors are rescaled to mean exactly 1, so the mean RR equals 60/rate.
inline std::vector<double> sample_rr(double rate_bpm, double jitter, double span_s, Rng& rng) {
  const double rr = 60.0 / rate_bpm;
  const auto beats = static_cast<std::size_t>(std::ceil(span_s / rr)) + 2;
  std::normal_distribution<double> g;
  std::vector<double> f(beats);
  for (double& x : f) x = 1.0 + jitter * std::clamp(g(rng), -2.5, 2.5);
  double m = 0;
  for (double x : f) m += x;
  m /= static_cast<double>(beats);
  for (double& x : f) x = rr * x / m;
  return f;
}

namespace detail {
struct Wave {
  double offset, amp, width;
};

inline std::string fill_template(std::string t, long rate) {
  const std::string key = "{rate}";
  for (auto p = t.find(key); p != std::string::npos; p = t.find(key)) t.replace(p, key.size(), std::to_string(rate));
  return t;
}
}  // namespace detail

/// Record `index` of the corpus; depends only on (specs, cfg, seed, index).
inline SignalRecord generate_record(const std::vector<ClassSpec>& specs, const CorpusConfig& cfg, std::uint64_t seed,
                                    std::size_t index) {
  Rng rng(derive_seed(seed, {salt::kCorpus, index}));
  const std::size_t label = std::uniform_int_distribution<std::size_t>(0, specs.size() - 1)(rng);
  const ClassSpec& cs = specs[label];
  const double rate = std::uniform_real_distribution<double>(cs.rate_lo, cs.rate_hi)(rng);
  const double fs = cfg.sample_rate();

  auto rr = sample_rr(rate, cs.jitter, cfg.duration_s + 1.0, rng);
  std::vector<double> beat_times;
  double t = -std::uniform_real_distribution<double>(0.0, rr[0])(rng);
  for (double r : rr) {
    beat_times.push_back(t);
    t += r;
  }

  SignalRecord rec;
  rec.id = "rec-" + std::to_string(index);
  rec.leads = cfg.leads;
  rec.length = cfg.length;
  rec.label = label;
  rec.class_name = cs.name;
  rec.mean_rate_bpm = 60.0 * static_cast<double>(rr.size()) / std::accumulate(rr.begin(), rr.end(), 0.0);

  std::vector<double> beat(cfg.length, 0.0);
  for (std::size_t b = 0; b < beat_times.size(); ++b) {
    const double q = std::sqrt(rr[b]);  // repolarization stretches with the cycle
    const detail::Wave waves[] = {{-0.16, 0.12, 0.025}, {-0.03, -0.12, 0.010}, {0.0, 1.0, 0.012},
                                  {0.03, -0.25, 0.010}, {0.28 * q, 0.30, 0.05 * q}};
    for (const auto& w : waves) {
      const double c = beat_times[b] + w.offset;
      const auto lo = static_cast<long>(std::floor((c - 5 * w.width) * fs));
      const auto hi = static_cast<long>(std::ceil((c + 5 * w.width) * fs));
      for (long i = std::max(0L, lo); i <= std::min<long>(hi, static_cast<long>(cfg.length) - 1); ++i) {
        const double z = (static_cast<double>(i) / fs - c) / w.width;
        beat[static_cast<std::size_t>(i)] += w.amp * std::exp(-0.5 * z * z);
      }
    }
  }

  std::normal_distribution<double> noise;
  rec.ecg.resize(cfg.leads * cfg.length);
  for (std::size_t l = 0; l < cfg.leads; ++l) {
    const double s = cs.lead_scale[l];
    std::vector<double> row(cfg.length);
    double mean = 0;
    for (std::size_t i = 0; i < cfg.length; ++i) {
      row[i] = s * beat[i] + 0.05 * std::abs(s) * noise(rng);
      mean += row[i];
    }
    mean /= static_cast<double>(cfg.length);
    for (std::size_t i = 0; i < cfg.length; ++i) rec.ecg[l * cfg.length + i] = static_cast<float>(row[i] - mean);
  }

  const auto& tpl = cs.templates[std::uniform_int_distribution<std::size_t>(0, cs.templates.size() - 1)(rng)];
  rec.report = detail::fill_template(tpl, std::lround(rec.mean_rate_bpm));
  return rec;
}

inline std::vector<SignalRecord> generate(const std::vector<ClassSpec>& specs, std::size_t count, std::uint64_t seed,
                                          const CorpusConfig& cfg = {}) {
  if (count == 0) throw std::invalid_argument("corpus: count must be >= 1");
  validate_classes(specs, cfg);
  std::vector<SignalRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_record(specs, cfg, seed, i));
  return out;
}

// ---- NDJSON persistence ---------------------------------------------------

inline constexpr int kDatasetFormatVersion = 1;

struct DatasetMeta {
  int format_version = kDatasetFormatVersion;
  std::size_t leads = 0;
  std::size_t length = 0;
  std::vector<std::string> class_names;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<SignalRecord> records;
};

inline std::vector<std::string> class_names(const std::vector<ClassSpec>& specs) {
  std::vector<std::string> n;
  for (const auto& s : specs) n.push_back(s.name);
  return n;
}

inline void append_float(std::string& out, float v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, r.ptr);
}

inline void write_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset " + path);
  nlohmann::json meta{{"format_version", ds.meta.format_version},
                      {"L", ds.meta.leads},
                      {"T", ds.meta.length},
                      {"class_names", ds.meta.class_names}};
  out << meta.dump() << '\n';
  std::string line;
  for (const auto& r : ds.records) {
    if (r.leads != ds.meta.leads || r.length != ds.meta.length || r.ecg.size() != r.leads * r.length) {
      throw std::invalid_argument("write_dataset: record " + r.id + " does not match the L x T header");
    }
    line.clear();
    line += "{\"id\":" + nlohmann::json(r.id).dump() + ",\"ecg\":[";
    for (std::size_t l = 0; l < r.leads; ++l) {
      line += l ? ",[" : "[";
      for (std::size_t i = 0; i < r.length; ++i) {
        if (i) line.push_back(',');
        append_float(line, r.ecg[l * r.length + i]);
      }
      line.push_back(']');
    }
    line += "],\"report\":" + nlohmann::json(r.report).dump() + ",\"label\":" + std::to_string(r.label) +
            ",\"class_name\":" + nlohmann::json(r.class_name).dump() + "}\n";
    out << line;
  }
  if (!out) throw std::runtime_error("error while writing dataset " + path);
}

namespace detail {

inline void skip_ws(std::string_view s, std::size_t& i) {
  while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r' || s[i] == '\n')) ++i;
}

/// Strict scanner for the numeric `ecg` block (an array of equal-length
/// number arrays). Numbers go straight from text to float, which keeps
/// 32-bit values (including -0) exact and is much faster than a generic
/// JSON DOM. Returns an error message, empty on success.
inline std::string scan_ecg(std::string_view s, std::size_t& i, SignalRecord& rec) {
  auto expect = [&](char c) {
    skip_ws(s, i);
    if (i >= s.size() || s[i] != c) return false;
    ++i;
    return true;
  };
  if (!expect('[')) return "ecg must be an array";
  rec.leads = 0;
  rec.length = 0;
  skip_ws(s, i);
  if (i < s.size() && s[i] == ']') return (++i, "");
  for (;;) {
    if (!expect('[')) return "ecg rows must be arrays";
    std::size_t cols = 0;
    skip_ws(s, i);
    if (i < s.size() && s[i] == ']') {
      ++i;
    } else {
      for (;;) {
        skip_ws(s, i);
        float f = 0.0f;
        auto r = std::from_chars(s.data() + i, s.data() + s.size(), f);
        if (r.ec != std::errc() || !std::isfinite(f)) return "bad ecg number at byte " + std::to_string(i);
        i = static_cast<std::size_t>(r.ptr - s.data());
        rec.ecg.push_back(f);
        ++cols;
        skip_ws(s, i);
        if (i < s.size() && s[i] == ',') { ++i; continue; }
        if (!expect(']')) return "expected ',' or ']' in ecg row at byte " + std::to_string(i);
        break;
      }
    }
    if (rec.leads == 0) rec.length = cols;
    else if (cols != rec.length) return "ecg rows have unequal lengths";
    ++rec.leads;
    skip_ws(s, i);
    if (i < s.size() && s[i] == ',') { ++i; continue; }
    if (!expect(']')) return "expected ',' or ']' after ecg row";
    return "";
  }
}

/// Parses one record line. The `ecg` block is scanned by hand and cut out;
/// the remaining small object goes through the JSON parser.
inline std::string parse_record(std::string_view line, SignalRecord& rec) {
  // An unescaped "ecg" followed by ':' can only be the top-level key.
  std::size_t key = std::string_view::npos;
  for (std::size_t p = line.find("\"ecg\""); p != std::string_view::npos; p = line.find("\"ecg\"", p + 1)) {
    std::size_t q = p + 5;
    skip_ws(line, q);
    if (q < line.size() && line[q] == ':') {
      key = q + 1;
      break;
    }
  }
  if (key == std::string_view::npos) return "record has no ecg field";
  std::size_t end = key;
  if (auto err = scan_ecg(line, end, rec); !err.empty()) return err;
  std::string rest(line.substr(0, key));
  rest += "null";
  rest += line.substr(end);
  try {
    auto j = nlohmann::json::parse(rest);
    if (!j.is_object()) return "record is not a JSON object";
    rec.id = j.at("id").get<std::string>();
    rec.report = j.at("report").get<std::string>();
    rec.label = j.at("label").get<std::size_t>();
    rec.class_name = j.at("class_name").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    return std::string("malformed record: ") + e.what();
  }
  return "";
}

}  // namespace detail

inline Dataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset " + path);
  Dataset ds;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": missing metadata line");
  try {
    auto meta = nlohmann::json::parse(line);
    ds.meta.format_version = meta.at("format_version").get<int>();
    ds.meta.leads = meta.at("L").get<std::size_t>();
    ds.meta.length = meta.at("T").get<std::size_t>();
    ds.meta.class_names = meta.at("class_names").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ":1: bad metadata line: " + e.what());
  }
  if (ds.meta.format_version != kDatasetFormatVersion) {
    throw std::runtime_error(path + ": dataset format version " + std::to_string(ds.meta.format_version) +
                             " is not supported (expected " + std::to_string(kDatasetFormatVersion) + ")");
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    SignalRecord rec;
    rec.ecg.reserve(ds.meta.leads * ds.meta.length);
    std::string err = detail::parse_record(line, rec);
    if (err.empty() && (rec.leads != ds.meta.leads || rec.length != ds.meta.length)) {
      err = "ecg is " + std::to_string(rec.leads) + "x" + std::to_string(rec.length) + " but header says " +
            std::to_string(ds.meta.leads) + "x" + std::to_string(ds.meta.length);
    }
    if (err.empty() && rec.label >= ds.meta.class_names.size()) {
      err = "label " + std::to_string(rec.label) + " outside the " + std::to_string(ds.meta.class_names.size()) +
            " header classes";
    }
    if (!err.empty()) throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + err);
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace cgdmer::data
