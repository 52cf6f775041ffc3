#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "cgdmer/train/trainer.hpp"

namespace cgdmer::train {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// Layout, all integers little-endian:
//   "CGDM" | u32 version | u64 total file size
//   u64 n | n bytes JSON {config, vocab, train_size}
//   u32 count | count x (u32 name len, name, u8 dtype, u32 rank, u64 extents[rank], values)
//   u64 optimizer step | per parameter: m values, v values
//   u32 n | n bytes RNG state (std::mt19937_64 text form)
inline constexpr char kCheckpointMagic[4] = {'C', 'G', 'D', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 0 : 1;
}

inline const char* dtype_name(std::uint8_t code) { return code == 0 ? "f32" : code == 1 ? "f64" : "unknown"; }

namespace detail {

class Writer {
 public:
  template <typename V>
  void put(V v) {
    static_assert(std::is_trivially_copyable_v<V>);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(V));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void str32(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<char>& buffer() { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> buf) : buf_(std::move(buf)) {}
  template <typename V>
  V get() {
    V v;
    need(sizeof(V));
    std::memcpy(&v, buf_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) throw CheckpointError("checkpoint is corrupt: record runs past the end of the file");
  }
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
void save_checkpoint(const TrainState<T>& st, const std::string& path) {
  detail::Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(0);  // patched below

  json meta = {{"config", to_json(st.config)}, {"vocab", st.vocab.tokens()}, {"train_size", st.train_size}};
  const std::string js = meta.dump();
  w.put<std::uint64_t>(js.size());
  w.bytes(js.data(), js.size());

  const auto& store = st.model->store();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(store.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& t = store.tensors()[i];
    w.str32(store.names()[i]);
    w.put<std::uint8_t>(dtype_code<T>());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) w.put<std::uint64_t>(e);
    w.bytes(t.data().data(), t.numel() * sizeof(T));
  }

  w.put<std::uint64_t>(st.optimizer.t);
  for (std::size_t i = 0; i < store.size(); ++i) {
    w.bytes(st.optimizer.m[i].data(), st.optimizer.m[i].size() * sizeof(T));
    w.bytes(st.optimizer.v[i].data(), st.optimizer.v[i].size() * sizeof(T));
  }
  std::ostringstream rng;
  rng << st.epoch_rng;
  w.str32(rng.str());

  auto& buf = w.buffer();
  const std::uint64_t total = buf.size();
  std::memcpy(buf.data() + 8, &total, sizeof total);

  // Write to a sibling and rename so a crash never leaves a torn checkpoint.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
TrainState<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path + ": ";
  if (buf.size() < 16 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError(where + "not a checkpoint (bad magic)");
  }
  detail::Reader r(std::move(buf));
  r.str(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(where + "checkpoint format version " + std::to_string(version) + ", this build reads version " +
                          std::to_string(kCheckpointVersion));
  }
  const auto expected = r.get<std::uint64_t>();
  const std::uint64_t actual = r.remaining() + 16;
  if (expected != actual) {
    throw CheckpointError(where + "truncated checkpoint: expected " + std::to_string(expected) + " bytes, file has " +
                          std::to_string(actual));
  }

  json meta = json::parse(r.str(r.get<std::uint64_t>()), nullptr, false);
  if (meta.is_discarded() || !meta.contains("config") || !meta.contains("vocab") || !meta.contains("train_size")) {
    throw CheckpointError(where + "checkpoint header is not valid JSON");
  }
  TrainConfig cfg = from_json(meta["config"]);
  auto vocab = text::Vocab::from_tokens(meta["vocab"].get<std::vector<std::string>>());
  TrainState<T> st = init_state<T>(cfg, std::move(vocab), meta["train_size"].get<std::size_t>());

  auto& store = st.model->store();
  const auto count = r.get<std::uint32_t>();
  if (count != store.size()) {
    throw CheckpointError(where + std::to_string(count) + " parameters stored, model has " + std::to_string(store.size()));
  }
  for (std::size_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.get<std::uint32_t>());
    const auto dtype = r.get<std::uint8_t>();
    if (name != store.names()[i]) {
      throw CheckpointError(where + "parameter " + std::to_string(i) + " is '" + name + "', model expects '" +
                            store.names()[i] + "'");
    }
    if (dtype != dtype_code<T>()) {
      throw CheckpointError(where + name + " stored as " + dtype_name(dtype) + ", loading as " + dtype_name(dtype_code<T>()));
    }
    Shape shape(r.get<std::uint32_t>());
    for (auto& e : shape) e = r.get<std::uint64_t>();
    auto& t = store.tensors()[i];
    if (shape != t.shape()) {
      throw CheckpointError(where + name + " has shape " + shape_str(shape) + ", model expects " + shape_str(t.shape()));
    }
    r.bytes(t.mutable_data().data(), t.numel() * sizeof(T));
  }

  st.optimizer.t = r.get<std::uint64_t>();
  for (std::size_t i = 0; i < count; ++i) {
    r.bytes(st.optimizer.m[i].data(), st.optimizer.m[i].size() * sizeof(T));
    r.bytes(st.optimizer.v[i].data(), st.optimizer.v[i].size() * sizeof(T));
  }
  std::istringstream rng(r.str(r.get<std::uint32_t>()));
  rng >> st.epoch_rng;
  if (!rng) throw CheckpointError(where + "unreadable RNG state");
  if (r.remaining() != 0) throw CheckpointError(where + std::to_string(r.remaining()) + " trailing bytes");
  return st;
}

}  // namespace cgdmer::train
