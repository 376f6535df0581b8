#pragma once

#include <bit>
#include <cstdint>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tdhnode/data.hpp"
#include "tdhnode/errors.hpp"
#include "tdhnode/model.hpp"
#include "tdhnode/pathways.hpp"
#include "tdhnode/training.hpp"

namespace tdhnode {

inline constexpr char kCheckpointMagic[4] = {'T', 'D', 'H', 'N'};
inline constexpr char kCheckpointEnd[4] = {'N', 'H', 'D', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

/// Model, data schema and (optionally) resumable training state.
struct Checkpoint {
  TrainConfig train;  // train.model is the architecture
  PathwaySet pathways;
  FeatureSchema schema;
  std::uint64_t model_seed = 0;
  std::map<std::string, Matrix<float>> params;
  std::optional<TrainState<float>> state;
};

namespace detail {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void tensor(const std::string& name, const Matrix<float>& m) {
    str(name);
    u32(static_cast<std::uint32_t>(m.rows()));
    u32(static_cast<std::uint32_t>(m.cols()));
    bytes(m.data(), static_cast<std::size_t>(m.size()) * sizeof(float));
  }
  void group(const std::string& name, const std::map<std::string, Matrix<float>>& tensors) {
    str(name);
    u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [k, v] : tensors) tensor(k, v);
  }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  void bytes(void* p, std::size_t n) {
    if (n > data_.size() - pos_) throw Error(ErrorCode::CorruptFile, "checkpoint is truncated");
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > data_.size() - pos_) throw Error(ErrorCode::CorruptFile, "checkpoint is truncated");
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::pair<std::string, Matrix<float>> tensor() {
    std::string name = str();
    const std::uint32_t r = u32(), c = u32();
    const std::uint64_t count = static_cast<std::uint64_t>(r) * c;
    if (count * sizeof(float) > data_.size() - pos_) throw Error(ErrorCode::CorruptFile, "checkpoint is truncated");
    Matrix<float> m(r, c);
    bytes(m.data(), static_cast<std::size_t>(count) * sizeof(float));
    return {std::move(name), std::move(m)};
  }
  std::pair<std::string, std::map<std::string, Matrix<float>>> group() {
    std::string name = str();
    const std::uint32_t n = u32();
    std::map<std::string, Matrix<float>> out;
    for (std::uint32_t i = 0; i < n; ++i) out.insert(tensor());
    return {std::move(name), std::move(out)};
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

inline nlohmann::json state_to_json(const TrainState<float>& s) {
  nlohmann::json j{{"epoch", s.epoch},
                   {"best_epoch", s.best_epoch},
                   {"wait", s.wait},
                   {"finished", s.finished},
                   {"history", history_to_json(s.history)},
                   {"adam_steps", s.adam_steps}};
  // JSON has no infinity; null marks "no validation yet".
  j["best_val"] = std::isfinite(s.best_val) ? nlohmann::json(s.best_val) : nlohmann::json(nullptr);
  return j;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  detail::Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.group("params", c.params);
  nlohmann::json meta{{"train", c.train},
                      {"pathways", c.pathways.to_json()},
                      {"schema", c.schema.to_json()},
                      {"model_seed", c.model_seed}};
  w.str(meta.dump());
  w.u64(c.pathways.build().fingerprint());
  w.str(c.state ? c.state->rng_state : std::string{});
  w.u32(c.state ? 1u : 0u);
  if (c.state) {
    w.str(detail::state_to_json(*c.state).dump());
    w.group("adam.m", c.state->adam_m);
    w.group("adam.v", c.state->adam_v);
    w.group("best", c.state->best_params);
    w.group("current", c.state->current_params);
  }
  w.bytes(kCheckpointEnd, 4);
  return w.buffer();
}

/// Parses a checkpoint. When `expected` is given its fingerprint must match
/// the pathways the model was trained on.
inline Checkpoint parse_checkpoint(std::string data, const ProgressionHypergraph* expected = nullptr) {
  detail::Reader r(std::move(data));
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw Error(ErrorCode::CorruptFile, "bad checkpoint magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::VersionMismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                                std::to_string(kCheckpointVersion));
  }
  Checkpoint c;
  auto [pname, params] = r.group();
  if (pname != "params") throw Error(ErrorCode::CorruptFile, "missing parameter group");
  c.params = std::move(params);
  try {
    const nlohmann::json meta = nlohmann::json::parse(r.str());
    c.train = meta.at("train").get<TrainConfig>();
    c.pathways = PathwaySet::from_json(meta.at("pathways"));
    c.schema = FeatureSchema::from_json(meta.at("schema"));
    c.model_seed = meta.at("model_seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::CorruptFile, std::string("checkpoint metadata: ") + ex.what());
  }
  const std::uint64_t hash = r.u64();
  const std::string rng_state = r.str();
  const std::uint32_t has_state = r.u32();
  if (has_state > 1) throw Error(ErrorCode::CorruptFile, "bad training-state flag");
  if (has_state) {
    TrainState<float> s;
    try {
      const nlohmann::json j = nlohmann::json::parse(r.str());
      s.epoch = j.at("epoch").get<int>();
      s.best_epoch = j.at("best_epoch").get<int>();
      s.wait = j.at("wait").get<int>();
      s.finished = j.at("finished").get<bool>();
      s.history = history_from_json(j.at("history"));
      s.adam_steps = j.at("adam_steps").get<std::uint64_t>();
      s.best_val = j.at("best_val").is_null() ? std::numeric_limits<double>::infinity()
                                              : j.at("best_val").get<double>();
    } catch (const nlohmann::json::exception& ex) {
      throw Error(ErrorCode::CorruptFile, std::string("checkpoint training state: ") + ex.what());
    }
    s.rng_state = rng_state;
    s.adam_m = r.group().second;
    s.adam_v = r.group().second;
    s.best_params = r.group().second;
    s.current_params = r.group().second;
    c.state = std::move(s);
  }
  char end[4];
  r.bytes(end, 4);
  if (std::memcmp(end, kCheckpointEnd, 4) != 0 || !r.at_end()) {
    throw Error(ErrorCode::CorruptFile, "checkpoint has no valid end marker");
  }
  const ProgressionHypergraph stored = c.pathways.build();
  if (stored.fingerprint() != hash) throw Error(ErrorCode::CorruptFile, "stored pathway hash does not match pathways");
  if (expected && expected->fingerprint() != hash) {
    throw Error(ErrorCode::PathwayHashMismatch, "checkpoint was trained on different pathways");
  }
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write checkpoint " + path);
    const std::string bytes = serialize_checkpoint(c);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoError, "short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error(ErrorCode::IoError, "cannot move checkpoint to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path, const ProgressionHypergraph* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str(), expected);
}

template <class T>
std::map<std::string, Matrix<float>> export_params(const ParameterStore<T>& store) {
  std::map<std::string, Matrix<float>> out;
  for (const auto& [name, p] : store) out[name] = p.value.template cast<float>();
  return out;
}

template <class T>
std::map<std::string, Matrix<float>> to_float_map(const std::map<std::string, Matrix<T>>& m) {
  std::map<std::string, Matrix<float>> out;
  for (const auto& [k, v] : m) out[k] = v.template cast<float>();
  return out;
}

/// Model rebuilt from a checkpoint with the saved parameter values.
inline Model<float> model_from_checkpoint(const Checkpoint& c) {
  Model<float> m(c.train.model, c.pathways.build(), c.model_seed);
  for (auto& [name, p] : m.params()) {
    auto it = c.params.find(name);
    if (it == c.params.end()) throw Error(ErrorCode::CorruptFile, "checkpoint lacks parameter " + name);
    if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
      throw Error(ErrorCode::ShapeMismatch, "checkpoint parameter " + name + " has a different shape");
    }
    p.value = it->second;
  }
  if (c.params.size() != m.params().size()) throw Error(ErrorCode::CorruptFile, "checkpoint has extra parameters");
  return m;
}

}  // namespace tdhnode
