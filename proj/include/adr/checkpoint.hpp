#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "adr/config.hpp"
#include "adr/image_io.hpp"
#include "adr/optim.hpp"
#include "adr/pipeline.hpp"

namespace adr {

inline constexpr char kCheckpointMagic[8] = {'A', 'D', 'R', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// A named record: an f32 tensor, an opaque byte string or a u64.
struct CheckpointRecord {
  enum class Kind : std::uint8_t { tensor = 0, bytes = 1, u64 = 2 };
  std::string name;
  Kind kind = Kind::tensor;
  Shape shape;
  std::vector<float> data;
  std::string bytes;
  std::uint64_t value = 0;
};

/// Ordered list of records with a little-endian binary encoding:
/// "ADRCKPT1", u32 version, u32 count, then per record u32 name length,
/// name, u8 kind and the payload (tensor: u32 rank, u64 dims, f32 values;
/// bytes: u64 length, bytes; u64: the value).
class Checkpoint {
 public:
  std::vector<CheckpointRecord> records;

  void add_tensor(std::string name, Shape shape, std::vector<float> data) {
    CheckpointRecord r;
    r.name = std::move(name);
    r.kind = CheckpointRecord::Kind::tensor;
    r.shape = std::move(shape);
    r.data = std::move(data);
    records.push_back(std::move(r));
  }
  void add_bytes(std::string name, std::string bytes) {
    CheckpointRecord r;
    r.name = std::move(name);
    r.kind = CheckpointRecord::Kind::bytes;
    r.bytes = std::move(bytes);
    records.push_back(std::move(r));
  }
  void add_u64(std::string name, std::uint64_t v) {
    CheckpointRecord r;
    r.name = std::move(name);
    r.kind = CheckpointRecord::Kind::u64;
    r.value = v;
    records.push_back(std::move(r));
  }

  const CheckpointRecord* find(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }

  const CheckpointRecord& require(const std::string& name, CheckpointRecord::Kind kind) const {
    const auto* r = find(name);
    if (!r) throw DataError("checkpoint: missing record '" + name + "'");
    if (r->kind != kind) throw DataError("checkpoint: record '" + name + "' has the wrong kind");
    return *r;
  }

  std::vector<std::uint8_t> encode() const {
    std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
    auto put = [&](std::uint64_t v, int bytes) {
      for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    };
    put(kCheckpointVersion, 4);
    put(records.size(), 4);
    for (const auto& r : records) {
      put(r.name.size(), 4);
      out.insert(out.end(), r.name.begin(), r.name.end());
      out.push_back(static_cast<std::uint8_t>(r.kind));
      switch (r.kind) {
        case CheckpointRecord::Kind::tensor:
          put(r.shape.size(), 4);
          for (auto d : r.shape) put(d, 8);
          for (float f : r.data) {
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put(bits, 4);
          }
          break;
        case CheckpointRecord::Kind::bytes:
          put(r.bytes.size(), 8);
          out.insert(out.end(), r.bytes.begin(), r.bytes.end());
          break;
        case CheckpointRecord::Kind::u64:
          put(r.value, 8);
          break;
      }
    }
    return out;
  }

  static Checkpoint decode(const std::vector<std::uint8_t>& buf, const std::string& source = "checkpoint") {
    std::size_t pos = 0;
    auto fail = [&](const std::string& what) -> void {
      throw DataError(source + ": " + what + " at byte " + std::to_string(pos));
    };
    auto get = [&](int bytes) {
      if (buf.size() - pos < static_cast<std::size_t>(bytes)) fail("truncated");
      std::uint64_t v = 0;
      for (int i = 0; i < bytes; ++i) v |= std::uint64_t(buf[pos + i]) << (8 * i);
      pos += bytes;
      return v;
    };
    if (buf.size() < 8 || std::memcmp(buf.data(), kCheckpointMagic, 8) != 0) fail("bad magic");
    pos = 8;
    const auto version = get(4);
    if (version != kCheckpointVersion) fail("unsupported version " + std::to_string(version));
    const auto count = get(4);
    Checkpoint ck;
    for (std::uint64_t k = 0; k < count; ++k) {
      CheckpointRecord r;
      const auto len = get(4);
      if (buf.size() - pos < len) fail("truncated name");
      r.name.assign(reinterpret_cast<const char*>(buf.data() + pos), len);
      pos += len;
      const auto kind = get(1);
      if (kind > 2) fail("unknown record kind " + std::to_string(kind));
      r.kind = static_cast<CheckpointRecord::Kind>(kind);
      switch (r.kind) {
        case CheckpointRecord::Kind::tensor: {
          const auto rank = get(4);
          if (rank > 8) fail("implausible rank");
          for (std::uint64_t i = 0; i < rank; ++i) r.shape.push_back(get(8));
          const std::size_t n = numel(r.shape);
          if ((buf.size() - pos) / 4 < n) fail("truncated tensor payload");
          r.data.resize(n);
          for (auto& f : r.data) {
            const auto bits = static_cast<std::uint32_t>(get(4));
            std::memcpy(&f, &bits, 4);
          }
          break;
        }
        case CheckpointRecord::Kind::bytes: {
          const auto n = get(8);
          if (buf.size() - pos < n) fail("truncated byte record");
          r.bytes.assign(reinterpret_cast<const char*>(buf.data() + pos), n);
          pos += n;
          break;
        }
        case CheckpointRecord::Kind::u64:
          r.value = get(8);
          break;
      }
      ck.records.push_back(std::move(r));
    }
    if (pos != buf.size()) fail("trailing bytes");
    return ck;
  }

  void save(const std::filesystem::path& path) const { detail::write_file(path, encode()); }

  static Checkpoint load(const std::filesystem::path& path) {
    return decode(detail::read_file(path), path.string());
  }
};

/// Training state captured in a checkpoint.
struct TrainingState {
  Config config;
  std::string rng_state;
  std::uint64_t epoch = 0;
};

inline Checkpoint make_checkpoint(const TrainingState& state, const Pipeline<float>& model, const Adam<float>& opt) {
  Checkpoint ck;
  ck.add_bytes("config", to_json(state.config).dump());
  ck.add_bytes("rng", state.rng_state);
  ck.add_u64("epoch", state.epoch);
  ck.add_u64("adam.step", opt.step_count());
  const auto& store = model.parameters();
  for (const auto& [name, t] : store) ck.add_tensor("param/" + name, t.shape(), t.values());
  for (std::size_t i = 0; i < store.size(); ++i) {
    ck.add_tensor("adam.m/" + store[i].first, store[i].second.shape(), opt.first_moment(i));
    ck.add_tensor("adam.v/" + store[i].first, store[i].second.shape(), opt.second_moment(i));
  }
  return ck;
}

inline Config checkpoint_config(const Checkpoint& ck) {
  const auto& r = ck.require("config", CheckpointRecord::Kind::bytes);
  return parse_config(r.bytes);
}

/// Copies parameters (and, when `opt` is given, the optimizer state) into
/// `model`. The parameter sets must match exactly in names, order and shapes.
inline void restore_checkpoint(const Checkpoint& ck, Pipeline<float>& model, Adam<float>* opt = nullptr) {
  auto& store = model.parameters();
  std::size_t tensors = 0;
  for (const auto& r : ck.records)
    if (r.name.rfind("param/", 0) == 0) ++tensors;
  if (tensors != store.size()) {
    throw DataError("checkpoint: architecture mismatch, checkpoint has " + std::to_string(tensors) +
                    " parameters, model has " + std::to_string(store.size()));
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& [name, t] = store[i];
    const auto* r = ck.find("param/" + name);
    if (!r || r->kind != CheckpointRecord::Kind::tensor) {
      throw DataError("checkpoint: architecture mismatch, missing parameter " + name);
    }
    if (r->shape != t.shape()) {
      throw DataError("checkpoint: architecture mismatch for " + name + ": " + to_string(r->shape) + " vs " +
                      to_string(t.shape()));
    }
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    Tensor<float> t = store[i].second;
    const auto& src = ck.find("param/" + store[i].first)->data;
    auto dst = t.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  if (opt) {
    *opt = Adam<float>(store, opt->options());
    opt->set_step_count(ck.require("adam.step", CheckpointRecord::Kind::u64).value);
    for (std::size_t i = 0; i < store.size(); ++i) {
      const auto& m = ck.require("adam.m/" + store[i].first, CheckpointRecord::Kind::tensor);
      const auto& v = ck.require("adam.v/" + store[i].first, CheckpointRecord::Kind::tensor);
      if (m.data.size() != store[i].second.numel() || v.data.size() != store[i].second.numel()) {
        throw DataError("checkpoint: optimizer state mismatch for " + store[i].first);
      }
      opt->first_moment(i) = m.data;
      opt->second_moment(i) = v.data;
    }
  }
}

}  // namespace adr
