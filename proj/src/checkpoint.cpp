// SPDX-License-Identifier: Apache-2.0
#include "mixformer/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <map>

#include "mixformer/io.hpp"

namespace mixformer {

namespace {

std::uint32_t checksum(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks that always fit.
  constexpr std::size_t kChunk = 1u << 30;
  for (std::size_t off = 0; off < bytes.size(); off += kChunk) {
    const std::size_t n = std::min(kChunk, bytes.size() - off);
    crc = crc32(crc, bytes.data() + off, static_cast<uInt>(n));
  }
  return static_cast<std::uint32_t>(crc);
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t to_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffu) throw ConfigError(std::string("checkpoint: ") + what + " exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

bool allowed(const std::string& name, const std::vector<std::string>& allowlist) {
  return std::any_of(allowlist.begin(), allowlist.end(),
                     [&](const std::string& p) { return name.compare(0, p.size(), p) == 0; });
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, to_u32(entries.size(), "entry count"));
  for (const auto& e : entries) {
    if (e.values.size() != mixformer::numel(e.shape)) {
      throw DimensionError("checkpoint entry '" + e.name + "' holds " + std::to_string(e.values.size()) +
                           " values for shape " + to_string(e.shape));
    }
    put_u32(out, to_u32(e.name.size(), "name length"));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_u32(out, to_u32(e.shape.size(), "rank"));
    for (std::size_t d : e.shape) put_u32(out, to_u32(d, "dimension"));
    for (float v : e.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  put_u32(out, checksum(out));
  return out;
}

std::vector<CheckpointEntry> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16) throw IoError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
  const std::span<const std::uint8_t> body = bytes.first(bytes.size() - 4);
  const std::uint32_t stored = Reader(bytes.last(4)).u32();
  if (checksum(body) != stored) throw IoError("checkpoint CRC mismatch (file corrupt or truncated)");

  Reader r(body);
  if (r.text(4) != std::string(kCheckpointMagic, 4)) throw IoError("not a checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  std::vector<CheckpointEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.text(r.u32());
    const std::uint32_t rank = r.u32();
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      e.shape.push_back(r.u32());
      n *= e.shape.back();
    }
    if (n * 4 > r.remaining()) throw IoError("checkpoint truncated in payload of '" + e.name + "'");
    e.values.resize(n);
    for (float& v : e.values) v = r.f32();
    entries.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw IoError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
  return entries;
}

std::vector<CheckpointEntry> snapshot(const ParamList<float>& params) {
  std::vector<CheckpointEntry> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    const auto data = p.tensor.data();
    out.push_back({p.name, p.tensor.shape(), std::vector<float>(data.begin(), data.end())});
  }
  return out;
}

LoadReport load_parameters(const ParamList<float>& params, const std::vector<CheckpointEntry>& entries,
                           const std::vector<std::string>& allowlist) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) {
    if (!by_name.emplace(e.name, &e).second) throw ConfigError("checkpoint names '" + e.name + "' twice");
  }
  const bool partial = !allowlist.empty();

  // Validate everything first so a failed load leaves the model untouched.
  std::vector<std::pair<Tensor<float>, const CheckpointEntry*>> plan;
  std::map<std::string, bool> used;
  for (const auto& p : params) {
    if (partial && !allowed(p.name, allowlist)) continue;
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ConfigError("checkpoint is missing tensor '" + p.name + "'");
    if (it->second->shape != p.tensor.shape()) {
      throw ConfigError("shape mismatch for '" + p.name + "': checkpoint " + to_string(it->second->shape) +
                        ", model " + to_string(p.tensor.shape()));
    }
    plan.emplace_back(p.tensor, it->second);
    used[p.name] = true;
  }
  LoadReport report;
  for (const auto& e : entries) {
    if (used.count(e.name)) continue;
    if (!partial) throw ConfigError("checkpoint tensor '" + e.name + "' does not exist in this model");
    report.ignored.push_back(e.name);
  }
  for (auto& [tensor, entry] : plan) {
    Tensor<float> t = tensor;
    std::copy(entry->values.begin(), entry->values.end(), t.mutable_data().begin());
  }
  report.loaded = plan.size();
  return report;
}

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(snapshot(model.parameters())));
}

LoadReport load_checkpoint(const Model<float>& model, const std::filesystem::path& path,
                           const std::vector<std::string>& allowlist) {
  return load_parameters(model.parameters(), decode_checkpoint(read_file(path)), allowlist);
}

Model<float> clone_model(const Model<float>& model) {
  Model<float> copy(model.config(), 0);
  load_parameters(copy.parameters(), snapshot(model.parameters()));
  return copy;
}

}  // namespace mixformer
