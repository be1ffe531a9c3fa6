// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint container shared by every model. Byte layout (little-endian):
//
//   char[8]  magic "ATLRCKPT"
//   u32      format version (kCheckpointVersion)
//   u32      metadata length M, then M bytes of UTF-8 JSON
//   u32      array count N, then N arrays of:
//              u32 name length L, L bytes of name
//              u32 rank R, R x u64 dims
//              prod(dims) x f64 values (row-major)
//
// Arrays are written in name order. See docs/checkpoint-format.md.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atelier/core/hash.hpp"
#include "atelier/core/params.hpp"

namespace atelier {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'A', 'T', 'L', 'R', 'C', 'K', 'P', 'T'};

struct Checkpoint {
  std::string kind;        // "damsm", "dmgan", "genre_classifier", "style_predictor", "style_transfer"
  nlohmann::json config;   // model configuration needed to rebuild the network
  ParamSet params;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

class ByteWriter {
 public:
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}
  std::uint32_t u32() { return read<std::uint32_t>(); }
  std::uint64_t u64() { return read<std::uint64_t>(); }
  double f64() { return read<double>(); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  template <typename T>
  T read() {
    T v;
    raw(&v, sizeof v);
    return v;
  }
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error("corrupt_checkpoint", "checkpoint truncated");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  nlohmann::json meta = {{"kind", ck.kind}, {"config", ck.config}};
  w.str(meta.dump());
  w.u32(static_cast<std::uint32_t>(ck.params.count()));
  for (const auto& [name, t] : ck.params) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    w.raw(t.data(), t.size() * sizeof(double));
  }
  return std::move(w.bytes());
}

inline Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw Error("corrupt_checkpoint", "not an atelier checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw Error("incompatible_checkpoint", "unsupported checkpoint format version " + std::to_string(version));
  Checkpoint ck;
  const auto meta = nlohmann::json::parse(r.str());
  ck.kind = meta.at("kind").get<std::string>();
  ck.config = meta.at("config");
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    Tensor t(shape);
    r.raw(t.data(), t.size() * sizeof(double));
    ck.params.set(name, std::move(t));
  }
  if (!r.done()) throw Error("corrupt_checkpoint", "trailing bytes after checkpoint arrays");
  return ck;
}

// Writes to a temporary sibling then renames, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("io_error", "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("io_error", "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("not_found", "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file_bytes(path));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_kind) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.kind != expected_kind)
    throw Error("incompatible_checkpoint",
                path.string() + " holds a '" + ck.kind + "' checkpoint, expected '" + expected_kind + "'");
  return ck;
}

// Short content id used in provenance records.
inline std::string checkpoint_id(const Checkpoint& ck) {
  const auto bytes = serialize_checkpoint(ck);
  return sha256_hex(std::span<const std::uint8_t>(bytes)).substr(0, 16);
}

}  // namespace atelier
