#pragma once

// Binary checkpoint. Layout, all integers little-endian:
//   "DSR1" | u32 version | u64 seed | u32 n + n bytes config snapshot |
//   u32 tensor count | per tensor: u32 n + n bytes name, u8 group, u32 rank,
//   u32 dims[rank], f32 values[prod(dims)]
// Tensors appear in name order, so equal stores serialise to equal bytes.

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "patchsr/params.hpp"

namespace patchsr {

inline constexpr char kCheckpointMagic[4] = {'D', 'S', 'R', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ParamStore params;
  std::string config;  // key = value snapshot of the producing run
  std::uint64_t seed = 0;
};

namespace ckpt_detail {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); }
  template <class U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void str(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::string out;
};

class Reader {
 public:
  Reader(const std::string& data, std::string source) : d_(data), src_(std::move(source)) {}

  void need(std::size_t n, const std::string& what) const {
    if (d_.size() - pos_ < n) throw FormatError("checkpoint " + src_ + ": truncated while reading " + what);
  }
  template <class U>
  U uint(const std::string& what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(d_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string str(const std::string& what) {
    const auto n = uint<std::uint32_t>(what);
    need(n, what);
    std::string s = d_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == d_.size(); }
  const std::string& source() const { return src_; }

 private:
  const std::string& d_;
  std::string src_;
  std::size_t pos_ = 0;
};

inline ParamGroup group_from(std::uint8_t g, const std::string& name, const std::string& src) {
  if (g > static_cast<std::uint8_t>(ParamGroup::discriminator))
    throw FormatError("checkpoint " + src + ": tensor '" + name + "' has unknown group " + std::to_string(g));
  return static_cast<ParamGroup>(g);
}

}  // namespace ckpt_detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  ckpt_detail::Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.uint(kCheckpointVersion);
  w.uint(c.seed);
  w.str(c.config);
  w.uint(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& [name, p] : c.params) {
    w.str(name);
    w.uint(static_cast<std::uint8_t>(p.group));
    w.uint(static_cast<std::uint32_t>(p.value.shape.size()));
    for (int d : p.value.shape) w.uint(static_cast<std::uint32_t>(d));
    for (double v : p.value.data) w.uint(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return w.out;
}

inline Checkpoint deserialize_checkpoint(const std::string& data, const std::string& source = "<memory>") {
  ckpt_detail::Reader r(data, source);
  r.need(4, "magic");
  if (std::memcmp(data.data(), kCheckpointMagic, 4) != 0) throw FormatError("checkpoint " + source + ": bad magic");
  (void)r.uint<std::uint32_t>("magic");
  const auto version = r.uint<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint " + source + ": unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  Checkpoint c;
  c.seed = r.uint<std::uint64_t>("seed");
  c.config = r.str("config snapshot");
  const auto count = r.uint<std::uint32_t>("tensor count");
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = r.str("tensor name");
    const std::string what = "tensor '" + name + "'";
    const ParamGroup g = ckpt_detail::group_from(r.uint<std::uint8_t>(what), name, source);
    const auto rank = r.uint<std::uint32_t>(what);
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(static_cast<int>(r.uint<std::uint32_t>(what)));
      n *= static_cast<std::size_t>(shape.back());
    }
    r.need(4 * n, what);
    Tensor t(shape);
    for (std::size_t i = 0; i < n; ++i) t[i] = std::bit_cast<float>(r.uint<std::uint32_t>(what));
    if (c.params.contains(name)) throw FormatError("checkpoint " + source + ": duplicate " + what);
    c.params.add(name, std::move(t), g);
  }
  if (!r.done()) throw FormatError("checkpoint " + source + ": trailing bytes after tensor table");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  const std::string bytes = serialize_checkpoint(c);
  std::ofstream os(path, std::ios::binary);
  if (!os || !os.write(bytes.data(), static_cast<std::streamsize>(bytes.size())))
    throw FormatError("checkpoint: cannot write " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot read " + path);
  const std::string data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(data, path);
}

/// Checks the loaded tensors against the parameters a model expects: every
/// name must be known, none may be missing, and shapes must agree.
inline void check_against(const ParamStore& loaded, const ParamStore& schema, const std::string& source) {
  for (const auto& [name, p] : loaded) {
    if (!schema.contains(name)) throw FormatError("checkpoint " + source + ": unknown tensor '" + name + "'");
    if (schema.get(name).shape != p.value.shape)
      throw FormatError("checkpoint " + source + ": tensor '" + name + "' has shape " + shape_str(p.value.shape) +
                        ", model expects " + shape_str(schema.get(name).shape));
  }
  for (const auto& [name, p] : schema)
    if (!loaded.contains(name)) throw FormatError("checkpoint " + source + ": missing tensor '" + name + "'");
}

inline Checkpoint load_checkpoint(const std::string& path, const ParamStore& schema) {
  Checkpoint c = read_checkpoint(path);
  check_against(c.params, schema, path);
  return c;
}

}  // namespace patchsr
