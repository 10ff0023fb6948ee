#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "vlmdet/adapt/adapted_model.hpp"
#include "vlmdet/core/digest.hpp"
#include "vlmdet/io/fs.hpp"

namespace vlmdet {

class CheckpointError : public IoError {
 public:
  using IoError::IoError;
};
class MagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class VersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CrcError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class TruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class DTypeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline constexpr char kCheckpointMagic[4] = {'V', 'L', 'M', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::uint32_t crc32_of(const std::string& bytes, std::size_t n) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(n)));
}

// One stored tensor; values are kept as raw little-endian bytes.
struct CheckpointEntry {
  std::string name;
  std::uint8_t dtype = 1;
  std::vector<std::uint32_t> dims;
  std::string bytes;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

struct RawCheckpoint {
  std::string config_text;
  std::vector<CheckpointEntry> entries;
};

namespace ckpt {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(const std::string& in, std::size_t pos) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

template <class T>
std::string value_bytes(std::span<const T> values) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  std::string out;
  out.reserve(values.size() * sizeof(T));
  for (T v : values) put_le<Bits>(out, std::bit_cast<Bits>(v));
  return out;
}

template <class T>
std::vector<T> bytes_values(const std::string& bytes) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  std::vector<T> out(bytes.size() / sizeof(T));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<T>(get_le<Bits>(bytes, i * sizeof(T)));
  return out;
}

}  // namespace ckpt

inline std::string encode_checkpoint(const RawCheckpoint& ck) {
  std::string out(kCheckpointMagic, 4);
  ckpt::put_le<std::uint16_t>(out, kCheckpointVersion);
  if (ck.config_text.size() > 0xFFFFFFFFull) throw CheckpointError("config block too large");
  ckpt::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.config_text.size()));
  out += ck.config_text;
  for (const auto& e : ck.entries) {
    if (e.name.size() > 0xFFFF) throw CheckpointError("parameter name too long: " + e.name);
    if (e.dims.size() > 0xFF) throw CheckpointError("too many dimensions for " + e.name);
    const std::size_t width = e.dtype == 1 ? 4 : e.dtype == 2 ? 8 : 0;
    if (!width) throw DTypeError("unknown dtype tag " + std::to_string(e.dtype) + " for " + e.name);
    if (e.bytes.size() != e.numel() * width) throw CheckpointError("value size mismatch for " + e.name);
    ckpt::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    out.push_back(static_cast<char>(e.dtype));
    out.push_back(static_cast<char>(e.dims.size()));
    for (auto d : e.dims) ckpt::put_le<std::uint32_t>(out, d);
    out += e.bytes;
  }
  ckpt::put_le<std::uint32_t>(out, crc32_of(out, out.size()));
  return out;
}

// Validates magic, version and CRC before parsing entries; entries run up to
// the trailing 4-byte CRC.
inline RawCheckpoint decode_checkpoint(const std::string& in) {
  if (in.size() < 4 || std::memcmp(in.data(), kCheckpointMagic, 4) != 0) throw MagicError("not a VLMC checkpoint (bad magic)");
  if (in.size() < 6) throw TruncatedError("checkpoint truncated in header");
  const auto version = ckpt::get_le<std::uint16_t>(in, 4);
  if (version != kCheckpointVersion) throw VersionError("unsupported checkpoint version " + std::to_string(version));
  if (in.size() < 14) throw TruncatedError("checkpoint truncated in header");
  const std::size_t body = in.size() - 4;
  if (ckpt::get_le<std::uint32_t>(in, body) != crc32_of(in, body)) throw CrcError("checkpoint CRC mismatch (corrupt or truncated file)");

  auto need = [&](std::size_t pos, std::size_t n, const char* what) {
    if (pos + n > body) throw TruncatedError(std::string("checkpoint truncated in ") + what);
  };
  RawCheckpoint ck;
  std::size_t pos = 6;
  const auto cfg_len = ckpt::get_le<std::uint32_t>(in, pos);
  pos += 4;
  need(pos, cfg_len, "config block");
  ck.config_text = in.substr(pos, cfg_len);
  pos += cfg_len;
  while (pos < body) {
    CheckpointEntry e;
    need(pos, 2, "entry header");
    const auto name_len = ckpt::get_le<std::uint16_t>(in, pos);
    pos += 2;
    need(pos, name_len + 2u, "entry header");
    e.name = in.substr(pos, name_len);
    pos += name_len;
    e.dtype = static_cast<std::uint8_t>(in[pos++]);
    const auto ndim = static_cast<std::uint8_t>(in[pos++]);
    const std::size_t width = e.dtype == 1 ? 4 : e.dtype == 2 ? 8 : 0;
    if (!width) throw DTypeError("unknown dtype tag " + std::to_string(e.dtype) + " for " + e.name);
    need(pos, 4u * ndim, "dims");
    for (std::size_t i = 0; i < ndim; ++i, pos += 4) e.dims.push_back(ckpt::get_le<std::uint32_t>(in, pos));
    const std::size_t nbytes = e.numel() * width;
    need(pos, nbytes, "values");
    e.bytes = in.substr(pos, nbytes);
    pos += nbytes;
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

// ---- model-level save / load -----------------------------------------------

namespace ckpt {

inline std::map<std::string, std::string> parse_block(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("malformed checkpoint config line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline std::string join_block(const std::map<std::string, std::string>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

inline std::string vocab_line(const Vocabulary& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + v.token(i);
  return out;
}

inline void put_encoder(std::map<std::string, std::string>& kv, const EncoderConfig& c) {
  kv["model.d_model"] = std::to_string(c.d_model);
  kv["model.n_layers"] = std::to_string(c.n_layers);
  kv["model.n_heads"] = std::to_string(c.n_heads);
  kv["model.d_embed"] = std::to_string(c.d_embed);
  kv["model.patch_size"] = std::to_string(c.patch_size);
  kv["model.image_side"] = std::to_string(c.image_side);
  kv["model.context_len"] = std::to_string(c.context_len);
  kv["model.mlp_ratio"] = std::to_string(c.mlp_ratio);
}

inline const std::string& field(const std::map<std::string, std::string>& kv, const std::string& k) {
  const auto it = kv.find(k);
  if (it == kv.end()) throw CheckpointError("checkpoint config lacks " + k);
  return it->second;
}

inline EncoderConfig get_encoder(const std::map<std::string, std::string>& kv) {
  auto n = [&](const char* k) { return static_cast<std::size_t>(std::stoull(field(kv, k))); };
  EncoderConfig c;
  c.d_model = n("model.d_model");
  c.n_layers = n("model.n_layers");
  c.n_heads = n("model.n_heads");
  c.d_embed = n("model.d_embed");
  c.patch_size = n("model.patch_size");
  c.image_side = n("model.image_side");
  c.context_len = n("model.context_len");
  c.mlp_ratio = n("model.mlp_ratio");
  c.validate();
  return c;
}

template <class T>
CheckpointEntry entry(const Parameter<T>& p) {
  CheckpointEntry e;
  e.name = p.name;
  e.dtype = static_cast<std::uint8_t>(dtype_of<T>());
  for (auto d : p.tensor.shape()) e.dims.push_back(static_cast<std::uint32_t>(d));
  e.bytes = value_bytes<T>(p.tensor.data());
  return e;
}

template <class T>
Tensor<T> tensor_of(const CheckpointEntry& e) {
  if (e.dtype != static_cast<std::uint8_t>(dtype_of<T>()))
    throw DTypeError("parameter " + e.name + " stored with dtype tag " + std::to_string(e.dtype) +
                     ", loader expects " + std::to_string(int(dtype_of<T>())));
  Shape s(e.dims.begin(), e.dims.end());
  return Tensor<T>::from(std::move(s), bytes_values<T>(e.bytes), true);
}

// Overwrites every parameter of `set` from entries; each must be present
// exactly once with the same shape.
template <class T>
void fill(ParameterSet<T>& set, std::map<std::string, const CheckpointEntry*>& pending) {
  for (auto& p : set) {
    const auto it = pending.find(p.name);
    if (it == pending.end()) throw CheckpointError("checkpoint lacks parameter " + p.name);
    Tensor<T> t = tensor_of<T>(*it->second);
    if (t.shape() != p.tensor.shape())
      throw CheckpointError("parameter " + p.name + " has shape " + shape_str(t.shape()) + ", model expects " +
                            shape_str(p.tensor.shape()));
    auto dst = p.tensor.mutable_data();
    std::copy(t.data().begin(), t.data().end(), dst.begin());
    pending.erase(it);
  }
}

}  // namespace ckpt

template <class T>
RawCheckpoint backbone_checkpoint(const DualEncoder<T>& model, const std::map<std::string, std::string>& extra = {}) {
  std::map<std::string, std::string> kv = extra;
  kv["checkpoint.kind"] = "backbone";
  ckpt::put_encoder(kv, model.config());
  kv["vocab"] = ckpt::vocab_line(model.vocab());
  RawCheckpoint ck;
  ck.config_text = ckpt::join_block(kv);
  for (const auto& p : model.params()) ck.entries.push_back(ckpt::entry(p));
  return ck;
}

template <class T>
RawCheckpoint adapted_checkpoint(const AdaptedModel<T>& model, const std::map<std::string, std::string>& extra = {}) {
  RawCheckpoint ck = backbone_checkpoint(model.backbone(), extra);
  auto kv = ckpt::parse_block(ck.config_text);
  const auto& s = model.spec();
  kv["checkpoint.kind"] = "adapted";
  kv["strategy.kind"] = strategy_name(s.kind);
  kv["strategy.m"] = std::to_string(s.m);
  kv["strategy.reduction"] = std::to_string(s.reduction);
  std::ostringstream a;
  a.precision(17);
  a << s.alpha;
  kv["strategy.alpha"] = a.str();
  if (s.lr) {
    std::ostringstream l;
    l.precision(17);
    l << *s.lr;
    kv["strategy.lr"] = l.str();
  }
  ck.config_text = ckpt::join_block(kv);
  for (const auto& p : model.strategy_params()) ck.entries.push_back(ckpt::entry(p));
  return ck;
}

inline std::string config_digest(const RawCheckpoint& ck) { return sha256_hex(ck.config_text); }

template <class T>
DualEncoder<T> backbone_from(const RawCheckpoint& ck, std::map<std::string, const CheckpointEntry*>& pending) {
  const auto kv = ckpt::parse_block(ck.config_text);
  std::vector<std::string> tokens;
  std::istringstream is(ckpt::field(kv, "vocab"));
  for (std::string t; is >> t;) tokens.push_back(t);
  DualEncoder<T> model(ckpt::get_encoder(kv), Vocabulary::from_tokens(tokens), 0);
  ckpt::fill(model.params(), pending);
  return model;
}

inline std::map<std::string, const CheckpointEntry*> entry_index(const RawCheckpoint& ck) {
  std::map<std::string, const CheckpointEntry*> idx;
  for (const auto& e : ck.entries)
    if (!idx.emplace(e.name, &e).second) throw CheckpointError("duplicate parameter " + e.name);
  return idx;
}

template <class T>
DualEncoder<T> load_backbone(const RawCheckpoint& ck) {
  auto pending = entry_index(ck);
  const auto kv = ckpt::parse_block(ck.config_text);
  if (ckpt::field(kv, "checkpoint.kind") != "backbone") throw CheckpointError("checkpoint does not hold a backbone");
  DualEncoder<T> m = backbone_from<T>(ck, pending);
  if (!pending.empty()) throw CheckpointError("unexpected parameter " + pending.begin()->first);
  return m;
}

template <class T>
AdaptedModel<T> load_adapted(const RawCheckpoint& ck) {
  auto pending = entry_index(ck);
  const auto kv = ckpt::parse_block(ck.config_text);
  if (ckpt::field(kv, "checkpoint.kind") != "adapted") throw CheckpointError("checkpoint does not hold an adapted model");
  DualEncoder<T> backbone = backbone_from<T>(ck, pending);
  StrategySpec spec;
  spec.kind = parse_strategy(ckpt::field(kv, "strategy.kind"));
  spec.m = std::stoull(ckpt::field(kv, "strategy.m"));
  spec.reduction = std::stoull(ckpt::field(kv, "strategy.reduction"));
  spec.alpha = std::stod(ckpt::field(kv, "strategy.alpha"));
  if (kv.count("strategy.lr")) spec.lr = std::stod(kv.at("strategy.lr"));
  ParameterSet<T> strategy;
  for (const auto& [name, e] : pending) strategy.add(name, ckpt::tensor_of<T>(*e));
  return AdaptedModel<T>::restore(std::move(backbone), spec, std::move(strategy));
}

inline RawCheckpoint read_checkpoint(const std::string& path) { return decode_checkpoint(fsio::read_file(path)); }

inline void write_checkpoint(const RawCheckpoint& ck, const std::string& path) {
  fsio::atomic_write(path, encode_checkpoint(ck));
}

inline std::string checkpoint_kind(const RawCheckpoint& ck) {
  return ckpt::field(ckpt::parse_block(ck.config_text), "checkpoint.kind");
}

}  // namespace vlmdet
