#pragma once

// Binary checkpoint container (little-endian):
//   "EQNT" u32 version u32 tensor_count
//   per tensor: u32 name_len, name, u8 dtype, u32 rank, u32 dims[rank], data,
//               u8 has_quant [u8 bits, u8 signed, f32 scale, i32 zero_point,
//               u8 granularity, (u32 n, u8 codes[n]) if per-channel]
//   u32 config_count, then (u32 len, key, u32 len, value) pairs
// i4 data packs two's-complement nibbles two per byte, low nibble first.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "equiquant/data.hpp"
#include "equiquant/model.hpp"
#include "equiquant/quantizers.hpp"
#include "equiquant/tensor.hpp"

namespace equiquant {

/// Unreadable or inconsistent checkpoint.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'E', 'Q', 'N', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 0, i8 = 1, i4 = 2 };

inline const char* dtype_name(DType d) {
  switch (d) {
    case DType::f32: return "f32";
    case DType::i8: return "i8";
    case DType::i4: return "i4";
  }
  return "?";
}

struct CheckpointTensor {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<float> f32;        // dtype f32
  std::vector<std::int8_t> ints;  // dtype i8 and i4 (one value per element)
  std::optional<QuantParams> quant;

  std::size_t numel() const { return numel_of(shape); }

  static CheckpointTensor from_tensor(std::string name, const Tensor& t) {
    CheckpointTensor c;
    c.name = std::move(name);
    c.shape = t.shape();
    c.f32 = t.storage();
    return c;
  }

  Tensor to_tensor() const {
    if (dtype != DType::f32) throw CheckpointError("tensor " + name + " is " + dtype_name(dtype) + ", not f32");
    return Tensor(shape, f32);
  }

  friend bool operator==(const CheckpointTensor&, const CheckpointTensor&) = default;
};

struct Checkpoint {
  std::vector<CheckpointTensor> tensors;
  std::vector<std::pair<std::string, std::string>> config;

  const CheckpointTensor* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  CheckpointTensor* find(std::string_view name) {
    for (auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  const CheckpointTensor& at(std::string_view name) const {
    const CheckpointTensor* t = find(name);
    if (!t) throw CheckpointError("checkpoint has no tensor " + std::string(name));
    return *t;
  }
  std::optional<std::string> config_value(std::string_view key) const {
    for (const auto& [k, v] : config)
      if (k == key) return v;
    return std::nullopt;
  }
  void set_config(const std::string& key, std::string value) {
    for (auto& [k, v] : config)
      if (k == key) {
        v = std::move(value);
        return;
      }
    config.emplace_back(key, std::move(value));
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { out_.append(s); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view in) : in_(in) {}
  std::uint8_t u8() {
    need(1, "byte");
    return static_cast<std::uint8_t>(in_[pos_++]);
  }
  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(in_[pos_++])) << (8 * i);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string_view s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32();
    return std::string(bytes(n, what));
  }
  bool done() const noexcept { return pos_ == in_.size(); }
  std::size_t position() const noexcept { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw CheckpointError("checkpoint truncated reading " + std::string(what) + " at byte " + std::to_string(pos_));
    }
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

inline std::uint8_t pack_nibbles(std::int8_t lo, std::int8_t hi) {
  return static_cast<std::uint8_t>((static_cast<std::uint8_t>(lo) & 0x0F) | ((static_cast<std::uint8_t>(hi) & 0x0F) << 4));
}

inline std::int8_t unpack_nibble(std::uint8_t b, bool high) {
  const int v = high ? (b >> 4) : (b & 0x0F);
  return static_cast<std::int8_t>(v >= 8 ? v - 16 : v);
}

inline void write_tensor(ByteWriter& w, const CheckpointTensor& t) {
  const std::size_t n = t.numel();
  w.str(t.name);
  w.u8(static_cast<std::uint8_t>(t.dtype));
  w.u32(static_cast<std::uint32_t>(t.shape.size()));
  for (std::size_t d : t.shape) w.u32(static_cast<std::uint32_t>(d));
  switch (t.dtype) {
    case DType::f32:
      if (t.f32.size() != n) throw CheckpointError("tensor " + t.name + ": data does not match shape");
      for (float v : t.f32) w.f32(v);
      break;
    case DType::i8:
      if (t.ints.size() != n) throw CheckpointError("tensor " + t.name + ": data does not match shape");
      for (std::int8_t v : t.ints) w.u8(static_cast<std::uint8_t>(v));
      break;
    case DType::i4:
      if (t.ints.size() != n) throw CheckpointError("tensor " + t.name + ": data does not match shape");
      for (std::size_t i = 0; i < n; i += 2) {
        const std::int8_t lo = t.ints[i], hi = i + 1 < n ? t.ints[i + 1] : std::int8_t{0};
        if (lo < -8 || lo > 7 || hi < -8 || hi > 7) throw CheckpointError("tensor " + t.name + ": value outside int4");
        w.u8(pack_nibbles(lo, hi));
      }
      break;
  }
  w.u8(t.quant ? 1 : 0);
  if (t.quant) {
    const QuantParams& q = *t.quant;
    w.u8(static_cast<std::uint8_t>(q.bits));
    w.u8(q.is_signed ? 1 : 0);
    w.f32(q.scale);
    w.i32(q.zero_point);
    w.u8(static_cast<std::uint8_t>(q.granularity));
    if (q.granularity == Granularity::per_channel) {
      w.u32(static_cast<std::uint32_t>(q.channel_codes.size()));
      for (std::uint8_t c : q.channel_codes) w.u8(c);
    }
  }
}

inline CheckpointTensor read_tensor(ByteReader& r) {
  CheckpointTensor t;
  t.name = r.str("tensor name");
  const std::uint8_t dt = r.u8();
  if (dt > 2) throw CheckpointError("tensor " + t.name + ": unknown dtype tag " + std::to_string(dt));
  t.dtype = static_cast<DType>(dt);
  const std::uint32_t rank = r.u32();
  if (rank > 8) throw CheckpointError("tensor " + t.name + ": implausible rank " + std::to_string(rank));
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    t.shape.push_back(r.u32());
    n *= t.shape.back();
    if (n > (std::size_t{1} << 40)) throw CheckpointError("tensor " + t.name + ": implausible size");
  }
  switch (t.dtype) {
    case DType::f32: {
      const std::string_view raw = r.bytes(4 * n, "f32 data");
      t.f32.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(raw[4 * i + b])) << (8 * b);
        t.f32[i] = std::bit_cast<float>(v);
      }
      break;
    }
    case DType::i8: {
      const std::string_view raw = r.bytes(n, "i8 data");
      t.ints.assign(raw.begin(), raw.end());
      break;
    }
    case DType::i4: {
      const std::string_view raw = r.bytes((n + 1) / 2, "i4 data");
      t.ints.resize(n);
      for (std::size_t i = 0; i < n; ++i)
        t.ints[i] = unpack_nibble(static_cast<std::uint8_t>(raw[i / 2]), i % 2 == 1);
      break;
    }
  }
  const std::uint8_t has_quant = r.u8();
  if (has_quant > 1) throw CheckpointError("tensor " + t.name + ": bad quant-params flag");
  if (has_quant) {
    QuantParams q;
    q.bits = r.u8();
    const std::uint8_t sg = r.u8();
    if (sg > 1) throw CheckpointError("tensor " + t.name + ": bad signedness flag");
    q.is_signed = sg == 1;
    q.scale = r.f32();
    q.zero_point = r.i32();
    const std::uint8_t gran = r.u8();
    if (gran > 1) throw CheckpointError("tensor " + t.name + ": unknown granularity tag");
    q.granularity = static_cast<Granularity>(gran);
    if (q.granularity == Granularity::per_channel) {
      const std::uint32_t c = r.u32();
      const std::string_view raw = r.bytes(c, "channel scales");
      q.channel_codes.assign(raw.begin(), raw.end());
    }
    try {
      q.validate();
    } catch (const std::exception& e) {
      throw CheckpointError("tensor " + t.name + ": " + e.what());
    }
    t.quant = std::move(q);
  }
  return t;
}

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) detail::write_tensor(w, t);
  w.u32(static_cast<std::uint32_t>(ck.config.size()));
  for (const auto& [k, v] : ck.config) {
    w.str(k);
    w.str(v);
  }
  return w.take();
}

inline Checkpoint deserialize(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(4, "magic") != std::string_view(kCheckpointMagic, 4)) throw CheckpointError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) ck.tensors.push_back(detail::read_tensor(r));
  const std::uint32_t n_cfg = r.u32();
  for (std::uint32_t i = 0; i < n_cfg; ++i) {
    std::string k = r.str("config key");
    std::string v = r.str("config value");
    ck.config.emplace_back(std::move(k), std::move(v));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint at byte " + std::to_string(r.position()));
  return ck;
}

/// Size of one tensor record as it appears in the serialized container.
inline std::size_t record_bytes(const CheckpointTensor& t) {
  detail::ByteWriter w;
  detail::write_tensor(w, t);
  return w.take().size();
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write " + path);
  const std::string bytes = serialize(ck);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline void write_model_config(Checkpoint& ck, const ModelConfig& c, Scheme scheme) {
  ck.set_config("F0", std::to_string(c.F0));
  ck.set_config("F1", std::to_string(c.F1));
  ck.set_config("n_layers", std::to_string(c.n_layers));
  ck.set_config("n_rbf", std::to_string(c.n_rbf));
  ck.set_config("d_attn", std::to_string(c.d_attn));
  ck.set_config("cutoff", format_double(c.cutoff));
  ck.set_config("species", join_ints(c.species));
  ck.set_config("scheme", scheme_name(scheme));
}

inline ModelConfig read_model_config(const Checkpoint& ck) {
  auto need = [&](const char* key) {
    auto v = ck.config_value(key);
    if (!v) throw CheckpointError(std::string("checkpoint config lacks ") + key);
    return *v;
  };
  ModelConfig c;
  try {
    c.F0 = std::stoul(need("F0"));
    c.F1 = std::stoul(need("F1"));
    c.n_layers = std::stoul(need("n_layers"));
    c.n_rbf = std::stoul(need("n_rbf"));
    c.d_attn = std::stoul(need("d_attn"));
    c.cutoff = std::stod(need("cutoff"));
    c.species.clear();
    std::stringstream ss(need("species"));
    for (std::string item; std::getline(ss, item, ',');) c.species.push_back(std::stoi(item));
  } catch (const std::logic_error& e) {
    throw CheckpointError(std::string("bad model config in checkpoint: ") + e.what());
  }
  c.validate();
  return c;
}

/// Float checkpoint of a (fake-quant) model. Weights of quantized linear layers
/// carry their per-channel params; step sizes carry params once calibrated.
inline Checkpoint model_to_checkpoint(const Model& m) {
  Checkpoint ck;
  for (const auto& [name, t] : m.params.all()) ck.tensors.push_back(CheckpointTensor::from_tensor(name, t));
  for (const auto& l : m.quant.linears) {
    if (!l.quantized) continue;
    CheckpointTensor* w = ck.find(l.name + ".w");
    w->quant = weight_quant_params(m.params.at(l.name + ".w"), l.weight_bits);
  }
  for (const auto& a : m.quant.activations) {
    if (m.phase_of(a.name) != QuantPhase::active) continue;
    ck.find(step_param(a.name))->quant =
        make_quant_params(a.bits, a.is_signed, m.params.at(step_param(a.name)).item());
  }
  for (const auto& v : m.quant.vectors) {
    if (m.phase_of(v.name) != QuantPhase::active) continue;
    ck.find(step_param(v.name))->quant = make_quant_params(v.mag_bits, false, m.params.at(step_param(v.name)).item());
  }
  write_model_config(ck, m.config, m.scheme());
  return ck;
}

/// Rebuilds a float model. Integer weight tensors are dequantized.
inline Model model_from_checkpoint(const Checkpoint& ck) {
  const ModelConfig cfg = read_model_config(ck);
  Scheme scheme;
  try {
    scheme = parse_scheme(ck.config_value("scheme").value_or("fp32"));
  } catch (const ModelError& e) {
    throw CheckpointError(e.what());
  }
  Model m = make_model(cfg, scheme, 0);
  for (auto& [name, t] : m.params.all()) {
    const CheckpointTensor& c = ck.at(name);
    if (c.shape != t.shape()) {
      throw CheckpointError("tensor " + name + " has shape " + shape_str(c.shape) + ", expected " + shape_str(t.shape()));
    }
    if (c.dtype == DType::f32) {
      t = c.to_tensor();
    } else {
      if (!c.quant) throw CheckpointError("integer tensor " + name + " has no quantization params");
      t = dequantize_weight_codes(c.ints, c.shape, *c.quant);
    }
  }
  for (const auto& a : m.quant.activations)
    m.phase[a.name] = ck.at(step_param(a.name)).quant ? QuantPhase::active : QuantPhase::observe;
  for (const auto& v : m.quant.vectors)
    m.phase[v.name] = ck.at(step_param(v.name)).quant ? QuantPhase::active : QuantPhase::observe;
  return m;
}

}  // namespace equiquant
