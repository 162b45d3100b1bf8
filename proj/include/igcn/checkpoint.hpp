#pragma once

// Checkpoint container
// --------------------
//   magic    8 bytes  "IGCNCKPT"
//   version  u8       kCheckpointVersion
//   attrs    u32 count, then (string key, string value)*
//   counters u32 count, then (string key, i64 value)*
//   tensors  u32 count, then (string name, u8 dtype, u32 rank, u64 dim[rank], raw values)*
//
// Integers and floats are little-endian; a string is a u32 byte length
// followed by the bytes. dtype 1 is IEEE float32, 2 is float64. Optimizer
// state is stored as ordinary named tensors plus counters.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "igcn/adam.hpp"
#include "igcn/tensor.hpp"

namespace igcn {

inline constexpr char kCheckpointMagic[8] = {'I', 'G', 'C', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

struct StoredTensor {
  DType dtype = DType::f32;
  Shape shape;
  std::vector<double> values;  // widened; narrowed back on write for f32
};

struct Checkpoint {
  std::map<std::string, std::string> attrs;
  std::map<std::string, std::int64_t> counters;
  std::map<std::string, StoredTensor> tensors;

  template <typename T>
  void put(const std::string& name, const Shape& shape, std::span<const T> values) {
    StoredTensor st;
    st.dtype = std::is_same_v<T, float> ? DType::f32 : DType::f64;
    st.shape = shape;
    st.values.assign(values.begin(), values.end());
    tensors[name] = std::move(st);
  }

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    put<T>(name, t.shape(), t.values());
  }

  const StoredTensor& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError("checkpoint: missing tensor '" + name + "'");
    return it->second;
  }

  /// Copies a stored tensor into an existing parameter of identical shape.
  template <typename T>
  void load_into(const std::string& name, Tensor<T>& target) const {
    const auto& st = get(name);
    if (st.shape != target.shape()) {
      throw CheckpointError("checkpoint: tensor '" + name + "' has shape " + shape_str(st.shape) +
                            " but the model expects " + shape_str(target.shape()));
    }
    auto dst = target.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(st.values[i]);
  }

  std::int64_t counter(const std::string& key) const {
    auto it = counters.find(key);
    if (it == counters.end()) throw CheckpointError("checkpoint: missing counter '" + key + "'");
    return it->second;
  }

  const std::string& attr(const std::string& key) const {
    auto it = attrs.find(key);
    if (it == attrs.end()) throw CheckpointError("checkpoint: missing attribute '" + key + "'");
    return it->second;
  }
};

namespace detail {

template <typename U>
void put_le(std::string& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

inline void put_string(std::string& out, const std::string& s) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  template <typename U>
  U le() {
    static_assert(std::is_unsigned_v<U>);
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::string str() {
    const auto n = le<std::uint32_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw CheckpointError("checkpoint: truncated file " + path_);
  }
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  out.push_back(static_cast<char>(kCheckpointVersion));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.attrs.size()));
  for (const auto& [k, v] : ck.attrs) {
    detail::put_string(out, k);
    detail::put_string(out, v);
  }
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.counters.size()));
  for (const auto& [k, v] : ck.counters) {
    detail::put_string(out, k);
    detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(v));
  }
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    detail::put_string(out, name);
    out.push_back(static_cast<char>(t.dtype));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::put_le<std::uint64_t>(out, d);
    if (shape_numel(t.shape) != t.values.size()) throw CheckpointError("checkpoint: tensor '" + name + "' size mismatch");
    for (double v : t.values) {
      if (t.dtype == DType::f32)
        detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      else
        detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin = "<memory>") {
  detail::Reader r(bytes, origin);
  const std::string magic = r.raw(sizeof(kCheckpointMagic));
  if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError("checkpoint: " + origin + " is not a checkpoint (bad magic)");
  }
  const auto version = r.le<std::uint8_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: " + origin + " has format version " + std::to_string(version) +
                          ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  Checkpoint ck;
  for (auto n = r.le<std::uint32_t>(); n > 0; --n) {
    auto k = r.str();
    ck.attrs[k] = r.str();
  }
  for (auto n = r.le<std::uint32_t>(); n > 0; --n) {
    auto k = r.str();
    ck.counters[k] = static_cast<std::int64_t>(r.le<std::uint64_t>());
  }
  for (auto n = r.le<std::uint32_t>(); n > 0; --n) {
    auto name = r.str();
    StoredTensor t;
    const auto dt = r.le<std::uint8_t>();
    if (dt != 1 && dt != 2) throw CheckpointError("checkpoint: tensor '" + name + "' has unknown dtype " + std::to_string(dt));
    t.dtype = static_cast<DType>(dt);
    for (auto rank = r.le<std::uint32_t>(); rank > 0; --rank) t.shape.push_back(r.le<std::uint64_t>());
    const auto count = shape_numel(t.shape);
    t.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      t.values[i] = t.dtype == DType::f32 ? static_cast<double>(std::bit_cast<float>(r.le<std::uint32_t>()))
                                          : std::bit_cast<double>(r.le<std::uint64_t>());
    }
    ck.tensors[name] = std::move(t);
  }
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes in " + origin);
  return ck;
}

/// Writes via a temporary file and rename so a crash never leaves a torn file.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("checkpoint: cannot open " + tmp + " for writing");
    const auto bytes = serialize_checkpoint(ck);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, path.string());
}

template <typename T>
void store_adam(Checkpoint& ck, const std::string& prefix, const AdamState<T>& state,
                const std::vector<std::string>& param_names) {
  ck.counters[prefix + ".step"] = state.step;
  for (std::size_t i = 0; i < state.m.size(); ++i) {
    ck.put<T>(prefix + ".m/" + param_names.at(i), Shape{state.m[i].size()}, state.m[i]);
    ck.put<T>(prefix + ".v/" + param_names.at(i), Shape{state.v[i].size()}, state.v[i]);
  }
}

template <typename T>
AdamState<T> restore_adam(const Checkpoint& ck, const std::string& prefix, const std::vector<std::string>& param_names) {
  AdamState<T> state;
  state.step = ck.counter(prefix + ".step");
  if (state.step == 0) return state;
  for (const auto& name : param_names) {
    const auto& m = ck.get(prefix + ".m/" + name);
    const auto& v = ck.get(prefix + ".v/" + name);
    state.m.emplace_back(m.values.begin(), m.values.end());
    state.v.emplace_back(v.values.begin(), v.values.end());
  }
  return state;
}

}  // namespace igcn
