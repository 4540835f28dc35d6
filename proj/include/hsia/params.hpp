#pragma once

#include <cstdio>
#include <cstring>
#include <map>
#include <string>

#include "hsia/tensor.hpp"

namespace hsia {

// Named parameter registry with per-parameter frozen flag. Frozen entries
// never receive gradients or optimizer updates.
template <class T>
class ModelParamsT {
 public:
  struct Entry {
    TensorT<T> tensor;
    bool frozen = false;
  };

  std::uint64_t seed = 0;

  TensorT<T> add(const std::string& name, TensorT<T> t, bool frozen) {
    if (entries_.count(name)) throw ContractError("duplicate parameter name: " + name);
    t->requires_grad = !frozen;
    entries_[name] = Entry{t, frozen};
    return t;
  }

  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::map<std::string, Entry>& entries() { return entries_; }

  TensorT<T> at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("unknown parameter: " + name);
    return it->second.tensor;
  }
  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  void zero_grads() {
    for (auto& [name, e] : entries_) e.tensor->zero_grad();
  }

  std::int64_t count_trainable() const {
    std::int64_t n = 0;
    for (auto& [name, e] : entries_)
      if (!e.frozen) n += e.tensor->size();
    return n;
  }

 private:
  std::map<std::string, Entry> entries_;
};

using ModelParams = ModelParamsT<float>;

// Decoupled-weight-decay adaptive-moment optimizer. Accumulators exist only
// for trainable parameters.
template <class T>
class AdamWT {
 public:
  struct Hyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    double eps = 1e-8;
  };

  explicit AdamWT(Hyper hp = {}) : hp_(hp) {}

  // Applies one update at the given lr, then clears gradients.
  void step(ModelParamsT<T>& params, double lr) {
    ++step_count_;
    double bc1 = 1.0 - std::pow(hp_.beta1, static_cast<double>(step_count_));
    double bc2 = 1.0 - std::pow(hp_.beta2, static_cast<double>(step_count_));
    for (auto& [name, e] : params.entries()) {
      if (e.frozen) continue;
      auto& t = *e.tensor;
      if (t.grad.size() != t.data.size())
        throw ContractError("optimizer_step: missing gradient on trainable param " + name);
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(t.data.size(), 0.0);
        st.v.assign(t.data.size(), 0.0);
      }
      for (size_t i = 0; i < t.data.size(); ++i) {
        double g = static_cast<double>(t.grad[i]);
        st.m[i] = hp_.beta1 * st.m[i] + (1.0 - hp_.beta1) * g;
        st.v[i] = hp_.beta2 * st.v[i] + (1.0 - hp_.beta2) * g * g;
        double mhat = st.m[i] / bc1;
        double vhat = st.v[i] / bc2;
        double p = static_cast<double>(t.data[i]);
        p -= lr * (mhat / (std::sqrt(vhat) + hp_.eps) + hp_.weight_decay * p);
        t.data[i] = static_cast<T>(p);
      }
      t.zero_grad();
    }
  }

  std::int64_t step_count() const { return step_count_; }
  const Hyper& hyper() const { return hp_; }

 private:
  struct MomentPair {
    std::vector<double> m, v;
  };
  Hyper hp_;
  std::int64_t step_count_ = 0;
  std::map<std::string, MomentPair> state_;
};

using AdamW = AdamWT<float>;

// Linear ramp 0 -> base_lr over warmup_steps, then cosine decay to 0 at
// total_steps.
inline double cosine_warmup_lr(std::int64_t step, double base_lr, std::int64_t warmup_steps,
                               std::int64_t total_steps) {
  if (step < 0 || step > total_steps) throw ContractError("cosine_warmup_lr: step out of range");
  if (warmup_steps >= total_steps)
    throw ContractError("cosine_warmup_lr: warmup must be below total");
  if (step < warmup_steps)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  double t = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

// --- NTW1 named-tensor binary format ------------------------------------------
// magic "NTW1", u32 count, then per entry: u16 name length, UTF-8 name,
// u8 rank, u32 extents, raw little-endian f32 data.

namespace detail {
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_f32(std::string& s, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(s, bits);
}
}  // namespace detail

template <class T>
std::string ntw_serialize(const ModelParamsT<T>& params) {
  std::string out = "NTW1";
  detail::put_u32(out, static_cast<std::uint32_t>(params.entries().size()));
  for (auto& [name, e] : params.entries()) {
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(e.tensor->shape.size()));
    for (int ext : e.tensor->shape) detail::put_u32(out, static_cast<std::uint32_t>(ext));
    for (T v : e.tensor->data) detail::put_f32(out, static_cast<float>(v));
  }
  return out;
}

struct NamedTensorData {
  Shape shape;
  std::vector<float> data;
};

inline std::map<std::string, NamedTensorData> ntw_parse(const std::string& bytes) {
  size_t pos = 0;
  auto need = [&](size_t n) {
    if (pos + n > bytes.size())
      throw IoError("NTW1 truncated at byte offset " + std::to_string(pos));
  };
  auto get_u32 = [&]() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos++])) << (8 * i);
    return v;
  };
  auto get_u16 = [&]() {
    need(2);
    std::uint16_t v = static_cast<unsigned char>(bytes[pos]);
    v |= static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[pos + 1])) << 8;
    pos += 2;
    return v;
  };
  need(4);
  if (bytes.compare(0, 4, "NTW1") != 0) throw IoError("bad NTW1 magic at byte offset 0");
  pos = 4;
  std::uint32_t count = get_u32();
  std::map<std::string, NamedTensorData> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t nlen = get_u16();
    need(nlen);
    std::string name = bytes.substr(pos, nlen);
    pos += nlen;
    need(1);
    int rank = static_cast<unsigned char>(bytes[pos++]);
    NamedTensorData td;
    for (int r = 0; r < rank; ++r) td.shape.push_back(static_cast<int>(get_u32()));
    std::int64_t n = numel(td.shape);
    need(static_cast<size_t>(n) * 4);
    td.data.resize(static_cast<size_t>(n));
    for (std::int64_t j = 0; j < n; ++j) {
      std::uint32_t bits = get_u32();
      float f;
      std::memcpy(&f, &bits, 4);
      td.data[static_cast<size_t>(j)] = f;
    }
    out[name] = std::move(td);
  }
  return out;
}

// File helpers live here so checkpoints and weight import share one path.
inline std::string read_file_bytes(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open " + path);
  std::string out;
  char buf[65536];
  size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) out.append(buf, n);
  std::fclose(f);
  return out;
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot write " + path);
  if (std::fwrite(bytes.data(), 1, bytes.size(), f) != bytes.size()) {
    std::fclose(f);
    throw IoError("short write to " + path);
  }
  std::fclose(f);
}

template <class T>
void ntw_save(const std::string& path, const ModelParamsT<T>& params) {
  write_file_bytes(path, ntw_serialize(params));
}

struct ImportReport {
  std::vector<std::string> unknown_names;   // in file, not in registry
  std::vector<std::string> missing_names;   // in registry, not in file
  int imported = 0;
};

// Overlays matching tensors onto the registry; frozen flags preserved.
// Shape mismatches abort with the offending names listed.
template <class T>
ImportReport ntw_import(ModelParamsT<T>& params, const std::string& path) {
  auto tensors = ntw_parse(read_file_bytes(path));
  ImportReport rep;
  std::vector<std::string> bad;
  for (auto& [name, td] : tensors) {
    if (!params.has(name)) {
      rep.unknown_names.push_back(name);
      continue;
    }
    auto t = params.at(name);
    if (t->shape != td.shape) {
      bad.push_back(name + " expected " + shape_str(t->shape) + " got " + shape_str(td.shape));
      continue;
    }
    for (size_t i = 0; i < td.data.size(); ++i) t->data[i] = static_cast<T>(td.data[i]);
    ++rep.imported;
  }
  if (!bad.empty()) {
    std::string msg = "import shape mismatch:";
    for (auto& b : bad) msg += " " + b;
    throw IoError(msg);
  }
  for (auto& [name, e] : params.entries())
    if (!tensors.count(name)) rep.missing_names.push_back(name);
  return rep;
}

}  // namespace hsia
