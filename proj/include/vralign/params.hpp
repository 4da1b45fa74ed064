#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vralign/autodiff.hpp"
#include "vralign/io.hpp"
#include "vralign/ndarray.hpp"

namespace vralign {

struct Parameter {
  NdArray value;
  NdArray grad;  // same shape as value, zero-initialized
  bool trainable = true;
};

/// Named model parameters. Iteration order is the lexicographic name order,
/// which fixes optimizer update order and checkpoint layout.
class ParamStore {
 public:
  Parameter& add(const std::string& name, NdArray init, bool trainable = true) {
    if (map_.count(name)) throw ConfigError("duplicate parameter: " + name);
    Parameter p;
    p.grad = NdArray(init.shape);
    p.value = std::move(init);
    p.trainable = trainable;
    return map_.emplace(name, std::move(p)).first->second;
  }

  Parameter& at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  const Parameter& at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return map_.count(name) != 0; }

  void set_trainable(const std::string& name, bool trainable) {
    at(name).trainable = trainable;
  }

  /// Marks every parameter whose name starts with `prefix` as frozen.
  std::size_t freeze_prefix(const std::string& name_prefix) {
    std::size_t n = 0;
    for (auto& [name, p] : map_) {
      if (name.rfind(name_prefix, 0) == 0) {
        p.trainable = false;
        ++n;
      }
    }
    return n;
  }

  void zero_grads() {
    for (auto& [name, p] : map_)
      std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(map_.size());
    for (const auto& [name, p] : map_) out.push_back(name);
    return out;
  }

  std::size_t size() const { return map_.size(); }

  std::size_t scalar_count(bool trainable_only = false) const {
    std::size_t n = 0;
    for (const auto& [name, p] : map_)
      if (!trainable_only || p.trainable) n += p.value.numel();
    return n;
  }

  auto begin() { return map_.begin(); }
  auto end() { return map_.end(); }
  auto begin() const { return map_.begin(); }
  auto end() const { return map_.end(); }

 private:
  std::map<std::string, Parameter> map_;
};

/// Tape handles for one forward pass over a ParamStore. Trainable parameters
/// become leaves (gradients flow); frozen ones become constants, which keeps
/// their grads identically zero without masking in the optimizer.
struct BoundParams {
  std::map<std::string, Var> vars;

  const Var& at(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
};

inline BoundParams bind_params(Tape& tape, const ParamStore& store) {
  BoundParams bound;
  for (const auto& [name, p] : store) {
    Var v = p.trainable ? tape.leaf(p.value) : tape.constant(p.value);
    bound.vars.emplace(name, v);
  }
  return bound;
}

/// Adds the tape gradients of every trainable bound parameter into the store.
inline void pull_grads(const BoundParams& bound, ParamStore& store) {
  for (auto& [name, p] : store) {
    if (!p.trainable) continue;
    const NdArray& g = bound.at(name).grad();
    for (std::size_t i = 0; i < p.grad.data.size(); ++i) p.grad.data[i] += g.data[i];
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "VRCK", version 1, then a flat name -> tensor map.
// Entries are written in store order (sorted names); float64 payloads are
// bit-exact across round-trips.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[5] = "VRCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const ParamStore& store) {
  auto os = io::open_out(path);
  os.write(kCheckpointMagic, 4);
  io::write_u32(os, kCheckpointVersion);
  io::write_u64(os, store.size());
  for (const auto& [name, p] : store) {
    io::write_string(os, name);
    io::write_u8(os, p.trainable ? 1 : 0);
    io::write_u64(os, p.value.shape.size());
    for (auto d : p.value.shape) io::write_u64(os, d);
    for (double v : p.value.data) io::write_f64(os, v);
  }
  if (!os) throw IoError("short write: " + path);
}

inline ParamStore load_checkpoint(const std::string& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, kCheckpointMagic, "checkpoint");
  const auto version = io::read_u32(is);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto count = io::read_u64(is);
  ParamStore store;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = io::read_string(is);
    const bool trainable = io::read_u8(is) != 0;
    const auto rank = io::read_u64(is);
    if (rank > 8) throw IoError("corrupt checkpoint: rank " + std::to_string(rank));
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = io::read_u64(is);
    NdArray value(shape);
    for (auto& v : value.data) v = io::read_f64(is);
    store.add(name, std::move(value), trainable);
  }
  return store;
}

/// Copies checkpoint values into an existing store by name. The store's
/// trainable flags are kept (freezing is a property of the current run, not
/// of the saved weights). Throws when a shared name has a different shape or
/// when nothing matches at all.
inline std::size_t load_checkpoint_into(ParamStore& store, const std::string& path) {
  ParamStore loaded = load_checkpoint(path);
  std::size_t matched = 0;
  for (const auto& [name, p] : loaded) {
    if (!store.has(name)) continue;
    Parameter& dst = store.at(name);
    if (!dst.value.same_shape(p.value)) {
      throw ConfigError("incompatible checkpoint: parameter '" + name + "' has shape " +
                        p.value.shape_str() + ", model expects " + dst.value.shape_str());
    }
    dst.value.data = p.value.data;
    ++matched;
  }
  if (matched == 0)
    throw ConfigError("incompatible checkpoint: no parameter names match (" + path + ")");
  return matched;
}

}  // namespace vralign
