#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sagdrive/autodiff.hpp"
#include "sagdrive/binio.hpp"
#include "sagdrive/tensor.hpp"

namespace sagdrive {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Named parameter set with adaptive-moment state. Iteration order is the
// name order, so serialization and checksums are deterministic.
class ParamStore {
 public:
  struct Entry {
    Tensor value;
    Tensor m;
    Tensor v;
  };

  Tensor& create(const std::string& name, Tensor init) {
    auto [it, inserted] = entries_.try_emplace(name);
    if (!inserted) throw std::invalid_argument("param already exists: " + name);
    it->second.value = std::move(init);
    it->second.m = Tensor::zeros(it->second.value.shape);
    it->second.v = Tensor::zeros(it->second.value.shape);
    return it->second.value;
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Tensor& value(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::invalid_argument("unknown param: " + name);
    return it->second.value;
  }
  const Tensor& value(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::invalid_argument("unknown param: " + name);
    return it->second.value;
  }

  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::invalid_argument("unknown param: " + name);
    return it->second;
  }

  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::map<std::string, Entry>& entries() { return entries_; }

  int64_t step() const { return step_; }
  void set_step(int64_t s) { step_ = s; }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& [k, e] : entries_) n += e.value.numel();
    return n;
  }

  // One bias-corrected adaptive-moment update. Any non-finite gradient
  // rejects the whole step and leaves parameters, moments, and the step
  // counter untouched.
  bool adam_step(const std::map<std::string, Tensor>& grads, const AdamConfig& cfg) {
    for (const auto& [name, g] : grads)
      if (!g.all_finite()) return false;
    int64_t t = step_ + 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (const auto& [name, g] : grads) {
      Entry& e = entry(name);
      check_same_shape(e.value, g, "adam_step");
      for (int64_t i = 0; i < g.numel(); ++i) {
        size_t s = static_cast<size_t>(i);
        e.m.data[s] = cfg.beta1 * e.m.data[s] + (1.0 - cfg.beta1) * g.data[s];
        e.v.data[s] = cfg.beta2 * e.v.data[s] + (1.0 - cfg.beta2) * g.data[s] * g.data[s];
        double mhat = e.m.data[s] / bc1;
        double vhat = e.v.data[s] / bc2;
        e.value.data[s] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      }
    }
    step_ = t;
    return true;
  }

  // FNV-1a over raw parameter bytes in name order; used by the stage-2
  // freeze contract.
  uint64_t checksum(const std::string& prefix = "") const {
    uint64_t h = 1469598103934665603ULL;
    auto mix_bytes = [&h](const void* p, size_t n) {
      const unsigned char* b = static_cast<const unsigned char*>(p);
      for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& [name, e] : entries_) {
      if (!prefix.empty() && name.rfind(prefix, 0) != 0) continue;
      mix_bytes(name.data(), name.size());
      mix_bytes(e.value.data.data(), e.value.data.size() * sizeof(double));
    }
    return h;
  }

 private:
  std::map<std::string, Entry> entries_;
  int64_t step_ = 0;
};

// Binds ParamStore entries into a Graph as leaves and collects their
// gradients after backward. Each name is bound at most once per graph.
class GraphParams {
 public:
  GraphParams(Graph& g, ParamStore& store) : g_(&g), store_(&store) {}

  Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Var v = g_->input(store_->value(name));
    bound_.emplace(name, v);
    return v;
  }

  std::map<std::string, Tensor> grads() {
    std::map<std::string, Tensor> out;
    for (auto& [name, var] : bound_) out.emplace(name, g_->grad_of(var));
    return out;
  }

  const std::map<std::string, Var>& bound() const { return bound_; }

 private:
  Graph* g_;
  ParamStore* store_;
  std::map<std::string, Var> bound_;
};

// ---------------------------------------------------------------------------
// Checkpoint file format
//   magic "SGDK1", u64 record count, then per record:
//   u64 name length, UTF-8 name, u64 rank, u64 dims..., f64 data...
//   All integers and floats little-endian.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path,
                            const std::vector<std::pair<std::string, Tensor>>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  os.write("SGDK1", 5);
  binio::write_u64(os, records.size());
  for (const auto& [name, t] : records) {
    binio::write_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    binio::write_u64(os, static_cast<uint64_t>(t.rank()));
    for (int64_t d : t.shape) binio::write_u64(os, static_cast<uint64_t>(d));
    binio::write_f64_array(os, t.data.data(), t.data.size());
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::string(magic, 5) != "SGDK1")
    throw std::runtime_error("checkpoint: bad magic in " + path);
  uint64_t count = binio::read_u64(is);
  std::vector<std::pair<std::string, Tensor>> records;
  records.reserve(count);
  for (uint64_t r = 0; r < count; ++r) {
    uint64_t name_len = binio::read_u64(is);
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    uint64_t rank = binio::read_u64(is);
    std::vector<int64_t> shape(rank);
    for (uint64_t i = 0; i < rank; ++i) shape[i] = static_cast<int64_t>(binio::read_u64(is));
    Tensor t(shape);
    binio::read_f64_array(is, t.data.data(), t.data.size());
    records.emplace_back(std::move(name), std::move(t));
  }
  return records;
}

// Store serialization on top of the record format: parameter values under
// "p.", first/second moments under "m."/"v.", metadata under "meta."
// ("meta.step" carries the optimizer step counter).
inline void save_store(const std::string& path, const ParamStore& store,
                       const std::map<std::string, Tensor>& meta = {},
                       bool with_opt_state = true) {
  std::vector<std::pair<std::string, Tensor>> records;
  records.emplace_back("meta.step", Tensor::scalar(static_cast<double>(store.step())));
  for (const auto& [key, t] : meta) records.emplace_back("meta." + key, t);
  for (const auto& [name, e] : store.entries()) {
    records.emplace_back("p." + name, e.value);
    if (with_opt_state) {
      records.emplace_back("m." + name, e.m);
      records.emplace_back("v." + name, e.v);
    }
  }
  save_checkpoint(path, records);
}

inline ParamStore load_store(const std::string& path,
                             std::map<std::string, Tensor>* meta_out = nullptr) {
  ParamStore store;
  std::map<std::string, Tensor> moments_m, moments_v;
  for (auto& [name, t] : load_checkpoint(path)) {
    if (name.rfind("p.", 0) == 0) {
      store.create(name.substr(2), std::move(t));
    } else if (name.rfind("m.", 0) == 0) {
      moments_m.emplace(name.substr(2), std::move(t));
    } else if (name.rfind("v.", 0) == 0) {
      moments_v.emplace(name.substr(2), std::move(t));
    } else if (name.rfind("meta.", 0) == 0) {
      if (name == "meta.step")
        store.set_step(static_cast<int64_t>(t.data[0]));
      else if (meta_out)
        meta_out->emplace(name.substr(5), std::move(t));
    }
  }
  for (auto& [name, t] : moments_m)
    if (store.has(name)) store.entry(name).m = std::move(t);
  for (auto& [name, t] : moments_v)
    if (store.has(name)) store.entry(name).v = std::move(t);
  return store;
}

}  // namespace sagdrive
