#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "graftnet/autodiff.hpp"
#include "graftnet/errors.hpp"

namespace graftnet {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Named trainable tensors plus their Adam moments.
template <std::floating_point T>
class ParamStore {
 public:
  ad::Value<T>& add(const std::string& name, ad::Shape shape, std::vector<T> init) {
    if (entries_.count(name)) throw ContractViolation("duplicate parameter " + name);
    auto value = ad::Value<T>::parameter(std::move(shape), std::move(init));
    const std::size_t n = value.size();
    auto [it, _] = entries_.emplace(name, Entry{value, std::vector<T>(n), std::vector<T>(n)});
    return it->second.value;
  }

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }

  const ad::Value<T>& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractViolation("unknown parameter " + name);
    return it->second.value;
  }
  ad::Value<T>& at(const std::string& name) {
    return const_cast<ad::Value<T>&>(std::as_const(*this).at(name));
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : entries_) out.push_back(name);
    return out;
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t step_count() const { return steps_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, e] : entries_) e.value.zero_grad();
  }

  /// One Adam update from the accumulated gradients, which are then cleared.
  /// Non-finite gradients abort the step before any parameter changes.
  void adam_step(const AdamConfig& config = {}) {
    for (const auto& [name, e] : entries_) {
      for (T g : e.value.grad()) {
        if (!std::isfinite(g)) throw NumericFault("non-finite gradient in parameter " + name);
      }
    }
    ++steps_;
    const double bias1 = 1.0 - std::pow(config.beta1, static_cast<double>(steps_));
    const double bias2 = 1.0 - std::pow(config.beta2, static_cast<double>(steps_));
    const T b1 = static_cast<T>(config.beta1);
    const T b2 = static_cast<T>(config.beta2);
    for (auto& [_, e] : entries_) {
      auto grad = e.value.grad();
      if (grad.empty()) continue;
      auto data = e.value.mutable_data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const T g = grad[i];
        e.first_moment[i] = b1 * e.first_moment[i] + (T(1) - b1) * g;
        e.second_moment[i] = b2 * e.second_moment[i] + (T(1) - b2) * g * g;
        const double m_hat = e.first_moment[i] / bias1;
        const double v_hat = e.second_moment[i] / bias2;
        data[i] -= static_cast<T>(config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon));
      }
      e.value.zero_grad();
    }
  }

  /// Copy of every parameter's data, in name order.
  std::vector<std::vector<T>> snapshot() const {
    std::vector<std::vector<T>> out;
    for (const auto& [_, e] : entries_) out.emplace_back(e.value.data().begin(), e.value.data().end());
    return out;
  }

  void restore(const std::vector<std::vector<T>>& saved) {
    if (saved.size() != entries_.size()) throw ContractViolation("snapshot does not match store");
    std::size_t i = 0;
    for (auto& [_, e] : entries_) {
      if (saved[i].size() != e.value.size()) throw ContractViolation("snapshot shape mismatch");
      std::copy(saved[i].begin(), saved[i].end(), e.value.mutable_data().begin());
      ++i;
    }
  }

  /// Same names and values at another precision (no optimizer state).
  template <std::floating_point U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, e] : entries_) {
      out.add(name, e.value.shape(), std::vector<U>(e.value.data().begin(), e.value.data().end()));
    }
    return out;
  }

 private:
  struct Entry {
    ad::Value<T> value;
    std::vector<T> first_moment;
    std::vector<T> second_moment;
  };

  std::map<std::string, Entry> entries_;
  std::size_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint: a text manifest plus a flat little-endian float64 payload.
//
//   GRAFTNET-CKPT-1
//   payload=<file name relative to the manifest>
//   name=<param> shape=<d0>x<d1> offset=<byte offset>
//   ...

inline constexpr const char* kCheckpointTag = "GRAFTNET-CKPT-2";

inline std::filesystem::path checkpoint_payload_path(const std::filesystem::path& manifest) {
  auto p = manifest;
  p += ".bin";
  return p;
}

template <std::floating_point T>
void save_checkpoint(const ParamStore<T>& store, const std::filesystem::path& manifest) {
  const auto payload = checkpoint_payload_path(manifest);
  std::ofstream meta(manifest, std::ios::binary);
  std::ofstream bin(payload, std::ios::binary);
  if (!meta || !bin) throw std::runtime_error("cannot write checkpoint " + manifest.string());
  meta << kCheckpointTag << '\n' << "payload=" << payload.filename().string() << '\n';
  std::size_t offset = 0;
  for (const auto& name : store.names()) {
    const auto& v = store.at(name);
    meta << "name=" << name << " shape=";
    for (std::size_t i = 0; i < v.shape().size(); ++i) meta << (i ? "x" : "") << v.shape()[i];
    meta << " offset=" << offset << '\n';
    for (T x : v.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(static_cast<double>(x));
      char bytes[8];
      for (int k = 0; k < 8; ++k) bytes[k] = static_cast<char>((bits >> (8 * k)) & 0xff);
      bin.write(bytes, 8);
    }
    offset += 8 * v.size();
  }
}

/// Loads values into an existing store. Names and shapes must match exactly.
template <std::floating_point T>
void load_checkpoint(ParamStore<T>& store, const std::filesystem::path& manifest) {
  std::ifstream meta(manifest);
  if (!meta) throw DependencyError("missing checkpoint " + manifest.string());
  std::string line;
  std::getline(meta, line);
  if (line != kCheckpointTag) throw ParseError(manifest.string(), 1, "bad checkpoint tag");
  std::getline(meta, line);
  if (line.rfind("payload=", 0) != 0) throw ParseError(manifest.string(), 2, "missing payload");
  const auto payload = manifest.parent_path() / line.substr(8);
  std::ifstream bin(payload, std::ios::binary);
  if (!bin) throw DependencyError("missing checkpoint payload " + payload.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  std::size_t line_no = 2;
  std::size_t loaded = 0;
  while (std::getline(meta, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string name, shape, offset;
    fields >> name >> shape >> offset;
    if (name.rfind("name=", 0) != 0 || shape.rfind("shape=", 0) != 0 ||
        offset.rfind("offset=", 0) != 0) {
      throw ParseError(manifest.string(), line_no, "expected name= shape= offset=");
    }
    name = name.substr(5);
    if (!store.contains(name)) throw ParseError(manifest.string(), line_no, "unknown parameter " + name);
    auto& v = store.at(name);
    std::string expected;
    for (std::size_t i = 0; i < v.shape().size(); ++i) expected += (i ? "x" : "") + std::to_string(v.shape()[i]);
    if (shape.substr(6) != expected) {
      throw ParseError(manifest.string(), line_no, "shape mismatch for " + name);
    }
    const std::size_t start = std::stoull(offset.substr(7));
    if (start + 8 * v.size() > bytes.size()) {
      throw ParseError(manifest.string(), line_no, "payload too short for " + name);
    }
    auto data = v.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto* b = reinterpret_cast<const unsigned char*>(bytes.data() + start + 8 * i);
      std::uint64_t bits = 0;
      for (int k = 0; k < 8; ++k) bits |= std::uint64_t(b[k]) << (8 * k);
      data[i] = static_cast<T>(std::bit_cast<double>(bits));
    }
    ++loaded;
  }
  if (loaded != store.size()) {
    throw ParseError(manifest.string(), line_no, "checkpoint has " + std::to_string(loaded) +
                                                     " parameters, model has " +
                                                     std::to_string(store.size()));
  }
}

}  // namespace graftnet
