#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "hypo/rng.hpp"
#include "hypo/tensor.hpp"

namespace hypo {

struct ParameterEntry {
  Tensor value;
  Tensor grad;
  Tensor adam_m;
  Tensor adam_v;
};

// Moving-average state of the adaptive gradient clipper.
struct ClipState {
  bool initialized = false;
  double norm_average = 0.0;
};

// Named model weights with gradients and Adam moments. Entries iterate in
// name order, which fixes the order of every reduction over parameters.
class ParameterStore {
 public:
  ParameterEntry& add(const std::string& name, std::vector<std::int64_t> shape);
  ParameterEntry& add_uniform(const std::string& name, std::vector<std::int64_t> shape, double scale, Rng& rng);

  bool contains(std::string_view name) const { return entries_.find(std::string(name)) != entries_.end(); }
  ParameterEntry& at(std::string_view name);
  const ParameterEntry& at(std::string_view name) const;

  std::map<std::string, ParameterEntry>& entries() { return entries_; }
  const std::map<std::string, ParameterEntry>& entries() const { return entries_; }

  std::size_t parameter_count() const;
  void zero_grad();
  double grad_norm() const;

  std::int64_t step = 0;
  ClipState clip;

  // Checkpoint container: 8-byte magic, little-endian u64 header length,
  // JSON header, then value/grad/adam_m/adam_v payloads per entry in header
  // order as little-endian doubles.
  std::string serialize(const nlohmann::json& config = nlohmann::json::object()) const;
  static ParameterStore deserialize(std::string_view bytes, nlohmann::json* config_out = nullptr);
  void save(const std::string& path, const nlohmann::json& config = nlohmann::json::object()) const;
  static ParameterStore load(const std::string& path, nlohmann::json* config_out = nullptr);

  friend bool bitwise_equal(const ParameterStore& a, const ParameterStore& b);

 private:
  std::map<std::string, ParameterEntry> entries_;
};

}  // namespace hypo
