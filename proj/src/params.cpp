#include "hypo/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "hypo/error.hpp"
#include "hypo/io.hpp"

namespace hypo {
namespace {

constexpr char kMagic[8] = {'H', 'Y', 'P', 'O', 'C', 'K', 'P', 'T'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(std::string_view in, std::size_t offset) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return v;
}

void put_doubles(std::string& out, const Tensor& t) {
  for (double d : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(d));
}

void get_doubles(std::string_view in, std::size_t& offset, Tensor& t) {
  if (offset + 8 * t.size() > in.size()) throw IoError("checkpoint payload is truncated");
  for (double& d : t.data()) {
    d = std::bit_cast<double>(get_u64(in, offset));
    offset += 8;
  }
}

}  // namespace

ParameterEntry& ParameterStore::add(const std::string& name, std::vector<std::int64_t> shape) {
  if (contains(name)) throw ConfigError("duplicate parameter name " + name);
  Tensor value(shape);
  ParameterEntry e{value, Tensor::zeros_like(value), Tensor::zeros_like(value), Tensor::zeros_like(value)};
  return entries_.emplace(name, std::move(e)).first->second;
}

ParameterEntry& ParameterStore::add_uniform(const std::string& name, std::vector<std::int64_t> shape, double scale,
                                            Rng& rng) {
  ParameterEntry& e = add(name, std::move(shape));
  for (double& d : e.value.data()) d = (2.0 * rng.uniform() - 1.0) * scale;
  return e;
}

ParameterEntry& ParameterStore::at(std::string_view name) {
  auto it = entries_.find(std::string(name));
  if (it == entries_.end()) throw ConfigError("unknown parameter " + std::string(name));
  return it->second;
}

const ParameterEntry& ParameterStore::at(std::string_view name) const {
  auto it = entries_.find(std::string(name));
  if (it == entries_.end()) throw ConfigError("unknown parameter " + std::string(name));
  return it->second;
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_) n += e.value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, e] : entries_) e.grad.matrix().setZero();
}

double ParameterStore::grad_norm() const {
  double sq = 0.0;
  for (const auto& [name, e] : entries_) sq += e.grad.matrix().squaredNorm();
  return std::sqrt(sq);
}

std::string ParameterStore::serialize(const nlohmann::json& config) const {
  nlohmann::json header;
  header["format"] = "hypo-checkpoint";
  header["version"] = 1;
  header["step"] = step;
  header["clip"] = {{"initialized", clip.initialized},
                    {"norm_average_bits", std::bit_cast<std::uint64_t>(clip.norm_average)}};
  header["config"] = config;
  nlohmann::json list = nlohmann::json::array();
  for (const auto& [name, e] : entries_) list.push_back({{"name", name}, {"shape", e.value.shape()}});
  header["entries"] = list;
  const std::string head = header.dump();

  std::string out(kMagic, sizeof kMagic);
  put_u64(out, head.size());
  out += head;
  for (const auto& [name, e] : entries_) {
    put_doubles(out, e.value);
    put_doubles(out, e.grad);
    put_doubles(out, e.adam_m);
    put_doubles(out, e.adam_v);
  }
  return out;
}

ParameterStore ParameterStore::deserialize(std::string_view bytes, nlohmann::json* config_out) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw IoError("not a checkpoint file (bad magic)");
  }
  const std::uint64_t head_len = get_u64(bytes, 8);
  if (16 + head_len > bytes.size()) throw IoError("checkpoint header is truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, head_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(std::string("checkpoint header is not JSON: ") + e.what());
  }
  ParameterStore store;
  store.step = header.at("step").get<std::int64_t>();
  store.clip.initialized = header.at("clip").at("initialized").get<bool>();
  store.clip.norm_average = std::bit_cast<double>(header.at("clip").at("norm_average_bits").get<std::uint64_t>());
  std::size_t offset = 16 + head_len;
  for (const auto& item : header.at("entries")) {
    ParameterEntry& e = store.add(item.at("name").get<std::string>(), item.at("shape").get<std::vector<std::int64_t>>());
    get_doubles(bytes, offset, e.value);
    get_doubles(bytes, offset, e.grad);
    get_doubles(bytes, offset, e.adam_m);
    get_doubles(bytes, offset, e.adam_v);
  }
  if (offset != bytes.size()) throw IoError("checkpoint has trailing bytes");
  if (config_out) *config_out = header.at("config");
  return store;
}

void ParameterStore::save(const std::string& path, const nlohmann::json& config) const {
  write_file_atomic(path, serialize(config));
}

ParameterStore ParameterStore::load(const std::string& path, nlohmann::json* config_out) {
  return deserialize(read_file(path), config_out);
}

bool bitwise_equal(const ParameterStore& a, const ParameterStore& b) {
  if (a.step != b.step || a.clip.initialized != b.clip.initialized ||
      std::bit_cast<std::uint64_t>(a.clip.norm_average) != std::bit_cast<std::uint64_t>(b.clip.norm_average) ||
      a.entries_.size() != b.entries_.size()) {
    return false;
  }
  auto same = [](const Tensor& x, const Tensor& y) {
    return x.shape() == y.shape() && std::memcmp(x.data().data(), y.data().data(), 8 * x.size()) == 0;
  };
  for (auto ia = a.entries_.begin(), ib = b.entries_.begin(); ia != a.entries_.end(); ++ia, ++ib) {
    if (ia->first != ib->first) return false;
    const auto& ea = ia->second;
    const auto& eb = ib->second;
    if (!same(ea.value, eb.value) || !same(ea.grad, eb.grad) || !same(ea.adam_m, eb.adam_m) ||
        !same(ea.adam_v, eb.adam_v)) {
      return false;
    }
  }
  return true;
}

}  // namespace hypo
