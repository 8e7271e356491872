#include "adaptsense/params.h"

#include <fmt/format.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "adaptsense/errors.h"

namespace adaptsense {

using json = nlohmann::json;

ag::Var ParamSet::Add(const std::string& name, ag::Shape shape,
                      std::vector<double> init) {
  if (Contains(name)) throw ContractError("duplicate parameter " + name);
  ag::Var v = ag::Var::Leaf(std::move(init), std::move(shape), true);
  entries_.emplace_back(name, v);
  return v;
}

ag::Var ParamSet::AddUniform(const std::string& name, ag::Shape shape,
                             int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  std::vector<double> init(ag::NumElements(shape));
  for (double& x : init) x = (2.0 * rng.Uniform() - 1.0) * bound;
  return Add(name, std::move(shape), std::move(init));
}

ag::Var ParamSet::AddLecun(const std::string& name, ag::Shape shape,
                           int fan_in, Rng& rng) {
  const double bound = std::sqrt(3.0 / fan_in);
  std::vector<double> init(ag::NumElements(shape));
  for (double& x : init) x = (2.0 * rng.Uniform() - 1.0) * bound;
  return Add(name, std::move(shape), std::move(init));
}

ag::Var ParamSet::AddConstant(const std::string& name, ag::Shape shape,
                              double value) {
  std::vector<double> init(ag::NumElements(shape), value);
  return Add(name, std::move(shape), std::move(init));
}

ag::Var ParamSet::Get(const std::string& name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return v;
  throw ContractError("unknown parameter " + name);
}

bool ParamSet::Contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.first == name) return true;
  return false;
}

size_t ParamSet::NumScalars() const {
  size_t n = 0;
  for (const auto& e : entries_) n += e.second.size();
  return n;
}

void ParamSet::ZeroGrad() {
  for (auto& e : entries_) e.second.ZeroGrad();
}

void ParamSet::SetRequiresGrad(bool on) {
  for (auto& e : entries_) e.second.set_requires_grad(on);
}

std::vector<double> ParamSet::Flatten() const {
  std::vector<double> flat;
  flat.reserve(NumScalars());
  for (const auto& e : entries_)
    flat.insert(flat.end(), e.second.value().begin(), e.second.value().end());
  return flat;
}

void ParamSet::Assign(std::span<const double> flat) {
  if (flat.size() != NumScalars()) {
    throw ShapeError(fmt::format("Assign: {} values for {} parameters",
                                 flat.size(), NumScalars()));
  }
  size_t off = 0;
  for (auto& e : entries_) {
    auto& v = e.second.mutable_value();
    std::copy(flat.begin() + off, flat.begin() + off + v.size(), v.begin());
    off += v.size();
  }
}

ParamSet ParamSet::Clone() const {
  ParamSet out;
  for (const auto& [name, v] : entries_) {
    ag::Var copy = ag::Var::Leaf(v.value(), v.shape(), v.requires_grad());
    out.entries_.emplace_back(name, copy);
  }
  return out;
}

void ParamSet::Merge(const std::string& prefix, const ParamSet& other) {
  for (const auto& [name, v] : other.entries_) {
    const std::string full = prefix + name;
    if (Contains(full)) throw ContractError("duplicate parameter " + full);
    entries_.emplace_back(full, v);
  }
}

uint64_t ParamSet::Checksum() const {
  uint64_t h = 1469598103934665603ULL;
  for (const auto& e : entries_) {
    for (double x : e.second.value()) {
      uint64_t bits = std::bit_cast<uint64_t>(x);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xff;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

void SgdMomentum::Step(ParamSet& params) {
  const auto& entries = params.entries();
  if (velocity_.size() != entries.size()) {
    velocity_.clear();
    for (const auto& e : entries) velocity_.emplace_back(e.second.size(), 0.0);
  }
  for (size_t k = 0; k < entries.size(); ++k) {
    ag::Var v = entries[k].second;
    if (!v.requires_grad()) continue;
    auto& vel = velocity_[k];
    auto& val = v.mutable_value();
    const auto& g = v.grad();
    for (size_t i = 0; i < val.size(); ++i) {
      vel[i] = momentum_ * vel[i] + g[i];
      val[i] -= lr_ * vel[i];
    }
  }
}

namespace {

uint64_t ToLittleEndian(uint64_t x) {
  if constexpr (std::endian::native == std::endian::big) {
    return __builtin_bswap64(x);
  }
  return x;
}

}  // namespace

void SaveCheckpoint(const std::string& path, const ParamSet& params) {
  json manifest;
  manifest["format"] = "adaptsense.ckpt.v1";
  manifest["dtype"] = "float64-le";
  json tensors = json::array();
  std::ofstream blob(path, std::ios::binary | std::ios::trunc);
  if (!blob) throw IoError("cannot write " + path);
  size_t offset = 0;
  for (const auto& [name, v] : params.entries()) {
    tensors.push_back({{"name", name},
                       {"shape", v.shape()},
                       {"offset", offset},
                       {"count", v.size()}});
    for (double x : v.value()) {
      const uint64_t le = ToLittleEndian(std::bit_cast<uint64_t>(x));
      blob.write(reinterpret_cast<const char*>(&le), sizeof(le));
    }
    offset += v.size();
  }
  manifest["tensors"] = tensors;
  manifest["total"] = offset;
  if (!blob) throw IoError("short write to " + path);
  std::ofstream mf(path + ".json", std::ios::trunc);
  if (!mf) throw IoError("cannot write " + path + ".json");
  mf << manifest.dump(2) << "\n";
}

void LoadCheckpoint(const std::string& path, ParamSet& params) {
  std::ifstream mf(path + ".json");
  if (!mf) throw IoError("missing checkpoint manifest " + path + ".json");
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::exception& e) {
    throw IoError(
        fmt::format("bad checkpoint manifest {}: {}", path, e.what()));
  }
  if (manifest.value("format", "") != "adaptsense.ckpt.v1") {
    throw IoError("unsupported checkpoint format in " + path);
  }
  std::ifstream blob(path, std::ios::binary);
  if (!blob) throw IoError("missing checkpoint blob " + path);
  const size_t total = manifest.at("total").get<size_t>();
  std::vector<double> flat(total);
  for (size_t i = 0; i < total; ++i) {
    uint64_t le = 0;
    blob.read(reinterpret_cast<char*>(&le), sizeof(le));
    flat[i] = std::bit_cast<double>(ToLittleEndian(le));
  }
  if (!blob) throw IoError("truncated checkpoint blob " + path);
  for (const auto& t : manifest.at("tensors")) {
    const std::string name = t.at("name");
    if (!params.Contains(name)) {
      throw IoError("checkpoint has unknown tensor " + name);
    }
    ag::Var v = params.Get(name);
    if (t.at("shape").get<ag::Shape>() != v.shape()) {
      throw IoError(fmt::format("checkpoint shape mismatch for {}", name));
    }
    const size_t off = t.at("offset");
    std::copy(flat.begin() + off, flat.begin() + off + v.size(),
              v.mutable_value().begin());
  }
  if (manifest.at("tensors").size() != params.entries().size()) {
    throw IoError("checkpoint does not cover every parameter in " + path);
  }
}

}  // namespace adaptsense
