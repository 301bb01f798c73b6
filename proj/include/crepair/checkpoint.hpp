#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "crepair/errors.hpp"
#include "crepair/tensor.hpp"

namespace crepair {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.write(buf, 4);
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.write(buf, 8);
}

inline std::uint32_t read_u32(std::istream& in, const char* what) {
  char buf[4];
  if (!in.read(buf, 4)) throw DataError(std::string("checkpoint: truncated ") + what);
  std::uint32_t v;
  std::memcpy(&v, buf, 4);
  return v;
}

inline std::uint64_t read_u64(std::istream& in, const char* what) {
  char buf[8];
  if (!in.read(buf, 8)) throw DataError(std::string("checkpoint: truncated ") + what);
  std::uint64_t v;
  std::memcpy(&v, buf, 8);
  return v;
}

}  // namespace detail

// Named trainable parameters in insertion order. Iteration order is part of
// the contract: the optimizer, gradient clipping, and the checkpoint writer
// all walk it, so runs are bit-reproducible.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    if (index_.count(name))
      throw NumericError("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    index_[name] = params_.size();
    params_.emplace_back(name, std::move(t));
    return params_.back().second;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw NumericError("unknown parameter: " + name);
    return params_[it->second].second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw NumericError("unknown parameter: " + name);
    return params_[it->second].second;
  }

  std::vector<std::pair<std::string, Tensor>>& entries() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& entries() const {
    return params_;
  }

  std::size_t size() const { return params_.size(); }

  std::int64_t value_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  // Binary layout: "CRPM", format version, entry count, then per entry
  // name length/bytes, rank, dims, raw little-endian f64 values.
  void save(std::ostream& out) const {
    out.write("CRPM", 4);
    detail::write_u32(out, kCheckpointVersion);
    detail::write_u64(out, params_.size());
    for (const auto& [name, t] : params_) {
      detail::write_u32(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::write_u32(out, static_cast<std::uint32_t>(t.rank()));
      for (int d : t.shape()) detail::write_u32(out, static_cast<std::uint32_t>(d));
      out.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.size() * 8));
    }
  }

  static ParamStore load(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "CRPM", 4) != 0)
      throw DataError("checkpoint: bad parameter-block magic");
    std::uint32_t version = detail::read_u32(in, "version");
    if (version != kCheckpointVersion)
      throw DataError("checkpoint: format version " + std::to_string(version) +
                      " not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
    std::uint64_t count = detail::read_u64(in, "entry count");
    if (count > 1'000'000) throw DataError("checkpoint: implausible entry count");
    ParamStore store;
    for (std::uint64_t i = 0; i < count; ++i) {
      std::uint32_t name_len = detail::read_u32(in, "name length");
      if (name_len > 4096) throw DataError("checkpoint: implausible name length");
      std::string name(name_len, '\0');
      if (!in.read(name.data(), name_len))
        throw DataError("checkpoint: truncated parameter name");
      std::uint32_t rank = detail::read_u32(in, "rank");
      if (rank > 8) throw DataError("checkpoint: implausible tensor rank");
      Shape shape;
      std::int64_t numel = 1;
      for (std::uint32_t d = 0; d < rank; ++d) {
        int dim = static_cast<int>(detail::read_u32(in, "dimension"));
        if (dim <= 0 || dim > 100'000'000)
          throw DataError("checkpoint: implausible dimension");
        numel *= dim;
        if (numel > 2'000'000'000)
          throw DataError("checkpoint: implausible tensor size");
        shape.push_back(dim);
      }
      Tensor t = Tensor::zeros(shape);
      if (!in.read(reinterpret_cast<char*>(t.data_mut()),
                   static_cast<std::streamsize>(t.size() * 8)))
        throw DataError("checkpoint: truncated values for " + name);
      store.add(name, std::move(t));
    }
    return store;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace crepair
