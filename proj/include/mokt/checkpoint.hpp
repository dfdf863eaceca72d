#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "mokt/models.hpp"

// Binary weight snapshots. Layout (all integers little-endian):
//   "MOKT" | u32 version | u32 tensor count
//   per tensor: u32 name length | name bytes | u32 dtype (1=f32, 2=f64)
//               | u32 rank | i64 extents[rank] | raw row-major values
// Values are written in the native byte order of the trainer, which is
// little-endian on every platform this targets.

namespace mokt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename S>
constexpr std::uint32_t dtype_code() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>,
                "checkpoints hold f32 or f64 tensors");
  return std::is_same_v<S, float> ? 1u : 2u;
}

template <typename T>
void write_pod(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  check(static_cast<bool>(f), "checkpoint: truncated file");
  return v;
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path,
                     const std::vector<NamedParam<S>>& params) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  check(static_cast<bool>(f), "checkpoint: cannot open '" + path + "' for writing");
  f.write("MOKT", 4);
  detail::write_pod(f, kCheckpointVersion);
  detail::write_pod(f, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::write_pod(f, static_cast<std::uint32_t>(p.name.size()));
    f.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_pod(f, detail::dtype_code<S>());
    detail::write_pod(f, static_cast<std::uint32_t>(p.tensor.rank()));
    for (int e : p.tensor.shape()) detail::write_pod(f, static_cast<std::int64_t>(e));
    const auto& v = p.tensor.values();
    f.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(S)));
  }
  check(static_cast<bool>(f), "checkpoint: write to '" + path + "' failed");
}

// Loads into an existing registry. Order, names, dtypes, and shapes must all
// match the file exactly; data is copied into the registered tensors in place.
template <typename S>
void load_checkpoint(const std::string& path, std::vector<NamedParam<S>>& params) {
  std::ifstream f(path, std::ios::binary);
  check(static_cast<bool>(f), "checkpoint: cannot open '" + path + "'");
  char magic[4];
  f.read(magic, 4);
  check(static_cast<bool>(f) && std::memcmp(magic, "MOKT", 4) == 0,
        "checkpoint: '" + path + "' has no MOKT magic");
  auto version = detail::read_pod<std::uint32_t>(f);
  check(version == kCheckpointVersion,
        "checkpoint: version " + std::to_string(version) + " unsupported");
  auto count = detail::read_pod<std::uint32_t>(f);
  check(count == params.size(), "checkpoint: holds " + std::to_string(count) +
                                    " tensors, registry has " +
                                    std::to_string(params.size()));
  for (auto& p : params) {
    auto name_len = detail::read_pod<std::uint32_t>(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    check(static_cast<bool>(f) && name == p.name,
          "checkpoint: expected tensor '" + p.name + "', found '" + name + "'");
    auto dtype = detail::read_pod<std::uint32_t>(f);
    check(dtype == detail::dtype_code<S>(),
          "checkpoint: dtype mismatch for '" + name + "'");
    auto rank = detail::read_pod<std::uint32_t>(f);
    check(rank == static_cast<std::uint32_t>(p.tensor.rank()),
          "checkpoint: rank mismatch for '" + name + "'");
    for (int e : p.tensor.shape()) {
      auto got = detail::read_pod<std::int64_t>(f);
      check(got == e, "checkpoint: extent mismatch for '" + name + "'");
    }
    auto& v = p.tensor.mutable_values();
    f.read(reinterpret_cast<char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(S)));
    check(static_cast<bool>(f), "checkpoint: truncated data for '" + name + "'");
  }
}

}  // namespace mokt
