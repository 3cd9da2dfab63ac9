#pragma once

// MTKT checkpoint container.
//
//   "MTKT"  u32 version  u64 iteration  u32 section count
//   per section: u16 name length, name, u8 dtype (1 = f64), u8 rank,
//                rank x u64 extents, u64 payload bytes, payload (LE f64)
//   4 x u64 RNG state words, u64 draw counter
//   u32 config entries, each u32 length + "key=value" (UTF-8)
//
// Every integer is little-endian. Loading checks each declared length against
// the bytes actually present and names the offending section on failure.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mtlab::ckpt {

inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;

struct TensorSection {
  std::string name;
  std::vector<std::uint64_t> extents;
  std::vector<double> data;

  friend bool operator==(const TensorSection&, const TensorSection&) = default;
};

struct Checkpoint {
  std::uint64_t iteration = 0;
  std::vector<TensorSection> sections;
  std::array<std::uint64_t, 4> rng_words{};
  std::uint64_t rng_draws = 0;
  std::vector<std::pair<std::string, std::string>> config;

  const TensorSection* find(const std::string& name) const;
  const TensorSection& at(const std::string& name) const;
  void add(std::string name, std::vector<std::uint64_t> extents, std::vector<double> data);
  void add_scalar(std::string name, double v) { add(std::move(name), {}, {v}); }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::vector<std::uint8_t> serialize(const Checkpoint& ck);
Checkpoint parse(std::span<const std::uint8_t> data);
void save(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load(const std::filesystem::path& path);

}  // namespace mtlab::ckpt
