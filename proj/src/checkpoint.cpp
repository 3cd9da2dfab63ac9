#include "mtlab/checkpoint.hpp"

#include <stdexcept>

#include "mtlab/bytes.hpp"
#include "mtlab/error.hpp"

namespace mtlab::ckpt {

const TensorSection* Checkpoint::find(const std::string& name) const {
  for (const auto& s : sections)
    if (s.name == name) return &s;
  return nullptr;
}

const TensorSection& Checkpoint::at(const std::string& name) const {
  const auto* s = find(name);
  if (s == nullptr) throw FormatError("missing section", name, 0);
  return *s;
}

void Checkpoint::add(std::string name, std::vector<std::uint64_t> extents, std::vector<double> data) {
  std::uint64_t n = 1;
  for (auto e : extents) n *= e;
  if (n != data.size()) throw DimensionError("section '" + name + "' extents do not match its data");
  if (find(name) != nullptr) throw std::invalid_argument("duplicate checkpoint section '" + name + "'");
  sections.push_back({std::move(name), std::move(extents), std::move(data)});
}

std::vector<std::uint8_t> serialize(const Checkpoint& ck) {
  bytes::Writer w;
  w.raw(std::string_view("MTKT"));
  w.u32(kVersion);
  w.u64(ck.iteration);
  w.u32(static_cast<std::uint32_t>(ck.sections.size()));
  for (const auto& s : ck.sections) {
    if (s.name.size() > 0xffff) throw std::invalid_argument("section name too long");
    if (s.extents.size() > 0xff) throw std::invalid_argument("section rank too large");
    w.u16(static_cast<std::uint16_t>(s.name.size()));
    w.raw(s.name);
    w.u8(kDtypeF64);
    w.u8(static_cast<std::uint8_t>(s.extents.size()));
    for (auto e : s.extents) w.u64(e);
    w.u64(static_cast<std::uint64_t>(s.data.size()) * 8);
    for (double v : s.data) w.f64(v);
  }
  for (auto word : ck.rng_words) w.u64(word);
  w.u64(ck.rng_draws);
  w.u32(static_cast<std::uint32_t>(ck.config.size()));
  for (const auto& [k, v] : ck.config) {
    const std::string line = k + "=" + v;
    w.u32(static_cast<std::uint32_t>(line.size()));
    w.raw(line);
  }
  return w.take();
}

Checkpoint parse(std::span<const std::uint8_t> data) {
  bytes::Reader r(data);
  r.section("header");
  if (r.str(4) != "MTKT") r.fail("bad magic");
  const auto version = r.u32();
  if (version != kVersion) r.fail("unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.iteration = r.u64();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    r.section("section #" + std::to_string(i));
    TensorSection s;
    s.name = r.str(r.u16());
    r.section(s.name);
    const auto dtype = r.u8();
    if (dtype != kDtypeF64) r.fail("unsupported dtype code " + std::to_string(dtype));
    const auto rank = r.u8();
    std::uint64_t n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      s.extents.push_back(r.u64());
      n *= s.extents.back();
    }
    const auto payload = r.u64();
    if (payload != n * 8) {
      r.fail("payload of " + std::to_string(payload) + " bytes does not match extents (" + std::to_string(n * 8) +
             " expected)");
    }
    if (payload > r.remaining()) r.fail("truncated payload");
    s.data.resize(n);
    for (auto& v : s.data) v = r.f64();
    if (ck.find(s.name) != nullptr) r.fail("duplicate section");
    ck.sections.push_back(std::move(s));
  }
  r.section("rng");
  for (auto& word : ck.rng_words) word = r.u64();
  ck.rng_draws = r.u64();
  r.section("config");
  const auto entries = r.u32();
  for (std::uint32_t i = 0; i < entries; ++i) {
    const auto line = r.str(r.u32());
    const auto eq = line.find('=');
    if (eq == std::string::npos) r.fail("config entry without '='");
    ck.config.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  r.section("trailer");
  if (r.remaining() != 0) r.fail(std::to_string(r.remaining()) + " unexpected trailing bytes");
  return ck;
}

void save(const Checkpoint& ck, const std::filesystem::path& path) { bytes::write_file(path, serialize(ck)); }

Checkpoint load(const std::filesystem::path& path) { return parse(bytes::read_file(path)); }

}  // namespace mtlab::ckpt
