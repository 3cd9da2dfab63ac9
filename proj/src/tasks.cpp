#include "mtlab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "mtlab/bytes.hpp"
#include "mtlab/error.hpp"

namespace mtlab {
namespace tasks {

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
  }
  return "?";
}

std::span<const std::uint8_t> ClassDataset::image(std::size_t cls, std::size_t idx) const {
  const auto& c = classes.at(cls);
  if (idx >= c.count) throw DatasetError("image index out of range in class " + c.name);
  return std::span<const std::uint8_t>(c.pixels).subspan(idx * image_bytes(), image_bytes());
}

namespace {

// First `k` entries of a partial Fisher-Yates shuffle of 0..n-1.
std::vector<std::size_t> draw_without_replacement(std::size_t n, std::size_t k, RngState& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
  idx.resize(k);
  return idx;
}

void append_image(Batch& b, std::span<const std::uint8_t> px) {
  for (auto v : px) b.inputs.push_back(static_cast<double>(v) / 255.0);
}

}  // namespace

Episode sample_episode(const ClassDataset& ds, std::size_t ways, std::size_t shots, std::size_t queries,
                       RngState& rng) {
  if (ways == 0 || shots == 0 || queries == 0) throw ConfigError("episode needs positive ways, shots and queries");
  if (ds.classes.size() < ways) {
    throw DatasetError("dataset has " + std::to_string(ds.classes.size()) + " classes, episode needs " +
                       std::to_string(ways));
  }
  const std::size_t dim = ds.image_bytes();
  Episode ep;
  ep.ways = ways;
  ep.shots = shots;
  ep.queries = queries;
  ep.support.cols = ep.query.cols = dim;
  ep.support.rows = ways * shots;
  ep.query.rows = ways * queries;
  ep.support.inputs.reserve(ep.support.rows * dim);
  ep.query.inputs.reserve(ep.query.rows * dim);

  const auto chosen = draw_without_replacement(ds.classes.size(), ways, rng);
  for (std::size_t label = 0; label < ways; ++label) {
    const std::size_t cls = chosen[label];
    const auto& c = ds.classes[cls];
    if (c.count < shots + queries) {
      throw DatasetError("class '" + c.name + "' has " + std::to_string(c.count) + " images, episode needs " +
                         std::to_string(shots + queries));
    }
    const auto picks = draw_without_replacement(c.count, shots + queries, rng);
    for (std::size_t j = 0; j < picks.size(); ++j) {
      const bool to_support = j < shots;
      Batch& b = to_support ? ep.support : ep.query;
      append_image(b, ds.image(cls, picks[j]));
      b.labels.push_back(static_cast<int>(label));
      (to_support ? ep.support_ids : ep.query_ids).emplace_back(cls, picks[j]);
    }
  }
  return ep;
}

Episode sinusoid_task(RngState& rng, std::size_t shots, std::size_t queries) {
  if (shots == 0 || queries == 0) throw ConfigError("sinusoid task needs positive shots and queries");
  Episode ep;
  ep.ways = 1;
  ep.shots = shots;
  ep.queries = queries;
  ep.amplitude = rng.uniform(kSinusoidAmplitudeMin, kSinusoidAmplitudeMax);
  ep.phase = rng.uniform(0.0, kSinusoidPhaseMax);
  auto fill = [&](Batch& b, std::size_t n) {
    b.rows = n;
    b.cols = 1;
    for (std::size_t i = 0; i < n; ++i) {
      const double x = rng.uniform(-kSinusoidInputBound, kSinusoidInputBound);
      b.inputs.push_back(x);
      b.targets.push_back(ep.amplitude * std::sin(x + ep.phase));
    }
  };
  fill(ep.support, shots);
  fill(ep.query, queries);
  return ep;
}

std::vector<std::uint8_t> rotate90(std::span<const std::uint8_t> image, std::size_t side) {
  std::vector<std::uint8_t> out(side * side);
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) out[c * side + (side - 1 - r)] = image[r * side + c];
  return out;
}

ClassDataset rotate_augment(const ClassDataset& ds) {
  if (ds.height != ds.width) throw DimensionError("rotate_augment: images must be square");
  if (ds.channels != 1) throw DimensionError("rotate_augment: images must be single-channel");
  const std::size_t side = ds.height;
  const std::size_t bytes = ds.image_bytes();
  ClassDataset out;
  out.height = ds.height;
  out.width = ds.width;
  out.channels = 1;
  out.split = ds.split;
  out.classes.reserve(ds.classes.size() * 4);
  for (const auto& c : ds.classes) {
    ImageClass cur = c;
    for (int quarter = 0; quarter < 4; ++quarter) {
      ImageClass rotated;
      rotated.name = c.name + "/rot" + std::to_string(90 * quarter);
      rotated.count = c.count;
      rotated.pixels = cur.pixels;
      out.classes.push_back(std::move(rotated));
      if (quarter == 3) break;
      std::vector<std::uint8_t> next(cur.pixels.size());
      for (std::size_t i = 0; i < cur.count; ++i) {
        auto img = rotate90(std::span<const std::uint8_t>(cur.pixels).subspan(i * bytes, bytes), side);
        std::copy(img.begin(), img.end(), next.begin() + static_cast<std::ptrdiff_t>(i * bytes));
      }
      cur.pixels = std::move(next);
    }
  }
  return out;
}

namespace {

std::vector<double> gaussian_kernel(double width) {
  if (width <= 0.0) return {};
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * width));
  std::vector<double> k;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i)
    k.push_back(std::exp(-0.5 * static_cast<double>(i * i) / (width * width)));
  return k;
}

// Separable zero-padded blur of a side x side image, restricted to `support`.
std::vector<double> blur_image(const std::vector<double>& img, std::size_t side, const std::vector<double>& kernel,
                               std::span<const std::size_t> support) {
  const auto n = static_cast<std::ptrdiff_t>(side);
  const auto r = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  std::vector<double> rows(img.size(), 0.0), out(img.size(), 0.0);
  for (std::ptrdiff_t y = 0; y < n; ++y)
    for (std::ptrdiff_t x = 0; x < n; ++x)
      for (std::ptrdiff_t d = -r; d <= r; ++d)
        if (x + d >= 0 && x + d < n) rows[y * n + x] += kernel[d + r] * img[y * n + x + d];
  for (std::ptrdiff_t y = 0; y < n; ++y)
    for (std::ptrdiff_t x = 0; x < n; ++x)
      for (std::ptrdiff_t d = -r; d <= r; ++d)
        if (y + d >= 0 && y + d < n) out[y * n + x] += kernel[d + r] * rows[(y + d) * n + x];
  std::vector<double> masked(img.size(), 0.0);
  for (auto i : support) masked[i] = out[i];
  return masked;
}

}  // namespace

std::vector<std::size_t> choose_coordinates(RngState& rng, std::size_t dim, std::size_t count) {
  if (count > dim) throw ConfigError("cannot choose " + std::to_string(count) + " of " + std::to_string(dim) + " coordinates");
  auto idx = draw_without_replacement(dim, count, rng);
  std::sort(idx.begin(), idx.end());
  return idx;
}

ClassDataset synthetic_classification(RngState& rng, std::size_t n_classes, std::size_t per_class, std::size_t dim,
                                      double margin, const SyntheticOptions& options) {
  if (!(margin > 0.0)) throw ConfigError("synthetic_classification: margin must be positive");
  if (!(options.background_noise >= 0.0))
    throw ConfigError("synthetic_classification: background noise must be non-negative");
  if (!(options.smoothness >= 0.0)) throw ConfigError("synthetic_classification: smoothness must be non-negative");
  if (n_classes == 0 || per_class == 0 || dim == 0) throw ConfigError("synthetic_classification: empty dataset");
  std::vector<std::size_t> support(options.informative.begin(), options.informative.end());
  if (support.empty()) {
    support.resize(dim);
    std::iota(support.begin(), support.end(), 0);
  }
  for (auto i : support)
    if (i >= dim) throw ConfigError("synthetic_classification: informative coordinate out of range");

  ClassDataset ds;
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dim))));
  if (side * side == dim) {
    ds.height = ds.width = side;
  } else {
    ds.height = 1;
    ds.width = dim;
  }
  ds.channels = 1;

  if (options.smoothness > 0.0 && ds.height != ds.width) throw ConfigError("synthetic_classification: smoothing needs square images");
  const auto blur = gaussian_kernel(options.smoothness);
  std::vector<double> noise(dim, support.size() == dim ? 1.0 : options.background_noise);
  for (auto i : support) noise[i] = 1.0;

  std::vector<std::vector<double>> means;
  constexpr int kMaxAttempts = 10000;
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::vector<double> mu(dim, 0.0);
    bool ok = false;
    for (int attempt = 0; attempt < kMaxAttempts && !ok; ++attempt) {
      for (auto i : support) mu[i] = rng.normal();
      if (!blur.empty()) mu = blur_image(mu, ds.height, blur, support);
      double norm = 0.0;
      for (auto i : support) norm += mu[i] * mu[i];
      norm = std::sqrt(norm);
      for (auto i : support) mu[i] *= margin / norm;
      ok = std::all_of(means.begin(), means.end(), [&](const std::vector<double>& other) {
        double d2 = 0.0;
        for (std::size_t i = 0; i < dim; ++i) d2 += (mu[i] - other[i]) * (mu[i] - other[i]);
        return std::sqrt(d2) >= margin;
      });
    }
    if (!ok) throw DatasetError("synthetic_classification: cannot place class means at the requested margin");
    means.push_back(mu);
  }

  char name[32];
  for (std::size_t c = 0; c < n_classes; ++c) {
    ImageClass cls;
    std::snprintf(name, sizeof(name), "blob%05zu", c);
    cls.name = name;
    cls.count = per_class;
    cls.pixels.reserve(per_class * dim);
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t d = 0; d < dim; ++d) {
        const double x = means[c][d] + noise[d] * rng.normal();
        const double q = std::round(128.0 + kSyntheticByteScale * x);
        cls.pixels.push_back(static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0)));
      }
    }
    ds.classes.push_back(std::move(cls));
  }
  return ds;
}

std::vector<std::uint8_t> serialize_mtds(const ClassDataset& ds) {
  bytes::Writer w;
  w.raw(std::string_view("MTDS"));
  w.u32(kMtdsVersion);
  w.u32(static_cast<std::uint32_t>(ds.height));
  w.u32(static_cast<std::uint32_t>(ds.width));
  w.u32(static_cast<std::uint32_t>(ds.channels));
  w.u32(static_cast<std::uint32_t>(ds.classes.size()));
  for (const auto& c : ds.classes) {
    if (c.name.size() > 0xffff) throw ConfigError("class name too long: " + c.name);
    if (c.pixels.size() != c.count * ds.image_bytes()) throw DatasetError("class '" + c.name + "' has inconsistent pixel count");
    w.u16(static_cast<std::uint16_t>(c.name.size()));
    w.raw(c.name);
    w.u32(static_cast<std::uint32_t>(c.count));
    w.raw(c.pixels);
  }
  return w.take();
}

void save_mtds(const ClassDataset& ds, const std::filesystem::path& path) { bytes::write_file(path, serialize_mtds(ds)); }

ClassDataset parse_mtds(std::span<const std::uint8_t> data, Split split) {
  bytes::Reader r(data);
  r.section("header");
  if (r.str(4) != "MTDS") r.fail("bad magic");
  const auto version = r.u32();
  if (version != kMtdsVersion) r.fail("unsupported version " + std::to_string(version));
  ClassDataset ds;
  ds.split = split;
  ds.height = r.u32();
  ds.width = r.u32();
  ds.channels = r.u32();
  const auto n_classes = r.u32();
  if (ds.image_bytes() == 0) r.fail("zero image size");
  ds.classes.reserve(n_classes);
  for (std::uint32_t c = 0; c < n_classes; ++c) {
    r.section("class " + std::to_string(c));
    ImageClass cls;
    const auto len = r.u16();
    cls.name = r.str(len);
    r.section("class " + std::to_string(c) + " '" + cls.name + "'");
    cls.count = r.u32();
    const auto n = static_cast<std::uint64_t>(cls.count) * ds.image_bytes();
    if (n > r.remaining()) {
      r.fail("truncated: class declares " + std::to_string(n) + " pixel bytes, " + std::to_string(r.remaining()) +
             " left");
    }
    auto px = r.raw(static_cast<std::size_t>(n));
    cls.pixels.assign(px.begin(), px.end());
    ds.classes.push_back(std::move(cls));
  }
  r.section("trailer");
  if (r.remaining() != 0) r.fail(std::to_string(r.remaining()) + " unexpected trailing bytes");
  return ds;
}

ClassDataset load_mtds(const std::filesystem::path& path, Split split) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("MTDS file not found: " + path.string());
  return parse_mtds(bytes::read_file(path), split);
}

}  // namespace tasks
}  // namespace mtlab
