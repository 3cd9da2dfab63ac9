#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mtlab/rng.hpp"

namespace mtlab::tasks {

enum class Split { train, val, test };

std::string_view to_string(Split s);

struct ImageClass {
  std::string name;
  std::size_t count = 0;             // number of images
  std::vector<std::uint8_t> pixels;  // count * H * W * C bytes, image-major
};

// Immutable after construction; freely shared between samplers.
struct ClassDataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  Split split = Split::train;
  std::vector<ImageClass> classes;

  std::size_t image_bytes() const { return height * width * channels; }
  std::span<const std::uint8_t> image(std::size_t cls, std::size_t idx) const;
};

// Row-major [rows, cols] inputs with either class labels or regression targets.
struct Batch {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> inputs;
  std::vector<int> labels;
  std::vector<double> targets;

  bool regression() const { return !targets.empty(); }
};

struct Episode {
  Batch support;
  Batch query;
  std::size_t ways = 0;
  std::size_t shots = 0;
  std::size_t queries = 0;
  // (class index, image index) of every support/query row; classification only.
  std::vector<std::pair<std::size_t, std::size_t>> support_ids;
  std::vector<std::pair<std::size_t, std::size_t>> query_ids;
  // Sinusoid parameters; regression only.
  double amplitude = 0.0;
  double phase = 0.0;
};

// N classes without replacement, k + q distinct images per class (first k to
// the support set), labels 0..N-1 assigned in draw order, pixels scaled to [0, 1].
Episode sample_episode(const ClassDataset& ds, std::size_t ways, std::size_t shots, std::size_t queries,
                       RngState& rng);

inline constexpr double kSinusoidAmplitudeMin = 0.1;
inline constexpr double kSinusoidAmplitudeMax = 5.0;
inline constexpr double kSinusoidPhaseMax = 3.14159265358979323846;
inline constexpr double kSinusoidInputBound = 5.0;

// y = A sin(x + b), A ~ U[0.1, 5], b ~ U[0, pi], x ~ U[-5, 5].
Episode sinusoid_task(RngState& rng, std::size_t shots, std::size_t queries);

// Rotates an image 90 degrees clockwise: (r, c) -> (c, H - 1 - r). Square, single channel.
std::vector<std::uint8_t> rotate90(std::span<const std::uint8_t> image, std::size_t side);

// Every class spawns four classes (0, 90, 180, 270 degrees clockwise).
ClassDataset rotate_augment(const ClassDataset& ds);

struct SyntheticOptions {
  // Coordinates carrying the class means; empty means all of them. Every
  // other coordinate is background with noise of std `background_noise`.
  std::vector<std::size_t> informative;
  double background_noise = 1.0;
  // Width (pixels) of the Gaussian blur applied to each class mean before
  // normalisation; square images only, 0 = white means.
  double smoothness = 0.0;
};

// Gaussian blobs: unit-variance noise around class means of norm `margin`
// whose pairwise distances are at least `margin`. Features are quantised to
// bytes as clamp(round(128 + 16 x)). Square dimensions become H = W = sqrt(D).
ClassDataset synthetic_classification(RngState& rng, std::size_t n_classes, std::size_t per_class, std::size_t dim,
                                      double margin, const SyntheticOptions& options = {});

// `count` distinct coordinates out of `dim`, sorted.
std::vector<std::size_t> choose_coordinates(RngState& rng, std::size_t dim, std::size_t count);

inline constexpr double kSyntheticByteScale = 16.0;

// MTDS container: "MTDS", u32 version, u32 H, W, C, u32 class count, then per
// class u16 name length + UTF-8 name, u32 image count, raw pixel bytes.
// Integers are little-endian.
inline constexpr std::uint32_t kMtdsVersion = 1;

void save_mtds(const ClassDataset& ds, const std::filesystem::path& path);
ClassDataset load_mtds(const std::filesystem::path& path, Split split = Split::train);
ClassDataset parse_mtds(std::span<const std::uint8_t> bytes, Split split = Split::train);
std::vector<std::uint8_t> serialize_mtds(const ClassDataset& ds);

}  // namespace mtlab::tasks
