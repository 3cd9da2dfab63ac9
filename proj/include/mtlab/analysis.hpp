#pragma once

// Training diagnostics: per-layer task-gradient magnitudes, mask sparsity,
// the CSV log they are written to, and binary PGM dumps of first-layer masks.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mtlab/nn.hpp"

namespace mtlab::analysis {

struct GradNormRecord {
  std::int64_t iteration = 0;
  std::string layer;
  double mean_abs_grad = 0.0;
};

struct SparsityRecord {
  std::int64_t iteration = 0;
  std::string layer;
  double zero_fraction = 0.0;
};

// One record per feature-extractor layer (every linear layer but the last),
// from per-block mean |task gradient| values.
std::vector<GradNormRecord> record_task_grads(const nn::ParamSet& params, std::span<const double> per_block,
                                              std::int64_t iteration);

// Exact zero fraction of every prunable weight mask.
std::vector<SparsityRecord> sparsity_report(const nn::ParamSet& params, std::int64_t iteration);

struct CsvRow {
  std::int64_t iteration = 0;
  std::string layer;
  std::string metric;
  double value = 0.0;
};

inline constexpr const char* kCsvHeader = "iteration,layer,metric,value";

std::vector<CsvRow> read_csv(const std::filesystem::path& path);

// Append-only metric log. Rows must arrive in strictly increasing iteration
// order per (layer, metric); anything else throws std::logic_error.
class CsvLog {
 public:
  CsvLog() = default;
  // Starts a fresh file, or when keep_upto is set, keeps the existing rows
  // with iteration <= keep_upto (used when resuming) and continues after them.
  explicit CsvLog(const std::filesystem::path& path, std::optional<std::int64_t> keep_upto = std::nullopt);

  void write(std::int64_t iteration, const std::string& layer, const std::string& metric, double value);
  void write(const std::vector<GradNormRecord>& records);
  void write(const std::vector<SparsityRecord>& records);
  void flush() { out_.flush(); }
  bool is_open() const { return out_.is_open(); }

 private:
  std::ofstream out_;
  std::map<std::pair<std::string, std::string>, std::int64_t> last_;
};

struct PgmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  unsigned maxval = 0;
  std::vector<std::uint8_t> pixels;
};

// Binary P5 with maxval 1.
void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> bits);
PgmImage read_pgm(const std::filesystem::path& path);

// Writes `<layer>_unit<j>_iter<t>.pgm` for every output unit j of a prunable
// linear layer whose input dimension is a perfect square. `layer` is the
// weight tensor's name or its block prefix (e.g. "fc1").
std::vector<std::filesystem::path> export_mask_pgm(const nn::ParamSet& params, const std::string& layer,
                                                   const std::filesystem::path& out_dir, std::int64_t iteration);

}  // namespace mtlab::analysis
