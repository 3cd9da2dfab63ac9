#include "mtlab/analysis.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "mtlab/bytes.hpp"
#include "mtlab/error.hpp"

namespace mtlab::analysis {

namespace {

std::string block_name(const nn::ParamTensor& t) {
  const auto dot = t.name.find('.');
  return dot == std::string::npos ? t.name : t.name.substr(0, dot);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::vector<GradNormRecord> record_task_grads(const nn::ParamSet& params, std::span<const double> per_block,
                                              std::int64_t iteration) {
  if (per_block.size() != params.num_blocks()) {
    throw DimensionError("expected " + std::to_string(params.num_blocks()) + " per-layer gradient values, got " +
                         std::to_string(per_block.size()));
  }
  std::vector<GradNormRecord> out;
  for (std::size_t b = 0; b + 1 < params.num_blocks(); ++b) {
    out.push_back({iteration, block_name(params.tensors[params.weight_of_block(b)]), per_block[b]});
  }
  return out;
}

std::vector<SparsityRecord> sparsity_report(const nn::ParamSet& params, std::int64_t iteration) {
  std::vector<SparsityRecord> out;
  for (const auto& t : params.tensors) {
    if (!t.prunable()) continue;
    const auto zeros = std::count(t.mask.begin(), t.mask.end(), 0.0);
    out.push_back({iteration, block_name(t), static_cast<double>(zeros) / static_cast<double>(t.mask.size())});
  }
  return out;
}

std::vector<CsvRow> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open CSV " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw std::runtime_error("bad CSV header in " + path.string());
  std::vector<CsvRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string it, layer, metric, value;
    if (!std::getline(ss, it, ',') || !std::getline(ss, layer, ',') || !std::getline(ss, metric, ',') ||
        !std::getline(ss, value)) {
      throw std::runtime_error("malformed CSV row in " + path.string() + ": " + line);
    }
    CsvRow r;
    r.iteration = std::stoll(it);
    r.layer = layer;
    r.metric = metric;
    r.value = std::stod(value);
    rows.push_back(std::move(r));
  }
  return rows;
}

CsvLog::CsvLog(const std::filesystem::path& path, std::optional<std::int64_t> keep_upto) {
  std::vector<CsvRow> kept;
  if (keep_upto && std::filesystem::exists(path)) {
    for (auto& r : read_csv(path))
      if (r.iteration <= *keep_upto) kept.push_back(std::move(r));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::trunc);
  if (!out_) throw std::runtime_error("cannot write CSV " + path.string());
  out_ << kCsvHeader << '\n';
  for (const auto& r : kept) write(r.iteration, r.layer, r.metric, r.value);
}

void CsvLog::write(std::int64_t iteration, const std::string& layer, const std::string& metric, double value) {
  if (!out_.is_open()) throw std::logic_error("CSV log is not open");
  if (layer.find(',') != std::string::npos || metric.find(',') != std::string::npos) {
    throw std::invalid_argument("CSV keys must not contain commas");
  }
  auto [it, fresh] = last_.try_emplace({layer, metric}, iteration);
  if (!fresh) {
    if (iteration <= it->second) {
      throw std::logic_error("CSV row for " + layer + "/" + metric + " at iteration " + std::to_string(iteration) +
                             " does not follow iteration " + std::to_string(it->second));
    }
    it->second = iteration;
  }
  out_ << iteration << ',' << layer << ',' << metric << ',' << format_double(value) << '\n';
}

void CsvLog::write(const std::vector<GradNormRecord>& records) {
  for (const auto& r : records) write(r.iteration, r.layer, "task_grad_mean_abs", r.mean_abs_grad);
}

void CsvLog::write(const std::vector<SparsityRecord>& records) {
  for (const auto& r : records) write(r.iteration, r.layer, "zero_fraction", r.zero_fraction);
}

void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> bits) {
  if (bits.size() != width * height) throw DimensionError("PGM pixel count does not match width x height");
  const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n1\n";
  std::vector<std::uint8_t> data(header.begin(), header.end());
  for (auto b : bits) {
    if (b > 1) throw std::invalid_argument("binary PGM pixels must be 0 or 1");
    data.push_back(b);
  }
  bytes::write_file(path, data);
}

PgmImage read_pgm(const std::filesystem::path& path) {
  const auto data = bytes::read_file(path);
  std::size_t pos = 0;
  auto token = [&]() -> std::string {
    while (pos < data.size() && std::isspace(data[pos])) ++pos;
    std::string t;
    while (pos < data.size() && !std::isspace(data[pos])) t.push_back(static_cast<char>(data[pos++]));
    if (t.empty()) throw FormatError("truncated PGM header", "pgm header", pos);
    return t;
  };
  if (token() != "P5") throw FormatError("not a binary PGM", "pgm header", 0);
  PgmImage img;
  img.width = std::stoul(token());
  img.height = std::stoul(token());
  img.maxval = static_cast<unsigned>(std::stoul(token()));
  ++pos;  // single whitespace byte before the raster
  if (img.maxval == 0 || img.maxval > 255) throw FormatError("unsupported maxval", "pgm header", pos);
  if (data.size() < pos || data.size() - pos != img.width * img.height) {
    throw FormatError("raster size does not match header", "pgm raster", pos);
  }
  img.pixels.assign(data.begin() + static_cast<std::ptrdiff_t>(pos), data.end());
  return img;
}

std::vector<std::filesystem::path> export_mask_pgm(const nn::ParamSet& params, const std::string& layer,
                                                   const std::filesystem::path& out_dir, std::int64_t iteration) {
  const nn::ParamTensor* w = nullptr;
  for (const auto& t : params.tensors) {
    if (t.role == nn::TensorRole::weight && (t.name == layer || block_name(t) == layer)) w = &t;
  }
  if (w == nullptr) throw ConfigError("no linear layer named '" + layer + "'");
  if (!w->prunable()) throw ConfigError("layer '" + layer + "' carries no mask");
  const std::size_t in = w->shape[0];
  const std::size_t out = w->shape[1];
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(in))));
  if (side * side != in) {
    throw DimensionError("layer '" + layer + "' input dim " + std::to_string(in) + " is not a square image");
  }
  std::vector<std::filesystem::path> paths;
  std::vector<std::uint8_t> bits(in);
  const std::string prefix = block_name(*w);
  for (std::size_t j = 0; j < out; ++j) {
    for (std::size_t i = 0; i < in; ++i) bits[i] = w->mask[i * out + j] != 0.0 ? 1 : 0;
    auto p = out_dir / (prefix + "_unit" + std::to_string(j) + "_iter" + std::to_string(iteration) + ".pgm");
    write_pgm(p, side, side, bits);
    paths.push_back(std::move(p));
  }
  return paths;
}

}  // namespace mtlab::analysis
