#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mtlab/analysis.hpp"
#include "mtlab/error.hpp"
#include "mtlab/meta.hpp"
#include "test_util.hpp"

using namespace mtlab;
using namespace mtlab::analysis;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mtlab_analysis_" + name);
  fs::remove_all(p);
  return p;
}

nn::ModelConfig toy(bool bn = true) {
  nn::ModelConfig c;
  c.arch = nn::Architecture::custom;
  c.input_dim = 4;
  c.hidden = {6, 5};
  c.ways = 3;
  c.use_batchnorm = bn;
  return c;
}

tasks::Episode toy_episode(RngState& rng, std::size_t cols) {
  tasks::Episode e;
  for (auto* b : {&e.support, &e.query}) {
    b->rows = 6;
    b->cols = cols;
    b->inputs = testutil::uniform_vec(rng, 6 * cols, 0.0, 1.0);
    b->labels = {0, 1, 2, 0, 1, 2};
  }
  return e;
}

}  // namespace

TEST(Sparsity, ZeroAtZeroInitialSparsity) {
  RngState rng(1);
  const auto ps = nn::build_mlp(toy(), rng);
  const auto rep = sparsity_report(ps, 0);
  ASSERT_EQ(rep.size(), 2u);  // output layer is exempt
  for (const auto& r : rep) EXPECT_EQ(r.zero_fraction, 0.0);
  EXPECT_EQ(rep[0].layer, "fc1");
  EXPECT_EQ(rep[1].layer, "fc2");
}

TEST(Sparsity, HalfOfHundredIsExact) {
  RngState rng(2);
  nn::ModelConfig c = toy();
  c.input_dim = 10;
  c.hidden = {10};
  auto ps = nn::build_mlp(c, rng);
  meta::calculate_masks(ps, meta::compute_thresholds(ps, 0.5));
  const auto rep = sparsity_report(ps, 0);
  ASSERT_EQ(rep.size(), 1u);
  EXPECT_EQ(rep[0].zero_fraction, 0.5);
}

TEST(Sparsity, ExemptTensorsNeverReported) {
  RngState rng(3);
  const auto ps = nn::build_mlp(toy(), rng);
  for (const auto& r : sparsity_report(ps, 7)) {
    EXPECT_TRUE(ps.at(r.layer + ".weight").prunable());
    EXPECT_EQ(r.iteration, 7);
  }
}

// Recorded first-step task gradients equal mean |dL/dW| computed by finite
// differences of the support loss, for every feature-extractor layer,
// including layers whose inner learning rate is zero.
TEST(TaskGrads, MatchFiniteDifferences) {
  RngState rng(4);
  const auto ps = nn::build_mlp(toy(), rng);
  const auto ep = toy_episode(rng, 4);
  meta::MetaConfig c;
  c.method = meta::Method::anil;
  c.inner_lr = 0.4;
  const auto plan = meta::resolve_layer_modes(c, ps.num_blocks());
  const std::vector<tasks::Episode> eps{ep};
  const auto mg = meta::meta_gradient(ps, eps, c, plan, {true, 1});
  const auto recs = record_task_grads(ps, mg.task_grad_mean_abs, 3);
  ASSERT_EQ(recs.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l) {
    const std::size_t wi = ps.weight_of_block(l);
    const auto numeric = ad::finite_diff_grad(
        [&](std::span<const double> p) {
          auto local = ps;
          local.tensors[wi].value.assign(p.begin(), p.end());
          ad::Graph g;
          const auto b = nn::bind(local, g, false);
          return meta::task_loss(nn::forward(local, b, false, meta::batch_input(g, ep.support)), ep.support).item();
        },
        ps.tensors[wi].value, 1e-5);
    double mean_abs = 0.0;
    for (double v : numeric) mean_abs += std::abs(v);
    mean_abs /= static_cast<double>(numeric.size());
    EXPECT_GT(recs[l].mean_abs_grad, 0.0);
    EXPECT_LT(std::abs(recs[l].mean_abs_grad - mean_abs) / mean_abs, 1e-4);
    EXPECT_EQ(recs[l].layer, "fc" + std::to_string(l + 1));
    EXPECT_EQ(recs[l].iteration, 3);
  }
}

TEST(TaskGrads, ZeroNetworkOnZeroInputIsZero) {
  RngState rng(5);
  auto ps = nn::build_mlp(toy(false), rng);
  for (auto& t : ps.tensors) std::fill(t.value.begin(), t.value.end(), 0.0);
  auto ep = toy_episode(rng, 4);
  std::fill(ep.support.inputs.begin(), ep.support.inputs.end(), 0.0);
  meta::MetaConfig c;
  c.method = meta::Method::maml;
  const auto plan = meta::resolve_layer_modes(c, ps.num_blocks());
  const std::vector<tasks::Episode> eps{ep};
  const auto mg = meta::meta_gradient(ps, eps, c, plan, {true, 1});
  for (const auto& r : record_task_grads(ps, mg.task_grad_mean_abs, 0)) EXPECT_EQ(r.mean_abs_grad, 0.0);
}

TEST(Csv, RoundTripAndOrdering) {
  const auto dir = scratch("csv");
  const auto path = dir / "m.csv";
  {
    CsvLog log(path);
    log.write(0, "fc1", "zero_fraction", 0.1);
    log.write(0, "all", "meta_loss", 1.0 / 3.0);
    log.write(100, "fc1", "zero_fraction", 0.25);
    EXPECT_THROW(log.write(100, "fc1", "zero_fraction", 0.3), std::logic_error);
    EXPECT_THROW(log.write(50, "fc1", "zero_fraction", 0.3), std::logic_error);
    log.write(50, "fc2", "zero_fraction", 0.3);
    EXPECT_THROW(log.write(60, "a,b", "x", 0.0), std::invalid_argument);
  }
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, kCsvHeader);
  const auto rows = read_csv(path);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[1].value, 1.0 / 3.0);  // %.17g keeps doubles exact
  EXPECT_EQ(rows[2].iteration, 100);
  EXPECT_EQ(rows[3].layer, "fc2");
  fs::remove_all(dir);
}

TEST(Csv, ResumeKeepsEarlierRows) {
  const auto dir = scratch("resume");
  const auto path = dir / "m.csv";
  {
    CsvLog log(path);
    for (int t = 0; t < 5; ++t) log.write(t * 10, "all", "meta_loss", t);
  }
  {
    CsvLog log(path, 20);
    EXPECT_THROW(log.write(20, "all", "meta_loss", 9.0), std::logic_error);
    log.write(30, "all", "meta_loss", 9.0);
  }
  const auto rows = read_csv(path);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows.back().value, 9.0);
  fs::remove_all(dir);
}

TEST(Pgm, HeaderAndRoundTrip) {
  const auto dir = scratch("pgm");
  fs::create_directories(dir);
  std::vector<std::uint8_t> bits(28 * 28);
  for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = (i * 7) % 3 == 0;
  write_pgm(dir / "a.pgm", 28, 28, bits);
  std::ifstream in(dir / "a.pgm", std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(content.substr(0, 11), "P5\n28 28\n1\n");
  EXPECT_EQ(content.size(), 11u + 784u);
  const auto img = read_pgm(dir / "a.pgm");
  EXPECT_EQ(img.width, 28u);
  EXPECT_EQ(img.maxval, 1u);
  EXPECT_EQ(img.pixels, bits);
  std::ofstream(dir / "bad.pgm") << "P2\n2 2\n1\n0 1 1 0";
  EXPECT_THROW(read_pgm(dir / "bad.pgm"), FormatError);
  fs::remove_all(dir);
}

TEST(Pgm, ExportMasks) {
  const auto dir = scratch("export");
  RngState rng(6);
  nn::ModelConfig c = toy();
  c.input_dim = 784;
  c.hidden = {3, 2};
  auto ps = nn::build_mlp(c, rng);
  auto files = export_mask_pgm(ps, "fc1", dir, 0);
  ASSERT_EQ(files.size(), 3u);
  EXPECT_EQ(files[1].filename(), "fc1_unit1_iter0.pgm");
  for (const auto& f : files) {
    const auto img = read_pgm(f);
    EXPECT_EQ(img.pixels, std::vector<std::uint8_t>(784, 1));  // all-ones mask: all white
  }
  // Mask off the first image row (inputs 0..27) for every unit.
  auto& m = ps.at("fc1.weight").mask;
  for (std::size_t i = 0; i < 28; ++i)
    for (std::size_t j = 0; j < 3; ++j) m[i * 3 + j] = 0.0;
  m[100 * 3 + 2] = 0.0;
  files = export_mask_pgm(ps, "fc1.weight", dir, 5);
  for (std::size_t j = 0; j < 3; ++j) {
    const auto img = read_pgm(files[j]);
    for (std::size_t x = 0; x < 28; ++x) EXPECT_EQ(img.pixels[x], 0);
    EXPECT_EQ(img.pixels[100], j == 2 ? 0 : 1);
    for (std::size_t i = 0; i < 784; ++i) EXPECT_EQ(img.pixels[i], m[i * 3 + j]);
  }
  EXPECT_THROW(export_mask_pgm(ps, "fc2", dir, 0), DimensionError);
  EXPECT_THROW(export_mask_pgm(ps, "fc3", dir, 0), ConfigError);
  fs::remove_all(dir);
}
