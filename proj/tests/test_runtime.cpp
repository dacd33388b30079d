// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <fstream>
#include <random>

#include "pushgnn/runtime.hpp"
#include "test_util.hpp"

using namespace pushgnn;
using testutil::TempDir;

namespace {

ModelWeights identity_model(ModelKind kind, std::uint32_t d, float eps = 0.0f) {
  ModelWeights w;
  w.kind = kind;
  w.gin_epsilon = eps;
  w.layers.push_back(testutil::identity_layer(d));
  return w;
}

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return Errc::io;
}

PipelineConfig small_config() {
  PipelineConfig c;
  c.chunk_budget = 2048;
  c.graduation_buffer = 1024;
  c.partitions = 3;
  c.spill_buffer = 4096;
  c.queue_capacity = 2;
  return c;
}

}  // namespace

TEST_CASE("six-vertex example end to end") {
  TempDir d;
  const GraphCSR g = testutil::fig2_graph();
  write_csr(g, d / "g");
  write_dense(d / "g" / kFeaturesDir, testutil::id_features(6, 1), DType::f32, 2);
  PipelineConfig cfg = small_config();
  cfg.chunk_budget = 8;  // two rows per chunk

  SECTION("sum") {
    const RunReport r = run_inference(d / "g", identity_model(ModelKind::gin, 1, -1.0f), cfg, d / "out");
    const DenseMatrix m = load_dense(resolve_output_dir(d / "out"));
    CHECK(m.values == std::vector<float>{0, 4, 0, 6, 0, 0});
    CHECK(r.layers[0].metrics.chunks == 3);
  }
  SECTION("mean") {
    run_inference(d / "g", identity_model(ModelKind::gcn, 1), cfg, d / "out");
    const DenseMatrix m = load_dense(resolve_output_dir(d / "out"));
    CHECK(m.values == std::vector<float>{0, 2, 0, 2, 0, 0});
  }
  SECTION("one hot slot") {
    cfg.hot.bytes = 4;
    const RunReport r = run_inference(d / "g", identity_model(ModelKind::gin, 1, -1.0f), cfg, d / "out");
    CHECK(r.layers[0].metrics.slot_count == 1);
    CHECK(r.layers[0].metrics.reloads >= 1);
    CHECK(load_dense(resolve_output_dir(d / "out")).values == std::vector<float>{0, 4, 0, 6, 0, 0});
  }
}

TEST_CASE("pipeline output equals the gather oracle bit for bit") {
  std::mt19937_64 rng(2024);
  const EvictionKind policies[] = {EvictionKind::min_pending, EvictionKind::lru, EvictionKind::random};
  const ModelKind kinds[] = {ModelKind::gcn, ModelKind::sage, ModelKind::gin};
  for (int trial = 0; trial < 18; ++trial) {
    TempDir d;
    const std::uint64_t n = 1 + rng() % 600;
    const GraphCSR g = testutil::random_graph(n, rng() % (8 * n), rng());
    const std::uint32_t fdim = 1 + rng() % 12;
    const DType dt = trial % 4 == 3 ? DType::f16 : DType::f32;
    testutil::write_dataset(d / "g", g, fdim, rng(), 1 + rng() % 4, dt);
    const ModelKind kind = kinds[trial % 3];
    const std::uint32_t dims[] = {fdim, 1 + static_cast<std::uint32_t>(rng() % 10), 1 + static_cast<std::uint32_t>(rng() % 6)};
    const ModelWeights w = random_weights(kind, dims, rng(), kind == ModelKind::gin ? 0.3f : 0.0f);

    PipelineConfig cfg;
    cfg.chunk_budget = 1 + rng() % 4096;
    cfg.hot.fraction = 0.02 + 0.5 * static_cast<double>(rng() % 100) / 100.0;
    cfg.graduation_buffer = 1 + rng() % 2048;
    cfg.partitions = 1 + rng() % 5;
    cfg.spill_buffer = 1 + rng() % 8192;
    cfg.queue_capacity = 1 + rng() % 4;
    cfg.eviction = policies[(trial / 3) % 3];
    cfg.seed = rng();
    cfg.evict_batch = rng() % 3;
    cfg.io = trial % 2 == 0 ? IoMode::direct : IoMode::buffered;
    cfg.backend = trial % 2 == 0 ? "blocked" : "reference";

    const RunReport r = run_inference(d / "g", w, cfg, d / "out");
    REQUIRE(r.layers.size() == 2);
    for (const auto& l : r.layers) {
      CHECK(l.delivered_once);
      CHECK(l.metrics.rows_delivered == n);
      CHECK(l.metrics.graduations == n);
      CHECK(l.metrics.illegal_transitions == 0);
      CHECK(l.metrics.peak_hot <= l.metrics.slot_count);
      CHECK(l.chunk_queue_high_water <= cfg.queue_capacity);
      CHECK(l.write_queue_high_water <= cfg.queue_capacity);
    }
    const DenseMatrix got = load_dense(resolve_output_dir(d / "out"));
    const DenseMatrix want = oracle_forward(g, load_dense(d / "g" / kFeaturesDir), w);
    REQUIRE(got.values.size() == want.values.size());
    CHECK(std::memcmp(got.values.data(), want.values.data(), got.values.size() * 4) == 0);
    // And within tolerance of the double-precision oracle.
    const DenseMatrix ref = oracle_inference(d / "g", w, {.arithmetic = OracleArithmetic::f64});
    CHECK(compare_matrices(ref, got).mean_rel <= 1e-5);
  }
}

TEST_CASE("repeated runs are identical") {
  TempDir d;
  const GraphCSR g = testutil::random_graph(800, 5000, 1);
  testutil::write_dataset(d / "g", g, 5, 1);
  const std::uint32_t dims[] = {5, 4, 3};
  const ModelWeights w = random_weights(ModelKind::sage, dims, 9);
  PipelineConfig cfg = small_config();
  cfg.hot.fraction = 0.05;
  cfg.eviction = EvictionKind::random;
  cfg.seed = 4;
  const RunReport a = run_inference(d / "g", w, cfg, d / "a");
  const RunReport b = run_inference(d / "g", w, cfg, d / "b");
  CHECK(load_dense(resolve_output_dir(d / "a")).values == load_dense(resolve_output_dir(d / "b")).values);
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK(a.layers[l].metrics.reloads == b.layers[l].metrics.reloads);
    CHECK(a.layers[l].metrics.evictions == b.layers[l].metrics.evictions);
  }
}

TEST_CASE("intermediate layers can be discarded") {
  TempDir d;
  testutil::write_dataset(d / "g", testutil::random_graph(100, 400, 2), 4, 2);
  const std::uint32_t dims[] = {4, 4, 4, 2};
  const ModelWeights w = random_weights(ModelKind::gcn, dims, 1);
  PipelineConfig cfg = small_config();
  cfg.discard_intermediate = true;
  const RunReport r = run_inference(d / "g", w, cfg, d / "out");
  CHECK_FALSE(fs::exists(layer_dir(d / "out", 0)));
  CHECK_FALSE(fs::exists(layer_dir(d / "out", 1)));
  CHECK(r.final_dir == layer_dir(d / "out", 2));
  CHECK(resolve_output_dir(d / "out") == layer_dir(d / "out", 2));
  CHECK(load_dense(resolve_output_dir(d / "out")).dim == 2);

  cfg.discard_intermediate = false;
  run_inference(d / "g", w, cfg, d / "keep");
  CHECK(fs::exists(layer_dir(d / "keep", 0)));
  CHECK(fs::exists(layer_dir(d / "keep", 1)));
}

TEST_CASE("metrics csv has a header and one row per layer") {
  TempDir d;
  testutil::write_dataset(d / "g", testutil::random_graph(50, 200, 3), 3, 3);
  const std::uint32_t dims[] = {3, 3, 3};
  const RunReport r = run_inference(d / "g", random_weights(ModelKind::gin, dims, 2), small_config(), d / "out");
  write_metrics_csv(r, d / "m.csv");
  std::ifstream in(d / "m.csv");
  std::vector<std::string> lines;
  for (std::string s; std::getline(in, s);) lines.push_back(s);
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] == metrics_csv_header());
  CHECK(lines[1].rfind("0,", 0) == 0);
  CHECK(lines[2].rfind("1,", 0) == 0);
  CHECK(r.total(&LayerMetrics::messages) == 2 * (r.layers[0].metrics.edge_messages + 50));
}

TEST_CASE("a starved vertex tears the pipeline down with the root cause") {
  TempDir d;
  const GraphCSR g = testutil::random_graph(400, 2000, 6);
  testutil::write_dataset(d / "g", g, 4, 6);
  // Claim an extra in-edge on a vertex; the messages never arrive.
  GraphCSR bad = g;
  bad.in_degrees[17] += 1;
  {
    File f = File::open_rw(d / "g" / kInDegreeFile);
    f.write_at(std::as_bytes(std::span<const std::uint32_t>(bad.in_degrees)), kAlignment);
  }
  PipelineConfig cfg = small_config();
  cfg.queue_capacity = 1;
  const std::uint32_t dims[] = {4, 2};
  try {
    run_inference(d / "g", random_weights(ModelKind::gcn, dims, 1), cfg, d / "out");
    FAIL("expected missing messages");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::missing_messages);
    CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("17("));
  }
  CHECK_FALSE(fs::exists(layer_dir(d / "out", 0)));
  CHECK_FALSE(fs::exists(d / "out" / kFinalLayerFile));
}

TEST_CASE("a damaged spill surfaces as a read error, not a cancellation") {
  TempDir d;
  testutil::write_dataset(d / "g", testutil::random_graph(3000, 9000, 7), 8, 7, 2);
  // Cut the second partition's spill short: headers still parse, rows do not.
  const fs::path spill = partition_dir(d / "g" / kFeaturesDir, 1) / "spill_0";
  fs::resize_file(spill, fs::file_size(spill) - 3 * kAlignment);
  const std::uint32_t dims[] = {8, 4};
  PipelineConfig cfg = small_config();
  cfg.queue_capacity = 1;
  const Errc c = code_of([&] { run_inference(d / "g", random_weights(ModelKind::sage, dims, 1), cfg, d / "out"); });
  CHECK(c != Errc::cancelled);
  CHECK((c == Errc::truncated || c == Errc::io));
}

TEST_CASE("configuration and shape errors") {
  TempDir d;
  testutil::write_dataset(d / "g", testutil::random_graph(20, 40, 1), 4, 1);
  const std::uint32_t ok[] = {4, 2};
  const std::uint32_t wrong[] = {5, 2};
  PipelineConfig cfg = small_config();
  CHECK(code_of([&] { run_inference(d / "g", random_weights(ModelKind::gcn, wrong, 1), cfg, d / "o"); }) ==
        Errc::dim_mismatch);
  cfg.queue_capacity = 0;
  CHECK(code_of([&] { run_inference(d / "g", random_weights(ModelKind::gcn, ok, 1), cfg, d / "o"); }) == Errc::config);
  cfg = small_config();
  cfg.hot.fraction = 1.5;
  CHECK(code_of([&] { run_inference(d / "g", random_weights(ModelKind::gcn, ok, 1), cfg, d / "o"); }) == Errc::config);
  cfg = small_config();
  cfg.backend = "gpu";
  CHECK(code_of([&] { run_inference(d / "g", random_weights(ModelKind::gcn, ok, 1), cfg, d / "o"); }) == Errc::config);
}

TEST_CASE("hot budget conversions") {
  CHECK(HotBudget{1024, 0}.slots(1000, 8) == 32);
  CHECK(HotBudget{1 << 20, 0}.slots(1000, 8) == 1000);
  CHECK(HotBudget{0, 0.1}.slots(1000, 8) == 100);
  CHECK(HotBudget{0, 0.0001}.slots(1000, 8) == 1);
  CHECK(HotBudget{}.slots(1000, 8) == 1000);
  CHECK(HotBudget{}.slots(0, 8) == 1);
}

TEST_CASE("first error keeps the root cause") {
  auto err = [](Errc c) { return std::make_exception_ptr(Error(c, errc_name(c).data())); };
  auto code = [&](const FirstError& f) { return code_of([&] { f.rethrow_if_any(); }); };
  {
    FirstError f;
    CHECK_FALSE(f.has());
    f.record(err(Errc::cancelled));
    f.record(err(Errc::io));
    CHECK(code(f) == Errc::io);
  }
  {
    FirstError f;
    f.record(err(Errc::truncated));
    f.record(err(Errc::cancelled));
    f.record(err(Errc::io));
    CHECK(code(f) == Errc::truncated);
  }
}

TEST_CASE("compare reports") {
  DenseMatrix a{3, 2, {1, 0, 0, 1, 5, 5.5f}};
  CHECK(compare_matrices(a, a).within(0.0));
  DenseMatrix b{3, 2, {0, 1, 5, 5.5f, 1, 0}};
  const std::vector<VertexId> idx{2, 0, 1};
  CHECK(compare_matrices(a, b, idx).max_abs == 0.0);
  const CompareReport r = compare_matrices(a, b);
  CHECK(r.argmax_mismatches == 2);
  CHECK(r.max_abs == Catch::Approx(5.5));
  DenseMatrix c{3, 1, {0, 0, 0}};
  CHECK(code_of([&] { (void)compare_matrices(a, c); }) == Errc::shape_mismatch);
}

TEST_CASE("oracle refuses graphs over its memory limit") {
  TempDir d;
  testutil::write_dataset(d / "g", testutil::random_graph(100, 300, 1), 4, 1);
  const std::uint32_t dims[] = {4, 2};
  const ModelWeights w = random_weights(ModelKind::gcn, dims, 1);
  CHECK(code_of([&] { (void)oracle_inference(d / "g", w, {.max_bytes = 1024}); }) == Errc::scale_guard);
  CHECK(oracle_inference(d / "g", w).rows == 100);
}
