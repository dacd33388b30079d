// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <random>

#include "pushgnn/orchestrator.hpp"
#include "test_util.hpp"

using namespace pushgnn;
using testutil::TempDir;

namespace {

Chunk make_chunk(const GraphCSR& g, const DenseMatrix& h, IdRange r) {
  Chunk c;
  c.range = r;
  c.dim = h.dim;
  c.offsets.push_back(0);
  for (VertexId v = r.begin; v < r.end; ++v) {
    for (VertexId w : g.out_neighbors(v)) c.neighbors.push_back(w);
    c.offsets.push_back(c.neighbors.size());
    c.features.insert(c.features.end(), h.row(v).begin(), h.row(v).end());
  }
  return c;
}

struct Collect final : GraduationSink {
  std::map<VertexId, std::vector<float>> out;
  std::vector<VertexId> order;
  void graduate(VertexId v, std::span<const float> a) override {
    REQUIRE(out.emplace(v, std::vector<float>(a.begin(), a.end())).second);
    order.push_back(v);
  }
};

struct LayerRun {
  Collect sink;
  LayerMetrics metrics;
  std::vector<std::size_t> completed_after_chunk;  // graduations seen after each chunk
  std::uint64_t cold_to_hot = 0;
  std::uint64_t hot_to_cold = 0;
};

struct RunOptions {
  std::uint32_t rows_per_chunk = 1;
  std::uint32_t slots = 0;  // 0: one per vertex
  EvictionKind policy = EvictionKind::min_pending;
  std::size_t batch = 1;
  float eps = 0.0f;
};

LayerRun run_layer_in_memory(const GraphCSR& g, const DenseMatrix& h, ModelKind kind, const RunOptions& o) {
  TempDir d{"orch"};
  LayerRun run;
  LayerContext ctx = init_layer(g.in_degrees, kind, 0, h.dim, o.eps);
  MemoryConfig mc;
  mc.slot_count = o.slots == 0 ? static_cast<std::uint32_t>(std::max<std::uint64_t>(1, g.num_vertices)) : o.slots;
  mc.slot_dim = ctx.agg_dim;
  mc.policy = o.policy;
  mc.evict_batch = o.batch;
  mc.seed = 5;
  mc.cold_path = d / "cold";
  MemoryManager mem(mc, ctx.pending, ctx.max_pending, nullptr);
  Orchestrator orch(ctx, mem, run.sink);
  for (VertexId b = 0; b < g.num_vertices; b += o.rows_per_chunk) {
    orch.process_chunk(make_chunk(g, h, {b, std::min<VertexId>(g.num_vertices, b + o.rows_per_chunk)}));
    run.completed_after_chunk.push_back(run.sink.order.size());
  }
  run.metrics = orch.finalize();
  run.cold_to_hot = ctx.states.count(VertexState::cold, VertexState::hot);
  run.hot_to_cold = ctx.states.count(VertexState::hot, VertexState::cold);
  return run;
}

/// Pull-style aggregate per destination: in-neighbors in ascending id, self
/// term at its own id position.
std::vector<std::vector<float>> gather_aggregates(const GraphCSR& g, const DenseMatrix& h, ModelKind kind, float eps) {
  const auto n = g.num_vertices;
  std::vector<std::vector<VertexId>> in(n);
  for (VertexId u = 0; u < n; ++u)
    for (VertexId v : g.out_neighbors(u)) in[v].push_back(u);
  const std::uint32_t d = h.dim;
  std::vector<std::vector<float>> out(n);
  for (VertexId v = 0; v < n; ++v) {
    std::vector<float> acc(kind == ModelKind::sage ? 2 * d : d, 0.0f);
    const float deg = static_cast<float>(std::max<std::size_t>(1, in[v].size()));
    bool self_done = kind != ModelKind::gin;
    auto add_self = [&] {
      for (std::uint32_t k = 0; k < d; ++k) acc[k] += (1.0f + eps) * h.row(v)[k];
      self_done = true;
    };
    for (VertexId u : in[v]) {
      if (!self_done && u >= v) add_self();
      for (std::uint32_t k = 0; k < d; ++k) acc[k] += kind == ModelKind::gin ? h.row(u)[k] : h.row(u)[k] / deg;
    }
    if (!self_done) add_self();
    if (kind == ModelKind::sage)
      for (std::uint32_t k = 0; k < d; ++k) acc[d + k] = h.row(v)[k];
    out[v] = std::move(acc);
  }
  return out;
}

}  // namespace

TEST_CASE("legal transitions") {
  using S = VertexState;
  const S all[] = {S::not_started, S::hot, S::cold, S::completed};
  int legal = 0;
  for (S a : all)
    for (S b : all) legal += legal_transition(a, b);
  CHECK(legal == 4);
  CHECK(legal_transition(S::not_started, S::hot));
  CHECK(legal_transition(S::hot, S::cold));
  CHECK(legal_transition(S::hot, S::completed));
  CHECK(legal_transition(S::cold, S::hot));

  StateTable t(2);
  t.transition(0, S::hot);
  CHECK_THROWS_AS(t.transition(0, S::not_started), Error);
  CHECK_THROWS_AS(t.transition(1, S::completed), Error);
  CHECK(t.illegal() == 2);
  CHECK(t[0] == S::hot);
}

TEST_CASE("init_layer pending counts") {
  const GraphCSR g = testutil::fig2_graph();
  const LayerContext gcn = init_layer(g.in_degrees, ModelKind::gcn, 0, 4);
  CHECK(gcn.pending == std::vector<std::uint32_t>{0, 2, 0, 3, 0, 0});
  CHECK(gcn.initial_pending_total == g.num_edges());
  CHECK(gcn.agg_dim == 4);

  const LayerContext sage = init_layer(g.in_degrees, ModelKind::sage, 0, 4);
  CHECK(sage.pending == std::vector<std::uint32_t>{1, 3, 1, 4, 1, 1});
  CHECK(sage.initial_pending_total == g.num_edges() + g.num_vertices);
  CHECK(sage.agg_dim == 8);

  const LayerContext gin = init_layer(g.in_degrees, ModelKind::gin, 0, 4);
  CHECK(gin.pending == sage.pending);
  CHECK(gin.agg_dim == 4);
}

TEST_CASE("slots_for_budget") {
  CHECK(slots_for_budget(1024, 8) == 32);
  CHECK_THROWS_AS(slots_for_budget(31, 8), Error);
}

TEST_CASE("make_message") {
  const std::vector<float> h{1, 2};
  CHECK(make_message(h, ModelKind::gcn, 4) == std::vector<float>{0.25f, 0.5f});
  CHECK(make_message(h, ModelKind::sage, 4) == std::vector<float>{0.25f, 0.5f});
  CHECK(make_message(h, ModelKind::gin, 4) == h);
}

TEST_CASE("six-vertex example with a sum aggregator") {
  // GIN with eps = -1 contributes a zero self term, leaving the plain sum.
  const GraphCSR g = testutil::fig2_graph();
  const DenseMatrix h = testutil::id_features(6, 1);
  RunOptions o;
  o.rows_per_chunk = 2;
  o.eps = -1.0f;
  const LayerRun r = run_layer_in_memory(g, h, ModelKind::gin, o);
  CHECK(r.sink.out.at(1) == std::vector<float>{4});
  CHECK(r.sink.out.at(3) == std::vector<float>{6});
  // Chunks are {0,1}, {2,3}, {4,5}: vertex 3 needs the third chunk.
  const auto pos3 = std::find(r.sink.order.begin(), r.sink.order.end(), VertexId{3}) - r.sink.order.begin();
  CHECK(static_cast<std::size_t>(pos3) >= r.completed_after_chunk[1]);
  CHECK(r.metrics.evictions == 0);
  CHECK(r.metrics.graduations == 6);
}

TEST_CASE("six-vertex example with one hot slot reloads and still matches") {
  const GraphCSR g = testutil::fig2_graph();
  const DenseMatrix h = testutil::id_features(6, 1);
  RunOptions o;
  o.rows_per_chunk = 2;
  o.slots = 1;
  o.eps = -1.0f;
  const LayerRun r = run_layer_in_memory(g, h, ModelKind::gin, o);
  CHECK(r.cold_to_hot >= 1);
  CHECK(r.hot_to_cold >= 1);
  CHECK(r.metrics.reloads >= 1);
  CHECK(r.sink.out.at(1) == std::vector<float>{4});
  CHECK(r.sink.out.at(3) == std::vector<float>{6});
  CHECK(r.metrics.peak_hot == 1);
}

TEST_CASE("six-vertex example under GCN") {
  const GraphCSR g = testutil::fig2_graph();
  const DenseMatrix h = testutil::id_features(6, 1);
  const LayerRun r = run_layer_in_memory(g, h, ModelKind::gcn, {});
  CHECK(r.sink.out.at(1)[0] == Catch::Approx(2.0));
  CHECK(r.sink.out.at(3)[0] == Catch::Approx(2.0));
  // Zero in-degree: empty mean, graduated on its own source chunk.
  for (VertexId v : {0, 2, 4, 5}) CHECK(r.sink.out.at(v) == std::vector<float>{0});
  CHECK(r.metrics.messages == g.num_edges());
  CHECK(r.metrics.evictions == 0);
}

TEST_CASE("zero in-degree GCN vertex graduates on its own chunk") {
  const GraphCSR g = csr_from_edges(4, {{1, 0}});
  const DenseMatrix h = testutil::id_features(4, 2);
  const LayerRun r = run_layer_in_memory(g, h, ModelKind::gcn, {});
  // Vertex 2 has no in-edges: done by the end of chunk 2.
  const auto pos = std::find(r.sink.order.begin(), r.sink.order.end(), VertexId{2}) - r.sink.order.begin();
  CHECK(static_cast<std::size_t>(pos) < r.completed_after_chunk[2]);
  CHECK(r.sink.out.at(0) == std::vector<float>{1, 1});
}

TEST_CASE("self-loop-only graph graduates every vertex within its chunk") {
  std::vector<std::pair<VertexId, VertexId>> e;
  for (VertexId v = 0; v < 10; ++v) e.emplace_back(v, v);
  const GraphCSR g = csr_from_edges(10, e);
  const DenseMatrix h = testutil::id_features(10, 3);
  for (auto kind : {ModelKind::gcn, ModelKind::sage, ModelKind::gin}) {
    RunOptions o;
    o.rows_per_chunk = 3;
    const LayerRun r = run_layer_in_memory(g, h, kind, o);
    CHECK(r.completed_after_chunk == std::vector<std::size_t>{3, 6, 9, 10});
  }
}

TEST_CASE("missing in-edge is reported with the starved vertex") {
  const GraphCSR g = testutil::fig2_graph();
  const DenseMatrix h = testutil::id_features(6, 1);
  auto in = g.in_degrees;
  in[3] += 1;  // claims an edge that never arrives
  TempDir d;
  LayerContext ctx = init_layer(in, ModelKind::gcn, 0, 1);
  MemoryConfig mc;
  mc.slot_count = 6;
  mc.slot_dim = 1;
  mc.cold_path = d / "cold";
  MemoryManager mem(mc, ctx.pending, ctx.max_pending, nullptr);
  Collect sink;
  Orchestrator orch(ctx, mem, sink);
  orch.process_chunk(make_chunk(g, h, {0, 6}));
  try {
    orch.finalize();
    FAIL("expected missing messages");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::missing_messages);
    CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring(" 3(pending 1)"));
  }
}

TEST_CASE("out-of-order chunk is rejected") {
  const GraphCSR g = testutil::fig2_graph();
  const DenseMatrix h = testutil::id_features(6, 1);
  TempDir d;
  LayerContext ctx = init_layer(g.in_degrees, ModelKind::gcn, 0, 1);
  MemoryConfig mc;
  mc.slot_count = 6;
  mc.slot_dim = 1;
  mc.cold_path = d / "cold";
  MemoryManager mem(mc, ctx.pending, ctx.max_pending, nullptr);
  Collect sink;
  Orchestrator orch(ctx, mem, sink);
  CHECK_THROWS_AS(orch.process_chunk(make_chunk(g, h, {2, 4})), Error);
}

TEST_CASE("span replay oracle") {
  const GraphCSR g = testutil::random_graph(120, 700, 8);
  const DenseMatrix h = random_features(120, 2, 1);
  RunOptions o;
  o.rows_per_chunk = 10;
  o.slots = 20;
  TempDir d;
  LayerContext ctx = init_layer(g.in_degrees, ModelKind::sage, 0, 2);
  MemoryConfig mc;
  mc.slot_count = 20;
  mc.slot_dim = ctx.agg_dim;
  mc.cold_path = d / "cold";
  MemoryManager mem(mc, ctx.pending, ctx.max_pending, nullptr);
  Collect sink;
  Orchestrator orch(ctx, mem, sink);
  // Replay: one step per delivery, self term first for each source.
  std::vector<std::uint64_t> first(120, Orchestrator::kNever), last(120, 0);
  std::uint64_t step = 0;
  std::vector<std::uint64_t> chunk_end;
  for (VertexId b = 0; b < 120; b += 10) {
    for (VertexId u = b; u < b + 10; ++u) {
      auto touch = [&](VertexId v) {
        if (first[v] == Orchestrator::kNever) first[v] = step;
        last[v] = step++;
      };
      touch(u);
      for (VertexId v : g.out_neighbors(u)) touch(v);
    }
    chunk_end.push_back(step);
    orch.process_chunk(make_chunk(g, h, {b, b + 10}));
  }
  for (VertexId v = 0; v < 120; ++v) {
    REQUIRE(orch.first_step(v) == first[v]);
    REQUIRE(orch.last_step(v) == last[v]);
    // A vertex whose messages all fall in one chunk spans at most that chunk's deliveries.
    const auto c0 = std::upper_bound(chunk_end.begin(), chunk_end.end(), first[v]) - chunk_end.begin();
    const auto c1 = std::upper_bound(chunk_end.begin(), chunk_end.end(), last[v]) - chunk_end.begin();
    if (c0 == c1) {
      const std::uint64_t lo = c0 == 0 ? 0 : chunk_end[c0 - 1];
      REQUIRE(last[v] - first[v] <= chunk_end[c0] - lo);
    }
  }
  const LayerMetrics m = orch.finalize();
  std::vector<std::uint64_t> spans;
  for (VertexId v = 0; v < 120; ++v) spans.push_back(last[v] - first[v]);
  CHECK(m.mean_span == Catch::Approx(summarize_spans(spans).mean));
  CHECK(m.messages == g.num_edges() + 120);
  CHECK(m.edge_messages == g.num_edges());
}

TEST_CASE("broadcast aggregates equal the gather aggregates for every model and configuration") {
  std::mt19937_64 rng(31);
  const EvictionKind policies[] = {EvictionKind::min_pending, EvictionKind::lru, EvictionKind::random};
  const ModelKind kinds[] = {ModelKind::gcn, ModelKind::sage, ModelKind::gin};
  for (int trial = 0; trial < 36; ++trial) {
    const std::uint64_t n = 2 + rng() % 200;
    const GraphCSR g = testutil::random_graph(n, rng() % (6 * n), rng());
    const std::uint32_t dim = 1 + rng() % 5;
    const DenseMatrix h = random_features(n, dim, rng());
    const ModelKind kind = kinds[trial % 3];
    RunOptions o;
    o.rows_per_chunk = static_cast<std::uint32_t>(1 + rng() % 40);
    o.slots = static_cast<std::uint32_t>(1 + rng() % n);
    o.policy = policies[(trial / 3) % 3];
    o.batch = 1 + rng() % 3;
    o.eps = kind == ModelKind::gin ? 0.5f : 0.0f;
    const LayerRun r = run_layer_in_memory(g, h, kind, o);
    const auto want = gather_aggregates(g, h, kind, o.eps);
    REQUIRE(r.sink.out.size() == n);
    for (VertexId v = 0; v < n; ++v) {
      const auto& got = r.sink.out.at(v);
      REQUIRE(got.size() == want[v].size());
      // Same summation order on both sides, so exact agreement is expected.
      for (std::size_t k = 0; k < got.size(); ++k) REQUIRE(got[k] == want[v][k]);
    }
    const std::uint64_t self = kind == ModelKind::gcn ? 0 : n;
    CHECK(r.metrics.messages == g.num_edges() + self);
    CHECK(r.metrics.illegal_transitions == 0);
    CHECK(r.metrics.peak_hot <= o.slots);
  }
}

TEST_CASE("identical inputs give identical aggregates and metrics") {
  const GraphCSR g = testutil::random_graph(300, 2000, 3);
  const DenseMatrix h = random_features(300, 4, 3);
  RunOptions o;
  o.rows_per_chunk = 17;
  o.slots = 25;
  o.policy = EvictionKind::random;
  const LayerRun a = run_layer_in_memory(g, h, ModelKind::sage, o);
  const LayerRun b = run_layer_in_memory(g, h, ModelKind::sage, o);
  CHECK(a.sink.out == b.sink.out);
  CHECK(a.sink.order == b.sink.order);
  CHECK(a.metrics.reloads == b.metrics.reloads);
  CHECK(a.metrics.evictions == b.metrics.evictions);
  CHECK(a.metrics.mean_reload_pct == b.metrics.mean_reload_pct);
}

TEST_CASE("metrics csv row has eleven fields") {
  LayerMetrics m;
  m.layer = 1;
  m.messages = 10;
  const std::string row = metrics_csv_row(m);
  CHECK(std::count(row.begin(), row.end(), ',') == 10);
  const std::string head = metrics_csv_header();
  CHECK(std::count(head.begin(), head.end(), ',') == 10);
}

TEST_CASE("summarize_spans percentiles") {
  std::vector<std::uint64_t> s(100);
  std::iota(s.begin(), s.end(), 1);
  const SpanStats st = summarize_spans(s);
  CHECK(st.mean == Catch::Approx(50.5));
  CHECK(st.p50 == 50);
  CHECK(st.p99 == 99);
  CHECK(summarize_spans({}).vertices == 0);
}
