// SPDX-License-Identifier: Apache-2.0
//
// Vertex relabeling so that sources whose messages complete many destinations
// come first. Scores are computed once and ranked statically.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <vector>

#include "pushgnn/chunk_reader.hpp"
#include "pushgnn/common.hpp"
#include "pushgnn/embedding_writer.hpp"
#include "pushgnn/io.hpp"
#include "pushgnn/orchestrator.hpp"
#include "pushgnn/storage.hpp"

namespace pushgnn {

inline constexpr const char* kPermutationFile = "permutation.bin";

struct Relabeling {
  std::vector<VertexId> old_to_new;
  std::vector<VertexId> new_to_old;

  [[nodiscard]] std::uint64_t size() const { return old_to_new.size(); }

  static Relabeling identity(std::uint64_t n) {
    Relabeling r;
    r.old_to_new.resize(n);
    std::iota(r.old_to_new.begin(), r.old_to_new.end(), VertexId{0});
    r.new_to_old = r.old_to_new;
    return r;
  }

  /// Builds the inverse from `new_to_old`, rejecting anything that is not a
  /// permutation of [0, n).
  static Relabeling from_order(std::vector<VertexId> new_to_old) {
    Relabeling r;
    r.new_to_old = std::move(new_to_old);
    const auto n = r.new_to_old.size();
    r.old_to_new.assign(n, ~VertexId{0});
    for (VertexId i = 0; i < n; ++i) {
      const VertexId old = r.new_to_old[i];
      require(old < n && r.old_to_new[old] == ~VertexId{0}, Errc::precondition, "ordering is not a permutation");
      r.old_to_new[old] = i;
    }
    return r;
  }
  friend bool operator==(const Relabeling&, const Relabeling&) = default;
};

/// Score(u) = (sum over out-neighbors v of 1/d_in(v)) / d_out(u), and 0 for
/// vertices without out-edges.
inline std::vector<double> score_vertices(const GraphCSR& g) {
  std::vector<double> inv(g.num_vertices, 0.0);
  for (VertexId v = 0; v < g.num_vertices; ++v)
    if (g.in_degrees[v] > 0) inv[v] = 1.0 / g.in_degrees[v];
  std::vector<double> score(g.num_vertices, 0.0);
  for (VertexId u = 0; u < g.num_vertices; ++u) {
    const auto out = g.out_neighbors(u);
    if (out.empty()) continue;
    double gain = 0.0;
    for (VertexId v : out) gain += inv[v];
    score[u] = gain / static_cast<double>(out.size());
  }
  return score;
}

/// Descending score, ties by ascending old id.
inline Relabeling build_order(std::span<const double> scores) {
  std::vector<VertexId> order(scores.size());
  std::iota(order.begin(), order.end(), VertexId{0});
  std::stable_sort(order.begin(), order.end(), [&](VertexId a, VertexId b) { return scores[a] > scores[b]; });
  return Relabeling::from_order(std::move(order));
}

inline Relabeling random_order(std::uint64_t n, std::uint64_t seed) {
  std::vector<VertexId> order(n);
  std::iota(order.begin(), order.end(), VertexId{0});
  SplitMix64 rng(seed);
  for (std::uint64_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return Relabeling::from_order(std::move(order));
}

inline GraphCSR relabel_csr(const GraphCSR& g, const Relabeling& map) {
  require(map.size() == g.num_vertices, Errc::shape_mismatch, "permutation length differs from |V|");
  GraphCSR out;
  out.num_vertices = g.num_vertices;
  out.offsets.assign(g.num_vertices + 1, 0);
  out.neighbors.resize(g.num_edges());
  out.in_degrees.resize(g.num_vertices);
  for (VertexId n = 0; n < g.num_vertices; ++n) {
    const VertexId u = map.new_to_old[n];
    out.offsets[n + 1] = out.offsets[n] + g.out_degree(u);
    out.in_degrees[n] = g.in_degrees[u];
    auto dst = out.neighbors.begin() + static_cast<std::ptrdiff_t>(out.offsets[n]);
    for (VertexId v : g.out_neighbors(u)) *dst++ = map.old_to_new[v];
    std::sort(out.neighbors.begin() + static_cast<std::ptrdiff_t>(out.offsets[n]), dst);
  }
  return out;
}

/// Writes the relabeled topology and in-degree files into `out`.
inline void relabel_graph(const GraphCSR& g, const Relabeling& map, const fs::path& out) {
  write_csr(relabel_csr(g, map), out);
}

struct RelabelStats {
  std::uint64_t chunks = 0;
  std::uint64_t rows = 0;
  std::uint64_t peak_bytes = 0;  // largest chunk rows + buffered spill rows held at once
};

/// Streams the feature matrix of `graph_dir` in old-id chunks and writes it
/// under new ids to `out_features`. Half of `memory_budget` bounds the chunk,
/// the other half is split across the P spill buffers.
inline RelabelStats relabel_features(const fs::path& graph_dir, const Relabeling& map, std::uint32_t partitions,
                                     const fs::path& out_features, std::uint64_t memory_budget, IoMode io,
                                     IoCounters* counters = nullptr) {
  require(partitions >= 1, Errc::config, "partitions must be >= 1");
  SpillSet spills(graph_dir / kFeaturesDir, ReaderOptions{io}, counters);
  TopologyFile topo(graph_dir, io, counters);
  ChunkReader reader(spills, topo, counters);
  const MatrixLayout in = spills.layout();
  require(map.size() == in.num_vertices, Errc::shape_mismatch, "permutation length differs from |V|");

  const std::uint64_t half = std::max<std::uint64_t>(1, memory_budget / 2);
  const MatrixLayout out_layout{in.num_vertices, partitions, in.dim, in.dtype};
  SpillBufferSet buffers(out_features, out_layout, half / partitions, io, counters);

  RelabelStats stats;
  std::vector<VertexId> ids;
  for (const IdRange& r : plan_chunks(in.num_vertices, in.dim, DType::f32, half)) {
    const Chunk c = reader.read_chunk(r);
    ids.resize(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) ids[i] = map.old_to_new[r.begin + i];
    const std::uint64_t held = c.features.size() * sizeof(float) + buffers.buffered_bytes();
    buffers.scatter(ids, c.features);
    stats.peak_bytes = std::max({stats.peak_bytes, held, c.features.size() * sizeof(float) + buffers.peak_buffered_bytes()});
    stats.rows += r.size();
    ++stats.chunks;
  }
  buffers.flush_all();
  require(stats.rows == in.num_vertices, Errc::coverage_gap, "feature rows do not cover every vertex");
  return stats;
}

/// Mean/p50/p99 over destinations of (last - first) message step, replaying
/// the broadcast in the given order with one step per edge message.
inline SpanStats compute_span(const GraphCSR& g, const Relabeling& order) {
  require(order.size() == g.num_vertices, Errc::shape_mismatch, "permutation length differs from |V|");
  constexpr std::uint64_t never = ~std::uint64_t{0};
  std::vector<std::uint64_t> first(g.num_vertices, never), last(g.num_vertices, 0);
  std::uint64_t step = 0;
  std::vector<VertexId> row;
  for (VertexId n = 0; n < g.num_vertices; ++n) {
    // Same per-source order as the relabeled CSR: ascending new id.
    row.clear();
    for (VertexId v : g.out_neighbors(order.new_to_old[n])) row.push_back(order.old_to_new[v]);
    std::sort(row.begin(), row.end());
    for (VertexId v : row) {
      if (first[v] == never) first[v] = step;
      last[v] = step;
      ++step;
    }
  }
  std::vector<std::uint64_t> spans;
  spans.reserve(g.num_vertices);
  for (VertexId v = 0; v < g.num_vertices; ++v)
    if (first[v] != never) spans.push_back(last[v] - first[v]);
  return summarize_spans(std::move(spans));
}

inline void write_permutation(const Relabeling& map, const fs::path& p) {
  HeaderWriter hw;
  hw.magic("APRM").put(static_cast<std::uint64_t>(map.size()));
  for (VertexId v : map.old_to_new) hw.put(static_cast<std::uint64_t>(v));
  File::create(p, IoMode::buffered).write_at(hw.bytes(), 0);
}

inline Relabeling read_permutation(const fs::path& p) {
  File f = File::open_read(p, IoMode::buffered);
  std::vector<std::byte> buf(f.size());
  f.read_exact(buf, 0);
  HeaderReader r(buf, p.string());
  r.expect_magic("APRM");
  const auto n = r.get<std::uint64_t>();
  if (buf.size() < 12 + n * 8) fail(Errc::truncated, p.string() + ": shorter than its vertex count implies");
  std::vector<VertexId> old_to_new(n);
  for (auto& x : old_to_new) x = r.get<std::uint64_t>();
  std::vector<VertexId> new_to_old(n, ~VertexId{0});
  for (VertexId v = 0; v < n; ++v) {
    require(old_to_new[v] < n && new_to_old[old_to_new[v]] == ~VertexId{0}, Errc::malformed_input,
            p.string() + ": not a permutation");
    new_to_old[old_to_new[v]] = v;
  }
  return Relabeling{std::move(old_to_new), std::move(new_to_old)};
}

struct ReorderSummary {
  SpanStats span_before;
  SpanStats span_after;
  RelabelStats features;
};

/// Full preprocessing: score, rank, relabel topology and features, and store
/// the permutation next to them.
inline ReorderSummary reorder_dataset(const fs::path& graph_dir, std::uint32_t partitions, const fs::path& out,
                                      std::uint64_t memory_budget = 64ull << 20, IoMode io = IoMode::direct,
                                      IoCounters* counters = nullptr) {
  const GraphCSR g = read_csr(graph_dir);
  const Relabeling map = build_order(score_vertices(g));
  fs::create_directories(out);
  relabel_graph(g, map, out);
  ReorderSummary s;
  s.features = relabel_features(graph_dir, map, partitions, out / kFeaturesDir, memory_budget, io, counters);
  write_permutation(map, out / kPermutationFile);
  s.span_before = compute_span(g, Relabeling::identity(g.num_vertices));
  s.span_after = compute_span(g, map);
  return s;
}

}  // namespace pushgnn
