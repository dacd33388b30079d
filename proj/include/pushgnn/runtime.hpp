// SPDX-License-Identifier: Apache-2.0
//
// End-to-end layer-wise inference: reader -> orchestrator -> compute -> writer
// on four threads joined by bounded queues, plus an in-memory gather
// implementation used as ground truth at test scale.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "pushgnn/bounded_queue.hpp"
#include "pushgnn/chunk_reader.hpp"
#include "pushgnn/common.hpp"
#include "pushgnn/compute.hpp"
#include "pushgnn/embedding_writer.hpp"
#include "pushgnn/io.hpp"
#include "pushgnn/memory_manager.hpp"
#include "pushgnn/orchestrator.hpp"
#include "pushgnn/reorder.hpp"
#include "pushgnn/storage.hpp"

namespace pushgnn {

inline constexpr const char* kFinalLayerFile = "final_layer";

/// Hot-store size. Exactly one form applies: a byte budget, a fraction of
/// |V| slots, or (neither set) one slot per vertex.
struct HotBudget {
  std::uint64_t bytes = 0;
  double fraction = 0.0;

  [[nodiscard]] std::uint32_t slots(std::uint64_t num_vertices, std::uint32_t agg_dim) const {
    const std::uint64_t cap = std::max<std::uint64_t>(1, num_vertices);
    if (bytes > 0) return static_cast<std::uint32_t>(std::min<std::uint64_t>(cap, slots_for_budget(bytes, agg_dim)));
    if (fraction > 0.0) {
      const auto n = static_cast<std::uint64_t>(std::ceil(fraction * static_cast<double>(num_vertices)));
      return static_cast<std::uint32_t>(std::clamp<std::uint64_t>(n, 1, cap));
    }
    return static_cast<std::uint32_t>(std::min<std::uint64_t>(cap, 0xfffffffeu));
  }
};

struct PipelineConfig {
  std::uint64_t chunk_budget = 8ull << 20;
  HotBudget hot;
  std::uint64_t graduation_buffer = 16ull << 20;
  std::uint32_t partitions = 8;
  std::uint64_t spill_buffer = 8ull << 20;  // per partition
  std::size_t queue_capacity = 20;
  EvictionKind eviction = EvictionKind::min_pending;
  std::uint64_t seed = 0;
  std::size_t evict_batch = 0;
  IoMode io = IoMode::direct;
  bool discard_intermediate = false;
  std::string backend = "blocked";
  bool activate_last = false;

  void validate() const {
    require(chunk_budget >= 1, Errc::config, "chunk budget must be at least one byte");
    require(graduation_buffer >= 1, Errc::config, "graduation buffer must be at least one byte");
    require(partitions >= 1, Errc::config, "partitions must be >= 1");
    require(spill_buffer >= 1, Errc::config, "spill buffer must be at least one byte");
    require(queue_capacity >= 1, Errc::config, "queue capacity must be >= 1");
    require(hot.fraction >= 0.0 && hot.fraction <= 1.0, Errc::config, "hot fraction must be in [0, 1]");
  }
};

/// Keeps the root cause when several stages fail during teardown: the first
/// error wins, except that a cancellation is replaced by any real error.
class FirstError {
 public:
  void record(std::exception_ptr e) {
    std::lock_guard lk(mu_);
    const bool cancel = is_cancel(e);
    if (!first_ || (first_cancel_ && !cancel)) {
      first_ = e;
      first_cancel_ = cancel;
    }
  }
  [[nodiscard]] bool has() const {
    std::lock_guard lk(mu_);
    return first_ != nullptr;
  }
  void rethrow_if_any() const {
    std::lock_guard lk(mu_);
    if (first_) std::rethrow_exception(first_);
  }

 private:
  static bool is_cancel(std::exception_ptr e) {
    try {
      std::rethrow_exception(e);
    } catch (const Error& err) {
      return err.code() == Errc::cancelled;
    } catch (...) {
      return false;
    }
  }
  mutable std::mutex mu_;
  std::exception_ptr first_;
  bool first_cancel_ = false;
};

struct LayerResult {
  LayerMetrics metrics;
  MatrixLayout output;
  bool delivered_once = false;
  std::size_t chunk_queue_high_water = 0;
  std::size_t write_queue_high_water = 0;
};

/// Runs one layer from matrix directory `input_dir` into `out_dir`. Every
/// stage failure tears the pipeline down and the root cause is rethrown.
inline LayerResult run_layer(std::uint32_t layer, const fs::path& graph_dir, const fs::path& input_dir,
                             std::span<const std::uint32_t> in_degrees, const ModelWeights& weights,
                             const PipelineConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  require(layer < weights.layers.size(), Errc::config, "layer index beyond model depth");
  const LayerWeights& w = weights.layers[layer];
  const bool is_last = layer + 1 == weights.layers.size();
  const auto t0 = std::chrono::steady_clock::now();

  IoCounters io;
  SpillSet spills(input_dir, ReaderOptions{cfg.io}, &io);
  TopologyFile topo(graph_dir, cfg.io, &io);
  ChunkReader reader(spills, topo, &io);
  const MatrixLayout in = spills.layout();
  require(in.num_vertices == in_degrees.size(), Errc::shape_mismatch, "input matrix and graph disagree on |V|");

  LayerContext ctx = init_layer(in_degrees, weights.kind, layer, in.dim, weights.gin_epsilon);
  require(ctx.agg_dim == w.in_dim, Errc::dim_mismatch,
          "layer " + std::to_string(layer) + " expects input width " + std::to_string(w.in_dim) + " but aggregates are " +
              std::to_string(ctx.agg_dim) + " wide");

  MemoryConfig mc;
  mc.slot_count = cfg.hot.slots(in.num_vertices, ctx.agg_dim);
  mc.slot_dim = ctx.agg_dim;
  mc.policy = cfg.eviction;
  mc.seed = cfg.seed;
  mc.evict_batch = cfg.evict_batch;
  mc.cold_path = out_dir.parent_path() / (out_dir.filename().string() + ".cold");

  const auto backend = make_backend(cfg.backend);
  const auto plan = plan_chunks(in.num_vertices, in.dim, in.dtype, cfg.chunk_budget);
  const MatrixLayout out_layout{in.num_vertices, cfg.partitions, w.out_dim, DType::f32};

  ChunkQueue chunk_q(cfg.queue_capacity);
  ComputeQueue compute_q(cfg.queue_capacity);
  BufferPool pool(2);
  WriteQueue write_q(cfg.queue_capacity);
  auto abort_all = [&] {
    chunk_q.close();
    compute_q.close();
    pool.close();
    write_q.close();
  };
  FirstError first;
  auto guard = [&](auto&& body) {
    return [&, body] {
      try {
        body();
      } catch (...) {
        first.record(std::current_exception());
        abort_all();
      }
    };
  };

  LayerResult result;
  {
    MemoryManager mem(mc, ctx.pending, ctx.max_pending, &io);
    SpillBufferSet out_buffers(out_dir, out_layout, cfg.spill_buffer, cfg.io, &io);
    Graduator grad(ctx.agg_dim, cfg.graduation_buffer, compute_q, pool);
    Orchestrator orch(ctx, mem, grad);

    std::thread reader_t(guard([&] { run_reader(reader, plan, chunk_q); }));
    std::thread orch_t(guard([&] {
      try {
        while (auto item = chunk_q.pop()) {
          if (auto* c = std::get_if<Chunk>(&*item)) {
            orch.process_chunk(*c);
          } else if (std::holds_alternative<EndOfLayer>(*item)) {
            result.metrics = orch.finalize();
            grad.finish();
            return;
          } else {
            compute_q.push(std::get<std::exception_ptr>(*item));
            return;
          }
        }
        fail(Errc::cancelled, "chunk stream ended without end marker");
      } catch (...) {
        chunk_q.close();
        compute_q.push(std::current_exception());
        throw;
      }
    }));
    std::thread compute_t(guard([&] { run_compute(compute_q, write_q, pool, w, is_last, *backend, cfg.activate_last); }));
    std::thread writer_t(guard([&] {
      if (!run_writer(write_q, out_buffers).completed) fail(Errc::cancelled, "writer stopped before end of layer");
    }));
    reader_t.join();
    orch_t.join();
    compute_t.join();
    writer_t.join();
    first.rethrow_if_any();

    const auto delivered = orch.delivered();
    result.delivered_once = static_cast<std::uint64_t>(std::count(delivered.begin(), delivered.end(), 1)) ==
                            in.num_vertices;
  }
  write_layout(out_dir, out_layout);
  result.output = out_layout;
  result.chunk_queue_high_water = chunk_q.high_water();
  result.write_queue_high_water = write_q.high_water();

  auto& m = result.metrics;
  m.bytes_read = io.total_read();
  m.bytes_written = io.total_written();
  m.feature_bytes_read = io.feature_bytes_read;
  m.input_row_bytes = spills.total_row_bytes();
  m.feature_bytes_written = io.feature_bytes_written;
  m.cold_bytes_read = io.cold_bytes_read;
  m.cold_bytes_written = io.cold_bytes_written;
  m.direct_io_fallbacks = io.direct_io_fallbacks;
  m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

struct RunReport {
  std::vector<LayerResult> layers;
  fs::path final_dir;

  [[nodiscard]] std::uint64_t total(std::uint64_t LayerMetrics::*field) const {
    std::uint64_t n = 0;
    for (const auto& l : layers) n += l.metrics.*field;
    return n;
  }
  [[nodiscard]] double total_seconds() const {
    double s = 0;
    for (const auto& l : layers) s += l.metrics.wall_seconds;
    return s;
  }
  [[nodiscard]] std::uint64_t illegal_transitions() const { return total(&LayerMetrics::illegal_transitions); }
};

inline void write_metrics_csv(const RunReport& r, const fs::path& p) {
  std::ofstream os(p);
  require(static_cast<bool>(os), Errc::io, "cannot write " + p.string());
  os << metrics_csv_header() << "\n";
  for (const auto& l : r.layers) os << metrics_csv_row(l.metrics) << "\n";
  require(static_cast<bool>(os), Errc::io, "write failed for " + p.string());
}

inline fs::path layer_dir(const fs::path& out, std::uint32_t layer) { return out / ("layer_" + std::to_string(layer)); }

/// Chains run_layer over every layer of `weights`. Layer 0 reads the graph's
/// feature matrix; layer l reads layer l-1's output.
inline RunReport run_inference(const fs::path& graph_dir, const ModelWeights& weights, const PipelineConfig& cfg,
                               const fs::path& out) {
  cfg.validate();
  const MatrixLayout features = read_layout(graph_dir / kFeaturesDir);
  validate_weights(weights, features.dim);
  const auto in_degrees = read_in_degrees(graph_dir);
  require(in_degrees.size() == features.num_vertices, Errc::shape_mismatch, "features and topology disagree on |V|");

  fs::create_directories(out);
  std::error_code ec;
  fs::remove(out / kFinalLayerFile, ec);
  RunReport report;
  fs::path input = graph_dir / kFeaturesDir;
  for (std::uint32_t l = 0; l < weights.layers.size(); ++l) {
    const fs::path dst = layer_dir(out, l);
    fs::remove_all(dst, ec);
    report.layers.push_back(run_layer(l, graph_dir, input, in_degrees, weights, cfg, dst));
    if (cfg.discard_intermediate && l > 0) fs::remove_all(input, ec);
    input = dst;
  }
  report.final_dir = input;
  write_text_file(out / kFinalLayerFile, input.filename().string() + "\n");
  return report;
}

/// Resolves a run directory (via its final_layer file) or a plain matrix
/// directory.
inline fs::path resolve_output_dir(const fs::path& p) {
  if (fs::exists(p / kFinalLayerFile)) {
    std::string name = read_text_file(p / kFinalLayerFile);
    while (!name.empty() && (name.back() == '\n' || name.back() == '\r')) name.pop_back();
    return p / name;
  }
  return p;
}

enum class OracleArithmetic {
  // f32 throughout; each destination sums its in-neighbor messages in
  // ascending source id (self term at its own id), dense products sum k in
  // ascending order and add the bias last.
  f32_ordered,
  // Double precision throughout, rounded to f32 only at the end.
  f64,
};

struct OracleOptions {
  std::uint64_t max_bytes = 4ull << 30;
  bool activate_last = false;
  OracleArithmetic arithmetic = OracleArithmetic::f32_ordered;
};

/// Estimated peak bytes of oracle_inference.
inline std::uint64_t oracle_footprint(std::uint64_t num_vertices, std::uint64_t num_edges, const ModelWeights& w,
                                      std::uint32_t feature_dim) {
  std::uint64_t widest = feature_dim;
  for (const auto& L : w.layers) widest = std::max<std::uint64_t>({widest, L.in_dim, L.out_dim});
  return num_vertices * widest * 8 * 3 + num_edges * 8 * 2 + num_vertices * 16;
}


namespace detail {
template <typename T>
std::vector<T> gather_layer(const GraphCSR& g, std::span<const std::uint64_t> in_off, std::span<const VertexId> in_src,
                            const std::vector<T>& h, std::uint32_t d, const ModelWeights& w, const LayerWeights& L,
                            bool relu) {
  const std::uint64_t n = g.num_vertices;
  const std::uint32_t a = w.agg_dim(d);
  const T self_scale = T(1) + static_cast<T>(w.gin_epsilon);
  std::vector<T> agg(a);
  std::vector<T> out(n * L.out_dim);
  for (VertexId v = 0; v < n; ++v) {
    std::fill(agg.begin(), agg.end(), T(0));
    const T* self = h.data() + v * d;
    bool self_done = w.kind != ModelKind::gin;
    const T deg = static_cast<T>(std::max<std::uint64_t>(1, in_off[v + 1] - in_off[v]));
    for (std::uint64_t e = in_off[v]; e < in_off[v + 1]; ++e) {
      const VertexId u = in_src[e];
      if (!self_done && u >= v) {
        for (std::uint32_t k = 0; k < d; ++k) agg[k] += self_scale * self[k];
        self_done = true;
      }
      const T* src = h.data() + u * d;
      if (w.kind == ModelKind::gin) {
        for (std::uint32_t k = 0; k < d; ++k) agg[k] += src[k];
      } else {
        for (std::uint32_t k = 0; k < d; ++k) agg[k] += src[k] / deg;
      }
    }
    if (!self_done)
      for (std::uint32_t k = 0; k < d; ++k) agg[k] += self_scale * self[k];
    if (w.kind == ModelKind::sage) std::copy(self, self + d, agg.begin() + d);
    for (std::uint32_t o = 0; o < L.out_dim; ++o) {
      T acc = 0;
      for (std::uint32_t k = 0; k < a; ++k) acc += agg[k] * static_cast<T>(L.weight[std::size_t{o} * a + k]);
      acc = acc + static_cast<T>(L.bias[o]);
      out[v * L.out_dim + o] = relu ? std::max(acc, T(0)) : acc;
    }
  }
  return out;
}

template <typename T>
DenseMatrix gather_forward(const GraphCSR& g, const DenseMatrix& features, const ModelWeights& w, bool activate_last) {
  const std::uint64_t n = g.num_vertices;
  // In-neighbor lists (CSC), ascending source id per destination.
  std::vector<std::uint64_t> in_off(n + 1, 0);
  for (VertexId v : g.neighbors) ++in_off[v + 1];
  for (std::uint64_t v = 0; v < n; ++v) in_off[v + 1] += in_off[v];
  std::vector<VertexId> in_src(g.num_edges());
  {
    auto fill = in_off;
    for (VertexId u = 0; u < n; ++u)
      for (VertexId v : g.out_neighbors(u)) in_src[fill[v]++] = u;
  }
  std::vector<T> h(features.values.begin(), features.values.end());
  std::uint32_t d = features.dim;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const bool last = l + 1 == w.layers.size();
    h = gather_layer<T>(g, in_off, in_src, h, d, w, w.layers[l], !last || activate_last);
    d = w.layers[l].out_dim;
  }
  DenseMatrix out{n, d, std::vector<float>(h.size())};
  std::transform(h.begin(), h.end(), out.values.begin(), [](T x) { return static_cast<float>(x); });
  return out;
}
}  // namespace detail

/// In-memory gather: each destination pulls from its in-neighbors, one layer
/// at a time.
inline DenseMatrix oracle_forward(const GraphCSR& g, const DenseMatrix& features, const ModelWeights& w,
                                  bool activate_last = false,
                                  OracleArithmetic arith = OracleArithmetic::f32_ordered) {
  require(features.rows == g.num_vertices, Errc::shape_mismatch, "features and topology disagree on |V|");
  validate_weights(w, features.dim);
  return arith == OracleArithmetic::f64 ? detail::gather_forward<double>(g, features, w, activate_last)
                                        : detail::gather_forward<float>(g, features, w, activate_last);
}

/// Ground truth at test scale. Refuses graphs whose footprint estimate
/// exceeds `opts.max_bytes`.
inline DenseMatrix oracle_inference(const fs::path& graph_dir, const ModelWeights& w, const OracleOptions& opts = {}) {
  const MatrixLayout fl = read_layout(graph_dir / kFeaturesDir);
  const TopologyHeader th = [&] {
    File f = File::open_read(graph_dir / kTopologyFile, IoMode::buffered);
    std::vector<std::byte> page(kAlignment);
    const auto got = f.read_at(page, 0);
    return parse_topology_header({page.data(), got}, f.path().string());
  }();
  const std::uint64_t need = oracle_footprint(th.num_vertices, th.num_edges, w, fl.dim);
  if (need > opts.max_bytes)
    fail(Errc::scale_guard, "oracle would need about " + std::to_string(need >> 20) + " MiB, limit is " +
                                std::to_string(opts.max_bytes >> 20) + " MiB");
  return oracle_forward(read_csr(graph_dir), load_dense(graph_dir / kFeaturesDir), w, opts.activate_last, opts.arithmetic);
}

struct CompareReport {
  std::uint64_t rows = 0;
  std::uint32_t dim = 0;
  double max_abs = 0;
  double mean_max_abs = 0;   // mean over vertices of the per-vertex max abs error
  double mean_rel = 0;       // mean over vertices of max abs error / max(|a|_inf, 1e-6)
  std::uint64_t argmax_mismatches = 0;

  [[nodiscard]] bool within(double tol) const { return max_abs <= tol && argmax_mismatches == 0; }
};

inline std::size_t argmax(std::span<const float> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

/// Compares row v of `a` with row map(v) of `b`; `b_index` may be empty for
/// the identity.
inline CompareReport compare_matrices(const DenseMatrix& a, const DenseMatrix& b, std::span<const VertexId> b_index = {}) {
  require(a.rows == b.rows && a.dim == b.dim, Errc::shape_mismatch,
          "shapes differ: " + std::to_string(a.rows) + "x" + std::to_string(a.dim) + " vs " + std::to_string(b.rows) + "x" +
              std::to_string(b.dim));
  require(b_index.empty() || b_index.size() == a.rows, Errc::shape_mismatch, "permutation length differs from row count");
  CompareReport r;
  r.rows = a.rows;
  r.dim = a.dim;
  if (a.rows == 0) return r;
  long double sum_max = 0, sum_rel = 0;
  for (std::uint64_t v = 0; v < a.rows; ++v) {
    const auto x = a.row(v);
    const auto y = b.row(b_index.empty() ? v : b_index[v]);
    double worst = 0, scale = 0;
    for (std::uint32_t k = 0; k < a.dim; ++k) {
      worst = std::max(worst, std::abs(static_cast<double>(x[k]) - y[k]));
      scale = std::max(scale, std::abs(static_cast<double>(x[k])));
    }
    r.max_abs = std::max(r.max_abs, worst);
    sum_max += worst;
    sum_rel += worst / std::max(scale, 1e-6);
    if (a.dim > 0 && argmax(x) != argmax(y)) ++r.argmax_mismatches;
  }
  r.mean_max_abs = static_cast<double>(sum_max / a.rows);
  r.mean_rel = static_cast<double>(sum_rel / a.rows);
  return r;
}

/// Compares two output directories (run directories or matrix directories).
/// With `permutation`, `b` is in relabeled order and row v of `a` is matched
/// with row old_to_new[v] of `b`.
inline CompareReport compare_outputs(const fs::path& a, const fs::path& b, const fs::path& permutation = {}) {
  const DenseMatrix ma = load_dense(resolve_output_dir(a));
  const DenseMatrix mb = load_dense(resolve_output_dir(b));
  if (permutation.empty()) return compare_matrices(ma, mb);
  const Relabeling map = read_permutation(permutation);
  return compare_matrices(ma, mb, map.old_to_new);
}

}  // namespace pushgnn
