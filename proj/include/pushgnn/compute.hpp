// SPDX-License-Identifier: Apache-2.0
//
// Graduation processor: completed aggregates are packed into one of two
// buffers; full buffers go to the compute stage, which applies the layer's
// dense transform and forwards (ids, embeddings) to the writer.

#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "pushgnn/bounded_queue.hpp"
#include "pushgnn/common.hpp"
#include "pushgnn/orchestrator.hpp"
#include "pushgnn/storage.hpp"

namespace pushgnn {

struct GraduationBuffer {
  std::uint32_t dim = 0;
  std::size_t capacity_rows = 1;
  std::vector<VertexId> ids;
  std::vector<float> rows;

  GraduationBuffer(std::uint32_t d, std::size_t cap) : dim(d), capacity_rows(std::max<std::size_t>(1, cap)) {
    ids.reserve(capacity_rows);
    rows.reserve(capacity_rows * dim);
  }

  [[nodiscard]] std::size_t size() const { return ids.size(); }
  [[nodiscard]] bool empty() const { return ids.empty(); }
  [[nodiscard]] bool full() const { return ids.size() >= capacity_rows; }
  [[nodiscard]] std::span<const float> row(std::size_t i) const { return {rows.data() + i * dim, dim}; }

  void append(VertexId v, std::span<const float> aggregate) {
    require(aggregate.size() == dim, Errc::dim_mismatch, "aggregate width differs from graduation buffer width");
    require(!full(), Errc::contract_violation, "graduation buffer overflow");
    ids.push_back(v);
    rows.insert(rows.end(), aggregate.begin(), aggregate.end());
  }
  void clear() {
    ids.clear();
    rows.clear();
  }
};

/// Transformed rows for a batch of vertices, in graduation order.
struct OutputBatch {
  std::vector<VertexId> ids;
  std::uint32_t dim = 0;
  std::vector<float> rows;
};

using BufferPtr = std::unique_ptr<GraduationBuffer>;
using ComputeQueue = BoundedQueue<StageItem<BufferPtr>>;
using BufferPool = BoundedQueue<BufferPtr>;
using WriteQueue = BoundedQueue<StageItem<OutputBatch>>;

/// Double-buffered graduation sink used on the orchestration thread.
class Graduator final : public GraduationSink {
 public:
  Graduator(std::uint32_t agg_dim, std::uint64_t capacity_bytes, ComputeQueue& compute, BufferPool& pool)
      : compute_(compute), pool_(pool) {
    const std::size_t rows = std::max<std::uint64_t>(1, capacity_bytes / (std::uint64_t{agg_dim} * 4));
    active_ = std::make_unique<GraduationBuffer>(agg_dim, rows);
    pool_.push(std::make_unique<GraduationBuffer>(agg_dim, rows));
  }

  void graduate(VertexId v, std::span<const float> aggregate) override {
    active_->append(v, aggregate);
    if (active_->full()) submit();
  }

  /// Submits a partially filled buffer, then the end marker.
  void finish() {
    if (!active_->empty()) submit();
    compute_.push(EndOfLayer{});
  }

  [[nodiscard]] std::uint64_t submitted() const { return submitted_; }
  [[nodiscard]] std::size_t capacity_rows() const { return active_ ? active_->capacity_rows : 0; }

 private:
  void submit() {
    ++submitted_;
    if (!compute_.push(std::move(active_))) fail(Errc::cancelled, "compute stage stopped");
    auto next = pool_.pop();  // blocks while both buffers are in flight
    if (!next) fail(Errc::cancelled, "compute stage stopped");
    active_ = std::move(*next);
    active_->clear();
  }

  ComputeQueue& compute_;
  BufferPool& pool_;
  BufferPtr active_;
  std::uint64_t submitted_ = 0;
};

/// Dense y = x W^T + b over a row batch.
class TransformBackend {
 public:
  virtual ~TransformBackend() = default;
  [[nodiscard]] virtual std::string_view name() const = 0;
  [[nodiscard]] virtual std::size_t max_batch_rows() const = 0;
  virtual void linear(std::span<const float> in, std::size_t rows, const LayerWeights& w, std::span<float> out) const = 0;
};

/// Plain triple loop; each output element sums k in ascending order.
class ReferenceBackend final : public TransformBackend {
 public:
  [[nodiscard]] std::string_view name() const override { return "reference"; }
  [[nodiscard]] std::size_t max_batch_rows() const override { return static_cast<std::size_t>(-1); }
  void linear(std::span<const float> in, std::size_t rows, const LayerWeights& w, std::span<float> out) const override {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::uint32_t o = 0; o < w.out_dim; ++o) {
        float acc = 0.0f;
        for (std::uint32_t k = 0; k < w.in_dim; ++k) acc += in[r * w.in_dim + k] * w.weight[std::size_t{o} * w.in_dim + k];
        out[r * w.out_dim + o] = acc + w.bias[o];
      }
    }
  }
};

/// Weights transposed once per call so the inner loop runs over outputs.
/// Each output element still sums k in ascending order, so results match the
/// reference backend bit for bit.
class BlockedBackend final : public TransformBackend {
 public:
  [[nodiscard]] std::string_view name() const override { return "blocked"; }
  [[nodiscard]] std::size_t max_batch_rows() const override { return static_cast<std::size_t>(-1); }
  void linear(std::span<const float> in, std::size_t rows, const LayerWeights& w, std::span<float> out) const override {
    const std::size_t n = w.in_dim, m = w.out_dim;
    std::vector<float> wt(n * m);
    for (std::size_t o = 0; o < m; ++o)
      for (std::size_t k = 0; k < n; ++k) wt[k * m + o] = w.weight[o * n + k];
    std::vector<float> acc(m);
    for (std::size_t r = 0; r < rows; ++r) {
      std::fill(acc.begin(), acc.end(), 0.0f);
      const float* x = in.data() + r * n;
      for (std::size_t k = 0; k < n; ++k) {
        const float xk = x[k];
        const float* wk = wt.data() + k * m;
        for (std::size_t o = 0; o < m; ++o) acc[o] += xk * wk[o];
      }
      float* y = out.data() + r * m;
      for (std::size_t o = 0; o < m; ++o) y[o] = acc[o] + w.bias[o];
    }
  }
};

inline std::unique_ptr<TransformBackend> make_backend(std::string_view name) {
  if (name == "reference") return std::make_unique<ReferenceBackend>();
  if (name == "blocked") return std::make_unique<BlockedBackend>();
  fail(Errc::config, "unknown transform backend '" + std::string(name) + "'");
}

/// act(batch W^T + b); ReLU on hidden layers, identity on the last one unless
/// `activate_last`.
inline OutputBatch transform(const GraduationBuffer& batch, const LayerWeights& w, bool is_last_layer,
                             const TransformBackend& backend, bool activate_last = false) {
  require(batch.dim == w.in_dim, Errc::dim_mismatch,
          "batch width " + std::to_string(batch.dim) + " differs from layer input width " + std::to_string(w.in_dim));
  OutputBatch out;
  out.ids = batch.ids;
  out.dim = w.out_dim;
  out.rows.resize(batch.size() * w.out_dim);
  const std::size_t step = std::max<std::size_t>(1, backend.max_batch_rows());
  for (std::size_t r = 0; r < batch.size(); r += step) {
    const std::size_t n = std::min(step, batch.size() - r);
    backend.linear(std::span<const float>(batch.rows).subspan(r * w.in_dim, n * w.in_dim), n, w,
                   std::span<float>(out.rows).subspan(r * w.out_dim, n * w.out_dim));
  }
  if (!is_last_layer || activate_last)
    for (auto& x : out.rows) x = std::max(x, 0.0f);
  return out;
}

struct ComputeStats {
  std::uint64_t batches = 0;
  std::uint64_t rows = 0;
};

/// Compute stage: drains buffers, transforms, forwards batches and hands the
/// buffers back to the pool. Errors travel downstream as terminal items.
inline ComputeStats run_compute(ComputeQueue& in, WriteQueue& out, BufferPool& pool, const LayerWeights& w,
                                bool is_last_layer, const TransformBackend& backend, bool activate_last = false) {
  ComputeStats stats;
  try {
    while (auto item = in.pop()) {
      if (auto* buf = std::get_if<BufferPtr>(&*item)) {
        OutputBatch b = transform(**buf, w, is_last_layer, backend, activate_last);
        stats.rows += b.ids.size();
        ++stats.batches;
        (*buf)->clear();
        pool.push(std::move(*buf));
        if (!out.push(std::move(b))) return stats;
      } else if (std::holds_alternative<EndOfLayer>(*item)) {
        out.push(EndOfLayer{});
        return stats;
      } else {
        out.push(std::get<std::exception_ptr>(*item));
        return stats;
      }
    }
  } catch (...) {
    in.close();
    pool.close();
    out.push(std::current_exception());
  }
  return stats;
}

}  // namespace pushgnn
