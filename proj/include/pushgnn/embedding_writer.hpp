// SPDX-License-Identifier: Apache-2.0
//
// Embedding writer: batches arrive in graduation order, get scattered into one
// buffer per id-range partition, and every full buffer is sorted and written
// as a spill. No global sort or merge ever happens.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <vector>

#include "pushgnn/bounded_queue.hpp"
#include "pushgnn/common.hpp"
#include "pushgnn/compute.hpp"
#include "pushgnn/io.hpp"
#include "pushgnn/storage.hpp"

namespace pushgnn {

struct FlushEvent {
  std::uint32_t partition = 0;
  std::string spill_name;
  std::uint64_t rows = 0;
};

class SpillBufferSet {
 public:
  /// Creates the matrix directory `dir` for `layout` and one buffer per
  /// partition holding up to `buffer_bytes` of ids plus f32 rows.
  SpillBufferSet(fs::path dir, const MatrixLayout& layout, std::uint64_t buffer_bytes, IoMode io, IoCounters* counters)
      : dir_(std::move(dir)),
        layout_(layout),
        io_(io),
        counters_(counters),
        capacity_rows_(std::max<std::uint64_t>(1, buffer_bytes / entry_bytes(layout.dim))),
        seen_(layout.num_vertices, 0) {
    manifests_ = create_matrix_dir(dir_, layout_);
    buffers_.resize(layout_.partitions);
  }

  [[nodiscard]] const MatrixLayout& layout() const { return layout_; }
  [[nodiscard]] std::uint64_t capacity_rows() const { return capacity_rows_; }
  [[nodiscard]] std::uint64_t buffered_bytes() const { return buffered_rows_ * entry_bytes(layout_.dim); }
  [[nodiscard]] std::uint64_t peak_buffered_bytes() const { return peak_rows_ * entry_bytes(layout_.dim); }
  [[nodiscard]] std::uint64_t rows_written() const { return rows_written_; }
  [[nodiscard]] std::uint64_t buffered_rows(std::uint32_t k) const { return buffers_[k].ids.size(); }
  [[nodiscard]] const std::vector<PartitionManifest>& manifests() const { return manifests_; }
  [[nodiscard]] const fs::path& dir() const { return dir_; }

  static std::uint64_t entry_bytes(std::uint32_t dim) { return std::uint64_t{dim} * 4 + sizeof(VertexId); }

  std::vector<FlushEvent> scatter(std::span<const VertexId> ids, std::span<const float> rows) {
    require(rows.size() == ids.size() * layout_.dim, Errc::dim_mismatch, "batch rows not aligned with ids");
    std::vector<FlushEvent> events;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const VertexId v = ids[i];
      require(v < layout_.num_vertices, Errc::out_of_range, "vertex " + std::to_string(v) + " outside [0, |V|)");
      if (seen_[v] != 0) fail(Errc::duplicate_vertex, "vertex " + std::to_string(v) + " written twice in one layer");
      seen_[v] = 1;
      const std::uint32_t k = layout_.partition_of(v);
      auto& b = buffers_[k];
      if (b.ids.size() >= capacity_rows_) events.push_back(flush(k));
      b.ids.push_back(v);
      b.rows.insert(b.rows.end(), rows.begin() + static_cast<std::ptrdiff_t>(i * layout_.dim),
                    rows.begin() + static_cast<std::ptrdiff_t>((i + 1) * layout_.dim));
      ++buffered_rows_;
      peak_rows_ = std::max(peak_rows_, buffered_rows_);
    }
    return events;
  }

  std::vector<PartitionManifest> flush_all() {
    for (std::uint32_t k = 0; k < layout_.partitions; ++k)
      if (!buffers_[k].ids.empty()) flush(k);
    return manifests_;
  }

 private:
  struct Buffer {
    std::vector<VertexId> ids;
    std::vector<float> rows;
  };

  FlushEvent flush(std::uint32_t k) {
    auto& b = buffers_[k];
    std::vector<std::uint32_t> order(b.ids.size());
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::uint32_t x, std::uint32_t y) { return b.ids[x] < b.ids[y]; });
    std::string name;
    if (layout_.dtype == DType::f32) {
      name = detail::write_spill_raw(manifests_[k], b.ids, std::as_bytes(std::span<const float>(b.rows)), layout_.dim,
                                     DType::f32, dir_, io_, counters_, order);
    } else {
      std::vector<Half> h(b.rows.size());
      std::transform(b.rows.begin(), b.rows.end(), h.begin(), float_to_half);
      name = detail::write_spill_raw(manifests_[k], b.ids, std::as_bytes(std::span<const Half>(h)), layout_.dim,
                                     DType::f16, dir_, io_, counters_, order);
    }
    FlushEvent ev{k, name, b.ids.size()};
    rows_written_ += b.ids.size();
    buffered_rows_ -= b.ids.size();
    b.ids.clear();
    b.rows.clear();
    return ev;
  }

  fs::path dir_;
  MatrixLayout layout_;
  IoMode io_;
  IoCounters* counters_;
  std::uint64_t capacity_rows_;
  std::vector<std::uint8_t> seen_;
  std::vector<Buffer> buffers_;
  std::vector<PartitionManifest> manifests_;
  std::uint64_t buffered_rows_ = 0;
  std::uint64_t peak_rows_ = 0;
  std::uint64_t rows_written_ = 0;
};

struct WriterStats {
  std::uint64_t batches = 0;
  std::uint64_t rows = 0;
  std::uint64_t flushes = 0;
  bool completed = false;
};

/// Writer stage. On an error item or a local failure the partially written
/// directory is removed and the error rethrown.
inline WriterStats run_writer(WriteQueue& in, SpillBufferSet& buffers) {
  WriterStats stats;
  auto discard = [&] {
    std::error_code ec;
    fs::remove_all(buffers.dir(), ec);
  };
  try {
    while (auto item = in.pop()) {
      if (auto* batch = std::get_if<OutputBatch>(&*item)) {
        require(batch->dim == buffers.layout().dim, Errc::dim_mismatch, "output batch width differs from writer layout");
        stats.flushes += buffers.scatter(batch->ids, batch->rows).size();
        stats.rows += batch->ids.size();
        ++stats.batches;
      } else if (std::holds_alternative<EndOfLayer>(*item)) {
        const auto before = buffers.rows_written();
        buffers.flush_all();
        stats.flushes += buffers.rows_written() > before ? 1 : 0;
        stats.completed = true;
        return stats;
      } else {
        discard();
        std::rethrow_exception(std::get<std::exception_ptr>(*item));
      }
    }
  } catch (...) {
    in.close();
    discard();
    throw;
  }
  // Queue closed without an end marker: the pipeline is being torn down.
  discard();
  return stats;
}

}  // namespace pushgnn
