// SPDX-License-Identifier: Apache-2.0
//
// Pseudo-sequential graph reader. Each chunk is a contiguous vertex range with
// its CSR slice and its feature rows; rows are gathered from every sorted spill
// overlapping the range with one aligned positioned read per spill and merged
// by id in memory.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <queue>
#include <span>
#include <unordered_map>
#include <vector>

#include "pushgnn/bounded_queue.hpp"
#include "pushgnn/common.hpp"
#include "pushgnn/io.hpp"
#include "pushgnn/storage.hpp"

namespace pushgnn {

struct Chunk {
  IdRange range;
  std::vector<std::uint64_t> offsets;  // rebased to 0, length range.size() + 1
  std::vector<VertexId> neighbors;
  std::uint32_t dim = 0;
  std::vector<float> features;  // range.size() x dim, ascending id

  [[nodiscard]] std::span<const VertexId> out_neighbors(std::size_t local) const {
    return {neighbors.data() + offsets[local], static_cast<std::size_t>(offsets[local + 1] - offsets[local])};
  }
  [[nodiscard]] std::span<const float> feature_row(std::size_t local) const {
    return {features.data() + local * dim, dim};
  }
};

/// Tiles [0, num_vertices) with ranges of floor(budget / row_bytes) vertices
/// (at least one).
inline std::vector<IdRange> plan_chunks(std::uint64_t num_vertices, std::uint32_t dim, DType dtype,
                                        std::uint64_t chunk_budget) {
  require(dim > 0, Errc::config, "feature dim must be positive");
  const std::uint64_t row_bytes = std::uint64_t{dim} * dtype_size(dtype);
  const std::uint64_t per_chunk = std::max<std::uint64_t>(1, chunk_budget / row_bytes);
  std::vector<IdRange> plan;
  plan.reserve((num_vertices + per_chunk - 1) / per_chunk);
  for (VertexId b = 0; b < num_vertices; b += per_chunk) plan.push_back({b, std::min(num_vertices, b + per_chunk)});
  return plan;
}

struct SpillDescriptor {
  fs::path path;
  VertexId min_id = 0;
  VertexId max_id = 0;
  std::uint64_t row_count = 0;
  std::uint32_t dim = 0;
  DType dtype = DType::f32;
  bool open = false;
};

struct ReaderOptions {
  IoMode io = IoMode::direct;
  std::size_t max_open_files = 128;
};

/// Spill index of one matrix directory with lazily opened, LRU-capped handles.
class SpillSet {
 public:
  SpillSet(const fs::path& dir, ReaderOptions opts, IoCounters* counters)
      : layout_(read_layout(dir)), opts_(opts), counters_(counters) {
    require(opts_.max_open_files >= 1, Errc::config, "max_open_files must be >= 1");
    AlignedBuffer page(kAlignment);
    for (const auto& man : read_manifests(dir, layout_)) {
      auto& list = partitions_.emplace_back();
      for (const auto& name : man.spill_names) {
        const fs::path p = partition_dir(dir, man.partition_index) / name;
        File f = File::open_read(p, opts_.io, counters_);
        const auto got = f.read_at(page.bytes(), 0);
        account_index(got);
        const SpillHeader h = parse_spill_header({page.data(), got}, p.string());
        if (h.dim != layout_.dim || h.dtype != layout_.dtype)
          fail(Errc::dim_mismatch, p.string() + ": dim/dtype differ from the directory layout");
        require(man.id_range.contains(h.min_id) && man.id_range.contains(h.max_id), Errc::malformed_input,
                p.string() + ": ids outside partition range");
        list.push_back({p, h.min_id, h.max_id, h.row_count, h.dim, h.dtype, false});
      }
      std::stable_sort(list.begin(), list.end(), [](const auto& a, const auto& b) { return a.min_id < b.min_id; });
    }
  }

  [[nodiscard]] const MatrixLayout& layout() const { return layout_; }
  [[nodiscard]] const std::vector<std::vector<SpillDescriptor>>& partitions() const { return partitions_; }

  [[nodiscard]] std::uint64_t total_row_bytes() const {
    std::uint64_t n = 0;
    for (const auto& part : partitions_)
      for (const auto& d : part) n += d.row_count * std::uint64_t{d.dim} * dtype_size(d.dtype);
    return n;
  }
  [[nodiscard]] std::size_t open_count() const { return open_.size(); }

  struct OpenSpill {
    File file;
    SpillHeader header;
    std::vector<VertexId> ids;
    std::uint64_t last_use = 0;
  };

  OpenSpill& acquire(std::size_t part, std::size_t idx) {
    const std::uint64_t key = (std::uint64_t{part} << 32) | idx;
    auto it = open_.find(key);
    if (it == open_.end()) {
      if (open_.size() >= opts_.max_open_files) close_lru();
      SpillDescriptor& d = partitions_[part][idx];
      OpenSpill s{File::open_read(d.path, opts_.io, counters_), {}, {}, 0};
      s.header = {d.min_id, d.max_id, d.row_count, d.dim, d.dtype};
      std::uint64_t got = 0;
      auto bytes = read_aligned_range(s.file, s.header.ids_pos(), d.row_count * 8, scratch_, got);
      account_index(got);
      s.ids.resize(d.row_count);
      std::memcpy(s.ids.data(), bytes.data(), d.row_count * 8);
      if (s.ids.front() != d.min_id || s.ids.back() != d.max_id || !std::is_sorted(s.ids.begin(), s.ids.end()))
        fail(Errc::malformed_input, d.path.string() + ": id array disagrees with header");
      d.open = true;
      if (counters_ != nullptr) bump(counters_->spills_opened, 1);
      it = open_.emplace(key, std::move(s)).first;
    }
    it->second.last_use = ++clock_;
    return it->second;
  }

 private:
  void close_lru() {
    auto victim = std::min_element(open_.begin(), open_.end(),
                                   [](const auto& a, const auto& b) { return a.second.last_use < b.second.last_use; });
    partitions_[victim->first >> 32][victim->first & 0xffffffffu].open = false;
    open_.erase(victim);
  }
  void account_index(std::uint64_t n) {
    if (counters_ != nullptr) bump(counters_->index_bytes_read, n);
  }

  MatrixLayout layout_;
  ReaderOptions opts_;
  IoCounters* counters_;
  std::vector<std::vector<SpillDescriptor>> partitions_;
  std::unordered_map<std::uint64_t, OpenSpill> open_;
  std::uint64_t clock_ = 0;
  AlignedBuffer scratch_;
};

class ChunkReader {
 public:
  ChunkReader(SpillSet& spills, TopologyFile& topology, IoCounters* counters)
      : spills_(spills), topology_(topology), counters_(counters) {
    require(topology_.header().num_vertices == spills_.layout().num_vertices, Errc::shape_mismatch,
            "feature matrix and topology disagree on |V|");
  }

  Chunk read_chunk(IdRange range) {
    const MatrixLayout& l = spills_.layout();
    require(range.end <= l.num_vertices && !range.empty(), Errc::out_of_range, "chunk range outside [0, |V|)");
    Chunk c;
    c.range = range;
    c.dim = l.dim;
    topology_.read_slice(range, c.offsets, c.neighbors);

    // Gather one contiguous slice per overlapping spill.
    struct Slice {
      std::vector<VertexId> ids;  // copied: the handle may be closed by a later acquire
      std::vector<float> rows;
    };
    std::vector<Slice> slices;
    const std::uint64_t row_bytes = l.row_bytes();
    const auto first_part = l.partition_of(range.begin);
    const auto last_part = l.partition_of(range.end - 1);
    for (std::uint32_t k = first_part; k <= last_part && k < spills_.partitions().size(); ++k) {
      const auto& descs = spills_.partitions()[k];
      for (std::size_t i = 0; i < descs.size(); ++i) {
        if (descs[i].min_id >= range.end) break;  // sorted by min_id
        if (!range.overlaps_closed(descs[i].min_id, descs[i].max_id)) continue;
        auto& s = spills_.acquire(k, i);
        const auto lo = std::lower_bound(s.ids.begin(), s.ids.end(), range.begin);
        const auto hi = std::lower_bound(lo, s.ids.end(), range.end);
        if (lo == hi) continue;
        const auto r0 = static_cast<std::uint64_t>(lo - s.ids.begin());
        const auto r1 = static_cast<std::uint64_t>(hi - s.ids.begin());
        std::uint64_t got = 0;
        auto bytes = read_aligned_range(s.file, s.header.rows_pos() + r0 * row_bytes, (r1 - r0) * row_bytes, scratch_, got);
        if (counters_ != nullptr) {
          bump(counters_->feature_bytes_read, got);
          bump(counters_->spill_read_calls, 1);
        }
        Slice sl{std::vector<VertexId>(lo, hi), std::vector<float>((r1 - r0) * l.dim)};
        decode_rows(bytes, l.dtype, sl.rows);
        slices.push_back(std::move(sl));
      }
    }

    // k-way merge by id; output must be exactly range.begin, range.begin+1, ...
    c.features.resize(range.size() * l.dim);
    using Cursor = std::pair<VertexId, std::size_t>;  // (id, slice index)
    std::priority_queue<Cursor, std::vector<Cursor>, std::greater<>> heap;
    std::vector<std::size_t> pos(slices.size(), 0);
    for (std::size_t s = 0; s < slices.size(); ++s) heap.emplace(slices[s].ids[0], s);
    VertexId expect = range.begin;
    while (!heap.empty()) {
      const auto [id, s] = heap.top();
      heap.pop();
      if (id != expect) {
        if (id < expect) fail(Errc::duplicate_vertex, "vertex " + std::to_string(id) + " present in more than one spill");
        fail(Errc::coverage_gap, "vertex " + std::to_string(expect) + " missing from input spills");
      }
      std::copy_n(slices[s].rows.begin() + static_cast<std::ptrdiff_t>(pos[s] * l.dim), l.dim,
                  c.features.begin() + static_cast<std::ptrdiff_t>((id - range.begin) * l.dim));
      ++expect;
      if (++pos[s] < slices[s].ids.size()) heap.emplace(slices[s].ids[pos[s]], s);
    }
    if (expect != range.end) fail(Errc::coverage_gap, "vertex " + std::to_string(expect) + " missing from input spills");
    return c;
  }

 private:
  static void decode_rows(std::span<const std::byte> bytes, DType dtype, std::vector<float>& out) {
    if (dtype == DType::f32) {
      std::memcpy(out.data(), bytes.data(), out.size() * 4);
    } else {
      for (std::size_t i = 0; i < out.size(); ++i) {
        Half h;
        std::memcpy(&h.bits, bytes.data() + i * 2, 2);
        out[i] = half_to_float(h);
      }
    }
  }

  SpillSet& spills_;
  TopologyFile& topology_;
  IoCounters* counters_;
  AlignedBuffer scratch_;
};

using ChunkQueue = BoundedQueue<StageItem<Chunk>>;

/// Reader stage: emits chunks in plan order, then the end marker. Errors end
/// the stream as a terminal item. Returns early if the queue is closed.
inline void run_reader(ChunkReader& reader, std::span<const IdRange> plan, ChunkQueue& out) {
  try {
    for (const IdRange& r : plan)
      if (!out.push(reader.read_chunk(r))) return;
    out.push(EndOfLayer{});
  } catch (...) {
    out.push(std::current_exception());
  }
}

}  // namespace pushgnn
