// SPDX-License-Identifier: Apache-2.0
//
// On-disk formats: CSR topology, in-degree array, sorted spill files,
// partition manifests and model weights. Plus edge-list ingestion and the
// seeded synthetic graph generators used by tests and benchmarks.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pushgnn/common.hpp"
#include "pushgnn/io.hpp"

namespace pushgnn {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr const char* kTopologyFile = "topology.csr";
inline constexpr const char* kInDegreeFile = "in_degree.bin";
inline constexpr const char* kFeaturesDir = "features";
inline constexpr const char* kLayoutFile = "layout";
inline constexpr const char* kManifestFile = "manifest";

// ---------------------------------------------------------------------------
// Topology

/// Out-edge CSR plus in-degrees. Neighbor lists are sorted per source.
struct GraphCSR {
  std::uint64_t num_vertices = 0;
  std::vector<std::uint64_t> offsets{0};
  std::vector<VertexId> neighbors;
  std::vector<std::uint32_t> in_degrees;

  [[nodiscard]] std::uint64_t num_edges() const { return neighbors.size(); }
  [[nodiscard]] std::uint64_t out_degree(VertexId v) const { return offsets[v + 1] - offsets[v]; }
  [[nodiscard]] std::span<const VertexId> out_neighbors(VertexId v) const {
    return {neighbors.data() + offsets[v], static_cast<std::size_t>(out_degree(v))};
  }
  [[nodiscard]] std::uint32_t max_in_degree() const {
    return in_degrees.empty() ? 0 : *std::max_element(in_degrees.begin(), in_degrees.end());
  }
  friend bool operator==(const GraphCSR&, const GraphCSR&) = default;
};

inline std::vector<std::uint32_t> count_in_degrees(std::uint64_t n, std::span<const VertexId> neighbors) {
  std::vector<std::uint32_t> deg(n, 0);
  for (VertexId v : neighbors) ++deg[v];
  return deg;
}

inline void validate(const GraphCSR& g) {
  const auto n = g.num_vertices;
  require(g.offsets.size() == n + 1, Errc::invalid_graph, "offsets length must be |V|+1");
  require(g.offsets.front() == 0, Errc::invalid_graph, "offsets[0] must be 0");
  require(g.offsets.back() == g.neighbors.size(), Errc::invalid_graph, "offsets[|V|] must equal |E|");
  for (std::uint64_t v = 0; v < n; ++v) {
    if (g.offsets[v] > g.offsets[v + 1])
      fail(Errc::offsets_not_monotonic, "offsets decrease at vertex " + std::to_string(v));
    for (auto e = g.offsets[v]; e < g.offsets[v + 1]; ++e) {
      require(g.neighbors[e] < n, Errc::invalid_graph, "neighbor id out of range at edge " + std::to_string(e));
      if (e > g.offsets[v])
        require(g.neighbors[e - 1] < g.neighbors[e], Errc::invalid_graph,
                "neighbors of vertex " + std::to_string(v) + " not strictly ascending");
    }
  }
  require(g.in_degrees.size() == n, Errc::invalid_graph, "in_degrees length must be |V|");
  require(count_in_degrees(n, g.neighbors) == g.in_degrees, Errc::invalid_graph,
          "in_degrees disagree with neighbor array");
}

/// Builds a CSR from an edge list: sorts by (src, dst) and drops duplicates.
/// Self-loops are kept.
inline GraphCSR csr_from_edges(std::uint64_t n, std::vector<std::pair<VertexId, VertexId>> edges) {
  for (const auto& [s, d] : edges)
    require(s < n && d < n, Errc::out_of_range, "edge (" + std::to_string(s) + "," + std::to_string(d) + ") outside [0," + std::to_string(n) + ")");
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  GraphCSR g;
  g.num_vertices = n;
  g.offsets.assign(n + 1, 0);
  g.neighbors.reserve(edges.size());
  for (const auto& [s, d] : edges) {
    ++g.offsets[s + 1];
    g.neighbors.push_back(d);
  }
  std::partial_sum(g.offsets.begin(), g.offsets.end(), g.offsets.begin());
  g.in_degrees = count_in_degrees(n, g.neighbors);
  return g;
}

struct TopologyHeader {
  std::uint64_t num_vertices = 0;
  std::uint64_t num_edges = 0;
  std::uint8_t id_width = 4;

  [[nodiscard]] std::uint64_t offsets_pos() const { return kAlignment; }
  [[nodiscard]] std::uint64_t neighbors_pos() const { return kAlignment + align_up((num_vertices + 1) * 8); }
  [[nodiscard]] std::uint64_t file_size() const { return neighbors_pos() + align_up(num_edges * id_width); }
};

inline TopologyHeader parse_topology_header(std::span<const std::byte> page, const std::string& what) {
  HeaderReader r(page, what);
  r.expect_magic("ACSR");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion) fail(Errc::version_mismatch, what + ": version " + std::to_string(version));
  TopologyHeader h;
  h.num_vertices = r.get<std::uint64_t>();
  h.num_edges = r.get<std::uint64_t>();
  h.id_width = r.get<std::uint8_t>();
  require(h.id_width == 4 || h.id_width == 8, Errc::malformed_input, what + ": id_width must be 4 or 8");
  return h;
}

inline std::uint64_t in_degree_file_size(std::uint64_t n) { return kAlignment + align_up(n * 4); }

/// Writes topology.csr and in_degree.bin into `dir`.
inline void write_csr(const GraphCSR& g, const fs::path& dir) {
  validate(g);
  fs::create_directories(dir);
  TopologyHeader h{g.num_vertices, g.num_edges(), static_cast<std::uint8_t>(g.num_vertices < (1ull << 32) ? 4 : 8)};
  {
    std::vector<std::byte> buf(h.file_size(), std::byte{0});
    HeaderWriter w;
    w.magic("ACSR").put(kFormatVersion).put(h.num_vertices).put(h.num_edges).put(h.id_width);
    std::copy(w.bytes().begin(), w.bytes().end(), buf.begin());
    std::memcpy(buf.data() + h.offsets_pos(), g.offsets.data(), g.offsets.size() * 8);
    std::byte* nb = buf.data() + h.neighbors_pos();
    if (h.id_width == 4) {
      for (std::size_t e = 0; e < g.neighbors.size(); ++e) {
        const auto v = static_cast<std::uint32_t>(g.neighbors[e]);
        std::memcpy(nb + e * 4, &v, 4);
      }
    } else {
      std::memcpy(nb, g.neighbors.data(), g.neighbors.size() * 8);
    }
    File::create(dir / kTopologyFile, IoMode::buffered).write_at(buf, 0);
  }
  {
    std::vector<std::byte> buf(in_degree_file_size(g.num_vertices), std::byte{0});
    HeaderWriter w;
    w.magic("AIND").put(kFormatVersion).put(g.num_vertices);
    std::copy(w.bytes().begin(), w.bytes().end(), buf.begin());
    std::memcpy(buf.data() + kAlignment, g.in_degrees.data(), g.in_degrees.size() * 4);
    File::create(dir / kInDegreeFile, IoMode::buffered).write_at(buf, 0);
  }
}

inline std::vector<std::uint32_t> read_in_degrees(const fs::path& dir, IoCounters* counters = nullptr) {
  const fs::path p = dir / kInDegreeFile;
  File f = File::open_read(p, IoMode::buffered);
  std::vector<std::byte> page(kAlignment);
  const auto got = f.read_at(page, 0);
  page.resize(got);
  HeaderReader r(page, p.string());
  r.expect_magic("AIND");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion) fail(Errc::version_mismatch, p.string() + ": version " + std::to_string(version));
  const auto n = r.get<std::uint64_t>();
  std::vector<std::uint32_t> deg(n);
  f.read_exact({reinterpret_cast<std::byte*>(deg.data()), n * 4}, kAlignment);
  if (counters != nullptr) bump(counters->topology_bytes_read, kAlignment + n * 4);
  return deg;
}

/// Loads and validates the full topology of `dir` into memory.
inline GraphCSR read_csr(const fs::path& dir) {
  const fs::path p = dir / kTopologyFile;
  File f = File::open_read(p, IoMode::buffered);
  const std::uint64_t size = f.size();
  std::vector<std::byte> page(std::min<std::uint64_t>(size, kAlignment));
  f.read_exact(page, 0);
  const TopologyHeader h = parse_topology_header(page, p.string());
  if (size < h.neighbors_pos() + h.num_edges * h.id_width)
    fail(Errc::truncated, p.string() + ": file has " + std::to_string(size) + " bytes, header implies more");

  GraphCSR g;
  g.num_vertices = h.num_vertices;
  g.offsets.resize(h.num_vertices + 1);
  f.read_exact({reinterpret_cast<std::byte*>(g.offsets.data()), g.offsets.size() * 8}, h.offsets_pos());
  require(g.offsets[0] == 0, Errc::invalid_graph, p.string() + ": offsets[0] != 0");
  for (std::uint64_t v = 0; v < h.num_vertices; ++v)
    if (g.offsets[v] > g.offsets[v + 1])
      fail(Errc::offsets_not_monotonic, p.string() + ": offsets decrease at vertex " + std::to_string(v));
  require(g.offsets.back() == h.num_edges, Errc::invalid_graph, p.string() + ": offsets[|V|] != |E|");

  g.neighbors.resize(h.num_edges);
  if (h.id_width == 4) {
    std::vector<std::uint32_t> tmp(h.num_edges);
    f.read_exact({reinterpret_cast<std::byte*>(tmp.data()), tmp.size() * 4}, h.neighbors_pos());
    std::copy(tmp.begin(), tmp.end(), g.neighbors.begin());
  } else {
    f.read_exact({reinterpret_cast<std::byte*>(g.neighbors.data()), g.neighbors.size() * 8}, h.neighbors_pos());
  }
  g.in_degrees = read_in_degrees(dir);
  require(g.in_degrees.size() == g.num_vertices, Errc::invalid_graph, "in-degree file vertex count differs from topology");
  validate(g);
  return g;
}

/// Out-of-core view of topology.csr serving contiguous vertex-range slices.
class TopologyFile {
 public:
  TopologyFile(const fs::path& dir, IoMode mode, IoCounters* counters)
      : file_(File::open_read(dir / kTopologyFile, mode, counters)), counters_(counters) {
    AlignedBuffer page(kAlignment);
    const auto got = file_.read_at(page.bytes(), 0);
    header_ = parse_topology_header({page.data(), got}, file_.path().string());
    if (file_.size() < header_.neighbors_pos() + header_.num_edges * header_.id_width)
      fail(Errc::truncated, file_.path().string() + ": shorter than header implies");
    if (counters_ != nullptr) bump(counters_->topology_bytes_read, got);
  }

  [[nodiscard]] const TopologyHeader& header() const { return header_; }

  /// Offsets rebased to zero (length range.size()+1) and the out-neighbors of
  /// every vertex in `range`.
  void read_slice(IdRange range, std::vector<std::uint64_t>& offsets, std::vector<VertexId>& neighbors) {
    require(range.end <= header_.num_vertices, Errc::out_of_range, "topology slice beyond |V|");
    std::uint64_t got = 0;
    auto off_bytes = read_aligned_range(file_, header_.offsets_pos() + range.begin * 8, (range.size() + 1) * 8, scratch_, got);
    account(got);
    offsets.resize(range.size() + 1);
    std::memcpy(offsets.data(), off_bytes.data(), offsets.size() * 8);
    const std::uint64_t first = offsets.front();
    const std::uint64_t last = offsets.back();
    for (std::size_t i = 1; i < offsets.size(); ++i)
      if (offsets[i - 1] > offsets[i]) fail(Errc::offsets_not_monotonic, "offsets decrease inside slice");
    for (auto& o : offsets) o -= first;

    neighbors.resize(last - first);
    if (neighbors.empty()) return;
    const std::uint64_t w = header_.id_width;
    auto nb = read_aligned_range(file_, header_.neighbors_pos() + first * w, (last - first) * w, scratch_, got);
    account(got);
    if (w == 4) {
      for (std::size_t e = 0; e < neighbors.size(); ++e) {
        std::uint32_t v;
        std::memcpy(&v, nb.data() + e * 4, 4);
        neighbors[e] = v;
      }
    } else {
      std::memcpy(neighbors.data(), nb.data(), neighbors.size() * 8);
    }
  }

 private:
  void account(std::uint64_t n) {
    if (counters_ != nullptr) bump(counters_->topology_bytes_read, n);
  }

  File file_;
  IoCounters* counters_;
  TopologyHeader header_;
  AlignedBuffer scratch_;
};

// ---------------------------------------------------------------------------
// Spill files

struct SpillHeader {
  VertexId min_id = 0;
  VertexId max_id = 0;
  std::uint64_t row_count = 0;
  std::uint32_t dim = 0;
  DType dtype = DType::f32;

  [[nodiscard]] std::uint64_t row_bytes() const { return std::uint64_t{dim} * dtype_size(dtype); }
  [[nodiscard]] std::uint64_t ids_pos() const { return kAlignment; }
  [[nodiscard]] std::uint64_t rows_pos() const { return kAlignment + align_up(row_count * 8); }
  [[nodiscard]] std::uint64_t rows_section_bytes() const { return row_count * row_bytes(); }
  [[nodiscard]] std::uint64_t file_size() const { return rows_pos() + align_up(rows_section_bytes()); }
};

inline SpillHeader parse_spill_header(std::span<const std::byte> page, const std::string& what) {
  HeaderReader r(page, what);
  r.expect_magic("ASPL");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion) fail(Errc::version_mismatch, what + ": version " + std::to_string(version));
  SpillHeader h;
  h.min_id = r.get<std::uint64_t>();
  h.max_id = r.get<std::uint64_t>();
  h.row_count = r.get<std::uint64_t>();
  h.dim = r.get<std::uint32_t>();
  const auto t = r.get<std::uint8_t>();
  require(t <= 1, Errc::malformed_input, what + ": unknown dtype tag " + std::to_string(t));
  h.dtype = static_cast<DType>(t);
  require(h.row_count > 0 && h.min_id <= h.max_id, Errc::malformed_input, what + ": inconsistent id bounds");
  return h;
}

/// Streams a file image through a bounded aligned staging buffer so that every
/// write is a multiple of kAlignment at an aligned offset.
class AlignedFileWriter {
 public:
  AlignedFileWriter(const fs::path& p, IoMode mode, IoCounters* counters, std::size_t stage_bytes = 1 << 20)
      : file_(File::create(p, mode, counters)), stage_(align_up(stage_bytes)) {
    std::memset(stage_.data(), 0, stage_.capacity());
  }

  void append(const void* data, std::size_t n) {
    const auto* src = static_cast<const std::byte*>(data);
    while (n > 0) {
      const std::size_t take = std::min(n, stage_.capacity() - fill_);
      std::memcpy(stage_.data() + fill_, src, take);
      fill_ += take;
      src += take;
      n -= take;
      if (fill_ == stage_.capacity()) drain();
    }
  }

  /// Zero-fills up to the next alignment boundary.
  void pad() {
    const std::uint64_t pos = written_ + fill_;
    const std::uint64_t target = align_up(pos);
    std::vector<std::byte> zeros(target - pos, std::byte{0});
    append(zeros.data(), zeros.size());
  }

  std::uint64_t finish() {
    pad();
    drain();
    file_.close();
    return written_;
  }

  [[nodiscard]] std::uint64_t position() const { return written_ + fill_; }

 private:
  void drain() {
    if (fill_ == 0) return;
    const std::size_t n = align_up(fill_);
    std::memset(stage_.data() + fill_, 0, n - fill_);
    file_.write_at({stage_.data(), n}, written_);
    written_ += n;
    fill_ = 0;
  }

  File file_;
  AlignedBuffer stage_;
  std::size_t fill_ = 0;
  std::uint64_t written_ = 0;
};

/// Writes a spill whose rows are given in `order` (indices into ids/rows).
/// Rows are raw storage elements of `dtype`.
inline std::uint64_t write_spill_file(const fs::path& p, std::span<const VertexId> ids, std::span<const std::byte> rows,
                                      std::uint32_t dim, DType dtype, std::span<const std::uint32_t> order,
                                      IoMode mode, IoCounters* counters) {
  require(!ids.empty(), Errc::precondition, "spill must hold at least one row");
  const std::uint64_t row_bytes = std::uint64_t{dim} * dtype_size(dtype);
  require(rows.size() == ids.size() * row_bytes, Errc::precondition, "rows not aligned with ids");
  auto id_at = [&](std::size_t i) { return order.empty() ? ids[i] : ids[order[i]]; };
  for (std::size_t i = 1; i < ids.size(); ++i)
    if (id_at(i - 1) >= id_at(i)) fail(Errc::precondition, "spill ids must be strictly ascending");

  SpillHeader h{id_at(0), id_at(ids.size() - 1), ids.size(), dim, dtype};
  AlignedFileWriter w(p, mode, counters);
  HeaderWriter hw;
  hw.magic("ASPL").put(kFormatVersion).put(h.min_id).put(h.max_id).put(h.row_count).put(h.dim).put(static_cast<std::uint8_t>(h.dtype));
  w.append(hw.bytes().data(), hw.bytes().size());
  w.pad();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const VertexId v = id_at(i);
    w.append(&v, 8);
  }
  w.pad();
  const std::uint64_t rows_start = w.position();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::size_t src = order.empty() ? i : order[i];
    w.append(rows.data() + src * row_bytes, row_bytes);
  }
  w.pad();
  const std::uint64_t rows_end = w.position();
  const std::uint64_t total = w.finish();
  if (counters != nullptr) {
    bump(counters->feature_bytes_written, rows_end - rows_start);
    bump(counters->spill_bytes_written, total);
  }
  return total;
}

struct SpillData {
  SpillHeader header;
  std::vector<VertexId> ids;
  std::vector<std::byte> rows;  // raw storage elements

  [[nodiscard]] std::vector<float> rows_f32() const {
    std::vector<float> out(header.row_count * header.dim);
    if (header.dtype == DType::f32) {
      std::memcpy(out.data(), rows.data(), rows.size());
    } else {
      for (std::size_t i = 0; i < out.size(); ++i) {
        Half h;
        std::memcpy(&h.bits, rows.data() + i * 2, 2);
        out[i] = half_to_float(h);
      }
    }
    return out;
  }
};

inline SpillHeader read_spill_header(const fs::path& p) {
  File f = File::open_read(p, IoMode::buffered);
  std::vector<std::byte> page(kAlignment);
  page.resize(f.read_at(page, 0));
  return parse_spill_header(page, p.string());
}

inline SpillData read_spill_file(const fs::path& p) {
  File f = File::open_read(p, IoMode::buffered);
  std::vector<std::byte> page(kAlignment);
  page.resize(f.read_at(page, 0));
  SpillData s;
  s.header = parse_spill_header(page, p.string());
  if (f.size() < s.header.rows_pos() + s.header.rows_section_bytes())
    fail(Errc::truncated, p.string() + ": shorter than header implies");
  s.ids.resize(s.header.row_count);
  f.read_exact({reinterpret_cast<std::byte*>(s.ids.data()), s.ids.size() * 8}, s.header.ids_pos());
  for (std::size_t i = 1; i < s.ids.size(); ++i)
    require(s.ids[i - 1] < s.ids[i], Errc::malformed_input, p.string() + ": ids not strictly ascending");
  require(s.ids.front() == s.header.min_id && s.ids.back() == s.header.max_id, Errc::malformed_input,
          p.string() + ": id bounds disagree with header");
  s.rows.resize(s.header.rows_section_bytes());
  f.read_exact(s.rows, s.header.rows_pos());
  return s;
}

// ---------------------------------------------------------------------------
// Partitioned matrix directories (features and layer embeddings)

/// Shape of a range-partitioned matrix directory.
struct MatrixLayout {
  std::uint64_t num_vertices = 0;
  std::uint32_t partitions = 1;
  std::uint32_t dim = 0;
  DType dtype = DType::f32;

  [[nodiscard]] std::uint64_t partition_width() const {
    return std::max<std::uint64_t>(1, (num_vertices + partitions - 1) / partitions);
  }
  [[nodiscard]] IdRange partition_range(std::uint32_t k) const {
    const auto w = partition_width();
    const auto lo = std::min(num_vertices, std::uint64_t{k} * w);
    return {lo, std::min(num_vertices, lo + w)};
  }
  [[nodiscard]] std::uint32_t partition_of(VertexId v) const { return static_cast<std::uint32_t>(v / partition_width()); }
  [[nodiscard]] std::uint64_t row_bytes() const { return std::uint64_t{dim} * dtype_size(dtype); }
  friend bool operator==(const MatrixLayout&, const MatrixLayout&) = default;
};

struct PartitionManifest {
  std::uint32_t partition_index = 0;
  IdRange id_range;
  std::vector<std::string> spill_names;
};

inline fs::path partition_dir(const fs::path& dir, std::uint32_t k) { return dir / ("part_" + std::to_string(k)); }

inline void write_layout(const fs::path& dir, const MatrixLayout& l) {
  std::ostringstream os;
  os << "num_vertices " << l.num_vertices << "\npartitions " << l.partitions << "\ndim " << l.dim << "\ndtype "
     << dtype_name(l.dtype) << "\n";
  write_text_file(dir / kLayoutFile, os.str());
}

inline MatrixLayout read_layout(const fs::path& dir) {
  std::istringstream is(read_text_file(dir / kLayoutFile));
  MatrixLayout l;
  std::string key;
  std::string value;
  int seen = 0;
  while (is >> key >> value) {
    if (key == "num_vertices") l.num_vertices = std::stoull(value);
    else if (key == "partitions") l.partitions = static_cast<std::uint32_t>(std::stoul(value));
    else if (key == "dim") l.dim = static_cast<std::uint32_t>(std::stoul(value));
    else if (key == "dtype") {
      require(value == "f32" || value == "f16", Errc::malformed_input, "layout dtype must be f32 or f16");
      l.dtype = value == "f32" ? DType::f32 : DType::f16;
    } else {
      fail(Errc::malformed_input, "unknown layout key " + key);
    }
    ++seen;
  }
  require(seen == 4 && l.partitions >= 1 && l.dim >= 1, Errc::malformed_input, (dir / kLayoutFile).string() + " incomplete");
  return l;
}

/// Creates an empty matrix directory: layout plus one empty manifest per partition.
inline std::vector<PartitionManifest> create_matrix_dir(const fs::path& dir, const MatrixLayout& l) {
  require(l.partitions >= 1, Errc::config, "need at least one partition");
  require(l.dim >= 1, Errc::config, "dim must be positive");
  fs::create_directories(dir);
  write_layout(dir, l);
  std::vector<PartitionManifest> out;
  for (std::uint32_t k = 0; k < l.partitions; ++k) {
    fs::create_directories(partition_dir(dir, k));
    write_text_file(partition_dir(dir, k) / kManifestFile, "");
    out.push_back({k, l.partition_range(k), {}});
  }
  return out;
}

inline std::vector<PartitionManifest> read_manifests(const fs::path& dir, const MatrixLayout& l) {
  std::vector<PartitionManifest> out;
  for (std::uint32_t k = 0; k < l.partitions; ++k) {
    PartitionManifest m{k, l.partition_range(k), {}};
    std::istringstream is(read_text_file(partition_dir(dir, k) / kManifestFile));
    std::string line;
    while (std::getline(is, line))
      if (!line.empty()) m.spill_names.push_back(line);
    out.push_back(std::move(m));
  }
  return out;
}

namespace detail {
inline std::string write_spill_raw(PartitionManifest& m, std::span<const VertexId> ids, std::span<const std::byte> rows,
                                   std::uint32_t dim, DType dtype, const fs::path& dir, IoMode mode, IoCounters* counters,
                                   std::span<const std::uint32_t> order = {}) {
  for (std::size_t i = 0; i < ids.size(); ++i)
    require(m.id_range.contains(ids[i]), Errc::precondition,
            "id " + std::to_string(ids[i]) + " outside partition " + std::to_string(m.partition_index));
  const std::string name = "spill_" + std::to_string(m.spill_names.size());
  const fs::path pdir = partition_dir(dir, m.partition_index);
  write_spill_file(pdir / name, ids, rows, dim, dtype, order, mode, counters);
  m.spill_names.push_back(name);
  std::string text;
  for (const auto& s : m.spill_names) text += s + "\n";
  write_text_file(pdir / kManifestFile, text);
  return name;
}
}  // namespace detail

/// Writes one sorted spill into partition `m` of matrix directory `dir` and
/// appends it to the manifest. Returns the spill name.
inline std::string write_spill(PartitionManifest& m, std::span<const VertexId> ids, std::span<const float> rows,
                               std::uint32_t dim, const fs::path& dir, IoMode mode = IoMode::buffered,
                               IoCounters* counters = nullptr) {
  return detail::write_spill_raw(m, ids, std::as_bytes(rows), dim, DType::f32, dir, mode, counters);
}

inline std::string write_spill(PartitionManifest& m, std::span<const VertexId> ids, std::span<const Half> rows,
                               std::uint32_t dim, const fs::path& dir, IoMode mode = IoMode::buffered,
                               IoCounters* counters = nullptr) {
  return detail::write_spill_raw(m, ids, std::as_bytes(rows), dim, DType::f16, dir, mode, counters);
}

/// Row-major |V| x dim matrix held fully in memory (test-scale paths only).
struct DenseMatrix {
  std::uint64_t rows = 0;
  std::uint32_t dim = 0;
  std::vector<float> values;

  [[nodiscard]] std::span<float> row(std::uint64_t r) { return {values.data() + r * dim, dim}; }
  [[nodiscard]] std::span<const float> row(std::uint64_t r) const { return {values.data() + r * dim, dim}; }
};

/// Reads every spill of a matrix directory into a dense matrix, checking that
/// each vertex appears exactly once.
inline DenseMatrix load_dense(const fs::path& dir) {
  const MatrixLayout l = read_layout(dir);
  DenseMatrix m{l.num_vertices, l.dim, std::vector<float>(l.num_vertices * l.dim, 0.0f)};
  std::vector<std::uint8_t> seen(l.num_vertices, 0);
  for (const auto& man : read_manifests(dir, l)) {
    for (const auto& name : man.spill_names) {
      const SpillData s = read_spill_file(partition_dir(dir, man.partition_index) / name);
      require(s.header.dim == l.dim, Errc::dim_mismatch, name + ": dim differs from layout");
      const auto rows = s.rows_f32();
      for (std::size_t i = 0; i < s.ids.size(); ++i) {
        const VertexId v = s.ids[i];
        require(man.id_range.contains(v), Errc::malformed_input, name + ": id outside partition range");
        require(seen[v] == 0, Errc::duplicate_vertex, "vertex " + std::to_string(v) + " stored twice");
        seen[v] = 1;
        std::copy_n(rows.begin() + static_cast<std::ptrdiff_t>(i * l.dim), l.dim, m.row(v).begin());
      }
    }
  }
  for (std::uint64_t v = 0; v < l.num_vertices; ++v)
    require(seen[v] != 0, Errc::coverage_gap, "vertex " + std::to_string(v) + " missing from " + dir.string());
  return m;
}

/// Writes a dense matrix as one sorted spill per non-empty partition.
inline void write_dense(const fs::path& dir, const DenseMatrix& m, DType dtype, std::uint32_t partitions,
                        IoMode mode = IoMode::buffered, IoCounters* counters = nullptr) {
  const MatrixLayout l{m.rows, partitions, m.dim, dtype};
  auto manifests = create_matrix_dir(dir, l);
  for (auto& man : manifests) {
    if (man.id_range.empty()) continue;
    std::vector<VertexId> ids(man.id_range.size());
    std::iota(ids.begin(), ids.end(), man.id_range.begin);
    std::span<const float> rows(m.values.data() + man.id_range.begin * m.dim, man.id_range.size() * m.dim);
    if (dtype == DType::f32) {
      write_spill(man, ids, rows, m.dim, dir, mode, counters);
    } else {
      std::vector<Half> h(rows.size());
      std::transform(rows.begin(), rows.end(), h.begin(), float_to_half);
      write_spill(man, ids, std::span<const Half>(h), m.dim, dir, mode, counters);
    }
  }
}

// ---------------------------------------------------------------------------
// Model weights

enum class ModelKind : std::uint8_t { gcn = 0, sage = 1, gin = 2 };

inline std::string_view model_name(ModelKind k) {
  switch (k) {
    case ModelKind::gcn: return "gcn";
    case ModelKind::sage: return "sage";
    case ModelKind::gin: return "gin";
  }
  return "?";
}

inline ModelKind parse_model(std::string_view s) {
  if (s == "gcn") return ModelKind::gcn;
  if (s == "sage") return ModelKind::sage;
  if (s == "gin") return ModelKind::gin;
  fail(Errc::config, "unknown model '" + std::string(s) + "' (gcn|sage|gin)");
}

/// Dense layer y = W x + b with W stored out_dim x in_dim, row-major.
struct LayerWeights {
  std::uint32_t in_dim = 0;
  std::uint32_t out_dim = 0;
  std::vector<float> weight;
  std::vector<float> bias;
  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct ModelWeights {
  ModelKind kind = ModelKind::gcn;
  float gin_epsilon = 0.0f;
  std::vector<LayerWeights> layers;

  /// Width of the aggregate a layer consumes for an embedding of width `d`.
  [[nodiscard]] std::uint32_t agg_dim(std::uint32_t d) const { return kind == ModelKind::sage ? 2 * d : d; }
  friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

/// Checks the layer dimension chain starting from `feature_dim`.
inline void validate_weights(const ModelWeights& w, std::uint32_t feature_dim) {
  require(!w.layers.empty(), Errc::config, "model needs at least one layer");
  std::uint32_t d = feature_dim;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& L = w.layers[l];
    require(L.in_dim == w.agg_dim(d), Errc::dim_mismatch,
            "layer " + std::to_string(l) + " expects input width " + std::to_string(L.in_dim) + " but receives " +
                std::to_string(w.agg_dim(d)));
    require(L.out_dim >= 1 && L.weight.size() == std::size_t{L.in_dim} * L.out_dim && L.bias.size() == L.out_dim,
            Errc::dim_mismatch, "layer " + std::to_string(l) + " has inconsistent weight sizes");
    d = L.out_dim;
  }
}

inline void write_weights(const ModelWeights& w, const fs::path& p) {
  HeaderWriter hw;
  hw.magic("AWTS").put(kFormatVersion).put(static_cast<std::uint8_t>(w.kind)).put(static_cast<std::uint32_t>(w.layers.size())).put(w.gin_epsilon);
  for (const auto& L : w.layers) {
    require(L.weight.size() == std::size_t{L.in_dim} * L.out_dim && L.bias.size() == L.out_dim, Errc::dim_mismatch,
            "inconsistent layer sizes");
    hw.put(L.in_dim).put(L.out_dim);
    for (float x : L.weight) hw.put(x);
    for (float x : L.bias) hw.put(x);
  }
  File::create(p, IoMode::buffered).write_at(hw.bytes(), 0);
}

inline ModelWeights read_weights(const fs::path& p) {
  File f = File::open_read(p, IoMode::buffered);
  std::vector<std::byte> buf(f.size());
  f.read_exact(buf, 0);
  HeaderReader r(buf, p.string());
  r.expect_magic("AWTS");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion) fail(Errc::version_mismatch, p.string() + ": version " + std::to_string(version));
  ModelWeights w;
  const auto kind = r.get<std::uint8_t>();
  require(kind <= 2, Errc::malformed_input, p.string() + ": unknown model kind");
  w.kind = static_cast<ModelKind>(kind);
  const auto layers = r.get<std::uint32_t>();
  w.gin_epsilon = r.get<float>();
  for (std::uint32_t l = 0; l < layers; ++l) {
    LayerWeights L;
    L.in_dim = r.get<std::uint32_t>();
    L.out_dim = r.get<std::uint32_t>();
    L.weight.resize(std::size_t{L.in_dim} * L.out_dim);
    for (auto& x : L.weight) x = r.get<float>();
    L.bias.resize(L.out_dim);
    for (auto& x : L.bias) x = r.get<float>();
    w.layers.push_back(std::move(L));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Deterministic random numbers (independent of standard-library distribution
// implementations so generated files are stable across toolchains).

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64); }
  /// Uniform double in [0, 1).
  double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  float symmetric() { return static_cast<float>(2.0 * unit() - 1.0); }

 private:
  std::uint64_t state_;
};

/// Glorot-uniform weights for a model of the given kind. `dims` lists the
/// embedding widths: input feature dim, hidden dims..., output dim.
inline ModelWeights random_weights(ModelKind kind, std::span<const std::uint32_t> dims, std::uint64_t seed,
                                   float gin_epsilon = 0.0f) {
  require(dims.size() >= 2, Errc::config, "need input and output dims");
  SplitMix64 rng(seed);
  ModelWeights w;
  w.kind = kind;
  w.gin_epsilon = gin_epsilon;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    LayerWeights L;
    L.in_dim = w.agg_dim(dims[l]);
    L.out_dim = dims[l + 1];
    const double limit = std::sqrt(6.0 / (L.in_dim + L.out_dim));
    L.weight.resize(std::size_t{L.in_dim} * L.out_dim);
    for (auto& x : L.weight) x = static_cast<float>(limit * (2.0 * rng.unit() - 1.0));
    L.bias.resize(L.out_dim);
    for (auto& x : L.bias) x = static_cast<float>(0.1 * (2.0 * rng.unit() - 1.0));
    w.layers.push_back(std::move(L));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Ingestion and generation

struct CsrSummary {
  std::uint64_t num_vertices = 0;
  std::uint64_t num_edges = 0;
  std::uint32_t max_in_degree = 0;
  std::uint64_t self_loops = 0;
};

inline CsrSummary summarize(const GraphCSR& g) {
  CsrSummary s{g.num_vertices, g.num_edges(), g.max_in_degree(), 0};
  for (VertexId u = 0; u < g.num_vertices; ++u)
    for (VertexId v : g.out_neighbors(u)) s.self_loops += (u == v);
  return s;
}

/// Parses "src dst" lines. Blank lines and lines starting with '#' are skipped.
inline std::vector<std::pair<VertexId, VertexId>> parse_edge_list(std::istream& in, std::uint64_t num_vertices) {
  std::vector<std::pair<VertexId, VertexId>> edges;
  std::string line;
  std::uint64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const char* p = line.data();
    const char* end = p + line.size();
    auto skip_ws = [&] {
      while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
    };
    skip_ws();
    if (p == end || *p == '#') continue;
    VertexId ids[2];
    for (auto& id : ids) {
      skip_ws();
      auto [next, ec] = std::from_chars(p, end, id);
      if (ec != std::errc{}) fail(Errc::malformed_input, "edge list line " + std::to_string(lineno) + ": '" + line + "'");
      p = next;
    }
    skip_ws();
    if (p != end) fail(Errc::malformed_input, "edge list line " + std::to_string(lineno) + ": trailing text");
    if (ids[0] >= num_vertices || ids[1] >= num_vertices)
      fail(Errc::out_of_range, "edge list line " + std::to_string(lineno) + ": id outside [0," + std::to_string(num_vertices) + ")");
    edges.emplace_back(ids[0], ids[1]);
  }
  return edges;
}

inline CsrSummary ingest_edge_list(const fs::path& edges, std::uint64_t num_vertices, const fs::path& out) {
  std::ifstream in(edges);
  require(static_cast<bool>(in), Errc::io, "cannot open " + edges.string());
  const GraphCSR g = csr_from_edges(num_vertices, parse_edge_list(in, num_vertices));
  write_csr(g, out);
  return summarize(g);
}

enum class GeneratorKind { uniform, preferential_attachment };

struct GeneratorParams {
  GeneratorKind kind = GeneratorKind::uniform;
  std::uint64_t num_vertices = 0;
  std::uint32_t avg_degree = 0;
  std::uint32_t feature_dim = 0;
  std::uint64_t seed = 0;
  DType dtype = DType::f32;
  std::uint32_t partitions = 8;
};

/// Topology only. Uniform draws |V|*avg_degree independent (src, dst) pairs;
/// preferential attachment lets each arriving vertex point at avg_degree
/// earlier vertices chosen proportionally to (in-degree + 1).
inline GraphCSR generate_topology(GeneratorKind kind, std::uint64_t n, std::uint32_t avg_degree, std::uint64_t seed) {
  require(n >= 1, Errc::config, "generator needs at least one vertex");
  SplitMix64 rng(seed);
  std::vector<std::pair<VertexId, VertexId>> edges;
  edges.reserve(n * avg_degree);
  if (kind == GeneratorKind::uniform) {
    for (std::uint64_t i = 0; i < n * avg_degree; ++i) {
      const VertexId s = rng.below(n);
      const VertexId d = rng.below(n);
      edges.emplace_back(s, d);
    }
  } else {
    // Each vertex appears once on arrival and once per received edge, so a
    // uniform pick from `urn` is proportional to in-degree + 1.
    std::vector<VertexId> urn;
    urn.reserve(n + n * avg_degree);
    std::vector<VertexId> picked;
    for (VertexId v = 0; v < n; ++v) {
      picked.clear();
      const std::uint64_t want = std::min<std::uint64_t>(avg_degree, v);
      for (std::uint64_t tries = 0; picked.size() < want && tries < 8 * want; ++tries) {
        const VertexId t = urn[rng.below(urn.size())];
        if (std::find(picked.begin(), picked.end(), t) == picked.end()) picked.push_back(t);
      }
      for (VertexId t : picked) {
        edges.emplace_back(v, t);
        urn.push_back(t);
      }
      urn.push_back(v);
    }
  }
  return csr_from_edges(n, std::move(edges));
}

inline DenseMatrix random_features(std::uint64_t n, std::uint32_t dim, std::uint64_t seed) {
  SplitMix64 rng(seed ^ 0x5eedfea7u);
  DenseMatrix m{n, dim, std::vector<float>(n * dim)};
  for (auto& x : m.values) x = rng.symmetric();
  return m;
}

/// Writes topology plus a partitioned feature matrix under `out`.
inline CsrSummary generate_synthetic(const GeneratorParams& p, const fs::path& out) {
  require(p.feature_dim >= 1, Errc::config, "feature_dim must be positive");
  const GraphCSR g = generate_topology(p.kind, p.num_vertices, p.avg_degree, p.seed);
  write_csr(g, out);
  write_dense(out / kFeaturesDir, random_features(p.num_vertices, p.feature_dim, p.seed), p.dtype, p.partitions);
  return summarize(g);
}

}  // namespace pushgnn
