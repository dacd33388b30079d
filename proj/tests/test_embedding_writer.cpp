// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <random>
#include <thread>

#include "pushgnn/chunk_reader.hpp"
#include "pushgnn/embedding_writer.hpp"
#include "test_util.hpp"

using namespace pushgnn;
using testutil::TempDir;

namespace {

std::vector<float> rows_for(std::span<const VertexId> ids, std::uint32_t dim) {
  std::vector<float> r;
  for (VertexId v : ids)
    for (std::uint32_t k = 0; k < dim; ++k) r.push_back(static_cast<float>(v) + 0.25f * static_cast<float>(k));
  return r;
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

}  // namespace

TEST_CASE("ids are routed to their id-range partition") {
  TempDir d;
  SpillBufferSet s(d / "out", MatrixLayout{10, 2, 2, DType::f32}, 1 << 20, IoMode::buffered, nullptr);
  const std::vector<VertexId> ids{1, 7, 3};
  CHECK(s.scatter(ids, rows_for(ids, 2)).empty());
  CHECK(s.buffered_rows(0) == 2);
  CHECK(s.buffered_rows(1) == 1);
}

TEST_CASE("third row into a two-row buffer flushes the first two sorted") {
  TempDir d;
  const std::uint32_t dim = 2;
  SpillBufferSet s(d / "out", MatrixLayout{10, 1, dim, DType::f32}, 2 * SpillBufferSet::entry_bytes(dim),
                   IoMode::buffered, nullptr);
  CHECK(s.capacity_rows() == 2);
  const std::vector<VertexId> ids{8, 2, 5};
  const auto ev = s.scatter(ids, rows_for(ids, dim));
  REQUIRE(ev.size() == 1);
  CHECK(ev[0].rows == 2);
  const SpillData sp = read_spill_file(partition_dir(d / "out", 0) / ev[0].spill_name);
  CHECK(sp.ids == std::vector<VertexId>{2, 8});
  CHECK(sp.rows_f32() == std::vector<float>{2, 2.25f, 8, 8.25f});
  CHECK(s.buffered_rows(0) == 1);
}

TEST_CASE("an empty partition gets no spill") {
  TempDir d;
  SpillBufferSet s(d / "out", MatrixLayout{10, 2, 1, DType::f32}, 1 << 20, IoMode::buffered, nullptr);
  const std::vector<VertexId> ids{0, 1, 2};
  s.scatter(ids, rows_for(ids, 1));
  const auto man = s.flush_all();
  CHECK(man[0].spill_names.size() == 1);
  CHECK(man[1].spill_names.empty());
  CHECK(read_manifests(d / "out", read_layout(d / "out"))[1].spill_names.empty());
}

TEST_CASE("a vertex written twice is fatal") {
  TempDir d;
  SpillBufferSet s(d / "out", MatrixLayout{10, 2, 1, DType::f32}, 1 << 20, IoMode::buffered, nullptr);
  const std::vector<VertexId> a{4};
  s.scatter(a, rows_for(a, 1));
  CHECK(code_of([&] { s.scatter(a, rows_for(a, 1)); }) == Errc::duplicate_vertex);
  const std::vector<VertexId> far{10};
  CHECK(code_of([&] { s.scatter(far, rows_for(far, 1)); }) == Errc::out_of_range);
  CHECK(code_of([&] { s.scatter(far, std::vector<float>{}); }) == Errc::dim_mismatch);
}

TEST_CASE("random graduation order: sorted spills, conservation, readback and bounded memory") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 12; ++trial) {
    TempDir d;
    const std::uint64_t n = 1 + rng() % 3000;
    const std::uint32_t dim = 1 + rng() % 9;
    const std::uint32_t parts = 1 + rng() % 6;
    const DType dt = trial % 3 == 2 ? DType::f16 : DType::f32;
    const std::uint64_t cap_rows = 1 + rng() % 200;
    IoCounters io;
    SpillBufferSet s(d / kFeaturesDir, MatrixLayout{n, parts, dim, dt}, cap_rows * SpillBufferSet::entry_bytes(dim),
                     IoMode::direct, &io);
    std::vector<VertexId> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t max_batch = 0;
    for (std::size_t i = 0; i < n;) {
      const std::size_t b = std::min<std::size_t>(n - i, 1 + rng() % 64);
      max_batch = std::max(max_batch, b);
      const std::span<const VertexId> ids(order.data() + i, b);
      s.scatter(ids, rows_for(ids, dim));
      i += b;
    }
    const auto man = s.flush_all();
    CHECK(s.rows_written() == n);
    CHECK(s.peak_buffered_bytes() <= (parts * cap_rows + max_batch) * SpillBufferSet::entry_bytes(dim));

    std::uint64_t total = 0;
    for (const auto& m : man) {
      for (const auto& name : m.spill_names) {
        const SpillData sp = read_spill_file(partition_dir(d / kFeaturesDir, m.partition_index) / name);
        REQUIRE(std::is_sorted(sp.ids.begin(), sp.ids.end()));
        REQUIRE(std::adjacent_find(sp.ids.begin(), sp.ids.end()) == sp.ids.end());
        for (VertexId v : sp.ids) REQUIRE(m.id_range.contains(v));
        total += sp.ids.size();
      }
    }
    CHECK(total == n);
    // Row bytes on disk stay close to the payload (alignment padding only).
    const double payload = static_cast<double>(n) * dim * dtype_size(dt);
    if (payload >= 1 << 20) CHECK(static_cast<double>(io.feature_bytes_written.load()) <= payload * 1.05);

    // The chunk reader sees every row exactly once, in id order.
    write_csr(csr_from_edges(n, {}), d.path());
    SpillSet spills(d / kFeaturesDir, ReaderOptions{IoMode::direct}, nullptr);
    TopologyFile topo(d.path(), IoMode::direct, nullptr);
    ChunkReader reader(spills, topo, nullptr);
    for (const IdRange r : plan_chunks(n, dim, dt, 4096)) {
      const Chunk c = reader.read_chunk(r);
      for (VertexId v = r.begin; v < r.end; ++v) {
        const std::vector<VertexId> one{v};
        const auto want = rows_for(one, dim);
        for (std::uint32_t k = 0; k < dim; ++k) {
          const float w = dt == DType::f32 ? want[k] : half_to_float(float_to_half(want[k]));
          REQUIRE(c.feature_row(v - r.begin)[k] == w);
        }
      }
    }
  }
}

TEST_CASE("large layer writes about n x dim x 4 bytes") {
  TempDir d;
  const std::uint64_t n = 40000;
  const std::uint32_t dim = 16;
  IoCounters io;
  SpillBufferSet s(d / "out", MatrixLayout{n, 4, dim, DType::f32}, 256 << 10, IoMode::direct, &io);
  std::vector<VertexId> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  std::shuffle(ids.begin(), ids.end(), std::mt19937_64(2));
  for (std::size_t i = 0; i < n; i += 1000) {
    const std::span<const VertexId> b(ids.data() + i, 1000);
    s.scatter(b, rows_for(b, dim));
  }
  s.flush_all();
  const double want = static_cast<double>(n) * dim * 4;
  CHECK(static_cast<double>(io.feature_bytes_written.load()) >= want);
  CHECK(static_cast<double>(io.feature_bytes_written.load()) <= want * 1.05);
  const DenseMatrix m = load_dense(d / "out");
  CHECK(m.row(12345)[3] == 12345.75f);
}

TEST_CASE("writer stage drains a capacity-one queue") {
  TempDir d;
  const std::uint64_t n = 500;
  SpillBufferSet s(d / "out", MatrixLayout{n, 3, 2, DType::f32}, 40 * SpillBufferSet::entry_bytes(2), IoMode::buffered,
                   nullptr);
  WriteQueue q(1);
  WriterStats stats;
  std::thread t([&] { stats = run_writer(q, s); });
  for (VertexId b = 0; b < n; b += 7) {
    OutputBatch ob;
    ob.dim = 2;
    for (VertexId v = b; v < std::min<VertexId>(n, b + 7); ++v) ob.ids.push_back(n - 1 - v);
    ob.rows = rows_for(ob.ids, 2);
    REQUIRE(q.push(std::move(ob)));
  }
  q.push(EndOfLayer{});
  t.join();
  CHECK(stats.completed);
  CHECK(stats.rows == n);
  CHECK(q.high_water() == 1);
  const DenseMatrix m = load_dense(d / "out");
  CHECK(m.row(321)[1] == 321.25f);
}

TEST_CASE("writer discards its directory on an upstream error") {
  TempDir d;
  SpillBufferSet s(d / "out", MatrixLayout{10, 1, 1, DType::f32}, SpillBufferSet::entry_bytes(1), IoMode::buffered,
                   nullptr);
  WriteQueue q(4);
  OutputBatch ob{{1, 2, 3}, 1, {1, 2, 3}};
  q.push(std::move(ob));  // flushes a spill before the error arrives
  q.push(std::make_exception_ptr(Error(Errc::io, "upstream failed")));
  CHECK(code_of([&] { run_writer(q, s); }) == Errc::io);
  CHECK_FALSE(fs::exists(d / "out"));
}

TEST_CASE("writer discards its directory on a local error") {
  TempDir d;
  SpillBufferSet s(d / "out", MatrixLayout{10, 1, 1, DType::f32}, 1 << 20, IoMode::buffered, nullptr);
  WriteQueue q(4);
  q.push(OutputBatch{{1}, 1, {1}});
  q.push(OutputBatch{{1}, 1, {1}});
  CHECK(code_of([&] { run_writer(q, s); }) == Errc::duplicate_vertex);
  CHECK_FALSE(fs::exists(d / "out"));
}

TEST_CASE("writer discards on teardown without an end marker") {
  TempDir d;
  SpillBufferSet s(d / "out", MatrixLayout{10, 1, 1, DType::f32}, 1 << 20, IoMode::buffered, nullptr);
  WriteQueue q(4);
  q.push(OutputBatch{{1}, 1, {1}});
  q.close();
  const WriterStats st = run_writer(q, s);
  CHECK_FALSE(st.completed);
  CHECK_FALSE(fs::exists(d / "out"));
}
