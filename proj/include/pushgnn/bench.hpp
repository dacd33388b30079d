// SPDX-License-Identifier: Apache-2.0
//
// Ablation driver (vertex ordering, eviction policy, hot budget) and a
// block-level simulation of gather-style feature reads for comparison with
// the broadcast reader's measured bytes.

#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <list>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "pushgnn/common.hpp"
#include "pushgnn/reorder.hpp"
#include "pushgnn/runtime.hpp"
#include "pushgnn/storage.hpp"

namespace pushgnn {

// ---------------------------------------------------------------------------
// Gather read simulation

struct GatherSimResult {
  std::uint64_t bytes_read = 0;
  std::uint64_t block_fetches = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t row_requests = 0;
};

/// Replays, destination by destination in id order, the fetch of every
/// in-neighbor's feature row at `block_bytes` granularity through an LRU
/// cache of `cache_budget` bytes. Only feature I/O is modeled.
inline GatherSimResult simulate_gather_reads(const GraphCSR& g, std::uint32_t dim, DType dtype, std::uint64_t block_bytes,
                                             std::uint64_t cache_budget) {
  require(block_bytes > 0, Errc::config, "block size must be positive");
  const std::uint64_t row = std::uint64_t{dim} * dtype_size(dtype);
  const std::uint64_t cache_blocks = cache_budget / block_bytes;

  std::vector<std::uint64_t> in_off(g.num_vertices + 1, 0);
  for (VertexId v : g.neighbors) ++in_off[v + 1];
  for (std::uint64_t v = 0; v < g.num_vertices; ++v) in_off[v + 1] += in_off[v];
  std::vector<VertexId> in_src(g.num_edges());
  {
    auto fill = in_off;
    for (VertexId u = 0; u < g.num_vertices; ++u)
      for (VertexId v : g.out_neighbors(u)) in_src[fill[v]++] = u;
  }

  GatherSimResult r;
  std::list<std::uint64_t> lru;  // front = most recent
  std::unordered_map<std::uint64_t, std::list<std::uint64_t>::iterator> where;
  auto touch = [&](std::uint64_t block) {
    if (auto it = where.find(block); it != where.end()) {
      lru.splice(lru.begin(), lru, it->second);
      ++r.cache_hits;
      return;
    }
    r.bytes_read += block_bytes;
    ++r.block_fetches;
    if (cache_blocks == 0) return;
    if (where.size() == cache_blocks) {
      where.erase(lru.back());
      lru.pop_back();
    }
    lru.push_front(block);
    where.emplace(block, lru.begin());
  };
  for (VertexId v = 0; v < g.num_vertices; ++v) {
    for (std::uint64_t e = in_off[v]; e < in_off[v + 1]; ++e) {
      ++r.row_requests;
      const std::uint64_t lo = in_src[e] * row;
      for (std::uint64_t b = lo / block_bytes; b <= (lo + row - 1) / block_bytes; ++b) touch(b);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Scenarios

enum class AblationKnob { ordering, eviction, hot_budget };

inline AblationKnob parse_knob(std::string_view s) {
  if (s == "ordering") return AblationKnob::ordering;
  if (s == "eviction") return AblationKnob::eviction;
  if (s == "hot_budget") return AblationKnob::hot_budget;
  fail(Errc::config, "unknown knob '" + std::string(s) + "' (ordering|eviction|hot_budget)");
}

inline std::string_view knob_name(AblationKnob k) {
  switch (k) {
    case AblationKnob::ordering: return "ordering";
    case AblationKnob::eviction: return "eviction";
    case AblationKnob::hot_budget: return "hot_budget";
  }
  return "?";
}

/// Vertex orderings compared by the ordering knob: original ids, a seeded
/// random permutation, and the greedy score ranking.
enum class OrderingKind { original, random, greedy };

inline OrderingKind parse_ordering(std::string_view s) {
  if (s == "og" || s == "original") return OrderingKind::original;
  if (s == "rnd" || s == "random") return OrderingKind::random;
  if (s == "greedy" || s == "score") return OrderingKind::greedy;
  fail(Errc::config, "unknown ordering '" + std::string(s) + "' (og|rnd|greedy)");
}

struct AblationScenario {
  std::string name = "ablation";
  GeneratorKind generator = GeneratorKind::preferential_attachment;
  std::uint64_t vertices = 10000;
  std::uint32_t avg_degree = 10;
  std::uint32_t feature_dim = 32;
  std::uint64_t graph_seed = 1;
  ModelKind model = ModelKind::gcn;
  std::vector<std::uint32_t> hidden{32};
  std::uint32_t out_dim = 8;
  std::uint64_t weight_seed = 2;
  float gin_epsilon = 0.0f;

  AblationKnob knob = AblationKnob::eviction;
  std::vector<std::string> values{"minpend", "lru", "rnd"};
  std::uint32_t repetitions = 1;  // run seed = seed + repetition index

  std::string ordering = "og";
  std::string eviction = "minpend";
  double hot_fraction = 0.05;
  std::uint64_t seed = 0;
  PipelineConfig pipeline;
  double tolerance = 1e-4;
  fs::path work_dir;
};

namespace detail {
inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T x{};
  is >> x;
  require(!is.fail() && is.eof(), Errc::config, "scenario key '" + key + "': bad number '" + v + "'");
  return x;
}
}  // namespace detail

/// Parses `key = value` lines; '#' starts a comment. Keys are listed in
/// scenarios/README.md.
inline AblationScenario parse_scenario(std::istream& in) {
  AblationScenario s;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    auto trim = [](std::string t) {
      t.erase(0, t.find_first_not_of(" \t\r"));
      t.erase(t.find_last_not_of(" \t\r") + 1);
      return t;
    };
    if (trim(line).empty()) continue;
    require(eq != std::string::npos, Errc::config, "scenario line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    using detail::parse_number;
    if (key == "name") s.name = val;
    else if (key == "generator") s.generator = val == "uniform" ? GeneratorKind::uniform
                                             : val == "pa"    ? GeneratorKind::preferential_attachment
                                                              : (fail(Errc::config, "generator must be uniform|pa"), s.generator);
    else if (key == "vertices") s.vertices = parse_number<std::uint64_t>(key, val);
    else if (key == "avg_degree") s.avg_degree = parse_number<std::uint32_t>(key, val);
    else if (key == "feature_dim") s.feature_dim = parse_number<std::uint32_t>(key, val);
    else if (key == "graph_seed") s.graph_seed = parse_number<std::uint64_t>(key, val);
    else if (key == "model") s.model = parse_model(val);
    else if (key == "hidden") {
      s.hidden.clear();
      for (const auto& h : detail::split_list(val)) s.hidden.push_back(parse_number<std::uint32_t>(key, h));
    } else if (key == "out_dim") s.out_dim = parse_number<std::uint32_t>(key, val);
    else if (key == "weight_seed") s.weight_seed = parse_number<std::uint64_t>(key, val);
    else if (key == "gin_epsilon") s.gin_epsilon = parse_number<float>(key, val);
    else if (key == "knob") s.knob = parse_knob(val);
    else if (key == "values") s.values = detail::split_list(val);
    else if (key == "repetitions") s.repetitions = parse_number<std::uint32_t>(key, val);
    else if (key == "ordering") s.ordering = val;
    else if (key == "eviction") s.eviction = val;
    else if (key == "hot_budget") s.hot_fraction = parse_number<double>(key, val);
    else if (key == "seed") s.seed = parse_number<std::uint64_t>(key, val);
    else if (key == "chunk") s.pipeline.chunk_budget = parse_number<std::uint64_t>(key, val);
    else if (key == "partitions") s.pipeline.partitions = parse_number<std::uint32_t>(key, val);
    else if (key == "queue_cap") s.pipeline.queue_capacity = parse_number<std::size_t>(key, val);
    else if (key == "direct_io") s.pipeline.io = val == "0" || val == "false" ? IoMode::buffered : IoMode::direct;
    else if (key == "tolerance") s.tolerance = parse_number<double>(key, val);
    else if (key == "work_dir") s.work_dir = val;
    else fail(Errc::config, "scenario line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  require(!s.values.empty(), Errc::config, "scenario needs at least one value");
  require(s.repetitions >= 1, Errc::config, "repetitions must be >= 1");
  // Validate every grid value up front.
  for (const auto& v : s.values) {
    if (s.knob == AblationKnob::ordering) parse_ordering(v);
    if (s.knob == AblationKnob::eviction) parse_eviction(v);
    if (s.knob == AblationKnob::hot_budget) detail::parse_number<double>("values", v);
  }
  parse_ordering(s.ordering);
  parse_eviction(s.eviction);
  return s;
}

inline AblationScenario parse_scenario_file(const fs::path& p) {
  std::ifstream in(p);
  require(static_cast<bool>(in), Errc::io, "cannot open scenario " + p.string());
  return parse_scenario(in);
}

struct AblationRow {
  std::string value;
  std::uint32_t repetition = 0;
  std::uint64_t seed = 0;
  double runtime_s = 0;
  std::uint64_t reloads = 0;
  std::uint64_t unique_reloads = 0;
  std::uint64_t evictions = 0;
  double mean_span = 0;         // mean over layers
  double mean_reload_pct = 0;   // mean over layers
  double compute_span = 0;      // edge-message replay of the ordering used
  std::uint64_t bytes_read = 0;
  std::uint64_t bytes_written = 0;
  std::uint64_t illegal_transitions = 0;
  double max_abs_vs_first = 0;
  std::uint64_t argmax_mismatches_vs_first = 0;
};

struct AblationResult {
  AblationScenario scenario;
  std::vector<AblationRow> rows;

  /// Sum of reloads over repetitions for one grid value.
  [[nodiscard]] std::uint64_t reloads_for(const std::string& value) const {
    std::uint64_t n = 0;
    for (const auto& r : rows)
      if (r.value == value) n += r.reloads;
    return n;
  }
  [[nodiscard]] const AblationRow* first_row(const std::string& value) const {
    for (const auto& r : rows)
      if (r.value == value) return &r;
    return nullptr;
  }
};

inline std::string ablation_csv_header() {
  return "knob,value,repetition,seed,runtime_s,reloads,unique_reloads,evictions,mean_span,reload_pct,compute_span,"
         "bytes_read,bytes_written,max_abs_vs_first,argmax_mismatches_vs_first";
}

inline void write_ablation_csv(const AblationResult& r, const fs::path& p) {
  std::ofstream os(p);
  require(static_cast<bool>(os), Errc::io, "cannot write " + p.string());
  os << "# scenario " << r.scenario.name << "\n";
  os << "# reload_pct: per chunk, 100 * (distinct destinations reloaded from the cold store in the chunk) / "
        "(distinct destinations receiving a message in the chunk), averaged over chunks with traffic, then over layers\n";
  os << "# mean_span: per destination, last minus first message step (every delivery is one step), averaged over "
        "destinations, then over layers\n";
  os << ablation_csv_header() << "\n";
  for (const auto& row : r.rows) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%s,%s,%u,%llu,%.4f,%llu,%llu,%llu,%.3f,%.4f,%.3f,%llu,%llu,%.3g,%llu",
                  std::string(knob_name(r.scenario.knob)).c_str(), row.value.c_str(), row.repetition,
                  static_cast<unsigned long long>(row.seed), row.runtime_s, static_cast<unsigned long long>(row.reloads),
                  static_cast<unsigned long long>(row.unique_reloads), static_cast<unsigned long long>(row.evictions),
                  row.mean_span, row.mean_reload_pct, row.compute_span, static_cast<unsigned long long>(row.bytes_read),
                  static_cast<unsigned long long>(row.bytes_written), row.max_abs_vs_first,
                  static_cast<unsigned long long>(row.argmax_mismatches_vs_first));
    os << buf << "\n";
  }
}

/// Model weights for a scenario: input dim, hidden dims, output dim.
inline ModelWeights scenario_weights(const AblationScenario& s) {
  std::vector<std::uint32_t> dims{s.feature_dim};
  dims.insert(dims.end(), s.hidden.begin(), s.hidden.end());
  dims.push_back(s.out_dim);
  return random_weights(s.model, dims, s.weight_seed, s.gin_epsilon);
}

/// Materializes the dataset for an ordering under `root` and returns its
/// directory and relabeling (identity for the original order).
inline std::pair<fs::path, Relabeling> prepare_ordering(const fs::path& base, const GraphCSR& g, OrderingKind kind,
                                                        std::uint64_t seed, std::uint32_t partitions, const fs::path& root) {
  if (kind == OrderingKind::original) return {base, Relabeling::identity(g.num_vertices)};
  Relabeling map = kind == OrderingKind::random ? random_order(g.num_vertices, seed) : build_order(score_vertices(g));
  const fs::path dir = root / (kind == OrderingKind::random ? "order_rnd_" + std::to_string(seed) : std::string("order_greedy"));
  if (!fs::exists(dir / kPermutationFile) || read_permutation(dir / kPermutationFile) != map) {
    std::error_code ec;
    fs::remove_all(dir, ec);
    fs::create_directories(dir);
    relabel_graph(g, map, dir);
    relabel_features(base, map, partitions, dir / kFeaturesDir, 64ull << 20, IoMode::buffered);
    write_permutation(map, dir / kPermutationFile);
  }
  return {dir, std::move(map)};
}

/// Runs every grid value `repetitions` times on one generated dataset. All
/// outputs are checked against the first run; any argmax disagreement or an
/// error above the tolerance is an error.
inline AblationResult run_ablation(const AblationScenario& s) {
  AblationResult result;
  result.scenario = s;
  const fs::path root = s.work_dir.empty() ? fs::temp_directory_path() / ("pushgnn_" + s.name) : s.work_dir;
  fs::create_directories(root);
  const fs::path base = root / "graph";
  {
    GeneratorParams gp;
    gp.kind = s.generator;
    gp.num_vertices = s.vertices;
    gp.avg_degree = s.avg_degree;
    gp.feature_dim = s.feature_dim;
    gp.seed = s.graph_seed;
    gp.partitions = s.pipeline.partitions;
    std::error_code ec;
    fs::remove_all(base, ec);
    generate_synthetic(gp, base);
  }
  const GraphCSR g = read_csr(base);
  const ModelWeights weights = scenario_weights(s);

  std::optional<DenseMatrix> reference;  // first run, in original id order
  for (const auto& value : s.values) {
    for (std::uint32_t rep = 0; rep < s.repetitions; ++rep) {
      const std::uint64_t seed = s.seed + rep;
      PipelineConfig cfg = s.pipeline;
      cfg.seed = seed;
      cfg.eviction = parse_eviction(s.knob == AblationKnob::eviction ? value : s.eviction);
      cfg.hot = HotBudget{0, s.knob == AblationKnob::hot_budget ? detail::parse_number<double>("values", value) : s.hot_fraction};
      const OrderingKind ok = parse_ordering(s.knob == AblationKnob::ordering ? value : s.ordering);
      auto [dir, map] = prepare_ordering(base, g, ok, seed, s.pipeline.partitions, root);

      const fs::path out = root / "run";
      std::error_code ec;
      fs::remove_all(out, ec);
      const RunReport rep_report = run_inference(dir, weights, cfg, out);

      AblationRow row;
      row.value = value;
      row.repetition = rep;
      row.seed = seed;
      row.runtime_s = rep_report.total_seconds();
      row.reloads = rep_report.total(&LayerMetrics::reloads);
      row.unique_reloads = rep_report.total(&LayerMetrics::unique_reloads);
      row.evictions = rep_report.total(&LayerMetrics::evictions);
      row.bytes_read = rep_report.total(&LayerMetrics::bytes_read);
      row.bytes_written = rep_report.total(&LayerMetrics::bytes_written);
      row.illegal_transitions = rep_report.illegal_transitions();
      for (const auto& l : rep_report.layers) {
        row.mean_span += l.metrics.mean_span / static_cast<double>(rep_report.layers.size());
        row.mean_reload_pct += l.metrics.mean_reload_pct / static_cast<double>(rep_report.layers.size());
      }
      row.compute_span = compute_span(g, map).mean;

      const DenseMatrix got = load_dense(rep_report.final_dir);
      if (!reference) {
        // Store in original id order.
        DenseMatrix orig{got.rows, got.dim, std::vector<float>(got.values.size())};
        for (VertexId v = 0; v < got.rows; ++v) std::copy_n(got.row(map.old_to_new[v]).begin(), got.dim, orig.row(v).begin());
        reference = std::move(orig);
      } else {
        const CompareReport c = compare_matrices(*reference, got, map.old_to_new);
        row.max_abs_vs_first = c.max_abs;
        row.argmax_mismatches_vs_first = c.argmax_mismatches;
        if (!c.within(s.tolerance))
          fail(Errc::consistency, "outputs for " + std::string(knob_name(s.knob)) + "=" + value + " differ from the first run (max abs " +
                                      std::to_string(c.max_abs) + ", argmax mismatches " + std::to_string(c.argmax_mismatches) + ")");
      }
      result.rows.push_back(row);
    }
  }
  return result;
}

}  // namespace pushgnn
