// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: dataset preparation, inference, the in-memory
// reference, output comparison and ablation runs.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "pushgnn/bench.hpp"
#include "pushgnn/reorder.hpp"
#include "pushgnn/runtime.hpp"
#include "pushgnn/storage.hpp"

namespace {

using namespace pushgnn;

/// "25%" selects a fraction of |V| slots; anything else is a byte size.
HotBudget parse_hot(const std::string& s) {
  HotBudget h;
  if (s.empty() || s == "all") return h;
  if (s.back() == '%') {
    h.fraction = std::stod(s.substr(0, s.size() - 1)) / 100.0;
    require(h.fraction > 0.0 && h.fraction <= 1.0, Errc::config, "hot budget percentage must be in (0, 100]");
  } else {
    h.bytes = parse_byte_size(s);
    require(h.bytes > 0, Errc::config, "hot budget must be positive");
  }
  return h;
}

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f16") return DType::f16;
  fail(Errc::config, "dtype must be f32 or f16");
}

std::vector<std::uint32_t> parse_dims(const std::string& s) {
  std::vector<std::uint32_t> out;
  for (const auto& part : detail::split_list(s)) out.push_back(detail::parse_number<std::uint32_t>("dims", part));
  return out;
}

void print_report(const CompareReport& r) {
  std::printf("rows %llu dim %u\nmax_abs %.6g\nmean_max_abs %.6g\nmean_rel %.6g\nargmax_mismatches %llu\n",
              static_cast<unsigned long long>(r.rows), r.dim, r.max_abs, r.mean_max_abs, r.mean_rel,
              static_cast<unsigned long long>(r.argmax_mismatches));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Out-of-core layer-wise GNN inference"};
  app.require_subcommand(1);

  // ingest
  std::string edges, out, graph, weights_path, model = "gcn";
  std::uint64_t vertices = 0, seed = 0;
  std::uint32_t dim = 0, partitions = 8;
  std::string dtype = "f32";
  auto* ingest = app.add_subcommand("ingest", "Convert a text edge list to CSR; optionally add random features");
  ingest->add_option("--edges", edges, "Edge list, one 'src dst' pair per line")->required();
  ingest->add_option("--vertices", vertices, "Vertex count")->required();
  ingest->add_option("--out", out, "Output graph directory")->required();
  ingest->add_option("--feature-dim", dim, "Random feature width (0: topology only)");
  ingest->add_option("--seed", seed);
  ingest->add_option("--partitions", partitions);
  ingest->add_option("--dtype", dtype);

  // generate
  std::string kind = "pa";
  std::uint32_t avg_degree = 10;
  auto* gen = app.add_subcommand("generate", "Write a synthetic graph with random features");
  gen->add_option("--kind", kind, "uniform|pa")->check(CLI::IsMember({"uniform", "pa"}));
  gen->add_option("--vertices", vertices)->required();
  gen->add_option("--avg-degree", avg_degree);
  gen->add_option("--feature-dim", dim)->required();
  gen->add_option("--seed", seed);
  gen->add_option("--partitions", partitions);
  gen->add_option("--dtype", dtype);
  gen->add_option("--out", out)->required();

  // weights
  std::string dims;
  float eps = 0.0f;
  auto* wts = app.add_subcommand("weights", "Write random (Glorot) model weights");
  wts->add_option("--model", model)->check(CLI::IsMember({"gcn", "sage", "gin"}));
  wts->add_option("--dims", dims, "Embedding widths, e.g. 64,32,8")->required();
  wts->add_option("--seed", seed);
  wts->add_option("--gin-eps", eps);
  wts->add_option("--out", out)->required();

  // reorder
  std::string mem_budget = "64MiB";
  auto* reorder = app.add_subcommand("reorder", "Relabel vertices by descending completion score");
  reorder->add_option("--graph", graph)->required();
  reorder->add_option("--partitions", partitions);
  reorder->add_option("--out", out)->required();
  reorder->add_option("--mem", mem_budget, "Chunk + spill buffer budget");
  bool no_direct = false;
  reorder->add_flag("--no-direct-io", no_direct);

  // infer
  std::string hot = "all", chunk = "8MiB", grad = "16MiB", spill = "8MiB", eviction = "minpend", metrics, backend = "blocked";
  std::size_t queue_cap = 20;
  bool discard = false, activate_last = false;
  auto* infer = app.add_subcommand("infer", "Run layer-wise inference out of core");
  infer->add_option("--graph", graph)->required();
  infer->add_option("--weights", weights_path)->required();
  infer->add_option("--model", model, "Must match the weights file")->check(CLI::IsMember({"gcn", "sage", "gin"}));
  infer->add_option("--hot-mem", hot, "Hot store budget: bytes (8MiB) or share of |V| slots (10%)");
  infer->add_option("--chunk", chunk, "Chunk feature budget");
  infer->add_option("--grad-buf", grad, "Graduation buffer size");
  infer->add_option("--spill-buf", spill, "Per-partition output buffer size");
  infer->add_option("--partitions", partitions);
  infer->add_option("--queue-cap", queue_cap);
  infer->add_option("--eviction", eviction)->check(CLI::IsMember({"minpend", "lru", "rnd"}));
  infer->add_option("--seed", seed);
  infer->add_option("--out", out)->required();
  infer->add_option("--metrics", metrics, "Per-layer metrics CSV");
  infer->add_flag("--no-direct-io", no_direct);
  infer->add_flag("--discard-intermediate", discard);
  infer->add_option("--backend", backend)->check(CLI::IsMember({"blocked", "reference"}));
  infer->add_flag("--activate-last", activate_last, "Apply ReLU to the last layer too");

  // oracle
  std::string max_mem = "4GiB";
  auto* oracle = app.add_subcommand("oracle", "In-memory gather reference (small graphs only)");
  oracle->add_option("--graph", graph)->required();
  oracle->add_option("--weights", weights_path)->required();
  oracle->add_option("--out", out)->required();
  oracle->add_option("--partitions", partitions);
  oracle->add_option("--max-mem", max_mem);
  oracle->add_flag("--activate-last", activate_last);

  // compare
  std::string a, b, perm;
  double tol = 1e-4;
  auto* compare = app.add_subcommand("compare", "Compare two output directories");
  compare->add_option("--a", a)->required();
  compare->add_option("--b", b)->required();
  compare->add_option("--tol", tol);
  compare->add_option("--perm", perm, "Permutation file when --b is in relabeled order");

  // bench
  std::string scenario;
  auto* bench = app.add_subcommand("bench", "Run an ablation scenario");
  bench->add_option("--scenario", scenario)->required();
  bench->add_option("--out", out, "CSV output")->required();

  // sim-gather
  std::string block = "4KiB", cache = "0";
  auto* sim = app.add_subcommand("sim-gather", "Estimate gather-style feature reads");
  sim->add_option("--graph", graph)->required();
  sim->add_option("--block", block);
  sim->add_option("--cache", cache);

  CLI11_PARSE(app, argc, argv);

  try {
    const IoMode io = no_direct ? IoMode::buffered : IoMode::direct;
    if (*ingest) {
      const auto s = ingest_edge_list(edges, vertices, out);
      if (dim > 0) write_dense(fs::path(out) / kFeaturesDir, random_features(vertices, dim, seed), parse_dtype(dtype), partitions);
      std::printf("vertices %llu edges %llu\n", static_cast<unsigned long long>(s.num_vertices),
                  static_cast<unsigned long long>(s.num_edges));
    } else if (*gen) {
      GeneratorParams p;
      p.kind = kind == "uniform" ? GeneratorKind::uniform : GeneratorKind::preferential_attachment;
      p.num_vertices = vertices;
      p.avg_degree = avg_degree;
      p.feature_dim = dim;
      p.seed = seed;
      p.dtype = parse_dtype(dtype);
      p.partitions = partitions;
      const auto s = generate_synthetic(p, out);
      std::printf("vertices %llu edges %llu max_in_degree %u\n", static_cast<unsigned long long>(s.num_vertices),
                  static_cast<unsigned long long>(s.num_edges), s.max_in_degree);
    } else if (*wts) {
      const auto d = parse_dims(dims);
      write_weights(random_weights(parse_model(model), d, seed, eps), out);
    } else if (*reorder) {
      const auto s = reorder_dataset(graph, partitions, out, parse_byte_size(mem_budget), io);
      std::printf("mean_span %.3f -> %.3f\np99_span %.0f -> %.0f\npeak_bytes %llu\n", s.span_before.mean, s.span_after.mean,
                  s.span_before.p99, s.span_after.p99, static_cast<unsigned long long>(s.features.peak_bytes));
    } else if (*infer) {
      const ModelWeights w = read_weights(weights_path);
      if (infer->count("--model") > 0 && parse_model(model) != w.kind)
        fail(Errc::config, "--model " + model + " but weights are for " + std::string(model_name(w.kind)));
      PipelineConfig cfg;
      cfg.chunk_budget = parse_byte_size(chunk);
      cfg.hot = parse_hot(hot);
      cfg.graduation_buffer = parse_byte_size(grad);
      cfg.spill_buffer = parse_byte_size(spill);
      cfg.partitions = partitions;
      cfg.queue_capacity = queue_cap;
      cfg.eviction = parse_eviction(eviction);
      cfg.seed = seed;
      cfg.io = io;
      cfg.discard_intermediate = discard;
      cfg.backend = backend;
      cfg.activate_last = activate_last;
      const RunReport r = run_inference(graph, w, cfg, out);
      if (!metrics.empty()) write_metrics_csv(r, metrics);
      std::cout << metrics_csv_header() << "\n";
      for (const auto& l : r.layers) std::cout << metrics_csv_row(l.metrics) << "\n";
      std::cout << "output " << r.final_dir.string() << "\n";
    } else if (*oracle) {
      const ModelWeights w = read_weights(weights_path);
      OracleOptions opts;
      opts.max_bytes = parse_byte_size(max_mem);
      opts.activate_last = activate_last;
      write_dense(out, oracle_inference(graph, w, opts), DType::f32, partitions);
    } else if (*compare) {
      const CompareReport r = compare_outputs(a, b, perm);
      print_report(r);
      if (!r.within(tol)) {
        std::printf("FAIL tolerance %g\n", tol);
        return 2;
      }
      std::printf("OK tolerance %g\n", tol);
    } else if (*bench) {
      const AblationResult r = run_ablation(parse_scenario_file(scenario));
      write_ablation_csv(r, out);
      std::cout << ablation_csv_header() << "\n";
      for (const auto& row : r.rows)
        std::cout << row.value << " rep " << row.repetition << ": reloads " << row.reloads << ", mean span " << row.mean_span
                  << "\n";
    } else if (*sim) {
      const GraphCSR g = read_csr(graph);
      const MatrixLayout l = read_layout(fs::path(graph) / kFeaturesDir);
      const auto r = simulate_gather_reads(g, l.dim, l.dtype, parse_byte_size(block), parse_byte_size(cache));
      std::printf("# feature I/O only; topology reads are not modeled\ngather_bytes %llu\nbroadcast_row_bytes %llu\n",
                  static_cast<unsigned long long>(r.bytes_read),
                  static_cast<unsigned long long>(l.num_vertices * l.row_bytes()));
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
