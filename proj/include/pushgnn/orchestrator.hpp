// SPDX-License-Identifier: Apache-2.0
//
// Layer driver: streams chunks in id order, pushes one normalized message per
// out-edge (plus the self term for SAGE and GIN), tracks the per-vertex state
// machine and pending counts, and hands completed aggregates to graduation.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pushgnn/chunk_reader.hpp"
#include "pushgnn/common.hpp"
#include "pushgnn/memory_manager.hpp"
#include "pushgnn/storage.hpp"

namespace pushgnn {

enum class VertexState : std::uint8_t { not_started = 0, hot = 1, cold = 2, completed = 3 };

inline std::string_view state_name(VertexState s) {
  switch (s) {
    case VertexState::not_started: return "NOT_STARTED";
    case VertexState::hot: return "HOT";
    case VertexState::cold: return "COLD";
    case VertexState::completed: return "COMPLETED";
  }
  return "?";
}

constexpr bool legal_transition(VertexState from, VertexState to) {
  using S = VertexState;
  return (from == S::not_started && to == S::hot) || (from == S::hot && to == S::cold) ||
         (from == S::hot && to == S::completed) || (from == S::cold && to == S::hot);
}

/// One byte of state per vertex; every transition is checked and counted.
class StateTable {
 public:
  explicit StateTable(std::uint64_t n) : states_(n, VertexState::not_started) {}

  [[nodiscard]] VertexState operator[](VertexId v) const { return states_[v]; }
  [[nodiscard]] std::uint64_t size() const { return states_.size(); }

  void transition(VertexId v, VertexState to) {
    const VertexState from = states_[v];
    if (!legal_transition(from, to)) {
      ++illegal_;
      fail(Errc::illegal_transition, "vertex " + std::to_string(v) + ": " + std::string(state_name(from)) + " -> " +
                                         std::string(state_name(to)));
    }
    states_[v] = to;
    ++counts_[static_cast<int>(from)][static_cast<int>(to)];
  }

  [[nodiscard]] std::uint64_t count(VertexState from, VertexState to) const {
    return counts_[static_cast<int>(from)][static_cast<int>(to)];
  }
  [[nodiscard]] std::uint64_t illegal() const { return illegal_; }

 private:
  std::vector<VertexState> states_;
  std::array<std::array<std::uint64_t, 4>, 4> counts_{};
  std::uint64_t illegal_ = 0;
};

/// Per-layer record; the CSV schema is the first eleven fields.
struct LayerMetrics {
  std::uint32_t layer = 0;
  std::uint64_t messages = 0;       // every delivery, edge messages plus self terms
  std::uint64_t edge_messages = 0;
  std::uint64_t evictions = 0;
  std::uint64_t reloads = 0;
  std::uint64_t unique_reloads = 0;
  double mean_span = 0;
  double p50_span = 0;
  double p99_span = 0;
  double mean_reload_pct = 0;
  std::uint64_t bytes_read = 0;
  std::uint64_t bytes_written = 0;
  double wall_seconds = 0;

  std::uint64_t graduations = 0;
  std::uint64_t chunks = 0;
  std::uint64_t rows_delivered = 0;
  std::uint64_t illegal_transitions = 0;
  std::uint32_t slot_count = 0;
  std::uint32_t peak_hot = 0;
  std::uint64_t peak_cold = 0;
  std::uint64_t feature_bytes_read = 0;
  std::uint64_t input_row_bytes = 0;
  std::uint64_t feature_bytes_written = 0;
  std::uint64_t cold_bytes_read = 0;
  std::uint64_t cold_bytes_written = 0;
  std::uint64_t direct_io_fallbacks = 0;
};

inline std::string metrics_csv_header() {
  return "layer,messages,evictions,reloads,unique_reloads,mean_span,p99_span,mean_reload_pct,bytes_read,bytes_written,"
         "wall_seconds";
}

inline std::string metrics_csv_row(const LayerMetrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%u,%llu,%llu,%llu,%llu,%.3f,%.3f,%.4f,%llu,%llu,%.4f", m.layer,
                static_cast<unsigned long long>(m.messages), static_cast<unsigned long long>(m.evictions),
                static_cast<unsigned long long>(m.reloads), static_cast<unsigned long long>(m.unique_reloads), m.mean_span,
                m.p99_span, m.mean_reload_pct, static_cast<unsigned long long>(m.bytes_read),
                static_cast<unsigned long long>(m.bytes_written), m.wall_seconds);
  return buf;
}

/// Span summary over vertices that received at least one message.
struct SpanStats {
  std::uint64_t vertices = 0;
  double mean = 0;
  double p50 = 0;
  double p99 = 0;
};

inline SpanStats summarize_spans(std::vector<std::uint64_t> spans) {
  SpanStats s;
  s.vertices = spans.size();
  if (spans.empty()) return s;
  std::sort(spans.begin(), spans.end());
  long double total = 0;
  for (auto x : spans) total += x;
  s.mean = static_cast<double>(total / spans.size());
  auto rank = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::ceil(q * spans.size()));
    return static_cast<double>(spans[std::clamp<std::size_t>(idx, 1, spans.size()) - 1]);
  };
  s.p50 = rank(0.50);
  s.p99 = rank(0.99);
  return s;
}

/// Per-layer orchestration state.
struct LayerContext {
  std::uint32_t layer = 0;
  ModelKind kind = ModelKind::gcn;
  float gin_epsilon = 0.0f;
  std::uint32_t embed_dim = 0;  // width of incoming feature rows
  std::uint32_t agg_dim = 0;    // slot width
  std::span<const std::uint32_t> in_degrees;
  std::vector<std::uint32_t> pending;
  std::uint64_t initial_pending_total = 0;
  std::uint32_t max_pending = 0;
  StateTable states{0};

  [[nodiscard]] bool has_self_term() const { return kind != ModelKind::gcn; }
  [[nodiscard]] std::uint64_t num_vertices() const { return pending.size(); }
};

/// Pending counts start at the in-degree, plus one for the self term of SAGE
/// and GIN.
inline LayerContext init_layer(std::span<const std::uint32_t> in_degrees, ModelKind kind, std::uint32_t layer,
                               std::uint32_t embed_dim, float gin_epsilon = 0.0f) {
  require(embed_dim > 0, Errc::config, "embedding width must be positive");
  LayerContext ctx;
  ctx.layer = layer;
  ctx.kind = kind;
  ctx.gin_epsilon = gin_epsilon;
  ctx.embed_dim = embed_dim;
  ctx.agg_dim = kind == ModelKind::sage ? 2 * embed_dim : embed_dim;
  ctx.in_degrees = in_degrees;
  ctx.pending.resize(in_degrees.size());
  const std::uint32_t self = ctx.has_self_term() ? 1 : 0;
  for (std::size_t v = 0; v < in_degrees.size(); ++v) {
    ctx.pending[v] = in_degrees[v] + self;
    ctx.initial_pending_total += ctx.pending[v];
    ctx.max_pending = std::max(ctx.max_pending, ctx.pending[v]);
  }
  ctx.states = StateTable(in_degrees.size());
  return ctx;
}

/// Slots that fit in `budget_bytes` for the layer's aggregate width.
inline std::uint32_t slots_for_budget(std::uint64_t budget_bytes, std::uint32_t agg_dim) {
  const std::uint64_t slot_bytes = std::uint64_t{agg_dim} * 4;
  if (budget_bytes < slot_bytes)
    fail(Errc::config, "hot budget of " + std::to_string(budget_bytes) + " bytes cannot hold one " +
                           std::to_string(slot_bytes) + "-byte slot");
  return static_cast<std::uint32_t>(std::min<std::uint64_t>(budget_bytes / slot_bytes, 0xfffffffeu));
}

/// Message along edge (u, v): mean-normalized by the destination in-degree for
/// GCN and SAGE, raw for GIN's sum aggregator.
inline void make_message(std::span<const float> h_source, ModelKind kind, std::uint32_t in_degree_dest,
                         std::span<float> out) {
  if (kind == ModelKind::gin) {
    std::copy(h_source.begin(), h_source.end(), out.begin());
    return;
  }
  const float d = static_cast<float>(std::max<std::uint32_t>(1, in_degree_dest));
  for (std::size_t i = 0; i < h_source.size(); ++i) out[i] = h_source[i] / d;
}

inline std::vector<float> make_message(std::span<const float> h_source, ModelKind kind, std::uint32_t in_degree_dest) {
  std::vector<float> out(h_source.size());
  make_message(h_source, kind, in_degree_dest, out);
  return out;
}

class GraduationSink {
 public:
  virtual ~GraduationSink() = default;
  virtual void graduate(VertexId v, std::span<const float> aggregate) = 0;
};

class Orchestrator {
 public:
  Orchestrator(LayerContext& ctx, MemoryManager& mem, GraduationSink& sink)
      : ctx_(ctx),
        mem_(mem),
        sink_(sink),
        first_step_(ctx.num_vertices(), kNever),
        last_step_(ctx.num_vertices(), kNever),
        touched_in_(ctx.num_vertices(), kNoChunk),
        reloaded_in_(ctx.num_vertices(), kNoChunk),
        reloaded_ever_(ctx.num_vertices(), 0),
        delivered_(ctx.num_vertices(), 0),
        message_(ctx.embed_dim),
        aggregate_(ctx.agg_dim) {
    require(mem.slot_dim() == ctx.agg_dim, Errc::config, "hot store slot width differs from aggregate width");
    mem_.set_evict_listener([this](VertexId v) { ctx_.states.transition(v, VertexState::cold); });
  }

  void process_chunk(const Chunk& chunk) {
    require(chunk.range.begin == next_vertex_, Errc::consistency,
            "chunk starting at " + std::to_string(chunk.range.begin) + " arrived out of order");
    require(chunk.dim == ctx_.embed_dim, Errc::dim_mismatch, "chunk feature width differs from layer input width");
    touched_ = reloaded_ = 0;
    for (std::size_t i = 0; i < chunk.range.size(); ++i) {
      const VertexId u = chunk.range.begin + i;
      if (delivered_[u] != 0) fail(Errc::duplicate_vertex, "feature row of vertex " + std::to_string(u) + " delivered twice");
      delivered_[u] = 1;
      ++rows_delivered_;
      const auto h = chunk.feature_row(i);

      if (ctx_.kind == ModelKind::sage) {
        deliver(u, h, Combine::write_self_half);
      } else if (ctx_.kind == ModelKind::gin) {
        const float scale = 1.0f + ctx_.gin_epsilon;
        for (std::size_t k = 0; k < h.size(); ++k) message_[k] = scale * h[k];
        deliver(u, message_, Combine::sum);
      } else if (ctx_.pending[u] == 0 && ctx_.states[u] == VertexState::not_started) {
        // No in-neighbors: the mean over an empty set is the zero vector.
        ctx_.states.transition(u, VertexState::hot);
        ctx_.states.transition(u, VertexState::completed);
        std::fill(aggregate_.begin(), aggregate_.end(), 0.0f);
        sink_.graduate(u, aggregate_);
        ++graduations_;
      }

      for (VertexId v : chunk.out_neighbors(i)) {
        require(v < ctx_.num_vertices(), Errc::out_of_range, "edge to unknown vertex " + std::to_string(v));
        make_message(h, ctx_.kind, ctx_.in_degrees[v], message_);
        deliver(v, message_, Combine::sum);
        ++edge_messages_;
      }
    }
    if (touched_ > 0) {
      reload_pct_sum_ += 100.0 * static_cast<double>(reloaded_) / static_cast<double>(touched_);
      ++chunks_with_traffic_;
    }
    ++chunk_index_;
    ++chunks_;
    next_vertex_ = chunk.range.end;
  }

  /// Requires every vertex COMPLETED and every feature row delivered once.
  LayerMetrics finalize() {
    std::vector<VertexId> starved;
    std::uint64_t starved_count = 0;
    for (VertexId v = 0; v < ctx_.num_vertices(); ++v) {
      if (ctx_.states[v] != VertexState::completed) {
        ++starved_count;
        if (starved.size() < 16) starved.push_back(v);
      }
    }
    if (starved_count > 0) {
      std::string msg = std::to_string(starved_count) + " vertices did not complete:";
      for (VertexId v : starved)
        msg += " " + std::to_string(v) + "(pending " + std::to_string(ctx_.pending[v]) + ")";
      fail(Errc::missing_messages, msg);
    }
    require(rows_delivered_ == ctx_.num_vertices(), Errc::coverage_gap, "not every feature row was delivered");
    require(deliveries_ == ctx_.initial_pending_total, Errc::consistency, "deliveries differ from initial pending total");
    const auto& ms = mem_.stats();
    require(ms.evictions + ms.releases + mem_.hot_count() == ms.admissions, Errc::consistency,
            "admissions not conserved across evictions and releases");

    LayerMetrics m;
    m.layer = ctx_.layer;
    m.messages = deliveries_;
    m.edge_messages = edge_messages_;
    m.evictions = ms.evictions;
    m.reloads = ms.reloads;
    m.unique_reloads = static_cast<std::uint64_t>(std::count(reloaded_ever_.begin(), reloaded_ever_.end(), 1));
    const SpanStats span = span_stats();
    m.mean_span = span.mean;
    m.p50_span = span.p50;
    m.p99_span = span.p99;
    m.mean_reload_pct = chunks_with_traffic_ == 0 ? 0.0 : reload_pct_sum_ / static_cast<double>(chunks_with_traffic_);
    m.graduations = graduations_;
    m.chunks = chunks_;
    m.rows_delivered = rows_delivered_;
    m.illegal_transitions = ctx_.states.illegal();
    m.slot_count = mem_.slot_count();
    m.peak_hot = ms.peak_hot;
    m.peak_cold = ms.peak_cold;
    return m;
  }

  [[nodiscard]] SpanStats span_stats() const {
    std::vector<std::uint64_t> spans;
    for (VertexId v = 0; v < ctx_.num_vertices(); ++v)
      if (first_step_[v] != kNever) spans.push_back(last_step_[v] - first_step_[v]);
    return summarize_spans(std::move(spans));
  }
  [[nodiscard]] std::uint64_t first_step(VertexId v) const { return first_step_[v]; }
  [[nodiscard]] std::uint64_t last_step(VertexId v) const { return last_step_[v]; }
  [[nodiscard]] std::uint64_t graduations() const { return graduations_; }
  [[nodiscard]] std::span<const std::uint8_t> delivered() const { return delivered_; }

  static constexpr std::uint64_t kNever = ~std::uint64_t{0};

 private:
  static constexpr std::uint32_t kNoChunk = ~std::uint32_t{0};

  void deliver(VertexId v, std::span<const float> msg, Combine combine) {
    const std::uint64_t step = deliveries_++;
    if (first_step_[v] == kNever) first_step_[v] = step;
    last_step_[v] = step;
    if (touched_in_[v] != chunk_index_) {
      touched_in_[v] = chunk_index_;
      ++touched_;
    }
    switch (ctx_.states[v]) {
      case VertexState::not_started:
        mem_.admit(v);
        ctx_.states.transition(v, VertexState::hot);
        break;
      case VertexState::cold:
        mem_.reload(v);
        ctx_.states.transition(v, VertexState::hot);
        reloaded_ever_[v] = 1;
        if (reloaded_in_[v] != chunk_index_) {
          reloaded_in_[v] = chunk_index_;
          ++reloaded_;
        }
        break;
      case VertexState::hot:
        break;
      case VertexState::completed:
        fail(Errc::consistency, "message for already completed vertex " + std::to_string(v));
    }
    if (mem_.accumulate(v, msg, combine) == 0) {
      mem_.release_into(v, aggregate_);
      ctx_.states.transition(v, VertexState::completed);
      sink_.graduate(v, aggregate_);
      ++graduations_;
    }
  }

  LayerContext& ctx_;
  MemoryManager& mem_;
  GraduationSink& sink_;
  std::vector<std::uint64_t> first_step_, last_step_;
  std::vector<std::uint32_t> touched_in_, reloaded_in_;
  std::vector<std::uint8_t> reloaded_ever_;
  std::vector<std::uint8_t> delivered_;
  std::vector<float> message_;
  std::vector<float> aggregate_;
  std::uint64_t deliveries_ = 0;
  std::uint64_t edge_messages_ = 0;
  std::uint64_t graduations_ = 0;
  std::uint64_t rows_delivered_ = 0;
  std::uint64_t chunks_ = 0;
  std::uint32_t chunk_index_ = 0;
  std::uint64_t touched_ = 0;
  std::uint64_t reloaded_ = 0;
  double reload_pct_sum_ = 0;
  std::uint64_t chunks_with_traffic_ = 0;
  VertexId next_vertex_ = 0;
};

}  // namespace pushgnn
