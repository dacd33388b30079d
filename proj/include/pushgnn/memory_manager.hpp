// SPDX-License-Identifier: Apache-2.0
//
// Partial-aggregate storage for one layer: a fixed array of hot slots, a
// disk-backed cold store for evicted partial states, and the eviction policy
// choosing which hot vertices go cold.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "pushgnn/common.hpp"
#include "pushgnn/eviction.hpp"
#include "pushgnn/io.hpp"

namespace pushgnn {

/// Fixed-width f32 records in a buffered scratch file. Record slots are
/// recycled, so the file never grows past the peak cold population.
class ColdStore {
 public:
  ColdStore(fs::path path, std::uint32_t record_dim, IoCounters* counters)
      : path_(std::move(path)), dim_(record_dim), counters_(counters), file_(File::create(path_, IoMode::buffered)) {}

  ColdStore(const ColdStore&) = delete;
  ColdStore& operator=(const ColdStore&) = delete;

  ~ColdStore() {
    file_.close();
    std::error_code ec;
    fs::remove(path_, ec);
  }

  [[nodiscard]] bool contains(VertexId v) const { return records_.contains(v); }
  [[nodiscard]] std::size_t size() const { return records_.size(); }
  [[nodiscard]] std::uint64_t record_capacity() const { return next_record_; }
  [[nodiscard]] const fs::path& path() const { return path_; }

  void store(VertexId v, std::span<const float> state) {
    require(state.size() == dim_, Errc::dim_mismatch, "cold record width");
    require(!contains(v), Errc::consistency, "vertex " + std::to_string(v) + " already cold");
    std::uint64_t rec;
    if (!free_.empty()) {
      rec = free_.back();
      free_.pop_back();
    } else {
      rec = next_record_++;
    }
    file_.write_at(std::as_bytes(state), rec * record_bytes());
    if (counters_ != nullptr) bump(counters_->cold_bytes_written, record_bytes());
    records_.emplace(v, rec);
  }

  void load(VertexId v, std::span<float> out) {
    auto it = records_.find(v);
    if (it == records_.end()) fail(Errc::consistency, "vertex " + std::to_string(v) + " has no cold record");
    require(out.size() == dim_, Errc::dim_mismatch, "cold record width");
    file_.read_exact(std::as_writable_bytes(out), it->second * record_bytes());
    if (counters_ != nullptr) bump(counters_->cold_bytes_read, record_bytes());
    free_.push_back(it->second);
    records_.erase(it);
  }

 private:
  [[nodiscard]] std::uint64_t record_bytes() const { return std::uint64_t{dim_} * 4; }

  fs::path path_;
  std::uint32_t dim_;
  IoCounters* counters_;
  File file_;
  std::unordered_map<VertexId, std::uint64_t> records_;
  std::vector<std::uint64_t> free_;
  std::uint64_t next_record_ = 0;
};

enum class Combine { sum, write_self_half };

struct MemoryConfig {
  std::uint32_t slot_count = 0;
  std::uint32_t slot_dim = 0;
  EvictionKind policy = EvictionKind::min_pending;
  std::uint64_t seed = 0;
  std::size_t evict_batch = 0;  // 0: max(1, 1% of slot_count)
  fs::path cold_path;
};

struct MemoryStats {
  std::uint64_t admissions = 0;
  std::uint64_t evictions = 0;
  std::uint64_t eviction_events = 0;
  std::uint64_t reloads = 0;
  std::uint64_t releases = 0;
  std::uint64_t clamped_evictions = 0;
  std::uint32_t peak_hot = 0;
  std::uint64_t peak_cold = 0;
};

class MemoryManager {
 public:
  static constexpr std::uint32_t npos = BucketHeap::npos;
  using EvictListener = std::function<void(VertexId)>;

  /// `pending` is the per-vertex pending-message array owned by the layer;
  /// accumulate() decrements it.
  MemoryManager(const MemoryConfig& cfg, std::span<std::uint32_t> pending, std::uint32_t max_pending,
                IoCounters* counters)
      : cfg_(cfg),
        pending_(pending),
        slots_((require(cfg.slot_count > 0, Errc::config, "hot store needs at least one slot"),
                std::size_t{cfg.slot_count} * cfg.slot_dim)),
        slot_owner_(cfg.slot_count, kNoVertex),
        vertex_slot_(pending.size(), npos),
        released_(pending.size(), 0),
        policy_(make_policy(cfg.policy, cfg.slot_count, max_pending, cfg.seed)),
        cold_(cfg.cold_path, cfg.slot_dim, counters) {
    require(cfg.slot_dim > 0, Errc::config, "slot width must be positive");
    free_.reserve(cfg.slot_count);
    for (std::uint32_t s = cfg.slot_count; s-- > 0;) free_.push_back(s);
    batch_ = cfg.evict_batch != 0 ? cfg.evict_batch : std::max<std::size_t>(1, cfg.slot_count / 100);
  }

  void set_evict_listener(EvictListener l) { on_evict_ = std::move(l); }

  [[nodiscard]] std::uint32_t slot_count() const { return cfg_.slot_count; }
  [[nodiscard]] std::uint32_t slot_dim() const { return cfg_.slot_dim; }
  [[nodiscard]] std::uint32_t hot_count() const { return cfg_.slot_count - static_cast<std::uint32_t>(free_.size()); }
  [[nodiscard]] std::size_t free_count() const { return free_.size(); }
  [[nodiscard]] bool is_hot(VertexId v) const { return vertex_slot_[v] != npos; }
  [[nodiscard]] bool is_cold(VertexId v) const { return cold_.contains(v); }
  [[nodiscard]] std::size_t cold_count() const { return cold_.size(); }
  [[nodiscard]] const MemoryStats& stats() const { return stats_; }
  [[nodiscard]] const ColdStore& cold_store() const { return cold_; }
  [[nodiscard]] EvictionKind policy_kind() const { return policy_->kind(); }
  [[nodiscard]] std::uint32_t slot_of(VertexId v) const { return vertex_slot_[v]; }

  [[nodiscard]] std::span<const float> state(VertexId v) const {
    require(is_hot(v), Errc::contract_violation, "vertex " + std::to_string(v) + " is not hot");
    return slot(vertex_slot_[v]);
  }

  /// Assigns a slot, evicting a batch first when none is free. The slot is
  /// zeroed, or set to `initial` when given.
  std::uint32_t admit(VertexId v, std::span<const float> initial = {}) {
    require(!is_hot(v), Errc::contract_violation, "vertex " + std::to_string(v) + " already hot");
    require(released_[v] == 0, Errc::contract_violation, "vertex " + std::to_string(v) + " already completed this layer");
    if (free_.empty()) evict(batch_);
    const std::uint32_t s = free_.back();
    free_.pop_back();
    auto dst = slot(s);
    if (initial.empty()) {
      std::fill(dst.begin(), dst.end(), 0.0f);
    } else {
      require(initial.size() == cfg_.slot_dim, Errc::dim_mismatch, "initial state width");
      std::copy(initial.begin(), initial.end(), dst.begin());
    }
    slot_owner_[s] = v;
    vertex_slot_[v] = s;
    policy_->on_admit(s, pending_[v]);
    ++stats_.admissions;
    check_budget();
    return s;
  }

  /// Applies one message to a hot vertex and returns its remaining pending count.
  std::uint32_t accumulate(VertexId v, std::span<const float> message, Combine combine) {
    const std::uint32_t s = vertex_slot_[v];
    require(s != npos, Errc::contract_violation, "accumulate into non-hot vertex " + std::to_string(v));
    require(pending_[v] > 0, Errc::contract_violation, "vertex " + std::to_string(v) + " has no pending messages");
    auto dst = slot(s);
    if (combine == Combine::sum) {
      require(message.size() <= dst.size(), Errc::dim_mismatch, "message wider than slot");
      for (std::size_t i = 0; i < message.size(); ++i) dst[i] += message[i];
    } else {
      const std::size_t half = dst.size() / 2;
      require(message.size() == half, Errc::dim_mismatch, "self half width");
      std::copy(message.begin(), message.end(), dst.begin() + static_cast<std::ptrdiff_t>(half));
    }
    const std::uint32_t left = --pending_[v];
    policy_->on_accumulate(s, left);
    return left;
  }

  /// Moves up to k policy-chosen victims to the cold store.
  std::vector<VertexId> evict(std::size_t k) {
    const std::uint32_t hot = hot_count();
    if (k > hot) {
      ++stats_.clamped_evictions;
      k = hot;
    }
    std::vector<VertexId> out;
    if (k == 0) return out;
    ++stats_.eviction_events;
    for (std::uint32_t s : policy_->select(k)) {
      const VertexId v = slot_owner_[s];
      cold_.store(v, slot(s));
      slot_owner_[s] = kNoVertex;
      vertex_slot_[v] = npos;
      free_.push_back(s);
      ++stats_.evictions;
      out.push_back(v);
      if (on_evict_) on_evict_(v);
    }
    stats_.peak_cold = std::max<std::uint64_t>(stats_.peak_cold, cold_.size());
    return out;
  }

  std::uint32_t reload(VertexId v) {
    require(!is_hot(v), Errc::contract_violation, "reload of hot vertex " + std::to_string(v));
    if (!cold_.contains(v)) fail(Errc::consistency, "reload of vertex " + std::to_string(v) + " which was never evicted");
    reload_buf_.resize(cfg_.slot_dim);
    cold_.load(v, reload_buf_);
    ++stats_.reloads;
    return admit(v, reload_buf_);
  }

  /// Copies out a completed aggregate and frees its slot.
  void release_into(VertexId v, std::span<float> out) {
    const std::uint32_t s = vertex_slot_[v];
    require(s != npos, Errc::contract_violation, "release of non-hot vertex " + std::to_string(v));
    require(pending_[v] == 0, Errc::contract_violation, "release of vertex " + std::to_string(v) + " with pending messages");
    require(out.size() == cfg_.slot_dim, Errc::dim_mismatch, "release buffer width");
    auto src = slot(s);
    std::copy(src.begin(), src.end(), out.begin());
    policy_->on_remove(s);
    slot_owner_[s] = kNoVertex;
    vertex_slot_[v] = npos;
    released_[v] = 1;
    free_.push_back(s);
    ++stats_.releases;
  }

  std::vector<float> release(VertexId v) {
    std::vector<float> out(cfg_.slot_dim);
    release_into(v, out);
    return out;
  }

 private:
  static constexpr VertexId kNoVertex = ~VertexId{0};

  [[nodiscard]] std::span<float> slot(std::uint32_t s) { return {slots_.data() + std::size_t{s} * cfg_.slot_dim, cfg_.slot_dim}; }
  [[nodiscard]] std::span<const float> slot(std::uint32_t s) const {
    return {slots_.data() + std::size_t{s} * cfg_.slot_dim, cfg_.slot_dim};
  }

  void check_budget() {
    const auto hot = hot_count();
    require(hot <= cfg_.slot_count, Errc::consistency, "hot population exceeds slot count");
    stats_.peak_hot = std::max(stats_.peak_hot, hot);
  }

  MemoryConfig cfg_;
  std::span<std::uint32_t> pending_;
  std::vector<float> slots_;
  std::vector<VertexId> slot_owner_;
  std::vector<std::uint32_t> vertex_slot_;
  std::vector<std::uint8_t> released_;
  std::vector<std::uint32_t> free_;
  std::unique_ptr<EvictionPolicy> policy_;
  ColdStore cold_;
  std::size_t batch_ = 1;
  MemoryStats stats_;
  EvictListener on_evict_;
  std::vector<float> reload_buf_;
};

}  // namespace pushgnn
