// SPDX-License-Identifier: Apache-2.0
//
// Victim selection for the hot store. Nodes are hot-store slot indices.

#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pushgnn/common.hpp"
#include "pushgnn/storage.hpp"

namespace pushgnn {

/// Min-structure over small integer priorities: one intrusive doubly-linked
/// list per priority value. insert/remove/decrement are O(1); pop_min(k)
/// scans upward from the lowest non-empty bucket. Within a bucket nodes leave
/// in the order they entered it.
class BucketHeap {
 public:
  static constexpr std::uint32_t npos = std::numeric_limits<std::uint32_t>::max();

  BucketHeap(std::uint32_t node_capacity, std::uint32_t max_priority)
      : prev_(node_capacity, npos),
        next_(node_capacity, npos),
        prio_(node_capacity, npos),
        head_(std::size_t{max_priority} + 1, npos),
        tail_(std::size_t{max_priority} + 1, npos),
        min_hint_(max_priority + 1) {}

  [[nodiscard]] std::size_t size() const { return size_; }
  [[nodiscard]] bool empty() const { return size_ == 0; }
  [[nodiscard]] bool contains(std::uint32_t node) const { return prio_[node] != npos; }
  [[nodiscard]] std::uint32_t priority(std::uint32_t node) const { return prio_[node]; }
  [[nodiscard]] std::uint32_t max_priority() const { return static_cast<std::uint32_t>(head_.size() - 1); }

  void insert(std::uint32_t node, std::uint32_t priority) {
    require(node < prio_.size(), Errc::contract_violation, "heap node out of range");
    require(!contains(node), Errc::contract_violation, "heap node inserted twice");
    require(priority <= max_priority(), Errc::contract_violation, "heap priority above bucket range");
    link_tail(node, priority);
    ++size_;
  }

  void decrement(std::uint32_t node) {
    require(contains(node), Errc::contract_violation, "decrement of absent heap node");
    const std::uint32_t p = prio_[node];
    require(p > 0, Errc::contract_violation, "heap priority already zero");
    unlink(node);
    link_tail(node, p - 1);
  }

  void remove(std::uint32_t node) {
    require(contains(node), Errc::contract_violation, "remove of absent heap node");
    unlink(node);
    prio_[node] = npos;
    --size_;
  }

  [[nodiscard]] std::optional<std::uint32_t> peek_min() {
    advance_hint();
    if (min_hint_ >= head_.size()) return std::nullopt;
    return head_[min_hint_];
  }

  std::optional<std::uint32_t> pop_min() {
    auto n = peek_min();
    if (n) remove(*n);
    return n;
  }

  std::vector<std::uint32_t> pop_min(std::size_t k) {
    std::vector<std::uint32_t> out;
    out.reserve(std::min(k, size_));
    while (out.size() < k) {
      auto n = pop_min();
      if (!n) break;
      out.push_back(*n);
    }
    return out;
  }

 private:
  void link_tail(std::uint32_t node, std::uint32_t p) {
    prio_[node] = p;
    prev_[node] = tail_[p];
    next_[node] = npos;
    if (tail_[p] != npos) next_[tail_[p]] = node;
    else head_[p] = node;
    tail_[p] = node;
    if (p < min_hint_) min_hint_ = p;
  }

  void unlink(std::uint32_t node) {
    const std::uint32_t p = prio_[node];
    if (prev_[node] != npos) next_[prev_[node]] = next_[node];
    else head_[p] = next_[node];
    if (next_[node] != npos) prev_[next_[node]] = prev_[node];
    else tail_[p] = prev_[node];
    prev_[node] = next_[node] = npos;
  }

  void advance_hint() {
    while (min_hint_ < head_.size() && head_[min_hint_] == npos) ++min_hint_;
  }

  std::vector<std::uint32_t> prev_, next_, prio_;
  std::vector<std::uint32_t> head_, tail_;
  std::size_t size_ = 0;
  std::uint32_t min_hint_;
};

enum class EvictionKind { min_pending, lru, random };

inline EvictionKind parse_eviction(std::string_view s) {
  if (s == "minpend" || s == "min_pending") return EvictionKind::min_pending;
  if (s == "lru") return EvictionKind::lru;
  if (s == "rnd" || s == "random") return EvictionKind::random;
  fail(Errc::config, "unknown eviction policy '" + std::string(s) + "' (minpend|lru|rnd)");
}

inline std::string_view eviction_name(EvictionKind k) {
  switch (k) {
    case EvictionKind::min_pending: return "minpend";
    case EvictionKind::lru: return "lru";
    case EvictionKind::random: return "rnd";
  }
  return "?";
}

/// Tracks resident slots and picks eviction victims. select() detaches the
/// victims from the policy's own bookkeeping.
class EvictionPolicy {
 public:
  virtual ~EvictionPolicy() = default;
  virtual void on_admit(std::uint32_t slot, std::uint32_t pending) = 0;
  virtual void on_accumulate(std::uint32_t slot, std::uint32_t pending_after) = 0;
  virtual void on_remove(std::uint32_t slot) = 0;
  virtual std::vector<std::uint32_t> select(std::size_t k) = 0;
  [[nodiscard]] virtual EvictionKind kind() const = 0;
};

class MinPendingPolicy final : public EvictionPolicy {
 public:
  MinPendingPolicy(std::uint32_t slots, std::uint32_t max_pending) : heap_(slots, max_pending) {}
  void on_admit(std::uint32_t slot, std::uint32_t pending) override { heap_.insert(slot, pending); }
  void on_accumulate(std::uint32_t slot, std::uint32_t pending_after) override {
    heap_.decrement(slot);
    require(heap_.priority(slot) == pending_after, Errc::consistency, "heap bucket out of sync with pending count");
  }
  void on_remove(std::uint32_t slot) override { heap_.remove(slot); }
  std::vector<std::uint32_t> select(std::size_t k) override { return heap_.pop_min(k); }
  [[nodiscard]] EvictionKind kind() const override { return EvictionKind::min_pending; }

 private:
  BucketHeap heap_;
};

/// Least recently accumulated first.
class LruPolicy final : public EvictionPolicy {
 public:
  explicit LruPolicy(std::uint32_t slots) : prev_(slots, npos), next_(slots, npos), in_(slots, 0) {}
  void on_admit(std::uint32_t slot, std::uint32_t) override {
    in_[slot] = 1;
    push_back(slot);
  }
  void on_accumulate(std::uint32_t slot, std::uint32_t) override {
    unlink(slot);
    push_back(slot);
  }
  void on_remove(std::uint32_t slot) override {
    unlink(slot);
    in_[slot] = 0;
  }
  std::vector<std::uint32_t> select(std::size_t k) override {
    std::vector<std::uint32_t> out;
    while (out.size() < k && head_ != npos) {
      const auto s = head_;
      on_remove(s);
      out.push_back(s);
    }
    return out;
  }
  [[nodiscard]] EvictionKind kind() const override { return EvictionKind::lru; }

 private:
  static constexpr std::uint32_t npos = BucketHeap::npos;
  void push_back(std::uint32_t s) {
    prev_[s] = tail_;
    next_[s] = npos;
    if (tail_ != npos) next_[tail_] = s;
    else head_ = s;
    tail_ = s;
  }
  void unlink(std::uint32_t s) {
    if (prev_[s] != npos) next_[prev_[s]] = next_[s];
    else head_ = next_[s];
    if (next_[s] != npos) prev_[next_[s]] = prev_[s];
    else tail_ = prev_[s];
    prev_[s] = next_[s] = npos;
  }
  std::vector<std::uint32_t> prev_, next_;
  std::vector<std::uint8_t> in_;
  std::uint32_t head_ = npos;
  std::uint32_t tail_ = npos;
};

/// Uniformly random resident slot, seeded.
class RandomPolicy final : public EvictionPolicy {
 public:
  RandomPolicy(std::uint32_t slots, std::uint64_t seed) : where_(slots, npos), rng_(seed) {}
  void on_admit(std::uint32_t slot, std::uint32_t) override {
    where_[slot] = static_cast<std::uint32_t>(members_.size());
    members_.push_back(slot);
  }
  void on_accumulate(std::uint32_t, std::uint32_t) override {}
  void on_remove(std::uint32_t slot) override {
    const auto i = where_[slot];
    const auto last = members_.back();
    members_[i] = last;
    where_[last] = i;
    members_.pop_back();
    where_[slot] = npos;
  }
  std::vector<std::uint32_t> select(std::size_t k) override {
    std::vector<std::uint32_t> out;
    while (out.size() < k && !members_.empty()) {
      const auto s = members_[rng_.below(members_.size())];
      on_remove(s);
      out.push_back(s);
    }
    return out;
  }
  [[nodiscard]] EvictionKind kind() const override { return EvictionKind::random; }

 private:
  static constexpr std::uint32_t npos = BucketHeap::npos;
  std::vector<std::uint32_t> where_;
  std::vector<std::uint32_t> members_;
  SplitMix64 rng_;
};

inline std::unique_ptr<EvictionPolicy> make_policy(EvictionKind kind, std::uint32_t slots, std::uint32_t max_pending,
                                                   std::uint64_t seed) {
  switch (kind) {
    case EvictionKind::min_pending: return std::make_unique<MinPendingPolicy>(slots, max_pending);
    case EvictionKind::lru: return std::make_unique<LruPolicy>(slots);
    case EvictionKind::random: return std::make_unique<RandomPolicy>(slots, seed);
  }
  fail(Errc::config, "unknown eviction policy");
}

}  // namespace pushgnn
