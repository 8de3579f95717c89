#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cpl/metrics.hpp"
#include "cpl/rng.hpp"

namespace cpl {

// A batch of unlabeled utterances plus the PLs attached to them and the
// step at which those PLs were generated.
struct CacheEntry {
  std::int64_t batch_id = 0;
  std::vector<std::size_t> utterance_refs;
  std::vector<Transcript> pls;
  long created_step = 0;
};

enum class PoutKind { Constant, Scheduled, Dynamic, DynamicThenOne };
enum class PoutF { Identity, OneMinus };
enum class Writeback { Old, New };

struct PoutStrategy {
  PoutKind kind = PoutKind::Constant;
  double p = 0.1;        // Constant
  double p1 = 0.1;       // Scheduled, before switch_step
  double p2 = 1.0;       // Scheduled, from switch_step on
  long switch_step = 0;  // Scheduled / DynamicThenOne
  PoutF f = PoutF::Identity;

  static PoutStrategy constant(double p) { return {PoutKind::Constant, p, 0, 0, 0, PoutF::Identity}; }
  static PoutStrategy scheduled(double p1, double p2, long k) {
    return {PoutKind::Scheduled, 0, p1, p2, k, PoutF::Identity};
  }
  static PoutStrategy dynamic(PoutF f) { return {PoutKind::Dynamic, 0, 0, 0, 0, f}; }
  static PoutStrategy dynamic_then_one(PoutF f, long k) {
    return {PoutKind::DynamicThenOne, 0, 0, 0, k, f};
  }
};

// f applied to the PL-evolution distance, before clamping.
inline double pout_transfer(PoutF f, double rho) {
  return f == PoutF::Identity ? rho : 1.0 - rho;
}

// Removal probability for a drawn batch. Dynamic strategies pool the
// statistics over the whole batch and clamp to [0,1] since TER can
// exceed 1.
inline double compute_pout(const PoutStrategy& strategy, long step,
                           const std::vector<Transcript>& old_pls,
                           const std::vector<Transcript>& new_pls) {
  switch (strategy.kind) {
    case PoutKind::Constant:
      return strategy.p;
    case PoutKind::Scheduled:
      return step < strategy.switch_step ? strategy.p1 : strategy.p2;
    case PoutKind::DynamicThenOne:
      if (step >= strategy.switch_step) return 1.0;
      [[fallthrough]];
    case PoutKind::Dynamic: {
      if (old_pls.size() != new_pls.size())
        throw std::invalid_argument("compute_pout: PL list length mismatch");
      const double rho = batch_ter(old_pls, new_pls);
      return std::clamp(pout_transfer(strategy.f, rho), 0.0, 1.0);
    }
  }
  throw std::logic_error("compute_pout: unreachable");
}

// Fixed-capacity store of unlabeled batches with PLs generated by past
// model states. Single owner; draws consume the shared cache stream.
class Cache {
 public:
  explicit Cache(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("Cache: capacity must be > 0");
    entries_.reserve(capacity);
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool full() const { return entries_.size() == capacity_; }
  const std::vector<CacheEntry>& entries() const { return entries_; }

  void insert(CacheEntry entry) {
    if (entries_.size() >= capacity_) throw std::logic_error("Cache::insert: cache is full");
    if (entry.utterance_refs.size() != entry.pls.size())
      throw std::invalid_argument("Cache::insert: refs/pls size mismatch");
    entries_.push_back(std::move(entry));
  }

  // Uniformly random entry, provisionally removed; the trainer decides
  // re-admission via readmit or replace.
  CacheEntry draw(Rng& rng) {
    if (!full()) throw std::logic_error("Cache::draw: cache must be full");
    const std::size_t i = rng.uniform_index(entries_.size());
    CacheEntry out = std::move(entries_[i]);
    entries_[i] = std::move(entries_.back());
    entries_.pop_back();
    return out;
  }

  // Puts a drawn entry back. Old keeps the entry untouched; New swaps in
  // freshly generated PLs and stamps the current step.
  void readmit(CacheEntry entry, Writeback writeback, std::vector<Transcript> fresh_pls,
               long current_step) {
    if (entries_.size() >= capacity_) throw std::logic_error("Cache::readmit: no vacated slot");
    if (writeback == Writeback::New) {
      if (fresh_pls.size() != entry.utterance_refs.size())
        throw std::invalid_argument("Cache::readmit: fresh PL size mismatch");
      entry.pls = std::move(fresh_pls);
      entry.created_step = current_step;
    }
    entries_.push_back(std::move(entry));
  }

  // Fills the vacated slot with a fresh batch and its fresh PLs.
  void replace(CacheEntry fresh_entry) {
    if (entries_.size() >= capacity_) throw std::logic_error("Cache::replace: no vacated slot");
    insert(std::move(fresh_entry));
  }

 private:
  std::size_t capacity_;
  std::vector<CacheEntry> entries_;
};

}  // namespace cpl
