#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "tagstream/event.hpp"
#include "tagstream/query_graph.hpp"
#include "tagstream/scoring.hpp"

namespace tagstream {

/// Per-entity alignment cursor: the query graph being aligned, the last
/// aligned node, the path traveled since then, and a reference to the
/// shared alignment status.
struct Tag {
  const QueryGraph* qg = nullptr;
  int active_node = -1;
  std::vector<PathEvent> cached_path;
  std::shared_ptr<AlignmentStatus> status;
  std::int64_t last_align_ts = 0;
};

inline constexpr std::size_t kUnlimitedRounds =
    std::numeric_limits<std::size_t>::max();
inline constexpr std::int64_t kUnlimitedDecay =
    std::numeric_limits<std::int64_t>::max();

/// Time-based removal: strictly older than decay_ms since the last
/// alignment.
inline bool is_out_dated(const Tag& t, std::int64_t now_ms,
                         std::int64_t decay_ms) {
  return now_ms - t.last_align_ts > decay_ms;
}

/// Round-based removal: the cached path outgrew the propagation budget.
inline bool is_out_rounded(const Tag& t, std::size_t max_rounds) {
  return t.cached_path.size() > max_rounds;
}

/// Greedy merge of two same-graph tags. Mutates the higher-scoring input's
/// status in place (so every other branch holding that status sees the
/// union) and returns the merged cursor. Per node and per edge the
/// alignment with the higher score survives; ties go to the earlier-created
/// status. Throws std::invalid_argument on a query-graph mismatch.
inline Tag merge_tags(Tag a, Tag b) {
  if (a.qg != b.qg) throw std::invalid_argument("merge_tags: query graph mismatch");
  if (a.status == b.status) {
    // Same-status duplicates: keep the further-progressed cursor.
    return b.cached_path.size() < a.cached_path.size() ? std::move(b)
                                                       : std::move(a);
  }
  const double sa = graph_score(*a.status, *a.qg);
  const double sb = graph_score(*b.status, *b.qg);
  const bool b_wins = sb > sa + kScoreEps;
  Tag& winner = b_wins ? b : a;
  Tag& loser = b_wins ? a : b;
  AlignmentStatus& w = *winner.status;
  const AlignmentStatus& l = *loser.status;
  const bool loser_older = l.created_ts < w.created_ts;

  for (std::size_t i = 0; i < w.node_align.size(); ++i) {
    if (!l.node_align[i]) continue;
    if (!w.node_align[i]) {
      w.node_align[i] = l.node_align[i];
      continue;
    }
    // Node scores are uniform (s_sink or seed anchor), so rows tie; the
    // earlier-created status keeps its row.
    const bool w_scored = !w.node_align[i]->seed_anchor;
    const bool l_scored = !l.node_align[i]->seed_anchor;
    if (l_scored > w_scored || (l_scored == w_scored && loser_older))
      w.node_align[i] = l.node_align[i];
  }
  for (std::size_t i = 0; i < w.edge_align.size(); ++i) {
    if (!l.edge_align[i]) continue;
    if (!w.edge_align[i]) {
      w.edge_align[i] = l.edge_align[i];
      continue;
    }
    const double ws = w.edge_align[i]->s_ei;
    const double ls = l.edge_align[i]->s_ei;
    if (ls > ws + kScoreEps || (ls > ws - kScoreEps && loser_older))
      w.edge_align[i] = l.edge_align[i];
  }
  w.created_ts = std::min(w.created_ts, l.created_ts);
  w.alerted = w.alerted || l.alerted;

  Tag merged = std::move(winner);
  merged.last_align_ts = std::max(a.last_align_ts, b.last_align_ts);
  return merged;
}

struct EngineConfig {
  std::size_t max_rounds = 6;
  std::int64_t decay_ms = 14'400'000;  // 4 h of event time
  std::size_t per_entity_qg_cap = 4;   // 0 = unlimited
};

struct EngineCounters {
  std::uint64_t events_processed = 0;
  std::uint64_t tags_initialized = 0;
  std::uint64_t tags_propagated = 0;
  std::uint64_t tags_removed = 0;
  std::uint64_t merges = 0;
  std::uint64_t alerts = 0;
};

/// Per-partition streaming engine: the entity-to-tag map plus the tag
/// lifecycle (initialize on seed match, propagate within the active node's
/// neighborhood, merge across branches, decay by time and rounds). Memory
/// tracks tagged entities, never processed events. Not thread-safe; confine
/// one instance to one partition worker.
class TagCache {
 public:
  TagCache(const SeedIndex* idx, EngineConfig cfg = {})
      : idx_(idx), cfg_(cfg) {
    memo_enabled_ = idx_->memo_safe && idx_->predicates.size() <= 64;
  }

  const EngineConfig& config() const { return cfg_; }
  const EngineCounters& counters() const { return counters_; }
  std::size_t active_tags() const { return resident_; }

  /// Consume one event: seed-match initialization, expiry of stale cursors
  /// on the subject, then propagation of every surviving tag. Returns the
  /// alerts that crossed their threshold on this event.
  std::vector<Alert> process_event(const Event& ev) {
    ++counters_.events_processed;
    std::vector<Alert> alerts;

    // Seed phase: register fresh tags wherever a seed matches.
    if (!idx_->node_seeds.empty() || !idx_->edge_seeds.empty()) {
      const std::uint64_t subj_bits = seed_bits(ev.subject);
      for (std::size_t i = 0; i < idx_->node_seeds.size(); ++i) {
        const auto& ns = idx_->node_seeds[i];
        if (!seed_pred_matches(subj_bits, ns.pred_ord, ev.subject)) continue;
        auto st = new_status(ns.g, ev);
        st->node_align[ns.node] =
            NodeAlignment{ev.subject.id, ev.subject.display(), true};
        Tag t{ns.g, ns.node, {}, st, ev.ts};
        ++counters_.tags_initialized;
        insert_seed_tag(ev.subject.id, std::move(t));
      }
      if (!idx_->edge_seeds.empty()) {
        const std::uint64_t obj_bits = seed_bits(ev.object);
        for (const auto& es : idx_->edge_seeds) {
          const QueryEdge& e = es.g->edges[es.edge];
          if (!e.admits(ev.op)) continue;
          if (!seed_pred_matches(subj_bits, es.src_ord, ev.subject)) continue;
          if (!seed_pred_matches(obj_bits, es.dst_ord, ev.object)) continue;
          auto st = new_status(es.g, ev);
          st->node_align[e.src] =
              NodeAlignment{ev.subject.id, ev.subject.display(), true};
          st->node_align[e.dst] =
              NodeAlignment{ev.object.id, ev.object.display(), false};
          st->edge_align[es.edge] =
              EdgeAlignment{{to_path_event(ev)}, edge_score(1, es.g->s_sink)};
          Tag t{es.g, e.dst, {}, st, ev.ts};
          ++counters_.tags_initialized;
          insert_seed_tag(ev.object.id, std::move(t));
          maybe_alert(st, ev, alerts);
        }
      }
    }

    auto it = tags_.find(ev.subject.id);
    if (it == tags_.end()) return alerts;

    // Expiry phase: drop stale cursors before they can propagate.
    std::vector<Tag>& list = it->second;
    std::size_t kept = 0;
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (is_out_dated(list[i], ev.ts, cfg_.decay_ms) ||
          is_out_rounded(list[i], cfg_.max_rounds)) {
        ++counters_.tags_removed;
        --resident_;
      } else {
        if (kept != i) list[kept] = std::move(list[i]);
        ++kept;
      }
    }
    list.resize(kept);
    if (list.empty()) {
      tags_.erase(it);
      return alerts;
    }

    // Propagation phase over a snapshot: originals stay on the subject so
    // sibling branches can still align; insertions made while looping must
    // not be re-propagated for this event.
    std::vector<Tag> snapshot = list;
    for (const Tag& t : snapshot) propagate_tag(t, ev, alerts);
    return alerts;
  }

  /// Remove every out-dated tag. Statuses dissolve with their last referrer
  /// unless they already alerted.
  std::size_t sweep_expired(std::int64_t now_ms) {
    std::size_t removed = 0;
    for (auto it = tags_.begin(); it != tags_.end();) {
      std::vector<Tag>& list = it->second;
      std::size_t kept = 0;
      for (std::size_t i = 0; i < list.size(); ++i) {
        if (is_out_dated(list[i], now_ms, cfg_.decay_ms) ||
            is_out_rounded(list[i], cfg_.max_rounds)) {
          ++removed;
          --resident_;
        } else {
          if (kept != i) list[kept] = std::move(list[i]);
          ++kept;
        }
      }
      list.resize(kept);
      if (list.empty())
        it = tags_.erase(it);
      else
        ++it;
    }
    counters_.tags_removed += removed;
    statuses_.erase(std::remove_if(statuses_.begin(), statuses_.end(),
                                   [](const std::weak_ptr<AlignmentStatus>& w) {
                                     return w.expired();
                                   }),
                    statuses_.end());
    return removed;
  }

  /// Residents violating a decay predicate at `now_ms`; zero right after a
  /// sweep.
  std::size_t audit_expired(std::int64_t now_ms) const {
    std::size_t n = 0;
    for (const auto& [id, list] : tags_) {
      for (const Tag& t : list)
        if (is_out_dated(t, now_ms, cfg_.decay_ms) ||
            is_out_rounded(t, cfg_.max_rounds))
          ++n;
    }
    return n;
  }

  /// All statuses still referenced by some tag (or retained after
  /// alerting), deduplicated.
  std::vector<std::shared_ptr<AlignmentStatus>> live_statuses() const {
    std::vector<std::shared_ptr<AlignmentStatus>> out;
    std::unordered_map<const AlignmentStatus*, bool> seen;
    for (const auto& w : statuses_) {
      if (auto s = w.lock()) {
        if (!seen.emplace(s.get(), true).second) continue;
        out.push_back(std::move(s));
      }
    }
    return out;
  }

  std::size_t live_status_count() const {
    std::size_t n = 0;
    std::unordered_map<const AlignmentStatus*, bool> seen;
    for (const auto& w : statuses_)
      if (auto s = w.lock())
        if (seen.emplace(s.get(), true).second) ++n;
    return n;
  }

  /// Statuses that alerted at some point, retained for end-of-run
  /// reporting (e.g. the final score of each alerted alignment).
  const std::vector<std::shared_ptr<AlignmentStatus>>& alerted_statuses()
      const {
    return alerted_;
  }

  template <typename Fn>
  void for_each_entity(Fn&& fn) const {
    for (const auto& [id, list] : tags_) fn(id, list);
  }

  std::size_t recount_resident() const {
    std::size_t n = 0;
    for (const auto& [id, list] : tags_) n += list.size();
    return n;
  }

 private:
  std::shared_ptr<AlignmentStatus> new_status(const QueryGraph* g,
                                              const Event& ev) {
    auto st = std::make_shared<AlignmentStatus>(g);
    st->status_id = next_status_id_++;
    st->host = ev.subject.host;
    st->created_ts = ev.ts;
    statuses_.push_back(st);
    return st;
  }

  void maybe_alert(const std::shared_ptr<AlignmentStatus>& st, const Event& ev,
                   std::vector<Alert>& alerts) {
    const double sc = graph_score(*st, *st->qg);
    if (should_alert(*st, *st->qg, sc)) {
      st->alerted = true;
      ++counters_.alerts;
      alerts.push_back(make_alert(*st, *st->qg, ev.ts, ev.seq));
      alerted_.push_back(st);
    }
  }

  void propagate_tag(const Tag& tag, const Event& ev,
                     std::vector<Alert>& alerts) {
    ++counters_.tags_propagated;
    auto hit = search(*tag.qg, tag.active_node, ev);
    if (!hit) {
      if (tag.cached_path.size() + 1 > cfg_.max_rounds) return;
      Tag clone = tag;
      clone.cached_path.push_back(to_path_event(ev));
      place(ev, std::move(clone), alerts);
      return;
    }
    const auto [edge_idx, dst] = *hit;
    AlignmentStatus& st = *tag.status;
    auto& dst_align = st.node_align[dst];
    if (dst_align && dst_align->entity_id != ev.object.id) {
      // First alignment wins: a hit proposing a different entity for an
      // already-aligned query node is dropped.
      return;
    }
    bool updated = false;
    if (!dst_align) {
      dst_align = NodeAlignment{ev.object.id, ev.object.display(), false};
      updated = true;
    }
    if (!st.edge_align[edge_idx]) {
      std::vector<PathEvent> path = tag.cached_path;
      path.push_back(to_path_event(ev));
      const std::size_t len = path.size();
      st.edge_align[edge_idx] =
          EdgeAlignment{std::move(path), edge_score(len, tag.qg->s_sink)};
      updated = true;
    }
    if (updated) maybe_alert(tag.status, ev, alerts);
    Tag clone{tag.qg, dst, {}, tag.status, ev.ts};
    place(ev, std::move(clone), alerts);
  }

  void insert_seed_tag(const std::string& entity_id, Tag&& t) {
    std::vector<Tag>& list = tags_[entity_id];
    list.push_back(std::move(t));
    ++resident_;
    enforce_cap(list, list.back().qg);
  }

  void place(const Event& ev, Tag&& t, std::vector<Alert>& alerts) {
    std::vector<Tag>& list = tags_[ev.object.id];
    for (Tag& r : list) {
      if (r.status == t.status) {
        if (t.cached_path.size() < r.cached_path.size()) r = std::move(t);
        return;
      }
    }
    int best = -1;
    double best_score = -1.0;
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (list[i].qg != t.qg) continue;
      const double s = graph_score(*list[i].status, *list[i].qg);
      if (s > best_score + kScoreEps) {
        best_score = s;
        best = static_cast<int>(i);
      }
    }
    if (best >= 0) {
      list[best] = merge_tags(std::move(list[best]), std::move(t));
      ++counters_.merges;
      ++counters_.tags_removed;  // two lineages became one
      maybe_alert(list[best].status, ev, alerts);
      return;
    }
    const QueryGraph* g = t.qg;
    list.push_back(std::move(t));
    ++resident_;
    enforce_cap(list, g);
  }

  // Per-entity, per-query-graph cap: evict the lowest graph score; on ties
  // the newest cursor goes (a fresh duplicate explores a strict subset of
  // what an older resident can still reach). Zero disables.
  void enforce_cap(std::vector<Tag>& list, const QueryGraph* g) {
    if (cfg_.per_entity_qg_cap == 0) return;
    std::size_t count = 0;
    for (const Tag& t : list)
      if (t.qg == g) ++count;
    if (count <= cfg_.per_entity_qg_cap) return;
    int victim = -1;
    double worst = 0.0;
    std::int64_t newest = 0;
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (list[i].qg != g) continue;
      const double s = graph_score(*list[i].status, *g);
      bool take = victim < 0 || s < worst - kScoreEps ||
                  (s < worst + kScoreEps && list[i].last_align_ts >= newest);
      if (take) {
        worst = s;
        newest = list[i].last_align_ts;
        victim = static_cast<int>(i);
      }
    }
    if (victim >= 0) {
      list.erase(list.begin() + victim);
      ++counters_.tags_removed;
      --resident_;
    }
  }

  // Seed predicate verdicts per entity id; valid because seed predicates
  // reference only identity-determining attributes when memoization is on.
  std::uint64_t seed_bits(const Entity& e) {
    if (!memo_enabled_) return 0;
    auto [it, fresh] = seed_memo_.try_emplace(e.id, 0);
    if (fresh) {
      std::uint64_t bits = 0;
      for (std::size_t i = 0; i < idx_->predicates.size(); ++i)
        if (idx_->predicates[i]->matches(e)) bits |= std::uint64_t(1) << i;
      it->second = bits;
    }
    return it->second;
  }

  bool seed_pred_matches(std::uint64_t bits, int ord, const Entity& e) const {
    if (memo_enabled_) return (bits >> ord) & 1;
    return idx_->predicates[ord]->matches(e);
  }

  const SeedIndex* idx_;
  EngineConfig cfg_;
  EngineCounters counters_;
  bool memo_enabled_ = false;
  std::size_t resident_ = 0;
  std::uint64_t next_status_id_ = 1;
  std::unordered_map<std::string, std::vector<Tag>> tags_;
  std::unordered_map<std::string, std::uint64_t> seed_memo_;
  std::vector<std::weak_ptr<AlignmentStatus>> statuses_;
  std::vector<std::shared_ptr<AlignmentStatus>> alerted_;
};

}  // namespace tagstream
