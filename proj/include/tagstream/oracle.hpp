#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "tagstream/engine.hpp"
#include "tagstream/event.hpp"
#include "tagstream/query_graph.hpp"
#include "tagstream/scoring.hpp"

namespace tagstream {

struct TraceTooLarge : std::runtime_error {
  explicit TraceTooLarge(std::size_t n)
      : std::runtime_error("oracle_align: trace of " + std::to_string(n) +
                           " events exceeds the 200-event guard") {}
};

struct OracleEdge {
  std::size_t best_len = 0;      // shortest path, i.e. maximal s_ei
  double s_ei = 0.0;
  std::size_t earliest_end = 0;  // first event index completing this edge
  bool unique_best = true;       // exactly one path of best length
};

struct OracleAlignment {
  std::map<std::string, std::string> nodes;  // node id -> entity id
  std::map<std::string, OracleEdge> edges;   // edge id -> best alignment
  double score = 0.0;
};

/// Brute-force offline aligner. Materializes the trace as a provenance
/// graph, then enumerates seed-anchored assignments of query nodes to
/// entities, searching all stream-order paths (length <= max_path, final
/// verb admitted, intermediates not consumed by a sibling edge) between
/// assigned entities. Exponential cost accepted; guarded to small traces.
class Oracle {
 public:
  Oracle(const std::vector<Event>& trace, const QueryGraph& g,
         std::size_t max_path)
      : trace_(trace), g_(g), max_path_(max_path) {
    if (trace.size() > 200) throw TraceTooLarge(trace.size());
    for (std::size_t i = 0; i < trace.size(); ++i) {
      const Event& ev = trace[i];
      subject_events_[ev.subject.id].push_back(i);
      entities_.try_emplace(ev.subject.id, &ev.subject);
      entities_.try_emplace(ev.object.id, &ev.object);
    }
  }

  std::vector<OracleAlignment> run() {
    std::vector<State> finals;
    for (const auto& seed : g_.seeds) {
      if (seed.is_edge)
        seed_edge_states(seed.index, finals);
      else
        seed_node_states(seed.index, finals);
    }
    std::vector<OracleAlignment> out;
    std::map<std::string, bool> seen;
    for (const State& s : finals) {
      OracleAlignment a = to_alignment(s);
      if (a.edges.empty()) continue;
      std::string key;
      for (const auto& [n, e] : a.nodes) key += n + "=" + e + ";";
      for (const auto& [e, oe] : a.edges)
        key += e + ":" + std::to_string(oe.best_len) + ";";
      if (seen.emplace(key, true).second) out.push_back(std::move(a));
    }
    return out;
  }

 private:
  struct NodeState {
    std::string entity;
    std::ptrdiff_t avail = -1;  // paths out must start strictly after this
    bool expandable = true;     // edge-seed sources never get a cursor
  };
  struct State {
    std::vector<std::optional<NodeState>> nodes;
    std::vector<std::optional<OracleEdge>> edges;
  };
  struct PathHit {
    const std::string* dst;
    std::size_t len;
    std::size_t end_index;
  };

  State fresh_state() const {
    State s;
    s.nodes.resize(g_.nodes.size());
    s.edges.resize(g_.edges.size());
    return s;
  }

  // First out-edge of node u admitting this event, mirroring the engine's
  // first-match-in-document-order rule (re-implemented here so the two
  // sides do not share the code path under test).
  int classify(int u, const Event& ev) const {
    for (int ei : g_.out_edges[u]) {
      const QueryEdge& e = g_.edges[ei];
      if (!e.admits(ev.op)) continue;
      if (g_.nodes[e.dst].pred.matches(ev.object)) return ei;
    }
    return -1;
  }

  void find_paths(int u, int target_edge, const std::string& entity,
                  std::ptrdiff_t after, std::size_t depth,
                  std::vector<PathHit>& out) const {
    auto it = subject_events_.find(entity);
    if (it == subject_events_.end()) return;
    for (std::size_t idx : it->second) {
      if (static_cast<std::ptrdiff_t>(idx) <= after) continue;
      if (++steps_ > kStepBudget)
        throw std::runtime_error("oracle_align: step budget exceeded");
      const Event& ev = trace_[idx];
      if (depth + 1 > max_path_) break;
      int hit = classify(u, ev);
      if (hit == target_edge) {
        out.push_back({&ev.object.id, depth + 1, idx});
      } else if (hit < 0 && depth + 1 < max_path_) {
        find_paths(u, target_edge, ev.object.id,
                   static_cast<std::ptrdiff_t>(idx), depth + 1, out);
      }
    }
  }

  static OracleEdge summarize_paths(const std::vector<PathHit>& hits,
                                    double s_sink) {
    OracleEdge oe;
    oe.best_len = SIZE_MAX;
    oe.earliest_end = SIZE_MAX;
    std::size_t best_count = 0;
    for (const PathHit& h : hits) {
      oe.earliest_end = std::min(oe.earliest_end, h.end_index);
      if (h.len < oe.best_len) {
        oe.best_len = h.len;
        best_count = 1;
      } else if (h.len == oe.best_len) {
        ++best_count;
      }
    }
    oe.s_ei = edge_score(oe.best_len, s_sink);
    oe.unique_best = best_count == 1;
    return oe;
  }

  void seed_node_states(int node, std::vector<State>& finals) {
    const NodePredicate& pred = g_.nodes[node].pred;
    for (const auto& [id, indices] : subject_events_) {
      (void)indices;
      if (!pred.matches(*entities_.at(id))) continue;
      State s = fresh_state();
      s.nodes[node] = NodeState{id, -1, true};
      solve(std::move(s), finals);
    }
  }

  void seed_edge_states(int edge, std::vector<State>& finals) {
    const QueryEdge& e = g_.edges[edge];
    // Earliest matching event per (subject, object) pair; later matches
    // explore strictly less.
    std::map<std::pair<std::string, std::string>, std::pair<std::size_t, std::size_t>>
        pairs;  // -> (earliest index, match count)
    for (std::size_t i = 0; i < trace_.size(); ++i) {
      const Event& ev = trace_[i];
      if (!e.admits(ev.op)) continue;
      if (!g_.nodes[e.src].pred.matches(ev.subject)) continue;
      if (!g_.nodes[e.dst].pred.matches(ev.object)) continue;
      auto [it, fresh] = pairs.try_emplace({ev.subject.id, ev.object.id},
                                           std::make_pair(i, std::size_t{1}));
      if (!fresh) ++it->second.second;
    }
    for (const auto& [pair, info] : pairs) {
      State s = fresh_state();
      s.nodes[e.src] = NodeState{pair.first, -1, false};
      s.nodes[e.dst] =
          NodeState{pair.second, static_cast<std::ptrdiff_t>(info.first), true};
      OracleEdge oe;
      oe.best_len = 1;
      oe.s_ei = edge_score(1, g_.s_sink);
      oe.earliest_end = info.first;
      oe.unique_best = info.second == 1;
      s.edges[edge] = oe;
      solve(std::move(s), finals);
    }
  }

  void solve(State s, std::vector<State>& finals) {
    // Fixpoint over edges whose endpoints are both assigned: path sets can
    // only grow as avail indices move earlier.
    bool changed = true;
    while (changed) {
      changed = false;
      for (std::size_t ei = 0; ei < g_.edges.size(); ++ei) {
        const QueryEdge& e = g_.edges[ei];
        if (!s.nodes[e.src] || !s.nodes[e.src]->expandable) continue;
        if (!s.nodes[e.dst]) continue;
        std::vector<PathHit> hits;
        find_paths(e.src, static_cast<int>(ei), s.nodes[e.src]->entity,
                   s.nodes[e.src]->avail, 0, hits);
        hits.erase(std::remove_if(hits.begin(), hits.end(),
                                  [&](const PathHit& h) {
                                    return *h.dst != s.nodes[e.dst]->entity;
                                  }),
                   hits.end());
        if (hits.empty()) continue;
        OracleEdge oe = summarize_paths(hits, g_.s_sink);
        if (!s.edges[ei] || oe.best_len != s.edges[ei]->best_len ||
            oe.earliest_end != s.edges[ei]->earliest_end ||
            oe.unique_best != s.edges[ei]->unique_best) {
          s.edges[ei] = oe;
          changed = true;
        }
        if (static_cast<std::ptrdiff_t>(oe.earliest_end) <
            s.nodes[e.dst]->avail) {
          s.nodes[e.dst]->avail = static_cast<std::ptrdiff_t>(oe.earliest_end);
          changed = true;
        }
      }
    }

    // Branch on the first edge that could align a still-unassigned node.
    for (std::size_t ei = 0; ei < g_.edges.size(); ++ei) {
      const QueryEdge& e = g_.edges[ei];
      if (!s.nodes[e.src] || !s.nodes[e.src]->expandable) continue;
      if (s.nodes[e.dst]) continue;
      std::vector<PathHit> hits;
      find_paths(e.src, static_cast<int>(ei), s.nodes[e.src]->entity,
                 s.nodes[e.src]->avail, 0, hits);
      if (hits.empty()) continue;
      std::map<std::string, std::vector<PathHit>> by_dst;
      for (const PathHit& h : hits) by_dst[*h.dst].push_back(h);
      for (const auto& [dst, dst_hits] : by_dst) {
        State child = s;
        OracleEdge oe = summarize_paths(dst_hits, g_.s_sink);
        child.nodes[e.dst] = NodeState{
            dst, static_cast<std::ptrdiff_t>(oe.earliest_end), true};
        child.edges[ei] = oe;
        solve(std::move(child), finals);
      }
      return;  // assigning strictly extends; the unassigned variant is dominated
    }
    finals.push_back(std::move(s));
  }

  OracleAlignment to_alignment(const State& s) const {
    OracleAlignment a;
    double sum = 0.0;
    for (std::size_t i = 0; i < g_.nodes.size(); ++i)
      if (s.nodes[i]) a.nodes[g_.nodes[i].id] = s.nodes[i]->entity;
    for (std::size_t i = 0; i < g_.edges.size(); ++i) {
      if (!s.edges[i]) continue;
      a.edges[g_.edges[i].id] = *s.edges[i];
      sum += s.edges[i]->s_ei;
    }
    a.score = sum / (2.0 * static_cast<double>(g_.edge_count()));
    return a;
  }

  static constexpr std::uint64_t kStepBudget = 50'000'000;

  const std::vector<Event>& trace_;
  const QueryGraph& g_;
  std::size_t max_path_;
  std::unordered_map<std::string, std::vector<std::size_t>> subject_events_;
  std::unordered_map<std::string, const Entity*> entities_;
  mutable std::uint64_t steps_ = 0;
};

inline std::vector<OracleAlignment> oracle_align(
    const std::vector<Event>& trace, const QueryGraph& g,
    std::size_t max_path) {
  if (max_path == 0) throw std::invalid_argument("oracle_align: max_path >= 1");
  return Oracle(trace, g, max_path).run();
}

/// One comparable alignment: per-edge scores (engine statuses and oracle
/// alignments reduce to the same shape).
struct AlignmentDigest {
  std::string qg;
  std::map<std::string, double> edges;          // edge id -> s_ei
  std::map<std::string, bool> unique;           // oracle only
  double score = 0.0;

  std::string edge_set_key() const {
    std::string k = qg + "|";
    for (const auto& [id, s] : edges) {
      (void)s;
      k += id + ",";
    }
    return k;
  }

  std::string full_key() const {
    std::string k = qg + "|";
    char buf[32];
    for (const auto& [id, s] : edges) {
      std::snprintf(buf, sizeof buf, "%.9f", s);
      k += id + "=" + buf + ";";
    }
    return k;
  }
};

inline std::vector<AlignmentDigest> digest_statuses(
    const std::vector<std::shared_ptr<AlignmentStatus>>& statuses) {
  std::vector<AlignmentDigest> out;
  std::map<std::string, bool> seen;
  for (const auto& st : statuses) {
    if (!st || st->aligned_edge_count() == 0) continue;
    AlignmentDigest d;
    d.qg = st->qg->id;
    for (std::size_t i = 0; i < st->edge_align.size(); ++i)
      if (st->edge_align[i])
        d.edges[st->qg->edges[i].id] = st->edge_align[i]->s_ei;
    d.score = graph_score(*st, *st->qg);
    if (seen.emplace(d.full_key(), true).second) out.push_back(std::move(d));
  }
  return out;
}

inline std::vector<AlignmentDigest> digest_oracle(
    const std::string& qg_id, const std::vector<OracleAlignment>& alignments) {
  std::vector<AlignmentDigest> out;
  std::map<std::string, bool> seen;
  for (const auto& a : alignments) {
    AlignmentDigest d;
    d.qg = qg_id;
    for (const auto& [id, oe] : a.edges) {
      d.edges[id] = oe.s_ei;
      d.unique[id] = oe.unique_best;
    }
    d.score = a.score;
    if (seen.emplace(d.full_key(), true).second) out.push_back(std::move(d));
  }
  return out;
}

/// Drop digests whose edge set and per-edge scores are covered by another
/// digest (late seed re-initializations leave such remnants in the engine;
/// sub-assignments leave them in the oracle).
inline std::vector<AlignmentDigest> reduce_dominated(
    std::vector<AlignmentDigest> in) {
  auto dominated = [](const AlignmentDigest& a, const AlignmentDigest& b) {
    if (a.qg != b.qg) return false;
    if (a.edges.size() > b.edges.size()) return false;
    if (a.full_key() == b.full_key()) return false;
    for (const auto& [id, s] : a.edges) {
      auto it = b.edges.find(id);
      if (it == b.edges.end() || it->second < s - kScoreEps) return false;
    }
    return true;
  };
  std::vector<AlignmentDigest> out;
  for (std::size_t i = 0; i < in.size(); ++i) {
    bool drop = false;
    for (std::size_t j = 0; j < in.size() && !drop; ++j)
      if (i != j && dominated(in[i], in[j])) drop = true;
    if (!drop) out.push_back(in[i]);
  }
  return out;
}

/// Zero-tolerance equivalence checks between the streaming result and the
/// oracle: aligned-edge sets must match exactly; per-edge scores may not
/// exceed the oracle's and must equal it wherever the oracle's best path is
/// unique. Returns human-readable mismatches; empty means equivalent.
inline std::vector<std::string> compare_engine_to_oracle(
    std::vector<AlignmentDigest> engine, std::vector<AlignmentDigest> oracle) {
  std::vector<std::string> issues;
  engine = reduce_dominated(std::move(engine));
  oracle = reduce_dominated(std::move(oracle));

  std::map<std::string, std::vector<const AlignmentDigest*>> e_by_set, o_by_set;
  for (const auto& d : engine) e_by_set[d.edge_set_key()].push_back(&d);
  for (const auto& d : oracle) o_by_set[d.edge_set_key()].push_back(&d);

  for (const auto& [k, v] : e_by_set) {
    (void)v;
    if (!o_by_set.count(k)) issues.push_back("engine-only edge set: " + k);
  }
  for (const auto& [k, v] : o_by_set) {
    (void)v;
    if (!e_by_set.count(k)) issues.push_back("oracle-only edge set: " + k);
  }

  for (const auto& [k, evs] : e_by_set) {
    auto oit = o_by_set.find(k);
    if (oit == o_by_set.end()) continue;
    std::map<std::string, double> e_best, o_best;
    std::map<std::string, bool> o_unique;
    for (const auto* d : evs)
      for (const auto& [id, s] : d->edges) {
        auto [it, fresh] = e_best.try_emplace(id, s);
        if (!fresh) it->second = std::max(it->second, s);
      }
    for (const auto* d : oit->second)
      for (const auto& [id, s] : d->edges) {
        auto [it, fresh] = o_best.try_emplace(id, s);
        bool better = fresh || s > it->second;
        if (!fresh) it->second = std::max(it->second, s);
        if (better) o_unique[id] = d->unique.count(id) ? d->unique.at(id) : false;
      }
    for (const auto& [id, es] : e_best) {
      double os = o_best.at(id);
      if (es > os + kScoreEps)
        issues.push_back("engine beats oracle on " + k + " edge " + id);
      else if (o_unique[id] && std::abs(es - os) > kScoreEps)
        issues.push_back("score mismatch on " + k + " edge " + id +
                         " engine=" + std::to_string(es) +
                         " oracle=" + std::to_string(os));
    }
  }
  return issues;
}

}  // namespace tagstream
