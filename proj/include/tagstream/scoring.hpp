#pragma once

#include <cstdint>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tagstream/event.hpp"
#include "tagstream/query_graph.hpp"

namespace tagstream {

/// Compact record of one traveled event, kept in cached paths and edge
/// alignments for rendering and ground-truth checks.
struct PathEvent {
  std::uint64_t seq = 0;
  std::int64_t ts = 0;
  std::string subj;
  Op op = Op::Read;
  std::string obj;
};

inline PathEvent to_path_event(const Event& ev) {
  return {ev.seq, ev.ts, ev.subject.display(), ev.op, ev.object.display()};
}

struct NodeAlignment {
  std::string entity_id;
  std::string display;
  bool seed_anchor = false;  // seed anchors carry no standalone score
};

struct EdgeAlignment {
  std::vector<PathEvent> path;
  double s_ei = 0.0;

  std::size_t path_length() const { return path.size(); }
};

/// Second-tier shared record: aligned node/edge lists of one in-progress
/// graph alignment. Tags on every branch of the same alignment point at one
/// instance of this, so sibling branches see each other's progress.
struct AlignmentStatus {
  std::uint64_t status_id = 0;
  const QueryGraph* qg = nullptr;
  std::string host;
  std::int64_t created_ts = 0;
  bool alerted = false;
  std::vector<std::optional<NodeAlignment>> node_align;  // by node index
  std::vector<std::optional<EdgeAlignment>> edge_align;  // by edge index

  explicit AlignmentStatus(const QueryGraph* g = nullptr) : qg(g) {
    if (g) {
      node_align.resize(g->nodes.size());
      edge_align.resize(g->edges.size());
    }
  }

  std::size_t aligned_edge_count() const {
    std::size_t n = 0;
    for (const auto& e : edge_align)
      if (e) ++n;
    return n;
  }

  double sum_sei() const {
    double s = 0.0;
    for (const auto& e : edge_align)
      if (e) s += e->s_ei;
    return s;
  }
};

/// Scores stay apart by far more than this; the epsilon only absorbs
/// floating-point drift at exact-threshold boundaries.
inline constexpr double kScoreEps = 1e-9;

/// Per-edge alignment score: the sink node's score plus the reciprocal of
/// the traveled path length.
inline double edge_score(std::size_t path_length, double s_sink) {
  if (path_length == 0)
    throw std::invalid_argument("edge_score: path_length must be >= 1");
  return s_sink + 1.0 / static_cast<double>(path_length);
}

/// Whole-graph alignment score: aligned edges' scores summed, divided by
/// twice the edge count. Unaligned edges contribute zero.
inline double graph_score(const AlignmentStatus& st, const QueryGraph& g) {
  return st.sum_sei() / (2.0 * static_cast<double>(g.edge_count()));
}

/// Threshold comparison is inclusive; a status alerts at most once.
inline bool should_alert(const AlignmentStatus& st, const QueryGraph& g,
                         double score) {
  return !st.alerted && score >= g.threshold - kScoreEps;
}

/// Threshold-crossing report: an interpretable node/edge table plus the
/// machine-readable mirror of the same data.
struct Alert {
  struct NodeRow {
    std::string node_id;
    std::string properties;
    std::string entity;
    bool seed_anchor = false;
    double score = 0.0;
  };
  struct EdgeRow {
    std::string edge_id;
    std::string src_id;
    std::string dst_id;
    std::vector<PathEvent> path;
    std::size_t path_length = 0;
    double s_ei = 0.0;
  };

  std::string qg_id;
  std::string qg_name;
  std::string host;
  double score = 0.0;        // graph score at emission (first crossing)
  double final_score = 0.0;  // graph score when the run ended
  std::int64_t trigger_ts = 0;
  std::uint64_t trigger_seq = 0;
  std::uint64_t status_id = 0;
  std::vector<NodeRow> nodes;
  std::vector<EdgeRow> edges;
  double sum_sei = 0.0;
  std::size_t total_edges = 0;
};

inline Alert make_alert(const AlignmentStatus& st, const QueryGraph& g,
                        std::int64_t trigger_ts, std::uint64_t trigger_seq) {
  Alert a;
  a.qg_id = g.id;
  a.qg_name = g.name;
  a.host = st.host;
  a.score = graph_score(st, g);
  a.final_score = a.score;
  a.trigger_ts = trigger_ts;
  a.trigger_seq = trigger_seq;
  a.status_id = st.status_id;
  a.sum_sei = st.sum_sei();
  a.total_edges = g.edge_count();
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    if (!st.node_align[i]) continue;
    const NodeAlignment& na = *st.node_align[i];
    a.nodes.push_back({g.nodes[i].id, g.nodes[i].pred.text(), na.display,
                       na.seed_anchor, na.seed_anchor ? 0.0 : g.s_sink});
  }
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    if (!st.edge_align[i]) continue;
    const EdgeAlignment& ea = *st.edge_align[i];
    a.edges.push_back({g.edges[i].id, g.nodes[g.edges[i].src].id,
                       g.nodes[g.edges[i].dst].id, ea.path, ea.path_length(),
                       ea.s_ei});
  }
  return a;
}

namespace detail {
inline std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}
}  // namespace detail

/// Deterministic fixed-layout table in graph document order; renders the
/// alignment the way the status bookkeeping reads (seed anchors dash out).
inline std::string render_alert_table(const Alert& a) {
  std::string out;
  out += "ALERT " + a.qg_id + " (" + a.qg_name + ") host=" + a.host +
         " ts=" + std::to_string(a.trigger_ts) + "\n";
  out += "id | properties | aligned result | score\n";
  for (const auto& n : a.nodes) {
    out += n.node_id + " | " + n.properties + " | " + n.entity + " | " +
           (n.seed_anchor ? "-" : detail::fmt_num(n.score)) + "\n";
  }
  for (const auto& e : a.edges) {
    std::string path_text;
    for (const auto& p : e.path)
      path_text += "(" + p.subj + " -> " + p.obj + ")";
    out += e.edge_id + " | " + e.src_id + "->" + e.dst_id + " | " + path_text +
           " | " + detail::fmt_num(e.s_ei) + "\n";
  }
  out += "Total | " + a.qg_name + " | " + detail::fmt_num(a.sum_sei) + "/" +
         std::to_string(2 * a.total_edges) + " | " + detail::fmt_num(a.score) +
         "\n";
  return out;
}

/// One NDJSON line per alert.
inline std::string render_alert_json(const Alert& a) {
  nlohmann::ordered_json j;
  j["qg"] = a.qg_id;
  j["name"] = a.qg_name;
  j["host"] = a.host;
  j["score"] = a.score;
  j["trigger_ts"] = a.trigger_ts;
  j["final_score"] = a.final_score;
  j["nodes"] = nlohmann::ordered_json::array();
  for (const auto& n : a.nodes) {
    nlohmann::ordered_json nj;
    nj["id"] = n.node_id;
    nj["properties"] = n.properties;
    nj["entity"] = n.entity;
    if (n.seed_anchor)
      nj["score"] = nullptr;
    else
      nj["score"] = n.score;
    j["nodes"].push_back(nj);
  }
  j["edges"] = nlohmann::ordered_json::array();
  for (const auto& e : a.edges) {
    nlohmann::ordered_json ej;
    ej["id"] = e.edge_id;
    ej["src"] = e.src_id;
    ej["dst"] = e.dst_id;
    nlohmann::ordered_json path = nlohmann::ordered_json::array();
    for (const auto& p : e.path) {
      nlohmann::ordered_json pj;
      pj["ts"] = p.ts;
      pj["subj"] = p.subj;
      pj["op"] = std::string(to_string(p.op));
      pj["obj"] = p.obj;
      path.push_back(pj);
    }
    ej["path"] = path;
    ej["path_length"] = e.path_length;
    ej["s_ei"] = e.s_ei;
    j["edges"].push_back(ej);
  }
  return j.dump();
}

}  // namespace tagstream
