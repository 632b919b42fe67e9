#pragma once

#include <cstdint>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "tagstream/event.hpp"

namespace tagstream {

/// Counts NodePredicate evaluations; lets tests assert that search() work
/// stays bounded by the active node's out-degree.
inline thread_local std::uint64_t g_predicate_evals = 0;
inline std::uint64_t predicate_eval_count() { return g_predicate_evals; }

/// Rewrites the glob-style "*(...)*" notation into a proper regular
/// expression: a '*' that cannot be a quantifier (pattern start, after '(',
/// '|' or another '*') becomes ".*", as does the trailing "(...)*" star.
/// Everything else is passed through untouched.
inline std::string normalize_glob(std::string_view pat) {
  std::string out;
  out.reserve(pat.size() + 4);
  bool prev_was_raw_star = false;
  for (std::size_t i = 0; i < pat.size(); ++i) {
    char c = pat[i];
    if (c == '*') {
      bool glob = false;
      if (i == 0 || prev_was_raw_star) {
        glob = true;
      } else {
        char p = pat[i - 1];
        if (p == '(' || p == '|') glob = true;
        if (p == ')' && i + 1 == pat.size()) glob = true;
      }
      out += glob ? ".*" : "*";
      prev_was_raw_star = true;
    } else {
      out += c;
      prev_was_raw_star = false;
    }
  }
  return out;
}

/// Fuzzy node matcher: optional kind constraint plus anchored,
/// case-insensitive regular expressions over attributes. An empty predicate
/// is a wildcard. A referenced attribute that is absent fails the match.
struct NodePredicate {
  struct Pattern {
    std::string attr;
    std::string source;  // normalized regex text, kept for rendering
    std::regex re;
  };

  std::optional<Kind> kind;
  std::vector<Pattern> patterns;

  bool wildcard() const { return !kind.has_value() && patterns.empty(); }

  /// True when every referenced attribute participates in entity identity
  /// (name/path/addr); such predicates give one verdict per entity id and
  /// may be memoized.
  bool key_attrs_only() const {
    for (const auto& p : patterns)
      if (p.attr != "name" && p.attr != "path" && p.attr != "addr")
        return false;
    return true;
  }

  bool matches(const Entity& e) const {
    ++g_predicate_evals;
    if (kind && e.kind != *kind) return false;
    for (const auto& p : patterns) {
      const std::string* v = e.attr(p.attr);
      if (!v || !std::regex_match(*v, p.re)) return false;
    }
    return true;
  }

  /// Table-style properties text, e.g. "[process]" or "hkcu\\.*\\run\\.*".
  std::string text() const {
    std::string out;
    for (const auto& p : patterns) {
      if (!out.empty()) out += ",";
      if (p.attr != "name") {
        out += p.attr;
        out += '~';
      }
      out += p.source;
    }
    if (out.empty()) return kind ? "[" + std::string(to_string(*kind)) + "]" : "[*]";
    if (kind) out = "[" + std::string(to_string(*kind)) + "] " + out;
    return out;
  }
};

struct QueryNode {
  std::string id;
  NodePredicate pred;
  std::string label;
};

/// Directed pattern edge. `ops_mask` is a bitmask over the verb vocabulary;
/// zero admits any verb. The verb constrains only the final, aligning event
/// of a fuzzy path.
struct QueryEdge {
  std::string id;
  int src = -1;
  int dst = -1;
  std::uint16_t ops_mask = 0;

  bool admits(Op op) const {
    return ops_mask == 0 ||
           (ops_mask & (std::uint16_t(1) << static_cast<int>(op))) != 0;
  }
};

struct QueryGraph {
  struct Seed {
    bool is_edge = false;
    int index = -1;
  };

  std::string id;
  std::string name;
  double threshold = 0.6;
  double s_sink = 1.0;
  std::vector<QueryNode> nodes;
  std::vector<QueryEdge> edges;
  std::vector<Seed> seeds;
  std::vector<std::vector<int>> out_edges;  // node index -> edge indices, document order

  int node_index(std::string_view node_id) const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].id == node_id) return static_cast<int>(i);
    return -1;
  }

  int edge_index(std::string_view edge_id) const {
    for (std::size_t i = 0; i < edges.size(); ++i)
      if (edges[i].id == edge_id) return static_cast<int>(i);
    return -1;
  }

  std::size_t edge_count() const { return edges.size(); }
};

/// Active-node-scoped lookup: scans only the out-edges of `active_node`
/// (document order) and returns the first whose verb set admits the event
/// and whose destination predicate matches the object. Cost is bounded by
/// the out-degree, independent of graph size.
inline std::optional<std::pair<int, int>> search(const QueryGraph& g,
                                                 int active_node,
                                                 const Event& ev) {
  for (int ei : g.out_edges[active_node]) {
    const QueryEdge& e = g.edges[ei];
    if (!e.admits(ev.op)) continue;
    if (g.nodes[e.dst].pred.matches(ev.object)) return std::make_pair(ei, e.dst);
  }
  return std::nullopt;
}

enum class LoadErrorCode { None, Syntax, BadPattern, DanglingEdgeRef, NoSeeds };

inline std::string_view to_string(LoadErrorCode c) {
  switch (c) {
    case LoadErrorCode::None: return "none";
    case LoadErrorCode::Syntax: return "syntax";
    case LoadErrorCode::BadPattern: return "bad_pattern";
    case LoadErrorCode::DanglingEdgeRef: return "dangling_edge_ref";
    case LoadErrorCode::NoSeeds: return "no_seeds";
  }
  return "?";
}

struct LoadResult {
  std::optional<QueryGraph> graph;
  LoadErrorCode error = LoadErrorCode::None;
  std::string detail;

  bool ok() const { return graph.has_value(); }
};

namespace detail {
inline LoadResult load_fail(LoadErrorCode code, std::string detail) {
  LoadResult r;
  r.error = code;
  r.detail = std::move(detail);
  return r;
}
}  // namespace detail

/// Parse, compile and structurally validate one query-graph document.
inline LoadResult load_query_graph(std::string_view document) {
  using detail::load_fail;
  nlohmann::json j = nlohmann::json::parse(document, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    return load_fail(LoadErrorCode::Syntax, "not a JSON object");

  QueryGraph g;
  if (!j.contains("id") || !j["id"].is_string())
    return load_fail(LoadErrorCode::Syntax, "missing graph id");
  g.id = j["id"].get<std::string>();
  g.name = j.value("name", g.id);

  g.threshold = j.value("threshold", 0.6);
  if (!(g.threshold > 0.0 && g.threshold <= 1.0))
    return load_fail(LoadErrorCode::Syntax, "threshold must be in (0,1]");
  g.s_sink = j.value("s_sink", 1.0);
  if (g.s_sink < 0.0)
    return load_fail(LoadErrorCode::Syntax, "s_sink must be >= 0");

  if (!j.contains("nodes") || !j["nodes"].is_array() || j["nodes"].empty())
    return load_fail(LoadErrorCode::Syntax, "nodes must be a non-empty array");
  std::unordered_set<std::string> node_ids;
  for (const auto& nj : j["nodes"]) {
    if (!nj.is_object() || !nj.contains("id") || !nj["id"].is_string())
      return load_fail(LoadErrorCode::Syntax, "node without id");
    QueryNode n;
    n.id = nj["id"].get<std::string>();
    if (!node_ids.insert(n.id).second)
      return load_fail(LoadErrorCode::Syntax, "duplicate node id " + n.id);
    n.label = nj.value("label", "");
    if (nj.contains("kind")) {
      if (!nj["kind"].is_string())
        return load_fail(LoadErrorCode::Syntax, "node " + n.id + ": kind must be a string");
      bool known = false;
      Kind k = kind_from_string(nj["kind"].get_ref<const std::string&>(), &known);
      if (!known)
        return load_fail(LoadErrorCode::Syntax,
                         "node " + n.id + ": unknown kind \"" +
                             nj["kind"].get<std::string>() + "\"");
      n.pred.kind = k;
    }
    if (nj.contains("match")) {
      if (!nj["match"].is_object())
        return load_fail(LoadErrorCode::Syntax, "node " + n.id + ": match must be an object");
      for (const auto& [attr, pat] : nj["match"].items()) {
        if (!pat.is_string())
          return load_fail(LoadErrorCode::BadPattern, n.id);
        NodePredicate::Pattern p;
        p.attr = attr;
        p.source = normalize_glob(pat.get_ref<const std::string&>());
        try {
          p.re.assign(p.source, std::regex::ECMAScript | std::regex::icase |
                                    std::regex::optimize);
        } catch (const std::regex_error&) {
          return load_fail(LoadErrorCode::BadPattern, n.id);
        }
        n.pred.patterns.push_back(std::move(p));
      }
    }
    g.nodes.push_back(std::move(n));
  }

  if (!j.contains("edges") || !j["edges"].is_array() || j["edges"].empty())
    return load_fail(LoadErrorCode::Syntax, "edges must be a non-empty array");
  std::unordered_set<std::string> edge_ids;
  std::unordered_set<std::string> edge_shapes;
  for (const auto& ej : j["edges"]) {
    if (!ej.is_object() || !ej.contains("id") || !ej["id"].is_string())
      return load_fail(LoadErrorCode::Syntax, "edge without id");
    QueryEdge e;
    e.id = ej["id"].get<std::string>();
    if (!edge_ids.insert(e.id).second)
      return load_fail(LoadErrorCode::Syntax, "duplicate edge id " + e.id);
    if (!ej.contains("src") || !ej.contains("dst") || !ej["src"].is_string() ||
        !ej["dst"].is_string())
      return load_fail(LoadErrorCode::Syntax, "edge " + e.id + ": missing src/dst");
    std::string src = ej["src"].get<std::string>();
    std::string dst = ej["dst"].get<std::string>();
    e.src = g.node_index(src);
    e.dst = g.node_index(dst);
    if (e.src < 0)
      return load_fail(LoadErrorCode::DanglingEdgeRef, e.id + " -> " + src);
    if (e.dst < 0)
      return load_fail(LoadErrorCode::DanglingEdgeRef, e.id + " -> " + dst);
    if (e.src == e.dst)
      return load_fail(LoadErrorCode::Syntax, "edge " + e.id + ": src == dst");
    if (ej.contains("ops")) {
      if (!ej["ops"].is_array())
        return load_fail(LoadErrorCode::Syntax, "edge " + e.id + ": ops must be an array");
      for (const auto& opj : ej["ops"]) {
        if (!opj.is_string())
          return load_fail(LoadErrorCode::Syntax, "edge " + e.id + ": ops entries must be strings");
        std::optional<Op> op = op_from_string(opj.get_ref<const std::string&>());
        if (!op)
          return load_fail(LoadErrorCode::Syntax,
                           "edge " + e.id + ": unknown op \"" + opj.get<std::string>() + "\"");
        e.ops_mask |= std::uint16_t(1) << static_cast<int>(*op);
      }
    }
    std::string shape = src + "\x1f" + dst + "\x1f" + std::to_string(e.ops_mask);
    if (!edge_shapes.insert(shape).second)
      return load_fail(LoadErrorCode::Syntax,
                       "edge " + e.id + ": duplicate (src,dst,ops)");
    g.edges.push_back(std::move(e));
  }

  if (!j.contains("seeds") || !j["seeds"].is_array() || j["seeds"].empty())
    return load_fail(LoadErrorCode::NoSeeds, g.id);
  for (const auto& sj : j["seeds"]) {
    if (!sj.is_object())
      return load_fail(LoadErrorCode::Syntax, "seed entries must be objects");
    QueryGraph::Seed s;
    if (sj.contains("node") && sj["node"].is_string()) {
      s.is_edge = false;
      s.index = g.node_index(sj["node"].get_ref<const std::string&>());
      if (s.index < 0)
        return load_fail(LoadErrorCode::DanglingEdgeRef,
                         "seed -> " + sj["node"].get<std::string>());
    } else if (sj.contains("edge") && sj["edge"].is_string()) {
      s.is_edge = true;
      s.index = g.edge_index(sj["edge"].get_ref<const std::string&>());
      if (s.index < 0)
        return load_fail(LoadErrorCode::DanglingEdgeRef,
                         "seed -> " + sj["edge"].get<std::string>());
    } else {
      return load_fail(LoadErrorCode::Syntax, "seed must name a node or an edge");
    }
    g.seeds.push_back(s);
  }

  g.out_edges.assign(g.nodes.size(), {});
  for (std::size_t i = 0; i < g.edges.size(); ++i)
    g.out_edges[g.edges[i].src].push_back(static_cast<int>(i));

  LoadResult r;
  r.graph = std::move(g);
  return r;
}

/// Canonical JSON rendering; load(serialize(load(d))) is structurally
/// identical to load(d).
inline std::string serialize_query_graph(const QueryGraph& g) {
  nlohmann::ordered_json j;
  j["id"] = g.id;
  j["name"] = g.name;
  j["threshold"] = g.threshold;
  j["s_sink"] = g.s_sink;
  j["nodes"] = nlohmann::ordered_json::array();
  for (const auto& n : g.nodes) {
    nlohmann::ordered_json nj;
    nj["id"] = n.id;
    if (n.pred.kind) nj["kind"] = std::string(to_string(*n.pred.kind));
    if (!n.pred.patterns.empty()) {
      nlohmann::ordered_json m;
      for (const auto& p : n.pred.patterns) m[p.attr] = p.source;
      nj["match"] = m;
    }
    if (!n.label.empty()) nj["label"] = n.label;
    j["nodes"].push_back(nj);
  }
  j["edges"] = nlohmann::ordered_json::array();
  for (const auto& e : g.edges) {
    nlohmann::ordered_json ej;
    ej["id"] = e.id;
    ej["src"] = g.nodes[e.src].id;
    ej["dst"] = g.nodes[e.dst].id;
    if (e.ops_mask != 0) {
      nlohmann::ordered_json ops = nlohmann::ordered_json::array();
      for (int i = 0; i < kOpCount; ++i)
        if (e.ops_mask & (std::uint16_t(1) << i))
          ops.push_back(std::string(to_string(static_cast<Op>(i))));
      ej["ops"] = ops;
    }
    j["edges"].push_back(ej);
  }
  j["seeds"] = nlohmann::ordered_json::array();
  for (const auto& s : g.seeds) {
    nlohmann::ordered_json sj;
    if (s.is_edge)
      sj["edge"] = g.edges[s.index].id;
    else
      sj["node"] = g.nodes[s.index].id;
    j["seeds"].push_back(sj);
  }
  return j.dump(2);
}

struct Diagnostic {
  enum class Severity { Error, Warning };
  Severity severity = Severity::Error;
  std::string code;
  std::string detail;
};

/// Semantic lint over a loaded graph: forward reachability from the seeds
/// (an unreachable node can never be aligned) and over-general seed
/// predicates (a wildcard seed floods the cache with tags).
inline std::vector<Diagnostic> validate_query_graph(const QueryGraph& g) {
  std::vector<Diagnostic> out;

  std::vector<bool> reach(g.nodes.size(), false);
  std::vector<int> stack;
  for (const auto& s : g.seeds) {
    int start = s.is_edge ? g.edges[s.index].src : s.index;
    if (!reach[start]) {
      reach[start] = true;
      stack.push_back(start);
    }
    if (s.is_edge) {
      int dst = g.edges[s.index].dst;
      if (!reach[dst]) {
        reach[dst] = true;
        stack.push_back(dst);
      }
    }
  }
  while (!stack.empty()) {
    int n = stack.back();
    stack.pop_back();
    for (int ei : g.out_edges[n]) {
      int d = g.edges[ei].dst;
      if (!reach[d]) {
        reach[d] = true;
        stack.push_back(d);
      }
    }
  }
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    if (!reach[i])
      out.push_back({Diagnostic::Severity::Error, "unreachable", g.nodes[i].id});
  }

  for (const auto& s : g.seeds) {
    const NodePredicate& p =
        s.is_edge ? g.nodes[g.edges[s.index].src].pred : g.nodes[s.index].pred;
    if (p.wildcard()) {
      out.push_back({Diagnostic::Severity::Warning, "over_general_seed",
                     s.is_edge ? g.edges[s.index].id : g.nodes[s.index].id});
    }
  }
  return out;
}

/// Immutable (seed -> query graph) registration shared by all partitions.
/// Seed predicates are deduplicated into an ordinal table so per-entity
/// verdicts can be memoized by the engine.
struct SeedIndex {
  struct NodeSeed {
    const QueryGraph* g;
    int node;
    int pred_ord;
  };
  struct EdgeSeed {
    const QueryGraph* g;
    int edge;
    int src_ord;
    int dst_ord;
  };

  std::vector<NodeSeed> node_seeds;
  std::vector<EdgeSeed> edge_seeds;
  std::vector<const NodePredicate*> predicates;
  bool memo_safe = true;

  static SeedIndex build(const std::vector<const QueryGraph*>& graphs) {
    SeedIndex idx;
    auto ordinal = [&idx](const NodePredicate* p) {
      for (std::size_t i = 0; i < idx.predicates.size(); ++i)
        if (idx.predicates[i] == p) return static_cast<int>(i);
      idx.predicates.push_back(p);
      if (!p->key_attrs_only()) idx.memo_safe = false;
      return static_cast<int>(idx.predicates.size() - 1);
    };
    for (const QueryGraph* g : graphs) {
      for (const auto& s : g->seeds) {
        if (s.is_edge) {
          const QueryEdge& e = g->edges[s.index];
          idx.edge_seeds.push_back({g, s.index, ordinal(&g->nodes[e.src].pred),
                                    ordinal(&g->nodes[e.dst].pred)});
        } else {
          idx.node_seeds.push_back(
              {g, s.index, ordinal(&g->nodes[s.index].pred)});
        }
      }
    }
    return idx;
  }
};

struct SeedHit {
  const QueryGraph* g;
  int aligned_node;        // node the tag starts from
  std::optional<int> edge; // set for edge seeds, recorded with path length 1
};

/// Seed matching for one event, in index order. Node seeds test the
/// subject; edge seeds need subject, verb and object to match and align
/// the edge's dst.
inline std::vector<SeedHit> match_seed(const SeedIndex& idx, const Event& ev) {
  std::vector<SeedHit> hits;
  for (const auto& ns : idx.node_seeds) {
    if (ns.g->nodes[ns.node].pred.matches(ev.subject))
      hits.push_back({ns.g, ns.node, std::nullopt});
  }
  for (const auto& es : idx.edge_seeds) {
    const QueryEdge& e = es.g->edges[es.edge];
    if (!e.admits(ev.op)) continue;
    if (es.g->nodes[e.src].pred.matches(ev.subject) &&
        es.g->nodes[e.dst].pred.matches(ev.object))
      hits.push_back({es.g, e.dst, es.edge});
  }
  return hits;
}

}  // namespace tagstream
