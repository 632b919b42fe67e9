#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tagstream/event.hpp"
#include "tagstream/query_graph.hpp"
#include "tagstream/scoring.hpp"

namespace tagstream {

struct EntitySpec {
  Kind kind = Kind::Other;
  std::string name;
  std::string path;
  std::string addr;

  Entity realize(const std::string& host) const {
    Entity e;
    e.kind = kind;
    e.host = host;
    e.attrs.emplace_back("name", name);
    if (!path.empty()) e.attrs.emplace_back("path", path);
    if (!addr.empty()) e.attrs.emplace_back("addr", addr);
    e.id = entity_key(e.host, e.kind, e.attrs);
    return e;
  }

  bool operator==(const EntitySpec& o) const {
    return kind == o.kind && name == o.name && path == o.path && addr == o.addr;
  }
};

struct TemplateStep {
  EntitySpec subj;
  Op op = Op::Read;
  EntitySpec obj;
  std::string edge_id;  // owning query edge; the last step per edge aligns it
};

/// Concrete event script that realizes one shipped query graph end to end.
struct AttackTemplate {
  std::string qg_id;
  std::vector<TemplateStep> steps;

  std::map<std::string, std::size_t> edge_lens() const {
    std::map<std::string, std::size_t> lens;
    for (const auto& s : steps) ++lens[s.edge_id];
    return lens;
  }
};

inline double expected_alignment_score(
    const QueryGraph& g, const std::map<std::string, std::size_t>& edge_lens) {
  double sum = 0.0;
  for (const auto& [id, len] : edge_lens) sum += edge_score(len, g.s_sink);
  return sum / (2.0 * static_cast<double>(g.edge_count()));
}

inline std::vector<std::string> shipped_template_ids() {
  return {"qg1", "qg2", "qg4", "qg5"};
}

/// Canonical attack scripts for the shipped graphs. qg2 reproduces the
/// registry-autostart example: the dropper edge travels a two-hop path
/// through x.sh, the other two are direct.
inline AttackTemplate attack_template(std::string_view qg_id) {
  auto proc = [](std::string name) {
    return EntitySpec{Kind::Process, std::move(name), "", ""};
  };
  auto file = [](std::string name, std::string path = "") {
    return EntitySpec{Kind::File, std::move(name), std::move(path), ""};
  };
  auto sock = [](std::string addr) {
    return EntitySpec{Kind::Socket, addr, "", addr};
  };
  auto reg = [](std::string name, std::string path) {
    return EntitySpec{Kind::Registry, std::move(name), std::move(path), ""};
  };

  AttackTemplate t;
  t.qg_id = std::string(qg_id);
  if (qg_id == "qg1") {
    EntitySpec crontab = proc("crontab");
    EntitySpec job = file("backup_job", "/etc/cron.d/backup_job");
    EntitySpec bash = proc("bash");
    EntitySpec c2 = sock("203.0.113.5:8080");
    t.steps = {
        {crontab, Op::Write, job, "e1"},
        {job, Op::Fork, bash, "e2"},
        {bash, Op::Connect, c2, "e3"},
    };
  } else if (qg_id == "qg2") {
    EntitySpec firefox = proc("firefox");
    EntitySpec dropper = file("x.sh");
    EntitySpec payload = file("evil.dll", R"(C:\temp\evil.dll)");
    EntitySpec regtool = proc("reg.exe");
    EntitySpec runkey =
        reg("updater",
            R"(hkcu\software\microsoft\windows\currentVersion\run\updater)");
    t.steps = {
        {firefox, Op::Write, dropper, "e1"},
        {dropper, Op::Create, payload, "e1"},
        {firefox, Op::Exec, regtool, "e2"},
        {regtool, Op::ModifyRegistry, runkey, "e3"},
    };
  } else if (qg_id == "qg4") {
    EntitySpec wscript = proc("wscript");
    EntitySpec zipper = proc("7z");
    EntitySpec doc = file("report.docx");
    EntitySpec archive = file("docs.7z");
    t.steps = {
        {wscript, Op::Exec, zipper, "e1"},
        {zipper, Op::Read, doc, "e2"},
        {zipper, Op::Create, archive, "e3"},
        {zipper, Op::Delete, doc, "e4"},
    };
  } else if (qg_id == "qg5") {
    EntitySpec chrome = proc("chrome");
    EntitySpec origin = sock("93.184.216.34:443");
    EntitySpec script = file("update.ps1");
    EntitySpec shell = proc("powershell");
    EntitySpec payload = file("svc.dll");
    EntitySpec c2 = sock("198.51.100.9:4444");
    EntitySpec log = file("install.log");
    t.steps = {
        {chrome, Op::Connect, origin, "e1"},
        {chrome, Op::Write, script, "e2"},
        {script, Op::Exec, shell, "e3"},
        {shell, Op::Write, payload, "e4"},
        {shell, Op::Connect, c2, "e5"},
        {shell, Op::Delete, log, "e6"},
    };
  } else {
    throw std::invalid_argument("unknown template: " + std::string(qg_id));
  }
  return t;
}

struct Trace {
  std::vector<Event> events;
  std::int64_t ts_start = 1000;
  std::int64_t ts_step = 25;

  /// Reassign seq and uniform strictly-increasing timestamps.
  void renumber() {
    for (std::size_t i = 0; i < events.size(); ++i) {
      events[i].seq = i;
      events[i].ts = ts_start + static_cast<std::int64_t>(i) * ts_step;
    }
  }
};

struct GroundTruthAttack {
  std::string qg;
  std::string host;
  std::string label = "attack";  // "attack" or "near_miss"
  std::size_t start_index = 0;
  std::size_t event_count = 0;
  double expected_score = 0.0;
  std::map<std::string, std::size_t> edges;  // edge id -> expected path length
  std::int64_t start_ts = 0;
  std::int64_t end_ts = 0;
  std::vector<std::string> edge_of;  // per block offset; "" = inserted noise
};

struct GroundTruth {
  std::vector<GroundTruthAttack> attacks;

  std::string to_json() const {
    nlohmann::ordered_json j;
    j["attacks"] = nlohmann::ordered_json::array();
    for (const auto& a : attacks) {
      nlohmann::ordered_json aj;
      aj["qg"] = a.qg;
      aj["start_index"] = a.start_index;
      aj["expected_score"] = a.expected_score;
      nlohmann::ordered_json edges;
      for (const auto& [id, len] : a.edges) edges[id] = len;
      aj["edges"] = edges;
      aj["host"] = a.host;
      aj["label"] = a.label;
      aj["event_count"] = a.event_count;
      aj["start_ts"] = a.start_ts;
      aj["end_ts"] = a.end_ts;
      j["attacks"].push_back(aj);
    }
    return j.dump(2);
  }

  static GroundTruth from_json(const std::string& text) {
    GroundTruth gt;
    nlohmann::json j = nlohmann::json::parse(text);
    for (const auto& aj : j.at("attacks")) {
      GroundTruthAttack a;
      a.qg = aj.at("qg").get<std::string>();
      a.start_index = aj.at("start_index").get<std::size_t>();
      a.expected_score = aj.at("expected_score").get<double>();
      for (const auto& [id, len] : aj.at("edges").items())
        a.edges[id] = len.get<std::size_t>();
      a.host = aj.value("host", "h0");
      a.label = aj.value("label", "attack");
      a.event_count = aj.value("event_count", std::size_t{0});
      a.start_ts = aj.value("start_ts", std::int64_t{0});
      a.end_ts = aj.value("end_ts", std::int64_t{0});
      gt.attacks.push_back(std::move(a));
    }
    return gt;
  }
};

inline void sync_ground_truth(const Trace& trace, GroundTruth& gt) {
  for (auto& a : gt.attacks) {
    if (a.event_count == 0) continue;
    a.start_ts = trace.events.at(a.start_index).ts;
    a.end_ts = trace.events.at(a.start_index + a.event_count - 1).ts;
  }
}

namespace pools {
// Benign name pools. Deliberately disjoint from every predicate in the
// shipped query graphs; tracegen_test cross-checks that no pool entry
// matches any shipped node predicate.
inline const std::vector<std::string>& processes() {
  static const std::vector<std::string> v = {
      "svchost",  "explorer", "systemd",     "journald", "spoolsv",
      "winlogon", "notepad",  "calcsvc",     "updaterd", "indexerd",
      "mdworker", "cupsd",    "sshd",        "dwm",      "settingsd",
      "telemetryd"};
  return v;
}
inline const std::vector<std::string>& file_stems() {
  static const std::vector<std::string> v = {
      "data",    "summary", "cachefile", "session", "metrics",
      "bundle",  "page",    "blob",      "catalog", "snapshot"};
  return v;
}
inline const std::vector<std::string>& file_exts() {
  static const std::vector<std::string> v = {".dat", ".tmp",   ".csv", ".idx",
                                             ".db",  ".cache", ".cfg"};
  return v;
}
}  // namespace pools

struct BenignOptions {
  std::int64_t ts_start = 1000;
  std::int64_t ts_step = 25;
};

/// Deterministic benign background: process trees, file churn and socket
/// chatter drawn from pools that never hit a shipped seed.
inline Trace gen_benign(std::size_t n, std::size_t hosts,
                        std::uint64_t rng_seed, BenignOptions opts = {}) {
  if (hosts == 0) hosts = 1;
  Trace trace;
  trace.ts_start = opts.ts_start;
  trace.ts_step = opts.ts_step;
  trace.events.reserve(n);
  std::mt19937_64 rng(rng_seed);

  struct HostState {
    std::vector<EntitySpec> procs;
    std::vector<EntitySpec> files;
    std::vector<EntitySpec> socks;
    std::vector<EntitySpec> regs;
  };
  std::vector<HostState> state(hosts);

  auto pick = [&rng](std::size_t n_) {
    return static_cast<std::size_t>(rng() % n_);
  };

  auto some_proc = [&](HostState& hs) -> EntitySpec {
    if (hs.procs.empty() || rng() % 100 < 15) {
      const auto& pool = pools::processes();
      std::string base = pool[pick(pool.size())];
      if (!hs.procs.empty() && rng() % 2)
        base += std::to_string(1 + rng() % 30);
      hs.procs.push_back(EntitySpec{Kind::Process, base, "", ""});
      return hs.procs.back();
    }
    return hs.procs[pick(hs.procs.size())];
  };
  auto some_file = [&](HostState& hs) -> EntitySpec {
    if (hs.files.empty() || rng() % 100 < 30) {
      std::string name = pools::file_stems()[pick(pools::file_stems().size())] +
                         std::to_string(rng() % 5000) +
                         pools::file_exts()[pick(pools::file_exts().size())];
      std::string path = "/srv/app/" + name;
      hs.files.push_back(EntitySpec{Kind::File, name, path, ""});
      return hs.files.back();
    }
    return hs.files[pick(hs.files.size())];
  };
  auto some_sock = [&](HostState& hs) -> EntitySpec {
    if (hs.socks.empty() || rng() % 100 < 20) {
      std::string addr = "10.0." + std::to_string(rng() % 250) + "." +
                         std::to_string(rng() % 250) + ":" +
                         std::to_string(1024 + rng() % 40000);
      hs.socks.push_back(EntitySpec{Kind::Socket, addr, "", addr});
      return hs.socks.back();
    }
    return hs.socks[pick(hs.socks.size())];
  };
  auto some_reg = [&](HostState& hs) -> EntitySpec {
    if (hs.regs.empty() || rng() % 100 < 20) {
      std::string name = "param" + std::to_string(rng() % 500);
      std::string path =
          R"(hklm\system\currentcontrolset\services\)" + name;
      hs.regs.push_back(EntitySpec{Kind::Registry, name, path, ""});
      return hs.regs.back();
    }
    return hs.regs[pick(hs.regs.size())];
  };

  for (std::size_t i = 0; i < n; ++i) {
    std::size_t h = pick(hosts);
    std::string host = "h" + std::to_string(h);
    HostState& hs = state[h];
    EntitySpec subj = some_proc(hs);
    int roll = static_cast<int>(rng() % 100);
    Op op;
    EntitySpec obj;
    if (roll < 30) {
      op = Op::Read;
      obj = some_file(hs);
    } else if (roll < 52) {
      op = Op::Write;
      obj = some_file(hs);
    } else if (roll < 60) {
      op = Op::Create;
      obj = some_file(hs);
    } else if (roll < 65) {
      op = Op::Delete;
      obj = some_file(hs);
    } else if (roll < 70) {
      op = Op::Rename;
      obj = some_file(hs);
    } else if (roll < 76) {
      op = Op::Fork;
      obj = some_proc(hs);
    } else if (roll < 80) {
      op = Op::Exec;
      obj = some_proc(hs);
    } else if (roll < 88) {
      op = Op::Connect;
      obj = some_sock(hs);
    } else if (roll < 92) {
      op = Op::Send;
      obj = some_sock(hs);
    } else if (roll < 95) {
      op = Op::Recv;
      obj = some_sock(hs);
    } else if (roll < 98) {
      op = Op::ModifyRegistry;
      obj = some_reg(hs);
    } else {
      op = Op::Load;
      obj = some_file(hs);
    }
    Event ev;
    ev.subject = subj.realize(host);
    ev.op = op;
    ev.object = obj.realize(host);
    trace.events.push_back(std::move(ev));
  }
  trace.renumber();
  return trace;
}

namespace detail {
inline void shift_ground_truth(GroundTruth& gt, std::size_t from_index,
                               std::ptrdiff_t delta, std::size_t skip_attack) {
  for (std::size_t i = 0; i < gt.attacks.size(); ++i) {
    if (i == skip_attack) continue;
    auto& a = gt.attacks[i];
    if (a.start_index >= from_index)
      a.start_index = static_cast<std::size_t>(
          static_cast<std::ptrdiff_t>(a.start_index) + delta);
  }
}
}  // namespace detail

/// Splice a template (optionally truncated to its first `edge_limit` edges)
/// into the trace at `at`, contiguously, and record the ground truth.
inline GroundTruthAttack& inject_attack_impl(
    Trace& trace, GroundTruth& gt, const AttackTemplate& tmpl,
    const QueryGraph& g, std::size_t at, const std::string& host,
    std::optional<std::size_t> edge_limit = std::nullopt,
    const std::string& label = "attack") {
  if (at > trace.events.size())
    throw std::out_of_range("inject_attack: position out of range");

  std::vector<std::string> keep_order;
  for (const auto& s : tmpl.steps)
    if (std::find(keep_order.begin(), keep_order.end(), s.edge_id) ==
        keep_order.end())
      keep_order.push_back(s.edge_id);
  std::set<std::string> kept(keep_order.begin(), keep_order.end());
  if (edge_limit && *edge_limit < keep_order.size())
    kept = std::set<std::string>(keep_order.begin(),
                                 keep_order.begin() + *edge_limit);

  std::vector<Event> block;
  std::vector<std::string> edge_of;
  std::map<std::string, std::size_t> lens;
  for (const auto& s : tmpl.steps) {
    if (!kept.count(s.edge_id)) continue;
    Event ev;
    ev.subject = s.subj.realize(host);
    ev.op = s.op;
    ev.object = s.obj.realize(host);
    block.push_back(std::move(ev));
    edge_of.push_back(s.edge_id);
    ++lens[s.edge_id];
  }

  detail::shift_ground_truth(gt, at, static_cast<std::ptrdiff_t>(block.size()),
                             gt.attacks.size());
  trace.events.insert(trace.events.begin() + static_cast<std::ptrdiff_t>(at),
                      block.begin(), block.end());

  GroundTruthAttack a;
  a.qg = tmpl.qg_id;
  a.host = host;
  a.label = label;
  a.start_index = at;
  a.event_count = block.size();
  a.edges = lens;
  a.expected_score = expected_alignment_score(g, lens);
  a.edge_of = std::move(edge_of);
  gt.attacks.push_back(std::move(a));
  trace.renumber();
  sync_ground_truth(trace, gt);
  return gt.attacks.back();
}

inline GroundTruthAttack& inject_attack(Trace& trace, GroundTruth& gt,
                                        const AttackTemplate& tmpl,
                                        const QueryGraph& g, std::size_t at,
                                        const std::string& host) {
  return inject_attack_impl(trace, gt, tmpl, g, at, host);
}

/// Near-miss: only the first floor(E/2) edges of the script are played.
inline GroundTruthAttack& inject_partial_attack(Trace& trace, GroundTruth& gt,
                                                const AttackTemplate& tmpl,
                                                const QueryGraph& g,
                                                std::size_t at,
                                                const std::string& host) {
  std::size_t half = g.edge_count() / 2;
  if (half == 0) half = 1;
  return inject_attack_impl(trace, gt, tmpl, g, at, host, half, "near_miss");
}

/// Replace each selected edge's script with a (k+1)-hop gadget chain through
/// k fresh intermediaries, preserving endpoints and the final verb. Expected
/// path lengths become k+1 and the expected score is recomputed.
inline void mutate_in_chain(Trace& trace, GroundTruth& gt,
                            std::size_t attack_index, std::size_t k,
                            const QueryGraph& g, std::uint64_t rng_seed,
                            const std::set<std::string>& edge_filter = {}) {
  if (k == 0) return;
  GroundTruthAttack& a = gt.attacks.at(attack_index);
  std::mt19937_64 rng(rng_seed);

  auto begin =
      trace.events.begin() + static_cast<std::ptrdiff_t>(a.start_index);
  std::vector<Event> block(begin, begin + static_cast<std::ptrdiff_t>(a.event_count));

  // Group block offsets by owning edge, in first-occurrence order.
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < a.edge_of.size(); ++i) {
    const std::string& e = a.edge_of[i];
    if (!groups.count(e)) order.push_back(e);
    groups[e].push_back(i);
  }

  std::vector<Event> rebuilt;
  std::vector<std::string> rebuilt_edge_of;
  std::uint64_t gadget_ctr = 0;
  for (const std::string& e : order) {
    const auto& offsets = groups[e];
    bool mutate = !e.empty() && (edge_filter.empty() || edge_filter.count(e));
    if (!mutate) {
      for (std::size_t off : offsets) {
        rebuilt.push_back(block[off]);
        rebuilt_edge_of.push_back(e);
      }
      continue;
    }
    const Event& first = block[offsets.front()];
    const Event& last = block[offsets.back()];
    Entity cursor = first.subject;
    for (std::size_t hop = 0; hop < k; ++hop) {
      EntitySpec gadget{Kind::File,
                        "gadget" + std::to_string(rng() % 100000) + "_" +
                            std::to_string(gadget_ctr++) + ".tmp",
                        "", ""};
      Event step;
      step.subject = cursor;
      step.op = Op::Write;
      step.object = gadget.realize(a.host);
      cursor = step.object;
      rebuilt.push_back(std::move(step));
      rebuilt_edge_of.push_back(e);
    }
    Event final_step;
    final_step.subject = cursor;
    final_step.op = last.op;
    final_step.object = last.object;
    rebuilt.push_back(std::move(final_step));
    rebuilt_edge_of.push_back(e);
    a.edges[e] = k + 1;
  }

  std::ptrdiff_t delta = static_cast<std::ptrdiff_t>(rebuilt.size()) -
                         static_cast<std::ptrdiff_t>(a.event_count);
  trace.events.erase(begin, begin + static_cast<std::ptrdiff_t>(a.event_count));
  trace.events.insert(
      trace.events.begin() + static_cast<std::ptrdiff_t>(a.start_index),
      rebuilt.begin(), rebuilt.end());
  detail::shift_ground_truth(gt, a.start_index + 1, delta, attack_index);
  a.event_count = rebuilt.size();
  a.edge_of = std::move(rebuilt_edge_of);
  a.expected_score = expected_alignment_score(g, a.edges);
  trace.renumber();
  sync_ground_truth(trace, gt);
}

/// Attach k benign read/write events to attack subjects without touching any
/// aligned path. Expected scores are unchanged by construction.
inline void mutate_around(Trace& trace, GroundTruth& gt,
                          std::size_t attack_index, std::size_t k,
                          std::uint64_t rng_seed) {
  if (k == 0) return;
  GroundTruthAttack& a = gt.attacks.at(attack_index);
  std::mt19937_64 rng(rng_seed);

  auto begin =
      trace.events.begin() + static_cast<std::ptrdiff_t>(a.start_index);
  std::vector<Event> block(begin, begin + static_cast<std::ptrdiff_t>(a.event_count));
  std::vector<std::string> edge_of = a.edge_of;

  std::vector<Entity> subjects;
  for (std::size_t i = 0; i < block.size(); ++i) {
    if (edge_of[i].empty()) continue;
    const Entity& s = block[i].subject;
    bool seen = false;
    for (const Entity& e : subjects)
      if (e.id == s.id) seen = true;
    if (!seen) subjects.push_back(s);
  }

  for (std::size_t i = 0; i < k; ++i) {
    EntitySpec noise_obj{Kind::File,
                         "around" + std::to_string(rng() % 100000) + "_" +
                             std::to_string(i) + ".tmp",
                         "", ""};
    Event noise;
    noise.subject = subjects[rng() % subjects.size()];
    noise.op = rng() % 2 ? Op::Read : Op::Write;
    noise.object = noise_obj.realize(a.host);
    // Insert after the first block event, anywhere up to the block end.
    std::size_t slot = 1 + rng() % block.size();
    block.insert(block.begin() + static_cast<std::ptrdiff_t>(slot),
                 std::move(noise));
    edge_of.insert(edge_of.begin() + static_cast<std::ptrdiff_t>(slot), "");
  }

  trace.events.erase(begin, begin + static_cast<std::ptrdiff_t>(a.event_count));
  trace.events.insert(
      trace.events.begin() + static_cast<std::ptrdiff_t>(a.start_index),
      block.begin(), block.end());
  detail::shift_ground_truth(gt, a.start_index + 1,
                             static_cast<std::ptrdiff_t>(k), attack_index);
  a.event_count = block.size();
  a.edge_of = std::move(edge_of);
  trace.renumber();
  sync_ground_truth(trace, gt);
}

/// Deterministic injection position that does not split an existing attack
/// block (mutators and ground truth rely on block contiguity).
inline std::size_t pick_clear_position(const Trace& trace,
                                       const GroundTruth& gt,
                                       std::uint64_t r) {
  const std::size_t n = trace.events.size();
  for (std::uint64_t attempt = 0; attempt < 200; ++attempt) {
    std::size_t pos = static_cast<std::size_t>((r + attempt * 7919) % (n + 1));
    bool inside = false;
    for (const auto& a : gt.attacks)
      if (pos > a.start_index && pos < a.start_index + a.event_count)
        inside = true;
    if (!inside) return pos;
  }
  return n;
}

/// Plain literal alternatives of the first simple (a|b|c) group, if any.
inline std::vector<std::string> extract_alternatives(const std::string& pattern) {
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    if (pattern[i] != '(') continue;
    std::size_t close = pattern.find(')', i + 1);
    if (close == std::string::npos) break;
    std::string inner = pattern.substr(i + 1, close - i - 1);
    bool simple = true;
    for (char c : inner) {
      if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' ||
            c == '.' || c == '-' || c == '|'))
        simple = false;
    }
    if (!simple) continue;
    std::vector<std::string> alts;
    std::string cur;
    for (char c : inner) {
      if (c == '|') {
        if (!cur.empty()) alts.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!cur.empty()) alts.push_back(cur);
    if (alts.size() >= 2) return alts;
  }
  return {};
}

/// Swap concrete tool names among the alternatives admitted by the graph's
/// name patterns (e.g. "7z" -> "tar"). Alignment is unchanged because the
/// variant still matches the same predicates. Throws when the graph offers
/// no alternation to swap within the template.
inline AttackTemplate mutate_entities(const AttackTemplate& tmpl,
                                      const QueryGraph& g,
                                      std::uint64_t rng_seed) {
  std::mt19937_64 rng(rng_seed);
  AttackTemplate out = tmpl;
  bool swapped = false;
  for (const auto& node : g.nodes) {
    for (const auto& pat : node.pred.patterns) {
      if (pat.attr != "name") continue;
      std::vector<std::string> alts = extract_alternatives(pat.source);
      if (alts.size() < 2) continue;
      // Collect template names inside this alternation.
      std::vector<std::string> present;
      for (const auto& s : out.steps) {
        for (const std::string& n : {s.subj.name, s.obj.name}) {
          if (std::find(alts.begin(), alts.end(), n) != alts.end() &&
              std::find(present.begin(), present.end(), n) == present.end())
            present.push_back(n);
        }
      }
      for (const std::string& old_name : present) {
        std::vector<std::string> others;
        for (const auto& alt : alts)
          if (alt != old_name) others.push_back(alt);
        if (others.empty()) continue;
        const std::string& replacement = others[rng() % others.size()];
        for (auto& s : out.steps) {
          if (s.subj.name == old_name) s.subj.name = replacement;
          if (s.obj.name == old_name) s.obj.name = replacement;
        }
        swapped = true;
      }
    }
  }
  if (!swapped)
    throw std::invalid_argument(
        "mutate_entities: no alternation admits this template");
  return out;
}

inline std::string serialize_trace(const Trace& trace) {
  std::string out;
  out.reserve(trace.events.size() * 140);
  for (const Event& ev : trace.events) {
    out += serialize_event(ev);
    out += '\n';
  }
  return out;
}

}  // namespace tagstream
