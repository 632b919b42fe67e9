#include "tagstream/engine.hpp"

#include <gtest/gtest.h>

#include <map>

#include "test_util.hpp"

using namespace tagstream;
using namespace tagstream::testutil;

namespace {

struct Fixture {
  QueryGraph g2;
  SeedIndex idx;
  Entity firefox, xsh, evil, reg, runkey;

  Fixture()
      : g2(load_shipped("qg2_t1547_boot_autostart.json")),
        idx(SeedIndex::build({&g2})),
        firefox(make_entity(Kind::Process, "h0", "firefox")),
        xsh(make_entity(Kind::File, "h0", "x.sh")),
        evil(make_entity(Kind::File, "h0", "evil.dll", R"(C:\temp\evil.dll)")),
        reg(make_entity(Kind::Process, "h0", "reg.exe")),
        runkey(make_entity(
            Kind::Registry, "h0", "updater",
            R"(hkcu\software\microsoft\windows\currentVersion\run\updater)")) {}

  std::vector<Event> autostart_events() const {
    return {
        make_event(0, 1000, firefox, Op::Write, xsh),
        make_event(1, 2000, xsh, Op::Create, evil),
        make_event(2, 3000, firefox, Op::Exec, reg),
        make_event(3, 4000, reg, Op::ModifyRegistry, runkey),
    };
  }
};

TEST(Engine, RegistryAutostartWorkedExample) {
  Fixture f;
  TagCache cache(&f.idx);
  std::vector<Alert> alerts;
  for (const Event& ev : f.autostart_events())
    for (Alert& a : cache.process_event(ev)) alerts.push_back(std::move(a));

  ASSERT_EQ(alerts.size(), 1u);
  const Alert& a = alerts[0];
  EXPECT_NEAR(a.score, 5.5 / 6.0, 1e-9);
  EXPECT_EQ(a.qg_id, "qg2");
  EXPECT_EQ(a.trigger_ts, 4000);

  std::map<std::string, double> s_ei;
  std::map<std::string, std::size_t> lens;
  for (const auto& e : a.edges) {
    s_ei[e.edge_id] = e.s_ei;
    lens[e.edge_id] = e.path_length;
  }
  EXPECT_DOUBLE_EQ(s_ei["e1"], 1.5);
  EXPECT_DOUBLE_EQ(s_ei["e2"], 2.0);
  EXPECT_DOUBLE_EQ(s_ei["e3"], 2.0);
  EXPECT_EQ(lens["e1"], 2u);
  EXPECT_EQ(lens["e2"], 1u);
  EXPECT_EQ(lens["e3"], 1u);

  std::map<std::string, std::string> aligned;
  for (const auto& n : a.nodes) aligned[n.node_id] = n.entity;
  EXPECT_EQ(aligned["q1"], "firefox");
  EXPECT_EQ(aligned["q2"], R"(C:\temp\evil.dll)");
  EXPECT_EQ(aligned["q3"], "reg.exe");
  EXPECT_EQ(aligned["q4"],
            R"(hkcu\software\microsoft\windows\currentVersion\run\updater)");

  std::string table = render_alert_table(a);
  EXPECT_NE(table.find("5.5/6"), std::string::npos);

  const EngineCounters& c = cache.counters();
  EXPECT_GE(c.tags_initialized, 1u);
  EXPECT_GE(c.tags_propagated, 3u);
  EXPECT_EQ(c.tags_initialized, 2u);
  EXPECT_EQ(c.tags_propagated, 5u);
  EXPECT_EQ(c.alerts, 1u);
}

// The x.sh branch and the reg.exe branch must share one status instance;
// the alert carries the union of both branches.
TEST(Engine, TwoTierStatusSharingAcrossBranches) {
  Fixture f;
  TagCache cache(&f.idx);
  for (const Event& ev : f.autostart_events()) cache.process_event(ev);

  const AlignmentStatus* evil_status = nullptr;
  const AlignmentStatus* reg_status = nullptr;
  cache.for_each_entity([&](const std::string& id, const std::vector<Tag>& tags) {
    if (id == f.evil.id) evil_status = tags.at(0).status.get();
    if (id == f.reg.id) reg_status = tags.at(0).status.get();
  });
  ASSERT_NE(evil_status, nullptr);
  ASSERT_NE(reg_status, nullptr);
  EXPECT_EQ(evil_status, reg_status);
  EXPECT_EQ(evil_status->aligned_edge_count(), 3u);
}

TEST(Engine, BenignOnlyTraceInitializesNothing) {
  Fixture f;
  TagCache cache(&f.idx);
  Entity svchost = make_entity(Kind::Process, "h0", "svchost");
  Entity data = make_entity(Kind::File, "h0", "data_1.dat");
  Entity lib = make_entity(Kind::File, "h0", "corelib.cache");
  std::vector<Alert> alerts;
  for (int i = 0; i < 50; ++i) {
    Event ev = make_event(i, 1000 + i, svchost, i % 2 ? Op::Read : Op::Write,
                          i % 3 ? data : lib);
    auto out = cache.process_event(ev);
    alerts.insert(alerts.end(), out.begin(), out.end());
  }
  EXPECT_TRUE(alerts.empty());
  EXPECT_EQ(cache.counters().tags_initialized, 0u);
  EXPECT_EQ(cache.active_tags(), 0u);
}

TEST(Engine, BenignInterleavingDoesNotChangeTheAlignment) {
  Fixture f;
  auto run = [&](bool interleave) {
    TagCache cache(&f.idx);
    std::vector<Event> events = f.autostart_events();
    if (interleave) {
      Entity svchost = make_entity(Kind::Process, "h0", "svchost");
      Entity tmp = make_entity(Kind::File, "h0", "scratch.tmp");
      std::vector<Event> mixed;
      std::uint64_t seq = 0;
      std::int64_t ts = 500;
      for (const Event& ev : events) {
        Event noise = make_event(seq++, ts, svchost, Op::Write, tmp);
        ts += 200;
        mixed.push_back(noise);
        Event e = ev;
        e.seq = seq++;
        e.ts = ts;
        ts += 200;
        mixed.push_back(e);
      }
      events = std::move(mixed);
    }
    std::vector<Alert> alerts;
    for (const Event& ev : events)
      for (Alert& a : cache.process_event(ev)) alerts.push_back(std::move(a));
    return alerts;
  };

  auto clean = run(false);
  auto noisy = run(true);
  ASSERT_EQ(clean.size(), 1u);
  ASSERT_EQ(noisy.size(), 1u);
  EXPECT_DOUBLE_EQ(clean[0].score, noisy[0].score);
  ASSERT_EQ(clean[0].edges.size(), noisy[0].edges.size());
  for (std::size_t i = 0; i < clean[0].edges.size(); ++i) {
    EXPECT_EQ(clean[0].edges[i].edge_id, noisy[0].edges[i].edge_id);
    EXPECT_DOUBLE_EQ(clean[0].edges[i].s_ei, noisy[0].edges[i].s_ei);
  }
}

TEST(Engine, CloneOnMissCarriesThePathForward) {
  Fixture f;
  TagCache cache(&f.idx);
  cache.process_event(make_event(0, 1000, f.firefox, Op::Write, f.xsh));

  bool found = false;
  cache.for_each_entity([&](const std::string& id, const std::vector<Tag>& tags) {
    if (id != f.xsh.id) return;
    ASSERT_EQ(tags.size(), 1u);
    EXPECT_EQ(tags[0].cached_path.size(), 1u);
    EXPECT_EQ(tags[0].qg->nodes[tags[0].active_node].id, "q1");
    found = true;
  });
  EXPECT_TRUE(found);

  cache.process_event(make_event(1, 2000, f.xsh, Op::Create, f.evil));
  cache.for_each_entity([&](const std::string& id, const std::vector<Tag>& tags) {
    if (id != f.evil.id) return;
    const AlignmentStatus& st = *tags.at(0).status;
    int ei = f.g2.edge_index("e1");
    ASSERT_TRUE(st.edge_align[ei].has_value());
    EXPECT_EQ(st.edge_align[ei]->path_length(), 2u);
    EXPECT_DOUBLE_EQ(st.edge_align[ei]->s_ei, 1.5);
  });
}

TEST(Engine, OutRoundedCloneIsNotPlaced) {
  Fixture f;
  EngineConfig cfg;
  cfg.max_rounds = 2;
  TagCache cache(&f.idx, cfg);

  Entity a = make_entity(Kind::File, "h0", "hop_a.tmp");
  Entity b = make_entity(Kind::File, "h0", "hop_b.tmp");
  Entity c = make_entity(Kind::File, "h0", "hop_c.tmp");
  cache.process_event(make_event(0, 1000, f.firefox, Op::Read, a));  // path 1
  cache.process_event(make_event(1, 1001, a, Op::Read, b));          // path 2
  cache.process_event(make_event(2, 1002, b, Op::Read, c));          // dropped

  bool c_tagged = false;
  std::size_t b_tags = 0;
  cache.for_each_entity([&](const std::string& id, const std::vector<Tag>& tags) {
    if (id == c.id) c_tagged = true;
    if (id == b.id) b_tags = tags.size();
  });
  EXPECT_FALSE(c_tagged);
  EXPECT_EQ(b_tags, 1u);
}

TEST(DecayPredicates, Boundaries) {
  Tag t;
  t.last_align_ts = 1000;
  EXPECT_FALSE(is_out_dated(t, 1000 + 500, 500));  // exactly decay_ms: kept
  EXPECT_TRUE(is_out_dated(t, 1000 + 501, 500));
  t.cached_path.resize(7);
  EXPECT_TRUE(is_out_rounded(t, 6));
  t.cached_path.resize(6);
  EXPECT_FALSE(is_out_rounded(t, 6));
  t.cached_path.clear();
  EXPECT_FALSE(is_out_rounded(t, 6));
  EXPECT_FALSE(is_out_dated(t, 1000, 500));
}

TEST(Engine, ExpiredTagsRemovedBeforePropagation) {
  Fixture f;
  EngineConfig cfg;
  cfg.decay_ms = 1000;
  TagCache cache(&f.idx, cfg);

  cache.process_event(make_event(0, 0, f.firefox, Op::Write, f.xsh));
  EXPECT_EQ(cache.counters().tags_removed, 0u);
  // 5 s later: the seed tag from ts 0 is stale and must go; the event still
  // re-initializes a fresh seed tag.
  cache.process_event(make_event(1, 5000, f.firefox, Op::Exec, f.reg));
  EXPECT_GE(cache.counters().tags_removed, 1u);
  // The stale clone parked on x.sh is only collected by a sweep; the
  // decay-bound invariant is therefore stated post-sweep.
  EXPECT_EQ(cache.audit_expired(5000), 1u);
  cache.sweep_expired(5000);
  EXPECT_EQ(cache.audit_expired(5000), 0u);
}

TEST(MergeTags, DisjointUnionAndMaxRule) {
  Fixture f;
  auto make_status = [&](std::int64_t created) {
    auto st = std::make_shared<AlignmentStatus>(&f.g2);
    st->created_ts = created;
    st->host = "h0";
    return st;
  };
  auto align_edge = [&](AlignmentStatus& st, const char* edge_id,
                        std::size_t len) {
    int ei = f.g2.edge_index(edge_id);
    const QueryEdge& e = f.g2.edges[ei];
    if (!st.node_align[e.src])
      st.node_align[e.src] = NodeAlignment{"x", "x", e.src == 0};
    if (!st.node_align[e.dst])
      st.node_align[e.dst] = NodeAlignment{"y", "y", false};
    st.edge_align[ei] =
        EdgeAlignment{std::vector<PathEvent>(len), edge_score(len, 1.0)};
  };

  // Disjoint contributions united.
  auto sa = make_status(1);
  align_edge(*sa, "e2", 1);
  auto sb = make_status(2);
  align_edge(*sb, "e1", 1);
  align_edge(*sb, "e3", 1);
  Tag ta{&f.g2, f.g2.node_index("q3"), {}, sa, 10};
  Tag tb{&f.g2, f.g2.node_index("q4"), {}, sb, 20};
  Tag merged = merge_tags(ta, tb);
  EXPECT_EQ(merged.status->aligned_edge_count(), 3u);
  EXPECT_NEAR(graph_score(*merged.status, f.g2), 1.0, 1e-12);
  EXPECT_EQ(merged.last_align_ts, 20);
  // Winner by graph score is b (2 edges vs 1).
  EXPECT_EQ(merged.status.get(), sb.get());

  // Same edge on both sides: the higher score survives.
  auto sc = make_status(1);
  align_edge(*sc, "e1", 2);  // 1.5
  auto sd = make_status(2);
  align_edge(*sd, "e1", 1);  // 2.0
  Tag tc{&f.g2, 0, {}, sc, 1};
  Tag td{&f.g2, 0, {}, sd, 2};
  Tag m2 = merge_tags(tc, td);
  int e1 = f.g2.edge_index("e1");
  EXPECT_DOUBLE_EQ(m2.status->edge_align[e1]->s_ei, 2.0);

  // Same-status duplicates: merge is identity on the status, keeps the
  // further-progressed cursor.
  Tag u1{&f.g2, 0, std::vector<PathEvent>(2), sc, 1};
  Tag u2{&f.g2, 0, std::vector<PathEvent>(1), sc, 2};
  Tag m3 = merge_tags(u1, u2);
  EXPECT_EQ(m3.cached_path.size(), 1u);
  EXPECT_EQ(m3.status.get(), sc.get());
}

TEST(MergeTags, GraphMismatchThrows) {
  Fixture f;
  QueryGraph g5 = load_shipped("qg5_download_execution.json");
  auto sa = std::make_shared<AlignmentStatus>(&f.g2);
  auto sb = std::make_shared<AlignmentStatus>(&g5);
  Tag ta{&f.g2, 0, {}, sa, 0};
  Tag tb{&g5, 0, {}, sb, 0};
  EXPECT_THROW(merge_tags(ta, tb), std::invalid_argument);
}

TEST(Engine, PerEntityPerGraphCapEvictsLowestScoreThenNewest) {
  Fixture f;
  EngineConfig cfg;
  cfg.per_entity_qg_cap = 2;
  TagCache cache(&f.idx, cfg);

  Entity o1 = make_entity(Kind::File, "h0", "o1.tmp");
  Entity o2 = make_entity(Kind::File, "h0", "o2.tmp");
  Entity o3 = make_entity(Kind::File, "h0", "o3.tmp");
  cache.process_event(make_event(0, 1000, f.firefox, Op::Read, o1));
  cache.process_event(make_event(1, 2000, f.firefox, Op::Read, o2));
  cache.process_event(make_event(2, 3000, f.firefox, Op::Read, o3));

  // All three seed statuses tie at score zero, so the newest duplicate is
  // the victim; the older cursors (whose lineages may have progressed
  // elsewhere) survive.
  std::vector<std::int64_t> survivors;
  cache.for_each_entity([&](const std::string& id, const std::vector<Tag>& tags) {
    if (id != f.firefox.id) return;
    for (const Tag& t : tags) survivors.push_back(t.last_align_ts);
  });
  ASSERT_EQ(survivors.size(), 2u);
  EXPECT_EQ(survivors, (std::vector<std::int64_t>{1000, 2000}));
  EXPECT_GE(cache.counters().tags_removed, 1u);
}

TEST(Engine, AlertEmittedOncePerStatus) {
  Fixture f;
  TagCache cache(&f.idx);
  std::size_t alerts = 0;
  for (const Event& ev : f.autostart_events())
    alerts += cache.process_event(ev).size();
  ASSERT_EQ(alerts, 1u);

  // Re-aligning the already-aligned edge must not re-emit.
  alerts += cache
                .process_event(
                    make_event(4, 5000, f.reg, Op::ModifyRegistry, f.runkey))
                .size();
  EXPECT_EQ(alerts, 1u);
  EXPECT_EQ(cache.counters().alerts, 1u);
}

TEST(Engine, ScoreMonotoneOverStatusLifetime) {
  Fixture f;
  TagCache cache(&f.idx);
  std::map<std::uint64_t, double> last_score;
  for (const Event& ev : f.autostart_events()) {
    cache.process_event(ev);
    for (const auto& st : cache.live_statuses()) {
      double sc = graph_score(*st, *st->qg);
      auto it = last_score.find(st->status_id);
      if (it != last_score.end()) EXPECT_GE(sc, it->second - 1e-12);
      last_score[st->status_id] = sc;
    }
  }
}

TEST(Engine, ResidentTagsBoundedByCounters) {
  Fixture f;
  TagCache cache(&f.idx);
  for (const Event& ev : f.autostart_events()) cache.process_event(ev);
  const EngineCounters& c = cache.counters();
  EXPECT_EQ(c.events_processed, 4u);  // single pass, nothing re-read
  EXPECT_EQ(cache.active_tags(), cache.recount_resident());
  EXPECT_LE(cache.active_tags(),
            c.tags_initialized + c.tags_propagated - c.tags_removed);
}

TEST(Engine, SweepRemovesStaleAndFreesStatuses) {
  Fixture f;
  EngineConfig cfg;
  cfg.decay_ms = 1000;
  TagCache cache(&f.idx, cfg);

  EXPECT_EQ(cache.sweep_expired(0), 0u);  // empty cache

  cache.process_event(make_event(0, 0, f.firefox, Op::Write, f.xsh));
  cache.process_event(make_event(1, 100, f.firefox, Op::Exec, f.reg));
  std::size_t statuses_before = cache.live_status_count();
  EXPECT_GE(statuses_before, 1u);

  std::size_t removed = cache.sweep_expired(50'000);
  EXPECT_GE(removed, 3u);
  EXPECT_EQ(cache.active_tags(), 0u);
  EXPECT_EQ(cache.audit_expired(50'000), 0u);
  EXPECT_EQ(cache.live_status_count(), 0u);  // nothing alerted, all freed
}

TEST(Engine, SelfEventDoesNotCorruptTheCache) {
  Fixture f;
  TagCache cache(&f.idx);
  cache.process_event(make_event(0, 1000, f.firefox, Op::Write, f.xsh));
  // Subject == object: the snapshot protects iteration while place()
  // inserts into the very list being propagated.
  cache.process_event(make_event(1, 2000, f.firefox, Op::Rename, f.firefox));
  cache.process_event(make_event(2, 3000, f.firefox, Op::Exec, f.reg));
  cache.process_event(make_event(3, 4000, f.xsh, Op::Create, f.evil));
  EXPECT_EQ(cache.active_tags(), cache.recount_resident());
  cache.process_event(make_event(4, 5000, f.reg, Op::ModifyRegistry, f.runkey));
  EXPECT_EQ(cache.counters().alerts, 1u);
}

TEST(Engine, MultipleNodeSeedsEachInitialize) {
  LoadResult r = load_query_graph(R"({
    "id": "twoseeds",
    "nodes": [
      {"id": "a", "kind": "process", "match": {"name": "alpha"}},
      {"id": "b", "kind": "process", "match": {"name": "alpha|omega"}},
      {"id": "c", "kind": "file", "match": {"name": "out.*"}}],
    "edges": [{"id": "e1", "src": "a", "dst": "c", "ops": ["write"]},
              {"id": "e2", "src": "b", "dst": "c", "ops": ["create"]}],
    "seeds": [{"node": "a"}, {"node": "b"}]
  })");
  ASSERT_TRUE(r.ok());
  SeedIndex idx = SeedIndex::build({&*r.graph});
  TagCache cache(&idx);
  Entity alpha = make_entity(Kind::Process, "h0", "alpha");
  Entity junk = make_entity(Kind::File, "h0", "junk.dat");
  cache.process_event(make_event(0, 1, alpha, Op::Read, junk));
  // Both seeds match one subject: two fresh statuses, two tags.
  EXPECT_EQ(cache.counters().tags_initialized, 2u);
  EXPECT_EQ(cache.live_status_count(), 2u);
}

TEST(Engine, EdgeSeedAlignsImmediately) {
  LoadResult r = load_query_graph(R"({
    "id": "es", "threshold": 0.9,
    "nodes": [
      {"id": "a", "kind": "process", "match": {"name": "nc"}},
      {"id": "b", "kind": "socket"}],
    "edges": [{"id": "e", "src": "a", "dst": "b", "ops": ["connect"]}],
    "seeds": [{"edge": "e"}]
  })");
  ASSERT_TRUE(r.ok());
  SeedIndex idx = SeedIndex::build({&*r.graph});
  TagCache cache(&idx);

  Entity nc = make_entity(Kind::Process, "h0", "nc");
  Entity sock = make_entity(Kind::Socket, "h0", "9.9.9.9:53", "", "9.9.9.9:53");
  auto alerts = cache.process_event(make_event(0, 1, nc, Op::Connect, sock));
  // Single edge aligned at path length 1: score (1 + 1) / 2 = 1 >= 0.9.
  ASSERT_EQ(alerts.size(), 1u);
  EXPECT_DOUBLE_EQ(alerts[0].score, 1.0);
  ASSERT_EQ(alerts[0].edges.size(), 1u);
  EXPECT_EQ(alerts[0].edges[0].path_length, 1u);
}

}  // namespace
