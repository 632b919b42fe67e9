// Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

#include <gtest/gtest.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "equivalence_util.hpp"
#include "tagstream/engine.hpp"
#include "tagstream/oracle.hpp"
#include "tagstream/pipeline.hpp"
#include "tagstream/tracegen.hpp"
#include "test_util.hpp"

using namespace tagstream;
using namespace tagstream::testutil;
namespace fs = std::filesystem;

namespace {

struct Criterion {
  int num;
  std::string name;
  bool skipped = false;
  std::string skip_reason;

  Criterion(int n, std::string nm) : num(n), name(std::move(nm)) {}
  void skip(std::string reason) {
    skipped = true;
    skip_reason = std::move(reason);
  }
  ~Criterion() {
    const char* verdict = skipped ? "SKIP"
                          : ::testing::Test::HasFailure() ? "FAIL"
                                                          : "PASS";
    std::printf("[ACCEPTANCE] C%d %s: %s%s%s\n", num, name.c_str(), verdict,
                skipped ? " - " : "", skipped ? skip_reason.c_str() : "");
    std::fflush(stdout);
  }
};

const ShippedGraphs& graphs() {
  static ShippedGraphs g;
  return g;
}

fs::path temp_path(const std::string& stem) {
  return fs::temp_directory_path() /
         (stem + "_" + std::to_string(::getpid()));
}

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// Streams benign chunks straight to disk so multi-million-event fixtures
// never sit in memory. `tweak` may rewrite individual events.
void write_benign_file(const fs::path& path, std::size_t total,
                       std::size_t hosts, std::uint64_t seed,
                       std::int64_t ts_step,
                       const std::function<void(Event&, std::size_t)>& tweak =
                           {}) {
  std::ofstream out(path, std::ios::binary);
  ASSERT_TRUE(out) << path;
  const std::size_t chunk = 100'000;
  std::size_t written = 0;
  std::uint64_t ci = 0;
  std::string buf;
  buf.reserve(chunk * 150);
  while (written < total) {
    std::size_t n = std::min(chunk, total - written);
    BenignOptions opts;
    opts.ts_start = 1000 + static_cast<std::int64_t>(written) * ts_step;
    opts.ts_step = ts_step;
    Trace t = gen_benign(n, hosts, seed + ci, opts);
    buf.clear();
    for (std::size_t i = 0; i < t.events.size(); ++i) {
      if (tweak) tweak(t.events[i], written + i);
      buf += serialize_event(t.events[i]);
      buf += '\n';
    }
    out << buf;
    written += n;
    ++ci;
  }
}

const fs::path& benign_10m_file() {
  static fs::path path = [] {
    fs::path p = temp_path("tagstream_accept_10m");
    write_benign_file(p, 10'000'000, 4, 424242, 25);
    return p;
  }();
  return path;
}

PipelineConfig shipped_config(const std::string& input) {
  PipelineConfig cfg;
  cfg.input = input;
  cfg.query_graph_dir = TAGSTREAM_QUERY_DIR;
  return cfg;
}

// --- C1 ------------------------------------------------------------------

TEST(Acceptance, C1WorkedExampleExactness) {
  Criterion crit(1, "worked-example exactness");
  double t0 = now_seconds();

  Trace trace;
  GroundTruth gt;
  const QueryGraph& g2 = graphs().at("qg2");
  inject_attack(trace, gt, attack_template("qg2"), g2, 0, "h0");

  SeedIndex idx = SeedIndex::build({&g2});
  TagCache cache(&idx);
  std::vector<Alert> alerts;
  for (const Event& ev : trace.events)
    for (Alert& a : cache.process_event(ev)) alerts.push_back(std::move(a));

  ASSERT_EQ(alerts.size(), 1u);
  const Alert& a = alerts[0];
  EXPECT_NEAR(a.score, 5.5 / 6.0, 1e-9);

  std::map<std::string, double> s_ei;
  for (const auto& e : a.edges) s_ei[e.edge_id] = e.s_ei;
  EXPECT_DOUBLE_EQ(s_ei.at("e1"), 1.5);
  EXPECT_DOUBLE_EQ(s_ei.at("e2"), 2.0);
  EXPECT_DOUBLE_EQ(s_ei.at("e3"), 2.0);

  std::map<std::string, std::string> aligned;
  for (const auto& n : a.nodes) aligned[n.node_id] = n.entity;
  EXPECT_EQ(aligned.at("q1"), "firefox");
  EXPECT_EQ(aligned.at("q2"), R"(C:\temp\evil.dll)");
  EXPECT_EQ(aligned.at("q3"), "reg.exe");
  EXPECT_NE(aligned.at("q4").find(
                R"(hkcu\software\microsoft\windows\currentVersion\run)"),
            std::string::npos);

  std::string table = render_alert_table(a);
  EXPECT_NE(table.find("5.5/6"), std::string::npos);
  EXPECT_NE(table.find("firefox"), std::string::npos);
  EXPECT_NE(table.find(R"(C:\temp\evil.dll)"), std::string::npos);
  EXPECT_NE(table.find("(firefox -> x.sh)"), std::string::npos);

  EXPECT_LT(now_seconds() - t0, 1.0);
}

// --- C2 ------------------------------------------------------------------

TEST(Acceptance, C2OracleEquivalence) {
  Criterion crit(2, "oracle equivalence over 1000 random traces");
  double t0 = now_seconds();

  std::set<std::string> templates_seen;
  std::size_t failures = 0;
  for (std::uint64_t seed = 1; seed <= 1000; ++seed) {
    EquivalenceCase c = make_equivalence_case(seed, graphs());
    ASSERT_LE(c.trace.events.size(), 200u);
    for (const auto& a : c.gt.attacks) templates_seen.insert(a.qg);
    auto issues = check_equivalence(c, graphs());
    if (!issues.empty()) {
      ++failures;
      if (failures <= 5)
        ADD_FAILURE() << "seed " << seed << ": " << issues.front();
    }
  }
  EXPECT_EQ(failures, 0u);
  EXPECT_EQ(templates_seen.size(), 4u) << "all shipped templates planted";
  EXPECT_LT(now_seconds() - t0, 300.0);
}

// --- C3 ------------------------------------------------------------------

TEST(Acceptance, C3EvasionRobustness) {
  Criterion crit(3, "evasion robustness (in-chain and around insertion)");

  auto run_defaults = [&](const Trace& trace) {
    SeedIndex idx = SeedIndex::build(graphs().ptrs);
    TagCache cache(&idx);  // default decay rounds 6, decay 4 h, cap 4
    std::vector<Alert> alerts;
    std::vector<std::shared_ptr<AlignmentStatus>> statuses;
    for (const Event& ev : trace.events)
      for (Alert& a : cache.process_event(ev)) alerts.push_back(std::move(a));
    return std::make_pair(alerts, cache.live_statuses());
  };

  for (const std::string& id : shipped_template_ids()) {
    const QueryGraph& g = graphs().at(id);

    // In-chain insertion, k = 1..4 uniformly on all edges.
    for (std::size_t k = 1; k <= 4; ++k) {
      Trace trace = gen_benign(200, 2, 900 + k);
      GroundTruth gt;
      inject_attack(trace, gt, attack_template(id), g, 100, "h0");
      mutate_in_chain(trace, gt, 0, k, g, 1234 + k);

      double expected = gt.attacks[0].expected_score;
      EXPECT_GE(expected, 0.6 - 1e-9) << id << " k=" << k;

      auto [alerts, statuses] = run_defaults(trace);
      bool fired = false;
      for (const Alert& a : alerts)
        if (a.qg_id == id) fired = true;
      EXPECT_TRUE(fired) << id << " k=" << k;
      double best = 0;
      for (const auto& st : statuses)
        if (st->qg->id == id) best = std::max(best, graph_score(*st, *st->qg));
      EXPECT_NEAR(best, expected, 1e-9) << id << " k=" << k;
      EXPECT_GE(best, 0.6 - 1e-9) << id << " k=" << k;
    }

    // Around insertion, k = 1..20: bit-identical scores.
    Trace base_trace = gen_benign(200, 2, 7000);
    GroundTruth base_gt;
    inject_attack(base_trace, base_gt, attack_template(id), g, 100, "h0");
    auto [base_alerts, base_statuses] = run_defaults(base_trace);
    ASSERT_EQ(base_alerts.size(), 1u) << id;

    for (std::size_t k = 1; k <= 20; ++k) {
      Trace trace = gen_benign(200, 2, 7000);
      GroundTruth gt;
      inject_attack(trace, gt, attack_template(id), g, 100, "h0");
      mutate_around(trace, gt, 0, k, 5000 + k);
      auto [alerts, statuses] = run_defaults(trace);
      ASSERT_EQ(alerts.size(), 1u) << id << " k=" << k;
      EXPECT_EQ(alerts[0].score, base_alerts[0].score) << id << " k=" << k;
      ASSERT_EQ(alerts[0].edges.size(), base_alerts[0].edges.size());
      for (std::size_t i = 0; i < alerts[0].edges.size(); ++i) {
        EXPECT_EQ(alerts[0].edges[i].edge_id, base_alerts[0].edges[i].edge_id);
        EXPECT_EQ(alerts[0].edges[i].s_ei, base_alerts[0].edges[i].s_ei)
            << id << " k=" << k;
      }
    }
  }
}

// --- C4 ------------------------------------------------------------------

TEST(Acceptance, C4DecayBoundsOnSeedNoise) {
  Criterion crit(4, "decay bounds: active-tag gauge plateaus");

  // 1M events at 30 ms apart spans ~8.3 h of event time; every 200th event
  // is a browser-named subject that seeds tags without ever progressing.
  fs::path input = temp_path("tagstream_accept_noise");
  EntitySpec firefox{Kind::Process, "firefox", "", ""};
  write_benign_file(input, 1'000'000, 1, 777, 30,
                    [&](Event& ev, std::size_t idx) {
                      if (idx % 200 != 0) return;
                      std::string host = ev.subject.host;
                      ev.subject = firefox.realize(host);
                      ev.op = Op::Write;
                      EntitySpec obj{Kind::File,
                                     "noise" + std::to_string(idx) + ".tmp",
                                     "", ""};
                      ev.object = obj.realize(host);
                    });

  PipelineConfig cfg = shipped_config(input.string());
  std::vector<std::size_t> gauge;
  std::size_t audit_violations = 0;
  Pipeline* live = nullptr;
  cfg.sweep_observer = [&](std::size_t p, std::int64_t ts, std::size_t active) {
    gauge.push_back(active);
    // Called synchronously from the partition worker right after its sweep.
    if (live && live->caches()[p]->audit_expired(ts) != 0) ++audit_violations;
  };
  Pipeline pipeline(cfg);
  live = &pipeline;
  RunSummary s = pipeline.run();

  EXPECT_GT(s.metrics.tags_initialized, 0u);
  EXPECT_EQ(audit_violations, 0u) << "expired residents after a sweep";
  ASSERT_GE(gauge.size(), 100u);

  auto window_max = [&](std::size_t lo, std::size_t hi) {
    std::size_t m = 0;
    for (std::size_t i = lo; i < hi; ++i) m = std::max(m, gauge[i]);
    return m;
  };
  std::size_t n = gauge.size();
  std::size_t q2 = window_max(n / 4, n / 2);
  std::size_t q4 = window_max(3 * n / 4, n);
  EXPECT_GT(q2, 0u);
  EXPECT_LE(q4, 2 * q2) << "gauge still growing in the last quartile";
  fs::remove(input);
}

// --- C5 ------------------------------------------------------------------

TEST(Acceptance, C5FalsePositiveFloor) {
  Criterion crit(5, "false-positive floor on 10M benign events");
  const fs::path& input = benign_10m_file();

  double t0 = now_seconds();
  Pipeline pipeline(shipped_config(input.string()));
  RunSummary s = pipeline.run();
  double elapsed = now_seconds() - t0;

  EXPECT_EQ(s.metrics.events_in, 10'000'000u);
  EXPECT_EQ(s.alerts, 0u);
  EXPECT_EQ(s.metrics.tags_initialized, 0u);
  EXPECT_LT(elapsed, 180.0);
  std::printf("  C5: 10M benign events in %.1f s, alerts=%llu, "
              "tags_initialized=%llu\n",
              elapsed, (unsigned long long)s.alerts,
              (unsigned long long)s.metrics.tags_initialized);
}

// --- C6 ------------------------------------------------------------------

TEST(Acceptance, C6Throughput) {
  Criterion crit(6, "single-partition throughput");
  const fs::path& input = benign_10m_file();

  Pipeline pipeline(shipped_config(input.string()));
  RunSummary s = pipeline.run();
  std::printf("  C6: measured %.0f events/s end-to-end (parse included) on "
              "one partition; the reference system reports 137K eps on "
              "6 cores\n",
              s.metrics.eps);
  if (s.metrics.eps < 100'000.0)
    std::printf("  C6: below the 100K eps soft target\n");
  EXPECT_GE(s.metrics.eps, 20'000.0) << "hard throughput floor";
}

// --- C7 ------------------------------------------------------------------

TEST(Acceptance, C7ScalingShape) {
  Criterion crit(7, "partition scaling 1 -> 4");

  // 4-host trace; hosts h0..h3 spread across 4 partitions under the
  // default hash.
  fs::path input = temp_path("tagstream_accept_scaling");
  write_benign_file(input, 1'500'000, 4, 31337, 25);

  std::set<std::size_t> occupied;
  for (int h = 0; h < 4; ++h)
    occupied.insert(partition_route("h" + std::to_string(h), 4));
  EXPECT_GE(occupied.size(), 3u);

  auto throughput = [&](std::size_t partitions) {
    PipelineConfig cfg = shipped_config(input.string());
    cfg.partitions = partitions;
    Pipeline p(cfg);
    RunSummary s = p.run();
    EXPECT_EQ(s.metrics.events_in, 1'500'000u);
    return s.metrics.eps;
  };

  unsigned cores = std::thread::hardware_concurrency();
  if (cores < 4) {
    // The criterion is conditioned on a >= 4-core machine. Exercise the
    // partitioned paths for correctness, then skip the throughput claims.
    double e1 = throughput(1);
    double e4 = throughput(4);
    std::printf("  C7: correctness at 1 and 4 partitions ok "
                "(%.0f / %.0f eps) but only %u core(s) present\n",
                e1, e4, cores);
    fs::remove(input);
    crit.skip("throughput scaling needs >= 4 cores, found " +
              std::to_string(cores));
    GTEST_SKIP() << "scaling criterion requires >= 4 cores, found " << cores;
  }

  double e1 = throughput(1);
  double e2 = throughput(2);
  double e4 = throughput(4);
  std::printf("  C7: eps at 1/2/4 partitions: %.0f / %.0f / %.0f\n", e1, e2,
              e4);
  EXPECT_GT(e2, e1) << "throughput must increase monotonically";
  EXPECT_GT(e4, e2) << "throughput must increase monotonically";
  EXPECT_GE(e4, 2.0 * e1) << "at least 2x at 4 partitions";
  fs::remove(input);
}

// --- C8 ------------------------------------------------------------------

TEST(Acceptance, C8ThresholdSweepShape) {
  Criterion crit(8, "threshold sweep: recall/precision shape and F1 window");

  // 20 planted attacks and 20 half-edge near misses, one instance per host.
  Trace trace = gen_benign(20'000, 40, 4242);
  GroundTruth gt;
  std::mt19937_64 rng(99);
  std::size_t host = 0;
  for (int round = 0; round < 5; ++round)
    for (const std::string& id : shipped_template_ids()) {
      const QueryGraph& g = graphs().at(id);
      inject_attack(trace, gt, attack_template(id), g,
                    pick_clear_position(trace, gt, rng()),
                    "h" + std::to_string(host++));
    }
  for (int round = 0; round < 5; ++round)
    for (const std::string& id : shipped_template_ids()) {
      const QueryGraph& g = graphs().at(id);
      inject_partial_attack(trace, gt, attack_template(id), g,
                            pick_clear_position(trace, gt, rng()),
                            "h" + std::to_string(host++));
    }

  fs::path input = temp_path("tagstream_accept_corpus");
  fs::path gt_path = temp_path("tagstream_accept_gt");
  fs::path alerts_path = temp_path("tagstream_accept_alerts");
  {
    std::ofstream f(input, std::ios::binary);
    f << serialize_trace(trace);
    std::ofstream fg(gt_path, std::ios::binary);
    fg << gt.to_json();
  }

  PipelineConfig cfg = shipped_config(input.string());
  cfg.threshold_override = 0.5;  // record everything the sweep will need
  cfg.alerts_out = alerts_path.string();
  Pipeline pipeline(cfg);
  RunSummary s = pipeline.run();
  EXPECT_GE(s.alerts, 20u);

  std::string cmd = std::string(TAGSTREAM_CLI_PATH) + " report --alerts " +
                    alerts_path.string() + " --ground-truth " +
                    gt_path.string() + " --thresholds 0.5:0.95:0.05 > " +
                    (alerts_path.string() + ".csv");
  ASSERT_EQ(WEXITSTATUS(std::system(cmd.c_str())), 0);

  std::ifstream csv(alerts_path.string() + ".csv");
  std::string line;
  ASSERT_TRUE(std::getline(csv, line));
  ASSERT_EQ(line, "threshold,tp,fp,fn,precision,recall,f1");
  struct Row {
    double th, precision, recall, f1;
  };
  std::vector<Row> rows;
  while (std::getline(csv, line)) {
    Row r{};
    int tp, fp, fn;
    ASSERT_EQ(std::sscanf(line.c_str(), "%lf,%d,%d,%d,%lf,%lf,%lf", &r.th, &tp,
                          &fp, &fn, &r.precision, &r.recall, &r.f1),
              7)
        << line;
    rows.push_back(r);
  }
  ASSERT_EQ(rows.size(), 10u);

  EXPECT_DOUBLE_EQ(rows[0].recall, 1.0) << "all attacks recalled at 0.5";
  double best_f1 = 0, best_f1_window = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i > 0) {
      EXPECT_LE(rows[i].recall, rows[i - 1].recall + 1e-9)
          << "recall must be non-increasing at " << rows[i].th;
      EXPECT_GE(rows[i].precision, rows[i - 1].precision - 1e-9)
          << "precision must be non-decreasing at " << rows[i].th;
    }
    best_f1 = std::max(best_f1, rows[i].f1);
    if (rows[i].th >= 0.55 - 1e-9 && rows[i].th <= 0.75 + 1e-9)
      best_f1_window = std::max(best_f1_window, rows[i].f1);
  }
  EXPECT_NEAR(best_f1_window, best_f1, 1e-9)
      << "F1 must be maximized inside [0.55, 0.75]";

  fs::remove(input);
  fs::remove(gt_path);
  fs::remove(alerts_path);
  fs::remove(alerts_path.string() + ".csv");
}

class CleanupEnvironment : public ::testing::Environment {
 public:
  void TearDown() override {
    std::error_code ec;
    fs::remove(temp_path("tagstream_accept_10m"), ec);
  }
};

const auto* const g_env =
    ::testing::AddGlobalTestEnvironment(new CleanupEnvironment);

}  // namespace
