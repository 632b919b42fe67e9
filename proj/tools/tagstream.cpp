#include <sys/resource.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tagstream/engine.hpp"
#include "tagstream/event.hpp"
#include "tagstream/pipeline.hpp"
#include "tagstream/query_graph.hpp"
#include "tagstream/scoring.hpp"
#include "tagstream/tracegen.hpp"

namespace fs = std::filesystem;
using namespace tagstream;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputUnavailable("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<fs::path> graph_files(const std::string& dir) {
  std::vector<fs::path> files;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(dir, ec))
    if (entry.path().extension() == ".json") files.push_back(entry.path());
  if (ec) throw InputUnavailable("cannot read directory " + dir);
  std::sort(files.begin(), files.end());
  return files;
}

std::map<std::string, QueryGraph> load_graph_dir(const std::string& dir) {
  std::map<std::string, QueryGraph> graphs;
  for (const fs::path& f : graph_files(dir)) {
    LoadResult r = load_query_graph(read_file(f.string()));
    if (!r.ok())
      throw QueryGraphLoadError(f.string() + ": " +
                                std::string(to_string(r.error)) + " " +
                                r.detail);
    std::string id = r.graph->id;
    graphs.emplace(id, std::move(*r.graph));
  }
  if (graphs.empty()) throw QueryGraphLoadError("no query graphs in " + dir);
  return graphs;
}

struct RunArgs {
  std::string input;
  std::string query_graphs;
  double threshold = 0.6;
  std::size_t decay_rounds = 6;
  double decay_seconds = 14'400;
  double sweep_interval_seconds = 60;
  std::size_t partitions = 1;
  std::size_t cap = 4;
  std::string alerts_out;
  std::string metrics_out;
  bool synthesize_ts = false;
  bool print_table = false;
};

int cmd_run(const RunArgs& a, const std::set<std::string>& set_flags) {
  PipelineConfig cfg;
  if (const char* env = std::getenv("TAGSTREAM_CONFIG"))
    apply_config_file(cfg, env);
  // Explicit flags override config-file values.
  auto flag_set = [&](const char* name) { return set_flags.count(name) > 0; };
  if (flag_set("--input") || cfg.input.empty()) cfg.input = a.input;
  if (flag_set("--query-graphs") || cfg.query_graph_dir.empty())
    cfg.query_graph_dir = a.query_graphs;
  if (flag_set("--threshold")) cfg.threshold_override = a.threshold;
  if (flag_set("--decay-rounds")) cfg.max_rounds = a.decay_rounds;
  if (flag_set("--decay-seconds"))
    cfg.decay_ms = static_cast<std::int64_t>(a.decay_seconds * 1000.0);
  if (flag_set("--sweep-interval-seconds"))
    cfg.sweep_interval_ms =
        static_cast<std::int64_t>(a.sweep_interval_seconds * 1000.0);
  if (flag_set("--partitions")) cfg.partitions = a.partitions;
  if (flag_set("--cap")) cfg.per_entity_qg_cap = a.cap;
  if (flag_set("--alerts-out")) cfg.alerts_out = a.alerts_out;
  if (flag_set("--metrics-out")) cfg.metrics_out = a.metrics_out;
  if (a.synthesize_ts) cfg.synthesize_ts = true;
  if (a.print_table) cfg.print_alert_tables = true;

  Pipeline pipeline(cfg);
  RunSummary s = pipeline.run();
  const MetricsSnapshot& m = s.metrics;
  std::printf("events_in: %llu\n", (unsigned long long)m.events_in);
  std::printf("parse_errors: %llu\n", (unsigned long long)m.parse_errors);
  std::printf("tags_initialized: %llu\n", (unsigned long long)m.tags_initialized);
  std::printf("tags_propagated: %llu\n", (unsigned long long)m.tags_propagated);
  std::printf("tags_removed: %llu\n", (unsigned long long)m.tags_removed);
  std::printf("active_tags: %zu\n", m.active_tags);
  std::printf("eps: %.0f\n", m.eps);
  std::printf("alerts: %llu\n", (unsigned long long)s.alerts);
  return 0;
}

int cmd_validate(const std::string& dir, std::vector<std::string> files) {
  if (!dir.empty())
    for (const fs::path& f : graph_files(dir)) files.push_back(f.string());
  if (files.empty()) {
    std::fprintf(stderr, "validate: no query graph files given\n");
    return 2;
  }
  bool any_error = false;
  for (const std::string& f : files) {
    std::string doc;
    try {
      doc = read_file(f);
    } catch (const std::exception& e) {
      std::printf("%s: error: %s\n", f.c_str(), e.what());
      any_error = true;
      continue;
    }
    LoadResult r = load_query_graph(doc);
    if (!r.ok()) {
      std::printf("%s: error: %s %s\n", f.c_str(),
                  std::string(to_string(r.error)).c_str(), r.detail.c_str());
      any_error = true;
      continue;
    }
    bool clean = true;
    for (const Diagnostic& d : validate_query_graph(*r.graph)) {
      bool err = d.severity == Diagnostic::Severity::Error;
      std::printf("%s: %s: %s %s\n", f.c_str(), err ? "error" : "warning",
                  d.code.c_str(), d.detail.c_str());
      if (err) {
        any_error = true;
        clean = false;
      }
    }
    if (clean)
      std::printf("%s: OK (%s, %zu nodes, %zu edges)\n", f.c_str(),
                  r.graph->id.c_str(), r.graph->nodes.size(),
                  r.graph->edges.size());
  }
  return any_error ? 1 : 0;
}

struct GenArgs {
  std::size_t events = 0;
  std::size_t hosts = 1;
  std::uint64_t seed = 42;
  std::string out;
  std::string ground_truth;
  std::string query_graphs;
  std::vector<std::string> injects;
  std::vector<std::string> partials;
  std::size_t in_chain_k = 0;
  std::size_t around_k = 0;
  bool mutate_names = false;
  std::int64_t ts_step = 25;
};

int cmd_gen(const GenArgs& a) {
  BenignOptions opts;
  opts.ts_step = a.ts_step;
  Trace trace = gen_benign(a.events, a.hosts, a.seed, opts);
  GroundTruth gt;

  if (!a.injects.empty() || !a.partials.empty()) {
    if (a.query_graphs.empty()) {
      std::fprintf(stderr, "gen: --query-graphs is required with --inject\n");
      return 2;
    }
    auto graphs = load_graph_dir(a.query_graphs);
    std::mt19937_64 rng(a.seed ^ 0x9e3779b97f4a7c15ULL);
    std::size_t host_rr = 0;
    auto handle = [&](const std::string& id, bool partial) {
      auto it = graphs.find(id);
      if (it == graphs.end())
        throw QueryGraphLoadError("no query graph with id " + id);
      const QueryGraph& g = it->second;
      AttackTemplate tmpl = attack_template(id);
      if (a.mutate_names) {
        try {
          tmpl = mutate_entities(tmpl, g, rng());
        } catch (const std::invalid_argument&) {
        }
      }
      std::string host = "h" + std::to_string(host_rr++ % a.hosts);
      std::size_t at = pick_clear_position(trace, gt, rng());
      if (partial)
        inject_partial_attack(trace, gt, tmpl, g, at, host);
      else
        inject_attack(trace, gt, tmpl, g, at, host);
      std::size_t idx = gt.attacks.size() - 1;
      if (a.in_chain_k > 0)
        mutate_in_chain(trace, gt, idx, a.in_chain_k, g, rng());
      if (a.around_k > 0) mutate_around(trace, gt, idx, a.around_k, rng());
    };
    for (const std::string& id : a.injects) handle(id, false);
    for (const std::string& id : a.partials) handle(id, true);
  }

  std::string text = serialize_trace(trace);
  if (a.out == "-") {
    std::fwrite(text.data(), 1, text.size(), stdout);
  } else {
    std::ofstream out(a.out, std::ios::binary);
    if (!out) throw InputUnavailable("cannot write " + a.out);
    out << text;
  }
  if (!a.ground_truth.empty()) {
    std::ofstream out(a.ground_truth, std::ios::binary);
    if (!out) throw InputUnavailable("cannot write " + a.ground_truth);
    out << gt.to_json() << '\n';
  }
  std::fprintf(stderr, "gen: %zu events, %zu attacks\n", trace.events.size(),
               gt.attacks.size());
  return 0;
}

struct BenchArgs {
  std::string input;
  std::string query_graphs;
  int repeat = 3;
  std::size_t partitions = 1;
};

int cmd_bench(const BenchArgs& a) {
  std::vector<double> eps;
  for (int i = 0; i < a.repeat; ++i) {
    PipelineConfig cfg;
    cfg.input = a.input;
    cfg.query_graph_dir = a.query_graphs;
    cfg.partitions = a.partitions;
    Pipeline p(cfg);
    RunSummary s = p.run();
    eps.push_back(s.metrics.eps);
    std::printf("run %d: events=%llu elapsed=%.2fs eps=%.0f\n", i + 1,
                (unsigned long long)s.metrics.events_in,
                s.metrics.elapsed_seconds, s.metrics.eps);
  }
  std::sort(eps.begin(), eps.end());
  double median = eps[eps.size() / 2];
  rusage ru{};
  getrusage(RUSAGE_SELF, &ru);
  std::printf("median_eps: %.0f\n", median);
  std::printf("peak_rss_mb: %.1f\n",
              static_cast<double>(ru.ru_maxrss) / 1024.0);
  return 0;
}

struct ReportArgs {
  std::string alerts;
  std::string ground_truth;
  std::string thresholds = "0.5:0.9:0.05";
};

struct RecordedAlert {
  std::string qg, host;
  double score = 0.0;
  std::int64_t trigger_ts = 0;
};

int cmd_report(const ReportArgs& a) {
  double lo = 0, hi = 0, step = 0;
  if (std::sscanf(a.thresholds.c_str(), "%lf:%lf:%lf", &lo, &hi, &step) != 3 ||
      step <= 0 || hi < lo) {
    std::fprintf(stderr, "report: --thresholds must be lo:hi:step\n");
    return 2;
  }

  std::vector<RecordedAlert> alerts;
  {
    std::ifstream in(a.alerts);
    if (!in) throw InputUnavailable("cannot open " + a.alerts);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded()) continue;
      // Re-thresholding uses the alignment's final score; "score" is only
      // the value at the moment the alert first crossed the run threshold.
      double score = j.value("final_score", j.value("score", 0.0));
      alerts.push_back({j.value("qg", ""), j.value("host", ""), score,
                        j.value("trigger_ts", std::int64_t{0})});
    }
  }
  GroundTruth gt = GroundTruth::from_json(read_file(a.ground_truth));

  auto matches = [](const RecordedAlert& al, const GroundTruthAttack& at) {
    return al.qg == at.qg && al.host == at.host &&
           al.trigger_ts >= at.start_ts && al.trigger_ts <= at.end_ts;
  };

  std::printf("threshold,tp,fp,fn,precision,recall,f1\n");
  for (double th = lo; th <= hi + 1e-9; th += step) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (const auto& at : gt.attacks) {
      if (at.label != "attack") continue;
      bool hit = false;
      for (const auto& al : alerts)
        if (al.score >= th - kScoreEps && matches(al, at)) hit = true;
      if (hit)
        ++tp;
      else
        ++fn;
    }
    for (const auto& al : alerts) {
      if (al.score < th - kScoreEps) continue;
      bool matched = false;
      for (const auto& at : gt.attacks)
        if (at.label == "attack" && matches(al, at)) matched = true;
      if (!matched) ++fp;
    }
    double precision = tp + fp == 0 ? 1.0 : double(tp) / double(tp + fp);
    double recall = tp + fn == 0 ? 1.0 : double(tp) / double(tp + fn);
    double f1 = 2 * tp + fp + fn == 0
                    ? 1.0
                    : 2.0 * double(tp) / double(2 * tp + fp + fn);
    std::printf("%.2f,%zu,%zu,%zu,%.4f,%.4f,%.4f\n", th, tp, fp, fn, precision,
                recall, f1);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tagstream: real-time attack detection by streaming "
               "provenance-graph alignment"};
  app.require_subcommand(1);

  RunArgs run_args;
  CLI::App* run = app.add_subcommand("run", "stream events through the aligner");
  run->add_option("--input", run_args.input,
                  "NDJSON file, '-' for stdin, or tcp://host:port");
  run->add_option("--query-graphs", run_args.query_graphs,
                  "directory of query graph JSON files");
  run->add_option("--threshold", run_args.threshold,
                  "alert threshold override for all graphs");
  run->add_option("--decay-rounds", run_args.decay_rounds,
                  "tag removal after this many propagation rounds");
  run->add_option("--decay-seconds", run_args.decay_seconds,
                  "tag removal after this much event time");
  run->add_option("--sweep-interval-seconds", run_args.sweep_interval_seconds,
                  "event-time interval between expiry sweeps");
  run->add_option("--partitions", run_args.partitions, "parallel partitions");
  run->add_option("--cap", run_args.cap,
                  "per-entity per-graph tag cap (0 = unlimited)");
  run->add_option("--alerts-out", run_args.alerts_out, "NDJSON alert sink");
  run->add_option("--metrics-out", run_args.metrics_out, "CSV metrics sink");
  run->add_flag("--synthesize-ts", run_args.synthesize_ts,
                "synthesize monotone timestamps when records lack ts");
  run->add_flag("--print-table", run_args.print_table,
                "print the node/edge table of each alert");

  std::string validate_dir;
  std::vector<std::string> validate_files;
  CLI::App* validate =
      app.add_subcommand("validate", "check query graph files");
  validate->add_option("--query-graphs", validate_dir,
                       "directory of query graph JSON files");
  validate->add_option("files", validate_files, "individual files");

  GenArgs gen_args;
  CLI::App* gen = app.add_subcommand("gen", "generate labeled traces");
  gen->add_option("--events", gen_args.events, "benign event count")
      ->required();
  gen->add_option("--hosts", gen_args.hosts, "host count");
  gen->add_option("--seed", gen_args.seed, "rng seed");
  gen->add_option("--out", gen_args.out, "trace output, '-' for stdout")
      ->required();
  gen->add_option("--ground-truth", gen_args.ground_truth,
                  "ground truth JSON sidecar");
  gen->add_option("--query-graphs", gen_args.query_graphs,
                  "directory of query graphs (required with --inject)");
  gen->add_option("--inject", gen_args.injects,
                  "inject this template (repeatable: qg1 qg2 qg4 qg5)");
  gen->add_option("--inject-partial", gen_args.partials,
                  "inject a half-edge near miss (repeatable)");
  gen->add_option("--mutate-in-chain", gen_args.in_chain_k,
                  "replace attack edges with k-hop gadget chains");
  gen->add_option("--mutate-around", gen_args.around_k,
                  "attach k benign events to attack entities");
  gen->add_flag("--mutate-entities", gen_args.mutate_names,
                "swap tool names within admitted alternations");
  gen->add_option("--ts-step", gen_args.ts_step,
                  "milliseconds between generated events");

  BenchArgs bench_args;
  CLI::App* bench = app.add_subcommand("bench", "measure throughput");
  bench->add_option("--input", bench_args.input, "NDJSON trace")->required();
  bench->add_option("--query-graphs", bench_args.query_graphs,
                    "directory of query graphs")
      ->required();
  bench->add_option("--repeat", bench_args.repeat, "number of runs");
  bench->add_option("--partitions", bench_args.partitions, "partitions");

  ReportArgs report_args;
  CLI::App* report =
      app.add_subcommand("report", "threshold sweep over recorded alerts");
  report->add_option("--alerts", report_args.alerts, "NDJSON alerts file")
      ->required();
  report->add_option("--ground-truth", report_args.ground_truth,
                     "ground truth JSON")
      ->required();
  report->add_option("--thresholds", report_args.thresholds, "lo:hi:step");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    std::fprintf(stderr, "%s", app.help().c_str());
    return 2;
  }

  try {
    if (run->parsed()) {
      if (run_args.input.empty() || run_args.query_graphs.empty()) {
        bool has_env = std::getenv("TAGSTREAM_CONFIG") != nullptr;
        if (!has_env) {
          std::fprintf(stderr, "run: --input and --query-graphs are required\n");
          return 2;
        }
      }
      std::set<std::string> set_flags;
      for (const auto* opt : run->get_options())
        if (opt->count() > 0) set_flags.insert(opt->get_name());
      return cmd_run(run_args, set_flags);
    }
    if (validate->parsed()) return cmd_validate(validate_dir, validate_files);
    if (gen->parsed()) return cmd_gen(gen_args);
    if (bench->parsed()) return cmd_bench(bench_args);
    if (report->parsed()) return cmd_report(report_args);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "tagstream: %s\n", e.what());
    return 1;
  }
  return 2;
}
