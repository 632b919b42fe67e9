#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <json.hpp>

#include "tagstream/engine.hpp"
#include "tagstream/event.hpp"
#include "tagstream/query_graph.hpp"
#include "tagstream/scoring.hpp"

namespace tagstream {

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Stable host hash modulo partition count: all events of one host land on
/// one partition, which is what keeps tag state partition-local.
inline std::size_t partition_route(std::string_view host,
                                   std::size_t partitions) {
  if (partitions <= 1) return 0;
  return static_cast<std::size_t>(fnv1a64(host) % partitions);
}

inline std::size_t partition_route(const Event& ev, std::size_t partitions) {
  return partition_route(ev.subject.host, partitions);
}

/// Extract the top-level "host" value from one NDJSON record without a full
/// parse, so routing happens before the per-partition parser runs. Falls
/// back to the format default.
inline std::string sniff_host(std::string_view line,
                              std::string_view fallback = "h0") {
  std::size_t i = 0;
  const std::size_t n = line.size();
  auto skip_ws = [&] {
    while (i < n && (line[i] == ' ' || line[i] == '\t')) ++i;
  };
  auto scan_string = [&]() -> std::pair<std::size_t, std::size_t> {
    ++i;  // opening quote
    std::size_t start = i;
    while (i < n) {
      if (line[i] == '\\')
        i += 2;
      else if (line[i] == '"')
        break;
      else
        ++i;
    }
    std::size_t end = std::min(i, n);
    if (i < n) ++i;  // closing quote
    return {start, end};
  };
  auto skip_value = [&] {
    skip_ws();
    if (i >= n) return;
    char c = line[i];
    if (c == '"') {
      scan_string();
      return;
    }
    if (c == '{' || c == '[') {
      char open = c;
      char close = c == '{' ? '}' : ']';
      int depth = 0;
      bool in_str = false;
      for (; i < n; ++i) {
        char ch = line[i];
        if (in_str) {
          if (ch == '\\')
            ++i;
          else if (ch == '"')
            in_str = false;
          continue;
        }
        if (ch == '"')
          in_str = true;
        else if (ch == open)
          ++depth;
        else if (ch == close) {
          if (--depth == 0) {
            ++i;
            break;
          }
        }
      }
      return;
    }
    while (i < n && line[i] != ',' && line[i] != '}') ++i;
  };

  skip_ws();
  if (i >= n || line[i] != '{') return std::string(fallback);
  ++i;
  while (i < n) {
    skip_ws();
    if (i < n && line[i] == '}') break;
    if (i >= n || line[i] != '"') return std::string(fallback);
    auto [ks, ke] = scan_string();
    skip_ws();
    if (i < n && line[i] == ':') ++i;
    skip_ws();
    if (line.substr(ks, ke - ks) == "host") {
      if (i < n && line[i] == '"') {
        auto [vs, ve] = scan_string();
        return std::string(line.substr(vs, ve - vs));
      }
      return std::string(fallback);
    }
    skip_value();
    skip_ws();
    if (i < n && line[i] == ',') ++i;
  }
  return std::string(fallback);
}

/// Two-buffer bounded MPSC-ish queue; producers block while the buffer is
/// at capacity, which is the pipeline's backpressure window.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : cap_(capacity) {}

  void push_batch(std::vector<T>& batch) {
    std::unique_lock lk(m_);
    not_full_.wait(lk, [&] { return buf_.size() < cap_ || closed_; });
    if (closed_) return;
    for (T& t : batch) buf_.push_back(std::move(t));
    lk.unlock();
    not_empty_.notify_one();
  }

  // Returns false once the queue is closed and drained.
  bool pop_batch(std::vector<T>& out) {
    std::unique_lock lk(m_);
    not_empty_.wait(lk, [&] { return !buf_.empty() || closed_; });
    out.clear();
    out.swap(buf_);
    lk.unlock();
    not_full_.notify_one();
    return !out.empty();
  }

  void close() {
    {
      std::lock_guard lk(m_);
      closed_ = true;
    }
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  std::size_t capacity() const { return cap_; }
  std::size_t size() const {
    std::lock_guard lk(m_);
    return buf_.size();
  }

 private:
  mutable std::mutex m_;
  std::condition_variable not_empty_, not_full_;
  std::vector<T> buf_;
  std::size_t cap_;
  bool closed_ = false;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InputUnavailable : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct QueryGraphLoadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PipelineConfig {
  std::string input;            // file path, "-" for stdin, or tcp://host:port
  std::string query_graph_dir;
  std::optional<double> threshold_override;
  std::size_t max_rounds = 6;
  std::int64_t decay_ms = 14'400'000;
  std::int64_t sweep_interval_ms = 60'000;
  std::size_t partitions = 1;
  std::size_t per_entity_qg_cap = 4;
  std::string alerts_out;
  std::string metrics_out;
  bool synthesize_ts = false;
  bool print_alert_tables = false;
  std::size_t source_window = 10'000;
  // Observability hook, fired after every sweep: (partition, event_ts,
  // active_tags). Used by tests and long-run monitoring.
  std::function<void(std::size_t, std::int64_t, std::size_t)> sweep_observer;
};

/// Merge settings from a JSON config file (the TAGSTREAM_CONFIG mirror of
/// PipelineConfig); explicit CLI flags are applied on top by the caller.
inline void apply_config_file(PipelineConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw ConfigError("config file is not a JSON object: " + path);
  if (j.contains("input")) cfg.input = j["input"].get<std::string>();
  if (j.contains("query_graph_dir"))
    cfg.query_graph_dir = j["query_graph_dir"].get<std::string>();
  if (j.contains("threshold")) cfg.threshold_override = j["threshold"].get<double>();
  if (j.contains("max_rounds")) cfg.max_rounds = j["max_rounds"].get<std::size_t>();
  if (j.contains("decay_ms")) cfg.decay_ms = j["decay_ms"].get<std::int64_t>();
  if (j.contains("sweep_interval_ms"))
    cfg.sweep_interval_ms = j["sweep_interval_ms"].get<std::int64_t>();
  if (j.contains("partitions")) cfg.partitions = j["partitions"].get<std::size_t>();
  if (j.contains("per_entity_qg_cap"))
    cfg.per_entity_qg_cap = j["per_entity_qg_cap"].get<std::size_t>();
  if (j.contains("alerts_out")) cfg.alerts_out = j["alerts_out"].get<std::string>();
  if (j.contains("metrics_out")) cfg.metrics_out = j["metrics_out"].get<std::string>();
  if (j.contains("synthesize_ts")) cfg.synthesize_ts = j["synthesize_ts"].get<bool>();
}

struct PartitionMetrics {
  std::uint64_t lines = 0;
  std::uint64_t events_in = 0;
  std::uint64_t parse_errors = 0;
  std::uint64_t tags_initialized = 0;
  std::uint64_t tags_propagated = 0;
  std::uint64_t tags_removed = 0;
  std::uint64_t alerts = 0;
  std::size_t active_tags = 0;
};

struct MetricsSnapshot {
  std::uint64_t events_in = 0;
  std::uint64_t parse_errors = 0;
  std::uint64_t tags_initialized = 0;
  std::uint64_t tags_propagated = 0;
  std::uint64_t tags_removed = 0;
  std::uint64_t alerts = 0;
  std::size_t active_tags = 0;
  double eps = 0.0;
  double elapsed_seconds = 0.0;
  std::vector<PartitionMetrics> per_partition;
};

struct RunSummary {
  MetricsSnapshot metrics;
  std::uint64_t alerts = 0;
};

/// The four-stage pipeline: source -> parse -> graph construction ->
/// alignment. The source thread reads and routes raw lines by host; each
/// partition worker parses its share and drives one TagCache, so parse work
/// scales with partitions while per-host event order is preserved.
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.partitions < 1) throw ConfigError("partitions must be >= 1");
    if (cfg_.sweep_interval_ms <= 0)
      throw ConfigError("sweep_interval_ms must be > 0");
    load_graphs();
    idx_ = SeedIndex::build(graph_ptrs_);
  }

  void request_stop() { stop_.store(true); }

  const std::vector<std::unique_ptr<TagCache>>& caches() const {
    return caches_;
  }
  const std::vector<const QueryGraph*>& graphs() const { return graph_ptrs_; }
  const std::vector<Alert>& alerts() const { return alerts_; }
  const std::vector<std::vector<std::pair<std::int64_t, std::size_t>>>&
  gauge_rows() const {
    return gauge_rows_;
  }

  RunSummary run() {
    auto t0 = std::chrono::steady_clock::now();

    EngineConfig ecfg;
    ecfg.max_rounds = cfg_.max_rounds;
    ecfg.decay_ms = cfg_.decay_ms;
    ecfg.per_entity_qg_cap = cfg_.per_entity_qg_cap;

    const std::size_t P = cfg_.partitions;
    caches_.clear();
    queues_.clear();
    parts_.assign(P, PartitionMetrics{});
    part_alerts_.assign(P, {});
    gauge_rows_.assign(P, {});
    for (std::size_t p = 0; p < P; ++p) {
      caches_.push_back(std::make_unique<TagCache>(&idx_, ecfg));
      queues_.push_back(std::make_unique<BoundedQueue<Item>>(cfg_.source_window));
    }

    std::vector<std::thread> workers;
    workers.reserve(P);
    for (std::size_t p = 0; p < P; ++p)
      workers.emplace_back([this, p] { worker_loop(p); });

    std::exception_ptr source_error;
    try {
      read_source();
    } catch (...) {
      source_error = std::current_exception();
    }
    for (auto& q : queues_) q->close();
    for (auto& w : workers) w.join();
    if (source_error) std::rethrow_exception(source_error);

    auto t1 = std::chrono::steady_clock::now();
    elapsed_ = std::chrono::duration<double>(t1 - t0).count();

    collect_alerts();
    write_outputs();

    RunSummary s;
    s.metrics = sample_metrics();
    s.alerts = s.metrics.alerts;
    return s;
  }

  /// Consistent aggregate over per-partition counters. After run() it is
  /// exact; mid-run it reflects the last published sweep.
  MetricsSnapshot sample_metrics() const {
    MetricsSnapshot m;
    std::lock_guard lk(metrics_mutex_);
    m.per_partition = parts_;
    for (const PartitionMetrics& p : m.per_partition) {
      m.events_in += p.events_in;
      m.parse_errors += p.parse_errors;
      m.tags_initialized += p.tags_initialized;
      m.tags_propagated += p.tags_propagated;
      m.tags_removed += p.tags_removed;
      m.alerts += p.alerts;
      m.active_tags += p.active_tags;
    }
    m.elapsed_seconds = elapsed_;
    m.eps = elapsed_ > 0 ? static_cast<double>(m.events_in) / elapsed_ : 0.0;
    return m;
  }

 private:
  struct Item {
    std::uint64_t seq;
    std::string line;
  };

  void load_graphs() {
    namespace fs = std::filesystem;
    if (cfg_.query_graph_dir.empty())
      throw ConfigError("query_graph_dir is required");
    std::vector<fs::path> files;
    std::error_code ec;
    for (const auto& entry : fs::directory_iterator(cfg_.query_graph_dir, ec))
      if (entry.path().extension() == ".json") files.push_back(entry.path());
    if (ec)
      throw QueryGraphLoadError("cannot read query graph directory " +
                                cfg_.query_graph_dir);
    std::sort(files.begin(), files.end());
    if (files.empty())
      throw QueryGraphLoadError("no query graphs in " + cfg_.query_graph_dir);
    for (const fs::path& f : files) {
      std::ifstream in(f);
      std::ostringstream ss;
      ss << in.rdbuf();
      LoadResult r = load_query_graph(ss.str());
      if (!r.ok())
        throw QueryGraphLoadError(f.string() + ": " +
                                  std::string(to_string(r.error)) + " " +
                                  r.detail);
      for (const Diagnostic& d : validate_query_graph(*r.graph))
        if (d.severity == Diagnostic::Severity::Error)
          throw QueryGraphLoadError(f.string() + ": " + d.code + " " + d.detail);
      if (cfg_.threshold_override) r.graph->threshold = *cfg_.threshold_override;
      graphs_.push_back(std::make_unique<QueryGraph>(std::move(*r.graph)));
    }
    for (const auto& g : graphs_) graph_ptrs_.push_back(g.get());
  }

  void worker_loop(std::size_t p) {
    ParseOptions popts;
    popts.synthesize_ts = cfg_.synthesize_ts;
    TagCache& cache = *caches_[p];
    PartitionMetrics local;
    std::int64_t last_sweep = std::numeric_limits<std::int64_t>::min();
    std::vector<Item> batch;
    while (queues_[p]->pop_batch(batch)) {
      for (Item& item : batch) {
        ++local.lines;
        ParseResult r = parse_event_line(item.line, item.seq, popts);
        if (!r.ok()) {
          ++local.parse_errors;
          continue;
        }
        const Event& ev = *r.event;
        ++local.events_in;
        if (last_sweep == std::numeric_limits<std::int64_t>::min()) {
          last_sweep = ev.ts;
        } else if (ev.ts - last_sweep >= cfg_.sweep_interval_ms) {
          cache.sweep_expired(ev.ts);
          last_sweep = ev.ts;
          gauge_rows_[p].emplace_back(ev.ts, cache.active_tags());
          if (cfg_.sweep_observer)
            cfg_.sweep_observer(p, ev.ts, cache.active_tags());
          publish(p, local, cache);
        }
        for (Alert& a : cache.process_event(ev)) {
          if (cfg_.print_alert_tables) {
            std::lock_guard lk(stdout_mutex_);
            std::cout << render_alert_table(a);
          }
          part_alerts_[p].push_back(std::move(a));
        }
      }
    }
    publish(p, local, cache);
  }

  void publish(std::size_t p, const PartitionMetrics& local, TagCache& cache) {
    std::lock_guard lk(metrics_mutex_);
    PartitionMetrics& m = parts_[p];
    m = local;
    const EngineCounters& c = cache.counters();
    m.tags_initialized = c.tags_initialized;
    m.tags_propagated = c.tags_propagated;
    m.tags_removed = c.tags_removed;
    m.alerts = c.alerts;
    m.active_tags = cache.active_tags();
  }

  void read_source() {
    if (cfg_.input.rfind("tcp://", 0) == 0) {
      read_tcp();
      return;
    }
    if (cfg_.input == "-") {
      read_stream(std::cin);
      return;
    }
    std::ifstream in(cfg_.input, std::ios::binary);
    if (!in) throw InputUnavailable("cannot open input " + cfg_.input);
    read_stream(in);
  }

  void read_stream(std::istream& in) {
    std::vector<std::vector<Item>> staged(cfg_.partitions);
    std::string carry;
    std::vector<char> chunk(1 << 16);
    const std::size_t batch_size = 256;
    while (!stop_.load(std::memory_order_relaxed)) {
      in.read(chunk.data(), static_cast<std::streamsize>(chunk.size()));
      std::streamsize got = in.gcount();
      if (got <= 0) break;
      std::string_view data(chunk.data(), static_cast<std::size_t>(got));
      std::size_t pos = 0;
      while (pos < data.size()) {
        std::size_t nl = data.find('\n', pos);
        if (nl == std::string_view::npos) {
          carry.append(data.substr(pos));
          break;
        }
        if (carry.empty()) {
          route_line(std::string(data.substr(pos, nl - pos)), staged,
                     batch_size);
        } else {
          carry.append(data.substr(pos, nl - pos));
          route_line(std::move(carry), staged, batch_size);
          carry.clear();
        }
        pos = nl + 1;
      }
    }
    if (!carry.empty()) route_line(std::move(carry), staged, batch_size);
    for (std::size_t p = 0; p < staged.size(); ++p)
      if (!staged[p].empty()) queues_[p]->push_batch(staged[p]);
  }

  void route_line(std::string&& line, std::vector<std::vector<Item>>& staged,
                  std::size_t batch_size) {
    if (line.empty() || line[0] == '#') return;
    if (line.back() == '\r') line.pop_back();
    std::size_t p = cfg_.partitions <= 1
                        ? 0
                        : partition_route(sniff_host(line), cfg_.partitions);
    staged[p].push_back(Item{next_seq_++, std::move(line)});
    if (staged[p].size() >= batch_size) {
      queues_[p]->push_batch(staged[p]);
      staged[p].clear();
    }
  }

  void read_tcp() {
    std::string spec = cfg_.input.substr(6);
    std::size_t colon = spec.rfind(':');
    if (colon == std::string::npos)
      throw ConfigError("tcp input must be tcp://host:port");
    std::string host = spec.substr(0, colon);
    int port = std::stoi(spec.substr(colon + 1));

    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw InputUnavailable("socket() failed");
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (host == "*" || host.empty())
      addr.sin_addr.s_addr = INADDR_ANY;
    else if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd);
      throw InputUnavailable("cannot parse listen address " + host);
    }
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
        ::listen(fd, 8) != 0) {
      ::close(fd);
      throw InputUnavailable("cannot listen on " + cfg_.input);
    }

    std::vector<std::vector<Item>> staged(cfg_.partitions);
    const std::size_t batch_size = 256;
    while (!stop_.load()) {
      pollfd pfd{fd, POLLIN, 0};
      int rc = ::poll(&pfd, 1, 200);
      if (rc <= 0) continue;
      int conn = ::accept(fd, nullptr, nullptr);
      if (conn < 0) continue;
      std::string carry;
      std::vector<char> chunk(1 << 16);
      while (!stop_.load()) {
        pollfd cpfd{conn, POLLIN, 0};
        int crc = ::poll(&cpfd, 1, 200);
        if (crc == 0) continue;
        if (crc < 0) break;
        ssize_t got = ::read(conn, chunk.data(), chunk.size());
        if (got <= 0) break;
        std::string_view data(chunk.data(), static_cast<std::size_t>(got));
        std::size_t pos = 0;
        while (pos < data.size()) {
          std::size_t nl = data.find('\n', pos);
          if (nl == std::string_view::npos) {
            carry.append(data.substr(pos));
            break;
          }
          carry.append(data.substr(pos, nl - pos));
          route_line(std::move(carry), staged, batch_size);
          carry.clear();
          pos = nl + 1;
        }
      }
      if (!carry.empty()) route_line(std::move(carry), staged, batch_size);
      ::close(conn);
    }
    ::close(fd);
    for (std::size_t p = 0; p < staged.size(); ++p)
      if (!staged[p].empty()) queues_[p]->push_batch(staged[p]);
  }

  void collect_alerts() {
    alerts_.clear();
    // Alerts snapshot the first crossing; the offline threshold sweep wants
    // the score the alignment ended the run with.
    std::unordered_map<std::uint64_t, double> final_scores;
    for (const auto& cache : caches_)
      for (const auto& st : cache->alerted_statuses())
        final_scores[st->status_id] = graph_score(*st, *st->qg);
    for (auto& pa : part_alerts_)
      for (Alert& a : pa) {
        auto it = final_scores.find(a.status_id);
        if (it != final_scores.end()) a.final_score = it->second;
        alerts_.push_back(std::move(a));
      }
    std::sort(alerts_.begin(), alerts_.end(),
              [](const Alert& a, const Alert& b) {
                if (a.trigger_seq != b.trigger_seq)
                  return a.trigger_seq < b.trigger_seq;
                return a.qg_id < b.qg_id;
              });
  }

  void write_outputs() {
    if (!cfg_.alerts_out.empty()) {
      std::ofstream out(cfg_.alerts_out, std::ios::app);
      if (!out) throw InputUnavailable("cannot write " + cfg_.alerts_out);
      for (const Alert& a : alerts_) out << render_alert_json(a) << '\n';
    }
    if (!cfg_.metrics_out.empty()) {
      std::ofstream out(cfg_.metrics_out, std::ios::app);
      if (!out) throw InputUnavailable("cannot write " + cfg_.metrics_out);
      out << "event_ts_ms,active_tags\n";
      for (std::size_t p = 0; p < gauge_rows_.size(); ++p)
        for (const auto& [ts, active] : gauge_rows_[p])
          out << ts << ',' << active << '\n';
      MetricsSnapshot m = sample_metrics();
      char buf[256];
      std::snprintf(buf, sizeof buf,
                    "# summary events_in=%llu parse_errors=%llu eps=%.0f "
                    "tags_initialized=%llu tags_propagated=%llu "
                    "tags_removed=%llu active_tags=%zu alerts=%llu\n",
                    static_cast<unsigned long long>(m.events_in),
                    static_cast<unsigned long long>(m.parse_errors), m.eps,
                    static_cast<unsigned long long>(m.tags_initialized),
                    static_cast<unsigned long long>(m.tags_propagated),
                    static_cast<unsigned long long>(m.tags_removed),
                    m.active_tags,
                    static_cast<unsigned long long>(m.alerts));
      out << buf;
    }
  }

  PipelineConfig cfg_;
  std::vector<std::unique_ptr<QueryGraph>> graphs_;
  std::vector<const QueryGraph*> graph_ptrs_;
  SeedIndex idx_;

  std::vector<std::unique_ptr<TagCache>> caches_;
  std::vector<std::unique_ptr<BoundedQueue<Item>>> queues_;
  std::vector<PartitionMetrics> parts_;
  std::vector<std::vector<Alert>> part_alerts_;
  std::vector<std::vector<std::pair<std::int64_t, std::size_t>>> gauge_rows_;
  std::vector<Alert> alerts_;
  std::uint64_t next_seq_ = 0;
  double elapsed_ = 0.0;
  std::atomic<bool> stop_{false};
  mutable std::mutex metrics_mutex_;
  std::mutex stdout_mutex_;
};

}  // namespace tagstream
