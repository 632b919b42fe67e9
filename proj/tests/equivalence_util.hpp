#pragma once

#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "tagstream/engine.hpp"
#include "tagstream/oracle.hpp"
#include "tagstream/tracegen.hpp"
#include "test_util.hpp"

namespace tagstream::testutil {

struct ShippedGraphs {
  std::map<std::string, QueryGraph> by_id;
  std::vector<const QueryGraph*> ptrs;

  ShippedGraphs() {
    for (const char* f :
         {"qg1_t1053_scheduled_task.json", "qg2_t1547_boot_autostart.json",
          "qg4_t1486_encrypt_data.json", "qg5_download_execution.json"}) {
      QueryGraph g = load_shipped(f);
      std::string id = g.id;
      by_id.emplace(id, std::move(g));
    }
    for (auto& [id, g] : by_id) ptrs.push_back(&g);
  }

  const QueryGraph& at(const std::string& id) const { return by_id.at(id); }
};

struct EquivalenceCase {
  Trace trace;
  GroundTruth gt;
};

/// Random benign background with 1..3 planted template instances, one host
/// each, optionally entity-mutated before injection and chain/around-mutated
/// after. Deterministic per seed.
inline EquivalenceCase make_equivalence_case(std::uint64_t seed,
                                             const ShippedGraphs& graphs) {
  std::mt19937_64 rng(seed);
  const std::size_t hosts = 4;
  EquivalenceCase c;
  c.trace = gen_benign(50 + rng() % 40, hosts, rng());

  auto ids = shipped_template_ids();
  std::size_t k = 1 + rng() % 3;
  std::vector<std::size_t> host_order = {0, 1, 2, 3};
  for (std::size_t i = 3; i > 0; --i)
    std::swap(host_order[i], host_order[rng() % (i + 1)]);

  for (std::size_t i = 0; i < k; ++i) {
    const std::string qg_id =
        i == 0 ? ids[seed % ids.size()] : ids[rng() % ids.size()];
    const QueryGraph& g = graphs.at(qg_id);
    AttackTemplate tmpl = attack_template(qg_id);
    if (rng() % 4 == 0) {
      try {
        tmpl = mutate_entities(tmpl, g, rng());
      } catch (const std::invalid_argument&) {
      }
    }
    std::string host = "h" + std::to_string(host_order[i]);
    std::size_t at = rng() % (c.trace.events.size() + 1);
    inject_attack(c.trace, c.gt, tmpl, g, at, host);
    std::size_t attack_index = c.gt.attacks.size() - 1;
    if (rng() % 10 < 4)
      mutate_in_chain(c.trace, c.gt, attack_index, 1 + rng() % 3, g, rng());
    if (rng() % 10 < 4)
      mutate_around(c.trace, c.gt, attack_index, 1 + rng() % 10, rng());
  }
  return c;
}

/// Stream the trace through one engine with decay and caps disabled, run the
/// oracle per graph, and compare digests. Empty result = equivalent.
inline std::vector<std::string> check_equivalence(const EquivalenceCase& c,
                                                  const ShippedGraphs& graphs) {
  SeedIndex idx = SeedIndex::build(graphs.ptrs);
  EngineConfig cfg;
  cfg.max_rounds = kUnlimitedRounds;
  cfg.decay_ms = kUnlimitedDecay;
  cfg.per_entity_qg_cap = 0;
  TagCache cache(&idx, cfg);
  for (const Event& ev : c.trace.events) cache.process_event(ev);

  std::map<std::string, std::vector<AlignmentDigest>> engine_by_qg;
  for (const AlignmentDigest& d : digest_statuses(cache.live_statuses()))
    engine_by_qg[d.qg].push_back(d);

  std::vector<std::string> issues;
  for (const QueryGraph* g : graphs.ptrs) {
    auto oracle = oracle_align(c.trace.events, *g, c.trace.events.size() + 1);
    auto o_digests = digest_oracle(g->id, oracle);
    auto e_digests = engine_by_qg.count(g->id)
                         ? engine_by_qg.at(g->id)
                         : std::vector<AlignmentDigest>{};
    for (std::string& s : compare_engine_to_oracle(e_digests, o_digests))
      issues.push_back(g->id + ": " + s);
  }
  return issues;
}

}  // namespace tagstream::testutil
