#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "graftnet/errors.hpp"
#include "graftnet/knowledge_store.hpp"
#include "graftnet/rng.hpp"

namespace graftnet {

struct WorldSpec {
  std::size_t num_entities = 500;
  std::size_t num_relations = 8;
  std::size_t triples_per_relation = 375;
  double text_coverage = 1.0;
  std::size_t one_hop_questions = 1400;
  std::size_t two_hop_questions = 600;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_entities < 2 || num_relations == 0 || triples_per_relation == 0) {
      throw ConfigError("world counts must be positive (and at least two entities)");
    }
    if (!(text_coverage >= 0.0 && text_coverage <= 1.0)) {
      throw ConfigError("world.text_coverage must lie in [0,1]");
    }
    if (one_hop_questions + two_hop_questions == 0) throw ConfigError("world needs at least one question");
  }

  nlohmann::json to_json() const {
    return {{"num_entities", num_entities},
            {"num_relations", num_relations},
            {"triples_per_relation", triples_per_relation},
            {"text_coverage", text_coverage},
            {"one_hop_questions", one_hop_questions},
            {"two_hop_questions", two_hop_questions},
            {"seed", seed}};
  }
};

/// A question's relation path from its seed (length 1 or 2).
struct QuestionPath {
  QuestionId question = 0;
  EntityId seed = 0;
  std::vector<RelationId> relations;
};

struct QuestionTemplate {
  std::vector<RelationId> path;
  Tokens before_seed;  // pattern tokens; the seed name follows them
};

/// Contiguous id ranges [begin, end) of the question splits.
struct Splits {
  std::pair<QuestionId, QuestionId> train, dev, test;

  static Splits of(std::size_t count) {
    const auto train_end = static_cast<QuestionId>(count * 7 / 10);
    const auto dev_end = static_cast<QuestionId>(count * 8 / 10);
    return {{0, train_end}, {train_end, dev_end}, {dev_end, static_cast<QuestionId>(count)}};
  }
};

struct World {
  WorldSpec spec;
  Dataset data;
  std::vector<QuestionPath> paths;  // parallel to data.questions
  Splits splits;
  std::size_t skipped_templates = 0;
};

namespace detail {

inline const std::vector<std::string>& name_suffixes() {
  static const std::vector<std::string> s{"alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta",
                                          "iota", "kappa", "lambda", "mu", "nu", "xi", "omicron", "pi",
                                          "rho", "sigma", "tau", "upsilon", "phi", "chi", "psi", "omega"};
  return s;
}

inline const std::vector<Tokens>& relation_phrases() {
  static const std::vector<Tokens> r{{"film", "director"}, {"screen", "writer"},   {"lead", "actor"},
                                     {"release", "year"},  {"main", "genre"},      {"spoken", "language"},
                                     {"topic", "tag"},     {"critic", "rating"},   {"music", "composer"},
                                     {"film", "producer"}, {"shooting", "location"}, {"studio", "company"}};
  return r;
}

}  // namespace detail

inline std::string entity_name(std::size_t id) {
  const auto& s = detail::name_suffixes();
  return "e" + std::to_string(id) + " " + s[id % s.size()];
}

inline Tokens relation_surface(std::size_t r) {
  const auto& phrases = detail::relation_phrases();
  if (r < phrases.size()) return phrases[r];
  return {"rel" + std::to_string(r), "attr" + std::to_string(r)};
}

/// Answers reachable from seed by following path through triples, breadth first.
inline std::vector<EntityId> oracle_answers(const std::vector<Triple>& triples, EntityId seed,
                                            const std::vector<RelationId>& path) {
  if (path.empty() || path.size() > 2) throw ContractViolation("oracle_answers: path length must be 1 or 2");
  std::set<EntityId> frontier{seed};
  for (auto r : path) {
    std::set<EntityId> next;
    for (auto s : frontier) {
      auto it = std::lower_bound(triples.begin(), triples.end(), Triple{s, r, 0});
      for (; it != triples.end() && it->subject == s && it->relation == r; ++it) next.insert(it->object);
    }
    frontier = std::move(next);
  }
  return {frontier.begin(), frontier.end()};
}

/// Random KB, one sentence per covered triple, and gold links on the subject
/// and object mentions.
inline World generate_world(const WorldSpec& spec) {
  spec.validate();
  const auto n = spec.num_entities;
  if (spec.triples_per_relation > n * (n - 1)) {
    throw ConfigError("world: " + std::to_string(spec.triples_per_relation) +
                      " triples per relation exceed the possible " + std::to_string(n * (n - 1)));
  }
  World w;
  w.spec = spec;
  Rng rng(stage_seed(spec.seed, "world.kb"));
  auto& kb = w.data.kb;
  for (std::size_t e = 0; e < n; ++e) kb.entity_names.push_back(entity_name(e));
  for (std::size_t r = 0; r < spec.num_relations; ++r) kb.relation_surfaces.push_back(relation_surface(r));

  std::set<Triple> all;
  for (std::size_t r = 0; r < spec.num_relations; ++r) {
    std::set<std::pair<EntityId, EntityId>> pairs;
    while (pairs.size() < spec.triples_per_relation) {
      const auto s = static_cast<EntityId>(rng.below(n));
      const auto o = static_cast<EntityId>(rng.below(n));
      if (s != o) pairs.emplace(s, o);
    }
    for (auto [s, o] : pairs) all.insert({s, static_cast<RelationId>(r), o});
  }
  kb.triples.assign(all.begin(), all.end());

  // Exactly round(coverage * |triples|) triples become sentences.
  Rng text_rng(stage_seed(spec.seed, "world.text"));
  const auto total = kb.triples.size();
  const auto covered = static_cast<std::size_t>(std::llround(spec.text_coverage * static_cast<double>(total)));
  std::vector<std::size_t> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = i;
  for (std::size_t i = 0; i < covered; ++i) std::swap(order[i], order[i + text_rng.below(total - i)]);
  order.resize(covered);
  std::sort(order.begin(), order.end());

  std::vector<EntityLink> links;
  for (auto i : order) {
    const auto& t = kb.triples[i];
    const auto subject = detail::whitespace_tokens(kb.entity_names[t.subject]);
    const auto object = detail::whitespace_tokens(kb.entity_names[t.object]);
    Document doc;
    doc.title = subject;
    doc.tokens = subject;
    doc.tokens.insert(doc.tokens.end(), kb.relation_surfaces[t.relation].begin(), kb.relation_surfaces[t.relation].end());
    const auto object_start = static_cast<std::uint32_t>(doc.tokens.size());
    doc.tokens.insert(doc.tokens.end(), object.begin(), object.end());
    const auto id = static_cast<DocId>(w.data.corpus.documents.size());
    for (std::uint32_t p = 0; p < subject.size(); ++p) links.push_back({t.subject, id, p});
    for (std::uint32_t p = 0; p < object.size(); ++p) links.push_back({t.object, id, object_start + p});
    w.data.corpus.documents.push_back(std::move(doc));
  }
  w.data.corpus.rebuild_vocabulary();
  w.data.links = EntityLinkSet(std::move(links));
  return w;
}

/// One template per relation (1-hop) and per ordered relation pair (2-hop).
inline std::vector<QuestionTemplate> default_templates(const KnowledgeBase& kb) {
  std::vector<QuestionTemplate> out;
  const auto rels = kb.relation_count();
  for (RelationId r = 0; r < rels; ++r) {
    Tokens t{"what", "is", "the"};
    t.insert(t.end(), kb.relation_surfaces[r].begin(), kb.relation_surfaces[r].end());
    t.push_back("of");
    out.push_back({{r}, t});
  }
  for (RelationId r1 = 0; r1 < rels; ++r1) {
    for (RelationId r2 = 0; r2 < rels; ++r2) {
      Tokens t{"what", "is", "the"};
      t.insert(t.end(), kb.relation_surfaces[r2].begin(), kb.relation_surfaces[r2].end());
      t.insert(t.end(), {"of", "the"});
      t.insert(t.end(), kb.relation_surfaces[r1].begin(), kb.relation_surfaces[r1].end());
      t.push_back("of");
      out.push_back({{r1, r2}, t});
    }
  }
  return out;
}

/// Samples (template, seed) pairs without replacement among those with a
/// nonempty answer set, shuffles the result and assigns ids in order.
inline void generate_questions(World& w, const std::vector<QuestionTemplate>& templates, std::uint64_t seed) {
  const auto& kb = w.data.kb;
  Rng rng(seed);
  std::vector<std::pair<std::size_t, EntityId>> candidates[2];
  w.skipped_templates = 0;
  for (std::size_t t = 0; t < templates.size(); ++t) {
    const auto& path = templates[t].path;
    bool any = false;
    for (EntityId s = 0; s < kb.entity_count(); ++s) {
      if (!oracle_answers(kb.triples, s, path).empty()) {
        candidates[path.size() - 1].emplace_back(t, s);
        any = true;
      }
    }
    if (!any) {
      ++w.skipped_templates;
      std::cerr << "warning: template with path length " << path.size() << " has no satisfying seed; skipped\n";
    }
  }
  struct Draft {
    std::size_t tmpl;
    EntityId seed;
  };
  std::vector<Draft> drafts;
  const std::size_t wanted[2] = {w.spec.one_hop_questions, w.spec.two_hop_questions};
  for (int hop = 0; hop < 2; ++hop) {
    auto& pool = candidates[hop];
    const auto take = std::min(wanted[hop], pool.size());
    if (take < wanted[hop]) {
      std::cerr << "warning: only " << pool.size() << " distinct " << hop + 1 << "-hop questions available\n";
    }
    for (std::size_t i = 0; i < take; ++i) {
      std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
      drafts.push_back({pool[i].first, pool[i].second});
    }
  }
  rng.shuffle(std::span<Draft>(drafts));

  w.data.questions.clear();
  w.paths.clear();
  for (std::size_t i = 0; i < drafts.size(); ++i) {
    const auto& tmpl = templates[drafts[i].tmpl];
    QuestionRecord q;
    q.id = static_cast<QuestionId>(i);
    q.tokens = tmpl.before_seed;
    const auto name = detail::whitespace_tokens(kb.entity_names[drafts[i].seed]);
    q.tokens.insert(q.tokens.end(), name.begin(), name.end());
    q.seeds = {drafts[i].seed};
    q.answers = oracle_answers(kb.triples, drafts[i].seed, tmpl.path);
    w.data.questions.push_back(std::move(q));
    w.paths.push_back({static_cast<QuestionId>(i), drafts[i].seed, tmpl.path});
  }
  w.splits = Splits::of(w.data.questions.size());
}

/// Full world: KB, text, and questions.
inline World generate(const WorldSpec& spec) {
  auto w = generate_world(spec);
  generate_questions(w, default_templates(w.data.kb), stage_seed(spec.seed, "world.questions"));
  return w;
}

/// Questions none of whose gold answers is reachable along their path in kb.
inline std::size_t kb_unanswerable_count(const World& w, const KnowledgeBase& kb) {
  std::size_t count = 0;
  for (std::size_t i = 0; i < w.paths.size(); ++i) {
    const auto reach = oracle_answers(kb.triples, w.paths[i].seed, w.paths[i].relations);
    const auto& gold = w.data.questions[i].answers;
    const bool hit = std::any_of(gold.begin(), gold.end(),
                                 [&](EntityId a) { return std::binary_search(reach.begin(), reach.end(), a); });
    count += hit ? 0 : 1;
  }
  return count;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json world_manifest(const World& w) {
  std::size_t one = 0, two = 0;
  for (const auto& p : w.paths) (p.relations.size() == 1 ? one : two) += 1;
  auto range = [](std::pair<QuestionId, QuestionId> r) { return nlohmann::json::array({r.first, r.second}); };
  return {{"spec", w.spec.to_json()},
          {"seed", w.spec.seed},
          {"counts",
           {{"entities", w.data.kb.entity_count()},
            {"relations", w.data.kb.relation_count()},
            {"triples", w.data.kb.triples.size()},
            {"documents", w.data.corpus.documents.size()},
            {"links", w.data.links.size()},
            {"questions", w.data.questions.size()},
            {"one_hop", one},
            {"two_hop", two},
            {"skipped_templates", w.skipped_templates}}},
          {"splits", {{"train", range(w.splits.train)}, {"dev", range(w.splits.dev)}, {"test", range(w.splits.test)}}}};
}

inline void save_world(const World& w, const std::filesystem::path& dir) {
  save_dataset(w.data, dir);
  std::ofstream paths(dir / "question_paths.jsonl");
  for (const auto& p : w.paths) {
    paths << nlohmann::json{{"id", p.question}, {"seed", p.seed}, {"path", p.relations}}.dump() << '\n';
  }
  std::ofstream(dir / "manifest.json") << world_manifest(w).dump(2) << '\n';
}

/// Reads the split ranges from a world manifest.
inline Splits load_splits(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DependencyError("missing world manifest in " + dir.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError((dir / "manifest.json").string(), 0, e.what());
  }
  auto range = [&](const char* key) {
    const auto& r = j.at("splits").at(key);
    return std::pair<QuestionId, QuestionId>{r.at(0).get<QuestionId>(), r.at(1).get<QuestionId>()};
  };
  return {range("train"), range("dev"), range("test")};
}

inline std::vector<QuestionPath> load_question_paths(const std::filesystem::path& dir) {
  std::vector<QuestionPath> out;
  detail::for_each_jsonl(dir / "question_paths.jsonl", [&](const nlohmann::json& j, std::size_t) {
    out.push_back({j.at("id").get<QuestionId>(), j.at("seed").get<EntityId>(),
                   j.at("path").get<std::vector<RelationId>>()});
  });
  return out;
}

}  // namespace graftnet
