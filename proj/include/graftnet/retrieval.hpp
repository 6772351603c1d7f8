#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "graftnet/errors.hpp"
#include "graftnet/knowledge_store.hpp"

namespace graftnet {

struct RetrievalConfig {
  std::size_t max_entities = 50;   // E
  std::size_t max_documents = 50;  // D
  std::size_t articles_top_k = 5;
  double restart_probability = 0.2;  // gamma
  double ppr_tolerance = 1e-6;
  std::size_t ppr_max_iters = 100;
  double bm25_k1 = 1.2;
  double bm25_b = 0.75;
  double title_weight = 1.0;
  bool use_kb = true;
  bool use_text = true;

  void validate() const {
    if (max_entities == 0) throw ConfigError("retrieval.E must be positive");
    if (!(restart_probability > 0.0 && restart_probability < 1.0)) {
      throw ConfigError("retrieval.restart_probability must lie in (0,1)");
    }
    if (!(ppr_tolerance > 0.0)) throw ConfigError("retrieval.ppr_tolerance must be positive");
    if (bm25_k1 < 0.0 || bm25_b < 0.0 || bm25_b > 1.0) throw ConfigError("bad BM25 parameters");
    if (title_weight < 0.0) throw ConfigError("retrieval.title_weight must be nonnegative");
  }
};

// ---------------------------------------------------------------------------
// Word vectors

/// Token vectors for question/relation similarity. Tokens missing from the
/// table (all of them when no table is loaded) get their own indicator
/// dimension, so in that mode cosine reduces to normalized token overlap.
class WordVectorTable {
 public:
  WordVectorTable() = default;

  /// Text format: one "token v1 v2 ... vn" per line.
  static WordVectorTable load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DependencyError("cannot open word vectors " + path.string());
    WordVectorTable table;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      std::istringstream fields(line);
      std::string token;
      if (!(fields >> token)) continue;
      std::vector<double> v;
      double x;
      while (fields >> x) v.push_back(x);
      if (v.empty()) throw ParseError(path.string(), line_no, "token without a vector");
      if (table.dimension_ == 0) table.dimension_ = v.size();
      if (v.size() != table.dimension_) throw ParseError(path.string(), line_no, "dimension mismatch");
      table.vectors_[token] = std::move(v);
    }
    return table;
  }

  void set(const std::string& token, std::vector<double> v) {
    if (dimension_ == 0) dimension_ = v.size();
    if (v.size() != dimension_) throw DimensionError("word vector dimension mismatch");
    vectors_[token] = std::move(v);
  }

  bool indicator_only() const { return vectors_.empty(); }
  std::size_t dimension() const { return dimension_; }

  /// Cosine of the mean vectors of two token lists, clamped to [0, 1].
  double similarity(const Tokens& a, const Tokens& b) const {
    const auto va = mean(a);
    const auto vb = mean(b);
    double dot = 0.0;
    for (std::size_t i = 0; i < va.dense.size(); ++i) dot += va.dense[i] * vb.dense[i];
    for (const auto& [t, x] : va.sparse) {
      if (auto it = vb.sparse.find(t); it != vb.sparse.end()) dot += x * it->second;
    }
    const double na = va.norm();
    const double nb = vb.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / (na * nb), 0.0, 1.0);
  }

 private:
  struct Mixed {
    std::vector<double> dense;
    std::map<std::string, double> sparse;

    double norm() const {
      double s = 0.0;
      for (double x : dense) s += x * x;
      for (const auto& [_, x] : sparse) s += x * x;
      return std::sqrt(s);
    }
  };

  Mixed mean(const Tokens& tokens) const {
    Mixed m;
    m.dense.assign(dimension_, 0.0);
    if (tokens.empty()) return m;
    const double w = 1.0 / static_cast<double>(tokens.size());
    for (const auto& t : tokens) {
      if (auto it = vectors_.find(t); it != vectors_.end()) {
        for (std::size_t i = 0; i < dimension_; ++i) m.dense[i] += w * it->second[i];
      } else {
        m.sparse[t] += w;
      }
    }
    return m;
  }

  std::unordered_map<std::string, std::vector<double>> vectors_;
  std::size_t dimension_ = 0;
};

inline double question_edge_weight(const Tokens& relation_surface, const Tokens& question,
                                   const WordVectorTable& table) {
  if (relation_surface.empty() || question.empty()) {
    throw ContractViolation("question_edge_weight: empty token list");
  }
  return table.similarity(relation_surface, question);
}

// ---------------------------------------------------------------------------
// KB adjacency

/// Out-edges per subject, grouped by relation (triples are sorted s, r, o).
class KbIndex {
 public:
  KbIndex() = default;
  explicit KbIndex(const KnowledgeBase& kb)
      : entity_count_(kb.entity_count()), relation_count_(kb.relation_count()), triples_(kb.triples) {
    offsets_.assign(entity_count_ + 1, 0);
    for (const auto& t : triples_) ++offsets_[t.subject + 1];
    std::partial_sum(offsets_.begin(), offsets_.end(), offsets_.begin());
  }

  std::size_t entity_count() const { return entity_count_; }
  std::size_t relation_count() const { return relation_count_; }
  std::size_t triple_count() const { return triples_.size(); }

  std::span<const Triple> out_edges(EntityId e) const {
    return {triples_.data() + offsets_[e], offsets_[e + 1] - offsets_[e]};
  }

 private:
  std::size_t entity_count_ = 0;
  std::size_t relation_count_ = 0;
  std::vector<Triple> triples_;
  std::vector<std::size_t> offsets_;
};

// ---------------------------------------------------------------------------
// Personalized PageRank

/// Power iteration of p <- gamma*s + (1-gamma)*W^T p.
///
/// Row u of W splits mass across the relation types on u's out-edges in
/// proportion to weight(u, r) (negative weights count as zero), then equally
/// among edges of one type. Rows with no positively weighted edge are sinks
/// whose mass restarts at the seeds. s is uniform over the distinct seeds.
template <class WeightFn>
  requires std::invocable<WeightFn&, EntityId, RelationId>
std::vector<double> personalized_pagerank(const KbIndex& index, std::span<const EntityId> seeds,
                                          WeightFn&& weight, const RetrievalConfig& config) {
  if (seeds.empty()) throw ContractViolation("personalized_pagerank: empty seed set");
  const std::size_t n = index.entity_count();
  std::set<EntityId> seed_set(seeds.begin(), seeds.end());
  for (auto s : seed_set) {
    if (s >= n) throw ContractViolation("personalized_pagerank: seed not in KB");
  }
  const double gamma = config.restart_probability;
  const double restart_share = 1.0 / static_cast<double>(seed_set.size());

  // Sparse transition rows.
  std::vector<std::size_t> row_start(n + 1, 0);
  std::vector<std::pair<EntityId, double>> moves;
  std::vector<char> sink(n, 1);
  for (EntityId u = 0; u < n; ++u) {
    row_start[u] = moves.size();
    auto edges = index.out_edges(u);
    double total = 0.0;
    std::vector<std::pair<std::size_t, std::size_t>> groups;  // [begin, end) per type
    for (std::size_t i = 0; i < edges.size();) {
      std::size_t j = i;
      while (j < edges.size() && edges[j].relation == edges[i].relation) ++j;
      groups.emplace_back(i, j);
      total += std::max(0.0, static_cast<double>(weight(u, edges[i].relation)));
      i = j;
    }
    if (total <= 0.0) continue;
    sink[u] = 0;
    for (auto [b, e] : groups) {
      const double w = std::max(0.0, static_cast<double>(weight(u, edges[b].relation)));
      if (w <= 0.0) continue;
      const double per_edge = w / total / static_cast<double>(e - b);
      for (auto k = b; k < e; ++k) moves.emplace_back(edges[k].object, per_edge);
    }
  }
  row_start[n] = moves.size();

  std::vector<double> p(n, 0.0), next(n);
  for (auto s : seed_set) p[s] = restart_share;
  for (std::size_t iter = 0; iter < config.ppr_max_iters; ++iter) {
    std::fill(next.begin(), next.end(), 0.0);
    double sink_mass = 0.0;
    for (EntityId u = 0; u < n; ++u) {
      if (p[u] == 0.0) continue;
      if (sink[u]) {
        sink_mass += p[u];
        continue;
      }
      for (auto k = row_start[u]; k < row_start[u + 1]; ++k) {
        next[moves[k].first] += (1.0 - gamma) * p[u] * moves[k].second;
      }
    }
    const double restart = (gamma + (1.0 - gamma) * sink_mass) * restart_share;
    for (auto s : seed_set) next[s] += restart;
    double change = 0.0;
    for (std::size_t i = 0; i < n; ++i) change = std::max(change, std::abs(next[i] - p[i]));
    p.swap(next);
    if (change < config.ppr_tolerance) break;
  }
  return p;
}

inline std::vector<double> personalized_pagerank(const KbIndex& index, std::span<const EntityId> seeds,
                                                 std::span<const double> relation_weights,
                                                 const RetrievalConfig& config) {
  return personalized_pagerank(
      index, seeds, [&](EntityId, RelationId r) { return relation_weights[r]; }, config);
}

/// Top-E entities by score (ties by ascending id) with every seed forced in.
inline std::vector<EntityId> retrieve_kb_entities(std::span<const double> scores,
                                                  std::span<const EntityId> seeds, std::size_t limit) {
  std::set<EntityId> seed_set(seeds.begin(), seeds.end());
  if (limit < seed_set.size()) throw ContractViolation("retrieve_kb_entities: E smaller than seed set");
  auto before = [&](EntityId a, EntityId b) {
    return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
  };
  std::vector<EntityId> others;
  for (EntityId e = 0; e < scores.size(); ++e) {
    if (!seed_set.count(e)) others.push_back(e);
  }
  const std::size_t room = std::min(others.size(), limit - seed_set.size());
  std::partial_sort(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(room), others.end(), before);
  std::vector<EntityId> out(seed_set.begin(), seed_set.end());
  out.insert(out.end(), others.begin(), others.begin() + static_cast<std::ptrdiff_t>(room));
  std::sort(out.begin(), out.end(), before);
  return out;
}

// ---------------------------------------------------------------------------
// Article ranking: TF-IDF over unigrams and bigrams

class ArticleIndex {
 public:
  ArticleIndex() = default;

  /// Sentences sharing a title form one article. Article ids follow the
  /// first sentence id of each title.
  explicit ArticleIndex(const Corpus& corpus) {
    std::map<Tokens, std::size_t> by_title;
    for (DocId d = 0; d < corpus.documents.size(); ++d) {
      const auto& doc = corpus.documents[d];
      auto [it, inserted] = by_title.emplace(doc.title, titles_.size());
      if (inserted) {
        titles_.push_back(doc.title);
        sentences_.emplace_back();
      }
      sentences_[it->second].push_back(d);
    }
    const std::size_t n = titles_.size();
    std::vector<std::map<std::uint32_t, double>> counts(n);
    for (std::size_t a = 0; a < n; ++a) {
      for (auto d : sentences_[a]) {
        for (const auto& f : features(corpus.documents[d].tokens)) ++counts[a][intern(f)];
      }
    }
    std::vector<std::size_t> df(feature_ids_.size(), 0);
    for (const auto& c : counts) {
      for (const auto& [f, _] : c) ++df[f];
    }
    idf_.resize(df.size());
    for (std::size_t f = 0; f < df.size(); ++f) {
      const double ratio = (static_cast<double>(n) - df[f] + 0.5) / (df[f] + 0.5);
      idf_[f] = std::max(0.0, std::log(ratio));
    }
    postings_.resize(df.size());
    norms_.assign(n, 0.0);
    for (std::size_t a = 0; a < n; ++a) {
      for (const auto& [f, count] : counts[a]) {
        const double w = std::log1p(count) * idf_[f];
        if (w == 0.0) continue;
        postings_[f].emplace_back(a, w);
        norms_[a] += w * w;
      }
      norms_[a] = std::sqrt(norms_[a]);
    }
  }

  std::size_t article_count() const { return titles_.size(); }
  const Tokens& title(std::size_t article) const { return titles_.at(article); }
  const std::vector<DocId>& sentences(std::size_t article) const { return sentences_.at(article); }

  /// TF-IDF cosine of every article against the question, top k by score then id.
  std::vector<std::pair<std::size_t, double>> rank(const Tokens& question, std::size_t k) const {
    if (question.empty() || k == 0) return {};
    std::map<std::uint32_t, double> q;
    for (const auto& f : features(question)) {
      if (auto it = feature_ids_.find(f); it != feature_ids_.end()) q[it->second] += 1.0;
    }
    std::vector<double> score(titles_.size(), 0.0);
    double q_norm = 0.0;
    for (auto& [f, count] : q) {
      const double w = std::log1p(count) * idf_[f];
      q_norm += w * w;
      for (const auto& [a, aw] : postings_[f]) score[a] += w * aw;
    }
    q_norm = std::sqrt(q_norm);
    std::vector<std::pair<std::size_t, double>> ranked;
    for (std::size_t a = 0; a < score.size(); ++a) {
      const double s = (q_norm > 0.0 && norms_[a] > 0.0) ? score[a] / (q_norm * norms_[a]) : 0.0;
      ranked.emplace_back(a, s);
    }
    const std::size_t keep = std::min(k, ranked.size());
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(keep), ranked.end(),
                      [](const auto& x, const auto& y) {
                        return x.second != y.second ? x.second > y.second : x.first < y.first;
                      });
    ranked.resize(keep);
    return ranked;
  }

 private:
  static std::vector<std::string> features(const Tokens& tokens) {
    std::vector<std::string> out(tokens.begin(), tokens.end());
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) out.push_back(tokens[i] + '\x1f' + tokens[i + 1]);
    return out;
  }

  std::uint32_t intern(const std::string& f) {
    auto [it, _] = feature_ids_.emplace(f, static_cast<std::uint32_t>(feature_ids_.size()));
    return it->second;
  }

  std::vector<Tokens> titles_;
  std::vector<std::vector<DocId>> sentences_;
  std::unordered_map<std::string, std::uint32_t> feature_ids_;
  std::vector<double> idf_;
  std::vector<std::vector<std::pair<std::size_t, double>>> postings_;
  std::vector<double> norms_;
};

inline std::vector<std::size_t> rank_articles(const Tokens& question, const ArticleIndex& index,
                                              std::size_t k) {
  std::vector<std::size_t> out;
  for (const auto& [a, _] : index.rank(question, k)) out.push_back(a);
  return out;
}

// ---------------------------------------------------------------------------
// Sentence ranking: BM25 with the article title as a weighted extra field

/// Scores candidate sentences against the question and keeps the top `limit`
/// (ties by ascending id). Each candidate is scored as a virtual document
/// whose term frequencies are sentence counts plus title_weight times title
/// counts; IDF is computed over the candidate pool.
inline std::vector<std::pair<DocId, double>> rank_sentences(const Tokens& question,
                                                            std::span<const DocId> candidates,
                                                            const Corpus& corpus, std::size_t limit,
                                                            double k1, double b, double title_weight) {
  if (candidates.empty() || limit == 0) return {};
  std::vector<std::map<std::string, double>> tf(candidates.size());
  std::vector<double> length(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& doc = corpus.documents.at(candidates[i]);
    for (const auto& t : doc.tokens) tf[i][t] += 1.0;
    if (title_weight > 0.0) {
      for (const auto& t : doc.title) tf[i][t] += title_weight;
    }
    length[i] = static_cast<double>(doc.tokens.size()) + title_weight * static_cast<double>(doc.title.size());
  }
  const double n = static_cast<double>(candidates.size());
  const double avg_length = std::accumulate(length.begin(), length.end(), 0.0) / n;
  const std::set<std::string> terms(question.begin(), question.end());
  std::vector<std::pair<DocId, double>> scored;
  for (std::size_t i = 0; i < candidates.size(); ++i) scored.emplace_back(candidates[i], 0.0);
  for (const auto& term : terms) {
    double df = 0.0;
    for (const auto& m : tf) df += m.count(term) ? 1.0 : 0.0;
    if (df == 0.0) continue;
    const double idf = std::log(1.0 + (n - df + 0.5) / (df + 0.5));
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      auto it = tf[i].find(term);
      if (it == tf[i].end()) continue;
      const double f = it->second;
      const double norm = k1 * (1.0 - b + b * length[i] / avg_length);
      scored[i].second += idf * f * (k1 + 1.0) / (f + norm);
    }
  }
  const std::size_t keep = std::min(limit, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(),
                    [](const auto& x, const auto& y) {
                      return x.second != y.second ? x.second > y.second : x.first < y.first;
                    });
  scored.resize(keep);
  return scored;
}

// ---------------------------------------------------------------------------
// Question subgraph

struct KbEdge {
  EntityId subject = 0;
  EntityId object = 0;
  RelationId relation = 0;

  auto operator<=>(const KbEdge&) const = default;
};

struct LinkEdge {
  EntityId entity = 0;
  DocId document = 0;
  std::uint32_t position = 0;

  auto operator<=>(const LinkEdge&) const = default;
};

struct QuestionSubgraph {
  QuestionId question = 0;
  std::vector<EntityId> entities;
  std::vector<double> entity_scores;
  std::vector<DocId> documents;
  std::vector<double> document_scores;
  std::vector<KbEdge> kb_edges;
  std::vector<LinkEdge> link_edges;
  std::vector<EntityId> seeds;
  RelationId linking_relation = 0;  // r_L; one past the last KB relation id
  MentionIndex mentions;            // restricted to link_edges

  std::size_t fact_count() const { return kb_edges.size(); }
  bool empty() const { return entities.empty(); }

  void rebuild_mentions() {
    mentions = {};
    for (const auto& l : link_edges) {
      mentions.positions_of[l.entity].emplace_back(l.document, l.position);
      mentions.entities_at[{l.document, l.position}].push_back(l.entity);
    }
    for (auto& [_, v] : mentions.positions_of) std::sort(v.begin(), v.end());
    for (auto& [_, v] : mentions.entities_at) std::sort(v.begin(), v.end());
  }

  /// Throws IntegrityError unless every structural invariant holds.
  void validate(const KnowledgeBase& kb) const {
    const std::set<EntityId> ents(entities.begin(), entities.end());
    const std::set<DocId> docs(documents.begin(), documents.end());
    if (ents.size() != entities.size()) throw IntegrityError("subgraph has duplicate entities");
    if (docs.size() != documents.size()) throw IntegrityError("subgraph has duplicate documents");
    if (entity_scores.size() != entities.size() || document_scores.size() != documents.size()) {
      throw IntegrityError("subgraph score lists do not match node lists");
    }
    if (linking_relation < kb.relation_count()) throw IntegrityError("r_L collides with a KB relation");
    for (auto s : seeds) {
      if (!ents.count(s)) throw IntegrityError("seed " + std::to_string(s) + " not retained");
    }
    for (const auto& e : kb_edges) {
      if (!ents.count(e.subject) || !ents.count(e.object)) throw IntegrityError("kb edge leaves subgraph");
      if (!std::binary_search(kb.triples.begin(), kb.triples.end(), Triple{e.subject, e.relation, e.object})) {
        throw IntegrityError("kb edge is not a KB triple");
      }
    }
    for (const auto& l : link_edges) {
      if (!docs.count(l.document)) throw IntegrityError("link edge references a dropped document");
      if (!ents.count(l.entity)) throw IntegrityError("link edge references a dropped entity");
    }
  }
};

/// Entity set = retained entities plus everything linked from retained
/// documents; KB edges = every indexed triple inside the entity set.
inline QuestionSubgraph assemble_subgraph(const KbIndex& kb, const EntityLinkSet& links,
                                          const std::vector<std::pair<EntityId, double>>& entities,
                                          const std::vector<std::pair<DocId, double>>& documents,
                                          std::span<const EntityId> seeds, QuestionId question = 0) {
  QuestionSubgraph g;
  g.question = question;
  g.linking_relation = static_cast<RelationId>(kb.relation_count());
  g.seeds.assign(seeds.begin(), seeds.end());
  std::sort(g.seeds.begin(), g.seeds.end());
  g.seeds.erase(std::unique(g.seeds.begin(), g.seeds.end()), g.seeds.end());

  std::set<EntityId> members;
  for (const auto& [e, s] : entities) {
    if (members.insert(e).second) {
      g.entities.push_back(e);
      g.entity_scores.push_back(s);
    }
  }
  std::set<EntityId> linked;
  for (const auto& [d, s] : documents) {
    g.documents.push_back(d);
    g.document_scores.push_back(s);
    for (const auto& l : links.in_document(d)) {
      g.link_edges.push_back({l.entity, l.document, l.position});
      if (!members.count(l.entity)) linked.insert(l.entity);
    }
  }
  for (auto e : linked) {
    members.insert(e);
    g.entities.push_back(e);
    g.entity_scores.push_back(0.0);
  }
  for (auto s : g.seeds) {
    if (members.insert(s).second) {
      g.entities.push_back(s);
      g.entity_scores.push_back(0.0);
    }
  }
  for (auto e : members) {
    if (e >= kb.entity_count()) continue;
    for (const auto& t : kb.out_edges(e)) {
      if (members.count(t.object)) g.kb_edges.push_back({t.subject, t.object, t.relation});
    }
  }
  g.rebuild_mentions();
  return g;
}

inline nlohmann::json subgraph_to_json(const QuestionSubgraph& g) {
  nlohmann::json j;
  j["question"] = g.question;
  j["linking_relation"] = g.linking_relation;
  j["entities"] = nlohmann::json::array();
  for (std::size_t i = 0; i < g.entities.size(); ++i) j["entities"].push_back({g.entities[i], g.entity_scores[i]});
  j["documents"] = nlohmann::json::array();
  for (std::size_t i = 0; i < g.documents.size(); ++i) {
    j["documents"].push_back({g.documents[i], g.document_scores[i]});
  }
  j["kb_edges"] = nlohmann::json::array();
  for (const auto& e : g.kb_edges) j["kb_edges"].push_back({e.subject, e.object, e.relation});
  j["link_edges"] = nlohmann::json::array();
  for (const auto& l : g.link_edges) j["link_edges"].push_back({l.entity, l.document, l.position});
  j["seeds"] = g.seeds;
  return j;
}

inline QuestionSubgraph subgraph_from_json(const nlohmann::json& j) {
  QuestionSubgraph g;
  g.question = j.at("question").get<QuestionId>();
  g.linking_relation = j.at("linking_relation").get<RelationId>();
  for (const auto& e : j.at("entities")) {
    g.entities.push_back(e.at(0).get<EntityId>());
    g.entity_scores.push_back(e.at(1).get<double>());
  }
  for (const auto& d : j.at("documents")) {
    g.documents.push_back(d.at(0).get<DocId>());
    g.document_scores.push_back(d.at(1).get<double>());
  }
  for (const auto& e : j.at("kb_edges")) {
    g.kb_edges.push_back({e.at(0).get<EntityId>(), e.at(1).get<EntityId>(), e.at(2).get<RelationId>()});
  }
  for (const auto& l : j.at("link_edges")) {
    g.link_edges.push_back({l.at(0).get<EntityId>(), l.at(1).get<DocId>(), l.at(2).get<std::uint32_t>()});
  }
  g.seeds = j.at("seeds").get<std::vector<EntityId>>();
  g.rebuild_mentions();
  return g;
}

// ---------------------------------------------------------------------------
// Full retrieval for one question

/// Holds the read-only indexes over one (possibly downsampled) KB and corpus.
class Retriever {
 public:
  Retriever(const KnowledgeBase& kb, const Corpus& corpus, const EntityLinkSet& links,
            WordVectorTable vectors, RetrievalConfig config)
      : kb_(&kb),
        corpus_(&corpus),
        links_(&links),
        vectors_(std::move(vectors)),
        config_(config),
        kb_index_(kb),
        no_kb_index_(KnowledgeBase{kb.entity_names, kb.relation_surfaces, {}}),
        articles_(corpus) {
    config_.validate();
  }

  const RetrievalConfig& config() const { return config_; }

  QuestionSubgraph retrieve(const QuestionRecord& question) const {
    QuestionSubgraph g;
    g.question = question.id;
    g.linking_relation = static_cast<RelationId>(kb_->relation_count());
    if (question.seeds.empty()) return g;  // unlinked: nothing to anchor retrieval

    std::vector<std::pair<EntityId, double>> entities;
    if (config_.use_kb) {
      std::vector<double> weights(kb_->relation_count());
      for (RelationId r = 0; r < weights.size(); ++r) {
        weights[r] = question_edge_weight(kb_->relation_surfaces[r], question.tokens, vectors_);
      }
      const auto scores = personalized_pagerank(kb_index_, question.seeds, weights, config_);
      const std::size_t limit = std::max(config_.max_entities, question.seeds.size());
      for (auto e : retrieve_kb_entities(scores, question.seeds, limit)) entities.emplace_back(e, scores[e]);
    } else {
      std::set<EntityId> seeds(question.seeds.begin(), question.seeds.end());
      for (auto s : seeds) entities.emplace_back(s, 1.0 / static_cast<double>(seeds.size()));
    }

    std::vector<std::pair<DocId, double>> documents;
    if (config_.use_text && config_.max_documents > 0 && articles_.article_count() > 0) {
      std::vector<DocId> candidates;
      for (auto a : rank_articles(question.tokens, articles_, config_.articles_top_k)) {
        const auto& s = articles_.sentences(a);
        candidates.insert(candidates.end(), s.begin(), s.end());
      }
      std::sort(candidates.begin(), candidates.end());
      documents = rank_sentences(question.tokens, candidates, *corpus_, config_.max_documents,
                                 config_.bm25_k1, config_.bm25_b, config_.title_weight);
    }
    return assemble_subgraph(config_.use_kb ? kb_index_ : no_kb_index_, *links_, entities, documents,
                             question.seeds, question.id);
  }

 private:
  const KnowledgeBase* kb_;
  const Corpus* corpus_;
  const EntityLinkSet* links_;
  WordVectorTable vectors_;
  RetrievalConfig config_;
  KbIndex kb_index_;
  KbIndex no_kb_index_;
  ArticleIndex articles_;
};

}  // namespace graftnet
