#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "graftnet/autodiff.hpp"
#include "graftnet/errors.hpp"
#include "graftnet/knowledge_store.hpp"
#include "graftnet/params.hpp"
#include "graftnet/retrieval.hpp"
#include "graftnet/rng.hpp"

namespace graftnet {

struct ModelConfig {
  std::size_t dim = 64;  // n
  std::size_t layers = 3;  // L
  double lambda = 0.5;
  bool heterogeneous = true;
  bool directed = true;
  bool attention = true;

  void validate() const {
    if (dim < 1) throw ConfigError("model.n must be at least 1");
    if (layers < 1) throw ConfigError("model.L must be at least 1");
    if (!(lambda > 0.0 && lambda < 1.0)) throw ConfigError("model.lambda must lie in (0,1)");
  }
};

/// Table sizes the parameters depend on. relations excludes r_L.
struct ModelShape {
  std::size_t vocabulary = 1;
  std::size_t entities = 1;
  std::size_t relations = 1;
};

// ---------------------------------------------------------------------------
// Prepared graph: local indices for one question subgraph

/// Index arrays over a QuestionSubgraph, in the layout the batched forward
/// pass consumes. Entity i is subgraph.entities[i]; document positions are
/// flattened across documents in subgraph order.
struct PreparedGraph {
  std::size_t entity_count = 0;
  std::vector<std::size_t> entity_rows;  // rows of entity_emb
  std::vector<std::size_t> seeds;        // local entity indices, sorted, unique

  // KB edges, sorted by (src, rel, dst).
  std::vector<std::size_t> edge_src, edge_dst, edge_rel, edge_group;
  // One group per distinct (src, rel) pair; attention is softmaxed over the
  // groups of each source node.
  std::vector<std::size_t> group_source, group_rel;
  std::vector<double> group_size;
  std::vector<double> uniform_alpha;  // 1 / (#types out of the group's source)
  std::size_t source_count = 0;

  std::vector<std::size_t> question_tokens;
  std::vector<std::size_t> doc_tokens;   // flat
  std::vector<std::size_t> doc_offsets;  // document d owns [doc_offsets[d], doc_offsets[d+1])
  std::vector<std::size_t> position_doc;

  std::vector<std::size_t> link_entity, link_position;  // position is flat
  std::vector<std::size_t> pair_entity, pair_doc;       // unique (entity, doc)
  std::vector<double> inv_outdeg;                       // 1 / max(1, KB out + link out)

  std::size_t edge_count() const { return edge_src.size(); }
  std::size_t document_count() const { return doc_offsets.empty() ? 0 : doc_offsets.size() - 1; }
  std::size_t position_count() const { return doc_tokens.size(); }
};

namespace detail {

inline void index_edges(PreparedGraph& g, const std::vector<std::array<std::size_t, 3>>& edges) {
  g.edge_src.clear();
  g.edge_dst.clear();
  g.edge_rel.clear();
  g.edge_group.clear();
  g.group_source.clear();
  g.group_rel.clear();
  g.group_size.clear();
  g.uniform_alpha.clear();
  g.source_count = 0;
  std::vector<std::size_t> compact(g.entity_count, SIZE_MAX);
  for (const auto& [s, r, o] : edges) {
    if (g.edge_src.empty() || g.edge_src.back() != s || g.edge_rel.back() != r) {
      if (compact[s] == SIZE_MAX) compact[s] = g.source_count++;
      g.group_source.push_back(compact[s]);
      g.group_rel.push_back(r);
      g.group_size.push_back(0.0);
    }
    g.edge_src.push_back(s);
    g.edge_rel.push_back(r);
    g.edge_dst.push_back(o);
    g.edge_group.push_back(g.group_rel.size() - 1);
    g.group_size.back() += 1.0;
  }
  std::vector<double> types(g.source_count, 0.0);
  for (auto src : g.group_source) types[src] += 1.0;
  for (auto src : g.group_source) g.uniform_alpha.push_back(1.0 / types[src]);

  std::vector<double> outdeg(g.entity_count, 0.0);
  for (auto s : g.edge_src) outdeg[s] += 1.0;
  for (auto e : g.link_entity) outdeg[e] += 1.0;
  g.inv_outdeg.resize(g.entity_count);
  for (std::size_t i = 0; i < g.entity_count; ++i) g.inv_outdeg[i] = 1.0 / std::max(1.0, outdeg[i]);
}

}  // namespace detail

/// Builds the index arrays. Throws ContractViolation when a seed is missing
/// from the subgraph.
inline PreparedGraph prepare_graph(const QuestionSubgraph& subgraph, const QuestionRecord& question,
                                   const Corpus& corpus, const Vocabulary& vocabulary) {
  PreparedGraph g;
  g.entity_count = subgraph.entities.size();
  std::map<EntityId, std::size_t> local;
  for (std::size_t i = 0; i < subgraph.entities.size(); ++i) {
    local[subgraph.entities[i]] = i;
    g.entity_rows.push_back(subgraph.entities[i]);
  }
  for (auto s : question.seeds) {
    auto it = local.find(s);
    if (it == local.end()) throw ContractViolation("seed " + std::to_string(s) + " not in subgraph");
    g.seeds.push_back(it->second);
  }
  std::sort(g.seeds.begin(), g.seeds.end());
  g.seeds.erase(std::unique(g.seeds.begin(), g.seeds.end()), g.seeds.end());

  for (const auto& t : question.tokens) g.question_tokens.push_back(vocabulary.id(t));

  std::map<DocId, std::size_t> doc_local;
  g.doc_offsets.push_back(0);
  for (std::size_t d = 0; d < subgraph.documents.size(); ++d) {
    doc_local[subgraph.documents[d]] = d;
    for (const auto& t : corpus.documents.at(subgraph.documents[d]).tokens) {
      g.doc_tokens.push_back(vocabulary.id(t));
      g.position_doc.push_back(d);
    }
    g.doc_offsets.push_back(g.doc_tokens.size());
  }
  if (subgraph.documents.empty()) g.doc_offsets.clear();

  std::set<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& l : subgraph.link_edges) {
    const auto d = doc_local.at(l.document);
    const auto e = local.at(l.entity);
    g.link_entity.push_back(e);
    g.link_position.push_back(g.doc_offsets[d] + l.position);
    pairs.emplace(e, d);
  }
  for (auto [e, d] : pairs) {
    g.pair_entity.push_back(e);
    g.pair_doc.push_back(d);
  }

  std::vector<std::array<std::size_t, 3>> edges;
  for (const auto& e : subgraph.kb_edges) edges.push_back({local.at(e.subject), e.relation, local.at(e.object)});
  std::sort(edges.begin(), edges.end());
  detail::index_edges(g, edges);
  return g;
}

/// Copy of g keeping only the KB edges whose keep flag is set. Link edges are
/// untouched; out-degrees follow the reduced edge set.
inline PreparedGraph drop_edges(const PreparedGraph& g, const std::vector<bool>& keep) {
  if (keep.size() != g.edge_count()) throw DimensionError("drop_edges: mask length mismatch");
  PreparedGraph out = g;
  std::vector<std::array<std::size_t, 3>> edges;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) edges.push_back({g.edge_src[i], g.edge_rel[i], g.edge_dst[i]});
  }
  detail::index_edges(out, edges);
  return out;
}

// ---------------------------------------------------------------------------
// Model

template <std::floating_point T>
struct NodeStates {
  ad::Value<T> entities;   // [N, n]
  ad::Value<T> documents;  // [P, n]; undefined without documents
  ad::Value<T> question;   // [n]
  ad::Value<T> pagerank;   // [N]; undefined when directed propagation is off
};

template <std::floating_point T>
struct ForwardResult {
  ad::Value<T> probabilities;  // [N]
  std::vector<NodeStates<T>> layers;  // index 0 is the initial state
};

template <std::floating_point T>
class GraftNet {
 public:
  using V = ad::Value<T>;

  /// Creates every parameter in a fixed order so initialization replays per seed.
  static void initialize(ParamStore<T>& store, const ModelConfig& config, const ModelShape& shape,
                         std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const std::size_t n = config.dim;
    auto uniform = [&](const std::string& name, ad::Shape s, double bound) {
      std::vector<T> data(ad::shape_size(s));
      for (auto& x : data) x = static_cast<T>(rng.uniform(-bound, bound));
      store.add(name, std::move(s), std::move(data));
    };
    auto dense = [&](const std::string& prefix, std::size_t out, std::size_t in) {
      uniform(prefix + ".w", {out, in}, std::sqrt(6.0 / static_cast<double>(in + out)));
      store.add(prefix + ".b", {out}, std::vector<T>(out, T(0)));
    };
    auto lstm = [&](const std::string& prefix) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(n));
      uniform(prefix + ".wx", {4 * n, n}, bound);
      uniform(prefix + ".wh", {4 * n, n}, bound);
      std::vector<T> bias(4 * n, T(0));
      std::fill(bias.begin() + static_cast<std::ptrdiff_t>(n), bias.begin() + static_cast<std::ptrdiff_t>(2 * n),
                T(1));  // forget gate
      store.add(prefix + ".b", {4 * n}, std::move(bias));
    };
    uniform("word_emb", {shape.vocabulary, n}, 0.1);
    uniform("entity_emb", {shape.entities, n}, 0.1);
    uniform("relation_emb", {shape.relations + 1, n}, 0.1);
    lstm("q_lstm");
    lstm("doc_lstm");
    for (std::size_t l = 1; l <= config.layers; ++l) {
      const auto p = "layer" + std::to_string(l);
      dense(p + ".entity", n, 4 * n);
      dense(p + ".edge", n, 2 * n);
      if (l < config.layers) {
        dense(p + ".doc_pos", n, 2 * n);
        lstm(p + ".doc_lstm");
        dense(p + ".question", n, n);
      }
    }
    dense("answer", 1, n);
  }

  GraftNet(const ParamStore<T>& store, ModelConfig config) : store_(&store), config_(config) {
    config_.validate();
    if (store.at("word_emb").shape()[1] != config_.dim) {
      throw ConfigError("parameter width does not match model.n");
    }
  }

  const ModelConfig& config() const { return config_; }

  // -------------------------------------------------------------------------
  // Stages

  NodeStates<T> init_states(const PreparedGraph& g) const {
    if (g.seeds.empty()) throw ContractViolation("init_states: question has no seed entities");
    if (g.question_tokens.empty()) throw ContractViolation("init_states: empty question");
    NodeStates<T> s;
    s.entities = ad::gather_rows(param("entity_emb"), g.entity_rows);
    if (g.document_count() > 0) {
      s.documents = ad::lstm_segments(ad::gather_rows(param("word_emb"), g.doc_tokens), g.doc_offsets,
                                      lstm("doc_lstm"));
    }
    auto q = ad::seq_encode(ad::gather_rows(param("word_emb"), g.question_tokens), lstm("q_lstm"));
    s.question = ad::reshape(ad::gather_rows(q, {g.question_tokens.size() - 1}), {config_.dim});
    if (config_.directed) {
      std::vector<T> pr(g.entity_count, T(0));
      for (auto seed : g.seeds) pr[seed] = T(1) / static_cast<T>(g.seeds.size());
      s.pagerank = V::constant({g.entity_count}, std::move(pr));
    }
    return s;
  }

  /// alpha per (source, relation) group, softmaxed over each source's groups.
  /// Undefined when the graph has no KB edges.
  V relation_attention(const V& question, const PreparedGraph& g) const {
    if (g.group_rel.empty()) return {};
    if (!config_.attention) {
      return V::constant({g.group_rel.size()}, std::vector<T>(g.uniform_alpha.begin(), g.uniform_alpha.end()));
    }
    auto rel = ad::gather_rows(param("relation_emb"), g.group_rel);
    auto scores = ad::reshape(ad::linear(rel, ad::reshape(question, {1, config_.dim})), {g.group_rel.size()});
    return ad::grouped_softmax(scores, g.group_source, g.source_count);
  }

  /// pr_v <- (1-lambda) pr_v + lambda * sum over in-edges (u,r,v) of
  /// alpha(u,r) / |edges of type r out of u| * pr_u.
  V propagate_pagerank(const V& pr, const V& alpha, const PreparedGraph& g) const {
    const T lambda = static_cast<T>(config_.lambda);
    auto kept = ad::scale(pr, T(1) - lambda);
    if (g.edge_count() == 0) return kept;
    auto flow = ad::mul(ad::gather_rows(alpha, g.edge_group), ad::gather_rows(pr, g.edge_src));
    std::vector<T> split(g.edge_count());
    for (std::size_t e = 0; e < split.size(); ++e) split[e] = T(1) / static_cast<T>(g.group_size[g.edge_group[e]]);
    auto incoming = ad::segment_sum(flow, g.edge_dst, g.entity_count, std::move(split));
    return ad::add(kept, ad::scale(incoming, lambda));
  }

  /// sum over KB in-edges (u, r, v) of alpha(u,r) * pr_u * FFN([x_r; h_u]), per entity.
  V neighbor_messages(const NodeStates<T>& prev, const V& alpha, const PreparedGraph& g, std::size_t layer) const {
    if (g.edge_count() == 0) return V::zeros({g.entity_count, config_.dim});
    auto in = ad::concat<T>({ad::gather_rows(param("relation_emb"), g.edge_rel),
                             ad::gather_rows(prev.entities, g.edge_src)});
    auto msg = ad::relu(ad::linear(in, param(layer_name(layer, "edge.w")), param(layer_name(layer, "edge.b"))));
    auto factor = ad::gather_rows(alpha, g.edge_group);
    if (config_.directed) factor = ad::mul(factor, ad::gather_rows(prev.pagerank, g.edge_src));
    return ad::segment_sum(ad::scale_rows(msg, factor), g.edge_dst, g.entity_count);
  }

  /// Document states flowing into each entity: the states at its mention
  /// positions, or in non-heterogeneous mode the pooled state of each
  /// document it appears in.
  V mention_states(const NodeStates<T>& prev, const PreparedGraph& g) const {
    if (g.link_entity.empty()) return V::zeros({g.entity_count, config_.dim});
    if (config_.heterogeneous) {
      return ad::segment_sum(ad::gather_rows(prev.documents, g.link_position), g.link_entity, g.entity_count);
    }
    auto pooled = ad::segment_sum(prev.documents, g.position_doc, g.document_count());
    return ad::segment_sum(ad::gather_rows(pooled, g.pair_doc), g.pair_entity, g.entity_count);
  }

  /// FFN over [h; h_q; neighbors; mentions].
  V combine_entities(const NodeStates<T>& prev, const V& neighbors, const V& mentions, std::size_t layer) const {
    const std::size_t n = config_.dim;
    const std::size_t count = prev.entities.rows();
    auto q = ad::gather_rows(ad::reshape(prev.question, {1, n}), std::vector<std::size_t>(count, 0));
    auto joined = ad::concat<T>({prev.entities, q, neighbors, mentions});
    return ad::relu(
        ad::linear(joined, param(layer_name(layer, "entity.w")), param(layer_name(layer, "entity.b"))));
  }

  /// New entity states; reads only layer l-1 states.
  V update_entities(const NodeStates<T>& prev, const V& alpha, const PreparedGraph& g, std::size_t layer) const {
    return combine_entities(prev, neighbor_messages(prev, alpha, g, layer), mention_states(prev, g), layer);
  }

  /// Entity states arriving at each document position, each divided by the
  /// entity's out-degree. Non-heterogeneous mode sends every position of a
  /// document the sum over all entities linked anywhere in it.
  V document_incoming(const NodeStates<T>& prev, const PreparedGraph& g) const {
    const std::size_t positions = g.position_count();
    if (g.link_entity.empty()) return V::zeros({positions, config_.dim});
    std::vector<T> norm(g.inv_outdeg.begin(), g.inv_outdeg.end());
    auto scaled = ad::scale_rows(prev.entities, V::constant({g.entity_count}, std::move(norm)));
    if (config_.heterogeneous) {
      return ad::segment_sum(ad::gather_rows(scaled, g.link_entity), g.link_position, positions);
    }
    auto per_doc = ad::segment_sum(ad::gather_rows(scaled, g.pair_entity), g.pair_doc, g.document_count());
    return ad::gather_rows(per_doc, g.position_doc);
  }

  /// Position-wise FFN over [H; incoming entity states], then an LSTM per document.
  V update_documents(const NodeStates<T>& prev, const PreparedGraph& g, std::size_t layer) const {
    auto mixed = ad::relu(ad::linear(ad::concat<T>({prev.documents, document_incoming(prev, g)}),
                                     param(layer_name(layer, "doc_pos.w")), param(layer_name(layer, "doc_pos.b"))));
    return ad::lstm_segments(mixed, g.doc_offsets, lstm(layer_name(layer, "doc_lstm")));
  }

  /// FFN over the sum of the (fresh) seed entity states.
  V update_question(const V& entities, const PreparedGraph& g, std::size_t layer) const {
    auto seeds = ad::segment_sum(ad::gather_rows(entities, g.seeds), std::vector<std::size_t>(g.seeds.size(), 0), 1);
    return ad::relu(ad::linear(ad::reshape(seeds, {config_.dim}), param(layer_name(layer, "question.w")),
                               param(layer_name(layer, "question.b"))));
  }

  ForwardResult<T> forward(const PreparedGraph& g) const {
    ForwardResult<T> out;
    out.layers.push_back(init_states(g));
    for (std::size_t l = 1; l <= config_.layers; ++l) {
      const auto& prev = out.layers.back();
      NodeStates<T> next;
      auto alpha = relation_attention(prev.question, g);
      if (config_.directed) next.pagerank = propagate_pagerank(prev.pagerank, alpha, g);
      next.entities = update_entities(prev, alpha, g, l);
      // Final-layer document and question states would never be read.
      if (l < config_.layers) {
        if (g.document_count() > 0) next.documents = update_documents(prev, g, l);
        next.question = update_question(next.entities, g, l);
      }
      out.layers.push_back(std::move(next));
    }
    auto logits = ad::linear(out.layers.back().entities, param("answer.w"), param("answer.b"));
    out.probabilities = ad::sigmoid(ad::reshape(logits, {g.entity_count}));
    return out;
  }

 private:
  static std::string layer_name(std::size_t layer, const std::string& leaf) {
    return "layer" + std::to_string(layer) + "." + leaf;
  }

  const V& param(const std::string& name) const { return store_->at(name); }

  ad::LstmWeights<T> lstm(const std::string& prefix) const {
    return {param(prefix + ".wx"), param(prefix + ".wh"), param(prefix + ".b")};
  }

  const ParamStore<T>* store_;
  ModelConfig config_;
};

}  // namespace graftnet
