#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "graftnet/errors.hpp"
#include "graftnet/rng.hpp"

namespace graftnet {

using EntityId = std::uint32_t;
using RelationId = std::uint32_t;
using DocId = std::uint32_t;
using QuestionId = std::uint32_t;
using TokenId = std::uint32_t;
using Tokens = std::vector<std::string>;

struct Triple {
  EntityId subject = 0;
  RelationId relation = 0;
  EntityId object = 0;

  auto operator<=>(const Triple&) const = default;
};

/// Entities, relations and the (subject, relation, object) facts over them.
struct KnowledgeBase {
  std::vector<std::string> entity_names;
  std::vector<Tokens> relation_surfaces;
  std::vector<Triple> triples;  // sorted, unique

  std::size_t entity_count() const { return entity_names.size(); }
  std::size_t relation_count() const { return relation_surfaces.size(); }

  void validate() const {
    for (std::size_t r = 0; r < relation_surfaces.size(); ++r) {
      if (relation_surfaces[r].empty()) {
        throw IntegrityError("relation " + std::to_string(r) + " has an empty surface form");
      }
    }
    for (std::size_t i = 0; i < triples.size(); ++i) {
      const auto& t = triples[i];
      if (t.subject >= entity_count() || t.object >= entity_count() ||
          t.relation >= relation_count()) {
        throw IntegrityError("triple " + std::to_string(i) + " references an unknown id");
      }
      if (i > 0 && !(triples[i - 1] < t)) {
        throw IntegrityError("triples must be sorted and unique (index " + std::to_string(i) + ")");
      }
    }
  }
};

struct Document {
  Tokens title;
  Tokens tokens;

  bool operator==(const Document&) const = default;
};

/// Token string to dense id. Id 0 is reserved for unknown tokens.
class Vocabulary {
 public:
  static constexpr TokenId kUnknown = 0;

  Vocabulary() : tokens_{"<unk>"} {}

  TokenId add(const std::string& token) {
    auto [it, inserted] = ids_.emplace(token, static_cast<TokenId>(tokens_.size()));
    if (inserted) tokens_.push_back(token);
    return it->second;
  }

  bool contains(const std::string& token) const { return ids_.count(token) > 0; }

  TokenId id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnknown : it->second;
  }

  std::vector<TokenId> ids(const Tokens& tokens) const {
    std::vector<TokenId> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

  const std::string& token(TokenId id) const { return tokens_.at(id); }
  std::size_t size() const { return tokens_.size(); }

  /// Vocabulary over a token collection, ids assigned in sorted token order.
  template <class Range>
  static Vocabulary sorted_from(const Range& token_lists) {
    std::set<std::string> all;
    for (const auto& list : token_lists) all.insert(list.begin(), list.end());
    Vocabulary v;
    for (const auto& t : all) v.add(t);
    return v;
  }

 private:
  std::unordered_map<std::string, TokenId> ids_;
  std::vector<std::string> tokens_;
};

struct Corpus {
  std::vector<Document> documents;  // index is the document id
  Vocabulary vocabulary;

  void rebuild_vocabulary() {
    std::vector<Tokens> lists;
    for (const auto& d : documents) {
      lists.push_back(d.title);
      lists.push_back(d.tokens);
    }
    vocabulary = Vocabulary::sorted_from(lists);
  }

  void validate() const {
    for (std::size_t i = 0; i < documents.size(); ++i) {
      if (documents[i].tokens.empty()) {
        throw IntegrityError("document " + std::to_string(i) + " is empty");
      }
      for (const auto& t : documents[i].tokens) {
        if (!vocabulary.contains(t)) throw IntegrityError("token '" + t + "' not in vocabulary");
      }
    }
  }
};

struct EntityLink {
  EntityId entity = 0;
  DocId document = 0;
  std::uint32_t position = 0;

  auto operator<=>(const EntityLink&) const = default;
};

using TextPosition = std::pair<DocId, std::uint32_t>;

/// One link per (entity, document, word position); multi-word mentions are
/// expanded to every covered position.
class EntityLinkSet {
 public:
  EntityLinkSet() = default;
  explicit EntityLinkSet(std::vector<EntityLink> links) : links_(std::move(links)) {
    std::sort(links_.begin(), links_.end(), [](const EntityLink& a, const EntityLink& b) {
      return std::tie(a.document, a.position, a.entity) < std::tie(b.document, b.position, b.entity);
    });
    links_.erase(std::unique(links_.begin(), links_.end()), links_.end());
    for (std::size_t i = 0; i < links_.size(); ++i) {
      by_document_[links_[i].document].push_back(i);
      by_entity_[links_[i].entity].push_back(i);
    }
  }

  const std::vector<EntityLink>& links() const { return links_; }
  std::size_t size() const { return links_.size(); }

  /// Links inside one document (L_d), ordered by position.
  std::vector<EntityLink> in_document(DocId doc) const { return select(by_document_, doc); }
  std::vector<EntityLink> of_entity(EntityId entity) const { return select(by_entity_, entity); }

  void validate(const KnowledgeBase& kb, const Corpus& corpus) const {
    for (const auto& l : links_) {
      if (l.entity >= kb.entity_count()) {
        throw IntegrityError("link references unknown entity " + std::to_string(l.entity));
      }
      if (l.document >= corpus.documents.size()) {
        throw IntegrityError("link references unknown document " + std::to_string(l.document));
      }
      if (l.position >= corpus.documents[l.document].tokens.size()) {
        throw IntegrityError("link position " + std::to_string(l.position) + " beyond document " +
                             std::to_string(l.document) + " of length " +
                             std::to_string(corpus.documents[l.document].tokens.size()));
      }
    }
  }

 private:
  template <class Key>
  std::vector<EntityLink> select(const std::map<Key, std::vector<std::size_t>>& index, Key k) const {
    std::vector<EntityLink> out;
    if (auto it = index.find(k); it != index.end()) {
      for (auto i : it->second) out.push_back(links_[i]);
    }
    return out;
  }

  std::vector<EntityLink> links_;
  std::map<DocId, std::vector<std::size_t>> by_document_;
  std::map<EntityId, std::vector<std::size_t>> by_entity_;
};

struct QuestionRecord {
  QuestionId id = 0;
  Tokens tokens;
  std::vector<EntityId> seeds;
  std::vector<EntityId> answers;

  bool operator==(const QuestionRecord&) const = default;
};

struct Dataset {
  KnowledgeBase kb;
  Corpus corpus;
  EntityLinkSet links;
  std::vector<QuestionRecord> questions;

  /// Everything the model may embed: corpus, questions and relation surfaces.
  Vocabulary model_vocabulary() const {
    std::vector<Tokens> lists;
    for (const auto& d : corpus.documents) lists.push_back(d.tokens);
    for (const auto& q : questions) lists.push_back(q.tokens);
    for (const auto& r : kb.relation_surfaces) lists.push_back(r);
    return Vocabulary::sorted_from(lists);
  }
};

struct DatasetPaths {
  std::filesystem::path triples;
  std::filesystem::path entities;
  std::filesystem::path relations;
  std::filesystem::path corpus;
  std::filesystem::path questions;

  static DatasetPaths in(const std::filesystem::path& dir) {
    return {dir / "kb.jsonl", dir / "entities.tsv", dir / "relations.tsv", dir / "corpus.jsonl",
            dir / "questions.jsonl"};
  }
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("cannot open " + path.string());
  return in;
}

// Calls fn(json, line_number) for each nonblank line.
template <class F>
void for_each_jsonl(const std::filesystem::path& path, F&& fn) {
  auto in = open_input(path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string(), line_no, e.what());
    }
    try {
      fn(j, line_no);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string(), line_no, e.what());
    }
  }
}

// Reads "id<TAB>text" lines; ids must be exactly 0..n-1.
inline std::vector<std::string> read_id_table(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::map<std::uint64_t, std::string> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(path.string(), line_no, "expected id<TAB>text");
    std::uint64_t id = 0;
    try {
      std::size_t used = 0;
      id = std::stoull(line.substr(0, tab), &used);
      if (used != tab) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ParseError(path.string(), line_no, "bad id '" + line.substr(0, tab) + "'");
    }
    if (!rows.emplace(id, line.substr(tab + 1)).second) {
      throw ParseError(path.string(), line_no, "duplicate id " + std::to_string(id));
    }
  }
  std::vector<std::string> out;
  for (auto& [id, text] : rows) {
    if (id != out.size()) throw IntegrityError(path.string() + ": ids must be contiguous from 0");
    out.push_back(std::move(text));
  }
  return out;
}

inline Tokens whitespace_tokens(const std::string& text) {
  Tokens out;
  std::istringstream in(text);
  std::string t;
  while (in >> t) out.push_back(t);
  return out;
}

inline std::string join(const Tokens& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) out += (i ? " " : "") + tokens[i];
  return out;
}

}  // namespace detail

inline void validate_questions(const std::vector<QuestionRecord>& questions, const KnowledgeBase& kb) {
  for (const auto& q : questions) {
    for (auto e : q.seeds) {
      if (e >= kb.entity_count()) {
        throw IntegrityError("question " + std::to_string(q.id) + " seed " + std::to_string(e) +
                             " is not an entity");
      }
    }
    for (auto e : q.answers) {
      if (e >= kb.entity_count()) {
        throw IntegrityError("question " + std::to_string(q.id) + " answer " + std::to_string(e) +
                             " is not an entity");
      }
    }
  }
}

inline Dataset load_dataset(const DatasetPaths& paths) {
  Dataset ds;
  ds.kb.entity_names = detail::read_id_table(paths.entities);
  for (auto& text : detail::read_id_table(paths.relations)) {
    ds.kb.relation_surfaces.push_back(detail::whitespace_tokens(text));
  }

  std::set<Triple> triples;
  detail::for_each_jsonl(paths.triples, [&](const nlohmann::json& j, std::size_t line) {
    Triple t{j.at("s").get<EntityId>(), j.at("r").get<RelationId>(), j.at("o").get<EntityId>()};
    if (t.subject >= ds.kb.entity_count() || t.object >= ds.kb.entity_count() ||
        t.relation >= ds.kb.relation_count()) {
      throw IntegrityError(paths.triples.string() + ":" + std::to_string(line) +
                           ": triple references an unknown id");
    }
    if (!triples.insert(t).second) {
      throw ParseError(paths.triples.string(), line, "duplicate triple");
    }
  });
  ds.kb.triples.assign(triples.begin(), triples.end());
  ds.kb.validate();

  std::map<DocId, Document> docs;
  std::vector<EntityLink> links;
  detail::for_each_jsonl(paths.corpus, [&](const nlohmann::json& j, std::size_t line) {
    const auto id = j.at("id").get<DocId>();
    Document doc{j.at("title").get<Tokens>(), j.at("tokens").get<Tokens>()};
    if (doc.tokens.empty()) throw ParseError(paths.corpus.string(), line, "empty document");
    for (const auto& l : j.value("links", nlohmann::json::array())) {
      const auto entity = l.at("entity").get<EntityId>();
      const auto start = l.at("start").get<std::uint32_t>();
      const auto end = l.at("end").get<std::uint32_t>();
      if (entity >= ds.kb.entity_count()) {
        throw IntegrityError(paths.corpus.string() + ":" + std::to_string(line) +
                             ": link to unknown entity " + std::to_string(entity));
      }
      if (start >= end || end > doc.tokens.size()) {
        throw IntegrityError(paths.corpus.string() + ":" + std::to_string(line) + ": link span [" +
                             std::to_string(start) + "," + std::to_string(end) +
                             ") outside document of length " + std::to_string(doc.tokens.size()));
      }
      for (auto p = start; p < end; ++p) links.push_back({entity, id, p});
    }
    if (!docs.emplace(id, std::move(doc)).second) {
      throw ParseError(paths.corpus.string(), line, "duplicate document id " + std::to_string(id));
    }
  });
  for (auto& [id, doc] : docs) {
    if (id != ds.corpus.documents.size()) {
      throw IntegrityError(paths.corpus.string() + ": document ids must be contiguous from 0");
    }
    ds.corpus.documents.push_back(std::move(doc));
  }
  ds.corpus.rebuild_vocabulary();
  ds.links = EntityLinkSet(std::move(links));

  detail::for_each_jsonl(paths.questions, [&](const nlohmann::json& j, std::size_t) {
    ds.questions.push_back({j.at("id").get<QuestionId>(), j.at("tokens").get<Tokens>(),
                            j.at("seeds").get<std::vector<EntityId>>(),
                            j.at("answers").get<std::vector<EntityId>>()});
  });
  validate_questions(ds.questions, ds.kb);
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& dir) { return load_dataset(DatasetPaths::in(dir)); }

inline void save_dataset(const Dataset& ds, const DatasetPaths& paths) {
  auto open = [](const std::filesystem::path& p) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    return out;
  };
  {
    auto out = open(paths.entities);
    for (std::size_t i = 0; i < ds.kb.entity_names.size(); ++i) out << i << '\t' << ds.kb.entity_names[i] << '\n';
  }
  {
    auto out = open(paths.relations);
    for (std::size_t i = 0; i < ds.kb.relation_surfaces.size(); ++i) {
      out << i << '\t' << detail::join(ds.kb.relation_surfaces[i]) << '\n';
    }
  }
  {
    auto out = open(paths.triples);
    for (const auto& t : ds.kb.triples) {
      out << nlohmann::json{{"s", t.subject}, {"r", t.relation}, {"o", t.object}}.dump() << '\n';
    }
  }
  {
    auto out = open(paths.corpus);
    for (std::size_t d = 0; d < ds.corpus.documents.size(); ++d) {
      // Collapse consecutive positions of one entity back into spans.
      nlohmann::json spans = nlohmann::json::array();
      auto links = ds.links.in_document(static_cast<DocId>(d));
      std::sort(links.begin(), links.end(), [](const EntityLink& a, const EntityLink& b) {
        return std::tie(a.entity, a.position) < std::tie(b.entity, b.position);
      });
      for (std::size_t i = 0; i < links.size();) {
        std::size_t j = i + 1;
        while (j < links.size() && links[j].entity == links[i].entity &&
               links[j].position == links[j - 1].position + 1) {
          ++j;
        }
        spans.push_back({{"entity", links[i].entity},
                         {"start", links[i].position},
                         {"end", links[j - 1].position + 1}});
        i = j;
      }
      const auto& doc = ds.corpus.documents[d];
      out << nlohmann::json{{"id", d}, {"title", doc.title}, {"tokens", doc.tokens}, {"links", spans}}.dump()
          << '\n';
    }
  }
  {
    auto out = open(paths.questions);
    for (const auto& q : ds.questions) {
      out << nlohmann::json{{"id", q.id}, {"tokens", q.tokens}, {"seeds", q.seeds}, {"answers", q.answers}}.dump()
          << '\n';
    }
  }
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  save_dataset(ds, DatasetPaths::in(dir));
}

// ---------------------------------------------------------------------------
// Operations

/// Keeps exactly round(fraction * |triples|) triples, chosen uniformly without
/// replacement under seed. Vocabularies are untouched.
inline KnowledgeBase subsample_kb(const KnowledgeBase& kb, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw ContractViolation("subsample fraction must lie in [0,1]");
  }
  const auto total = kb.triples.size();
  const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(total)));
  std::vector<std::size_t> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = i;
  Rng rng(seed);
  // Partial Fisher-Yates: the first `keep` slots become a uniform sample.
  for (std::size_t i = 0; i < keep; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(total - i));
    std::swap(order[i], order[j]);
  }
  order.resize(keep);
  std::sort(order.begin(), order.end());
  KnowledgeBase out;
  out.entity_names = kb.entity_names;
  out.relation_surfaces = kb.relation_surfaces;
  out.triples.reserve(keep);
  for (auto i : order) out.triples.push_back(kb.triples[i]);
  return out;
}

/// M(v): positions mentioning v. Lpos(d,p): entities linked at a position.
struct MentionIndex {
  std::map<EntityId, std::vector<TextPosition>> positions_of;
  std::map<TextPosition, std::vector<EntityId>> entities_at;
};

inline MentionIndex mention_index(const EntityLinkSet& links) {
  MentionIndex index;
  for (const auto& l : links.links()) {
    index.positions_of[l.entity].emplace_back(l.document, l.position);
    index.entities_at[{l.document, l.position}].push_back(l.entity);
  }
  for (auto& [_, v] : index.positions_of) std::sort(v.begin(), v.end());
  for (auto& [_, v] : index.entities_at) std::sort(v.begin(), v.end());
  return index;
}

}  // namespace graftnet
