#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "graftnet/errors.hpp"
#include "graftnet/knowledge_store.hpp"
#include "graftnet/model.hpp"
#include "graftnet/params.hpp"
#include "graftnet/retrieval.hpp"
#include "graftnet/rng.hpp"
#include "graftnet/synthgen.hpp"
#include "graftnet/trainer.hpp"

namespace graftnet {

using Real = double;

enum class Mode { kb, text, early };

inline Mode parse_mode(const std::string& s) {
  if (s == "kb") return Mode::kb;
  if (s == "text") return Mode::text;
  if (s == "early") return Mode::early;
  throw ConfigError("run.mode: expected kb, text or early, got '" + s + "'");
}

inline std::string mode_name(Mode m) {
  switch (m) {
    case Mode::kb: return "kb";
    case Mode::text: return "text";
    case Mode::early: return "early";
  }
  return "?";
}

/// Every tunable of a run, addressable as section.key strings.
struct RunConfig {
  WorldSpec world;
  RetrievalConfig retrieval;
  ModelConfig model;
  TrainerConfig trainer;
  EvalConfig eval;
  std::uint64_t seed = 0;
  double kb_fraction = 1.0;
  std::string mode = "early";
  std::string world_dir = "world";
  std::string out_dir = "run";
  std::string word_vectors;  // empty: indicator similarity
  std::string kb_run = "run_kb";
  std::string text_run = "run_text";
  std::vector<double> ablate_p0{0.0};
  std::vector<double> ablate_kb_fraction{1.0};
  std::vector<std::string> ablate_variants{"full"};

  void set(const std::string& key, const std::string& value);
  std::map<std::string, std::string> values() const;

  /// Reads "key = value" lines; '#' starts a comment.
  void merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DependencyError("cannot open config file " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        const auto b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError(path.string(), line_no, "expected key = value");
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  void validate() const {
    world.validate();
    retrieval.validate();
    model.validate();
    trainer.validate();
    eval.validate();
    if (!(kb_fraction >= 0.0 && kb_fraction <= 1.0)) throw ConfigError("run.kb_fraction must lie in [0,1]");
    parse_mode(mode);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    for (const auto& [k, v] : values()) j[k] = v;
    return j;
  }
};

namespace detail {

template <class N>
N parse_number(const std::string& key, const std::string& value) {
  N out{};
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": cannot parse '" + value + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

inline std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream in(value);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Shortest text that parses back to the same double.
inline std::string format_number(double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

struct ConfigKey {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class N, class F>
ConfigKey number_key(F field) {
  return {[field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_number<N>(k, v); },
          [field](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<N>) {
              return format_number(field(c));
            } else {
              return std::to_string(field(c));
            }
          }};
}

template <class F>
ConfigKey bool_key(F field) {
  return {[field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_bool(k, v); },
          [field](const RunConfig& c) { return std::string(field(c) ? "true" : "false"); }};
}

template <class F>
ConfigKey string_key(F field) {
  return {[field](RunConfig& c, const std::string&, const std::string& v) { field(c) = v; },
          [field](const RunConfig& c) { return field(c); }};
}

inline const std::map<std::string, ConfigKey>& config_keys() {
  using S = std::size_t;
  static const std::map<std::string, ConfigKey> keys{
      {"world.entities", number_key<S>([](auto& c) -> auto& { return c.world.num_entities; })},
      {"world.relations", number_key<S>([](auto& c) -> auto& { return c.world.num_relations; })},
      {"world.triples_per_relation", number_key<S>([](auto& c) -> auto& { return c.world.triples_per_relation; })},
      {"world.text_coverage", number_key<double>([](auto& c) -> auto& { return c.world.text_coverage; })},
      {"world.one_hop", number_key<S>([](auto& c) -> auto& { return c.world.one_hop_questions; })},
      {"world.two_hop", number_key<S>([](auto& c) -> auto& { return c.world.two_hop_questions; })},
      {"retrieval.E", number_key<S>([](auto& c) -> auto& { return c.retrieval.max_entities; })},
      {"retrieval.D", number_key<S>([](auto& c) -> auto& { return c.retrieval.max_documents; })},
      {"retrieval.articles", number_key<S>([](auto& c) -> auto& { return c.retrieval.articles_top_k; })},
      {"retrieval.restart", number_key<double>([](auto& c) -> auto& { return c.retrieval.restart_probability; })},
      {"retrieval.tolerance", number_key<double>([](auto& c) -> auto& { return c.retrieval.ppr_tolerance; })},
      {"retrieval.max_iters", number_key<S>([](auto& c) -> auto& { return c.retrieval.ppr_max_iters; })},
      {"retrieval.k1", number_key<double>([](auto& c) -> auto& { return c.retrieval.bm25_k1; })},
      {"retrieval.b", number_key<double>([](auto& c) -> auto& { return c.retrieval.bm25_b; })},
      {"retrieval.title_weight", number_key<double>([](auto& c) -> auto& { return c.retrieval.title_weight; })},
      {"model.n", number_key<S>([](auto& c) -> auto& { return c.model.dim; })},
      {"model.L", number_key<S>([](auto& c) -> auto& { return c.model.layers; })},
      {"model.lambda", number_key<double>([](auto& c) -> auto& { return c.model.lambda; })},
      {"model.heterogeneous", bool_key([](auto& c) -> auto& { return c.model.heterogeneous; })},
      {"model.directed", bool_key([](auto& c) -> auto& { return c.model.directed; })},
      {"model.attention", bool_key([](auto& c) -> auto& { return c.model.attention; })},
      {"trainer.B", number_key<S>([](auto& c) -> auto& { return c.trainer.batch_size; })},
      {"trainer.epochs", number_key<S>([](auto& c) -> auto& { return c.trainer.epochs; })},
      {"trainer.lr", number_key<double>([](auto& c) -> auto& { return c.trainer.learning_rate; })},
      {"trainer.p0", number_key<double>([](auto& c) -> auto& { return c.trainer.p0; })},
      {"trainer.patience", number_key<S>([](auto& c) -> auto& { return c.trainer.patience; })},
      {"eval.theta", number_key<double>([](auto& c) -> auto& { return c.eval.theta; })},
      {"run.seed", number_key<std::uint64_t>([](auto& c) -> auto& { return c.seed; })},
      {"run.kb_fraction", number_key<double>([](auto& c) -> auto& { return c.kb_fraction; })},
      {"run.mode", string_key([](auto& c) -> auto& { return c.mode; })},
      {"paths.world", string_key([](auto& c) -> auto& { return c.world_dir; })},
      {"paths.out", string_key([](auto& c) -> auto& { return c.out_dir; })},
      {"paths.vectors", string_key([](auto& c) -> auto& { return c.word_vectors; })},
      {"paths.kb_run", string_key([](auto& c) -> auto& { return c.kb_run; })},
      {"paths.text_run", string_key([](auto& c) -> auto& { return c.text_run; })},
      {"ablate.p0",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          c.ablate_p0.clear();
          for (const auto& x : split_list(v)) c.ablate_p0.push_back(parse_number<double>(k, x));
        },
        [](const RunConfig& c) {
          std::string s;
          for (auto x : c.ablate_p0) s += (s.empty() ? "" : ",") + format_number(x);
          return s;
        }}},
      {"ablate.kb_fraction",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          c.ablate_kb_fraction.clear();
          for (const auto& x : split_list(v)) c.ablate_kb_fraction.push_back(parse_number<double>(k, x));
        },
        [](const RunConfig& c) {
          std::string s;
          for (auto x : c.ablate_kb_fraction) s += (s.empty() ? "" : ",") + format_number(x);
          return s;
        }}},
      {"ablate.variants",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.ablate_variants = split_list(v); },
        [](const RunConfig& c) {
          std::string s;
          for (const auto& x : c.ablate_variants) s += (s.empty() ? "" : ",") + x;
          return s;
        }}},
  };
  return keys;
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& keys = detail::config_keys();
  auto it = keys.find(key);
  if (it == keys.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(*this, key, value);
}

/// Writes every key in the file format merge_file reads.
inline void write_config(const RunConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DependencyError("cannot write " + path.string());
  for (const auto& [k, v] : config.values()) out << k << " = " << v << '\n';
}

inline std::map<std::string, std::string> RunConfig::values() const {
  std::map<std::string, std::string> out;
  for (const auto& [k, entry] : detail::config_keys()) out[k] = entry.get(*this);
  return out;
}

/// Applies a named ablation variant: full, nh (non-heterogeneous),
/// undirected, or noatt.
inline ModelConfig apply_variant(ModelConfig m, const std::string& variant) {
  if (variant == "full") return m;
  if (variant == "nh") {
    m.heterogeneous = false;
  } else if (variant == "undirected") {
    m.directed = false;
  } else if (variant == "noatt") {
    m.attention = false;
  } else {
    throw ConfigError("ablate.variants: unknown variant '" + variant + "'");
  }
  return m;
}

// ---------------------------------------------------------------------------
// Runs

/// A generated world as read back from disk.
struct LoadedWorld {
  Dataset data;
  Splits splits;
};

inline LoadedWorld load_world(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DependencyError("world directory " + dir.string() + " not found");
  return {load_dataset(dir), load_splits(dir)};
}

/// Entities whose full name occurs as a contiguous token run in the question.
inline std::vector<EntityId> link_question_entities(const KnowledgeBase& kb, const Tokens& question) {
  std::vector<EntityId> out;
  for (EntityId e = 0; e < kb.entity_count(); ++e) {
    const auto name = detail::whitespace_tokens(kb.entity_names[e]);
    if (name.empty() || name.size() > question.size()) continue;
    for (std::size_t i = 0; i + name.size() <= question.size(); ++i) {
      if (std::equal(name.begin(), name.end(), question.begin() + static_cast<std::ptrdiff_t>(i))) {
        out.push_back(e);
        break;
      }
    }
  }
  return out;
}

struct SplitExamples {
  std::vector<LabeledExample> train, dev, test;
};

/// Retrieval and labeling over a (possibly downsampled) KB for one mode.
struct PreparedData {
  KnowledgeBase kb;  // the KB the model sees
  Vocabulary vocabulary;
  ModelShape shape;
  SplitExamples examples;
};

inline std::vector<QuestionSubgraph> retrieve_all(const Dataset& ds, const KnowledgeBase& kb,
                                                  const RetrievalConfig& config, const WordVectorTable& vectors) {
  Retriever retriever(kb, ds.corpus, ds.links, vectors, config);
  std::vector<QuestionSubgraph> out;
  out.reserve(ds.questions.size());
  for (const auto& q : ds.questions) out.push_back(retriever.retrieve(q));
  return out;
}

inline RetrievalConfig retrieval_for(RetrievalConfig r, Mode mode) {
  r.use_kb = mode != Mode::text;
  r.use_text = mode != Mode::kb;
  return r;
}

inline WordVectorTable load_vectors(const RunConfig& config) {
  return config.word_vectors.empty() ? WordVectorTable{} : WordVectorTable::load(config.word_vectors);
}

/// The KB a run's model sees: the full KB or its seeded subsample.
inline KnowledgeBase training_kb(const KnowledgeBase& kb, const RunConfig& config) {
  return config.kb_fraction >= 1.0 ? kb : subsample_kb(kb, config.kb_fraction, stage_seed(config.seed, "kb.subsample"));
}

inline PreparedData prepare_data(const Dataset& ds, const Splits& splits, const RunConfig& config, Mode mode) {
  PreparedData p;
  p.kb = training_kb(ds.kb, config);
  p.vocabulary = ds.model_vocabulary();
  p.shape = {p.vocabulary.size(), ds.kb.entity_count(), ds.kb.relation_count()};
  const auto subgraphs = retrieve_all(ds, p.kb, retrieval_for(config.retrieval, mode), load_vectors(config));
  for (std::size_t i = 0; i < ds.questions.size(); ++i) {
    const auto id = ds.questions[i].id;
    auto ex = make_example(ds.questions[i], subgraphs[i], ds.corpus, p.vocabulary);
    if (id >= splits.train.first && id < splits.train.second) {
      p.examples.train.push_back(std::move(ex));
    } else if (id >= splits.dev.first && id < splits.dev.second) {
      p.examples.dev.push_back(std::move(ex));
    } else if (id >= splits.test.first && id < splits.test.second) {
      p.examples.test.push_back(std::move(ex));
    }
  }
  return p;
}

struct ExperimentResult {
  ParamStore<Real> params;
  TrainHistory history;
  double theta = 0.5;
  Metrics dev, test;
  double test_recall = 0.0;
  std::vector<EntityScores> dev_scores, test_scores;
};

inline ParamStore<Real> initial_params(const RunConfig& config, const ModelShape& shape) {
  ParamStore<Real> store;
  GraftNet<Real>::initialize(store, config.model, shape, stage_seed(config.seed, "model.init"));
  return store;
}

inline TrainerConfig trainer_for(const RunConfig& config) {
  auto t = config.trainer;
  t.seed = stage_seed(config.seed, "trainer");
  return t;
}

/// Scores dev and test with trained parameters; theta is tuned on dev.
inline void score_splits(ExperimentResult& r, const ModelConfig& model, const SplitExamples& ex) {
  r.dev_scores = predict(r.params, model, ex.dev);
  r.test_scores = predict(r.params, model, ex.test);
  const auto dev_q = questions_of(ex.dev);
  r.theta = ex.dev.empty() ? 0.5 : tune_threshold(dev_q, r.dev_scores, default_theta_grid());
  r.dev = score_questions(dev_q, r.dev_scores, r.theta);
  r.test = score_questions(questions_of(ex.test), r.test_scores, r.theta);
  r.test_recall = answer_recall(ex.test);
}

inline ExperimentResult run_experiment(const PreparedData& data, const RunConfig& config,
                                       const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  config.validate();
  ExperimentResult r;
  r.params = initial_params(config, data.shape);
  r.history = train(r.params, config.model, trainer_for(config), data.examples.train, data.examples.dev, on_epoch);
  score_splits(r, config.model, data.examples);
  return r;
}

inline ExperimentResult run_experiment(const Dataset& ds, const Splits& splits, const RunConfig& config, Mode mode,
                                       const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  return run_experiment(prepare_data(ds, splits, config, mode), config, on_epoch);
}

struct FusionResult {
  double beta = 0.5;
  double theta = 0.5;
  Metrics dev, test;
};

/// Late fusion of separately scored KB-only and text-only runs over the same
/// questions. beta is tuned on dev Hits@1, then theta on fused dev F1.
inline FusionResult fuse_runs(const std::vector<QuestionRecord>& dev_q, const std::vector<QuestionRecord>& test_q,
                              const ExperimentResult& kb, const ExperimentResult& text) {
  FusionResult f;
  f.beta = tune_beta(dev_q, kb.dev_scores, text.dev_scores, default_beta_grid());
  const auto dev = late_fuse(kb.dev_scores, text.dev_scores, f.beta);
  f.theta = dev_q.empty() ? 0.5 : tune_threshold(dev_q, dev, default_theta_grid());
  f.dev = score_questions(dev_q, dev, f.theta);
  f.test = score_questions(test_q, late_fuse(kb.test_scores, text.test_scores, f.beta), f.theta);
  return f;
}

inline nlohmann::json metrics_json(const Metrics& m) {
  return {{"hits1", m.hits1}, {"f1", m.f1}, {"recall", m.recall}, {"questions", m.questions}};
}

}  // namespace graftnet
