#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "graftnet/autodiff.hpp"
#include "graftnet/errors.hpp"
#include "graftnet/knowledge_store.hpp"
#include "graftnet/model.hpp"
#include "graftnet/params.hpp"
#include "graftnet/retrieval.hpp"
#include "graftnet/rng.hpp"

namespace graftnet {

struct TrainerConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 20;
  double learning_rate = 1e-3;
  double p0 = 0.0;  // fact dropout
  std::size_t patience = 5;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw ConfigError("trainer.B must be at least 1");
    if (!(p0 >= 0.0 && p0 <= 1.0)) throw ConfigError("trainer.p0 must lie in [0,1]");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("trainer.lr must be positive");
  }
};

struct EvalConfig {
  double theta = 0.5;

  void validate() const {
    if (!(theta > 0.0 && theta < 1.0)) throw ConfigError("eval.theta must lie in (0,1)");
  }
};

/// One question's subgraph, prepared for the model, with distant labels.
struct LabeledExample {
  QuestionRecord question;
  QuestionSubgraph subgraph;
  PreparedGraph graph;
  std::vector<double> labels;

  /// False for unlinked questions and empty subgraphs; those are never trained
  /// on and always scored incorrect.
  bool usable() const { return !subgraph.entities.empty() && !subgraph.seeds.empty(); }
  bool has_positive() const { return std::find(labels.begin(), labels.end(), 1.0) != labels.end(); }
};

/// y_v = 1 exactly when subgraph entity v is a gold answer.
inline std::vector<double> distant_labels(const QuestionSubgraph& subgraph, const std::vector<EntityId>& answers) {
  std::vector<EntityId> gold(answers);
  std::sort(gold.begin(), gold.end());
  std::vector<double> labels(subgraph.entities.size(), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    labels[i] = std::binary_search(gold.begin(), gold.end(), subgraph.entities[i]) ? 1.0 : 0.0;
  }
  return labels;
}

/// Fraction of examples with at least one positive node.
inline double answer_recall(const std::vector<LabeledExample>& examples) {
  if (examples.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& e : examples) hit += e.has_positive() ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(examples.size());
}

inline LabeledExample make_example(const QuestionRecord& question, QuestionSubgraph subgraph, const Corpus& corpus,
                                   const Vocabulary& vocabulary) {
  LabeledExample e;
  e.question = question;
  e.labels = distant_labels(subgraph, question.answers);
  if (!subgraph.entities.empty() && !subgraph.seeds.empty()) {
    e.graph = prepare_graph(subgraph, question, corpus, vocabulary);
  }
  e.subgraph = std::move(subgraph);
  return e;
}

/// Each KB edge survives with probability 1 - p0; link edges always survive.
/// p0 = 0 returns the graph unchanged without consuming randomness.
inline PreparedGraph fact_dropout(const PreparedGraph& g, double p0, Rng& rng) {
  if (p0 <= 0.0) return g;
  std::vector<bool> keep(g.edge_count());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = !rng.bernoulli(p0);
  return drop_edges(g, keep);
}

// ---------------------------------------------------------------------------
// Scoring

/// Answer probabilities keyed by global entity id. Iteration is in ascending
/// id, which is the Hits@1 tie order.
using EntityScores = std::map<EntityId, double>;

struct Metrics {
  double hits1 = 0.0;
  double f1 = 0.0;
  double recall = 0.0;
  std::size_t questions = 0;
};

/// Harmonic mean of precision and recall of predicted against gold.
inline double f1_score(const std::vector<EntityId>& predicted, const std::vector<EntityId>& gold) {
  if (predicted.empty() && gold.empty()) return 1.0;
  if (predicted.empty() || gold.empty()) return 0.0;
  std::vector<EntityId> p(predicted), g(gold);
  std::sort(p.begin(), p.end());
  std::sort(g.begin(), g.end());
  std::vector<EntityId> both;
  std::set_intersection(p.begin(), p.end(), g.begin(), g.end(), std::back_inserter(both));
  if (both.empty()) return 0.0;
  const double precision = static_cast<double>(both.size()) / static_cast<double>(p.size());
  const double recall = static_cast<double>(both.size()) / static_cast<double>(g.size());
  return 2.0 * precision * recall / (precision + recall);
}

/// Top entity, first in id order among equal maxima. Requires nonempty scores.
inline EntityId top_entity(const EntityScores& scores) {
  auto best = scores.begin();
  for (auto it = scores.begin(); it != scores.end(); ++it) {
    if (it->second > best->second) best = it;
  }
  return best->first;
}

/// Empty score maps stand for unanswerable questions and count as incorrect.
inline Metrics score_questions(const std::vector<QuestionRecord>& questions, const std::vector<EntityScores>& scores,
                               double theta) {
  if (questions.size() != scores.size()) throw DimensionError("score_questions: question/score count mismatch");
  Metrics m;
  m.questions = questions.size();
  if (questions.empty()) return m;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    const auto& s = scores[i];
    if (s.empty()) continue;
    const auto& gold = questions[i].answers;
    auto is_gold = [&](EntityId e) { return std::find(gold.begin(), gold.end(), e) != gold.end(); };
    if (is_gold(top_entity(s))) m.hits1 += 1.0;
    std::vector<EntityId> predicted;
    bool reachable = false;
    for (const auto& [e, p] : s) {
      if (p >= theta) predicted.push_back(e);
      reachable = reachable || is_gold(e);
    }
    m.f1 += f1_score(predicted, gold);
    m.recall += reachable ? 1.0 : 0.0;
  }
  const auto n = static_cast<double>(questions.size());
  m.hits1 /= n;
  m.f1 /= n;
  m.recall /= n;
  return m;
}

/// {0.05, 0.10, ..., 0.95}
inline std::vector<double> default_theta_grid() {
  std::vector<double> grid;
  for (int k = 1; k <= 19; ++k) grid.push_back(k * 0.05);
  return grid;
}

/// {0, 0.1, ..., 1}
inline std::vector<double> default_beta_grid() {
  std::vector<double> grid;
  for (int k = 0; k <= 10; ++k) grid.push_back(k * 0.1);
  return grid;
}

/// Grid value with the best mean F1; ties go to the smallest value.
inline double tune_threshold(const std::vector<QuestionRecord>& questions, const std::vector<EntityScores>& scores,
                             std::vector<double> grid) {
  if (grid.empty()) throw ContractViolation("tune_threshold: empty grid");
  std::sort(grid.begin(), grid.end());
  double best = grid.front();
  double best_f1 = -1.0;
  for (double theta : grid) {
    const double f1 = score_questions(questions, scores, theta).f1;
    if (f1 > best_f1) {
      best_f1 = f1;
      best = theta;
    }
  }
  return best;
}

/// beta * kb + (1 - beta) * text where both score an entity; the single score otherwise.
inline EntityScores late_fuse(const EntityScores& kb, const EntityScores& text, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ContractViolation("late_fuse: beta must lie in [0,1]");
  EntityScores out = text;
  for (const auto& [e, p] : kb) {
    auto it = out.find(e);
    if (it == out.end()) {
      out.emplace(e, p);
    } else {
      it->second = beta * p + (1.0 - beta) * it->second;
    }
  }
  return out;
}

inline std::vector<EntityScores> late_fuse(const std::vector<EntityScores>& kb, const std::vector<EntityScores>& text,
                                           double beta) {
  if (kb.size() != text.size()) throw DimensionError("late_fuse: question count mismatch");
  std::vector<EntityScores> out;
  out.reserve(kb.size());
  for (std::size_t i = 0; i < kb.size(); ++i) out.push_back(late_fuse(kb[i], text[i], beta));
  return out;
}

/// Beta with the best fused Hits@1; ties go to the smaller beta.
inline double tune_beta(const std::vector<QuestionRecord>& questions, const std::vector<EntityScores>& kb,
                        const std::vector<EntityScores>& text, std::vector<double> grid) {
  if (grid.empty()) throw ContractViolation("tune_beta: empty grid");
  std::sort(grid.begin(), grid.end());
  double best = grid.front();
  double best_hits = -1.0;
  for (double beta : grid) {
    const double hits = score_questions(questions, late_fuse(kb, text, beta), 0.5).hits1;
    if (hits > best_hits) {
      best_hits = hits;
      best = beta;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Prediction and training

template <std::floating_point T>
EntityScores predict_one(const GraftNet<T>& model, const LabeledExample& example) {
  EntityScores out;
  if (!example.usable()) return out;
  ad::NoGradGuard guard;
  const auto probabilities = model.forward(example.graph).probabilities;
  for (std::size_t i = 0; i < example.subgraph.entities.size(); ++i) {
    out.emplace(example.subgraph.entities[i], static_cast<double>(probabilities[i]));
  }
  return out;
}

template <std::floating_point T>
std::vector<EntityScores> predict(const ParamStore<T>& store, const ModelConfig& config,
                                  const std::vector<LabeledExample>& examples) {
  GraftNet<T> model(store, config);
  std::vector<EntityScores> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(predict_one(model, e));
  return out;
}

inline std::vector<QuestionRecord> questions_of(const std::vector<LabeledExample>& examples) {
  std::vector<QuestionRecord> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(e.question);
  return out;
}

template <std::floating_point T>
Metrics evaluate(const ParamStore<T>& store, const ModelConfig& config, const std::vector<LabeledExample>& examples,
                 double theta) {
  return score_questions(questions_of(examples), predict(store, config, examples), theta);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_hits1 = 0.0;
  double dev_f1 = 0.0;

  nlohmann::json to_json() const {
    return {{"epoch", epoch}, {"train_loss", train_loss}, {"dev_hits1", dev_hits1}, {"dev_f1", dev_f1}};
  }
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 0 when no epoch ran
  bool stopped_early = false;
};

/// Mini-batch Adam on the mean per-question BCE. After each epoch the dev set
/// is scored; the parameters of the best dev Hits@1 epoch are restored at the
/// end. With an empty dev set every epoch runs and the last one is kept.
template <std::floating_point T>
TrainHistory train(ParamStore<T>& store, const ModelConfig& model_config, const TrainerConfig& config,
                   const std::vector<LabeledExample>& train_set, const std::vector<LabeledExample>& dev_set,
                   const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  config.validate();
  GraftNet<T> model(store, model_config);
  Rng rng(config.seed);
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    if (train_set[i].usable()) order.push_back(i);
  }
  const AdamConfig adam{config.learning_rate};
  const auto dev_questions = questions_of(dev_set);

  TrainHistory history;
  double best_hits = -1.0;
  std::vector<std::vector<T>> best_params;
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double loss_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const T weight = T(1) / static_cast<T>(end - start);
      store.zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        const auto& ex = train_set[order[k]];
        const auto graph = fact_dropout(ex.graph, config.p0, rng);
        const std::vector<T> labels(ex.labels.begin(), ex.labels.end());
        const auto loss = ad::bce_loss(model.forward(graph).probabilities, std::span<const T>(labels));
        const double value = static_cast<double>(loss.item());
        if (!std::isfinite(value)) {
          std::ostringstream msg;
          msg << "non-finite loss at epoch " << epoch << " on question " << ex.question.id << " (entities "
              << graph.entity_count << ", kb edges " << graph.edge_count() << ", documents "
              << graph.document_count() << ", adam steps " << store.step_count() << ")";
          throw NumericFault(msg.str());
        }
        loss_total += value;
        ad::backward(ad::scale(loss, weight));
      }
      store.adam_step(adam);
    }
    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = order.empty() ? 0.0 : loss_total / static_cast<double>(order.size());
    if (!dev_set.empty()) {
      const auto scores = predict(store, model_config, dev_set);
      const double theta = tune_threshold(dev_questions, scores, default_theta_grid());
      const auto m = score_questions(dev_questions, scores, theta);
      record.dev_hits1 = m.hits1;
      record.dev_f1 = m.f1;
    }
    history.epochs.push_back(record);
    if (on_epoch) on_epoch(record);

    if (dev_set.empty()) {
      history.best_epoch = epoch;
      continue;
    }
    if (record.dev_hits1 > best_hits) {
      best_hits = record.dev_hits1;
      best_params = store.snapshot();
      history.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= config.patience) {
      history.stopped_early = epoch < config.epochs;
      break;
    }
  }
  if (!best_params.empty()) store.restore(best_params);
  return history;
}

}  // namespace graftnet
