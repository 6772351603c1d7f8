// graftnet: generate worlds, retrieve subgraphs, train, evaluate, fuse and ablate.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "graftnet/pipeline.hpp"

namespace fs = std::filesystem;
using namespace graftnet;

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kNumeric = 4 };

struct Invocation {
  std::string config_file;
  std::map<std::string, std::string> overrides;  // key -> value from flags
};

/// defaults <- saved run config (optional) <- --config file <- flags
RunConfig build_config(const Invocation& inv, const std::optional<fs::path>& saved = std::nullopt) {
  RunConfig c;
  if (saved && fs::exists(*saved)) c.merge_file(*saved);
  if (!inv.config_file.empty()) c.merge_file(inv.config_file);
  for (const auto& [k, v] : inv.overrides) c.set(k, v);
  c.validate();
  return c;
}

/// The run directory named by the flags or config file, before any saved config is read.
fs::path run_dir(const Invocation& inv) { return build_config(inv).out_dir; }

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw DependencyError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

fs::path ensure_dir(const std::string& dir) {
  fs::create_directories(dir);
  return dir;
}

WorldSpec world_spec(const RunConfig& c) {
  auto spec = c.world;
  spec.seed = stage_seed(c.seed, "world");
  return spec;
}

int cmd_generate(const Invocation& inv) {
  const auto c = build_config(inv);
  const auto world = generate(world_spec(c));
  const auto dir = ensure_dir(c.world_dir);
  save_world(world, dir);
  auto manifest = world_manifest(world);
  std::cout << manifest.dump(2) << '\n';
  return kOk;
}

int cmd_retrieve(const Invocation& inv) {
  const auto c = build_config(inv);
  const auto world = load_world(c.world_dir);
  const auto mode = parse_mode(c.mode);
  const auto data = prepare_data(world.data, world.splits, c, mode);
  const auto out = ensure_dir(c.out_dir);
  std::ofstream cache(out / "subgraphs.jsonl");
  std::size_t entities = 0, documents = 0;
  std::vector<LabeledExample> all;
  for (const auto* split : {&data.examples.train, &data.examples.dev, &data.examples.test}) {
    for (const auto& e : *split) {
      cache << subgraph_to_json(e.subgraph).dump() << '\n';
      entities += e.subgraph.entities.size();
      documents += e.subgraph.documents.size();
      all.push_back(e);
    }
  }
  const double n = all.empty() ? 1.0 : static_cast<double>(all.size());
  nlohmann::json report{{"mode", mode_name(mode)},
                        {"kb_fraction", c.kb_fraction},
                        {"questions", all.size()},
                        {"recall", answer_recall(all)},
                        {"recall_train", answer_recall(data.examples.train)},
                        {"recall_dev", answer_recall(data.examples.dev)},
                        {"recall_test", answer_recall(data.examples.test)},
                        {"mean_entities", static_cast<double>(entities) / n},
                        {"mean_documents", static_cast<double>(documents) / n}};
  write_json(out / "retrieval.json", report);
  std::cout << report.dump(2) << '\n';
  return kOk;
}

nlohmann::json report_json(const ExperimentResult& r, const RunConfig& c) {
  return {{"mode", c.mode},
          {"kb_fraction", c.kb_fraction},
          {"hits1", r.test.hits1},
          {"f1", r.test.f1},
          {"recall", r.test.recall},
          {"theta", r.theta},
          {"beta", nullptr},
          {"dev", metrics_json(r.dev)},
          {"epochs", r.history.epochs.size()},
          {"best_epoch", r.history.best_epoch}};
}

int cmd_train(const Invocation& inv) {
  const auto c = build_config(inv);
  const auto world = load_world(c.world_dir);
  const auto out = ensure_dir(c.out_dir);
  write_config(c, out / "run.cfg");
  const auto data = prepare_data(world.data, world.splits, c, parse_mode(c.mode));
  std::ofstream metrics(out / "metrics.jsonl");
  ExperimentResult r;
  try {
    r = run_experiment(data, c, [&](const EpochRecord& e) {
      metrics << e.to_json().dump() << '\n';
      metrics.flush();
      std::cerr << "epoch " << e.epoch << " loss " << e.train_loss << " dev hits@1 " << e.dev_hits1 << '\n';
    });
  } catch (const NumericFault& e) {
    write_json(out / "numeric_fault.json", {{"error", e.what()}, {"config", c.to_json()}});
    throw;
  }
  save_checkpoint(r.params, out / "model.ckpt");
  const auto report = report_json(r, c);
  write_json(out / "report.json", report);
  std::cout << report.dump(2) << '\n';
  return kOk;
}

struct TrainedRun {
  RunConfig config;
  PreparedData data;
  ExperimentResult result;
};

fs::path saved_config(const fs::path& dir) {
  const auto saved = dir / "run.cfg";
  if (!fs::exists(saved)) throw DependencyError("no trained run in " + dir.string() + " (missing run.cfg)");
  return saved;
}

/// Rebuilds a trained run's data under config and scores dev and test with its checkpoint.
TrainedRun load_run(RunConfig config, const fs::path& dir) {
  TrainedRun t;
  t.config = std::move(config);
  t.config.out_dir = dir.string();
  const auto world = load_world(t.config.world_dir);
  t.data = prepare_data(world.data, world.splits, t.config, parse_mode(t.config.mode));
  t.result.params = initial_params(t.config, t.data.shape);
  load_checkpoint(t.result.params, dir / "model.ckpt");
  score_splits(t.result, t.config.model, t.data.examples);
  return t;
}

/// A fusion member exactly as it was trained.
TrainedRun load_member(const fs::path& dir, Mode expected) {
  RunConfig c;
  c.merge_file(saved_config(dir));
  c.validate();
  if (parse_mode(c.mode) != expected) {
    throw ConfigError("run.mode of " + dir.string() + " is " + c.mode + ", expected " + mode_name(expected));
  }
  return load_run(c, dir);
}

int cmd_eval(const Invocation& inv) {
  const auto dir = run_dir(inv);
  const auto t = load_run(build_config(inv, saved_config(dir)), dir);
  auto report = report_json(t.result, t.config);
  report.erase("epochs");
  report.erase("best_epoch");
  write_json(fs::path(t.config.out_dir) / "eval.json", report);
  std::cout << report.dump(2) << '\n';
  return kOk;
}

int cmd_answer(const Invocation& inv, const std::string& text, long question_id, std::size_t top) {
  const auto dir = run_dir(inv);
  const auto c = build_config(inv, saved_config(dir));
  const auto world = load_world(c.world_dir);
  QuestionRecord q;
  if (question_id >= 0) {
    const auto it = std::find_if(world.data.questions.begin(), world.data.questions.end(),
                                 [&](const QuestionRecord& r) { return r.id == static_cast<QuestionId>(question_id); });
    if (it == world.data.questions.end()) throw ConfigError("--question-id: no question " + std::to_string(question_id));
    q = *it;
  } else {
    q.id = static_cast<QuestionId>(world.data.questions.size());
    q.tokens = detail::whitespace_tokens(text);
    if (q.tokens.empty()) throw ConfigError("--question: empty question");
    q.seeds = link_question_entities(world.data.kb, q.tokens);
  }
  PreparedData data;
  data.kb = training_kb(world.data.kb, c);
  data.vocabulary = world.data.model_vocabulary();
  data.shape = {data.vocabulary.size(), world.data.kb.entity_count(), world.data.kb.relation_count()};
  Retriever retriever(data.kb, world.data.corpus, world.data.links, load_vectors(c),
                      retrieval_for(c.retrieval, parse_mode(c.mode)));
  const auto example = make_example(q, retriever.retrieve(q), world.data.corpus, data.vocabulary);
  auto params = initial_params(c, data.shape);
  load_checkpoint(params, dir / "model.ckpt");
  GraftNet<Real> model(params, c.model);
  const auto scores = predict_one(model, example);
  std::vector<std::pair<EntityId, double>> ranked(scores.begin(), scores.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > top) ranked.resize(top);
  nlohmann::json out{{"question", q.tokens}, {"seeds", q.seeds}, {"answers", nlohmann::json::array()}};
  for (const auto& [e, p] : ranked) {
    out["answers"].push_back({{"entity", e}, {"name", world.data.kb.entity_names[e]}, {"probability", p}});
  }
  std::cout << out.dump(2) << '\n';
  return kOk;
}

int cmd_fuse(const Invocation& inv) {
  const auto c = build_config(inv);
  const auto kb = load_member(c.kb_run, Mode::kb);
  const auto text = load_member(c.text_run, Mode::text);
  const auto dev_q = questions_of(kb.data.examples.dev);
  const auto test_q = questions_of(kb.data.examples.test);
  if (dev_q != questions_of(text.data.examples.dev) || test_q != questions_of(text.data.examples.test)) {
    throw IntegrityError("fuse: the two runs were trained on different question sets");
  }
  const auto f = fuse_runs(dev_q, test_q, kb.result, text.result);
  nlohmann::json report{{"mode", "late"},       {"hits1", f.test.hits1}, {"f1", f.test.f1},
                        {"recall", f.test.recall}, {"theta", f.theta},    {"beta", f.beta},
                        {"dev", metrics_json(f.dev)}};
  const auto out = ensure_dir(c.out_dir);
  write_json(out / "fuse.json", report);
  std::cout << report.dump(2) << '\n';
  return kOk;
}

int cmd_ablate(const Invocation& inv) {
  const auto base = build_config(inv);
  const auto world = load_world(base.world_dir);
  const auto out = ensure_dir(base.out_dir);
  std::ofstream rows(out / "ablate.jsonl");
  nlohmann::json table = nlohmann::json::array();
  std::cout << std::left << std::setw(10) << "variant" << std::setw(10) << "kb" << std::setw(8) << "p0"
            << std::setw(10) << "hits@1" << std::setw(10) << "f1" << "recall\n";
  for (const auto& variant : base.ablate_variants) {
    for (double fraction : base.ablate_kb_fraction) {
      for (double p0 : base.ablate_p0) {
        auto c = base;
        c.model = apply_variant(base.model, variant);
        c.kb_fraction = fraction;
        c.trainer.p0 = p0;
        c.validate();
        const auto r = run_experiment(world.data, world.splits, c, parse_mode(c.mode));
        nlohmann::json row{{"variant", variant}, {"kb_fraction", fraction}, {"p0", p0},
                           {"hits1", r.test.hits1}, {"f1", r.test.f1},   {"recall", r.test.recall},
                           {"theta", r.theta}};
        rows << row.dump() << '\n';
        table.push_back(row);
        std::cout << std::left << std::setw(10) << variant << std::setw(10) << fraction << std::setw(8) << p0
                  << std::setw(10) << r.test.hits1 << std::setw(10) << r.test.f1 << r.test.recall << '\n';
      }
    }
  }
  write_json(out / "ablate.json", {{"mode", base.mode}, {"rows", table}});
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GRAFT-Net question answering over synthetic KB and text worlds"};
  app.require_subcommand(1);
  app.fallthrough();
  Invocation inv;
  app.add_option("--config", inv.config_file, "key = value config file");

  std::map<std::string, std::string> flag_values;
  std::vector<std::pair<std::string, CLI::Option*>> flag_options;
  for (const auto& [key, _] : detail::config_keys()) {
    flag_options.emplace_back(key, app.add_option("--" + key, flag_values[key], "overrides " + key));
  }

  std::string question;
  long question_id = -1;
  std::size_t top = 10;
  auto* generate_cmd = app.add_subcommand("generate", "write a synthetic world to paths.world");
  auto* retrieve_cmd = app.add_subcommand("retrieve", "retrieve subgraphs and report answer recall");
  auto* train_cmd = app.add_subcommand("train", "train a model; writes checkpoint, metrics and report");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate the run in paths.out");
  auto* answer_cmd = app.add_subcommand("answer", "rank entities for one question");
  answer_cmd->add_option("--question", question, "question text; seeds are linked by entity name");
  answer_cmd->add_option("--question-id", question_id, "answer a stored world question");
  answer_cmd->add_option("--top", top, "number of ranked entities to print");
  auto* fuse_cmd = app.add_subcommand("fuse", "late fusion of the runs in paths.kb_run and paths.text_run");
  auto* ablate_cmd = app.add_subcommand("ablate", "grid over ablate.p0 x ablate.kb_fraction x ablate.variants");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }
  for (const auto& [key, opt] : flag_options) {
    if (opt->count() > 0) inv.overrides[key] = flag_values[key];
  }

  try {
    if (generate_cmd->parsed()) return cmd_generate(inv);
    if (retrieve_cmd->parsed()) return cmd_retrieve(inv);
    if (train_cmd->parsed()) return cmd_train(inv);
    if (eval_cmd->parsed()) return cmd_eval(inv);
    if (answer_cmd->parsed()) {
      if (question.empty() && question_id < 0) throw ConfigError("answer: give --question or --question-id");
      return cmd_answer(inv, question, question_id, top);
    }
    if (fuse_cmd->parsed()) return cmd_fuse(inv);
    if (ablate_cmd->parsed()) return cmd_ablate(inv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const NumericFault& e) {
    std::cerr << "numeric fault: " << e.what() << '\n';
    return kNumeric;
  } catch (const DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  }
  return kConfig;
}
