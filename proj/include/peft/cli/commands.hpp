#pragma once

#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "peft/adapters/checkpoint.hpp"
#include "peft/cli/config.hpp"
#include "peft/corpus/ingest.hpp"
#include "peft/evaluation/correlation.hpp"
#include "peft/evaluation/pppl.hpp"
#include "peft/training/task.hpp"
#include "peft/verbalizer/verbalizer.hpp"

namespace peft::cli {

using Real = double;
using Model = adapters::AdaptedModel<Real>;
using Head = encoder::ClassificationHead<Real>;

namespace detail {

inline std::vector<std::string> non_empty_lines(const std::string& path) {
  std::vector<std::string> out;
  for (auto& l : corpus::read_lines(path))
    if (!l.empty()) out.push_back(std::move(l));
  if (out.empty()) throw InputError("'" + path + "' holds no non-empty lines");
  return out;
}

inline void require(const std::string& value, const std::string& what) {
  if (value.empty()) throw ConfigError(what + " is required");
}

inline std::shared_ptr<encoder::EncoderModel<Real>> load_backbone(const std::string& path) {
  require(path, "model checkpoint (--model)");
  return std::make_shared<encoder::EncoderModel<Real>>(checkpoint::load_encoder<Real>(path));
}

/// Backbone plus language adapters in the given order, everything frozen.
inline Model language_view(const std::shared_ptr<encoder::EncoderModel<Real>>& base,
                           const std::vector<std::string>& adapter_paths) {
  Model view(base);
  for (const auto& p : adapter_paths) view.add_language_adapter(checkpoint::load_adapter<Real>(p, base->config()));
  view.apply_freeze_policy(adapters::FreezePolicy::base_and_la_frozen);
  return view;
}

/// Backbone with several language adapters combined through a fresh fusion layer.
inline Model fused_view(const std::shared_ptr<encoder::EncoderModel<Real>>& base,
                        const std::vector<std::string>& adapter_paths, std::uint64_t seed) {
  if (adapter_paths.size() < 2) throw ConfigError("fusion needs at least two language adapters");
  std::vector<Model> members;
  for (const auto& p : adapter_paths) members.push_back(language_view(base, {p}));
  return adapters::fuse(members, seed);
}

template <class T>
std::size_t total_numel(const std::vector<NamedParameter<T>>& ps) {
  std::size_t n = 0;
  for (const auto& p : ps) n += p.tensor.numel();
  return n;
}

inline void print_trainable(std::ostream& os, const std::vector<NamedParameter<Real>>& params,
                            const encoder::EncoderConfig& cfg) {
  const auto trainable = count_requires_grad(params);
  const auto total = total_numel(params);
  const auto backbone = encoder::backbone_parameter_count(cfg);
  os << "trainable " << trainable << " of " << total << " parameters (" << std::fixed << std::setprecision(3)
     << 100.0 * static_cast<double>(trainable) / static_cast<double>(backbone) << "% of backbone)\n"
     << std::defaultfloat;
}

inline void write_summary(const fs::path& path, const training::TrainReport& r, const training::TrainPlan& plan,
                          std::size_t trainable) {
  nlohmann::json j = {{"best_step", r.best_step},       {"best_value", r.best_value},
                      {"steps_run", r.steps_run},       {"stopped_early", r.stopped_early},
                      {"trainable_parameters", trainable}, {"plan", plan}};
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

inline void write_metrics_csv(const std::string& path, const evaluation::TaskMetrics& m, bool token_task,
                              const std::vector<std::string>& labels) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path + "'");
  out.precision(17);
  out << "metric,value\n";
  if (token_task) {
    out << "precision," << m.precision << "\nrecall," << m.recall << "\nf1," << m.f1 << '\n';
    for (const auto& [type, s] : m.per_type) out << "f1:" << type << ',' << s.f1 << '\n';
  } else {
    out << "macro_f1," << m.macro_f1 << '\n';
    for (std::size_t c = 0; c < m.per_class.size(); ++c) out << "f1:" << labels.at(c) << ',' << m.per_class[c].f1 << '\n';
  }
}

inline std::vector<std::string> task_labels(const std::string& task, const std::string& path) {
  if (task == "ner") return training::label_set(training::read_conll(path));
  return training::label_set(training::read_sequence_tsv(path));
}

inline training::TaskData encode_task_file(const std::string& task, const std::string& path,
                                           const corpus::Tokenizer& tok, const std::vector<std::string>& labels,
                                           std::size_t length) {
  if (task == "ner") return training::encode_token_data(tok, training::read_conll(path), labels, length);
  return training::encode_sequence_data(tok, training::read_sequence_tsv(path), labels, length);
}

inline std::size_t task_length(const ExperimentConfig& c, const encoder::EncoderConfig& geometry) {
  return c.length ? *c.length : std::min<std::size_t>(128, geometry.max_positions);
}

inline std::vector<std::vector<std::int32_t>> read_id_lines(const std::string& path) {
  std::vector<std::vector<std::int32_t>> out;
  std::size_t n = 0;
  for (const auto& line : corpus::read_lines(path)) {
    ++n;
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream in(line);
    std::vector<std::int32_t> ids;
    std::string tok;
    while (in >> tok) {
      try {
        std::size_t used = 0;
        const long v = std::stol(tok, &used);
        if (used != tok.size() || v < 0 || v > INT32_MAX) throw std::invalid_argument(tok);
        ids.push_back(static_cast<std::int32_t>(v));
      } catch (const std::exception&) {
        throw InputError(path + ":" + std::to_string(n) + ": '" + tok + "' is not a token id");
      }
    }
    out.push_back(std::move(ids));
  }
  if (out.empty()) throw InputError("'" + path + "' holds no sentences");
  return out;
}

/// Flags shared by train-la, train-task and finetune; set values override the config file.
struct TrainFlags {
  std::string config;
  ExperimentConfig values;
  std::size_t max_steps = 0, batch_size = 0, eval_every = 0, patience = 0, length = 0, seq_length = 0;
  double learning_rate = 0.0;
  std::uint64_t plan_seed = 0;
  std::map<std::string, CLI::Option*> opt;

  void add(CLI::App& app, bool language_adapter, bool task_adapter) {
    app.add_option("--config", config, "experiment config (JSON)");
    opt["model"] = app.add_option("--model", values.model, "backbone checkpoint");
    opt["tokenizer"] = app.add_option("--tokenizer", values.tokenizer, "tokenizer JSON");
    opt["train"] = app.add_option("--train", values.train, "training data");
    opt["val"] = app.add_option("--val", values.val, "validation data");
    opt["out"] = app.add_option("--out", values.out, "output directory");
    opt["seed"] = app.add_option("--seed", values.seed, "initialisation seed");
    opt["task"] = app.add_option("--task", values.task, "lm, tc, sa or ner");
    opt["length"] = app.add_option("--length", length, "task sequence length");
    opt["max_steps"] = app.add_option("--max-steps", max_steps);
    opt["batch_size"] = app.add_option("--batch-size", batch_size);
    opt["learning_rate"] = app.add_option("--lr", learning_rate);
    opt["eval_every"] = app.add_option("--eval-every", eval_every);
    opt["patience"] = app.add_option("--patience", patience);
    opt["seq_length"] = app.add_option("--seq-length", seq_length, "language-model window length");
    opt["plan_seed"] = app.add_option("--plan-seed", plan_seed, "batch/dropout seed of the train plan");
    opt["overfit_one_batch"] = app.add_flag("--overfit-one-batch", "reuse the first batch at every step");
    if (language_adapter) opt["preset"] = app.add_option("--preset", values.preset, "glotcc or conceptnet");
    if (task_adapter) {
      opt["language_adapters"] = app.add_option("--adapter", values.language_adapters, "language adapter checkpoint");
      opt["fuse"] = app.add_flag("--fuse", values.fuse, "fuse the language adapters");
    }
  }

  bool given(const std::string& k) const {
    auto it = opt.find(k);
    return it != opt.end() && it->second->count() > 0;
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c = config.empty() ? ExperimentConfig{} : load_config(config);
    if (given("model")) c.model = values.model;
    if (given("tokenizer")) c.tokenizer = values.tokenizer;
    if (given("train")) c.train = values.train;
    if (given("val")) c.val = values.val;
    if (given("out")) c.out = values.out;
    if (given("seed")) c.seed = values.seed;
    if (given("task")) c.task = values.task;
    if (given("preset")) c.preset = values.preset;
    if (given("language_adapters")) c.language_adapters = values.language_adapters;
    if (given("fuse")) c.fuse = values.fuse;
    if (given("length")) c.length = length;
    if (given("max_steps")) c.plan["max_steps"] = max_steps;
    if (given("batch_size")) c.plan["batch_size"] = batch_size;
    if (given("learning_rate")) c.plan["learning_rate"] = learning_rate;
    if (given("eval_every")) c.plan["eval_every"] = eval_every;
    if (given("patience")) c.plan["patience"] = patience;
    if (given("seq_length")) c.plan["seq_length"] = seq_length;
    if (given("plan_seed")) c.plan["seed"] = plan_seed;
    if (given("overfit_one_batch")) c.plan["overfit_one_batch"] = true;
    c.validate();
    return c;
  }
};

inline training::TrainPlan resolve_plan(training::TrainPlan preset, const ExperimentConfig& c) {
  from_json(c.plan, preset);
  preset.validate();
  return preset;
}

inline training::TrainObjective lm_objective(const encoder::EncoderConfig& g) {
  return g.objective == encoder::Objective::clm ? training::TrainObjective::clm : training::TrainObjective::mlm;
}

}  // namespace detail

// ---------------------------------------------------------------- commands

struct VerbalizeArgs {
  std::string triples, lang, out;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
};

inline int cmd_verbalize(const VerbalizeArgs& a, std::ostream& os) {
  const auto rows = verbalizer::read_triples_tsv(a.triples);
  verbalizer::KgCorpus corpus;
  try {
    corpus = verbalizer::build_kg_corpus(rows, a.lang, a.val_fraction, a.seed);
  } catch (const ValidationError& e) {
    std::size_t matched = 0;
    for (const auto& r : rows) matched += !r.malformed && verbalizer::trim(r.triple.language) == a.lang;
    throw ValidationError(std::string(e.what()) + " (" + std::to_string(rows.size()) + " rows read, " +
                          std::to_string(matched) + " in language '" + a.lang + "')");
  }
  const auto dir = output_dir(a.out, "verbalize");
  corpus::write_lines((dir / "train.txt").string(), corpus.train);
  corpus::write_lines((dir / "val.txt").string(), corpus.val);
  verbalizer::write_skip_report((dir / "skipped.csv").string(), corpus);
  os << "verbalized " << corpus.valid << " triples (" << corpus.train.size() << " train, " << corpus.val.size()
     << " val)";
  for (auto r : verbalizer::kSkipReasons) os << ", " << verbalizer::to_string(r) << ' ' << corpus.skipped.at(r);
  os << '\n';
  return kOk;
}

struct IngestArgs {
  corpus::CorpusSpec spec;
  bool keep_control = false;
  std::string out;
};

inline int cmd_ingest(IngestArgs a, std::ostream& os) {
  a.spec.cleaning.strip_control = !a.keep_control;
  const auto res = corpus::ingest(a.spec);
  const auto dir = output_dir(a.out, "ingest");
  corpus::write_lines((dir / "train.txt").string(), res.train);
  corpus::write_lines((dir / "val.txt").string(), res.val);
  corpus::write_stats_csv((dir / "stats.csv").string(), res.stats);
  os << "ingested " << res.stats.docs << " documents (" << res.stats.bytes_kept << " bytes kept of "
     << res.stats.bytes_in << "), " << res.val.size() << " held out\n";
  return kOk;
}

struct TokenizerArgs {
  std::vector<std::string> corpora;
  std::size_t vocab_size = 0;
  std::string out;
};

inline int cmd_train_tokenizer(const TokenizerArgs& a, std::ostream& os) {
  std::vector<std::string> docs;
  for (const auto& c : a.corpora) {
    auto lines = detail::non_empty_lines(c);
    docs.insert(docs.end(), lines.begin(), lines.end());
  }
  const auto tok = corpus::Tokenizer::train(docs, a.vocab_size);
  const auto path = a.out.empty() ? output_dir("", "tokenizer") / "tokenizer.json" : fs::path(a.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  tok.save(path.string());
  os << "tokenizer with " << tok.vocab_size() << " entries written to " << path.string() << '\n';
  return kOk;
}

struct InitArgs {
  std::string config, tokenizer, out;
  encoder::EncoderConfig geometry;
  std::string objective;
  std::size_t vocab_size = 0;
  std::uint64_t seed = 0;
  bool uniform = false;
};

inline int cmd_init(const InitArgs& a, std::ostream& os) {
  auto cfg = a.geometry;
  if (!a.config.empty()) from_json(read_json_file(a.config), cfg);
  if (!a.objective.empty()) cfg.objective = encoder::objective_from_string(a.objective);
  if (!a.tokenizer.empty()) cfg.vocab_size = corpus::Tokenizer::load(a.tokenizer).vocab_size();
  if (a.vocab_size) cfg.vocab_size = a.vocab_size;
  if (a.tokenizer.empty() && !a.vocab_size && a.config.empty())
    throw ConfigError("init needs --tokenizer, --vocab-size or --config to fix the vocabulary");
  cfg.validate();
  const auto model = encoder::build_encoder<Real>(cfg, a.seed);
  if (a.uniform) encoder::make_mlm_head_uniform(model);
  const auto path = a.out.empty() ? output_dir("", "init") / "encoder.ckpt" : fs::path(a.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  checkpoint::save_encoder(path.string(), model);
  os << "encoder with " << encoder::total_parameter_count(cfg) << " parameters written to " << path.string() << '\n';
  return kOk;
}

inline int cmd_train_la(const ExperimentConfig& c, std::ostream& os) {
  detail::require(c.tokenizer, "tokenizer (--tokenizer)");
  detail::require(c.train, "training data (--train)");
  detail::require(c.val, "validation data (--val)");
  if (c.task != "lm") throw ConfigError("train-la trains with the language-model objective; task must be lm");
  const auto base = detail::load_backbone(c.model);
  const auto& g = base->config();
  auto preset = c.preset == "conceptnet" ? training::TrainPlan::conceptnet_language_adapter()
                                         : training::TrainPlan::glotcc_language_adapter();
  preset.objective = detail::lm_objective(g);
  const auto plan = detail::resolve_plan(preset, c);
  if (plan.seq_length > g.max_positions)
    throw ConfigError("seq_length " + std::to_string(plan.seq_length) + " exceeds max_positions " +
                      std::to_string(g.max_positions));
  const auto tok = corpus::Tokenizer::load(c.tokenizer);
  const auto data = training::make_lm_data(tok, detail::non_empty_lines(c.train), detail::non_empty_lines(c.val),
                                           plan.objective, plan.seq_length);
  const auto dir = output_dir(c.out, "train-la");
  auto model = adapters::attach_adapter(base, c.adapter, c.seed);
  detail::print_trainable(os, model.parameters(), g);
  const auto report = training::train_language_adapter(model, data, plan);
  checkpoint::save_adapter((dir / "adapter.ckpt").string(), *model.language_adapters().front());
  training::write_report_csv((dir / "report.csv").string(), report);
  detail::write_summary(dir / "summary.json", report, plan, count_requires_grad(model.parameters()));
  os << "best validation loss " << report.best_value << " at step " << report.best_step << " of "
     << report.steps_run << " (" << report.wall_seconds << " s)\n";
  return kOk;
}

inline int cmd_train_task(const ExperimentConfig& c, std::ostream& os) {
  detail::require(c.tokenizer, "tokenizer (--tokenizer)");
  detail::require(c.train, "training data (--train)");
  detail::require(c.val, "validation data (--val)");
  const auto objective = task_objective(c.task);
  const auto plan = detail::resolve_plan(training::TrainPlan::task_adapter(objective), c);
  if (c.fuse && c.language_adapters.size() < 2) throw ConfigError("--fuse needs at least two language adapters");
  if (!c.fuse && c.language_adapters.size() > 1)
    throw ConfigError("several language adapters need --fuse to be combined");
  const auto base = detail::load_backbone(c.model);
  const auto& g = base->config();
  const auto view = c.fuse ? detail::fused_view(base, c.language_adapters, c.seed + 2)
                           : detail::language_view(base, c.language_adapters);
  const auto tok = corpus::Tokenizer::load(c.tokenizer);
  const auto labels = detail::task_labels(c.task, c.train);
  const auto length = detail::task_length(c, g);
  const auto train = detail::encode_task_file(c.task, c.train, tok, labels, length);
  const auto val = detail::encode_task_file(c.task, c.val, tok, labels, length);
  const auto dir = output_dir(c.out, "train-task");
  auto model = adapters::stack_task_adapter(view, c.task_adapter, c.seed);
  auto head = encoder::make_head<Real>(g, c.task == "ner" ? encoder::HeadKind::token : encoder::HeadKind::sequence,
                                       labels, c.seed + 1);
  auto params = model.parameters();
  for (const auto& e : head.params.entries()) params.push_back({"head." + e.name, e.tensor});
  detail::print_trainable(os, params, g);
  const auto report = training::train_task_adapter(model, head, train, val, plan);
  checkpoint::save_task((dir / "task.ckpt").string(), model, head);
  training::write_report_csv((dir / "report.csv").string(), report);
  detail::write_summary(dir / "summary.json", report, plan, count_requires_grad(params));
  const auto m = training::evaluate_task(model, head, val);
  detail::write_metrics_csv((dir / "metrics.csv").string(), m, c.task == "ner", labels);
  os << "best validation " << (c.task == "ner" ? "entity F1 " : "macro-F1 ") << report.best_value << " at step "
     << report.best_step << " of " << report.steps_run << " (" << report.wall_seconds << " s)\n";
  return kOk;
}

inline int cmd_finetune(const ExperimentConfig& c, std::ostream& os) {
  detail::require(c.tokenizer, "tokenizer (--tokenizer)");
  detail::require(c.train, "training data (--train)");
  detail::require(c.val, "validation data (--val)");
  if (!c.language_adapters.empty()) throw ConfigError("finetune trains a bare backbone; drop the language adapters");
  const auto base = detail::load_backbone(c.model);
  const auto& g = base->config();
  const auto tok = corpus::Tokenizer::load(c.tokenizer);
  Model model(base);
  model.apply_freeze_policy(adapters::FreezePolicy::nothing_frozen);
  if (c.task == "lm") {
    auto preset = training::TrainPlan::full_finetune_lm();
    preset.objective = detail::lm_objective(g);
    const auto plan = detail::resolve_plan(preset, c);
    if (plan.seq_length > g.max_positions)
      throw ConfigError("seq_length " + std::to_string(plan.seq_length) + " exceeds max_positions " +
                        std::to_string(g.max_positions));
    const auto data = training::make_lm_data(tok, detail::non_empty_lines(c.train), detail::non_empty_lines(c.val),
                                             plan.objective, plan.seq_length);
    const auto dir = output_dir(c.out, "finetune");
    detail::print_trainable(os, model.parameters(), g);
    const auto report = training::full_finetune(model, data, plan);
    checkpoint::save_encoder((dir / "encoder.ckpt").string(), model.base());
    training::write_report_csv((dir / "report.csv").string(), report);
    detail::write_summary(dir / "summary.json", report, plan, count_requires_grad(model.parameters()));
    os << "best validation loss " << report.best_value << " at step " << report.best_step << '\n';
    return kOk;
  }
  const auto plan = detail::resolve_plan(training::TrainPlan::full_finetune_task(task_objective(c.task), c.task == "tc"), c);
  const auto labels = detail::task_labels(c.task, c.train);
  const auto length = detail::task_length(c, g);
  const auto train = detail::encode_task_file(c.task, c.train, tok, labels, length);
  const auto val = detail::encode_task_file(c.task, c.val, tok, labels, length);
  const auto dir = output_dir(c.out, "finetune");
  auto head = encoder::make_head<Real>(g, c.task == "ner" ? encoder::HeadKind::token : encoder::HeadKind::sequence,
                                       labels, c.seed + 1);
  auto params = model.parameters();
  for (const auto& e : head.params.entries()) {
    e.tensor.set_requires_grad(true);
    params.push_back({"head." + e.name, e.tensor});
  }
  detail::print_trainable(os, params, g);
  const auto report = training::full_finetune(model, head, train, val, plan);
  checkpoint::save_encoder((dir / "encoder.ckpt").string(), model.base());
  checkpoint::save_head((dir / "head.ckpt").string(), g, head);
  training::write_report_csv((dir / "report.csv").string(), report);
  detail::write_summary(dir / "summary.json", report, plan, count_requires_grad(params));
  detail::write_metrics_csv((dir / "metrics.csv").string(), training::evaluate_task(model, head, val), c.task == "ner",
                            labels);
  os << "best validation metric " << report.best_value << " at step " << report.best_step << '\n';
  return kOk;
}

struct EvalArgs {
  std::string model, tokenizer, suite, data, out, task, head, predictions;
  std::vector<std::string> adapters;
  bool fuse = false;
  bool ids = false;
  std::size_t length = 0;
  std::size_t batch_size = 32;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& os) {
  if (a.suite != "pppl" && a.suite != "tc" && a.suite != "sa" && a.suite != "ner")
    throw ConfigError("unknown suite '" + a.suite + "' (expected pppl, tc, sa or ner)");
  detail::require(a.data, "evaluation data (--data)");
  const auto out = a.out.empty() ? output_dir("", "eval") / (a.suite + ".csv") : fs::path(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  const bool token_task = a.suite == "ner";

  if (!a.predictions.empty()) {
    if (a.suite == "pppl") throw ConfigError("--predictions applies to the tc, sa and ner suites");
    if (!a.model.empty()) throw ConfigError("--predictions scores a file; drop --model");
    evaluation::TaskMetrics m;
    std::vector<std::string> labels;
    if (token_task) {
      const auto gold = training::read_conll(a.data), pred = training::read_conll(a.predictions);
      if (gold.size() != pred.size())
        throw InputError("predictions hold " + std::to_string(pred.size()) + " sentences, gold " +
                         std::to_string(gold.size()));
      std::vector<std::vector<std::string>> p, g;
      for (std::size_t i = 0; i < gold.size(); ++i) {
        if (gold[i].tokens != pred[i].tokens)
          throw InputError("sentence " + std::to_string(i + 1) + " differs between predictions and gold");
        p.push_back(pred[i].tags);
        g.push_back(gold[i].tags);
      }
      m = evaluation::entity_f1(p, g);
    } else {
      const auto gold = training::read_sequence_tsv(a.data), pred = training::read_sequence_tsv(a.predictions);
      if (gold.size() != pred.size())
        throw InputError("predictions hold " + std::to_string(pred.size()) + " examples, gold " +
                         std::to_string(gold.size()));
      std::set<std::string> all;
      for (const auto* xs : {&gold, &pred})
        for (const auto& x : *xs) all.insert(x.label);
      labels.assign(all.begin(), all.end());
      std::vector<int> p, g;
      for (std::size_t i = 0; i < gold.size(); ++i) {
        p.push_back(training::detail::label_index(labels, pred[i].label));
        g.push_back(training::detail::label_index(labels, gold[i].label));
      }
      m = evaluation::macro_f1(p, g, labels.size());
    }
    detail::write_metrics_csv(out.string(), m, token_task, labels);
    os << (token_task ? "entity F1 " : "macro-F1 ") << (token_task ? m.f1 : m.macro_f1) << '\n';
    return kOk;
  }

  const auto base = detail::load_backbone(a.model);
  const auto& g = base->config();
  const auto view = detail::language_view(base, a.adapters);

  if (a.suite == "pppl") {
    if (!a.task.empty() || !a.head.empty()) throw ConfigError("the pppl suite scores the language model; drop --task/--head");
    if (a.fuse || a.adapters.size() > 1)
      throw ConfigError("the pppl suite scores one language adapter at a time (fusion is trained with a task)");
    std::vector<std::vector<std::int32_t>> sentences;
    if (a.ids) {
      sentences = detail::read_id_lines(a.data);
    } else {
      detail::require(a.tokenizer, "tokenizer (--tokenizer) or --ids");
      const auto tok = corpus::Tokenizer::load(a.tokenizer);
      for (const auto& s : detail::non_empty_lines(a.data)) sentences.push_back(tok.encode(s));
    }
    evaluation::PpplOptions opt;
    opt.batch_size = a.batch_size;
    const auto rep = evaluation::pseudo_perplexity(evaluation::ModelScorer<Real>(view), sentences, opt);
    evaluation::write_pppl_csv(out.string(), rep);
    os << std::setprecision(10) << "pseudo-perplexity " << rep.pseudo_perplexity << " over " << rep.total_tokens
       << " tokens\n";
    return kOk;
  }

  std::optional<Model> model;
  std::optional<Head> head;
  if (!a.task.empty()) {
    if (!a.head.empty()) throw ConfigError("give either --task or --head, not both");
    auto loaded = checkpoint::load_task(a.task, view);
    if (a.fuse != static_cast<bool>(loaded.model.fusion()))
      throw ConfigError(a.fuse ? "--fuse given but the task checkpoint carries no fusion"
                               : "the task checkpoint was trained on a fusion; pass --fuse");
    model.emplace(std::move(loaded.model));
    head.emplace(std::move(loaded.head));
  } else if (!a.head.empty()) {
    if (!a.adapters.empty() || a.fuse) throw ConfigError("--head evaluates a fully fine-tuned backbone without adapters");
    model.emplace(view);
    head.emplace(checkpoint::load_head<Real>(a.head, g));
  } else {
    throw ConfigError("suite " + a.suite + " needs --task, --head or --predictions");
  }
  if ((head->kind == encoder::HeadKind::token) != token_task)
    throw ConfigError("checkpoint head does not fit the " + a.suite + " suite");
  detail::require(a.tokenizer, "tokenizer (--tokenizer)");
  const auto tok = corpus::Tokenizer::load(a.tokenizer);
  const auto length = a.length ? a.length : std::min<std::size_t>(128, g.max_positions);
  const auto data = detail::encode_task_file(a.suite, a.data, tok, head->labels, length);
  const auto m = training::evaluate_task(*model, *head, data, a.batch_size);
  detail::write_metrics_csv(out.string(), m, token_task, head->labels);
  os << (token_task ? "entity F1 " : "macro-F1 ") << (token_task ? m.f1 : m.macro_f1) << '\n';
  return kOk;
}

struct AnalyzeArgs {
  std::string x, y, out;
};

inline int cmd_analyze(const AnalyzeArgs& a, std::ostream& os) {
  std::vector<double> xs, ys;
  evaluation::join_on_key(evaluation::read_key_value_csv(a.x), evaluation::read_key_value_csv(a.y), xs, ys);
  auto rep = evaluation::correlate(xs, ys);
  rep.x_name = fs::path(a.x).stem().string();
  rep.y_name = fs::path(a.y).stem().string();
  const auto out = a.out.empty() ? output_dir("", "analyze") / "correlation.csv" : fs::path(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  evaluation::write_correlation_csv(out.string(), rep);
  os << "n=" << rep.n << " pearson r=" << evaluation::format_double(rep.pearson.r)
     << " p=" << evaluation::format_double(rep.pearson.p) << " spearman r=" << evaluation::format_double(rep.spearman.r)
     << " p=" << evaluation::format_double(rep.spearman.p) << '\n';
  return kOk;
}

struct CountArgs {
  std::string geometry = "mbert";
  std::string backbone_config, adapter_config;
  std::vector<std::string> families;
  std::size_t reduction_factor = 16;
  std::size_t lora_rank = 8;
};

/// Closed-form trainable-parameter counts; nothing is allocated.
inline int cmd_count(const CountArgs& a, std::ostream& os) {
  encoder::EncoderConfig g;
  if (a.geometry == "mbert") g = encoder::EncoderConfig::mbert_base();
  else if (a.geometry == "xlmr") g = encoder::EncoderConfig::xlmr_base();
  else throw ConfigError("unknown geometry '" + a.geometry + "' (expected mbert or xlmr)");
  if (!a.backbone_config.empty()) from_json(read_json_file(a.backbone_config), g);
  g.validate();
  std::vector<adapters::AdapterSpec> specs;
  if (!a.adapter_config.empty()) {
    adapters::AdapterSpec s;
    from_json(read_json_file(a.adapter_config), s);
    specs.push_back(s);
  } else {
    for (const auto& f : a.families) {
      adapters::AdapterSpec s;
      s.family = adapters::family_from_string(f);
      s.reduction_factor = a.reduction_factor;
      s.lora_rank = a.lora_rank;
      specs.push_back(s);
    }
  }
  const auto backbone = encoder::backbone_parameter_count(g);
  os << "family,trainable,backbone,percent\n";
  for (const auto& s : specs) {
    const auto n = adapters::adapter_parameter_count(g, s);
    os << adapters::to_string(s.family) << ',' << n << ',' << backbone << ',' << std::fixed << std::setprecision(3)
       << 100.0 * static_cast<double>(n) / static_cast<double>(backbone) << std::defaultfloat << '\n';
  }
  return kOk;
}

// ---------------------------------------------------------------- entry point

/// Parses argv and runs one command. Errors are reported on `err`; the return value is the
/// process exit code.
inline int run(int argc, const char* const* argv, std::ostream& os = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Adapter training and evaluation for low-resource languages", "peft"};
  app.require_subcommand(1);

  VerbalizeArgs verbalize;
  auto* c_verbalize = app.add_subcommand("verbalize", "turn knowledge-graph triples into sentences");
  c_verbalize->add_option("--triples", verbalize.triples, "TSV: head, relation, tail, language")->required();
  c_verbalize->add_option("--lang", verbalize.lang, "language code to keep")->required();
  c_verbalize->add_option("--out", verbalize.out, "output directory");
  c_verbalize->add_option("--val-fraction", verbalize.val_fraction)->capture_default_str();
  c_verbalize->add_option("--seed", verbalize.seed)->capture_default_str();

  IngestArgs ingest;
  auto* c_ingest = app.add_subcommand("ingest", "clean, cap and split a one-document-per-line corpus");
  c_ingest->add_option("--source", ingest.spec.source)->required();
  c_ingest->add_option("--out", ingest.out, "output directory");
  c_ingest->add_option("--byte-cap", ingest.spec.byte_cap)->capture_default_str();
  c_ingest->add_option("--val-fraction", ingest.spec.val_fraction)->capture_default_str();
  c_ingest->add_option("--seed", ingest.spec.seed)->capture_default_str();
  c_ingest->add_flag("--keep-control", ingest.keep_control, "keep control characters");

  TokenizerArgs tokenizer;
  auto* c_tok = app.add_subcommand("train-tokenizer", "train a byte-level BPE tokenizer");
  c_tok->add_option("--corpus", tokenizer.corpora, "text file, one document per line")->required();
  c_tok->add_option("--vocab-size", tokenizer.vocab_size)->required();
  c_tok->add_option("--out", tokenizer.out, "tokenizer JSON path");

  InitArgs init;
  auto* c_init = app.add_subcommand("init", "write a randomly initialised backbone checkpoint");
  c_init->add_option("--config", init.config, "encoder config (JSON)");
  c_init->add_option("--tokenizer", init.tokenizer, "tokenizer fixing the vocabulary size");
  c_init->add_option("--vocab-size", init.vocab_size);
  c_init->add_option("--hidden", init.geometry.hidden)->capture_default_str();
  c_init->add_option("--layers", init.geometry.layers)->capture_default_str();
  c_init->add_option("--heads", init.geometry.heads)->capture_default_str();
  c_init->add_option("--ff-dim", init.geometry.ff_dim)->capture_default_str();
  c_init->add_option("--max-positions", init.geometry.max_positions)->capture_default_str();
  c_init->add_option("--dropout", init.geometry.dropout)->capture_default_str();
  c_init->add_option("--init-std", init.geometry.init_std)->capture_default_str();
  c_init->add_option("--objective", init.objective, "mlm or clm");
  c_init->add_option("--seed", init.seed)->capture_default_str();
  c_init->add_flag("--uniform", init.uniform, "zero the MLM head so every token gets probability 1/V");
  c_init->add_option("--out", init.out, "checkpoint path");

  detail::TrainFlags la_flags, task_flags, ft_flags;
  auto* c_la = app.add_subcommand("train-la", "train a language adapter on a frozen backbone");
  la_flags.add(*c_la, true, false);
  auto* c_task = app.add_subcommand("train-task", "train a task adapter over frozen language adapters");
  task_flags.add(*c_task, false, true);
  auto* c_ft = app.add_subcommand("finetune", "train every backbone parameter");
  ft_flags.add(*c_ft, false, false);

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on one suite");
  c_eval->add_option("--model", eval.model, "backbone checkpoint");
  c_eval->add_option("--adapter", eval.adapters, "language adapter checkpoint (repeatable)");
  c_eval->add_flag("--fuse", eval.fuse, "the task was trained on a fusion of the adapters");
  c_eval->add_option("--task", eval.task, "task checkpoint (adapter + head)");
  c_eval->add_option("--head", eval.head, "head checkpoint of a fully fine-tuned backbone");
  c_eval->add_option("--tokenizer", eval.tokenizer);
  c_eval->add_option("--suite", eval.suite, "pppl, tc, sa or ner")->required();
  c_eval->add_option("--data", eval.data, "sentences (pppl), label<TAB>text (tc, sa) or CoNLL (ner)")->required();
  c_eval->add_option("--predictions", eval.predictions, "score a prediction file against --data instead of a model");
  c_eval->add_flag("--ids", eval.ids, "pppl data holds whitespace-separated token ids");
  c_eval->add_option("--length", eval.length, "task sequence length");
  c_eval->add_option("--batch-size", eval.batch_size)->capture_default_str();
  c_eval->add_option("--out", eval.out, "report CSV");

  AnalyzeArgs analyze;
  auto* c_analyze = app.add_subcommand("analyze", "Pearson and Spearman correlation of two key,value tables");
  c_analyze->add_option("--x", analyze.x)->required();
  c_analyze->add_option("--y", analyze.y)->required();
  c_analyze->add_option("--out", analyze.out, "report CSV");

  CountArgs count;
  auto* c_count = app.add_subcommand("count", "trainable-parameter counts at a backbone geometry");
  c_count->add_option("--geometry", count.geometry, "mbert or xlmr")->capture_default_str();
  c_count->add_option("--backbone-config", count.backbone_config, "encoder config (JSON) applied over the geometry");
  c_count->add_option("--adapter-config", count.adapter_config, "adapter spec (JSON)");
  c_count->add_option("--family", count.families, "seq_bn, seq_bn_inv or lora (repeatable)");
  c_count->add_option("--reduction-factor", count.reduction_factor)->capture_default_str();
  c_count->add_option("--lora-rank", count.lora_rank)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, os, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (c_verbalize->parsed()) return cmd_verbalize(verbalize, os);
    if (c_ingest->parsed()) return cmd_ingest(ingest, os);
    if (c_tok->parsed()) return cmd_train_tokenizer(tokenizer, os);
    if (c_init->parsed()) return cmd_init(init, os);
    if (c_la->parsed()) return cmd_train_la(la_flags.resolve(), os);
    if (c_task->parsed()) return cmd_train_task(task_flags.resolve(), os);
    if (c_ft->parsed()) return cmd_finetune(ft_flags.resolve(), os);
    if (c_eval->parsed()) return cmd_eval(eval, os);
    if (c_analyze->parsed()) return cmd_analyze(analyze, os);
    if (c_count->parsed()) {
      if (count.families.empty() && count.adapter_config.empty()) count.families = {"seq_bn", "seq_bn_inv", "lora"};
      return cmd_count(count, os);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kUsage;
}

}  // namespace peft::cli
