#pragma once

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "peft/adapters/adapted_model.hpp"
#include "peft/corpus/batches.hpp"
#include "peft/evaluation/metrics.hpp"
#include "peft/training/language.hpp"

namespace peft::training {

using encoder::ClassificationHead;
using encoder::HeadKind;

struct SequenceExample {
  std::string label;
  std::string text;
};

struct TokenExample {
  std::vector<std::string> tokens;
  std::vector<std::string> tags;
};

/// One example per line: label<TAB>text.
inline std::vector<SequenceExample> read_sequence_tsv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read '" + path + "'");
  std::vector<SequenceExample> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0)
      throw InputError(path + ":" + std::to_string(n) + ": expected label<TAB>text");
    out.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  if (out.empty()) throw InputError("'" + path + "' holds no examples");
  return out;
}

/// CoNLL-style: one "token tag" pair per line (tab or space separated, tag last), blank
/// lines between sentences, -DOCSTART- lines ignored.
inline std::vector<TokenExample> read_conll(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read '" + path + "'");
  std::vector<TokenExample> out;
  TokenExample cur;
  auto flush = [&] {
    if (!cur.tokens.empty()) out.push_back(std::move(cur));
    cur = {};
  };
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      flush();
      continue;
    }
    if (line.rfind("-DOCSTART-", 0) == 0) continue;
    std::istringstream fields(line);
    std::vector<std::string> f;
    for (std::string s; fields >> s;) f.push_back(s);
    if (f.size() < 2) throw InputError(path + ":" + std::to_string(n) + ": expected token and tag");
    cur.tokens.push_back(f.front());
    cur.tags.push_back(f.back());
  }
  flush();
  if (out.empty()) throw InputError("'" + path + "' holds no sentences");
  return out;
}

inline std::vector<std::string> label_set(const std::vector<SequenceExample>& xs) {
  std::set<std::string> s;
  for (const auto& x : xs) s.insert(x.label);
  return {s.begin(), s.end()};
}

/// Tags in sorted order, with "O" first when present.
inline std::vector<std::string> label_set(const std::vector<TokenExample>& xs) {
  std::set<std::string> s;
  for (const auto& x : xs) s.insert(x.tags.begin(), x.tags.end());
  std::vector<std::string> out;
  if (s.erase("O")) out.push_back("O");
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

/// Tokenised task examples, each [CLS] ids [SEP] within `length`.
struct TaskData {
  HeadKind kind = HeadKind::sequence;
  std::vector<std::string> labels;
  std::size_t length = 0;
  std::vector<std::vector<std::int32_t>> ids;
  std::vector<int> sequence_labels;                    // sequence: one per example
  std::vector<std::vector<std::int32_t>> token_labels;  // token: per position, kIgnore off first subwords
  std::vector<std::vector<std::size_t>> word_starts;    // token: position of each word's first subword, 0 if cut
  std::vector<std::vector<std::string>> gold_tags;      // token: word-level gold

  std::size_t size() const { return ids.size(); }
};

namespace detail {

inline int label_index(const std::vector<std::string>& labels, const std::string& l) {
  const auto it = std::find(labels.begin(), labels.end(), l);
  if (it == labels.end()) throw InputError("label '" + l + "' is outside the head's label set");
  return static_cast<int>(it - labels.begin());
}

}  // namespace detail

/// Text is truncated to length − 2 ids.
inline TaskData encode_sequence_data(const corpus::Tokenizer& tok, const std::vector<SequenceExample>& xs,
                                     const std::vector<std::string>& labels, std::size_t length) {
  if (length < 3) throw ConfigError("task sequence length must be >= 3");
  TaskData d;
  d.kind = HeadKind::sequence;
  d.labels = labels;
  d.length = length;
  for (const auto& x : xs) {
    auto body = tok.encode(x.text);
    body.resize(std::min(body.size(), length - 2));
    std::vector<std::int32_t> row = {corpus::Tokenizer::kCls};
    row.insert(row.end(), body.begin(), body.end());
    row.push_back(corpus::Tokenizer::kSep);
    d.ids.push_back(std::move(row));
    d.sequence_labels.push_back(detail::label_index(labels, x.label));
  }
  return d;
}

/// Each word is tokenised on its own; its tag is predicted at its first subword. Words past
/// the window are dropped from training and predicted as "O".
inline TaskData encode_token_data(const corpus::Tokenizer& tok, const std::vector<TokenExample>& xs,
                                  const std::vector<std::string>& labels, std::size_t length) {
  if (length < 3) throw ConfigError("task sequence length must be >= 3");
  TaskData d;
  d.kind = HeadKind::token;
  d.labels = labels;
  d.length = length;
  for (const auto& x : xs) {
    if (x.tokens.size() != x.tags.size()) throw InputError("token example has mismatched tokens and tags");
    std::vector<std::int32_t> row = {corpus::Tokenizer::kCls}, lab = {corpus::kIgnore};
    std::vector<std::size_t> starts;
    for (std::size_t w = 0; w < x.tokens.size(); ++w) {
      const int label = detail::label_index(labels, x.tags[w]);
      const auto pieces = tok.encode(x.tokens[w]);
      if (pieces.empty() || row.size() + pieces.size() > length - 1) {
        starts.push_back(0);
        continue;
      }
      starts.push_back(row.size());
      for (std::size_t k = 0; k < pieces.size(); ++k) {
        row.push_back(pieces[k]);
        lab.push_back(k == 0 ? label : corpus::kIgnore);
      }
    }
    row.push_back(corpus::Tokenizer::kSep);
    lab.push_back(corpus::kIgnore);
    d.ids.push_back(std::move(row));
    d.token_labels.push_back(std::move(lab));
    d.word_starts.push_back(std::move(starts));
    d.gold_tags.push_back(x.tags);
  }
  return d;
}

struct TaskBatch {
  encoder::TokenBatch input;
  std::vector<std::int32_t> labels;  // sequence: [B]; token: [B·T] with kIgnore
};

inline TaskBatch task_batch(const TaskData& d, const std::vector<std::size_t>& examples) {
  std::vector<const std::vector<std::int32_t>*> rows;
  for (auto i : examples) rows.push_back(&d.ids.at(i));
  TaskBatch b;
  b.input = corpus::pad_rows(rows, d.length);
  if (d.kind == HeadKind::sequence) {
    for (auto i : examples) b.labels.push_back(d.sequence_labels[i]);
  } else {
    b.labels.assign(examples.size() * d.length, corpus::kIgnore);
    for (std::size_t r = 0; r < examples.size(); ++r) {
      const auto& l = d.token_labels[examples[r]];
      std::copy(l.begin(), l.end(), b.labels.begin() + static_cast<std::ptrdiff_t>(r * d.length));
    }
  }
  return b;
}

template <class T>
ad::Tensor<T> task_logits(const adapters::AdaptedModel<T>& model, const ClassificationHead<T>& head,
                          const encoder::TokenBatch& input, const encoder::ForwardContext<T>& ctx = {}) {
  auto hidden = model.encode(input, ctx);
  if (head.kind == HeadKind::sequence) return encoder::classify(model.base(), head, hidden);
  return ad::reshape(encoder::token_classify(model.base(), head, hidden), {input.batch * input.length, head.classes()});
}

template <class T>
ad::Tensor<T> task_loss(const adapters::AdaptedModel<T>& model, const ClassificationHead<T>& head, const TaskBatch& b,
                        const encoder::ForwardContext<T>& ctx = {}) {
  return ad::softmax_cross_entropy(task_logits(model, head, b.input, ctx), b.labels, corpus::kIgnore);
}

struct TaskPredictions {
  std::vector<int> classes;                     // sequence
  std::vector<std::vector<std::string>> tags;   // token, word level
  double loss = 0.0;                            // mean over labelled positions
};

/// Argmax predictions (ties to the lowest class id) and mean loss, gradients off.
template <class T>
TaskPredictions predict(const adapters::AdaptedModel<T>& model, const ClassificationHead<T>& head, const TaskData& d,
                        std::size_t batch_size = 32) {
  if (d.size() == 0) throw ConfigError("task data is empty");
  ad::NoGradGuard ng;
  TaskPredictions out;
  double total = 0.0;
  std::size_t count = 0;
  const auto c = head.classes();
  for (std::size_t s = 0; s < d.size(); s += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(d.size(), s + batch_size); ++i) idx.push_back(i);
    const auto b = task_batch(d, idx);
    const auto logits = task_logits(model, head, b.input);
    std::size_t n = 0;
    for (auto l : b.labels) n += l != corpus::kIgnore;
    if (n > 0) {
      total += static_cast<double>(ad::softmax_cross_entropy(logits, b.labels, corpus::kIgnore).item()) *
               static_cast<double>(n);
      count += n;
    }
    auto lv = logits.values();
    auto argmax = [&](std::size_t row) {
      const auto* p = lv.data() + row * c;
      return static_cast<int>(std::max_element(p, p + c) - p);
    };
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (d.kind == HeadKind::sequence) {
        out.classes.push_back(argmax(r));
      } else {
        std::vector<std::string> tags;
        for (auto pos : d.word_starts[idx[r]])
          tags.push_back(pos == 0 ? std::string("O") : head.labels[static_cast<std::size_t>(argmax(r * d.length + pos))]);
        out.tags.push_back(std::move(tags));
      }
    }
  }
  out.loss = count ? total / static_cast<double>(count) : 0.0;
  return out;
}

/// Macro-F1 for sequence tasks, entity-level scores for token tasks.
template <class T>
evaluation::TaskMetrics evaluate_task(const adapters::AdaptedModel<T>& model, const ClassificationHead<T>& head,
                                      const TaskData& d, std::size_t batch_size = 32) {
  const auto p = predict(model, head, d, batch_size);
  if (d.kind == HeadKind::sequence) return evaluation::macro_f1(p.classes, d.sequence_labels, d.labels.size());
  return evaluation::entity_f1(p.tags, d.gold_tags);
}

/// The number used for checkpoint selection: macro-F1 or entity F1.
inline double selection_metric(const evaluation::TaskMetrics& m, HeadKind kind) {
  return kind == HeadKind::sequence ? m.macro_f1 : m.f1;
}

namespace detail {

template <class T>
TrainReport train_task(const adapters::AdaptedModel<T>& model, const ClassificationHead<T>& head, const TaskData& train,
                       const TaskData& val, const TrainPlan& plan) {
  plan.validate();
  const auto want = head.kind == HeadKind::sequence ? TrainObjective::sequence_classification
                                                    : TrainObjective::token_classification;
  if (plan.objective != want)
    throw ConfigError("plan objective " + to_string(plan.objective) + " does not match the " +
                      (head.kind == HeadKind::sequence ? "sequence" : "token") + " head");
  for (const auto* d : {&train, &val}) {
    if (d->kind != head.kind) throw ConfigError("task data kind does not match the head");
    if (d->labels != head.labels) throw ConfigError("task data labels differ from the head's labels");
    if (d->length > model.config().max_positions)
      throw ConfigError("task sequence length " + std::to_string(d->length) + " exceeds max_positions " +
                        std::to_string(model.config().max_positions));
  }
  if (train.size() == 0) throw ConfigError("training set is empty");
  if (val.size() == 0) throw ConfigError("validation set is empty");
  model.apply_freeze_policy(plan.freeze_policy);
  for (const auto& e : head.params.entries()) e.tensor.set_requires_grad(true);
  auto params = model.parameters();
  for (const auto& e : head.params.entries()) params.push_back({"head." + e.name, e.tensor});

  LoopHooks<T> hooks;
  hooks.loss = [&](std::size_t step) {
    auto rng = step_rng(stream_seed(plan.seed, kBatchStream), plan.overfit_one_batch ? 1 : step);
    std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
    std::vector<std::size_t> idx(plan.batch_size);
    for (auto& i : idx) i = pick(rng);
    auto drop = step_rng(stream_seed(plan.seed, kDropoutStream), step);
    encoder::ForwardContext<T> ctx;
    ctx.training = true;
    ctx.rng = &drop;
    return task_loss(model, head, task_batch(train, idx), ctx);
  };
  hooks.evaluate = [&] {
    const auto p = predict(model, head, val, plan.batch_size);
    const auto m = val.kind == HeadKind::sequence ? evaluation::macro_f1(p.classes, val.sequence_labels, val.labels.size())
                                                  : evaluation::entity_f1(p.tags, val.gold_tags);
    return EvalResult{p.loss, selection_metric(m, val.kind)};
  };
  hooks.select = Select::highest_metric;
  return run_training(params, plan, hooks);
}

}  // namespace detail

/// Trains the task adapter (plus fusion, when present) and the head; backbone and language
/// adapters stay frozen. Keeps the best-validation-metric state.
template <class T>
TrainReport train_task_adapter(const adapters::AdaptedModel<T>& model, const ClassificationHead<T>& head,
                               const TaskData& train, const TaskData& val, const TrainPlan& plan) {
  if (plan.freeze_policy != FreezePolicy::base_and_la_frozen && plan.freeze_policy != FreezePolicy::base_frozen)
    throw ConfigError("task-adapter training needs freeze policy base+LA_frozen or base_frozen, got " +
                      adapters::to_string(plan.freeze_policy));
  if (!model.task_adapter()) throw ConfigError("model has no task adapter");
  if (plan.freeze_policy == FreezePolicy::base_frozen && !model.language_adapters().empty())
    throw ConfigError("freeze policy base_frozen would train the language adapters; use base+LA_frozen");
  return detail::train_task(model, head, train, val, plan);
}

/// Task training of every backbone parameter and the head, without adapters.
template <class T>
TrainReport full_finetune(const adapters::AdaptedModel<T>& model, const ClassificationHead<T>& head,
                          const TaskData& train, const TaskData& val, const TrainPlan& plan) {
  if (plan.freeze_policy != FreezePolicy::nothing_frozen)
    throw ConfigError("full fine-tuning needs freeze policy nothing_frozen, got " +
                      adapters::to_string(plan.freeze_policy));
  if (!model.language_adapters().empty() || model.fusion() || model.task_adapter())
    throw ConfigError("full fine-tuning runs on a bare backbone");
  return detail::train_task(model, head, train, val, plan);
}

}  // namespace peft::training
