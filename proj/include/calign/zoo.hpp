#pragma once

// Toy-model zoo: trains a transformer on the mixture of all six toy tasks and
// caches the weights on disk, keyed by (config, task mix id, seed).

#include <cstdlib>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "calign/autodiff.hpp"
#include "calign/model.hpp"
#include "calign/optim.hpp"
#include "calign/tasks.hpp"

namespace calign {

inline constexpr const char* kMultitaskId = "multitask-v1";
inline constexpr double kRequiredAccuracy = 0.95;

struct PretrainConfig {
  int max_steps = 8000;
  int batch_size = 24;
  double lr = 3e-3;
  double grad_clip = 1.0;
  int eval_every = 250;
  std::size_t eval_examples = 200;
  double stop_accuracy = 0.99;  // early stop once every task reaches this
  std::uint64_t data_seed = 0x5EED;
};

struct PretrainResult {
  TransformerWeights weights;
  std::map<TaskId, double> accuracy;
  int steps = 0;
};

// Fraction of clean prompts whose answer-position argmax is the correct token.
inline double task_accuracy(const Transformer& model, const TaskBatch& batch) {
  std::size_t hits = 0;
  for (const TaskExample& ex : batch.examples) {
    ad::Tape tape;
    const auto out = model.forward(tape, ex.clean);
    const ad::Tensor& lg = out.logits.value();
    const std::size_t v = lg.dim(1);
    std::size_t best = 0;
    for (std::size_t j = 1; j < v; ++j)
      if (lg(ex.answer_pos, j) > lg(ex.answer_pos, best)) best = j;
    hits += static_cast<int>(best) == ex.correct ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(batch.size());
}

inline std::map<TaskId, double> evaluate_accuracy(const Transformer& model, std::size_t n, std::uint64_t seed) {
  std::map<TaskId, double> acc;
  for (TaskId t : kAllTasks) acc[t] = task_accuracy(model, generate(t, n, seed));
  return acc;
}

inline PretrainResult pretrain(const ModelConfig& cfg, const PretrainConfig& pc = {}) {
  if (cfg.vocab_size < vocab::kSize || cfg.max_seq_len < 12) {
    throw ConfigError("pretrain: toy tasks need vocab_size >= 64 and max_seq_len >= 12");
  }
  PretrainResult result{TransformerWeights::init(cfg), {}, 0};
  auto& params = result.weights.params;
  const ParamIndex idx(cfg);
  Adam opt(pc.lr);
  std::mt19937_64 rng(pc.data_seed ^ cfg.seed);
  std::uniform_int_distribution<std::size_t> pick_task(0, kAllTasks.size() - 1);
  std::bernoulli_distribution pick_corrupt(0.5);

  for (int step = 1; step <= pc.max_steps; ++step) {
    ad::Tape tape;
    std::vector<ad::Var> w;
    w.reserve(params.size());
    for (const auto& p : params) w.push_back(tape.parameter(std::shared_ptr<const ad::Tensor>(p)));
    std::optional<ad::Var> total;
    for (int b = 0; b < pc.batch_size; ++b) {
      const TaskExample ex = generate_one(kAllTasks[pick_task(rng)], rng);
      const bool corrupt = pick_corrupt(rng);
      const auto& toks = corrupt ? ex.corrupt : ex.clean;
      const auto target = static_cast<std::size_t>(corrupt ? ex.incorrect : ex.correct);
      const ad::Var emb = ad::embed_lookup(w[idx.tok_emb()], toks);
      const TapedForward f = run_transformer(tape, cfg, idx, w, emb, nullptr);
      const ad::Var row = ad::slice(f.logits, 0, ex.answer_pos, ex.answer_pos + 1);
      const ad::Var nll = ad::scale(ad::slice(ad::log_softmax_last_dim(row), 1, target, target + 1), -1.0);
      total = total ? ad::add(*total, nll) : nll;
    }
    const ad::Var loss = ad::scale(*total, 1.0 / pc.batch_size);
    tape.backward(loss);

    std::vector<ad::Tensor> grads;
    grads.reserve(w.size());
    double sq = 0.0;
    for (const ad::Var& v : w) {
      grads.push_back(v.grad());
      for (double g : grads.back().data()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    const double clip = norm > pc.grad_clip ? pc.grad_clip / norm : 1.0;
    // Linear decay over the final half keeps late steps from undoing accuracy.
    const double frac = static_cast<double>(step) / pc.max_steps;
    opt.set_lr(frac < 0.5 ? pc.lr : pc.lr * 2.0 * (1.0 - frac) + 1e-5);
    opt.begin_step();
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (double& g : grads[i].data()) g *= clip;
      opt.update(i, params[i]->data(), grads[i].data());
    }
    result.steps = step;

    if (step % pc.eval_every == 0 || step == pc.max_steps) {
      const Transformer snapshot(result.weights);
      result.accuracy = evaluate_accuracy(snapshot, pc.eval_examples, pc.data_seed + 1);
      bool done = true;
      for (const auto& [task, a] : result.accuracy) done = done && a >= pc.stop_accuracy;
      if (done) break;
    }
  }
  return result;
}

inline std::filesystem::path default_cache_root() {
  if (const char* env = std::getenv("CALIGN_CACHE"); env && *env) return env;
  return std::filesystem::current_path() / "calign-cache";
}

inline std::filesystem::path weight_cache_path(const std::filesystem::path& root, const ModelConfig& cfg) {
  return root / (Transformer::default_id(cfg) + "-" + kMultitaskId + ".calw");
}

inline std::string trained_model_id(const ModelConfig& cfg) {
  return Transformer::default_id(cfg) + "-" + kMultitaskId;
}

// Loads the cached multitask model for `cfg`; trains and caches it when absent
// and `allow_train` is set. Training that misses the accuracy bar is an error.
inline Transformer obtain_model(const ModelConfig& cfg, const std::filesystem::path& cache_root, bool allow_train,
                                const PretrainConfig& pc = {}) {
  const auto path = weight_cache_path(cache_root, cfg);
  if (std::filesystem::exists(path)) {
    return Transformer(load_weights(path, cfg, kMultitaskId), trained_model_id(cfg));
  }
  if (!allow_train) {
    throw MissingArtifactError("no cached weights at " + path.string() + " (rerun with --train)");
  }
  PretrainResult r = pretrain(cfg, pc);
  for (const auto& [task, acc] : r.accuracy) {
    if (acc < kRequiredAccuracy) {
      throw NumericError("pretrain: " + std::string(to_string(task)) + " accuracy " + std::to_string(acc) +
                         " below required " + std::to_string(kRequiredAccuracy) + " for " +
                         Transformer::default_id(cfg));
    }
  }
  save_weights(path, r.weights, kMultitaskId);
  return Transformer(r.weights, trained_model_id(cfg));
}

}  // namespace calign
