#pragma once

// Node-level attribution.
//
// All approximate methods estimate the drop in the task metric when a node's
// activation is replaced by its corrupt-run value:
//   score_v = mean_batch sum_positions <A_clean(v) - A_corrupt(v), g_v>
// where g_v is dm/dA(v) on the clean run (NAP) or averaged along a straight
// path from corrupt (alpha = 0) to clean (alpha = 1) in input-embedding space
// (IG-inputs) or activation space (IG-activations). The exact oracle measures
// m(clean) - m(clean with v patched), so a metric linear in node activations
// makes NAP and the oracle coincide.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "calign/autodiff.hpp"
#include "calign/model.hpp"
#include "calign/tasks.hpp"

namespace calign {

enum class ScoreMethod : std::uint8_t { nap, nap_ig_inputs, nap_ig_acts, exact, aligned };

inline std::string_view to_string(ScoreMethod m) {
  switch (m) {
    case ScoreMethod::nap: return "nap";
    case ScoreMethod::nap_ig_inputs: return "nap_ig_inputs";
    case ScoreMethod::nap_ig_acts: return "nap_ig_acts";
    case ScoreMethod::exact: return "exact";
    case ScoreMethod::aligned: return "aligned";
  }
  return "?";
}

inline ScoreMethod parse_method(std::string_view name) {
  for (ScoreMethod m : {ScoreMethod::nap, ScoreMethod::nap_ig_inputs, ScoreMethod::nap_ig_acts, ScoreMethod::exact,
                        ScoreMethod::aligned})
    if (to_string(m) == name) return m;
  throw ConfigError("unknown attribution method '" + std::string(name) + "'");
}

// How a score vector orders nodes for circuit selection. Attribution scores
// rank by |score|; projected alignment scores rank by signed value, matching
// the order of the sigmoid mask they induce.
enum class RankMode : std::uint8_t { magnitude, signed_value };

inline constexpr const char* kNodeOrder = "canonical-v1";

struct ScoreVector {
  std::string model_id;
  TaskId task = TaskId::ioi_toy;
  ScoreMethod method = ScoreMethod::nap;
  std::vector<double> scores;

  RankMode rank_mode() const { return method == ScoreMethod::aligned ? RankMode::signed_value : RankMode::magnitude; }
  std::size_t size() const noexcept { return scores.size(); }
};

// Where the IG path is sampled: midpoints (k + 1/2)/steps, or right endpoints
// (k + 1)/steps, which puts the single steps == 1 sample on the clean input.
enum class IgRule : std::uint8_t { midpoint, clean_endpoint };

inline constexpr int kDefaultIgSteps = 16;

inline std::vector<double> ig_alphas(int steps, IgRule rule) {
  if (steps < 1) throw UsageError("integrated gradients: steps must be >= 1");
  std::vector<double> a(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k)
    a[static_cast<std::size_t>(k)] =
        (rule == IgRule::midpoint ? (k + 0.5) : static_cast<double>(k + 1)) / static_cast<double>(steps);
  return a;
}

namespace detail {

inline double dot(const ad::Tensor& a, const ad::Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// sum <clean - corrupt, grad> for one node.
inline double delta_dot(const ad::Tensor& clean, const ad::Tensor& corrupt, const ad::Tensor& grad) {
  double s = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) s += (clean[i] - corrupt[i]) * grad[i];
  return s;
}

inline ad::Tensor lerp(const ad::Tensor& clean, const ad::Tensor& corrupt, double alpha) {
  ad::Tensor out(clean.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * clean[i] + (1.0 - alpha) * corrupt[i];
  return out;
}

template <PatchableModel M>
ScoreVector make_scores(const M& model, const TaskBatch& batch, ScoreMethod method) {
  if (batch.empty()) throw UsageError("attribution: empty batch");
  return ScoreVector{std::string(model.model_id()), batch.task, method, std::vector<double>(model.node_count(), 0.0)};
}

inline void finish(ScoreVector& sv, std::size_t n) {
  for (double& s : sv.scores) s /= static_cast<double>(n);
}

// Gradient of the example metric w.r.t. every node activation, with the forward
// run on `embeddings` (a leaf requiring grad so every node sees a gradient).
template <PatchableModel M>
std::vector<ad::Tensor> node_grads_from_embeddings(const M& model, const ad::Tensor& embeddings, const TaskExample& ex) {
  ad::Tape tape;
  const ad::Var emb = tape.parameter(embeddings);
  const TapedForward f = model.forward_embedded(tape, emb, nullptr);
  tape.backward(logit_difference(f.logits, ex));
  std::vector<ad::Tensor> grads;
  grads.reserve(f.nodes.size());
  for (const ad::Var& v : f.nodes) grads.push_back(v.grad());
  return grads;
}

template <PatchableModel M>
ad::Tensor token_embeddings(const M& model, std::span<const int> tokens) {
  ad::Tape tape;
  return model.embed(tape, tokens).value();
}

}  // namespace detail

template <PatchableModel M>
ScoreVector nap(const M& model, const TaskBatch& batch) {
  ScoreVector sv = detail::make_scores(model, batch, ScoreMethod::nap);
  for (const TaskExample& ex : batch.examples) {
    const ActivationRecord clean = forward_capture(model, ex.clean);
    const ActivationRecord corrupt = forward_capture(model, ex.corrupt);
    const auto grads = detail::node_grads_from_embeddings(model, detail::token_embeddings(model, ex.clean), ex);
    for (std::size_t v = 0; v < sv.size(); ++v)
      sv.scores[v] += detail::delta_dot(clean.node(v), corrupt.node(v), grads[v]);
  }
  detail::finish(sv, batch.size());
  return sv;
}

template <PatchableModel M>
ScoreVector nap_ig_inputs(const M& model, const TaskBatch& batch, int steps = kDefaultIgSteps,
                          IgRule rule = IgRule::midpoint) {
  const auto alphas = ig_alphas(steps, rule);
  ScoreVector sv = detail::make_scores(model, batch, ScoreMethod::nap_ig_inputs);
  for (const TaskExample& ex : batch.examples) {
    const ActivationRecord clean = forward_capture(model, ex.clean);
    const ActivationRecord corrupt = forward_capture(model, ex.corrupt);
    const ad::Tensor e_clean = detail::token_embeddings(model, ex.clean);
    const ad::Tensor e_corrupt = detail::token_embeddings(model, ex.corrupt);
    std::vector<ad::Tensor> avg;
    for (double a : alphas) {
      const auto grads = detail::node_grads_from_embeddings(model, detail::lerp(e_clean, e_corrupt, a), ex);
      if (avg.empty()) {
        avg = grads;
      } else {
        for (std::size_t v = 0; v < grads.size(); ++v)
          for (std::size_t i = 0; i < grads[v].size(); ++i) avg[v][i] += grads[v][i];
      }
    }
    for (auto& g : avg)
      for (double& x : g.data()) x /= static_cast<double>(steps);
    for (std::size_t v = 0; v < sv.size(); ++v)
      sv.scores[v] += detail::delta_dot(clean.node(v), corrupt.node(v), avg[v]);
  }
  detail::finish(sv, batch.size());
  return sv;
}

// Activation-space IG. Nodes are grouped into stages of mutually independent
// nodes (a model supplies `node_stages()`, otherwise each node is its own
// stage). For each stage and path point, only that stage's nodes are set to
// the interpolated activation, so their gradients include every downstream
// path, as in NAP.
template <class M>
concept StagedModel = PatchableModel<M> && requires(const M& m) {
  { m.node_stages() } -> std::convertible_to<std::vector<std::vector<std::size_t>>>;
};

template <PatchableModel M>
std::vector<std::vector<std::size_t>> node_stages(const M& model) {
  if constexpr (StagedModel<M>) {
    return model.node_stages();
  } else {
    std::vector<std::vector<std::size_t>> stages(model.node_count());
    for (std::size_t v = 0; v < stages.size(); ++v) stages[v] = {v};
    return stages;
  }
}

// Heads of one layer form a stage, followed by that layer's MLP.
inline std::vector<std::vector<std::size_t>> transformer_stages(const ModelConfig& cfg) {
  std::vector<std::vector<std::size_t>> stages;
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::vector<std::size_t> heads;
    for (int h = 0; h < cfg.n_heads; ++h) heads.push_back(node_index(cfg, {l, NodeKind::attn_head, h}));
    stages.push_back(std::move(heads));
    stages.push_back({node_index(cfg, {l, NodeKind::mlp, 0})});
  }
  return stages;
}

inline std::vector<std::vector<std::size_t>> node_stages(const Transformer& model) {
  return transformer_stages(model.config());
}

template <PatchableModel M>
ScoreVector nap_ig_acts(const M& model, const TaskBatch& batch, int steps = kDefaultIgSteps,
                        IgRule rule = IgRule::midpoint) {
  const auto alphas = ig_alphas(steps, rule);
  const auto stages = node_stages(model);
  ScoreVector sv = detail::make_scores(model, batch, ScoreMethod::nap_ig_acts);
  for (const TaskExample& ex : batch.examples) {
    const ActivationRecord clean = forward_capture(model, ex.clean);
    const ActivationRecord corrupt = forward_capture(model, ex.corrupt);
    const ad::Tensor e_clean = detail::token_embeddings(model, ex.clean);
    std::vector<ad::Tensor> avg(sv.size());
    for (const auto& stage : stages) {
      for (double a : alphas) {
        ad::Tape tape;
        PatchSet patches(model.node_count());
        std::vector<ad::Var> leaves;
        for (std::size_t v : stage) {
          leaves.push_back(tape.parameter(detail::lerp(clean.node(v), corrupt.node(v), a)));
          patches.set(v, leaves.back());
        }
        const TapedForward f = model.forward_embedded(tape, tape.constant(e_clean), &patches);
        tape.backward(logit_difference(f.logits, ex));
        for (std::size_t j = 0; j < stage.size(); ++j) {
          const ad::Tensor g = leaves[j].grad();
          ad::Tensor& acc = avg[stage[j]];
          if (acc.empty()) {
            acc = g;
          } else {
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
          }
        }
      }
    }
    for (auto& g : avg)
      for (double& x : g.data()) x /= static_cast<double>(steps);
    for (std::size_t v = 0; v < sv.size(); ++v)
      sv.scores[v] += detail::delta_dot(clean.node(v), corrupt.node(v), avg[v]);
  }
  detail::finish(sv, batch.size());
  return sv;
}

// Ground truth: one extra forward per node and example.
template <PatchableModel M>
ScoreVector exact_patch_oracle(const M& model, const TaskBatch& batch) {
  ScoreVector sv = detail::make_scores(model, batch, ScoreMethod::exact);
  for (const TaskExample& ex : batch.examples) {
    const ActivationRecord clean = forward_capture(model, ex.clean);
    const ActivationRecord corrupt = forward_capture(model, ex.corrupt);
    const double m_clean = logit_difference(clean.logits, ex);
    for (std::size_t v = 0; v < sv.size(); ++v) {
      ad::Tape tape;
      PatchSet patches(model.node_count());
      patches.set(v, tape.constant(corrupt.nodes[v]));
      const TapedForward f = model.forward(tape, ex.clean, &patches);
      sv.scores[v] += m_clean - logit_difference(f.logits.value(), ex);
    }
  }
  detail::finish(sv, batch.size());
  return sv;
}

template <PatchableModel M>
ScoreVector attribute(const M& model, const TaskBatch& batch, ScoreMethod method, int ig_steps = kDefaultIgSteps) {
  switch (method) {
    case ScoreMethod::nap: return nap(model, batch);
    case ScoreMethod::nap_ig_inputs: return nap_ig_inputs(model, batch, ig_steps);
    case ScoreMethod::nap_ig_acts: return nap_ig_acts(model, batch, ig_steps);
    case ScoreMethod::exact: return exact_patch_oracle(model, batch);
    case ScoreMethod::aligned: break;
  }
  throw UsageError("attribute: 'aligned' scores come from an alignment, not attribution");
}

// Spearman rank correlation with average ranks for ties.
inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw UsageError("spearman: need two equal-length series of >= 2");
  auto ranks = [](std::span<const double> x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < order.size();) {
      std::size_t j = i;
      while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  if (da == 0.0 || db == 0.0) return 0.0;
  return num / std::sqrt(da * db);
}

}  // namespace calign
