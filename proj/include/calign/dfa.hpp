#pragma once

// Differentiable faithfulness alignment.
//
// Source-model node scores s_S (z-scored per task) are projected into the
// target model by a learned matrix W: s_hat = s_S W, mask = sigmoid(s_hat).
// Each target node j is run at m_j * A_clean(j) + (1 - m_j) * A_corrupt(j) on
// the clean prompt, and W minimises
//   KL(P_clean || P_intervened) at the answer position + lambda * mean(mask).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "calign/attribution.hpp"
#include "calign/autodiff.hpp"
#include "calign/errors.hpp"
#include "calign/model.hpp"
#include "calign/optim.hpp"
#include "calign/tasks.hpp"

namespace calign {

inline constexpr const char* kStandardization = "zscore-v1";

struct AlignmentMatrix {
  std::size_t rows = 0;  // source nodes
  std::size_t cols = 0;  // target nodes
  std::vector<double> w;  // row-major
  std::string source_model_id;
  std::string target_model_id;
  std::uint64_t init_seed = 0;
  bool trained = false;

  double& operator()(std::size_t r, std::size_t c) { return w[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return w[r * cols + c]; }

  ad::Tensor tensor() const { return ad::Tensor({rows, cols}, w); }

  void validate() const {
    if (w.size() != rows * cols) throw ShapeError("alignment: storage does not match " + std::to_string(rows) + "x" +
                                                  std::to_string(cols));
    for (double x : w)
      if (!std::isfinite(x)) throw NumericError("alignment: non-finite entry");
  }
};

// i.i.d. N(0, 1/sqrt(rows)); the random-W control is exactly this, untrained.
inline AlignmentMatrix init_alignment(std::size_t rows, std::size_t cols, std::string source_id,
                                      std::string target_id, std::uint64_t seed) {
  if (rows == 0 || cols == 0) throw ShapeError("alignment: empty registry");
  AlignmentMatrix a{rows, cols, std::vector<double>(rows * cols), std::move(source_id), std::move(target_id), seed,
                    false};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(rows)));
  for (double& x : a.w) x = nd(rng);
  return a;
}

// Zero mean, unit (population) variance. A constant vector maps to zeros.
inline std::vector<double> standardize(std::span<const double> s) {
  if (s.empty()) throw UsageError("standardize: empty score vector");
  const double n = static_cast<double>(s.size());
  const double mean = std::accumulate(s.begin(), s.end(), 0.0) / n;
  double var = 0.0;
  for (double x : s) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(s.size(), 0.0);
  if (sd > 0.0)
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = (s[i] - mean) / sd;
  return out;
}

inline std::vector<double> project(std::span<const double> s, const AlignmentMatrix& w) {
  if (s.size() != w.rows) {
    throw ShapeError("project: score vector has " + std::to_string(s.size()) + " entries, alignment expects " +
                     std::to_string(w.rows));
  }
  std::vector<double> out(w.cols, 0.0);
  for (std::size_t i = 0; i < w.rows; ++i)
    for (std::size_t j = 0; j < w.cols; ++j) out[j] += s[i] * w(i, j);
  return out;
}

inline std::vector<double> soft_mask(std::span<const double> projected) {
  std::vector<double> m(projected.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!std::isfinite(projected[i])) throw NumericError("soft_mask: non-finite projected score");
    m[i] = ad::detail::stable_sigmoid(projected[i]);
  }
  return m;
}

// The predicted target circuit: standardized source scores pushed through W.
inline ScoreVector predict_scores(const AlignmentMatrix& w, const ScoreVector& source) {
  return ScoreVector{w.target_model_id, source.task, ScoreMethod::aligned, project(standardize(source.scores), w)};
}

// ------------------------------------------------------------ intervention

// Where A_clean(j) comes from in the interpolation.
//   live   -> node j's activation computed in the intervened pass itself, so a
//             kept node sees the (partly corrupted) upstream state, exactly as
//             in hard circuit evaluation
//   cached -> node j's activation from the unpatched clean run; downstream
//             nodes then ignore upstream masks and only direct effects count
enum class CleanSource : std::uint8_t { live, cached };

inline std::string_view to_string(CleanSource c) { return c == CleanSource::live ? "live" : "cached"; }

inline CleanSource parse_clean_source(std::string_view name) {
  if (name == "live") return CleanSource::live;
  if (name == "cached") return CleanSource::cached;
  throw ConfigError("unknown clean activation source '" + std::string(name) + "'");
}

// Clean-prompt forward with every node interpolated by its mask entry.
// `mask` is a [n] or [1, n] tape value.
template <PatchableModel M>
TapedForward intervened_forward(ad::Tape& tape, const M& model, const ad::Var& mask, const ActivationRecord& clean,
                                const ActivationRecord& corrupt, std::span<const int> clean_tokens,
                                CleanSource source = CleanSource::live) {
  const std::size_t n = model.node_count();
  if (mask.value().size() != n) {
    throw ShapeError("intervened_forward: mask has " + std::to_string(mask.value().size()) + " entries, model has " +
                     std::to_string(n) + " nodes");
  }
  const ad::Var flat = mask.shape().size() == 1 ? mask : ad::reshape(mask, {n});
  PatchSet patches(n);
  for (std::size_t j = 0; j < n; ++j) {
    const ad::Var m = ad::slice(flat, 0, j, j + 1);
    if (source == CleanSource::live) {
      patches.set_gate(j, m, corrupt.nodes[j]);
    } else {
      patches.set_blend(j, m, clean.nodes[j], corrupt.nodes[j]);
    }
  }
  return model.forward(tape, clean_tokens, &patches);
}

inline ad::Tensor answer_distribution(const ad::Tensor& logits, std::size_t pos) {
  const std::size_t v = logits.dim(1);
  ad::Tensor p({v});
  double mx = logits(pos, 0);
  for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, logits(pos, j));
  double z = 0.0;
  for (std::size_t j = 0; j < v; ++j) z += (p[j] = std::exp(logits(pos, j) - mx));
  for (double& x : p.data()) x /= z;
  return p;
}

inline void check_distribution(const ad::Tensor& p, std::string_view name) {
  double s = 0.0;
  for (double x : p.data()) {
    if (!(x >= 0.0)) throw NumericError("kl: " + std::string(name) + " has a negative or NaN entry");
    s += x;
  }
  if (std::abs(s - 1.0) > 1e-9) throw NumericError("kl: " + std::string(name) + " does not sum to 1");
}

inline double kl_divergence(const ad::Tensor& p, const ad::Tensor& q) {
  if (p.shape() != q.shape()) throw ShapeError("kl: distributions over different supports");
  check_distribution(p, "P_clean");
  check_distribution(q, "P_intervened");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(std::max(q[i], ad::kLogFloor)));
  return kl;
}

// Total loss from distributions, for checks outside the training loop.
inline double dfa_loss(const ad::Tensor& p_clean, const ad::Tensor& p_intervened, std::span<const double> mask,
                       double lambda) {
  if (mask.empty()) throw UsageError("dfa loss: empty mask");
  return kl_divergence(p_clean, p_intervened) +
         lambda * std::accumulate(mask.begin(), mask.end(), 0.0) / static_cast<double>(mask.size());
}

// KL(P_clean || softmax(logits[pos])) on the tape, with P_clean fixed.
inline ad::Var answer_kl(const ad::Var& logits, const ad::Tensor& p_clean, std::size_t pos) {
  const ad::Var log_q = ad::log_softmax_last_dim(ad::slice(logits, 0, pos, pos + 1));
  double entropy_term = 0.0;
  ad::Tensor neg_p({1, p_clean.size()});
  for (std::size_t i = 0; i < p_clean.size(); ++i) {
    if (p_clean[i] > 0.0) entropy_term += p_clean[i] * std::log(p_clean[i]);
    neg_p[i] = -p_clean[i];
  }
  return ad::affine(ad::sum(ad::mul(log_q, logits.tape()->constant(std::move(neg_p)))), 1.0, entropy_term);
}

// One task's worth of cached target-model runs.
struct InterventionExample {
  const TaskExample* example;
  ActivationRecord clean;
  ActivationRecord corrupt;
  ad::Tensor p_clean;
};

template <PatchableModel M>
std::vector<InterventionExample> capture_pool(const M& model, const TaskBatch& batch) {
  std::vector<InterventionExample> pool;
  pool.reserve(batch.size());
  for (const TaskExample& ex : batch.examples) {
    ActivationRecord c = forward_capture(model, ex.clean);
    ad::Tensor p = answer_distribution(c.logits, ex.answer_pos);
    pool.push_back({&ex, std::move(c), forward_capture(model, ex.corrupt), std::move(p)});
  }
  return pool;
}

struct LossParts {
  ad::Var total;
  ad::Var kl;
  ad::Var sparsity;
};

// Loss for one batch of examples sharing a source score vector.
template <PatchableModel M>
LossParts dfa_batch_loss(ad::Tape& tape, const M& model, const ad::Var& w, std::span<const double> s_std,
                         std::span<const InterventionExample* const> batch, double lambda,
                         CleanSource source = CleanSource::live) {
  if (batch.empty()) throw UsageError("dfa: empty batch");
  const ad::Var s = tape.constant(ad::Tensor({1, s_std.size()}, std::vector<double>(s_std.begin(), s_std.end())));
  const ad::Var mask = ad::sigmoid(ad::matmul(s, w));
  std::optional<ad::Var> kl_sum;
  for (const InterventionExample* ex : batch) {
    const TapedForward f = intervened_forward(tape, model, mask, ex->clean, ex->corrupt, ex->example->clean, source);
    const ad::Var kl = answer_kl(f.logits, ex->p_clean, ex->example->answer_pos);
    kl_sum = kl_sum ? ad::add(*kl_sum, kl) : kl;
  }
  const ad::Var kl = ad::scale(*kl_sum, 1.0 / static_cast<double>(batch.size()));
  const ad::Var sparsity = ad::mean(mask);
  return {ad::add(kl, ad::scale(sparsity, lambda)), kl, sparsity};
}

// ------------------------------------------------------------ training

struct TrainConfig {
  double lambda = 1.0;
  double lr = 1e-2;
  int steps = 500;
  int batch_size = 16;
  std::vector<TaskId> tasks;
  std::uint64_t seed = 0;
  std::size_t pool_size = 64;     // training prompts per task
  std::uint64_t data_seed = 101;  // kept apart from evaluation seeds
  CleanSource clean_source = CleanSource::live;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("train: lambda must be a finite value >= 0");
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (steps <= 0 || batch_size <= 0 || pool_size == 0) throw ConfigError("train: steps, batch_size and pool_size must be positive");
    if (tasks.empty()) throw ConfigError("train: task list is empty");
  }
};

struct LossRow {
  int step = 0;
  double kl = 0.0;
  double sparsity = 0.0;
  double total = 0.0;
};

struct TrainResult {
  AlignmentMatrix w;
  std::vector<LossRow> trace;
};

inline std::uint64_t pool_seed(std::uint64_t data_seed, TaskId t) { return data_seed ^ (0xD1B54A32D192ED03ULL * (static_cast<std::uint64_t>(t) + 7)); }

template <PatchableModel M>
TrainResult train_alignment(const AlignmentMatrix& w0, const std::map<TaskId, ScoreVector>& source_scores,
                            const M& target, const TrainConfig& cfg) {
  cfg.validate();
  w0.validate();
  if (w0.cols != target.node_count()) throw ShapeError("train: alignment columns do not match target nodes");

  struct TaskData {
    std::vector<double> s_std;
    TaskBatch batch;
    std::vector<InterventionExample> pool;
  };
  std::vector<TaskData> data;
  data.reserve(cfg.tasks.size());
  for (TaskId t : cfg.tasks) {
    const auto it = source_scores.find(t);
    if (it == source_scores.end()) {
      throw MissingArtifactError("train: no source scores for task " + std::string(to_string(t)));
    }
    if (it->second.size() != w0.rows) throw ShapeError("train: source scores do not match alignment rows");
    data.push_back({standardize(it->second.scores), generate(t, cfg.pool_size, pool_seed(cfg.data_seed, t)), {}});
  }
  // Pool entries point into the batches, so capture after `data` stops growing.
  for (TaskData& d : data) d.pool = capture_pool(target, d.batch);

  TrainResult result{w0, {}};
  result.trace.reserve(static_cast<std::size_t>(cfg.steps));
  Adam opt(cfg.lr);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick_task(0, data.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_example(0, cfg.pool_size - 1);
  std::vector<const InterventionExample*> batch(static_cast<std::size_t>(cfg.batch_size));

  for (int step = 1; step <= cfg.steps; ++step) {
    const TaskData& d = data[pick_task(rng)];
    for (auto& b : batch) b = &d.pool[pick_example(rng)];
    ad::Tape tape;
    const ad::Var w = tape.parameter(result.w.tensor());
    const LossParts loss = dfa_batch_loss(tape, target, w, d.s_std, batch, cfg.lambda, cfg.clean_source);
    const LossRow row{step, loss.kl.value().item(), loss.sparsity.value().item(), loss.total.value().item()};
    if (!std::isfinite(row.total)) {
      throw NumericError("train: non-finite loss at step " + std::to_string(step) + " (kl " + std::to_string(row.kl) +
                         ", sparsity " + std::to_string(row.sparsity) + ")");
    }
    tape.backward(loss.total);
    const ad::Tensor g = w.grad();
    opt.begin_step();
    opt.update(0, result.w.w, g.data());
    result.trace.push_back(row);
  }
  result.w.trained = true;
  result.w.validate();
  return result;
}

// ------------------------------------------------------------ regimes

enum class Regime : std::uint8_t { in_distribution, near_distribution, zero_shot };

inline constexpr std::array<Regime, 3> kAllRegimes{Regime::in_distribution, Regime::near_distribution,
                                                   Regime::zero_shot};

inline std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::in_distribution: return "in_distribution";
    case Regime::near_distribution: return "near_distribution";
    case Regime::zero_shot: return "zero_shot";
  }
  return "?";
}

inline Regime parse_regime(std::string_view name) {
  for (Regime r : kAllRegimes)
    if (to_string(r) == name) return r;
  throw ConfigError("unknown transfer regime '" + std::string(name) + "'");
}

inline bool regime_applies(Regime r, TaskId eval_task) {
  return r != Regime::near_distribution || near_partner(eval_task).has_value();
}

// Training tasks for evaluating on `eval_task` under `r`, drawn from `available`.
inline std::vector<TaskId> training_tasks(Regime r, TaskId eval_task, std::span<const TaskId> available) {
  auto has = [&](TaskId t) { return std::find(available.begin(), available.end(), t) != available.end(); };
  switch (r) {
    case Regime::in_distribution: return {eval_task};
    case Regime::near_distribution: {
      const auto partner = near_partner(eval_task);
      if (!partner) {
        throw ConfigError("near_distribution: task " + std::string(to_string(eval_task)) + " has no related task");
      }
      if (!has(*partner)) {
        throw ConfigError("near_distribution: " + std::string(to_string(eval_task)) + " needs its partner " +
                          std::string(to_string(*partner)) + " in the task list");
      }
      return {*partner};
    }
    case Regime::zero_shot: {
      std::vector<TaskId> out;
      for (TaskId t : available)
        if (t != eval_task) out.push_back(t);
      if (out.empty()) throw ConfigError("zero_shot: needs at least two tasks");
      return out;
    }
  }
  return {};
}

// ------------------------------------------------------------ controls

enum class ControlKind : std::uint8_t { random_w, scrambled_s, permuted_w, heuristic_depth };

inline std::string_view to_string(ControlKind k) {
  switch (k) {
    case ControlKind::random_w: return "random_w";
    case ControlKind::scrambled_s: return "scrambled_s";
    case ControlKind::permuted_w: return "permuted_w";
    case ControlKind::heuristic_depth: return "heuristic_depth";
  }
  return "?";
}

inline std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

inline std::uint64_t scramble_seed(std::uint64_t seed, TaskId task) {
  return seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(task) + 1;
}

// Trained W applied to a permuted source vector: s'[i] = s[perm[i]].
inline ScoreVector scrambled_s(const AlignmentMatrix& w, const ScoreVector& source, std::span<const std::size_t> perm) {
  if (perm.size() != source.size()) throw ShapeError("scrambled_s: permutation length mismatch");
  ScoreVector shuffled = source;
  for (std::size_t i = 0; i < perm.size(); ++i) shuffled.scores[i] = source.scores.at(perm[i]);
  return predict_scores(w, shuffled);
}

inline ScoreVector scrambled_s(const AlignmentMatrix& w, const ScoreVector& source, std::uint64_t seed) {
  return scrambled_s(w, source, random_permutation(source.size(), scramble_seed(seed, source.task)));
}

// Column j of the result is column perm[j] of w.
inline AlignmentMatrix permuted_w(const AlignmentMatrix& w, std::span<const std::size_t> perm) {
  if (perm.size() != w.cols) throw ShapeError("permuted_w: permutation length mismatch");
  AlignmentMatrix out = w;
  for (std::size_t i = 0; i < w.rows; ++i)
    for (std::size_t j = 0; j < w.cols; ++j) out(i, j) = w(i, perm[j]);
  return out;
}

inline AlignmentMatrix permuted_w(const AlignmentMatrix& w, std::uint64_t seed) {
  return permuted_w(w, random_permutation(w.cols, seed));
}

// Source layer i sits at relative depth i/(L_S - 1) and splits its weight
// linearly between the two bracketing target layers; within a target layer the
// weight is shared evenly by the same-kind nodes.
inline AlignmentMatrix heuristic_depth(const ModelConfig& source, const ModelConfig& target, std::string source_id,
                                       std::string target_id) {
  AlignmentMatrix a{source.node_count(), target.node_count(),
                    std::vector<double>(source.node_count() * target.node_count(), 0.0),
                    std::move(source_id), std::move(target_id), 0, false};
  for (std::size_t i = 0; i < a.rows; ++i) {
    const NodeId src = node_at(source, i);
    const double depth = source.n_layers == 1 ? 0.0 : static_cast<double>(src.layer) / (source.n_layers - 1);
    const double pos = depth * (target.n_layers - 1);
    const int lo = static_cast<int>(std::floor(pos));
    const int hi = std::min(lo + 1, target.n_layers - 1);
    const double frac = pos - lo;
    auto spread = [&](int layer, double weight) {
      if (weight == 0.0) return;
      if (src.kind == NodeKind::mlp) {
        a(i, node_index(target, {layer, NodeKind::mlp, 0})) += weight;
      } else {
        for (int h = 0; h < target.n_heads; ++h)
          a(i, node_index(target, {layer, NodeKind::attn_head, h})) += weight / target.n_heads;
      }
    };
    if (hi == lo) {
      spread(lo, 1.0);
    } else {
      spread(lo, 1.0 - frac);
      spread(hi, frac);
    }
  }
  return a;
}

}  // namespace calign
