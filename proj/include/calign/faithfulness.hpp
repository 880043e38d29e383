#pragma once

// Circuit evaluation by noising out: a circuit C keeps its clean activations
// while every other node is overridden by its corrupt-run activation.
//   f(C) = (m(C) - m(empty)) / (m(M) - m(empty))
// with batch-mean metrics. f is not clipped.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "calign/attribution.hpp"
#include "calign/errors.hpp"
#include "calign/model.hpp"
#include "calign/tasks.hpp"

namespace calign {

inline constexpr double kDegenerateDenominator = 1e-9;

struct KGrid {
  std::string id;
  std::vector<double> ks;

  void validate() const {
    if (ks.empty()) throw ConfigError("k grid '" + id + "' is empty");
    for (std::size_t i = 0; i < ks.size(); ++i) {
      if (!(ks[i] > 0.0 && ks[i] <= 1.0)) throw ConfigError("k grid '" + id + "': proportions must lie in (0, 1]");
      if (i > 0 && !(ks[i] > ks[i - 1])) throw ConfigError("k grid '" + id + "' must be strictly ascending");
    }
  }
};

inline KGrid default_k_grid() { return {"default-v1", {0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0}}; }

inline std::size_t circuit_size(double k, std::size_t node_count) {
  if (!(k > 0.0 && k <= 1.0)) throw UsageError("circuit: proportion k must lie in (0, 1]");
  const double raw = std::ceil(k * static_cast<double>(node_count) - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(raw, 1.0)), 1, node_count);
}

// Node indices ordered from most to least important; ties keep canonical order.
inline std::vector<std::size_t> rank_nodes(std::span<const double> scores, RankMode mode) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  auto key = [&](std::size_t i) { return mode == RankMode::magnitude ? std::abs(scores[i]) : scores[i]; };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) > key(b); });
  return order;
}

inline std::vector<bool> select_circuit(std::span<const double> scores, RankMode mode, double k) {
  const auto order = rank_nodes(scores, mode);
  std::vector<bool> keep(scores.size(), false);
  const std::size_t n = circuit_size(k, scores.size());
  for (std::size_t i = 0; i < n; ++i) keep[order[i]] = true;
  return keep;
}

// Caches the clean/corrupt runs of a batch so many circuits can be scored.
template <PatchableModel M>
class CircuitEvaluator {
 public:
  CircuitEvaluator(const M& model, const TaskBatch& batch) : model_(&model), batch_(&batch) {
    if (batch.empty()) throw UsageError("faithfulness: empty batch");
    clean_.reserve(batch.size());
    corrupt_.reserve(batch.size());
    for (const TaskExample& ex : batch.examples) {
      clean_.push_back(forward_capture(model, ex.clean));
      corrupt_.push_back(forward_capture(model, ex.corrupt));
      m_full_ += logit_difference(clean_.back().logits, ex);
    }
    m_full_ /= static_cast<double>(batch.size());
    m_empty_ = metric_of(std::vector<bool>(model.node_count(), false));
    if (std::abs(m_full_ - m_empty_) < kDegenerateDenominator) {
      throw DegenerateTaskError("faithfulness: |m(M) - m(empty)| < 1e-9 for " + std::string(to_string(batch.task)) +
                                " on " + std::string(model.model_id()) + "; the model does not separate clean and corrupt");
    }
  }

  double m_full() const noexcept { return m_full_; }
  double m_empty() const noexcept { return m_empty_; }

  // Batch-mean metric with nodes outside `keep` set to their corrupt activations.
  double metric_of(const std::vector<bool>& keep) const {
    if (keep.size() != model_->node_count()) throw UsageError("faithfulness: circuit size does not match model");
    double total = 0.0;
    for (std::size_t b = 0; b < batch_->size(); ++b) {
      const TaskExample& ex = batch_->examples[b];
      if (std::all_of(keep.begin(), keep.end(), [](bool k) { return k; })) {
        total += logit_difference(clean_[b].logits, ex);
        continue;
      }
      ad::Tape tape;
      PatchSet patches(keep.size());
      for (std::size_t v = 0; v < keep.size(); ++v)
        if (!keep[v]) patches.set(v, tape.constant(corrupt_[b].nodes[v]));
      const TapedForward f = model_->forward(tape, ex.clean, &patches);
      total += logit_difference(f.logits.value(), ex);
    }
    return total / static_cast<double>(batch_->size());
  }

  double faithfulness(const std::vector<bool>& keep) const {
    return (metric_of(keep) - m_empty_) / (m_full_ - m_empty_);
  }

  double eval(std::span<const double> scores, RankMode mode, double k) const {
    if (scores.size() != model_->node_count()) {
      throw ShapeError("faithfulness: score vector has " + std::to_string(scores.size()) + " entries, model has " +
                       std::to_string(model_->node_count()) + " nodes");
    }
    return faithfulness(select_circuit(scores, mode, k));
  }

  const ActivationRecord& clean(std::size_t b) const { return clean_.at(b); }
  const ActivationRecord& corrupt(std::size_t b) const { return corrupt_.at(b); }

 private:
  const M* model_;
  const TaskBatch* batch_;
  std::vector<ActivationRecord> clean_;
  std::vector<ActivationRecord> corrupt_;
  double m_full_ = 0.0;
  double m_empty_ = 0.0;
};

template <PatchableModel M>
double eval_circuit(const M& model, const ScoreVector& scores, double k, const TaskBatch& batch) {
  return CircuitEvaluator<M>(model, batch).eval(scores.scores, scores.rank_mode(), k);
}

struct FaithfulnessCurve {
  KGrid grid;
  std::vector<double> f;
  double cpr = 0.0;
};

// Trapezoid area normalised by the grid span; a single-point grid returns its
// value. Integrating f - f[0] keeps constant curves exact in floating point.
inline double cpr(std::span<const double> ks, std::span<const double> f) {
  if (ks.size() != f.size() || ks.empty()) throw UsageError("cpr: grid and values must be equal-length and nonempty");
  if (ks.size() == 1) return f[0];
  double area = 0.0;
  for (std::size_t i = 1; i < ks.size(); ++i) area += 0.5 * ((f[i] - f[0]) + (f[i - 1] - f[0])) * (ks[i] - ks[i - 1]);
  return f[0] + area / (ks.back() - ks.front());
}

template <PatchableModel M>
FaithfulnessCurve curve(const CircuitEvaluator<M>& ev, std::span<const double> scores, RankMode mode,
                        const KGrid& grid) {
  grid.validate();
  FaithfulnessCurve c{grid, {}, 0.0};
  c.f.reserve(grid.ks.size());
  for (double k : grid.ks) c.f.push_back(ev.eval(scores, mode, k));
  c.cpr = cpr(grid.ks, c.f);
  return c;
}

template <PatchableModel M>
FaithfulnessCurve curve(const M& model, const ScoreVector& scores, const TaskBatch& batch,
                        const KGrid& grid = default_k_grid()) {
  return curve(CircuitEvaluator<M>(model, batch), scores.scores, scores.rank_mode(), grid);
}

inline double recovery_ratio(double aligned_cpr, double gold_cpr) {
  if (gold_cpr == 0.0) throw DegenerateTaskError("recovery ratio: gold CPR is zero");
  return 100.0 * aligned_cpr / gold_cpr;
}

}  // namespace calign
