#pragma once

#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "calign/autodiff.hpp"
#include "calign/model.hpp"
#include "calign/tasks.hpp"

namespace calign::testing {

// Node v mixes earlier positions' token embeddings: A_v = (X_v E) P_v, with
// X_v a fixed lower-triangular [T, T] matrix and P_v a [d, k] projection.
// Logits are sum_v A_v R_v + b, so any logit difference is linear in the node
// activations and single-node patching effects are exactly first order.
class LinearNodesModel {
 public:
  LinearNodesModel(std::size_t nodes, std::uint64_t seed, std::size_t d = 8, std::size_t k = 3)
      : n_(nodes), d_(d), k_(k), table_({static_cast<std::size_t>(vocab::kSize), d}), bias_({static_cast<std::size_t>(vocab::kSize)}) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (double& x : table_.data()) x = nd(rng);
    for (double& x : bias_.data()) x = 0.1 * nd(rng);
    for (std::size_t v = 0; v < n_; ++v) {
      ad::Tensor p({d_, k_});
      ad::Tensor r({k_, static_cast<std::size_t>(vocab::kSize)});
      ad::Tensor mix({kMaxT, kMaxT});
      for (double& x : p.data()) x = nd(rng);
      for (double& x : r.data()) x = nd(rng);
      for (std::size_t i = 0; i < kMaxT; ++i)
        for (std::size_t j = 0; j <= i; ++j) mix(i, j) = nd(rng);
      proj_.push_back(std::move(p));
      read_.push_back(std::move(r));
      mix_.push_back(std::move(mix));
    }
  }

  std::size_t node_count() const { return n_; }
  std::string model_id() const { return "linear-nodes-" + std::to_string(n_); }

  ad::Var embed(ad::Tape& tape, std::span<const int> tokens) const {
    return ad::embed_lookup(tape.constant(table_), tokens);
  }

  TapedForward forward_embedded(ad::Tape& tape, const ad::Var& emb, const PatchSet* patches = nullptr) const {
    TapedForward out;
    out.nodes.resize(n_);
    std::optional<ad::Var> logits;
    const ad::Shape node_shape{emb.shape()[0], k_};
    for (std::size_t v = 0; v < n_; ++v) {
      std::optional<ad::Var> natural;
      if (!patches || patches->needs_natural(v)) {
        const std::size_t t = emb.shape()[0];
        const ad::Var mix = ad::slice(ad::slice(tape.constant(mix_[v]), 0, 0, t), 1, 0, t);
        natural = ad::matmul(ad::matmul(mix, emb), tape.constant(proj_[v]));
      }
      const ad::Var a = patches && patches->contains(v)
                            ? detail::resolve_patch(tape, patches->at(v), node_shape, "n" + std::to_string(v), natural)
                            : *natural;
      out.nodes[v] = a;
      const ad::Var c = ad::matmul(a, tape.constant(read_[v]));
      logits = logits ? ad::add(*logits, c) : c;
    }
    out.logits = ad::add(*logits, tape.constant(bias_));
    return out;
  }

  TapedForward forward(ad::Tape& tape, std::span<const int> tokens, const PatchSet* patches = nullptr) const {
    return forward_embedded(tape, embed(tape, tokens), patches);
  }

 private:
  static constexpr std::size_t kMaxT = 16;
  std::size_t n_, d_, k_;
  ad::Tensor table_;
  ad::Tensor bias_;
  std::vector<ad::Tensor> proj_;
  std::vector<ad::Tensor> read_;
  std::vector<ad::Tensor> mix_;
};

inline ModelConfig tiny_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_mlp = 32;
  c.seed = seed;
  return c;
}

}  // namespace calign::testing
