#pragma once

// Frozen pre-norm decoder-only transformer with a node registry over
// attention heads and MLP blocks.
//
// Node activations:
//   head  -> per-head attention output before the output projection, [T, d_head]
//   mlp   -> the block's residual-stream contribution,               [T, d_model]
// Canonical node order is (layer, kind with heads before the MLP, head).

#include <bit>
#include <compare>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "calign/autodiff.hpp"
#include "calign/errors.hpp"

namespace calign {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 32;
  int d_mlp = 128;
  int vocab_size = 64;
  int max_seq_len = 16;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_mlp <= 0 || vocab_size <= 0 || max_seq_len <= 0) {
      throw ConfigError("model config: all dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                        std::to_string(n_heads));
    }
  }

  std::size_t node_count() const { return static_cast<std::size_t>(n_layers) * static_cast<std::size_t>(n_heads + 1); }
  std::size_t d_head() const { return static_cast<std::size_t>(d_model / n_heads); }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class NodeKind : std::uint8_t { attn_head = 0, mlp = 1 };

struct NodeId {
  int layer = 0;
  NodeKind kind = NodeKind::attn_head;
  int head = 0;  // always 0 for MLP nodes

  auto operator<=>(const NodeId&) const = default;

  std::string label() const {
    return "L" + std::to_string(layer) + (kind == NodeKind::mlp ? ".MLP" : ".H" + std::to_string(head));
  }
};

inline std::size_t node_index(const ModelConfig& cfg, const NodeId& id) {
  if (id.layer < 0 || id.layer >= cfg.n_layers) {
    throw UsageError("node_index: layer " + std::to_string(id.layer) + " out of range");
  }
  if (id.kind == NodeKind::attn_head && (id.head < 0 || id.head >= cfg.n_heads)) {
    throw UsageError("node_index: head " + std::to_string(id.head) + " out of range");
  }
  const auto per_layer = static_cast<std::size_t>(cfg.n_heads + 1);
  return static_cast<std::size_t>(id.layer) * per_layer +
         (id.kind == NodeKind::mlp ? static_cast<std::size_t>(cfg.n_heads) : static_cast<std::size_t>(id.head));
}

inline NodeId node_at(const ModelConfig& cfg, std::size_t index) {
  if (index >= cfg.node_count()) {
    throw UsageError("node_at: index " + std::to_string(index) + " out of range");
  }
  const auto per_layer = static_cast<std::size_t>(cfg.n_heads + 1);
  const int layer = static_cast<int>(index / per_layer);
  const int slot = static_cast<int>(index % per_layer);
  if (slot == cfg.n_heads) return {layer, NodeKind::mlp, 0};
  return {layer, NodeKind::attn_head, slot};
}

inline std::vector<NodeId> all_nodes(const ModelConfig& cfg) {
  std::vector<NodeId> out;
  out.reserve(cfg.node_count());
  for (std::size_t i = 0; i < cfg.node_count(); ++i) out.push_back(node_at(cfg, i));
  return out;
}

// Flat parameter layout. Per layer: ln1 gain/bias, then per head
// (wq, wk, wv, bq, bk, bv, wo), then bo, ln2 gain/bias, w_in, b_in, w_out, b_out.
class ParamIndex {
 public:
  explicit ParamIndex(const ModelConfig& cfg) : cfg_(cfg), stride_(9 + 7 * static_cast<std::size_t>(cfg.n_heads)) {}

  std::size_t tok_emb() const { return 0; }
  std::size_t pos_emb() const { return 1; }
  std::size_t ln1_g(int l) const { return base(l); }
  std::size_t ln1_b(int l) const { return base(l) + 1; }
  std::size_t wq(int l, int h) const { return head_base(l, h); }
  std::size_t wk(int l, int h) const { return head_base(l, h) + 1; }
  std::size_t wv(int l, int h) const { return head_base(l, h) + 2; }
  std::size_t bq(int l, int h) const { return head_base(l, h) + 3; }
  std::size_t bk(int l, int h) const { return head_base(l, h) + 4; }
  std::size_t bv(int l, int h) const { return head_base(l, h) + 5; }
  std::size_t wo(int l, int h) const { return head_base(l, h) + 6; }
  std::size_t bo(int l) const { return tail(l); }
  std::size_t ln2_g(int l) const { return tail(l) + 1; }
  std::size_t ln2_b(int l) const { return tail(l) + 2; }
  std::size_t w_in(int l) const { return tail(l) + 3; }
  std::size_t b_in(int l) const { return tail(l) + 4; }
  std::size_t w_out(int l) const { return tail(l) + 5; }
  std::size_t b_out(int l) const { return tail(l) + 6; }
  std::size_t lnf_g() const { return base(cfg_.n_layers); }
  std::size_t lnf_b() const { return lnf_g() + 1; }
  std::size_t w_unembed() const { return lnf_g() + 2; }
  std::size_t b_unembed() const { return lnf_g() + 3; }
  std::size_t count() const { return lnf_g() + 4; }

  ad::Shape shape(std::size_t i) const {
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const auto dh = cfg_.d_head();
    const auto dm = static_cast<std::size_t>(cfg_.d_mlp);
    const auto v = static_cast<std::size_t>(cfg_.vocab_size);
    if (i == tok_emb()) return {v, d};
    if (i == pos_emb()) return {static_cast<std::size_t>(cfg_.max_seq_len), d};
    if (i >= lnf_g()) {
      if (i == w_unembed()) return {d, v};
      if (i == b_unembed()) return {v};
      return {d};
    }
    const std::size_t off = (i - 2) % stride_;
    const auto heads = static_cast<std::size_t>(cfg_.n_heads);
    if (off < 2) return {d};
    if (off < 2 + 7 * heads) {
      switch ((off - 2) % 7) {
        case 0: case 1: case 2: return {d, dh};
        case 3: case 4: case 5: return {dh};
        default: return {dh, d};
      }
    }
    switch (off - 2 - 7 * heads) {
      case 0: return {d};
      case 1: case 2: return {d};
      case 3: return {d, dm};
      case 4: return {dm};
      case 5: return {dm, d};
      default: return {d};
    }
  }

  // Gains start at 1, biases at 0, everything else is drawn from a normal.
  enum class Init { normal, ones, zeros };
  Init init_kind(std::size_t i) const {
    if (i == tok_emb() || i == pos_emb() || i == w_unembed()) return Init::normal;
    if (i == lnf_g()) return Init::ones;
    if (i == lnf_b() || i == b_unembed()) return Init::zeros;
    const std::size_t off = (i - 2) % stride_;
    const auto heads = static_cast<std::size_t>(cfg_.n_heads);
    if (off == 0) return Init::ones;
    if (off == 1) return Init::zeros;
    if (off < 2 + 7 * heads) {
      const std::size_t k = (off - 2) % 7;
      return (k >= 3 && k <= 5) ? Init::zeros : Init::normal;
    }
    switch (off - 2 - 7 * heads) {
      case 1: return Init::ones;
      case 3: case 5: return Init::normal;
      default: return Init::zeros;
    }
  }

 private:
  std::size_t base(int l) const { return 2 + static_cast<std::size_t>(l) * stride_; }
  std::size_t head_base(int l, int h) const { return base(l) + 2 + 7 * static_cast<std::size_t>(h); }
  std::size_t tail(int l) const { return base(l) + 2 + 7 * static_cast<std::size_t>(cfg_.n_heads); }

  ModelConfig cfg_;
  std::size_t stride_;
};

// Mutable parameter set, used while pre-training a toy model.
struct TransformerWeights {
  ModelConfig config;
  std::vector<std::shared_ptr<ad::Tensor>> params;

  static TransformerWeights init(const ModelConfig& cfg) {
    cfg.validate();
    const ParamIndex idx(cfg);
    std::mt19937_64 rng(cfg.seed);
    TransformerWeights w{cfg, {}};
    w.params.reserve(idx.count());
    for (std::size_t i = 0; i < idx.count(); ++i) {
      ad::Tensor t(idx.shape(i));
      switch (idx.init_kind(i)) {
        case ParamIndex::Init::ones: std::fill(t.data().begin(), t.data().end(), 1.0); break;
        case ParamIndex::Init::zeros: break;
        case ParamIndex::Init::normal: {
          const bool embedding = i == idx.tok_emb() || i == idx.pos_emb();
          const double std_dev = embedding ? 0.5 : 1.0 / std::sqrt(static_cast<double>(t.dim(0)));
          std::normal_distribution<double> nd(0.0, std_dev);
          for (double& v : t.data()) v = nd(rng);
          break;
        }
      }
      w.params.push_back(std::make_shared<ad::Tensor>(std::move(t)));
    }
    return w;
  }
};

// Override for one node during a forward pass.
//   value -> replace the activation with this tape value
//   Blend -> alpha * clean + (1 - alpha) * corrupt, both fixed tensors
//   Gate  -> alpha * (activation computed in this pass) + (1 - alpha) * corrupt
// Blend and Gate are differentiable in alpha.
struct Blend {
  ad::Var alpha;
  std::shared_ptr<const ad::Tensor> clean;
  std::shared_ptr<const ad::Tensor> corrupt;
};

struct Gate {
  ad::Var alpha;
  std::shared_ptr<const ad::Tensor> corrupt;
};

using Patch = std::variant<ad::Var, Blend, Gate>;

class PatchSet {
 public:
  explicit PatchSet(std::size_t node_count) : entries_(node_count) {}

  void set(std::size_t node, ad::Var value) { slot(node) = Patch{std::move(value)}; }
  void set_blend(std::size_t node, ad::Var alpha, std::shared_ptr<const ad::Tensor> clean,
                 std::shared_ptr<const ad::Tensor> corrupt) {
    slot(node) = Patch{Blend{std::move(alpha), std::move(clean), std::move(corrupt)}};
  }

  void set_gate(std::size_t node, ad::Var alpha, std::shared_ptr<const ad::Tensor> corrupt) {
    slot(node) = Patch{Gate{std::move(alpha), std::move(corrupt)}};
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool contains(std::size_t node) const { return node < entries_.size() && entries_[node].has_value(); }
  // True when the forward pass must still compute the node's own activation.
  bool needs_natural(std::size_t node) const {
    return !contains(node) || std::holds_alternative<Gate>(*entries_[node]);
  }
  const Patch& at(std::size_t node) const { return *entries_.at(node); }

 private:
  std::optional<Patch>& slot(std::size_t node) {
    if (node >= entries_.size()) {
      throw UsageError("patch: unknown node index " + std::to_string(node));
    }
    return entries_[node];
  }

  std::vector<std::optional<Patch>> entries_;
};

struct TapedForward {
  std::vector<ad::Var> nodes;  // canonical node order
  ad::Var logits;              // [T, vocab]
};

struct ActivationRecord {
  std::vector<std::shared_ptr<const ad::Tensor>> nodes;
  ad::Tensor logits;

  const ad::Tensor& node(std::size_t i) const { return *nodes.at(i); }
};

namespace detail {

inline ad::Var check_alpha(ad::Tape& tape, const ad::Var& alpha, const std::string& label) {
  tape.check_owned(alpha, "patch " + label);
  if (alpha.value().size() != 1) throw ShapeError("patch " + label + ": blend weight must be a single element");
  return alpha;
}

// `natural` is the activation computed in this pass; only a Gate reads it.
inline ad::Var resolve_patch(ad::Tape& tape, const Patch& patch, const ad::Shape& expected, const std::string& label,
                             const std::optional<ad::Var>& natural = std::nullopt) {
  auto check = [&](const ad::Shape& got) {
    if (got != expected) {
      throw ShapeError("patch " + label + ": override shape " + ad::shape_str(got) + " != natural " +
                       ad::shape_str(expected));
    }
  };
  if (const auto* v = std::get_if<ad::Var>(&patch)) {
    tape.check_owned(*v, "patch " + label);
    check(v->shape());
    return *v;
  }
  if (const auto* g = std::get_if<Gate>(&patch)) {
    const ad::Var alpha = check_alpha(tape, g->alpha, label);
    if (!natural) throw UsageError("patch " + label + ": gate needs the node's computed activation");
    check(g->corrupt->shape());
    const ad::Var corrupt = tape.constant(g->corrupt);
    return ad::add(ad::mul(*natural, alpha), ad::mul(corrupt, ad::one_minus(alpha)));
  }
  const auto& b = std::get<Blend>(patch);
  const ad::Var alpha = check_alpha(tape, b.alpha, label);
  check(b.clean->shape());
  check(b.corrupt->shape());
  const ad::Var clean = tape.constant(b.clean);
  const ad::Var corrupt = tape.constant(b.corrupt);
  return ad::add(ad::mul(clean, alpha), ad::mul(corrupt, ad::one_minus(alpha)));
}

inline ad::Tensor causal_mask(std::size_t t) {
  ad::Tensor m({t, t});
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) m(i, j) = -1e9;
  return m;
}

}  // namespace detail

// Runs the transformer on pre-computed token embeddings ([T, d_model]).
// Overridden nodes are not computed; everything downstream reads the override.
inline TapedForward run_transformer(ad::Tape& tape, const ModelConfig& cfg, const ParamIndex& idx,
                                    std::span<const ad::Var> w, const ad::Var& token_embeddings,
                                    const PatchSet* patches) {
  const ad::Shape& es = token_embeddings.shape();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  if (es.size() != 2 || es[1] != d) {
    throw ShapeError("forward: token embeddings must be [T," + std::to_string(d) + "], got " + ad::shape_str(es));
  }
  const std::size_t seq = es[0];
  if (seq > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw ShapeError("forward: sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  if (patches && patches->size() != cfg.node_count()) {
    throw UsageError("forward: patch set sized for " + std::to_string(patches->size()) + " nodes, model has " +
                     std::to_string(cfg.node_count()));
  }
  const std::size_t dh = cfg.d_head();
  const ad::Shape head_shape{seq, dh};
  const ad::Shape mlp_shape{seq, d};
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  TapedForward out;
  out.nodes.resize(cfg.node_count());
  ad::Var x = ad::add(token_embeddings, ad::slice(w[idx.pos_emb()], 0, 0, seq));
  std::optional<ad::Var> causal;

  for (int l = 0; l < cfg.n_layers; ++l) {
    bool any_head_live = false;
    for (int h = 0; h < cfg.n_heads; ++h) {
      const std::size_t n = node_index(cfg, {l, NodeKind::attn_head, h});
      any_head_live = any_head_live || !patches || patches->needs_natural(n);
    }
    std::optional<ad::Var> normed;
    if (any_head_live) {
      normed = ad::layernorm(x, w[idx.ln1_g(l)], w[idx.ln1_b(l)]);
      if (!causal) causal = tape.constant(detail::causal_mask(seq));
    }
    std::optional<ad::Var> attn;
    for (int h = 0; h < cfg.n_heads; ++h) {
      const NodeId id{l, NodeKind::attn_head, h};
      const std::size_t n = node_index(cfg, id);
      std::optional<ad::Var> natural;
      if (!patches || patches->needs_natural(n)) {
        const ad::Var q = ad::add(ad::matmul(*normed, w[idx.wq(l, h)]), w[idx.bq(l, h)]);
        const ad::Var k = ad::add(ad::matmul(*normed, w[idx.wk(l, h)]), w[idx.bk(l, h)]);
        const ad::Var v = ad::add(ad::matmul(*normed, w[idx.wv(l, h)]), w[idx.bv(l, h)]);
        const ad::Var scores = ad::add(ad::scale(ad::matmul(q, ad::transpose(k)), attn_scale), *causal);
        natural = ad::matmul(ad::softmax_last_dim(scores), v);
      }
      const ad::Var z = patches && patches->contains(n)
                            ? detail::resolve_patch(tape, patches->at(n), head_shape, id.label(), natural)
                            : *natural;
      out.nodes[n] = z;
      const ad::Var contrib = ad::matmul(z, w[idx.wo(l, h)]);
      attn = attn ? ad::add(*attn, contrib) : contrib;
    }
    x = ad::add(x, ad::add(*attn, w[idx.bo(l)]));

    const NodeId mlp_id{l, NodeKind::mlp, 0};
    const std::size_t mn = node_index(cfg, mlp_id);
    std::optional<ad::Var> natural;
    if (!patches || patches->needs_natural(mn)) {
      const ad::Var h2 = ad::layernorm(x, w[idx.ln2_g(l)], w[idx.ln2_b(l)]);
      const ad::Var hidden = ad::gelu(ad::add(ad::matmul(h2, w[idx.w_in(l)]), w[idx.b_in(l)]));
      natural = ad::add(ad::matmul(hidden, w[idx.w_out(l)]), w[idx.b_out(l)]);
    }
    const ad::Var m = patches && patches->contains(mn)
                          ? detail::resolve_patch(tape, patches->at(mn), mlp_shape, mlp_id.label(), natural)
                          : *natural;
    out.nodes[mn] = m;
    x = ad::add(x, m);
  }
  const ad::Var final_norm = ad::layernorm(x, w[idx.lnf_g()], w[idx.lnf_b()]);
  out.logits = ad::add(ad::matmul(final_norm, w[idx.w_unembed()]), w[idx.b_unembed()]);
  return out;
}

class Transformer {
 public:
  explicit Transformer(const TransformerWeights& weights, std::string model_id = {})
      : cfg_(weights.config), idx_(weights.config), id_(std::move(model_id)) {
    cfg_.validate();
    if (weights.params.size() != idx_.count()) {
      throw ShapeError("transformer: expected " + std::to_string(idx_.count()) + " parameter tensors, got " +
                       std::to_string(weights.params.size()));
    }
    params_.reserve(weights.params.size());
    for (std::size_t i = 0; i < weights.params.size(); ++i) {
      if (weights.params[i]->shape() != idx_.shape(i)) {
        throw ShapeError("transformer: parameter " + std::to_string(i) + " has shape " +
                         ad::shape_str(weights.params[i]->shape()) + ", expected " + ad::shape_str(idx_.shape(i)));
      }
      params_.push_back(std::make_shared<const ad::Tensor>(*weights.params[i]));
    }
    if (id_.empty()) id_ = default_id(cfg_);
  }

  static std::string default_id(const ModelConfig& c) {
    return "tf-L" + std::to_string(c.n_layers) + "H" + std::to_string(c.n_heads) + "D" + std::to_string(c.d_model) +
           "M" + std::to_string(c.d_mlp) + "V" + std::to_string(c.vocab_size) + "T" + std::to_string(c.max_seq_len) +
           "-s" + std::to_string(c.seed);
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  const ParamIndex& index() const noexcept { return idx_; }
  const std::string& model_id() const noexcept { return id_; }
  std::size_t node_count() const { return cfg_.node_count(); }
  const ad::Tensor& param(std::size_t i) const { return *params_.at(i); }

  ad::Shape node_shape(std::size_t node, std::size_t seq_len) const {
    const NodeId id = node_at(cfg_, node);
    return id.kind == NodeKind::mlp ? ad::Shape{seq_len, static_cast<std::size_t>(cfg_.d_model)}
                                    : ad::Shape{seq_len, cfg_.d_head()};
  }

  ad::Var embed(ad::Tape& tape, std::span<const int> tokens) const {
    check_tokens(tokens);
    return ad::embed_lookup(tape.constant(params_[idx_.tok_emb()]), tokens);
  }

  TapedForward forward_embedded(ad::Tape& tape, const ad::Var& token_embeddings, const PatchSet* patches = nullptr) const {
    std::vector<ad::Var> w;
    w.reserve(params_.size());
    for (const auto& p : params_) w.push_back(tape.constant(p));
    return run_transformer(tape, cfg_, idx_, w, token_embeddings, patches);
  }

  TapedForward forward(ad::Tape& tape, std::span<const int> tokens, const PatchSet* patches = nullptr) const {
    return forward_embedded(tape, embed(tape, tokens), patches);
  }

 private:
  void check_tokens(std::span<const int> tokens) const {
    if (tokens.empty()) throw ShapeError("forward: empty token sequence");
    if (tokens.size() > static_cast<std::size_t>(cfg_.max_seq_len)) {
      throw ShapeError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                       std::to_string(cfg_.max_seq_len));
    }
    for (int t : tokens) {
      if (t < 0 || t >= cfg_.vocab_size) {
        throw ShapeError("forward: token " + std::to_string(t) + " out of range for vocab " +
                         std::to_string(cfg_.vocab_size));
      }
    }
  }

  ModelConfig cfg_;
  ParamIndex idx_;
  std::vector<std::shared_ptr<const ad::Tensor>> params_;
  std::string id_;
};

inline Transformer build_model(const ModelConfig& cfg) { return Transformer(TransformerWeights::init(cfg)); }

// Anything the attribution, faithfulness and alignment code can patch.
template <class M>
concept PatchableModel = requires(const M& m, ad::Tape& tape, std::span<const int> toks, const ad::Var& emb,
                                  const PatchSet* patches) {
  { m.node_count() } -> std::convertible_to<std::size_t>;
  { m.model_id() } -> std::convertible_to<std::string>;
  { m.embed(tape, toks) } -> std::same_as<ad::Var>;
  { m.forward(tape, toks, patches) } -> std::same_as<TapedForward>;
  { m.forward_embedded(tape, emb, patches) } -> std::same_as<TapedForward>;
};

inline ActivationRecord to_record(const TapedForward& f) {
  ActivationRecord rec;
  rec.nodes.reserve(f.nodes.size());
  for (const ad::Var& v : f.nodes) rec.nodes.push_back(v.value_ptr());
  rec.logits = f.logits.value();
  return rec;
}

template <PatchableModel M>
ActivationRecord forward_capture(const M& model, std::span<const int> tokens) {
  ad::Tape tape;
  return to_record(model.forward(tape, tokens, nullptr));
}

// Fixed per-node replacement activations keyed by canonical node index.
template <PatchableModel M>
ActivationRecord forward_patched(const M& model, std::span<const int> tokens,
                                 const std::map<std::size_t, ad::Tensor>& overrides) {
  ad::Tape tape;
  PatchSet patches(model.node_count());
  for (const auto& [node, value] : overrides) patches.set(node, tape.constant(value));
  return to_record(model.forward(tape, tokens, &patches));
}

struct BlendOverride {
  double alpha = 1.0;
  std::shared_ptr<const ad::Tensor> clean;
  std::shared_ptr<const ad::Tensor> corrupt;
};

template <PatchableModel M>
ActivationRecord forward_patched(const M& model, std::span<const int> tokens,
                                 const std::map<std::size_t, BlendOverride>& overrides) {
  ad::Tape tape;
  PatchSet patches(model.node_count());
  for (const auto& [node, b] : overrides) {
    if (b.alpha < 0.0 || b.alpha > 1.0) throw UsageError("forward_patched: blend weight outside [0,1]");
    patches.set_blend(node, tape.constant(ad::Tensor::scalar(b.alpha)), b.clean, b.corrupt);
  }
  return to_record(model.forward(tape, tokens, &patches));
}

inline ActivationRecord forward_patched(const Transformer& model, std::span<const int> tokens,
                                        const std::map<NodeId, ad::Tensor>& overrides) {
  std::map<std::size_t, ad::Tensor> flat;
  for (const auto& [id, t] : overrides) flat.emplace(node_index(model.config(), id), t);
  return forward_patched(model, tokens, flat);
}

struct ModelPair {
  Transformer source;
  Transformer target;
  bool reverse = false;  // larger-to-smaller sanity direction

  ModelPair(Transformer s, Transformer t, bool reverse_direction = false)
      : source(std::move(s)), target(std::move(t)), reverse(reverse_direction) {
    if (!reverse && source.node_count() > target.node_count()) {
      throw ConfigError("model pair: source has more nodes than target in forward transfer");
    }
  }
};

// ------------------------------------------------------------------ weight cache
//
// Layout (little-endian): "CALW", u32 version, 6 x i32 config dims, u64 seed,
// u32 task_id length + bytes, u64 tensor count, then per tensor:
// u32 rank, rank x u64 dims, f64 row-major data.

inline constexpr std::uint32_t kWeightFormatVersion = 1;

namespace detail {
static_assert(std::endian::native == std::endian::little, "weight cache assumes a little-endian host");

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw MissingArtifactError("weight cache: truncated file");
  return v;
}
}  // namespace detail

inline void save_weights(const std::filesystem::path& path, const TransformerWeights& w, const std::string& task_id) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw MissingArtifactError("weight cache: cannot write " + path.string());
  os.write("CALW", 4);
  detail::put(os, kWeightFormatVersion);
  const auto& c = w.config;
  for (int v : {c.n_layers, c.n_heads, c.d_model, c.d_mlp, c.vocab_size, c.max_seq_len}) detail::put<std::int32_t>(os, v);
  detail::put<std::uint64_t>(os, c.seed);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(task_id.size()));
  os.write(task_id.data(), static_cast<std::streamsize>(task_id.size()));
  detail::put<std::uint64_t>(os, w.params.size());
  for (const auto& p : w.params) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(p->rank()));
    for (std::size_t dim : p->shape()) detail::put<std::uint64_t>(os, dim);
    os.write(reinterpret_cast<const char*>(p->data().data()), static_cast<std::streamsize>(p->size() * sizeof(double)));
  }
  if (!os) throw MissingArtifactError("weight cache: write failed for " + path.string());
}

// Refuses files whose version, config or task id differ from what is expected.
inline TransformerWeights load_weights(const std::filesystem::path& path, const ModelConfig& expected,
                                       const std::string& task_id) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("weight cache: missing " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "CALW") throw MissingArtifactError("weight cache: bad magic in " + path.string());
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kWeightFormatVersion) {
    throw MissingArtifactError("weight cache: format version " + std::to_string(version) + " != " +
                               std::to_string(kWeightFormatVersion));
  }
  ModelConfig c;
  c.n_layers = detail::get<std::int32_t>(is);
  c.n_heads = detail::get<std::int32_t>(is);
  c.d_model = detail::get<std::int32_t>(is);
  c.d_mlp = detail::get<std::int32_t>(is);
  c.vocab_size = detail::get<std::int32_t>(is);
  c.max_seq_len = detail::get<std::int32_t>(is);
  c.seed = detail::get<std::uint64_t>(is);
  if (!(c == expected)) throw MissingArtifactError("weight cache: config mismatch in " + path.string());
  const auto len = detail::get<std::uint32_t>(is);
  std::string stored(len, '\0');
  is.read(stored.data(), len);
  if (!is || stored != task_id) throw MissingArtifactError("weight cache: task id mismatch in " + path.string());
  const ParamIndex idx(c);
  const auto count = detail::get<std::uint64_t>(is);
  if (count != idx.count()) throw MissingArtifactError("weight cache: wrong tensor count in " + path.string());
  TransformerWeights w{c, {}};
  for (std::size_t i = 0; i < count; ++i) {
    const auto rank = detail::get<std::uint32_t>(is);
    ad::Shape shape(rank);
    for (auto& dim : shape) dim = static_cast<std::size_t>(detail::get<std::uint64_t>(is));
    if (shape != idx.shape(i)) throw MissingArtifactError("weight cache: tensor shape mismatch in " + path.string());
    ad::Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) throw MissingArtifactError("weight cache: truncated tensor data in " + path.string());
    w.params.push_back(std::make_shared<ad::Tensor>(std::move(t)));
  }
  return w;
}

}  // namespace calign
