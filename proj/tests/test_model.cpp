#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "calign/model.hpp"
#include "calign/tasks.hpp"
#include "fixtures.hpp"

using namespace calign;
using calign::testing::tiny_config;

namespace {

double max_abs_diff(const ad::Tensor& a, const ad::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

const std::vector<int> kPrompt{vocab::kTaskIoi, vocab::kName0, vocab::kName0 + 1, vocab::kName0, vocab::kAnswer};
const std::vector<int> kOther{vocab::kTaskIoi, vocab::kName0, vocab::kName0 + 1, vocab::kName0 + 1, vocab::kAnswer};

}  // namespace

TEST(NodeRegistry, CanonicalOrderHeadsThenMlp) {
  const ModelConfig c = tiny_config();
  const auto nodes = all_nodes(c);
  ASSERT_EQ(nodes.size(), 6u);
  EXPECT_EQ(nodes[0].label(), "L0.H0");
  EXPECT_EQ(nodes[1].label(), "L0.H1");
  EXPECT_EQ(nodes[2].label(), "L0.MLP");
  EXPECT_EQ(nodes[5].label(), "L1.MLP");
  for (std::size_t i = 0; i < nodes.size(); ++i) EXPECT_EQ(node_index(c, nodes[i]), i);
  EXPECT_TRUE(std::is_sorted(nodes.begin(), nodes.end()));
}

TEST(NodeRegistry, OutOfRangeThrows) {
  const ModelConfig c = tiny_config();
  EXPECT_THROW(node_at(c, 6), UsageError);
  EXPECT_THROW(node_index(c, {2, NodeKind::mlp, 0}), UsageError);
  EXPECT_THROW(node_index(c, {0, NodeKind::attn_head, 2}), UsageError);
}

TEST(ModelConfig, RejectsIndivisibleHeads) {
  ModelConfig c = tiny_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Transformer, ForwardShapesAndDeterminism) {
  const Transformer m = build_model(tiny_config(3));
  ad::Tape t1, t2;
  const auto a = m.forward(t1, kPrompt);
  const auto b = m.forward(t2, kPrompt);
  EXPECT_EQ(a.logits.shape(), (ad::Shape{5, 64}));
  EXPECT_EQ(a.nodes[0].shape(), (ad::Shape{5, 8}));
  EXPECT_EQ(a.nodes[2].shape(), (ad::Shape{5, 16}));
  EXPECT_EQ(a.logits.value(), b.logits.value());
}

TEST(Transformer, RejectsBadTokens) {
  const Transformer m = build_model(tiny_config());
  ad::Tape tape;
  EXPECT_THROW(m.forward(tape, std::vector<int>{64}), ShapeError);
  EXPECT_THROW(m.forward(tape, std::vector<int>(17, 1)), ShapeError);
  EXPECT_THROW(m.forward(tape, std::vector<int>{}), ShapeError);
}

TEST(Transformer, IsCausal) {
  const Transformer m = build_model(tiny_config(5));
  std::vector<int> changed = kPrompt;
  changed.back() = vocab::kQuery;
  const auto a = forward_capture(m, kPrompt);
  const auto b = forward_capture(m, changed);
  for (std::size_t p = 0; p + 1 < kPrompt.size(); ++p)
    for (std::size_t j = 0; j < 64; ++j) EXPECT_EQ(a.logits(p, j), b.logits(p, j));
}

TEST(Patching, NaturalValueOverrideIsIdentity) {
  const Transformer m = build_model(tiny_config(2));
  const auto clean = forward_capture(m, kPrompt);
  std::map<std::size_t, ad::Tensor> all;
  for (std::size_t v = 0; v < m.node_count(); ++v) all.emplace(v, clean.node(v));
  EXPECT_LT(max_abs_diff(forward_patched(m, kPrompt, all).logits, clean.logits), 1e-12);
}

TEST(Patching, OverrideChangesDownstreamOnly) {
  const Transformer m = build_model(tiny_config(2));
  const auto clean = forward_capture(m, kPrompt);
  const auto other = forward_capture(m, kOther);
  const std::size_t l1h0 = node_index(m.config(), {1, NodeKind::attn_head, 0});
  const auto patched = forward_patched(m, kPrompt, {{l1h0, other.node(l1h0)}});
  for (std::size_t v = 0; v < l1h0; ++v) EXPECT_EQ(patched.node(v), clean.node(v)) << v;
  EXPECT_EQ(patched.node(l1h0), other.node(l1h0));
  EXPECT_GT(max_abs_diff(patched.logits, clean.logits), 0.0);
}

TEST(Patching, NodeIdOverloadMatchesIndex) {
  const Transformer m = build_model(tiny_config(2));
  const auto other = forward_capture(m, kOther);
  const auto by_index = forward_patched(m, kPrompt, std::map<std::size_t, ad::Tensor>{{2, other.node(2)}});
  const auto by_id = forward_patched(m, kPrompt, std::map<NodeId, ad::Tensor>{{{0, NodeKind::mlp, 0}, other.node(2)}});
  EXPECT_EQ(by_index.logits, by_id.logits);
}

TEST(Patching, WrongShapeIsRejected) {
  const Transformer m = build_model(tiny_config());
  EXPECT_THROW(forward_patched(m, kPrompt, std::map<std::size_t, ad::Tensor>{{0, ad::Tensor({5, 16})}}), ShapeError);
  EXPECT_THROW(forward_patched(m, kPrompt, std::map<std::size_t, ad::Tensor>{{6, ad::Tensor({5, 16})}}), UsageError);
}

TEST(Patching, BlendEndpointsAreExact) {
  const Transformer m = build_model(tiny_config(8));
  const auto clean = forward_capture(m, kPrompt);
  const auto corrupt = forward_capture(m, kOther);
  std::map<std::size_t, BlendOverride> ones, zeros;
  for (std::size_t v = 0; v < m.node_count(); ++v) {
    ones[v] = {1.0, clean.nodes[v], corrupt.nodes[v]};
    zeros[v] = {0.0, clean.nodes[v], corrupt.nodes[v]};
  }
  EXPECT_LT(max_abs_diff(forward_patched(m, kPrompt, ones).logits, clean.logits), 1e-12);
  const auto z = forward_patched(m, kPrompt, zeros);
  // The answer position reads identical tokens in both prompts.
  for (std::size_t j = 0; j < 64; ++j) EXPECT_NEAR(z.logits(4, j), corrupt.logits(4, j), 1e-12);
}

TEST(Patching, BlendIsDifferentiableInAlpha) {
  const Transformer m = build_model(tiny_config(8));
  const auto clean = forward_capture(m, kPrompt);
  const auto corrupt = forward_capture(m, kOther);
  auto metric_at = [&](double a) {
    ad::Tape tape;
    PatchSet p(m.node_count());
    p.set_blend(1, tape.constant(ad::Tensor::scalar(a)), clean.nodes[1], corrupt.nodes[1]);
    return m.forward(tape, kPrompt, &p).logits.value()(4, 20);
  };
  ad::Tape tape;
  PatchSet p(m.node_count());
  const ad::Var alpha = tape.parameter(ad::Tensor::scalar(0.3));
  p.set_blend(1, alpha, clean.nodes[1], corrupt.nodes[1]);
  const auto f = m.forward(tape, kPrompt, &p);
  tape.backward(ad::slice(ad::slice(f.logits, 0, 4, 5), 1, 20, 21));
  const double fd = (metric_at(0.3 + 1e-5) - metric_at(0.3 - 1e-5)) / 2e-5;
  EXPECT_NEAR(alpha.grad().item(), fd, 1e-7);
}

TEST(Patching, ParameterGradientMatchesFiniteDifference) {
  const ModelConfig c = tiny_config(4);
  const TransformerWeights w = TransformerWeights::init(c);
  const ParamIndex idx(c);
  const std::size_t target = idx.w_in(0);
  auto loss = [&](const ad::Tensor& probe) {
    TransformerWeights copy = w;
    copy.params[target] = std::make_shared<ad::Tensor>(probe);
    ad::Tape tape;
    return Transformer(copy).forward(tape, kPrompt).logits.value()(4, 21);
  };
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (std::size_t i = 0; i < w.params.size(); ++i)
    vars.push_back(i == target ? tape.parameter(*w.params[i]) : tape.constant(*w.params[i]));
  const ad::Var emb = ad::embed_lookup(vars[idx.tok_emb()], kPrompt);
  const auto f = run_transformer(tape, c, idx, vars, emb, nullptr);
  tape.backward(ad::slice(ad::slice(f.logits, 0, 4, 5), 1, 21, 22));
  const ad::Tensor g = vars[target].grad();
  for (std::size_t i = 0; i < g.size(); i += 37) {
    EXPECT_NEAR(g[i], ad::finite_diff_entry(loss, *w.params[target], i, 1e-5), 1e-7) << i;
  }
}

TEST(ModelPair, ForwardTransferNeedsLargerTarget) {
  const Transformer small = build_model(tiny_config());
  ModelConfig big_cfg = tiny_config();
  big_cfg.n_layers = 3;
  const Transformer big = build_model(big_cfg);
  EXPECT_NO_THROW(ModelPair(small, big));
  EXPECT_THROW(ModelPair(big, small), ConfigError);
  EXPECT_NO_THROW(ModelPair(big, small, true));
}

TEST(WeightCache, RoundTripAndMismatchRejection) {
  const auto dir = std::filesystem::temp_directory_path() / "calign-test-weights";
  std::filesystem::remove_all(dir);
  const ModelConfig c = tiny_config(11);
  const TransformerWeights w = TransformerWeights::init(c);
  const auto path = dir / "w.calw";
  save_weights(path, w, "mix");
  const TransformerWeights back = load_weights(path, c, "mix");
  ASSERT_EQ(back.params.size(), w.params.size());
  for (std::size_t i = 0; i < w.params.size(); ++i) EXPECT_EQ(*back.params[i], *w.params[i]);
  EXPECT_THROW(load_weights(path, c, "other"), MissingArtifactError);
  ModelConfig c2 = c;
  c2.seed = 12;
  EXPECT_THROW(load_weights(path, c2, "mix"), MissingArtifactError);
  EXPECT_THROW(load_weights(dir / "absent.calw", c, "mix"), MissingArtifactError);
  std::filesystem::resize_file(path, 100);
  EXPECT_THROW(load_weights(path, c, "mix"), MissingArtifactError);
  std::filesystem::remove_all(dir);
}
