#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "calign/attribution.hpp"
#include "fixtures.hpp"

using namespace calign;
using calign::testing::LinearNodesModel;
using calign::testing::tiny_config;

namespace {

double sup_diff(const ScoreVector& a, const ScoreVector& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.scores[i] - b.scores[i]));
  return m;
}

bool bit_equal(const ScoreVector& a, const ScoreVector& b) {
  return a.size() == b.size() && std::memcmp(a.scores.data(), b.scores.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST(Methods, NamesRoundTrip) {
  for (ScoreMethod m : {ScoreMethod::nap, ScoreMethod::nap_ig_inputs, ScoreMethod::nap_ig_acts, ScoreMethod::exact,
                        ScoreMethod::aligned})
    EXPECT_EQ(parse_method(to_string(m)), m);
  EXPECT_THROW(parse_method("ig"), ConfigError);
}

TEST(Methods, RankModes) {
  ScoreVector sv;
  EXPECT_EQ(sv.rank_mode(), RankMode::magnitude);
  sv.method = ScoreMethod::aligned;
  EXPECT_EQ(sv.rank_mode(), RankMode::signed_value);
}

TEST(IgAlphas, Rules) {
  EXPECT_EQ(ig_alphas(4, IgRule::midpoint), (std::vector<double>{0.125, 0.375, 0.625, 0.875}));
  EXPECT_EQ(ig_alphas(4, IgRule::clean_endpoint), (std::vector<double>{0.25, 0.5, 0.75, 1.0}));
  EXPECT_EQ(ig_alphas(1, IgRule::clean_endpoint), (std::vector<double>{1.0}));
  EXPECT_THROW(ig_alphas(0, IgRule::midpoint), UsageError);
}

TEST(Attribution, EmptyBatchIsRejected) {
  const LinearNodesModel m(3, 1);
  EXPECT_THROW(nap(m, TaskBatch{}), UsageError);
  EXPECT_THROW(exact_patch_oracle(m, TaskBatch{}), UsageError);
}

TEST(Attribution, AlignedIsNotAnAttributionMethod) {
  const LinearNodesModel m(3, 1);
  EXPECT_THROW(attribute(m, generate(TaskId::ioi_toy, 2, 1), ScoreMethod::aligned), UsageError);
}

// On a metric linear in node activations, first order is exact.
class LinearFixture : public ::testing::TestWithParam<TaskId> {};

TEST_P(LinearFixture, NapEqualsOracle) {
  const LinearNodesModel m(7, 42);
  const TaskBatch batch = generate(GetParam(), 12, 9);
  const ScoreVector a = nap(m, batch);
  const ScoreVector o = exact_patch_oracle(m, batch);
  EXPECT_EQ(a.model_id, m.model_id());
  EXPECT_EQ(a.task, GetParam());
  ASSERT_EQ(a.size(), 7u);
  for (std::size_t v = 0; v < 7; ++v) EXPECT_NEAR(a.scores[v], o.scores[v], 1e-9) << v;
}

TEST_P(LinearFixture, IgVariantsEqualNapWhenGradientsAreConstant) {
  const LinearNodesModel m(5, 3);
  const TaskBatch batch = generate(GetParam(), 6, 2);
  const ScoreVector a = nap(m, batch);
  EXPECT_LT(sup_diff(a, nap_ig_inputs(m, batch, 5)), 1e-9);
  EXPECT_LT(sup_diff(a, nap_ig_acts(m, batch, 5)), 1e-9);
}

INSTANTIATE_TEST_SUITE_P(AllTasks, LinearFixture, ::testing::ValuesIn(kAllTasks),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(Oracle, MatchesDirectReexecution) {
  const Transformer m = build_model(tiny_config(6));
  const TaskBatch batch = generate(TaskId::mcqa_toy, 3, 4);
  const ScoreVector o = exact_patch_oracle(m, batch);
  for (std::size_t v = 0; v < m.node_count(); ++v) {
    double expect = 0.0;
    for (const TaskExample& ex : batch.examples) {
      const auto clean = forward_capture(m, ex.clean);
      const auto corrupt = forward_capture(m, ex.corrupt);
      const auto patched = forward_patched(m, ex.clean, std::map<std::size_t, ad::Tensor>{{v, corrupt.node(v)}});
      expect += logit_difference(clean.logits, ex) - logit_difference(patched.logits, ex);
    }
    EXPECT_NEAR(o.scores[v], expect / 3.0, 1e-12);
  }
}

TEST(Nap, GradientMatchesFiniteDifferenceOfPatchedMetric) {
  // d m / d A_v along (A_clean - A_corrupt) equals the NAP score for one example.
  const Transformer m = build_model(tiny_config(7));
  const TaskBatch batch = generate(TaskId::ioi_toy, 1, 5);
  const TaskExample& ex = batch.examples[0];
  const auto clean = forward_capture(m, ex.clean);
  const auto corrupt = forward_capture(m, ex.corrupt);
  const ScoreVector s = nap(m, batch);
  for (std::size_t v = 0; v < m.node_count(); ++v) {
    auto at = [&](double t) {
      ad::Tensor a = clean.node(v);
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += t * (clean.node(v)[i] - corrupt.node(v)[i]);
      return logit_difference(forward_patched(m, ex.clean, std::map<std::size_t, ad::Tensor>{{v, a}}).logits, ex);
    };
    EXPECT_NEAR(s.scores[v], (at(1e-5) - at(-1e-5)) / 2e-5, 1e-6) << v;
  }
}

TEST(Ig, SingleCleanEndpointStepIsNapBitForBit) {
  const Transformer m = build_model(tiny_config(9));
  for (TaskId t : {TaskId::ioi_toy, TaskId::arith_sub, TaskId::arc_challenge_toy}) {
    const TaskBatch batch = generate(t, 4, 11);
    const ScoreVector a = nap(m, batch);
    EXPECT_TRUE(bit_equal(a, nap_ig_inputs(m, batch, 1, IgRule::clean_endpoint))) << to_string(t);
    EXPECT_TRUE(bit_equal(a, nap_ig_acts(m, batch, 1, IgRule::clean_endpoint))) << to_string(t);
  }
}

TEST(Ig, ConvergesAsStepsGrow) {
  const Transformer m = build_model(tiny_config(10));
  const TaskBatch batch = generate(TaskId::arith_add, 3, 2);
  EXPECT_LT(sup_diff(nap_ig_inputs(m, batch, 32), nap_ig_inputs(m, batch, 64)), 1e-3);
  EXPECT_LT(sup_diff(nap_ig_acts(m, batch, 32), nap_ig_acts(m, batch, 64)), 1e-3);
}

// Activation IG with exact path integration recovers the exact patching
// effect of a whole stage when summed over the stage's nodes.
TEST(Ig, ActivationPathSumApproachesStageEffect) {
  const Transformer m = build_model(tiny_config(12));
  const TaskBatch batch = generate(TaskId::ioi_toy, 1, 3);
  const TaskExample& ex = batch.examples[0];
  const ScoreVector ig = nap_ig_acts(m, batch, 256);
  const auto clean = forward_capture(m, ex.clean);
  const auto corrupt = forward_capture(m, ex.corrupt);
  const auto stages = transformer_stages(m.config());
  for (const auto& stage : stages) {
    std::map<std::size_t, ad::Tensor> patch;
    double summed = 0.0;
    for (std::size_t v : stage) {
      patch.emplace(v, corrupt.node(v));
      summed += ig.scores[v];
    }
    const double effect = logit_difference(clean.logits, ex) - logit_difference(forward_patched(m, ex.clean, patch).logits, ex);
    EXPECT_NEAR(summed, effect, 1e-4);
  }
}

TEST(Stages, TransformerStagesCoverEveryNodeOnce) {
  const ModelConfig c = tiny_config();
  std::vector<int> seen(c.node_count(), 0);
  for (const auto& s : transformer_stages(c))
    for (std::size_t v : s) ++seen[v];
  for (int n : seen) EXPECT_EQ(n, 1);
  EXPECT_EQ(transformer_stages(c).size(), 4u);
}

TEST(Spearman, KnownValues) {
  const std::vector<double> a{1, 2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(spearman(a, std::vector<double>{10, 20, 30, 40, 50}), 1.0);
  EXPECT_DOUBLE_EQ(spearman(a, std::vector<double>{5, 4, 3, 2, 1}), -1.0);
  // Ties take average ranks: ranks (1.5, 1.5, 3) vs (1, 2, 3).
  EXPECT_NEAR(spearman(std::vector<double>{1, 1, 2}, std::vector<double>{1, 2, 3}), 0.8660254037844386, 1e-12);
  EXPECT_EQ(spearman(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), 0.0);
  EXPECT_THROW(spearman(std::vector<double>{1}, std::vector<double>{1}), UsageError);
}
