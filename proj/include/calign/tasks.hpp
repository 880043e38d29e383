#pragma once

// Six toy tasks over a closed 64-token vocabulary, each generating matched
// clean/corrupt prompt pairs. Corruption never touches the final (answer)
// position, so clean and corrupt prompts agree there.
//
//   ioi_toy            T_IOI X Y S >            -> the name that is not S
//   mcqa_toy           T_MC A v B v C v D v ? q > -> label whose value is q
//   arith_add          a + b =                  -> (a + b) mod 10
//   arith_sub          a - b =                  -> (a - b) mod 10
//   arc_easy_toy       T_ARC A o B o C o D o ? attr > -> label of the object with attr
//   arc_challenge_toy  T_ARCC A o B o C o D o ? ref  > -> label of the object sharing ref's attribute
//
// The incorrect token of every example is the corrupt prompt's answer.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "calign/autodiff.hpp"
#include "calign/errors.hpp"

namespace calign {

enum class TaskId : std::uint8_t { ioi_toy, mcqa_toy, arith_add, arith_sub, arc_easy_toy, arc_challenge_toy };

inline constexpr std::array<TaskId, 6> kAllTasks{TaskId::ioi_toy,   TaskId::mcqa_toy,     TaskId::arith_add,
                                                 TaskId::arith_sub, TaskId::arc_easy_toy, TaskId::arc_challenge_toy};

inline std::string_view to_string(TaskId t) {
  switch (t) {
    case TaskId::ioi_toy: return "ioi_toy";
    case TaskId::mcqa_toy: return "mcqa_toy";
    case TaskId::arith_add: return "arith_add";
    case TaskId::arith_sub: return "arith_sub";
    case TaskId::arc_easy_toy: return "arc_easy_toy";
    case TaskId::arc_challenge_toy: return "arc_challenge_toy";
  }
  return "?";
}

inline TaskId parse_task(std::string_view name) {
  for (TaskId t : kAllTasks)
    if (to_string(t) == name) return t;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

// Near-distribution partner; symmetric on the four paired tasks.
inline std::optional<TaskId> near_partner(TaskId t) {
  switch (t) {
    case TaskId::arith_add: return TaskId::arith_sub;
    case TaskId::arith_sub: return TaskId::arith_add;
    case TaskId::arc_easy_toy: return TaskId::arc_challenge_toy;
    case TaskId::arc_challenge_toy: return TaskId::arc_easy_toy;
    default: return std::nullopt;
  }
}

// Upper bound on positions where clean and corrupt prompts differ.
inline std::size_t max_corrupted_positions(TaskId t) {
  switch (t) {
    case TaskId::mcqa_toy: return 4;
    case TaskId::arith_add:
    case TaskId::arith_sub: return 2;
    default: return 1;
  }
}

namespace vocab {
inline constexpr int kSize = 64;
inline constexpr int kDigit0 = 0;  // 0..9
inline constexpr int kPlus = 10;
inline constexpr int kMinus = 11;
inline constexpr int kEquals = 12;
inline constexpr int kQuery = 13;
inline constexpr int kAnswer = 14;
inline constexpr int kTaskIoi = 15;
inline constexpr int kTaskMcqa = 16;
inline constexpr int kTaskArc = 17;
inline constexpr int kTaskArcChallenge = 18;
inline constexpr int kName0 = 19;  // 8 names
inline constexpr int kNames = 8;
inline constexpr int kLabel0 = 27;  // A..D
inline constexpr int kValue0 = 31;  // 8 values
inline constexpr int kValues = 8;
inline constexpr int kObject0 = 39;  // 16 objects
inline constexpr int kObjects = 16;
inline constexpr int kAttr0 = 55;  // 4 attributes
inline constexpr int kAttrs = 4;
inline constexpr int kModulus = 10;

inline int attribute_of(int object_token) { return kAttr0 + (object_token - kObject0) % kAttrs; }
}  // namespace vocab

struct TaskExample {
  std::vector<int> clean;
  std::vector<int> corrupt;
  std::size_t answer_pos = 0;
  int correct = 0;
  int incorrect = 0;

  friend bool operator==(const TaskExample&, const TaskExample&) = default;
};

struct TaskBatch {
  TaskId task = TaskId::ioi_toy;
  std::vector<TaskExample> examples;

  std::size_t size() const noexcept { return examples.size(); }
  bool empty() const noexcept { return examples.empty(); }
  friend bool operator==(const TaskBatch&, const TaskBatch&) = default;
};

namespace detail {

inline std::vector<int> choice_prompt(int marker, const std::array<int, 4>& items, int query) {
  std::vector<int> p{marker};
  for (int i = 0; i < 4; ++i) {
    p.push_back(vocab::kLabel0 + i);
    p.push_back(items[static_cast<std::size_t>(i)]);
  }
  p.push_back(vocab::kQuery);
  p.push_back(query);
  p.push_back(vocab::kAnswer);
  return p;
}

inline int uniform(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

inline TaskExample make_ioi(std::mt19937_64& rng) {
  const int a = uniform(rng, 0, vocab::kNames - 1);
  int b = uniform(rng, 0, vocab::kNames - 2);
  if (b >= a) ++b;
  const int x = vocab::kName0 + a;
  const int y = vocab::kName0 + b;
  const int s = uniform(rng, 0, 1) ? x : y;
  const int io = s == x ? y : x;
  TaskExample ex;
  ex.clean = {vocab::kTaskIoi, x, y, s, vocab::kAnswer};
  ex.corrupt = {vocab::kTaskIoi, x, y, io, vocab::kAnswer};
  ex.answer_pos = 4;
  ex.correct = io;
  ex.incorrect = s;
  return ex;
}

inline TaskExample make_mcqa(std::mt19937_64& rng) {
  std::array<int, vocab::kValues> pool{};
  for (int i = 0; i < vocab::kValues; ++i) pool[static_cast<std::size_t>(i)] = vocab::kValue0 + i;
  std::shuffle(pool.begin(), pool.end(), rng);
  std::array<int, 4> values{pool[0], pool[1], pool[2], pool[3]};
  const int ans = uniform(rng, 0, 3);
  const int shift = uniform(rng, 1, 3);
  std::array<int, 4> rotated{};
  for (int i = 0; i < 4; ++i) rotated[static_cast<std::size_t>((i + shift) % 4)] = values[static_cast<std::size_t>(i)];
  const int query = values[static_cast<std::size_t>(ans)];
  TaskExample ex;
  ex.clean = choice_prompt(vocab::kTaskMcqa, values, query);
  ex.corrupt = choice_prompt(vocab::kTaskMcqa, rotated, query);
  ex.answer_pos = 11;
  ex.correct = vocab::kLabel0 + ans;
  ex.incorrect = vocab::kLabel0 + (ans + shift) % 4;
  return ex;
}

inline TaskExample make_arith(std::mt19937_64& rng, bool add) {
  auto answer = [add](int a, int b) {
    return add ? (a + b) % vocab::kModulus : ((a - b) % vocab::kModulus + vocab::kModulus) % vocab::kModulus;
  };
  const int a = uniform(rng, 0, 9);
  const int b = uniform(rng, 0, 9);
  int a2 = 0;
  int b2 = 0;
  do {
    a2 = uniform(rng, 0, 9);
    b2 = uniform(rng, 0, 9);
  } while (answer(a2, b2) == answer(a, b));
  const int op = add ? vocab::kPlus : vocab::kMinus;
  TaskExample ex;
  ex.clean = {vocab::kDigit0 + a, op, vocab::kDigit0 + b, vocab::kEquals};
  ex.corrupt = {vocab::kDigit0 + a2, op, vocab::kDigit0 + b2, vocab::kEquals};
  ex.answer_pos = 3;
  ex.correct = vocab::kDigit0 + answer(a, b);
  ex.incorrect = vocab::kDigit0 + answer(a2, b2);
  return ex;
}

// Four objects with pairwise distinct attributes, in random order.
inline std::array<int, 4> distinct_attribute_objects(std::mt19937_64& rng) {
  std::array<int, 4> attrs{0, 1, 2, 3};
  std::shuffle(attrs.begin(), attrs.end(), rng);
  std::array<int, 4> objs{};
  for (std::size_t i = 0; i < 4; ++i) {
    const int variant = uniform(rng, 0, vocab::kObjects / vocab::kAttrs - 1);
    objs[i] = vocab::kObject0 + attrs[i] + vocab::kAttrs * variant;
  }
  return objs;
}

inline TaskExample make_arc(std::mt19937_64& rng, bool challenge) {
  const auto objs = distinct_attribute_objects(rng);
  const int ans = uniform(rng, 0, 3);
  int other = uniform(rng, 0, 2);
  if (other >= ans) ++other;
  auto reference_for = [&](int choice) {
    // An object outside the listed four sharing the chosen object's attribute.
    const int listed = objs[static_cast<std::size_t>(choice)];
    const int attr = (listed - vocab::kObject0) % vocab::kAttrs;
    int variant = uniform(rng, 0, vocab::kObjects / vocab::kAttrs - 2);
    const int listed_variant = (listed - vocab::kObject0) / vocab::kAttrs;
    if (variant >= listed_variant) ++variant;
    return vocab::kObject0 + attr + vocab::kAttrs * variant;
  };
  const int marker = challenge ? vocab::kTaskArcChallenge : vocab::kTaskArc;
  int q_clean = 0;
  int q_corrupt = 0;
  if (challenge) {
    q_clean = reference_for(ans);
    q_corrupt = reference_for(other);
  } else {
    q_clean = vocab::attribute_of(objs[static_cast<std::size_t>(ans)]);
    q_corrupt = vocab::attribute_of(objs[static_cast<std::size_t>(other)]);
  }
  TaskExample ex;
  ex.clean = choice_prompt(marker, objs, q_clean);
  ex.corrupt = choice_prompt(marker, objs, q_corrupt);
  ex.answer_pos = 11;
  ex.correct = vocab::kLabel0 + ans;
  ex.incorrect = vocab::kLabel0 + other;
  return ex;
}

inline std::uint64_t task_salt(TaskId t) { return 0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(t) + 1); }

}  // namespace detail

inline TaskExample generate_one(TaskId task, std::mt19937_64& rng) {
  switch (task) {
    case TaskId::ioi_toy: return detail::make_ioi(rng);
    case TaskId::mcqa_toy: return detail::make_mcqa(rng);
    case TaskId::arith_add: return detail::make_arith(rng, true);
    case TaskId::arith_sub: return detail::make_arith(rng, false);
    case TaskId::arc_easy_toy: return detail::make_arc(rng, false);
    case TaskId::arc_challenge_toy: return detail::make_arc(rng, true);
  }
  throw UsageError("generate: unknown task");
}

inline TaskBatch generate(TaskId task, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw UsageError("generate: batch size must be at least 1");
  std::mt19937_64 rng(seed ^ detail::task_salt(task));
  TaskBatch batch{task, {}};
  batch.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) batch.examples.push_back(generate_one(task, rng));
  return batch;
}

// Differentiable logit difference for one example: logit[correct] - logit[incorrect] at answer_pos.
inline ad::Var logit_difference(const ad::Var& logits, const TaskExample& ex) {
  const ad::Shape& s = logits.shape();
  if (s.size() != 2 || ex.answer_pos >= s[0] || static_cast<std::size_t>(std::max(ex.correct, ex.incorrect)) >= s[1]) {
    throw ShapeError("metric: logits shape " + ad::shape_str(s) + " incompatible with example");
  }
  const ad::Var row = ad::slice(logits, 0, ex.answer_pos, ex.answer_pos + 1);
  const auto c = static_cast<std::size_t>(ex.correct);
  const auto i = static_cast<std::size_t>(ex.incorrect);
  return ad::sub(ad::slice(row, 1, c, c + 1), ad::slice(row, 1, i, i + 1));
}

inline double logit_difference(const ad::Tensor& logits, const TaskExample& ex) {
  if (logits.rank() != 2 || ex.answer_pos >= logits.dim(0)) {
    throw ShapeError("metric: logits shape " + ad::shape_str(logits.shape()) + " incompatible with example");
  }
  return logits(ex.answer_pos, static_cast<std::size_t>(ex.correct)) -
         logits(ex.answer_pos, static_cast<std::size_t>(ex.incorrect));
}

struct MetricValue {
  double value = 0.0;
};

// Mean logit difference over a [batch, seq, vocab] logits tensor.
inline MetricValue metric(const ad::Tensor& logits, const TaskBatch& batch) {
  if (logits.rank() != 3 || logits.dim(0) != batch.size()) {
    throw ShapeError("metric: expected logits [" + std::to_string(batch.size()) + ",seq,vocab], got " +
                     ad::shape_str(logits.shape()));
  }
  const std::size_t seq = logits.dim(1);
  const std::size_t voc = logits.dim(2);
  double total = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const TaskExample& ex = batch.examples[b];
    if (ex.answer_pos >= seq || static_cast<std::size_t>(std::max(ex.correct, ex.incorrect)) >= voc) {
      throw ShapeError("metric: example " + std::to_string(b) + " indexes outside logits");
    }
    const std::size_t base = (b * seq + ex.answer_pos) * voc;
    total += logits[base + static_cast<std::size_t>(ex.correct)] - logits[base + static_cast<std::size_t>(ex.incorrect)];
  }
  return {total / static_cast<double>(batch.size())};
}

// Mean of per-example logit differences from per-example [seq, vocab] logits.
inline MetricValue metric(std::span<const ad::Tensor> per_example_logits, const TaskBatch& batch) {
  if (per_example_logits.size() != batch.size()) {
    throw ShapeError("metric: " + std::to_string(per_example_logits.size()) + " logit tensors for a batch of " +
                     std::to_string(batch.size()));
  }
  double total = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) total += logit_difference(per_example_logits[b], batch.examples[b]);
  return {total / static_cast<double>(batch.size())};
}

}  // namespace calign
