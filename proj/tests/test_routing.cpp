// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "support/testing.hpp"
#include "xmoe/error.hpp"
#include "xmoe/routing.hpp"

using namespace xmoe;
using xmoe::testing::check_gradient;
using xmoe::testing::random_tensor;

namespace {

std::vector<float> random_distribution(int n, Rng& rng, float logit_scale = 3.0f) {
  std::vector<float> logits(static_cast<std::size_t>(n));
  for (float& v : logits) v = rng.uniform(-logit_scale, logit_scale);
  const float max_v = *std::max_element(logits.begin(), logits.end());
  float denom = 0.0f;
  for (float& v : logits) {
    v = std::exp(v - max_v);
    denom += v;
  }
  for (float& v : logits) v /= denom;
  return logits;
}

// Brute-force reference: enumerate prefix lengths of the descending order
// (ties toward the lower index) and return the shortest whose sum reaches
// min(t, 1 - 1e-6); if none qualifies, every expert is required.
std::vector<int> oracle_threshold_selection(const std::vector<float>& probs, float threshold) {
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)]; });
  const float effective = std::min(threshold, 1.0f - 1e-6f);
  for (std::size_t m = 1; m <= order.size(); ++m) {
    float cum = 0.0f;
    for (std::size_t j = 0; j < m; ++j) cum += probs[static_cast<std::size_t>(order[j])];
    if (cum >= effective) return std::vector<int>(order.begin(), order.begin() + static_cast<long>(m));
  }
  return order;
}

std::vector<int> selected_experts(const RoutingDecision& decision) {
  std::vector<int> experts;
  for (const Selection& s : decision.selections) experts.push_back(s.expert);
  return experts;
}

}  // namespace

TEST_CASE("gate probabilities: zero router weights give uniform gates") {
  Rng rng(1);
  Tensor h = random_tensor({5, 4}, rng);
  Tensor w = Tensor::zeros({8, 4});
  Tensor probs = compute_gate_probabilities(nullptr, h, w);
  for (int t = 0; t < 5; ++t) {
    for (int e = 0; e < 8; ++e) CHECK(probs.at(t, e) == doctest::Approx(0.125f));
  }
}

TEST_CASE("gate probabilities: single expert gets probability one") {
  Rng rng(2);
  Tensor h = random_tensor({3, 4}, rng);
  Tensor w = random_tensor({1, 4}, rng);
  Tensor probs = compute_gate_probabilities(nullptr, h, w);
  for (int t = 0; t < 3; ++t) CHECK(probs.at(t, 0) == doctest::Approx(1.0f));
}

TEST_CASE("gate probabilities: identity router reproduces hand softmax") {
  Tensor h = Tensor::from_values({1, 2}, {std::log(2.0f), 0.0f});
  Tensor w = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor probs = compute_gate_probabilities(nullptr, h, w);
  CHECK(probs.at(0, 0) == doctest::Approx(2.0f / 3.0f));
  CHECK(probs.at(0, 1) == doctest::Approx(1.0f / 3.0f));
}

TEST_CASE("threshold selection hand traces") {
  const std::vector<float> spike = {1.0f, 0.0f, 0.0f, 0.0f};
  RoutingDecision d = select_experts_threshold(spike, 0.9f);
  REQUIRE(d.selections.size() == 1);
  CHECK(d.selections[0].expert == 0);
  CHECK(d.selections[0].priority == doctest::Approx(0.0f));

  const std::vector<float> three = {0.6f, 0.3f, 0.1f};
  d = select_experts_threshold(three, 0.9f);
  REQUIRE(d.selections.size() == 2);
  CHECK(selected_experts(d) == std::vector<int>{0, 1});
  CHECK(d.selections[0].priority == doctest::Approx(-0.4f));
  CHECK(d.selections[1].priority == doctest::Approx(-1.7f));

  // Threshold zero behaves like a top-1 router.
  const std::vector<float> argmax_case = {0.2f, 0.5f, 0.3f};
  d = select_experts_threshold(argmax_case, 0.0f);
  REQUIRE(d.selections.size() == 1);
  CHECK(d.selections[0].expert == 1);
}

TEST_CASE("threshold one sends tokens to all experts") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(7));
    auto p = random_distribution(n, rng);
    RoutingDecision d = select_experts_threshold(p, 1.0f);
    CHECK(static_cast<int>(d.selections.size()) == n);
  }
  // Even a fully concentrated distribution goes everywhere at t = 1.
  RoutingDecision d = select_experts_threshold(std::vector<float>{1.0f, 0.0f, 0.0f}, 1.0f);
  CHECK(d.selections.size() == 3);
}

TEST_CASE("selection invariants on random distributions") {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(8));
    auto p = random_distribution(n, rng);
    const float t = rng.uniform();
    RoutingDecision d = select_experts_threshold(p, t, trial);
    REQUIRE(!d.selections.empty());
    std::set<int> seen;
    for (std::size_t j = 0; j < d.selections.size(); ++j) {
      const Selection& s = d.selections[j];
      CHECK(s.rank == static_cast<int>(j) + 1);
      CHECK(s.priority == s.gate_weight - static_cast<float>(s.rank));
      if (j > 0) CHECK(s.gate_weight <= d.selections[j - 1].gate_weight);
      CHECK(!seen.contains(s.expert));
      seen.insert(s.expert);
    }
  }
}

TEST_CASE("top-k selection examples") {
  const std::vector<float> p = {0.5f, 0.3f, 0.2f};
  CHECK(selected_experts(select_experts_topk(p, 2)) == std::vector<int>{0, 1});
  CHECK(selected_experts(select_experts_topk(p, 3)) == std::vector<int>{0, 1, 2});

  // Tie at 0.25 resolves toward the lower expert index.
  const std::vector<float> tie = {0.25f, 0.25f, 0.5f};
  CHECK(selected_experts(select_experts_topk(tie, 2)) == std::vector<int>{2, 0});

  CHECK_THROWS_AS(select_experts_topk(p, 0), ContractError);
  CHECK_THROWS_AS(select_experts_topk(p, 4), ContractError);
}

TEST_CASE("hash routing is a fixed deterministic map") {
  HashRouter router(64, 4, 1234);
  const RoutingDecision first = router.route(7);
  const RoutingDecision second = router.route(7);
  CHECK(first.selections[0].expert == second.selections[0].expert);
  CHECK(first.selections[0].gate_weight == 1.0f);
  CHECK(first.selections[0].priority == 0.0f);
  CHECK_THROWS_AS(router.route(64), ContractError);
  CHECK_THROWS_AS(router.route(-1), ContractError);

  HashRouter other(64, 4, 99);
  bool differs = false;
  for (int s = 0; s < 64; ++s) {
    if (router.table()[static_cast<std::size_t>(s)] != other.table()[static_cast<std::size_t>(s)]) {
      differs = true;
      break;
    }
  }
  CHECK(differs);

  HashRouter single(16, 1, 5);
  for (int s = 0; s < 16; ++s) CHECK(single.route(s).selections[0].expert == 0);
}

TEST_CASE("capacity plan examples") {
  CHECK(plan_capacity(8, 4, 1.0f).capacity == 2);
  CHECK(plan_capacity(10, 4, 1.25f).capacity == 4);
  CHECK(plan_capacity(1, 64, 1.0f).capacity == 1);
  CHECK(plan_capacity(7, 3, 1.0f).capacity == 3);  // ceil(2.33)
}

TEST_CASE("assignment resolution drops by priority") {
  std::vector<RoutingDecision> decisions(3);
  const float probs[] = {0.9f, 0.8f, 0.7f};
  for (int t = 0; t < 3; ++t) {
    decisions[static_cast<std::size_t>(t)].token_id = t;
    decisions[static_cast<std::size_t>(t)].selections.push_back(
        Selection{0, probs[t], probs[t] - 1.0f, 1});
  }
  const CapacityPlan plan{3, 1, 1.0f / 3.0f};
  AssignmentResult result = resolve_assignments(decisions, plan, 4);
  REQUIRE(result.kept[0].size() == 1);
  CHECK(result.kept[0][0].token == 0);
  CHECK(result.kept[0][0].priority == doctest::Approx(-0.1f));
  CHECK(result.dropped == 2);
  CHECK(result.kept_mask[0][0] == 1);
  CHECK(result.kept_mask[1][0] == 0);
  CHECK(result.kept_mask[2][0] == 0);
}

TEST_CASE("assignments never drop when capacity covers all tokens") {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(6));
    const int tokens = 1 + static_cast<int>(rng.uniform_int(12));
    std::vector<RoutingDecision> decisions;
    for (int t = 0; t < tokens; ++t) {
      auto p = random_distribution(n, rng);
      decisions.push_back(select_experts_threshold(p, rng.uniform(), t));
    }
    AssignmentResult result = resolve_assignments(decisions, CapacityPlan{tokens, tokens, 1.0f}, n);
    CHECK(result.dropped == 0);
  }
}

TEST_CASE("equal priorities keep the lowest token id") {
  std::vector<RoutingDecision> decisions(2);
  for (int t = 0; t < 2; ++t) {
    decisions[static_cast<std::size_t>(t)].token_id = t;
    decisions[static_cast<std::size_t>(t)].selections.push_back(Selection{0, 0.5f, -0.5f, 1});
  }
  AssignmentResult result = resolve_assignments(decisions, CapacityPlan{2, 1, 0.5f}, 1);
  REQUIRE(result.kept[0].size() == 1);
  CHECK(result.kept[0][0].token == 0);
}

TEST_CASE("capacity property: kept counts bounded, kept beats dropped") {
  Rng rng(7);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(8));
    const int tokens = 1 + static_cast<int>(rng.uniform_int(16));
    const float gamma = rng.uniform(0.2f, 2.0f);
    std::vector<RoutingDecision> decisions;
    for (int t = 0; t < tokens; ++t) {
      decisions.push_back(select_experts_threshold(random_distribution(n, rng), rng.uniform(), t));
    }
    const CapacityPlan plan = plan_capacity(tokens, n, gamma);
    AssignmentResult result = resolve_assignments(decisions, plan, n);

    std::int64_t kept_total = 0;
    for (int e = 0; e < n; ++e) {
      const auto& kept = result.kept[static_cast<std::size_t>(e)];
      CHECK(static_cast<int>(kept.size()) <= plan.capacity);
      kept_total += static_cast<std::int64_t>(kept.size());
      float min_kept_priority = std::numeric_limits<float>::infinity();
      int max_kept_token_at_min = -1;
      for (const ExpertAssignment& a : kept) {
        if (a.priority < min_kept_priority) {
          min_kept_priority = a.priority;
          max_kept_token_at_min = a.token;
        } else if (a.priority == min_kept_priority) {
          max_kept_token_at_min = std::max(max_kept_token_at_min, a.token);
        }
      }
      // Every dropped candidate at this expert must not outrank a kept one.
      for (std::size_t t = 0; t < decisions.size(); ++t) {
        for (std::size_t j = 0; j < decisions[t].selections.size(); ++j) {
          const Selection& s = decisions[t].selections[j];
          if (s.expert != e || result.kept_mask[t][j]) continue;
          const bool outranks =
              s.priority > min_kept_priority ||
              (s.priority == min_kept_priority && decisions[t].token_id < max_kept_token_at_min);
          CHECK(!outranks);
        }
      }
    }
    CHECK(kept_total == result.total - result.dropped);
  }
}

TEST_CASE("balance loss anchors") {
  BalanceStats uniform{{0.25f, 0.25f, 0.25f, 0.25f}, {0.25f, 0.25f, 0.25f, 0.25f}};
  CHECK(load_balance_loss(uniform) == doctest::Approx(1.0).epsilon(1e-6));

  BalanceStats concentrated{{1, 0, 0, 0}, {1, 0, 0, 0}};
  CHECK(load_balance_loss(concentrated) == doctest::Approx(4.0));

  BalanceStats mixed{{0.5f, 0.5f, 0, 0}, {0.4f, 0.4f, 0.1f, 0.1f}};
  CHECK(load_balance_loss(mixed) == doctest::Approx(1.6).epsilon(1e-6));
}

TEST_CASE("balance stats top-1 fractions sum to one") {
  Rng rng(8);
  std::vector<RoutingDecision> decisions;
  for (int t = 0; t < 37; ++t) {
    decisions.push_back(select_experts_threshold(random_distribution(6, rng), 0.7f, t));
  }
  BalanceStats stats = compute_balance_stats(decisions, 6);
  double total = 0.0;
  for (float f : stats.top1_fraction) {
    CHECK(f >= 0.0f);
    total += f;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("on-tape balance loss matches the plain formula and its gradient") {
  Rng rng(9);
  Tensor h = random_tensor({12, 4}, rng);
  Tensor w = random_tensor({4, 4}, rng);
  w.set_requires_grad(true);

  auto build_decisions = [](const Tensor& probs) {
    std::vector<RoutingDecision> decisions;
    for (int t = 0; t < probs.dim(0); ++t) {
      std::span<const float> row(probs.values().data() + static_cast<std::size_t>(t) * probs.dim(1),
                                 static_cast<std::size_t>(probs.dim(1)));
      decisions.push_back(select_experts_threshold(row, 0.6f, t));
    }
    return decisions;
  };

  Tape tape;
  Tensor probs = compute_gate_probabilities(&tape, h, w);
  const auto decisions = build_decisions(probs);
  Tensor aux = load_balance_loss_on_tape(&tape, probs, decisions);
  CHECK(aux.item() ==
        doctest::Approx(load_balance_loss(compute_balance_stats(decisions, 4))).epsilon(1e-5));

  // Selections are held fixed while differentiating: the finite-difference
  // functional reuses the captured decisions.
  tape.backward(aux);
  auto loss_value = [&]() {
    Tape t;
    Tensor p = compute_gate_probabilities(&t, h, w);
    return static_cast<double>(load_balance_loss_on_tape(&t, p, decisions).item());
  };
  CHECK(check_gradient(w, loss_value, 1e-3).rel_error() < 1e-3);
}

TEST_CASE("threshold selection equals the brute-force oracle") {
  Rng rng(10);
  const float thresholds[] = {0.0f, 0.25f, 0.5f, 0.9f, 1.0f};
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(8));
    auto p = random_distribution(n, rng);
    for (float t : thresholds) {
      CAPTURE(trial);
      CAPTURE(t);
      CHECK(selected_experts(select_experts_threshold(p, t)) == oracle_threshold_selection(p, t));
    }
  }
}

TEST_CASE("degenerate identities: t=0 is top-1, t=1 is select-all") {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(7));
    auto p = random_distribution(n, rng);
    CHECK(selected_experts(select_experts_threshold(p, 0.0f)) ==
          selected_experts(select_experts_topk(p, 1)));
    CHECK(static_cast<int>(select_experts_threshold(p, 1.0f).selections.size()) == n);
  }
}

TEST_CASE("selection set grows monotonically with the threshold") {
  Rng rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(7));
    auto p = random_distribution(n, rng);
    float t1 = rng.uniform();
    float t2 = rng.uniform();
    if (t1 > t2) std::swap(t1, t2);
    const auto s1 = selected_experts(select_experts_threshold(p, t1));
    const auto s2 = selected_experts(select_experts_threshold(p, t2));
    CHECK(s1.size() <= s2.size());
    // Both are prefixes of the same descending order.
    for (std::size_t i = 0; i < s1.size(); ++i) CHECK(s1[i] == s2[i]);

    // The top-1 choice always sits inside the threshold selection.
    const auto top1 = selected_experts(select_experts_topk(p, 1));
    CHECK(std::find(s1.begin(), s1.end(), top1[0]) != s1.end());
  }
}

TEST_CASE("router config validation") {
  RouterConfig cfg;
  cfg.num_experts = 8;
  cfg.hidden_dim = 16;
  CHECK_NOTHROW(cfg.validate());
  cfg.threshold = 1.5f;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.threshold = 0.9f;
  cfg.strategy = RouteStrategy::kTopK;
  cfg.top_k = 9;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.top_k = 2;
  cfg.capacity_factor = 0.0f;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("gate distribution invariants") {
  GateDistribution good{{0.25f, 0.75f}};
  CHECK_NOTHROW(good.validate());
  GateDistribution negative{{-0.1f, 1.1f}};
  CHECK_THROWS_AS(negative.validate(), ContractError);
  GateDistribution short_sum{{0.2f, 0.2f}};
  CHECK_THROWS_AS(short_sum.validate(), ContractError);
}
