// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Token-to-expert routing: gate distributions, threshold / top-k / hash
// expert selection with per-assignment priorities, capacity planning,
// priority-ordered capacity resolution, and the load-balancing loss.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xmoe/rng.hpp"
#include "xmoe/tensor.hpp"

namespace xmoe {

enum class RouteStrategy { kThreshold, kTopK, kHash };

std::string to_string(RouteStrategy strategy);
RouteStrategy route_strategy_from_string(const std::string& name);

struct RouterConfig {
  int num_experts = 1;
  int hidden_dim = 1;
  float threshold = 0.9f;  // in [0, 1]
  RouteStrategy strategy = RouteStrategy::kThreshold;
  int top_k = 1;                 // used when strategy == kTopK
  float capacity_factor = 1.0f;  // > 0

  void validate() const;  // throws ConfigError listing violations
};

// Per-token probability vector over experts. Entries non-negative and
// summing to 1 within 1e-6.
struct GateDistribution {
  std::vector<float> probs;

  void validate() const;
};

struct Selection {
  int expert = 0;
  float gate_weight = 0.0f;  // router probability of this expert
  float priority = 0.0f;     // gate_weight - rank
  int rank = 1;              // 1-based position in the token's preference order
};

struct RoutingDecision {
  int token_id = 0;
  std::vector<Selection> selections;  // descending gate weight, >= 1 entry
};

struct CapacityPlan {
  int tokens = 1;
  int capacity = 1;  // per-expert token quota, >= 1
  float capacity_factor = 1.0f;
};

// Aggregates of the top-1 assignment used by the balance loss: top1_fraction
// is the share of tokens ranking each expert first; mean_top1_prob is the
// per-expert mean (over all tokens) of the probability those tokens put on
// their first choice.
struct BalanceStats {
  std::vector<float> top1_fraction;
  std::vector<float> mean_top1_prob;
};

// Row-wise softmax of h * router_weights^T: h is [T x d], weights [N x d],
// result [T x N]. Differentiable when recorded on a tape.
Tensor compute_gate_probabilities(Tape* tape, const Tensor& h, const Tensor& router_weights);

// Selects the minimal prefix of the descending-probability order whose
// cumulative sum reaches the threshold; ties broken toward the lower expert
// index; always at least one selection; thresholds >= 1 select every expert.
// Priority of the rank-j selection is its probability minus j.
RoutingDecision select_experts_threshold(std::span<const float> probs, float threshold,
                                         int token_id = 0);

// Exactly k selections with the same ordering, tie-break, and priority rule.
RoutingDecision select_experts_topk(std::span<const float> probs, int k, int token_id = 0);

// Fixed random symbol-to-expert map, built once from a seed.
class HashRouter {
 public:
  HashRouter(int vocab_size, int num_experts, std::uint64_t seed);
  HashRouter(std::vector<int> table, int num_experts);

  // Single selection with gate weight 1.0 and priority 0.0.
  RoutingDecision route(int symbol, int token_id = 0) const;

  std::span<const int> table() const { return table_; }
  int num_experts() const { return num_experts_; }

 private:
  std::vector<int> table_;
  int num_experts_;
};

// capacity = max(1, ceil(tokens * capacity_factor / num_experts)).
CapacityPlan plan_capacity(int tokens, int num_experts, float capacity_factor);

struct ExpertAssignment {
  int token = 0;
  float gate_weight = 0.0f;
  float priority = 0.0f;
  int rank = 1;
};

struct AssignmentResult {
  // Kept assignments per expert, highest priority first (ties: lower token).
  std::vector<std::vector<ExpertAssignment>> kept;
  // kept_mask[t][j] mirrors decisions[t].selections[j].
  std::vector<std::vector<char>> kept_mask;
  std::int64_t dropped = 0;
  std::int64_t total = 0;

  double drop_rate() const {
    return total == 0 ? 0.0 : static_cast<double>(dropped) / static_cast<double>(total);
  }
  std::int64_t kept_count() const { return total - dropped; }
};

// Competing assignments at each expert are ordered by priority (descending,
// ties toward the lower token id); the first `capacity` are kept.
AssignmentResult resolve_assignments(const std::vector<RoutingDecision>& decisions,
                                     const CapacityPlan& plan, int num_experts);

BalanceStats compute_balance_stats(const std::vector<RoutingDecision>& decisions, int num_experts);

// num_experts * sum_i top1_fraction[i] * mean_top1_prob[i].
double load_balance_loss(const BalanceStats& stats);

// Same value built on the tape from the gate probabilities; the gradient
// flows through the gathered top-1 probabilities only (fractions are
// constants).
Tensor load_balance_loss_on_tape(Tape* tape, const Tensor& gate_probs,
                                 const std::vector<RoutingDecision>& decisions);

}  // namespace xmoe
