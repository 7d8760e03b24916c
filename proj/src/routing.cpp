// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
#include "xmoe/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "xmoe/error.hpp"

namespace xmoe {

namespace {

// Expert indices ordered by descending probability, equal probabilities by
// ascending index. Shared by the threshold and top-k strategies so the two
// agree on every prefix.
std::vector<int> descending_order(std::span<const float> probs) {
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)]; });
  return order;
}

Selection make_selection(std::span<const float> probs, int expert, int rank) {
  const float p = probs[static_cast<std::size_t>(expert)];
  return Selection{expert, p, p - static_cast<float>(rank), rank};
}

}  // namespace

std::string to_string(RouteStrategy strategy) {
  switch (strategy) {
    case RouteStrategy::kThreshold: return "threshold";
    case RouteStrategy::kTopK: return "topk";
    case RouteStrategy::kHash: return "hash";
  }
  return "threshold";
}

RouteStrategy route_strategy_from_string(const std::string& name) {
  if (name == "threshold") return RouteStrategy::kThreshold;
  if (name == "topk") return RouteStrategy::kTopK;
  if (name == "hash") return RouteStrategy::kHash;
  throw ConfigError("unknown routing strategy: " + name);
}

void RouterConfig::validate() const {
  std::string problems;
  if (num_experts < 1) problems += " num_experts must be >= 1;";
  if (hidden_dim < 1) problems += " hidden_dim must be >= 1;";
  if (!(threshold >= 0.0f && threshold <= 1.0f)) problems += " threshold must lie in [0, 1];";
  if (strategy == RouteStrategy::kTopK && (top_k < 1 || top_k > num_experts)) {
    problems += " top_k must lie in [1, num_experts];";
  }
  if (!(capacity_factor > 0.0f)) problems += " capacity_factor must be > 0;";
  if (!problems.empty()) throw ConfigError("invalid router config:" + problems);
}

void GateDistribution::validate() const {
  if (probs.empty()) throw ContractError("gate distribution is empty");
  double total = 0.0;
  for (float p : probs) {
    if (p < 0.0f) throw ContractError("gate distribution has a negative entry");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw ContractError("gate distribution sums to " + std::to_string(total));
  }
}

Tensor compute_gate_probabilities(Tape* tape, const Tensor& h, const Tensor& router_weights) {
  if (h.rank() != 2 || router_weights.rank() != 2 || h.dim(1) != router_weights.dim(1)) {
    throw ShapeError("compute_gate_probabilities: hidden " + shape_to_string(h.shape()) +
                     " vs router weights " + shape_to_string(router_weights.shape()));
  }
  return softmax_rows(tape, linear(tape, h, router_weights));
}

RoutingDecision select_experts_threshold(std::span<const float> probs, float threshold,
                                         int token_id) {
  if (probs.empty()) throw ContractError("select_experts_threshold: empty distribution");
  const std::vector<int> order = descending_order(probs);
  RoutingDecision decision{token_id, {}};
  if (threshold >= 1.0f) {
    // A threshold of one means every expert, independent of float shortfall
    // in the row sum.
    for (std::size_t j = 0; j < order.size(); ++j) {
      decision.selections.push_back(make_selection(probs, order[j], static_cast<int>(j) + 1));
    }
    return decision;
  }
  // Clamp keeps a float-short row sum from ever dropping the last expert.
  const float effective = std::min(threshold, 1.0f - 1e-6f);
  float cumulative = 0.0f;
  for (std::size_t j = 0; j < order.size(); ++j) {
    decision.selections.push_back(make_selection(probs, order[j], static_cast<int>(j) + 1));
    cumulative += probs[static_cast<std::size_t>(order[j])];
    if (cumulative >= effective) break;
  }
  return decision;
}

RoutingDecision select_experts_topk(std::span<const float> probs, int k, int token_id) {
  if (probs.empty()) throw ContractError("select_experts_topk: empty distribution");
  if (k < 1 || k > static_cast<int>(probs.size())) {
    throw ContractError("select_experts_topk: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(probs.size()) + "]");
  }
  const std::vector<int> order = descending_order(probs);
  RoutingDecision decision{token_id, {}};
  for (int j = 0; j < k; ++j) {
    decision.selections.push_back(make_selection(probs, order[static_cast<std::size_t>(j)], j + 1));
  }
  return decision;
}

HashRouter::HashRouter(int vocab_size, int num_experts, std::uint64_t seed)
    : num_experts_(num_experts) {
  if (vocab_size < 1 || num_experts < 1) {
    throw ContractError("hash router needs vocab_size >= 1 and num_experts >= 1");
  }
  Rng rng(seed);
  table_.resize(static_cast<std::size_t>(vocab_size));
  for (int& e : table_) e = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(num_experts)));
}

HashRouter::HashRouter(std::vector<int> table, int num_experts)
    : table_(std::move(table)), num_experts_(num_experts) {
  for (int e : table_) {
    if (e < 0 || e >= num_experts_) throw ContractError("hash table entry outside expert range");
  }
}

RoutingDecision HashRouter::route(int symbol, int token_id) const {
  if (symbol < 0 || symbol >= static_cast<int>(table_.size())) {
    throw ContractError("hash route: symbol " + std::to_string(symbol) + " outside vocabulary of " +
                        std::to_string(table_.size()));
  }
  RoutingDecision decision{token_id, {}};
  decision.selections.push_back(Selection{table_[static_cast<std::size_t>(symbol)], 1.0f, 0.0f, 1});
  return decision;
}

CapacityPlan plan_capacity(int tokens, int num_experts, float capacity_factor) {
  if (tokens < 1 || num_experts < 1 || !(capacity_factor > 0.0f)) {
    throw ContractError("plan_capacity: need tokens >= 1, experts >= 1, factor > 0");
  }
  const double raw = static_cast<double>(tokens) * static_cast<double>(capacity_factor) /
                     static_cast<double>(num_experts);
  // Tiny relative slack so float32 capacity factors land on exact ceilings.
  const int capacity = std::max(1, static_cast<int>(std::ceil(raw * (1.0 - 1e-6))));
  return CapacityPlan{tokens, capacity, capacity_factor};
}

AssignmentResult resolve_assignments(const std::vector<RoutingDecision>& decisions,
                                     const CapacityPlan& plan, int num_experts) {
  AssignmentResult result;
  result.kept.resize(static_cast<std::size_t>(num_experts));
  result.kept_mask.resize(decisions.size());

  // Candidate lists per expert, remembering where each came from so the
  // kept/dropped flag can be written back.
  struct Candidate {
    ExpertAssignment assignment;
    int decision_index;
    int selection_index;
  };
  std::vector<std::vector<Candidate>> candidates(static_cast<std::size_t>(num_experts));
  for (std::size_t t = 0; t < decisions.size(); ++t) {
    const RoutingDecision& decision = decisions[t];
    result.kept_mask[t].assign(decision.selections.size(), 0);
    for (std::size_t j = 0; j < decision.selections.size(); ++j) {
      const Selection& sel = decision.selections[j];
      if (sel.expert < 0 || sel.expert >= num_experts) {
        throw ContractError("resolve_assignments: expert index " + std::to_string(sel.expert) +
                            " outside [0, " + std::to_string(num_experts) + ")");
      }
      candidates[static_cast<std::size_t>(sel.expert)].push_back(
          Candidate{ExpertAssignment{decision.token_id, sel.gate_weight, sel.priority, sel.rank},
                    static_cast<int>(t), static_cast<int>(j)});
    }
  }

  for (std::size_t e = 0; e < candidates.size(); ++e) {
    auto& list = candidates[e];
    std::stable_sort(list.begin(), list.end(), [](const Candidate& a, const Candidate& b) {
      if (a.assignment.priority != b.assignment.priority) {
        return a.assignment.priority > b.assignment.priority;
      }
      return a.assignment.token < b.assignment.token;
    });
    for (std::size_t i = 0; i < list.size(); ++i) {
      result.total += 1;
      if (i < static_cast<std::size_t>(plan.capacity)) {
        result.kept[e].push_back(list[i].assignment);
        result.kept_mask[static_cast<std::size_t>(list[i].decision_index)]
                        [static_cast<std::size_t>(list[i].selection_index)] = 1;
      } else {
        result.dropped += 1;
      }
    }
  }
  return result;
}

BalanceStats compute_balance_stats(const std::vector<RoutingDecision>& decisions, int num_experts) {
  if (decisions.empty()) throw ContractError("compute_balance_stats: no decisions");
  BalanceStats stats;
  stats.top1_fraction.assign(static_cast<std::size_t>(num_experts), 0.0f);
  stats.mean_top1_prob.assign(static_cast<std::size_t>(num_experts), 0.0f);
  const float inv_tokens = 1.0f / static_cast<float>(decisions.size());
  for (const RoutingDecision& decision : decisions) {
    if (decision.selections.empty()) {
      throw ContractError("compute_balance_stats: decision without selections");
    }
    const Selection& top = decision.selections.front();
    stats.top1_fraction[static_cast<std::size_t>(top.expert)] += inv_tokens;
    stats.mean_top1_prob[static_cast<std::size_t>(top.expert)] += top.gate_weight * inv_tokens;
  }
  return stats;
}

double load_balance_loss(const BalanceStats& stats) {
  const std::size_t n = stats.top1_fraction.size();
  if (n == 0 || stats.mean_top1_prob.size() != n) {
    throw ContractError("load_balance_loss: malformed stats");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += static_cast<double>(stats.top1_fraction[i]) * static_cast<double>(stats.mean_top1_prob[i]);
  }
  return static_cast<double>(n) * acc;
}

Tensor load_balance_loss_on_tape(Tape* tape, const Tensor& gate_probs,
                                 const std::vector<RoutingDecision>& decisions) {
  if (gate_probs.rank() != 2 || gate_probs.dim(0) != static_cast<int>(decisions.size())) {
    throw ShapeError("load_balance_loss_on_tape: probs " + shape_to_string(gate_probs.shape()) +
                     " vs " + std::to_string(decisions.size()) + " decisions");
  }
  const int num_experts = gate_probs.dim(1);
  const BalanceStats stats = compute_balance_stats(decisions, num_experts);
  std::vector<std::pair<int, int>> top1_indices;
  std::vector<float> weights;
  top1_indices.reserve(decisions.size());
  weights.reserve(decisions.size());
  const float coeff = static_cast<float>(num_experts) / static_cast<float>(decisions.size());
  for (std::size_t t = 0; t < decisions.size(); ++t) {
    const Selection& top = decisions[t].selections.front();
    top1_indices.emplace_back(static_cast<int>(t), top.expert);
    weights.push_back(coeff * stats.top1_fraction[static_cast<std::size_t>(top.expert)]);
  }
  Tensor top1_probs = gather_values(tape, gate_probs, std::move(top1_indices));
  return weighted_sum(tape, top1_probs, std::move(weights), 1.0f);
}

}  // namespace xmoe
