// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Sparsity instrumentation: positive post-activation fractions, per-layer
// selected-expert counts, drop counts.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "xmoe/routing.hpp"

namespace xmoe {

// Share of values strictly greater than zero. Throws on empty input.
double positive_activation_fraction(std::span<const float> activations);

// Accumulates activation/selection/drop counters, one slot per probed layer.
class SparsityProbe {
 public:
  explicit SparsityProbe(int num_layers = 0) { resize(num_layers); }

  void resize(int num_layers) {
    positive_.assign(static_cast<std::size_t>(num_layers), 0);
    total_.assign(static_cast<std::size_t>(num_layers), 0);
    selections_.assign(static_cast<std::size_t>(num_layers), 0);
    tokens_.assign(static_cast<std::size_t>(num_layers), 0);
    dropped_.assign(static_cast<std::size_t>(num_layers), 0);
    assignments_.assign(static_cast<std::size_t>(num_layers), 0);
  }

  int num_layers() const { return static_cast<int>(total_.size()); }

  void add_activations(int layer, std::span<const float> values) {
    for (float v : values) {
      if (v > 0.0f) positive_[check(layer)] += 1;
    }
    total_[check(layer)] += static_cast<std::int64_t>(values.size());
  }

  void add_routing(int layer, const std::vector<RoutingDecision>& decisions,
                   const AssignmentResult& assignments) {
    for (const RoutingDecision& d : decisions) {
      selections_[check(layer)] += static_cast<std::int64_t>(d.selections.size());
    }
    tokens_[check(layer)] += static_cast<std::int64_t>(decisions.size());
    dropped_[check(layer)] += assignments.dropped;
    assignments_[check(layer)] += assignments.total;
  }

  // Aggregates over every probed layer; 0 when nothing was recorded.
  double positive_fraction() const { return ratio(positive_, total_); }
  double mean_selected_experts() const { return ratio(selections_, tokens_); }
  double drop_rate() const { return ratio(dropped_, assignments_); }

  double positive_fraction(int layer) const {
    return total_[check(layer)] == 0
               ? 0.0
               : static_cast<double>(positive_[check(layer)]) / static_cast<double>(total_[check(layer)]);
  }
  double mean_selected_experts(int layer) const {
    return tokens_[check(layer)] == 0
               ? 0.0
               : static_cast<double>(selections_[check(layer)]) / static_cast<double>(tokens_[check(layer)]);
  }

 private:
  std::size_t check(int layer) const;

  static double ratio(const std::vector<std::int64_t>& num, const std::vector<std::int64_t>& den) {
    std::int64_t n = 0, d = 0;
    for (std::int64_t v : num) n += v;
    for (std::int64_t v : den) d += v;
    return d == 0 ? 0.0 : static_cast<double>(n) / static_cast<double>(d);
  }

  std::vector<std::int64_t> positive_, total_, selections_, tokens_, dropped_, assignments_;
};

// Mean number of selected experts per token, one series entry per logged
// step, one series per layer. trace[step][layer] holds that step's decisions.
std::vector<std::vector<double>> required_experts_series(
    const std::vector<std::vector<std::vector<RoutingDecision>>>& trace);

}  // namespace xmoe
