// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
#include "xmoe/probe.hpp"

#include "xmoe/error.hpp"

namespace xmoe {

double positive_activation_fraction(std::span<const float> activations) {
  if (activations.empty()) {
    throw ContractError("positive_activation_fraction: empty activation batch");
  }
  std::int64_t positive = 0;
  for (float v : activations) {
    if (v > 0.0f) positive += 1;
  }
  return static_cast<double>(positive) / static_cast<double>(activations.size());
}

std::size_t SparsityProbe::check(int layer) const {
  if (layer < 0 || layer >= num_layers()) {
    throw ContractError("sparsity probe: layer " + std::to_string(layer) + " outside [0, " +
                        std::to_string(num_layers()) + ")");
  }
  return static_cast<std::size_t>(layer);
}

std::vector<std::vector<double>> required_experts_series(
    const std::vector<std::vector<std::vector<RoutingDecision>>>& trace) {
  if (trace.empty()) throw ContractError("required_experts_series: empty trace");
  const std::size_t layers = trace.front().size();
  std::vector<std::vector<double>> series(layers);
  for (const auto& step : trace) {
    if (step.size() != layers) {
      throw ContractError("required_experts_series: inconsistent layer count in trace");
    }
    for (std::size_t l = 0; l < layers; ++l) {
      std::int64_t selections = 0;
      for (const RoutingDecision& d : step[l]) {
        selections += static_cast<std::int64_t>(d.selections.size());
      }
      const double tokens = static_cast<double>(step[l].size());
      series[l].push_back(tokens == 0.0 ? 0.0 : static_cast<double>(selections) / tokens);
    }
  }
  return series;
}

}  // namespace xmoe
