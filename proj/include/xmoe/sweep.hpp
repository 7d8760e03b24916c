// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Inference-time (threshold, capacity factor) grid sweeps over a trained
// checkpoint: perplexity vs. normalized MoE-layer FLOPs, no retraining.
#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "xmoe/lm.hpp"

namespace xmoe {

struct EvalStats {
  double ppl = 0.0;
  double drop_rate = 0.0;
  // MoE-layer FLOPs over the evaluated batches, as ratios to the dense
  // baseline FFN; utilized counts kept assignments only.
  double normalized_flops = 0.0;
  double utilized_flops = 0.0;
};

// evaluate_perplexity plus routing statistics, same windowing and capacity
// mechanics.
EvalStats evaluate_with_stats(const Model& model, const std::vector<std::uint8_t>& corpus,
                              int batch_rows = 8);

struct SweepRow {
  float threshold = 0.0f;
  float capacity_factor = 0.0f;
  EvalStats stats;
};

// One row per (threshold, capacity factor) grid point, ascending by
// (threshold, capacity_factor). The model's routing settings are mutated in
// place point by point; parameters are untouched.
std::vector<SweepRow> sweep_flops(Model& model, const std::vector<std::uint8_t>& corpus,
                                  std::vector<float> thresholds,
                                  std::vector<float> capacity_factors, int batch_rows = 8);

extern const char* kSweepCsvHeader;  // t,gamma,normalized_flops,utilized_flops,ppl,drop_rate
void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);

}  // namespace xmoe
