// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
#include "xmoe/sweep.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "xmoe/error.hpp"

namespace xmoe {

EvalStats evaluate_with_stats(const Model& model, const std::vector<std::uint8_t>& corpus,
                              int batch_rows) {
  if (corpus.size() < 2) throw DataError("corpus too small to evaluate");
  if (batch_rows < 1) throw ContractError("evaluate_with_stats: batch_rows must be >= 1");
  const int seq_len = std::min<int>(model.config().max_seq_len,
                                    static_cast<int>(corpus.size()) - 1);
  const std::size_t num_windows =
      std::max<std::size_t>(1, (corpus.size() - 1) / static_cast<std::size_t>(seq_len));

  double total_xent = 0.0;
  std::size_t total_tokens = 0;
  std::int64_t dropped = 0, assignments = 0;
  double total_flops = 0.0, utilized_flops = 0.0, baseline_flops = 0.0;

  std::vector<int> tokens, targets;
  std::size_t window = 0;
  while (window < num_windows) {
    const int rows = static_cast<int>(
        std::min<std::size_t>(num_windows - window, static_cast<std::size_t>(batch_rows)));
    tokens.clear();
    targets.clear();
    for (int r = 0; r < rows; ++r) {
      const std::size_t offset =
          (window + static_cast<std::size_t>(r)) * static_cast<std::size_t>(seq_len);
      for (int l = 0; l < seq_len; ++l) {
        tokens.push_back(corpus[offset + static_cast<std::size_t>(l)]);
        targets.push_back(corpus[offset + static_cast<std::size_t>(l) + 1]);
      }
    }
    ModelForward fwd = model.forward(nullptr, tokens, rows, seq_len);
    total_xent += cross_entropy_mean(nullptr, fwd.logits, targets).item() *
                  static_cast<double>(tokens.size());
    total_tokens += tokens.size();
    for (const MoeForwardResult& res : fwd.moe_results) {
      dropped += res.assignments.dropped;
      assignments += res.assignments.total;
      total_flops += static_cast<double>(res.flops.total);
      utilized_flops += static_cast<double>(res.flops.utilized_flops);
      baseline_flops += static_cast<double>(res.flops.total) / res.flops.normalized;
    }
    window += static_cast<std::size_t>(rows);
  }

  EvalStats stats;
  stats.ppl = std::exp(total_xent / static_cast<double>(total_tokens));
  stats.drop_rate =
      assignments == 0 ? 0.0 : static_cast<double>(dropped) / static_cast<double>(assignments);
  stats.normalized_flops = baseline_flops > 0.0 ? total_flops / baseline_flops : 0.0;
  stats.utilized_flops = baseline_flops > 0.0 ? utilized_flops / baseline_flops : 0.0;
  return stats;
}

std::vector<SweepRow> sweep_flops(Model& model, const std::vector<std::uint8_t>& corpus,
                                  std::vector<float> thresholds,
                                  std::vector<float> capacity_factors, int batch_rows) {
  if (thresholds.empty() || capacity_factors.empty()) {
    throw ContractError("sweep_flops: threshold and capacity factor lists must be non-empty");
  }
  std::sort(thresholds.begin(), thresholds.end());
  std::sort(capacity_factors.begin(), capacity_factors.end());
  std::vector<SweepRow> rows;
  rows.reserve(thresholds.size() * capacity_factors.size());
  for (float t : thresholds) {
    for (float gamma : capacity_factors) {
      model.set_inference_sparsity(t, gamma);
      rows.push_back(SweepRow{t, gamma, evaluate_with_stats(model, corpus, batch_rows)});
    }
  }
  return rows;
}

const char* kSweepCsvHeader = "t,gamma,normalized_flops,utilized_flops,ppl,drop_rate";

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << kSweepCsvHeader << "\n";
  char buf[224];
  for (const SweepRow& row : rows) {
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                  static_cast<double>(row.threshold), static_cast<double>(row.capacity_factor),
                  row.stats.normalized_flops, row.stats.utilized_flops, row.stats.ppl,
                  row.stats.drop_rate);
    out << buf << "\n";
  }
}

}  // namespace xmoe
