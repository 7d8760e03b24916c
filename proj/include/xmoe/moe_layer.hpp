// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
//
// The sparse mixture-of-experts layer: a bank of small two-matrix FFN
// experts, gate computation, adaptive dispatch under per-expert capacity,
// weighted combine, and FLOP accounting.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xmoe/probe.hpp"
#include "xmoe/routing.hpp"
#include "xmoe/tensor.hpp"

namespace xmoe {

// One expert: w1 [expert_size x hidden], w2 [hidden x expert_size].
struct ExpertParams {
  Tensor w1;
  Tensor w2;
};

enum class MoeMode { kSparse, kDenseTrain };

std::string to_string(MoeMode mode);
MoeMode moe_mode_from_string(const std::string& name);

struct MoeLayerConfig {
  RouterConfig router;
  int expert_size = 1;          // intermediate width of each expert
  int dense_baseline_ffn = 0;   // FLOP normalization width; 0 means N * expert_size
  MoeMode mode = MoeMode::kSparse;

  int baseline_ffn_dim() const {
    return dense_baseline_ffn > 0 ? dense_baseline_ffn : router.num_experts * expert_size;
  }
  // Dense training pins threshold 1 and a capacity factor of N.
  float effective_threshold() const {
    return mode == MoeMode::kDenseTrain ? 1.0f : router.threshold;
  }
  float effective_capacity_factor() const {
    return mode == MoeMode::kDenseTrain ? static_cast<float>(router.num_experts)
                                        : router.capacity_factor;
  }
  void validate() const;
};

struct FlopsReport {
  std::int64_t expert_flops = 0;  // bills every capacity slot
  std::int64_t router_flops = 0;
  std::int64_t total = 0;
  double normalized = 0.0;             // total / dense-baseline FFN FLOPs
  std::int64_t utilized_flops = 0;     // router + kept assignments only

  static const char* csv_header();  // expert_flops,router_flops,total,normalized,utilized_flops
  std::string csv_row() const;
};

// Splits a dense FFN (w1 [d_ff x d], w2 [d x d_ff]) into num_experts slices:
// expert i takes w1 rows and w2 columns [i*d_ff/N, (i+1)*d_ff/N). The expert
// outputs sum back to the dense FFN output exactly (up to float summation
// order). d_ff must be divisible by num_experts.
std::vector<ExpertParams> decompose_ffn(const Tensor& w1, const Tensor& w2, int num_experts);

// w2 * gelu(w1 * x) for a batch of rows x [s x d].
Tensor expert_forward(Tape* tape, const ExpertParams& expert, const Tensor& x);

// Capacity-billed FLOP model: every capacity slot costs one expert token
// (4 * d * expert_size, counting multiply-add as two), the router costs
// 2 * d * N per token, and the normalizer is a dense FFN of the configured
// baseline width over the same tokens. kept_assignments < 0 bills all slots
// as utilized.
FlopsReport count_flops(const MoeLayerConfig& config, const CapacityPlan& plan,
                        std::int64_t kept_assignments = -1);

// Pinned routing: reuse previously captured decisions and capacity
// resolution so perturbed forwards keep the selection set fixed.
struct RoutingPin {
  const std::vector<RoutingDecision>* decisions = nullptr;
  const AssignmentResult* assignments = nullptr;
};

struct MoeForwardResult {
  Tensor output;                          // [T x d]; fully dropped tokens are zero rows
  Tensor gate_probs;                      // [T x N]; undefined for hash routing
  std::vector<RoutingDecision> decisions; // one per token
  AssignmentResult assignments;
  BalanceStats stats;
  FlopsReport flops;
  Tensor aux_loss;                        // balance loss on tape; undefined for hash routing
};

class MoeLayer {
 public:
  // Fresh per-expert random initialization.
  MoeLayer(MoeLayerConfig config, Rng& rng);
  // Takes ownership of existing parameters (decomposition / checkpoint load).
  MoeLayer(MoeLayerConfig config, std::vector<ExpertParams> experts, Tensor router_weights);

  // Dispatch, per-expert forward over kept assignments, weighted combine.
  // token_symbols is required for hash routing. probe_layer records
  // activation and routing counters when probe is non-null.
  MoeForwardResult forward(Tape* tape, const Tensor& h,
                           const std::vector<int>* token_symbols = nullptr,
                           SparsityProbe* probe = nullptr, int probe_layer = 0,
                           const RoutingPin* pin = nullptr) const;

  // Adjusts threshold and capacity factor for later forwards; parameters are
  // untouched. Also leaves dense-train mode so the new values take effect.
  void set_inference_sparsity(float threshold, float capacity_factor);

  const MoeLayerConfig& config() const { return config_; }
  const std::vector<ExpertParams>& experts() const { return experts_; }
  const Tensor& router_weights() const { return router_weights_; }
  const std::optional<HashRouter>& hash_router() const { return hash_router_; }
  void set_hash_router(HashRouter router) { hash_router_ = std::move(router); }

  // Registers every trainable tensor as name_prefix + suffix.
  void collect_parameters(const std::string& name_prefix,
                          std::vector<std::pair<std::string, Tensor>>& out) const;

 private:
  MoeLayerConfig config_;
  std::vector<ExpertParams> experts_;
  Tensor router_weights_;  // [N x d]
  std::optional<HashRouter> hash_router_;
};

}  // namespace xmoe
