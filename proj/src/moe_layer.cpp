// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
#include "xmoe/moe_layer.hpp"

#include <cmath>
#include <cstdio>
#include <utility>

#include "xmoe/error.hpp"

namespace xmoe {

std::string to_string(MoeMode mode) {
  return mode == MoeMode::kDenseTrain ? "dense_train" : "sparse";
}

MoeMode moe_mode_from_string(const std::string& name) {
  if (name == "sparse") return MoeMode::kSparse;
  if (name == "dense_train") return MoeMode::kDenseTrain;
  throw ConfigError("unknown MoE mode: " + name);
}

void MoeLayerConfig::validate() const {
  router.validate();
  if (expert_size < 1) throw ConfigError("invalid MoE layer config: expert_size must be >= 1");
  if (dense_baseline_ffn < 0) {
    throw ConfigError("invalid MoE layer config: dense_baseline_ffn must be >= 0");
  }
}

const char* FlopsReport::csv_header() {
  return "expert_flops,router_flops,total,normalized,utilized_flops";
}

std::string FlopsReport::csv_row() const {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%lld,%lld,%lld,%.9g,%lld",
                static_cast<long long>(expert_flops), static_cast<long long>(router_flops),
                static_cast<long long>(total), normalized, static_cast<long long>(utilized_flops));
  return buf;
}

std::vector<ExpertParams> decompose_ffn(const Tensor& w1, const Tensor& w2, int num_experts) {
  if (w1.rank() != 2 || w2.rank() != 2 || w1.dim(0) != w2.dim(1) || w1.dim(1) != w2.dim(0)) {
    throw ShapeError("decompose_ffn: inconsistent FFN matrices " + shape_to_string(w1.shape()) +
                     " and " + shape_to_string(w2.shape()));
  }
  const int d_ff = w1.dim(0);
  const int d = w1.dim(1);
  if (num_experts < 1 || d_ff % num_experts != 0) {
    throw ContractError("decompose_ffn: d_ff=" + std::to_string(d_ff) +
                        " not divisible by num_experts=" + std::to_string(num_experts));
  }
  const int slice = d_ff / num_experts;
  std::vector<ExpertParams> experts;
  experts.reserve(static_cast<std::size_t>(num_experts));
  for (int e = 0; e < num_experts; ++e) {
    Tensor ew1 = Tensor::zeros({slice, d});
    Tensor ew2 = Tensor::zeros({d, slice});
    for (int r = 0; r < slice; ++r) {
      for (int c = 0; c < d; ++c) ew1.at(r, c) = w1.at(e * slice + r, c);
    }
    for (int r = 0; r < d; ++r) {
      for (int c = 0; c < slice; ++c) ew2.at(r, c) = w2.at(r, e * slice + c);
    }
    ew1.set_requires_grad(w1.requires_grad());
    ew2.set_requires_grad(w2.requires_grad());
    experts.push_back(ExpertParams{std::move(ew1), std::move(ew2)});
  }
  return experts;
}

Tensor expert_forward(Tape* tape, const ExpertParams& expert, const Tensor& x) {
  return linear(tape, gelu(tape, linear(tape, x, expert.w1)), expert.w2);
}

FlopsReport count_flops(const MoeLayerConfig& config, const CapacityPlan& plan,
                        std::int64_t kept_assignments) {
  const std::int64_t d = config.router.hidden_dim;
  const std::int64_t d_e = config.expert_size;
  const std::int64_t n = config.router.num_experts;
  const std::int64_t tokens = plan.tokens;
  const std::int64_t per_slot = 4 * d * d_e;  // two matmuls, multiply-add = 2 FLOPs
  const std::int64_t slots = static_cast<std::int64_t>(plan.capacity) * n;

  FlopsReport report;
  report.expert_flops = slots * per_slot;
  report.router_flops =
      config.router.strategy == RouteStrategy::kHash ? 0 : tokens * 2 * d * n;
  report.total = report.expert_flops + report.router_flops;
  const double baseline =
      static_cast<double>(tokens) * 4.0 * static_cast<double>(d) *
      static_cast<double>(config.baseline_ffn_dim());
  report.normalized = static_cast<double>(report.total) / baseline;
  if (kept_assignments < 0) kept_assignments = slots;
  report.utilized_flops = report.router_flops + kept_assignments * per_slot;
  return report;
}

MoeLayer::MoeLayer(MoeLayerConfig config, Rng& rng) : config_(std::move(config)) {
  config_.validate();
  const int n = config_.router.num_experts;
  const int d = config_.router.hidden_dim;
  const int d_e = config_.expert_size;
  router_weights_ = Tensor::glorot_uniform(n, d, rng);
  router_weights_.set_requires_grad(true);
  experts_.reserve(static_cast<std::size_t>(n));
  for (int e = 0; e < n; ++e) {
    ExpertParams expert{Tensor::glorot_uniform(d_e, d, rng), Tensor::glorot_uniform(d, d_e, rng)};
    expert.w1.set_requires_grad(true);
    expert.w2.set_requires_grad(true);
    experts_.push_back(std::move(expert));
  }
}

MoeLayer::MoeLayer(MoeLayerConfig config, std::vector<ExpertParams> experts, Tensor router_weights)
    : config_(std::move(config)), experts_(std::move(experts)), router_weights_(std::move(router_weights)) {
  config_.validate();
  if (static_cast<int>(experts_.size()) != config_.router.num_experts) {
    throw ShapeError("MoeLayer: " + std::to_string(experts_.size()) + " experts for config with " +
                     std::to_string(config_.router.num_experts));
  }
  for (const ExpertParams& e : experts_) {
    if (e.w1.dim(0) != config_.expert_size || e.w1.dim(1) != config_.router.hidden_dim ||
        e.w2.dim(0) != config_.router.hidden_dim || e.w2.dim(1) != config_.expert_size) {
      throw ShapeError("MoeLayer: expert shapes inconsistent with config");
    }
  }
}

void MoeLayer::set_inference_sparsity(float threshold, float capacity_factor) {
  if (!(threshold >= 0.0f && threshold <= 1.0f) || !(capacity_factor > 0.0f)) {
    throw ContractError("set_inference_sparsity: need threshold in [0, 1] and capacity factor > 0");
  }
  config_.router.threshold = threshold;
  config_.router.capacity_factor = capacity_factor;
  config_.mode = MoeMode::kSparse;
}

void MoeLayer::collect_parameters(const std::string& name_prefix,
                                  std::vector<std::pair<std::string, Tensor>>& out) const {
  out.emplace_back(name_prefix + "router", router_weights_);
  for (std::size_t e = 0; e < experts_.size(); ++e) {
    out.emplace_back(name_prefix + "expert" + std::to_string(e) + ".w1", experts_[e].w1);
    out.emplace_back(name_prefix + "expert" + std::to_string(e) + ".w2", experts_[e].w2);
  }
}

namespace {

// Weighted scatter of per-expert outputs back to token rows:
// out[row[s]] += w[s] * y[s], experts processed in ascending index order.
struct CombinePiece {
  std::vector<int> rows;
  Tensor outputs;       // [rows x d]
  Tensor gate_weights;  // [rows], may be a non-differentiable constant
};

Tensor moe_combine(Tape* tape, std::vector<CombinePiece> pieces, int tokens, int dim) {
  Tensor out = Tensor::zeros({tokens, dim});
  float* po = out.values().data();
  bool wants = false;
  for (const CombinePiece& piece : pieces) {
    const float* py = piece.outputs.values().data();
    const float* pw = piece.gate_weights.values().data();
    for (std::size_t s = 0; s < piece.rows.size(); ++s) {
      float* dst = po + static_cast<std::size_t>(piece.rows[s]) * dim;
      const float* src = py + s * static_cast<std::size_t>(dim);
      const float w = pw[s];
      for (int c = 0; c < dim; ++c) dst[c] += w * src[c];
    }
    wants = wants || piece.outputs.requires_grad() || piece.gate_weights.requires_grad();
  }
  if (tape != nullptr && wants) {
    out.set_requires_grad(true);
    tape->record(out, [pieces = std::move(pieces), out, dim]() {
      const float* dy = out.grad().data();
      for (const CombinePiece& piece : pieces) {
        const float* py = piece.outputs.values().data();
        const float* pw = piece.gate_weights.values().data();
        for (std::size_t s = 0; s < piece.rows.size(); ++s) {
          const float* dout = dy + static_cast<std::size_t>(piece.rows[s]) * dim;
          if (piece.gate_weights.requires_grad()) {
            Tensor tw = piece.gate_weights;
            float* gw = tw.grad().data();
            const float* src = py + s * static_cast<std::size_t>(dim);
            float acc = 0.0f;
            for (int c = 0; c < dim; ++c) acc += dout[c] * src[c];
            gw[s] += acc;
          }
          if (piece.outputs.requires_grad()) {
            Tensor ty = piece.outputs;
            float* gy = ty.grad().data();
            float* dst = gy + s * static_cast<std::size_t>(dim);
            const float w = pw[s];
            for (int c = 0; c < dim; ++c) dst[c] += w * dout[c];
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

MoeForwardResult MoeLayer::forward(Tape* tape, const Tensor& h,
                                   const std::vector<int>* token_symbols, SparsityProbe* probe,
                                   int probe_layer, const RoutingPin* pin) const {
  if (h.rank() != 2 || h.dim(1) != config_.router.hidden_dim) {
    throw ShapeError("MoeLayer::forward: hidden batch " + shape_to_string(h.shape()) +
                     " does not match hidden_dim " + std::to_string(config_.router.hidden_dim));
  }
  const int tokens = h.dim(0);
  const int n = config_.router.num_experts;
  const bool hash = config_.router.strategy == RouteStrategy::kHash;

  MoeForwardResult result;

  if (hash) {
    if (!hash_router_.has_value()) {
      throw ContractError("MoeLayer::forward: hash strategy without a hash router");
    }
    if (token_symbols == nullptr || static_cast<int>(token_symbols->size()) != tokens) {
      throw ContractError("MoeLayer::forward: hash routing requires one symbol per token");
    }
  } else {
    result.gate_probs = compute_gate_probabilities(tape, h, router_weights_);
  }

  const CapacityPlan plan = plan_capacity(tokens, n, config_.effective_capacity_factor());
  if (pin != nullptr) {
    result.decisions = *pin->decisions;
    result.assignments = *pin->assignments;
  } else {
    result.decisions.reserve(static_cast<std::size_t>(tokens));
    if (hash) {
      for (int t = 0; t < tokens; ++t) {
        result.decisions.push_back(
            hash_router_->route((*token_symbols)[static_cast<std::size_t>(t)], t));
      }
    } else {
      const float* probs = result.gate_probs.values().data();
      for (int t = 0; t < tokens; ++t) {
        std::span<const float> row(probs + static_cast<std::size_t>(t) * n,
                                   static_cast<std::size_t>(n));
        if (config_.router.strategy == RouteStrategy::kTopK) {
          result.decisions.push_back(select_experts_topk(row, config_.router.top_k, t));
        } else {
          result.decisions.push_back(
              select_experts_threshold(row, config_.effective_threshold(), t));
        }
      }
    }
    result.assignments = resolve_assignments(result.decisions, plan, n);
  }
  result.stats = compute_balance_stats(result.decisions, n);
  if (!hash) {
    result.aux_loss = load_balance_loss_on_tape(tape, result.gate_probs, result.decisions);
  }

  std::vector<CombinePiece> pieces;
  pieces.reserve(static_cast<std::size_t>(n));
  for (int e = 0; e < n; ++e) {
    const auto& kept = result.assignments.kept[static_cast<std::size_t>(e)];
    if (kept.empty()) continue;
    CombinePiece piece;
    piece.rows.reserve(kept.size());
    for (const ExpertAssignment& a : kept) piece.rows.push_back(a.token);
    Tensor x = select_rows(tape, h, piece.rows);
    Tensor pre = linear(tape, x, experts_[static_cast<std::size_t>(e)].w1);
    Tensor act = gelu(tape, pre);
    if (probe != nullptr) probe->add_activations(probe_layer, act.values());
    piece.outputs = linear(tape, act, experts_[static_cast<std::size_t>(e)].w2);
    if (hash) {
      piece.gate_weights = Tensor::full({static_cast<int>(kept.size())}, 1.0f);
    } else {
      std::vector<std::pair<int, int>> idx;
      idx.reserve(kept.size());
      for (const ExpertAssignment& a : kept) idx.emplace_back(a.token, e);
      piece.gate_weights = gather_values(tape, result.gate_probs, std::move(idx));
    }
    pieces.push_back(std::move(piece));
  }
  result.output = moe_combine(tape, std::move(pieces), tokens, config_.router.hidden_dim);
  result.flops = count_flops(config_, plan, result.assignments.kept_count());
  if (probe != nullptr) probe->add_routing(probe_layer, result.decisions, result.assignments);
  return result;
}

}  // namespace xmoe
