// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Byte-level decoder-only transformer with MoE layers in alternating blocks,
// plus corpus loading, training, and perplexity evaluation.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "xmoe/moe_layer.hpp"
#include "xmoe/probe.hpp"
#include "xmoe/tensor.hpp"

namespace xmoe {

struct ModelConfig {
  int num_layers = 2;
  int hidden_dim = 64;
  int num_heads = 4;
  int vocab_size = 256;  // byte-level
  int max_seq_len = 64;
  int dense_ffn_dim = 256;
  bool use_moe = true;
  // 1-based index of the first MoE block; MoE then occupies every second
  // block. The default (2) follows the alternate-block placement.
  int moe_start_block = 2;
  MoeLayerConfig moe;  // router.hidden_dim is overridden with hidden_dim
  float aux_loss_weight = 0.01f;

  bool block_is_moe(int block_index) const {  // 0-based
    if (!use_moe) return false;
    const int one_based = block_index + 1;
    return one_based >= moe_start_block && (one_based - moe_start_block) % 2 == 0;
  }
  std::vector<int> moe_block_indices() const;  // 0-based
  void validate() const;                       // throws ConfigError listing violations
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct AttentionParams {
  Tensor wq, wk, wv, wo;  // each [d x d]
};

struct TransformerBlock {
  LayerNormParams ln1, ln2;
  AttentionParams attn;
  bool is_moe = false;
  Tensor ffn_w1, ffn_w2;  // dense branch: [d_ff x d], [d x d_ff]
  std::optional<MoeLayer> moe;
};

struct ModelForward {
  Tensor logits;  // [batch*seq x vocab]
  std::vector<MoeForwardResult> moe_results;  // in block order
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  // token_ids has batch*seq entries, row-major. pins, when given, must have
  // one entry per MoE block and freezes the routing of each.
  ModelForward forward(Tape* tape, const std::vector<int>& token_ids, int batch, int seq_len,
                       SparsityProbe* probe = nullptr,
                       const std::vector<RoutingPin>* pins = nullptr) const;

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  // Name/tensor registry in a stable structural order.
  std::vector<std::pair<std::string, Tensor>> parameters() const;
  std::vector<Tensor> parameter_tensors() const;

  // Applies new (threshold, capacity factor) to every MoE block.
  void set_inference_sparsity(float threshold, float capacity_factor);

  void save(const std::string& path) const;
  static Model load(const std::string& path);

  std::vector<TransformerBlock>& blocks() { return blocks_; }
  const std::vector<TransformerBlock>& blocks() const { return blocks_; }
  Tensor& output_head() { return head_; }

 private:
  Model() = default;

  ModelConfig config_;
  std::uint64_t seed_ = 0;
  Tensor tok_emb_;  // [vocab x d]
  Tensor pos_emb_;  // [max_seq_len x d]
  std::vector<TransformerBlock> blocks_;
  LayerNormParams final_ln_;
  Tensor head_;  // [vocab x d]
};

// Raw bytes of the file. Missing file throws IoError naming the path; an
// empty file throws DataError.
std::vector<std::uint8_t> load_corpus(const std::string& path);

struct TrainOptions {
  long steps = 100;
  float lr = 0.1f;
  int batch_size = 8;
  std::uint64_t seed = 1;
  int warmup_steps = 50;  // linear ramp from zero
  int log_every = 10;
  int threads = 1;
};

struct StepMetrics {
  long step = 0;
  double xent = 0.0;
  double aux_loss = 0.0;  // summed over MoE layers, unweighted
  double ppl = 0.0;
  double mean_experts_per_token = 0.0;
  double drop_rate = 0.0;
  double positive_act_frac = 0.0;
  double normalized_flops = 0.0;
};

// Cross-entropy + aux_loss_weight * per-layer balance losses, SGD updates.
// Emits one StepMetrics per logged step (cadence log_every, plus the final
// step). Requires corpus size >= 2 * max_seq_len bytes.
std::vector<StepMetrics> train(Model& model, const std::vector<std::uint8_t>& corpus,
                               const TrainOptions& options,
                               const std::function<void(const StepMetrics&)>& on_log = nullptr);

// exp(mean token cross-entropy) over non-overlapping max_seq_len windows,
// evaluated in groups of batch_rows with the same capacity mechanics as
// training.
double evaluate_perplexity(const Model& model, const std::vector<std::uint8_t>& corpus,
                           int batch_rows = 8);

extern const char* kMetricsCsvHeader;
void write_metrics_csv(std::ostream& out, const std::vector<StepMetrics>& series);

}  // namespace xmoe
