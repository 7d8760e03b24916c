// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
#include "xmoe/lm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "xmoe/checkpoint.hpp"
#include "xmoe/error.hpp"

namespace xmoe {

std::vector<int> ModelConfig::moe_block_indices() const {
  std::vector<int> indices;
  for (int b = 0; b < num_layers; ++b) {
    if (block_is_moe(b)) indices.push_back(b);
  }
  return indices;
}

void ModelConfig::validate() const {
  std::string problems;
  if (num_layers < 1) problems += " num_layers must be >= 1;";
  if (hidden_dim < 1) problems += " hidden_dim must be >= 1;";
  if (num_heads < 1) problems += " num_heads must be >= 1;";
  if (num_heads >= 1 && hidden_dim >= 1 && hidden_dim % num_heads != 0) {
    problems += " hidden_dim must be divisible by num_heads;";
  }
  if (vocab_size < 2) problems += " vocab_size must be >= 2;";
  if (max_seq_len < 1) problems += " max_seq_len must be >= 1;";
  if (dense_ffn_dim < 1) problems += " dense_ffn_dim must be >= 1;";
  if (use_moe && (moe_start_block < 1 || moe_start_block > 2)) {
    problems += " moe_start_block must be 1 or 2;";
  }
  if (!(aux_loss_weight >= 0.0f)) problems += " aux_loss_weight must be >= 0;";
  if (!problems.empty()) throw ConfigError("invalid model config:" + problems);
  if (use_moe) {
    MoeLayerConfig effective = moe;
    effective.router.hidden_dim = hidden_dim;
    effective.validate();
  }
}

namespace {

LayerNormParams make_layer_norm(int dim) {
  LayerNormParams ln{Tensor::full({dim}, 1.0f), Tensor::zeros({dim})};
  ln.gain.set_requires_grad(true);
  ln.bias.set_requires_grad(true);
  return ln;
}

Tensor glorot_param(int rows, int cols, Rng& rng) {
  Tensor t = Tensor::glorot_uniform(rows, cols, rng);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
  config_.validate();
  Rng rng(seed);
  const int d = config_.hidden_dim;
  tok_emb_ = glorot_param(config_.vocab_size, d, rng);
  pos_emb_ = glorot_param(config_.max_seq_len, d, rng);
  blocks_.reserve(static_cast<std::size_t>(config_.num_layers));
  for (int b = 0; b < config_.num_layers; ++b) {
    TransformerBlock block;
    block.ln1 = make_layer_norm(d);
    block.ln2 = make_layer_norm(d);
    block.attn = AttentionParams{glorot_param(d, d, rng), glorot_param(d, d, rng),
                                 glorot_param(d, d, rng), glorot_param(d, d, rng)};
    block.is_moe = config_.block_is_moe(b);
    if (block.is_moe) {
      MoeLayerConfig moe_cfg = config_.moe;
      moe_cfg.router.hidden_dim = d;
      block.moe.emplace(moe_cfg, rng);
      if (moe_cfg.router.strategy == RouteStrategy::kHash) {
        Rng hash_rng = rng.fork(static_cast<std::uint64_t>(b) + 1);
        block.moe->set_hash_router(
            HashRouter(config_.vocab_size, moe_cfg.router.num_experts, hash_rng.next_u64()));
      }
    } else {
      block.ffn_w1 = glorot_param(config_.dense_ffn_dim, d, rng);
      block.ffn_w2 = glorot_param(d, config_.dense_ffn_dim, rng);
    }
    blocks_.push_back(std::move(block));
  }
  final_ln_ = make_layer_norm(d);
  head_ = glorot_param(config_.vocab_size, d, rng);
}

ModelForward Model::forward(Tape* tape, const std::vector<int>& token_ids, int batch, int seq_len,
                            SparsityProbe* probe, const std::vector<RoutingPin>* pins) const {
  if (batch < 1 || seq_len < 1 || seq_len > config_.max_seq_len ||
      static_cast<std::size_t>(batch) * static_cast<std::size_t>(seq_len) != token_ids.size()) {
    throw ContractError("Model::forward: bad batch geometry (" + std::to_string(batch) + " x " +
                        std::to_string(seq_len) + " vs " + std::to_string(token_ids.size()) +
                        " ids)");
  }
  for (int id : token_ids) {
    if (id < 0 || id >= config_.vocab_size) {
      throw ContractError("Model::forward: token id " + std::to_string(id) + " outside vocab");
    }
  }
  if (probe != nullptr && probe->num_layers() < config_.num_layers) {
    probe->resize(config_.num_layers);
  }

  std::vector<int> positions(token_ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    positions[i] = static_cast<int>(i) % seq_len;
  }

  ModelForward result;
  Tensor x = add(tape, embedding_lookup(tape, tok_emb_, token_ids),
                 embedding_lookup(tape, pos_emb_, positions));
  std::size_t moe_index = 0;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const TransformerBlock& block = blocks_[b];
    Tensor attn_in = layer_norm(tape, x, block.ln1.gain, block.ln1.bias);
    Tensor attn_out = causal_attention(tape, linear(tape, attn_in, block.attn.wq),
                                       linear(tape, attn_in, block.attn.wk),
                                       linear(tape, attn_in, block.attn.wv), batch, seq_len,
                                       config_.num_heads);
    x = add(tape, x, linear(tape, attn_out, block.attn.wo));

    Tensor ffn_in = layer_norm(tape, x, block.ln2.gain, block.ln2.bias);
    Tensor ffn_out;
    if (block.is_moe) {
      const RoutingPin* pin = nullptr;
      if (pins != nullptr) {
        if (moe_index >= pins->size()) {
          throw ContractError("Model::forward: fewer routing pins than MoE blocks");
        }
        pin = &(*pins)[moe_index];
      }
      MoeForwardResult moe_res = block.moe->forward(tape, ffn_in, &token_ids, probe,
                                                    static_cast<int>(b), pin);
      ffn_out = moe_res.output;
      result.moe_results.push_back(std::move(moe_res));
      ++moe_index;
    } else {
      Tensor act = gelu(tape, linear(tape, ffn_in, block.ffn_w1));
      if (probe != nullptr) probe->add_activations(static_cast<int>(b), act.values());
      ffn_out = linear(tape, act, block.ffn_w2);
    }
    x = add(tape, x, ffn_out);
  }
  Tensor normed = layer_norm(tape, x, final_ln_.gain, final_ln_.bias);
  result.logits = linear(tape, normed, head_);
  return result;
}

std::vector<std::pair<std::string, Tensor>> Model::parameters() const {
  std::vector<std::pair<std::string, Tensor>> params;
  params.emplace_back("tok_emb", tok_emb_);
  params.emplace_back("pos_emb", pos_emb_);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const TransformerBlock& block = blocks_[b];
    const std::string prefix = "block" + std::to_string(b) + ".";
    params.emplace_back(prefix + "ln1.gain", block.ln1.gain);
    params.emplace_back(prefix + "ln1.bias", block.ln1.bias);
    params.emplace_back(prefix + "attn.wq", block.attn.wq);
    params.emplace_back(prefix + "attn.wk", block.attn.wk);
    params.emplace_back(prefix + "attn.wv", block.attn.wv);
    params.emplace_back(prefix + "attn.wo", block.attn.wo);
    params.emplace_back(prefix + "ln2.gain", block.ln2.gain);
    params.emplace_back(prefix + "ln2.bias", block.ln2.bias);
    if (block.is_moe) {
      block.moe->collect_parameters(prefix + "moe.", params);
    } else {
      params.emplace_back(prefix + "ffn.w1", block.ffn_w1);
      params.emplace_back(prefix + "ffn.w2", block.ffn_w2);
    }
  }
  params.emplace_back("final_norm.gain", final_ln_.gain);
  params.emplace_back("final_norm.bias", final_ln_.bias);
  params.emplace_back("head", head_);
  return params;
}

std::vector<Tensor> Model::parameter_tensors() const {
  std::vector<Tensor> tensors;
  for (auto& [name, tensor] : parameters()) tensors.push_back(tensor);
  return tensors;
}

void Model::set_inference_sparsity(float threshold, float capacity_factor) {
  for (TransformerBlock& block : blocks_) {
    if (block.is_moe) block.moe->set_inference_sparsity(threshold, capacity_factor);
  }
}

namespace {

NamedTensor config_entry(const std::string& key, float value) {
  return NamedTensor{"config." + key, Tensor::scalar(value)};
}

float lookup(const std::map<std::string, Tensor>& entries, const std::string& key) {
  auto it = entries.find("config." + key);
  if (it == entries.end()) throw IoError("checkpoint missing config entry: " + key);
  return it->second.values()[0];
}

}  // namespace

void Model::save(const std::string& path) const {
  std::vector<NamedTensor> entries;
  entries.push_back(config_entry("version", 1.0f));
  entries.push_back(config_entry("num_layers", static_cast<float>(config_.num_layers)));
  entries.push_back(config_entry("hidden_dim", static_cast<float>(config_.hidden_dim)));
  entries.push_back(config_entry("num_heads", static_cast<float>(config_.num_heads)));
  entries.push_back(config_entry("vocab_size", static_cast<float>(config_.vocab_size)));
  entries.push_back(config_entry("max_seq_len", static_cast<float>(config_.max_seq_len)));
  entries.push_back(config_entry("dense_ffn_dim", static_cast<float>(config_.dense_ffn_dim)));
  entries.push_back(config_entry("use_moe", config_.use_moe ? 1.0f : 0.0f));
  entries.push_back(config_entry("moe_start_block", static_cast<float>(config_.moe_start_block)));
  entries.push_back(config_entry("aux_loss_weight", config_.aux_loss_weight));
  entries.push_back(config_entry("moe.num_experts", static_cast<float>(config_.moe.router.num_experts)));
  entries.push_back(config_entry("moe.expert_size", static_cast<float>(config_.moe.expert_size)));
  entries.push_back(config_entry("moe.threshold", config_.moe.router.threshold));
  entries.push_back(config_entry("moe.capacity_factor", config_.moe.router.capacity_factor));
  entries.push_back(config_entry("moe.top_k", static_cast<float>(config_.moe.router.top_k)));
  entries.push_back(
      config_entry("moe.strategy", static_cast<float>(static_cast<int>(config_.moe.router.strategy))));
  entries.push_back(config_entry("moe.dense_baseline_ffn",
                                 static_cast<float>(config_.moe.dense_baseline_ffn)));
  entries.push_back(config_entry("moe.mode", config_.moe.mode == MoeMode::kDenseTrain ? 1.0f : 0.0f));
  // Seed stored as four 16-bit chunks so the value survives the f32 payload.
  std::vector<float> seed_chunks(4);
  for (int i = 0; i < 4; ++i) {
    seed_chunks[static_cast<std::size_t>(i)] =
        static_cast<float>((seed_ >> (16 * i)) & 0xFFFFULL);
  }
  entries.push_back(NamedTensor{"config.seed", Tensor::from_values({4}, std::move(seed_chunks))});

  for (auto& [name, tensor] : parameters()) entries.push_back(NamedTensor{name, tensor});
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const TransformerBlock& block = blocks_[b];
    if (block.is_moe && block.moe->hash_router().has_value()) {
      const auto table = block.moe->hash_router()->table();
      std::vector<float> values(table.begin(), table.end());
      const int entries_count = static_cast<int>(values.size());
      entries.push_back(NamedTensor{"block" + std::to_string(b) + ".moe.hash_table",
                                    Tensor::from_values({entries_count}, std::move(values))});
    }
  }
  save_checkpoint(path, entries);
}

Model Model::load(const std::string& path) {
  std::map<std::string, Tensor> entries;
  for (NamedTensor& entry : load_checkpoint(path)) {
    entries.emplace(std::move(entry.name), std::move(entry.tensor));
  }
  ModelConfig cfg;
  cfg.num_layers = static_cast<int>(lookup(entries, "num_layers"));
  cfg.hidden_dim = static_cast<int>(lookup(entries, "hidden_dim"));
  cfg.num_heads = static_cast<int>(lookup(entries, "num_heads"));
  cfg.vocab_size = static_cast<int>(lookup(entries, "vocab_size"));
  cfg.max_seq_len = static_cast<int>(lookup(entries, "max_seq_len"));
  cfg.dense_ffn_dim = static_cast<int>(lookup(entries, "dense_ffn_dim"));
  cfg.use_moe = lookup(entries, "use_moe") != 0.0f;
  cfg.moe_start_block = static_cast<int>(lookup(entries, "moe_start_block"));
  cfg.aux_loss_weight = lookup(entries, "aux_loss_weight");
  cfg.moe.router.num_experts = static_cast<int>(lookup(entries, "moe.num_experts"));
  cfg.moe.expert_size = static_cast<int>(lookup(entries, "moe.expert_size"));
  cfg.moe.router.threshold = lookup(entries, "moe.threshold");
  cfg.moe.router.capacity_factor = lookup(entries, "moe.capacity_factor");
  cfg.moe.router.top_k = static_cast<int>(lookup(entries, "moe.top_k"));
  cfg.moe.router.strategy = static_cast<RouteStrategy>(static_cast<int>(lookup(entries, "moe.strategy")));
  cfg.moe.dense_baseline_ffn = static_cast<int>(lookup(entries, "moe.dense_baseline_ffn"));
  cfg.moe.mode = lookup(entries, "moe.mode") != 0.0f ? MoeMode::kDenseTrain : MoeMode::kSparse;
  cfg.moe.router.hidden_dim = cfg.hidden_dim;

  std::uint64_t seed = 0;
  if (auto it = entries.find("config.seed"); it != entries.end() && it->second.numel() == 4) {
    for (int i = 0; i < 4; ++i) {
      seed |= static_cast<std::uint64_t>(it->second.values()[static_cast<std::size_t>(i)])
              << (16 * i);
    }
  }

  Model model(cfg, seed);
  for (auto& [name, tensor] : model.parameters()) {
    auto it = entries.find(name);
    if (it == entries.end()) throw IoError("checkpoint missing tensor: " + name);
    if (it->second.shape() != tensor.shape()) {
      throw IoError("checkpoint tensor " + name + " has shape " +
                    shape_to_string(it->second.shape()) + ", expected " +
                    shape_to_string(tensor.shape()));
    }
    std::copy(it->second.values().begin(), it->second.values().end(), tensor.values().begin());
  }
  for (std::size_t b = 0; b < model.blocks_.size(); ++b) {
    TransformerBlock& block = model.blocks_[b];
    if (block.is_moe && cfg.moe.router.strategy == RouteStrategy::kHash) {
      auto it = entries.find("block" + std::to_string(b) + ".moe.hash_table");
      if (it == entries.end()) throw IoError("checkpoint missing hash table for block " + std::to_string(b));
      std::vector<int> table;
      table.reserve(it->second.numel());
      for (float v : it->second.values()) table.push_back(static_cast<int>(v));
      block.moe->set_hash_router(HashRouter(std::move(table), cfg.moe.router.num_experts));
    }
  }
  return model;
}

std::vector<std::uint8_t> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (bytes.empty()) throw DataError("corpus is empty: " + path);
  return bytes;
}

namespace {

struct Batch {
  std::vector<int> tokens;
  std::vector<int> targets;
};

Batch sample_batch(const std::vector<std::uint8_t>& corpus, int batch, int seq_len, Rng& rng) {
  Batch out;
  out.tokens.reserve(static_cast<std::size_t>(batch) * seq_len);
  out.targets.reserve(out.tokens.capacity());
  const std::uint64_t max_offset = corpus.size() - static_cast<std::size_t>(seq_len) - 1;
  for (int b = 0; b < batch; ++b) {
    const std::size_t offset = static_cast<std::size_t>(rng.uniform_int(max_offset + 1));
    for (int l = 0; l < seq_len; ++l) {
      out.tokens.push_back(corpus[offset + static_cast<std::size_t>(l)]);
      out.targets.push_back(corpus[offset + static_cast<std::size_t>(l) + 1]);
    }
  }
  return out;
}

StepMetrics make_step_metrics(long step, double xent, double aux_sum,
                              const SparsityProbe& probe,
                              const std::vector<MoeForwardResult>& moe_results) {
  StepMetrics m;
  m.step = step;
  m.xent = xent;
  m.aux_loss = aux_sum;
  m.ppl = std::exp(xent);
  m.mean_experts_per_token = probe.mean_selected_experts();
  m.drop_rate = probe.drop_rate();
  m.positive_act_frac = probe.positive_fraction();
  double total_flops = 0.0;
  double baseline_flops = 0.0;
  for (const MoeForwardResult& res : moe_results) {
    total_flops += static_cast<double>(res.flops.total);
    baseline_flops += static_cast<double>(res.flops.total) / res.flops.normalized;
  }
  m.normalized_flops = baseline_flops > 0.0 ? total_flops / baseline_flops : 0.0;
  return m;
}

}  // namespace

std::vector<StepMetrics> train(Model& model, const std::vector<std::uint8_t>& corpus,
                               const TrainOptions& options,
                               const std::function<void(const StepMetrics&)>& on_log) {
  const ModelConfig& cfg = model.config();
  if (corpus.size() < 2 * static_cast<std::size_t>(cfg.max_seq_len)) {
    throw DataError("corpus of " + std::to_string(corpus.size()) + " bytes is too small; need " +
                    std::to_string(2 * cfg.max_seq_len));
  }
  if (options.steps < 1 || options.batch_size < 1) {
    throw ContractError("train: steps and batch_size must be >= 1");
  }
  set_num_threads(options.threads);
  Rng sampler = Rng(options.seed).fork(1);
  std::vector<Tensor> params = model.parameter_tensors();
  std::vector<StepMetrics> series;

  for (long step = 0; step < options.steps; ++step) {
    Batch batch = sample_batch(corpus, options.batch_size, cfg.max_seq_len, sampler);
    SparsityProbe probe(cfg.num_layers);
    Tape tape;
    ModelForward fwd = model.forward(&tape, batch.tokens, options.batch_size, cfg.max_seq_len,
                                     &probe);
    Tensor xent = cross_entropy_mean(&tape, fwd.logits, batch.targets);
    Tensor loss = xent;
    double aux_sum = 0.0;
    for (const MoeForwardResult& res : fwd.moe_results) {
      if (!res.aux_loss.defined()) continue;  // hash routing has no balance term
      aux_sum += res.aux_loss.item();
      if (cfg.aux_loss_weight > 0.0f) {
        loss = add(&tape, loss, scale(&tape, res.aux_loss, cfg.aux_loss_weight));
      }
    }
    tape.backward(loss);
    const float lr = options.warmup_steps > 0 && step < options.warmup_steps
                         ? options.lr * static_cast<float>(step + 1) /
                               static_cast<float>(options.warmup_steps)
                         : options.lr;
    sgd_step(params, lr);

    if (step % options.log_every == 0 || step == options.steps - 1) {
      StepMetrics m = make_step_metrics(step, xent.item(), aux_sum, probe, fwd.moe_results);
      if (on_log) on_log(m);
      series.push_back(m);
    }
  }
  return series;
}

double evaluate_perplexity(const Model& model, const std::vector<std::uint8_t>& corpus,
                           int batch_rows) {
  if (corpus.size() < 2) throw DataError("corpus too small to evaluate");
  if (batch_rows < 1) throw ContractError("evaluate_perplexity: batch_rows must be >= 1");
  const int seq_len = std::min<int>(model.config().max_seq_len,
                                    static_cast<int>(corpus.size()) - 1);
  const std::size_t num_windows = std::max<std::size_t>(1, (corpus.size() - 1) / static_cast<std::size_t>(seq_len));

  double total_xent = 0.0;
  std::size_t total_tokens = 0;
  std::vector<int> tokens;
  std::vector<int> targets;
  std::size_t window = 0;
  while (window < num_windows) {
    const int rows = static_cast<int>(std::min<std::size_t>(num_windows - window,
                                                            static_cast<std::size_t>(batch_rows)));
    tokens.clear();
    targets.clear();
    for (int r = 0; r < rows; ++r) {
      const std::size_t offset = (window + static_cast<std::size_t>(r)) * static_cast<std::size_t>(seq_len);
      for (int l = 0; l < seq_len; ++l) {
        tokens.push_back(corpus[offset + static_cast<std::size_t>(l)]);
        targets.push_back(corpus[offset + static_cast<std::size_t>(l) + 1]);
      }
    }
    ModelForward fwd = model.forward(nullptr, tokens, rows, seq_len);
    const double batch_mean = cross_entropy_mean(nullptr, fwd.logits, targets).item();
    total_xent += batch_mean * static_cast<double>(tokens.size());
    total_tokens += tokens.size();
    window += static_cast<std::size_t>(rows);
  }
  return std::exp(total_xent / static_cast<double>(total_tokens));
}

const char* kMetricsCsvHeader =
    "step,xent,aux_loss,ppl,mean_experts_per_token,drop_rate,positive_act_frac,normalized_flops";

void write_metrics_csv(std::ostream& out, const std::vector<StepMetrics>& series) {
  out << kMetricsCsvHeader << "\n";
  char buf[256];
  for (const StepMetrics& m : series) {
    std::snprintf(buf, sizeof(buf), "%ld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", m.step, m.xent,
                  m.aux_loss, m.ppl, m.mean_experts_per_token, m.drop_rate, m.positive_act_frac,
                  m.normalized_flops);
    out << buf << "\n";
  }
}

}  // namespace xmoe
