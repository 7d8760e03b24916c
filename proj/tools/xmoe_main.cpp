// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment CLI: train / eval / sweep / route-trace / decompose / config.
// Exit codes: 0 success, 2 usage or configuration error, 3 data or
// checkpoint corruption.
#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "xmoe/checkpoint.hpp"
#include "xmoe/config.hpp"
#include "xmoe/error.hpp"
#include "xmoe/lm.hpp"
#include "xmoe/moe_layer.hpp"
#include "xmoe/sweep.hpp"

namespace {

namespace fs = std::filesystem;
using namespace xmoe;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;

void apply_seed_override(ExperimentConfig& cfg) {
  if (const char* env = std::getenv("XMOE_SEED")) {
    try {
      cfg.training.seed = std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError("XMOE_SEED is not an unsigned integer: " + std::string(env));
    }
  }
}

void copy_values(Tensor dst, const Tensor& src) {
  if (dst.shape() != src.shape()) {
    throw ShapeError("copy_values: " + shape_to_string(dst.shape()) + " vs " +
                     shape_to_string(src.shape()));
  }
  std::copy(src.values().begin(), src.values().end(), dst.values().begin());
}

int cmd_train(const std::string& config_path) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  apply_seed_override(cfg);
  cfg.validate(/*require_paths=*/true);
  const std::vector<std::uint8_t> corpus = load_corpus(cfg.training.corpus_path);

  Model model(cfg.model, cfg.training.seed);
  auto series = train(model, corpus, cfg.train_options(), [](const StepMetrics& m) {
    std::printf("step %6ld  xent %.4f  ppl %8.2f  experts/token %.2f  drop %.3f\n", m.step, m.xent,
                m.ppl, m.mean_experts_per_token, m.drop_rate);
  });

  fs::create_directories(cfg.output_dir);
  const fs::path metrics_path = fs::path(cfg.output_dir) / "metrics.csv";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw IoError("cannot write metrics: " + metrics_path.string());
  write_metrics_csv(metrics, series);

  const fs::path ckpt_path = fs::path(cfg.output_dir) / "model.ckpt";
  model.save(ckpt_path.string());
  std::cout << "wrote " << metrics_path.string() << " and " << ckpt_path.string() << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& corpus_path,
             std::optional<float> threshold, std::optional<float> gamma, int eval_batch) {
  Model model = Model::load(ckpt_path);
  if (threshold.has_value() != gamma.has_value()) {
    throw ConfigError("--threshold and --gamma must be given together");
  }
  if (threshold.has_value()) model.set_inference_sparsity(*threshold, *gamma);
  const EvalStats stats = evaluate_with_stats(model, load_corpus(corpus_path), eval_batch);
  std::printf("ppl %.6g  normalized_flops %.6g  utilized_flops %.6g  drop_rate %.6g\n", stats.ppl,
              stats.normalized_flops, stats.utilized_flops, stats.drop_rate);
  return kExitOk;
}

int cmd_sweep(const std::string& ckpt_path, const std::string& corpus_path,
              std::vector<float> thresholds, std::vector<float> gammas,
              const std::string& out_path, int eval_batch) {
  Model model = Model::load(ckpt_path);
  const auto corpus = load_corpus(corpus_path);
  const auto rows = sweep_flops(model, corpus, std::move(thresholds), std::move(gammas), eval_batch);
  if (out_path.empty()) {
    write_sweep_csv(std::cout, rows);
  } else {
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw IoError("cannot write sweep csv: " + out_path);
    write_sweep_csv(out, rows);
    std::cout << "wrote " << out_path << "\n";
  }
  return kExitOk;
}

int cmd_route_trace(const std::string& ckpt_path, std::string text, const std::string& input_path,
                    int layer_one_based, const std::string& out_path) {
  Model model = Model::load(ckpt_path);
  if (!input_path.empty()) {
    const auto bytes = load_corpus(input_path);
    text.assign(bytes.begin(), bytes.end());
  }
  if (text.empty()) throw ConfigError("route-trace needs non-empty input (--text or --input)");
  const int block = layer_one_based - 1;
  if (block < 0 || block >= model.config().num_layers || !model.config().block_is_moe(block)) {
    throw ConfigError("--layer " + std::to_string(layer_one_based) +
                      " is not an MoE block (MoE blocks start at block " +
                      std::to_string(model.config().moe_start_block) + ", every second block)");
  }

  const int seq_len = std::min<int>(model.config().max_seq_len, static_cast<int>(text.size()));
  std::vector<int> ids;
  ids.reserve(static_cast<std::size_t>(seq_len));
  for (int i = 0; i < seq_len; ++i) ids.push_back(static_cast<unsigned char>(text[static_cast<std::size_t>(i)]));

  ModelForward fwd = model.forward(nullptr, ids, 1, seq_len);
  std::size_t result_index = 0;
  for (int b : model.config().moe_block_indices()) {
    if (b == block) break;
    ++result_index;
  }
  const MoeForwardResult& res = fwd.moe_results[result_index];

  std::ostringstream csv;
  csv << "token_id,rank,expert,gate_weight,priority,kept\n";
  char buf[160];
  for (std::size_t t = 0; t < res.decisions.size(); ++t) {
    const RoutingDecision& d = res.decisions[t];
    for (std::size_t j = 0; j < d.selections.size(); ++j) {
      const Selection& s = d.selections[j];
      std::snprintf(buf, sizeof(buf), "%d,%d,%d,%.9g,%.9g,%d", d.token_id, s.rank, s.expert,
                    static_cast<double>(s.gate_weight), static_cast<double>(s.priority),
                    res.assignments.kept_mask[t][j] ? 1 : 0);
      csv << buf << "\n";
    }
  }
  if (out_path.empty()) {
    std::cout << csv.str();
  } else {
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw IoError("cannot write route trace: " + out_path);
    out << csv.str();
    std::cout << "wrote " << out_path << "\n";
  }
  return kExitOk;
}

int cmd_decompose(const std::string& ckpt_path, int num_experts, const std::string& out_path) {
  Model source = Model::load(ckpt_path);
  const ModelConfig& src_cfg = source.config();
  if (src_cfg.use_moe) {
    throw ConfigError("decompose expects a dense checkpoint; this one already uses MoE layers");
  }
  if (num_experts < 1 || src_cfg.dense_ffn_dim % num_experts != 0) {
    throw ConfigError("dense_ffn_dim=" + std::to_string(src_cfg.dense_ffn_dim) +
                      " is not divisible by num_experts=" + std::to_string(num_experts));
  }

  ModelConfig cfg = src_cfg;
  cfg.use_moe = true;
  cfg.moe_start_block = 2;
  cfg.moe.router = RouterConfig{num_experts, cfg.hidden_dim, 1.0f, RouteStrategy::kThreshold, 1,
                                static_cast<float>(num_experts)};
  cfg.moe.expert_size = src_cfg.dense_ffn_dim / num_experts;
  cfg.moe.dense_baseline_ffn = src_cfg.dense_ffn_dim;
  cfg.moe.mode = MoeMode::kDenseTrain;

  Model dst(cfg, source.seed());
  // Shared tensors carry over by name; MoE blocks are rebuilt below.
  std::map<std::string, Tensor> src_params;
  for (auto& [name, tensor] : source.parameters()) src_params.emplace(name, tensor);
  for (auto& [name, tensor] : dst.parameters()) {
    auto it = src_params.find(name);
    if (it != src_params.end()) copy_values(tensor, it->second);
  }
  for (int b = 0; b < cfg.num_layers; ++b) {
    if (!cfg.block_is_moe(b)) continue;
    const TransformerBlock& src_block = source.blocks()[static_cast<std::size_t>(b)];
    TransformerBlock& dst_block = dst.blocks()[static_cast<std::size_t>(b)];
    auto experts = decompose_ffn(src_block.ffn_w1, src_block.ffn_w2, num_experts);
    // A zero router gives exactly uniform gates (1/N each); scaling the
    // second matrix by N makes the gated sum reproduce the dense output.
    for (int e = 0; e < num_experts; ++e) {
      ExpertParams& slice = experts[static_cast<std::size_t>(e)];
      for (float& v : slice.w2.values()) v *= static_cast<float>(num_experts);
      copy_values(dst_block.moe->experts()[static_cast<std::size_t>(e)].w1, slice.w1);
      copy_values(dst_block.moe->experts()[static_cast<std::size_t>(e)].w2, slice.w2);
    }
    Tensor router = dst_block.moe->router_weights();
    std::fill(router.values().begin(), router.values().end(), 0.0f);
  }
  dst.save(out_path);
  std::cout << "wrote " << out_path << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"XMoE: small-expert mixture-of-experts language model experiments"};
  app.require_subcommand(1);

  std::string config_path;
  auto* train_cmd = app.add_subcommand("train", "train a model from a JSON experiment config");
  train_cmd->add_option("--config", config_path, "experiment config JSON")->required();

  std::string ckpt_path, corpus_path, out_path, text, input_path;
  std::optional<float> threshold_opt, gamma_opt;
  int eval_batch = 8;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate perplexity of a checkpoint");
  eval_cmd->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  eval_cmd->add_option("--corpus", corpus_path, "byte corpus file")->required();
  eval_cmd->add_option("--threshold", threshold_opt, "override routing threshold");
  eval_cmd->add_option("--gamma", gamma_opt, "override capacity factor");
  eval_cmd->add_option("--eval-batch", eval_batch, "evaluation rows per batch");

  std::vector<float> sweep_t, sweep_gamma;
  auto* sweep_cmd = app.add_subcommand("sweep", "perplexity vs FLOPs over a (t, gamma) grid");
  sweep_cmd->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  sweep_cmd->add_option("--corpus", corpus_path, "byte corpus file")->required();
  sweep_cmd->add_option("--t", sweep_t, "threshold values")->required()->expected(-1);
  sweep_cmd->add_option("--gamma", sweep_gamma, "capacity factor values")->required()->expected(-1);
  sweep_cmd->add_option("--out", out_path, "output CSV path (default: stdout)");
  sweep_cmd->add_option("--eval-batch", eval_batch, "evaluation rows per batch");

  int layer = 0;
  auto* trace_cmd = app.add_subcommand("route-trace", "dump routing decisions for one MoE block");
  trace_cmd->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  trace_cmd->add_option("--text", text, "input text (bytes)");
  trace_cmd->add_option("--input", input_path, "input file (bytes)");
  trace_cmd->add_option("--layer", layer, "1-based transformer block index")->required();
  trace_cmd->add_option("--out", out_path, "output CSV path (default: stdout)");

  int num_experts = 0;
  auto* decompose_cmd =
      app.add_subcommand("decompose", "split a dense checkpoint's FFN blocks into experts");
  decompose_cmd->add_option("--checkpoint", ckpt_path, "dense model checkpoint")->required();
  decompose_cmd->add_option("--num-experts", num_experts, "experts per MoE block")->required();
  decompose_cmd->add_option("--out", out_path, "output checkpoint path")->required();

  bool print_defaults = false;
  auto* config_cmd = app.add_subcommand("config", "experiment config helpers");
  config_cmd->add_flag("--print-defaults", print_defaults, "dump the default config JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(config_path);
    if (eval_cmd->parsed()) {
      return cmd_eval(ckpt_path, corpus_path, threshold_opt, gamma_opt, eval_batch);
    }
    if (sweep_cmd->parsed()) {
      return cmd_sweep(ckpt_path, corpus_path, std::move(sweep_t), std::move(sweep_gamma),
                       out_path, eval_batch);
    }
    if (trace_cmd->parsed()) {
      return cmd_route_trace(ckpt_path, std::move(text), input_path, layer, out_path);
    }
    if (decompose_cmd->parsed()) return cmd_decompose(ckpt_path, num_experts, out_path);
    if (config_cmd->parsed()) {
      if (print_defaults) {
        std::cout << experiment_config_to_json(ExperimentConfig{});
        return kExitOk;
      }
      std::cerr << "config: nothing to do (try --print-defaults)\n";
      return kExitUsage;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ContractError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}
