// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
#include "xmoe/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "xmoe/error.hpp"

namespace xmoe {

namespace {

using Json = nlohmann::ordered_json;

void check_keys(const Json& obj, const std::string& where, const std::set<std::string>& allowed) {
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.contains(key)) {
      throw ConfigError("unknown key \"" + key + "\" in " + where);
    }
  }
}

template <typename T>
void read(const Json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError("bad value for \"" + std::string(key) + "\": " + e.what());
  }
}

}  // namespace

TrainOptions ExperimentConfig::train_options() const {
  TrainOptions opt;
  opt.steps = training.steps;
  opt.lr = training.lr;
  opt.batch_size = training.batch_size;
  opt.seed = training.seed;
  opt.warmup_steps = training.warmup_steps;
  opt.log_every = training.log_every;
  opt.threads = training.threads;
  return opt;
}

void ExperimentConfig::validate(bool require_paths) const {
  model.validate();
  std::string problems;
  if (training.steps < 1) problems += " training.steps must be >= 1;";
  if (!(training.lr >= 0.0f)) problems += " training.lr must be >= 0;";
  if (training.batch_size < 1) problems += " training.batch_size must be >= 1;";
  if (training.warmup_steps < 0) problems += " training.warmup_steps must be >= 0;";
  if (training.log_every < 1) problems += " training.log_every must be >= 1;";
  if (training.threads < 1) problems += " training.threads must be >= 1;";
  if (output_dir.empty()) problems += " output_dir must be set;";
  if (require_paths) {
    if (training.corpus_path.empty()) {
      problems += " training.corpus_path must be set;";
    } else if (!std::filesystem::is_regular_file(training.corpus_path)) {
      problems += " training.corpus_path does not exist: " + training.corpus_path + ";";
    }
  }
  if (!problems.empty()) throw ConfigError("invalid experiment config:" + problems);
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  Json root;
  try {
    root = Json::parse(json_text);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(root, "config root", {"model", "router", "training", "output_dir"});

  ExperimentConfig cfg;
  if (root.contains("model")) {
    const Json& m = root.at("model");
    check_keys(m, "model",
               {"num_layers", "hidden_dim", "num_heads", "vocab_size", "max_seq_len",
                "dense_ffn_dim", "use_moe", "moe_start_block", "expert_size",
                "dense_baseline_ffn", "mode", "aux_loss_weight"});
    read(m, "num_layers", cfg.model.num_layers);
    read(m, "hidden_dim", cfg.model.hidden_dim);
    read(m, "num_heads", cfg.model.num_heads);
    read(m, "vocab_size", cfg.model.vocab_size);
    read(m, "max_seq_len", cfg.model.max_seq_len);
    read(m, "dense_ffn_dim", cfg.model.dense_ffn_dim);
    read(m, "use_moe", cfg.model.use_moe);
    read(m, "moe_start_block", cfg.model.moe_start_block);
    read(m, "expert_size", cfg.model.moe.expert_size);
    read(m, "dense_baseline_ffn", cfg.model.moe.dense_baseline_ffn);
    std::string mode = to_string(cfg.model.moe.mode);
    read(m, "mode", mode);
    cfg.model.moe.mode = moe_mode_from_string(mode);
    read(m, "aux_loss_weight", cfg.model.aux_loss_weight);
  }
  if (root.contains("router")) {
    const Json& r = root.at("router");
    check_keys(r, "router", {"num_experts", "strategy", "threshold", "top_k", "capacity_factor"});
    read(r, "num_experts", cfg.model.moe.router.num_experts);
    std::string strategy = to_string(cfg.model.moe.router.strategy);
    read(r, "strategy", strategy);
    cfg.model.moe.router.strategy = route_strategy_from_string(strategy);
    read(r, "threshold", cfg.model.moe.router.threshold);
    read(r, "top_k", cfg.model.moe.router.top_k);
    read(r, "capacity_factor", cfg.model.moe.router.capacity_factor);
  }
  if (root.contains("training")) {
    const Json& t = root.at("training");
    check_keys(t, "training",
               {"steps", "lr", "batch_size", "seed", "corpus_path", "warmup_steps", "log_every",
                "threads"});
    read(t, "steps", cfg.training.steps);
    read(t, "lr", cfg.training.lr);
    read(t, "batch_size", cfg.training.batch_size);
    read(t, "seed", cfg.training.seed);
    read(t, "corpus_path", cfg.training.corpus_path);
    read(t, "warmup_steps", cfg.training.warmup_steps);
    read(t, "log_every", cfg.training.log_every);
    read(t, "threads", cfg.training.threads);
  }
  read(root, "output_dir", cfg.output_dir);
  cfg.model.moe.router.hidden_dim = cfg.model.hidden_dim;
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_experiment_config(text);
}

std::string experiment_config_to_json(const ExperimentConfig& cfg) {
  Json root;
  root["model"] = Json{{"num_layers", cfg.model.num_layers},
                       {"hidden_dim", cfg.model.hidden_dim},
                       {"num_heads", cfg.model.num_heads},
                       {"vocab_size", cfg.model.vocab_size},
                       {"max_seq_len", cfg.model.max_seq_len},
                       {"dense_ffn_dim", cfg.model.dense_ffn_dim},
                       {"use_moe", cfg.model.use_moe},
                       {"moe_start_block", cfg.model.moe_start_block},
                       {"expert_size", cfg.model.moe.expert_size},
                       {"dense_baseline_ffn", cfg.model.moe.dense_baseline_ffn},
                       {"mode", to_string(cfg.model.moe.mode)},
                       {"aux_loss_weight", cfg.model.aux_loss_weight}};
  root["router"] = Json{{"num_experts", cfg.model.moe.router.num_experts},
                        {"strategy", to_string(cfg.model.moe.router.strategy)},
                        {"threshold", cfg.model.moe.router.threshold},
                        {"top_k", cfg.model.moe.router.top_k},
                        {"capacity_factor", cfg.model.moe.router.capacity_factor}};
  root["training"] = Json{{"steps", cfg.training.steps},
                          {"lr", cfg.training.lr},
                          {"batch_size", cfg.training.batch_size},
                          {"seed", cfg.training.seed},
                          {"corpus_path", cfg.training.corpus_path},
                          {"warmup_steps", cfg.training.warmup_steps},
                          {"log_every", cfg.training.log_every},
                          {"threads", cfg.training.threads}};
  root["output_dir"] = cfg.output_dir;
  return root.dump(2) + "\n";
}

}  // namespace xmoe
