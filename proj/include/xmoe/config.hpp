// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
//
// JSON experiment configuration for the CLI: model shape, router settings,
// and training hyperparameters in one human-editable file.
#pragma once

#include <cstdint>
#include <string>

#include "xmoe/lm.hpp"

namespace xmoe {

struct TrainingConfig {
  long steps = 200;
  float lr = 0.1f;
  int batch_size = 8;
  std::uint64_t seed = 1;
  std::string corpus_path;
  int warmup_steps = 50;
  int log_every = 10;
  int threads = 1;
};

struct ExperimentConfig {
  ModelConfig model;
  TrainingConfig training;
  std::string output_dir = "runs/default";

  TrainOptions train_options() const;
  // Checks numeric ranges and, when require_paths is set, that corpus_path
  // points at an existing file. Throws ConfigError.
  void validate(bool require_paths) const;
};

// Strict parse: unknown keys are rejected so typos surface as config errors.
ExperimentConfig load_experiment_config(const std::string& path);
ExperimentConfig parse_experiment_config(const std::string& json_text);

// Round-trippable JSON with every default spelled out.
std::string experiment_config_to_json(const ExperimentConfig& config);

}  // namespace xmoe
