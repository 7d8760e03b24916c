// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace xmoe {

// Tensor shape mismatch; message names both shapes.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Violated API precondition (bad argument, missing gradient, ...).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid model or experiment configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Unusable input data (empty corpus, corpus too small, ...).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem or checkpoint serialization failure.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace xmoe
