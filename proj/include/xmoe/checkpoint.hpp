// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary tensor container: 8-byte magic "XMOE0001", then per entry
// u32 name length, UTF-8 name, u32 rank, u32 dims[rank], little-endian
// float32 payload. Round-trips byte-exactly.
#pragma once

#include <string>
#include <vector>

#include "xmoe/tensor.hpp"

namespace xmoe {

inline constexpr char kCheckpointMagic[8] = {'X', 'M', 'O', 'E', '0', '0', '0', '1'};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& entries);

// Throws IoError on missing file, bad magic, or truncation.
std::vector<NamedTensor> load_checkpoint(const std::string& path);

}  // namespace xmoe
