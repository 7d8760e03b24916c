// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
#include "xmoe/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "xmoe/error.hpp"

namespace xmoe {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

void put_u32(std::string& buf, std::uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xFF));
  buf.push_back(static_cast<char>((v >> 8) & 0xFF));
  buf.push_back(static_cast<char>((v >> 16) & 0xFF));
  buf.push_back(static_cast<char>((v >> 24) & 0xFF));
}

void put_f32(std::string& buf, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  put_u32(buf, bits);
}

class Reader {
 public:
  Reader(const std::string& data, const std::string& path) : data_(data), path_(path) {}

  std::uint32_t u32() {
    require(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) {
      v = (v << 8) | static_cast<std::uint8_t>(data_[pos_ + static_cast<std::size_t>(i)]);
    }
    pos_ += 4;
    return v;
  }

  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }

  std::string bytes(std::size_t n) {
    require(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == data_.size(); }

 private:
  void require(std::size_t n) {
    if (pos_ + n > data_.size()) {
      throw IoError("checkpoint " + path_ + " is truncated at offset " + std::to_string(pos_));
    }
  }

  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& entries) {
  std::string buf;
  buf.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  for (const NamedTensor& entry : entries) {
    put_u32(buf, static_cast<std::uint32_t>(entry.name.size()));
    buf.append(entry.name);
    const Shape& shape = entry.tensor.shape();
    put_u32(buf, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) put_u32(buf, static_cast<std::uint32_t>(d));
    for (float v : entry.tensor.values()) put_f32(buf, v);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (data.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(data.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw IoError("bad checkpoint magic in " + path);
  }
  Reader reader(data, path);
  reader.bytes(sizeof(kCheckpointMagic));
  std::vector<NamedTensor> entries;
  while (!reader.at_end()) {
    const std::uint32_t name_len = reader.u32();
    std::string name = reader.bytes(name_len);
    const std::uint32_t rank = reader.u32();
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint32_t d = reader.u32();
      if (d == 0) throw IoError("zero dimension in checkpoint entry " + name);
      shape.push_back(static_cast<int>(d));
      numel *= d;
    }
    std::vector<float> values(numel);
    for (std::size_t i = 0; i < numel; ++i) values[i] = reader.f32();
    entries.push_back(NamedTensor{std::move(name), Tensor::from_values(std::move(shape), std::move(values))});
  }
  return entries;
}

}  // namespace xmoe
