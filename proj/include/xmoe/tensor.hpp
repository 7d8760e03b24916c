// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense float32 tensors with reverse-mode gradients on an explicit
// tape. Row-major storage, rank 1 or 2 throughout. Every operation takes a
// Tape*; passing nullptr runs forward-only (inference).
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xmoe/rng.hpp"

namespace xmoe {

using Shape = std::vector<int>;

std::string shape_to_string(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<float> values;
  std::vector<float> grad;  // empty until first needed
  bool requires_grad = false;

  std::size_t numel() const { return values.size(); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0f);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor from_values(Shape shape, std::vector<float> values);
  static Tensor scalar(float value);
  // Glorot-uniform init in +-sqrt(6 / (fan_in + fan_out)).
  static Tensor glorot_uniform(int fan_out, int fan_in, Rng& rng);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::size_t numel() const { return impl_->numel(); }

  std::span<float> values() { return impl_->values; }
  std::span<const float> values() const { return impl_->values; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<float> grad();              // allocates zeros on first use
  std::span<const float> grad() const;  // throws ContractError if absent
  void zero_grad();

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    return *this;
  }

  float at(int row, int col) const;
  float& at(int row, int col);
  float item() const;  // scalar tensors only

  Tensor clone() const;  // deep copy of values (grad not copied)

  detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}

  std::shared_ptr<detail::TensorImpl> impl_;
};

// Linear record of executed operations. Replaying the records in reverse
// order is reverse-mode differentiation: an op's output can only feed later
// ops, so its gradient is complete before the op's own backward rule runs.
class Tape {
 public:
  void record(Tensor output, std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and replays every record in reverse order.
  // Gradients of intermediate results (tape outputs) are reset first, so
  // repeated calls accumulate into parameter gradients only.
  // Empty tape: no-op. Non-scalar loss or a loss from another tape: throws.
  void backward(const Tensor& loss);

  std::size_t size() const { return steps_.size(); }
  bool empty() const { return steps_.empty(); }
  void clear() { steps_.clear(); }

 private:
  struct Step {
    Tensor output;
    std::function<void()> backward;
  };
  std::vector<Step> steps_;
};

// Thread count used by the matmul kernels. Outputs are partitioned by row
// with a fixed per-element summation order, so results are bitwise identical
// for any thread count.
void set_num_threads(int n);
int num_threads();

// --- differentiable operations ------------------------------------------

// a [m x k] * b [k x n] -> [m x n]
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
// x [s x in] * w^T, w stored [out x in] -> [s x out]
Tensor linear(Tape* tape, const Tensor& x, const Tensor& w);
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape* tape, const Tensor& a, float s);
// tanh-approximation GELU, elementwise.
Tensor gelu(Tape* tape, const Tensor& x);
// Row-wise softmax with max subtraction; rank-1 input treated as one row.
Tensor softmax_rows(Tape* tape, const Tensor& x);
Tensor sum(Tape* tape, const Tensor& x);   // scalar
Tensor mean(Tape* tape, const Tensor& x);  // scalar
// Copies the given rows of x into a new [rows.size() x cols] tensor.
Tensor select_rows(Tape* tape, const Tensor& x, std::vector<int> rows);
// Gathers x[r, c] for each (r, c) into a rank-1 tensor.
Tensor gather_values(Tape* tape, const Tensor& x,
                     std::vector<std::pair<int, int>> indices);
// Scalar s * sum_i weights[i] * v[i]; weights are constants.
Tensor weighted_sum(Tape* tape, const Tensor& v, std::vector<float> weights,
                    float s);
// Per-row normalization: gain * (x - mean) / sqrt(var + eps) + bias.
Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gain,
                  const Tensor& bias, float eps = 1e-5f);
// Row gather from an embedding table; backward scatter-adds.
Tensor embedding_lookup(Tape* tape, const Tensor& table,
                        const std::vector<int>& ids);
// Mean token cross-entropy against integer targets, fused log-softmax.
Tensor cross_entropy_mean(Tape* tape, const Tensor& logits,
                          const std::vector<int>& targets);
// Multi-head causal self-attention over q/k/v laid out [batch*seq x dim].
Tensor causal_attention(Tape* tape, const Tensor& q, const Tensor& k,
                        const Tensor& v, int batch, int seq_len,
                        int num_heads);

// values <- values - lr * grad, then grad <- 0. Missing gradient throws.
void sgd_step(const std::vector<Tensor>& params, float lr);

}  // namespace xmoe
