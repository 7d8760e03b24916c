// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
#include "xmoe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <thread>

#include "xmoe/error.hpp"

namespace xmoe {

namespace {

int g_num_threads = 1;

std::size_t checked_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_to_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_to_string(t.shape()));
  }
}

// Splits [0, rows) across the configured threads. Each range is processed
// with the same per-element summation order as the serial path, so results
// do not depend on the thread count.
template <typename Fn>
void parallel_rows(int rows, std::int64_t work_estimate, Fn&& fn) {
  int t = std::min(g_num_threads, rows);
  if (t <= 1 || work_estimate < (1 << 20)) {
    fn(0, rows);
    return;
  }
  const int chunk = (rows + t - 1) / t;
  std::vector<std::thread> workers;
  workers.reserve(static_cast<std::size_t>(t) - 1);
  for (int w = 1; w < t; ++w) {
    const int lo = w * chunk;
    const int hi = std::min(rows, lo + chunk);
    if (lo < hi) workers.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  fn(0, std::min(chunk, rows));
  for (auto& worker : workers) worker.join();
}

// c[i,:] += a[i,:] * b for rows in [r0, r1); a is [m x k], b is [k x n].
void mm_nn_range(float* c, const float* a, const float* b, int r0, int r1, int k, int n) {
  for (int i = r0; i < r1; ++i) {
    float* crow = c + static_cast<std::size_t>(i) * n;
    const float* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[i,j] += dot(a[i,:], b[j,:]) for rows in [r0, r1); b is [cols x inner].
void mm_nt_range(float* c, const float* a, const float* b, int r0, int r1, int inner, int cols) {
  for (int i = r0; i < r1; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * inner;
    float* crow = c + static_cast<std::size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) {
      const float* brow = b + static_cast<std::size_t>(j) * inner;
      float acc = 0.0f;
      for (int p = 0; p < inner; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// c[p,j] += sum_i a[i,p] * b[i,j] for p in [p0, p1); a is [sum x a_cols],
// b is [sum x cols]. The i loop is outermost so b rows stream once per range.
void mm_tn_range(float* c, const float* a, const float* b, int p0, int p1, int sum, int cols,
                 int a_cols) {
  for (int i = 0; i < sum; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * a_cols;
    const float* brow = b + static_cast<std::size_t>(i) * cols;
    for (int p = p0; p < p1; ++p) {
      float* crow = c + static_cast<std::size_t>(p) * cols;
      const float av = arow[p];
      for (int j = 0; j < cols; ++j) crow[j] += av * brow[j];
    }
  }
}

void mm_nn(float* c, const float* a, const float* b, int m, int k, int n) {
  parallel_rows(m, 2ll * m * k * n, [=](int lo, int hi) { mm_nn_range(c, a, b, lo, hi, k, n); });
}

void mm_nt(float* c, const float* a, const float* b, int m, int inner, int cols) {
  parallel_rows(m, 2ll * m * inner * cols,
                [=](int lo, int hi) { mm_nt_range(c, a, b, lo, hi, inner, cols); });
}

void mm_tn(float* c, const float* a, const float* b, int rows, int sum, int cols, int a_cols) {
  parallel_rows(rows, 2ll * rows * sum * cols,
                [=](int lo, int hi) { mm_tn_range(c, a, b, lo, hi, sum, cols, a_cols); });
}

constexpr float kGeluCoeff = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluCubic = 0.044715f;

float gelu_value(float x) {
  const float u = kGeluCoeff * (x + kGeluCubic * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(u));
}

float gelu_derivative(float x) {
  const float u = kGeluCoeff * (x + kGeluCubic * x * x * x);
  const float t = std::tanh(u);
  const float du = kGeluCoeff * (1.0f + 3.0f * kGeluCubic * x * x);
  return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

bool wants_grad(Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out << " x ";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

// --- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) {
  auto impl = std::make_shared<detail::TensorImpl>();
  const std::size_t n = checked_numel(shape);
  impl->shape = std::move(shape);
  impl->values.assign(n, 0.0f);
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, float value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.impl_->values.begin(), t.impl_->values.end(), value);
  return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<float> values) {
  const std::size_t n = checked_numel(shape);
  if (n != values.size()) {
    throw ShapeError("from_values: shape " + shape_to_string(shape) + " needs " +
                     std::to_string(n) + " values, got " + std::to_string(values.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value) { return from_values({1}, {value}); }

Tensor Tensor::glorot_uniform(int fan_out, int fan_in, Rng& rng) {
  Tensor t = zeros({fan_out, fan_in});
  const float limit = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  for (float& v : t.impl_->values) v = rng.uniform(-limit, limit);
  return t;
}

std::span<float> Tensor::grad() {
  impl_->ensure_grad();
  return impl_->grad;
}

std::span<const float> Tensor::grad() const {
  if (!has_grad()) throw ContractError("gradient requested but never populated");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

float Tensor::at(int row, int col) const {
  require_rank2(*this, "at");
  return impl_->values[static_cast<std::size_t>(row) * dim(1) + col];
}

float& Tensor::at(int row, int col) {
  require_rank2(*this, "at");
  return impl_->values[static_cast<std::size_t>(row) * dim(1) + col];
}

float Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item(): tensor " + shape_to_string(shape()) + " is not scalar");
  }
  return impl_->values[0];
}

Tensor Tensor::clone() const {
  Tensor t = from_values(impl_->shape, impl_->values);
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

// --- Tape --------------------------------------------------------------------

void Tape::record(Tensor output, std::function<void()> backward) {
  steps_.push_back(Step{std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a defined scalar tensor");
  }
  if (steps_.empty()) return;
  bool on_tape = false;
  for (const Step& step : steps_) {
    if (step.output.impl() == loss.impl()) {
      on_tape = true;
      break;
    }
  }
  if (!on_tape) throw ContractError("backward: loss was not produced on this tape");
  // Intermediate gradients are scratch; reset them so a replay accumulates
  // exactly one new gradient into every parameter.
  for (Step& step : steps_) step.output.zero_grad();
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] = 1.0f;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
    if (it->backward) it->backward();
  }
}

void set_num_threads(int n) { g_num_threads = std::max(1, n); }
int num_threads() { return g_num_threads; }

// --- operations ---------------------------------------------------------------

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  mm_nn(out.values().data(), a.values().data(), b.values().data(), m, k, n);
  if (wants_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record(out, [a, b, out, m, k, n]() {
      const float* dy = out.grad().data();
      if (a.requires_grad()) {
        Tensor mutable_a = a;
        mm_nt(mutable_a.grad().data(), dy, b.values().data(), m, n, k);
      }
      if (b.requires_grad()) {
        Tensor mutable_b = b;
        mm_tn(mutable_b.grad().data(), a.values().data(), dy, k, m, n, k);
      }
    });
  }
  return out;
}

Tensor linear(Tape* tape, const Tensor& x, const Tensor& w) {
  require_rank2(x, "linear");
  require_rank2(w, "linear");
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError("linear: input width " + shape_to_string(x.shape()) +
                     " does not match weight " + shape_to_string(w.shape()));
  }
  const int s = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  Tensor out = Tensor::zeros({s, out_dim});
  mm_nt(out.values().data(), x.values().data(), w.values().data(), s, in, out_dim);
  if (wants_grad(tape, {&x, &w})) {
    out.set_requires_grad(true);
    tape->record(out, [x, w, out, s, in, out_dim]() {
      const float* dy = out.grad().data();
      if (x.requires_grad()) {
        Tensor mutable_x = x;
        mm_nn(mutable_x.grad().data(), dy, w.values().data(), s, out_dim, in);
      }
      if (w.requires_grad()) {
        Tensor mutable_w = w;
        mm_tn(mutable_w.grad().data(), dy, x.values().data(), out_dim, s, in, out_dim);
      }
    });
  }
  return out;
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  float* o = out.values().data();
  const float* pa = a.values().data();
  const float* pb = b.values().data();
  for (std::size_t i = 0; i < n; ++i) o[i] = pa[i] + pb[i];
  if (wants_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record(out, [a, b, out, n]() {
      const float* dy = out.grad().data();
      if (a.requires_grad()) {
        Tensor ta = a;
        float* g = ta.grad().data();
        for (std::size_t i = 0; i < n; ++i) g[i] += dy[i];
      }
      if (b.requires_grad()) {
        Tensor tb = b;
        float* g = tb.grad().data();
        for (std::size_t i = 0; i < n; ++i) g[i] += dy[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape* tape, const Tensor& a, float s) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  float* o = out.values().data();
  const float* pa = a.values().data();
  for (std::size_t i = 0; i < n; ++i) o[i] = pa[i] * s;
  if (wants_grad(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record(out, [a, out, s, n]() {
      Tensor ta = a;
      float* g = ta.grad().data();
      const float* dy = out.grad().data();
      for (std::size_t i = 0; i < n; ++i) g[i] += dy[i] * s;
    });
  }
  return out;
}

Tensor gelu(Tape* tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const std::size_t n = out.numel();
  float* o = out.values().data();
  const float* px = x.values().data();
  for (std::size_t i = 0; i < n; ++i) o[i] = gelu_value(px[i]);
  if (wants_grad(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record(out, [x, out, n]() {
      Tensor tx = x;
      float* g = tx.grad().data();
      const float* dy = out.grad().data();
      const float* px2 = tx.values().data();
      for (std::size_t i = 0; i < n; ++i) g[i] += dy[i] * gelu_derivative(px2[i]);
    });
  }
  return out;
}

Tensor softmax_rows(Tape* tape, const Tensor& x) {
  const int cols = x.rank() == 1 ? x.dim(0) : x.dim(x.rank() - 1);
  if (x.rank() > 2) throw ShapeError("softmax_rows: rank > 2 unsupported");
  const int rows = static_cast<int>(x.numel()) / cols;
  Tensor out = Tensor::zeros(x.shape());
  float* o = out.values().data();
  const float* px = x.values().data();
  for (int r = 0; r < rows; ++r) {
    const float* in_row = px + static_cast<std::size_t>(r) * cols;
    float* out_row = o + static_cast<std::size_t>(r) * cols;
    float max_v = in_row[0];
    for (int j = 1; j < cols; ++j) max_v = std::max(max_v, in_row[j]);
    float denom = 0.0f;
    for (int j = 0; j < cols; ++j) {
      out_row[j] = std::exp(in_row[j] - max_v);
      denom += out_row[j];
    }
    const float inv = 1.0f / denom;
    for (int j = 0; j < cols; ++j) out_row[j] *= inv;
  }
  if (wants_grad(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record(out, [x, out, rows, cols]() {
      Tensor tx = x;
      float* g = tx.grad().data();
      const float* p = out.values().data();
      const float* dy = out.grad().data();
      for (int r = 0; r < rows; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * cols;
        float dot = 0.0f;
        for (int j = 0; j < cols; ++j) dot += dy[base + j] * p[base + j];
        for (int j = 0; j < cols; ++j) g[base + j] += p[base + j] * (dy[base + j] - dot);
      }
    });
  }
  return out;
}

Tensor sum(Tape* tape, const Tensor& x) {
  double acc = 0.0;
  for (float v : x.values()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  if (wants_grad(tape, {&x})) {
    out.set_requires_grad(true);
    const std::size_t n = x.numel();
    tape->record(out, [x, out, n]() {
      Tensor tx = x;
      float* g = tx.grad().data();
      const float dy = out.grad()[0];
      for (std::size_t i = 0; i < n; ++i) g[i] += dy;
    });
  }
  return out;
}

Tensor mean(Tape* tape, const Tensor& x) {
  double acc = 0.0;
  for (float v : x.values()) acc += v;
  const std::size_t n = x.numel();
  Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
  if (wants_grad(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record(out, [x, out, n]() {
      Tensor tx = x;
      float* g = tx.grad().data();
      const float dy = out.grad()[0] / static_cast<float>(n);
      for (std::size_t i = 0; i < n; ++i) g[i] += dy;
    });
  }
  return out;
}

Tensor select_rows(Tape* tape, const Tensor& x, std::vector<int> rows) {
  require_rank2(x, "select_rows");
  const int cols = x.dim(1);
  for (int r : rows) {
    if (r < 0 || r >= x.dim(0)) {
      throw ContractError("select_rows: row " + std::to_string(r) + " outside " +
                          shape_to_string(x.shape()));
    }
  }
  Tensor out = Tensor::zeros({static_cast<int>(rows.size()), cols});
  float* o = out.values().data();
  const float* px = x.values().data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const float* src = px + static_cast<std::size_t>(rows[i]) * cols;
    std::copy(src, src + cols, o + i * cols);
  }
  if (wants_grad(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record(out, [x, out, rows = std::move(rows), cols]() {
      Tensor tx = x;
      float* g = tx.grad().data();
      const float* dy = out.grad().data();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        float* dst = g + static_cast<std::size_t>(rows[i]) * cols;
        const float* src = dy + i * cols;
        for (int j = 0; j < cols; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor gather_values(Tape* tape, const Tensor& x, std::vector<std::pair<int, int>> indices) {
  require_rank2(x, "gather_values");
  const int rows = x.dim(0), cols = x.dim(1);
  for (const auto& [r, c] : indices) {
    if (r < 0 || r >= rows || c < 0 || c >= cols) {
      throw ContractError("gather_values: index (" + std::to_string(r) + ", " + std::to_string(c) +
                          ") outside " + shape_to_string(x.shape()));
    }
  }
  Tensor out = Tensor::zeros({std::max<int>(1, static_cast<int>(indices.size()))});
  if (indices.empty()) return out;
  float* o = out.values().data();
  const float* px = x.values().data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    o[i] = px[static_cast<std::size_t>(indices[i].first) * cols + indices[i].second];
  }
  if (wants_grad(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record(out, [x, out, indices = std::move(indices), cols]() {
      Tensor tx = x;
      float* g = tx.grad().data();
      const float* dy = out.grad().data();
      for (std::size_t i = 0; i < indices.size(); ++i) {
        g[static_cast<std::size_t>(indices[i].first) * cols + indices[i].second] += dy[i];
      }
    });
  }
  return out;
}

Tensor weighted_sum(Tape* tape, const Tensor& v, std::vector<float> weights, float s) {
  if (weights.size() != v.numel()) {
    throw ShapeError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(v.numel()) + " values");
  }
  double acc = 0.0;
  const float* pv = v.values().data();
  for (std::size_t i = 0; i < weights.size(); ++i) acc += static_cast<double>(weights[i]) * pv[i];
  Tensor out = Tensor::scalar(static_cast<float>(acc * s));
  if (wants_grad(tape, {&v})) {
    out.set_requires_grad(true);
    tape->record(out, [v, out, weights = std::move(weights), s]() {
      Tensor tv = v;
      float* g = tv.grad().data();
      const float dy = out.grad()[0];
      for (std::size_t i = 0; i < weights.size(); ++i) g[i] += dy * s * weights[i];
    });
  }
  return out;
}

Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  require_rank2(x, "layer_norm");
  const int rows = x.dim(0), cols = x.dim(1);
  if (gain.numel() != static_cast<std::size_t>(cols) || bias.numel() != static_cast<std::size_t>(cols)) {
    throw ShapeError("layer_norm: gain/bias width must match " + shape_to_string(x.shape()));
  }
  Tensor out = Tensor::zeros(x.shape());
  std::vector<float> normalized(x.numel());
  std::vector<float> inv_std(static_cast<std::size_t>(rows));
  const float* px = x.values().data();
  const float* pg = gain.values().data();
  const float* pb = bias.values().data();
  float* o = out.values().data();
  for (int r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * cols;
    float mu = 0.0f;
    for (int j = 0; j < cols; ++j) mu += px[base + j];
    mu /= static_cast<float>(cols);
    float var = 0.0f;
    for (int j = 0; j < cols; ++j) {
      const float d = px[base + j] - mu;
      var += d * d;
    }
    var /= static_cast<float>(cols);
    const float istd = 1.0f / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = istd;
    for (int j = 0; j < cols; ++j) {
      const float nv = (px[base + j] - mu) * istd;
      normalized[base + j] = nv;
      o[base + j] = nv * pg[j] + pb[j];
    }
  }
  if (wants_grad(tape, {&x, &gain, &bias})) {
    out.set_requires_grad(true);
    tape->record(out, [x, gain, bias, out, rows, cols, normalized = std::move(normalized),
                       inv_std = std::move(inv_std)]() {
      const float* dy = out.grad().data();
      const float* pg2 = gain.values().data();
      for (int r = 0; r < rows; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * cols;
        if (gain.requires_grad()) {
          Tensor tg = gain;
          float* gg = tg.grad().data();
          for (int j = 0; j < cols; ++j) gg[j] += dy[base + j] * normalized[base + j];
        }
        if (bias.requires_grad()) {
          Tensor tb = bias;
          float* gb = tb.grad().data();
          for (int j = 0; j < cols; ++j) gb[j] += dy[base + j];
        }
        if (x.requires_grad()) {
          Tensor tx = x;
          float* gx = tx.grad().data();
          float mean_dxhat = 0.0f;
          float mean_dxhat_xhat = 0.0f;
          for (int j = 0; j < cols; ++j) {
            const float dxhat = dy[base + j] * pg2[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * normalized[base + j];
          }
          mean_dxhat /= static_cast<float>(cols);
          mean_dxhat_xhat /= static_cast<float>(cols);
          const float istd = inv_std[static_cast<std::size_t>(r)];
          for (int j = 0; j < cols; ++j) {
            const float dxhat = dy[base + j] * pg2[j];
            gx[base + j] +=
                istd * (dxhat - mean_dxhat - normalized[base + j] * mean_dxhat_xhat);
          }
        }
      }
    });
  }
  return out;
}

Tensor embedding_lookup(Tape* tape, const Tensor& table, const std::vector<int>& ids) {
  require_rank2(table, "embedding_lookup");
  const int rows = table.dim(0), cols = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= rows) {
      throw ContractError("embedding_lookup: id " + std::to_string(id) + " outside table " +
                          shape_to_string(table.shape()));
    }
  }
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), cols});
  float* o = out.values().data();
  const float* pt = table.values().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const float* src = pt + static_cast<std::size_t>(ids[i]) * cols;
    std::copy(src, src + cols, o + i * cols);
  }
  if (wants_grad(tape, {&table})) {
    out.set_requires_grad(true);
    tape->record(out, [table, out, ids, cols]() {
      Tensor tt = table;
      float* g = tt.grad().data();
      const float* dy = out.grad().data();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        float* dst = g + static_cast<std::size_t>(ids[i]) * cols;
        const float* src = dy + i * cols;
        for (int j = 0; j < cols; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor cross_entropy_mean(Tape* tape, const Tensor& logits, const std::vector<int>& targets) {
  require_rank2(logits, "cross_entropy_mean");
  const int rows = logits.dim(0), cols = logits.dim(1);
  if (static_cast<int>(targets.size()) != rows) {
    throw ShapeError("cross_entropy_mean: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || t >= cols) {
      throw ContractError("cross_entropy_mean: target " + std::to_string(t) + " outside vocab " +
                          std::to_string(cols));
    }
  }
  std::vector<float> probs(logits.numel());
  const float* pl = logits.values().data();
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * cols;
    float max_v = pl[base];
    for (int j = 1; j < cols; ++j) max_v = std::max(max_v, pl[base + j]);
    double denom = 0.0;
    for (int j = 0; j < cols; ++j) {
      probs[base + j] = std::exp(pl[base + j] - max_v);
      denom += probs[base + j];
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int j = 0; j < cols; ++j) probs[base + j] *= inv;
    total += std::log(denom) + max_v - pl[base + targets[static_cast<std::size_t>(r)]];
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / rows));
  if (wants_grad(tape, {&logits})) {
    out.set_requires_grad(true);
    tape->record(out, [logits, out, targets, rows, cols, probs = std::move(probs)]() {
      Tensor tl = logits;
      float* g = tl.grad().data();
      const float dy = out.grad()[0] / static_cast<float>(rows);
      for (int r = 0; r < rows; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * cols;
        for (int j = 0; j < cols; ++j) g[base + j] += dy * probs[base + j];
        g[base + targets[static_cast<std::size_t>(r)]] -= dy;
      }
    });
  }
  return out;
}

Tensor causal_attention(Tape* tape, const Tensor& q, const Tensor& k, const Tensor& v, int batch,
                        int seq_len, int num_heads) {
  require_rank2(q, "causal_attention");
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("causal_attention: q/k/v shapes must match");
  }
  const int dim = q.dim(1);
  if (q.dim(0) != batch * seq_len || dim % num_heads != 0) {
    throw ShapeError("causal_attention: rows " + std::to_string(q.dim(0)) + " != batch*seq or dim " +
                     std::to_string(dim) + " not divisible by " + std::to_string(num_heads));
  }
  const int head_dim = dim / num_heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(head_dim));

  Tensor out = Tensor::zeros(q.shape());
  // Softmaxed score rows, kept for the backward rule.
  auto attn = std::make_shared<std::vector<float>>(
      static_cast<std::size_t>(batch) * num_heads * seq_len * seq_len, 0.0f);
  const float* pq = q.values().data();
  const float* pk = k.values().data();
  const float* pv = v.values().data();
  float* po = out.values().data();

  auto row_base = [&](int b, int t) { return (static_cast<std::size_t>(b) * seq_len + t) * dim; };
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < num_heads; ++h) {
      const int col0 = h * head_dim;
      float* a_bh = attn->data() +
                    ((static_cast<std::size_t>(b) * num_heads + h) * seq_len) * seq_len;
      for (int t = 0; t < seq_len; ++t) {
        float* arow = a_bh + static_cast<std::size_t>(t) * seq_len;
        const float* qrow = pq + row_base(b, t) + col0;
        float max_v = -std::numeric_limits<float>::infinity();
        for (int u = 0; u <= t; ++u) {
          const float* krow = pk + row_base(b, u) + col0;
          float acc = 0.0f;
          for (int c = 0; c < head_dim; ++c) acc += qrow[c] * krow[c];
          arow[u] = acc * inv_sqrt;
          max_v = std::max(max_v, arow[u]);
        }
        float denom = 0.0f;
        for (int u = 0; u <= t; ++u) {
          arow[u] = std::exp(arow[u] - max_v);
          denom += arow[u];
        }
        const float inv = 1.0f / denom;
        float* orow = po + row_base(b, t) + col0;
        for (int u = 0; u <= t; ++u) {
          arow[u] *= inv;
          const float* vrow = pv + row_base(b, u) + col0;
          const float w = arow[u];
          for (int c = 0; c < head_dim; ++c) orow[c] += w * vrow[c];
        }
      }
    }
  }

  if (wants_grad(tape, {&q, &k, &v})) {
    out.set_requires_grad(true);
    tape->record(out, [q, k, v, out, attn, batch, seq_len, num_heads, head_dim, dim, inv_sqrt]() {
      Tensor tq = q, tk = k, tv = v;
      float* gq = tq.grad().data();
      float* gk = tk.grad().data();
      float* gv = tv.grad().data();
      const float* dy = out.grad().data();
      const float* pq2 = q.values().data();
      const float* pk2 = k.values().data();
      const float* pv2 = v.values().data();
      auto row_base = [&](int b, int t) {
        return (static_cast<std::size_t>(b) * seq_len + t) * dim;
      };
      std::vector<float> d_scores(static_cast<std::size_t>(seq_len));
      for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < num_heads; ++h) {
          const int col0 = h * head_dim;
          const float* a_bh = attn->data() +
                              ((static_cast<std::size_t>(b) * num_heads + h) * seq_len) * seq_len;
          for (int t = 0; t < seq_len; ++t) {
            const float* arow = a_bh + static_cast<std::size_t>(t) * seq_len;
            const float* dout = dy + row_base(b, t) + col0;
            // dA then softmax backward within the causal prefix.
            float dot = 0.0f;
            for (int u = 0; u <= t; ++u) {
              const float* vrow = pv2 + row_base(b, u) + col0;
              float da = 0.0f;
              for (int c = 0; c < head_dim; ++c) da += dout[c] * vrow[c];
              d_scores[static_cast<std::size_t>(u)] = da;
              dot += da * arow[u];
            }
            for (int u = 0; u <= t; ++u) {
              const float w = arow[u];
              const float ds = w * (d_scores[static_cast<std::size_t>(u)] - dot) * inv_sqrt;
              const float* qrow = pq2 + row_base(b, t) + col0;
              const float* krow = pk2 + row_base(b, u) + col0;
              float* gq_row = gq + row_base(b, t) + col0;
              float* gk_row = gk + row_base(b, u) + col0;
              float* gv_row = gv + row_base(b, u) + col0;
              for (int c = 0; c < head_dim; ++c) {
                gq_row[c] += ds * krow[c];
                gk_row[c] += ds * qrow[c];
                gv_row[c] += w * dout[c];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

void sgd_step(const std::vector<Tensor>& params, float lr) {
  if (lr < 0.0f) throw ContractError("sgd_step: negative learning rate");
  for (const Tensor& p : params) {
    if (!p.has_grad()) {
      throw ContractError("sgd_step: parameter " + shape_to_string(p.shape()) +
                          " has no gradient");
    }
  }
  for (const Tensor& p : params) {
    Tensor t = p;
    float* v = t.values().data();
    const float* g = t.grad().data();
    const std::size_t n = t.numel();
    for (std::size_t i = 0; i < n; ++i) v[i] -= lr * g[i];
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(v[i])) {
        throw ContractError("sgd_step: non-finite parameter value after update");
      }
    }
    t.zero_grad();
  }
}

}  // namespace xmoe
