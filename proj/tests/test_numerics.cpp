// Copyright (c) 2026 XMoE C++ Authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "support/testing.hpp"
#include "xmoe/checkpoint.hpp"
#include "xmoe/error.hpp"
#include "xmoe/tensor.hpp"

using namespace xmoe;
using xmoe::testing::check_gradient;
using xmoe::testing::random_tensor;
using xmoe::testing::TempDir;

TEST_CASE("matmul identity and hand examples") {
  Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  Tensor out = matmul(nullptr, eye, m);
  for (std::size_t i = 0; i < 4; ++i) CHECK(out.values()[i] == m.values()[i]);

  Tensor a = Tensor::from_values({1, 2}, {1, 2});
  Tensor b = Tensor::from_values({2, 1}, {3, 4});
  CHECK(matmul(nullptr, a, b).item() == doctest::Approx(11.0f));
}

TEST_CASE("matmul dimension mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(nullptr, a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2 x 3]") != std::string::npos);
    CHECK(msg.find("[4 x 2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches central finite differences") {
  Rng rng(42);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  a.set_requires_grad(true);
  b.set_requires_grad(true);

  auto loss_value = [&]() {
    Tape t;
    return static_cast<double>(sum(&t, matmul(&t, a, b)).item());
  };
  Tape tape;
  Tensor loss = sum(&tape, matmul(&tape, a, b));
  tape.backward(loss);

  CHECK(check_gradient(a, loss_value).rel_error() < 1e-3);
  CHECK(check_gradient(b, loss_value).rel_error() < 1e-3);
}

TEST_CASE("softmax anchors") {
  Tensor flat = softmax_rows(nullptr, Tensor::from_values({3}, {0, 0, 0}));
  for (float v : flat.values()) CHECK(v == doctest::Approx(1.0f / 3.0f));

  Tensor extreme = softmax_rows(nullptr, Tensor::from_values({2}, {1000, 0}));
  CHECK(extreme.values()[0] == doctest::Approx(1.0f).epsilon(1e-6));
  CHECK(extreme.values()[1] == doctest::Approx(0.0f).epsilon(1e-6));

  Tensor hand = softmax_rows(nullptr, Tensor::from_values({2}, {std::log(2.0f), 0.0f}));
  CHECK(hand.values()[0] == doctest::Approx(2.0f / 3.0f));
  CHECK(hand.values()[1] == doctest::Approx(1.0f / 3.0f));
}

TEST_CASE("softmax rows sum to one with entries in (0, 1]") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor logits = random_tensor({4, 6}, rng, -10.0f, 10.0f);
    Tensor probs = softmax_rows(nullptr, logits);
    for (int r = 0; r < 4; ++r) {
      double total = 0.0;
      for (int c = 0; c < 6; ++c) {
        const float p = probs.at(r, c);
        CHECK(p > 0.0f);
        CHECK(p <= 1.0f);
        total += p;
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("gelu anchors and gradient") {
  CHECK(gelu(nullptr, Tensor::scalar(0.0f)).item() == 0.0f);
  CHECK(gelu(nullptr, Tensor::scalar(10.0f)).item() == doctest::Approx(10.0f).epsilon(1e-4));

  Tensor x = Tensor::scalar(0.5f);
  x.set_requires_grad(true);
  auto loss_value = [&]() {
    Tape t;
    return static_cast<double>(sum(&t, gelu(&t, x)).item());
  };
  Tape tape;
  Tensor loss = sum(&tape, gelu(&tape, x));
  tape.backward(loss);
  CHECK(check_gradient(x, loss_value).rel_error() < 1e-3);
}

TEST_CASE("backward of x squared at x = 3") {
  Tensor x = Tensor::from_values({1, 1}, {3.0f});
  x.set_requires_grad(true);
  Tape tape;
  Tensor y = matmul(&tape, x, x);
  tape.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(6.0f));

  // A second replay accumulates a second full gradient.
  tape.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(12.0f));
}

TEST_CASE("backward of sum of softmax is zero") {
  Tensor x = Tensor::from_values({4}, {0.3f, -1.2f, 2.0f, 0.05f});
  x.set_requires_grad(true);
  Tape tape;
  Tensor loss = sum(&tape, softmax_rows(&tape, x));
  tape.backward(loss);
  for (float g : x.grad()) CHECK(std::abs(g) < 1e-6f);
}

TEST_CASE("two-layer FFN gradients match finite differences") {
  Rng rng(3);
  Tensor x = random_tensor({5, 8}, rng);
  Tensor w1 = random_tensor({6, 8}, rng);
  Tensor w2 = random_tensor({8, 6}, rng);
  w1.set_requires_grad(true);
  w2.set_requires_grad(true);

  auto loss_value = [&]() {
    Tape t;
    return static_cast<double>(sum(&t, linear(&t, gelu(&t, linear(&t, x, w1)), w2)).item());
  };
  Tape tape;
  Tensor loss = sum(&tape, linear(&tape, gelu(&tape, linear(&tape, x, w1)), w2));
  tape.backward(loss);

  CHECK(check_gradient(w1, loss_value).rel_error() < 1e-3);
  CHECK(check_gradient(w2, loss_value).rel_error() < 1e-3);
}

TEST_CASE("backward contract errors") {
  Tape tape;
  Tensor x = Tensor::from_values({2}, {1, 2});
  x.set_requires_grad(true);
  Tensor y = gelu(&tape, x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);  // non-scalar

  Tape other;
  Tensor z = sum(&other, gelu(&other, x));
  CHECK_THROWS_AS(tape.backward(z), ContractError);  // produced elsewhere

  Tape empty;
  CHECK_NOTHROW(empty.backward(Tensor::scalar(1.0f)));  // no-op
}

TEST_CASE("every differentiable op matches finite differences on random tensors") {
  Rng rng(2024);
  struct Case {
    const char* name;
    std::function<Tensor(Tape*, const std::vector<Tensor>&)> op;
    std::vector<Shape> input_shapes;
  };
  const std::vector<Case> cases = {
      {"matmul", [](Tape* t, const std::vector<Tensor>& in) { return matmul(t, in[0], in[1]); },
       {{5, 7}, {7, 4}}},
      {"linear", [](Tape* t, const std::vector<Tensor>& in) { return linear(t, in[0], in[1]); },
       {{6, 8}, {3, 8}}},
      {"add", [](Tape* t, const std::vector<Tensor>& in) { return add(t, in[0], in[1]); },
       {{4, 5}, {4, 5}}},
      {"scale", [](Tape* t, const std::vector<Tensor>& in) { return scale(t, in[0], -1.7f); },
       {{3, 6}}},
      {"gelu", [](Tape* t, const std::vector<Tensor>& in) { return gelu(t, in[0]); }, {{4, 4}}},
      {"softmax", [](Tape* t, const std::vector<Tensor>& in) { return softmax_rows(t, in[0]); },
       {{4, 6}}},
      {"mean", [](Tape* t, const std::vector<Tensor>& in) { return mean(t, in[0]); }, {{5, 3}}},
      {"layer_norm",
       [](Tape* t, const std::vector<Tensor>& in) { return layer_norm(t, in[0], in[1], in[2]); },
       {{4, 8}, {8}, {8}}},
      {"select_rows",
       [](Tape* t, const std::vector<Tensor>& in) {
         return select_rows(t, in[0], {3, 0, 3, 1});
       },
       {{5, 6}}},
      {"gather_values",
       [](Tape* t, const std::vector<Tensor>& in) {
         return gather_values(t, in[0], {{0, 1}, {2, 3}, {2, 3}, {1, 0}});
       },
       {{4, 4}}},
      {"attention",
       [](Tape* t, const std::vector<Tensor>& in) {
         return causal_attention(t, in[0], in[1], in[2], 2, 4, 2);
       },
       {{8, 6}, {8, 6}, {8, 6}}},
  };

  for (const Case& c : cases) {
    CAPTURE(c.name);
    std::vector<Tensor> inputs;
    for (const Shape& shape : c.input_shapes) {
      inputs.push_back(random_tensor(shape, rng));
      inputs.back().set_requires_grad(true);
    }
    // Random fixed mixing weights make the scalar loss sensitive everywhere.
    Tensor probe_out = c.op(nullptr, inputs);
    std::vector<float> mix(probe_out.numel());
    for (float& v : mix) v = rng.uniform(-1.0f, 1.0f);

    auto loss_value = [&]() {
      Tape t;
      return static_cast<double>(weighted_sum(&t, c.op(&t, inputs), mix, 1.0f).item());
    };
    Tape tape;
    Tensor loss = weighted_sum(&tape, c.op(&tape, inputs), mix, 1.0f);
    tape.backward(loss);
    for (Tensor& input : inputs) {
      CHECK_MESSAGE(check_gradient(input, loss_value).rel_error() < 1e-3, c.name);
    }
  }
}

TEST_CASE("cross entropy gradient matches finite differences") {
  Rng rng(11);
  Tensor logits = random_tensor({6, 5}, rng);
  logits.set_requires_grad(true);
  const std::vector<int> targets = {0, 3, 2, 4, 1, 2};
  auto loss_value = [&]() {
    Tape t;
    return static_cast<double>(cross_entropy_mean(&t, logits, targets).item());
  };
  Tape tape;
  Tensor loss = cross_entropy_mean(&tape, logits, targets);
  tape.backward(loss);
  CHECK(check_gradient(logits, loss_value).rel_error() < 1e-3);
}

TEST_CASE("embedding lookup scatter-add gradient") {
  Rng rng(5);
  Tensor table = random_tensor({6, 3}, rng);
  table.set_requires_grad(true);
  const std::vector<int> ids = {1, 4, 1, 0};
  std::vector<float> mix(12);
  for (float& v : mix) v = rng.uniform(-1.0f, 1.0f);
  auto loss_value = [&]() {
    Tape t;
    return static_cast<double>(
        weighted_sum(&t, embedding_lookup(&t, table, ids), mix, 1.0f).item());
  };
  Tape tape;
  Tensor loss = weighted_sum(&tape, embedding_lookup(&tape, table, ids), mix, 1.0f);
  tape.backward(loss);
  CHECK(check_gradient(table, loss_value).rel_error() < 1e-3);
}

TEST_CASE("regrouped sums give identical gradients") {
  Tensor a = Tensor::from_values({3}, {0.5f, -1.0f, 2.0f});
  Tensor b = Tensor::from_values({3}, {1.5f, 0.25f, -0.75f});
  Tensor c = Tensor::from_values({3}, {-2.0f, 3.0f, 0.125f});
  for (Tensor* t : {&a, &b, &c}) t->set_requires_grad(true);

  Tape left;
  left.backward(sum(&left, add(&left, add(&left, a, b), c)));
  std::vector<float> grads_left;
  for (const Tensor* t : {&a, &b, &c}) {
    for (float g : t->grad()) grads_left.push_back(g);
    const_cast<Tensor*>(t)->zero_grad();
  }
  Tape right;
  right.backward(sum(&right, add(&right, a, add(&right, b, c))));
  std::size_t i = 0;
  for (const Tensor* t : {&a, &b, &c}) {
    for (float g : t->grad()) CHECK(std::abs(g - grads_left[i++]) <= 1e-6f);
  }
}

TEST_CASE("sgd step semantics") {
  Tensor p = Tensor::scalar(1.0f);
  p.set_requires_grad(true);
  p.grad()[0] = 2.0f;
  sgd_step({p}, 0.1f);
  CHECK(p.values()[0] == doctest::Approx(0.8f));
  CHECK(p.grad()[0] == 0.0f);  // zeroed

  sgd_step({p}, 0.1f);  // zero gradient leaves the value alone
  CHECK(p.values()[0] == doctest::Approx(0.8f));

  Tensor q = Tensor::scalar(1.0f);
  CHECK_THROWS_AS(sgd_step({q}, 0.1f), ContractError);
}

TEST_CASE("gradient descent converges on a quadratic bowl") {
  Tensor x = Tensor::from_values({1, 1}, {0.0f});
  x.set_requires_grad(true);
  Tensor minus_five = Tensor::from_values({1, 1}, {-5.0f});
  for (int step = 0; step < 100; ++step) {
    Tape tape;
    Tensor diff = add(&tape, x, minus_five);
    Tensor loss = matmul(&tape, diff, diff);
    tape.backward(loss);
    sgd_step({x}, 0.1f);
  }
  CHECK(std::abs(x.values()[0] - 5.0f) < 1e-3f);
}

TEST_CASE("matmul results do not depend on the thread count") {
  Rng rng(99);
  Tensor a = random_tensor({64, 48}, rng);
  Tensor b = random_tensor({48, 32}, rng);
  set_num_threads(1);
  Tensor serial = matmul(nullptr, a, b);
  set_num_threads(4);
  Tensor threaded = matmul(nullptr, a, b);
  set_num_threads(1);
  for (std::size_t i = 0; i < serial.numel(); ++i) {
    CHECK(serial.values()[i] == threaded.values()[i]);
  }
}

TEST_CASE("checkpoint round-trip is byte-exact") {
  TempDir dir("tmp_test_checkpoint");
  Rng rng(31);
  std::vector<NamedTensor> entries;
  entries.push_back({"alpha", random_tensor({3, 4}, rng)});
  entries.push_back({"beta.w1", random_tensor({7}, rng)});
  entries.push_back({"gamma", Tensor::scalar(-0.25f)});

  const std::string path = dir.file("a.ckpt");
  save_checkpoint(path, entries);
  auto loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    CHECK(loaded[i].name == entries[i].name);
    REQUIRE(loaded[i].tensor.shape() == entries[i].tensor.shape());
    for (std::size_t j = 0; j < entries[i].tensor.numel(); ++j) {
      CHECK(loaded[i].tensor.values()[j] == entries[i].tensor.values()[j]);
    }
  }

  const std::string path2 = dir.file("b.ckpt");
  save_checkpoint(path2, loaded);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string bytes1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string bytes2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(bytes1 == bytes2);
}

TEST_CASE("checkpoint rejects bad magic and truncation") {
  TempDir dir("tmp_test_checkpoint_bad");
  const std::string path = dir.file("m.ckpt");
  save_checkpoint(path, {{"x", Tensor::scalar(1.0f)}});

  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(0);
  f.put('Y');
  f.close();
  CHECK_THROWS_AS(load_checkpoint(path), IoError);

  save_checkpoint(path, {{"x", Tensor::scalar(1.0f)}});
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 3));
  out.close();
  CHECK_THROWS_AS(load_checkpoint(path), IoError);

  CHECK_THROWS_AS(load_checkpoint(dir.file("missing.ckpt")), IoError);
}

TEST_CASE("rng is deterministic and fork streams differ") {
  Rng a(123), b(123);
  for (int i = 0; i < 16; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng base(9);
  Rng f1 = base.fork(1);
  Rng f2 = base.fork(2);
  CHECK(f1.next_u64() != f2.next_u64());
}
