#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>

#include "gradcheck.hpp"
#include "suites.hpp"
#include "htsc/errors.hpp"
#include "htsc/nn.hpp"
#include "htsc/ops.hpp"
#include "htsc/optim.hpp"

using namespace htsc;
using htsc::testing::grad_check;
using htsc::testing::random_tensor;
using htsc::testing::weighted_sum;

namespace {

constexpr int kInstances = 20;
constexpr double kTol = 1e-4;

// Runs `kInstances` random finite-difference checks of a unary-shaped op.
void check_op(const char* name, const std::vector<Shape>& shapes,
              const std::function<Tensord(const std::vector<Tensord>&)>& op,
              std::uint64_t seed = 1) {
  for (int trial = 0; trial < kInstances; ++trial) {
    Rng rng(seed * 1000 + trial);
    std::vector<Tensord> inputs;
    for (const auto& s : shapes) inputs.push_back(random_tensor(s, rng));
    const auto r = grad_check(inputs, [&](const std::vector<Tensord>& in) {
      return weighted_sum(op(in), 77 + trial);
    });
    INFO(name << " trial " << trial);
    CHECK(r.max_rel_error <= kTol);
    CHECK(r.analytic_norm > 0.0);
  }
}

}  // namespace

TEST_CASE("matmul forward values") {
  auto eye = Tensord::from({2, 2}, {1, 0, 0, 1});
  auto a = Tensord::from({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, a).to_vector() == std::vector<double>{1, 2, 3, 4});
  auto b = Tensord::from({2, 2}, {5, 6, 7, 8});
  CHECK(matmul(a, b).to_vector() == std::vector<double>{19, 22, 43, 50});
  CHECK_THROWS_AS(matmul(a, Tensord::zeros({3, 2})), ShapeError);
}

TEST_CASE("matmul gradient matches finite differences") {
  check_op("matmul", {{3, 4}, {4, 2}}, [](auto& in) { return matmul(in[0], in[1]); });
  // The sum(A*B) form from the operation contract.
  for (int trial = 0; trial < kInstances; ++trial) {
    Rng rng(500 + trial);
    auto r = grad_check({random_tensor({2, 3}, rng), random_tensor({3, 4}, rng)},
                        [](auto& in) { return sum(matmul(in[0], in[1])); });
    CHECK(r.max_rel_error <= kTol);
  }
}

TEST_CASE("softmax cross entropy") {
  SUBCASE("uniform logits") {
    auto logits = Tensord::full({3, 4}, 0.25);
    auto loss = softmax_cross_entropy(logits, {0, 1, 3}, Reduction::Sum);
    CHECK(loss.item() == doctest::Approx(3.0 * std::log(4.0)).epsilon(1e-12));
    CHECK(loss.item() == doctest::Approx(4.158883).epsilon(1e-6));
  }
  SUBCASE("saturated correct prediction") {
    auto logits = Tensord::zeros({2, 5});
    logits.mutable_data()[0 * 5 + 2] = 1e9;
    logits.mutable_data()[1 * 5 + 4] = 1e9;
    CHECK(std::abs(softmax_cross_entropy(logits, {2, 4}).item()) <= 1e-6);
  }
  SUBCASE("direct formula on a random instance") {
    Rng rng(11);
    auto logits = random_tensor({2, 3}, rng);
    const std::vector<std::size_t> targets{2, 0};
    double expected = 0.0;
    for (std::size_t i = 0; i < 2; ++i) {
      double z = 0.0;
      for (std::size_t j = 0; j < 3; ++j) z += std::exp(logits.at(i, j));
      expected += -std::log(std::exp(logits.at(i, targets[i])) / z);
    }
    CHECK(std::abs(softmax_cross_entropy(logits, targets).item() - expected / 2.0) <= 1e-12);
    CHECK(std::abs(softmax_cross_entropy(logits, targets, Reduction::Sum).item() - expected) <= 1e-12);
  }
  SUBCASE("out-of-range target") {
    CHECK_THROWS_AS(softmax_cross_entropy(Tensord::zeros({1, 3}), {3}), IndexError);
  }
  SUBCASE("gradient") {
    for (int trial = 0; trial < kInstances; ++trial) {
      Rng rng(900 + trial);
      std::vector<std::size_t> targets{rng.below(6), rng.below(6), rng.below(6)};
      auto r = grad_check({random_tensor({3, 6}, rng)},
                          [&](auto& in) { return softmax_cross_entropy(in[0], targets); });
      CHECK(r.max_rel_error <= kTol);
    }
  }
}

TEST_CASE("multi-head attention") {
  Rng init(3);
  ParamStore<double> store;
  MultiHeadAttention<double> mha(store, "mha", 4, 2, init);

  SUBCASE("single key returns the projected value row") {
    Rng rng(4);
    auto kv = random_tensor({1, 4}, rng);
    auto expected = mha.wo(mha.wv(kv));
    for (int t = 0; t < 3; ++t) {
      auto q = random_tensor({3, 4}, rng);
      auto out = mha(q, kv, kv);
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(out.at(i, j) == doctest::Approx(expected.at(0, j)).epsilon(1e-12));
    }
  }
  SUBCASE("causal mask hides later positions") {
    Rng rng(5);
    auto x = random_tensor({3, 4}, rng);
    auto before = mha(x, x, x, AttnMask::causal());
    auto perturbed = x.detach();
    for (std::size_t j = 0; j < 4; ++j) perturbed.mutable_data()[1 * 4 + j] += 3.0;
    auto after = mha(perturbed, perturbed, perturbed, AttnMask::causal());
    for (std::size_t j = 0; j < 4; ++j) CHECK(before.at(0, j) == after.at(0, j));
    bool row1_changed = false;
    for (std::size_t j = 0; j < 4; ++j) row1_changed |= before.at(1, j) != after.at(1, j);
    CHECK(row1_changed);
  }
  SUBCASE("gradient on a 2-token, 2-head instance") {
    std::vector<Tensord> params;
    for (const auto& [_, t] : store.all()) params.push_back(t);
    for (int trial = 0; trial < kInstances; ++trial) {
      Rng rng(40 + trial);
      auto inputs = params;
      inputs.push_back(random_tensor({2, 4}, rng));
      inputs.push_back(random_tensor({2, 4}, rng));
      auto r = grad_check(inputs, [&](auto& in) {
        const auto& q = in[in.size() - 2];
        const auto& kv = in[in.size() - 1];
        return weighted_sum(mha(q, kv, kv), 9);
      });
      CHECK(r.max_rel_error <= kTol);
    }
  }
  SUBCASE("width must divide into heads") {
    ParamStore<double> s;
    CHECK_THROWS_AS(MultiHeadAttention<double>(s, "bad", 6, 4, init), ConfigError);
    CHECK_THROWS_AS(attention(Tensord::zeros({2, 6}), Tensord::zeros({2, 6}), Tensord::zeros({2, 6}), 4),
                    ConfigError);
  }
}

TEST_CASE("attention core gradients under each mask kind") {
  for (auto mask : {AttnMask::none(), AttnMask::causal(), AttnMask::prefix(2)}) {
    check_op("attention", {{4, 6}, {4, 6}, {4, 6}},
             [mask](auto& in) { return attention(in[0], in[1], in[2], 3, mask); });
  }
  check_op("cross attention", {{2, 4}, {5, 4}, {5, 4}},
           [](auto& in) { return attention(in[0], in[1], in[2], 2); });
}

TEST_CASE("maxpool2d") {
  SUBCASE("constant input") {
    auto out = maxpool2d(Tensord::full({4, 6, 2}, 0.7));
    CHECK(out.shape() == Shape{2, 3, 2});
    for (double v : out.data()) CHECK(v == 0.7);
  }
  SUBCASE("forced maximum") {
    CHECK(maxpool2d(Tensord::from({2, 2, 1}, {1, 2, 3, 4})).to_vector() == std::vector<double>{4});
  }
  SUBCASE("ties route to first cell in scan order") {
    auto x = Tensord::from({2, 2, 1}, {5, 5, 5, 5}, true);
    maxpool2d(x).backward();
    CHECK(x.grad()[0] == 1.0);
    CHECK(x.grad()[1] == 0.0);
    CHECK(x.grad()[3] == 0.0);
  }
  SUBCASE("odd sizes rejected") {
    CHECK_THROWS_AS(maxpool2d(Tensord::zeros({3, 4, 1})), ShapeError);
  }
  SUBCASE("gradient") {
    check_op("maxpool2d", {{4, 4, 2}}, [](auto& in) { return maxpool2d(in[0]); });
  }
}

TEST_CASE("every primitive passes finite-difference checks") {
  std::uint64_t seed = 1;
  for (const auto& c : htsc::testing::op_cases()) {
    const auto r = htsc::testing::check_op_case(c, kInstances, seed++);
    INFO(c.name);
    CHECK(r.max_rel_error <= kTol);
    CHECK(r.analytic_norm > 0.0);
  }
}

TEST_CASE("dropout modes") {
  Rng rng(1);
  auto x = Tensord::full({4, 4}, 2.0);
  CHECK(dropout(x, 0.5, false, rng).to_vector() == x.to_vector());
  CHECK(dropout(x, 0.0, true, rng).to_vector() == x.to_vector());
  auto y = dropout(x, 0.5, true, rng);
  for (double v : y.data()) CHECK((v == 0.0 || v == 4.0));
  CHECK_THROWS_AS(dropout(x, 1.0, true, rng), ConfigError);
}

TEST_CASE("softmax rows are normalized") {
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    auto p = softmax_rows(random_tensor({4, 9}, rng, 5.0));
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 9; ++j) s += p.at(i, j);
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("forward pass is bitwise deterministic") {
  auto run = [] {
    Rng init(21);
    ParamStore<float> store;
    MultiHeadAttention<float> mha(store, "m", 8, 2, init);
    FeedForward<float> ffn(store, "f", 8, 16, 8, init);
    std::vector<float> x(5 * 8);
    Rng data(22);
    for (auto& v : x) v = static_cast<float>(data.normal());
    auto t = Tensorf::from({5, 8}, x);
    return ffn(mha(t, t, t, AttnMask::causal())).to_vector();
  };
  CHECK(run() == run());
}

TEST_CASE("finite checks flag NaN results") {
  set_finite_checks(true);
  auto x = Tensord::from({1, 2}, {std::numeric_limits<double>::quiet_NaN(), 1.0});
  CHECK_THROWS_AS(add(x, x), NumericError);
  set_finite_checks(false);
  CHECK_NOTHROW(add(x, x));
}

TEST_CASE("tape is released after backward") {
  auto a = Tensord::from({2, 2}, {1, 2, 3, 4}, true);
  auto mid = matmul(a, a);
  auto loss = sum(mid);
  loss.backward();
  CHECK(mid.is_leaf());
  CHECK(!mid.has_grad());
  CHECK(a.has_grad());
  // Gradients accumulate additively into leaves across backward calls.
  const auto first = a.to_vector();
  std::vector<double> g1(a.grad().begin(), a.grad().end());
  sum(matmul(a, a)).backward();
  for (std::size_t i = 0; i < 4; ++i) CHECK(a.grad()[i] == doctest::Approx(2 * g1[i]));
  CHECK(a.to_vector() == first);
}

TEST_CASE("no-grad guard records nothing") {
  auto a = Tensord::from({2, 2}, {1, 2, 3, 4}, true);
  NoGradGuard guard;
  auto y = matmul(a, a);
  CHECK(!y.requires_grad());
  CHECK(y.is_leaf());
}

TEST_CASE("AdamW step") {
  SUBCASE("zero gradient applies only decoupled decay") {
    std::vector<double> theta{1.0};
    std::vector<double> grad{0.0};
    OptimState state;
    AdamConfig cfg{.lr = 0.1, .weight_decay = 0.01, .decoupled = true};
    std::vector<std::span<double>> p{theta};
    std::vector<std::span<const double>> g{grad};
    adam_step<double>(p, g, state, cfg);
    CHECK(theta[0] == doctest::Approx(0.999).epsilon(1e-15));
    CHECK(state.step == 1);
  }
  SUBCASE("no decay matches the coupled Adam implementation bit for bit") {
    Rng rng(3);
    std::vector<float> a(10), b;
    for (auto& v : a) v = static_cast<float>(rng.normal());
    b = a;
    OptimState sa, sb;
    AdamConfig ca{.lr = 0.01, .weight_decay = 0.0, .decoupled = true};
    AdamConfig cb{.lr = 0.01, .weight_decay = 0.0, .decoupled = false};
    for (int step = 0; step < 5; ++step) {
      std::vector<float> grad(10);
      for (auto& v : grad) v = static_cast<float>(rng.normal());
      std::vector<std::span<float>> pa{a}, pb{b};
      std::vector<std::span<const float>> g{grad};
      adam_step<float>(pa, g, sa, ca);
      adam_step<float>(pb, g, sb, cb);
    }
    CHECK(a == b);
  }
  SUBCASE("descends a scalar quadratic") {
    auto theta = Tensord::from({1}, {1.0}, true);
    Adam<double> opt({theta}, AdamConfig{.lr = 0.1, .weight_decay = 0.01});
    double prev = 1.0;
    for (int step = 0; step < 3; ++step) {
      theta.zero_grad();
      mul(theta, theta).backward();
      opt.step();
      CHECK(std::abs(theta.item()) < prev);
      prev = std::abs(theta.item());
    }
    CHECK(opt.state().step == 3);
  }
  SUBCASE("shape mismatch") {
    std::vector<double> theta{1.0, 2.0};
    std::vector<double> grad{0.0};
    OptimState state;
    std::vector<std::span<double>> p{theta};
    std::vector<std::span<const double>> g{grad};
    CHECK_THROWS_AS(adam_step<double>(p, g, state, AdamConfig{}), ShapeError);
  }
}

TEST_CASE("parameter names are unique") {
  Rng rng(1);
  ParamStore<float> store;
  store.create("a.w", {2, 2}, Init::Xavier, rng);
  CHECK_THROWS_AS(store.create("a.w", {2, 2}, Init::Zeros, rng), ConfigError);
  CHECK(store.names_with_prefix("a.").size() == 1);
}
