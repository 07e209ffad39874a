#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <random>

#include "m2/numerics.hpp"
#include "test_helpers.hpp"

using namespace m2;
using m2::testing::input_gradient_error;
using m2::testing::random_tensor;
using m2::testing::weighted_sum;

namespace {

constexpr double kGradTol = 1e-4;
constexpr int kSeeds = 20;

Tensor<double> eval1(Var<double> (*op)(Var<double>), const Tensor<double>& x) {
  Tape<double> t(false);
  return op(t.constant(x)).value();
}

}  // namespace

TEST_CASE("softmax examples") {
  Tape<double> t(false);
  Tensor<double> a = softmax(t.constant(Tensor<double>::vector({0.0, std::log(3.0)})), 0).value();
  CHECK(a[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(a[1] == doctest::Approx(0.75).epsilon(1e-15));

  Tensor<double> b = softmax(t.constant(Tensor<double>::vector({2.5, 2.5, 2.5})), 0).value();
  for (double v : b.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  std::mt19937_64 rng(4);
  Tensor<double> x = random_tensor({4}, rng, -3, 3);
  Tensor<double> y = softmax(t.constant(x), 0).value();
  double z = 0;
  for (double v : x.data()) z += std::exp(v);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(y[i] - std::exp(x[i]) / z) < 1e-7);
}

TEST_CASE("softmax rows sum to one, lie in (0,1], and ignore shifts") {
  std::mt19937_64 rng(11);
  Tape<double> t(false);
  for (int s = 0; s < kSeeds; ++s) {
    Tensor<double> x = random_tensor({3, 5}, rng, -5, 5);
    for (std::size_t axis : {0u, 1u}) {
      Tensor<double> y = softmax(t.constant(x), axis).value();
      for (double v : y.data()) CHECK((v > 0 && v <= 1));
      if (axis == 1) {
        for (std::size_t r = 0; r < 3; ++r) {
          double sum = 0;
          for (double v : y.row(r)) sum += v;
          CHECK(std::abs(sum - 1) < 1e-6);
        }
        Tensor<double> shifted = x;
        for (std::size_t r = 0; r < 3; ++r)
          for (double& v : shifted.row(r)) v += double(r) * 7.5 - 3;
        CHECK(max_abs_diff(softmax(t.constant(shifted), 1).value(), y) < 1e-6);
      } else {
        for (std::size_t c = 0; c < 5; ++c) {
          double sum = 0;
          for (std::size_t r = 0; r < 3; ++r) sum += y(r, c);
          CHECK(std::abs(sum - 1) < 1e-6);
        }
      }
    }
  }
}

TEST_CASE("softmax rejects NaN logits") {
  Tape<double> t(false);
  auto x = Tensor<double>::vector({0.0, std::numeric_limits<double>::quiet_NaN()});
  CHECK_THROWS_AS(softmax(t.constant(x), 0), NumericError);
  CHECK_THROWS_AS(log_softmax(t.constant(x)), NumericError);
}

TEST_CASE("layer_norm examples") {
  Tape<double> t(false);
  auto ln = [&](Tensor<double> x) {
    const std::size_t n = x.size();
    return layer_norm(t.constant(x), t.constant(Tensor<double>({n}, 1.0)), t.constant(Tensor<double>({n}, 0.0)))
        .value();
  };
  Tensor<double> a = ln(Tensor<double>::vector({1, 1, 1}));
  for (double v : a.data()) CHECK(v == 0.0);

  Tensor<double> b = ln(Tensor<double>::vector({1, -1}));
  const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(std::abs(b[0] - expected) < 1e-12);
  CHECK(std::abs(b[1] + expected) < 1e-12);

  std::mt19937_64 rng(8);
  Tensor<double> x = random_tensor({8}, rng, -2, 4);
  Tensor<double> y = ln(x);
  double mean = 0, var = 0;
  for (double v : x.data()) mean += v / 8;
  for (double v : x.data()) var += (v - mean) * (v - mean) / 8;
  for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(y[i] - (x[i] - mean) / std::sqrt(var + 1e-5)) < 1e-6);
}

TEST_CASE("layer_norm standardizes every row") {
  std::mt19937_64 rng(12);
  Tape<double> t(false);
  for (int s = 0; s < kSeeds; ++s) {
    Tensor<double> x = random_tensor({4, 16}, rng, -10, 10);
    Tensor<double> y =
        layer_norm(t.constant(x), t.constant(Tensor<double>({16}, 1.0)), t.constant(Tensor<double>({16}, 0.0)))
            .value();
    for (std::size_t r = 0; r < 4; ++r) {
      double mean = 0, var = 0;
      for (double v : y.row(r)) mean += v / 16;
      for (double v : y.row(r)) var += (v - mean) * (v - mean) / 16;
      CHECK(std::abs(mean) < 1e-5);
      CHECK(std::abs(var - 1) < 1e-5);
    }
  }
  CHECK_THROWS_AS(layer_norm(t.constant(Tensor<double>::vector({1.0})), t.constant(Tensor<double>::vector({1.0})),
                             t.constant(Tensor<double>::vector({0.0}))),
                  ShapeError);
}

TEST_CASE("init_tensor distributions") {
  ParamSpec glorot{InitKind::GlorotUniform, 512, 512};
  glorot.seed = 3;
  Tensor<double> g = init_tensor<double>(glorot);
  const double bound = std::sqrt(6.0 / 1024.0);
  CHECK(bound == doctest::Approx(0.07654).epsilon(1e-4));
  double gmax = 0;
  for (double v : g.data()) gmax = std::max(gmax, std::abs(v));
  CHECK(gmax <= bound);
  CHECK(gmax > 0.99 * bound);

  ParamSpec key{InitKind::MemoryKey, 1000, 100};
  key.n_memory = 1000;
  key.d_k = 64;
  key.seed = 5;
  Tensor<double> k = init_tensor<double>(key);
  double mean = 0, var = 0;
  for (double v : k.data()) mean += v / double(k.size());
  for (double v : k.data()) var += (v - mean) * (v - mean) / double(k.size() - 1);
  CHECK(std::abs(var - 1.0 / 64) < 0.1 / 64);

  ParamSpec value{InitKind::MemoryValue, 40, 2500};
  value.n_memory = 40;
  value.seed = 6;
  Tensor<double> mv = init_tensor<double>(value);
  var = 0;
  for (double v : mv.data()) var += v * v / double(mv.size());
  CHECK(std::abs(var - 1.0 / 40) < 0.1 / 40);

  Tensor<double> z = init_tensor<double>(ParamSpec{InitKind::Zero, 3, 4});
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("init_tensor is bit-reproducible and validates specs") {
  for (InitKind kind : {InitKind::GlorotUniform, InitKind::He, InitKind::MemoryKey, InitKind::MemoryValue}) {
    ParamSpec s{kind, 7, 9};
    s.n_memory = 7;
    s.d_k = 9;
    s.seed = 1234;
    CHECK(init_tensor<float>(s) == init_tensor<float>(s));
    ParamSpec other = s;
    other.seed = 1235;
    CHECK_FALSE(init_tensor<float>(s) == init_tensor<float>(other));
  }
  ParamSpec mem{InitKind::MemoryValue, 4, 4};
  CHECK_THROWS_AS(init_tensor<float>(mem), ConfigError);
  ParamSpec key{InitKind::MemoryKey, 4, 4};
  key.n_memory = 4;
  CHECK_THROWS_AS(init_tensor<float>(key), ConfigError);
  CHECK_THROWS_AS(init_tensor<float>(ParamSpec{InitKind::GlorotUniform, 0, 4}), ConfigError);
}

TEST_CASE("adam: zero gradient on a fresh state leaves parameters unchanged") {
  ParamStore<double> store;
  store.add("w", Tensor<double>::matrix({{1.5, -2.0}, {0.25, 3.0}}));
  const Tensor<double> before = store.at(0).value;
  Adam<double> adam(store, AdamConfig{});
  adam.step(store, store.zero_grads(), 1e-3);
  CHECK(store.at(0).value == before);
  CHECK(adam.steps() == 1);
}

TEST_CASE("adam: first step moves each coordinate by about lr") {
  ParamStore<double> store;
  store.add("w", Tensor<double>::vector({0.0, 0.0, 0.0}));
  Adam<double> adam(store, AdamConfig{});
  std::vector<Tensor<double>> g{Tensor<double>::vector({0.3, -5.0, 1e-3})};
  const double lr = 0.01;
  adam.step(store, g, lr);
  for (std::size_t i = 0; i < 3; ++i) {
    const double expected = -lr * g[0][i] / (std::abs(g[0][i]) + 1e-9);
    CHECK(std::abs(store.at(0).value[i] - expected) < 1e-15);
    CHECK(std::abs(std::abs(store.at(0).value[i]) - lr) < 1e-8);
  }
}

TEST_CASE("adam: three steps on x^2 match a scalar oracle") {
  ParamStore<double> store;
  store.add("x", Tensor<double>::vector({1.0}));
  Adam<double> adam(store, AdamConfig{});
  const double lr = 0.1, b1 = 0.9, b2 = 0.98, eps = 1e-9;
  double x = 1, m = 0, v = 0;
  for (int step = 1; step <= 3; ++step) {
    std::vector<Tensor<double>> g{Tensor<double>::vector({2 * store.at(0).value[0]})};
    adam.step(store, g, lr);
    const double grad = 2 * x;
    m = b1 * m + (1 - b1) * grad;
    v = b2 * v + (1 - b2) * grad * grad;
    x -= lr * (m / (1 - std::pow(b1, step))) / (std::sqrt(v / (1 - std::pow(b2, step))) + eps);
    CHECK(std::abs(store.at(0).value[0] - x) < 1e-7);
  }
}

TEST_CASE("adam: NaN gradient aborts without touching parameters") {
  ParamStore<float> store;
  store.add("layer.w", Tensor<float>::vector({1.0f, 2.0f}));
  Adam<float> adam(store, AdamConfig{});
  std::vector<Tensor<float>> g{Tensor<float>::vector({0.5f, std::numeric_limits<float>::quiet_NaN()})};
  try {
    adam.step(store, g, 0.1);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer.w") != std::string::npos);
  }
  CHECK(store.at(0).value[0] == 1.0f);
  CHECK(adam.steps() == 0);
}

TEST_CASE("adam skips frozen parameters") {
  ParamStore<double> store;
  store.add("frozen", Tensor<double>::vector({1.0}), false);
  Adam<double> adam(store, AdamConfig{});
  adam.step(store, {Tensor<double>::vector({10.0})}, 0.1);
  CHECK(store.at(0).value[0] == 1.0);
}

TEST_CASE("warmup_lr closed form") {
  const double peak = std::pow(512.0, -0.5) * 1e-2;
  CHECK(std::abs(warmup_lr(10000, 512, 10000) - peak) < 1e-12);
  CHECK(warmup_lr(10000, 512, 10000) == doctest::Approx(4.419e-4).epsilon(1e-3));
  CHECK(std::abs(warmup_lr(1, 512, 10000) - std::pow(512.0, -0.5) * std::pow(10000.0, -1.5)) < 1e-12);
  CHECK(warmup_lr(1, 512, 10000) == doctest::Approx(4.419e-8).epsilon(1e-3));
  CHECK(std::abs(warmup_lr(40000, 512, 10000) - peak / 2) < 1e-12);
  CHECK_THROWS_AS(warmup_lr(0, 512, 10000), ContractError);
}

TEST_CASE("warmup_lr rises to its maximum at step == warmup then decays") {
  const std::uint64_t w = 400;
  double prev = 0;
  for (std::uint64_t s = 1; s <= w; ++s) {
    const double lr = warmup_lr(s, 64, w);
    CHECK(lr > prev);
    prev = lr;
  }
  for (std::uint64_t s = w + 1; s <= 4 * w; ++s) {
    const double lr = warmup_lr(s, 64, w);
    CHECK(lr < prev);
    prev = lr;
  }
}

TEST_CASE("finite_diff_grad examples") {
  Tensor<double> g = finite_diff_grad([](const Tensor<double>& x) { return x[0] * x[0]; }, Tensor<double>::vector({3.0}));
  CHECK(std::abs(g[0] - 6.0) < 1e-6);

  std::mt19937_64 rng(2);
  Tensor<double> x = random_tensor({5}, rng);
  Tensor<double> z = finite_diff_grad(
      [](const Tensor<double>& at) {
        Tape<double> t(false);
        return sum(softmax(t.constant(at), 0)).value()[0];
      },
      x);
  for (double v : z.data()) CHECK(std::abs(v) < 1e-6);

  CHECK_THROWS_AS(finite_diff_grad([](const Tensor<double>& at) { return at; }, Tensor<double>::vector({1.0, 2.0})),
                  ContractError);
}

// ---- gradient checks of every differentiable operator ----------------------

TEST_CASE("operator gradients match finite differences") {
  using Vars = std::vector<Var<double>>;
  struct Case {
    const char* name;
    std::vector<Shape> shapes;
    m2::testing::InputFn build;
  };
  const std::vector<std::int32_t> ids{2, 0, 2, 1};
  const std::vector<Case> cases{
      {"matmul", {{3, 4}, {4, 2}}, [](Tape<double>&, const Vars& v) { return weighted_sum(matmul(v[0], v[1])); }},
      {"matmul_nt", {{3, 4}, {5, 4}}, [](Tape<double>&, const Vars& v) { return weighted_sum(matmul_nt(v[0], v[1])); }},
      {"affine",
       {{3, 4}, {4, 2}, {1, 2}},
       [](Tape<double>&, const Vars& v) { return weighted_sum(affine(v[0], v[1], v[2])); }},
      {"add", {{2, 3}, {2, 3}}, [](Tape<double>&, const Vars& v) { return weighted_sum(add(v[0], v[1])); }},
      {"add_row", {{3, 4}, {1, 4}}, [](Tape<double>&, const Vars& v) { return weighted_sum(add_row(v[0], v[1])); }},
      {"sub", {{2, 3}, {2, 3}}, [](Tape<double>&, const Vars& v) { return weighted_sum(sub(v[0], v[1])); }},
      {"mul", {{2, 3}, {2, 3}}, [](Tape<double>&, const Vars& v) { return weighted_sum(mul(v[0], v[1])); }},
      {"scale", {{2, 3}}, [](Tape<double>&, const Vars& v) { return weighted_sum(scale(v[0], 0.37)); }},
      {"add_n",
       {{2, 3}, {2, 3}, {2, 3}},
       [](Tape<double>&, const Vars& v) { return weighted_sum(add_n<double>({v[0], v[1], v[2], v[0]})); }},
      {"relu", {{3, 5}}, [](Tape<double>&, const Vars& v) { return weighted_sum(relu(v[0])); }},
      {"sigmoid", {{3, 5}}, [](Tape<double>&, const Vars& v) { return weighted_sum(sigmoid(v[0])); }},
      {"softmax_last", {{3, 5}}, [](Tape<double>&, const Vars& v) { return weighted_sum(softmax(v[0], 1)); }},
      {"softmax_axis0", {{3, 5}}, [](Tape<double>&, const Vars& v) { return weighted_sum(softmax(v[0], 0)); }},
      {"softmax_stacked",
       {{2, 3}, {2, 3}, {2, 3}},
       [](Tape<double>&, const Vars& v) { return weighted_sum(softmax(stack<double>({v[0], v[1], v[2]}), 0)); }},
      {"log_softmax", {{3, 5}}, [](Tape<double>&, const Vars& v) { return weighted_sum(log_softmax(v[0])); }},
      {"layer_norm",
       {{3, 6}, {1, 6}, {1, 6}},
       [](Tape<double>&, const Vars& v) { return weighted_sum(layer_norm(v[0], v[1], v[2])); }},
      {"concat_cols",
       {{3, 2}, {3, 4}},
       [](Tape<double>&, const Vars& v) { return weighted_sum(concat_cols<double>({v[0], v[1]})); }},
      {"concat_rows",
       {{2, 3}, {4, 3}},
       [](Tape<double>&, const Vars& v) { return weighted_sum(concat_rows<double>({v[0], v[1]})); }},
      {"slice_rows", {{5, 3}}, [](Tape<double>&, const Vars& v) { return weighted_sum(slice_rows(v[0], 1, 4)); }},
      {"stack_select",
       {{2, 3}, {2, 3}},
       [](Tape<double>&, const Vars& v) { return weighted_sum(select(stack<double>({v[0], v[1]}), 1)); }},
      {"gather_rows",
       {{3, 4}},
       [ids](Tape<double>&, const Vars& v) { return weighted_sum(gather_rows(v[0], ids)); }},
      {"sum", {{3, 4}}, [](Tape<double>&, const Vars& v) { return sum(mul(v[0], v[0])); }},
      {"pick_weighted_sum",
       {{4, 3}},
       [ids](Tape<double>&, const Vars& v) { return pick_weighted_sum(v[0], ids, {0.5, -1.0, 2.0, 0.25}); }},
  };
  for (const Case& c : cases) {
    CAPTURE(c.name);
    for (int seed = 0; seed < kSeeds; ++seed) {
      std::mt19937_64 rng(1000 + seed);
      std::vector<Tensor<double>> inputs;
      for (const Shape& s : c.shapes) inputs.push_back(random_tensor(s, rng, -2, 2));
      const double err = input_gradient_error(c.build, inputs);
      CAPTURE(seed);
      CHECK(err < kGradTol);
    }
  }
}

TEST_CASE("dropout: inverted scaling, identity at keep 1, gradient through the mask") {
  std::mt19937_64 rng(3);
  Tape<double> t;
  Tensor<double> ones({200, 50}, 1.0);
  Var<double> x = t.variable(ones);
  Var<double> y = dropout(x, 0.9, rng);
  std::size_t kept = 0;
  for (double v : y.value().data()) {
    CHECK((v == 0.0 || std::abs(v - 1 / 0.9) < 1e-15));
    kept += v != 0.0;
  }
  CHECK(std::abs(double(kept) / 10000.0 - 0.9) < 0.02);
  t.backward(sum(y));
  CHECK(t.grad(x) == y.value());
  Tape<double> t2(false);
  CHECK(dropout(t2.constant(ones), 1.0, rng).value() == ones);
}

TEST_CASE("backward names the op that produced a non-finite gradient") {
  Tape<double> t;
  Var<double> x = t.variable(Tensor<double>::vector({1.0, 2.0}));
  Var<double> y = scale(x, 2.0);
  try {
    t.backward(sum(y), std::numeric_limits<double>::infinity());
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("sum") != std::string::npos);
  }
}

TEST_CASE("gather_rows rejects out-of-range ids") {
  Tape<double> t(false);
  Var<double> table = t.constant(Tensor<double>::matrix(3, 2));
  CHECK_THROWS_AS(gather_rows(table, {0, 3}), InputError);
  CHECK_THROWS_AS(gather_rows(table, {-1}), InputError);
}

TEST_CASE("shape errors on mismatched operands") {
  Tape<double> t(false);
  Var<double> a = t.constant(Tensor<double>::matrix(2, 3));
  Var<double> b = t.constant(Tensor<double>::matrix(2, 2));
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST_CASE("checkpoint container round-trips bytes and rejects corruption") {
  ParamStore<float> store;
  store.add("a.w", init_tensor<float>(ParamSpec{InitKind::GlorotUniform, 3, 4, 0, 0, 0, 0, 9}));
  store.add("a.table", Tensor<float>::vector({1.5f, -0.0f, 3e-38f}), false);
  const auto path = (std::filesystem::temp_directory_path() / "m2_numerics_ckpt.bin").string();
  write_checkpoint(path, R"({"format":1})", store);
  Checkpoint ck = read_checkpoint(path);
  CHECK(ck.manifest == R"({"format":1})");
  CHECK(serialize_params(ck.params) == serialize_params(store));
  CHECK_FALSE(ck.params.at(1).trainable);

  {
    std::FILE* f = std::fopen(path.c_str(), "r+b");
    std::fputc('X', f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(read_checkpoint(path), FormatError);
  write_checkpoint(path, "{}", store);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 1);
  CHECK_THROWS_AS(read_checkpoint(path), FormatError);
  std::filesystem::remove(path);
}
