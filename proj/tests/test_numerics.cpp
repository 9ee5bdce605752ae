#include <doctest.h>

#include <cmath>
#include <thread>

#include "helpers.hpp"
#include "ipat/tape.hpp"

using namespace ipat;
using ipat::test::jacobian_by_vjp;
using ipat::test::random_tensor;

namespace {

// Compares the vjp Jacobian of `model` at x with central differences.
void check_against_fd(const TapedFunction& model, const Tensor& x, double tol = 1e-5) {
  auto [y, tape] = forward_taped(model, x);
  const Tensor analytic = jacobian_by_vjp(tape, tape.marker("output"), tape.marker("input"));
  const Tensor numeric =
      finite_difference_jacobian([&](const Tensor& z) { return forward_taped(model, z).first; }, x, 1e-4);
  CHECK(relative_error(analytic.data(), numeric.data()) < tol);
}

}  // namespace

TEST_CASE("forward_taped on trivial models") {
  auto [y, tape] = forward_taped([](Tape&, VarId x) { return x; }, Tensor::vector({1.0, 2.0}));
  CHECK(y == Tensor::vector({1.0, 2.0}));
  CHECK(tape.size() == 1);
  CHECK(tape.has_marker("input"));
  CHECK(tape.has_marker("output"));

  Tensor w({1, 1}, 2.0);
  Tensor b({1}, 1.0);
  auto [y2, tape2] = forward_taped([&](Tape& t, VarId x) { return t.linear(x, {&w}, {&b}); }, Tensor::vector({3.0}));
  CHECK(y2[0] == 7.0);
}

TEST_CASE("vjp on analytic scalar maps") {
  auto [y, tape] = forward_taped([](Tape& t, VarId x) { return t.scale(x, 3.0); }, Tensor::vector({0.7}));
  CHECK(tape.vjp("output", "input", Tensor::vector({1.0}))[0] == doctest::Approx(3.0).epsilon(1e-15));

  auto [y2, tape2] = forward_taped([](Tape& t, VarId x) { return t.mul(x, x); }, Tensor::vector({2.0}));
  CHECK(y2[0] == 4.0);
  CHECK(tape2.vjp("output", "input", Tensor::vector({1.0}))[0] == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("vjp errors") {
  auto [y, tape] = forward_taped([](Tape& t, VarId x) { return t.tanh(x); }, Tensor::vector({0.1, 0.2}));
  CHECK_THROWS_AS(tape.vjp("output", "nope", Tensor::vector({1.0, 1.0})), Error);
  CHECK_THROWS_AS(tape.vjp("output", "input", Tensor::vector({1.0})), ShapeError);
  CHECK_THROWS_AS(tape.vjp("input", "output", Tensor::vector({1.0, 1.0})), Error);
}

TEST_CASE("finite_difference_jacobian on linear maps") {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({4}, rng);
  const Tensor eye = finite_difference_jacobian([](const Tensor& z) { return z; }, x, 1e-3);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 4; ++c) CHECK(eye.at(r, c) == doctest::Approx(r == c ? 1.0 : 0.0).epsilon(1e-12));
  }
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor j = finite_difference_jacobian(
      [&](const Tensor& z) {
        Tensor out({3});
        for (std::size_t r = 0; r < 3; ++r) out[r] = dot(a.row(r), z.data());
        return out;
      },
      x, 1e-2);
  CHECK(max_abs(std::vector<double>{relative_error(j.data(), a.data())}) < 1e-9);
  CHECK_THROWS(finite_difference_jacobian([](const Tensor& z) { return z; }, x, 0.0));
}

TEST_CASE("every primitive agrees with finite differences") {
  std::mt19937_64 rng(11);
  const Tensor x = random_tensor({6}, rng);
  const Tensor w = random_tensor({4, 6}, rng, 0.5);
  const Tensor b = random_tensor({4}, rng, 0.5);
  const Tensor g = random_tensor({6}, rng);
  const Tensor s = random_tensor({6}, rng);
  const Tensor table = random_tensor({5, 6}, rng);
  const Tensor other = random_tensor({6}, rng);

  SUBCASE("linear and row windows") {
    check_against_fd([&](Tape& t, VarId v) { return t.linear(v, {&w}, {&b}); }, x);
    check_against_fd([&](Tape& t, VarId v) { return t.linear(v, {&w}, {&b}, 1, 2); }, x);
  }
  SUBCASE("elementwise") {
    check_against_fd([](Tape& t, VarId v) { return t.gelu(v); }, x);
    check_against_fd([](Tape& t, VarId v) { return t.tanh(v); }, x);
    check_against_fd([](Tape& t, VarId v) { return t.mul(v, t.tanh(v)); }, x);
    check_against_fd([&](Tape& t, VarId v) { return t.add(v, t.leaf(other)); }, x);
    check_against_fd([](Tape& t, VarId v) { return t.copy(t.scale(v, -0.3)); }, x);
  }
  SUBCASE("softmax") { check_against_fd([](Tape& t, VarId v) { return t.softmax(v); }, x); }
  SUBCASE("layer norm") { check_against_fd([&](Tape& t, VarId v) { return t.layer_norm(v, {&g}, {&s}); }, x); }
  SUBCASE("embedding and position rows") {
    check_against_fd([&](Tape& t, VarId v) { return t.add(v, t.embedding({&table}, 3)); }, x);
    check_against_fd([&](Tape& t, VarId v) { return t.add_param_row(v, {&table}, 2); }, x);
  }
  SUBCASE("attention pieces") {
    // Queries, keys and values all depend on the input.
    check_against_fd(
        [&](Tape& t, VarId v) {
          const VarId q = t.linear(v, {&w}, {&b}, 0, 2);
          std::vector<VarId> keys = {t.linear(v, {&w}, {&b}, 2, 2), t.linear(t.tanh(v), {&w}, {&b}, 0, 2),
                                     t.leaf(Tensor::vector({0.3, -0.2}))};
          const VarId p = t.softmax(t.scaled_dots(q, keys, 0.7));
          std::vector<VarId> values = {t.tanh(keys[0]), keys[1], t.scale(q, 2.0)};
          return t.concat(std::vector<VarId>{t.weighted_sum(p, values), p});
        },
        x);
  }
  SUBCASE("qoi combination") {
    check_against_fd([](Tape& t, VarId v) { return t.linear_combo(t.gelu(v), {{1, 1.0}, {4, -1.0}}); }, x);
  }
}

TEST_CASE("zero blocks gradient") {
  auto [y, tape] = forward_taped([](Tape& t, VarId x) { return t.add(t.zero(x), t.scale(x, 2.0)); },
                                 Tensor::vector({1.0, -1.0}));
  CHECK(y == Tensor::vector({2.0, -2.0}));
  const Tensor g = tape.vjp("output", "input", Tensor::vector({1.0, 1.0}));
  CHECK(g == Tensor::vector({2.0, 2.0}));
}

TEST_CASE("vjp is linear in the cotangent") {
  std::mt19937_64 rng(5);
  const Tensor w = random_tensor({5, 5}, rng);
  const Tensor g = random_tensor({5}, rng);
  const Tensor s = random_tensor({5}, rng);
  auto [y, tape] = forward_taped(
      [&](Tape& t, VarId x) { return t.layer_norm(t.gelu(t.linear(x, {&w}, {})), {&g}, {&s}); },
      random_tensor({5}, rng));
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor c1 = random_tensor({5}, rng);
    const Tensor c2 = random_tensor({5}, rng);
    const double a = 1.7, b = -0.4;
    Tensor mix({5});
    for (std::size_t i = 0; i < 5; ++i) mix[i] = a * c1[i] + b * c2[i];
    const Tensor lhs = tape.vjp("output", "input", mix);
    const Tensor g1 = tape.vjp("output", "input", c1);
    const Tensor g2 = tape.vjp("output", "input", c2);
    Tensor rhs({5});
    for (std::size_t i = 0; i < 5; ++i) rhs[i] = a * g1[i] + b * g2[i];
    CHECK(relative_error(lhs.data(), rhs.data()) <= 1e-12);
  }
}

TEST_CASE("vjp composes through a full cut") {
  std::mt19937_64 rng(6);
  const Tensor w1 = random_tensor({4, 4}, rng);
  const Tensor w2 = random_tensor({4, 4}, rng);
  Tape tape;
  const VarId x = tape.leaf(random_tensor({4}, rng));
  const VarId m = tape.tanh(tape.linear(x, {&w1}, {}));
  const VarId u = tape.softmax(tape.add(tape.linear(m, {&w2}, {}), tape.gelu(m)));
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor c = random_tensor({4}, rng);
    const Tensor direct = tape.vjp(u, x, c);
    const Tensor chained = tape.vjp(m, x, tape.vjp(u, m, c));
    CHECK(relative_error(direct.data(), chained.data()) <= 1e-10);
  }
}

TEST_CASE("vjp without a connecting path is zero") {
  Tape tape;
  const VarId a = tape.leaf(Tensor::vector({1.0, 2.0}));
  const VarId b = tape.leaf(Tensor::vector({3.0, 4.0}));
  const VarId y = tape.tanh(b);
  CHECK(tape.vjp(y, a, Tensor::vector({1.0, 1.0})) == Tensor::vector({0.0, 0.0}));
}

TEST_CASE("vjp_many matches separate vjps") {
  std::mt19937_64 rng(8);
  const Tensor w = random_tensor({3, 3}, rng);
  Tape tape;
  const VarId x = tape.leaf(random_tensor({3}, rng));
  const VarId h1 = tape.tanh(tape.linear(x, {&w}, {}));
  const VarId h2 = tape.gelu(x);
  const VarId y = tape.softmax(tape.add(tape.linear(h1, {&w}, {}), tape.mul(h2, h1)));
  const Tensor c = random_tensor({3}, rng);
  const std::vector<VarId> lowers = {x, h1, h2};
  const auto many = tape.vjp_many(y, lowers, c);
  for (std::size_t i = 0; i < lowers.size(); ++i) CHECK(many[i] == tape.vjp(y, lowers[i], c));
}

TEST_CASE("concurrent vjps on one tape") {
  std::mt19937_64 rng(9);
  const Tensor w = random_tensor({8, 8}, rng);
  auto [y, tape] =
      forward_taped([&](Tape& t, VarId x) { return t.gelu(t.linear(t.tanh(x), {&w}, {})); }, random_tensor({8}, rng));
  const Tensor c = random_tensor({8}, rng);
  const Tensor expected = tape.vjp("output", "input", c);
  std::vector<Tensor> results(4);
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < results.size(); ++i) {
    threads.emplace_back([&, i] {
      for (int r = 0; r < 50; ++r) results[i] = tape.vjp("output", "input", c);
    });
  }
  for (auto& t : threads) t.join();
  for (const Tensor& r : results) CHECK(r == expected);
}

TEST_CASE("non-finite values are reported with the last node name") {
  Tape tape;
  const VarId x = tape.leaf(Tensor::vector({1e200}));
  tape.mark("big", x);
  try {
    tape.mul(x, x);
    FAIL("expected a NumericsError");
  } catch (const NumericsError& e) {
    CHECK(std::string(e.what()).find("big") != std::string::npos);
  }
  CHECK_THROWS_AS(forward_taped([](Tape&, VarId x) { return x; }, Tensor::vector({std::nan("")})), NumericsError);
}

TEST_CASE("markers are unique") {
  Tape tape;
  const VarId x = tape.leaf(Tensor::vector({1.0}));
  tape.mark("x", x);
  CHECK_THROWS_AS(tape.mark("x", x), Error);
  CHECK_THROWS_AS(tape.marker("y"), Error);
}

TEST_CASE("float32 precision rounds every op") {
  const Tensor x = Tensor::vector({0.1, 1.0 / 3.0});
  auto [y64, t64] = forward_taped([](Tape& t, VarId v) { return t.scale(v, 1.0); }, x, Precision::float64);
  auto [y32, t32] = forward_taped([](Tape& t, VarId v) { return t.scale(v, 1.0); }, x, Precision::float32);
  CHECK(y64 == x);
  CHECK(y32[0] == static_cast<double>(static_cast<float>(0.1)));
  CHECK(parse_precision("float32") == Precision::float32);
  CHECK_THROWS_AS(parse_precision("half"), Error);
}
