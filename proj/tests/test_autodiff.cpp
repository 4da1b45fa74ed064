#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <thread>
#include <vector>

#include "support.hpp"
#include "vralign/autodiff.hpp"
#include "vralign/gradcheck.hpp"
#include "vralign/params.hpp"
#include "vralign/rng.hpp"

using namespace vralign;
using testsupport::check_grads;
using testsupport::make_store;

TEST_CASE("loss gradient w.r.t. itself is one", "[autodiff]") {
  Tape t;
  Var x = t.leaf(NdArray::scalar(3.0));
  Var y = mul(x, x);
  t.backward(y);
  CHECK(y.grad().data[0] == 1.0);
  CHECK(x.grad().data[0] == 6.0);
}

TEST_CASE("repeated backward accumulates", "[autodiff]") {
  Tape t;
  Var x = t.leaf(NdArray::scalar(2.0));
  Var y = mul(x, x);
  t.backward(y);
  CHECK(x.grad().data[0] == 4.0);
  t.backward(y);
  CHECK(x.grad().data[0] == 8.0);
  t.zero_grads();
  t.backward(y);
  CHECK(x.grad().data[0] == 4.0);
}

TEST_CASE("backward requires a scalar", "[autodiff]") {
  Tape t;
  Var x = t.leaf(NdArray({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(t.backward(x), ShapeError);
}

TEST_CASE("grad is zero before any backward", "[autodiff]") {
  Tape t;
  Var x = t.leaf(NdArray({3}, {1, 2, 3}));
  for (double g : x.grad().data) CHECK(g == 0.0);
}

TEST_CASE("constants do not collect gradients", "[autodiff]") {
  Tape t;
  Var c = t.constant(NdArray::scalar(5.0));
  Var x = t.leaf(NdArray::scalar(3.0));
  Var y = mul(c, x);
  t.backward(y);
  CHECK(x.grad().data[0] == 5.0);
  CHECK(c.grad().data[0] == 0.0);
}

TEST_CASE("elementwise values", "[autodiff]") {
  Tape t;
  Var a = t.leaf(NdArray({2}, {1.0, -2.0}));
  Var b = t.leaf(NdArray({2}, {3.0, 4.0}));
  CHECK(add(a, b).value().data == std::vector<double>{4.0, 2.0});
  CHECK(sub(a, b).value().data == std::vector<double>{-2.0, -6.0});
  CHECK(mul(a, b).value().data == std::vector<double>{3.0, -8.0});
  CHECK(div(a, b).value().data == std::vector<double>{1.0 / 3.0, -0.5});
  CHECK(scalar_mul(a, 2.0).value().data == std::vector<double>{2.0, -4.0});
  CHECK(relu(a).value().data == std::vector<double>{1.0, 0.0});
  CHECK(clamp_min(a, 1.5).value().data == std::vector<double>{1.5, 1.5});
}

TEST_CASE("elementwise shape mismatch throws", "[autodiff]") {
  Tape t;
  Var a = t.leaf(NdArray({2}, {1, 2}));
  Var b = t.leaf(NdArray({3}, {1, 2, 3}));
  CHECK_THROWS_AS(add(a, b), ShapeError);
}

TEST_CASE("division by zero throws", "[autodiff]") {
  Tape t;
  Var a = t.leaf(NdArray::scalar(1.0));
  Var z = t.leaf(NdArray::scalar(0.0));
  CHECK_THROWS_AS(div(a, z), DomainError);
}

TEST_CASE("elementwise gradients", "[autodiff]") {
  check_grads({{"a", {3, 4}}, {"b", {3, 4}}}, [](Tape&, const BoundParams& p) {
    Var s = add(p.at("a"), p.at("b"));
    Var d = sub(p.at("a"), p.at("b"));
    Var q = div(mul(s, d), p.at("b"));
    return sum(q);
  });
}

TEST_CASE("scalar_mul, clamp and sqrt gradients", "[autodiff]") {
  check_grads({{"a", {5}}}, [](Tape&, const BoundParams& p) {
    Var sq = mul(p.at("a"), p.at("a"));
    return sum(sqrt_elem(scalar_mul(clamp_min(sq, 0.02), 3.0)));
  });
}

TEST_CASE("relu subgradient at the kink is zero", "[autodiff]") {
  Tape t;
  Var x = t.leaf(NdArray({3}, {-1.0, 0.0, 2.0}));
  Var y = sum(relu(x));
  t.backward(y);
  CHECK(x.grad().data == std::vector<double>{0.0, 0.0, 1.0});
}

TEST_CASE("leaky_relu values and subgradients", "[autodiff]") {
  Tape t;
  Var x = t.leaf(NdArray({4}, {-2.0, -0.5, 0.0, 3.0}));
  Var y = leaky_relu(x, 0.1);
  CHECK(y.value().data == std::vector<double>{-0.2, -0.05, 0.0, 3.0});
  t.backward(sum(y));
  CHECK(x.grad().data == std::vector<double>{0.1, 0.1, 0.1, 1.0});

  check_grads({{"a", {6}}}, [](Tape&, const BoundParams& p) {
    return sum(leaky_relu(p.at("a"), 0.1));
  });
}

TEST_CASE("leaky_softplus values, limits, and gradients", "[autodiff]") {
  Tape t;
  Var x = t.leaf(NdArray({5}, {-40.0, -1.0, 0.0, 1.0, 40.0}));
  Var y = leaky_softplus(x, 0.1, 8.0);

  // Far negative: slope*x; far positive: x (softplus saturates to identity).
  CHECK(y.value().data[0] == Catch::Approx(-4.0).margin(1e-12));
  CHECK(y.value().data[4] == Catch::Approx(40.0).margin(1e-12));
  // At zero: (1-slope)*ln(2)/k.
  CHECK(y.value().data[2] == Catch::Approx(0.9 * std::log(2.0) / 8.0).epsilon(1e-12));
  // Generic point against the direct formula.
  CHECK(y.value().data[1] ==
        Catch::Approx(0.1 * -1.0 + 0.9 * std::log1p(std::exp(-8.0)) / 8.0).epsilon(1e-12));

  t.backward(sum(y));
  // Gradient slope + (1-slope)*sigmoid(k*x): 0.1 and 1.0 at the extremes,
  // the midpoint 0.55 at zero.
  CHECK(x.grad().data[0] == Catch::Approx(0.1).margin(1e-12));
  CHECK(x.grad().data[2] == Catch::Approx(0.55).epsilon(1e-12));
  CHECK(x.grad().data[4] == Catch::Approx(1.0).margin(1e-12));

  check_grads({{"a", {7}}}, [](Tape&, const BoundParams& p) {
    return sum(leaky_softplus(p.at("a"), 0.1, 8.0));
  });
}

TEST_CASE("instance_norm zero-scores columns over rows", "[autodiff]") {
  Tape t;
  // Column 0 has mean 2, population std 1; column 1 is constant.
  Var x = t.leaf(NdArray({4, 2}, {1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 2.0, 5.0}));
  Var y = instance_norm(x, 0.0);
  const std::vector<double> want = {
      -std::sqrt(2.0), 0.0, 0.0, 0.0, std::sqrt(2.0), 0.0, 0.0, 0.0};
  REQUIRE(y.value().data.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i)
    CHECK(y.value().data[i] == Catch::Approx(want[i]).margin(1e-12));

  // Per column: mean 0 and (for non-constant input) unit population variance.
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < 4; ++i) m += y.value().at(i, c) / 4.0;
    for (std::size_t i = 0; i < 4; ++i) {
      const double d = y.value().at(i, c) - m;
      v += d * d / 4.0;
    }
    CHECK(m == Catch::Approx(0.0).margin(1e-12));
    CHECK(v == Catch::Approx(c == 0 ? 1.0 : 0.0).margin(1e-12));
  }

  // Constant column: zero output, zero gradient through it.
  t.backward(sum(mul(y, y)));
  CHECK(x.grad().data[1] == 0.0);
  CHECK(x.grad().data[3] == 0.0);

  CHECK_THROWS_AS(instance_norm(t.leaf(NdArray({4}))), ShapeError);

  check_grads({{"a", {5, 3}}}, [](Tape&, const BoundParams& p) {
    // Weight the outputs so the gradient is not the trivial all-ones pattern,
    // which instance_norm's centering would null out.
    Tape& tp = p.at("a").tape();
    Var w = tp.constant(NdArray({5, 3}, {0.3, -1.2, 0.7, 1.9, 0.2, -0.4, 0.5, 1.1,
                                         -0.8, 0.1, 0.6, -1.5, 2.0, -0.3, 0.9}));
    return sum(mul(instance_norm(p.at("a")), w));
  });
}

TEST_CASE("matmul hand case", "[autodiff]") {
  Tape t;
  Var a = t.leaf(NdArray({2, 2}, {1, 2, 3, 4}));
  Var b = t.leaf(NdArray({2, 2}, {5, 6, 7, 8}));
  Var c = matmul(a, b);
  CHECK(c.value().data == std::vector<double>{19, 22, 43, 50});
  Var loss = sum(c);
  t.backward(loss);
  // d(sum(ab))/da = rowsums of b broadcast: [[11,15],[11,15]]
  CHECK(a.grad().data == std::vector<double>{11, 15, 11, 15});
  CHECK(b.grad().data == std::vector<double>{4, 4, 6, 6});
}

TEST_CASE("matmul inner dimension mismatch throws", "[autodiff]") {
  Tape t;
  Var a = t.leaf(NdArray({2, 3}));
  Var b = t.leaf(NdArray({2, 3}));
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul and transpose gradients", "[autodiff]") {
  check_grads({{"a", {3, 4}}, {"b", {4, 2}}}, [](Tape&, const BoundParams& p) {
    Var c = matmul(p.at("a"), p.at("b"));
    return sum(mul(c, c));
  });
  check_grads({{"a", {3, 4}}}, [](Tape&, const BoundParams& p) {
    Var at = transpose(p.at("a"));
    return sum(matmul(at, p.at("a")));
  });
}

TEST_CASE("transpose value", "[autodiff]") {
  Tape t;
  Var a = t.leaf(NdArray({2, 3}, {1, 2, 3, 4, 5, 6}));
  CHECK(transpose(a).value().shape == std::vector<std::size_t>{3, 2});
  CHECK(transpose(a).value().data == std::vector<double>{1, 4, 2, 5, 3, 6});
}

TEST_CASE("softmax rows sum to one and are shift invariant", "[autodiff]") {
  Tape t;
  Var a = t.leaf(NdArray({2, 3}, {0, 0, 0, 1000, 1001, 1002}));
  Var s = softmax_rows(a);
  for (std::size_t i = 0; i < 2; ++i) {
    double rowsum = 0.0;
    for (std::size_t j = 0; j < 3; ++j) rowsum += s.value().at(i, j);
    CHECK(std::abs(rowsum - 1.0) < 1e-12);
  }
  CHECK(std::abs(s.value().at(0, 0) - 1.0 / 3.0) < 1e-15);
  // Row 1 equals softmax([0,1,2]) despite the +1000 shift.
  const double z = 1.0 + std::exp(1.0) + std::exp(2.0);
  CHECK(std::abs(s.value().at(1, 0) - 1.0 / z) < 1e-12);
}

TEST_CASE("softmax gradient", "[autodiff]") {
  check_grads({{"a", {3, 5}}, {"w", {3, 5}}}, [](Tape&, const BoundParams& p) {
    return sum(mul(softmax_rows(p.at("a")), p.at("w")));
  });
}

TEST_CASE("add_rowvec broadcasts and reduces", "[autodiff]") {
  Tape t;
  Var a = t.leaf(NdArray({2, 2}, {1, 2, 3, 4}));
  Var v = t.leaf(NdArray({2}, {10, 20}));
  Var y = add_rowvec(a, v);
  CHECK(y.value().data == std::vector<double>{11, 22, 13, 24});
  t.backward(sum(y));
  CHECK(v.grad().data == std::vector<double>{2, 2});
  check_grads({{"a", {4, 3}}, {"v", {3}}}, [](Tape&, const BoundParams& p) {
    return sum(mul(add_rowvec(p.at("a"), p.at("v")), add_rowvec(p.at("a"), p.at("v"))));
  });
}

TEST_CASE("reductions", "[autodiff]") {
  Tape t;
  Var a = t.leaf(NdArray({2, 2}, {1, 2, 3, 4}));
  CHECK(sum(a).value().data[0] == 10.0);
  CHECK(mean(a).value().data[0] == 2.5);
  Var mr = mean_rows(a);
  CHECK(mr.value().shape == std::vector<std::size_t>{2});
  CHECK(mr.value().data == std::vector<double>{2, 3});
  check_grads({{"a", {4, 3}}}, [](Tape&, const BoundParams& p) {
    Var m = mean_rows(p.at("a"));
    return sum(mul(m, m));
  });
}

TEST_CASE("shape ops values and gradients", "[autodiff]") {
  Tape t;
  Var a = t.leaf(NdArray({2, 3}, {1, 2, 3, 4, 5, 6}));
  CHECK(reshape(a, {3, 2}).value().at(2, 1) == 6);
  CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);
  CHECK(row(a, 1).value().data == std::vector<double>{4, 5, 6});
  CHECK(slice_rows(a, 1, 2).value().data == std::vector<double>{4, 5, 6});
  Var b = t.leaf(NdArray({1, 3}, {7, 8, 9}));
  CHECK(concat_rows(a, b).value().data == std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Var r0 = t.leaf(NdArray({2}, {1, 2}));
  Var r1 = t.leaf(NdArray({2}, {3, 4}));
  CHECK(stack_rows({r0, r1}).value().data == std::vector<double>{1, 2, 3, 4});

  check_grads({{"a", {2, 3}}, {"b", {1, 3}}}, [](Tape&, const BoundParams& p) {
    Var c = concat_rows(p.at("a"), p.at("b"));
    Var r = reshape(c, {9});
    return sum(mul(r, r));
  });
  check_grads({{"a", {3, 4}}}, [](Tape&, const BoundParams& p) {
    Var top = row(p.at("a"), 0);
    Var rest = slice_rows(p.at("a"), 1, 3);
    return add(sum(mul(top, top)), sum(mul(rest, rest)));
  });
  check_grads({{"u", {4}}, {"v", {4}}}, [](Tape&, const BoundParams& p) {
    Var m = stack_rows({p.at("u"), p.at("v"), p.at("u")});
    return sum(mul(m, m));
  });
}

TEST_CASE("gather_rows accumulates duplicate ids", "[autodiff]") {
  Tape t;
  Var table = t.leaf(NdArray({3, 2}, {1, 2, 3, 4, 5, 6}));
  Var g = gather_rows(table, {0, 2, 0});
  CHECK(g.value().data == std::vector<double>{1, 2, 5, 6, 1, 2});
  t.backward(sum(g));
  CHECK(table.grad().data == std::vector<double>{2, 2, 0, 0, 1, 1});
  CHECK_THROWS_AS(gather_rows(table, {3}), ShapeError);

  check_grads({{"tab", {5, 3}}}, [](Tape&, const BoundParams& p) {
    Var g2 = gather_rows(p.at("tab"), {1, 1, 4, 0});
    return sum(mul(g2, g2));
  });
}

TEST_CASE("pool_halve averages 2x2x2 blocks", "[autodiff]") {
  Tape t;
  NdArray cube({8, 1}, {0, 1, 2, 3, 4, 5, 6, 7});
  Var a = t.leaf(cube);
  Var p = pool_halve(a, 2, 2, 2);
  CHECK(p.value().shape == std::vector<std::size_t>{1, 1});
  CHECK(p.value().data[0] == 3.5);
  t.backward(sum(p));
  for (double g : a.grad().data) CHECK(g == 0.125);

  CHECK_THROWS_AS(pool_halve(a, 2, 2, 1), ShapeError);

  check_grads({{"x", {64, 3}}}, [](Tape&, const BoundParams& p2) {
    Var pooled = pool_halve(p2.at("x"), 4, 4, 4);
    return sum(mul(pooled, pooled));
  });
}

TEST_CASE("cross entropy of uniform logits is log k", "[autodiff]") {
  Tape t;
  Var logits = t.leaf(NdArray({1, 2}, {0.0, 0.0}));
  Var ce = cross_entropy_logits(logits, {0});
  CHECK(std::abs(ce.value().data[0] - std::log(2.0)) < 1e-15);
  t.backward(ce);
  CHECK(std::abs(logits.grad().data[0] - (0.5 - 1.0)) < 1e-15);
  CHECK(std::abs(logits.grad().data[1] - 0.5) < 1e-15);
  CHECK_THROWS_AS(cross_entropy_logits(logits, {2}), ShapeError);
  CHECK_THROWS_AS(cross_entropy_logits(logits, {0, 1}), ShapeError);

  check_grads({{"l", {4, 3}}}, [](Tape&, const BoundParams& p) {
    return cross_entropy_logits(p.at("l"), {0, 2, 1, 1});
  });
}

TEST_CASE("cross entropy is stable for huge logits", "[autodiff]") {
  Tape t;
  Var logits = t.leaf(NdArray({1, 2}, {1000.0, -1000.0}));
  Var ce = cross_entropy_logits(logits, {0});
  CHECK(ce.value().data[0] == 0.0);
  CHECK(ce.value().all_finite());
}

TEST_CASE("cosine similarity geometry", "[autodiff]") {
  Tape t;
  Var ex = t.leaf(NdArray({2}, {1, 0}));
  Var ey = t.leaf(NdArray({2}, {0, 1}));
  Var ex2 = t.leaf(NdArray({2}, {2, 0}));
  Var nex = t.leaf(NdArray({2}, {-3, 0}));
  CHECK(std::abs(cosine_similarity(ex, ey).value().data[0]) < 1e-15);
  CHECK(std::abs(cosine_similarity(ex, ex2).value().data[0] - 1.0) < 1e-15);
  CHECK(std::abs(cosine_similarity(ex, nex).value().data[0] + 1.0) < 1e-15);
  CHECK(std::abs(cosine_distance(ex, nex).value().data[0] - 2.0) < 1e-15);

  Var zero = t.leaf(NdArray({2}, {0, 0}));
  CHECK_THROWS_AS(cosine_similarity(ex, zero), DomainError);
}

TEST_CASE("cosine similarity gradient", "[autodiff]") {
  check_grads({{"u", {6}}, {"v", {6}}}, [](Tape&, const BoundParams& p) {
    return cosine_similarity(p.at("u"), p.at("v"));
  });
}

TEST_CASE("tape-free cosine distance agrees with the tape version", "[autodiff]") {
  Rng r(3);
  for (int i = 0; i < 20; ++i) {
    NdArray u({5}), v({5});
    for (auto& x : u.data) x = r.normal();
    for (auto& x : v.data) x = r.normal();
    Tape t;
    const double taped =
        cosine_distance(t.constant(u), t.constant(v)).value().data[0];
    CHECK(std::abs(taped - cosine_distance_value(u, v)) < 1e-14);
  }
}

TEST_CASE("finite_diff_check restores parameter values", "[autodiff]") {
  ParamStore store = make_store({{"a", {3}}}, 5);
  const std::vector<double> before = store.at("a").value.data;
  finite_diff_check(
      [](Tape&, const BoundParams& p) { return sum(mul(p.at("a"), p.at("a"))); }, store);
  CHECK(store.at("a").value.data == before);
}

TEST_CASE("independent tapes run concurrently", "[autodiff]") {
  auto run = [](std::uint64_t seed) {
    ParamStore store = make_store({{"a", {6, 6}}, {"b", {6, 6}}}, seed);
    Tape t;
    BoundParams bound = bind_params(t, store);
    Var loss = sum(mul(softmax_rows(matmul(bound.at("a"), bound.at("b"))),
                       bound.at("a")));
    t.backward(loss);
    double acc = loss.value().data[0];
    for (double g : bound.at("a").grad().data) acc += g;
    return acc;
  };
  std::vector<double> serial(4);
  for (std::uint64_t i = 0; i < 4; ++i) serial[i] = run(100 + i);
  std::vector<double> parallel(4);
  std::vector<std::thread> pool;
  for (std::uint64_t i = 0; i < 4; ++i)
    pool.emplace_back([&parallel, &run, i]() { parallel[i] = run(100 + i); });
  for (auto& th : pool) th.join();
  CHECK(serial == parallel);
}
