#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lumos/errors.hpp"
#include "lumos/tape.hpp"
#include "oracles.hpp"

using namespace lumos;

namespace {

Param make_param(const std::string& name, std::vector<int64_t> shape, RngStream& rng,
                 double scale = 1.0) {
  Tensor t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-scale, scale);
  return Param(name, std::move(t));
}

}  // namespace

TEST_CASE("matmul forward matches hand-computed product") {
  Tape tape;
  Var a = tape.leaf(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var b = tape.leaf(Tensor({3, 2}, {7, 8, 9, 10, 11, 12}));
  Var c = tape.matmul(a, b);
  CHECK(tape.value(c).shape() == std::vector<int64_t>{2, 2});
  CHECK(tape.value(c)[0] == 58.0);
  CHECK(tape.value(c)[1] == 64.0);
  CHECK(tape.value(c)[2] == 139.0);
  CHECK(tape.value(c)[3] == 154.0);
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  Tape tape;
  Var a = tape.leaf(Tensor({2, 3}));
  Var b = tape.leaf(Tensor({2, 2}));
  CHECK_THROWS_AS(tape.matmul(a, b), shape_error);
}

TEST_CASE("conv2d unpadded forward matches hand-computed window sums") {
  Tape tape;
  Var x = tape.leaf(Tensor({1, 1, 3, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8}));
  Var w = tape.leaf(Tensor({1, 1, 2, 2}, {1, 1, 1, 1}));
  Var y = tape.conv2d(x, w, 1, 0);
  CHECK(tape.value(y).shape() == std::vector<int64_t>{1, 1, 2, 2});
  CHECK(tape.value(y)[0] == 8.0);
  CHECK(tape.value(y)[1] == 12.0);
  CHECK(tape.value(y)[2] == 20.0);
  CHECK(tape.value(y)[3] == 24.0);
}

TEST_CASE("conv2d padded forward matches hand-computed window sums") {
  Tape tape;
  Var x = tape.leaf(Tensor({1, 1, 3, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8}));
  Var w = tape.leaf(Tensor({1, 1, 2, 2}, {1, 1, 1, 1}));
  Var y = tape.conv2d(x, w, 1, 1);
  CHECK(tape.value(y).shape() == std::vector<int64_t>{1, 1, 4, 4});
  std::vector<double> want{0, 1, 3, 2, 3, 8, 12, 7, 9, 20, 24, 13, 6, 13, 15, 8};
  for (int i = 0; i < 16; ++i) CHECK(tape.value(y)[i] == want[i]);
}

TEST_CASE("conv2d rejects non-integral output extents") {
  Tape tape;
  Var x = tape.leaf(Tensor({1, 1, 3, 3}));
  Var w = tape.leaf(Tensor({1, 1, 2, 2}));
  CHECK_THROWS_AS(tape.conv2d(x, w, 2, 0), config_error);
}

TEST_CASE("gather and scatter_add are exact adjoints") {
  RngStream rng(7);
  Tensor x({4, 3});
  Tensor u({6, 3});
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-2, 2);
  for (int64_t i = 0; i < u.numel(); ++i) u[i] = rng.uniform(-2, 2);
  std::vector<int32_t> idx{5, 0, 2, 2};  // duplicate destination on purpose

  Tape t1;
  Var sx = t1.scatter_add_rows(t1.leaf(x), idx, 6);
  double lhs = 0.0;
  for (int64_t i = 0; i < u.numel(); ++i) lhs += t1.value(sx)[i] * u[i];

  Tape t2;
  Var gu = t2.gather_rows(t2.leaf(u), idx);
  double rhs = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) rhs += t2.value(gu)[i] * x[i];

  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("gather_rows rejects out-of-range indices") {
  Tape tape;
  Var x = tape.leaf(Tensor({3, 2}));
  CHECK_THROWS_AS(tape.gather_rows(x, {0, 3}), config_error);
  CHECK_THROWS_AS(tape.gather_rows(x, {-1}), config_error);
}

TEST_CASE("softmax rows sum to one and cross-entropy matches manual value") {
  Tape tape;
  Tensor z({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0});
  Var zv = tape.leaf(z);
  Var sm = tape.softmax_rows(zv);
  for (int64_t i = 0; i < 2; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < 3; ++j) s += tape.value(sm).at2(i, j);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  std::vector<int32_t> labels{1, 2};
  Var ce = tape.cross_entropy_logits(zv, labels);
  double want = 0.0;
  for (int64_t i = 0; i < 2; ++i) {
    double mx = std::max({z.at2(i, 0), z.at2(i, 1), z.at2(i, 2)});
    double lse = 0.0;
    for (int64_t j = 0; j < 3; ++j) lse += std::exp(z.at2(i, j) - mx);
    want += mx + std::log(lse) - z.at2(i, labels[i]);
  }
  want /= 2.0;
  CHECK(tape.value(ce)[0] == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("clip01 passes gradient only strictly inside the unit interval") {
  Param p("x", Tensor({4}, {-0.5, 0.3, 0.9, 1.7}));
  Tape tape;
  Var x = tape.param(p);
  Var y = tape.sum(tape.clip01(x));
  tape.backward(y);
  CHECK(p.grad[0] == 0.0);
  CHECK(p.grad[1] == 1.0);
  CHECK(p.grad[2] == 1.0);
  CHECK(p.grad[3] == 0.0);
}

TEST_CASE("duplicate operand accumulates both gradient contributions") {
  Param p("x", Tensor({3}, {2.0, -1.0, 0.5}));
  Tape tape;
  Var x = tape.param(p);
  Var y = tape.sum(tape.mul(x, x));
  tape.backward(y);
  for (int i = 0; i < 3; ++i) CHECK(p.grad[i] == doctest::Approx(2.0 * p.value[i]).epsilon(1e-12));
}

TEST_CASE("finite differences confirm gradients op by op") {
  RngStream seeder(20260815);

  auto check = [&](const std::string& label, auto&& build, std::vector<Param*> params) {
    for (Param* p : params) p->zero_grad();
    {
      Tape tape;
      Var loss = build(tape);
      tape.backward(loss);
    }
    auto forward = [&]() {
      Tape tape;
      Var loss = build(tape);
      return tape.value(loss)[0];
    };
    auto res = oracle::fd_check_params(forward, params);
    CAPTURE(label);
    CAPTURE(res.worst);
    CHECK(res.max_rel_err < 1e-6);
  };

  SUBCASE("matmul chain with bias and relu") {
    RngStream rng = seeder.split("fc");
    Param w1 = make_param("w1", {4, 5}, rng);
    Param b1 = make_param("b1", {5}, rng);
    Param w2 = make_param("w2", {5, 2}, rng);
    Tensor x({3, 4});
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-1, 1);
    auto build = [&](Tape& t) {
      Var h = t.relu(t.add_row_vec(t.matmul(t.leaf(x), t.param(w1)), t.param(b1)));
      Var out = t.matmul(h, t.param(w2));
      return t.mean(t.mul(out, out));
    };
    check("fc", build, {&w1, &b1, &w2});
  }

  SUBCASE("conv2d with channel bias and sigmoid") {
    RngStream rng = seeder.split("conv");
    Param w = make_param("w", {3, 2, 2, 2}, rng);
    Param b = make_param("b", {3}, rng);
    Tensor x({2, 2, 4, 4});
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-1, 1);
    auto build = [&](Tape& t) {
      Var y = t.sigmoid(t.add_channel_bias(t.conv2d(t.leaf(x), t.param(w), 1, 1), t.param(b)));
      return t.mean(t.mul(y, y));
    };
    check("conv", build, {&w, &b});
  }

  SUBCASE("strided conv2d") {
    RngStream rng = seeder.split("conv_s2");
    Param w = make_param("w", {2, 1, 2, 2}, rng);
    Tensor x({1, 1, 4, 4});
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-1, 1);
    auto build = [&](Tape& t) {
      Var y = t.conv2d(t.leaf(x), t.param(w), 2, 0);
      return t.sum(t.mul(y, y));
    };
    check("conv_s2", build, {&w});
  }

  SUBCASE("row and column scaling") {
    RngStream rng = seeder.split("scales");
    Param w = make_param("w", {4, 3}, rng);
    Param vr = make_param("vr", {4}, rng);
    Param vc = make_param("vc", {3}, rng);
    auto build = [&](Tape& t) {
      Var s = t.scale_cols(t.scale_rows(t.param(w), t.param(vr)), t.param(vc));
      return t.sum(t.mul(s, s));
    };
    check("scales", build, {&w, &vr, &vc});
  }

  SUBCASE("softmax attention block") {
    RngStream rng = seeder.split("attn");
    Param q = make_param("q", {3, 4}, rng);
    Param k = make_param("k", {3, 4}, rng);
    Param v = make_param("v", {3, 4}, rng);
    auto build = [&](Tape& t) {
      Var scores = t.affine(t.matmul(t.param(q), t.transpose(t.param(k))), 0.5, 0.0);
      Var attn = t.matmul(t.softmax_rows(scores), t.param(v));
      return t.mean(t.mul(attn, attn));
    };
    check("attn", build, {&q, &k, &v});
  }

  SUBCASE("gather scatter concat slice pipeline") {
    RngStream rng = seeder.split("indexing");
    Param e = make_param("e", {5, 4}, rng);
    auto build = [&](Tape& t) {
      Var ev = t.param(e);
      Var g = t.gather_rows(ev, {0, 2, 2, 4});
      Var s = t.scatter_add_rows(g, {1, 0, 1, 2}, 3);
      Var c = t.concat_axis({s, t.affine(s, 2.0, 0.1)}, 1);
      Var sl = t.slice_cols(c, 2, 4);
      return t.mean(t.mul(sl, sl));
    };
    check("indexing", build, {&e});
  }

  SUBCASE("elementwise transcendental chain") {
    RngStream rng = seeder.split("elem");
    Param a = make_param("a", {6}, rng, 0.5);
    auto build = [&](Tape& t) {
      Var av = t.param(a);
      Var y = t.log(t.affine(t.sigmoid(av), 1.0, 0.5));
      Var z = t.exp(t.affine(y, 0.3, 0.0));
      return t.mean(t.mul(z, z));
    };
    check("elem", build, {&a});
  }

  SUBCASE("scale_by_scalar couples tensor and scalar operand") {
    RngStream rng = seeder.split("sbs");
    Param x = make_param("x", {4}, rng);
    Param s = make_param("s", {1}, rng);
    auto build = [&](Tape& t) {
      Var y = t.scale_by_scalar(t.param(x), t.affine(t.param(s), 1.0, 1.0));
      return t.sum(t.mul(y, y));
    };
    check("sbs", build, {&x, &s});
  }

  SUBCASE("cross entropy logits") {
    RngStream rng = seeder.split("ce");
    Param z = make_param("z", {4, 3}, rng);
    std::vector<int32_t> labels{0, 2, 1, 2};
    auto build = [&](Tape& t) { return t.cross_entropy_logits(t.param(z), labels); };
    check("ce", build, {&z});
  }

  SUBCASE("reshape round trip") {
    RngStream rng = seeder.split("reshape");
    Param x = make_param("x", {2, 6}, rng);
    auto build = [&](Tape& t) {
      Var y = t.reshape(t.param(x), {3, 4});
      return t.mean(t.mul(y, y));
    };
    check("reshape", build, {&x});
  }
}

TEST_CASE("backward requires a scalar root") {
  Param p("x", Tensor({2, 2}, {1, 2, 3, 4}));
  Tape tape;
  Var x = tape.param(p);
  CHECK_THROWS_AS(tape.backward(x), config_error);
}

TEST_CASE("backward twice on one tape is rejected") {
  Param p("x", Tensor({2}, {1, 2}));
  Tape tape;
  Var loss = tape.sum(tape.param(p));
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), config_error);
}

TEST_CASE("non-finite forward values raise numeric errors with op context") {
  Tape tape;
  Var big = tape.leaf(Tensor({1}, {800.0}));
  try {
    tape.exp(big);  // exp(800) overflows to inf
    FAIL("expected numeric_error");
  } catch (const numeric_error& e) {
    CHECK(std::string(e.what()).find("exp") != std::string::npos);
  }
}

TEST_CASE("log rejects non-positive inputs") {
  Tape tape;
  Var x = tape.leaf(Tensor({2}, {0.5, -1.0}));
  CHECK_THROWS_AS(tape.log(x), numeric_error);
}

TEST_CASE("uniform_sample draws are reproducible and stop gradients") {
  RngStream r1(5), r2(5);
  Tape t1, t2;
  Var u1 = t1.uniform_sample({8}, 0.05, 0.95, r1);
  Var u2 = t2.uniform_sample({8}, 0.05, 0.95, r2);
  for (int64_t i = 0; i < 8; ++i) {
    CHECK(t1.value(u1)[i] == t2.value(u2)[i]);
    CHECK(t1.value(u1)[i] >= 0.05);
    CHECK(t1.value(u1)[i] < 0.95);
  }

  Param p("x", Tensor({8}, std::vector<double>(8, 1.0)));
  RngStream r3(9);
  Tape t3;
  Var loss = t3.sum(t3.mul(t3.param(p), t3.uniform_sample({8}, 0.05, 0.95, r3)));
  t3.backward(loss);
  // Gradient flows to p but the sample itself is a constant leaf.
  CHECK(p.grad[0] != 0.0);
}
