#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "lumos/errors.hpp"
#include "lumos/layers.hpp"
#include "oracles.hpp"

using namespace lumos;

namespace {

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(), static_cast<size_t>(a.numel()) * sizeof(double)) == 0;
}

Tensor random_tensor(std::vector<int64_t> shape, uint64_t seed, double lo = -1.0,
                     double hi = 1.0) {
  RngStream rng(seed);
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// log_alpha at +/-40 saturates the deterministic gate to exactly 1 / 0 after
// the clip, in both train and eval modes.
constexpr double kOpen = 40.0;
constexpr double kClosed = -40.0;

GatedFC make_fc(int64_t n, int64_t k, uint64_t seed, const std::string& act = "relu") {
  GatedFC l;
  l.W = Param("fc/W", random_tensor({n, k}, seed));
  l.b = Param("fc/b", random_tensor({k}, seed + 1));
  RngStream grng(seed + 2);
  l.gate = GateVector("fc/gate", n, GateHyper{}, grng);
  l.activation = act;
  return l;
}

GatedConv2D make_conv(int64_t D, int64_t C, int64_t kh, int64_t kw, uint64_t seed,
                      const std::string& act = "relu") {
  GatedConv2D l;
  l.W = Param("conv/W", random_tensor({D, C, kh, kw}, seed));
  l.b = Param("conv/b", random_tensor({D}, seed + 1));
  RngStream grng(seed + 2);
  l.gate = GateVector("conv/gate", D, GateHyper{}, grng);
  l.activation = act;
  return l;
}

void set_gate(GateVector& g, double v) {
  for (int64_t i = 0; i < g.size(); ++i) g.log_alpha.value[i] = v;
}

double eval_gate_value(double log_alpha, const GateHyper& h) {
  double s = oracle::sigmoid(log_alpha);
  double z = s * (h.zeta - h.gamma) + h.gamma;
  return std::min(1.0, std::max(0.0, z));
}

}  // namespace

TEST_CASE("fc with open gates matches the ungated layer bit for bit") {
  GatedFC gated = make_fc(6, 4, 11);
  set_gate(gated.gate, kOpen);
  GatedFC plain = make_fc(6, 4, 11);
  plain.gate.enabled = false;
  Tensor x = random_tensor({3, 6}, 99);

  for (GateMode mode : {GateMode::kEval, GateMode::kTrain}) {
    Tape t;
    RngStream noise(5);
    Var a = fc_forward(t, gated, t.leaf(x), mode, &noise);
    Var b = fc_forward(t, plain, t.leaf(x), mode, &noise);
    CHECK(bit_equal(t.value(a), t.value(b)));
  }
}

TEST_CASE("closed fc gate screens the corresponding input column") {
  GatedFC l = make_fc(6, 4, 12);
  set_gate(l.gate, kOpen);
  l.gate.log_alpha.value[2] = kClosed;
  Tensor x = random_tensor({3, 6}, 77);
  Tensor x2 = x;
  for (int64_t r = 0; r < 3; ++r) x2.at2(r, 2) += 1000.0 * (r + 1);

  Tape t;
  Var a = fc_forward(t, l, t.leaf(x), GateMode::kEval, nullptr);
  Var b = fc_forward(t, l, t.leaf(x2), GateMode::kEval, nullptr);
  CHECK(bit_equal(t.value(a), t.value(b)));

  // control: with the gate open the same perturbation must show through
  l.gate.log_alpha.value[2] = kOpen;
  Tape t2;
  Var c = fc_forward(t2, l, t2.leaf(x), GateMode::kEval, nullptr);
  Var d = fc_forward(t2, l, t2.leaf(x2), GateMode::kEval, nullptr);
  CHECK_FALSE(bit_equal(t2.value(c), t2.value(d)));
}

TEST_CASE("uniform half gates equal the ungated layer on halved input") {
  GatedFC l = make_fc(6, 4, 13);
  set_gate(l.gate, 0.0);  // sigmoid(0)*1.2 - 0.1 = 0.5 exactly
  GatedFC plain = make_fc(6, 4, 13);
  plain.gate.enabled = false;

  Tensor x = random_tensor({4, 6}, 31);
  double m = eval_gate_value(0.0, l.gate.hyper);
  CHECK(m == doctest::Approx(0.5).epsilon(1e-15));
  Tensor xh = x;
  for (int64_t i = 0; i < xh.numel(); ++i) xh[i] *= m;

  Tape t;
  Var a = fc_forward(t, l, t.leaf(x), GateMode::kEval, nullptr);
  Var b = fc_forward(t, plain, t.leaf(xh), GateMode::kEval, nullptr);
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  for (int64_t i = 0; i < ta.numel(); ++i) CHECK(ta[i] == doctest::Approx(tb[i]).epsilon(1e-12));
}

TEST_CASE("conv with open gates matches the ungated conv bit for bit") {
  GatedConv2D gated = make_conv(3, 2, 3, 3, 21);
  set_gate(gated.gate, kOpen);
  GatedConv2D plain = make_conv(3, 2, 3, 3, 21);
  plain.gate.enabled = false;
  Tensor x = random_tensor({2, 2, 4, 4}, 55);

  Tape t;
  Var a = conv_forward(t, gated, t.leaf(x), GateMode::kEval, nullptr);
  Var b = conv_forward(t, plain, t.leaf(x), GateMode::kEval, nullptr);
  CHECK(bit_equal(t.value(a), t.value(b)));
}

TEST_CASE("closed conv gate leaves only the bias in its output channel") {
  GatedConv2D l = make_conv(3, 2, 3, 3, 22, "sigmoid");
  set_gate(l.gate, kOpen);
  l.gate.log_alpha.value[1] = kClosed;
  Tensor x = random_tensor({2, 2, 5, 5}, 56);

  Tape t;
  Var y = conv_forward(t, l, t.leaf(x), GateMode::kEval, nullptr);
  const Tensor& out = t.value(y);
  double expect = oracle::sigmoid(l.b.value[1]);
  for (int64_t n = 0; n < out.extent(0); ++n) {
    for (int64_t i = 0; i < out.extent(2); ++i) {
      for (int64_t j = 0; j < out.extent(3); ++j) {
        CHECK(out.at4(n, 1, i, j) == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("fractional conv gates scale pre-activation channels") {
  GatedConv2D l = make_conv(4, 2, 3, 3, 23, "identity");
  l.b.value.fill(0.0);
  RngStream arng(7);
  for (int64_t d = 0; d < 4; ++d) l.gate.log_alpha.value[d] = arng.uniform(-2.0, 2.0);
  GatedConv2D plain = make_conv(4, 2, 3, 3, 23, "identity");
  plain.b.value.fill(0.0);
  plain.gate.enabled = false;
  Tensor x = random_tensor({2, 2, 5, 5}, 57);

  Tape t;
  Var g = conv_forward(t, l, t.leaf(x), GateMode::kEval, nullptr);
  Var u = conv_forward(t, plain, t.leaf(x), GateMode::kEval, nullptr);
  const Tensor& tg = t.value(g);
  const Tensor& tu = t.value(u);
  for (int64_t n = 0; n < tg.extent(0); ++n) {
    for (int64_t d = 0; d < 4; ++d) {
      double m = eval_gate_value(l.gate.log_alpha.value[d], l.gate.hyper);
      for (int64_t i = 0; i < tg.extent(2); ++i) {
        for (int64_t j = 0; j < tg.extent(3); ++j) {
          CHECK(tg.at4(n, d, i, j) ==
                doctest::Approx(m * tu.at4(n, d, i, j)).epsilon(1e-12));
        }
      }
    }
  }
}

namespace {

GatedGIN make_gin(int64_t n, int64_t k, int64_t e, uint64_t seed) {
  GatedGIN l;
  l.W = Param("gin/W", random_tensor({n, k}, seed));
  l.eps_gin = Param("gin/eps", Tensor({1}));
  l.edge_embed = Param("gin/edge_embed", random_tensor({e, n}, seed + 1));
  RngStream grng(seed + 2);
  l.gate = GateVector("gin/gate", n, GateHyper{}, grng);
  l.activation = "identity";
  return l;
}

Tensor matmul_ref(const Tensor& a, const Tensor& b) {
  Tensor c({a.extent(0), b.extent(1)});
  for (int64_t i = 0; i < a.extent(0); ++i) {
    for (int64_t k = 0; k < a.extent(1); ++k) {
      for (int64_t j = 0; j < b.extent(1); ++j) {
        c.at2(i, j) += a.at2(i, k) * b.at2(k, j);
      }
    }
  }
  return c;
}

}  // namespace

TEST_CASE("gin with no edges reduces to the gated self term") {
  GatedGIN l = make_gin(3, 2, 2, 41);
  set_gate(l.gate, kOpen);
  GraphSample g;
  g.nodes = random_tensor({4, 3}, 58);

  Tape t;
  Var y = gin_forward(t, l, t.leaf(g.nodes), g, GateMode::kEval, nullptr);
  Tensor want = matmul_ref(g.nodes, l.W.value);
  const Tensor& got = t.value(y);
  REQUIRE(got.shape() == want.shape());
  for (int64_t i = 0; i < got.numel(); ++i) {
    CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("gin single node with self loop doubles the self features") {
  GatedGIN l = make_gin(3, 2, 2, 42);
  set_gate(l.gate, kOpen);
  l.edge_embed.value.fill(0.0);
  GraphSample g;
  g.nodes = random_tensor({1, 3}, 59);
  g.edge_feats = random_tensor({1, 2}, 60);
  g.edges = {{0, 0}};

  Tape t;
  Var y = gin_forward(t, l, t.leaf(g.nodes), g, GateMode::kEval, nullptr);
  Tensor doubled = g.nodes;
  for (int64_t i = 0; i < doubled.numel(); ++i) doubled[i] *= 2.0;
  Tensor want = matmul_ref(doubled, l.W.value);
  const Tensor& got = t.value(y);
  for (int64_t i = 0; i < got.numel(); ++i) {
    CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("closing a gin gate screens that unit at both application sites") {
  GatedGIN l = make_gin(3, 2, 2, 43);
  set_gate(l.gate, kOpen);
  l.gate.log_alpha.value[1] = kClosed;
  GraphSample g;
  g.nodes = random_tensor({3, 3}, 61);
  g.edge_feats = random_tensor({2, 2}, 62);
  g.edges = {{0, 1}, {2, 1}};

  GraphSample g2 = g;
  for (int64_t v = 0; v < 3; ++v) g2.nodes.at2(v, 1) += 500.0;

  Tape t;
  Var a = gin_forward(t, l, t.leaf(g.nodes), g, GateMode::kEval, nullptr);
  Var b = gin_forward(t, l, t.leaf(g2.nodes), g2, GateMode::kEval, nullptr);
  CHECK(bit_equal(t.value(a), t.value(b)));
}

TEST_CASE("gin rejects out-of-range edge endpoints") {
  GatedGIN l = make_gin(3, 2, 2, 44);
  GraphSample g;
  g.nodes = random_tensor({2, 3}, 63);
  g.edge_feats = random_tensor({1, 2}, 64);
  g.edges = {{0, 5}};
  Tape t;
  CHECK_THROWS_AS(gin_forward(t, l, t.leaf(g.nodes), g, GateMode::kEval, nullptr), config_error);
}

namespace {

GatedGCN make_gcn(int64_t n, int64_t d, int64_t e, uint64_t seed) {
  GatedGCN l;
  l.W1 = Param("gcn/W1", random_tensor({n, d}, seed));
  l.b1 = Param("gcn/b1", random_tensor({d}, seed + 1));
  l.W2 = Param("gcn/W2", random_tensor({e, d}, seed + 2));
  l.b2 = Param("gcn/b2", random_tensor({d}, seed + 3));
  l.root_embed = Param("gcn/root_embed", random_tensor({2, d}, seed + 4));
  RngStream grng(seed + 5);
  l.gate = GateVector("gcn/gate", d, GateHyper{}, grng);
  return l;
}

}  // namespace

TEST_CASE("gcn with empty adjacency keeps only the local relu term") {
  GatedGCN l = make_gcn(3, 4, 2, 71);
  set_gate(l.gate, kOpen);
  GraphSample g;
  g.nodes = random_tensor({3, 3}, 65);
  g.root = 1;

  Tape t;
  Var y = gcn_forward(t, l, t.leaf(g.nodes), g, g.root, GateMode::kEval, nullptr);
  const Tensor& got = t.value(y);

  Tensor h1 = matmul_ref(g.nodes, l.W1.value);
  for (int64_t v = 0; v < 3; ++v) {
    for (int64_t j = 0; j < 4; ++j) {
      double pre = h1.at2(v, j) + l.b1.value[j] + l.root_embed.value.at2(v == g.root ? 1 : 0, j);
      double want = std::max(0.0, pre);
      CHECK(got.at2(v, j) == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("gcn propagation on a two-node path forwards the neighbor features") {
  // identity W1, zero bias and edge transform, relu term suppressed by a
  // large negative root embedding: the output is the propagation term alone.
  GatedGCN l = make_gcn(3, 3, 2, 72);
  set_gate(l.gate, kOpen);
  for (int64_t i = 0; i < 9; ++i) l.W1.value[i] = (i % 4 == 0) ? 1.0 : 0.0;
  l.b1.value.fill(0.0);
  l.W2.value.fill(0.0);
  l.b2.value.fill(0.0);
  l.root_embed.value.fill(-1000.0);

  GraphSample g;
  g.nodes = random_tensor({2, 3}, 66);
  g.edges = {{0, 1}};
  g.edge_feats = random_tensor({1, 2}, 67);
  g.root = 0;

  Tape t;
  Var y = gcn_forward(t, l, t.leaf(g.nodes), g, g.root, GateMode::kEval, nullptr);
  const Tensor& got = t.value(y);
  for (int64_t j = 0; j < 3; ++j) {
    CHECK(got.at2(0, j) == g.nodes.at2(1, j));
    CHECK(got.at2(1, j) == g.nodes.at2(0, j));
  }
}

TEST_CASE("gcn open gates match the disabled-gate layer bit for bit") {
  GatedGCN gated = make_gcn(3, 4, 2, 73);
  set_gate(gated.gate, kOpen);
  GatedGCN plain = make_gcn(3, 4, 2, 73);
  plain.gate.enabled = false;

  GraphSample g;
  g.nodes = random_tensor({4, 3}, 68);
  g.edge_feats = random_tensor({3, 2}, 69);
  g.edges = {{0, 1}, {1, 2}, {3, 0}};
  g.root = 2;

  Tape t;
  Var a = gcn_forward(t, gated, t.leaf(g.nodes), g, g.root, GateMode::kEval, nullptr);
  Var b = gcn_forward(t, plain, t.leaf(g.nodes), g, g.root, GateMode::kEval, nullptr);
  CHECK(bit_equal(t.value(a), t.value(b)));
}

TEST_CASE("closing a gcn gate zeroes that output column in both terms") {
  GatedGCN l = make_gcn(3, 4, 2, 74);
  set_gate(l.gate, kOpen);
  l.gate.log_alpha.value[2] = kClosed;

  GraphSample g;
  g.nodes = random_tensor({3, 3}, 75);
  g.edge_feats = random_tensor({2, 2}, 76);
  g.edges = {{0, 1}, {1, 2}};
  g.root = 0;

  Tape t;
  Var y = gcn_forward(t, l, t.leaf(g.nodes), g, g.root, GateMode::kEval, nullptr);
  const Tensor& got = t.value(y);
  for (int64_t v = 0; v < 3; ++v) CHECK(got.at2(v, 2) == 0.0);
}

namespace {

GatedAttention make_attn(int64_t dm, int64_t proj, int64_t heads, uint64_t seed) {
  GatedAttention l;
  l.Wq = Param("attn/Wq", random_tensor({dm, proj}, seed));
  l.Wk = Param("attn/Wk", random_tensor({dm, proj}, seed + 1));
  l.Wv = Param("attn/Wv", random_tensor({dm, proj}, seed + 2));
  l.Wo = Param("attn/Wo", random_tensor({proj, dm}, seed + 3));
  RngStream g1(seed + 4), g2(seed + 5), g3(seed + 6);
  l.gate_q = GateVector("attn/gq", dm, GateHyper{}, g1);
  l.gate_k = GateVector("attn/gk", dm, GateHyper{}, g2);
  l.gate_v = GateVector("attn/gv", dm, GateHyper{}, g3);
  l.heads = heads;
  return l;
}

void set_attn_gates(GatedAttention& l, double v) {
  set_gate(l.gate_q, v);
  set_gate(l.gate_k, v);
  set_gate(l.gate_v, v);
}

}  // namespace

TEST_CASE("attention with open gates matches the ungated layer bit for bit") {
  for (int64_t heads : {1, 2}) {
    GatedAttention gated = make_attn(4, 6, heads, 81);
    set_attn_gates(gated, kOpen);
    GatedAttention plain = make_attn(4, 6, heads, 81);
    plain.gate_q.enabled = plain.gate_k.enabled = plain.gate_v.enabled = false;
    Tensor x = random_tensor({5, 4}, 82);

    Tape t;
    Var a = attn_forward(t, gated, t.leaf(x), GateMode::kEval, nullptr);
    Var b = attn_forward(t, plain, t.leaf(x), GateMode::kEval, nullptr);
    CHECK(bit_equal(t.value(a), t.value(b)));
    CHECK(t.value(a).shape() == std::vector<int64_t>{5, 4});
  }
}

TEST_CASE("closing every value gate zeroes the attention output") {
  GatedAttention l = make_attn(4, 6, 2, 83);
  set_attn_gates(l, kOpen);
  set_gate(l.gate_v, kClosed);
  Tensor x = random_tensor({3, 4}, 84);

  Tape t;
  Var y = attn_forward(t, l, t.leaf(x), GateMode::kEval, nullptr);
  const Tensor& got = t.value(y);
  for (int64_t i = 0; i < got.numel(); ++i) CHECK(got[i] == 0.0);
}

TEST_CASE("closed key gate screens an input feature from the key path") {
  // The query and value paths are blinded to feature 1 by zeroed weight rows,
  // so any remaining sensitivity to that feature runs through the keys.
  GatedAttention l = make_attn(4, 6, 1, 85);
  set_attn_gates(l, kOpen);
  for (int64_t j = 0; j < 6; ++j) {
    l.Wq.value.at2(1, j) = 0.0;
    l.Wv.value.at2(1, j) = 0.0;
  }
  Tensor x = random_tensor({3, 4}, 86);
  Tensor x2 = x;
  for (int64_t r = 0; r < 3; ++r) x2.at2(r, 1) += 10.0 * (r + 1);

  // control: key path open, the perturbation reaches the output
  Tape t0;
  Var c0 = attn_forward(t0, l, t0.leaf(x), GateMode::kEval, nullptr);
  Var c1 = attn_forward(t0, l, t0.leaf(x2), GateMode::kEval, nullptr);
  CHECK_FALSE(bit_equal(t0.value(c0), t0.value(c1)));

  l.gate_k.log_alpha.value[1] = kClosed;
  Tape t1;
  Var a = attn_forward(t1, l, t1.leaf(x), GateMode::kEval, nullptr);
  Var b = attn_forward(t1, l, t1.leaf(x2), GateMode::kEval, nullptr);
  CHECK(bit_equal(t1.value(a), t1.value(b)));
}

TEST_CASE("attention rejects head counts that do not divide the projection") {
  GatedAttention l = make_attn(4, 6, 4, 87);
  Tensor x = random_tensor({3, 4}, 88);
  Tape t;
  CHECK_THROWS_AS(attn_forward(t, l, t.leaf(x), GateMode::kEval, nullptr), config_error);
}

TEST_CASE("layer kind names round-trip") {
  for (LayerKind k : {LayerKind::kFc, LayerKind::kConv2d, LayerKind::kGin, LayerKind::kGcn,
                      LayerKind::kAttention, LayerKind::kEmbedding, LayerKind::kFlatten,
                      LayerKind::kConcat, LayerKind::kResidualBlock, LayerKind::kMeanPool}) {
    CHECK(layer_kind_from_name(layer_kind_name(k)) == k);
  }
  CHECK_THROWS_AS(layer_kind_from_name("pooly"), config_error);
}

namespace {

ModelGraph image_net() {
  ModelGraph m;
  m.input.regime = InputRegime::kImage;
  m.input.C = 2;
  m.input.H = 4;
  m.input.W = 4;
  LayerNode conv;
  conv.name = "c1";
  conv.kind = LayerKind::kConv2d;
  conv.filters = 3;
  conv.kh = conv.kw = 3;
  conv.pad = 1;
  LayerNode flat;
  flat.name = "flat";
  flat.kind = LayerKind::kFlatten;
  flat.inputs = {"c1"};
  LayerNode fc1;
  fc1.name = "fc1";
  fc1.kind = LayerKind::kFc;
  fc1.units = 5;
  fc1.inputs = {"flat"};
  LayerNode fc2;
  fc2.name = "out";
  fc2.kind = LayerKind::kFc;
  fc2.units = 1;
  fc2.activation = "identity";
  fc2.inputs = {"fc1"};
  m.nodes = {conv, flat, fc1, fc2};
  m.output = "out";
  return m;
}

}  // namespace

TEST_CASE("model graph shape inference and forward on the image regime") {
  ModelGraph m = image_net();
  m.finalize(2024);
  CHECK(m.find("c1").out_shape == std::vector<int64_t>{3, 4, 4});
  CHECK(m.find("flat").out_shape == std::vector<int64_t>{48});
  CHECK(m.output_shape() == std::vector<int64_t>{1});

  Tensor rows = random_tensor({3, 32}, 90);
  ForwardInput in;
  in.rows = &rows;
  Tape t;
  Var y = m.forward(t, in, GateMode::kEval, nullptr);
  CHECK(t.value(y).shape() == std::vector<int64_t>{3, 1});

  RngStream noise(4);
  Tape t2;
  Var y2 = m.forward(t2, in, GateMode::kTrain, &noise);
  CHECK(t2.value(y2).shape() == std::vector<int64_t>{3, 1});
}

TEST_CASE("model graph rejects malformed declarations") {
  {
    ModelGraph m = image_net();
    m.nodes[2].name = "c1";
    CHECK_THROWS_AS(m.finalize(1), config_error);
  }
  {
    ModelGraph m = image_net();
    m.nodes[1].inputs = {"nope"};
    CHECK_THROWS_AS(m.finalize(1), config_error);
  }
  {
    ModelGraph m = image_net();
    m.nodes[0].stride = 2;  // (4 + 2 - 3) % 2 != 0
    CHECK_THROWS_AS(m.finalize(1), config_error);
  }
  {
    ModelGraph m = image_net();
    m.output = "ghost";
    CHECK_THROWS_AS(m.finalize(1), config_error);
  }
  {
    ModelGraph m = image_net();
    m.finalize(1);
    CHECK_THROWS_AS(m.finalize(1), config_error);
  }
}

TEST_CASE("weight initialization is deterministic and independent of gating") {
  ModelGraph a = image_net();
  ModelGraph b = image_net();
  ModelGraph ungated = image_net();
  for (LayerNode& n : ungated.nodes) n.gated = false;
  a.finalize(7);
  b.finalize(7);
  ungated.finalize(7);

  auto pa = a.params();
  auto pb = b.params();
  auto pu = ungated.params();
  REQUIRE(pa.size() == pb.size());
  REQUIRE(pa.size() == pu.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(bit_equal(pa[i]->value, pb[i]->value));
    CHECK(bit_equal(pa[i]->value, pu[i]->value));
  }
  CHECK(a.gates().size() == 3);
  CHECK(ungated.gates().empty());

  ModelGraph c = image_net();
  c.finalize(8);
  CHECK_FALSE(bit_equal(c.params()[0]->value, pa[0]->value));
}

TEST_CASE("ids regime embeds columns and concatenates") {
  ModelGraph m;
  m.input.regime = InputRegime::kIds;
  m.input.id_cols = 2;
  m.input.vocab = 7;
  LayerNode e0;
  e0.name = "emb0";
  e0.kind = LayerKind::kEmbedding;
  e0.width = 3;
  e0.col = 0;
  LayerNode e1;
  e1.name = "emb1";
  e1.kind = LayerKind::kEmbedding;
  e1.width = 4;
  e1.col = 1;
  LayerNode cat;
  cat.name = "cat";
  cat.kind = LayerKind::kConcat;
  cat.inputs = {"emb0", "emb1"};
  LayerNode out;
  out.name = "out";
  out.kind = LayerKind::kFc;
  out.units = 2;
  out.activation = "identity";
  out.inputs = {"cat"};
  m.nodes = {e0, e1, cat, out};
  m.finalize(3);
  CHECK(m.find("cat").out_shape == std::vector<int64_t>{7});

  Tensor rows({2, 2}, {3.0, 0.0, 6.0, 5.0});
  ForwardInput in;
  in.rows = &rows;
  Tape t;
  Var y = m.forward(t, in, GateMode::kEval, nullptr);
  CHECK(t.value(y).shape() == std::vector<int64_t>{2, 2});

  Tensor bad({1, 2}, {7.0, 0.0});
  in.rows = &bad;
  Tape t2;
  CHECK_THROWS_AS(m.forward(t2, in, GateMode::kEval, nullptr), config_error);
}

TEST_CASE("tokens regime runs attention then mean pool per sample") {
  ModelGraph m;
  m.input.regime = InputRegime::kTokens;
  m.input.T = 3;
  m.input.d = 4;
  LayerNode at;
  at.name = "att";
  at.kind = LayerKind::kAttention;
  at.proj = 6;
  at.heads = 2;
  LayerNode mp;
  mp.name = "pool";
  mp.kind = LayerKind::kMeanPool;
  mp.inputs = {"att"};
  LayerNode out;
  out.name = "out";
  out.kind = LayerKind::kFc;
  out.units = 2;
  out.activation = "identity";
  out.inputs = {"pool"};
  m.nodes = {at, mp, out};
  m.finalize(9);
  CHECK(m.find("pool").out_shape == std::vector<int64_t>{4});

  Tensor rows = random_tensor({2, 12}, 91);
  ForwardInput in;
  in.rows = &rows;
  Tape t;
  Var y = m.forward(t, in, GateMode::kEval, nullptr);
  CHECK(t.value(y).shape() == std::vector<int64_t>{2, 2});
}

TEST_CASE("mean pool averages node rows in the graph regime") {
  ModelGraph m;
  m.input.regime = InputRegime::kGraph;
  m.input.node_dim = 3;
  m.input.edge_dim = 2;
  LayerNode g1;
  g1.name = "g1";
  g1.kind = LayerKind::kGin;
  g1.units = 4;
  LayerNode g2;
  g2.name = "g2";
  g2.kind = LayerKind::kGcn;
  g2.units = 5;
  g2.inputs = {"g1"};
  LayerNode mp;
  mp.name = "pool";
  mp.kind = LayerKind::kMeanPool;
  mp.inputs = {"g2"};
  LayerNode out;
  out.name = "out";
  out.kind = LayerKind::kFc;
  out.units = 1;
  out.activation = "identity";
  out.inputs = {"pool"};
  m.nodes = {g1, g2, mp, out};
  m.finalize(10);

  GraphSample g;
  g.nodes = random_tensor({4, 3}, 92);
  g.edge_feats = random_tensor({2, 2}, 93);
  g.edges = {{0, 1}, {2, 3}};
  g.root = 0;
  ForwardInput in;
  in.graph = &g;
  Tape t;
  Var y = m.forward(t, in, GateMode::kEval, nullptr);
  CHECK(t.value(y).shape() == std::vector<int64_t>{1, 1});

  // pooling check in isolation: mean over rows
  ModelGraph mp_only;
  mp_only.input.regime = InputRegime::kGraph;
  mp_only.input.node_dim = 3;
  mp_only.input.edge_dim = 2;
  LayerNode solo;
  solo.name = "pool";
  solo.kind = LayerKind::kMeanPool;
  mp_only.nodes = {solo};
  mp_only.finalize(11);
  Tape t2;
  Var p = mp_only.forward(t2, in, GateMode::kEval, nullptr);
  const Tensor& pv = t2.value(p);
  for (int64_t j = 0; j < 3; ++j) {
    double s = 0.0;
    for (int64_t v = 0; v < 4; ++v) s += g.nodes.at2(v, j);
    CHECK(pv.at2(0, j) == doctest::Approx(s / 4.0).epsilon(1e-12));
  }
}

TEST_CASE("residual block adds the branch to the skip path") {
  ModelGraph m;
  m.input.regime = InputRegime::kVector;
  m.input.dim = 5;
  LayerNode fc1;
  fc1.name = "fc1";
  fc1.kind = LayerKind::kFc;
  fc1.units = 6;
  LayerNode res;
  res.name = "res";
  res.kind = LayerKind::kResidualBlock;
  res.inputs = {"fc1"};
  LayerNode b1;
  b1.name = "res_fc1";
  b1.kind = LayerKind::kFc;
  b1.units = 4;
  LayerNode b2;
  b2.name = "res_fc2";
  b2.kind = LayerKind::kFc;
  b2.units = 6;
  b2.activation = "identity";
  res.branch = {b1, b2};
  LayerNode out;
  out.name = "out";
  out.kind = LayerKind::kFc;
  out.units = 1;
  out.activation = "identity";
  out.inputs = {"res"};
  m.nodes = {fc1, res, out};
  m.finalize(12);

  CHECK(m.find("res").out_shape == std::vector<int64_t>{6});
  CHECK(m.find("res_fc1").out_shape == std::vector<int64_t>{4});
  CHECK(m.gates().size() == 4);

  Tensor rows = random_tensor({2, 5}, 94);
  ForwardInput in;
  in.rows = &rows;
  Tape t;
  Var y = m.forward(t, in, GateMode::kEval, nullptr);
  CHECK(t.value(y).shape() == std::vector<int64_t>{2, 1});

  // branch ending at the wrong width cannot close the skip connection
  ModelGraph mm;
  mm.input.regime = InputRegime::kVector;
  mm.input.dim = 5;
  LayerNode f;
  f.name = "fc1";
  f.kind = LayerKind::kFc;
  f.units = 6;
  LayerNode r;
  r.name = "res";
  r.kind = LayerKind::kResidualBlock;
  r.inputs = {"fc1"};
  LayerNode inner;
  inner.name = "inner";
  inner.kind = LayerKind::kFc;
  inner.units = 7;
  r.branch = {inner};
  mm.nodes = {f, r};
  CHECK_THROWS_AS(mm.finalize(13), config_error);
}

TEST_CASE("total loss gradients match finite differences on a mixed network") {
  ModelGraph m = image_net();
  m.finalize(4242);
  Tensor rows = random_tensor({3, 32}, 95);
  Tensor targets = random_tensor({3, 1}, 96);
  const double lambda = 0.01;

  // populate grads once
  {
    Tape t;
    ForwardInput in;
    in.rows = &rows;
    Var pred = m.forward(t, in, GateMode::kEval, nullptr);
    Var err = t.sub(pred, t.leaf(targets));
    Var acc = t.mean(t.mul(err, err));
    LossBundle lb = total_loss(t, acc, m.gates(), lambda);
    for (Param* p : m.params()) p->zero_grad();
    for (GateVector* g : m.gates()) g->log_alpha.zero_grad();
    t.backward(lb.total);
  }

  auto forward = [&]() {
    Tape t;
    ForwardInput in;
    in.rows = &rows;
    Var pred = m.forward(t, in, GateMode::kEval, nullptr);
    Var err = t.sub(pred, t.leaf(targets));
    Var acc = t.mean(t.mul(err, err));
    LossBundle lb = total_loss(t, acc, m.gates(), lambda);
    return t.value(lb.total)[0];
  };

  std::vector<Param*> gate_params;
  for (GateVector* g : m.gates()) gate_params.push_back(&g->log_alpha);
  auto gres = oracle::fd_check_params(forward, gate_params, 1e-5);
  CHECK(gres.n_checked == 3 + 48 + 5);
  CHECK(gres.max_rel_err < 1e-4);

  // weights participate in the same sweep
  std::vector<Param*> some_weights = {m.params()[0], m.params()[1]};
  auto wres = oracle::fd_check_params(forward, some_weights, 1e-5);
  CHECK(wres.max_rel_err < 1e-4);
}

TEST_CASE("train mode forward is reproducible under a reseeded noise stream") {
  ModelGraph m = image_net();
  m.finalize(77);
  Tensor rows = random_tensor({2, 32}, 97);
  ForwardInput in;
  in.rows = &rows;

  Tape t1;
  RngStream n1(123);
  Var y1 = m.forward(t1, in, GateMode::kTrain, &n1);
  Tape t2;
  RngStream n2(123);
  Var y2 = m.forward(t2, in, GateMode::kTrain, &n2);
  CHECK(bit_equal(t1.value(y1), t2.value(y2)));

  Tape t3;
  RngStream n3(124);
  Var y3 = m.forward(t3, in, GateMode::kTrain, &n3);
  CHECK_FALSE(bit_equal(t1.value(y1), t3.value(y3)));
}
