#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <set>

#include "lumos/consistency.hpp"
#include "lumos/errors.hpp"
#include "oracles.hpp"

using namespace lumos;

namespace {

constexpr double kOpen = 40.0;
constexpr double kClosed = -40.0;

std::vector<int64_t> iota_mask(int64_t n) {
  std::vector<int64_t> v(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i)] = i;
  return v;
}

void keep_only(GateVector& g, const std::set<int64_t>& kept) {
  for (int64_t i = 0; i < g.size(); ++i) {
    g.log_alpha.value[i] = kept.count(i) ? kOpen : kClosed;
  }
}

Tensor random_rows(int64_t r, int64_t c, uint64_t seed) {
  RngStream rng(seed);
  Tensor t({r, c});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(), static_cast<size_t>(a.numel()) * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("conv2fc_map worked examples") {
  CHECK(conv2fc_map({0, 2}, 2, 2) == std::vector<int64_t>{0, 1, 2, 3, 8, 9, 10, 11});
  CHECK(conv2fc_map(iota_mask(64), 3, 2) == iota_mask(64 * 6));
  CHECK(conv2fc_map({}, 4, 4).empty());
  CHECK_THROWS_AS(conv2fc_map({0}, 0, 2), consistency_error);
}

TEST_CASE("conv2fc_map against brute-force flattening of a marked tensor") {
  for (int64_t C = 1; C <= 8; ++C) {
    for (int64_t h = 1; h <= 4; ++h) {
      for (int64_t w = 1; w <= 4; ++w) {
        for (uint32_t bits = 0; bits < (1u << C); ++bits) {
          std::vector<int64_t> mask;
          for (int64_t c = 0; c < C; ++c) {
            if (bits & (1u << c)) mask.push_back(c);
          }
          std::vector<int64_t> expect;
          for (int64_t c = 0; c < C; ++c) {
            if (!(bits & (1u << c))) continue;
            for (int64_t i = 0; i < h; ++i) {
              for (int64_t j = 0; j < w; ++j) expect.push_back(c * h * w + i * w + j);
            }
          }
          std::vector<int64_t> got = conv2fc_map(mask, w, h);
          REQUIRE(got == expect);
          REQUIRE(got.size() == mask.size() * static_cast<size_t>(w * h));
          for (size_t i = 1; i < got.size(); ++i) REQUIRE(got[i - 1] < got[i]);
        }
      }
    }
  }
}

TEST_CASE("concat_coordinate worked examples") {
  CHECK(concat_coordinate({0, 5}, 64, {1}) == std::vector<int64_t>{0, 5, 65});
  CHECK(concat_coordinate(iota_mask(64), 64, iota_mask(64)) == iota_mask(128));

  std::vector<int64_t> a = iota_mask(50);
  std::vector<int64_t> b = iota_mask(47);
  CHECK(concat_coordinate(a, 64, b).size() == 97);

  CHECK_THROWS_AS(concat_coordinate({70}, 64, {}), consistency_error);
}

TEST_CASE("concat_coordinate folds associatively across three inputs") {
  std::vector<int64_t> a{0, 3}, b{1}, c{0, 2};
  std::vector<int64_t> left = concat_coordinate(concat_coordinate(a, 4, b), 4 + 3, c);
  CHECK(left == std::vector<int64_t>{0, 3, 5, 7, 9});
}

TEST_CASE("share_embedding_mask returns the downstream rows unchanged") {
  std::vector<int64_t> rows = iota_mask(189);
  CHECK(share_embedding_mask(rows, 300) == rows);
  CHECK(share_embedding_mask(iota_mask(300), 300) == iota_mask(300));
  CHECK(share_embedding_mask({0, 7, 129}, 130) == std::vector<int64_t>{0, 7, 129});
  CHECK_THROWS_AS(share_embedding_mask({130}, 130), consistency_error);

  // two tables pruned independently by disjoint downstream segments
  std::vector<int64_t> node_rows{0, 2, 4};
  std::vector<int64_t> edge_rows{1, 3};
  CHECK(share_embedding_mask(node_rows, 5) == node_rows);
  CHECK(share_embedding_mask(edge_rows, 5) == edge_rows);
}

namespace {

ModelGraph conv_fc_net(int64_t filters = 4) {
  ModelGraph m;
  m.input.regime = InputRegime::kImage;
  m.input.C = 2;
  m.input.H = 3;
  m.input.W = 3;
  LayerNode conv;
  conv.name = "c1";
  conv.kind = LayerKind::kConv2d;
  conv.filters = filters;
  conv.kh = conv.kw = 2;
  LayerNode flat;
  flat.name = "flat";
  flat.kind = LayerKind::kFlatten;
  flat.inputs = {"c1"};
  LayerNode fc1;
  fc1.name = "fc1";
  fc1.kind = LayerKind::kFc;
  fc1.units = 5;
  fc1.inputs = {"flat"};
  LayerNode out;
  out.name = "out";
  out.kind = LayerKind::kFc;
  out.units = 2;
  out.activation = "identity";
  out.inputs = {"fc1"};
  m.nodes = {conv, flat, fc1, out};
  m.output = "out";
  return m;
}

}  // namespace

TEST_CASE("all gates open produce identity masks everywhere") {
  ModelGraph m = conv_fc_net();
  m.finalize(101);
  keep_only(m.find("c1").conv.gate, {0, 1, 2, 3});
  keep_only(m.find("fc1").fc.gate, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15});
  keep_only(m.find("out").fc.gate, {0, 1, 2, 3, 4});

  SnapshotMap snaps = snapshot_gates(m);
  MaskTable mt = propagate_masks(m, snaps);
  check_executable(m, mt);

  for (const auto& [name, lm] : mt.entries) {
    CHECK(lm.input_mask.size() == static_cast<size_t>(lm.in_extent));
    CHECK(lm.output_mask.size() == static_cast<size_t>(lm.out_extent));
  }
}

TEST_CASE("kept conv channels map onto the flattened fc rows exactly") {
  ModelGraph m = conv_fc_net();
  m.finalize(102);
  // conv output is 4 channels of 2x2; keep channels 0 and 2
  keep_only(m.find("c1").conv.gate, {0, 2});
  for (int64_t d = 0; d < 4; ++d) m.find("c1").conv.b.value[d] = -1.0;  // relu constant = 0
  // close fc rows inside surviving channels and inside dead ones alike
  keep_only(m.find("fc1").fc.gate, {0, 1, 5, 9, 10, 11});
  keep_only(m.find("out").fc.gate, {0, 1, 2, 3, 4});

  SnapshotMap snaps = snapshot_gates(m);
  MaskTable mt = propagate_masks(m, snaps);

  CHECK(mt.at("c1").output_mask == std::vector<int64_t>{0, 2});
  CHECK(mt.at("flat").output_mask == std::vector<int64_t>{0, 1, 2, 3, 8, 9, 10, 11});
  // the fc keeps the full image of the surviving channels, not only its own
  // open rows
  CHECK(mt.at("fc1").input_mask == std::vector<int64_t>{0, 1, 2, 3, 8, 9, 10, 11});
  CHECK(mt.at("fc1").output_mask == iota_mask(5));
  CHECK(mt.at("out").output_mask == iota_mask(2));

  remove_dead_blocks(m, mt, snaps);
  check_executable(m, mt);
}

TEST_CASE("downstream fc gates prune the producer's output columns") {
  ModelGraph m;
  m.input.regime = InputRegime::kVector;
  m.input.dim = 16;
  LayerNode fc1;
  fc1.name = "fc1";
  fc1.kind = LayerKind::kFc;
  fc1.units = 32;
  LayerNode fc2;
  fc2.name = "fc2";
  fc2.kind = LayerKind::kFc;
  fc2.units = 8;
  fc2.inputs = {"fc1"};
  m.nodes = {fc1, fc2};
  m.finalize(103);

  std::set<int64_t> first16;
  for (int64_t i = 0; i < 16; ++i) first16.insert(i);
  keep_only(m.find("fc1").fc.gate, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15});
  keep_only(m.find("fc2").fc.gate, first16);

  SnapshotMap snaps = snapshot_gates(m);
  MaskTable mt = propagate_masks(m, snaps);
  check_executable(m, mt);

  CHECK(mt.at("fc1").output_mask == iota_mask(16));
  CHECK(mt.at("fc2").input_mask == iota_mask(16));
  CHECK(mt.at("fc2").output_mask == iota_mask(8));
  CHECK(mt.at("input").output_mask == iota_mask(16));
}

TEST_CASE("input features survive only where the first gates keep them") {
  ModelGraph m;
  m.input.regime = InputRegime::kVector;
  m.input.dim = 6;
  LayerNode a;
  a.name = "a";
  a.kind = LayerKind::kFc;
  a.units = 3;
  LayerNode b;
  b.name = "b";
  b.kind = LayerKind::kFc;
  b.units = 3;
  LayerNode cat;
  cat.name = "cat";
  cat.kind = LayerKind::kConcat;
  cat.inputs = {"a", "b"};
  LayerNode out;
  out.name = "out";
  out.kind = LayerKind::kFc;
  out.units = 1;
  out.inputs = {"cat"};
  m.nodes = {a, b, cat, out};
  m.finalize(104);

  keep_only(m.find("a").fc.gate, {0, 2});
  keep_only(m.find("b").fc.gate, {1, 2});
  keep_only(m.find("out").fc.gate, {0, 1, 2, 3, 4, 5});

  SnapshotMap snaps = snapshot_gates(m);
  MaskTable mt = propagate_masks(m, snaps);
  check_executable(m, mt);

  // union of both demands; each fc zero-folds rows the sibling forced in
  CHECK(mt.at("input").output_mask == std::vector<int64_t>{0, 1, 2});
  CHECK(mt.at("a").input_mask == std::vector<int64_t>{0, 1, 2});
  CHECK(mt.at("b").input_mask == std::vector<int64_t>{0, 1, 2});
}

TEST_CASE("embedding tables are column-pruned by the downstream fc via concat") {
  ModelGraph m;
  m.input.regime = InputRegime::kIds;
  m.input.id_cols = 2;
  m.input.vocab = 9;
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
  out.inputs = {"cat"};
  m.nodes = {e0, e1, cat, out};
  m.finalize(105);

  keep_only(m.find("out").fc.gate, {0, 2, 4});
  SnapshotMap snaps = snapshot_gates(m);
  MaskTable mt = propagate_masks(m, snaps);
  check_executable(m, mt);

  CHECK(mt.at("emb0").output_mask == std::vector<int64_t>{0, 2});
  CHECK(mt.at("emb1").output_mask == std::vector<int64_t>{1});
  CHECK(mt.at("cat").output_mask == std::vector<int64_t>{0, 2, 4});
  CHECK(mt.at("out").input_mask == std::vector<int64_t>{0, 2, 4});
}

TEST_CASE("graph nets select node features through the first gin gate") {
  ModelGraph m;
  m.input.regime = InputRegime::kGraph;
  m.input.node_dim = 5;
  m.input.edge_dim = 2;
  LayerNode g1;
  g1.name = "g1";
  g1.kind = LayerKind::kGin;
  g1.units = 4;
  LayerNode g2;
  g2.name = "g2";
  g2.kind = LayerKind::kGcn;
  g2.units = 6;
  g2.inputs = {"g1"};
  LayerNode pool;
  pool.name = "pool";
  pool.kind = LayerKind::kMeanPool;
  pool.inputs = {"g2"};
  LayerNode out;
  out.name = "out";
  out.kind = LayerKind::kFc;
  out.units = 1;
  out.inputs = {"pool"};
  m.nodes = {g1, g2, pool, out};
  m.finalize(106);

  keep_only(m.find("g1").gin.gate, {0, 3});
  keep_only(m.find("g2").gcn.gate, {1, 2, 5});
  keep_only(m.find("out").fc.gate, {0, 1, 2, 3, 4, 5});

  SnapshotMap snaps = snapshot_gates(m);
  MaskTable mt = propagate_masks(m, snaps);
  check_executable(m, mt);

  CHECK(mt.at("input").output_mask == std::vector<int64_t>{0, 3});
  CHECK(mt.at("g1").input_mask == std::vector<int64_t>{0, 3});
  CHECK(mt.at("g1").output_mask == iota_mask(4));  // gcn demands everything
  CHECK(mt.at("g2").output_mask == std::vector<int64_t>{1, 2, 5});
  CHECK(mt.at("pool").output_mask == std::vector<int64_t>{1, 2, 5});
  CHECK(mt.at("out").input_mask == std::vector<int64_t>{1, 2, 5});
}

namespace {

ModelGraph residual_net() {
  ModelGraph m;
  m.input.regime = InputRegime::kVector;
  m.input.dim = 4;
  LayerNode fc1;
  fc1.name = "fc1";
  fc1.kind = LayerKind::kFc;
  fc1.units = 4;
  LayerNode res;
  res.name = "res";
  res.kind = LayerKind::kResidualBlock;
  res.inputs = {"fc1"};
  LayerNode b0;
  b0.name = "res_a";
  b0.kind = LayerKind::kFc;
  b0.units = 3;
  LayerNode b1;
  b1.name = "res_b";
  b1.kind = LayerKind::kFc;
  b1.units = 4;
  res.branch = {b0, b1};
  LayerNode out;
  out.name = "out";
  out.kind = LayerKind::kFc;
  out.units = 1;
  out.activation = "identity";
  out.inputs = {"res"};
  m.nodes = {fc1, res, out};
  m.output = "out";
  return m;
}

void close_branch(ModelGraph& m) {
  LayerNode& res = m.find("res");
  for (LayerNode& inner : res.branch) keep_only(inner.fc.gate, {});
}

Tensor forward_eval(ModelGraph& m, const Tensor& rows) {
  Tape t;
  ForwardInput in;
  in.rows = &rows;
  Var y = m.forward(t, in, GateMode::kEval, nullptr);
  return t.value(y);
}

}  // namespace

TEST_CASE("a live residual block keeps branch masks aligned with the skip") {
  ModelGraph m = residual_net();
  m.finalize(107);
  keep_only(m.find("fc1").fc.gate, {0, 1, 2, 3});
  keep_only(m.find("res_a").fc.gate, {0, 2});
  keep_only(m.find("res_b").fc.gate, {1, 2});
  keep_only(m.find("out").fc.gate, {0, 3});

  SnapshotMap snaps = snapshot_gates(m);
  MaskTable mt = propagate_masks(m, snaps);
  check_executable(m, mt);

  // the block input carries downstream demand plus the branch's first gate
  CHECK(mt.at("res").input_mask == std::vector<int64_t>{0, 2, 3});
  CHECK(mt.at("res").output_mask == std::vector<int64_t>{0, 2, 3});
  CHECK(mt.at("res_a").input_mask == std::vector<int64_t>{0, 2, 3});
  CHECK(mt.at("res_a").output_mask == std::vector<int64_t>{1, 2});
  CHECK(mt.at("res_b").output_mask == std::vector<int64_t>{0, 2, 3});
  CHECK(mt.at("fc1").output_mask == std::vector<int64_t>{0, 2, 3});

  remove_dead_blocks(m, mt, snaps);
  CHECK(m.has_node("res"));  // live block untouched
  check_executable(m, mt);
}

TEST_CASE("a fully closed branch with zero constant is spliced away") {
  ModelGraph m = residual_net();
  m.finalize(108);
  keep_only(m.find("fc1").fc.gate, {0, 1, 2, 3});
  keep_only(m.find("out").fc.gate, {0, 1, 2, 3});
  close_branch(m);
  m.find("res_b").fc.b.value.fill(-0.5);  // relu(-0.5) = 0

  Tensor rows = random_rows(3, 4, 200);
  Tensor before = forward_eval(m, rows);

  SnapshotMap snaps = snapshot_gates(m);
  MaskTable mt = propagate_masks(m, snaps);
  remove_dead_blocks(m, mt, snaps);
  check_executable(m, mt);

  CHECK_FALSE(m.has_node("res"));
  CHECK(m.find("out").inputs[0] == "fc1");
  CHECK_FALSE(mt.has("res"));
  CHECK_FALSE(mt.has("res_a"));

  Tensor after = forward_eval(m, rows);
  CHECK(bit_equal(before, after));
}

TEST_CASE("a fully closed branch with a bias constant becomes an offset") {
  ModelGraph m = residual_net();
  m.finalize(109);
  keep_only(m.find("fc1").fc.gate, {0, 1, 2, 3});
  keep_only(m.find("out").fc.gate, {0, 1, 2, 3});
  close_branch(m);
  LayerNode& rb = m.find("res_b");
  rb.fc.b.value[0] = 0.7;
  rb.fc.b.value[1] = -0.2;
  rb.fc.b.value[2] = 0.0;
  rb.fc.b.value[3] = 1.5;

  Tensor rows = random_rows(3, 4, 201);
  Tensor before = forward_eval(m, rows);

  SnapshotMap snaps = snapshot_gates(m);
  MaskTable mt = propagate_masks(m, snaps);
  remove_dead_blocks(m, mt, snaps);
  check_executable(m, mt);

  LayerNode& res = m.find("res");
  CHECK(res.branch.empty());
  REQUIRE_FALSE(res.dead_branch_constant.empty());
  CHECK(res.dead_branch_constant[0] == doctest::Approx(0.7));
  CHECK(res.dead_branch_constant[1] == 0.0);  // relu
  CHECK(res.dead_branch_constant[3] == doctest::Approx(1.5));

  Tensor after = forward_eval(m, rows);
  CHECK(bit_equal(before, after));
}

TEST_CASE("an open branch keeps the graph unchanged") {
  ModelGraph m = residual_net();
  m.finalize(110);
  keep_only(m.find("fc1").fc.gate, {0, 1, 2, 3});
  keep_only(m.find("res_a").fc.gate, {0, 1, 2});
  keep_only(m.find("res_b").fc.gate, {0, 1, 2, 3});
  keep_only(m.find("out").fc.gate, {0, 1, 2, 3});

  SnapshotMap snaps = snapshot_gates(m);
  MaskTable mt = propagate_masks(m, snaps);
  size_t nodes_before = m.nodes.size();
  remove_dead_blocks(m, mt, snaps);
  CHECK(m.nodes.size() == nodes_before);
  CHECK_FALSE(m.find("res").branch.empty());
}

TEST_CASE("a dead block that is the model output splices to its producer") {
  ModelGraph m = residual_net();
  m.nodes.pop_back();  // drop "out", the block ends the graph
  m.output = "res";
  m.finalize(111);
  keep_only(m.find("fc1").fc.gate, {0, 1, 2, 3});
  close_branch(m);
  m.find("res_b").fc.b.value.fill(-1.0);

  SnapshotMap snaps = snapshot_gates(m);
  MaskTable mt = propagate_masks(m, snaps);
  remove_dead_blocks(m, mt, snaps);
  check_executable(m, mt);
  CHECK(m.output == "fc1");
}

TEST_CASE("an fc that loses every input is rejected") {
  ModelGraph m = conv_fc_net();
  m.finalize(112);
  keep_only(m.find("c1").conv.gate, {});
  for (int64_t d = 0; d < 4; ++d) m.find("c1").conv.b.value[d] = -2.0;  // relu constants 0
  keep_only(m.find("fc1").fc.gate, {0, 1, 2});
  keep_only(m.find("out").fc.gate, {0, 1, 2, 3, 4});

  SnapshotMap snaps = snapshot_gates(m);
  MaskTable mt = propagate_masks(m, snaps);
  remove_dead_blocks(m, mt, snaps);
  CHECK_THROWS_WITH_AS(check_executable(m, mt),
                       doctest::Contains("lost every input"), consistency_error);
}

TEST_CASE("dead conv channels with nonzero constants are retained before padded consumers") {
  ModelGraph m;
  m.input.regime = InputRegime::kImage;
  m.input.C = 2;
  m.input.H = 4;
  m.input.W = 4;
  LayerNode c1;
  c1.name = "c1";
  c1.kind = LayerKind::kConv2d;
  c1.filters = 3;
  c1.kh = c1.kw = 3;
  c1.pad = 1;
  c1.activation = "sigmoid";  // constant sigmoid(b) is never zero
  LayerNode c2;
  c2.name = "c2";
  c2.kind = LayerKind::kConv2d;
  c2.filters = 2;
  c2.kh = c2.kw = 3;
  c2.pad = 1;
  c2.inputs = {"c1"};
  LayerNode flat;
  flat.name = "flat";
  flat.kind = LayerKind::kFlatten;
  flat.inputs = {"c2"};
  LayerNode out;
  out.name = "out";
  out.kind = LayerKind::kFc;
  out.units = 1;
  out.activation = "identity";
  out.inputs = {"flat"};
  m.nodes = {c1, c2, flat, out};
  m.finalize(113);

  std::set<int64_t> all32;
  for (int64_t i = 0; i < 32; ++i) all32.insert(i);
  keep_only(m.find("c1").conv.gate, {0, 2});
  keep_only(m.find("c2").conv.gate, {0, 1});
  keep_only(m.find("out").fc.gate, all32);

  SnapshotMap snaps = snapshot_gates(m);
  MaskTable mt = propagate_masks(m, snaps);
  check_executable(m, mt);
  // channel 1 is closed but its sigmoid constant cannot fold through c2's
  // padding, so it survives as a zero-weight channel
  CHECK(mt.at("c1").output_mask == std::vector<int64_t>{0, 1, 2});

  // with an unpadded consumer the same channel is dropped
  ModelGraph m2 = m;
  CHECK(m2.find("c2").pad == 1);
  ModelGraph m3;
  m3.input = m.input;
  m3.nodes = {c1, c2, flat, out};
  m3.nodes[1].pad = 0;
  m3.finalize(114);
  keep_only(m3.find("c1").conv.gate, {0, 2});
  keep_only(m3.find("c2").conv.gate, {0, 1});
  keep_only(m3.find("out").fc.gate, {0, 1, 2, 3, 4, 5, 6, 7});
  SnapshotMap snaps3 = snapshot_gates(m3);
  MaskTable mt3 = propagate_masks(m3, snaps3);
  check_executable(m3, mt3);
  CHECK(mt3.at("c1").output_mask == std::vector<int64_t>{0, 2});
}

TEST_CASE("a tampered branch mask is caught by the executability check") {
  ModelGraph m = residual_net();
  m.finalize(115);
  keep_only(m.find("fc1").fc.gate, {0, 1, 2, 3});
  keep_only(m.find("res_a").fc.gate, {0, 2});
  keep_only(m.find("res_b").fc.gate, {0, 1, 2, 3});
  keep_only(m.find("out").fc.gate, {0, 1, 2, 3});

  SnapshotMap snaps = snapshot_gates(m);
  MaskTable mt = propagate_masks(m, snaps);
  check_executable(m, mt);

  mt.at("res_b").output_mask.pop_back();
  CHECK_THROWS_WITH_AS(check_executable(m, mt), doctest::Contains("res_b"), consistency_error);
}

TEST_CASE("snapshot map covers attention projections and branch layers") {
  ModelGraph m;
  m.input.regime = InputRegime::kTokens;
  m.input.T = 3;
  m.input.d = 4;
  LayerNode at;
  at.name = "att";
  at.kind = LayerKind::kAttention;
  at.proj = 4;
  LayerNode pool;
  pool.name = "pool";
  pool.kind = LayerKind::kMeanPool;
  pool.inputs = {"att"};
  LayerNode out;
  out.name = "out";
  out.kind = LayerKind::kFc;
  out.units = 1;
  out.inputs = {"pool"};
  m.nodes = {at, pool, out};
  m.finalize(116);

  SnapshotMap snaps = snapshot_gates(m);
  CHECK(snaps.count("att/q") == 1);
  CHECK(snaps.count("att/k") == 1);
  CHECK(snaps.count("att/v") == 1);
  CHECK(snaps.count("out") == 1);

  MaskTable mt = propagate_masks(m, snaps);
  check_executable(m, mt);
  CHECK(mt.at("att").output_mask == iota_mask(4));

  ModelGraph r = residual_net();
  r.finalize(117);
  SnapshotMap rs = snapshot_gates(r);
  CHECK(rs.count("res_a") == 1);
  CHECK(rs.count("res_b") == 1);
}

TEST_CASE("mask report lists kept counts per layer") {
  ModelGraph m = conv_fc_net();
  m.finalize(118);
  keep_only(m.find("c1").conv.gate, {0, 2});
  for (int64_t d = 0; d < 4; ++d) m.find("c1").conv.b.value[d] = -1.0;
  keep_only(m.find("fc1").fc.gate, {0, 1, 5});
  keep_only(m.find("out").fc.gate, {0, 1, 2, 3, 4});

  SnapshotMap snaps = snapshot_gates(m);
  MaskTable mt = propagate_masks(m, snaps);
  std::string report = mask_report(m, mt);
  CHECK(report.find("c1 (conv2d): in 2/2, out 2/4") != std::string::npos);
  CHECK(report.find("input (input)") != std::string::npos);
  CHECK(report.find("out (fc)") != std::string::npos);
}
