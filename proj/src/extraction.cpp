#include "lumos/extraction.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "lumos/errors.hpp"
#include "lumos/rng.hpp"
#include "lumos/tape.hpp"

namespace lumos {

namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double act_value(const std::string& tag, double x) {
  if (tag == "identity" || tag.empty()) return x;
  if (tag == "relu") return std::max(0.0, x);
  if (tag == "sigmoid") return stable_sigmoid(x);
  throw config_error("unknown activation '" + tag + "'");
}

const GateSnapshot& snap_for(const SnapshotMap& snaps, const std::string& name) {
  auto it = snaps.find(name);
  if (it == snaps.end()) throw consistency_error("no gate snapshot for layer '" + name + "'");
  return it->second;
}

void check_extents(const std::string& name, const LayerMasks& lm, int64_t in_extent,
                   int64_t out_extent) {
  if (lm.in_extent != in_extent || lm.out_extent != out_extent) {
    throw shape_error("layer '" + name + "': mask extents " + std::to_string(lm.in_extent) + "/" +
                      std::to_string(lm.out_extent) + " disagree with weights " +
                      std::to_string(in_extent) + "/" + std::to_string(out_extent));
  }
}

std::vector<int64_t> replace_last(std::vector<int64_t> shape, int64_t v) {
  if (!shape.empty()) shape.back() = v;
  return shape;
}

int64_t sz(const std::vector<int64_t>& mask) { return static_cast<int64_t>(mask.size()); }

// Original feature extent a name contributes to a concat, matching the mask
// coordinate space (channels for images, flat width otherwise).
int64_t orig_segment_extent(const ModelGraph& g, const std::string& name) {
  if (name == "input") {
    switch (g.input.regime) {
      case InputRegime::kVector: return g.input.dim;
      case InputRegime::kIds: return g.input.id_cols;
      case InputRegime::kImage: return g.input.C;
      case InputRegime::kTokens: return g.input.d;
      case InputRegime::kGraph: return g.input.node_dim;
    }
  }
  return g.find(name).out_shape[0];
}

CompactLayer extract_fc_like(const LayerNode& n, const GatedFC& l, const LayerMasks& lm,
                             const GateSnapshot& s) {
  const Tensor& W = l.W.value;
  check_extents(n.name, lm, W.extent(0), W.extent(1));
  CompactLayer c;
  c.name = n.name;
  c.kind = LayerKind::kFc;
  c.inputs = n.inputs;
  c.activation = l.activation;
  c.has_bias = l.has_bias;
  c.in_shape = replace_last(n.in_shape, sz(lm.input_mask));
  c.out_shape = replace_last(n.out_shape, sz(lm.output_mask));

  c.W = Tensor({sz(lm.input_mask), sz(lm.output_mask)});
  for (int64_t a = 0; a < sz(lm.input_mask); ++a) {
    int64_t r = lm.input_mask[static_cast<size_t>(a)];
    double zr = s.z[static_cast<size_t>(r)];
    for (int64_t bcol = 0; bcol < sz(lm.output_mask); ++bcol) {
      c.W.at2(a, bcol) = zr * W.at2(r, lm.output_mask[static_cast<size_t>(bcol)]);
    }
  }
  if (l.has_bias) {
    c.b = Tensor({sz(lm.output_mask)});
    for (int64_t bcol = 0; bcol < sz(lm.output_mask); ++bcol) {
      c.b[bcol] = l.b.value[lm.output_mask[static_cast<size_t>(bcol)]];
    }
  }
  return c;
}

CompactLayer extract_conv(const LayerNode& n, const LayerMasks& lm, const GateSnapshot& s) {
  const Tensor& W = n.conv.W.value;
  check_extents(n.name, lm, W.extent(1), W.extent(0));
  CompactLayer c;
  c.name = n.name;
  c.kind = LayerKind::kConv2d;
  c.inputs = n.inputs;
  c.activation = n.conv.activation;
  c.stride = n.conv.stride;
  c.pad = n.conv.pad;
  c.in_shape = {sz(lm.input_mask), n.in_shape[1], n.in_shape[2]};
  c.out_shape = {sz(lm.output_mask), n.out_shape[1], n.out_shape[2]};

  c.W = Tensor({sz(lm.output_mask), sz(lm.input_mask), W.extent(2), W.extent(3)});
  c.b = Tensor({sz(lm.output_mask)});
  for (int64_t e = 0; e < sz(lm.output_mask); ++e) {
    int64_t d = lm.output_mask[static_cast<size_t>(e)];
    double zd = s.z[static_cast<size_t>(d)];
    for (int64_t ci = 0; ci < sz(lm.input_mask); ++ci) {
      int64_t cc = lm.input_mask[static_cast<size_t>(ci)];
      for (int64_t i = 0; i < W.extent(2); ++i) {
        for (int64_t j = 0; j < W.extent(3); ++j) {
          c.W.at4(e, ci, i, j) = zd * W.at4(d, cc, i, j);
        }
      }
    }
    c.b[e] = n.conv.b.value[d];  // bias kept unscaled, dead rows reproduce act(b)
  }
  return c;
}

CompactLayer extract_gin(const LayerNode& n, const LayerMasks& lm, const GateSnapshot& s) {
  const Tensor& W = n.gin.W.value;
  check_extents(n.name, lm, W.extent(0), W.extent(1));
  CompactLayer c;
  c.name = n.name;
  c.kind = LayerKind::kGin;
  c.inputs = n.inputs;
  c.activation = n.gin.activation;
  c.in_shape = {sz(lm.input_mask)};
  c.out_shape = {sz(lm.output_mask)};

  c.W = Tensor({sz(lm.input_mask), sz(lm.output_mask)});
  for (int64_t a = 0; a < sz(lm.input_mask); ++a) {
    int64_t r = lm.input_mask[static_cast<size_t>(a)];
    double zr = s.z[static_cast<size_t>(r)];
    for (int64_t bcol = 0; bcol < sz(lm.output_mask); ++bcol) {
      c.W.at2(a, bcol) = zr * W.at2(r, lm.output_mask[static_cast<size_t>(bcol)]);
    }
  }
  c.eps_gin = n.gin.eps_gin.value;
  const Tensor& E = n.gin.edge_embed.value;
  c.edge_embed = Tensor({E.extent(0), sz(lm.input_mask)});
  for (int64_t i = 0; i < E.extent(0); ++i) {
    for (int64_t a = 0; a < sz(lm.input_mask); ++a) {
      c.edge_embed.at2(i, a) = E.at2(i, lm.input_mask[static_cast<size_t>(a)]);
    }
  }
  return c;
}

CompactLayer extract_gcn(const LayerNode& n, const LayerMasks& lm, const GateSnapshot& s) {
  const Tensor& W1 = n.gcn.W1.value;
  check_extents(n.name, lm, W1.extent(0), W1.extent(1));
  CompactLayer c;
  c.name = n.name;
  c.kind = LayerKind::kGcn;
  c.inputs = n.inputs;
  c.in_shape = {sz(lm.input_mask)};
  c.out_shape = {sz(lm.output_mask)};

  const std::vector<int64_t>& K = lm.output_mask;
  auto gather_cols = [&](const Tensor& src) {
    Tensor dst({src.extent(0), sz(K)});
    for (int64_t i = 0; i < src.extent(0); ++i) {
      for (int64_t j = 0; j < sz(K); ++j) dst.at2(i, j) = src.at2(i, K[static_cast<size_t>(j)]);
    }
    return dst;
  };
  auto gather_vec = [&](const Tensor& src) {
    Tensor dst({sz(K)});
    for (int64_t j = 0; j < sz(K); ++j) dst[j] = src[K[static_cast<size_t>(j)]];
    return dst;
  };
  // The relu between the gate and the weights keeps the gate values as an
  // explicit output scale instead of folding them into the matrices.
  Tensor W1g({sz(lm.input_mask), sz(K)});
  for (int64_t a = 0; a < sz(lm.input_mask); ++a) {
    int64_t r = lm.input_mask[static_cast<size_t>(a)];
    for (int64_t j = 0; j < sz(K); ++j) W1g.at2(a, j) = W1.at2(r, K[static_cast<size_t>(j)]);
  }
  c.W = std::move(W1g);
  c.b = gather_vec(n.gcn.b1.value);
  c.W2 = gather_cols(n.gcn.W2.value);
  c.b2 = gather_vec(n.gcn.b2.value);
  c.root_embed = gather_cols(n.gcn.root_embed.value);
  c.out_scale = Tensor({sz(K)});
  for (int64_t j = 0; j < sz(K); ++j) c.out_scale[j] = s.z[static_cast<size_t>(K[static_cast<size_t>(j)])];
  return c;
}

CompactLayer extract_attention(const LayerNode& n, const LayerMasks& lm, const SnapshotMap& snaps) {
  const Tensor& Wq = n.attn.Wq.value;
  check_extents(n.name, lm, Wq.extent(0), n.out_shape[1]);
  CompactLayer c;
  c.name = n.name;
  c.kind = LayerKind::kAttention;
  c.inputs = n.inputs;
  c.heads = n.attn.heads;
  c.in_shape = n.in_shape;
  c.out_shape = n.out_shape;

  auto fold_rows = [&](const Tensor& W, const GateSnapshot& s, std::vector<int32_t>& gather) {
    gather.assign(s.keep.begin(), s.keep.end());
    if (gather.empty()) return Tensor();  // projection collapsed to zero
    Tensor dst({static_cast<int64_t>(gather.size()), W.extent(1)});
    for (size_t a = 0; a < gather.size(); ++a) {
      int64_t r = gather[a];
      double zr = s.z[static_cast<size_t>(r)];
      for (int64_t j = 0; j < W.extent(1); ++j) {
        dst.at2(static_cast<int64_t>(a), j) = zr * W.at2(r, j);
      }
    }
    return dst;
  };
  c.Wq = fold_rows(Wq, snap_for(snaps, n.name + "/q"), c.gather_q);
  c.Wk = fold_rows(n.attn.Wk.value, snap_for(snaps, n.name + "/k"), c.gather_k);
  c.Wv = fold_rows(n.attn.Wv.value, snap_for(snaps, n.name + "/v"), c.gather_v);
  c.Wo = n.attn.Wo.value;
  return c;
}

CompactLayer extract_embedding(const LayerNode& n, const LayerMasks& lm) {
  const Tensor& T = n.embed.table.value;
  check_extents(n.name, lm, 1, T.extent(1));
  CompactLayer c;
  c.name = n.name;
  c.kind = LayerKind::kEmbedding;
  c.inputs = n.inputs;
  c.col = n.embed.col;
  c.in_shape = n.in_shape;
  c.out_shape = {sz(lm.output_mask)};
  c.W = Tensor({T.extent(0), sz(lm.output_mask)});
  for (int64_t i = 0; i < T.extent(0); ++i) {
    for (int64_t j = 0; j < sz(lm.output_mask); ++j) {
      c.W.at2(i, j) = T.at2(i, lm.output_mask[static_cast<size_t>(j)]);
    }
  }
  return c;
}

// Consumers of every layer name, residual blocks included as consumers of
// their input.
std::map<std::string, std::vector<const LayerNode*>> consumer_map(const ModelGraph& g) {
  std::map<std::string, std::vector<const LayerNode*>> out;
  for (const LayerNode& n : g.nodes) {
    for (const std::string& in : n.inputs) out[in].push_back(&n);
  }
  return out;
}

struct AbsorbCtx {
  const ModelGraph& g;
  const MaskTable& mt;
  const SnapshotMap& snaps;
  std::map<std::string, std::vector<const LayerNode*>> consumers;
  std::map<std::string, CompactLayer*> compact;
};

// Push the constant carried by dropped producer coordinates into every
// transitive consumer's bias. Coordinates live in the producer's mask space
// (channels for convs, flat positions past a flatten).
void absorb_constants(AbsorbCtx& cx, const std::string& producer,
                      const std::vector<std::pair<int64_t, double>>& vals) {
  auto it = cx.consumers.find(producer);
  if (it == cx.consumers.end()) return;
  for (const LayerNode* cn : it->second) {
    switch (cn->kind) {
      case LayerKind::kFc: {
        auto cit = cx.compact.find(cn->name);
        if (cit == cx.compact.end()) break;  // consumer is fully dead
        if (!cn->has_bias) {
          throw config_error("internal: constant absorbed into bias-free fc '" + cn->name + "'");
        }
        CompactLayer& cl = *cit->second;
        const Tensor& W = cn->fc.W.value;
        const GateSnapshot& s = snap_for(cx.snaps, cn->name);
        const std::vector<int64_t>& O = cx.mt.at(cn->name).output_mask;
        for (auto [r, v] : vals) {
          double zr = s.z[static_cast<size_t>(r)];
          for (int64_t j = 0; j < sz(O); ++j) {
            cl.b[j] += v * (zr * W.at2(r, O[static_cast<size_t>(j)]));
          }
        }
        break;
      }
      case LayerKind::kConv2d: {
        auto cit = cx.compact.find(cn->name);
        if (cit == cx.compact.end()) break;
        if (cn->pad != 0) {
          throw config_error("internal: constant absorbed through padded conv '" + cn->name + "'");
        }
        CompactLayer& cl = *cit->second;
        const Tensor& W = cn->conv.W.value;
        const GateSnapshot& s = snap_for(cx.snaps, cn->name);
        const std::vector<int64_t>& O = cx.mt.at(cn->name).output_mask;
        for (auto [d, v] : vals) {
          for (int64_t e = 0; e < sz(O); ++e) {
            double ze = s.z[static_cast<size_t>(O[static_cast<size_t>(e)])];
            double acc = 0.0;
            for (int64_t i = 0; i < W.extent(2); ++i) {
              for (int64_t j = 0; j < W.extent(3); ++j) {
                acc += v * (ze * W.at4(O[static_cast<size_t>(e)], d, i, j));
              }
            }
            cl.b[e] += acc;
          }
        }
        break;
      }
      case LayerKind::kFlatten: {
        int64_t hw = cn->in_shape[1] * cn->in_shape[2];
        std::vector<std::pair<int64_t, double>> flat;
        for (auto [d, v] : vals) {
          for (int64_t k = 0; k < hw; ++k) flat.emplace_back(d * hw + k, v);
        }
        absorb_constants(cx, cn->name, flat);
        break;
      }
      case LayerKind::kConcat: {
        int64_t offset = 0;
        for (const std::string& in : cn->inputs) {
          if (in == producer) break;
          offset += orig_segment_extent(cx.g, in);
        }
        std::vector<std::pair<int64_t, double>> shifted;
        for (auto [i, v] : vals) shifted.emplace_back(i + offset, v);
        absorb_constants(cx, cn->name, shifted);
        break;
      }
      default:
        throw config_error("internal: dead conv constant reached '" + cn->name +
                           "', which cannot absorb it");
    }
  }
}

}  // namespace

CompactModel extract(const ModelGraph& pruned, const MaskTable& masks, const SnapshotMap& snaps) {
  if (!pruned.finalized()) throw config_error("extract needs a finalized graph");
  CompactModel m;
  m.input = pruned.input;
  m.input_keep = masks.at("input").output_mask;
  m.output = pruned.output;

  for (const LayerNode& n : pruned.nodes) {
    const LayerMasks& lm = masks.at(n.name);
    if (lm.output_mask.empty() && n.name != pruned.output) {
      continue;  // nothing downstream reads this layer; it vanishes entirely
    }
    CompactLayer c;
    switch (n.kind) {
      case LayerKind::kFc:
        c = extract_fc_like(n, n.fc, lm, snap_for(snaps, n.name));
        break;
      case LayerKind::kConv2d:
        c = extract_conv(n, lm, snap_for(snaps, n.name));
        break;
      case LayerKind::kGin:
        c = extract_gin(n, lm, snap_for(snaps, n.name));
        break;
      case LayerKind::kGcn:
        c = extract_gcn(n, lm, snap_for(snaps, n.name));
        break;
      case LayerKind::kAttention:
        c = extract_attention(n, lm, snaps);
        break;
      case LayerKind::kEmbedding:
        c = extract_embedding(n, lm);
        break;
      case LayerKind::kFlatten:
        c.name = n.name;
        c.kind = n.kind;
        c.inputs = n.inputs;
        c.in_shape = {sz(masks.at(n.inputs[0]).output_mask), n.in_shape[1], n.in_shape[2]};
        c.out_shape = {sz(lm.output_mask)};
        break;
      case LayerKind::kConcat: {
        c.name = n.name;
        c.kind = n.kind;
        for (const std::string& in : n.inputs) {
          bool alive = in == "input" || !masks.at(in).output_mask.empty();
          if (alive) c.inputs.push_back(in);
        }
        c.out_shape = {sz(lm.output_mask)};
        break;
      }
      case LayerKind::kResidualBlock: {
        c.name = n.name;
        c.kind = n.kind;
        c.inputs = n.inputs;
        c.in_shape = {sz(lm.input_mask)};
        c.out_shape = {sz(lm.output_mask)};
        for (const LayerNode& inner : n.branch) {
          c.branch.push_back(
              extract_fc_like(inner, inner.fc, masks.at(inner.name), snap_for(snaps, inner.name)));
        }
        if (!n.dead_branch_constant.empty()) {
          if (n.dead_branch_constant.numel() != lm.out_extent) {
            throw shape_error("layer '" + n.name + "': branch constant width " +
                              std::to_string(n.dead_branch_constant.numel()) +
                              " disagrees with mask extent " + std::to_string(lm.out_extent));
          }
          Tensor kept({sz(lm.output_mask)});
          for (int64_t j = 0; j < sz(lm.output_mask); ++j) {
            kept[j] = n.dead_branch_constant[lm.output_mask[static_cast<size_t>(j)]];
          }
          c.dead_branch_constant = std::move(kept);
        }
        break;
      }
      case LayerKind::kMeanPool:
        c.name = n.name;
        c.kind = n.kind;
        c.inputs = n.inputs;
        c.in_shape = replace_last(n.in_shape, sz(lm.input_mask));
        c.out_shape = {sz(lm.output_mask)};
        break;
      case LayerKind::kInput:
        throw config_error("unexpected input node");
    }
    m.layers.push_back(std::move(c));
  }

  // Fold the constants of dropped dead conv channels into downstream biases.
  AbsorbCtx cx{pruned, masks, snaps, consumer_map(pruned), {}};
  for (CompactLayer& c : m.layers) cx.compact[c.name] = &c;
  for (const LayerNode& n : pruned.nodes) {
    if (n.kind != LayerKind::kConv2d) continue;
    const GateSnapshot& s = snap_for(snaps, n.name);
    const std::vector<int64_t>& om = masks.at(n.name).output_mask;
    std::set<int64_t> kept_set(om.begin(), om.end());
    std::vector<std::pair<int64_t, double>> consts;
    for (int64_t d = 0; d < n.filters; ++d) {
      if (s.is_kept(d) || kept_set.count(d)) continue;
      double cv = act_value(n.conv.activation, n.conv.b.value[d]);
      if (cv != 0.0) consts.emplace_back(d, cv);
    }
    if (!consts.empty()) absorb_constants(cx, n.name, consts);
  }
  return m;
}

ExtractionResult extract_pipeline(const ModelGraph& g) {
  SnapshotMap snaps = snapshot_gates(g);
  MaskTable mt = propagate_masks(g, snaps);
  ModelGraph pruned = g;
  remove_dead_blocks(pruned, mt, snaps);
  check_executable(pruned, mt);
  CompactModel model = extract(pruned, mt, snaps);
  return ExtractionResult{std::move(model), std::move(mt), std::move(pruned)};
}

namespace {

int64_t tensor_params(const CompactLayer& l) {
  int64_t total = 0;
  for (const Tensor* t : {&l.W, &l.b, &l.eps_gin, &l.edge_embed, &l.W2, &l.b2, &l.root_embed,
                          &l.Wq, &l.Wk, &l.Wv, &l.Wo}) {
    if (!t->empty()) total += t->numel();
  }
  for (const CompactLayer& inner : l.branch) total += tensor_params(inner);
  return total;
}

}  // namespace

int64_t CompactModel::param_count() const {
  int64_t total = 0;
  for (const CompactLayer& l : layers) total += tensor_params(l);
  return total;
}

int64_t CompactModel::restricted_flat_dim() const {
  auto keep = static_cast<int64_t>(input_keep.size());
  switch (input.regime) {
    case InputRegime::kVector: return keep;
    case InputRegime::kIds: return input.id_cols;
    case InputRegime::kImage: return keep * input.H * input.W;
    case InputRegime::kTokens: return input.T * keep;
    case InputRegime::kGraph: return 0;
  }
  return 0;
}

Tensor CompactModel::restrict_rows(const Tensor& rows) const {
  if (rows.rank() != 2 || rows.extent(1) != input.flat_dim()) {
    throw shape_error("full batch rows must be [B x " + std::to_string(input.flat_dim()) +
                      "], got " + rows.shape_str());
  }
  int64_t B = rows.extent(0);
  auto keep = static_cast<int64_t>(input_keep.size());
  switch (input.regime) {
    case InputRegime::kVector: {
      Tensor out({B, keep});
      for (int64_t i = 0; i < B; ++i) {
        for (int64_t j = 0; j < keep; ++j) {
          out.at2(i, j) = rows.at2(i, input_keep[static_cast<size_t>(j)]);
        }
      }
      return out;
    }
    case InputRegime::kIds:
      return rows;
    case InputRegime::kImage: {
      int64_t hw = input.H * input.W;
      Tensor out({B, keep * hw});
      for (int64_t i = 0; i < B; ++i) {
        for (int64_t c = 0; c < keep; ++c) {
          int64_t src = input_keep[static_cast<size_t>(c)] * hw;
          for (int64_t k = 0; k < hw; ++k) out.at2(i, c * hw + k) = rows.at2(i, src + k);
        }
      }
      return out;
    }
    case InputRegime::kTokens: {
      Tensor out({B, input.T * keep});
      for (int64_t i = 0; i < B; ++i) {
        for (int64_t tk = 0; tk < input.T; ++tk) {
          for (int64_t j = 0; j < keep; ++j) {
            out.at2(i, tk * keep + j) = rows.at2(i, tk * input.d + input_keep[static_cast<size_t>(j)]);
          }
        }
      }
      return out;
    }
    case InputRegime::kGraph:
      throw config_error("graph inputs restrict per sample, not per batch");
  }
  throw config_error("unknown input regime");
}

GraphSample CompactModel::restrict_graph(const GraphSample& s) const {
  GraphSample out = s;
  auto keep = static_cast<int64_t>(input_keep.size());
  Tensor nodes({s.nodes.extent(0), keep});
  for (int64_t i = 0; i < s.nodes.extent(0); ++i) {
    for (int64_t j = 0; j < keep; ++j) {
      nodes.at2(i, j) = s.nodes.at2(i, input_keep[static_cast<size_t>(j)]);
    }
  }
  out.nodes = std::move(nodes);
  return out;
}

const CompactLayer* CompactModel::find(const std::string& name) const {
  for (const CompactLayer& l : layers) {
    if (l.name == name) return &l;
    for (const CompactLayer& inner : l.branch) {
      if (inner.name == name) return &inner;
    }
  }
  return nullptr;
}

namespace {

Var compact_fc(Tape& t, const CompactLayer& l, Var x) {
  Var pre = t.matmul(x, t.leaf(l.W));
  if (l.has_bias) pre = t.add_row_vec(pre, t.leaf(l.b));
  return apply_activation(t, l.activation, pre);
}

void split_edges(const GraphSample& g, int64_t v, std::vector<int32_t>& src,
                 std::vector<int32_t>& dst) {
  src.clear();
  dst.clear();
  for (auto [s, d] : g.edges) {
    if (s < 0 || s >= v || d < 0 || d >= v) {
      throw config_error("edge endpoint (" + std::to_string(s) + "," + std::to_string(d) +
                         ") out of range for " + std::to_string(v) + " nodes");
    }
    src.push_back(s);
    dst.push_back(d);
  }
}

Var compact_layer_forward(Tape& t, const CompactLayer& l, Var x, const GraphSample* g) {
  switch (l.kind) {
    case LayerKind::kFc:
      return compact_fc(t, l, x);
    case LayerKind::kConv2d: {
      Var pre = t.conv2d(x, t.leaf(l.W), l.stride, l.pad);
      pre = t.add_channel_bias(pre, t.leaf(l.b));
      return apply_activation(t, l.activation, pre);
    }
    case LayerKind::kGin: {
      if (!g) throw config_error("gin layer needs a graph sample");
      int64_t v = t.value(x).extent(0);
      Var one_plus_eps = t.affine(t.leaf(l.eps_gin), 1.0, 1.0);
      Var self_term = t.scale_by_scalar(x, one_plus_eps);
      if (g->edges.empty()) {
        return apply_activation(t, l.activation, t.matmul(self_term, t.leaf(l.W)));
      }
      std::vector<int32_t> src, dst;
      split_edges(*g, v, src, dst);
      Var emb = t.matmul(t.leaf(g->edge_feats), t.leaf(l.edge_embed));
      Var per_edge = t.add(t.gather_rows(x, src), emb);
      Var prop = t.scatter_add_rows(per_edge, dst, v);
      Var agg = t.add(self_term, prop);
      return apply_activation(t, l.activation, t.matmul(agg, t.leaf(l.W)));
    }
    case LayerKind::kGcn: {
      if (!g) throw config_error("gcn layer needs a graph sample");
      int64_t v = t.value(x).extent(0);
      if (g->root < 0 || g->root >= v) {
        throw config_error("root index " + std::to_string(g->root) + " out of range for " +
                           std::to_string(v) + " nodes");
      }
      Var scale = t.leaf(l.out_scale);
      Var h1 = t.add_row_vec(t.matmul(x, t.leaf(l.W)), t.leaf(l.b));
      std::vector<int32_t> indicator(static_cast<size_t>(v), 0);
      indicator[static_cast<size_t>(g->root)] = 1;
      Var root_rows = t.gather_rows(t.leaf(l.root_embed), indicator);
      Var local = t.scale_cols(t.relu(t.add(h1, root_rows)), scale);
      if (g->edges.empty()) return local;
      std::vector<int32_t> src, dst;
      split_edges(*g, v, src, dst);
      Var e1 = t.add_row_vec(t.matmul(t.leaf(g->edge_feats), t.leaf(l.W2)), t.leaf(l.b2));
      Var fwd = t.add(t.gather_rows(h1, src), e1);
      Var bwd = t.add(t.gather_rows(h1, dst), e1);
      Var prop = t.add(t.scatter_add_rows(fwd, dst, v), t.scatter_add_rows(bwd, src, v));
      return t.add(t.scale_cols(prop, scale), local);
    }
    case LayerKind::kAttention: {
      int64_t T = t.value(x).extent(0);
      int64_t proj = l.Wo.extent(0);
      auto project = [&](const Tensor& W, const std::vector<int32_t>& idx) {
        if (idx.empty()) return t.leaf(Tensor({T, proj}));  // gate closed everywhere
        Var cols = t.transpose(t.gather_rows(t.transpose(x), idx));
        return t.matmul(cols, t.leaf(W));
      };
      Var q = project(l.Wq, l.gather_q);
      Var k = project(l.Wk, l.gather_k);
      Var v = project(l.Wv, l.gather_v);
      int64_t dh = proj / l.heads;
      double scale = 1.0 / std::sqrt(static_cast<double>(dh));
      std::vector<Var> head_outs;
      for (int64_t h = 0; h < l.heads; ++h) {
        Var qh = l.heads == 1 ? q : t.slice_cols(q, h * dh, dh);
        Var kh = l.heads == 1 ? k : t.slice_cols(k, h * dh, dh);
        Var vh = l.heads == 1 ? v : t.slice_cols(v, h * dh, dh);
        Var scores = t.affine(t.matmul(qh, t.transpose(kh)), scale, 0.0);
        head_outs.push_back(t.matmul(t.softmax_rows(scores), vh));
      }
      Var merged = head_outs.size() == 1 ? head_outs[0] : t.concat_axis(head_outs, 1);
      return t.matmul(merged, t.leaf(l.Wo));
    }
    case LayerKind::kFlatten: {
      const Tensor& xv = t.value(x);
      return t.reshape(x, {xv.extent(0), xv.extent(1) * xv.extent(2) * xv.extent(3)});
    }
    case LayerKind::kResidualBlock: {
      if (l.branch.empty()) {
        if (l.dead_branch_constant.empty()) {
          throw config_error("residual_block '" + l.name + "' has no branch");
        }
        return t.add_row_vec(x, t.leaf(l.dead_branch_constant));
      }
      Var cur = x;
      for (const CompactLayer& inner : l.branch) cur = compact_fc(t, inner, cur);
      return t.add(x, cur);
    }
    case LayerKind::kMeanPool: {
      const Tensor& xv = t.value(x);
      int64_t r = xv.extent(0);
      Tensor ones({1, r});
      ones.fill(1.0);
      return t.affine(t.matmul(t.leaf(std::move(ones)), x), 1.0 / static_cast<double>(r), 0.0);
    }
    default:
      throw config_error("layer '" + l.name + "' cannot run standalone");
  }
}

Var compact_forward_sample(Tape& t, const CompactModel& m, Var input_var, const GraphSample* g) {
  std::map<std::string, Var> vals;
  vals["input"] = input_var;
  for (const CompactLayer& l : m.layers) {
    auto in_var = [&](size_t i) {
      auto it = vals.find(l.inputs[i]);
      if (it == vals.end()) throw config_error("missing producer '" + l.inputs[i] + "'");
      return it->second;
    };
    Var out;
    switch (l.kind) {
      case LayerKind::kEmbedding: {
        const Tensor& rows = t.value(in_var(0));
        std::vector<int32_t> idx;
        for (int64_t i = 0; i < rows.extent(0); ++i) {
          double raw = rows.at2(i, l.col);
          auto id = static_cast<int64_t>(raw);
          if (static_cast<double>(id) != raw || id < 0 || id >= l.W.extent(0)) {
            throw config_error("embedding '" + l.name + "' got invalid id " + std::to_string(raw));
          }
          idx.push_back(static_cast<int32_t>(id));
        }
        out = t.gather_rows(t.leaf(l.W), idx);
        break;
      }
      case LayerKind::kConcat: {
        std::vector<Var> parts;
        for (size_t i = 0; i < l.inputs.size(); ++i) parts.push_back(in_var(i));
        out = parts.size() == 1 ? parts[0] : t.concat_axis(parts, 1);
        break;
      }
      default:
        out = compact_layer_forward(t, l, in_var(0), g);
    }
    vals[l.name] = out;
  }
  auto it = vals.find(m.output);
  if (it == vals.end()) throw config_error("output layer '" + m.output + "' was not computed");
  return it->second;
}

}  // namespace

Tensor CompactModel::run(const Tensor& restricted_rows) const {
  if (input.regime == InputRegime::kGraph) {
    throw config_error("graph regime needs a graph sample");
  }
  if (restricted_rows.rank() != 2 || restricted_rows.extent(1) != restricted_flat_dim()) {
    throw shape_error("restricted rows must be [B x " + std::to_string(restricted_flat_dim()) +
                      "], got " + restricted_rows.shape_str());
  }
  Tape t;
  int64_t B = restricted_rows.extent(0);
  auto keep = static_cast<int64_t>(input_keep.size());
  switch (input.regime) {
    case InputRegime::kVector:
    case InputRegime::kIds: {
      Var x = t.leaf(restricted_rows);
      return t.value(compact_forward_sample(t, *this, x, nullptr));
    }
    case InputRegime::kImage: {
      Var x = t.reshape(t.leaf(restricted_rows), {B, keep, input.H, input.W});
      return t.value(compact_forward_sample(t, *this, x, nullptr));
    }
    case InputRegime::kTokens: {
      Var batch = t.leaf(restricted_rows);
      std::vector<Var> outs;
      for (int64_t i = 0; i < B; ++i) {
        Var row = t.gather_rows(batch, {static_cast<int32_t>(i)});
        Var x = t.reshape(row, {input.T, keep});
        outs.push_back(compact_forward_sample(t, *this, x, nullptr));
      }
      Var merged = outs.size() == 1 ? outs[0] : t.concat_axis(outs, 0);
      return t.value(merged);
    }
    default:
      throw config_error("unknown input regime");
  }
}

Tensor CompactModel::run(const GraphSample& restricted) const {
  if (input.regime != InputRegime::kGraph) {
    throw config_error("dense regimes take batch rows, not graph samples");
  }
  auto keep = static_cast<int64_t>(input_keep.size());
  if (restricted.nodes.extent(1) != keep) {
    throw shape_error("restricted graph node width " + std::to_string(restricted.nodes.extent(1)) +
                      " != kept features " + std::to_string(keep));
  }
  Tape t;
  Var x = t.leaf(restricted.nodes);
  return t.value(compact_forward_sample(t, *this, x, &restricted));
}

namespace {

GraphSample random_graph(RngStream& rng, const InputSpec& in) {
  GraphSample s;
  auto v = static_cast<int64_t>(rng.uniform(3.0, 9.0));
  v = std::min<int64_t>(8, std::max<int64_t>(3, v));
  s.nodes = Tensor({v, in.node_dim});
  for (int64_t i = 0; i < s.nodes.numel(); ++i) s.nodes[i] = rng.uniform(-1.0, 1.0);
  auto ecount = static_cast<int64_t>(rng.uniform(0.0, static_cast<double>(2 * v) + 1.0));
  ecount = std::max<int64_t>(0, std::min(2 * v, ecount));
  if (ecount > 0) {
    s.edge_feats = Tensor({ecount, in.edge_dim});
    for (int64_t i = 0; i < s.edge_feats.numel(); ++i) s.edge_feats[i] = rng.uniform(-1.0, 1.0);
    for (int64_t e = 0; e < ecount; ++e) {
      auto a = static_cast<int32_t>(rng.uniform(0.0, static_cast<double>(v)));
      auto b = static_cast<int32_t>(rng.uniform(0.0, static_cast<double>(v)));
      a = std::min<int32_t>(static_cast<int32_t>(v) - 1, std::max(0, a));
      b = std::min<int32_t>(static_cast<int32_t>(v) - 1, std::max(0, b));
      s.edges.emplace_back(a, b);
    }
  }
  auto root = static_cast<int32_t>(rng.uniform(0.0, static_cast<double>(v)));
  s.root = std::min<int32_t>(static_cast<int32_t>(v) - 1, std::max(0, root));
  return s;
}

Tensor random_dense_rows(RngStream& rng, const InputSpec& in, int64_t n) {
  Tensor rows({n, in.flat_dim()});
  if (in.regime == InputRegime::kIds) {
    for (int64_t i = 0; i < rows.numel(); ++i) {
      auto id = static_cast<int64_t>(rng.uniform(0.0, static_cast<double>(in.vocab)));
      rows[i] = static_cast<double>(std::min(in.vocab - 1, std::max<int64_t>(0, id)));
    }
  } else {
    for (int64_t i = 0; i < rows.numel(); ++i) rows[i] = rng.uniform(-1.0, 1.0);
  }
  return rows;
}

void accumulate_dev(const Tensor& a, const Tensor& b, EquivalenceReport& rep) {
  if (a.shape() != b.shape()) {
    throw shape_error("model outputs disagree in shape: " + a.shape_str() + " vs " +
                      b.shape_str());
  }
  for (int64_t i = 0; i < a.numel(); ++i) {
    double abs = std::fabs(a[i] - b[i]);
    double rel = abs / std::max({1.0, std::fabs(a[i]), std::fabs(b[i])});
    rep.max_abs = std::max(rep.max_abs, abs);
    rep.max_rel = std::max(rep.max_rel, rel);
  }
}

}  // namespace

EquivalenceReport verify_equivalence(ModelGraph& original, const CompactModel& compact,
                                     int64_t n_samples, double tol, uint64_t seed) {
  if (n_samples < 1) throw config_error("verify_equivalence needs at least one sample");
  EquivalenceReport rep;
  rep.n_samples = n_samples;
  rep.tol = tol;
  RngStream rng(seed);

  if (original.input.regime == InputRegime::kGraph) {
    for (int64_t i = 0; i < n_samples; ++i) {
      GraphSample s = random_graph(rng, original.input);
      Tape t;
      ForwardInput in;
      in.graph = &s;
      Tensor a = t.value(original.forward(t, in, GateMode::kEval, nullptr));
      Tensor b = compact.run(compact.restrict_graph(s));
      accumulate_dev(a, b, rep);
    }
  } else {
    Tensor rows = random_dense_rows(rng, original.input, n_samples);
    Tape t;
    ForwardInput in;
    in.rows = &rows;
    Tensor a = t.value(original.forward(t, in, GateMode::kEval, nullptr));
    Tensor b = compact.run(compact.restrict_rows(rows));
    accumulate_dev(a, b, rep);
  }
  rep.pass = rep.max_abs <= tol;
  return rep;
}

int64_t gated_param_count(const ModelGraph& g) {
  int64_t total = 0;
  for (Param* p : const_cast<ModelGraph&>(g).params()) total += p->value.numel();
  return total;
}

namespace {

void put_u8(std::vector<uint8_t>& out, uint8_t v) { out.push_back(v); }

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f64(std::vector<uint8_t>& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  put_u64(out, bits);
}

void put_str(std::vector<uint8_t>& out, const std::string& s) {
  if (s.size() > 0xffff) throw io_error("string too long to serialize");
  put_u16(out, static_cast<uint16_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

void put_tensor(std::vector<uint8_t>& out, const Tensor& t) {
  if (t.empty()) {
    put_u8(out, 0);
    return;
  }
  put_u8(out, static_cast<uint8_t>(t.rank()));
  for (size_t i = 0; i < t.rank(); ++i) put_u32(out, static_cast<uint32_t>(t.extent(i)));
  for (int64_t i = 0; i < t.numel(); ++i) put_f64(out, t[i]);
}

void put_idx_list(std::vector<uint8_t>& out, const std::vector<int32_t>& v) {
  put_u32(out, static_cast<uint32_t>(v.size()));
  for (int32_t i : v) put_u32(out, static_cast<uint32_t>(i));
}

void put_coord_list(std::vector<uint8_t>& out, const std::vector<int64_t>& v) {
  put_u32(out, static_cast<uint32_t>(v.size()));
  for (int64_t i : v) put_u32(out, static_cast<uint32_t>(i));
}

struct ByteReader {
  const std::vector<uint8_t>& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw io_error("truncated model stream");
  }
  uint8_t u8() {
    need(1);
    return buf[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(buf[pos]) | static_cast<uint16_t>(buf[pos + 1]) << 8;
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }
  std::string str() {
    uint16_t n = u16();
    need(n);
    std::string s(buf.begin() + static_cast<ptrdiff_t>(pos),
                  buf.begin() + static_cast<ptrdiff_t>(pos + n));
    pos += n;
    return s;
  }
  Tensor tensor() {
    uint8_t rank = u8();
    if (rank == 0) return Tensor();
    if (rank > 4) throw io_error("tensor rank " + std::to_string(rank) + " out of range");
    std::vector<int64_t> shape;
    for (uint8_t i = 0; i < rank; ++i) shape.push_back(static_cast<int64_t>(u32()));
    Tensor t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = f64();
    return t;
  }
  std::vector<int32_t> idx_list() {
    uint32_t n = u32();
    need(static_cast<size_t>(n) * 4);
    std::vector<int32_t> v(n);
    for (uint32_t i = 0; i < n; ++i) v[i] = static_cast<int32_t>(u32());
    return v;
  }
  std::vector<int64_t> coord_list() {
    uint32_t n = u32();
    need(static_cast<size_t>(n) * 4);
    std::vector<int64_t> v(n);
    for (uint32_t i = 0; i < n; ++i) v[i] = static_cast<int64_t>(u32());
    return v;
  }
};

void put_shape(std::vector<uint8_t>& out, const std::vector<int64_t>& s) {
  put_u8(out, static_cast<uint8_t>(s.size()));
  for (int64_t e : s) put_u32(out, static_cast<uint32_t>(e));
}

std::vector<int64_t> read_shape(ByteReader& r) {
  uint8_t n = r.u8();
  std::vector<int64_t> s(n);
  for (uint8_t i = 0; i < n; ++i) s[i] = static_cast<int64_t>(r.u32());
  return s;
}

void put_layer(std::vector<uint8_t>& out, const CompactLayer& l) {
  put_u8(out, static_cast<uint8_t>(l.kind));
  put_str(out, l.name);
  put_u8(out, static_cast<uint8_t>(l.inputs.size()));
  for (const std::string& in : l.inputs) put_str(out, in);
  put_str(out, l.activation);
  put_u8(out, l.has_bias ? 1 : 0);
  put_u32(out, static_cast<uint32_t>(l.stride));
  put_u32(out, static_cast<uint32_t>(l.pad));
  put_u32(out, static_cast<uint32_t>(l.heads));
  put_u32(out, static_cast<uint32_t>(l.col));
  put_shape(out, l.in_shape);
  put_shape(out, l.out_shape);
  for (const Tensor* t : {&l.W, &l.b, &l.eps_gin, &l.edge_embed, &l.W2, &l.b2, &l.root_embed,
                          &l.out_scale, &l.Wq, &l.Wk, &l.Wv, &l.Wo}) {
    put_tensor(out, *t);
  }
  put_idx_list(out, l.gather_q);
  put_idx_list(out, l.gather_k);
  put_idx_list(out, l.gather_v);
  put_u16(out, static_cast<uint16_t>(l.branch.size()));
  for (const CompactLayer& inner : l.branch) put_layer(out, inner);
  put_tensor(out, l.dead_branch_constant);
}

CompactLayer read_layer(ByteReader& r) {
  CompactLayer l;
  uint8_t kind = r.u8();
  if (kind > static_cast<uint8_t>(LayerKind::kMeanPool)) {
    throw io_error("unknown layer kind tag " + std::to_string(kind));
  }
  l.kind = static_cast<LayerKind>(kind);
  l.name = r.str();
  uint8_t nin = r.u8();
  for (uint8_t i = 0; i < nin; ++i) l.inputs.push_back(r.str());
  l.activation = r.str();
  l.has_bias = r.u8() != 0;
  l.stride = static_cast<int64_t>(r.u32());
  l.pad = static_cast<int64_t>(r.u32());
  l.heads = static_cast<int64_t>(r.u32());
  l.col = static_cast<int32_t>(r.u32());
  l.in_shape = read_shape(r);
  l.out_shape = read_shape(r);
  for (Tensor* t : {&l.W, &l.b, &l.eps_gin, &l.edge_embed, &l.W2, &l.b2, &l.root_embed,
                    &l.out_scale, &l.Wq, &l.Wk, &l.Wv, &l.Wo}) {
    *t = r.tensor();
  }
  l.gather_q = r.idx_list();
  l.gather_k = r.idx_list();
  l.gather_v = r.idx_list();
  uint16_t nb = r.u16();
  for (uint16_t i = 0; i < nb; ++i) l.branch.push_back(read_layer(r));
  l.dead_branch_constant = r.tensor();
  return l;
}

constexpr char kMagic[4] = {'L', 'U', 'M', '1'};
constexpr uint16_t kVersion = 1;

}  // namespace

std::vector<uint8_t> serialize(const CompactModel& m) {
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u16(out, kVersion);
  put_u32(out, static_cast<uint32_t>(m.layers.size()));

  put_u8(out, static_cast<uint8_t>(m.input.regime));
  for (int64_t v : {m.input.dim, m.input.id_cols, m.input.vocab, m.input.C, m.input.H, m.input.W,
                    m.input.T, m.input.d, m.input.node_dim, m.input.edge_dim}) {
    put_u32(out, static_cast<uint32_t>(std::max<int64_t>(0, v)));
  }
  put_coord_list(out, m.input_keep);
  put_str(out, m.output);

  for (const CompactLayer& l : m.layers) put_layer(out, l);

  uint32_t crc = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(out.size())));
  put_u32(out, crc);
  return out;
}

CompactModel deserialize(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 14) throw io_error("truncated model stream");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw io_error("bad model magic");

  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) {
    stored |= static_cast<uint32_t>(bytes[bytes.size() - 4 + static_cast<size_t>(i)]) << (8 * i);
  }
  uint32_t computed = static_cast<uint32_t>(crc32(
      0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size() - 4)));
  if (stored != computed) throw io_error("model checksum mismatch");

  ByteReader r{bytes};
  r.pos = 4;
  uint16_t version = r.u16();
  if (version != kVersion) {
    throw io_error("unsupported model version " + std::to_string(version));
  }
  uint32_t count = r.u32();

  CompactModel m;
  uint8_t regime = r.u8();
  if (regime > static_cast<uint8_t>(InputRegime::kGraph)) {
    throw io_error("unknown input regime tag " + std::to_string(regime));
  }
  m.input.regime = static_cast<InputRegime>(regime);
  int64_t* fields[] = {&m.input.dim, &m.input.id_cols, &m.input.vocab, &m.input.C, &m.input.H,
                       &m.input.W,   &m.input.T,       &m.input.d,     &m.input.node_dim,
                       &m.input.edge_dim};
  for (int64_t* f : fields) *f = static_cast<int64_t>(r.u32());
  m.input_keep = r.coord_list();
  m.output = r.str();
  for (uint32_t i = 0; i < count; ++i) m.layers.push_back(read_layer(r));
  if (r.pos != bytes.size() - 4) throw io_error("trailing bytes after model payload");
  return m;
}

void save_model(const CompactModel& m, const std::string& path) {
  std::vector<uint8_t> bytes = serialize(m);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw io_error("write failed for '" + path + "'");
}

CompactModel load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open '" + path + "'");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

void write_masks_file(const MaskTable& masks, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw io_error("cannot open '" + path + "' for writing");
  for (const auto& [name, lm] : masks.entries) {
    f << name << " in " << lm.input_mask.size() << "/" << lm.in_extent << ":";
    for (int64_t i : lm.input_mask) f << " " << i;
    f << "\n" << name << " out " << lm.output_mask.size() << "/" << lm.out_extent << ":";
    for (int64_t i : lm.output_mask) f << " " << i;
    f << "\n";
  }
  if (!f) throw io_error("write failed for '" + path + "'");
}

}  // namespace lumos
