#include "lumos/layers.hpp"

#include <cmath>
#include <map>
#include <set>

#include "lumos/errors.hpp"

namespace lumos {

Var apply_activation(Tape& t, const std::string& tag, Var x) {
  if (tag == "identity" || tag.empty()) return x;
  if (tag == "relu") return t.relu(x);
  if (tag == "sigmoid") return t.sigmoid(x);
  throw config_error("unknown activation '" + tag + "'");
}

Var gate_values(Tape& t, GateVector& g, GateMode mode, RngStream* noise) {
  if (!g.enabled) {
    Tensor ones({g.size()});
    ones.fill(1.0);
    return t.leaf(std::move(ones));
  }
  if (mode == GateMode::kTrain) {
    if (!noise) throw config_error("train-mode gates need a noise stream");
    return sample_train(t, g, *noise);
  }
  const GateHyper& h = g.hyper;
  Var s = t.sigmoid(t.param(g.log_alpha));
  return t.clip01(t.affine(s, h.zeta - h.gamma, h.gamma));
}

Var fc_forward(Tape& t, GatedFC& l, Var x, GateMode mode, RngStream* noise) {
  Var m = gate_values(t, l.gate, mode, noise);
  Var pre = t.matmul(x, t.scale_rows(t.param(l.W), m));
  if (l.has_bias) pre = t.add_row_vec(pre, t.param(l.b));
  return apply_activation(t, l.activation, pre);
}

Var conv_forward(Tape& t, GatedConv2D& l, Var x, GateMode mode, RngStream* noise) {
  Var m = gate_values(t, l.gate, mode, noise);
  Var pre = t.conv2d(x, t.scale_rows(t.param(l.W), m), l.stride, l.pad);
  pre = t.add_channel_bias(pre, t.param(l.b));
  return apply_activation(t, l.activation, pre);
}

namespace {

// Splits stored (src, dst) pairs into per-direction index vectors.
void edge_endpoints(const GraphSample& g, int64_t v, std::vector<int32_t>& src,
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

}  // namespace

Var gin_forward(Tape& t, GatedGIN& l, Var nodes, const GraphSample& g, GateMode mode,
                RngStream* noise) {
  const Tensor& xv = t.value(nodes);
  int64_t v = xv.extent(0);
  Var m = gate_values(t, l.gate, mode, noise);
  Var xg = t.scale_cols(nodes, m);
  Var one_plus_eps = t.affine(t.param(l.eps_gin), 1.0, 1.0);
  Var self_term = t.scale_by_scalar(xg, one_plus_eps);

  if (g.edges.empty()) return apply_activation(t, l.activation, t.matmul(self_term, t.param(l.W)));

  std::vector<int32_t> src, dst;
  edge_endpoints(g, v, src, dst);
  Var emb = t.matmul(t.leaf(g.edge_feats), t.param(l.edge_embed));  // [E x n]
  Var per_edge = t.add(t.gather_rows(nodes, src), emb);
  Var prop = t.scatter_add_rows(per_edge, dst, v);
  Var agg = t.add(self_term, t.scale_cols(prop, m));
  return apply_activation(t, l.activation, t.matmul(agg, t.param(l.W)));
}

Var gcn_forward(Tape& t, GatedGCN& l, Var nodes, const GraphSample& g, int32_t root_index,
                GateMode mode, RngStream* noise) {
  const Tensor& xv = t.value(nodes);
  int64_t v = xv.extent(0);
  if (root_index < 0 || root_index >= v) {
    throw config_error("root index " + std::to_string(root_index) + " out of range for " +
                       std::to_string(v) + " nodes");
  }
  Var m = gate_values(t, l.gate, mode, noise);
  Var h1 = t.add_row_vec(t.matmul(nodes, t.param(l.W1)), t.param(l.b1));  // [v x d]

  std::vector<int32_t> indicator(static_cast<size_t>(v), 0);
  indicator[static_cast<size_t>(root_index)] = 1;
  Var root_rows = t.gather_rows(t.param(l.root_embed), indicator);
  Var local = t.scale_cols(t.relu(t.add(h1, root_rows)), m);

  if (g.edges.empty()) return local;

  std::vector<int32_t> src, dst;
  edge_endpoints(g, v, src, dst);
  Var e1 = t.add_row_vec(t.matmul(t.leaf(g.edge_feats), t.param(l.W2)), t.param(l.b2));  // [E x d]
  // Each stored edge feeds both endpoints: node a receives H'[b] + E', node b
  // receives H'[a] + E'.
  Var fwd = t.add(t.gather_rows(h1, src), e1);
  Var bwd = t.add(t.gather_rows(h1, dst), e1);
  Var prop = t.add(t.scatter_add_rows(fwd, dst, v), t.scatter_add_rows(bwd, src, v));
  return t.add(t.scale_cols(prop, m), local);
}

Var attn_forward(Tape& t, GatedAttention& l, Var x, GateMode mode, RngStream* noise) {
  int64_t proj = l.Wq.value.extent(1);
  if (l.heads < 1 || proj % l.heads != 0) {
    throw config_error("attention head count " + std::to_string(l.heads) +
                       " must divide projection width " + std::to_string(proj));
  }
  Var mq = gate_values(t, l.gate_q, mode, noise);
  Var mk = gate_values(t, l.gate_k, mode, noise);
  Var mv = gate_values(t, l.gate_v, mode, noise);
  Var q = t.matmul(x, t.scale_rows(t.param(l.Wq), mq));
  Var k = t.matmul(x, t.scale_rows(t.param(l.Wk), mk));
  Var v = t.matmul(x, t.scale_rows(t.param(l.Wv), mv));

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
  return t.matmul(merged, t.param(l.Wo));
}

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kInput: return "input";
    case LayerKind::kFc: return "fc";
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kGin: return "gin";
    case LayerKind::kGcn: return "gcn";
    case LayerKind::kAttention: return "attention";
    case LayerKind::kEmbedding: return "embedding";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kConcat: return "concat";
    case LayerKind::kResidualBlock: return "residual_block";
    case LayerKind::kMeanPool: return "mean_pool";
  }
  return "?";
}

LayerKind layer_kind_from_name(const std::string& s) {
  if (s == "fc") return LayerKind::kFc;
  if (s == "conv2d") return LayerKind::kConv2d;
  if (s == "gin") return LayerKind::kGin;
  if (s == "gcn") return LayerKind::kGcn;
  if (s == "attention") return LayerKind::kAttention;
  if (s == "embedding") return LayerKind::kEmbedding;
  if (s == "flatten") return LayerKind::kFlatten;
  if (s == "concat") return LayerKind::kConcat;
  if (s == "residual_block") return LayerKind::kResidualBlock;
  if (s == "mean_pool") return LayerKind::kMeanPool;
  throw config_error("unknown layer kind '" + s + "'");
}

int64_t InputSpec::flat_dim() const {
  switch (regime) {
    case InputRegime::kVector: return dim;
    case InputRegime::kIds: return id_cols;
    case InputRegime::kImage: return C * H * W;
    case InputRegime::kTokens: return T * d;
    case InputRegime::kGraph: return 0;
  }
  return 0;
}

namespace {

std::vector<int64_t> input_node_shape(const InputSpec& in) {
  switch (in.regime) {
    case InputRegime::kVector:
      if (in.dim < 1) throw config_error("vector input needs a positive dim");
      return {in.dim};
    case InputRegime::kIds:
      if (in.id_cols < 1 || in.vocab < 2) {
        throw config_error("ids input needs id_cols >= 1 and vocab >= 2");
      }
      return {in.id_cols};
    case InputRegime::kImage:
      if (in.C < 1 || in.H < 1 || in.W < 1) throw config_error("image input needs C,H,W >= 1");
      return {in.C, in.H, in.W};
    case InputRegime::kTokens:
      if (in.T < 1 || in.d < 1) throw config_error("tokens input needs T,d >= 1");
      return {in.T, in.d};
    case InputRegime::kGraph:
      if (in.node_dim < 1 || in.edge_dim < 1) {
        throw config_error("graph input needs node_dim and edge_dim >= 1");
      }
      return {in.node_dim};
  }
  throw config_error("bad input regime");
}

int64_t feature_width(const std::vector<int64_t>& shape, const std::string& who) {
  if (shape.size() == 1) return shape[0];
  if (shape.size() == 2) return shape[1];  // tokens rows
  throw shape_error(who + " expects a feature vector input, got rank " +
                    std::to_string(shape.size()));
}

}  // namespace

void ModelGraph::finalize(uint64_t seed) {
  if (finalized_) throw config_error("model graph already finalized");
  if (nodes.empty()) throw config_error("model graph has no layers");
  infer_shapes();
  allocate(seed);
  if (output.empty()) output = nodes.back().name;
  if (!has_node(output)) throw config_error("output layer '" + output + "' does not exist");
  finalized_ = true;
}

void ModelGraph::infer_shapes() {
  hyper.validate();
  std::map<std::string, std::vector<int64_t>> shapes;
  shapes["input"] = input_node_shape(input);
  std::set<std::string> names{"input"};

  auto producer_shape = [&](const LayerNode& n, size_t i) -> const std::vector<int64_t>& {
    auto it = shapes.find(n.inputs[i]);
    if (it == shapes.end()) {
      throw config_error("layer '" + n.name + "' consumes unknown or later layer '" +
                         n.inputs[i] + "'");
    }
    return it->second;
  };

  for (LayerNode& n : nodes) {
    if (n.name.empty()) throw config_error("every layer needs a name");
    if (!names.insert(n.name).second) throw config_error("duplicate layer name '" + n.name + "'");
    if (n.inputs.empty()) n.inputs = {"input"};
    if (n.kind != LayerKind::kConcat && n.inputs.size() != 1) {
      throw config_error("layer '" + n.name + "' takes exactly one input");
    }

    switch (n.kind) {
      case LayerKind::kInput:
        throw config_error("'input' is implicit and cannot be declared");
      case LayerKind::kFc: {
        const auto& s = producer_shape(n, 0);
        int64_t in_w = feature_width(s, n.name);
        if (n.units < 1) throw config_error("fc '" + n.name + "' needs units >= 1");
        n.in_shape = s;
        n.out_shape = s.size() == 2 ? std::vector<int64_t>{s[0], n.units}
                                    : std::vector<int64_t>{n.units};
        if (n.activation.empty()) n.activation = "relu";
        (void)in_w;
        break;
      }
      case LayerKind::kConv2d: {
        const auto& s = producer_shape(n, 0);
        if (s.size() != 3) {
          throw config_error("conv2d '" + n.name + "' needs an image input [C,H,W]");
        }
        if (n.filters < 1 || n.kh < 1 || n.kw < 1) {
          throw config_error("conv2d '" + n.name + "' needs filters and kernel extents >= 1");
        }
        int64_t hspan = s[1] + 2 * n.pad - n.kh;
        int64_t wspan = s[2] + 2 * n.pad - n.kw;
        if (n.stride < 1 || hspan < 0 || wspan < 0 || hspan % n.stride || wspan % n.stride) {
          throw config_error("conv2d '" + n.name + "' output extent is not integral");
        }
        n.in_shape = s;
        n.out_shape = {n.filters, hspan / n.stride + 1, wspan / n.stride + 1};
        if (n.activation.empty()) n.activation = "relu";
        break;
      }
      case LayerKind::kGin:
      case LayerKind::kGcn: {
        if (input.regime != InputRegime::kGraph) {
          throw config_error("layer '" + n.name + "' requires the graph input regime");
        }
        const auto& s = producer_shape(n, 0);
        if (s.size() != 1) throw config_error("graph layer '" + n.name + "' input must be [n]");
        if (n.units < 1) throw config_error("layer '" + n.name + "' needs units >= 1");
        n.in_shape = s;
        n.out_shape = {n.units};
        if (n.activation.empty()) n.activation = n.kind == LayerKind::kGin ? "relu" : "identity";
        break;
      }
      case LayerKind::kAttention: {
        const auto& s = producer_shape(n, 0);
        if (s.size() != 2) {
          throw config_error("attention '" + n.name + "' needs a token input [T,d]");
        }
        if (n.proj < 1) throw config_error("attention '" + n.name + "' needs proj >= 1");
        if (n.heads < 1 || n.proj % n.heads != 0) {
          throw config_error("attention '" + n.name + "': heads must divide proj");
        }
        n.in_shape = s;
        n.out_shape = s;
        break;
      }
      case LayerKind::kEmbedding: {
        if (input.regime != InputRegime::kIds) {
          throw config_error("embedding '" + n.name + "' requires the ids input regime");
        }
        if (n.inputs[0] != "input") {
          throw config_error("embedding '" + n.name + "' must read the input ids directly");
        }
        if (n.col < 0 || n.col >= input.id_cols) {
          throw config_error("embedding '" + n.name + "' id column out of range");
        }
        if (n.width < 1) throw config_error("embedding '" + n.name + "' needs width >= 1");
        n.vocab = n.vocab > 0 ? n.vocab : input.vocab;
        n.in_shape = {input.id_cols};
        n.out_shape = {n.width};
        break;
      }
      case LayerKind::kFlatten: {
        const auto& s = producer_shape(n, 0);
        if (s.size() != 3) {
          throw config_error("flatten '" + n.name + "' needs an image input [C,H,W]");
        }
        n.in_shape = s;
        n.out_shape = {s[0] * s[1] * s[2]};
        break;
      }
      case LayerKind::kConcat: {
        if (n.inputs.size() < 2) {
          throw config_error("concat '" + n.name + "' needs at least two inputs");
        }
        const auto& first = producer_shape(n, 0);
        n.out_shape = first;
        for (size_t i = 1; i < n.inputs.size(); ++i) {
          const auto& s = producer_shape(n, i);
          if (s.size() != first.size()) {
            throw config_error("concat '" + n.name + "' mixes input ranks");
          }
          if (first.size() == 1) {
            n.out_shape[0] += s[0];
          } else if (first.size() == 3) {
            if (s[1] != first[1] || s[2] != first[2]) {
              throw config_error("concat '" + n.name + "' image extents disagree");
            }
            n.out_shape[0] += s[0];
          } else {
            throw config_error("concat '" + n.name + "' supports vectors or images");
          }
        }
        n.in_shape = n.out_shape;
        break;
      }
      case LayerKind::kResidualBlock: {
        const auto& s = producer_shape(n, 0);
        if (s.size() != 1) {
          throw config_error("residual_block '" + n.name + "' needs a vector input");
        }
        if (n.branch.empty()) {
          throw config_error("residual_block '" + n.name + "' needs branch layers");
        }
        std::vector<int64_t> cur = s;
        for (LayerNode& inner : n.branch) {
          if (inner.kind != LayerKind::kFc) {
            throw config_error("residual_block '" + n.name + "' branch supports fc layers only");
          }
          if (inner.units < 1) {
            throw config_error("branch layer '" + inner.name + "' needs units >= 1");
          }
          if (inner.name.empty()) throw config_error("branch layers need names");
          if (!names.insert(inner.name).second) {
            throw config_error("duplicate layer name '" + inner.name + "'");
          }
          inner.in_shape = cur;
          inner.out_shape = {inner.units};
          if (inner.activation.empty()) inner.activation = "relu";
          cur = inner.out_shape;
        }
        if (cur != s) {
          throw config_error("residual_block '" + n.name + "' branch must end at width " +
                             std::to_string(s[0]) + " to match the skip path");
        }
        n.in_shape = s;
        n.out_shape = s;
        break;
      }
      case LayerKind::kMeanPool: {
        const auto& s = producer_shape(n, 0);
        if (input.regime == InputRegime::kGraph) {
          if (s.size() != 1) throw config_error("mean_pool '" + n.name + "' input must be [n]");
          n.in_shape = s;
          n.out_shape = s;
        } else if (input.regime == InputRegime::kTokens) {
          if (s.size() != 2) throw config_error("mean_pool '" + n.name + "' needs [T,d] input");
          n.in_shape = s;
          n.out_shape = {s[1]};
        } else {
          throw config_error("mean_pool '" + n.name + "' requires tokens or graph regime");
        }
        break;
      }
    }
    shapes[n.name] = n.out_shape;
  }
}

namespace {

Tensor uniform_init(std::vector<int64_t> shape, double bound, RngStream rng) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

void ModelGraph::allocate(uint64_t seed) {
  RngStream root(seed);
  RngStream wstream = root.split("weights");
  RngStream gstream = root.split("gates");

  auto gate_for = [&](const std::string& name, int64_t width, bool enabled) {
    RngStream s = gstream.split(name);
    GateVector g(name, width, hyper, s);
    g.enabled = enabled;
    return g;
  };
  auto winit = [&](const std::string& name, std::vector<int64_t> shape, int64_t fan_in) {
    RngStream s = wstream.split(name);
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return Param(name, uniform_init(std::move(shape), bound, s));
  };
  auto zeros = [](const std::string& name, std::vector<int64_t> shape) {
    return Param(name, Tensor(std::move(shape)));
  };

  auto alloc_fc = [&](LayerNode& n) {
    int64_t in_w = feature_width(n.in_shape, n.name);
    n.fc.W = winit(n.name + "/W", {in_w, n.units}, in_w);
    n.fc.b = zeros(n.name + "/b", {n.units});
    n.fc.gate = gate_for(n.name + "/gate", in_w, n.gated);
    n.fc.activation = n.activation;
    n.fc.has_bias = n.has_bias;
  };

  for (LayerNode& n : nodes) {
    switch (n.kind) {
      case LayerKind::kFc:
        alloc_fc(n);
        break;
      case LayerKind::kConv2d: {
        int64_t fan = n.in_shape[0] * n.kh * n.kw;
        n.conv.W = winit(n.name + "/W", {n.filters, n.in_shape[0], n.kh, n.kw}, fan);
        n.conv.b = zeros(n.name + "/b", {n.filters});
        n.conv.gate = gate_for(n.name + "/gate", n.filters, n.gated);
        n.conv.stride = n.stride;
        n.conv.pad = n.pad;
        n.conv.activation = n.activation;
        break;
      }
      case LayerKind::kGin: {
        int64_t in_w = n.in_shape[0];
        n.gin.W = winit(n.name + "/W", {in_w, n.units}, in_w);
        n.gin.eps_gin = zeros(n.name + "/eps", {1});
        n.gin.edge_embed = winit(n.name + "/edge_embed", {input.edge_dim, in_w}, input.edge_dim);
        n.gin.gate = gate_for(n.name + "/gate", in_w, n.gated);
        n.gin.activation = n.activation;
        break;
      }
      case LayerKind::kGcn: {
        int64_t in_w = n.in_shape[0];
        n.gcn.W1 = winit(n.name + "/W1", {in_w, n.units}, in_w);
        n.gcn.b1 = zeros(n.name + "/b1", {n.units});
        n.gcn.W2 = winit(n.name + "/W2", {input.edge_dim, n.units}, input.edge_dim);
        n.gcn.b2 = zeros(n.name + "/b2", {n.units});
        n.gcn.root_embed = winit(n.name + "/root_embed", {2, n.units}, n.units);
        n.gcn.gate = gate_for(n.name + "/gate", n.units, n.gated);
        break;
      }
      case LayerKind::kAttention: {
        int64_t dm = n.in_shape[1];
        n.attn.Wq = winit(n.name + "/Wq", {dm, n.proj}, dm);
        n.attn.Wk = winit(n.name + "/Wk", {dm, n.proj}, dm);
        n.attn.Wv = winit(n.name + "/Wv", {dm, n.proj}, dm);
        n.attn.Wo = winit(n.name + "/Wo", {n.proj, dm}, n.proj);
        n.attn.gate_q = gate_for(n.name + "/gate_q", dm, n.gated);
        n.attn.gate_k = gate_for(n.name + "/gate_k", dm, n.gated);
        n.attn.gate_v = gate_for(n.name + "/gate_v", dm, n.gated);
        n.attn.heads = n.heads;
        break;
      }
      case LayerKind::kEmbedding: {
        n.embed.table = winit(n.name + "/table", {n.vocab, n.width}, n.width);
        n.embed.col = n.col;
        break;
      }
      case LayerKind::kResidualBlock: {
        for (LayerNode& inner : n.branch) {
          int64_t in_w = feature_width(inner.in_shape, inner.name);
          inner.fc.W = winit(inner.name + "/W", {in_w, inner.units}, in_w);
          inner.fc.b = zeros(inner.name + "/b", {inner.units});
          inner.fc.gate = gate_for(inner.name + "/gate", in_w, inner.gated);
          inner.fc.activation = inner.activation;
          inner.fc.has_bias = inner.has_bias;
        }
        break;
      }
      default:
        break;
    }
  }
}

std::vector<Param*> ModelGraph::params() {
  std::vector<Param*> out;
  auto push_fc = [&](LayerNode& n) {
    out.push_back(&n.fc.W);
    if (n.fc.has_bias) out.push_back(&n.fc.b);
  };
  for (LayerNode& n : nodes) {
    switch (n.kind) {
      case LayerKind::kFc:
        push_fc(n);
        break;
      case LayerKind::kConv2d:
        out.push_back(&n.conv.W);
        out.push_back(&n.conv.b);
        break;
      case LayerKind::kGin:
        out.push_back(&n.gin.W);
        out.push_back(&n.gin.eps_gin);
        out.push_back(&n.gin.edge_embed);
        break;
      case LayerKind::kGcn:
        out.push_back(&n.gcn.W1);
        out.push_back(&n.gcn.b1);
        out.push_back(&n.gcn.W2);
        out.push_back(&n.gcn.b2);
        out.push_back(&n.gcn.root_embed);
        break;
      case LayerKind::kAttention:
        out.push_back(&n.attn.Wq);
        out.push_back(&n.attn.Wk);
        out.push_back(&n.attn.Wv);
        out.push_back(&n.attn.Wo);
        break;
      case LayerKind::kEmbedding:
        out.push_back(&n.embed.table);
        break;
      case LayerKind::kResidualBlock:
        for (LayerNode& inner : n.branch) {
          out.push_back(&inner.fc.W);
          if (inner.fc.has_bias) out.push_back(&inner.fc.b);
        }
        break;
      default:
        break;
    }
  }
  return out;
}

std::vector<GateVector*> ModelGraph::gates() {
  std::vector<GateVector*> out;
  for (LayerNode& n : nodes) {
    switch (n.kind) {
      case LayerKind::kFc:
        if (n.fc.gate.enabled) out.push_back(&n.fc.gate);
        break;
      case LayerKind::kConv2d:
        if (n.conv.gate.enabled) out.push_back(&n.conv.gate);
        break;
      case LayerKind::kGin:
        if (n.gin.gate.enabled) out.push_back(&n.gin.gate);
        break;
      case LayerKind::kGcn:
        if (n.gcn.gate.enabled) out.push_back(&n.gcn.gate);
        break;
      case LayerKind::kAttention:
        if (n.attn.gate_q.enabled) {
          out.push_back(&n.attn.gate_q);
          out.push_back(&n.attn.gate_k);
          out.push_back(&n.attn.gate_v);
        }
        break;
      case LayerKind::kResidualBlock:
        for (LayerNode& inner : n.branch) {
          if (inner.fc.gate.enabled) out.push_back(&inner.fc.gate);
        }
        break;
      default:
        break;
    }
  }
  return out;
}

LayerNode& ModelGraph::find(const std::string& name) {
  for (LayerNode& n : nodes) {
    if (n.name == name) return n;
    if (n.kind == LayerKind::kResidualBlock) {
      for (LayerNode& inner : n.branch) {
        if (inner.name == name) return inner;
      }
    }
  }
  throw config_error("no layer named '" + name + "'");
}

const LayerNode& ModelGraph::find(const std::string& name) const {
  return const_cast<ModelGraph*>(this)->find(name);
}

bool ModelGraph::has_node(const std::string& name) const {
  for (const LayerNode& n : nodes) {
    if (n.name == name) return true;
  }
  return false;
}

const std::vector<int64_t>& ModelGraph::output_shape() const { return find(output).out_shape; }

Var ModelGraph::forward_sample(Tape& t, Var input_var, const GraphSample* g, GateMode mode,
                               RngStream* noise) {
  std::map<std::string, Var> vals;
  vals["input"] = input_var;

  for (LayerNode& n : nodes) {
    auto in_var = [&](size_t i) {
      auto it = vals.find(n.inputs[i]);
      if (it == vals.end()) throw config_error("missing producer '" + n.inputs[i] + "'");
      return it->second;
    };
    Var out;
    switch (n.kind) {
      case LayerKind::kFc:
        out = fc_forward(t, n.fc, in_var(0), mode, noise);
        break;
      case LayerKind::kConv2d:
        out = conv_forward(t, n.conv, in_var(0), mode, noise);
        break;
      case LayerKind::kGin:
        if (!g) throw config_error("gin layer needs a graph sample");
        out = gin_forward(t, n.gin, in_var(0), *g, mode, noise);
        break;
      case LayerKind::kGcn:
        if (!g) throw config_error("gcn layer needs a graph sample");
        out = gcn_forward(t, n.gcn, in_var(0), *g, g->root, mode, noise);
        break;
      case LayerKind::kAttention:
        out = attn_forward(t, n.attn, in_var(0), mode, noise);
        break;
      case LayerKind::kEmbedding: {
        const Tensor& rows = t.value(in_var(0));
        std::vector<int32_t> idx;
        for (int64_t i = 0; i < rows.extent(0); ++i) {
          double raw = rows.at2(i, n.embed.col);
          auto id = static_cast<int64_t>(raw);
          if (static_cast<double>(id) != raw || id < 0 || id >= n.vocab) {
            throw config_error("embedding '" + n.name + "' got invalid id " +
                               std::to_string(raw));
          }
          idx.push_back(static_cast<int32_t>(id));
        }
        out = t.gather_rows(t.param(n.embed.table), idx);
        break;
      }
      case LayerKind::kFlatten: {
        const Tensor& xv = t.value(in_var(0));
        out = t.reshape(in_var(0), {xv.extent(0), xv.extent(1) * xv.extent(2) * xv.extent(3)});
        break;
      }
      case LayerKind::kConcat: {
        std::vector<Var> parts;
        for (size_t i = 0; i < n.inputs.size(); ++i) parts.push_back(in_var(i));
        out = t.concat_axis(parts, 1);
        break;
      }
      case LayerKind::kResidualBlock: {
        Var x = in_var(0);
        if (n.branch.empty()) {
          if (n.dead_branch_constant.empty()) {
            throw config_error("residual_block '" + n.name + "' has no branch");
          }
          out = t.add_row_vec(x, t.leaf(n.dead_branch_constant));
          break;
        }
        Var cur = x;
        for (LayerNode& inner : n.branch) {
          cur = fc_forward(t, inner.fc, cur, mode, noise);
        }
        out = t.add(x, cur);
        break;
      }
      case LayerKind::kMeanPool: {
        const Tensor& xv = t.value(in_var(0));
        int64_t r = xv.extent(0);
        Tensor ones({1, r});
        ones.fill(1.0);
        out = t.affine(t.matmul(t.leaf(std::move(ones)), in_var(0)), 1.0 / static_cast<double>(r),
                       0.0);
        break;
      }
      case LayerKind::kInput:
        throw config_error("unexpected input node");
    }
    vals[n.name] = out;
  }
  auto it = vals.find(output);
  if (it == vals.end()) throw config_error("output layer '" + output + "' was not computed");
  return it->second;
}

Var ModelGraph::forward(Tape& t, const ForwardInput& in, GateMode mode, RngStream* noise) {
  if (!finalized_) throw config_error("model graph not finalized");
  if (input.regime == InputRegime::kGraph) {
    if (!in.graph) throw config_error("graph regime forward needs a graph sample");
    if (in.graph->nodes.extent(1) != input.node_dim) {
      throw shape_error("graph sample node width " +
                        std::to_string(in.graph->nodes.extent(1)) + " != configured " +
                        std::to_string(input.node_dim));
    }
    Var x = t.leaf(in.graph->nodes);
    return forward_sample(t, x, in.graph, mode, noise);
  }
  if (!in.rows) throw config_error("dense regime forward needs batch rows");
  return forward_dense(t, *in.rows, mode, noise);
}

Var ModelGraph::forward_dense(Tape& t, const Tensor& rows, GateMode mode, RngStream* noise) {
  if (rows.rank() != 2 || rows.extent(1) != input.flat_dim()) {
    throw shape_error("batch rows must be [B x " + std::to_string(input.flat_dim()) + "], got " +
                      rows.shape_str());
  }
  int64_t B = rows.extent(0);
  switch (input.regime) {
    case InputRegime::kVector:
    case InputRegime::kIds: {
      Var x = t.leaf(rows);
      return forward_sample(t, x, nullptr, mode, noise);
    }
    case InputRegime::kImage: {
      Var x = t.reshape(t.leaf(rows), {B, input.C, input.H, input.W});
      return forward_sample(t, x, nullptr, mode, noise);
    }
    case InputRegime::kTokens: {
      // Attention mixes across rows, so samples run one by one.
      Var batch = t.leaf(rows);
      std::vector<Var> outs;
      for (int64_t i = 0; i < B; ++i) {
        Var row = t.gather_rows(batch, {static_cast<int32_t>(i)});
        Var x = t.reshape(row, {input.T, input.d});
        outs.push_back(forward_sample(t, x, nullptr, mode, noise));
      }
      return outs.size() == 1 ? outs[0] : t.concat_axis(outs, 0);
    }
    case InputRegime::kGraph:
      throw config_error("graph regime does not take dense rows");
  }
  throw config_error("bad input regime");
}

}  // namespace lumos
