#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lumos/gates.hpp"
#include "lumos/tape.hpp"

namespace lumos {

// Applies identity, relu, or sigmoid by tag.
Var apply_activation(Tape& t, const std::string& tag, Var x);

// Gate values on the tape: sampled hard-concrete draws in train mode,
// deterministic clip01(sigmoid(log_alpha)*(zeta-gamma)+gamma) in eval mode.
// Both paths are differentiable wrt log_alpha.
Var gate_values(Tape& t, GateVector& g, GateMode mode, RngStream* noise);

// out = act(x . (m o_rows W) + b): gating row j of W screens input feature j.
struct GatedFC {
  Param W;  // [n x k]
  Param b;  // [k]
  GateVector gate;  // length n
  std::string activation = "relu";
  bool has_bias = true;
};

// out = act(conv(x, m o_outchannels W) + b): gate d scales output channel d
// before bias and activation.
struct GatedConv2D {
  Param W;  // [D x C x kh x kw]
  Param b;  // [D]
  GateVector gate;  // length D
  int64_t stride = 1;
  int64_t pad = 0;
  std::string activation = "relu";
};

// out = act(((1+eps) * (m o X) + m o prop) . W) with prop summing, per
// destination node, neighbor features plus embedded edge features. One gate
// vector of the input width is applied at both sites.
struct GatedGIN {
  Param W;           // [n x k]
  Param eps_gin;     // [1]
  Param edge_embed;  // [e x n]
  GateVector gate;   // length n
  std::string activation = "relu";
};

// H' = X.W1 + b1; E' = E.W2 + b2; out = m o prop(H', E') + m o relu(H' + emb(root)).
// prop treats each stored edge as incident to both endpoints.
struct GatedGCN {
  Param W1;  // [n x d]
  Param b1;  // [d]
  Param W2;  // [e x d]
  Param b2;  // [d]
  Param root_embed;  // [2 x d], row 1 for the root node, row 0 otherwise
  GateVector gate;   // length d, shared by both terms
};

// Q = x.(mq o Wq), K = x.(mk o Wk), V = x.(mv o Wv);
// out = concat_heads(softmax(Qh.Kh^T / sqrt(dh)).Vh) . Wo. Wo is ungated.
struct GatedAttention {
  Param Wq, Wk, Wv;  // [d_model x proj]
  Param Wo;          // [proj x d_model]
  GateVector gate_q, gate_k, gate_v;  // length d_model each
  int64_t heads = 1;
};

struct EmbeddingTable {
  Param table;      // [vocab x width]
  int64_t col = 0;  // which id column of the input this table embeds
};

struct GraphSample {
  Tensor nodes;                                   // [v x n]
  Tensor edge_feats;                              // [E x e], unset when no edges
  std::vector<std::pair<int32_t, int32_t>> edges; // (src, dst) pairs
  int32_t root = 0;
  double target = 0.0;
  int32_t label = 0;
};

Var fc_forward(Tape& t, GatedFC& l, Var x, GateMode mode, RngStream* noise);
Var conv_forward(Tape& t, GatedConv2D& l, Var x, GateMode mode, RngStream* noise);
Var gin_forward(Tape& t, GatedGIN& l, Var nodes, const GraphSample& g, GateMode mode,
                RngStream* noise);
Var gcn_forward(Tape& t, GatedGCN& l, Var nodes, const GraphSample& g, int32_t root_index,
                GateMode mode, RngStream* noise);
Var attn_forward(Tape& t, GatedAttention& l, Var x, GateMode mode, RngStream* noise);

enum class LayerKind {
  kInput,
  kFc,
  kConv2d,
  kGin,
  kGcn,
  kAttention,
  kEmbedding,
  kFlatten,
  kConcat,
  kResidualBlock,
  kMeanPool,
};

const char* layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& s);

enum class InputRegime { kVector, kIds, kImage, kTokens, kGraph };

struct InputSpec {
  InputRegime regime = InputRegime::kVector;
  int64_t dim = 0;                    // vector width
  int64_t id_cols = 0, vocab = 0;     // ids
  int64_t C = 0, H = 0, W = 0;        // image
  int64_t T = 0, d = 0;               // tokens
  int64_t node_dim = 0, edge_dim = 0; // graph

  int64_t flat_dim() const;  // row width of a dense dataset sample
};

struct LayerNode {
  std::string name;
  LayerKind kind = LayerKind::kFc;
  std::vector<std::string> inputs;

  // declared extents (filled from config before finalize)
  int64_t units = 0;                        // fc/gin/gcn
  int64_t filters = 0, kh = 0, kw = 0;      // conv
  int64_t stride = 1, pad = 0;              // conv
  int64_t heads = 1, proj = 0;              // attention
  int64_t vocab = 0, width = 0, col = 0;    // embedding
  std::string activation;                   // empty = default by position
  bool gated = true;
  bool has_bias = true;

  std::vector<LayerNode> branch;  // residual_block inner chain (fc only)

  // Set when a fully-closed branch was deleted but its bias chain left a
  // nonzero constant; forward adds it to the skip path.
  Tensor dead_branch_constant;

  // resolved by finalize()
  std::vector<int64_t> in_shape, out_shape;  // per-sample extents

  GatedFC fc;
  GatedConv2D conv;
  GatedGIN gin;
  GatedGCN gcn;
  GatedAttention attn;
  EmbeddingTable embed;
};

// Dense-regime batches pass rows [B x flat]; the graph regime passes one
// sample at a time.
struct ForwardInput {
  const Tensor* rows = nullptr;
  const GraphSample* graph = nullptr;
};

class ModelGraph {
 public:
  InputSpec input;
  GateHyper hyper;
  std::vector<LayerNode> nodes;  // topological order
  std::string output;

  // Validates the DAG, infers every extent, allocates parameters and gates.
  // Weight streams split per parameter name; gate streams per gate name.
  void finalize(uint64_t seed);
  bool finalized() const { return finalized_; }

  Var forward(Tape& t, const ForwardInput& in, GateMode mode, RngStream* noise);

  std::vector<Param*> params();           // deterministic order, gates excluded
  std::vector<GateVector*> gates();       // deterministic order
  LayerNode& find(const std::string& name);
  const LayerNode& find(const std::string& name) const;
  bool has_node(const std::string& name) const;
  const std::vector<int64_t>& output_shape() const;

 private:
  void infer_shapes();
  void allocate(uint64_t seed);
  Var forward_dense(Tape& t, const Tensor& rows, GateMode mode, RngStream* noise);
  Var forward_sample(Tape& t, Var input_var, const GraphSample* g, GateMode mode,
                     RngStream* noise);
  bool finalized_ = false;
};

}  // namespace lumos
