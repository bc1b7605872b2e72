#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lumos/rng.hpp"
#include "lumos/tensor.hpp"

namespace lumos {

// Persistent trainable tensor. The tape snapshots the value at node creation
// and accumulates into grad during backward; optimizers consume grad and
// zero it between steps.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor(value.shape());
  }
  void zero_grad() { grad.fill(0.0); }
};

enum class Op : uint8_t {
  kLeaf,
  kParam,
  kAdd,
  kSub,
  kMul,
  kAffine,           // a*x + b with scalar constants
  kScaleByScalar,    // x * s where s is a [1] node
  kMatmul,
  kTranspose,
  kAddRowVec,        // [m,k] + v[k]
  kScaleCols,        // [m,n] * v[n], column j scaled by v[j]
  kScaleRows,        // [r,...] * v[r], leading-axis slice i scaled by v[i]
  kConv2d,
  kAddChannelBias,   // [N,D,H,W] + b[D]
  kSigmoid,
  kRelu,
  kLog,
  kExp,
  kClip01,
  kSum,
  kMean,
  kSoftmaxRows,
  kGatherRows,
  kScatterAddRows,
  kConcat,
  kSliceCols,
  kReshape,
  kCrossEntropyLogits,
};

const char* op_name(Op op);

struct TapeNode {
  Op op = Op::kLeaf;
  std::vector<int32_t> in;
  Tensor value;
  Tensor grad;
  double a = 0.0, b = 0.0;                 // scalar payloads (affine coefficients)
  int64_t i0 = 0, i1 = 0, i2 = 0, i3 = 0;  // op-specific integers
  std::vector<int32_t> idx;                // gather/scatter/label indices
  Param* param = nullptr;
};

struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Record-and-replay reverse-mode tape. Nodes are appended in forward order,
// which is already a topological order, so backward is a single reverse
// sweep visiting each node once. Every forward op finite-checks its output
// and raises numeric_error naming the op on the first NaN/Inf.
class Tape {
 public:
  Var leaf(Tensor v);
  Var param(Param& p);
  // Fresh uniform draws on [lo,hi) entering the graph as a constant leaf:
  // gradients stop here, differentiability is through the other operands.
  Var uniform_sample(const std::vector<int64_t>& shape, double lo, double hi, RngStream& rng);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var affine(Var x, double a, double b);
  Var scale_by_scalar(Var x, Var s);
  Var matmul(Var a, Var b);
  Var transpose(Var x);
  Var add_row_vec(Var x, Var v);
  Var scale_cols(Var x, Var v);
  Var scale_rows(Var w, Var v);
  Var conv2d(Var x, Var w, int64_t stride, int64_t pad);
  Var add_channel_bias(Var x, Var b);
  Var sigmoid(Var x);
  Var relu(Var x);
  Var log(Var x);
  Var exp(Var x);
  Var clip01(Var x);
  Var sum(Var x);
  Var mean(Var x);
  Var softmax_rows(Var x);
  Var gather_rows(Var x, const std::vector<int32_t>& rows);
  Var scatter_add_rows(Var x, const std::vector<int32_t>& rows, int64_t out_rows);
  Var concat_axis(const std::vector<Var>& parts, int64_t axis);
  Var slice_cols(Var x, int64_t start, int64_t len);
  Var reshape(Var x, std::vector<int64_t> shape);
  Var cross_entropy_logits(Var z, const std::vector<int32_t>& labels);

  void backward(Var root);

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v);  // zeros if the node was never reached in backward
  size_t size() const { return nodes_.size(); }

 private:
  Var push(TapeNode n);
  const TapeNode& node(Var v) const;
  Tensor& grad_slot(int32_t id);
  void backward_one(int32_t id);

  std::vector<TapeNode> nodes_;
  bool backward_done_ = false;
};

}  // namespace lumos
