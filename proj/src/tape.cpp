#include "lumos/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "lumos/errors.hpp"
#include "lumos/kernels.hpp"

namespace lumos {

namespace {

namespace ker = kernels;

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw shape_error(msg);
}

struct ConvDims {
  int64_t N, C, H, W, D, kh, kw, s, p, Ho, Wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int64_t stride, int64_t pad) {
  require(x.rank() == 4, "conv2d input must be [N,C,H,W], got " + x.shape_str());
  require(w.rank() == 4, "conv2d kernel must be [D,C,kh,kw], got " + w.shape_str());
  require(x.extent(1) == w.extent(1),
          "conv2d channel mismatch: input " + x.shape_str() + " kernel " + w.shape_str());
  if (stride < 1) throw config_error("conv2d stride must be >= 1");
  if (pad < 0) throw config_error("conv2d padding must be >= 0");
  ConvDims d{x.extent(0), x.extent(1), x.extent(2), x.extent(3),
             w.extent(0), w.extent(2), w.extent(3), stride, pad, 0, 0};
  int64_t hspan = d.H + 2 * pad - d.kh;
  int64_t wspan = d.W + 2 * pad - d.kw;
  if (hspan < 0 || wspan < 0 || hspan % stride != 0 || wspan % stride != 0) {
    throw config_error("conv2d output extent is not integral for input " + x.shape_str() +
                       " kernel " + w.shape_str() + " stride " + std::to_string(stride) +
                       " pad " + std::to_string(pad));
  }
  d.Ho = hspan / stride + 1;
  d.Wo = wspan / stride + 1;
  return d;
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kParam: return "param";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kAffine: return "affine";
    case Op::kScaleByScalar: return "scale_by_scalar";
    case Op::kMatmul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kAddRowVec: return "add_row_vec";
    case Op::kScaleCols: return "scale_cols";
    case Op::kScaleRows: return "scale_rows";
    case Op::kConv2d: return "conv2d";
    case Op::kAddChannelBias: return "add_channel_bias";
    case Op::kSigmoid: return "sigmoid";
    case Op::kRelu: return "relu";
    case Op::kLog: return "log";
    case Op::kExp: return "exp";
    case Op::kClip01: return "clip01";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kSoftmaxRows: return "softmax_rows";
    case Op::kGatherRows: return "gather_rows";
    case Op::kScatterAddRows: return "scatter_add_rows";
    case Op::kConcat: return "concat";
    case Op::kSliceCols: return "slice_cols";
    case Op::kReshape: return "reshape";
    case Op::kCrossEntropyLogits: return "cross_entropy_logits";
  }
  return "?";
}

Var Tape::push(TapeNode n) {
  const double* p = n.value.data();
  for (int64_t i = 0; i < n.value.numel(); ++i) {
    if (!std::isfinite(p[i])) {
      throw numeric_error(std::string("non-finite value in ") + op_name(n.op) + " output at node " +
                          std::to_string(nodes_.size()) + ", flat index " + std::to_string(i));
    }
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

const TapeNode& Tape::node(Var v) const {
  if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size()) {
    throw config_error("invalid tape handle");
  }
  return nodes_[static_cast<size_t>(v.id)];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

const Tensor& Tape::grad(Var v) {
  const TapeNode& n = node(v);
  if (n.grad.empty()) {
    nodes_[static_cast<size_t>(v.id)].grad = Tensor(n.value.shape());
  }
  return nodes_[static_cast<size_t>(v.id)].grad;
}

Tensor& Tape::grad_slot(int32_t id) {
  TapeNode& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

Var Tape::leaf(Tensor v) {
  TapeNode n;
  n.op = Op::kLeaf;
  n.value = std::move(v);
  return push(std::move(n));
}

Var Tape::param(Param& p) {
  TapeNode n;
  n.op = Op::kParam;
  n.value = p.value;
  n.param = &p;
  return push(std::move(n));
}

Var Tape::uniform_sample(const std::vector<int64_t>& shape, double lo, double hi, RngStream& rng) {
  if (!(lo < hi)) throw config_error("uniform_sample requires lo < hi");
  Tensor t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  TapeNode n;
  n.op = Op::kLeaf;
  n.value = std::move(t);
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.same_shape(tb), "add shape mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
  TapeNode n;
  n.op = Op::kAdd;
  n.in = {a.id, b.id};
  n.value = Tensor(ta.shape());
  ker::active().add(n.value.data(), ta.data(), tb.data(), static_cast<size_t>(ta.numel()));
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.same_shape(tb), "sub shape mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
  TapeNode n;
  n.op = Op::kSub;
  n.in = {a.id, b.id};
  n.value = Tensor(ta.shape());
  ker::active().sub(n.value.data(), ta.data(), tb.data(), static_cast<size_t>(ta.numel()));
  return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.same_shape(tb), "mul shape mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
  TapeNode n;
  n.op = Op::kMul;
  n.in = {a.id, b.id};
  n.value = Tensor(ta.shape());
  ker::active().mul(n.value.data(), ta.data(), tb.data(), static_cast<size_t>(ta.numel()));
  return push(std::move(n));
}

Var Tape::affine(Var x, double a, double b) {
  const Tensor& tx = value(x);
  TapeNode n;
  n.op = Op::kAffine;
  n.in = {x.id};
  n.a = a;
  n.b = b;
  n.value = Tensor(tx.shape());
  for (int64_t i = 0; i < tx.numel(); ++i) n.value[i] = a * tx[i] + b;
  return push(std::move(n));
}

Var Tape::scale_by_scalar(Var x, Var s) {
  const Tensor& tx = value(x);
  const Tensor& ts = value(s);
  require(ts.numel() == 1, "scale_by_scalar scale must be a [1] node, got " + ts.shape_str());
  TapeNode n;
  n.op = Op::kScaleByScalar;
  n.in = {x.id, s.id};
  n.value = Tensor(tx.shape());
  ker::active().scale(n.value.data(), tx.data(), ts[0], static_cast<size_t>(tx.numel()));
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.rank() == 2 && tb.rank() == 2,
          "matmul needs rank-2 operands: " + ta.shape_str() + " vs " + tb.shape_str());
  require(ta.extent(1) == tb.extent(0),
          "matmul inner dimension mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
  TapeNode n;
  n.op = Op::kMatmul;
  n.in = {a.id, b.id};
  n.value = Tensor({ta.extent(0), tb.extent(1)});
  ker::active().matmul(n.value.data(), ta.data(), tb.data(), static_cast<size_t>(ta.extent(0)),
                       static_cast<size_t>(ta.extent(1)), static_cast<size_t>(tb.extent(1)));
  return push(std::move(n));
}

namespace {
Tensor transpose2d(const Tensor& x) {
  Tensor t({x.extent(1), x.extent(0)});
  for (int64_t i = 0; i < x.extent(0); ++i)
    for (int64_t j = 0; j < x.extent(1); ++j) t.at2(j, i) = x.at2(i, j);
  return t;
}
}  // namespace

Var Tape::transpose(Var x) {
  const Tensor& tx = value(x);
  require(tx.rank() == 2, "transpose needs a rank-2 operand, got " + tx.shape_str());
  TapeNode n;
  n.op = Op::kTranspose;
  n.in = {x.id};
  n.value = transpose2d(tx);
  return push(std::move(n));
}

Var Tape::add_row_vec(Var x, Var v) {
  const Tensor& tx = value(x);
  const Tensor& tv = value(v);
  require(tx.rank() == 2 && tv.rank() == 1 && tv.extent(0) == tx.extent(1),
          "add_row_vec expects [m,k] + [k]: " + tx.shape_str() + " vs " + tv.shape_str());
  TapeNode n;
  n.op = Op::kAddRowVec;
  n.in = {x.id, v.id};
  n.value = Tensor(tx.shape());
  for (int64_t i = 0; i < tx.extent(0); ++i) {
    ker::active().add(n.value.data() + i * tx.extent(1), tx.data() + i * tx.extent(1), tv.data(),
                      static_cast<size_t>(tx.extent(1)));
  }
  return push(std::move(n));
}

Var Tape::scale_cols(Var x, Var v) {
  const Tensor& tx = value(x);
  const Tensor& tv = value(v);
  require(tx.rank() == 2 && tv.rank() == 1 && tv.extent(0) == tx.extent(1),
          "scale_cols expects [m,n] * [n]: " + tx.shape_str() + " vs " + tv.shape_str());
  TapeNode n;
  n.op = Op::kScaleCols;
  n.in = {x.id, v.id};
  n.value = Tensor(tx.shape());
  for (int64_t i = 0; i < tx.extent(0); ++i) {
    ker::active().mul(n.value.data() + i * tx.extent(1), tx.data() + i * tx.extent(1), tv.data(),
                      static_cast<size_t>(tx.extent(1)));
  }
  return push(std::move(n));
}

Var Tape::scale_rows(Var w, Var v) {
  const Tensor& tw = value(w);
  const Tensor& tv = value(v);
  require(tw.rank() >= 2 && tv.rank() == 1 && tv.extent(0) == tw.extent(0),
          "scale_rows expects leading extent match: " + tw.shape_str() + " vs " + tv.shape_str());
  int64_t stride = tw.numel() / tw.extent(0);
  TapeNode n;
  n.op = Op::kScaleRows;
  n.in = {w.id, v.id};
  n.value = Tensor(tw.shape());
  for (int64_t i = 0; i < tw.extent(0); ++i) {
    ker::active().scale(n.value.data() + i * stride, tw.data() + i * stride, tv[i],
                        static_cast<size_t>(stride));
  }
  return push(std::move(n));
}

Var Tape::conv2d(Var x, Var w, int64_t stride, int64_t pad) {
  const Tensor& tx = value(x);
  const Tensor& tw = value(w);
  ConvDims d = conv_dims(tx, tw, stride, pad);
  TapeNode n;
  n.op = Op::kConv2d;
  n.in = {x.id, w.id};
  n.i0 = stride;
  n.i1 = pad;
  n.value = Tensor({d.N, d.D, d.Ho, d.Wo});
  for (int64_t nn = 0; nn < d.N; ++nn) {
    for (int64_t dd = 0; dd < d.D; ++dd) {
      for (int64_t oy = 0; oy < d.Ho; ++oy) {
        for (int64_t ox = 0; ox < d.Wo; ++ox) {
          double acc = 0.0;
          for (int64_t c = 0; c < d.C; ++c) {
            for (int64_t ky = 0; ky < d.kh; ++ky) {
              int64_t iy = oy * d.s + ky - d.p;
              if (iy < 0 || iy >= d.H) continue;
              for (int64_t kx = 0; kx < d.kw; ++kx) {
                int64_t ix = ox * d.s + kx - d.p;
                if (ix < 0 || ix >= d.W) continue;
                acc += tx.at4(nn, c, iy, ix) * tw.at4(dd, c, ky, kx);
              }
            }
          }
          n.value.at4(nn, dd, oy, ox) = acc;
        }
      }
    }
  }
  return push(std::move(n));
}

Var Tape::add_channel_bias(Var x, Var b) {
  const Tensor& tx = value(x);
  const Tensor& tb = value(b);
  require(tx.rank() == 4 && tb.rank() == 1 && tb.extent(0) == tx.extent(1),
          "add_channel_bias expects [N,D,H,W] + [D]: " + tx.shape_str() + " vs " + tb.shape_str());
  TapeNode n;
  n.op = Op::kAddChannelBias;
  n.in = {x.id, b.id};
  n.value = Tensor(tx.shape());
  int64_t hw = tx.extent(2) * tx.extent(3);
  for (int64_t nn = 0; nn < tx.extent(0); ++nn) {
    for (int64_t dd = 0; dd < tx.extent(1); ++dd) {
      const double* src = tx.data() + (nn * tx.extent(1) + dd) * hw;
      double* dst = n.value.data() + (nn * tx.extent(1) + dd) * hw;
      for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + tb[dd];
    }
  }
  return push(std::move(n));
}

Var Tape::sigmoid(Var x) {
  const Tensor& tx = value(x);
  TapeNode n;
  n.op = Op::kSigmoid;
  n.in = {x.id};
  n.value = Tensor(tx.shape());
  for (int64_t i = 0; i < tx.numel(); ++i) n.value[i] = stable_sigmoid(tx[i]);
  return push(std::move(n));
}

Var Tape::relu(Var x) {
  const Tensor& tx = value(x);
  TapeNode n;
  n.op = Op::kRelu;
  n.in = {x.id};
  n.value = Tensor(tx.shape());
  for (int64_t i = 0; i < tx.numel(); ++i) n.value[i] = tx[i] > 0.0 ? tx[i] : 0.0;
  return push(std::move(n));
}

Var Tape::log(Var x) {
  const Tensor& tx = value(x);
  TapeNode n;
  n.op = Op::kLog;
  n.in = {x.id};
  n.value = Tensor(tx.shape());
  for (int64_t i = 0; i < tx.numel(); ++i) {
    if (!(tx[i] > 0.0)) {
      throw numeric_error("log domain error at flat index " + std::to_string(i) + ": " +
                          std::to_string(tx[i]));
    }
    n.value[i] = std::log(tx[i]);
  }
  return push(std::move(n));
}

Var Tape::exp(Var x) {
  const Tensor& tx = value(x);
  TapeNode n;
  n.op = Op::kExp;
  n.in = {x.id};
  n.value = Tensor(tx.shape());
  for (int64_t i = 0; i < tx.numel(); ++i) n.value[i] = std::exp(tx[i]);
  return push(std::move(n));
}

Var Tape::clip01(Var x) {
  const Tensor& tx = value(x);
  TapeNode n;
  n.op = Op::kClip01;
  n.in = {x.id};
  n.value = Tensor(tx.shape());
  for (int64_t i = 0; i < tx.numel(); ++i) n.value[i] = std::min(1.0, std::max(0.0, tx[i]));
  return push(std::move(n));
}

Var Tape::sum(Var x) {
  const Tensor& tx = value(x);
  double acc = 0.0;
  for (int64_t i = 0; i < tx.numel(); ++i) acc += tx[i];
  TapeNode n;
  n.op = Op::kSum;
  n.in = {x.id};
  n.value = Tensor::scalar(acc);
  return push(std::move(n));
}

Var Tape::mean(Var x) {
  const Tensor& tx = value(x);
  double acc = 0.0;
  for (int64_t i = 0; i < tx.numel(); ++i) acc += tx[i];
  TapeNode n;
  n.op = Op::kMean;
  n.in = {x.id};
  n.value = Tensor::scalar(acc / static_cast<double>(tx.numel()));
  return push(std::move(n));
}

Var Tape::softmax_rows(Var x) {
  const Tensor& tx = value(x);
  require(tx.rank() == 2, "softmax_rows needs a rank-2 operand, got " + tx.shape_str());
  TapeNode n;
  n.op = Op::kSoftmaxRows;
  n.in = {x.id};
  n.value = Tensor(tx.shape());
  int64_t m = tx.extent(0), k = tx.extent(1);
  for (int64_t i = 0; i < m; ++i) {
    double mx = tx.at2(i, 0);
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, tx.at2(i, j));
    double denom = 0.0;
    for (int64_t j = 0; j < k; ++j) {
      double e = std::exp(tx.at2(i, j) - mx);
      n.value.at2(i, j) = e;
      denom += e;
    }
    for (int64_t j = 0; j < k; ++j) n.value.at2(i, j) /= denom;
  }
  return push(std::move(n));
}

Var Tape::gather_rows(Var x, const std::vector<int32_t>& rows) {
  const Tensor& tx = value(x);
  require(tx.rank() >= 2, "gather_rows needs rank >= 2, got " + tx.shape_str());
  if (rows.empty()) throw config_error("gather_rows requires a non-empty index list");
  for (int32_t r : rows) {
    if (r < 0 || r >= tx.extent(0)) {
      throw config_error("gather_rows index " + std::to_string(r) + " out of range for " +
                         tx.shape_str());
    }
  }
  int64_t stride = tx.numel() / tx.extent(0);
  std::vector<int64_t> shape = tx.shape();
  shape[0] = static_cast<int64_t>(rows.size());
  TapeNode n;
  n.op = Op::kGatherRows;
  n.in = {x.id};
  n.idx = rows;
  n.value = Tensor(shape);
  for (size_t t = 0; t < rows.size(); ++t) {
    std::memcpy(n.value.data() + static_cast<int64_t>(t) * stride, tx.data() + rows[t] * stride,
                static_cast<size_t>(stride) * sizeof(double));
  }
  return push(std::move(n));
}

Var Tape::scatter_add_rows(Var x, const std::vector<int32_t>& rows, int64_t out_rows) {
  const Tensor& tx = value(x);
  require(tx.rank() >= 2, "scatter_add_rows needs rank >= 2, got " + tx.shape_str());
  if (static_cast<int64_t>(rows.size()) != tx.extent(0)) {
    throw shape_error("scatter_add_rows needs one destination per input row");
  }
  if (out_rows < 1) throw config_error("scatter_add_rows output rows must be >= 1");
  for (int32_t r : rows) {
    if (r < 0 || r >= out_rows) {
      throw config_error("scatter_add_rows index " + std::to_string(r) + " out of range for " +
                         std::to_string(out_rows) + " rows");
    }
  }
  int64_t stride = tx.numel() / tx.extent(0);
  std::vector<int64_t> shape = tx.shape();
  shape[0] = out_rows;
  TapeNode n;
  n.op = Op::kScatterAddRows;
  n.in = {x.id};
  n.idx = rows;
  n.i0 = out_rows;
  n.value = Tensor(shape);
  for (size_t t = 0; t < rows.size(); ++t) {
    ker::active().add(n.value.data() + rows[t] * stride, n.value.data() + rows[t] * stride,
                      tx.data() + static_cast<int64_t>(t) * stride, static_cast<size_t>(stride));
  }
  return push(std::move(n));
}

Var Tape::concat_axis(const std::vector<Var>& parts, int64_t axis) {
  if (parts.empty()) throw config_error("concat_axis requires at least one input");
  const Tensor& first = value(parts[0]);
  if (axis < 0 || axis >= static_cast<int64_t>(first.rank())) {
    throw config_error("concat_axis axis " + std::to_string(axis) + " out of range for " +
                       first.shape_str());
  }
  std::vector<int64_t> shape = first.shape();
  int64_t total = first.extent(static_cast<size_t>(axis));
  for (size_t i = 1; i < parts.size(); ++i) {
    const Tensor& t = value(parts[i]);
    require(t.rank() == first.rank(), "concat_axis rank mismatch");
    for (size_t ax = 0; ax < t.rank(); ++ax) {
      if (static_cast<int64_t>(ax) == axis) continue;
      require(t.extent(ax) == first.extent(ax),
              "concat_axis extent mismatch off-axis: " + t.shape_str() + " vs " + first.shape_str());
    }
    total += t.extent(static_cast<size_t>(axis));
  }
  shape[static_cast<size_t>(axis)] = total;

  int64_t outer = 1;
  for (int64_t ax = 0; ax < axis; ++ax) outer *= first.extent(static_cast<size_t>(ax));
  int64_t inner = 1;
  for (size_t ax = static_cast<size_t>(axis) + 1; ax < first.rank(); ++ax) inner *= first.extent(ax);

  TapeNode n;
  n.op = Op::kConcat;
  n.i0 = axis;
  n.value = Tensor(shape);
  for (const Var& v : parts) n.in.push_back(v.id);

  int64_t off = 0;
  for (const Var& v : parts) {
    const Tensor& t = value(v);
    int64_t ext = t.extent(static_cast<size_t>(axis));
    for (int64_t o = 0; o < outer; ++o) {
      std::memcpy(n.value.data() + (o * total + off) * inner, t.data() + o * ext * inner,
                  static_cast<size_t>(ext * inner) * sizeof(double));
    }
    off += ext;
  }
  return push(std::move(n));
}

Var Tape::slice_cols(Var x, int64_t start, int64_t len) {
  const Tensor& tx = value(x);
  require(tx.rank() == 2, "slice_cols needs a rank-2 operand, got " + tx.shape_str());
  if (start < 0 || len < 1 || start + len > tx.extent(1)) {
    throw config_error("slice_cols range [" + std::to_string(start) + "," +
                       std::to_string(start + len) + ") out of bounds for " + tx.shape_str());
  }
  TapeNode n;
  n.op = Op::kSliceCols;
  n.in = {x.id};
  n.i0 = start;
  n.i1 = len;
  n.value = Tensor({tx.extent(0), len});
  for (int64_t i = 0; i < tx.extent(0); ++i) {
    std::memcpy(n.value.data() + i * len, tx.data() + i * tx.extent(1) + start,
                static_cast<size_t>(len) * sizeof(double));
  }
  return push(std::move(n));
}

Var Tape::reshape(Var x, std::vector<int64_t> shape) {
  const Tensor& tx = value(x);
  TapeNode n;
  n.op = Op::kReshape;
  n.in = {x.id};
  n.value = tx.reshaped(std::move(shape));
  return push(std::move(n));
}

Var Tape::cross_entropy_logits(Var z, const std::vector<int32_t>& labels) {
  const Tensor& tz = value(z);
  require(tz.rank() == 2, "cross_entropy_logits needs [m,k] logits, got " + tz.shape_str());
  int64_t m = tz.extent(0), k = tz.extent(1);
  if (static_cast<int64_t>(labels.size()) != m) {
    throw shape_error("cross_entropy_logits needs one label per row");
  }
  double total = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    int32_t y = labels[static_cast<size_t>(i)];
    if (y < 0 || y >= k) {
      throw config_error("label " + std::to_string(y) + " out of range for " +
                         std::to_string(k) + " classes");
    }
    double mx = tz.at2(i, 0);
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, tz.at2(i, j));
    double lse = 0.0;
    for (int64_t j = 0; j < k; ++j) lse += std::exp(tz.at2(i, j) - mx);
    lse = mx + std::log(lse);
    total += lse - tz.at2(i, y);
  }
  TapeNode n;
  n.op = Op::kCrossEntropyLogits;
  n.in = {z.id};
  n.idx = labels;
  n.value = Tensor::scalar(total / static_cast<double>(m));
  return push(std::move(n));
}

void Tape::backward(Var root) {
  if (backward_done_) {
    throw config_error("backward called twice on the same tape; rebuild the forward pass first");
  }
  const TapeNode& r = node(root);
  if (r.value.numel() != 1) {
    throw config_error("backward requires a scalar root, got " + r.value.shape_str());
  }
  backward_done_ = true;
  grad_slot(root.id).fill(1.0);
  for (int32_t id = root.id; id >= 0; --id) {
    if (nodes_[static_cast<size_t>(id)].grad.empty()) continue;
    backward_one(id);
  }
}

void Tape::backward_one(int32_t id) {
  TapeNode& n = nodes_[static_cast<size_t>(id)];
  const Tensor& g = n.grad;

  for (int64_t i = 0; i < g.numel(); ++i) {
    if (!std::isfinite(g[i])) {
      throw numeric_error(std::string("non-finite gradient in ") + op_name(n.op) + " at node " +
                          std::to_string(id) + ", flat index " + std::to_string(i));
    }
  }

  auto in_val = [&](size_t slot) -> const Tensor& {
    return nodes_[static_cast<size_t>(n.in[slot])].value;
  };
  auto in_grad = [&](size_t slot) -> Tensor& { return grad_slot(n.in[slot]); };

  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kParam:
      ker::active().add(n.param->grad.data(), n.param->grad.data(), g.data(),
                        static_cast<size_t>(g.numel()));
      break;
    case Op::kAdd: {
      ker::active().add(in_grad(0).data(), in_grad(0).data(), g.data(),
                        static_cast<size_t>(g.numel()));
      ker::active().add(in_grad(1).data(), in_grad(1).data(), g.data(),
                        static_cast<size_t>(g.numel()));
      break;
    }
    case Op::kSub: {
      ker::active().add(in_grad(0).data(), in_grad(0).data(), g.data(),
                        static_cast<size_t>(g.numel()));
      ker::active().axpy(in_grad(1).data(), -1.0, g.data(), static_cast<size_t>(g.numel()));
      break;
    }
    case Op::kMul: {
      Tensor tmp(g.shape());
      ker::active().mul(tmp.data(), g.data(), in_val(1).data(), static_cast<size_t>(g.numel()));
      ker::active().add(in_grad(0).data(), in_grad(0).data(), tmp.data(),
                        static_cast<size_t>(g.numel()));
      ker::active().mul(tmp.data(), g.data(), in_val(0).data(), static_cast<size_t>(g.numel()));
      ker::active().add(in_grad(1).data(), in_grad(1).data(), tmp.data(),
                        static_cast<size_t>(g.numel()));
      break;
    }
    case Op::kAffine: {
      ker::active().axpy(in_grad(0).data(), n.a, g.data(), static_cast<size_t>(g.numel()));
      break;
    }
    case Op::kScaleByScalar: {
      double s = in_val(1)[0];
      ker::active().axpy(in_grad(0).data(), s, g.data(), static_cast<size_t>(g.numel()));
      const Tensor& x = in_val(0);
      double acc = 0.0;
      for (int64_t i = 0; i < x.numel(); ++i) acc += g[i] * x[i];
      in_grad(1)[0] += acc;
      break;
    }
    case Op::kMatmul: {
      const Tensor& a = in_val(0);
      const Tensor& b = in_val(1);
      Tensor bt = transpose2d(b);
      Tensor da({a.extent(0), a.extent(1)});
      ker::active().matmul(da.data(), g.data(), bt.data(), static_cast<size_t>(g.extent(0)),
                           static_cast<size_t>(g.extent(1)), static_cast<size_t>(a.extent(1)));
      ker::active().add(in_grad(0).data(), in_grad(0).data(), da.data(),
                        static_cast<size_t>(da.numel()));
      Tensor at = transpose2d(a);
      Tensor db({b.extent(0), b.extent(1)});
      ker::active().matmul(db.data(), at.data(), g.data(), static_cast<size_t>(at.extent(0)),
                           static_cast<size_t>(at.extent(1)), static_cast<size_t>(g.extent(1)));
      ker::active().add(in_grad(1).data(), in_grad(1).data(), db.data(),
                        static_cast<size_t>(db.numel()));
      break;
    }
    case Op::kTranspose: {
      Tensor gt = transpose2d(g);
      ker::active().add(in_grad(0).data(), in_grad(0).data(), gt.data(),
                        static_cast<size_t>(gt.numel()));
      break;
    }
    case Op::kAddRowVec: {
      ker::active().add(in_grad(0).data(), in_grad(0).data(), g.data(),
                        static_cast<size_t>(g.numel()));
      Tensor& gv = in_grad(1);
      for (int64_t i = 0; i < g.extent(0); ++i) {
        ker::active().add(gv.data(), gv.data(), g.data() + i * g.extent(1),
                          static_cast<size_t>(g.extent(1)));
      }
      break;
    }
    case Op::kScaleCols: {
      const Tensor& x = in_val(0);
      const Tensor& v = in_val(1);
      Tensor& gx = in_grad(0);
      Tensor& gv = in_grad(1);
      for (int64_t i = 0; i < g.extent(0); ++i) {
        for (int64_t j = 0; j < g.extent(1); ++j) {
          gx.at2(i, j) += g.at2(i, j) * v[j];
          gv[j] += g.at2(i, j) * x.at2(i, j);
        }
      }
      break;
    }
    case Op::kScaleRows: {
      const Tensor& w = in_val(0);
      const Tensor& v = in_val(1);
      Tensor& gw = in_grad(0);
      Tensor& gv = in_grad(1);
      int64_t stride = w.numel() / w.extent(0);
      for (int64_t i = 0; i < w.extent(0); ++i) {
        ker::active().axpy(gw.data() + i * stride, v[i], g.data() + i * stride,
                           static_cast<size_t>(stride));
        double acc = 0.0;
        const double* gr = g.data() + i * stride;
        const double* wr = w.data() + i * stride;
        for (int64_t t = 0; t < stride; ++t) acc += gr[t] * wr[t];
        gv[i] += acc;
      }
      break;
    }
    case Op::kConv2d: {
      const Tensor& x = in_val(0);
      const Tensor& w = in_val(1);
      ConvDims d = conv_dims(x, w, n.i0, n.i1);
      Tensor& gx = in_grad(0);
      Tensor& gw = in_grad(1);
      for (int64_t nn = 0; nn < d.N; ++nn) {
        for (int64_t dd = 0; dd < d.D; ++dd) {
          for (int64_t oy = 0; oy < d.Ho; ++oy) {
            for (int64_t ox = 0; ox < d.Wo; ++ox) {
              double go = g.at4(nn, dd, oy, ox);
              if (go == 0.0) continue;
              for (int64_t c = 0; c < d.C; ++c) {
                for (int64_t ky = 0; ky < d.kh; ++ky) {
                  int64_t iy = oy * d.s + ky - d.p;
                  if (iy < 0 || iy >= d.H) continue;
                  for (int64_t kx = 0; kx < d.kw; ++kx) {
                    int64_t ix = ox * d.s + kx - d.p;
                    if (ix < 0 || ix >= d.W) continue;
                    gx.at4(nn, c, iy, ix) += go * w.at4(dd, c, ky, kx);
                    gw.at4(dd, c, ky, kx) += go * x.at4(nn, c, iy, ix);
                  }
                }
              }
            }
          }
        }
      }
      break;
    }
    case Op::kAddChannelBias: {
      ker::active().add(in_grad(0).data(), in_grad(0).data(), g.data(),
                        static_cast<size_t>(g.numel()));
      Tensor& gb = in_grad(1);
      int64_t hw = g.extent(2) * g.extent(3);
      for (int64_t nn = 0; nn < g.extent(0); ++nn) {
        for (int64_t dd = 0; dd < g.extent(1); ++dd) {
          const double* gr = g.data() + (nn * g.extent(1) + dd) * hw;
          double acc = 0.0;
          for (int64_t i = 0; i < hw; ++i) acc += gr[i];
          gb[dd] += acc;
        }
      }
      break;
    }
    case Op::kSigmoid: {
      Tensor& gx = in_grad(0);
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * n.value[i] * (1.0 - n.value[i]);
      break;
    }
    case Op::kRelu: {
      const Tensor& x = in_val(0);
      Tensor& gx = in_grad(0);
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += x[i] > 0.0 ? g[i] : 0.0;
      break;
    }
    case Op::kLog: {
      const Tensor& x = in_val(0);
      Tensor& gx = in_grad(0);
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] / x[i];
      break;
    }
    case Op::kExp: {
      Tensor& gx = in_grad(0);
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * n.value[i];
      break;
    }
    case Op::kClip01: {
      // Subgradient zero outside the open interval, boundaries included.
      const Tensor& x = in_val(0);
      Tensor& gx = in_grad(0);
      for (int64_t i = 0; i < g.numel(); ++i) {
        if (x[i] > 0.0 && x[i] < 1.0) gx[i] += g[i];
      }
      break;
    }
    case Op::kSum: {
      Tensor& gx = in_grad(0);
      double gv = g[0];
      for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += gv;
      break;
    }
    case Op::kMean: {
      Tensor& gx = in_grad(0);
      double gv = g[0] / static_cast<double>(gx.numel());
      for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += gv;
      break;
    }
    case Op::kSoftmaxRows: {
      Tensor& gx = in_grad(0);
      int64_t m = g.extent(0), k = g.extent(1);
      for (int64_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (int64_t j = 0; j < k; ++j) dot += g.at2(i, j) * n.value.at2(i, j);
        for (int64_t j = 0; j < k; ++j) {
          gx.at2(i, j) += n.value.at2(i, j) * (g.at2(i, j) - dot);
        }
      }
      break;
    }
    case Op::kGatherRows: {
      Tensor& gx = in_grad(0);
      int64_t stride = gx.numel() / gx.extent(0);
      for (size_t t = 0; t < n.idx.size(); ++t) {
        ker::active().add(gx.data() + n.idx[t] * stride, gx.data() + n.idx[t] * stride,
                          g.data() + static_cast<int64_t>(t) * stride,
                          static_cast<size_t>(stride));
      }
      break;
    }
    case Op::kScatterAddRows: {
      Tensor& gx = in_grad(0);
      int64_t stride = gx.numel() / gx.extent(0);
      for (size_t t = 0; t < n.idx.size(); ++t) {
        ker::active().add(gx.data() + static_cast<int64_t>(t) * stride,
                          gx.data() + static_cast<int64_t>(t) * stride,
                          g.data() + n.idx[t] * stride, static_cast<size_t>(stride));
      }
      break;
    }
    case Op::kConcat: {
      int64_t axis = n.i0;
      int64_t outer = 1;
      for (int64_t ax = 0; ax < axis; ++ax) outer *= g.extent(static_cast<size_t>(ax));
      int64_t inner = 1;
      for (size_t ax = static_cast<size_t>(axis) + 1; ax < g.rank(); ++ax) inner *= g.extent(ax);
      int64_t total = g.extent(static_cast<size_t>(axis));
      int64_t off = 0;
      for (size_t slot = 0; slot < n.in.size(); ++slot) {
        Tensor& gi = in_grad(slot);
        int64_t ext = in_val(slot).extent(static_cast<size_t>(axis));
        for (int64_t o = 0; o < outer; ++o) {
          ker::active().add(gi.data() + o * ext * inner, gi.data() + o * ext * inner,
                            g.data() + (o * total + off) * inner,
                            static_cast<size_t>(ext * inner));
        }
        off += ext;
      }
      break;
    }
    case Op::kSliceCols: {
      Tensor& gx = in_grad(0);
      int64_t cols = gx.extent(1);
      for (int64_t i = 0; i < g.extent(0); ++i) {
        ker::active().add(gx.data() + i * cols + n.i0, gx.data() + i * cols + n.i0,
                          g.data() + i * n.i1, static_cast<size_t>(n.i1));
      }
      break;
    }
    case Op::kReshape: {
      Tensor& gx = in_grad(0);
      ker::active().add(gx.data(), gx.data(), g.data(), static_cast<size_t>(g.numel()));
      break;
    }
    case Op::kCrossEntropyLogits: {
      const Tensor& z = in_val(0);
      Tensor& gz = in_grad(0);
      int64_t m = z.extent(0), k = z.extent(1);
      double scale = g[0] / static_cast<double>(m);
      for (int64_t i = 0; i < m; ++i) {
        double mx = z.at2(i, 0);
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, z.at2(i, j));
        double denom = 0.0;
        for (int64_t j = 0; j < k; ++j) denom += std::exp(z.at2(i, j) - mx);
        for (int64_t j = 0; j < k; ++j) {
          double p = std::exp(z.at2(i, j) - mx) / denom;
          double ind = (j == n.idx[static_cast<size_t>(i)]) ? 1.0 : 0.0;
          gz.at2(i, j) += scale * (p - ind);
        }
      }
      break;
    }
  }
}

}  // namespace lumos
