#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "lumos/data.hpp"
#include "lumos/extraction.hpp"
#include "lumos/layers.hpp"

namespace lumos {

// R^2 = 1 - sum (y - yhat)^2 / sum (y - ybar)^2 over equal-length inputs of
// at least two points. Always <= 1, and 1 exactly iff pred == truth. A truth
// vector whose entries are all equal has no variance to explain: that raises
// numeric_error instead of returning a number.
double r2(const std::vector<double>& pred, const std::vector<double>& truth);

// Mean squared error over equal-length, non-empty inputs.
double mse(const std::vector<double>& pred, const std::vector<double>& truth);

// Fraction of positions where the two label vectors agree.
double accuracy(const std::vector<int32_t>& pred_labels, const std::vector<int32_t>& truth_labels);

// Cov(x,y) / (sigma(x) * sigma(y)), clamped into [-1,1] against rounding
// spill. Either side being constant leaves the value undefined: that raises
// numeric_error (never reported as 0).
double pearson(const std::vector<double>& x, const std::vector<double>& y);

// Exact stored weight and bias element count. Gates and extraction
// bookkeeping (out_scale, branch constants, gather lists) never count.
int64_t count_params(const ModelGraph& g);
int64_t count_params(const CompactModel& m);

// FLOPs for one forward sample under the 2-ops-per-MAC convention: only
// matrix products count; bias adds, activations, gating multiplies, pooling,
// softmax, and residual adds are excluded. Closed forms, with tensor extents
// read from the model itself:
//   fc          2*n*k, times the row count when the input is [T,n]
//   conv2d      2*(C*kh*kw)*D*H'*W'
//   gin         2*V*n*k + 2*E*e*n            (node transform + edge embedding)
//   gcn         2*V*n*d + 2*E*e*d            (node transform + edge transform)
//   attention   2*T*n*p each for the Q/K/V projections, 2*T*p*n for the
//               output projection, and per head 2*T^2*d_h for scores plus
//               2*T^2*d_h for the context product
//   embedding / flatten / concat / mean_pool / residual add: 0
// input_shape is the per-sample input: {n} vector, {id_cols} ids, {C,H,W}
// image, {T,d} tokens; graph models instead take {num_nodes, num_edges}.
// Dense shapes are validated against the model's declared input.
int64_t count_flops(const ModelGraph& g, const std::vector<int64_t>& input_shape);
int64_t count_flops(const CompactModel& m, const std::vector<int64_t>& input_shape);

struct FeatureCorrelation {
  int64_t index = 0;
  bool defined = false;  // false when the feature or the target is constant
  double rho = 0.0;
  bool kept = false;
};

struct MetricsReport {
  TaskKind task = TaskKind::kRegression;
  double r2 = std::numeric_limits<double>::quiet_NaN();
  double mse = std::numeric_limits<double>::quiet_NaN();
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  int64_t params_before = 0, params_after = 0;  // before == 0 means unknown
  int64_t flops_before = 0, flops_after = 0;
  std::vector<FeatureCorrelation> features;  // dense regimes only
  double train_seconds = -1.0;               // negative means not measured

  // Reductions recomputed from the raw counts; 0 when before is unknown.
  double param_reduction() const;
  double flop_reduction() const;

  // Human-readable block: metrics, raw counts with reductions, and the
  // per-input-feature correlation table ("undefined" for constant columns).
  std::string text() const;
};

// Evaluates the compact model on a dataset: task metrics, parameter/FLOP
// counts (before-counts filled when the original gated graph is given), and
// per-input-feature Pearson correlation against the target (the numeric
// class id for classification) with kept flags from input_keep. Graph-model
// FLOPs are reported at the dataset's mean node and edge counts.
MetricsReport build_report(const CompactModel& m, const DatasetHandle& data,
                           const ModelGraph* original = nullptr, double train_seconds = -1.0);

}  // namespace lumos
