#include "lumos/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "lumos/errors.hpp"

namespace lumos {

namespace {

void check_pair(size_t a, size_t b, size_t min_len, const char* what) {
  if (a != b) {
    throw shape_error(std::string(what) + ": lengths " + std::to_string(a) + " and " +
                      std::to_string(b) + " differ");
  }
  if (a < min_len) {
    throw shape_error(std::string(what) + ": needs at least " + std::to_string(min_len) +
                      " points, got " + std::to_string(a));
  }
}

bool all_equal(const std::vector<double>& v) {
  for (double x : v) {
    if (x != v.front()) return false;
  }
  return true;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// Per-sample FLOPs shared by the gated and compact walks. Weight tensors are
// passed by element count so both model representations use one formula set.
struct LayerCost {
  static int64_t fc(int64_t w_numel, int64_t rows) { return 2 * w_numel * rows; }
  static int64_t conv(int64_t w_numel, int64_t out_h, int64_t out_w) {
    return 2 * w_numel * out_h * out_w;
  }
  static int64_t gin(int64_t w_numel, int64_t embed_numel, int64_t v, int64_t e) {
    return 2 * v * w_numel + 2 * e * embed_numel;
  }
  static int64_t gcn(int64_t w1_numel, int64_t w2_numel, int64_t v, int64_t e) {
    return 2 * v * w1_numel + 2 * e * w2_numel;
  }
  static int64_t attention(int64_t q_numel, int64_t k_numel, int64_t v_numel, int64_t o_numel,
                           int64_t t, int64_t proj) {
    int64_t projections = 2 * t * (q_numel + k_numel + v_numel + o_numel);
    int64_t score_and_context = 4 * t * t * proj;  // sum over heads of 2*T^2*d_h, twice
    return projections + score_and_context;
  }
};

void check_graph_shape(const std::vector<int64_t>& s) {
  if (s.size() != 2 || s[0] < 1 || s[1] < 0) {
    throw shape_error("graph models take input_shape {num_nodes, num_edges}");
  }
}

void check_dense_shape(const InputSpec& spec, const std::vector<int64_t>& s) {
  std::vector<int64_t> want;
  switch (spec.regime) {
    case InputRegime::kVector: want = {spec.dim}; break;
    case InputRegime::kIds: want = {spec.id_cols}; break;
    case InputRegime::kImage: want = {spec.C, spec.H, spec.W}; break;
    case InputRegime::kTokens: want = {spec.T, spec.d}; break;
    case InputRegime::kGraph: check_graph_shape(s); return;
  }
  if (s != want) {
    std::string msg = "input_shape {";
    for (size_t i = 0; i < s.size(); ++i) msg += (i ? "," : "") + std::to_string(s[i]);
    msg += "} does not match the declared input {";
    for (size_t i = 0; i < want.size(); ++i) msg += (i ? "," : "") + std::to_string(want[i]);
    throw shape_error(msg + "}");
  }
}

int64_t fc_rows(const std::vector<int64_t>& in_shape) {
  return in_shape.size() == 2 ? in_shape[0] : 1;
}

}  // namespace

double r2(const std::vector<double>& pred, const std::vector<double>& truth) {
  check_pair(pred.size(), truth.size(), 2, "r2");
  if (all_equal(truth)) {
    throw numeric_error("r2 is undefined: the truth vector is constant (zero variance)");
  }
  double mean = 0.0;
  for (double y : truth) mean += y;
  mean /= static_cast<double>(truth.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (size_t i = 0; i < truth.size(); ++i) {
    double r = truth[i] - pred[i];
    double d = truth[i] - mean;
    ss_res += r * r;
    ss_tot += d * d;
  }
  return 1.0 - ss_res / ss_tot;
}

double mse(const std::vector<double>& pred, const std::vector<double>& truth) {
  check_pair(pred.size(), truth.size(), 1, "mse");
  double acc = 0.0;
  for (size_t i = 0; i < truth.size(); ++i) {
    double d = pred[i] - truth[i];
    acc += d * d;
  }
  return acc / static_cast<double>(truth.size());
}

double accuracy(const std::vector<int32_t>& pred_labels, const std::vector<int32_t>& truth_labels) {
  check_pair(pred_labels.size(), truth_labels.size(), 1, "accuracy");
  int64_t hits = 0;
  for (size_t i = 0; i < truth_labels.size(); ++i) {
    if (pred_labels[i] == truth_labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(truth_labels.size());
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  check_pair(x.size(), y.size(), 2, "pearson");
  if (all_equal(x) || all_equal(y)) {
    throw numeric_error("pearson is undefined: an input has zero variance");
  }
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double cov = 0.0, vx = 0.0, vy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    double dx = x[i] - mx, dy = y[i] - my;
    cov += dx * dy;
    vx += dx * dx;
    vy += dy * dy;
  }
  double r = cov / (std::sqrt(vx) * std::sqrt(vy));
  return std::min(1.0, std::max(-1.0, r));
}

int64_t count_params(const ModelGraph& g) { return gated_param_count(g); }

int64_t count_params(const CompactModel& m) { return m.param_count(); }

int64_t count_flops(const ModelGraph& g, const std::vector<int64_t>& input_shape) {
  if (!g.finalized()) throw config_error("count_flops: graph must be finalized");
  check_dense_shape(g.input, input_shape);
  bool graph_regime = g.input.regime == InputRegime::kGraph;
  int64_t v = graph_regime ? input_shape[0] : 0;
  int64_t e = graph_regime ? input_shape[1] : 0;
  int64_t total = 0;
  // Branch FC layers see one pooled row per sample, like their parent block.
  auto add_fc_chain = [&](const std::vector<LayerNode>& chain) {
    for (const LayerNode& n : chain) total += LayerCost::fc(n.fc.W.value.numel(), fc_rows(n.in_shape));
  };
  for (const LayerNode& n : g.nodes) {
    switch (n.kind) {
      case LayerKind::kFc:
        total += LayerCost::fc(n.fc.W.value.numel(), fc_rows(n.in_shape));
        break;
      case LayerKind::kConv2d:
        total += LayerCost::conv(n.conv.W.value.numel(), n.out_shape[1], n.out_shape[2]);
        break;
      case LayerKind::kGin:
        total += LayerCost::gin(n.gin.W.value.numel(), n.gin.edge_embed.value.numel(), v, e);
        break;
      case LayerKind::kGcn:
        total += LayerCost::gcn(n.gcn.W1.value.numel(), n.gcn.W2.value.numel(), v, e);
        break;
      case LayerKind::kAttention:
        total += LayerCost::attention(n.attn.Wq.value.numel(), n.attn.Wk.value.numel(),
                                      n.attn.Wv.value.numel(), n.attn.Wo.value.numel(),
                                      n.in_shape[0], n.out_shape[1]);
        break;
      case LayerKind::kResidualBlock:
        add_fc_chain(n.branch);
        break;
      default:
        break;  // embedding, flatten, concat, mean_pool: no matrix products
    }
  }
  return total;
}

int64_t count_flops(const CompactModel& m, const std::vector<int64_t>& input_shape) {
  check_dense_shape(m.input, input_shape);
  bool graph_regime = m.input.regime == InputRegime::kGraph;
  int64_t v = graph_regime ? input_shape[0] : 0;
  int64_t e = graph_regime ? input_shape[1] : 0;
  int64_t total = 0;
  auto add_fc_chain = [&](const std::vector<CompactLayer>& chain) {
    for (const CompactLayer& n : chain) total += LayerCost::fc(n.W.numel(), fc_rows(n.in_shape));
  };
  for (const CompactLayer& n : m.layers) {
    switch (n.kind) {
      case LayerKind::kFc:
        total += LayerCost::fc(n.W.numel(), fc_rows(n.in_shape));
        break;
      case LayerKind::kConv2d:
        total += LayerCost::conv(n.W.numel(), n.out_shape[1], n.out_shape[2]);
        break;
      case LayerKind::kGin:
        total += LayerCost::gin(n.W.numel(), n.edge_embed.numel(), v, e);
        break;
      case LayerKind::kGcn:
        total += LayerCost::gcn(n.W.numel(), n.W2.numel(), v, e);
        break;
      case LayerKind::kAttention:
        total += LayerCost::attention(n.Wq.numel(), n.Wk.numel(), n.Wv.numel(), n.Wo.numel(),
                                      n.in_shape[0], n.out_shape[1]);
        break;
      case LayerKind::kResidualBlock:
        add_fc_chain(n.branch);
        break;
      default:
        break;
    }
  }
  return total;
}

double MetricsReport::param_reduction() const {
  if (params_before <= 0) return 0.0;
  return 1.0 - static_cast<double>(params_after) / static_cast<double>(params_before);
}

double MetricsReport::flop_reduction() const {
  if (flops_before <= 0) return 0.0;
  return 1.0 - static_cast<double>(flops_after) / static_cast<double>(flops_before);
}

std::string MetricsReport::text() const {
  std::string out;
  out += "task: ";
  out += task_kind_name(task);
  out += "\n";
  if (task == TaskKind::kRegression) {
    out += "r2: " + (std::isnan(r2) ? std::string("undefined") : fmt(r2)) + "\n";
    out += "mse: " + fmt(mse) + "\n";
  } else {
    out += "accuracy: " + fmt(accuracy) + "\n";
  }
  if (params_before > 0) {
    out += "params: " + std::to_string(params_before) + " -> " + std::to_string(params_after) +
           " (" + fmt(100.0 * param_reduction()) + "% reduction)\n";
    out += "flops/sample: " + std::to_string(flops_before) + " -> " + std::to_string(flops_after) +
           " (" + fmt(100.0 * flop_reduction()) + "% reduction)\n";
  } else {
    out += "params: " + std::to_string(params_after) + "\n";
    out += "flops/sample: " + std::to_string(flops_after) + "\n";
  }
  if (train_seconds >= 0.0) out += "train time: " + fmt(train_seconds) + " s\n";
  if (!features.empty()) {
    out += "feature  rho          kept\n";
    for (const FeatureCorrelation& f : features) {
      char line[96];
      if (f.defined) {
        std::snprintf(line, sizeof line, "x%-7lld %+-11.6f  %s\n",
                      static_cast<long long>(f.index), f.rho, f.kept ? "yes" : "no");
      } else {
        std::snprintf(line, sizeof line, "x%-7lld %-11s  %s\n",
                      static_cast<long long>(f.index), "undefined", f.kept ? "yes" : "no");
      }
      out += line;
    }
  }
  return out;
}

MetricsReport build_report(const CompactModel& m, const DatasetHandle& data,
                           const ModelGraph* original, double train_seconds) {
  data.validate();
  MetricsReport rep;
  rep.task = data.task;
  rep.train_seconds = train_seconds;

  std::vector<double> pred, truth;
  std::vector<int32_t> pred_labels, truth_labels;
  auto take_labels = [&](const Tensor& out, int64_t row, int32_t want) {
    int64_t k = out.extent(1);
    int64_t best = 0;
    for (int64_t j = 1; j < k; ++j) {
      if (out.at2(row, j) > out.at2(row, best)) best = j;
    }
    pred_labels.push_back(static_cast<int32_t>(best));
    truth_labels.push_back(want);
  };

  std::vector<int64_t> flop_shape;
  if (data.is_graph()) {
    int64_t vsum = 0, esum = 0;
    for (const GraphSample& s : data.graphs) {
      Tensor out = m.run(m.restrict_graph(s));
      if (data.task == TaskKind::kClassification) {
        take_labels(out, 0, s.label);
      } else {
        pred.push_back(out[0]);
        truth.push_back(s.target);
      }
      vsum += s.nodes.extent(0);
      esum += static_cast<int64_t>(s.edges.size());
    }
    int64_t n = static_cast<int64_t>(data.graphs.size());
    flop_shape = {vsum / n, esum / n};
  } else {
    Tensor out = m.run(m.restrict_rows(data.features));
    if (data.task == TaskKind::kClassification) {
      for (int64_t i = 0; i < out.extent(0); ++i) {
        take_labels(out, i, static_cast<int32_t>(data.targets[i]));
      }
    } else {
      int64_t want = data.targets.rank() == 1 ? 1 : data.targets.extent(1);
      if (out.extent(1) != want) {
        throw shape_error("model emits " + std::to_string(out.extent(1)) +
                          " outputs but targets have " + std::to_string(want) + " columns");
      }
      for (int64_t i = 0; i < out.numel(); ++i) {
        pred.push_back(out[i]);
        truth.push_back(data.targets[i]);
      }
    }
    switch (m.input.regime) {
      case InputRegime::kVector: flop_shape = {m.input.dim}; break;
      case InputRegime::kIds: flop_shape = {m.input.id_cols}; break;
      case InputRegime::kImage: flop_shape = {m.input.C, m.input.H, m.input.W}; break;
      case InputRegime::kTokens: flop_shape = {m.input.T, m.input.d}; break;
      case InputRegime::kGraph: break;  // unreachable: graph data handled above
    }
  }

  if (data.task == TaskKind::kClassification) {
    rep.accuracy = accuracy(pred_labels, truth_labels);
  } else {
    rep.mse = mse(pred, truth);
    try {
      rep.r2 = r2(pred, truth);
    } catch (const numeric_error&) {
      // constant truth: r2 stays NaN and prints as "undefined"
    }
  }

  rep.params_after = count_params(m);
  rep.flops_after = count_flops(m, flop_shape);
  if (original != nullptr) {
    rep.params_before = count_params(*original);
    rep.flops_before = count_flops(*original, flop_shape);
  }

  if (!data.is_graph()) {
    std::vector<double> target_col(static_cast<size_t>(data.targets.extent(0)));
    for (int64_t i = 0; i < data.targets.extent(0); ++i) {
      target_col[static_cast<size_t>(i)] =
          data.targets.rank() == 1 ? data.targets[i] : data.targets.at2(i, 0);
    }
    int64_t w = data.features.extent(1);
    for (int64_t j = 0; j < w; ++j) {
      FeatureCorrelation fc;
      fc.index = j;
      fc.kept = std::binary_search(m.input_keep.begin(), m.input_keep.end(), j);
      std::vector<double> col(static_cast<size_t>(data.features.extent(0)));
      for (int64_t i = 0; i < data.features.extent(0); ++i) {
        col[static_cast<size_t>(i)] = data.features.at2(i, j);
      }
      try {
        fc.rho = pearson(col, target_col);
        fc.defined = true;
      } catch (const numeric_error&) {
        fc.defined = false;
      }
      rep.features.push_back(fc);
    }
  }
  return rep;
}

}  // namespace lumos
