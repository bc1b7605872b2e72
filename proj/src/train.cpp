#include "lumos/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <utility>

#include "lumos/errors.hpp"
#include "lumos/log.hpp"
#include "lumos/metrics.hpp"
#include "lumos/rng.hpp"

namespace lumos {

namespace {

int64_t output_width(const ModelGraph& g) {
  int64_t w = 1;
  for (int64_t e : g.output_shape()) w *= e;
  return w;
}

// Loss, shapes, and task agreement between the model, the data, and the
// config; raised before any compute.
void validate_pairing(const ModelGraph& g, const DatasetHandle& data, const TrainConfig& cfg) {
  bool graph_model = g.input.regime == InputRegime::kGraph;
  if (graph_model != data.is_graph()) {
    throw config_error(graph_model ? "graph model needs a graph dataset"
                                   : "dense model cannot train on a graph dataset");
  }
  if (cfg.loss == LossKind::kMse && data.task != TaskKind::kRegression) {
    throw config_error("mse loss needs a regression dataset");
  }
  if (cfg.loss == LossKind::kCrossEntropy && data.task != TaskKind::kClassification) {
    throw config_error("cross_entropy loss needs a classification dataset");
  }
  int64_t out_w = output_width(g);
  if (data.task == TaskKind::kClassification) {
    if (out_w != data.classes) {
      throw shape_error("model emits " + std::to_string(out_w) + " logits but the dataset declares " +
                        std::to_string(data.classes) + " classes");
    }
  } else if (data.is_graph()) {
    if (out_w != 1) {
      throw shape_error("graph regression needs a single output, model emits " +
                        std::to_string(out_w));
    }
  } else {
    int64_t tgt_w = data.targets.rank() == 1 ? 1 : data.targets.extent(1);
    if (out_w != tgt_w) {
      throw shape_error("model emits " + std::to_string(out_w) + " outputs but targets have " +
                        std::to_string(tgt_w) + " columns");
    }
  }
  if (!data.is_graph()) {
    if (data.features.extent(1) != g.input.flat_dim()) {
      throw shape_error("dataset rows are " + std::to_string(data.features.extent(1)) +
                        " wide but the model input expects " + std::to_string(g.input.flat_dim()));
    }
  } else {
    for (const GraphSample& s : data.graphs) {
      if (s.nodes.extent(1) != g.input.node_dim) {
        throw shape_error("graph node features are " + std::to_string(s.nodes.extent(1)) +
                          " wide but the model expects " + std::to_string(g.input.node_dim));
      }
      if (!s.edges.empty() && s.edge_feats.extent(1) != g.input.edge_dim) {
        throw shape_error("graph edge features are " + std::to_string(s.edge_feats.extent(1)) +
                          " wide but the model expects " + std::to_string(g.input.edge_dim));
      }
    }
  }
}

struct BatchView {
  const std::vector<int64_t>& order;
  int64_t start = 0, len = 0;
};

// L_A over one batch (or, with the identity order, the whole dataset).
Var batch_loss(Tape& t, ModelGraph& g, const DatasetHandle& data, const TrainConfig& cfg,
               const BatchView& view, GateMode mode, RngStream* noise) {
  if (data.is_graph()) {
    Var acc;
    for (int64_t i = 0; i < view.len; ++i) {
      const GraphSample& s = data.graphs[static_cast<size_t>(view.order[static_cast<size_t>(view.start + i)])];
      ForwardInput in;
      in.graph = &s;
      Var out = g.forward(t, in, mode, noise);
      Var li;
      if (cfg.loss == LossKind::kCrossEntropy) {
        li = t.cross_entropy_logits(out, {s.label});
      } else {
        Var diff = t.sub(out, t.leaf(Tensor({1, 1}, {s.target})));
        li = t.mean(t.mul(diff, diff));
      }
      acc = i == 0 ? li : t.add(acc, li);
    }
    return t.affine(acc, 1.0 / static_cast<double>(view.len), 0.0);
  }

  int64_t flat = data.features.extent(1);
  Tensor rows({view.len, flat});
  for (int64_t i = 0; i < view.len; ++i) {
    int64_t src = view.order[static_cast<size_t>(view.start + i)];
    for (int64_t j = 0; j < flat; ++j) rows.at2(i, j) = data.features.at2(src, j);
  }
  ForwardInput in;
  in.rows = &rows;
  Var out = g.forward(t, in, mode, noise);
  if (cfg.loss == LossKind::kCrossEntropy) {
    std::vector<int32_t> labels(static_cast<size_t>(view.len));
    for (int64_t i = 0; i < view.len; ++i) {
      labels[static_cast<size_t>(i)] =
          static_cast<int32_t>(data.targets[view.order[static_cast<size_t>(view.start + i)]]);
    }
    return t.cross_entropy_logits(out, labels);
  }
  int64_t m = data.targets.rank() == 1 ? 1 : data.targets.extent(1);
  Tensor tgt({view.len, m});
  for (int64_t i = 0; i < view.len; ++i) {
    int64_t src = view.order[static_cast<size_t>(view.start + i)];
    for (int64_t j = 0; j < m; ++j) {
      tgt.at2(i, j) = data.targets.rank() == 1 ? data.targets[src] : data.targets.at2(src, j);
    }
  }
  Var diff = t.sub(out, t.leaf(std::move(tgt)));
  return t.mean(t.mul(diff, diff));
}

// Post-epoch snapshot with deterministic gates over the full dataset.
EpochRow evaluate_epoch(ModelGraph& g, const DatasetHandle& data, const TrainConfig& cfg,
                        const std::vector<GateVector*>& gates, int64_t epoch) {
  EpochRow row;
  row.epoch = epoch;

  std::vector<double> pred, truth;
  std::vector<int32_t> pred_labels, truth_labels;
  double acc_loss = 0.0;
  if (data.is_graph()) {
    for (const GraphSample& s : data.graphs) {
      Tape t;
      ForwardInput in;
      in.graph = &s;
      Var out = g.forward(t, in, GateMode::kEval, nullptr);
      // Copy: the loss ops below grow the tape, which may move node storage.
      Tensor o = t.value(out);
      if (cfg.loss == LossKind::kCrossEntropy) {
        acc_loss += t.value(t.cross_entropy_logits(out, {s.label}))[0];
        int64_t best = 0;
        for (int64_t j = 1; j < o.extent(1); ++j) {
          if (o.at2(0, j) > o.at2(0, best)) best = j;
        }
        pred_labels.push_back(static_cast<int32_t>(best));
        truth_labels.push_back(s.label);
      } else {
        double d = o[0] - s.target;
        acc_loss += d * d;
        pred.push_back(o[0]);
        truth.push_back(s.target);
      }
    }
    acc_loss /= static_cast<double>(data.graphs.size());
  } else {
    Tape t;
    ForwardInput in;
    in.rows = &data.features;
    Var out = g.forward(t, in, GateMode::kEval, nullptr);
    // Copy: the loss ops below grow the tape, which may move node storage.
    Tensor o = t.value(out);
    if (cfg.loss == LossKind::kCrossEntropy) {
      std::vector<int32_t> labels(static_cast<size_t>(o.extent(0)));
      for (int64_t i = 0; i < o.extent(0); ++i) {
        labels[static_cast<size_t>(i)] = static_cast<int32_t>(data.targets[i]);
        int64_t best = 0;
        for (int64_t j = 1; j < o.extent(1); ++j) {
          if (o.at2(i, j) > o.at2(i, best)) best = j;
        }
        pred_labels.push_back(static_cast<int32_t>(best));
        truth_labels.push_back(labels[static_cast<size_t>(i)]);
      }
      acc_loss = t.value(t.cross_entropy_logits(out, labels))[0];
    } else {
      int64_t m = data.targets.rank() == 1 ? 1 : data.targets.extent(1);
      Tensor tgt({o.extent(0), m});
      for (int64_t i = 0; i < o.extent(0); ++i) {
        for (int64_t j = 0; j < m; ++j) {
          tgt.at2(i, j) = data.targets.rank() == 1 ? data.targets[i] : data.targets.at2(i, j);
        }
      }
      Var diff = t.sub(out, t.leaf(std::move(tgt)));
      acc_loss = t.value(t.mean(t.mul(diff, diff)))[0];
      for (int64_t i = 0; i < o.numel(); ++i) {
        pred.push_back(o[i]);
        truth.push_back(data.targets[i]);
      }
    }
  }

  row.acc_loss = acc_loss;
  for (GateVector* gv : gates) {
    row.complexity += complexity_loss_value(*gv);
    row.open_gates += static_cast<int64_t>(gate_eval(*gv).keep.size());
  }
  row.total = row.acc_loss + cfg.lambda * row.complexity;
  if (cfg.loss == LossKind::kCrossEntropy) {
    row.metric = accuracy(pred_labels, truth_labels);
  } else {
    try {
      row.metric = r2(pred, truth);
    } catch (const numeric_error&) {
      row.metric = std::numeric_limits<double>::quiet_NaN();
    }
  }
  return row;
}

}  // namespace

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::kAdam ? "adam" : "sgd"; }

OptimizerKind optimizer_from_name(const std::string& s) {
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "sgd") return OptimizerKind::kSgd;
  throw config_error("unknown optimizer '" + s + "'");
}

const char* loss_name(LossKind k) { return k == LossKind::kMse ? "mse" : "cross_entropy"; }

LossKind loss_from_name(const std::string& s) {
  if (s == "mse") return LossKind::kMse;
  if (s == "cross_entropy") return LossKind::kCrossEntropy;
  throw config_error("unknown loss '" + s + "'");
}

void TrainConfig::validate() const {
  if (lambda < 0.0) throw config_error("lambda must be >= 0");
  if (!(lr_weights > 0.0)) throw config_error("weight learning rate must be > 0");
  if (!(lr_gates > 0.0)) throw config_error("gate learning rate must be > 0");
  if (epochs < 1) throw config_error("epochs must be >= 1");
  if (batch < 1) throw config_error("batch size must be >= 1");
  gate.validate();
}

void sgd_step(Param& p, double lr) {
  for (int64_t i = 0; i < p.value.numel(); ++i) p.value[i] -= lr * p.grad[i];
  p.zero_grad();
}

void adam_step(Param& p, AdamSlot& s, int64_t t, double lr, double beta1, double beta2,
               double eps) {
  if (t < 1) throw config_error("adam_step: t is 1-based");
  if (s.m.numel() == 0) {
    s.m = Tensor(p.value.shape());
    s.v = Tensor(p.value.shape());
  }
  if (!s.m.same_shape(p.value)) {
    throw shape_error("adam slot shape " + s.m.shape_str() + " does not match parameter '" +
                      p.name + "' " + p.value.shape_str());
  }
  double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (int64_t i = 0; i < p.value.numel(); ++i) {
    double gr = p.grad[i];
    s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * gr;
    s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * gr * gr;
    double mh = s.m[i] / c1;
    double vh = s.v[i] / c2;
    p.value[i] -= lr * mh / (std::sqrt(vh) + eps);
  }
  p.zero_grad();
}

std::string TrainHistory::csv() const {
  std::string out = "epoch,L_A,L_C,L_T,open_gates,metric\n";
  char buf[192];
  for (const EpochRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%lld,%.17g\n",
                  static_cast<long long>(r.epoch), r.acc_loss, r.complexity, r.total,
                  static_cast<long long>(r.open_gates), r.metric);
    out += buf;
  }
  return out;
}

TrainHistory train(ModelGraph& g, const DatasetHandle& data, const TrainConfig& cfg) {
  cfg.validate();
  if (!g.finalized()) throw config_error("train: the graph must be finalized first");
  data.validate();
  validate_pairing(g, data, cfg);

  auto t0 = std::chrono::steady_clock::now();
  std::vector<Param*> weights = g.params();
  std::vector<GateVector*> gates = g.gates();
  std::vector<Param*> gate_params;
  gate_params.reserve(gates.size());
  for (GateVector* gv : gates) gate_params.push_back(&gv->log_alpha);

  std::vector<AdamSlot> weight_slots(weights.size());
  std::vector<AdamSlot> gate_slots(gate_params.size());

  RngStream root(cfg.seed);
  RngStream shuffle = root.split("shuffle");
  RngStream noise = root.split("gate_noise");

  int64_t n = data.size();
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  TrainHistory hist;
  int64_t step = 0;
  for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (int64_t i = 0; i + 1 < n; ++i) {
      int64_t j = shuffle.uniform_int(i, n);
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    for (int64_t start = 0; start < n; start += cfg.batch) {
      ++step;
      try {
        Tape t;
        BatchView view{order, start, std::min(cfg.batch, n - start)};
        Var acc = batch_loss(t, g, data, cfg, view, GateMode::kTrain, &noise);
        LossBundle loss = total_loss(t, acc, gates, cfg.lambda);
        if (!std::isfinite(t.value(loss.total)[0])) {
          throw numeric_error("total loss is not finite");
        }
        t.backward(loss.total);
        if (cfg.optimizer == OptimizerKind::kAdam) {
          for (size_t k = 0; k < weights.size(); ++k) {
            adam_step(*weights[k], weight_slots[k], step, cfg.lr_weights);
          }
          for (size_t k = 0; k < gate_params.size(); ++k) {
            adam_step(*gate_params[k], gate_slots[k], step, cfg.lr_gates);
          }
        } else {
          for (Param* p : weights) sgd_step(*p, cfg.lr_weights);
          for (Param* p : gate_params) sgd_step(*p, cfg.lr_gates);
        }
      } catch (const numeric_error& e) {
        throw numeric_error("training diverged at step " + std::to_string(step) + ": " + e.what());
      }
    }
    try {
      hist.rows.push_back(evaluate_epoch(g, data, cfg, gates, epoch));
    } catch (const numeric_error& e) {
      // The update made at the last step produced non-finite activations.
      throw numeric_error("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    const EpochRow& r = hist.rows.back();
    log::debug("epoch %lld: L_A %.6g, L_C %.6g, open gates %lld, metric %.6g",
               static_cast<long long>(r.epoch), r.acc_loss, r.complexity,
               static_cast<long long>(r.open_gates), r.metric);
  }
  hist.wall_seconds =
      std::chrono::duration_cast<std::chrono::duration<double>>(std::chrono::steady_clock::now() - t0)
          .count();
  return hist;
}

}  // namespace lumos
