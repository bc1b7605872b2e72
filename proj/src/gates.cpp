#include "lumos/gates.hpp"

#include <algorithm>
#include <cmath>

#include "lumos/errors.hpp"

namespace lumos {

namespace {
double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

void GateHyper::validate() const {
  if (!(gamma < 0.0)) throw config_error("gate gamma must be < 0, got " + std::to_string(gamma));
  if (!(zeta > 1.0)) throw config_error("gate zeta must be > 1, got " + std::to_string(zeta));
  if (!(tau > 0.0)) throw config_error("gate tau must be > 0, got " + std::to_string(tau));
  if (!(0.0 < t_lo && t_lo < t_hi && t_hi < 1.0)) {
    throw config_error("gate noise thresholds need 0 < t_lo < t_hi < 1, got [" +
                       std::to_string(t_lo) + "," + std::to_string(t_hi) + "]");
  }
  if (!(init_std >= 0.0)) throw config_error("gate init_std must be >= 0");
}

double GateHyper::penalty_shift() const {
  validate();
  return std::log(-gamma / zeta) / tau;
}

GateVector::GateVector(std::string name, int64_t n, const GateHyper& h, RngStream& rng)
    : hyper(h) {
  hyper.validate();
  if (n < 1) throw config_error("gate vector needs at least one unit");
  Tensor init({n});
  for (int64_t i = 0; i < n; ++i) init[i] = rng.normal(h.init_mean, h.init_std);
  log_alpha = Param(std::move(name), std::move(init));
}

bool GateSnapshot::is_kept(int64_t i) const {
  return std::binary_search(keep.begin(), keep.end(), static_cast<int32_t>(i));
}

Var gate_transform(Tape& t, Var pre, const GateHyper& h) {
  h.validate();
  Var s = t.sigmoid(t.affine(pre, 1.0 / h.tau, 0.0));
  return t.clip01(t.affine(s, h.zeta - h.gamma, h.gamma));
}

Var sample_train(Tape& t, GateVector& g, RngStream& noise) {
  if (g.mode != GateMode::kTrain) {
    throw config_error("sample_train requires gate mode train: " + g.log_alpha.name);
  }
  const GateHyper& h = g.hyper;
  h.validate();
  Var eps = t.uniform_sample({g.size()}, h.t_lo, h.t_hi, noise);
  Var logit = t.sub(t.log(eps), t.log(t.affine(eps, -1.0, 1.0)));
  Var pre = t.add(logit, t.param(g.log_alpha));
  return gate_transform(t, pre, h);
}

GateSnapshot gate_eval(const GateVector& g) {
  const GateHyper& h = g.hyper;
  h.validate();
  GateSnapshot snap;
  snap.z.resize(static_cast<size_t>(g.size()));
  if (!g.enabled) {
    for (int64_t i = 0; i < g.size(); ++i) {
      snap.z[static_cast<size_t>(i)] = 1.0;
      snap.keep.push_back(static_cast<int32_t>(i));
    }
    return snap;
  }
  for (int64_t i = 0; i < g.size(); ++i) {
    double s = stable_sigmoid(g.log_alpha.value[i]);
    double z = s * (h.zeta - h.gamma) + h.gamma;
    z = std::min(1.0, std::max(0.0, z));
    snap.z[static_cast<size_t>(i)] = z;
    if (z > 0.0) snap.keep.push_back(static_cast<int32_t>(i));
  }
  return snap;
}

Var complexity_loss(Tape& t, GateVector& g) {
  double shift = g.hyper.penalty_shift();
  Var terms = t.sigmoid(t.affine(t.param(g.log_alpha), 1.0, -shift));
  return t.sum(terms);
}

double complexity_loss_value(const GateVector& g) {
  double shift = g.hyper.penalty_shift();
  double acc = 0.0;
  for (int64_t i = 0; i < g.size(); ++i) acc += stable_sigmoid(g.log_alpha.value[i] - shift);
  return acc;
}

LossBundle total_loss(Tape& t, Var acc_loss, const std::vector<GateVector*>& gates,
                      double lambda) {
  if (lambda < 0.0) throw config_error("lambda must be >= 0, got " + std::to_string(lambda));
  Var comp = t.leaf(Tensor::scalar(0.0));
  for (GateVector* g : gates) comp = t.add(comp, complexity_loss(t, *g));
  Var total = t.add(acc_loss, t.affine(comp, lambda, 0.0));
  return {total, comp};
}

}  // namespace lumos
