#pragma once

#include <string>
#include <vector>

#include "lumos/rng.hpp"
#include "lumos/tape.hpp"

namespace lumos {

struct GateHyper {
  double gamma = -0.1;
  double zeta = 1.1;
  double tau = 2.0 / 3.0;
  double t_lo = 0.05;
  double t_hi = 0.95;
  double init_mean = 2.0;
  double init_std = 0.01;

  void validate() const;
  // Penalty shift (1/tau)*log(-gamma/zeta), precomputed once per use.
  double penalty_shift() const;
};

enum class GateMode { kTrain, kEval };

// One learnable hard-concrete gate per guarded unit (input feature, output
// channel, projection row...). log_alpha is the only trainable quantity; the
// keep probability reported downstream is the deterministic eval gate.
struct GateVector {
  Param log_alpha;
  GateHyper hyper;
  GateMode mode = GateMode::kTrain;
  // Disabled gates behave as constant 1 (ungated layer) and never train.
  bool enabled = true;

  GateVector() = default;
  GateVector(std::string name, int64_t n, const GateHyper& h, RngStream& rng);

  int64_t size() const { return log_alpha.value.numel(); }
};

struct GateSnapshot {
  std::vector<double> z;       // deterministic gate value per unit, in [0,1]
  std::vector<int32_t> keep;   // ascending indices with z > 0

  int64_t size() const { return static_cast<int64_t>(z.size()); }
  bool all_closed() const { return keep.empty(); }
  bool is_kept(int64_t i) const;
};

// Stretch-and-clip transform shared by the sampled and deterministic paths:
// clip01(sigmoid((pre + log_alpha)/tau) * (zeta-gamma) + gamma) where pre is
// the noise logit (training) or zero (eval).
Var gate_transform(Tape& t, Var noise_logit_plus_alpha, const GateHyper& h);

// Training-time gate: eps ~ uniform(t_lo, t_hi) drawn fresh on every call,
// differentiable wrt log_alpha.
Var sample_train(Tape& t, GateVector& g, RngStream& noise);

// Deterministic evaluation/extraction gate, no sampling.
GateSnapshot gate_eval(const GateVector& g);

// Expected open-gate count sum_j sigmoid(log_alpha_j - (1/tau)*log(-gamma/zeta)).
Var complexity_loss(Tape& t, GateVector& g);
double complexity_loss_value(const GateVector& g);

struct LossBundle {
  Var total;
  Var complexity;  // sum over all gate vectors, zero leaf when none
};

LossBundle total_loss(Tape& t, Var acc_loss, const std::vector<GateVector*>& gates, double lambda);

}  // namespace lumos
