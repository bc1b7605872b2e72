#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lumos/data.hpp"
#include "lumos/gates.hpp"
#include "lumos/layers.hpp"
#include "lumos/tensor.hpp"

namespace lumos {

enum class OptimizerKind { kAdam, kSgd };
enum class LossKind { kMse, kCrossEntropy };

const char* optimizer_name(OptimizerKind k);
OptimizerKind optimizer_from_name(const std::string& s);
const char* loss_name(LossKind k);
LossKind loss_from_name(const std::string& s);

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double lr_weights = 1e-2;
  double lr_gates = 1e-2;  // gates often want their own step size; same by default
  double lambda = 0.0;     // complexity weight, held constant through training
  int64_t epochs = 1;
  int64_t batch = 32;
  uint64_t seed = 1;
  // Gate hyperparameters travel with the run recipe; the config loader copies
  // them onto the graph before finalize, so train() only validates them.
  GateHyper gate;
  LossKind loss = LossKind::kMse;

  // lambda >= 0, learning rates > 0, epochs >= 1, batch >= 1, valid gate box.
  void validate() const;
};

// Adam first/second-moment buffers for one parameter tensor.
struct AdamSlot {
  Tensor m, v;
};

// p.value -= lr * p.grad, then clears the gradient.
void sgd_step(Param& p, double lr);

// Standard Adam update with bias correction; t is the 1-based global step
// count. Clears the gradient. The buffers in s are allocated on first use.
void adam_step(Param& p, AdamSlot& s, int64_t t, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

// One row per epoch, measured after the epoch's updates with deterministic
// gates over the full dataset, so every number describes the model that
// extraction would deploy.
struct EpochRow {
  int64_t epoch = 0;        // 1-based
  double acc_loss = 0.0;    // L_A
  double complexity = 0.0;  // L_C (expected open-gate count)
  double total = 0.0;       // L_T = L_A + lambda * L_C
  int64_t open_gates = 0;   // deterministic gates with z > 0
  double metric = 0.0;      // regression: r2 (nan when truth is constant);
                            // classification: accuracy
};

struct TrainHistory {
  std::vector<EpochRow> rows;
  double wall_seconds = 0.0;

  // "epoch,L_A,L_C,L_T,open_gates,metric" rows with %.17g doubles. Identical
  // runs produce identical bytes; wall time is deliberately not a column.
  std::string csv() const;
};

// Mini-batch gradient descent on L_T = L_A + lambda * L_C, mutating the
// graph's weights and gates in place. Deterministic for a fixed seed and
// config: epoch shuffling and gate noise draw from separate streams split
// from config.seed, so two identical runs replay bit-identical trajectories.
// A non-finite loss aborts with numeric_error naming the 1-based step.
TrainHistory train(ModelGraph& g, const DatasetHandle& data, const TrainConfig& cfg);

}  // namespace lumos
