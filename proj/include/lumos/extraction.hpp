#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lumos/consistency.hpp"
#include "lumos/layers.hpp"

namespace lumos {

// A pruned layer with dense folded weights and no gates. Tensors that do not
// apply to the kind stay empty. For attention, gather_q/k/v list the input
// columns each projection still reads; out_scale carries the deterministic
// gate values a gcn layer applies to its output columns (the relu inside the
// layer prevents folding them into the weights).
struct CompactLayer {
  std::string name;
  LayerKind kind = LayerKind::kFc;
  std::vector<std::string> inputs;
  std::string activation = "identity";
  bool has_bias = true;
  int64_t stride = 1;
  int64_t pad = 0;
  int64_t heads = 1;
  int32_t col = 0;
  std::vector<int64_t> in_shape;
  std::vector<int64_t> out_shape;

  Tensor W;  // fc/gin weight, conv kernel, gcn W1, embedding table
  Tensor b;  // fc/conv bias, gcn b1
  Tensor eps_gin;
  Tensor edge_embed;
  Tensor W2;
  Tensor b2;
  Tensor root_embed;
  Tensor out_scale;
  Tensor Wq, Wk, Wv, Wo;
  std::vector<int32_t> gather_q, gather_k, gather_v;

  std::vector<CompactLayer> branch;
  Tensor dead_branch_constant;
};

struct CompactModel {
  InputSpec input;
  // Kept coordinates along the regime's native feature axis: vector features,
  // image channels, token dimensions, or graph node features. Ids inputs are
  // never pruned.
  std::vector<int64_t> input_keep;
  std::vector<CompactLayer> layers;
  std::string output;

  // Stored weights only; derived metadata (out_scale, dead-branch constants,
  // gather lists) is excluded so the count equals the original minus every
  // pruned slice.
  int64_t param_count() const;

  // Width of a dense input row after dropping pruned features.
  int64_t restricted_flat_dim() const;

  // Map a full-width batch or sample onto the kept features.
  Tensor restrict_rows(const Tensor& rows) const;
  GraphSample restrict_graph(const GraphSample& s) const;

  // Inference on already-restricted inputs. Reentrant; builds no gradients.
  Tensor run(const Tensor& restricted_rows) const;
  Tensor run(const GraphSample& restricted) const;

  const CompactLayer* find(const std::string& name) const;
};

// Materialize the compact model from a gated graph whose dead blocks were
// already removed and whose masks passed the executability check. Folds each
// deterministic gate value into the retained weight slices and absorbs the
// constants of dropped conv channels into downstream biases.
CompactModel extract(const ModelGraph& pruned, const MaskTable& masks, const SnapshotMap& snaps);

struct ExtractionResult {
  CompactModel model;
  MaskTable masks;
  ModelGraph pruned;  // gated graph after dead-block removal, for audits
};

// snapshot -> propagate -> copy -> remove dead blocks -> check -> extract.
// The input graph is left untouched.
ExtractionResult extract_pipeline(const ModelGraph& g);

struct EquivalenceReport {
  double max_abs = 0.0;
  double max_rel = 0.0;
  int64_t n_samples = 0;
  double tol = 0.0;
  bool pass = false;
};

// Run both models on the same sampled inputs (eval-mode gates on the
// original, restricted features on the compact) and report the worst
// deviation.
EquivalenceReport verify_equivalence(ModelGraph& original, const CompactModel& compact,
                                     int64_t n_samples, double tol, uint64_t seed = 7777);

// Little-endian container: magic "LUM1", version u16, layer count u32, model
// header, per-layer records (kind tag u8, extents u32, raw 64-bit weights),
// trailing CRC32 of all preceding bytes.
std::vector<uint8_t> serialize(const CompactModel& m);
CompactModel deserialize(const std::vector<uint8_t>& bytes);

void save_model(const CompactModel& m, const std::string& path);
CompactModel load_model(const std::string& path);

// Companion audit file: one line per layer listing kept indices.
void write_masks_file(const MaskTable& masks, const std::string& path);

// Stored weight count of the gated graph, gates excluded.
int64_t gated_param_count(const ModelGraph& g);

}  // namespace lumos
