#pragma once

#include <map>
#include <string>
#include <vector>

#include "lumos/gates.hpp"
#include "lumos/layers.hpp"

namespace lumos {

// Kept coordinates of one layer, sorted ascending, indexed in the layer's
// original extents. For convolutions the coordinates are channels; for a
// flatten output they are flat channel-major positions.
struct LayerMasks {
  std::vector<int64_t> input_mask;
  std::vector<int64_t> output_mask;
  int64_t in_extent = 0;
  int64_t out_extent = 0;
};

// Per-layer masks keyed by layer name. The pseudo-entry "input" records the
// surviving input features; its output_mask is the model's feature keep list.
struct MaskTable {
  std::map<std::string, LayerMasks> entries;

  const LayerMasks& at(const std::string& name) const;
  LayerMasks& at(const std::string& name);
  bool has(const std::string& name) const { return entries.count(name) != 0; }
};

// Deterministic gate snapshots keyed by layer name; attention layers add
// "<name>/q", "<name>/k", "<name>/v" entries.
using SnapshotMap = std::map<std::string, GateSnapshot>;

SnapshotMap snapshot_gates(const ModelGraph& g);

// Flat indices covered by the kept channels of a [C,h,w] feature map flattened
// channel-major: channel j spans [j*w*h, (j+1)*w*h).
std::vector<int64_t> conv2fc_map(const std::vector<int64_t>& output_mask, int64_t w, int64_t h);

// mask_a followed by mask_b shifted past the first input's extent.
std::vector<int64_t> concat_coordinate(const std::vector<int64_t>& mask_a, int64_t extent_a,
                                       const std::vector<int64_t>& mask_b);

// The downstream FC's kept input rows become the embedding's kept output
// columns unchanged; validates the indices fit the table width.
std::vector<int64_t> share_embedding_mask(const std::vector<int64_t>& fc_input_mask,
                                          int64_t embedding_width);

// Walks the graph once backward (which output coordinates each layer must
// still produce) and once forward (the image of every producer mask across
// its edge), yielding a table where every edge satisfies
// consumer.input_mask == image(producer.output_mask).
MaskTable propagate_masks(const ModelGraph& g, const SnapshotMap& snaps);

// Deletes residual blocks whose branch gates are all closed. A branch that
// leaves a zero constant is spliced out entirely; a nonzero bias chain keeps
// the node with dead_branch_constant set. Masks are updated in place.
void remove_dead_blocks(ModelGraph& g, MaskTable& masks, const SnapshotMap& snaps);

// Global executability: bounds, sortedness, the per-edge image invariant, and
// no layer with an empty input but surviving outputs.
void check_executable(const ModelGraph& g, const MaskTable& masks);

// Human-readable kept/total listing, one line per layer.
std::string mask_report(const ModelGraph& g, const MaskTable& masks);

}  // namespace lumos
