#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lumos/layers.hpp"
#include "lumos/tensor.hpp"

namespace lumos {

enum class TaskKind { kRegression, kClassification };

const char* task_kind_name(TaskKind t);
TaskKind task_kind_from_name(const std::string& s);

// In-memory dataset. Dense regimes store one sample per feature row with an
// aligned target row; graph tasks store self-contained samples instead and
// leave the dense tensors unset.
struct DatasetHandle {
  Tensor features;                  // [N x flat]
  Tensor targets;                   // [N] or [N x m]; class ids for classification
  TaskKind task = TaskKind::kRegression;
  int64_t classes = 0;              // declared class count, classification only
  std::vector<GraphSample> graphs;  // graph tasks

  bool is_graph() const { return !graphs.empty(); }
  int64_t size() const;

  // Row counts agree; classification targets are integral ids < classes;
  // graph samples are internally consistent and share feature widths.
  void validate() const;
};

// Deterministic synthetic workloads: the same kind+seed+n always produces the
// same values. Kinds:
//   sparse16  n rows of 16 standard-normal features;
//             y = 2*x3 - x7 + 0.5*x12 + 0.1*noise (only {3,7,12} informative)
//   image     n 2x6x6 standard-normal images, flattened to 72 columns;
//             y = mean(channel 0) - mean(channel 1) + 0.05*noise
//   graph     n graphs with 4..8 nodes, 4-wide node features, 2-wide edge
//             features, binary label = [sum of node-feature column 0 > 0]
DatasetHandle gen_synthetic(const std::string& kind, uint64_t seed, int64_t n);

// Reads a dataset by extension:
//   .csv   header row, comma-separated doubles, last column is the target
//   .lumt  binary tensor (rank 2), last column is the target
//   .json  graph dataset: {"task", "classes"?, "graphs": [{"nodes", "edges"?,
//          "edge_feats"?, "root"?, "target"|"label"}]}
DatasetHandle load_dataset(const std::string& path);

// Writes a dense dataset as .csv or .lumt (feature columns then the target
// column) or a graph dataset as .json. Identical handles produce identical
// bytes.
void save_dataset(const DatasetHandle& d, const std::string& path);

// Binary tensor file: magic "LUMT", dtype u8 (0 = f64), ndim u8, extents u32
// each, row-major f64 payload, all little-endian, trailing CRC32 of every
// preceding byte.
void save_tensor(const Tensor& t, const std::string& path);
Tensor load_tensor(const std::string& path);

}  // namespace lumos
