#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lumos/data.hpp"
#include "lumos/extraction.hpp"
#include "lumos/layers.hpp"
#include "lumos/train.hpp"

namespace lumos {

// A whole run described by one declarative JSON file. Schema (unknown keys
// are rejected everywhere, every block is optional unless noted):
//
//   {
//     "seed": 7,                        // root seed: init, gate noise, shuffle
//     "model": {                        // required
//       "input":  {"regime": "vector", "dim": 16},
//                 // image: {"regime":"image","C":..,"H":..,"W":..}
//                 // tokens: {"regime":"tokens","T":..,"d":..}
//                 // graph: {"regime":"graph","node_dim":..,"edge_dim":..}
//                 // ids:   {"regime":"ids","id_cols":..,"vocab":..}
//       "gates":  {"gamma":-0.1,"zeta":1.1,"tau":0.6667,"t_lo":0.05,
//                  "t_hi":0.95,"init_mean":2.0,"init_std":0.01},
//       "layers": [{"name":"fc1","kind":"fc","inputs":["input"],"units":64,
//                   "activation":"relu","gated":true}, ...],
//                 // kinds: fc, conv2d, gin, gcn, attention, embedding,
//                 // flatten, concat, residual_block, mean_pool
//       "output": "out"                 // required
//     },
//     "train": {"optimizer":"adam","lr_weights":0.01,"lr_gates":0.05,
//               "lambda":0.02,"epochs":250,"batch":64,"loss":"mse"},
//     "data":  {"path": "train.csv"}        // or
//              {"synthetic":"sparse16","n":600},
//              // plus "task":"classification","classes":K for dense
//              // class-id targets
//     "out":   {"dir":"runs/exp1","prefix":"model"}
//   }
struct RunConfig {
  std::string raw;  // exact config file bytes, embedded into checkpoints
  uint64_t seed = 1;

  InputSpec input;
  std::vector<LayerNode> layers;
  std::string output;

  TrainConfig train;  // train.seed mirrors the root seed; gate hypers ride along

  std::string data_path;       // exclusive with synthetic_kind
  std::string synthetic_kind;
  int64_t synthetic_n = 0;
  TaskKind task = TaskKind::kRegression;
  int64_t classes = 0;

  std::string out_dir = ".";
  std::string prefix = "model";

  // Copies the gate hypers onto the graph and finalizes with the root seed.
  ModelGraph build_model() const;
  // Loads data_path (task/classes applied afterwards) or generates the
  // synthetic workload with the root seed, then validates.
  DatasetHandle load_data() const;
};

// Parse/validate a config. Parse failures carry the position diagnostics of
// the JSON reader; unknown keys and bad field types name the offending block.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Gated checkpoint container: magic "LUMC", version u16, root seed u64,
// config length u32 + raw config bytes, parameter count u32, then per parameter
// name (u16 length + bytes), rank u8, extents u32 each, row-major f64 payload,
// all little-endian, trailing CRC32 of every preceding byte. Parameters are
// stored in graph order, weights first, then gate parameters.
void save_checkpoint(const std::string& path, const RunConfig& cfg, ModelGraph& g);

struct Checkpoint {
  RunConfig config;
  ModelGraph graph;
};
Checkpoint load_checkpoint(const std::string& path);

// Deterministic text table of the current gate state: one line per gate
// vector with its open count, width, and kept coordinates.
std::string gate_mask_report(const ModelGraph& g);

// Deterministic text form of an extraction mask table: one line per layer
// with surviving input/output coordinates.
std::string mask_table_text(const MaskTable& masks);

// Commands. Each returns a process exit code (0 ok, 1 validation, 2 numeric,
// 3 I/O) and reports through stdout; errors print to stderr in cli_main.
int run_train(const std::string& config_path, const uint64_t* seed_override);
int run_extract(const std::string& checkpoint_path, const std::string& out_path);
int run_verify(const std::string& checkpoint_path, const std::string& compact_path, double tol);
int run_report(const std::string& compact_path, const std::string& dataset_path,
               const std::string& checkpoint_path);
int run_gen(const std::string& kind, uint64_t seed, int64_t n, const std::string& out_path);

// Argument parsing + error-to-exit-code mapping around the commands above.
int cli_main(int argc, const char* const* argv);

}  // namespace lumos
