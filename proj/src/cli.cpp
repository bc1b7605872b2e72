#include "lumos/cli.hpp"

#include <zlib.h>

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <utility>

#include "../vendor/json.hpp"
#include "lumos/consistency.hpp"
#include "lumos/errors.hpp"
#include "lumos/gates.hpp"
#include "lumos/log.hpp"
#include "lumos/metrics.hpp"

namespace lumos {

namespace {

using nlohmann::json;

// ---- little-endian byte helpers -------------------------------------------

void put_u8(std::string& out, uint8_t v) { out.push_back(static_cast<char>(v)); }

void put_u16(std::string& out, uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u64(out, bits);
}

struct ByteReader {
  const unsigned char* p;
  size_t n;
  size_t pos = 0;
  std::string where;

  void need(size_t k) const {
    if (pos + k > n) throw io_error("truncated checkpoint file '" + where + "'");
  }
  uint8_t u8() {
    need(1);
    return p[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v = static_cast<uint16_t>(v | (static_cast<uint16_t>(p[pos + static_cast<size_t>(i)]) << (8 * i)));
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[pos + static_cast<size_t>(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[pos + static_cast<size_t>(i)]) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::string bytes(size_t k) {
    need(k);
    std::string s(reinterpret_cast<const char*>(p + pos), k);
    pos += k;
    return s;
  }
};

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open '" + path + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw io_error("failed writing '" + path + "'");
}

// ---- json field helpers ----------------------------------------------------

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) throw config_error("unknown key '" + it.key() + "' in " + where);
  }
}

const json& field(const json& j, const std::string& where, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw config_error(where + " needs a \"" + key + "\" field");
  return *it;
}

double num_field(const json& j, const std::string& where, const char* key, double dflt) {
  auto it = j.find(key);
  if (it == j.end()) return dflt;
  if (!it->is_number()) throw config_error("field \"" + std::string(key) + "\" in " + where + " must be a number");
  return it->get<double>();
}

int64_t int_field(const json& j, const std::string& where, const char* key, int64_t dflt) {
  auto it = j.find(key);
  if (it == j.end()) return dflt;
  if (!it->is_number_integer()) {
    throw config_error("field \"" + std::string(key) + "\" in " + where + " must be an integer");
  }
  return it->get<int64_t>();
}

uint64_t uint_field(const json& j, const std::string& where, const char* key, uint64_t dflt) {
  auto it = j.find(key);
  if (it == j.end()) return dflt;
  if (!it->is_number_unsigned() && !(it->is_number_integer() && it->get<int64_t>() >= 0)) {
    throw config_error("field \"" + std::string(key) + "\" in " + where + " must be a non-negative integer");
  }
  return it->get<uint64_t>();
}

std::string str_field(const json& j, const std::string& where, const char* key, const std::string& dflt) {
  auto it = j.find(key);
  if (it == j.end()) return dflt;
  if (!it->is_string()) throw config_error("field \"" + std::string(key) + "\" in " + where + " must be a string");
  return it->get<std::string>();
}

bool bool_field(const json& j, const std::string& where, const char* key, bool dflt) {
  auto it = j.find(key);
  if (it == j.end()) return dflt;
  if (!it->is_boolean()) throw config_error("field \"" + std::string(key) + "\" in " + where + " must be a boolean");
  return it->get<bool>();
}

// ---- config blocks ---------------------------------------------------------

InputSpec parse_input(const json& j) {
  if (!j.is_object()) throw config_error("model.input must be an object");
  check_keys(j, "model.input",
             {"regime", "dim", "id_cols", "vocab", "C", "H", "W", "T", "d", "node_dim", "edge_dim"});
  InputSpec in;
  std::string regime = str_field(j, "model.input", "regime", "vector");
  if (regime == "vector") {
    in.regime = InputRegime::kVector;
  } else if (regime == "ids") {
    in.regime = InputRegime::kIds;
  } else if (regime == "image") {
    in.regime = InputRegime::kImage;
  } else if (regime == "tokens") {
    in.regime = InputRegime::kTokens;
  } else if (regime == "graph") {
    in.regime = InputRegime::kGraph;
  } else {
    throw config_error("unknown input regime '" + regime + "'");
  }
  in.dim = int_field(j, "model.input", "dim", 0);
  in.id_cols = int_field(j, "model.input", "id_cols", 0);
  in.vocab = int_field(j, "model.input", "vocab", 0);
  in.C = int_field(j, "model.input", "C", 0);
  in.H = int_field(j, "model.input", "H", 0);
  in.W = int_field(j, "model.input", "W", 0);
  in.T = int_field(j, "model.input", "T", 0);
  in.d = int_field(j, "model.input", "d", 0);
  in.node_dim = int_field(j, "model.input", "node_dim", 0);
  in.edge_dim = int_field(j, "model.input", "edge_dim", 0);
  return in;
}

GateHyper parse_gate_hyper(const json& j) {
  if (!j.is_object()) throw config_error("model.gates must be an object");
  check_keys(j, "model.gates", {"gamma", "zeta", "tau", "t_lo", "t_hi", "init_mean", "init_std"});
  GateHyper h;
  h.gamma = num_field(j, "model.gates", "gamma", h.gamma);
  h.zeta = num_field(j, "model.gates", "zeta", h.zeta);
  h.tau = num_field(j, "model.gates", "tau", h.tau);
  h.t_lo = num_field(j, "model.gates", "t_lo", h.t_lo);
  h.t_hi = num_field(j, "model.gates", "t_hi", h.t_hi);
  h.init_mean = num_field(j, "model.gates", "init_mean", h.init_mean);
  h.init_std = num_field(j, "model.gates", "init_std", h.init_std);
  return h;
}

LayerNode parse_layer(const json& j, bool inside_branch);

std::vector<LayerNode> parse_branch(const json& j, const std::string& where) {
  if (!j.is_array() || j.empty()) throw config_error(where + ".branch must be a non-empty array");
  std::vector<LayerNode> out;
  for (const json& item : j) out.push_back(parse_layer(item, true));
  return out;
}

LayerNode parse_layer(const json& j, bool inside_branch) {
  if (!j.is_object()) throw config_error("each layer must be an object");
  LayerNode n;
  n.name = str_field(j, "layer", "name", "");
  if (n.name.empty()) throw config_error("every layer needs a non-empty \"name\"");
  const std::string where = "layer '" + n.name + "'";
  n.kind = layer_kind_from_name(str_field(j, where, "kind", "fc"));

  auto common_plus = [&](std::initializer_list<const char*> extra) {
    std::vector<const char*> keys = {"name", "kind", "inputs", "gated"};
    keys.insert(keys.end(), extra.begin(), extra.end());
    for (auto it = j.begin(); it != j.end(); ++it) {
      bool ok = false;
      for (const char* k : keys) {
        if (it.key() == k) {
          ok = true;
          break;
        }
      }
      if (!ok) throw config_error("unknown key '" + it.key() + "' in " + where);
    }
  };

  switch (n.kind) {
    case LayerKind::kFc:
      common_plus({"units", "activation", "has_bias"});
      n.units = int_field(j, where, "units", 0);
      break;
    case LayerKind::kConv2d:
      common_plus({"filters", "kh", "kw", "stride", "pad", "activation", "has_bias"});
      n.filters = int_field(j, where, "filters", 0);
      n.kh = int_field(j, where, "kh", 0);
      n.kw = int_field(j, where, "kw", 0);
      n.stride = int_field(j, where, "stride", 1);
      n.pad = int_field(j, where, "pad", 0);
      break;
    case LayerKind::kGin:
    case LayerKind::kGcn:
      common_plus({"units", "activation"});
      n.units = int_field(j, where, "units", 0);
      break;
    case LayerKind::kAttention:
      common_plus({"heads", "proj"});
      n.heads = int_field(j, where, "heads", 1);
      n.proj = int_field(j, where, "proj", 0);
      break;
    case LayerKind::kEmbedding:
      common_plus({"vocab", "width", "col"});
      n.vocab = int_field(j, where, "vocab", 0);
      n.width = int_field(j, where, "width", 0);
      n.col = int_field(j, where, "col", 0);
      break;
    case LayerKind::kResidualBlock:
      common_plus({"branch"});
      n.branch = parse_branch(field(j, where, "branch"), where);
      for (const LayerNode& inner : n.branch) {
        if (inner.kind != LayerKind::kFc) {
          throw config_error(where + ": residual branches hold fc layers only");
        }
      }
      break;
    case LayerKind::kFlatten:
    case LayerKind::kConcat:
    case LayerKind::kMeanPool:
      common_plus({});
      break;
    case LayerKind::kInput:
      throw config_error(where + ": \"input\" is implicit and cannot be declared");
  }

  n.activation = str_field(j, where, "activation", "");
  n.gated = bool_field(j, where, "gated", true);
  n.has_bias = bool_field(j, where, "has_bias", true);

  auto it = j.find("inputs");
  if (inside_branch) {
    if (it != j.end()) throw config_error(where + ": branch layers chain implicitly, no \"inputs\"");
  } else {
    if (it == j.end() || !it->is_array() || it->empty()) {
      throw config_error(where + " needs a non-empty \"inputs\" array");
    }
    for (const json& s : *it) {
      if (!s.is_string()) throw config_error(where + ": \"inputs\" entries must be strings");
      n.inputs.push_back(s.get<std::string>());
    }
  }
  return n;
}

TrainConfig parse_train(const json& j, TrainConfig base) {
  if (!j.is_object()) throw config_error("train must be an object");
  check_keys(j, "train", {"optimizer", "lr_weights", "lr_gates", "lambda", "epochs", "batch", "loss"});
  TrainConfig cfg = base;
  cfg.optimizer = optimizer_from_name(str_field(j, "train", "optimizer", optimizer_name(cfg.optimizer)));
  cfg.lr_weights = num_field(j, "train", "lr_weights", cfg.lr_weights);
  cfg.lr_gates = num_field(j, "train", "lr_gates", cfg.lr_gates);
  cfg.lambda = num_field(j, "train", "lambda", cfg.lambda);
  cfg.epochs = int_field(j, "train", "epochs", cfg.epochs);
  cfg.batch = int_field(j, "train", "batch", cfg.batch);
  cfg.loss = loss_from_name(str_field(j, "train", "loss", loss_name(cfg.loss)));
  return cfg;
}

bool is_json_path(const std::string& p) {
  return p.size() >= 5 && p.compare(p.size() - 5, 5, ".json") == 0;
}

// Output path for the mask table that rides along a .lum file.
std::string masks_path_for(const std::string& lum_path) {
  size_t slash = lum_path.find_last_of('/');
  size_t dot = lum_path.find_last_of('.');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) {
    return lum_path + ".masks";
  }
  return lum_path.substr(0, dot) + ".masks";
}

std::vector<Param*> checkpoint_params(ModelGraph& g) {
  std::vector<Param*> ps = g.params();
  for (GateVector* gv : g.gates()) ps.push_back(&gv->log_alpha);
  return ps;
}

// Shape a model's dense input for flop counting; empty for the graph regime,
// whose extents live in the dataset rather than the model.
std::vector<int64_t> default_input_shape(const InputSpec& in) {
  switch (in.regime) {
    case InputRegime::kVector:
      return {in.dim};
    case InputRegime::kIds:
      return {in.id_cols};
    case InputRegime::kImage:
      return {in.C, in.H, in.W};
    case InputRegime::kTokens:
      return {in.T, in.d};
    case InputRegime::kGraph:
      return {};
  }
  return {};
}

}  // namespace

// ---- config ----------------------------------------------------------------

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw config_error(std::string("config parse error: ") + e.what());
  }
  if (!j.is_object()) throw config_error("config root must be a JSON object");
  check_keys(j, "config", {"seed", "model", "train", "data", "out"});

  RunConfig cfg;
  cfg.raw = json_text;
  cfg.seed = uint_field(j, "config", "seed", 1);

  const json& m = field(j, "config", "model");
  if (!m.is_object()) throw config_error("model must be an object");
  check_keys(m, "model", {"input", "gates", "layers", "output"});
  cfg.input = parse_input(field(m, "model", "input"));
  if (auto it = m.find("gates"); it != m.end()) cfg.train.gate = parse_gate_hyper(*it);
  const json& layers = field(m, "model", "layers");
  if (!layers.is_array() || layers.empty()) throw config_error("model.layers must be a non-empty array");
  for (const json& item : layers) cfg.layers.push_back(parse_layer(item, false));
  const json& outj = field(m, "model", "output");
  if (!outj.is_string()) throw config_error("model.output must be a string");
  cfg.output = outj.get<std::string>();

  if (auto it = j.find("train"); it != j.end()) cfg.train = parse_train(*it, cfg.train);
  cfg.train.seed = cfg.seed;
  cfg.train.validate();

  if (auto it = j.find("data"); it != j.end()) {
    const json& d = *it;
    if (!d.is_object()) throw config_error("data must be an object");
    check_keys(d, "data", {"path", "synthetic", "n", "task", "classes"});
    cfg.data_path = str_field(d, "data", "path", "");
    cfg.synthetic_kind = str_field(d, "data", "synthetic", "");
    cfg.synthetic_n = int_field(d, "data", "n", 0);
    if (cfg.data_path.empty() == cfg.synthetic_kind.empty()) {
      throw config_error("data needs exactly one of \"path\" or \"synthetic\"");
    }
    std::string task = str_field(d, "data", "task", "");
    cfg.classes = int_field(d, "data", "classes", 0);
    if (!task.empty()) {
      if (!cfg.synthetic_kind.empty()) {
        throw config_error("synthetic workloads fix their own task; drop \"task\"");
      }
      if (is_json_path(cfg.data_path)) {
        throw config_error("graph datasets declare their task in the file; drop \"task\"");
      }
      cfg.task = task_kind_from_name(task);
      if (cfg.task == TaskKind::kClassification && cfg.classes < 2) {
        throw config_error("classification data needs \"classes\" >= 2");
      }
    } else if (cfg.classes != 0) {
      throw config_error("\"classes\" needs \"task\": \"classification\"");
    }
    if (!cfg.synthetic_kind.empty() && cfg.synthetic_n < 1) {
      throw config_error("synthetic data needs \"n\" >= 1");
    }
  }

  if (auto it = j.find("out"); it != j.end()) {
    const json& o = *it;
    if (!o.is_object()) throw config_error("out must be an object");
    check_keys(o, "out", {"dir", "prefix"});
    cfg.out_dir = str_field(o, "out", "dir", cfg.out_dir);
    cfg.prefix = str_field(o, "out", "prefix", cfg.prefix);
    if (cfg.out_dir.empty() || cfg.prefix.empty()) {
      throw config_error("out.dir and out.prefix must be non-empty");
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) { return parse_run_config(read_file(path)); }

ModelGraph RunConfig::build_model() const {
  ModelGraph g;
  g.input = input;
  g.hyper = train.gate;
  g.nodes = layers;
  g.output = output;
  g.finalize(seed);
  return g;
}

DatasetHandle RunConfig::load_data() const {
  DatasetHandle d;
  if (!synthetic_kind.empty()) {
    d = gen_synthetic(synthetic_kind, seed, synthetic_n);
  } else if (!data_path.empty()) {
    d = load_dataset(data_path);
    if (!d.is_graph() && task == TaskKind::kClassification) {
      d.task = TaskKind::kClassification;
      d.classes = classes;
    }
  } else {
    throw config_error("config has no \"data\" block");
  }
  d.validate();
  return d;
}

// ---- checkpoint ------------------------------------------------------------

void save_checkpoint(const std::string& path, const RunConfig& cfg, ModelGraph& g) {
  if (!g.finalized()) throw config_error("save_checkpoint: the graph must be finalized");
  std::string out;
  out += "LUMC";
  put_u16(out, 1);
  put_u64(out, cfg.seed);
  put_u32(out, static_cast<uint32_t>(cfg.raw.size()));
  out += cfg.raw;

  std::vector<Param*> ps = checkpoint_params(g);
  put_u32(out, static_cast<uint32_t>(ps.size()));
  for (Param* p : ps) {
    put_u16(out, static_cast<uint16_t>(p->name.size()));
    out += p->name;
    put_u8(out, static_cast<uint8_t>(p->value.rank()));
    for (size_t a = 0; a < p->value.rank(); ++a) {
      put_u32(out, static_cast<uint32_t>(p->value.extent(a)));
    }
    for (int64_t i = 0; i < p->value.numel(); ++i) put_f64(out, p->value[i]);
  }
  uint32_t crc = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(out.size())));
  put_u32(out, crc);
  write_file(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::string bytes = read_file(path);
  if (bytes.size() < 22) throw io_error("checkpoint '" + path + "' is too short");

  uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i) {
    stored_crc |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[bytes.size() - 4 + static_cast<size_t>(i)]))
                  << (8 * i);
  }
  uint32_t actual_crc = static_cast<uint32_t>(crc32(
      0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size() - 4)));
  if (stored_crc != actual_crc) throw io_error("checksum mismatch in checkpoint '" + path + "'");

  ByteReader r{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size() - 4, 0, path};
  if (r.bytes(4) != "LUMC") throw io_error("'" + path + "' is not a checkpoint file (bad magic)");
  uint16_t version = r.u16();
  if (version != 1) {
    throw io_error("checkpoint '" + path + "' has unsupported version " + std::to_string(version));
  }
  uint64_t seed = r.u64();
  uint32_t config_len = r.u32();
  std::string raw = r.bytes(config_len);

  Checkpoint ck;
  ck.config = parse_run_config(raw);
  ck.config.seed = seed;  // --seed overrides survive through the stored value
  ck.config.train.seed = seed;
  ck.graph = ck.config.build_model();

  std::vector<Param*> ps = checkpoint_params(ck.graph);
  uint32_t count = r.u32();
  if (count != ps.size()) {
    throw io_error("checkpoint '" + path + "' stores " + std::to_string(count) +
                   " parameters but the config builds " + std::to_string(ps.size()));
  }
  for (Param* p : ps) {
    std::string name = r.bytes(r.u16());
    if (name != p->name) {
      throw io_error("checkpoint '" + path + "' parameter '" + name +
                     "' does not match model parameter '" + p->name + "'");
    }
    uint8_t rank = r.u8();
    if (rank != p->value.rank()) {
      throw io_error("checkpoint '" + path + "' parameter '" + name + "' has rank " +
                     std::to_string(rank) + ", expected " + std::to_string(p->value.rank()));
    }
    for (size_t a = 0; a < rank; ++a) {
      uint32_t e = r.u32();
      if (static_cast<int64_t>(e) != p->value.extent(a)) {
        throw io_error("checkpoint '" + path + "' parameter '" + name + "' extent mismatch");
      }
    }
    for (int64_t i = 0; i < p->value.numel(); ++i) p->value[i] = r.f64();
  }
  if (r.pos != r.n) throw io_error("checkpoint '" + path + "' has trailing bytes");
  return ck;
}

// ---- text artifacts ---------------------------------------------------------

std::string gate_mask_report(const ModelGraph& g) {
  SnapshotMap snaps = snapshot_gates(g);
  std::string out;
  for (const auto& [name, snap] : snaps) {
    out += name + ": open " + std::to_string(snap.keep.size()) + " of " +
           std::to_string(snap.size()) + ", kept [";
    for (size_t i = 0; i < snap.keep.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(snap.keep[i]);
    }
    out += "]\n";
  }
  return out;
}

std::string mask_table_text(const MaskTable& masks) {
  std::string out;
  auto list = [](const std::vector<int64_t>& v) {
    std::string s = "[";
    for (size_t i = 0; i < v.size(); ++i) {
      if (i) s += ' ';
      s += std::to_string(v[i]);
    }
    return s + "]";
  };
  for (const auto& [name, lm] : masks.entries) {
    out += name + ": in " + std::to_string(lm.input_mask.size()) + "/" +
           std::to_string(lm.in_extent) + " " + list(lm.input_mask) + ", out " +
           std::to_string(lm.output_mask.size()) + "/" + std::to_string(lm.out_extent) + " " +
           list(lm.output_mask) + "\n";
  }
  return out;
}

// ---- commands ---------------------------------------------------------------

int run_train(const std::string& config_path, const uint64_t* seed_override) {
  RunConfig cfg = load_run_config(config_path);
  if (seed_override) {
    cfg.seed = *seed_override;
    cfg.train.seed = *seed_override;
  }
  log::info("training with seed %" PRIu64, cfg.seed);
  DatasetHandle data = cfg.load_data();
  ModelGraph g = cfg.build_model();
  TrainHistory hist = train(g, data, cfg.train);

  std::filesystem::create_directories(cfg.out_dir);
  std::string base = cfg.out_dir + "/" + cfg.prefix;
  save_checkpoint(base + ".lumc", cfg, g);
  write_file(base + ".history.csv", hist.csv());
  write_file(base + ".masks.txt", gate_mask_report(g));

  const EpochRow& last = hist.rows.back();
  std::printf("wrote %s.lumc, %s.history.csv, %s.masks.txt\n", base.c_str(), base.c_str(),
              base.c_str());
  std::printf("final epoch %lld: L_A %.6g, L_C %.6g, open gates %lld, metric %.6g\n",
              static_cast<long long>(last.epoch), last.acc_loss, last.complexity,
              static_cast<long long>(last.open_gates), last.metric);
  return kExitOk;
}

int run_extract(const std::string& checkpoint_path, const std::string& out_path) {
  Checkpoint ck = load_checkpoint(checkpoint_path);
  log::info("loaded checkpoint %s (seed %" PRIu64 ")", checkpoint_path.c_str(), ck.config.seed);
  ExtractionResult ex = extract_pipeline(ck.graph);
  for (const auto& [name, lm] : ex.masks.entries) {
    log::debug("mask %s: in %zu/%lld, out %zu/%lld", name.c_str(), lm.input_mask.size(),
               static_cast<long long>(lm.in_extent), lm.output_mask.size(),
               static_cast<long long>(lm.out_extent));
  }
  save_model(ex.model, out_path);
  std::string masks = masks_path_for(out_path);
  write_file(masks, mask_table_text(ex.masks));

  int64_t pb = count_params(ck.graph);
  int64_t pa = count_params(ex.model);
  std::printf("wrote %s and %s\n", out_path.c_str(), masks.c_str());
  std::printf("params: %lld -> %lld (%.2f%% reduction)\n", static_cast<long long>(pb),
              static_cast<long long>(pa),
              100.0 * (1.0 - static_cast<double>(pa) / static_cast<double>(pb)));
  std::vector<int64_t> shape = default_input_shape(ck.graph.input);
  if (!shape.empty()) {
    int64_t fb = count_flops(ck.graph, shape);
    int64_t fa = count_flops(ex.model, shape);
    std::printf("flops: %lld -> %lld (%.2f%% reduction)\n", static_cast<long long>(fb),
                static_cast<long long>(fa),
                100.0 * (1.0 - static_cast<double>(fa) / static_cast<double>(fb)));
  }
  return kExitOk;
}

int run_verify(const std::string& checkpoint_path, const std::string& compact_path, double tol) {
  if (tol < 0.0) throw config_error("--tol must be >= 0");
  Checkpoint ck = load_checkpoint(checkpoint_path);
  CompactModel cm = load_model(compact_path);
  log::info("comparing gated model (%lld params) against %s (%lld params)",
            static_cast<long long>(count_params(ck.graph)), compact_path.c_str(),
            static_cast<long long>(count_params(cm)));
  EquivalenceReport rep = verify_equivalence(ck.graph, cm, 100, tol);
  std::printf("max deviation: %.17g over %lld inputs (tol %.17g): %s\n", rep.max_abs,
              static_cast<long long>(rep.n_samples), tol, rep.pass ? "PASS" : "FAIL");
  return rep.pass ? kExitOk : kExitNumeric;
}

int run_report(const std::string& compact_path, const std::string& dataset_path,
               const std::string& checkpoint_path) {
  CompactModel cm = load_model(compact_path);
  DatasetHandle data = load_dataset(dataset_path);

  MetricsReport rep;
  if (!checkpoint_path.empty()) {
    Checkpoint ck = load_checkpoint(checkpoint_path);
    if (!data.is_graph() && ck.config.task == TaskKind::kClassification) {
      data.task = TaskKind::kClassification;
      data.classes = ck.config.classes;
    }
    data.validate();
    rep = build_report(cm, data, &ck.graph);
  } else {
    data.validate();
    rep = build_report(cm, data, nullptr);
  }
  std::fputs(rep.text().c_str(), stdout);
  return kExitOk;
}

int run_gen(const std::string& kind, uint64_t seed, int64_t n, const std::string& out_path) {
  if (out_path.empty()) throw config_error("gen needs --out");
  DatasetHandle d = gen_synthetic(kind, seed, n);
  log::info("generated %s dataset with seed %" PRIu64, kind.c_str(), seed);
  save_dataset(d, out_path);
  std::printf("wrote %s (%lld samples, %s)\n", out_path.c_str(), static_cast<long long>(d.size()),
              task_kind_name(d.task));
  return kExitOk;
}

}  // namespace lumos
