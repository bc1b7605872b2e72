#include "lumos/data.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <utility>

#include "../vendor/json.hpp"
#include "lumos/errors.hpp"
#include "lumos/rng.hpp"

namespace lumos {

namespace {

using nlohmann::json;

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_integral_value(double v) { return std::isfinite(v) && v == std::floor(v); }

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---- little-endian byte helpers -------------------------------------------

void put_u8(std::string& out, uint8_t v) { out.push_back(static_cast<char>(v)); }

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

struct ByteReader {
  const unsigned char* p;
  size_t n;
  size_t pos = 0;
  std::string where;

  void need(size_t k) const {
    if (pos + k > n) throw io_error("truncated tensor file '" + where + "'");
  }
  uint8_t u8() {
    need(1);
    return p[pos++];
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[pos + static_cast<size_t>(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  double f64() {
    need(8);
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(p[pos + static_cast<size_t>(i)]) << (8 * i);
    pos += 8;
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
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

// ---- CSV -------------------------------------------------------------------

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

DatasetHandle load_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open dataset '" + path + "'");
  std::string line;
  if (!std::getline(f, line)) throw io_error("dataset '" + path + "': malformed header (empty file)");
  size_t ncol = split_fields(line).size();
  if (ncol < 2) {
    throw io_error("dataset '" + path + "': header needs at least one feature and a target column");
  }
  std::vector<double> vals;
  int64_t rows = 0;
  int64_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields = split_fields(line);
    if (fields.size() != ncol) {
      throw io_error("dataset '" + path + "' line " + std::to_string(lineno) + ": expected " +
                     std::to_string(ncol) + " fields, got " + std::to_string(fields.size()));
    }
    for (const std::string& s : fields) {
      size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(s, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != s.size() || s.empty()) {
        throw io_error("dataset '" + path + "' line " + std::to_string(lineno) +
                       ": cannot parse number '" + s + "'");
      }
      vals.push_back(v);
    }
    ++rows;
  }
  if (rows == 0) throw io_error("dataset '" + path + "' has no data rows");
  int64_t d = static_cast<int64_t>(ncol) - 1;
  DatasetHandle h;
  h.features = Tensor({rows, d});
  h.targets = Tensor({rows});
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < d; ++j) {
      h.features.at2(i, j) = vals[static_cast<size_t>(i * (d + 1) + j)];
    }
    h.targets[i] = vals[static_cast<size_t>(i * (d + 1) + d)];
  }
  return h;
}

void save_csv(const DatasetHandle& d, const std::string& path) {
  if (d.is_graph()) throw config_error("graph datasets cannot be written as CSV");
  if (d.targets.rank() != 1) throw config_error("CSV export needs a single target column");
  std::string out;
  int64_t w = d.features.extent(1);
  for (int64_t j = 0; j < w; ++j) out += "x" + std::to_string(j) + ",";
  out += "target\n";
  for (int64_t i = 0; i < d.features.extent(0); ++i) {
    for (int64_t j = 0; j < w; ++j) {
      out += fmt_double(d.features.at2(i, j));
      out += ',';
    }
    out += fmt_double(d.targets[i]);
    out += '\n';
  }
  write_file(path, out);
}

// ---- graph JSON -------------------------------------------------------------

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& ctx) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) throw io_error(ctx + ": unknown key '" + it.key() + "'");
  }
}

Tensor parse_matrix(const json& arr, const std::string& ctx) {
  if (!arr.is_array() || arr.empty()) throw io_error(ctx + ": expected a non-empty array of rows");
  int64_t rows = static_cast<int64_t>(arr.size());
  if (!arr[0].is_array() || arr[0].empty()) throw io_error(ctx + ": rows must be non-empty arrays");
  int64_t cols = static_cast<int64_t>(arr[0].size());
  Tensor t({rows, cols});
  for (int64_t i = 0; i < rows; ++i) {
    const json& row = arr[static_cast<size_t>(i)];
    if (!row.is_array() || static_cast<int64_t>(row.size()) != cols) {
      throw io_error(ctx + ": row " + std::to_string(i) + " has inconsistent width");
    }
    for (int64_t j = 0; j < cols; ++j) {
      const json& v = row[static_cast<size_t>(j)];
      if (!v.is_number()) throw io_error(ctx + ": non-numeric entry");
      t.at2(i, j) = v.get<double>();
    }
  }
  return t;
}

DatasetHandle load_graph_json(const std::string& path) {
  json root;
  try {
    root = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw io_error("dataset '" + path + "': " + e.what());
  }
  if (!root.is_object()) throw io_error("dataset '" + path + "': top level must be an object");
  check_keys(root, {"task", "classes", "graphs"}, "dataset '" + path + "'");
  DatasetHandle h;
  std::string task = root.value("task", std::string("regression"));
  h.task = task_kind_from_name(task);
  if (h.task == TaskKind::kClassification) {
    if (!root.contains("classes")) throw io_error("dataset '" + path + "': classification needs 'classes'");
    h.classes = root["classes"].get<int64_t>();
  }
  if (!root.contains("graphs") || !root["graphs"].is_array() || root["graphs"].empty()) {
    throw io_error("dataset '" + path + "': 'graphs' must be a non-empty array");
  }
  for (size_t gi = 0; gi < root["graphs"].size(); ++gi) {
    const json& jg = root["graphs"][gi];
    std::string ctx = "dataset '" + path + "' graph " + std::to_string(gi);
    if (!jg.is_object()) throw io_error(ctx + ": expected an object");
    check_keys(jg, {"nodes", "edges", "edge_feats", "root", "target", "label"}, ctx);
    if (!jg.contains("nodes")) throw io_error(ctx + ": missing 'nodes'");
    GraphSample s;
    s.nodes = parse_matrix(jg["nodes"], ctx + " nodes");
    int64_t v = s.nodes.extent(0);
    if (jg.contains("edges")) {
      const json& je = jg["edges"];
      if (!je.is_array()) throw io_error(ctx + ": 'edges' must be an array");
      for (const json& pair : je) {
        if (!pair.is_array() || pair.size() != 2) throw io_error(ctx + ": edges must be [src,dst] pairs");
        int64_t a = pair[0].get<int64_t>(), b = pair[1].get<int64_t>();
        if (a < 0 || a >= v || b < 0 || b >= v) {
          throw io_error(ctx + ": edge endpoint out of range for " + std::to_string(v) + " nodes");
        }
        s.edges.emplace_back(static_cast<int32_t>(a), static_cast<int32_t>(b));
      }
    }
    if (!s.edges.empty()) {
      if (!jg.contains("edge_feats")) throw io_error(ctx + ": edges present but 'edge_feats' missing");
      s.edge_feats = parse_matrix(jg["edge_feats"], ctx + " edge_feats");
      if (s.edge_feats.extent(0) != static_cast<int64_t>(s.edges.size())) {
        throw io_error(ctx + ": edge_feats rows do not match the edge count");
      }
    } else if (jg.contains("edge_feats")) {
      throw io_error(ctx + ": edge_feats given without edges");
    }
    s.root = static_cast<int32_t>(jg.value("root", 0));
    if (s.root < 0 || s.root >= v) throw io_error(ctx + ": root out of range");
    if (h.task == TaskKind::kClassification) {
      if (!jg.contains("label")) throw io_error(ctx + ": classification graph needs 'label'");
      s.label = jg["label"].get<int32_t>();
    } else {
      if (!jg.contains("target")) throw io_error(ctx + ": regression graph needs 'target'");
      s.target = jg["target"].get<double>();
    }
    h.graphs.push_back(std::move(s));
  }
  h.validate();
  return h;
}

void save_graph_json(const DatasetHandle& d, const std::string& path) {
  json root;
  root["task"] = task_kind_name(d.task);
  if (d.task == TaskKind::kClassification) root["classes"] = d.classes;
  json graphs = json::array();
  for (const GraphSample& s : d.graphs) {
    json jg;
    json nodes = json::array();
    for (int64_t i = 0; i < s.nodes.extent(0); ++i) {
      json row = json::array();
      for (int64_t j = 0; j < s.nodes.extent(1); ++j) row.push_back(s.nodes.at2(i, j));
      nodes.push_back(std::move(row));
    }
    jg["nodes"] = std::move(nodes);
    if (!s.edges.empty()) {
      json edges = json::array();
      for (const auto& e : s.edges) edges.push_back(json::array({e.first, e.second}));
      jg["edges"] = std::move(edges);
      json feats = json::array();
      for (int64_t i = 0; i < s.edge_feats.extent(0); ++i) {
        json row = json::array();
        for (int64_t j = 0; j < s.edge_feats.extent(1); ++j) row.push_back(s.edge_feats.at2(i, j));
        feats.push_back(std::move(row));
      }
      jg["edge_feats"] = std::move(feats);
    }
    jg["root"] = s.root;
    if (d.task == TaskKind::kClassification) {
      jg["label"] = s.label;
    } else {
      jg["target"] = s.target;
    }
    graphs.push_back(std::move(jg));
  }
  root["graphs"] = std::move(graphs);
  write_file(path, root.dump(1));
}

}  // namespace

const char* task_kind_name(TaskKind t) {
  return t == TaskKind::kRegression ? "regression" : "classification";
}

TaskKind task_kind_from_name(const std::string& s) {
  if (s == "regression") return TaskKind::kRegression;
  if (s == "classification") return TaskKind::kClassification;
  throw config_error("unknown task kind '" + s + "'");
}

int64_t DatasetHandle::size() const {
  if (is_graph()) return static_cast<int64_t>(graphs.size());
  return features.empty() ? 0 : features.extent(0);
}

void DatasetHandle::validate() const {
  if (is_graph()) {
    if (!features.empty() || !targets.empty()) {
      throw config_error("dataset holds both dense tensors and graph samples");
    }
    int64_t node_w = graphs.front().nodes.empty() ? 0 : graphs.front().nodes.extent(1);
    int64_t edge_w = -1;
    for (size_t gi = 0; gi < graphs.size(); ++gi) {
      const GraphSample& s = graphs[gi];
      std::string ctx = "graph sample " + std::to_string(gi);
      if (s.nodes.rank() != 2) throw config_error(ctx + ": nodes must be [v x n]");
      if (s.nodes.extent(1) != node_w) throw config_error(ctx + ": node feature width differs");
      int64_t v = s.nodes.extent(0);
      if (s.root < 0 || s.root >= v) throw config_error(ctx + ": root out of range");
      if (!s.edges.empty()) {
        if (s.edge_feats.rank() != 2 ||
            s.edge_feats.extent(0) != static_cast<int64_t>(s.edges.size())) {
          throw config_error(ctx + ": edge_feats must have one row per edge");
        }
        if (edge_w < 0) edge_w = s.edge_feats.extent(1);
        if (s.edge_feats.extent(1) != edge_w) throw config_error(ctx + ": edge feature width differs");
        for (const auto& e : s.edges) {
          if (e.first < 0 || e.first >= v || e.second < 0 || e.second >= v) {
            throw config_error(ctx + ": edge endpoint out of range");
          }
        }
      }
      if (task == TaskKind::kClassification && (s.label < 0 || s.label >= classes)) {
        throw config_error(ctx + ": label " + std::to_string(s.label) + " outside " +
                           std::to_string(classes) + " classes");
      }
    }
    if (task == TaskKind::kClassification && classes < 2) {
      throw config_error("classification dataset needs classes >= 2");
    }
    return;
  }
  if (features.empty()) throw config_error("dataset is empty");
  if (features.rank() != 2) throw shape_error("features must be [n x d], got " + features.shape_str());
  if (targets.empty()) throw config_error("dataset has no targets");
  if (targets.rank() > 2) throw shape_error("targets must be [n] or [n x m]");
  if (targets.extent(0) != features.extent(0)) {
    throw shape_error("feature rows " + std::to_string(features.extent(0)) +
                      " and target rows " + std::to_string(targets.extent(0)) + " disagree");
  }
  if (task == TaskKind::kClassification) {
    if (targets.rank() != 1) throw shape_error("classification targets must be a single id column");
    if (classes < 2) throw config_error("classification dataset needs classes >= 2");
    for (int64_t i = 0; i < targets.numel(); ++i) {
      double v = targets[i];
      if (!is_integral_value(v) || v < 0.0 || v >= static_cast<double>(classes)) {
        throw config_error("row " + std::to_string(i) + ": class id " + fmt_double(v) +
                           " is not an integer below " + std::to_string(classes));
      }
    }
  }
}

DatasetHandle gen_synthetic(const std::string& kind, uint64_t seed, int64_t n) {
  if (n < 1) throw config_error("gen_synthetic: n must be >= 1");
  RngStream root(seed);
  DatasetHandle h;
  if (kind == "sparse16") {
    RngStream xs = root.split("features");
    RngStream ns = root.split("noise");
    h.features = Tensor({n, 16});
    h.targets = Tensor({n});
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < 16; ++j) h.features.at2(i, j) = xs.normal(0.0, 1.0);
      h.targets[i] = 2.0 * h.features.at2(i, 3) - h.features.at2(i, 7) +
                     0.5 * h.features.at2(i, 12) + 0.1 * ns.normal(0.0, 1.0);
    }
    return h;
  }
  if (kind == "image") {
    const int64_t c = 2, hh = 6, ww = 6, flat = c * hh * ww;
    RngStream xs = root.split("features");
    RngStream ns = root.split("noise");
    h.features = Tensor({n, flat});
    h.targets = Tensor({n});
    for (int64_t i = 0; i < n; ++i) {
      double m0 = 0.0, m1 = 0.0;
      for (int64_t j = 0; j < flat; ++j) {
        double v = xs.normal(0.0, 1.0);
        h.features.at2(i, j) = v;
        if (j < hh * ww) {
          m0 += v;
        } else {
          m1 += v;
        }
      }
      h.targets[i] = (m0 - m1) / static_cast<double>(hh * ww) + 0.05 * ns.normal(0.0, 1.0);
    }
    return h;
  }
  if (kind == "graph") {
    RngStream gs = root.split("graphs");
    h.task = TaskKind::kClassification;
    h.classes = 2;
    for (int64_t i = 0; i < n; ++i) {
      GraphSample s;
      int64_t v = 4 + gs.uniform_int(0, 5);
      s.nodes = Tensor({v, 4});
      double col0 = 0.0;
      for (int64_t a = 0; a < v; ++a) {
        for (int64_t b = 0; b < 4; ++b) s.nodes.at2(a, b) = gs.normal(0.0, 1.0);
        col0 += s.nodes.at2(a, 0);
      }
      int64_t edges = v - 1 + gs.uniform_int(0, v);
      s.edge_feats = Tensor({edges, 2});
      for (int64_t e = 0; e < edges; ++e) {
        int64_t a = gs.uniform_int(0, v);
        int64_t b = gs.uniform_int(0, v);
        if (a == b) b = (b + 1) % v;
        s.edges.emplace_back(static_cast<int32_t>(a), static_cast<int32_t>(b));
        s.edge_feats.at2(e, 0) = gs.normal(0.0, 1.0);
        s.edge_feats.at2(e, 1) = gs.normal(0.0, 1.0);
      }
      s.root = 0;
      s.label = col0 > 0.0 ? 1 : 0;
      h.graphs.push_back(std::move(s));
    }
    return h;
  }
  throw config_error("unknown synthetic kind '" + kind + "'");
}

void save_tensor(const Tensor& t, const std::string& path) {
  if (t.empty()) throw config_error("cannot save an empty tensor");
  std::string out = "LUMT";
  put_u8(out, 0);  // dtype f64
  put_u8(out, static_cast<uint8_t>(t.rank()));
  for (size_t i = 0; i < t.rank(); ++i) put_u32(out, static_cast<uint32_t>(t.extent(i)));
  for (int64_t i = 0; i < t.numel(); ++i) put_f64(out, t[i]);
  uint32_t crc = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(out.size())));
  put_u32(out, crc);
  write_file(path, out);
}

Tensor load_tensor(const std::string& path) {
  std::string bytes = read_file(path);
  if (bytes.size() < 10) throw io_error("truncated tensor file '" + path + "'");
  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) {
    stored |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[bytes.size() - 4 +
                                                               static_cast<size_t>(i)]))
              << (8 * i);
  }
  uint32_t computed = static_cast<uint32_t>(crc32(
      0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size() - 4)));
  if (stored != computed) throw io_error("checksum mismatch in tensor file '" + path + "'");
  ByteReader r{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size() - 4, 0, path};
  char magic[4];
  r.need(4);
  std::memcpy(magic, r.p, 4);
  r.pos = 4;
  if (std::memcmp(magic, "LUMT", 4) != 0) throw io_error("bad tensor magic in '" + path + "'");
  uint8_t dtype = r.u8();
  if (dtype != 0) throw io_error("unsupported tensor dtype in '" + path + "'");
  uint8_t ndim = r.u8();
  if (ndim == 0) throw io_error("tensor file '" + path + "' declares zero dimensions");
  std::vector<int64_t> shape;
  int64_t numel = 1;
  for (int i = 0; i < ndim; ++i) {
    uint32_t e = r.u32();
    if (e == 0) throw io_error("tensor file '" + path + "' has a zero extent");
    shape.push_back(static_cast<int64_t>(e));
    numel *= static_cast<int64_t>(e);
  }
  Tensor t(shape);
  for (int64_t i = 0; i < numel; ++i) t[i] = r.f64();
  if (r.pos != r.n) throw io_error("tensor file '" + path + "' has trailing bytes");
  return t;
}

DatasetHandle load_dataset(const std::string& path) {
  if (ends_with(path, ".csv")) return load_csv(path);
  if (ends_with(path, ".json")) return load_graph_json(path);
  if (ends_with(path, ".lumt")) {
    Tensor t = load_tensor(path);
    if (t.rank() != 2 || t.extent(1) < 2) {
      throw io_error("dataset '" + path + "': tensor must be [n x d] with d >= 2");
    }
    int64_t rows = t.extent(0), d = t.extent(1) - 1;
    DatasetHandle h;
    h.features = Tensor({rows, d});
    h.targets = Tensor({rows});
    for (int64_t i = 0; i < rows; ++i) {
      for (int64_t j = 0; j < d; ++j) h.features.at2(i, j) = t.at2(i, j);
      h.targets[i] = t.at2(i, d);
    }
    return h;
  }
  throw io_error("unrecognized dataset extension for '" + path + "' (.csv, .lumt, .json)");
}

void save_dataset(const DatasetHandle& d, const std::string& path) {
  if (ends_with(path, ".csv")) {
    save_csv(d, path);
    return;
  }
  if (ends_with(path, ".json")) {
    if (!d.is_graph()) throw config_error("only graph datasets are written as JSON");
    save_graph_json(d, path);
    return;
  }
  if (ends_with(path, ".lumt")) {
    if (d.is_graph()) throw config_error("graph datasets cannot be written as LUMT tensors");
    if (d.targets.rank() != 1) throw config_error("LUMT export needs a single target column");
    int64_t rows = d.features.extent(0), w = d.features.extent(1);
    Tensor t({rows, w + 1});
    for (int64_t i = 0; i < rows; ++i) {
      for (int64_t j = 0; j < w; ++j) t.at2(i, j) = d.features.at2(i, j);
      t.at2(i, w) = d.targets[i];
    }
    save_tensor(t, path);
    return;
  }
  throw io_error("unrecognized dataset extension for '" + path + "' (.csv, .lumt, .json)");
}

}  // namespace lumos
