#include "lumos/consistency.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "lumos/errors.hpp"

namespace lumos {

const LayerMasks& MaskTable::at(const std::string& name) const {
  auto it = entries.find(name);
  if (it == entries.end()) throw consistency_error("no mask entry for layer '" + name + "'");
  return it->second;
}

LayerMasks& MaskTable::at(const std::string& name) {
  auto it = entries.find(name);
  if (it == entries.end()) throw consistency_error("no mask entry for layer '" + name + "'");
  return it->second;
}

SnapshotMap snapshot_gates(const ModelGraph& g) {
  SnapshotMap out;
  for (const LayerNode& n : g.nodes) {
    switch (n.kind) {
      case LayerKind::kFc: out[n.name] = gate_eval(n.fc.gate); break;
      case LayerKind::kConv2d: out[n.name] = gate_eval(n.conv.gate); break;
      case LayerKind::kGin: out[n.name] = gate_eval(n.gin.gate); break;
      case LayerKind::kGcn: out[n.name] = gate_eval(n.gcn.gate); break;
      case LayerKind::kAttention:
        out[n.name + "/q"] = gate_eval(n.attn.gate_q);
        out[n.name + "/k"] = gate_eval(n.attn.gate_k);
        out[n.name + "/v"] = gate_eval(n.attn.gate_v);
        break;
      case LayerKind::kResidualBlock:
        for (const LayerNode& inner : n.branch) out[inner.name] = gate_eval(inner.fc.gate);
        break;
      default:
        break;
    }
  }
  return out;
}

std::vector<int64_t> conv2fc_map(const std::vector<int64_t>& output_mask, int64_t w, int64_t h) {
  if (w < 1 || h < 1) throw consistency_error("conv2fc_map needs positive spatial extents");
  std::vector<int64_t> out;
  out.reserve(output_mask.size() * static_cast<size_t>(w * h));
  for (int64_t j : output_mask) {
    for (int64_t k = 0; k < w * h; ++k) out.push_back(j * w * h + k);
  }
  return out;
}

std::vector<int64_t> concat_coordinate(const std::vector<int64_t>& mask_a, int64_t extent_a,
                                       const std::vector<int64_t>& mask_b) {
  std::vector<int64_t> out = mask_a;
  for (int64_t i : mask_a) {
    if (i < 0 || i >= extent_a) {
      throw consistency_error("concat mask index " + std::to_string(i) +
                              " outside extent " + std::to_string(extent_a));
    }
  }
  for (int64_t i : mask_b) out.push_back(i + extent_a);
  return out;
}

std::vector<int64_t> share_embedding_mask(const std::vector<int64_t>& fc_input_mask,
                                          int64_t embedding_width) {
  for (int64_t i : fc_input_mask) {
    if (i < 0 || i >= embedding_width) {
      throw consistency_error("embedding mask index " + std::to_string(i) +
                              " outside table width " + std::to_string(embedding_width));
    }
  }
  return fc_input_mask;
}

namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double act_value(const std::string& tag, double x) {
  if (tag == "identity" || tag.empty()) return x;
  if (tag == "relu") return std::max(0.0, x);
  if (tag == "sigmoid") return stable_sigmoid(x);
  throw config_error("unknown activation '" + tag + "'");
}

std::vector<int64_t> full_mask(int64_t n) {
  std::vector<int64_t> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = i;
  return out;
}

std::set<int64_t> full_set(int64_t n) {
  std::set<int64_t> out;
  for (int64_t i = 0; i < n; ++i) out.insert(i);
  return out;
}

int64_t input_feature_extent(const InputSpec& in) {
  switch (in.regime) {
    case InputRegime::kVector: return in.dim;
    case InputRegime::kIds: return in.id_cols;
    case InputRegime::kImage: return in.C;
    case InputRegime::kTokens: return in.d;
    case InputRegime::kGraph: return in.node_dim;
  }
  throw config_error("bad input regime");
}

int64_t out_mask_extent(const LayerNode& n) {
  if (n.kind == LayerKind::kAttention) return n.out_shape[1];
  return n.out_shape[0];
}

int64_t in_mask_extent(const LayerNode& n) {
  switch (n.kind) {
    case LayerKind::kFc:
      return n.in_shape.size() == 2 ? n.in_shape[1] : n.in_shape[0];
    case LayerKind::kAttention:
      return n.in_shape[1];
    case LayerKind::kEmbedding:
      return 1;
    case LayerKind::kConcat:
      return n.out_shape[0];
    case LayerKind::kMeanPool:
      return n.in_shape.size() == 2 ? n.in_shape[1] : n.in_shape[0];
    default:
      return n.in_shape[0];
  }
}

const GateSnapshot& snap_for(const SnapshotMap& snaps, const std::string& name) {
  auto it = snaps.find(name);
  if (it == snaps.end()) throw consistency_error("no gate snapshot for layer '" + name + "'");
  return it->second;
}

std::vector<int64_t> keep_of(const SnapshotMap& snaps, const std::string& name) {
  const GateSnapshot& s = snap_for(snaps, name);
  std::vector<int64_t> out;
  out.reserve(s.keep.size());
  for (int32_t i : s.keep) out.push_back(i);
  return out;
}

struct WalkCtx {
  const ModelGraph& g;
  const SnapshotMap& snaps;
  std::map<std::string, const LayerNode*> by_name;
  std::map<std::string, std::vector<const LayerNode*>> consumers;
  std::map<std::string, std::set<int64_t>> demand;
};

int64_t producer_extent(const WalkCtx& cx, const std::string& name) {
  if (name == "input") return input_feature_extent(cx.g.input);
  auto it = cx.by_name.find(name);
  if (it == cx.by_name.end()) throw consistency_error("unknown producer '" + name + "'");
  return out_mask_extent(*it->second);
}

// Whether a dead conv channel's constant can be folded into every transitive
// consumer's bias. Padded convolutions see the constant unevenly at the
// border, so they block absorption.
bool constant_absorbable(const WalkCtx& cx, const std::string& name) {
  auto it = cx.consumers.find(name);
  if (it == cx.consumers.end()) return true;
  for (const LayerNode* c : it->second) {
    switch (c->kind) {
      case LayerKind::kFc:
        if (!c->has_bias) return false;
        break;
      case LayerKind::kConv2d:
        if (c->pad != 0) return false;
        break;
      case LayerKind::kFlatten:
      case LayerKind::kConcat:
        if (!constant_absorbable(cx, c->name)) return false;
        break;
      default:
        return false;
    }
  }
  return true;
}

void add_demand(WalkCtx& cx, const std::string& producer, const std::set<int64_t>& coords) {
  cx.demand[producer].insert(coords.begin(), coords.end());
}

void backward_demand(WalkCtx& cx) {
  cx.demand[cx.g.output] = full_set(out_mask_extent(*cx.by_name.at(cx.g.output)));

  for (auto rit = cx.g.nodes.rbegin(); rit != cx.g.nodes.rend(); ++rit) {
    const LayerNode& n = *rit;
    std::set<int64_t>& own = cx.demand[n.name];
    bool consumed = cx.consumers.count(n.name) != 0;
    if (!consumed && n.name != cx.g.output) {
      // unconsumed side outputs keep everything
      own = full_set(out_mask_extent(n));
    }
    switch (n.kind) {
      case LayerKind::kFc:
      case LayerKind::kGin: {
        std::set<int64_t> rows;
        if (!own.empty()) {
          for (int64_t i : keep_of(cx.snaps, n.name)) rows.insert(i);
        }
        add_demand(cx, n.inputs[0], rows);
        break;
      }
      case LayerKind::kConv2d:
      case LayerKind::kGcn:
      case LayerKind::kFlatten:
        add_demand(cx, n.inputs[0], full_set(producer_extent(cx, n.inputs[0])));
        break;
      case LayerKind::kAttention:
        add_demand(cx, n.inputs[0], full_set(producer_extent(cx, n.inputs[0])));
        break;
      case LayerKind::kEmbedding:
        add_demand(cx, n.inputs[0], full_set(producer_extent(cx, n.inputs[0])));
        break;
      case LayerKind::kConcat: {
        int64_t off = 0;
        for (const std::string& src : n.inputs) {
          int64_t ext = producer_extent(cx, src);
          std::set<int64_t> part;
          for (int64_t j : own) {
            if (j >= off && j < off + ext) part.insert(j - off);
          }
          add_demand(cx, src, part);
          off += ext;
        }
        break;
      }
      case LayerKind::kResidualBlock: {
        std::set<int64_t> need = own;
        if (!own.empty() && !n.branch.empty()) {
          for (int64_t i : keep_of(cx.snaps, n.branch.front().name)) need.insert(i);
        }
        add_demand(cx, n.inputs[0], need);
        break;
      }
      case LayerKind::kMeanPool:
        add_demand(cx, n.inputs[0], own);
        break;
      case LayerKind::kInput:
        break;
    }
  }
}

std::vector<int64_t> sorted_vec(const std::set<int64_t>& s) {
  return std::vector<int64_t>(s.begin(), s.end());
}

}  // namespace

MaskTable propagate_masks(const ModelGraph& g, const SnapshotMap& snaps) {
  if (!g.finalized()) throw config_error("propagate_masks needs a finalized graph");
  WalkCtx cx{g, snaps, {}, {}, {}};
  for (const LayerNode& n : g.nodes) {
    cx.by_name[n.name] = &n;
    for (const std::string& src : n.inputs) cx.consumers[src].push_back(&n);
  }
  backward_demand(cx);

  MaskTable mt;
  {
    LayerMasks im;
    im.in_extent = im.out_extent = input_feature_extent(g.input);
    im.output_mask = sorted_vec(cx.demand["input"]);
    im.input_mask = im.output_mask;
    mt.entries["input"] = im;
  }

  for (const LayerNode& n : g.nodes) {
    const std::vector<int64_t>& p0 = mt.at(n.inputs[0]).output_mask;
    bool is_out = n.name == g.output;
    LayerMasks lm;
    lm.in_extent = in_mask_extent(n);
    lm.out_extent = out_mask_extent(n);

    switch (n.kind) {
      case LayerKind::kFc:
      case LayerKind::kGin:
        lm.input_mask = p0;
        lm.output_mask = sorted_vec(cx.demand[n.name]);
        break;
      case LayerKind::kConv2d: {
        lm.input_mask = p0;
        if (is_out) {
          lm.output_mask = full_mask(n.filters);
          break;
        }
        const GateSnapshot& s = snap_for(snaps, n.name);
        bool absorbable = constant_absorbable(cx, n.name);
        for (int64_t d = 0; d < n.filters; ++d) {
          if (s.is_kept(d)) {
            lm.output_mask.push_back(d);
            continue;
          }
          double c = act_value(n.activation, n.conv.b.value[d]);
          if (c != 0.0 && !absorbable) lm.output_mask.push_back(d);
        }
        break;
      }
      case LayerKind::kGcn:
        lm.input_mask = p0;
        lm.output_mask = is_out ? full_mask(n.units) : keep_of(snaps, n.name);
        break;
      case LayerKind::kAttention:
        lm.input_mask = p0;
        if (static_cast<int64_t>(p0.size()) != lm.in_extent) {
          throw consistency_error("attention '" + n.name +
                                  "' requires its full input width to survive");
        }
        lm.output_mask = full_mask(lm.out_extent);
        break;
      case LayerKind::kEmbedding:
        lm.input_mask = {0};
        lm.output_mask =
            is_out ? full_mask(n.width)
                   : share_embedding_mask(sorted_vec(cx.demand[n.name]), n.width);
        break;
      case LayerKind::kFlatten:
        lm.input_mask = p0;
        lm.output_mask = conv2fc_map(p0, n.in_shape[2], n.in_shape[1]);
        break;
      case LayerKind::kConcat: {
        std::vector<int64_t> mask = mt.at(n.inputs[0]).output_mask;
        int64_t ext = producer_extent(cx, n.inputs[0]);
        for (size_t i = 1; i < n.inputs.size(); ++i) {
          mask = concat_coordinate(mask, ext, mt.at(n.inputs[i]).output_mask);
          ext += producer_extent(cx, n.inputs[i]);
        }
        lm.input_mask = mask;
        lm.output_mask = mask;
        break;
      }
      case LayerKind::kResidualBlock: {
        lm.input_mask = p0;
        lm.output_mask = p0;
        std::vector<int64_t> prev = p0;
        for (size_t i = 0; i < n.branch.size(); ++i) {
          const LayerNode& inner = n.branch[i];
          LayerMasks bm;
          bm.in_extent = inner.in_shape[0];
          bm.out_extent = inner.units;
          bm.input_mask = prev;
          bm.output_mask =
              i + 1 < n.branch.size() ? keep_of(snaps, n.branch[i + 1].name) : p0;
          prev = bm.output_mask;
          mt.entries[inner.name] = bm;
        }
        break;
      }
      case LayerKind::kMeanPool:
        lm.input_mask = p0;
        lm.output_mask = p0;
        break;
      case LayerKind::kInput:
        throw config_error("unexpected input node");
    }
    mt.entries[n.name] = lm;
  }
  return mt;
}

void remove_dead_blocks(ModelGraph& g, MaskTable& masks, const SnapshotMap& snaps) {
  for (auto it = g.nodes.begin(); it != g.nodes.end();) {
    LayerNode& n = *it;
    if (n.kind != LayerKind::kResidualBlock || n.branch.empty()) {
      ++it;
      continue;
    }
    bool dead = true;
    for (const LayerNode& inner : n.branch) {
      if (!snap_for(snaps, inner.name).all_closed()) {
        dead = false;
        break;
      }
    }
    if (!dead) {
      ++it;
      continue;
    }

    for (const LayerNode& inner : n.branch) {
      for (const LayerNode& other : g.nodes) {
        for (const std::string& src : other.inputs) {
          if (src == inner.name) {
            throw topology_error("cannot delete block '" + n.name + "': layer '" + other.name +
                                 "' reads its internal layer '" + inner.name + "'");
          }
        }
      }
    }

    // with every gate closed each branch stage reduces to act(b)
    const LayerNode& last = n.branch.back();
    int64_t width = n.out_shape[0];
    Tensor c({width});
    bool all_zero = true;
    for (int64_t j = 0; j < width; ++j) {
      double b = last.has_bias ? last.fc.b.value[j] : 0.0;
      c[j] = act_value(last.activation, b);
      if (c[j] != 0.0) all_zero = false;
    }

    for (const LayerNode& inner : n.branch) masks.entries.erase(inner.name);

    if (all_zero) {
      const std::string producer = n.inputs[0];
      const std::string dead_name = n.name;
      masks.entries.erase(dead_name);
      it = g.nodes.erase(it);
      for (LayerNode& other : g.nodes) {
        for (std::string& src : other.inputs) {
          if (src == dead_name) src = producer;
        }
      }
      if (g.output == dead_name) g.output = producer;
    } else {
      n.branch.clear();
      n.dead_branch_constant = std::move(c);
      ++it;
    }
  }
}

namespace {

void check_sorted_in_range(const std::string& name, const char* which,
                           const std::vector<int64_t>& mask, int64_t extent) {
  int64_t prev = -1;
  for (int64_t i : mask) {
    if (i <= prev || i < 0 || i >= extent) {
      throw consistency_error("layer '" + name + "' has an invalid " + which + " mask entry " +
                              std::to_string(i) + " (extent " + std::to_string(extent) + ")");
    }
    prev = i;
  }
}

}  // namespace

void check_executable(const ModelGraph& g, const MaskTable& masks) {
  for (const auto& [name, lm] : masks.entries) {
    check_sorted_in_range(name, "input", lm.input_mask, lm.in_extent);
    check_sorted_in_range(name, "output", lm.output_mask, lm.out_extent);
  }

  std::map<std::string, const LayerNode*> by_name;
  for (const LayerNode& n : g.nodes) by_name[n.name] = &n;

  auto producer_mask = [&](const std::string& src) -> const std::vector<int64_t>& {
    return masks.at(src).output_mask;
  };

  for (const LayerNode& n : g.nodes) {
    const LayerMasks& lm = masks.at(n.name);
    if (lm.input_mask.empty() && !lm.output_mask.empty()) {
      throw consistency_error("layer '" + n.name +
                              "' lost every input but still produces outputs");
    }

    std::vector<int64_t> expect;
    if (n.kind == LayerKind::kConcat) {
      expect = producer_mask(n.inputs[0]);
      int64_t ext = n.inputs[0] == "input" ? input_feature_extent(g.input)
                                           : out_mask_extent(*by_name.at(n.inputs[0]));
      for (size_t i = 1; i < n.inputs.size(); ++i) {
        expect = concat_coordinate(expect, ext, producer_mask(n.inputs[i]));
        ext += n.inputs[i] == "input" ? input_feature_extent(g.input)
                                      : out_mask_extent(*by_name.at(n.inputs[i]));
      }
    } else if (n.kind == LayerKind::kEmbedding) {
      expect = {0};
    } else {
      expect = producer_mask(n.inputs[0]);
    }
    if (lm.input_mask != expect) {
      throw consistency_error("layer '" + n.name +
                              "' input mask is not the image of its producer's output mask");
    }

    if (n.kind == LayerKind::kFlatten) {
      std::vector<int64_t> out = conv2fc_map(lm.input_mask, n.in_shape[2], n.in_shape[1]);
      if (lm.output_mask != out) {
        throw consistency_error("flatten '" + n.name + "' output mask mismatch");
      }
    }
    if (n.kind == LayerKind::kResidualBlock && !n.branch.empty()) {
      const LayerMasks& bl = masks.at(n.branch.back().name);
      if (!bl.output_mask.empty() && bl.output_mask != lm.output_mask) {
        throw consistency_error("residual branch '" + n.branch.back().name +
                                "' surviving extent does not match the skip path of '" + n.name +
                                "'");
      }
      for (const LayerNode& inner : n.branch) {
        const LayerMasks& bm = masks.at(inner.name);
        if (bm.input_mask.empty() && !bm.output_mask.empty()) {
          throw consistency_error("layer '" + inner.name +
                                  "' lost every input but still produces outputs");
        }
      }
    }
  }

  if (masks.at(g.output).output_mask.size() !=
      static_cast<size_t>(masks.at(g.output).out_extent)) {
    throw consistency_error("output layer '" + g.output + "' must keep its full extent");
  }
}

std::string mask_report(const ModelGraph& g, const MaskTable& masks) {
  std::ostringstream os;
  auto line = [&](const std::string& name, const char* kind, const LayerMasks& lm) {
    os << name << " (" << kind << "): in " << lm.input_mask.size() << "/" << lm.in_extent
       << ", out " << lm.output_mask.size() << "/" << lm.out_extent << "\n";
  };
  if (masks.has("input")) line("input", "input", masks.at("input"));
  for (const LayerNode& n : g.nodes) {
    if (!masks.has(n.name)) continue;
    line(n.name, layer_kind_name(n.kind), masks.at(n.name));
    for (const LayerNode& inner : n.branch) {
      if (masks.has(inner.name)) line("  " + inner.name, "fc", masks.at(inner.name));
    }
  }
  return os.str();
}

}  // namespace lumos
