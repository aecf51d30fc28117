#include "hsicomp/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <unordered_map>

#include "hsicomp/error.hpp"
#include "hsicomp/eval.hpp"
#include "hsicomp/kvfile.hpp"
#include "hsicomp/parallel.hpp"

namespace hsicomp {

namespace {

// The conv that produces the class logits; its filter count is the class
// count and must survive every scheme.
std::string protected_conv(const NetGraph& g) {
  const LayerNode& out = g.node(g.output_id());
  const std::string& p = out.inputs[0];
  return is_conv_kind(g.node(p).kind) ? p : std::string();
}

int removed_filters(float ratio, int out_ch) {
  if (ratio <= 0.0f) return 0;
  int removed = static_cast<int>(std::lround(static_cast<double>(ratio) * out_ch));
  if (removed >= out_ch) removed = out_ch - 1;  // one filter always survives
  return removed;
}

std::vector<int> select_indices(int n) {
  std::vector<int> all(n);
  std::iota(all.begin(), all.end(), 0);
  return all;
}

template <typename T>
std::vector<T> take(const std::vector<T>& v, const std::vector<int>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(v[i]);
  return out;
}

}  // namespace

void PruningScheme::validate(const NetGraph& g) const {
  const std::string head = protected_conv(g);
  for (const auto& [id, r] : ratios) {
    if (!g.has(id)) throw SchemeError("scheme names unknown layer '" + id + "'");
    if (!is_conv_kind(g.node(id).kind))
      throw SchemeError("scheme names non-conv layer '" + id + "'");
    if (id == head)
      throw SchemeError("scheme prunes the class head '" + id + "'");
    const double steps = static_cast<double>(r) * 10.0;
    if (r < -1e-6f || r > 0.9f + 1e-6f ||
        std::abs(steps - std::round(steps)) > 1e-4)
      throw SchemeError("ratio " + std::to_string(r) + " for '" + id +
                        "' is off the 0.1 grid or beyond 0.9");
  }
}

void PruningScheme::save(const std::string& path) const {
  KvFile kv;
  for (const auto& [id, r] : ratios) kv.set_double("ratio." + id, r);
  kv.save(path);
}

PruningScheme PruningScheme::load(const std::string& path) {
  KvFile kv = KvFile::load(path);
  PruningScheme s;
  for (const std::string& k : kv.keys()) {
    if (k.rfind("ratio.", 0) != 0)
      throw ParseError(path + ": unexpected key '" + k + "'");
    s.ratios[k.substr(6)] = static_cast<float>(kv.get_double(k));
  }
  return s;
}

void SensitivityCurve::save(const std::string& path) const {
  KvFile kv;
  kv.set_doubles("ratios", std::vector<double>(ratios.begin(), ratios.end()));
  kv.set_double("baseline", baseline);
  for (const auto& [id, v] : values) kv.set_doubles("curve." + id, v);
  kv.save(path);
}

SensitivityCurve SensitivityCurve::load(const std::string& path) {
  KvFile kv = KvFile::load(path);
  SensitivityCurve c;
  for (const std::string& k : kv.keys()) {
    if (k == "ratios") {
      for (double r : kv.get_doubles(k)) c.ratios.push_back(static_cast<float>(r));
    } else if (k == "baseline") {
      c.baseline = kv.get_double(k);
    } else if (k.rfind("curve.", 0) == 0) {
      c.values[k.substr(6)] = kv.get_doubles(k);
    } else {
      throw ParseError(path + ": unexpected key '" + k + "'");
    }
  }
  if (c.ratios.empty()) throw ParseError(path + ": missing ratios");
  for (const auto& [id, v] : c.values)
    if (v.size() != c.ratios.size())
      throw ParseError(path + ": curve for '" + id + "' has " +
                       std::to_string(v.size()) + " points, expected " +
                       std::to_string(c.ratios.size()));
  return c;
}

std::vector<int> rank_filters_l1(const LayerNode& layer) {
  if (!is_conv_kind(layer.kind))
    throw SchemeError("'" + layer.id + "' is not a conv layer");
  const size_t per = static_cast<size_t>(layer.kh) * layer.kw * layer.in_ch;
  std::vector<double> norms(layer.out_ch, 0.0);
  for (int f = 0; f < layer.out_ch; ++f) {
    const float* w = layer.weight.data() + f * per;
    double s = 0.0;
    for (size_t i = 0; i < per; ++i) s += std::abs(static_cast<double>(w[i]));
    norms[f] = s;
  }
  std::vector<int> order = select_indices(layer.out_ch);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return norms[a] != norms[b] ? norms[a] < norms[b] : a < b;
  });
  return order;
}

std::vector<std::string> prunable_layers(const NetGraph& g) {
  const std::string head = protected_conv(g);
  std::vector<std::string> out;
  for (const LayerNode& n : g.nodes())
    if (is_conv_kind(n.kind) && n.id != head) out.push_back(n.id);
  return out;
}

namespace {

// Original output channel count per node (what consumers see before any
// pruning), needed for concat offsets.
std::unordered_map<std::string, int> original_channels(const NetGraph& g) {
  std::unordered_map<std::string, int> oc;
  for (const LayerNode& n : g.nodes()) {
    switch (n.kind) {
      case LayerKind::Input:
      case LayerKind::Conv2D:
      case LayerKind::TransposedConv2D:
      case LayerKind::BatchNorm:
      case LayerKind::DepthwiseNorm:
        oc[n.id] = n.out_ch;
        break;
      case LayerKind::Concat:
        oc[n.id] = oc.at(n.inputs[0]) + oc.at(n.inputs[1]);
        break;
      default:
        oc[n.id] = oc.at(n.inputs[0]);
    }
  }
  return oc;
}

std::vector<int> kept_filters(const LayerNode& n, float ratio) {
  const int removed = removed_filters(ratio, n.out_ch);
  if (removed == 0) return select_indices(n.out_ch);
  const std::vector<int> order = rank_filters_l1(n);
  std::vector<int> keep(order.begin() + removed, order.end());
  std::sort(keep.begin(), keep.end());
  return keep;
}

}  // namespace

ApplyResult apply_scheme(const NetGraph& g, const PruningScheme& scheme) {
  scheme.validate(g);
  const auto orig_oc = original_channels(g);
  std::unordered_map<std::string, std::vector<int>> out_kept;

  ApplyResult res;
  for (const LayerNode& n : g.nodes()) {
    LayerNode nn;
    nn.id = n.id;
    nn.kind = n.kind;
    nn.inputs = n.inputs;
    switch (n.kind) {
      case LayerKind::Input: {
        nn.out_ch = n.out_ch;
        out_kept[n.id] = select_indices(n.out_ch);
        break;
      }
      case LayerKind::Conv2D:
      case LayerKind::TransposedConv2D: {
        const std::vector<int>& in_keep = out_kept.at(n.inputs[0]);
        const std::vector<int> keep = kept_filters(n, scheme.ratio_of(n.id));
        nn.kh = n.kh;
        nn.kw = n.kw;
        nn.out_ch = static_cast<int>(keep.size());
        nn.in_ch = static_cast<int>(in_keep.size());
        nn.weight.resize(nn.weight_count());
        size_t w = 0;
        for (int f : keep)
          for (int dy = 0; dy < n.kh; ++dy)
            for (int dx = 0; dx < n.kw; ++dx)
              for (int i : in_keep) nn.weight[w++] = n.weight[n.widx(f, dy, dx, i)];
        nn.bias = take(n.bias, keep);
        out_kept[n.id] = keep;
        res.mask.kept[n.id] = keep;
        break;
      }
      case LayerKind::BatchNorm: {
        const std::vector<int>& keep = out_kept.at(n.inputs[0]);
        nn.out_ch = static_cast<int>(keep.size());
        nn.gamma = take(n.gamma, keep);
        nn.beta = take(n.beta, keep);
        nn.running_mean = take(n.running_mean, keep);
        nn.running_var = take(n.running_var, keep);
        nn.eps = n.eps;
        out_kept[n.id] = keep;
        break;
      }
      case LayerKind::DepthwiseNorm: {
        const std::vector<int>& keep = out_kept.at(n.inputs[0]);
        nn.out_ch = static_cast<int>(keep.size());
        nn.weight = take(n.weight, keep);
        nn.bias = take(n.bias, keep);
        out_kept[n.id] = keep;
        break;
      }
      case LayerKind::Concat: {
        const std::vector<int>& ka = out_kept.at(n.inputs[0]);
        const std::vector<int>& kb = out_kept.at(n.inputs[1]);
        const int a_orig = orig_oc.at(n.inputs[0]);
        std::vector<int> joined = ka;
        for (int i : kb) joined.push_back(a_orig + i);
        out_kept[n.id] = std::move(joined);
        break;
      }
      default: {  // ReLU, MaxPool2D, Dropout, Softmax pass masks through
        nn.dropout_rate = n.dropout_rate;
        out_kept[n.id] = out_kept.at(n.inputs[0]);
        break;
      }
    }
    res.graph.add(std::move(nn));
  }
  res.graph.validate();
  return res;
}

uint64_t scheme_conv_flops(const NetGraph& g, int input_h, int input_w,
                           const PruningScheme& scheme) {
  scheme.validate(g);
  struct Dim {
    int h, w, c;
  };
  std::unordered_map<std::string, Dim> dims;
  uint64_t flops = 0;
  for (const LayerNode& n : g.nodes()) {
    switch (n.kind) {
      case LayerKind::Input:
        dims[n.id] = {input_h, input_w, n.out_ch};
        break;
      case LayerKind::Conv2D: {
        const Dim& in = dims.at(n.inputs[0]);
        const int oc = n.out_ch - removed_filters(scheme.ratio_of(n.id), n.out_ch);
        flops += static_cast<uint64_t>(in.h) * in.w * oc * n.kh * n.kw * in.c * 2;
        dims[n.id] = {in.h, in.w, oc};
        break;
      }
      case LayerKind::TransposedConv2D: {
        const Dim& in = dims.at(n.inputs[0]);
        const int oc = n.out_ch - removed_filters(scheme.ratio_of(n.id), n.out_ch);
        flops += static_cast<uint64_t>(in.h * 2) * (in.w * 2) * oc * n.kh *
                 n.kw * in.c * 2 / 4;
        dims[n.id] = {in.h * 2, in.w * 2, oc};
        break;
      }
      case LayerKind::MaxPool2D: {
        const Dim& in = dims.at(n.inputs[0]);
        dims[n.id] = {in.h / 2, in.w / 2, in.c};
        break;
      }
      case LayerKind::Concat: {
        const Dim& a = dims.at(n.inputs[0]);
        const Dim& b = dims.at(n.inputs[1]);
        dims[n.id] = {a.h, a.w, a.c + b.c};
        break;
      }
      default:
        dims[n.id] = dims.at(n.inputs[0]);
    }
  }
  return flops;
}

SensitivityCurve sensitivity_analysis(const NetGraph& g,
                                      std::span<const Sample> eval_set) {
  SensitivityCurve sc;
  for (int k = 0; k < 10; ++k) sc.ratios.push_back(0.1f * k);
  sc.baseline = evaluate_wiou(g, eval_set);
  const std::vector<std::string> layers = prunable_layers(g);
  for (const std::string& id : layers) {
    auto& v = sc.values[id];
    v.assign(sc.ratios.size(), sc.baseline);
  }
  struct Probe {
    const std::string* id;
    int step;
  };
  std::vector<Probe> probes;
  for (const std::string& id : layers)
    for (size_t k = 1; k < sc.ratios.size(); ++k)
      probes.push_back({&id, static_cast<int>(k)});
  parallel_for(static_cast<int>(probes.size()), [&](int p) {
    PruningScheme s;
    s.ratios[*probes[p].id] = sc.ratios[probes[p].step];
    ApplyResult pruned = apply_scheme(g, s);
    sc.values.at(*probes[p].id)[probes[p].step] =
        evaluate_wiou(pruned.graph, eval_set);
  });
  return sc;
}

namespace {

struct CurveTable {
  std::vector<std::string> layers;
  std::vector<std::vector<double>> drop;  // [layer][step], vs baseline
  std::vector<float> ratios;
  std::vector<bool> excluded;
};

CurveTable build_table(const NetGraph& g, const SensitivityCurve& curves,
                       double exclusion_threshold) {
  CurveTable t;
  t.layers = prunable_layers(g);
  t.ratios = curves.ratios;
  if (t.ratios.size() < 2) throw ConfigError("sensitivity grid too coarse");
  for (const std::string& id : t.layers) {
    auto it = curves.values.find(id);
    if (it == curves.values.end())
      throw ConfigError("no sensitivity curve for layer '" + id + "'");
    std::vector<double> d(it->second.size());
    for (size_t k = 0; k < d.size(); ++k)
      d[k] = curves.baseline - it->second[k];
    t.excluded.push_back(d[1] > exclusion_threshold);
    t.drop.push_back(std::move(d));
  }
  return t;
}

PruningScheme scheme_at(const CurveTable& t, double budget) {
  PruningScheme s;
  for (size_t l = 0; l < t.layers.size(); ++l) {
    if (t.excluded[l]) continue;
    int pick = 0;
    for (int k = static_cast<int>(t.drop[l].size()) - 1; k > 0; --k)
      if (t.drop[l][k] <= budget) {
        pick = k;
        break;
      }
    if (pick > 0) s.ratios[t.layers[l]] = t.ratios[pick];
  }
  return s;
}

}  // namespace

SearchResult search_scheme(const NetGraph& g, int input_h, int input_w,
                           const SensitivityCurve& curves, double overall_pr,
                           double exclusion_threshold) {
  if (overall_pr < 0.0 || overall_pr >= 1.0)
    throw ConfigError("overall pruning ratio must lie in [0, 1)");
  const uint64_t total = scheme_conv_flops(g, input_h, input_w, PruningScheme{});
  SearchResult res;
  if (overall_pr == 0.0) {
    res.flops = total;
    res.achieved_ratio = 1.0;
    return res;
  }

  CurveTable table = build_table(g, curves, exclusion_threshold);
  const double target = (1.0 - overall_pr) * static_cast<double>(total);
  const double tol = 0.05 * static_cast<double>(total);  // half a ratio step

  auto achieved = [&](const PruningScheme& s) {
    return scheme_conv_flops(g, input_h, input_w, s);
  };

  double lo = 0.0, hi = 0.0;
  for (const auto& d : table.drop)
    for (double v : d) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  lo -= 1e-6;
  hi += 1e-6;

  const PruningScheme floor_scheme = scheme_at(table, hi);
  const uint64_t floor_flops = achieved(floor_scheme);
  if (static_cast<double>(floor_flops) > target + tol) {
    char msg[160];
    std::snprintf(msg, sizeof msg,
                  "overall ratio %.3f unreachable; deepest scheme stops at %.3f",
                  overall_pr,
                  1.0 - static_cast<double>(floor_flops) / total);
    throw InfeasibleError(msg);
  }

  for (int it = 0; it < 80; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (static_cast<double>(achieved(scheme_at(table, mid))) > target)
      lo = mid;
    else
      hi = mid;
  }

  PruningScheme scheme = scheme_at(table, hi);
  uint64_t flops = achieved(scheme);

  // The budget landed on a step of the achieved-FLOPS function. When that
  // step overshot past the half-step tolerance, walk single layers back to
  // the largest budget-feasible lower ratio while staying at or below the
  // target.
  while (static_cast<double>(flops) < target - tol) {
    std::string best_layer;
    float best_ratio = 0.0f;
    uint64_t best_flops = flops;
    for (size_t l = 0; l < table.layers.size(); ++l) {
      const std::string& id = table.layers[l];
      auto it = scheme.ratios.find(id);
      if (it == scheme.ratios.end()) continue;
      int cur = static_cast<int>(std::lround(it->second * 10.0f));
      int lower = 0;
      for (int k = cur - 1; k > 0; --k)
        if (table.drop[l][k] <= hi) {
          lower = k;
          break;
        }
      PruningScheme cand = scheme;
      if (lower > 0)
        cand.ratios[id] = table.ratios[lower];
      else
        cand.ratios.erase(id);
      const uint64_t f = achieved(cand);
      if (static_cast<double>(f) <= target && f > best_flops) {
        best_flops = f;
        best_layer = id;
        best_ratio = lower > 0 ? table.ratios[lower] : 0.0f;
      }
    }
    if (best_layer.empty()) break;
    if (best_ratio > 0.0f)
      scheme.ratios[best_layer] = best_ratio;
    else
      scheme.ratios.erase(best_layer);
    flops = best_flops;
  }

  res.scheme = std::move(scheme);
  res.flops = flops;
  res.achieved_ratio = static_cast<double>(flops) / static_cast<double>(total);
  res.budget = hi;
  return res;
}

std::string format_iteration_report(const IterationReport& rep) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line,
                "overall_pr %.3f (retries %d)  budget %.5f\n",
                rep.overall_pr_used, rep.retries, rep.budget);
  out += line;
  std::snprintf(line, sizeof line,
                "flops %llu -> %llu (ratio %.4f)  params %llu -> %llu\n",
                static_cast<unsigned long long>(rep.flops_before),
                static_cast<unsigned long long>(rep.flops_after),
                rep.achieved_ratio,
                static_cast<unsigned long long>(rep.params_before),
                static_cast<unsigned long long>(rep.params_after));
  out += line;
  std::snprintf(line, sizeof line,
                "wIoU %.4f -> %.4f pruned -> %.4f finetuned  locked %d/%d\n",
                rep.wiou_before, rep.wiou_pruned, rep.wiou_finetuned,
                rep.locked, rep.prunable);
  out += line;
  for (const auto& [id, r] : rep.scheme.ratios) {
    std::snprintf(line, sizeof line, "  %-12s %.1f\n", id.c_str(), r);
    out += line;
  }
  for (const std::string& l : rep.log) out += "# " + l + "\n";
  return out;
}

IterationReport run_iteration(NetGraph& g, std::span<const Sample> train_set,
                              std::span<const Sample> val_set,
                              const IterationConfig& cfg) {
  if (val_set.empty()) throw TrainingError("validation set is empty");
  const int h = val_set[0].cube.height(), w = val_set[0].cube.width();

  IterationReport rep;
  rep.prunable = static_cast<int>(prunable_layers(g).size());
  {
    ComplexityReport before = analyze(g, h, w);
    rep.flops_before = before.flops;
    rep.params_before = before.params;
  }
  rep.wiou_before = evaluate_wiou(g, val_set);

  std::span<const Sample> probes = val_set;
  if (cfg.sensitivity_samples > 0 &&
      probes.size() > static_cast<size_t>(cfg.sensitivity_samples))
    probes = probes.subspan(0, cfg.sensitivity_samples);
  const SensitivityCurve curves = sensitivity_analysis(g, probes);

  double pr = cfg.overall_pr;
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    rep.retries = attempt;
    rep.overall_pr_used = pr;
    SearchResult sr;
    try {
      sr = search_scheme(g, h, w, curves, pr, cfg.exclusion_threshold);
    } catch (const InfeasibleError& e) {
      rep.log.push_back(std::string("search: ") + e.what());
      pr = std::max(0.05, pr - cfg.retry_step);
      continue;
    }

    bool gates_ok = true;
    for (const auto& [id, r] : sr.scheme.ratios) {
      const int step = static_cast<int>(std::lround(r * 10.0f));
      const double drop = curves.baseline - curves.values.at(id)[step];
      if (drop >= cfg.layer_gate) {
        char msg[160];
        std::snprintf(msg, sizeof msg,
                      "layer gate: %s drops %.4f at ratio %.1f (limit %.4f)",
                      id.c_str(), drop, r, cfg.layer_gate);
        rep.log.push_back(msg);
        gates_ok = false;
        break;
      }
    }
    int locked = 0;
    for (const auto& [id, r] : sr.scheme.ratios)
      if (r >= 0.9f - 1e-6f) ++locked;
    if (gates_ok &&
        static_cast<double>(locked) >= cfg.locked_gate * rep.prunable) {
      char msg[160];
      std::snprintf(msg, sizeof msg, "locked gate: %d of %d layers at cap",
                    locked, rep.prunable);
      rep.log.push_back(msg);
      gates_ok = false;
    }

    if (gates_ok) {
      ApplyResult pruned = apply_scheme(g, sr.scheme);
      const double wiou_pruned = evaluate_wiou(pruned.graph, val_set);
      train(pruned.graph, train_set, val_set, cfg.finetune);
      const double wiou_ft = evaluate_wiou(pruned.graph, val_set);
      if (rep.wiou_before - wiou_ft >= cfg.model_gate) {
        char msg[160];
        std::snprintf(msg, sizeof msg,
                      "model gate: wIoU %.4f -> %.4f after finetune",
                      rep.wiou_before, wiou_ft);
        rep.log.push_back(msg);
        gates_ok = false;
      } else {
        g = std::move(pruned.graph);
        rep.scheme = sr.scheme;
        rep.budget = sr.budget;
        rep.flops_after = sr.flops;
        rep.achieved_ratio = sr.achieved_ratio;
        rep.params_after = analyze(g, h, w).params;
        rep.wiou_pruned = wiou_pruned;
        rep.wiou_finetuned = wiou_ft;
        rep.locked = locked;
        return rep;
      }
    }
    pr = std::max(0.05, pr - cfg.retry_step);
  }

  std::string diag = "no feasible scheme after " +
                     std::to_string(cfg.max_retries) + " retries";
  for (const std::string& l : rep.log) diag += "; " + l;
  throw InfeasibleError(diag);
}

InitPruneReport prune_at_init(NetGraph& g, std::span<const Sample> train_set,
                              std::span<const Sample> val_set,
                              double overall_pr, const IterationConfig& cfg) {
  if (val_set.empty()) throw TrainingError("validation set is empty");
  const int h = val_set[0].cube.height(), w = val_set[0].cube.width();

  InitPruneReport rep;
  {
    ComplexityReport before = analyze(g, h, w);
    rep.flops_before = before.flops;
    rep.params_before = before.params;
  }

  std::span<const Sample> probes = val_set;
  if (cfg.sensitivity_samples > 0 &&
      probes.size() > static_cast<size_t>(cfg.sensitivity_samples))
    probes = probes.subspan(0, cfg.sensitivity_samples);
  const SensitivityCurve curves = sensitivity_analysis(g, probes);
  SearchResult sr =
      search_scheme(g, h, w, curves, overall_pr, cfg.exclusion_threshold);

  ApplyResult pruned = apply_scheme(g, sr.scheme);
  rep.history = train(pruned.graph, train_set, val_set, cfg.finetune);
  g = std::move(pruned.graph);

  rep.scheme = std::move(sr.scheme);
  rep.flops_after = sr.flops;
  rep.achieved_ratio = sr.achieved_ratio;
  rep.params_after = analyze(g, h, w).params;
  return rep;
}

}  // namespace hsicomp
