#include <filesystem>
#include <set>
#include <string>

#include "hsicomp/error.hpp"
#include "hsicomp/kvfile.hpp"
#include "hsicomp/netgraph.hpp"
#include "hsicomp/tensor_io.hpp"

namespace hsicomp {

namespace {

const char* kManifestFormat = "hsicomp-graph-1";

std::string join_ids(const std::vector<std::string>& ids) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += ids[i];
  }
  return out;
}

// Tensor sequence serialized for a node, in order.
std::vector<std::pair<const char*, const std::vector<float>*>> tensors_of(
    const LayerNode& n) {
  switch (n.kind) {
    case LayerKind::Conv2D:
    case LayerKind::TransposedConv2D:
    case LayerKind::DepthwiseNorm:
      return {{"weight", &n.weight}, {"bias", &n.bias}};
    case LayerKind::BatchNorm:
      return {{"gamma", &n.gamma},
              {"beta", &n.beta},
              {"running_mean", &n.running_mean},
              {"running_var", &n.running_var}};
    default:
      return {};
  }
}

std::vector<std::pair<const char*, std::vector<float>*>> tensors_of(
    LayerNode& n) {
  std::vector<std::pair<const char*, std::vector<float>*>> out;
  for (auto& [name, vec] : tensors_of(static_cast<const LayerNode&>(n)))
    out.emplace_back(name, const_cast<std::vector<float>*>(vec));
  return out;
}

}  // namespace

void save_model(const NetGraph& g, const std::string& dir) {
  g.validate();
  std::filesystem::create_directories(dir);

  KvFile kv;
  kv.set("format", kManifestFormat);
  std::vector<std::string> ids;
  for (const auto& n : g.nodes()) ids.push_back(n.id);
  kv.set("nodes", join_ids(ids));
  for (const auto& n : g.nodes()) {
    kv.set("kind." + n.id, kind_name(n.kind));
    if (n.kind != LayerKind::Input) kv.set("in." + n.id, join_ids(n.inputs));
    switch (n.kind) {
      case LayerKind::Input:
        kv.set_int("oc." + n.id, n.out_ch);
        break;
      case LayerKind::Conv2D:
      case LayerKind::TransposedConv2D:
        kv.set_int("oc." + n.id, n.out_ch);
        kv.set_int("ic." + n.id, n.in_ch);
        kv.set_int("kh." + n.id, n.kh);
        kv.set_int("kw." + n.id, n.kw);
        break;
      case LayerKind::BatchNorm:
        kv.set_int("oc." + n.id, n.out_ch);
        kv.set_double("eps." + n.id, n.eps);
        break;
      case LayerKind::DepthwiseNorm:
        kv.set_int("oc." + n.id, n.out_ch);
        break;
      case LayerKind::Dropout:
        kv.set_double("rate." + n.id, n.dropout_rate);
        break;
      default:
        break;
    }
  }
  kv.save(dir + "/graph");

  io::Writer w(dir + "/weights.bin");
  for (const auto& n : g.nodes()) {
    for (const auto& [name, vec] : tensors_of(n)) {
      (void)name;
      w.u64(vec->size());
      w.bytes(vec->data(), vec->size() * sizeof(float));
    }
  }
  w.close();
}

NetGraph load_model(const std::string& dir) {
  const std::string manifest_path = dir + "/graph";
  KvFile kv = KvFile::load(manifest_path);
  if (kv.get_or("format", "") != kManifestFormat)
    throw ParseError(manifest_path + ": unsupported format '" +
                     kv.get_or("format", "<missing>") + "'");
  std::vector<std::string> ids = split_ws(kv.get("nodes"));
  if (ids.empty()) throw ParseError(manifest_path + ": empty node list");

  // Reject stray keys: everything must be format/nodes or a field of a
  // listed node.
  std::set<std::string> id_set(ids.begin(), ids.end());
  if (id_set.size() != ids.size())
    throw ParseError(manifest_path + ": duplicate node id in list");
  for (const auto& key : kv.keys()) {
    if (key == "format" || key == "nodes") continue;
    const size_t dot = key.find('.');
    const std::string field = dot == std::string::npos ? key : key.substr(0, dot);
    const std::string id = dot == std::string::npos ? "" : key.substr(dot + 1);
    static const std::set<std::string> kFields = {"kind", "in", "oc", "ic",
                                                  "kh", "kw", "eps", "rate"};
    if (!kFields.count(field) || !id_set.count(id))
      throw ParseError(manifest_path + ": unknown key '" + key + "'");
  }

  NetGraph g;
  for (const auto& id : ids) {
    LayerNode n;
    n.id = id;
    n.kind = kind_from_name(kv.get("kind." + id));
    if (n.kind != LayerKind::Input) n.inputs = split_ws(kv.get("in." + id));
    switch (n.kind) {
      case LayerKind::Input:
        n.out_ch = static_cast<int>(kv.get_int("oc." + id));
        break;
      case LayerKind::Conv2D:
      case LayerKind::TransposedConv2D:
        n.out_ch = static_cast<int>(kv.get_int("oc." + id));
        n.in_ch = static_cast<int>(kv.get_int("ic." + id));
        n.kh = static_cast<int>(kv.get_int("kh." + id));
        n.kw = static_cast<int>(kv.get_int("kw." + id));
        n.weight.assign(n.weight_count(), 0.0f);
        n.bias.assign(n.out_ch, 0.0f);
        break;
      case LayerKind::BatchNorm:
        n.out_ch = static_cast<int>(kv.get_int("oc." + id));
        n.eps = static_cast<float>(kv.get_double("eps." + id));
        n.gamma.assign(n.out_ch, 1.0f);
        n.beta.assign(n.out_ch, 0.0f);
        n.running_mean.assign(n.out_ch, 0.0f);
        n.running_var.assign(n.out_ch, 1.0f);
        break;
      case LayerKind::DepthwiseNorm:
        n.out_ch = static_cast<int>(kv.get_int("oc." + id));
        n.weight.assign(n.out_ch, 0.0f);
        n.bias.assign(n.out_ch, 0.0f);
        break;
      case LayerKind::Dropout:
        n.dropout_rate = static_cast<float>(kv.get_double("rate." + id));
        break;
      default:
        break;
    }
    g.add(std::move(n));
  }

  const std::string blob_path = dir + "/weights.bin";
  io::Reader r(blob_path);
  for (auto& n : g.nodes()) {
    for (auto& [name, vec] : tensors_of(n)) {
      uint64_t count = 0;
      {
        const std::string what = n.id + std::string(" ") + name + " count";
        count = r.u64(what.c_str());
      }
      if (count != vec->size())
        throw ParseError(blob_path + ": " + n.id + " " + name + " holds " +
                         std::to_string(count) + " elements, manifest implies " +
                         std::to_string(vec->size()));
      const std::string what = n.id + std::string(" ") + name + " data";
      r.bytes(vec->data(), count * sizeof(float), what.c_str());
    }
  }
  if (!r.at_eof())
    throw ParseError(blob_path + ": trailing bytes after last tensor");
  g.validate();
  return g;
}

}  // namespace hsicomp
