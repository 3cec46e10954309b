#include "fwvit/checkpoint.hpp"

#include <map>

#include "fwvit/errors.hpp"
#include "fwvit/vit.hpp"

namespace fwvit {

namespace {

constexpr const char* kMoment1 = "opt.m.";
constexpr const char* kMoment2 = "opt.v.";

Tensor spec_tensor(const ModelSpec& s) {
  return Tensor({12}, std::vector<float>{
                          float(s.image_size), float(s.channels), float(s.patch_size), float(s.embed_dim),
                          float(s.enc_layers), float(s.enc_heads), float(s.dec_layers), float(s.dec_heads),
                          float(s.dec_dim), float(s.mlp_ratio), s.lambda_l1, s.cls_only_decode ? 1.0f : 0.0f});
}

ModelSpec spec_from(const Tensor& t, const std::string& origin) {
  if (t.numel() != 12) throw FormatError(origin + ": meta.spec has " + std::to_string(t.numel()) + " fields");
  auto d = t.data();
  auto u = [&](std::size_t i) { return static_cast<std::size_t>(d[i]); };
  ModelSpec s;
  s.image_size = u(0);
  s.channels = u(1);
  s.patch_size = u(2);
  s.embed_dim = u(3);
  s.enc_layers = u(4);
  s.enc_heads = u(5);
  s.dec_layers = u(6);
  s.dec_heads = u(7);
  s.dec_dim = u(8);
  s.mlp_ratio = u(9);
  s.lambda_l1 = d[10];
  s.cls_only_decode = d[11] != 0.0f;
  return s;
}

std::vector<StoredTensor> adapter_tensors(const AdapterSet& adapters) {
  std::vector<StoredTensor> out;
  for (const auto& [target, a] : adapters) {
    const std::string p = kAdapterPrefix + target;
    out.push_back({p + ".A", kFlagAdapter, a.a.detach()});
    out.push_back({p + ".B", kFlagAdapter, a.b.detach()});
    out.push_back({p + ".alpha", kFlagAdapter, Tensor::scalar(a.alpha)});
  }
  return out;
}

bool starts_with(const std::string& s, const char* p) { return s.rfind(p, 0) == 0; }

// Gathers "lora.<target>.{A,B,alpha}" triples.
AdapterSet adapters_from(const std::vector<StoredTensor>& tensors, const std::string& origin) {
  std::map<std::string, std::map<std::string, Tensor>> parts;
  for (const auto& t : tensors) {
    if (!starts_with(t.name, kAdapterPrefix)) continue;
    const auto dot = t.name.rfind('.');
    const std::string target = t.name.substr(5, dot - 5);
    parts[target][t.name.substr(dot + 1)] = t.value;
  }
  AdapterSet out;
  for (auto& [target, p] : parts) {
    if (!p.count("A") || !p.count("B") || !p.count("alpha")) {
      throw TopologyMismatchError(origin + ": adapter " + target + " is incomplete");
    }
    const Tensor& a = p["A"];
    if (a.rank() != 2) throw TopologyMismatchError(origin + ": adapter " + target + " A is not a matrix");
    LoraAdapter ad{a.detach(), p["B"].detach(), a.dim(1), p["alpha"].item(), target};
    ad.a.set_requires_grad(true);
    ad.b.set_requires_grad(true);
    out.emplace(target, std::move(ad));
  }
  return out;
}

}  // namespace

std::vector<StoredTensor> checkpoint_tensors(const ModelState& model, const AdamW& optimizer,
                                             std::int64_t epoch) {
  std::vector<StoredTensor> out;
  for (const auto& n : model.names()) {
    out.push_back({n, model.trainable(n) ? std::uint8_t{0} : std::uint8_t{kFlagFrozen}, model.tensor(n).detach()});
  }
  for (auto& t : adapter_tensors(model.adapters())) out.push_back(std::move(t));
  const auto params = model.trainable_parameters();
  const auto& m = optimizer.first_moments();
  const auto& v = optimizer.second_moments();
  if (!m.empty()) {
    if (m.size() != params.size()) {
      throw std::logic_error("checkpoint: optimizer tracks " + std::to_string(m.size()) +
                             " tensors, model has " + std::to_string(params.size()) + " trainable");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.push_back({kMoment1 + params[i].name, 0, Tensor(params[i].tensor.shape(), m[i])});
      out.push_back({kMoment2 + params[i].name, 0, Tensor(params[i].tensor.shape(), v[i])});
    }
  }
  out.push_back({"opt.step", 0, Tensor::scalar(static_cast<float>(optimizer.steps()))});
  out.push_back({"meta.epoch", 0, Tensor::scalar(static_cast<float>(epoch))});
  out.push_back({"meta.spec", 0, spec_tensor(model.spec())});
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ModelState& model, const AdamW& optimizer,
                     std::int64_t epoch) {
  write_container(path, checkpoint_tensors(model, optimizer, epoch));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<ModelSpec>& expected,
                           const AdamWOptions& options) {
  const std::string origin = path.string();
  const auto tensors = read_container(path);
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;

  auto meta = [&](const char* name) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(origin + ": missing " + name);
    return it->second->value;
  };
  const ModelSpec file_spec = spec_from(meta("meta.spec"), origin);
  const ModelSpec spec = expected.value_or(file_spec);
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw FormatError(origin + ": stored model spec is invalid: " + e.what());
  }

  // Structure check against a freshly initialized model of the target spec.
  const ModelState layout = init_model(spec, 0);
  for (const auto& n : layout.names()) {
    auto it = by_name.find(n);
    if (it == by_name.end()) throw TopologyMismatchError(origin + ": topology mismatch at tensor " + n + ": missing from checkpoint");
    if (it->second->value.shape() != layout.tensor(n).shape()) {
      throw TopologyMismatchError(origin + ": topology mismatch at tensor " + n + ": checkpoint has " +
                                  shape_str(it->second->value.shape()) + ", model expects " +
                                  shape_str(layout.tensor(n).shape()));
    }
  }

  Checkpoint ck{ModelState(spec), AdamW(options), 0};
  for (const auto& t : tensors) {
    if (starts_with(t.name, "opt.") || starts_with(t.name, "meta.") || starts_with(t.name, kAdapterPrefix)) continue;
    if (!layout.contains(t.name)) {
      throw TopologyMismatchError(origin + ": topology mismatch at tensor " + t.name + ": not part of the model");
    }
    ck.model.add_parameter(t.name, t.value.detach(), (t.flags & kFlagFrozen) == 0);
  }
  for (auto& [target, ad] : adapters_from(tensors, origin)) {
    const std::string w = target + ".weight";
    if (!ck.model.contains(w) || ad.a.dim(0) != ck.model.tensor(w).dim(0) ||
        ad.b.rank() != 2 || ad.b.dim(0) != ad.rank || ad.b.dim(1) != ck.model.tensor(w).dim(1)) {
      throw TopologyMismatchError(origin + ": topology mismatch at tensor " + kAdapterPrefix + target +
                                  ".A: adapter does not fit the model");
    }
    ck.model.mutable_adapters().emplace(target, std::move(ad));
  }

  const auto step = static_cast<std::int64_t>(meta("opt.step").item());
  if (step > 0) {
    std::vector<std::vector<float>> m, v;
    for (const auto& p : ck.model.trainable_parameters()) {
      auto mi = by_name.find(kMoment1 + p.name), vi = by_name.find(kMoment2 + p.name);
      if (mi == by_name.end() || vi == by_name.end() || mi->second->value.shape() != p.tensor.shape() ||
          vi->second->value.shape() != p.tensor.shape()) {
        throw TopologyMismatchError(origin + ": topology mismatch at tensor " + kMoment1 + p.name +
                                    ": optimizer state does not match the trainable parameters");
      }
      m.emplace_back(mi->second->value.data().begin(), mi->second->value.data().end());
      v.emplace_back(vi->second->value.data().begin(), vi->second->value.data().end());
    }
    ck.optimizer.restore(step, std::move(m), std::move(v));
  }
  ck.epoch = static_cast<std::int64_t>(meta("meta.epoch").item());
  return ck;
}

void save_adapters(const std::filesystem::path& path, const AdapterSet& adapters) {
  write_container(path, adapter_tensors(adapters));
}

AdapterSet load_adapters(const std::filesystem::path& path) {
  const auto tensors = read_container(path);
  for (const auto& t : tensors) {
    if (!starts_with(t.name, kAdapterPrefix)) {
      throw FormatError(path.string() + ": " + t.name + " is not an adapter tensor");
    }
  }
  return adapters_from(tensors, path.string());
}

}  // namespace fwvit
