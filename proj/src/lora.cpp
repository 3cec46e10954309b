#include "fwvit/lora.hpp"

#include <algorithm>
#include <stdexcept>

#include "fwvit/errors.hpp"
#include "fwvit/model_state.hpp"
#include "fwvit/ops.hpp"
#include "fwvit/rng.hpp"

namespace fwvit {

namespace {

const Tensor& base_weight(const ModelState& model, const std::string& target) {
  const std::string name = target + ".weight";
  if (!model.contains(name)) throw std::invalid_argument("lora: unknown target projection " + target);
  const Tensor& w = model.tensor(name);
  if (w.rank() != 2) throw ShapeError("lora: target " + target + " is not a matrix");
  return w;
}

void check_adapter_shapes(const Tensor& base_w, const LoraAdapter& adapter) {
  if (base_w.rank() != 2 || adapter.a.rank() != 2 || adapter.b.rank() != 2 ||
      adapter.a.dim(0) != base_w.dim(0) || adapter.b.dim(1) != base_w.dim(1) ||
      adapter.a.dim(1) != adapter.rank || adapter.b.dim(0) != adapter.rank) {
    throw ShapeError("lora: adapter A" + shape_str(adapter.a.shape()) + " B" +
                     shape_str(adapter.b.shape()) + " rank " + std::to_string(adapter.rank) +
                     " does not fit base " + shape_str(base_w.shape()) +
                     (adapter.target.empty() ? "" : " (" + adapter.target + ")"));
  }
}

}  // namespace

LoraAdapter LoraAdapter::clone() const {
  LoraAdapter out{a.detach(), b.detach(), rank, alpha, target};
  out.a.set_requires_grad(true);
  out.b.set_requires_grad(true);
  return out;
}

std::vector<std::string> default_lora_targets(const ModelState& model) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < model.spec().enc_layers; ++i) {
    for (const char* p : {"q", "k", "v"}) {
      out.push_back("enc." + std::to_string(i) + ".attn." + p);
    }
  }
  return out;
}

ModelState lora_wrap(ModelState model, const LoraOptions& options) {
  const auto targets = options.targets.empty() ? default_lora_targets(model) : options.targets;
  if (options.rank == 0) throw std::invalid_argument("lora: rank must be positive");
  for (const auto& target : targets) {
    const Tensor& w = base_weight(model, target);
    if (options.rank > std::min(w.dim(0), w.dim(1))) {
      throw std::invalid_argument("lora: rank " + std::to_string(options.rank) +
                                  " exceeds dimensions of " + target + " " + shape_str(w.shape()));
    }
  }
  for (const auto& target : targets) {
    const Tensor& w = base_weight(model, target);
    Rng rng(derive_seed(options.seed, "lora:" + target));
    Tensor a({w.dim(0), options.rank});
    for (auto& v : a.data()) v = static_cast<float>(rng.truncated_normal(0.0, 0.02));
    Tensor b = Tensor::zeros({options.rank, w.dim(1)});
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    model.mutable_adapters()[target] = LoraAdapter{a, b, options.rank, options.alpha, target};
    model.set_trainable(target + ".weight", false);
  }
  return model;
}

Tensor lora_forward(const Tensor& x, const Tensor& base_w, const LoraAdapter& adapter) {
  check_adapter_shapes(base_w, adapter);
  Tensor base = ops::matmul(x, base_w);
  Tensor delta = ops::scale(ops::matmul(ops::matmul(x, adapter.a), adapter.b), adapter.scale());
  return ops::add(base, delta);
}

Tensor lora_merge(const Tensor& base_w, const LoraAdapter& adapter) {
  check_adapter_shapes(base_w, adapter);
  return ops::add(base_w, ops::scale(ops::matmul(adapter.a, adapter.b), adapter.scale()));
}

ModelState adapter_swap(ModelState model, const AdapterSet& adapters) {
  for (const auto& [target, adapter] : adapters) {
    if (!model.contains(target + ".weight")) {
      throw std::invalid_argument("adapter_swap: topology mismatch, model has no projection " +
                                  target);
    }
    check_adapter_shapes(model.tensor(target + ".weight"), adapter);
  }
  auto& slot = model.mutable_adapters();
  for (const auto& [target, adapter] : slot) {
    if (!adapters.count(target)) model.set_trainable(target + ".weight", true);
  }
  slot.clear();
  for (const auto& [target, adapter] : adapters) {
    auto copy = adapter.clone();
    copy.target = target;
    slot.emplace(target, std::move(copy));
    model.set_trainable(target + ".weight", false);
  }
  return model;
}

AdapterSet extract_adapters(const ModelState& model) {
  AdapterSet out;
  for (const auto& [target, adapter] : model.adapters()) out.emplace(target, adapter.clone());
  return out;
}

FreezePolicy freeze_policy_for(const ModelState& model) {
  FreezePolicy policy;
  if (model.adapters().empty()) return policy;
  policy.mode = FreezeMode::lora_partial;
  for (const auto& [target, adapter] : model.adapters()) policy.frozen.insert(target + ".weight");
  return policy;
}

void apply_freeze_policy(ModelState& model, const FreezePolicy& policy) {
  for (const auto& name : policy.frozen) {
    if (!model.contains(name)) throw std::invalid_argument("freeze policy names unknown " + name);
  }
  for (const auto& name : model.names()) model.set_trainable(name, policy.frozen.count(name) == 0);
}

std::size_t lora_parameter_count(const ModelState& model, const std::vector<std::string>& targets,
                                 std::size_t rank) {
  std::size_t n = 0;
  for (const auto& target : targets) {
    const Tensor& w = base_weight(model, target);
    n += rank * (w.dim(0) + w.dim(1));
  }
  return n;
}

}  // namespace fwvit
