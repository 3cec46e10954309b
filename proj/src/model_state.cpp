#include "fwvit/model_state.hpp"

#include <stdexcept>

#include "fwvit/errors.hpp"

namespace fwvit {

void ModelSpec::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid model spec: " + what); };
  if (image_size == 0 || channels == 0 || patch_size == 0 || embed_dim == 0 || enc_layers == 0 ||
      enc_heads == 0 || dec_layers == 0 || dec_heads == 0 || dec_dim == 0 || mlp_ratio == 0) {
    fail("all sizes must be positive");
  }
  if (image_size % patch_size != 0) {
    fail("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
         std::to_string(patch_size));
  }
  if (embed_dim % enc_heads != 0) {
    fail("embed_dim " + std::to_string(embed_dim) + " not divisible by enc_heads " +
         std::to_string(enc_heads));
  }
  if (dec_dim % dec_heads != 0) {
    fail("dec_dim " + std::to_string(dec_dim) + " not divisible by dec_heads " +
         std::to_string(dec_heads));
  }
  if (!(lambda_l1 >= 0.0f)) fail("lambda_l1 must be >= 0");
}

ModelState::ModelState(ModelSpec spec) : spec_(spec) {}

ModelState::ModelState(const ModelState& other)
    : spec_(other.spec_), order_(other.order_), index_(other.index_) {
  entries_.reserve(other.entries_.size());
  for (const auto& e : other.entries_) {
    Tensor copy = e.value.detach();
    copy.set_requires_grad(e.trainable);
    entries_.push_back({std::move(copy), e.trainable});
  }
  for (const auto& [target, adapter] : other.adapters_) adapters_.emplace(target, adapter.clone());
}

ModelState& ModelState::operator=(const ModelState& other) {
  if (this != &other) {
    ModelState tmp(other);
    *this = std::move(tmp);
  }
  return *this;
}

void ModelState::add_parameter(std::string name, Tensor value, bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  value.set_requires_grad(trainable);
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(value), trainable});
  order_.push_back(std::move(name));
}

bool ModelState::contains(const std::string& name) const { return index_.count(name) != 0; }

const ModelState::Entry& ModelState::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return entries_[it->second];
}

ModelState::Entry& ModelState::entry(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return entries_[it->second];
}

const Tensor& ModelState::tensor(const std::string& name) const { return entry(name).value; }
Tensor& ModelState::tensor(const std::string& name) { return entry(name).value; }
bool ModelState::trainable(const std::string& name) const { return entry(name).trainable; }

void ModelState::set_trainable(const std::string& name, bool on) {
  auto& e = entry(name);
  e.trainable = on;
  e.value.set_requires_grad(on);
}

const LoraAdapter* ModelState::adapter_for(const std::string& target) const {
  auto it = adapters_.find(target);
  return it == adapters_.end() ? nullptr : &it->second;
}

std::vector<NamedTensor> ModelState::trainable_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].trainable) out.push_back({order_[i], entries_[i].value});
  }
  for (const auto& [target, adapter] : adapters_) {
    out.push_back({kAdapterPrefix + target + ".A", adapter.a});
    out.push_back({kAdapterPrefix + target + ".B", adapter.b});
  }
  return out;
}

std::vector<Tensor> ModelState::trainable_tensors() const {
  std::vector<Tensor> out;
  for (auto& nt : trainable_parameters()) out.push_back(std::move(nt.tensor));
  return out;
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  for (const auto& [target, adapter] : adapters_) n += adapter.a.numel() + adapter.b.numel();
  return n;
}

std::size_t ModelState::frozen_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (!e.trainable) n += e.value.numel();
  return n;
}

std::size_t ModelState::trainable_count() const {
  std::size_t n = 0;
  for (const auto& nt : trainable_parameters()) n += nt.tensor.numel();
  return n;
}

std::size_t ModelState::frozen_tensor_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (!e.trainable) ++n;
  return n;
}

void ModelState::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
  for (auto& [target, adapter] : adapters_) {
    adapter.a.zero_grad();
    adapter.b.zero_grad();
  }
}

}  // namespace fwvit
