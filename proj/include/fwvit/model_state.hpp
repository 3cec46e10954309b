#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fwvit/lora.hpp"
#include "fwvit/model_spec.hpp"
#include "fwvit/tensor.hpp"

namespace fwvit {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Named parameter store. Copies are deep; a parameter's requires_grad flag
// always mirrors its trainable flag.
class ModelState {
 public:
  explicit ModelState(ModelSpec spec = {});
  ModelState(const ModelState& other);
  ModelState& operator=(const ModelState& other);
  ModelState(ModelState&&) noexcept = default;
  ModelState& operator=(ModelState&&) noexcept = default;

  const ModelSpec& spec() const noexcept { return spec_; }

  void add_parameter(std::string name, Tensor value, bool trainable = true);
  bool contains(const std::string& name) const;
  const Tensor& tensor(const std::string& name) const;
  Tensor& tensor(const std::string& name);
  bool trainable(const std::string& name) const;
  void set_trainable(const std::string& name, bool on);
  // Insertion order.
  const std::vector<std::string>& names() const noexcept { return order_; }

  const AdapterSet& adapters() const noexcept { return adapters_; }
  AdapterSet& mutable_adapters() noexcept { return adapters_; }
  const LoraAdapter* adapter_for(const std::string& target) const;

  // Trainable base parameters in insertion order, then adapter A/B pairs in
  // target order, named "lora.<target>.A" / ".B".
  std::vector<NamedTensor> trainable_parameters() const;
  std::vector<Tensor> trainable_tensors() const;

  std::size_t parameter_count() const;  // base + adapters
  std::size_t trainable_count() const;
  std::size_t frozen_count() const;
  std::size_t frozen_tensor_count() const;

  void zero_grad();

 private:
  struct Entry {
    Tensor value;
    bool trainable = true;
  };
  const Entry& entry(const std::string& name) const;
  Entry& entry(const std::string& name);

  ModelSpec spec_;
  std::vector<std::string> order_;
  std::vector<Entry> entries_;  // parallel to order_
  std::unordered_map<std::string, std::size_t> index_;
  AdapterSet adapters_;
};

}  // namespace fwvit
