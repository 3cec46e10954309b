#pragma once

// Low-rank additive adapters on attention projections.
//
// An adapter wraps a base projection W [in x out] as
//   y = x.W + (alpha / r) . (x.A) . B
// with A [in x r] and B [r x out]. B starts at zero, so a freshly wrapped
// model computes exactly what the unwrapped model computed. Wrapping freezes
// the base matrix (slow weight); the adapter and every other parameter,
// including the wrapped projection's bias, stay trainable (fast weights).

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fwvit/tensor.hpp"

namespace fwvit {

class ModelState;

struct LoraAdapter {
  Tensor a;  // [in x r]
  Tensor b;  // [r x out]
  std::size_t rank = 0;
  float alpha = 0.0f;
  std::string target;

  float scale() const { return alpha / static_cast<float>(rank); }
  LoraAdapter clone() const;
};

// target projection name (e.g. "enc.0.attn.q") -> adapter
using AdapterSet = std::map<std::string, LoraAdapter>;

enum class FreezeMode { none, lora_partial };

struct FreezePolicy {
  FreezeMode mode = FreezeMode::none;
  std::set<std::string> frozen;  // parameter names
};

struct LoraOptions {
  std::size_t rank = 4;
  float alpha = 4.0f;
  std::uint64_t seed = 0;
  // Projection names; empty means every encoder Q/K/V projection.
  std::vector<std::string> targets;
};

// Name prefix marking adapter tensors in checkpoints.
inline constexpr const char* kAdapterPrefix = "lora.";

std::vector<std::string> default_lora_targets(const ModelState& model);

// Adds adapters (A ~ truncated normal(0, 0.02), B = 0) and freezes each
// target's base weight. Throws on unknown targets or rank > min(in, out).
ModelState lora_wrap(ModelState model, const LoraOptions& options);

Tensor lora_forward(const Tensor& x, const Tensor& base_w, const LoraAdapter& adapter);
// W + (alpha / r) . A . B
Tensor lora_merge(const Tensor& base_w, const LoraAdapter& adapter);

// Replaces the model's adapters with `adapters` (deep-copied). Base weights
// are not modified; targets of the incoming set are frozen.
ModelState adapter_swap(ModelState model, const AdapterSet& adapters);
AdapterSet extract_adapters(const ModelState& model);

// Policy implied by the model's current adapters: lora_partial iff any
// adapter is present, freezing exactly the adapted base weights.
FreezePolicy freeze_policy_for(const ModelState& model);
void apply_freeze_policy(ModelState& model, const FreezePolicy& policy);

// Number of scalars added by adapters of the given rank on the given targets.
std::size_t lora_parameter_count(const ModelState& model, const std::vector<std::string>& targets,
                                 std::size_t rank);

}  // namespace fwvit
