#pragma once

// Training checkpoints on top of the tensor container.
//
// Tensor naming: base parameters under their model names (frozen flag from
// the trainable flag), adapters as "lora.<target>.A/.B/.alpha" (adapter
// flag), optimizer moments as "opt.m.<param>" / "opt.v.<param>" in trainable
// order plus "opt.step", and "meta.epoch" / "meta.spec".

#include <cstdint>
#include <filesystem>
#include <optional>

#include "fwvit/adamw.hpp"
#include "fwvit/container.hpp"
#include "fwvit/model_state.hpp"

namespace fwvit {

struct Checkpoint {
  ModelState model;
  AdamW optimizer;
  std::int64_t epoch = 0;
};

std::vector<StoredTensor> checkpoint_tensors(const ModelState& model, const AdamW& optimizer,
                                             std::int64_t epoch);
void save_checkpoint(const std::filesystem::path& path, const ModelState& model, const AdamW& optimizer,
                     std::int64_t epoch);

// With `expected`, every base tensor must match the structure that spec
// implies; the first differing tensor is named in a TopologyMismatchError.
// Optimizer hyperparameters are taken from `options`; moments from the file.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<ModelSpec>& expected = std::nullopt,
                           const AdamWOptions& options = {});

// Adapter-only export: just the "lora.*" tensors.
void save_adapters(const std::filesystem::path& path, const AdapterSet& adapters);
AdapterSet load_adapters(const std::filesystem::path& path);

}  // namespace fwvit
