#pragma once

// Familiarity training: fine-tune on the clean context images only, probing
// every few epochs with clean and salt-and-pepper versions of each context.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fwvit/adamw.hpp"
#include "fwvit/checkpoint.hpp"
#include "fwvit/contexts.hpp"
#include "fwvit/model_state.hpp"

namespace fwvit {

struct TrainConfig {
  std::int64_t epochs = 100;
  std::size_t batch_size = 4;
  double lr = 1e-4;
  double weight_decay = 0.01;
  float lambda_l1 = 0.1f;
  bool lora_enabled = false;
  std::size_t lora_rank = 4;
  float lora_alpha = 4.0f;
  std::int64_t probe_every = 1;
  std::int64_t checkpoint_every = 10;
  std::uint64_t seed = 42;
  // Reconstruction pretraining on distractor images before familiarity
  // training (stands in for a pretrained backbone).
  std::int64_t phase0_epochs = 50;
  std::size_t phase0_images = 64;
  double phase0_lr = 1e-3;
  // Re-initialize the decoder after phase-0: only the encoder counts as
  // pretrained, the decoder starts fresh as in a pretrained-backbone setup.
  bool phase0_reset_decoder = true;

  // Throws ConfigError.
  void validate() const;
  AdamWOptions optimizer_options() const { return {.lr = lr, .weight_decay = weight_decay}; }

  bool operator==(const TrainConfig&) const = default;
};

struct ProbeSample {
  std::size_t context = 0;
  std::size_t noise_index = 0;  // into ProbeRecord::noise_levels
  std::size_t sample = 0;
  Tensor cls;        // [layers x embed_dim]
  Tensor attention;  // [layers x grid x grid], head-averaged CLS -> patch, sums to 1
  float loss = 0.0f;
};

struct ProbeRecord {
  std::int64_t epoch = 0;
  std::vector<double> noise_levels;  // 0.0 (clean) first, then the declared levels
  std::size_t contexts = 0;
  std::size_t samples_per_context = 0;
  std::vector<Tensor> references;  // per context: clean top-layer CLS, [embed_dim]
  std::vector<Tensor> masks;       // per context [S x S], possibly undefined
  std::vector<ProbeSample> samples;  // canonical (context, noise, sample) order

  const ProbeSample& at(std::size_t context, std::size_t noise_index, std::size_t sample) const;
  double mean_loss() const;
  double mean_loss(std::size_t noise_index) const;
  std::size_t layers() const { return samples.empty() ? 0 : samples.front().cls.dim(0); }
};

// Head-averaged attention of the CLS token over patch tokens for each layer,
// with the CLS->CLS entry dropped and the rest renormalized: [L x G x G].
Tensor cls_attention_maps(const std::vector<std::vector<Tensor>>& attention, std::size_t grid);

ProbeRecord probe_epoch(const ModelState& model, const ContextSet& contexts, std::int64_t epoch,
                        float lambda_l1);

std::vector<StoredTensor> probe_tensors(const ProbeRecord& record);
ProbeRecord probe_from_tensors(const std::vector<StoredTensor>& tensors, const std::string& origin);
void save_probe(const std::filesystem::path& path, const ProbeRecord& record);
ProbeRecord load_probe(const std::filesystem::path& path);

struct ManifestEntry {
  std::int64_t epoch = 0;
  std::string path;  // relative to the run directory
  double mean_loss = 0.0;
  double clean_loss = 0.0;
};
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

struct EpochStats {
  std::int64_t epoch = 0;
  double loss = 0.0;
  double seconds = 0.0;
};

struct RunStats {
  std::size_t training_inputs = 0;
  // Training inputs that were noisy probes; the protocol requires zero.
  std::size_t noisy_training_inputs = 0;
};

struct TrainOptions {
  // Where checkpoints, probes, manifest and logs go; nothing is written
  // when unset.
  std::optional<std::filesystem::path> out_dir;
  bool keep_probes = true;
  bool record_timing = false;
  std::function<void(const EpochStats&)> on_epoch;
};

struct TrainResult {
  ModelState model;
  AdamW optimizer;
  std::vector<EpochStats> epochs;
  std::vector<ProbeRecord> probes;
  RunStats stats;
};

// Mean reconstruction loss over the batch with the given lambda.
Tensor batch_loss(const std::vector<Tensor>& images, const ModelState& model, float lambda_l1);

// Phase-0: full-parameter reconstruction training on distractor images,
// then (phase0_reset_decoder) fresh decoder weights. Returns per-epoch mean
// losses.
std::vector<double> pretrain(ModelState& model, const TrainConfig& config);

// Overwrites every "dec." parameter with its value in init_model(spec, seed).
void reset_decoder(ModelState& model, std::uint64_t seed);

// The starting model for a run: initialization, phase-0 and (when enabled)
// adapter wrapping.
ModelState prepare_model(const ModelSpec& spec, const TrainConfig& config,
                         std::vector<double>* phase0_losses = nullptr);
// Wraps adapters when the config asks for them and the model has none.
ModelState apply_condition(ModelState model, const TrainConfig& config);

// Trains from `start` (epoch 0 for a fresh run) up to config.epochs.
TrainResult train_familiarity(const TrainConfig& config, const ContextSet& contexts, Checkpoint start,
                              const TrainOptions& options = {});

std::string checkpoint_name(std::int64_t epoch);
std::string probe_name(std::int64_t epoch);

}  // namespace fwvit
