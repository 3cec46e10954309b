#pragma once

// Run configuration and the subcommands behind the fwvit executable:
// gen-data, train, analyze, compare and plot.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include "fwvit/analysis.hpp"
#include "fwvit/errors.hpp"
#include "fwvit/harness.hpp"
#include "fwvit/model_spec.hpp"
#include "fwvit/plot.hpp"

namespace fwvit {

struct RunConfig {
  ModelSpec model;
  TrainConfig train;
  std::size_t contexts = 4;
  std::vector<double> noise_levels{0.1, 0.3, 0.5};
  std::size_t samples_per_context = 10;
  std::string data_dir;         // empty: synthetic contexts from the seed
  std::string out_dir;
  std::string init_checkpoint;  // pretrained (phase-0) model; empty: run phase-0
  bool resume = false;          // continue from the latest checkpoint in out_dir
  bool record_timing = true;
  // Analysis.
  std::string distance_norm = "raw";  // raw | count
  double iou_threshold = 0.5;
  std::uint64_t split_seed = 0;
  double plot_noise = 0.3;

  // Throws ConfigError.
  void validate() const;
  // The model spec with the training lambda applied.
  ModelSpec model_spec() const;
  AnalysisOptions analysis_options() const;

  bool operator==(const RunConfig&) const = default;
};

// Config keys in canonical order (snake_case; flags use kebab-case).
const std::vector<std::string>& run_config_keys();
std::string get_config_value(const RunConfig& config, const std::string& key);
// Throws ConfigError for an unknown key or unparsable value.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);

// Flat "key = value" lines with '#' comments. All unknown keys are
// reported together in one ConfigError.
void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin = "config");
RunConfig load_run_config(const std::filesystem::path& path);
std::string format_run_config(const RunConfig& config);

inline constexpr const char* kRunConfigFile = "run_config.txt";
inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kPhase0Checkpoint = "phase0.fwvt";

// Parameter accounting of the model a config trains.
struct ParameterCounts {
  std::size_t total = 0, trainable = 0, frozen = 0, frozen_tensors = 0;
};
ParameterCounts parameter_counts(const RunConfig& config);

// Writes context_<id>.ppm, mask_<id>.pgm and contexts.txt.
ContextSet cmd_gen_data(const std::filesystem::path& out_dir, std::size_t n, std::uint64_t seed,
                        std::size_t image_size);

// Writes run_config.txt first, then phase-0 (unless init_checkpoint or
// resume), training logs, checkpoints and probes under config.out_dir.
TrainResult cmd_train(const RunConfig& config);

// metrics.csv plus one SVG per figure; idempotent.
MetricSeries cmd_analyze(const std::filesystem::path& run_dir, const RunConfig& settings);

class ScheduleMismatchError : public DataError {
 public:
  using DataError::DataError;
};

// comparison.csv (metric,layer,noise,epoch,value_a,value_b), overlay SVGs
// and comparison_summary.txt under out_dir.
void cmd_compare(const std::filesystem::path& run_a, const std::filesystem::path& run_b,
                 const std::filesystem::path& out_dir, double plot_noise = 0.3);

// Re-renders the figure SVGs of a run from its metrics.csv.
void cmd_plot(const std::filesystem::path& run_dir, double plot_noise = 0.3);

struct FigureSpec {
  std::string metric;
  Grouping grouping = Grouping::layer;
};
const std::vector<FigureSpec>& figure_specs();

// 2 usage/config, 3 data, 4 numeric, 1 anything else.
int exit_code_for(const std::exception& e);

}  // namespace fwvit
