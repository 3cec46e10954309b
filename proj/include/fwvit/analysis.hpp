#pragma once

// Representational-geometry metrics over probe records: relative level and
// residual distances, linear decodability of image-noise contexts, alignment
// with the clean top-layer representation, and attention/figure agreement.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fwvit/harness.hpp"
#include "fwvit/tensor.hpp"
#include "fwvit/vit.hpp"

namespace fwvit {

// z[layer][context][level][sample] -> [dim], level 0 = clean.
struct EmbeddingGrid {
  std::int64_t epoch = 0;
  std::size_t layers = 0, contexts = 0, levels = 0, samples = 0, dim = 0;
  std::vector<double> noise_levels;
  std::vector<double> values;

  static EmbeddingGrid zeros(std::size_t layers, std::size_t contexts, std::size_t levels,
                             std::size_t samples, std::size_t dim);
  std::span<const double> at(std::size_t layer, std::size_t context, std::size_t level,
                             std::size_t sample) const;
  std::span<double> at(std::size_t layer, std::size_t context, std::size_t level, std::size_t sample);
  // Throws DataError on a ragged or non-finite grid.
  void validate() const;
};

EmbeddingGrid embedding_grid(const ProbeRecord& record);

// Per-context clean top-layer embeddings from the record.
std::vector<std::vector<double>> reference_embeddings(const ProbeRecord& record);

enum class DistanceNorm {
  raw_sum,      // sums exactly as defined
  count_mean,   // numerator and denominator divided by their term counts
};

// sqrt(sum_k' |z(k,n,l) - z(k',n-1,l)|^2 / sum_{m!=l, j} |z(k,n,l) - z(j,n,m)|^2)
double relative_level_distance(const EmbeddingGrid& grid, std::size_t layer, std::size_t level,
                               std::size_t context, std::size_t sample,
                               DistanceNorm norm = DistanceNorm::raw_sum);
// sqrt(sum_{i!=k} |z(k,n,l) - z(i,n,l)|^2 / sum_{m!=l, j} |z(k,n,l) - z(j,n,m)|^2)
double relative_residual_distance(const EmbeddingGrid& grid, std::size_t layer, std::size_t level,
                                  std::size_t context, std::size_t sample,
                                  DistanceNorm norm = DistanceNorm::raw_sum);

struct MetricRow {
  std::string metric;
  int layer = -1;       // -1 when the metric is not per layer
  double noise = -1.0;  // -1 for the mean over noisy levels
  std::int64_t epoch = 0;
  double value = 0.0;

  bool operator==(const MetricRow&) const = default;
};

struct MetricSeries {
  std::vector<MetricRow> rows;

  void add(std::string metric, int layer, double noise, std::int64_t epoch, double value);
  // Canonical order: metric, layer, noise, epoch.
  void sort();
  // Throws DataError on a duplicate key.
  void validate() const;
  void append(const MetricSeries& other);
  std::optional<double> find(const std::string& metric, int layer, double noise, std::int64_t epoch) const;
  MetricSeries select(const std::string& metric) const;
  std::vector<std::int64_t> epochs() const;

  bool operator==(const MetricSeries&) const = default;
};

// Mean over (context, sample) of both distances per layer and level, plus
// the mean over noisy levels (noise -1). Metrics: level_distance (levels
// >= 1), residual_distance (all levels).
MetricSeries distance_curves(std::span<const EmbeddingGrid> grids, DistanceNorm norm = DistanceNorm::raw_sum);

struct DecoderResult {
  double accuracy = 0.0;
  std::vector<std::size_t> test_indices;
  std::vector<std::size_t> predictions;
};

// Multinomial logistic regression, inputs standardized per dimension with
// training-set statistics, zero init, 500 full-batch gradient steps at lr
// 0.1; stratified seeded 80/20 split; returns held-out accuracy.
DecoderResult fit_linear_decoder(const std::vector<std::vector<double>>& x, const std::vector<std::size_t>& labels,
                                 std::uint64_t split_seed);

struct GridDecoderResult {
  double accuracy = 0.0;
  std::vector<double> level_accuracy;  // per grid level; NaN for the clean level
};

// Classes are (context, noisy level); the clean level holds identical
// copies and is not a decoding target.
GridDecoderResult linear_decoder(const EmbeddingGrid& grid, std::size_t layer, std::uint64_t split_seed);

double cosine(std::span<const double> a, std::span<const double> b);

// Mean cosine between layer embeddings and each context's reference, over
// all levels, or over one level.
double global_alignment(const EmbeddingGrid& grid, std::size_t layer,
                        const std::vector<std::vector<double>>& references,
                        std::optional<std::size_t> level = std::nullopt);

// Head-averaged CLS attention over the patches of one layer, CLS entry
// dropped and renormalized: [num_patches] in row-major grid order.
Tensor attention_cls_map(const EncodeResult& result, std::size_t layer);

// Majority vote of each patch's pixels (ties go to background): [G x G].
Tensor downsample_mask(const Tensor& mask, std::size_t grid);

// max(IoU(norm(A) > t, M), IoU(norm(A) > t, 1 - M)) with A min-max
// normalized (a constant map normalizes to 0); IoU of two empty sets is 0.
double fg_iou(const Tensor& attention, const Tensor& mask, double threshold = 0.5);

struct FgIou {
  double mask = 0.0;        // IoU with M
  double complement = 0.0;  // IoU with 1 - M
  double value = 0.0;
};
FgIou fg_iou_parts(const Tensor& attention, const Tensor& mask, double threshold = 0.5);

double attention_noise_similarity(const Tensor& clean, const Tensor& noisy);

struct AnalysisOptions {
  DistanceNorm norm = DistanceNorm::raw_sum;
  double iou_threshold = 0.5;
  std::uint64_t split_seed = 0;
  bool decoder = true;
};

// Every metric for one probe record: level_distance, residual_distance,
// decoder_accuracy, global_alignment, fg_iou (when masks are present),
// attention_stability, probe_loss.
MetricSeries analyze_probe(const ProbeRecord& record, const AnalysisOptions& options = {});

void emit_csv(const MetricSeries& series, const std::filesystem::path& path);
std::string metrics_csv(const MetricSeries& series);
MetricSeries parse_metrics_csv(const std::string& text, const std::string& origin = "metrics.csv");
MetricSeries read_csv(const std::filesystem::path& path);

}  // namespace fwvit
