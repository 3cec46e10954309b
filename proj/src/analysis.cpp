#include "fwvit/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <stdexcept>
#include <tuple>

#include "fwvit/container.hpp"
#include "fwvit/errors.hpp"
#include "fwvit/rng.hpp"
#include "fwvit/text.hpp"

namespace fwvit {

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

void check_cell(const EmbeddingGrid& g, std::size_t layer, std::size_t level, std::size_t context,
                std::size_t sample) {
  if (layer >= g.layers || level >= g.levels || context >= g.contexts || sample >= g.samples) {
    throw std::out_of_range("embedding grid index out of range");
  }
}

// Sum over every sample of every other context at the same level.
double inter_image_sum(const EmbeddingGrid& g, std::size_t layer, std::size_t level, std::size_t context,
                       std::span<const double> z, std::size_t& terms) {
  double s = 0.0;
  terms = 0;
  for (std::size_t m = 0; m < g.contexts; ++m) {
    if (m == context) continue;
    for (std::size_t j = 0; j < g.samples; ++j) {
      s += squared_distance(z, g.at(layer, m, level, j));
      ++terms;
    }
  }
  if (!(s > 0.0)) throw DataError("relative distance: zero inter-image distance (degenerate embeddings)");
  return s;
}

double ratio(double num, std::size_t num_terms, double den, std::size_t den_terms, DistanceNorm norm) {
  if (norm == DistanceNorm::count_mean) {
    num /= static_cast<double>(num_terms);
    den /= static_cast<double>(den_terms);
  }
  return std::sqrt(num / den);
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<double> to_doubles(std::span<const float> v) { return {v.begin(), v.end()}; }

}  // namespace

EmbeddingGrid EmbeddingGrid::zeros(std::size_t layers, std::size_t contexts, std::size_t levels,
                                   std::size_t samples, std::size_t dim) {
  EmbeddingGrid g;
  g.layers = layers;
  g.contexts = contexts;
  g.levels = levels;
  g.samples = samples;
  g.dim = dim;
  g.noise_levels.resize(levels);
  for (std::size_t n = 0; n < levels; ++n) g.noise_levels[n] = static_cast<double>(n);
  g.values.assign(layers * contexts * levels * samples * dim, 0.0);
  return g;
}

std::span<const double> EmbeddingGrid::at(std::size_t layer, std::size_t context, std::size_t level,
                                          std::size_t sample) const {
  const std::size_t cell = ((layer * contexts + context) * levels + level) * samples + sample;
  return std::span<const double>(values).subspan(cell * dim, dim);
}

std::span<double> EmbeddingGrid::at(std::size_t layer, std::size_t context, std::size_t level,
                                    std::size_t sample) {
  const std::size_t cell = ((layer * contexts + context) * levels + level) * samples + sample;
  return std::span<double>(values).subspan(cell * dim, dim);
}

void EmbeddingGrid::validate() const {
  if (values.size() != layers * contexts * levels * samples * dim || dim == 0) {
    throw DataError("embedding grid is incomplete");
  }
  if (noise_levels.size() != levels) throw DataError("embedding grid: noise level count mismatch");
  if (!std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); })) {
    throw DataError("embedding grid contains non-finite values");
  }
}

EmbeddingGrid embedding_grid(const ProbeRecord& record) {
  const std::size_t levels = record.noise_levels.size();
  if (record.samples.size() != record.contexts * levels * record.samples_per_context || record.samples.empty()) {
    throw DataError("probe record is incomplete");
  }
  const auto& first = record.samples.front().cls;
  EmbeddingGrid g = EmbeddingGrid::zeros(first.dim(0), record.contexts, levels, record.samples_per_context,
                                         first.dim(1));
  g.epoch = record.epoch;
  g.noise_levels = record.noise_levels;
  for (std::size_t c = 0; c < g.contexts; ++c) {
    for (std::size_t n = 0; n < levels; ++n) {
      for (std::size_t k = 0; k < g.samples; ++k) {
        const Tensor& cls = record.at(c, n, k).cls;
        if (cls.dim(0) != g.layers || cls.dim(1) != g.dim) throw DataError("probe record: ragged embeddings");
        for (std::size_t l = 0; l < g.layers; ++l) {
          auto dst = g.at(l, c, n, k);
          for (std::size_t d = 0; d < g.dim; ++d) dst[d] = cls.data()[l * g.dim + d];
        }
      }
    }
  }
  g.validate();
  return g;
}

std::vector<std::vector<double>> reference_embeddings(const ProbeRecord& record) {
  std::vector<std::vector<double>> refs;
  for (const auto& r : record.references) refs.push_back(to_doubles(r.data()));
  return refs;
}

double relative_level_distance(const EmbeddingGrid& g, std::size_t layer, std::size_t level, std::size_t context,
                               std::size_t sample, DistanceNorm norm) {
  if (level == 0) throw DataError("relative level distance needs a lower noise level (n >= 1)");
  check_cell(g, layer, level, context, sample);
  const auto z = g.at(layer, context, level, sample);
  double num = 0.0;
  for (std::size_t k = 0; k < g.samples; ++k) num += squared_distance(z, g.at(layer, context, level - 1, k));
  std::size_t den_terms = 0;
  const double den = inter_image_sum(g, layer, level, context, z, den_terms);
  return ratio(num, g.samples, den, den_terms, norm);
}

double relative_residual_distance(const EmbeddingGrid& g, std::size_t layer, std::size_t level,
                                  std::size_t context, std::size_t sample, DistanceNorm norm) {
  if (g.samples < 2) throw DataError("relative residual distance needs at least 2 samples per cluster");
  check_cell(g, layer, level, context, sample);
  const auto z = g.at(layer, context, level, sample);
  double num = 0.0;
  for (std::size_t i = 0; i < g.samples; ++i) {
    if (i != sample) num += squared_distance(z, g.at(layer, context, level, i));
  }
  std::size_t den_terms = 0;
  const double den = inter_image_sum(g, layer, level, context, z, den_terms);
  return ratio(num, g.samples - 1, den, den_terms, norm);
}

void MetricSeries::add(std::string metric, int layer, double noise, std::int64_t epoch, double value) {
  rows.push_back({std::move(metric), layer, noise, epoch, value});
}

void MetricSeries::sort() {
  std::stable_sort(rows.begin(), rows.end(), [](const MetricRow& a, const MetricRow& b) {
    return std::tie(a.metric, a.layer, a.noise, a.epoch) < std::tie(b.metric, b.layer, b.noise, b.epoch);
  });
}

void MetricSeries::validate() const {
  MetricSeries copy = *this;
  copy.sort();
  for (std::size_t i = 1; i < copy.rows.size(); ++i) {
    const auto& a = copy.rows[i - 1];
    const auto& b = copy.rows[i];
    if (a.metric == b.metric && a.layer == b.layer && a.noise == b.noise && a.epoch == b.epoch) {
      throw DataError("duplicate metric row: " + a.metric + " layer " + std::to_string(a.layer) + " noise " +
                      format_number(a.noise) + " epoch " + std::to_string(a.epoch));
    }
  }
}

void MetricSeries::append(const MetricSeries& other) { rows.insert(rows.end(), other.rows.begin(), other.rows.end()); }

std::optional<double> MetricSeries::find(const std::string& metric, int layer, double noise,
                                         std::int64_t epoch) const {
  for (const auto& r : rows) {
    if (r.metric == metric && r.layer == layer && r.noise == noise && r.epoch == epoch) return r.value;
  }
  return std::nullopt;
}

MetricSeries MetricSeries::select(const std::string& metric) const {
  MetricSeries out;
  std::copy_if(rows.begin(), rows.end(), std::back_inserter(out.rows),
               [&](const MetricRow& r) { return r.metric == metric; });
  return out;
}

std::vector<std::int64_t> MetricSeries::epochs() const {
  std::vector<std::int64_t> e;
  for (const auto& r : rows) e.push_back(r.epoch);
  std::sort(e.begin(), e.end());
  e.erase(std::unique(e.begin(), e.end()), e.end());
  return e;
}

MetricSeries distance_curves(std::span<const EmbeddingGrid> grids, DistanceNorm norm) {
  if (grids.empty()) throw DataError("distance curves need at least one epoch");
  MetricSeries out;
  for (const auto& g : grids) {
    g.validate();
    for (std::size_t layer = 0; layer < g.layers; ++layer) {
      std::vector<double> level_means, residual_means;
      for (std::size_t n = 0; n < g.levels; ++n) {
        std::vector<double> lv, rv;
        for (std::size_t l = 0; l < g.contexts; ++l) {
          for (std::size_t k = 0; k < g.samples; ++k) {
            if (n >= 1) lv.push_back(relative_level_distance(g, layer, n, l, k, norm));
            if (g.samples >= 2) rv.push_back(relative_residual_distance(g, layer, n, l, k, norm));
          }
        }
        const int il = static_cast<int>(layer);
        if (n >= 1) {
          out.add("level_distance", il, g.noise_levels[n], g.epoch, mean(lv));
          level_means.push_back(mean(lv));
        }
        if (g.samples >= 2) {
          out.add("residual_distance", il, g.noise_levels[n], g.epoch, mean(rv));
          if (n >= 1) residual_means.push_back(mean(rv));
        }
      }
      if (!level_means.empty()) out.add("level_distance", static_cast<int>(layer), -1.0, g.epoch, mean(level_means));
      if (!residual_means.empty()) {
        out.add("residual_distance", static_cast<int>(layer), -1.0, g.epoch, mean(residual_means));
      }
    }
  }
  return out;
}

DecoderResult fit_linear_decoder(const std::vector<std::vector<double>>& x, const std::vector<std::size_t>& labels,
                                 std::uint64_t split_seed) {
  if (x.size() != labels.size() || x.empty()) throw DataError("linear decoder: inputs and labels disagree");
  const std::size_t dim = x.front().size();
  for (const auto& row : x) {
    if (row.size() != dim) throw DataError("linear decoder: ragged inputs");
  }

  // Compact class ids in ascending label order.
  std::vector<std::size_t> ids = labels;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.size() < 2) throw DataError("linear decoder needs at least 2 classes");
  const std::size_t classes = ids.size();
  std::vector<std::size_t> y(labels.size());
  std::vector<std::vector<std::size_t>> members(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    y[i] = static_cast<std::size_t>(std::lower_bound(ids.begin(), ids.end(), labels[i]) - ids.begin());
    members[y[i]].push_back(i);
  }

  std::vector<std::size_t> train, test;
  for (std::size_t c = 0; c < classes; ++c) {
    auto& m = members[c];
    if (m.size() < 2) throw DataError("linear decoder: class " + std::to_string(ids[c]) + " has fewer than 2 samples");
    Rng rng(derive_seed(split_seed, ids[c]));
    for (std::size_t i = m.size() - 1; i > 0; --i) std::swap(m[i], m[rng.below(i + 1)]);
    const auto n = static_cast<std::ptrdiff_t>(m.size());
    const auto n_train = std::clamp<std::ptrdiff_t>(std::llround(0.8 * static_cast<double>(n)), 1, n - 1);
    train.insert(train.end(), m.begin(), m.begin() + n_train);
    test.insert(test.end(), m.begin() + n_train, m.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());

  std::vector<double> mu(dim, 0.0), sd(dim, 0.0);
  for (std::size_t i : train) {
    for (std::size_t d = 0; d < dim; ++d) mu[d] += x[i][d];
  }
  for (double& v : mu) v /= static_cast<double>(train.size());
  for (std::size_t i : train) {
    for (std::size_t d = 0; d < dim; ++d) sd[d] += (x[i][d] - mu[d]) * (x[i][d] - mu[d]);
  }
  for (double& v : sd) {
    v = std::sqrt(v / static_cast<double>(train.size()));
    if (v < 1e-12) v = 1.0;
  }
  auto standardized = [&](std::size_t i) {
    std::vector<double> s(dim);
    for (std::size_t d = 0; d < dim; ++d) s[d] = (x[i][d] - mu[d]) / sd[d];
    return s;
  };
  std::vector<std::vector<double>> xs(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) xs[i] = standardized(i);

  std::vector<double> w(dim * classes, 0.0), b(classes, 0.0);
  auto logits = [&](const std::vector<double>& xi) {
    std::vector<double> z(b);
    for (std::size_t d = 0; d < dim; ++d) {
      const double v = xi[d];
      if (v == 0.0) continue;
      for (std::size_t c = 0; c < classes; ++c) z[c] += v * w[d * classes + c];
    }
    return z;
  };

  constexpr int kSteps = 500;
  constexpr double kLr = 0.1;
  std::vector<double> gw(w.size()), gb(classes);
  const double inv_n = 1.0 / static_cast<double>(train.size());
  for (int step = 0; step < kSteps; ++step) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t i : train) {
      std::vector<double> z = logits(xs[i]);
      const double zmax = *std::max_element(z.begin(), z.end());
      double total = 0.0;
      for (double& v : z) total += (v = std::exp(v - zmax));
      for (std::size_t c = 0; c < classes; ++c) {
        const double g = (z[c] / total - (c == y[i] ? 1.0 : 0.0)) * inv_n;
        gb[c] += g;
        for (std::size_t d = 0; d < dim; ++d) gw[d * classes + c] += g * xs[i][d];
      }
    }
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= kLr * gw[j];
    for (std::size_t c = 0; c < classes; ++c) b[c] -= kLr * gb[c];
  }

  DecoderResult out;
  std::size_t correct = 0;
  for (std::size_t i : test) {
    const auto z = logits(xs[i]);
    const auto pred = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    out.test_indices.push_back(i);
    out.predictions.push_back(ids[pred]);
    if (pred == y[i]) ++correct;
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  return out;
}

GridDecoderResult linear_decoder(const EmbeddingGrid& g, std::size_t layer, std::uint64_t split_seed) {
  g.validate();
  if (layer >= g.layers) throw std::out_of_range("linear decoder: layer out of range");
  if (g.levels < 2) throw DataError("linear decoder needs at least one noisy level");
  std::vector<std::vector<double>> x;
  std::vector<std::size_t> labels, level_of;
  for (std::size_t l = 0; l < g.contexts; ++l) {
    for (std::size_t n = 1; n < g.levels; ++n) {
      for (std::size_t k = 0; k < g.samples; ++k) {
        const auto z = g.at(layer, l, n, k);
        x.emplace_back(z.begin(), z.end());
        labels.push_back(l * g.levels + n);
        level_of.push_back(n);
      }
    }
  }
  const DecoderResult fit = fit_linear_decoder(x, labels, split_seed);
  GridDecoderResult out;
  out.accuracy = fit.accuracy;
  out.level_accuracy.assign(g.levels, std::nan(""));
  std::vector<std::size_t> hits(g.levels, 0), counts(g.levels, 0);
  for (std::size_t t = 0; t < fit.test_indices.size(); ++t) {
    const std::size_t i = fit.test_indices[t];
    ++counts[level_of[i]];
    if (fit.predictions[t] == labels[i]) ++hits[level_of[i]];
  }
  for (std::size_t n = 1; n < g.levels; ++n) {
    if (counts[n] > 0) out.level_accuracy[n] = static_cast<double>(hits[n]) / static_cast<double>(counts[n]);
  }
  return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < 1e-12 || nb < 1e-12) return 0.0;
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

double global_alignment(const EmbeddingGrid& g, std::size_t layer, const std::vector<std::vector<double>>& references,
                        std::optional<std::size_t> level) {
  if (references.size() != g.contexts) throw ShapeError("global alignment: one reference per context required");
  for (const auto& r : references) {
    if (r.size() != g.dim) throw ShapeError("global alignment: reference dimension mismatch");
  }
  if (layer >= g.layers) throw std::out_of_range("global alignment: layer out of range");
  const std::size_t n0 = level ? *level : 0, n1 = level ? *level + 1 : g.levels;
  if (n1 > g.levels) throw std::out_of_range("global alignment: level out of range");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t l = 0; l < g.contexts; ++l) {
    for (std::size_t n = n0; n < n1; ++n) {
      for (std::size_t k = 0; k < g.samples; ++k) {
        total += cosine(g.at(layer, l, n, k), references[l]);
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

Tensor attention_cls_map(const EncodeResult& result, std::size_t layer) {
  if (layer >= result.attention.size()) throw std::out_of_range("attention map: layer out of range");
  const auto& heads = result.attention[layer];
  const std::size_t patches = heads.front().dim(1) - 1;
  std::vector<double> row(patches, 0.0);
  for (const auto& h : heads) {
    for (std::size_t j = 0; j < patches; ++j) row[j] += h.at(0, j + 1);
  }
  const double total = std::accumulate(row.begin(), row.end(), 0.0);
  Tensor out({patches});
  for (std::size_t j = 0; j < patches; ++j) {
    out.data()[j] = static_cast<float>(total > 0 ? row[j] / total : 1.0 / static_cast<double>(patches));
  }
  return out;
}

Tensor downsample_mask(const Tensor& mask, std::size_t grid) {
  if (mask.rank() != 2 || mask.dim(0) != mask.dim(1) || grid == 0 || mask.dim(0) % grid != 0) {
    throw ShapeError("downsample_mask: mask " + shape_str(mask.shape()) + " does not tile a " +
                     std::to_string(grid) + "x" + std::to_string(grid) + " grid");
  }
  const std::size_t s = mask.dim(0), p = s / grid;
  Tensor out({grid, grid});
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      std::size_t ones = 0;
      for (std::size_t y = 0; y < p; ++y) {
        for (std::size_t x = 0; x < p; ++x) {
          const float v = mask.at(gy * p + y, gx * p + x);
          if (v != 0.0f && v != 1.0f) throw DataError("mask is not binary");
          ones += v == 1.0f;
        }
      }
      out.data()[gy * grid + gx] = 2 * ones > p * p ? 1.0f : 0.0f;
    }
  }
  return out;
}

FgIou fg_iou_parts(const Tensor& attention, const Tensor& mask, double threshold) {
  if (attention.shape() != mask.shape()) {
    throw ShapeError("fg_iou: attention " + shape_str(attention.shape()) + " vs mask " + shape_str(mask.shape()));
  }
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("fg_iou: threshold must lie in (0,1)");
  const auto a = attention.data();
  const auto m = mask.data();
  for (float v : m) {
    if (v != 0.0f && v != 1.0f) throw DataError("fg_iou: mask is not binary");
  }
  const auto [lo, hi] = std::minmax_element(a.begin(), a.end());
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  std::size_t inter_fg = 0, union_fg = 0, inter_bg = 0, union_bg = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double norm = range > 0.0 ? (static_cast<double>(a[i]) - *lo) / range : 0.0;
    const bool on = norm > threshold;
    const bool fg = m[i] == 1.0f;
    inter_fg += on && fg;
    union_fg += on || fg;
    inter_bg += on && !fg;
    union_bg += on || !fg;
  }
  auto iou = [](std::size_t i, std::size_t u) { return u == 0 ? 0.0 : static_cast<double>(i) / static_cast<double>(u); };
  FgIou out;
  out.mask = iou(inter_fg, union_fg);
  out.complement = iou(inter_bg, union_bg);
  out.value = std::max(out.mask, out.complement);
  return out;
}

double fg_iou(const Tensor& attention, const Tensor& mask, double threshold) {
  return fg_iou_parts(attention, mask, threshold).value;
}

double attention_noise_similarity(const Tensor& clean, const Tensor& noisy) {
  if (clean.shape() != noisy.shape()) {
    throw ShapeError("attention similarity: " + shape_str(clean.shape()) + " vs " + shape_str(noisy.shape()));
  }
  const auto a = to_doubles(clean.data());
  const auto b = to_doubles(noisy.data());
  return cosine(a, b);
}

MetricSeries analyze_probe(const ProbeRecord& record, const AnalysisOptions& options) {
  const EmbeddingGrid g = embedding_grid(record);
  const std::int64_t epoch = record.epoch;
  MetricSeries out = distance_curves(std::span<const EmbeddingGrid>(&g, 1), options.norm);
  const auto refs = reference_embeddings(record);
  const bool masks = !record.masks.empty() &&
                     std::all_of(record.masks.begin(), record.masks.end(), [](const Tensor& m) { return m.defined(); });
  std::vector<Tensor> patch_masks;
  if (masks) {
    const std::size_t grid = record.samples.front().attention.dim(1);
    for (const auto& m : record.masks) patch_masks.push_back(downsample_mask(m, grid));
  }

  auto layer_map = [](const Tensor& maps, std::size_t layer) {
    const std::size_t g0 = maps.dim(1), g1 = maps.dim(2), n = g0 * g1;
    return Tensor({g0, g1}, std::vector<float>(maps.data().begin() + layer * n, maps.data().begin() + (layer + 1) * n));
  };

  for (std::size_t layer = 0; layer < g.layers; ++layer) {
    const int il = static_cast<int>(layer);
    if (options.decoder && g.levels >= 2) {
      const auto dec = linear_decoder(g, layer, options.split_seed);
      for (std::size_t n = 1; n < g.levels; ++n) {
        out.add("decoder_accuracy", il, g.noise_levels[n], epoch, dec.level_accuracy[n]);
      }
      out.add("decoder_accuracy", il, -1.0, epoch, dec.accuracy);
    }

    std::vector<double> align_noisy, iou_noisy, stab_noisy;
    for (std::size_t n = 0; n < g.levels; ++n) {
      const double a = global_alignment(g, layer, refs, n);
      out.add("global_alignment", il, g.noise_levels[n], epoch, a);
      if (n >= 1) align_noisy.push_back(a);

      std::vector<double> ious, stabs;
      for (std::size_t l = 0; l < g.contexts; ++l) {
        const Tensor clean = layer_map(record.at(l, 0, 0).attention, layer);
        for (std::size_t k = 0; k < g.samples; ++k) {
          const Tensor map = layer_map(record.at(l, n, k).attention, layer);
          if (masks) ious.push_back(fg_iou(map, patch_masks[l], options.iou_threshold));
          if (n >= 1) stabs.push_back(attention_noise_similarity(clean, map));
        }
      }
      if (masks) {
        out.add("fg_iou", il, g.noise_levels[n], epoch, mean(ious));
        if (n >= 1) iou_noisy.push_back(mean(ious));
      }
      if (n >= 1) {
        out.add("attention_stability", il, g.noise_levels[n], epoch, mean(stabs));
        stab_noisy.push_back(mean(stabs));
      }
    }
    if (!align_noisy.empty()) out.add("global_alignment", il, -1.0, epoch, mean(align_noisy));
    if (!iou_noisy.empty()) out.add("fg_iou", il, -1.0, epoch, mean(iou_noisy));
    if (!stab_noisy.empty()) out.add("attention_stability", il, -1.0, epoch, mean(stab_noisy));
  }

  std::vector<double> noisy_loss;
  for (std::size_t n = 0; n < g.levels; ++n) {
    out.add("probe_loss", -1, g.noise_levels[n], epoch, record.mean_loss(n));
    if (n >= 1) noisy_loss.push_back(record.mean_loss(n));
  }
  if (!noisy_loss.empty()) out.add("probe_loss", -1, -1.0, epoch, mean(noisy_loss));
  return out;
}

std::string metrics_csv(const MetricSeries& series) {
  MetricSeries sorted = series;
  sorted.sort();
  std::string out = "metric,layer,noise,epoch,value\n";
  for (const auto& r : sorted.rows) {
    out += r.metric + "," + std::to_string(r.layer) + "," + format_number(r.noise) + "," + std::to_string(r.epoch) +
           "," + format_number(r.value) + "\n";
  }
  return out;
}

void emit_csv(const MetricSeries& series, const std::filesystem::path& path) {
  if (series.rows.empty()) throw DataError("emit_csv: empty series");
  series.validate();
  write_file_atomic(path, metrics_csv(series));
}

MetricSeries parse_metrics_csv(const std::string& text, const std::string& origin) {
  const auto lines = split(text, '\n');
  if (lines.empty() || trim(lines[0]) != "metric,layer,noise,epoch,value") {
    throw DataError(origin + ": missing header 'metric,layer,noise,epoch,value'");
  }
  MetricSeries out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const auto f = split(trim(lines[i]), ',');
    try {
      if (f.size() != 5 || f[0].empty()) throw std::invalid_argument("expected 5 fields");
      out.add(f[0], static_cast<int>(parse_integer(f[1])), parse_number(f[2]), parse_integer(f[3]),
              parse_number(f[4]));
    } catch (const std::invalid_argument& e) {
      throw DataError(origin + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  out.validate();
  return out;
}

MetricSeries read_csv(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string());
  const std::string text{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  return parse_metrics_csv(text, path.string());
}

}  // namespace fwvit
