#include <doctest.h>

#include <cmath>
#include <numeric>
#include <regex>

#include "fwvit/analysis.hpp"
#include "fwvit/errors.hpp"
#include "fwvit/plot.hpp"
#include "fwvit/vit.hpp"
#include "support/metric_oracles.hpp"
#include "support/tempdir.hpp"

using namespace fwvit;
using fwvit::testing::slurp;
using fwvit::testing::TempDir;

namespace {

void set(EmbeddingGrid& g, std::size_t l, std::size_t n, std::size_t k, std::vector<double> v) {
  std::copy(v.begin(), v.end(), g.at(0, l, n, k).begin());
}

std::size_t count(const std::string& text, const std::string& needle) {
  std::size_t c = 0;
  for (auto p = text.find(needle); p != std::string::npos; p = text.find(needle, p + 1)) ++c;
  return c;
}

ModelSpec tiny_spec() {
  ModelSpec s;
  s.image_size = 16;
  s.patch_size = 4;
  s.embed_dim = 16;
  s.enc_layers = 2;
  s.enc_heads = 2;
  s.dec_layers = 1;
  s.dec_heads = 2;
  s.dec_dim = 16;
  return s;
}

}  // namespace

TEST_CASE("relative level distance hand example") {
  EmbeddingGrid g = EmbeddingGrid::zeros(1, 2, 2, 1, 2);
  set(g, 0, 1, 0, {0, 0});
  set(g, 0, 0, 0, {3, 4});
  set(g, 1, 1, 0, {5, 0});
  set(g, 1, 0, 0, {1, 1});
  CHECK(relative_level_distance(g, 0, 1, 0, 0) == doctest::Approx(1.0).epsilon(1e-15));

  SUBCASE("identical across levels gives zero") {
    set(g, 0, 0, 0, {0, 0});
    CHECK(relative_level_distance(g, 0, 1, 0, 0) == 0.0);
  }
  SUBCASE("uniform scaling leaves it unchanged") {
    for (double& v : g.values) v *= 7.5;
    CHECK(relative_level_distance(g, 0, 1, 0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(relative_level_distance(g, 0, 0, 0, 0), DataError);
    set(g, 1, 1, 0, {0, 0});
    CHECK_THROWS_AS(relative_level_distance(g, 0, 1, 0, 0), DataError);
  }
}

TEST_CASE("relative residual distance hand example") {
  EmbeddingGrid g = EmbeddingGrid::zeros(1, 2, 1, 2, 2);
  set(g, 0, 0, 0, {0, 0});
  set(g, 0, 0, 1, {0, 2});
  set(g, 1, 0, 0, {2, 2});
  set(g, 1, 0, 1, {-2, -2});  // inter-image sum from (0,0): 8 + 8
  CHECK(relative_residual_distance(g, 0, 0, 0, 0) == doctest::Approx(0.5).epsilon(1e-15));

  SUBCASE("identical cluster gives zero") {
    set(g, 0, 0, 1, {0, 0});
    CHECK(relative_residual_distance(g, 0, 0, 0, 0) == 0.0);
  }
  SUBCASE("count normalization rescales by the term counts") {
    // 1 numerator term, 2 denominator terms.
    CHECK(relative_residual_distance(g, 0, 0, 0, 0, DistanceNorm::count_mean) ==
          doctest::Approx(std::sqrt(4.0 / 8.0)));
  }
  SUBCASE("single-sample cluster is an error") {
    EmbeddingGrid one = EmbeddingGrid::zeros(1, 2, 1, 1, 2);
    set(one, 1, 0, 0, {1, 0});
    CHECK_THROWS_AS(relative_residual_distance(one, 0, 0, 0, 0), DataError);
  }
}

TEST_CASE("relative distances agree with the brute-force oracle") {
  Rng rng(2024);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t C = 2 + rng.below(3), N = 2 + rng.below(2), K = 2 + rng.below(4), D = 1 + rng.below(8);
    const auto z = oracle::random_nested(rng, C, N, K, D);
    const EmbeddingGrid g = oracle::to_grid(z);
    for (std::size_t l = 0; l < C; ++l)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k) {
          if (n >= 1) REQUIRE(std::fabs(relative_level_distance(g, 0, n, l, k) - oracle::level(z, n, l, k)) < 1e-6);
          REQUIRE(std::fabs(relative_residual_distance(g, 0, n, l, k) - oracle::residual(z, n, l, k)) < 1e-6);
        }
  }
}

TEST_CASE("relative distances are invariant to orthogonal maps and uniform scaling") {
  Rng rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    const auto z = oracle::random_nested(rng, 4, 3, 5, 8);
    const EmbeddingGrid g = oracle::to_grid(z);
    const auto q = oracle::random_orthogonal(rng, 8);
    const EmbeddingGrid h = oracle::transformed(g, q, 0.1 + 5.0 * rng.uniform());
    for (std::size_t l = 0; l < 4; ++l)
      for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t k = 0; k < 5; ++k) {
          if (n >= 1)
            REQUIRE(std::fabs(relative_level_distance(g, 0, n, l, k) - relative_level_distance(h, 0, n, l, k)) < 1e-5);
          REQUIRE(std::fabs(relative_residual_distance(g, 0, n, l, k) - relative_residual_distance(h, 0, n, l, k)) <
                  1e-5);
        }
  }
}

TEST_CASE("distance curves") {
  Rng rng(5);
  EmbeddingGrid g = EmbeddingGrid::zeros(3, 4, 4, 5, 6);
  g.noise_levels = {0.0, 0.1, 0.3, 0.5};
  for (double& v : g.values) v = rng.normal();

  SUBCASE("one row per layer and level with a predecessor") {
    const MetricSeries s = distance_curves(std::span<const EmbeddingGrid>(&g, 1));
    std::size_t level_rows = 0, residual_rows = 0;
    for (const auto& r : s.rows) {
      if (r.noise < 0) continue;
      level_rows += r.metric == "level_distance";
      residual_rows += r.metric == "residual_distance";
    }
    CHECK(level_rows == 3 * 3);
    CHECK(residual_rows == 3 * 4);
    s.validate();
    // Mean over (context, sample).
    double m = 0;
    for (std::size_t l = 0; l < 4; ++l)
      for (std::size_t k = 0; k < 5; ++k) m += relative_level_distance(g, 2, 2, l, k);
    CHECK(*s.find("level_distance", 2, 0.3, 0) == doctest::Approx(m / 20).epsilon(1e-14));
  }
  SUBCASE("constant grids give flat curves") {
    std::vector<EmbeddingGrid> grids(3, g);
    for (std::size_t e = 0; e < 3; ++e) grids[e].epoch = static_cast<std::int64_t>(e) * 10;
    const MetricSeries s = distance_curves(grids);
    for (const auto& r : s.rows) CHECK(r.value == *s.find(r.metric, r.layer, r.noise, 0));
  }
  SUBCASE("CSV round trip is bit-exact") {
    MetricSeries s = distance_curves(std::span<const EmbeddingGrid>(&g, 1));
    s.sort();
    CHECK(parse_metrics_csv(metrics_csv(s)) == s);
    TempDir dir;
    emit_csv(s, dir / "m.csv");
    CHECK(read_csv(dir / "m.csv") == s);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(distance_curves({}), DataError);
    CHECK_THROWS_AS(emit_csv(MetricSeries{}, "unused.csv"), DataError);
    CHECK_THROWS_AS(parse_metrics_csv("metric,layer\n"), DataError);
    CHECK_THROWS_AS(parse_metrics_csv("metric,layer,noise,epoch,value\nx,0,0.1,0,abc\n"), DataError);
    CHECK_THROWS_AS(parse_metrics_csv("metric,layer,noise,epoch,value\nx,0,0.1,0,1\nx,0,0.1,0,2\n"), DataError);
  }
}

TEST_CASE("linear decoder") {
  SUBCASE("separated clusters decode perfectly") {
    Rng rng(1);
    EmbeddingGrid g = EmbeddingGrid::zeros(1, 4, 4, 10, 8);
    for (std::size_t l = 0; l < 4; ++l)
      for (std::size_t n = 0; n < 4; ++n) {
        std::vector<double> centre(8);
        for (auto& v : centre) v = 10.0 * rng.normal();
        for (std::size_t k = 0; k < 10; ++k) {
          auto z = g.at(0, l, n, k);
          for (std::size_t d = 0; d < 8; ++d) z[d] = centre[d] + 1e-3 * rng.normal();
        }
      }
    const auto r = linear_decoder(g, 0, 3);
    CHECK(r.accuracy == 1.0);
    CHECK(std::isnan(r.level_accuracy[0]));
    for (std::size_t n = 1; n < 4; ++n) CHECK(r.level_accuracy[n] == 1.0);
  }
  SUBCASE("shuffled labels stay near chance") {
    double total = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(100 + seed);
      std::vector<std::vector<double>> x(120, std::vector<double>(16));
      std::vector<std::size_t> y(120);
      for (std::size_t i = 0; i < 120; ++i) {
        y[i] = i % 12;
        for (auto& v : x[i]) v = 3.0 * static_cast<double>(i % 12) + rng.normal();
      }
      for (std::size_t i = 119; i > 0; --i) std::swap(y[i], y[rng.below(i + 1)]);
      const double acc = fit_linear_decoder(x, y, seed).accuracy;
      CHECK(std::fabs(acc - 1.0 / 12) <= 0.15);
      CHECK(acc < 0.35);
      total += acc;
    }
    CHECK(total / 10 < 0.2);
  }
  SUBCASE("two classes in 1-D match the sign threshold") {
    std::vector<std::vector<double>> x;
    std::vector<std::size_t> y;
    for (int i = 0; i < 10; ++i) {
      x.push_back({-1.0});
      y.push_back(0);
      x.push_back({1.0});
      y.push_back(1);
    }
    const auto r = fit_linear_decoder(x, y, 9);
    std::size_t agree = 0;
    for (std::size_t t = 0; t < r.test_indices.size(); ++t) {
      agree += r.predictions[t] == (x[r.test_indices[t]][0] > 0 ? 1u : 0u);
    }
    CHECK(r.test_indices.size() == 4);
    CHECK(agree == r.test_indices.size());
    CHECK(r.accuracy == 1.0);
  }
  SUBCASE("deterministic split") {
    Rng rng(4);
    std::vector<std::vector<double>> x(40, std::vector<double>(3));
    std::vector<std::size_t> y(40);
    for (std::size_t i = 0; i < 40; ++i) {
      y[i] = i % 4;
      for (auto& v : x[i]) v = rng.normal();
    }
    const auto a = fit_linear_decoder(x, y, 11), b = fit_linear_decoder(x, y, 11);
    CHECK(a.test_indices == b.test_indices);
    CHECK(a.predictions == b.predictions);
    CHECK(a.test_indices != fit_linear_decoder(x, y, 12).test_indices);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(fit_linear_decoder({{0.0}, {1.0}, {2.0}}, {0, 0, 1}, 0), DataError);
    CHECK_THROWS_AS(fit_linear_decoder({{0.0}, {1.0}}, {0, 0}, 0), DataError);
  }
}

TEST_CASE("global alignment") {
  EmbeddingGrid g = EmbeddingGrid::zeros(1, 2, 1, 1, 2);
  set(g, 0, 0, 0, {2, 0});
  set(g, 1, 0, 0, {0.5, std::sqrt(3.0) / 2});
  const std::vector<std::vector<double>> refs{{1, 0}, {1, 0}};
  CHECK(global_alignment(g, 0, refs) == doctest::Approx(0.75).epsilon(1e-14));

  CHECK(global_alignment(g, 0, {{0, 3}, {-std::sqrt(3.0) / 2, 0.5}}) == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(global_alignment(g, 0, {{0, 0}, {1, 0}}) == doctest::Approx(0.25));
  CHECK_THROWS_AS(global_alignment(g, 0, {{1, 0, 0}, {1, 0, 0}}), ShapeError);
  CHECK_THROWS_AS(global_alignment(g, 0, {{1, 0}}), ShapeError);

  SUBCASE("clean top layer against its own reference is 1") {
    Rng rng(3);
    EmbeddingGrid h = EmbeddingGrid::zeros(2, 3, 2, 4, 5);
    for (double& v : h.values) v = rng.normal();
    std::vector<std::vector<double>> own;
    for (std::size_t l = 0; l < 3; ++l) {
      const auto z = h.at(1, l, 0, 0);
      own.emplace_back(z.begin(), z.end());
      for (std::size_t k = 1; k < 4; ++k) std::copy(z.begin(), z.end(), h.at(1, l, 0, k).begin());
    }
    CHECK(global_alignment(h, 1, own, 0) == doctest::Approx(1.0).epsilon(1e-14));
    const double a = global_alignment(h, 0, own);
    CHECK(a >= -1.0);
    CHECK(a <= 1.0);
  }
}

TEST_CASE("attention CLS map") {
  SUBCASE("hand softmax example") {
    // One head, CLS row softmax over [CLS, p1, p2] with logits [0, ln 1, ln 3].
    EncodeResult r;
    const std::vector<double> logits{0.0, std::log(1.0), std::log(3.0)};
    double z = 0;
    for (double l : logits) z += std::exp(l);
    std::vector<float> a(9, 1.0f / 3);
    for (std::size_t j = 0; j < 3; ++j) a[j] = static_cast<float>(std::exp(logits[j]) / z);
    r.attention = {{Tensor({3, 3}, a)}};
    const Tensor map = attention_cls_map(r, 0);
    REQUIRE(map.numel() == 2);
    CHECK(map.at(0) == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(map.at(1) == doctest::Approx(0.75).epsilon(1e-6));
    CHECK_THROWS_AS(attention_cls_map(r, 1), std::out_of_range);
  }
  SUBCASE("probability vector for every layer") {
    const ModelSpec s = tiny_spec();
    ModelState m = init_model(s, 8);
    Rng rng(2);
    const EncodeResult r = encode(Tensor({3, 16, 16}, rng.uniform_floats(3 * 16 * 16)), m);
    for (std::size_t l = 0; l < s.enc_layers; ++l) {
      const Tensor map = attention_cls_map(r, l);
      double total = 0;
      for (float v : map.data()) {
        CHECK(v >= 0.0f);
        total += v;
      }
      CHECK(std::fabs(total - 1.0) <= 1e-5);
    }
  }
  SUBCASE("zeroed Q/K gives a uniform map") {
    const ModelSpec s = tiny_spec();
    ModelState m = init_model(s, 8);
    for (std::size_t l = 0; l < s.enc_layers; ++l)
      for (const char* p : {"q", "k"})
        for (const char* t : {".weight", ".bias"})
          for (auto& v : m.tensor("enc." + std::to_string(l) + ".attn." + p + t).data()) v = 0.0f;
    Rng rng(2);
    const EncodeResult r = encode(Tensor({3, 16, 16}, rng.uniform_floats(3 * 16 * 16)), m);
    for (std::size_t l = 0; l < s.enc_layers; ++l) {
      const Tensor map = attention_cls_map(r, l);
      for (float v : map.data()) CHECK(std::fabs(v - 1.0f / 16) <= 1e-6);
    }
  }
}

TEST_CASE("fg-IoU") {
  const Tensor a({2, 2}, {1, 1, 0, 0});
  const Tensor m({2, 2}, {1, 0, 0, 0});
  const FgIou parts = fg_iou_parts(a, m);
  CHECK(parts.mask == 0.5);
  CHECK(parts.complement == 0.25);
  CHECK(fg_iou(a, m) == 0.5);

  SUBCASE("normalized map equal to the mask or its complement") {
    const Tensor mask({2, 3}, {1, 0, 0, 1, 1, 0});
    const Tensor att({2, 3}, {0.3f, 0.1f, 0.1f, 0.3f, 0.3f, 0.1f});
    const Tensor inv({2, 3}, {0.1f, 0.3f, 0.3f, 0.1f, 0.1f, 0.3f});
    CHECK(fg_iou(att, mask) == 1.0);
    CHECK(fg_iou(inv, mask) == 1.0);
  }
  SUBCASE("constant map and empty sets") {
    CHECK(fg_iou(Tensor({2, 2}, 0.25f), Tensor({2, 2}, 1.0f)) == 0.0);
    CHECK(fg_iou(Tensor({2, 2}, 0.25f), Tensor({2, 2}, 0.0f)) == 0.0);
  }
  SUBCASE("oracle agreement, complement symmetry and range") {
    Rng rng(31);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t g = 2 + rng.below(5);
      Tensor att({g, g}), mask({g, g}), comp({g, g});
      std::vector<double> av;
      std::vector<int> mv;
      for (std::size_t i = 0; i < g * g; ++i) {
        att.data()[i] = rng.uniform_float();
        mask.data()[i] = static_cast<float>(rng.below(2));
        comp.data()[i] = 1.0f - mask.data()[i];
        av.push_back(att.data()[i]);
        mv.push_back(static_cast<int>(mask.data()[i]));
      }
      const double t = 0.1 + 0.8 * rng.uniform();
      const double v = fg_iou(att, mask, t);
      REQUIRE(std::fabs(v - oracle::fg_iou(av, mv, t)) < 1e-6);
      REQUIRE(v == fg_iou(att, comp, t));
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(fg_iou(a, Tensor({2, 2}, 0.5f)), DataError);
    CHECK_THROWS_AS(fg_iou(a, Tensor({4}, 1.0f)), ShapeError);
    CHECK_THROWS_AS(fg_iou(a, m, 1.0), ConfigError);
    CHECK_THROWS_AS(fg_iou(a, m, 0.0), ConfigError);
  }
}

TEST_CASE("mask downsampling by majority vote") {
  Tensor mask({4, 4}, 0.0f);
  // Top-left patch 3/4 on, top-right 2/4 (tie), bottom-left 1/4.
  for (auto [y, x] : {std::pair{0, 0}, {0, 1}, {1, 0}, {0, 2}, {1, 3}, {3, 1}}) mask.data()[y * 4 + x] = 1.0f;
  const Tensor d = downsample_mask(mask, 2);
  CHECK(d.at(0, 0) == 1.0f);
  CHECK(d.at(0, 1) == 0.0f);
  CHECK(d.at(1, 0) == 0.0f);
  CHECK(d.at(1, 1) == 0.0f);
  CHECK_THROWS_AS(downsample_mask(mask, 3), ShapeError);
  mask.data()[0] = 0.5f;
  CHECK_THROWS_AS(downsample_mask(mask, 2), DataError);
}

TEST_CASE("attention noise similarity") {
  const Tensor p({2}, {0.25f, 0.75f}), q({2}, {0.75f, 0.25f});
  CHECK(attention_noise_similarity(p, p) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(attention_noise_similarity(p, q) == doctest::Approx(0.6).epsilon(1e-7));
  CHECK(attention_noise_similarity(Tensor({2}, {1, 0}), Tensor({2}, {0, 1})) == 0.0);
  CHECK_THROWS_AS(attention_noise_similarity(p, Tensor({3}, 0.1f)), ShapeError);
}

TEST_CASE("analyze_probe on a real probe record") {
  const ModelSpec s = tiny_spec();
  const ModelState m = init_model(s, 5);
  ContextSet ctx = gen_contexts(3, 4, s.image_size);
  ctx.samples_per_context = 5;
  const ProbeRecord rec = probe_epoch(m, ctx, 0, 0.1f);
  const MetricSeries a = analyze_probe(rec);
  a.validate();
  CHECK(a == analyze_probe(rec));
  for (const char* metric : {"level_distance", "residual_distance", "decoder_accuracy", "global_alignment", "fg_iou",
                             "attention_stability", "probe_loss"}) {
    CHECK(!a.select(metric).rows.empty());
  }
  for (const auto& r : a.rows) {
    REQUIRE(std::isfinite(r.value));
    if (r.metric == "decoder_accuracy" || r.metric == "fg_iou") {
      CHECK(r.value >= 0.0);
      CHECK(r.value <= 1.0);
    }
    if (r.metric == "global_alignment" || r.metric == "attention_stability") {
      CHECK(r.value >= -1.0);
      CHECK(r.value <= 1.0);
    }
  }
  // The clean top layer is its own reference.
  CHECK(*a.find("global_alignment", 1, 0.0, 0) == doctest::Approx(1.0).epsilon(1e-6));
  // Clean copies are identical, so the clean cluster has no spread.
  CHECK(*a.find("residual_distance", 0, 0.0, 0) == 0.0);
}

TEST_CASE("SVG line plots") {
  TempDir dir;
  SUBCASE("single point draws one polyline with a marker") {
    MetricSeries s;
    s.add("fg_iou", 0, -1.0, 0, 0.4);
    emit_svg_lineplot(s, {.metric = "fg_iou"}, dir / "a.svg");
    const std::string svg = slurp(dir / "a.svg");
    CHECK(count(svg, "<polyline") == 1);
    CHECK(count(svg, "<circle") == 1);
    const std::regex pts("points=\"([^\"]*)\"");
    std::smatch match;
    REQUIRE(std::regex_search(svg, match, pts));
    CHECK(count(match[1].str(), ",") == 1);
  }
  SUBCASE("deterministic bytes, one polyline per group, ticks and legend") {
    MetricSeries s;
    for (int layer = 0; layer < 3; ++layer)
      for (int e = 0; e <= 4; ++e) s.add("global_alignment", layer, 0.3, e, 0.1 * layer + 0.01 * e);
    s.add("global_alignment", 0, 0.5, 0, 9.0);  // other noise, filtered out
    const PlotRequest req{.metric = "global_alignment", .noise = 0.3};
    emit_svg_lineplot(s, req, dir / "a.svg");
    emit_svg_lineplot(s, req, dir / "b.svg");
    const std::string svg = slurp(dir / "a.svg");
    CHECK(svg == slurp(dir / "b.svg"));
    CHECK(count(svg, "<polyline") == 3);
    CHECK(count(svg, "class=\"tick\"") == 12);
    CHECK(svg.find("layer 2") != std::string::npos);
    CHECK(svg.find(">9<") == std::string::npos);
  }
  SUBCASE("overlay has two polylines per group") {
    MetricSeries a, b;
    for (int layer = 0; layer < 2; ++layer)
      for (int e = 0; e < 3; ++e) {
        a.add("fg_iou", layer, -1.0, e, 0.1 * e);
        b.add("fg_iou", layer, -1.0, e, 0.2 * e);
      }
    emit_svg_overlay(a, "(a)", b, "(b)", {.metric = "fg_iou"}, dir / "o.svg");
    const std::string svg = slurp(dir / "o.svg");
    CHECK(count(svg, "<polyline") == 4);
    CHECK(count(svg, "stroke-dasharray") == 4);  // 2 dashed polylines + 2 legend swatches
  }
  SUBCASE("grouping by noise") {
    MetricSeries s;
    for (double n : {0.1, 0.3, 0.5}) s.add("probe_loss", -1, n, 0, n);
    const auto lines = series_lines(s, {.metric = "probe_loss", .grouping = Grouping::noise, .layer = -1});
    REQUIRE(lines.size() == 3);
    CHECK(lines[1].label == "noise 0.3");
  }
  CHECK_THROWS_AS(emit_svg_lineplot(MetricSeries{}, {.metric = "x"}, dir / "e.svg"), DataError);
}
