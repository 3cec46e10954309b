#include <doctest.h>

#include <cmath>
#include <regex>

#include "fwvit/checkpoint.hpp"
#include "fwvit/cli.hpp"
#include "fwvit/container.hpp"
#include "fwvit/image_io.hpp"
#include "fwvit/text.hpp"
#include "support/metric_oracles.hpp"
#include "support/tempdir.hpp"

using namespace fwvit;
using fwvit::testing::slurp;
using fwvit::testing::spit;
using fwvit::testing::TempDir;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run(const fs::path& out) {
  RunConfig c;
  c.model.image_size = 16;
  c.model.patch_size = 4;
  c.model.embed_dim = 16;
  c.model.enc_layers = 2;
  c.model.enc_heads = 2;
  c.model.dec_layers = 1;
  c.model.dec_heads = 2;
  c.model.dec_dim = 16;
  c.train.epochs = 3;
  c.train.lr = 1e-3;
  c.train.phase0_epochs = 1;
  c.train.phase0_images = 8;
  c.train.checkpoint_every = 2;
  c.samples_per_context = 3;
  c.out_dir = out.string();
  return c;
}

std::size_t count(const std::string& text, const std::string& needle) {
  std::size_t c = 0;
  for (auto p = text.find(needle); p != std::string::npos; p = text.find(needle, p + 1)) ++c;
  return c;
}

std::string comment_value(const std::string& config_text, const std::string& key) {
  const std::regex re("# " + key + " = ([0-9]+)");
  std::smatch m;
  REQUIRE(std::regex_search(config_text, m, re));
  return m[1];
}

}  // namespace

TEST_CASE("run config text round trip and overrides") {
  RunConfig c;
  c.train.seed = 18446744073709551615ull;
  c.train.lr = 3e-4;
  c.train.lambda_l1 = 0.2f;
  c.noise_levels = {0.05, 0.25};
  c.data_dir = "some dir/with space";
  c.train.lora_enabled = true;
  RunConfig parsed;
  apply_config_text(parsed, format_run_config(c));
  CHECK(parsed == c);
  CHECK(format_run_config(parsed) == format_run_config(c));

  SUBCASE("comments, blank lines and overrides") {
    RunConfig d;
    apply_config_text(d, "# header\n\nepochs = 7   # trailing\n lora=true\nnoise_levels = 0.2,0.4\n");
    CHECK(d.train.epochs == 7);
    CHECK(d.train.lora_enabled);
    CHECK(d.noise_levels == std::vector<double>{0.2, 0.4});
    set_config_value(d, "epochs", "9");
    CHECK(d.train.epochs == 9);
    CHECK(get_config_value(d, "epochs") == "9");
  }
  SUBCASE("unknown keys are all listed") {
    RunConfig d;
    CHECK_THROWS_WITH_AS(apply_config_text(d, "epochs = 1\nfoo = 2\nbar = 3\n", "cfg"),
                         "cfg: unknown config keys: foo bar", ConfigError);
  }
  SUBCASE("malformed input") {
    RunConfig d;
    CHECK_THROWS_AS(apply_config_text(d, "epochs 1\n"), ConfigError);
    CHECK_THROWS_AS(apply_config_text(d, "epochs = one\n"), ConfigError);
    CHECK_THROWS_AS(apply_config_text(d, "epochs = 1\nepochs = 2\n"), ConfigError);
    CHECK_THROWS_AS(apply_config_text(d, "lora = maybe\n"), ConfigError);
    CHECK_THROWS_AS(set_config_value(d, "batch_size", "-1"), ConfigError);
    CHECK_THROWS_AS(set_config_value(d, "nope", "1"), ConfigError);
  }
  SUBCASE("validation") {
    RunConfig d;
    d.validate();
    d.contexts = 1;
    CHECK_THROWS_AS(d.validate(), ConfigError);
    d = RunConfig{};
    d.noise_levels = {0.3, 0.1};
    CHECK_THROWS_AS(d.validate(), ConfigError);
    d = RunConfig{};
    d.distance_norm = "mean";
    CHECK_THROWS_AS(d.validate(), ConfigError);
    d = RunConfig{};
    d.model.patch_size = 5;
    CHECK_THROWS_AS(d.validate(), ConfigError);
  }
}

TEST_CASE("gen-data writes deterministic images, masks and a manifest") {
  TempDir a, b;
  cmd_gen_data(a.path(), 4, 7, 32);
  cmd_gen_data(b.path(), 4, 7, 32);
  std::size_t ppm = 0, pgm = 0;
  for (const auto& e : fs::directory_iterator(a.path())) {
    const auto name = e.path().filename().string();
    ppm += e.path().extension() == ".ppm";
    pgm += e.path().extension() == ".pgm";
    CHECK(slurp(e.path()) == slurp(b / name));
  }
  CHECK(ppm == 4);
  CHECK(pgm == 4);
  for (int i = 0; i < 4; ++i) {
    const Tensor m = read_mask(a / ("mask_ctx" + std::to_string(i) + ".pgm"));
    double on = 0;
    for (float v : m.data()) on += v;
    const double frac = on / static_cast<double>(m.numel());
    CHECK(frac >= 0.1);
    CHECK(frac <= 0.6);
  }
  // The manifest loads back to the generated contexts (8-bit quantized).
  const ContextSet gen = gen_contexts(7, 4, 32);
  const ContextSet loaded = load_contexts(a.path(), 4, 32);
  REQUIRE(loaded.ids == gen.ids);
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < gen.images[c].numel(); ++i) {
      REQUIRE(std::fabs(loaded.images[c].data()[i] - gen.images[c].data()[i]) <= 0.5f / 255 + 1e-6f);
    }
    CHECK(bit_equal(loaded.masks[c], gen.masks[c]));
  }
  CHECK_THROWS_AS(cmd_gen_data(a / "x", 1, 7, 32), ConfigError);
}

TEST_CASE("train with zero epochs probes epoch 0 only") {
  TempDir dir;
  RunConfig c = tiny_run(dir / "run");
  c.train.epochs = 0;
  cmd_train(c);
  const auto manifest = read_manifest(dir / "run/probes.txt");
  REQUIRE(manifest.size() == 1);
  CHECK(manifest[0].epoch == 0);
  CHECK(fs::exists(dir / "run" / kRunConfigFile));
  CHECK(fs::exists(dir / "run" / probe_name(0)));
  CHECK(load_run_config(dir / "run" / kRunConfigFile) == c);
}

TEST_CASE("train is deterministic and records parameter accounting") {
  TempDir dir;
  RunConfig a = tiny_run(dir / "a"), b = tiny_run(dir / "b");
  cmd_train(a);
  cmd_train(b);
  CHECK(slurp(dir / "a/train_log.csv") == slurp(dir / "b/train_log.csv"));
  for (std::int64_t e = 0; e <= 3; ++e) CHECK(slurp(dir / "a" / probe_name(e)) == slurp(dir / "b" / probe_name(e)));
  CHECK(slurp(dir / "a" / checkpoint_name(3)) == slurp(dir / "b" / checkpoint_name(3)));

  RunConfig l = tiny_run(dir / "l");
  l.train.lora_enabled = true;
  l.init_checkpoint = (dir / "a" / kPhase0Checkpoint).string();
  cmd_train(l);
  const std::string plain = slurp(dir / "a" / kRunConfigFile), lora = slurp(dir / "l" / kRunConfigFile);
  CHECK(comment_value(plain, "trainable_parameters") != comment_value(lora, "trainable_parameters"));
  CHECK(comment_value(plain, "frozen_tensors") == "0");
  CHECK(comment_value(lora, "frozen_tensors") == std::to_string(l.model.enc_layers * 3));
  const std::size_t d = l.model.embed_dim;
  CHECK(comment_value(lora, "frozen_parameters") == std::to_string(l.model.enc_layers * 3 * d * d));

  // Reusing the phase-0 checkpoint is the same as recomputing it.
  RunConfig l2 = l;
  l2.init_checkpoint.clear();
  l2.out_dir = (dir / "l2").string();
  cmd_train(l2);
  CHECK(slurp(dir / "l/train_log.csv") == slurp(dir / "l2/train_log.csv"));
}

TEST_CASE("train resume and config errors") {
  TempDir dir;
  RunConfig c = tiny_run(dir / "run");
  c.train.epochs = 2;
  cmd_train(c);
  RunConfig more = c;
  more.train.epochs = 3;
  more.resume = true;
  cmd_train(more);
  RunConfig full = tiny_run(dir / "full");
  cmd_train(full);
  CHECK(slurp(dir / "run/train_log.csv") == slurp(dir / "full/train_log.csv"));
  CHECK(slurp(dir / "run" / probe_name(3)) == slurp(dir / "full" / probe_name(3)));

  RunConfig other = more;
  other.model.embed_dim = 8;
  other.model.dec_dim = 8;
  CHECK_THROWS_AS(cmd_train(other), FormatError);

  RunConfig fresh = tiny_run(dir / "empty");
  fresh.resume = true;
  CHECK_THROWS_AS(cmd_train(fresh), DataError);
  fresh.resume = false;
  fresh.out_dir.clear();
  CHECK_THROWS_AS(cmd_train(fresh), ConfigError);
}

TEST_CASE("analyze, plot and compare") {
  TempDir dir;
  RunConfig c = tiny_run(dir / "run");
  c.train.epochs = 2;
  cmd_train(c);
  const MetricSeries s = cmd_analyze(dir / "run", c);
  const std::string csv = slurp(dir / "run" / kMetricsFile);
  const std::string svg = slurp(dir / "run/level_distance.svg");
  cmd_analyze(dir / "run", c);
  CHECK(slurp(dir / "run" / kMetricsFile) == csv);
  CHECK(read_csv(dir / "run" / kMetricsFile) == s);
  for (const auto& f : figure_specs()) CHECK(fs::exists(dir / "run" / (f.metric + ".svg")));

  SUBCASE("distance values match the brute-force oracle on the probe data") {
    const ProbeRecord rec = load_probe(dir / "run" / probe_name(2));
    const EmbeddingGrid g = embedding_grid(rec);
    for (std::size_t layer = 0; layer < g.layers; ++layer) {
      oracle::Nested z(g.contexts, std::vector(g.levels, std::vector(g.samples, std::vector<double>(g.dim))));
      for (std::size_t l = 0; l < g.contexts; ++l)
        for (std::size_t n = 0; n < g.levels; ++n)
          for (std::size_t k = 0; k < g.samples; ++k) {
            const auto v = g.at(layer, l, n, k);
            z[l][n][k].assign(v.begin(), v.end());
          }
      for (std::size_t n = 1; n < g.levels; ++n) {
        double lv = 0, rv = 0;
        for (std::size_t l = 0; l < g.contexts; ++l)
          for (std::size_t k = 0; k < g.samples; ++k) {
            lv += oracle::level(z, n, l, k);
            rv += oracle::residual(z, n, l, k);
          }
        const double cells = static_cast<double>(g.contexts * g.samples);
        const int il = static_cast<int>(layer);
        CHECK(std::fabs(*s.find("level_distance", il, g.noise_levels[n], 2) - lv / cells) < 1e-6);
        CHECK(std::fabs(*s.find("residual_distance", il, g.noise_levels[n], 2) - rv / cells) < 1e-6);
      }
    }
  }
  SUBCASE("plot re-renders the same figures") {
    fs::remove(dir / "run/level_distance.svg");
    cmd_plot(dir / "run", c.plot_noise);
    CHECK(slurp(dir / "run/level_distance.svg") == svg);
  }
  SUBCASE("compare a run with itself") {
    cmd_compare(dir / "run", dir / "run", dir / "cmp");
    const auto lines = split(slurp(dir / "cmp/comparison.csv"), '\n');
    CHECK(lines[0] == "metric,layer,noise,epoch,value_a,value_b");
    std::size_t rows = 0;
    for (std::size_t i = 1; i < lines.size(); ++i) {
      if (lines[i].empty()) continue;
      const auto f = split(lines[i], ',');
      REQUIRE(f.size() == 6);
      CHECK(f[4] == f[5]);
      ++rows;
    }
    CHECK(rows == s.rows.size());
    // Per-layer figures: two polylines for each of the encoder layers.
    CHECK(count(slurp(dir / "cmp/compare_global_alignment.svg"), "<polyline") == 2 * c.model.enc_layers);
    CHECK(fs::exists(dir / "cmp/comparison_summary.txt"));
  }
  SUBCASE("mismatched schedules name the missing epochs") {
    RunConfig d = tiny_run(dir / "other");
    d.train.epochs = 4;
    d.train.probe_every = 2;
    cmd_train(d);
    cmd_analyze(dir / "other", d);
    try {
      cmd_compare(dir / "run", dir / "other", dir / "cmp2");
      FAIL("expected a schedule mismatch");
    } catch (const ScheduleMismatchError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("other: 1") != std::string::npos);
      CHECK(msg.find("run: 4") != std::string::npos);
    }
  }
  SUBCASE("corrupt probe container is named") {
    std::string bytes = slurp(dir / "run" / probe_name(1));
    bytes[bytes.size() / 2] ^= 0x01;
    spit(dir / "run" / probe_name(1), bytes);
    try {
      cmd_analyze(dir / "run", c);
      FAIL("expected a checksum error");
    } catch (const ChecksumError& e) {
      CHECK(std::string(e.what()).find("probe_0001.fwvt") != std::string::npos);
    }
  }
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(ConfigError("x")) == 2);
  CHECK(exit_code_for(DataError("x")) == 3);
  CHECK(exit_code_for(ChecksumError("x")) == 3);
  CHECK(exit_code_for(ScheduleMismatchError("x")) == 3);
  CHECK(exit_code_for(NumericError("x")) == 4);
  CHECK(exit_code_for(std::runtime_error("x")) == 1);
}
