#include <doctest.h>

#include <cmath>
#include <map>
#include <set>
#include <tuple>

#include "fwvit/errors.hpp"
#include "fwvit/harness.hpp"
#include "fwvit/lora.hpp"
#include "fwvit/vit.hpp"
#include "support/tempdir.hpp"

using namespace fwvit;
using fwvit::testing::slurp;
using fwvit::testing::TempDir;

namespace {

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

TrainConfig tiny_config() {
  TrainConfig c;
  c.epochs = 6;
  c.lr = 1e-3;
  c.phase0_epochs = 0;
  c.checkpoint_every = 2;
  c.probe_every = 2;
  return c;
}

ContextSet tiny_contexts() {
  ContextSet s = gen_contexts(42, 4, 16);
  s.samples_per_context = 3;
  return s;
}

Checkpoint fresh(const ModelState& m, const TrainConfig& c) { return {m, AdamW(c.optimizer_options()), 0}; }

bool same_probe(const ProbeRecord& a, const ProbeRecord& b) {
  if (a.samples.size() != b.samples.size() || a.epoch != b.epoch) return false;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    const auto &x = a.samples[i], &y = b.samples[i];
    if (x.context != y.context || x.noise_index != y.noise_index || x.sample != y.sample || x.loss != y.loss ||
        !bit_equal(x.cls, y.cls) || !bit_equal(x.attention, y.attention)) {
      return false;
    }
  }
  for (std::size_t c = 0; c < a.references.size(); ++c)
    if (!bit_equal(a.references[c], b.references[c])) return false;
  return true;
}

}  // namespace

TEST_CASE("probe grid shape, determinism and self-consistency") {
  const ModelSpec spec;
  const ModelState m = init_model(spec, 42);
  const ContextSet ctx = gen_contexts(42, 4, 32);
  const ProbeRecord a = probe_epoch(m, ctx, 3, 0.1f);
  CHECK(a.samples.size() == 4 * 4 * 10);
  CHECK(a.noise_levels == std::vector<double>{0.0, 0.1, 0.3, 0.5});
  CHECK(a.layers() == spec.enc_layers);

  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> seen;
  for (const auto& s : a.samples) {
    CHECK(seen.emplace(s.context, s.noise_index, s.sample).second);
    CHECK(s.cls.shape() == Shape{6, 64});
    REQUIRE(s.attention.shape() == Shape{6, 4, 4});
    for (std::size_t l = 0; l < 6; ++l) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 16; ++j) {
        const float v = s.attention.data()[l * 16 + j];
        CHECK(v >= 0.0f);
        sum += v;
      }
      CHECK(std::fabs(sum - 1.0) <= 1e-4);
    }
    CHECK(std::isfinite(s.loss));
  }
  CHECK(seen.size() == 160);

  for (std::size_t c = 0; c < 4; ++c) {
    const ProbeSample& clean = a.at(c, 0, 0);
    for (std::size_t d = 0; d < 64; ++d) CHECK(clean.cls.at(5, d) == a.references[c].at(d));
  }

  const ProbeRecord b = probe_epoch(m, ctx, 3, 0.1f);
  CHECK(same_probe(a, b));
}

TEST_CASE("head-averaged CLS attention drops the CLS entry and renormalizes") {
  // 1 layer, 2 heads, 2x2 grid -> 5 tokens
  Tensor h0({5, 5}, 0.2f), h1({5, 5}, 0.0f);
  const float row1[] = {0.6f, 0.1f, 0.1f, 0.1f, 0.1f};
  for (std::size_t j = 0; j < 5; ++j) h1.data()[j] = row1[j];
  const Tensor m = cls_attention_maps({{h0, h1}}, 2);
  // head mean over patches: (0.2+0.1)/2 = 0.15 each, renormalized to 0.25
  for (float v : m.data()) CHECK(v == doctest::Approx(0.25));

  Tensor h2({5, 5}, 0.0f);
  const float row2[] = {0.5f, 0.3f, 0.1f, 0.1f, 0.0f};
  for (std::size_t j = 0; j < 5; ++j) h2.data()[j] = row2[j];
  const Tensor n = cls_attention_maps({{h2}}, 2);
  CHECK(n.data()[0] == doctest::Approx(0.6));
  CHECK(n.data()[3] == doctest::Approx(0.0));
}

TEST_CASE("probe records round trip through the container") {
  TempDir dir;
  const ModelState m = init_model(tiny_spec(), 1);
  const ContextSet ctx = tiny_contexts();
  const ProbeRecord r = probe_epoch(m, ctx, 7, 0.1f);
  save_probe(dir / "p.fwvt", r);
  const ProbeRecord back = load_probe(dir / "p.fwvt");
  CHECK(same_probe(r, back));
  CHECK(back.noise_levels == r.noise_levels);
  CHECK(back.samples_per_context == 3);
  REQUIRE(back.masks.size() == 4);
  for (std::size_t c = 0; c < 4; ++c) CHECK(bit_equal(back.masks[c], ctx.masks[c]));
}

TEST_CASE("epochs = 0 probes once and leaves the model untouched") {
  TempDir dir;
  TrainConfig c = tiny_config();
  c.epochs = 0;
  const ModelState m = init_model(tiny_spec(), 5);
  const TrainResult r = train_familiarity(c, tiny_contexts(), fresh(m, c), {.out_dir = dir.path()});
  REQUIRE(r.probes.size() == 1);
  CHECK(r.probes[0].epoch == 0);
  CHECK(r.epochs.empty());
  for (const auto& n : m.names()) CHECK(bit_equal(r.model.tensor(n), m.tensor(n)));
  CHECK(read_manifest(dir / "probes.txt").size() == 1);
  CHECK(slurp(dir / "train_log.csv") == "epoch,loss\n");
  CHECK(std::filesystem::exists(dir / checkpoint_name(0)));
}

TEST_CASE("training uses only clean images and writes the run layout") {
  TempDir dir;
  const TrainConfig c = tiny_config();
  const ContextSet ctx = tiny_contexts();
  const TrainResult r = train_familiarity(c, ctx, fresh(init_model(tiny_spec(), 5), c), {.out_dir = dir.path()});
  CHECK(r.stats.noisy_training_inputs == 0);
  CHECK(r.stats.training_inputs == 4 * 6);
  REQUIRE(r.epochs.size() == 6);
  CHECK(r.epochs.back().loss < r.epochs.front().loss);
  // probes at 0, 2, 4, 6; checkpoints at the same epochs
  std::vector<std::int64_t> probe_epochs;
  for (const auto& p : r.probes) probe_epochs.push_back(p.epoch);
  CHECK(probe_epochs == std::vector<std::int64_t>{0, 2, 4, 6});
  const auto manifest = read_manifest(dir / "probes.txt");
  REQUIRE(manifest.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(manifest[i].epoch == probe_epochs[i]);
    CHECK(manifest[i].mean_loss == doctest::Approx(r.probes[i].mean_loss()));
    CHECK(same_probe(load_probe(dir / manifest[i].path), r.probes[i]));
    CHECK(std::filesystem::exists(dir / checkpoint_name(probe_epochs[i])));
  }
  const std::string log = slurp(dir / "train_log.csv");
  CHECK(log.rfind("epoch,loss\n1,", 0) == 0);
  CHECK(std::count(log.begin(), log.end(), '\n') == 7);
  CHECK_FALSE(std::filesystem::exists(dir / "timing.csv"));
}

TEST_CASE("partial freezing keeps Q/K/V base weights bit-identical across the run") {
  TempDir dir;
  TrainConfig c = tiny_config();
  c.lora_enabled = true;
  c.lora_rank = 2;
  c.lora_alpha = 2;
  const ModelState m = apply_condition(init_model(tiny_spec(), 5), c);
  REQUIRE(m.frozen_tensor_count() == 6);
  train_familiarity(c, tiny_contexts(), fresh(m, c), {.out_dir = dir.path()});
  const Checkpoint first = load_checkpoint(dir / checkpoint_name(0));
  const Checkpoint last = load_checkpoint(dir / checkpoint_name(6));
  std::size_t frozen = 0, changed = 0;
  for (const auto& n : first.model.names()) {
    if (!first.model.trainable(n)) {
      ++frozen;
      CHECK(bit_equal(first.model.tensor(n), last.model.tensor(n)));
      CHECK_FALSE(last.model.trainable(n));
    } else {
      changed += !bit_equal(first.model.tensor(n), last.model.tensor(n));
    }
  }
  CHECK(frozen == 6);
  CHECK(changed > 0);
  for (const auto& [t, a] : last.model.adapters()) {
    CHECK_FALSE(bit_equal(a.b, first.model.adapters().at(t).b));
  }
}

TEST_CASE("runs are bit-reproducible and resumable") {
  TempDir a, b;
  const TrainConfig c = tiny_config();
  const ContextSet ctx = tiny_contexts();
  const ModelState m = init_model(tiny_spec(), 5);
  const TrainResult full = train_familiarity(c, ctx, fresh(m, c), {.out_dir = a.path()});

  TrainConfig partial = c;
  partial.epochs = 3;
  train_familiarity(partial, ctx, fresh(m, c), {.out_dir = b.path()});
  // resume from the epoch-2 checkpoint, past the interrupted epoch 3
  const Checkpoint ck = load_checkpoint(b / checkpoint_name(2), std::nullopt, c.optimizer_options());
  const TrainResult resumed = train_familiarity(c, ctx, ck, {.out_dir = b.path()});
  for (const auto& n : full.model.names()) CHECK(bit_equal(full.model.tensor(n), resumed.model.tensor(n)));
  CHECK(slurp(a / "train_log.csv") == slurp(b / "train_log.csv"));
  CHECK(slurp(a / "probes.txt") == slurp(b / "probes.txt"));
  for (std::int64_t e : {0, 2, 4, 6}) {
    CHECK(slurp(a / probe_name(e)) == slurp(b / probe_name(e)));
    CHECK(slurp(a / checkpoint_name(e)) == slurp(b / checkpoint_name(e)));
  }
}

TEST_CASE("non-finite values abort with epoch and step") {
  TrainConfig c = tiny_config();
  ModelState m = init_model(tiny_spec(), 5);
  m.tensor("dec.head.bias").data()[0] = std::nanf("");
  CHECK_THROWS_WITH_AS(train_familiarity(c, tiny_contexts(), fresh(m, c), {.keep_probes = false}),
                       doctest::Contains("epoch"), NumericError);
  try {
    ModelState bad = init_model(tiny_spec(), 5);
    bad.tensor("enc.1.mlp.fc2.bias").data()[0] = INFINITY;
    train_familiarity(c, tiny_contexts(), fresh(bad, c));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("encoder layer 1") != std::string::npos);
  }
}

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  for (auto mutate : std::vector<std::function<void(TrainConfig&)>>{
           [](TrainConfig& x) { x.epochs = -1; }, [](TrainConfig& x) { x.batch_size = 0; },
           [](TrainConfig& x) { x.lr = 0; }, [](TrainConfig& x) { x.lambda_l1 = -0.1f; },
           [](TrainConfig& x) { x.probe_every = 0; }, [](TrainConfig& x) { x.lora_rank = 0; }}) {
    TrainConfig bad;
    mutate(bad);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
  const ModelState m = init_model(tiny_spec(), 1);
  CHECK_THROWS_AS(train_familiarity(c, gen_contexts(1, 4, 32), fresh(m, c)), DataError);
}

TEST_CASE("phase-0 pretraining reduces reconstruction loss") {
  TrainConfig c = tiny_config();
  c.phase0_epochs = 5;
  c.phase0_images = 8;
  std::vector<double> losses;
  const ModelState m = prepare_model(tiny_spec(), c, &losses);
  REQUIRE(losses.size() == 5);
  CHECK(losses.back() < losses.front());
  CHECK(m.adapters().empty());
  c.lora_enabled = true;
  const ModelState w = prepare_model(tiny_spec(), c);
  CHECK(w.adapters().size() == 6);
  for (const auto& n : m.names()) CHECK(bit_equal(m.tensor(n), w.tensor(n)));
}

TEST_CASE("phase-0 keeps the trained encoder and hands over a fresh decoder") {
  TrainConfig c = tiny_config();
  c.phase0_epochs = 3;
  c.phase0_images = 8;
  ModelSpec s = tiny_spec();
  s.lambda_l1 = c.lambda_l1;
  const ModelState init = init_model(s, c.seed);
  const ModelState fresh = init_model(s, derive_seed(c.seed, "decoder"));
  const ModelState m = prepare_model(tiny_spec(), c);
  c.phase0_reset_decoder = false;
  const ModelState kept = prepare_model(tiny_spec(), c);
  std::size_t dec = 0;
  for (const auto& n : m.names()) {
    const bool is_dec = n.rfind("dec.", 0) == 0;
    INFO(n);
    if (is_dec) {
      ++dec;
      CHECK(bit_equal(m.tensor(n), fresh.tensor(n)));
    } else {
      CHECK(bit_equal(m.tensor(n), kept.tensor(n)));
    }
  }
  CHECK(dec > 0);
  CHECK_FALSE(bit_equal(m.tensor("patch_embed.weight"), init.tensor("patch_embed.weight")));
  CHECK_FALSE(bit_equal(kept.tensor("dec.embed.weight"), fresh.tensor("dec.embed.weight")));
}
