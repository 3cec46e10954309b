#include "fwvit/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "fwvit/errors.hpp"
#include "fwvit/lora.hpp"
#include "fwvit/ops.hpp"
#include "fwvit/text.hpp"
#include "fwvit/vit.hpp"

namespace fwvit {

namespace fs = std::filesystem;

namespace {

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

// Keeps the header and the rows whose leading epoch is <= `epoch`.
void truncate_log(const fs::path& path, std::int64_t epoch, char sep) {
  std::ifstream in(path);
  if (!in) return;
  std::string line, kept;
  bool first = true;
  while (std::getline(in, line)) {
    if (first || line.empty() || line[0] == '#') {
      kept += line + "\n";
      first = false;
      continue;
    }
    const auto field = line.substr(0, line.find(sep));
    try {
      if (parse_integer(field) <= epoch) kept += line + "\n";
    } catch (const std::invalid_argument&) {
    }
  }
  in.close();
  write_file_atomic(path, kept);
}

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  out << line << '\n';
  if (!out) throw DataError("cannot write " + path.string());
}

Tensor stack_cls(const EncodeResult& enc) {
  const std::size_t layers = enc.cls.size(), dim = enc.cls.front().numel();
  Tensor out({layers, dim});
  for (std::size_t l = 0; l < layers; ++l) {
    std::copy(enc.cls[l].data().begin(), enc.cls[l].data().end(), out.data().begin() + l * dim);
  }
  return out;
}

std::string padded(std::int64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04lld", static_cast<long long>(v));
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (epochs < 0) fail("epochs must be non-negative");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(lambda_l1 >= 0.0f)) fail("lambda_l1 must be non-negative");
  if (lora_rank == 0) fail("lora_rank must be positive");
  if (!(lora_alpha > 0.0f)) fail("lora_alpha must be positive");
  if (probe_every <= 0) fail("probe_every must be positive");
  if (checkpoint_every <= 0) fail("checkpoint_every must be positive");
  if (phase0_epochs < 0) fail("phase0_epochs must be non-negative");
  if (phase0_epochs > 0 && phase0_images == 0) fail("phase0_images must be positive");
  if (!(phase0_lr > 0.0)) fail("phase0_lr must be positive");
}

const ProbeSample& ProbeRecord::at(std::size_t context, std::size_t noise_index, std::size_t sample) const {
  if (context >= contexts || noise_index >= noise_levels.size() || sample >= samples_per_context) {
    throw std::out_of_range("probe record index out of range");
  }
  return samples[(context * noise_levels.size() + noise_index) * samples_per_context + sample];
}

double ProbeRecord::mean_loss() const {
  double s = 0.0;
  for (const auto& p : samples) s += p.loss;
  return samples.empty() ? 0.0 : s / static_cast<double>(samples.size());
}

double ProbeRecord::mean_loss(std::size_t noise_index) const {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& p : samples) {
    if (p.noise_index != noise_index) continue;
    s += p.loss;
    ++n;
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

Tensor cls_attention_maps(const std::vector<std::vector<Tensor>>& attention, std::size_t grid) {
  const std::size_t layers = attention.size(), patches = grid * grid;
  Tensor out({layers, grid, grid});
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<double> row(patches, 0.0);
    for (const auto& head : attention[l]) {
      if (head.dim(1) != patches + 1) throw ShapeError("cls_attention_maps: attention does not match the grid");
      for (std::size_t j = 0; j < patches; ++j) row[j] += head.at(0, j + 1);
    }
    double total = 0.0;
    for (double v : row) total += v;
    for (std::size_t j = 0; j < patches; ++j) {
      out.data()[l * patches + j] = static_cast<float>(total > 0 ? row[j] / total : 1.0 / patches);
    }
  }
  return out;
}

ProbeRecord probe_epoch(const ModelState& model, const ContextSet& contexts, std::int64_t epoch,
                        float lambda_l1) {
  NoGradGuard no_grad;
  const ModelSpec& spec = model.spec();
  ProbeRecord rec;
  rec.epoch = epoch;
  rec.noise_levels.push_back(0.0);
  rec.noise_levels.insert(rec.noise_levels.end(), contexts.noise_levels.begin(), contexts.noise_levels.end());
  rec.contexts = contexts.size();
  rec.samples_per_context = contexts.samples_per_context;
  rec.masks = contexts.masks;
  rec.masks.resize(contexts.size());

  auto evaluate = [&](const Tensor& img, std::size_t c, std::size_t k, std::size_t s) {
    const EncodeResult enc = encode(img, model);
    ProbeSample p;
    p.context = c;
    p.noise_index = k;
    p.sample = s;
    p.cls = stack_cls(enc);
    p.attention = cls_attention_maps(enc.attention, spec.grid());
    p.loss = recon_loss(img, decode(enc.latent, model), lambda_l1).item();
    return p;
  };

  for (std::size_t c = 0; c < contexts.size(); ++c) {
    for (std::size_t k = 0; k < rec.noise_levels.size(); ++k) {
      if (k == 0) {
        // The clean sample is the same image for every sample index.
        ProbeSample clean = evaluate(contexts.images[c], c, 0, 0);
        rec.references.push_back(Tensor({spec.embed_dim}, {clean.cls.data().end() - spec.embed_dim,
                                                           clean.cls.data().end()}));
        for (std::size_t s = 0; s < contexts.samples_per_context; ++s) {
          clean.sample = s;
          rec.samples.push_back(clean);
        }
        continue;
      }
      for (std::size_t s = 0; s < contexts.samples_per_context; ++s) {
        rec.samples.push_back(evaluate(probe_sample(contexts, c, rec.noise_levels[k], s), c, k, s));
      }
    }
  }
  return rec;
}

std::vector<StoredTensor> probe_tensors(const ProbeRecord& r) {
  const std::size_t n = r.samples.size();
  if (n == 0) throw std::invalid_argument("probe record has no samples");
  const Shape cls_shape = r.samples[0].cls.shape(), attn_shape = r.samples[0].attention.shape();
  std::vector<float> index, cls, attn, loss;
  for (const auto& s : r.samples) {
    index.insert(index.end(), {float(s.context), float(s.noise_index), float(s.sample)});
    cls.insert(cls.end(), s.cls.data().begin(), s.cls.data().end());
    attn.insert(attn.end(), s.attention.data().begin(), s.attention.data().end());
    loss.push_back(s.loss);
  }
  std::vector<float> levels(r.noise_levels.begin(), r.noise_levels.end());
  std::vector<float> refs;
  for (const auto& t : r.references) refs.insert(refs.end(), t.data().begin(), t.data().end());

  Shape cshape{n};
  cshape.insert(cshape.end(), cls_shape.begin(), cls_shape.end());
  Shape ashape{n};
  ashape.insert(ashape.end(), attn_shape.begin(), attn_shape.end());
  std::vector<StoredTensor> out{
      {"probe.epoch", 0, Tensor::scalar(static_cast<float>(r.epoch))},
      {"probe.noise_levels", 0, Tensor({levels.size()}, levels)},
      {"probe.samples_per_context", 0, Tensor::scalar(static_cast<float>(r.samples_per_context))},
      {"probe.index", 0, Tensor({n, 3}, index)},
      {"probe.cls", 0, Tensor(cshape, cls)},
      {"probe.attention", 0, Tensor(ashape, attn)},
      {"probe.loss", 0, Tensor({n}, loss)},
      {"probe.references", 0, Tensor({r.references.size(), r.references[0].numel()}, refs)},
  };
  const bool masks = !r.masks.empty() && std::all_of(r.masks.begin(), r.masks.end(),
                                                      [](const Tensor& m) { return m.defined(); });
  if (masks) {
    std::vector<float> mv;
    for (const auto& m : r.masks) mv.insert(mv.end(), m.data().begin(), m.data().end());
    out.push_back({"probe.masks", 0, Tensor({r.masks.size(), r.masks[0].dim(0), r.masks[0].dim(1)}, mv)});
  }
  return out;
}

ProbeRecord probe_from_tensors(const std::vector<StoredTensor>& tensors, const std::string& origin) {
  std::map<std::string, const Tensor*> by;
  for (const auto& t : tensors) by[t.name] = &t.value;
  auto get = [&](const char* name) -> const Tensor& {
    auto it = by.find(name);
    if (it == by.end()) throw FormatError(origin + ": probe record lacks " + name);
    return *it->second;
  };
  ProbeRecord r;
  r.epoch = static_cast<std::int64_t>(get("probe.epoch").item());
  // Levels are stored as float; snap back to the 1e-6 grid they were declared on.
  for (float v : get("probe.noise_levels").data()) r.noise_levels.push_back(std::round(double(v) * 1e6) / 1e6);
  r.samples_per_context = static_cast<std::size_t>(get("probe.samples_per_context").item());
  const Tensor& index = get("probe.index");
  const Tensor& cls = get("probe.cls");
  const Tensor& attn = get("probe.attention");
  const Tensor& loss = get("probe.loss");
  const Tensor& refs = get("probe.references");
  const std::size_t n = index.dim(0);
  if (cls.rank() != 3 || attn.rank() != 4 || cls.dim(0) != n || attn.dim(0) != n || loss.numel() != n ||
      refs.rank() != 2) {
    throw FormatError(origin + ": probe tensors disagree in sample count");
  }
  r.contexts = refs.dim(0);
  if (n != r.contexts * r.noise_levels.size() * r.samples_per_context) {
    throw FormatError(origin + ": probe grid is incomplete");
  }
  const std::size_t cn = cls.dim(1) * cls.dim(2), an = attn.dim(1) * attn.dim(2) * attn.dim(3);
  for (std::size_t i = 0; i < n; ++i) {
    ProbeSample s;
    s.context = static_cast<std::size_t>(index.at(i, 0));
    s.noise_index = static_cast<std::size_t>(index.at(i, 1));
    s.sample = static_cast<std::size_t>(index.at(i, 2));
    s.cls = Tensor({cls.dim(1), cls.dim(2)}, {cls.data().begin() + i * cn, cls.data().begin() + (i + 1) * cn});
    s.attention = Tensor({attn.dim(1), attn.dim(2), attn.dim(3)},
                         {attn.data().begin() + i * an, attn.data().begin() + (i + 1) * an});
    s.loss = loss.at(i);
    r.samples.push_back(std::move(s));
  }
  const std::size_t d = refs.dim(1);
  for (std::size_t c = 0; c < r.contexts; ++c) {
    r.references.push_back(Tensor({d}, {refs.data().begin() + c * d, refs.data().begin() + (c + 1) * d}));
  }
  r.masks.resize(r.contexts);
  if (auto it = by.find("probe.masks"); it != by.end()) {
    const Tensor& m = *it->second;
    const std::size_t hw = m.dim(1) * m.dim(2);
    for (std::size_t c = 0; c < r.contexts; ++c) {
      r.masks[c] = Tensor({m.dim(1), m.dim(2)}, {m.data().begin() + c * hw, m.data().begin() + (c + 1) * hw});
    }
  }
  return r;
}

void save_probe(const fs::path& path, const ProbeRecord& record) { write_container(path, probe_tensors(record)); }

ProbeRecord load_probe(const fs::path& path) { return probe_from_tensors(read_container(path), path.string()); }

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open run manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty() || line[0] == '#') continue;
    std::istringstream is(line);
    std::string epoch, p, mean, clean;
    if (!(is >> epoch >> p >> mean >> clean)) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed manifest line");
    }
    try {
      out.push_back({parse_integer(epoch), p, parse_number(mean), parse_number(clean)});
    } catch (const std::invalid_argument& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

Tensor batch_loss(const std::vector<Tensor>& images, const ModelState& model, float lambda_l1) {
  if (images.empty()) throw std::invalid_argument("batch_loss: empty batch");
  Tensor total;
  for (const auto& img : images) {
    Tensor l = recon_loss(img, decode(encode(img, model).latent, model), lambda_l1);
    total = total.defined() ? ops::add(total, l) : l;
  }
  return images.size() == 1 ? total : ops::scale(total, 1.0f / static_cast<float>(images.size()));
}

std::vector<double> pretrain(ModelState& model, const TrainConfig& config) {
  config.validate();
  const auto images = gen_distractors(config.seed, config.phase0_images, model.spec().image_size);
  AdamW opt({.lr = config.phase0_lr, .weight_decay = config.weight_decay});
  auto params = model.trainable_tensors();
  const std::uint64_t stream = derive_seed(config.seed, "phase0");
  std::vector<double> losses;
  for (std::int64_t e = 1; e <= config.phase0_epochs; ++e) {
    const auto order = shuffled(images.size(), derive_seed(stream, static_cast<std::uint64_t>(e)));
    double sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      std::vector<Tensor> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + config.batch_size); ++i) batch.push_back(images[order[i]]);
      model.zero_grad();
      Tensor loss = batch_loss(batch, model, config.lambda_l1);
      if (!std::isfinite(loss.item())) {
        throw NumericError("non-finite loss in phase-0 epoch " + std::to_string(e));
      }
      sum += static_cast<double>(loss.item()) * static_cast<double>(batch.size());
      loss.backward();
      opt.step(params);
    }
    losses.push_back(sum / static_cast<double>(images.size()));
  }
  if (config.phase0_reset_decoder) reset_decoder(model, derive_seed(config.seed, "decoder"));
  return losses;
}

void reset_decoder(ModelState& model, std::uint64_t seed) {
  const ModelState fresh = init_model(model.spec(), seed);
  for (const auto& name : model.names()) {
    if (name.rfind("dec.", 0) == 0) model.tensor(name).copy_from(fresh.tensor(name));
  }
}

ModelState apply_condition(ModelState model, const TrainConfig& config) {
  if (config.lora_enabled && model.adapters().empty()) {
    return lora_wrap(std::move(model), {.rank = config.lora_rank,
                                        .alpha = config.lora_alpha,
                                        .seed = derive_seed(config.seed, "lora"),
                                        .targets = {}});
  }
  if (!config.lora_enabled && !model.adapters().empty()) {
    throw ConfigError("model carries adapters but lora_enabled is false");
  }
  return model;
}

ModelState prepare_model(const ModelSpec& spec, const TrainConfig& config, std::vector<double>* phase0_losses) {
  config.validate();
  ModelSpec s = spec;
  s.lambda_l1 = config.lambda_l1;
  ModelState model = init_model(s, config.seed);
  if (config.phase0_epochs > 0) {
    auto losses = pretrain(model, config);
    if (phase0_losses) *phase0_losses = std::move(losses);
  }
  return apply_condition(std::move(model), config);
}

std::string checkpoint_name(std::int64_t epoch) { return "checkpoints/epoch_" + padded(epoch) + ".fwvt"; }
std::string probe_name(std::int64_t epoch) { return "probes/probe_" + padded(epoch) + ".fwvt"; }

TrainResult train_familiarity(const TrainConfig& config, const ContextSet& contexts, Checkpoint start,
                              const TrainOptions& options) {
  config.validate();
  contexts.validate();
  const ModelSpec& spec = start.model.spec();
  const Shape expected{spec.channels, spec.image_size, spec.image_size};
  if (contexts.images[0].shape() != expected) {
    throw DataError("context images are " + shape_str(contexts.images[0].shape()) + " but the model expects " +
                    shape_str(expected));
  }
  if (start.epoch < 0 || start.epoch > config.epochs) {
    throw ConfigError("start epoch " + std::to_string(start.epoch) + " is outside [0, epochs]");
  }

  TrainResult result{std::move(start.model), std::move(start.optimizer), {}, {}, {}};
  ModelState& model = result.model;
  AdamW& opt = result.optimizer;
  if (opt.steps() == 0) {
    opt = AdamW(config.optimizer_options());
  } else {
    opt.set_lr(config.lr);
  }
  auto params = model.trainable_tensors();

  const fs::path* out = options.out_dir ? &*options.out_dir : nullptr;
  if (out) {
    fs::create_directories(*out / "checkpoints");
    fs::create_directories(*out / "probes");
  }
  auto log = [&](const char* name) { return *out / name; };

  auto do_probe = [&](std::int64_t epoch) {
    ProbeRecord rec = probe_epoch(model, contexts, epoch, config.lambda_l1);
    if (out) {
      save_probe(*out / probe_name(epoch), rec);
      append_line(log("probes.txt"), std::to_string(epoch) + " " + probe_name(epoch) + " " +
                                         format_number(rec.mean_loss()) + " " + format_number(rec.mean_loss(0)));
    }
    if (options.keep_probes) result.probes.push_back(std::move(rec));
  };
  auto do_checkpoint = [&](std::int64_t epoch) {
    if (out) save_checkpoint(*out / checkpoint_name(epoch), model, opt, epoch);
  };

  if (start.epoch == 0) {
    if (out) {
      write_file_atomic(log("train_log.csv"), "epoch,loss\n");
      write_file_atomic(log("probes.txt"), "# epoch path mean_loss clean_loss\n");
      if (options.record_timing) write_file_atomic(log("timing.csv"), "epoch,seconds\n");
    }
    do_probe(0);
    do_checkpoint(0);
  } else if (out) {
    truncate_log(log("train_log.csv"), start.epoch, ',');
    truncate_log(log("probes.txt"), start.epoch, ' ');
    if (options.record_timing) truncate_log(log("timing.csv"), start.epoch, ',');
  }

  const std::uint64_t stream = derive_seed(config.seed, "shuffle");
  for (std::int64_t e = start.epoch + 1; e <= config.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = shuffled(contexts.size(), derive_seed(stream, static_cast<std::uint64_t>(e)));
    double sum = 0.0;
    std::size_t step = 0;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size, ++step) {
      std::vector<Tensor> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + config.batch_size); ++i) {
        // Training inputs are always the clean context images.
        batch.push_back(contexts.images[order[i]]);
        ++result.stats.training_inputs;
      }
      model.zero_grad();
      Tensor loss;
      try {
        loss = batch_loss(batch, model, config.lambda_l1);
      } catch (const NumericError& err) {
        throw NumericError("epoch " + std::to_string(e) + " step " + std::to_string(step) + ": " + err.what());
      }
      if (!std::isfinite(loss.item())) {
        throw NumericError("non-finite loss at epoch " + std::to_string(e) + " step " + std::to_string(step));
      }
      sum += static_cast<double>(loss.item()) * static_cast<double>(batch.size());
      loss.backward();
      opt.step(params);
    }
    EpochStats stats{e, sum / static_cast<double>(contexts.size()),
                     std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    if (out) {
      append_line(log("train_log.csv"), std::to_string(e) + "," + format_number(stats.loss));
      if (options.record_timing) {
        append_line(log("timing.csv"), std::to_string(e) + "," + format_number(stats.seconds));
      }
    }
    result.epochs.push_back(stats);
    if (options.on_epoch) options.on_epoch(stats);
    if (e % config.probe_every == 0 || e == config.epochs) do_probe(e);
    if (e % config.checkpoint_every == 0 || e == config.epochs) do_checkpoint(e);
  }
  return result;
}

}  // namespace fwvit
