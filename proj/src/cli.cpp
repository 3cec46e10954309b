#include "fwvit/cli.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

#include "fwvit/checkpoint.hpp"
#include "fwvit/container.hpp"
#include "fwvit/contexts.hpp"
#include "fwvit/text.hpp"
#include "fwvit/vit.hpp"

namespace fwvit {

namespace fs = std::filesystem;

namespace {

// Typed text conversion for config values.
std::string to_text(std::size_t v) { return std::to_string(v); }
std::string to_text(std::int64_t v) { return std::to_string(v); }
std::string to_text(double v) { return format_number(v); }
std::string to_text(float v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
std::string to_text(bool v) { return v ? "true" : "false"; }
std::string to_text(const std::string& v) { return v; }
std::string to_text(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_number(v[i]);
  return s;
}

void from_text(std::string_view s, std::size_t& v) {
  const long long x = parse_integer(s);
  if (x < 0) throw std::invalid_argument("must be non-negative");
  v = static_cast<std::size_t>(x);
}
void from_text(std::string_view s, std::int64_t& v) { v = parse_integer(s); }
void from_text(std::string_view s, double& v) { v = parse_number(s); }
void from_text(std::string_view s, float& v) {
  s = trim(s);
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::invalid_argument("not a number");
}
void from_text(std::string_view s, bool& v) {
  s = trim(s);
  if (s == "true" || s == "1" || s == "yes") v = true;
  else if (s == "false" || s == "0" || s == "no") v = false;
  else throw std::invalid_argument("expected true or false");
}
void from_text(std::string_view s, std::string& v) { v = std::string(trim(s)); }
void from_text(std::string_view s, std::vector<double>& v) {
  v.clear();
  if (trim(s).empty()) return;
  for (const auto& part : split(trim(s), ',')) v.push_back(parse_number(part));
}
// Seeds are unsigned 64-bit.
struct Seed {
  std::uint64_t& v;
};
std::string to_text(Seed s) { return std::to_string(s.v); }
void from_text(std::string_view s, Seed out) {
  s = trim(s);
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out.v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::invalid_argument("not a seed");
}

struct Field {
  std::string key;
  std::function<std::string(RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

template <class Ref>
Field field(std::string key, Ref ref) {
  return {std::move(key), [ref](RunConfig& c) { return to_text(ref(c)); },
          [ref](RunConfig& c, std::string_view v) { from_text(v, ref(c)); }};
}

#define FW_FIELD(key, expr) field(key, [](RunConfig& c) -> decltype(auto) { return (expr); })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      FW_FIELD("image_size", c.model.image_size),
      FW_FIELD("channels", c.model.channels),
      FW_FIELD("patch_size", c.model.patch_size),
      FW_FIELD("embed_dim", c.model.embed_dim),
      FW_FIELD("enc_layers", c.model.enc_layers),
      FW_FIELD("enc_heads", c.model.enc_heads),
      FW_FIELD("dec_layers", c.model.dec_layers),
      FW_FIELD("dec_heads", c.model.dec_heads),
      FW_FIELD("dec_dim", c.model.dec_dim),
      FW_FIELD("mlp_ratio", c.model.mlp_ratio),
      FW_FIELD("cls_only_decode", c.model.cls_only_decode),
      FW_FIELD("epochs", c.train.epochs),
      FW_FIELD("batch_size", c.train.batch_size),
      FW_FIELD("lr", c.train.lr),
      FW_FIELD("weight_decay", c.train.weight_decay),
      FW_FIELD("lambda_l1", c.train.lambda_l1),
      FW_FIELD("lora", c.train.lora_enabled),
      FW_FIELD("lora_rank", c.train.lora_rank),
      FW_FIELD("lora_alpha", c.train.lora_alpha),
      FW_FIELD("probe_every", c.train.probe_every),
      FW_FIELD("checkpoint_every", c.train.checkpoint_every),
      field("seed", [](RunConfig& c) { return Seed{c.train.seed}; }),
      FW_FIELD("phase0_epochs", c.train.phase0_epochs),
      FW_FIELD("phase0_images", c.train.phase0_images),
      FW_FIELD("phase0_lr", c.train.phase0_lr),
      FW_FIELD("phase0_reset_decoder", c.train.phase0_reset_decoder),
      FW_FIELD("contexts", c.contexts),
      FW_FIELD("noise_levels", c.noise_levels),
      FW_FIELD("samples_per_context", c.samples_per_context),
      FW_FIELD("data_dir", c.data_dir),
      FW_FIELD("out_dir", c.out_dir),
      FW_FIELD("init_checkpoint", c.init_checkpoint),
      FW_FIELD("resume", c.resume),
      FW_FIELD("record_timing", c.record_timing),
      FW_FIELD("distance_norm", c.distance_norm),
      FW_FIELD("iou_threshold", c.iou_threshold),
      field("split_seed", [](RunConfig& c) { return Seed{c.split_seed}; }),
      FW_FIELD("plot_noise", c.plot_noise),
  };
  return table;
}

#undef FW_FIELD

const Field* find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

std::optional<fs::path> latest_checkpoint(const fs::path& run_dir) {
  const fs::path dir = run_dir / "checkpoints";
  if (!fs::is_directory(dir)) return std::nullopt;
  std::optional<fs::path> best;
  std::int64_t best_epoch = -1;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (!name.starts_with("epoch_") || !name.ends_with(".fwvt")) continue;
    try {
      const std::int64_t epoch = parse_integer(std::string_view(name).substr(6, name.size() - 11));
      if (epoch > best_epoch) {
        best_epoch = epoch;
        best = e.path();
      }
    } catch (const std::invalid_argument&) {
    }
  }
  return best;
}

ContextSet run_contexts(const RunConfig& c) {
  ContextSet ctx = c.data_dir.empty() ? gen_contexts(c.train.seed, c.contexts, c.model.image_size)
                                      : load_contexts(c.data_dir, c.contexts, c.model.image_size);
  ctx.noise_levels = c.noise_levels;
  ctx.samples_per_context = c.samples_per_context;
  ctx.seed = c.train.seed;
  return ctx;
}

// Rows at the plot noise when the metric has them, else the noisy mean.
PlotRequest figure_request(const MetricSeries& series, const FigureSpec& fig, double plot_noise) {
  PlotRequest req{.metric = fig.metric, .grouping = fig.grouping, .noise = -1.0, .layer = -1};
  if (fig.grouping == Grouping::layer) {
    const bool has = std::any_of(series.rows.begin(), series.rows.end(), [&](const MetricRow& r) {
      return r.metric == fig.metric && r.noise == plot_noise;
    });
    if (has) req.noise = plot_noise;
  }
  return req;
}

bool has_metric(const MetricSeries& s, const std::string& metric) {
  return std::any_of(s.rows.begin(), s.rows.end(), [&](const MetricRow& r) { return r.metric == metric; });
}

void render_figures(const MetricSeries& series, const fs::path& dir, double plot_noise) {
  for (const auto& fig : figure_specs()) {
    if (!has_metric(series, fig.metric)) continue;
    emit_svg_lineplot(series, figure_request(series, fig, plot_noise), dir / (fig.metric + ".svg"));
  }
}

std::string epoch_list(const std::vector<std::int64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
  return s.empty() ? "none" : s;
}

std::string condition_label(const fs::path& run_dir) {
  try {
    return load_run_config(run_dir / kRunConfigFile).train.lora_enabled ? "lora" : "no-lora";
  } catch (const std::exception&) {
    return "";
  }
}

// Mean of a metric over layers (or one layer) at one noise and epoch.
std::optional<double> summary_value(const MetricSeries& s, const std::string& metric, double noise,
                                    std::int64_t epoch, std::optional<int> layer) {
  double total = 0;
  std::size_t n = 0;
  for (const auto& r : s.rows) {
    if (r.metric != metric || r.noise != noise || r.epoch != epoch) continue;
    if (layer && r.layer != *layer) continue;
    total += r.value;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return total / static_cast<double>(n);
}

}  // namespace

void RunConfig::validate() const {
  model_spec().validate();
  train.validate();
  if (contexts < 2) throw ConfigError("contexts must be at least 2");
  if (noise_levels.empty()) throw ConfigError("noise_levels must not be empty");
  for (std::size_t i = 0; i < noise_levels.size(); ++i) {
    if (!(noise_levels[i] > 0.0 && noise_levels[i] <= 1.0)) throw ConfigError("noise_levels must lie in (0,1]");
    if (i > 0 && !(noise_levels[i] > noise_levels[i - 1])) throw ConfigError("noise_levels must be ascending");
  }
  if (samples_per_context < 2) throw ConfigError("samples_per_context must be at least 2");
  if (distance_norm != "raw" && distance_norm != "count") throw ConfigError("distance_norm must be raw or count");
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) throw ConfigError("iou_threshold must lie in (0,1)");
  if (resume && !init_checkpoint.empty()) throw ConfigError("resume and init_checkpoint are exclusive");
}

ModelSpec RunConfig::model_spec() const {
  ModelSpec s = model;
  s.lambda_l1 = train.lambda_l1;
  return s;
}

AnalysisOptions RunConfig::analysis_options() const {
  return {.norm = distance_norm == "count" ? DistanceNorm::count_mean : DistanceNorm::raw_sum,
          .iou_threshold = iou_threshold,
          .split_seed = split_seed,
          .decoder = true};
}

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

std::string get_config_value(const RunConfig& config, const std::string& key) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown config key: " + key);
  RunConfig copy = config;
  return f->get(copy);
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown config key: " + key);
  try {
    f->set(config, value);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("bad value for " + key + " ('" + value + "'): " + e.what());
  }
}

void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin) {
  std::vector<std::string> unknown;
  std::set<std::string> seen;
  std::size_t lineno = 0;
  for (const auto& raw : split(text, '\n')) {
    ++lineno;
    const auto hash = raw.find('#');
    const auto line = trim(std::string_view(raw).substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (!find_field(key)) {
      unknown.push_back(key);
      continue;
    }
    if (!seen.insert(key).second) throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key " + key);
    set_config_value(config, key, value);
  }
  if (!unknown.empty()) {
    std::string msg = origin + ": unknown config keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open config file " + path.string());
  const std::string text{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  RunConfig c;
  apply_config_text(c, text, path.string());
  return c;
}

std::string format_run_config(const RunConfig& config) {
  RunConfig copy = config;
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(copy) + "\n";
  return out;
}

ParameterCounts parameter_counts(const RunConfig& config) {
  const ModelState m = apply_condition(init_model(config.model_spec(), config.train.seed), config.train);
  return {m.parameter_count(), m.trainable_count(), m.frozen_count(), m.frozen_tensor_count()};
}

const std::vector<FigureSpec>& figure_specs() {
  static const std::vector<FigureSpec> specs = {
      {"level_distance", Grouping::layer},   {"residual_distance", Grouping::layer},
      {"decoder_accuracy", Grouping::layer}, {"global_alignment", Grouping::layer},
      {"fg_iou", Grouping::layer},           {"attention_stability", Grouping::layer},
      {"probe_loss", Grouping::noise},
  };
  return specs;
}

ContextSet cmd_gen_data(const fs::path& out_dir, std::size_t n, std::uint64_t seed, std::size_t image_size) {
  const ContextSet ctx = gen_contexts(seed, n, image_size);
  write_contexts(out_dir, ctx);
  return ctx;
}

TrainResult cmd_train(const RunConfig& config) {
  config.validate();
  if (config.out_dir.empty()) throw ConfigError("out_dir is required");
  const fs::path out = config.out_dir;
  fs::create_directories(out);

  const ParameterCounts counts = parameter_counts(config);
  write_file_atomic(out / kRunConfigFile, format_run_config(config) +
                                              "# total_parameters = " + std::to_string(counts.total) + "\n" +
                                              "# trainable_parameters = " + std::to_string(counts.trainable) + "\n" +
                                              "# frozen_parameters = " + std::to_string(counts.frozen) + "\n" +
                                              "# frozen_tensors = " + std::to_string(counts.frozen_tensors) + "\n");

  const ContextSet ctx = run_contexts(config);
  const ModelSpec spec = config.model_spec();
  const AdamWOptions opt = config.train.optimizer_options();

  Checkpoint start;
  if (config.resume) {
    const auto latest = latest_checkpoint(out);
    if (!latest) throw DataError("no checkpoint to resume from in " + (out / "checkpoints").string());
    start = load_checkpoint(*latest, spec, opt);
  } else {
    ModelState model;
    if (!config.init_checkpoint.empty()) {
      model = load_checkpoint(config.init_checkpoint, spec, opt).model;
    } else {
      model = init_model(spec, config.train.seed);
      if (config.train.phase0_epochs > 0) {
        const auto losses = pretrain(model, config.train);
        std::string log = "epoch,loss\n";
        for (std::size_t e = 0; e < losses.size(); ++e) log += std::to_string(e + 1) + "," + format_number(losses[e]) + "\n";
        write_file_atomic(out / "phase0_log.csv", log);
      }
      save_checkpoint(out / kPhase0Checkpoint, model, AdamW(opt), 0);
    }
    start = {apply_condition(std::move(model), config.train), AdamW(opt), 0};
  }
  return train_familiarity(config.train, ctx, std::move(start),
                           {.out_dir = out, .keep_probes = false, .record_timing = config.record_timing, .on_epoch = {}});
}

MetricSeries cmd_analyze(const fs::path& run_dir, const RunConfig& settings) {
  const auto manifest = read_manifest(run_dir / "probes.txt");
  if (manifest.empty()) throw DataError(run_dir.string() + ": no probes recorded");
  const AnalysisOptions options = settings.analysis_options();
  MetricSeries all;
  for (const auto& entry : manifest) all.append(analyze_probe(load_probe(run_dir / entry.path), options));
  all.sort();
  emit_csv(all, run_dir / kMetricsFile);
  render_figures(all, run_dir, settings.plot_noise);
  return all;
}

void cmd_compare(const fs::path& run_a, const fs::path& run_b, const fs::path& out_dir, double plot_noise) {
  const MetricSeries a = read_csv(run_a / kMetricsFile);
  const MetricSeries b = read_csv(run_b / kMetricsFile);
  const auto ea = a.epochs(), eb = b.epochs();
  if (ea != eb) {
    std::vector<std::int64_t> only_a, only_b;
    std::set_difference(ea.begin(), ea.end(), eb.begin(), eb.end(), std::back_inserter(only_a));
    std::set_difference(eb.begin(), eb.end(), ea.begin(), ea.end(), std::back_inserter(only_b));
    throw ScheduleMismatchError("probe schedules differ: epochs missing from " + run_b.string() + ": " +
                                epoch_list(only_a) + "; epochs missing from " + run_a.string() + ": " +
                                epoch_list(only_b));
  }
  fs::create_directories(out_dir);

  using Key = std::tuple<std::string, int, double, std::int64_t>;
  std::map<Key, std::pair<std::optional<double>, std::optional<double>>> joined;
  for (const auto& r : a.rows) joined[{r.metric, r.layer, r.noise, r.epoch}].first = r.value;
  for (const auto& r : b.rows) joined[{r.metric, r.layer, r.noise, r.epoch}].second = r.value;
  std::string csv = "metric,layer,noise,epoch,value_a,value_b\n";
  for (const auto& [k, v] : joined) {
    csv += std::get<0>(k) + "," + std::to_string(std::get<1>(k)) + "," + format_number(std::get<2>(k)) + "," +
           std::to_string(std::get<3>(k)) + "," + (v.first ? format_number(*v.first) : "") + "," +
           (v.second ? format_number(*v.second) : "") + "\n";
  }
  write_file_atomic(out_dir / "comparison.csv", csv);

  std::string la = condition_label(run_a), lb = condition_label(run_b);
  const bool conditions = !la.empty() && !lb.empty() && la != lb;
  if (!conditions) {
    la = "A";
    lb = "B";
  }
  for (const auto& fig : figure_specs()) {
    if (!has_metric(a, fig.metric) && !has_metric(b, fig.metric)) continue;
    emit_svg_overlay(a, "(" + la + ")", b, "(" + lb + ")", figure_request(a, fig, plot_noise),
                     out_dir / ("compare_" + fig.metric + ".svg"));
  }

  // Directional statements are recorded, not enforced.
  const std::int64_t last = ea.back();
  int top = -1;
  for (const auto& r : a.rows) top = std::max(top, r.layer);
  struct Claim {
    std::string metric, scope;
    std::optional<int> layer;
    bool lora_higher;
  };
  const std::vector<Claim> claims = {
      {"decoder_accuracy", "top layer", top, true},
      {"global_alignment", "mean over layers", std::nullopt, true},
      {"fg_iou", "mean over layers", std::nullopt, true},
      {"attention_stability", "mean over layers", std::nullopt, true},
      {"residual_distance", "mean over layers", std::nullopt, false},
      {"level_distance", "mean over layers", std::nullopt, false},
  };
  std::string summary = "# final epoch " + std::to_string(last) + ", noise " + format_number(plot_noise) +
                         "; a = " + run_a.string() + " (" + la + "), b = " + run_b.string() + " (" + lb + ")\n" +
                         "# expected direction is reported, not enforced\n" +
                         "metric,scope,value_a,value_b,expected,holds\n";
  for (const auto& c : claims) {
    const auto va = summary_value(a, c.metric, plot_noise, last, c.layer);
    const auto vb = summary_value(b, c.metric, plot_noise, last, c.layer);
    if (!va || !vb) continue;
    std::string expected = "n/a", holds = "n/a";
    if (conditions) {
      const double lora = la == "lora" ? *va : *vb, base = la == "lora" ? *vb : *va;
      expected = c.lora_higher ? "lora > no-lora" : "lora < no-lora";
      holds = (c.lora_higher ? lora > base : lora < base) ? "yes" : "no";
    }
    summary += c.metric + "," + c.scope + "," + format_number(*va) + "," + format_number(*vb) + "," + expected + "," +
               holds + "\n";
  }
  write_file_atomic(out_dir / "comparison_summary.txt", summary);
}

void cmd_plot(const fs::path& run_dir, double plot_noise) {
  const MetricSeries s = read_csv(run_dir / kMetricsFile);
  if (s.rows.empty()) throw DataError(run_dir.string() + ": metrics.csv has no rows");
  render_figures(s, run_dir, plot_noise);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const fs::filesystem_error*>(&e)) {
    return 3;
  }
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  return 1;
}

}  // namespace fwvit
