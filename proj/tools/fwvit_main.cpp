#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <iostream>
#include <map>

#include "fwvit/cli.hpp"

namespace fs = std::filesystem;
using namespace fwvit;

namespace {

std::string kebab(std::string key) {
  for (char& c : key) c = c == '_' ? '-' : c;
  return key;
}

// One string-valued flag per config key; applied over the config file.
struct ConfigFlags {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void add(CLI::App& app, const std::vector<std::string>& keys) {
    for (const auto& key : keys) options[key] = app.add_option("--" + kebab(key), values[key], key);
  }
  void apply(RunConfig& config) const {
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) set_config_value(config, key, values.at(key));
    }
  }
};

std::string default_run_dir(std::uint64_t seed) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", std::localtime(&now));
  return "runs/" + std::string(buf) + "-seed" + std::to_string(seed);
}

const std::vector<std::string> kAnalysisKeys{"distance_norm", "iou_threshold", "split_seed", "plot_noise"};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Familiarity training and representational analysis for a ViT autoencoder"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Write synthetic context images, masks and a manifest");
  std::string gen_out;
  std::size_t gen_n = 4, gen_size = 32;
  std::uint64_t gen_seed = 42;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n", gen_n, "number of contexts");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--image-size", gen_size, "image side length");

  auto* train = app.add_subcommand("train", "Phase-0 pretraining, then familiarity training with probes");
  std::string train_config;
  train->add_option("--config", train_config, "key = value config file (flags override it)");
  ConfigFlags train_flags;
  train_flags.add(*train, run_config_keys());

  auto* analyze = app.add_subcommand("analyze", "Compute metrics.csv and figures for a run");
  std::string analyze_dir;
  analyze->add_option("run_dir", analyze_dir, "run directory")->required();
  ConfigFlags analyze_flags;
  analyze_flags.add(*analyze, kAnalysisKeys);

  auto* compare = app.add_subcommand("compare", "Overlay the metrics of two analyzed runs");
  std::string cmp_a, cmp_b, cmp_out;
  double cmp_noise = 0.3;
  compare->add_option("run_a", cmp_a, "first run directory")->required();
  compare->add_option("run_b", cmp_b, "second run directory")->required();
  compare->add_option("--out", cmp_out, "output directory (default: <run_a>/compare)");
  compare->add_option("--plot-noise", cmp_noise, "noise level shown in per-layer figures");

  auto* plot = app.add_subcommand("plot", "Re-render figures from metrics.csv");
  std::string plot_dir;
  double plot_noise = 0.3;
  plot->add_option("run_dir", plot_dir, "run directory")->required();
  plot->add_option("--plot-noise", plot_noise, "noise level shown in per-layer figures");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) {
      const ContextSet ctx = cmd_gen_data(gen_out, gen_n, gen_seed, gen_size);
      std::cout << "wrote " << ctx.size() << " contexts to " << gen_out << "\n";
    } else if (train->parsed()) {
      RunConfig config;
      if (!train_config.empty()) config = load_run_config(train_config);
      train_flags.apply(config);
      if (config.out_dir.empty()) config.out_dir = default_run_dir(config.train.seed);
      const TrainResult r = cmd_train(config);
      std::cout << "trained to epoch " << config.train.epochs << " in " << config.out_dir;
      if (!r.epochs.empty()) std::cout << ", final loss " << r.epochs.back().loss;
      std::cout << "\n";
    } else if (analyze->parsed()) {
      RunConfig settings;
      if (fs::exists(fs::path(analyze_dir) / kRunConfigFile)) settings = load_run_config(fs::path(analyze_dir) / kRunConfigFile);
      analyze_flags.apply(settings);
      settings.validate();
      const MetricSeries s = cmd_analyze(analyze_dir, settings);
      std::cout << "wrote " << s.rows.size() << " metric rows to " << (fs::path(analyze_dir) / kMetricsFile).string()
                << "\n";
    } else if (compare->parsed()) {
      const fs::path out = cmp_out.empty() ? fs::path(cmp_a) / "compare" : fs::path(cmp_out);
      cmd_compare(cmp_a, cmp_b, out, cmp_noise);
      std::cout << "wrote comparison to " << out.string() << "\n";
    } else if (plot->parsed()) {
      cmd_plot(plot_dir, plot_noise);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
