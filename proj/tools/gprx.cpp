#include <CLI11.hpp>

#include <gprx/pipeline.hpp>
#include <gprx/synthetic.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

struct CommonOptions {
  std::optional<std::string> config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App *cmd, CommonOptions &opts) {
  cmd->add_option("--config", opts.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--set", opts.overrides, "override a config field, e.g. --set lime.samples=500")
      ->take_all()
      ->allow_extra_args(false);
  cmd->add_option("--seed", opts.seed, "override the global seed");
}

void print_stage(const gprx::json &manifest, const std::string &stage) {
  std::cout << stage << ": " << manifest.at("stages").at(stage).at("summary").dump() << "\n";
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Gaussian process regression with LIME explanations for drilling mud-loss data"};
  app.set_version_flag("--version", std::string(gprx::kVersion));
  app.require_subcommand(1);

  CommonOptions common;
  std::vector<std::pair<std::string, CLI::App *>> stages;
  const std::vector<std::pair<std::string, std::string>> stage_help = {
      {"preprocess", "deduplicate, filter, split, and standardize the input CSV"},
      {"fit", "fit the GP hyperparameters on the training split"},
      {"predict", "predict the test split with 95% intervals in raw units"},
      {"explain", "LIME explanations and global importance for the test split"},
      {"select", "select features, retrain, and compare against the full model"},
  };
  for (const auto &[name, help] : stage_help) {
    auto *cmd = app.add_subcommand(name, help);
    add_common(cmd, common);
    stages.emplace_back(name, cmd);
  }
  auto *run_all = app.add_subcommand("run-all", "run every stage in order with a fresh manifest");
  add_common(run_all, common);

  auto *show = app.add_subcommand("config", "print the effective configuration as JSON");
  add_common(show, common);

  auto *schema = app.add_subcommand("schema", "print the default column schema as JSON");

  gprx::DrillingSynthSpec synth_spec;
  std::string synth_out = "synthetic.csv";
  auto *synth = app.add_subcommand("synth", "write the bundled synthetic drilling dataset");
  synth->add_option("--out", synth_out, "output CSV path")->capture_default_str();
  synth->add_option("--rows", synth_spec.rows, "distinct rows")->capture_default_str();
  synth->add_option("--duplicates", synth_spec.duplicates, "rows repeated verbatim")
      ->capture_default_str();
  synth->add_option("--noise", synth_spec.noise_std, "target noise std (latent scale)")
      ->capture_default_str();
  synth->add_option("--seed", synth_spec.seed, "generator seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    return app.exit(e) == 0 ? 0 : kUsageError;
  }

  try {
    if (schema->parsed()) {
      std::cout << gprx::schema_to_json(gprx::marun_schema()).dump(2) << "\n";
      return 0;
    }
    if (synth->parsed()) {
      gprx::write_atomic(synth_out, gprx::dataset_csv(gprx::synthetic_drilling(synth_spec)));
      std::cout << "wrote " << synth_out << "\n";
      return 0;
    }
    const auto cfg = gprx::load_config(common.config, common.overrides, common.seed);
    if (show->parsed()) {
      std::cout << gprx::config_to_json(cfg).dump(2) << "\n";
      return 0;
    }
    if (run_all->parsed()) {
      const auto manifest = gprx::cmd_run_all(cfg);
      for (const auto &stage : gprx::stage_names()) {
        print_stage(manifest, stage);
      }
      std::cout << "manifest: " << (gprx::fs::path(cfg.output_dir) / "manifest.json").string()
                << "\n";
      return 0;
    }
    for (const auto &[name, cmd] : stages) {
      if (cmd->parsed()) {
        print_stage(gprx::run_stage(cfg, name), name);
        return 0;
      }
    }
  } catch (const gprx::ConfigError &e) {
    std::cerr << "gprx: configuration error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception &e) {
    std::cerr << "gprx: error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}
