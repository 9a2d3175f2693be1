#include <exception>
#include <iostream>

#include "CLI11.hpp"
#include "tap/errors.hpp"
#include "tapcli/commands.hpp"

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumerical = 4 };

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tap: test-time low-rank adaptation for few-shot segmentation"};
  app.require_subcommand(1);
  tapcli::GlobalOptions opts;
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key = value config file");
    sub->add_option("--seed", seed, "override the master seed");
    sub->add_option("--out", out, "override the output directory");
  };
  auto* gen = app.add_subcommand("gen-data", "render the synthetic dataset and episode manifests");
  add_common(gen);
  gen->add_flag("--force", opts.force, "overwrite an existing dataset");
  auto* train = app.add_subcommand("meta-train", "episodic meta-training, one checkpoint per fold");
  add_common(train);
  auto* eval = app.add_subcommand("eval", "evaluate vanilla / decoder_ft / tap over folds");
  add_common(eval);
  auto* sweep = app.add_subcommand("sweep", "rank x iteration grid of query mIoU");
  add_common(sweep);
  auto* oneshot = app.add_subcommand("oneshot-study", "1-shot (replicated) vs 2-shot iteration curves");
  add_common(oneshot);
  auto* keys = app.add_subcommand("keys", "list every config key with its default");

  CLI11_PARSE(app, argc, argv);

  try {
    if (keys->parsed()) {
      const tapcli::RunConfig defaults;
      const auto values = defaults.resolved();
      const auto& ref = tapcli::key_reference();
      for (std::size_t i = 0; i < ref.size(); ++i) {
        std::cout << ref[i].key << " = " << values[i].second << "    # " << ref[i].description << "\n";
      }
      return kOk;
    }
    for (auto* sub : {gen, train, eval, sweep, oneshot}) {
      if (!sub->parsed()) continue;
      if (sub->count("--config")) opts.config = config_path;
      if (sub->count("--seed")) opts.seed = seed;
      if (sub->count("--out")) opts.out = out;
    }
    const auto cfg = tapcli::resolve_config(opts);
    for (const auto& w : cfg.warnings()) std::cerr << "warning: " << w << "\n";
    if (gen->parsed()) tapcli::cmd_gen_data(cfg, opts.force, std::cout);
    if (train->parsed()) tapcli::cmd_meta_train(cfg, std::cout);
    if (eval->parsed()) tapcli::cmd_eval(cfg, std::cout);
    if (sweep->parsed()) tapcli::cmd_sweep(cfg, std::cout);
    if (oneshot->parsed()) tapcli::cmd_oneshot_study(cfg, std::cout);
    return kOk;
  } catch (const tap::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const tap::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const tap::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
