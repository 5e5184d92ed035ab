// uqseq: train and evaluate sequence models with uncertainty bands.

#include "uqseq/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::string out;
  std::string checkpoint;
  bool drift = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "experiment configuration (JSON)");
  cmd->add_option("--seed", f.seed, "random seed");
  cmd->add_option("--variant", f.variant, "jms, jma, wbms, bbms, jmv, doms or constant");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--checkpoint", f.checkpoint, "model checkpoint path");
  cmd->add_flag("--drift", f.drift, "also evaluate with no observed prefix");
  cmd->add_flag("--quiet", f.quiet, "suppress progress output");
}

uqseq::ExperimentConfig resolve(const CommonFlags& f) {
  auto c = f.config.empty() ? uqseq::ExperimentConfig{} : uqseq::load_experiment_config(f.config);
  if (f.seed) c.seed = *f.seed;
  if (!f.variant.empty()) c.variant = f.variant;
  if (!f.out.empty()) c.out = f.out;
  if (f.drift) c.drift = true;
  c.quiet = f.quiet;
  return c;
}

std::optional<std::string> checkpoint_of(const CommonFlags& f) {
  if (f.checkpoint.empty()) return std::nullopt;
  return f.checkpoint;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uqseq: sequence regression with meta-model uncertainty bands"};
  app.require_subcommand(1);
  CommonFlags flags;

  auto* prepare = app.add_subcommand("prepare", "write standardized dataset splits");
  auto* train = app.add_subcommand("train", "train one variant and write its checkpoint");
  auto* evaluate = app.add_subcommand("evaluate", "predict, calibrate and report gains over a constant band");
  auto* calibrate = app.add_subcommand("calibrate", "scales for the configured missrate targets");
  for (auto* cmd : {prepare, train, evaluate, calibrate}) add_common(cmd, flags);

  auto* plot = app.add_subcommand("plot", "SVG plots from a prediction file");
  std::string plot_input;
  long plot_begin = 0;
  long plot_end = 96;
  std::string plot_title;
  plot->add_option("--input", plot_input, "predictions_*.jsonl file")->required();
  plot->add_option("--begin", plot_begin, "first column");
  plot->add_option("--end", plot_end, "one past the last column");
  plot->add_option("--title", plot_title, "plot title");
  add_common(plot, flags);

  auto* permtest = app.add_subcommand("permtest", "paired permutation test between two prediction files");
  std::string perm_a;
  std::string perm_b;
  double perm_target = 0.1;
  int perm_resamples = 10000;
  permtest->add_option("--a", perm_a, "first prediction file")->required();
  permtest->add_option("--b", perm_b, "second prediction file")->required();
  permtest->add_option("--target", perm_target, "missrate operating point");
  permtest->add_option("--resamples", perm_resamples, "number of sign flips");
  add_common(permtest, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const auto cfg = resolve(flags);
    if (prepare->parsed()) {
      uqseq::cmd_prepare(cfg);
    } else if (train->parsed()) {
      uqseq::cmd_train(cfg, checkpoint_of(flags));
    } else if (evaluate->parsed()) {
      const auto report = uqseq::cmd_evaluate(cfg, checkpoint_of(flags));
      std::cout << report.to_csv();
    } else if (calibrate->parsed()) {
      std::cout << uqseq::cmd_calibrate(cfg, checkpoint_of(flags)).dump(2) << '\n';
    } else if (plot->parsed()) {
      const auto out = flags.out.empty() ? std::filesystem::path(cfg.out) / "plots" : std::filesystem::path(flags.out);
      for (const auto& p : uqseq::cmd_plot(plot_input, out, plot_begin, plot_end, plot_title)) {
        std::cout << p.string() << '\n';
      }
    } else if (permtest->parsed()) {
      std::cout << uqseq::cmd_permtest(perm_a, perm_b, perm_target, perm_resamples, cfg.seed).to_json().dump(2)
                << '\n';
    }
  } catch (const uqseq::Error& e) {
    std::cerr << "error [" << uqseq::to_string(e.code()) << "]: " << e.what() << '\n';
    return uqseq::exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
