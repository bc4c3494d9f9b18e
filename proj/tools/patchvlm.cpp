// patchvlm: gen | train | eval | ablate | attn | report
// Exit codes: 0 ok, 1 runtime failure, 2 config error.
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "patchvlm/cli/commands.hpp"

namespace {

using namespace patchvlm;

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::string output_dir;
  int workers = 0;
  long long seed = -1;
  std::string resume;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy vision-language model with detection-aware virtual tokens"};
  app.require_subcommand(1);
  Options opt;

  using Cmd = int (*)(const cli::RunConfig&, std::ostream&);
  const std::vector<std::tuple<const char*, const char*, Cmd>> commands = {
      {"gen", "generate scenes, QA samples and detections", cli::cmd_gen},
      {"train", "train the virtual-token block", cli::cmd_train},
      {"eval", "evaluate the configured template rows", cli::cmd_eval},
      {"ablate", "train and evaluate every ablation cell", cli::cmd_ablate},
      {"attn", "dump attention for one prompt", cli::cmd_attn},
      {"report", "render tables from eval records", cli::cmd_report},
  };
  Cmd chosen = nullptr;
  for (const auto& [name, help, fn] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", opt.config, "JSON run config");
    sub->add_option("--set", opt.sets, "override a config key: a.b=value")->take_all();
    sub->add_option("-o,--output-dir", opt.output_dir, "output_dir");
    sub->add_option("-w,--workers", opt.workers, "workers")->check(CLI::PositiveNumber);
    sub->add_option("--seed", opt.seed, "seed")->check(CLI::NonNegativeNumber);
    if (std::string(name) == "train") {
      sub->add_option("--resume", opt.resume, "checkpoint to continue from");
    }
    sub->callback([&chosen, f = fn] { chosen = f; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  std::vector<std::string> overrides = opt.sets;
  if (!opt.output_dir.empty()) overrides.push_back("output_dir=\"" + opt.output_dir + "\"");
  if (opt.workers > 0) overrides.push_back("workers=" + std::to_string(opt.workers));
  if (opt.seed >= 0) overrides.push_back("seed=" + std::to_string(opt.seed));
  if (!opt.resume.empty()) overrides.push_back("resume=\"" + opt.resume + "\"");

  try {
    const auto cfg = cli::resolve(opt.config, overrides);
    return chosen(cfg, std::cout);
  } catch (const cli::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
