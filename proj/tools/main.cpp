#include "volcap/cli.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

namespace {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::string> output;
  bool deterministic = false;
  bool verbose = false;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, GlobalOptions& g) {
  cmd->add_option("--config", g.config_path, "JSON pipeline config");
  cmd->add_option("--seed", g.seed, "global seed (overrides 'seed')");
  cmd->add_option("--threads", g.threads, "worker thread cap (overrides 'threads')");
  cmd->add_option("--output", g.output, "output directory (overrides 'output_dir')");
  cmd->add_flag("--deterministic", g.deterministic, "sequential reductions (overrides 'deterministic')");
  cmd->add_flag("--verbose,-v", g.verbose, "progress on stderr");
  cmd->add_option("--set", g.overrides, "override a config key, e.g. --set fusion.delta_e=0.05");
}

volcap::PipelineConfig resolve(const GlobalOptions& g) {
  nlohmann::json j = nlohmann::json::object();
  if (!g.config_path.empty()) {
    std::ifstream is(g.config_path);
    if (!is) throw volcap::ConfigError("cannot open config " + g.config_path);
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw volcap::ConfigError(g.config_path + ": " + e.what());
    }
  }
  for (const std::string& o : g.overrides) volcap::apply_override(j, o);
  if (g.seed) j["seed"] = *g.seed;
  if (g.threads) j["threads"] = *g.threads;
  if (g.output) j["output_dir"] = *g.output;
  if (g.deterministic) j["deterministic"] = true;
  volcap::PipelineConfig c = volcap::PipelineConfig::from_json(j);
  if (c.threads > 0) volcap::set_thread_count(c.threads);
  volcap::set_deterministic(c.deterministic);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"volcap: multi-view RGBD capture, sliding-window fusion and implicit reconstruction"};
  app.require_subcommand(1);
  GlobalOptions g;
  std::string command;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"simulate", "render a synthetic multi-view RGBD sequence"},
      {"fuse", "sliding-window fusion with re-rendered views"},
      {"reconstruct", "implicit surface extraction with colors"},
      {"evaluate", "P2S, Chamfer and normal consistency against ground truth"},
      {"train-toy", "train the implicit model on synthetic scenes"},
      {"ablate-psdf", "paired trainings with and without the PSDF feature"},
      {"show-config", "print the effective configuration"}};
  for (const auto& [name, help] : commands) {
    CLI::App* cmd = app.add_subcommand(name, help);
    add_common(cmd, g);
    cmd->callback([&command, name = name] { command = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  std::ostringstream quiet;
  try {
    const volcap::PipelineConfig config = resolve(g);
    std::ostream& log = g.verbose ? std::cerr : static_cast<std::ostream&>(quiet);
    if (command == "simulate") volcap::cmd_simulate(config, log);
    else if (command == "fuse") volcap::cmd_fuse(config, log);
    else if (command == "reconstruct") volcap::cmd_reconstruct(config, log);
    else if (command == "evaluate") volcap::cmd_evaluate(config, std::cout);
    else if (command == "train-toy") volcap::cmd_train_toy(config, log);
    else if (command == "ablate-psdf") volcap::cmd_ablate_psdf(config, std::cout);
    else if (command == "show-config") std::cout << config.to_json().dump(2) << '\n';
    return 0;
  } catch (const volcap::TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "\nlast finite losses:";
    for (double l : e.last_losses()) std::cerr << ' ' << l;
    std::cerr << "\n";
    return 1;
  } catch (const volcap::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const volcap::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
}
