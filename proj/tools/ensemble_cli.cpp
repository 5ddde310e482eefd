// ensemble: command line front end for the data, training, generation and evaluation stages.
//
//   ensemble synth-data    --out runs/a
//   ensemble train-vae     --out runs/a [--steps N]
//   ensemble train-texture --out runs/a
//   ensemble train-flow    --out runs/a
//   ensemble generate      --out runs/a --request req.json
//   ensemble evaluate      --out runs/a --which all
//
// Configuration comes from the desk profile, then --config, then ENSEMBLE_SECTION__KEY
// environment variables, then --set section.key=value, then --seed.

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "ensemble/core/error.hpp"
#include "ensemble/pipeline/pipeline.hpp"

namespace pl = ensemble::pipeline;

namespace {

// The config field --seed overrides for each command.
const std::map<std::string, std::string> kSeedField = {
    {"synth-data", "corpus.seed"},     {"train-vae", "codec.seed"},     {"train-texture", "codec.seed"},
    {"train-flow", "flow.train.seed"}, {"generate", "inference.seed"}, {"evaluate", "eval.seed"},
};

void log_line(const std::string& s) { std::cerr << s << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-singer song synthesis: corpus, codec, flow and evaluation"};
  app.require_subcommand(1);

  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "runs/default";
  std::vector<std::string> sets;
  bool print_config = false;
  app.add_option("--config", config_path, "JSON config overlaid on its \"profile\" (default desk)");
  app.add_option("--seed", seed, "Seed of the command's own stage");
  app.add_option("--out", out, "Run directory")->capture_default_str();
  app.add_option("--set", sets, "Override, section.key=value (repeatable)");
  app.add_flag("--print-config", print_config, "Print the resolved config to stdout before running");

  std::size_t steps = 0;
  std::string request, which = "all";
  app.add_subcommand("synth-data", "Synthesize the multi-singer corpus");
  for (const char* name : {"train-vae", "train-texture", "train-flow"})
    app.add_subcommand(name, std::string("Train the ") + (name + 6) + " stage")
        ->add_option("--steps", steps, "Stop after this many steps (0 = configured)");
  app.add_subcommand("generate", "Generate a song from a request file")
      ->add_option("--request", request, "Request JSON")
      ->required();
  app.add_subcommand("evaluate", "Run evaluation protocols")
      ->add_option("--which", which, "texture_swap, similarity, attention, plots or all")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    auto overrides = pl::environment_overrides();
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      ensemble::require(eq != std::string::npos && eq > 0, ensemble::ErrorKind::kConfig,
                        "--set expects section.key=value, got '" + s + "'");
      overrides[s.substr(0, eq)] = s.substr(eq + 1);
    }
    if (seed) overrides[kSeedField.at(command)] = std::to_string(*seed);
    const pl::PipelineConfig config =
        pl::load_config(config_path ? std::optional<pl::fs::path>(*config_path) : std::nullopt, overrides);
    if (print_config) std::cout << config.to_json().dump(2) << std::endl;
    const pl::Layout layout{out};
    const pl::StepLimit limit{steps};

    pl::CommandResult r;
    if (command == "synth-data") r = pl::synth_data(config, layout, log_line);
    else if (command == "train-vae") r = pl::train_vae(config, layout, log_line, limit);
    else if (command == "train-texture") r = pl::train_texture(config, layout, log_line, limit);
    else if (command == "train-flow") r = pl::train_flow(config, layout, log_line, limit);
    else if (command == "generate") r = pl::generate(config, layout, request, log_line);
    else r = pl::evaluate(config, layout, pl::evaluation_from_string(which), log_line);

    std::cout << r.summary.dump(2) << std::endl;
    return 0;
  } catch (const ensemble::Error& e) {
    std::cerr << e.what() << std::endl;
    return pl::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
