#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "twinbeam/pipeline.hpp"

using namespace twinbeam;

namespace {

struct Options {
  std::string config;
  std::string input;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string slice;
};

void write_error(const std::string& out_dir, const nlohmann::json& err) {
  if (out_dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  std::ofstream f(std::filesystem::path(out_dir) / "error.json");
  if (f) f << err.dump(2) << '\n';
}

int run(const std::string& command, const Options& o) {
  std::string out_dir = o.out;
  try {
    PipelineConfig cfg = o.config.empty() ? PipelineConfig::fixture() : load_config(o.config, o.seed);
    if (o.seed) cfg.simulation.seed = *o.seed;
    if (out_dir.empty()) out_dir = cfg.output_dir;
    cfg.validate();
    std::optional<Slice> slice;
    if (!o.slice.empty()) slice = parse_slice(o.slice);

    CommandResult r;
    if (command == "simulate") {
      if (slice) throw config_error("--slice", "simulate takes no slice");
      r = cmd_simulate(cfg, out_dir);
    } else if (command == "fit") {
      if (slice) throw config_error("--slice", "fit takes no slice");
      r = cmd_fit(cfg, o.input, out_dir);
    } else if (command == "reconstruct") {
      r = cmd_reconstruct(cfg, o.input, out_dir, slice);
    } else {
      r = cmd_analyze(cfg, o.input, out_dir, slice);
    }
    for (const auto& f : r.files) std::cout << f << '\n';
    return 0;
  } catch (const std::exception& e) {
    const auto err = error_json(e, command);
    std::cerr << "twinbeam " << command << ": " << err["kind"].get<std::string>() << ": " << e.what() << '\n';
    write_error(out_dir, err);
    return exit_code_for(e);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Twin-beam photocount simulation, reconstruction and nonclassicality analysis"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  Options o;

  const std::pair<const char*, const char*> commands[] = {
      {"simulate", "Write the exact and (with trials > 0) sampled photocount histograms"},
      {"fit", "Fit the Gaussian multimode model to a photocount histogram"},
      {"reconstruct", "Maximum-likelihood photon-number reconstruction of a histogram"},
      {"analyze", "Postselected statistics, nonclassicality depths and quasi-distributions"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "Pipeline configuration JSON (default: built-in fixture)");
    sub->add_option("--out", o.out, "Output directory (default: config output_dir)");
    sub->add_option("--seed", o.seed, "Sampling seed, overrides the config");
    if (std::string(name) != "simulate") {
      sub->add_option("--input", o.input, "Histogram CSV")->required();
      sub->add_option("--slice", o.slice, "Restrict to one slice: c_s=K or n_s=K");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  return run(app.get_subcommands().front()->get_name(), o);
}
