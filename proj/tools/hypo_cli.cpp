#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "hypo/error.hpp"
#include "hypo/pipeline.hpp"

using namespace hypo;

int main(int argc, char** argv) {
  CLI::App app{"Spelling correction for recognizer n-best lists: data synthesis, training, decoding, rescoring"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "run", hyp_path, ref_path;
  std::int64_t seed = -1;
  int threads = 1;
  bool quiet = false;

  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", config_path, "pipeline config (JSON)");
    if (config_required) opt->required();
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--threads", threads, "worker cap (execution is single-threaded)")->check(CLI::PositiveNumber);
    sub->add_option("--out", out_dir, "artifact directory");
    sub->add_flag("--quiet", quiet, "no progress on stderr");
  };

  std::vector<std::string> order = pipeline_commands();
  for (const auto& name : order) {
    auto* sub = app.add_subcommand(name, "run the " + name + " stage");
    add_common(sub, name != "evaluate");
    if (name == "evaluate") {
      sub->add_option("--hyp", hyp_path, "hypothesis text file; with --ref evaluates two files line by line");
      sub->add_option("--ref", ref_path, "reference text file");
    }
  }
  auto* all = app.add_subcommand("all", "run every stage in order");
  add_common(all, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "evaluate" && (!hyp_path.empty() || !ref_path.empty())) {
      if (hyp_path.empty() || ref_path.empty()) throw ConfigError("--hyp and --ref must be given together");
      const EvalReport r = evaluate_text_files(hyp_path, ref_path, out_dir + "/reports/evaluate.json");
      std::printf("corpus_wer %.6f (%lld errors / %zu words)\n", r.corpus_wer,
                  static_cast<long long>(r.totals.total()), r.ref_words);
      return 0;
    }
    if (config_path.empty()) throw ConfigError("--config is required");
    PipelineConfig cfg = load_pipeline_config(config_path);
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    RunOptions opts;
    opts.out_dir = out_dir;
    opts.threads = threads;
    opts.quiet = quiet;
    if (command == "all") {
      for (const auto& c : order) run_command(c, cfg, opts);
    } else {
      run_command(command, cfg, opts);
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "hypo " << command << ": " << e.what() << std::endl;
    return exit_code_for(e);
  }
}
