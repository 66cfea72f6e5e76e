#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hypo/channel.hpp"
#include "hypo/corrector.hpp"
#include "hypo/decode.hpp"
#include "hypo/lm.hpp"
#include "hypo/optim.hpp"
#include "hypo/synth.hpp"

namespace hypo {

struct ScModelSpec {
  std::string name;
  std::vector<std::string> train_channels;  // channel labels whose train sets are unioned
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::string corpus;  // text file, one utterance per line; empty: synthetic
  SynthConfig synthetic;
  std::size_t dev_lines = 500;
  std::size_t test_lines = 500;
  std::size_t vocab_size = kDeskVocabSize;
  std::vector<ChannelSpec> channels = {ChannelSpec::clean(), ChannelSpec::mtr()};
  std::string main_channel = "clean";  // channel for lattices, sweep and the main report
  std::size_t n = 4;
  int m = 4;
  CorrectorConfig corrector;
  TrainConfig sc_train;
  std::vector<ScModelSpec> sc_models = {{"sc", {"clean"}}, {"sc_mtr", {"clean", "mtr"}}};
  LMConfig lm;
  TrainConfig lm_train;
  std::vector<Weights> grid = default_grid();
  std::size_t win_loss_k = 10;

  void validate() const;
  const ChannelSpec& channel(const std::string& label) const;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);

// Applies HYPO_<KEY> environment overrides ("__" separates nesting levels,
// keys are lower-cased; values parse as JSON when possible, else as strings).
void apply_env_overrides(nlohmann::json& config, const std::vector<std::pair<std::string, std::string>>& env);
std::vector<std::pair<std::string, std::string>> hypo_environment();

// Loads a JSON config file, applies environment overrides and resolves a
// relative corpus path against the config file's directory.
PipelineConfig load_pipeline_config(const std::string& path);

inline const std::vector<std::string>& pipeline_commands() {
  static const std::vector<std::string> cmds = {"train-bpe", "build-data", "train-sc", "train-lm", "decode",
                                                "rescore",   "sweep",      "evaluate", "report"};
  return cmds;
}

struct RunOptions {
  std::string out_dir = "run";
  int threads = 1;   // accepted; execution is single-threaded
  bool quiet = false;  // suppress progress on stderr
};

// Runs one pipeline command. Writes artifacts under out_dir atomically, a
// manifest per command under out_dir/manifests and JSON-lines events to
// out_dir/run_log.jsonl. Throws ConfigError/ArtifactError on validation
// failures, other exceptions on runtime failures.
void run_command(const std::string& command, const PipelineConfig& cfg, const RunOptions& opts);

// Stage hash of a command: digest of the config sections it and its
// upstream commands read.
std::string stage_hash(const std::string& command, const PipelineConfig& cfg);

// Line-aligned evaluation of two text files (ids are 0-based line numbers);
// writes the report JSON to out_path when non-empty.
EvalReport evaluate_text_files(const std::string& hyp_path, const std::string& ref_path, const std::string& out_path);

// Maps an exception to the process exit code: 1 validation, 2 runtime.
int exit_code_for(const std::exception& e);

}  // namespace hypo
