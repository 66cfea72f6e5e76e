#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <sys/wait.h>

#include "hypo/error.hpp"
#include "hypo/io.hpp"
#include "hypo/pipeline.hpp"

using namespace hypo;
namespace fs = std::filesystem;

namespace {

PipelineConfig tiny_pipeline() {
  PipelineConfig c;
  c.synthetic.lines = 400;
  c.dev_lines = 30;
  c.test_lines = 30;
  c.vocab_size = 80;
  c.n = 3;
  c.m = 2;
  c.corrector.embed_dim = 8;
  c.corrector.hidden = 8;
  c.corrector.heads = 2;
  c.corrector.attention_dim = 4;
  c.corrector.enc_layers = 1;
  c.corrector.dec_layers = 1;
  c.sc_train.max_steps = 20;
  c.sc_train.warmup_steps = 5;
  c.sc_train.eval_interval = 10;
  c.sc_train.batch_size = 8;
  c.lm.embed_dim = 8;
  c.lm.hidden = 8;
  c.lm_train.max_steps = 20;
  c.lm_train.warmup_steps = 5;
  c.lm_train.max_epochs = 2;
  c.lm_train.batch_size = 8;
  c.win_loss_k = 3;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hypo_test_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void run_all(const PipelineConfig& cfg, const fs::path& out) {
  RunOptions o;
  o.out_dir = out.string();
  o.quiet = true;
  for (const auto& c : pipeline_commands()) run_command(c, cfg, o);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(HYPO_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config json round trip and validation") {
  const PipelineConfig c = tiny_pipeline();
  const PipelineConfig back = nlohmann::json(c).get<PipelineConfig>();
  CHECK(nlohmann::json(back) == nlohmann::json(c));
  CHECK_NOTHROW(c.validate());

  PipelineConfig bad = c;
  bad.n = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.main_channel = "noisy";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.sc_models = {{"x", {"unknown"}}};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.grid = {{1, 0, 0}, {0, 1, 0}};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.channels.push_back(ChannelSpec::clean());
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(nlohmann::json({{"bogus", 1}}).get<PipelineConfig>(), ConfigError);
}

TEST_CASE("environment overrides") {
  nlohmann::json j = {{"seed", 0}, {"sc_train", {{"max_steps", 10}}}};
  apply_env_overrides(j, {{"HYPO_SEED", "7"},
                          {"HYPO_SC_TRAIN__MAX_STEPS", "99"},
                          {"HYPO_LM__HIDDEN", "12"},
                          {"HYPO_MAIN_CHANNEL", "mtr"},
                          {"OTHER", "1"}});
  CHECK(j["seed"] == 7);
  CHECK(j["sc_train"]["max_steps"] == 99);
  CHECK(j["lm"]["hidden"] == 12);
  CHECK(j["main_channel"] == "mtr");
  CHECK(!j.contains("other"));
  nlohmann::json k = {{"seed", 0}};
  CHECK_THROWS_AS(apply_env_overrides(k, {{"HYPO_SEED__X", "1"}}), ConfigError);
}

TEST_CASE("stage hashes follow the dependency graph") {
  const PipelineConfig a = tiny_pipeline();
  PipelineConfig b = a;
  b.grid.push_back({0.3, 0.3, 0.3});
  CHECK(stage_hash("train-sc", a) == stage_hash("train-sc", b));
  CHECK(stage_hash("rescore", a) == stage_hash("rescore", b));
  CHECK(stage_hash("sweep", a) != stage_hash("sweep", b));
  CHECK(stage_hash("report", a) != stage_hash("report", b));
  b = a;
  b.lm.hidden = 16;
  CHECK(stage_hash("decode", a) == stage_hash("decode", b));
  CHECK(stage_hash("rescore", a) != stage_hash("rescore", b));
  b = a;
  b.seed = 1;
  CHECK(stage_hash("train-bpe", a) != stage_hash("train-bpe", b));
  CHECK_THROWS_AS(stage_hash("fly", a), ConfigError);
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(ConfigError("x")) == 1);
  CHECK(exit_code_for(ArtifactError("x")) == 1);
  CHECK(exit_code_for(EvaluationError("x")) == 1);
  CHECK(exit_code_for(NumericError("x")) == 2);
  CHECK(exit_code_for(IoError("x")) == 2);
}

TEST_CASE("full pipeline on a tiny corpus") {
  const PipelineConfig cfg = tiny_pipeline();
  const fs::path out = scratch("tiny");
  run_all(cfg, out);
  for (const auto& c : pipeline_commands()) CHECK(fs::exists(out / "manifests" / (c + ".json")));
  for (const char* f : {"vocab.json", "splits/train.txt", "data/clean_test.jsonl", "data/mtr_stats.json",
                        "models/sc.ckpt", "models/sc_mtr.ckpt", "models/lm.ckpt", "decode/lattice_test.jsonl",
                        "rescore/lattice_dev.jsonl", "sweep/weights.json", "reports/eval.json",
                        "reports/report.md", "reports/win_loss.txt", "run_log.jsonl"}) {
    CHECK_MESSAGE(fs::exists(out / f), f);
  }
  const auto eval = nlohmann::json::parse(read_file((out / "reports/eval.json").string()));
  for (const char* s : {"top1", "sc1", "eq1", "eq2"}) CHECK(eval["systems"].contains(s));
  CHECK(eval["oracle"]["nbest"].get<double>() <= eval["systems"]["top1"]["corpus_wer"].get<double>());
  CHECK(eval["channels"].contains("mtr"));

  const auto lattices = read_lattices_jsonl((out / "rescore/lattice_test.jsonl").string());
  CHECK(lattices.size() == cfg.test_lines);
  for (const auto& l : lattices) {
    CHECK(l.rescored);
    CHECK(l.rows.size() == cfg.n);
  }
  const auto manifest = nlohmann::json::parse(read_file((out / "manifests/decode.json").string()));
  CHECK(manifest["stage_hash"] == stage_hash("decode", cfg));
  CHECK(manifest["outputs"].contains("decode/lattice_dev.jsonl"));
  CHECK(manifest.contains("vocab_fingerprint"));

  SUBCASE("re-running a command reproduces its bytes") {
    const std::string before = read_file((out / "decode/lattice_test.jsonl").string());
    RunOptions o;
    o.out_dir = out.string();
    o.quiet = true;
    run_command("decode", cfg, o);
    CHECK(read_file((out / "decode/lattice_test.jsonl").string()) == before);
  }
  SUBCASE("a second run gives identical reports") {
    const fs::path out2 = scratch("tiny2");
    run_all(cfg, out2);
    for (const char* f : {"reports/eval.json", "reports/report.md", "reports/win_loss.json", "reports/systems/eq2.json"}) {
      CHECK(read_file((out / f).string()) == read_file((out2 / f).string()));
    }
    fs::remove_all(out2);
  }
  SUBCASE("stale or missing artifacts are refused") {
    RunOptions o;
    o.out_dir = out.string();
    o.quiet = true;
    PipelineConfig changed = cfg;
    changed.sc_train.max_steps = 21;
    CHECK_THROWS_AS(run_command("decode", changed, o), ArtifactError);

    auto m = nlohmann::json::parse(read_file((out / "manifests/train-sc.json").string()));
    m["vocab_fingerprint"] = "0";
    write_file_atomic((out / "manifests/train-sc.json").string(), m.dump());
    try {
      run_command("decode", cfg, o);
      FAIL("expected ArtifactError");
    } catch (const ArtifactError& e) {
      CHECK(std::string(e.what()).find("vocabulary mismatch") != std::string::npos);
    }

    RunOptions empty = o;
    empty.out_dir = scratch("empty").string();
    try {
      run_command("sweep", cfg, empty);
      FAIL("expected ArtifactError");
    } catch (const ArtifactError& e) {
      CHECK(std::string(e.what()).find("rescore") != std::string::npos);
    }
  }
  fs::remove_all(out);
}

TEST_CASE("command line interface") {
  const fs::path dir = scratch("cli");
  write_file_atomic((dir / "ref.txt").string(), "the cat sat\na b c\n");
  write_file_atomic((dir / "hyp.txt").string(), "the cat sat\na x c\n");
  CHECK(run_cli("evaluate --hyp " + (dir / "ref.txt").string() + " --ref " + (dir / "ref.txt").string() + " --out " +
                (dir / "o").string()) == 0);
  const auto rep = nlohmann::json::parse(read_file((dir / "o/reports/evaluate.json").string()));
  CHECK(rep["corpus_wer"].get<double>() == 0.0);
  CHECK(run_cli("evaluate --hyp " + (dir / "hyp.txt").string() + " --ref " + (dir / "ref.txt").string() + " --out " +
                (dir / "o").string()) == 0);
  CHECK(nlohmann::json::parse(read_file((dir / "o/reports/evaluate.json").string()))["corpus_wer"].get<double>() ==
        doctest::Approx(1.0 / 6.0));

  write_file_atomic((dir / "short.txt").string(), "the cat sat\n");
  CHECK(run_cli("evaluate --hyp " + (dir / "short.txt").string() + " --ref " + (dir / "ref.txt").string()) == 1);
  CHECK(run_cli("decode") == 1);
  CHECK(run_cli("no-such-command") == 1);
  CHECK(run_cli("train-bpe --config " + (dir / "missing.json").string()) == 1);
  write_file_atomic((dir / "bad.json").string(), "{\"n\": 0}");
  CHECK(run_cli("train-bpe --config " + (dir / "bad.json").string()) == 1);
  write_file_atomic((dir / "ok.json").string(), "{}");
  CHECK(run_cli("decode --config " + (dir / "ok.json").string() + " --out " + (dir / "run").string()) == 1);
  fs::remove_all(dir);
}
