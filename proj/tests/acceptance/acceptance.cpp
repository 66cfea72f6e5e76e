// Runs every acceptance criterion at its stated tolerance and prints one
// PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>

#include <CLI11.hpp>

#include "fixtures.hpp"
#include "hypo/channel.hpp"
#include "hypo/decode.hpp"
#include "hypo/eval.hpp"
#include "hypo/io.hpp"
#include "hypo/lm.hpp"
#include "hypo/pipeline.hpp"
#include "oracles.hpp"
#include "oracles_decode.hpp"

using namespace hypo;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

// 1
Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  CorrectorConfig cc;
  cc.vocab_size = 12;
  cc.embed_dim = 6;
  cc.hidden = 8;
  cc.heads = 2;
  cc.attention_dim = 4;
  cc.init_scale = 0.5;
  Corrector sc = Corrector::create(cc, 1);
  Rng rng(2);
  std::vector<TrainingPair> pairs;
  for (int i = 0; i < 3; ++i) {
    TokenSeq src(2 + rng.uniform_int(3)), tgt(1 + rng.uniform_int(3));
    for (auto& t : src) t = static_cast<TokenId>(kNumSpecials + rng.uniform_int(8));
    for (auto& t : tgt) t = static_cast<TokenId>(kNumSpecials + rng.uniform_int(8));
    pairs.push_back({frame_source(src), tgt});
  }
  const double e_sc = grad_check([&](Tape& t, ParameterStore& s) { return sc.batch_loss(t, s, pairs, 0.1, 0.0, nullptr); },
                                 sc.store(), 1e-3, nullptr, Stencil::kCentral4);
  LMConfig lc;
  lc.vocab_size = 12;
  lc.embed_dim = 6;
  lc.hidden = 8;
  LanguageModel lm = LanguageModel::create(lc, 3);
  std::vector<TokenSeq> seqs;
  for (const auto& p : pairs) seqs.push_back(p.target);
  const double e_lm = grad_check([&](Tape& t, ParameterStore& s) { return lm.batch_loss(t, s, seqs, 0.0, nullptr); },
                                 lm.store(), 1e-3, nullptr, Stencil::kCentral4);
  const double secs = seconds_since(t0);
  return {e_sc < 1e-4 && e_lm < 1e-4 && secs < 60.0,
          format("corrector %.2e, lm %.2e (limit 1e-4), %.1f s (limit 60 s)", e_sc, e_lm, secs)};
}

// 2
Outcome beam_exactness() {
  const auto t0 = std::chrono::steady_clock::now();
  CorrectorConfig cc;
  cc.vocab_size = 6;
  cc.embed_dim = 6;
  cc.hidden = 8;
  cc.enc_layers = 1;
  cc.dec_layers = 2;
  cc.heads = 2;
  cc.attention_dim = 4;
  cc.init_scale = 1.0;
  const Corrector m = Corrector::create(cc, 4);
  Rng rng(5);
  bool ok = true;
  std::size_t outcomes = 0;
  for (int trial = 0; trial < 10 && ok; ++trial) {
    TokenSeq src(1 + rng.uniform_int(3));
    for (auto& t : src) t = static_cast<TokenId>(kNumSpecials + rng.uniform_int(2));
    const auto truth = oracle::enumerate_outcomes(m, src, 3);
    const auto beam = beam_search(m, src, 216, 3);
    outcomes = truth.size();
    ok = beam.size() == truth.size() && beam[0].tokens == truth[0].tokens;
    std::set<TokenSeq> a, b;
    for (std::size_t k = 0; ok && k < beam.size(); ++k) {
      a.insert(beam[k].tokens);
      b.insert(truth[k].tokens);
      ok = a == b && std::abs(beam[k].score - truth[k].score) < 1e-12;
    }
  }
  const double secs = seconds_since(t0);
  return {ok && secs < 10.0,
          format("10 sources, %zu outcomes each, argmax and every top-k set %s; %.2f s (limit 10 s)", outcomes,
                 ok ? "equal" : "DIFFER", secs)};
}

// 3
Outcome tokenizer_oracle() {
  Rng rng(6);
  std::vector<std::string> corpus;
  std::size_t words = 0;
  while (words < 10000) {
    auto line = fixtures::random_corpus(rng, 1, "abcdefghij")[0];
    words += split_words(line).size();
    corpus.push_back(std::move(line));
  }
  const Vocabulary v = train_bpe(corpus, 300);
  const auto expected = oracle::greedy_bpe(corpus, 300);
  bool merges_ok = v.merges().size() == expected.size();
  for (std::size_t i = 0; merges_ok && i < expected.size(); ++i) {
    merges_ok = v.merges()[i].left == expected[i].left && v.merges()[i].right == expected[i].right &&
                v.merges()[i].result == expected[i].result;
  }
  std::size_t bad = 0;
  for (const auto& line : fixtures::random_corpus(rng, 10000, "abcdefghij")) bad += decode(v, encode(v, line)) != line;
  return {merges_ok && bad == 0, format("%zu words, %zu/%zu merges equal; round trip failures %zu/10000", words,
                                        merges_ok ? expected.size() : 0, expected.size(), bad)};
}

// 4
Outcome wer_oracle() {
  Rng rng(7);
  std::size_t bad = 0;
  for (int i = 0; i < 1000; ++i) {
    Words h(rng.uniform_int(15)), r(1 + rng.uniform_int(15));
    for (auto& w : h) w = std::string(1, static_cast<char>('a' + rng.uniform_int(5)));
    for (auto& w : r) w = std::string(1, static_cast<char>('a' + rng.uniform_int(5)));
    const WerResult got = wer(h, r);
    const oracle::Edits e = oracle::word_edits(h, r);
    bad += !(got.counts == EditCounts{e.sub, e.del, e.ins} &&
             got.rate == static_cast<double>(e.cost) / static_cast<double>(r.size()));
  }
  return {bad == 0, format("%zu/1000 pairs differ from the forward DP oracle", bad)};
}

// 5
Outcome channel_normalization() {
  const std::vector<TokenId> pool = {4, 5, 6, 7};
  ChannelSpec spec;
  spec.sub_rate = 0.35;
  spec.del_rate = 0.0;
  spec.ins_rate = 0.0;
  const ErrorChannel ch(pool, spec);
  double worst = 0.0;
  bool complete = true;
  for (const TokenSeq& truth : {TokenSeq{4, 5}, TokenSeq{7, 7}}) {
    Rng rng(8);
    std::map<TokenSeq, double> seen;
    for (int i = 0; i < 20000; ++i) {
      auto s = ch.corrupt(truth, rng);
      seen.emplace(s.ids, s.log_likelihood);
    }
    complete = complete && seen.size() == 16;
    double total = 0.0;
    for (const auto& [ids, ll] : seen) total += std::exp(ll);
    worst = std::max(worst, std::abs(total - 1.0));
  }
  return {complete && worst < 1e-9, format("all 16 outcomes %s; |sum - 1| = %.2e (limit 1e-9)",
                                           complete ? "reached" : "NOT reached", worst)};
}

struct PipelineRun {
  fs::path out;
  PipelineConfig cfg;
  nlohmann::json eval;
  double total_seconds = 0.0;
  double second_model_seconds = 0.0;
};

double manifest_timing(const fs::path& out, const std::string& cmd, const std::string& key) {
  const auto m = nlohmann::json::parse(read_file((out / "manifests" / (cmd + ".json")).string()));
  return m.at("timings").value(key, 0.0);
}

PipelineRun run_pipeline(const std::string& config, const fs::path& out, bool reuse) {
  PipelineRun r;
  r.out = out;
  r.cfg = load_pipeline_config(config);
  RunOptions opts;
  opts.out_dir = out.string();
  opts.quiet = true;
  if (!reuse) fs::remove_all(out);
  for (const auto& c : pipeline_commands()) {
    if (reuse && fs::exists(out / "manifests" / (c + ".json"))) {
      const auto m = nlohmann::json::parse(read_file((out / "manifests" / (c + ".json")).string()));
      if (m.value("stage_hash", "") == stage_hash(c, r.cfg)) continue;
    }
    std::fprintf(stderr, "  [%s] %s\n", out.filename().c_str(), c.c_str());
    run_command(c, r.cfg, opts);
  }
  for (const auto& c : pipeline_commands()) r.total_seconds += manifest_timing(out, c, "total");
  if (r.cfg.sc_models.size() > 1) {
    for (std::size_t k = 1; k < r.cfg.sc_models.size(); ++k) {
      r.second_model_seconds += manifest_timing(out, "train-sc", r.cfg.sc_models[k].name);
    }
  }
  r.eval = nlohmann::json::parse(read_file((out / "reports/eval.json").string()));
  return r;
}

double sys_wer(const PipelineRun& r, const char* name) { return r.eval["systems"][name]["corpus_wer"].get<double>(); }

// 6
Outcome sc_trend(const PipelineRun& r) {
  const double top1 = sys_wer(r, "top1"), sc1 = sys_wer(r, "sc1");
  const double rel = 1.0 - sc1 / top1;
  const double secs = r.total_seconds - r.second_model_seconds;
  return {rel >= 0.40 && secs < 1800.0,
          format("top-1 WER %.4f -> SC(1) %.4f, relative reduction %.1f%% (need >= 40%%); end-to-end %.0f s "
                 "(limit 1800 s, excludes the MTR model's %.0f s)",
                 top1, sc1, 100.0 * rel, secs, r.second_model_seconds)};
}

// 7
Outcome oracle_trend(const PipelineRun& r) {
  const double nb = r.eval["oracle"]["nbest"].get<double>(), lat = r.eval["oracle"]["lattice"].get<double>();
  const double rel = nb > 0 ? 1.0 - lat / nb : 0.0;
  return {rel >= 0.25, format("oracle WER %zu-best %.4f -> %zux%d lattice %.4f, relative %.1f%% (need >= 25%%)",
                              r.cfg.n, nb, r.cfg.n, r.cfg.m, lat, 100.0 * rel)};
}

// 8
Outcome eq2_dominance(const PipelineRun& r) {
  const double top1 = sys_wer(r, "top1"), sc1 = sys_wer(r, "sc1"), eq1 = sys_wer(r, "eq1"), eq2 = sys_wer(r, "eq2");
  const Weights w = r.eval["weights"]["eq2"].get<Weights>();
  return {eq2 <= top1 && eq2 <= sc1 && eq2 <= eq1,
          format("lattice rescoring %.4f vs top-1 %.4f, SC(1) %.4f%s, n-best LM rescoring %.4f%s; weights (%.2f, %.2f, %.2f)", eq2, top1, sc1,
                 eq2 < sc1 ? " (strict)" : " (not strict)", eq1, eq2 < eq1 ? " (strict)" : " (not strict)",
                 w.lambda_las, w.lambda_sc, w.lambda_lm)};
}

// 9
Outcome mtr_trend(const PipelineRun& r) {
  if (r.cfg.sc_models.size() < 2 || !r.eval["channels"].contains("mtr")) return {false, "no MTR model or channel configured"};
  const auto& mtr = r.eval["channels"]["mtr"];
  const double clean_model = mtr["sc1"][r.cfg.sc_models[0].name].get<double>();
  const double union_model = mtr["sc1"][r.cfg.sc_models[1].name].get<double>();
  return {union_model <= clean_model * 1.01,
          format("MTR test (top-1 %.4f): clean-trained SC %.4f, union-trained SC %.4f (need <= clean x 1.01)",
                 mtr["top1"].get<double>(), clean_model, union_model)};
}

// 10
Outcome determinism(const std::string& smoke_config, const fs::path& base) {
  const auto t0 = std::chrono::steady_clock::now();
  const PipelineRun a = run_pipeline(smoke_config, base / "smoke_a", false);
  const PipelineRun b = run_pipeline(smoke_config, base / "smoke_b", false);
  std::size_t files = 0, differ = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.out / "reports")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const fs::path other = b.out / fs::relative(e.path(), a.out);
    differ += !fs::exists(other) || read_file(e.path().string()) != read_file(other.string());
  }
  return {files > 0 && differ == 0,
          format("%zu report files, %zu differ across two runs; %.0f s for both", files, differ, seconds_since(t0))};
}

// 11
Outcome lm_sanity(const PipelineRun& r) {
  const Vocabulary vocab = Vocabulary::load((r.out / "vocab.json").string());
  LanguageModel lm = LanguageModel::load((r.out / "models/lm.ckpt").string());
  lm.store().at("lm.out.W").value.matrix().setZero();
  lm.store().at("lm.out.b").value.matrix().setZero();
  std::vector<TokenSeq> dev;
  for (const auto& l : read_lines((r.out / "splits/dev.txt").string())) dev.push_back(encode(vocab, l));
  const double ppl = perplexity(lm, dev);
  const double V = static_cast<double>(vocab.size());
  const auto log = nlohmann::json::parse(read_file((r.out / "models/lm_log.json").string()));
  const double init = log["initial_dev_perplexity"].get<double>(), best = log["best_dev_perplexity"].get<double>();
  return {std::abs(ppl - V) < 1e-6 && best < init,
          format("uniform perplexity %.9f vs V = %.0f; trained dev perplexity %.2f < initial %.2f", ppl, V, best, init)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string config = std::string(HYPO_SOURCE_DIR) + "/configs/desk.json";
  std::string smoke = std::string(HYPO_SOURCE_DIR) + "/configs/smoke.json";
  std::string out = "acceptance_run";
  std::vector<int> only;
  bool reuse = false;
  app.add_option("--config", config, "benchmark pipeline config");
  app.add_option("--smoke-config", smoke, "smoke pipeline config for the determinism check");
  app.add_option("--out", out, "scratch directory");
  app.add_option("--only", only, "criteria to run (default all)");
  app.add_flag("--reuse", reuse, "keep up-to-date benchmark artifacts from a previous run");
  CLI11_PARSE(app, argc, argv);

  auto wanted = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };
  const std::vector<std::string> names = {"",
                                          "gradient correctness",
                                          "beam-search exactness",
                                          "tokenizer oracle",
                                          "WER oracle",
                                          "channel normalization",
                                          "SC top-1 correction trend",
                                          "oracle expansion trend",
                                          "lattice rescoring dominance",
                                          "MTR trend",
                                          "determinism",
                                          "LM sanity"};
  int failures = 0;
  auto report = [&](int k, const std::function<Outcome()>& f) {
    if (!wanted(k)) return;
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s  %2d  %-26s %s\n", o.pass ? "PASS" : "FAIL", k, names[static_cast<std::size_t>(k)].c_str(),
                o.detail.c_str());
    std::fflush(stdout);
  };

  report(1, gradient_correctness);
  report(2, beam_exactness);
  report(3, tokenizer_oracle);
  report(4, wer_oracle);
  report(5, channel_normalization);

  const bool need_bench = wanted(6) || wanted(7) || wanted(8) || wanted(9) || wanted(11);
  std::optional<PipelineRun> bench;
  std::string bench_error;
  if (need_bench) {
    try {
      bench = run_pipeline(config, fs::path(out) / "benchmark", reuse);
    } catch (const std::exception& e) {
      bench_error = e.what();
    }
  }
  auto on_bench = [&](auto f) {
    return [&, f]() -> Outcome {
      if (!bench) return {false, "benchmark pipeline failed: " + bench_error};
      return f(*bench);
    };
  };
  report(6, on_bench(sc_trend));
  report(7, on_bench(oracle_trend));
  report(8, on_bench(eq2_dominance));
  report(9, on_bench(mtr_trend));
  report(10, [&] { return determinism(smoke, fs::path(out)); });
  report(11, on_bench(lm_sanity));

  std::printf("%d failed\n", failures);
  return failures == 0 ? 0 : 1;
}
