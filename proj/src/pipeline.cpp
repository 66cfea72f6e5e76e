#include "hypo/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "hypo/error.hpp"
#include "hypo/eval.hpp"
#include "hypo/hash.hpp"
#include "hypo/io.hpp"

extern char** environ;

namespace hypo {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

void PipelineConfig::validate() const {
  synthetic.validate();
  if (dev_lines == 0 || test_lines == 0) throw ConfigError("dev_lines and test_lines must be >= 1");
  if (vocab_size <= static_cast<std::size_t>(kNumSpecials) + 1) throw ConfigError("vocab_size too small");
  if (n < 1 || m < 1) throw ConfigError("n and m must be >= 1");
  if (channels.empty()) throw ConfigError("at least one channel spec is required");
  std::set<std::string> labels;
  for (const auto& c : channels) {
    c.validate();
    if (c.label.empty()) throw ConfigError("channel label must not be empty");
    if (!labels.insert(c.label).second) throw ConfigError("duplicate channel label \"" + c.label + "\"");
  }
  if (!labels.count(main_channel)) throw ConfigError("main_channel \"" + main_channel + "\" is not a channel label");
  if (sc_models.empty()) throw ConfigError("at least one sc model is required");
  std::set<std::string> names;
  for (const auto& s : sc_models) {
    if (s.name.empty() || s.name == "lm") throw ConfigError("invalid sc model name \"" + s.name + "\"");
    if (!names.insert(s.name).second) throw ConfigError("duplicate sc model name \"" + s.name + "\"");
    if (s.train_channels.empty()) throw ConfigError("sc model " + s.name + " has no train channels");
    for (const auto& l : s.train_channels) {
      if (!labels.count(l)) throw ConfigError("sc model " + s.name + " uses unknown channel \"" + l + "\"");
    }
  }
  CorrectorConfig cc = corrector;
  cc.vocab_size = static_cast<int>(vocab_size);
  cc.validate();
  LMConfig lc = lm;
  lc.vocab_size = static_cast<int>(vocab_size);
  lc.validate();
  sc_train.validate();
  lm_train.validate();
  if (grid.empty()) throw ConfigError("weight grid is empty");
  for (const auto& w : grid) w.validate();
  auto has = [&](double a, double b) {
    return std::any_of(grid.begin(), grid.end(),
                       [&](const Weights& w) { return w.lambda_las == a && w.lambda_sc == b && w.lambda_lm == 0.0; });
  };
  if (!has(1.0, 0.0) || !has(0.0, 1.0)) throw ConfigError("weight grid must contain (1,0,0) and (0,1,0)");
  const bool eq1_axis = std::any_of(grid.begin(), grid.end(), [](const Weights& w) {
    return w.lambda_las == 1.0 && w.lambda_sc == 0.0 && w.lambda_lm > 0.0;
  });
  if (!eq1_axis) throw ConfigError("weight grid must contain a point (1,0,lambda) with lambda > 0");
}

const ChannelSpec& PipelineConfig::channel(const std::string& label) const {
  for (const auto& c : channels) {
    if (c.label == label) return c;
  }
  throw ConfigError("unknown channel \"" + label + "\"");
}

void to_json(nlohmann::json& j, const PipelineConfig& c) {
  json models = json::array();
  for (const auto& s : c.sc_models) models.push_back({{"name", s.name}, {"train_channels", s.train_channels}});
  j = {{"seed", c.seed},
       {"corpus", c.corpus},
       {"synthetic", c.synthetic},
       {"dev_lines", c.dev_lines},
       {"test_lines", c.test_lines},
       {"vocab_size", c.vocab_size},
       {"channels", c.channels},
       {"main_channel", c.main_channel},
       {"n", c.n},
       {"m", c.m},
       {"corrector", c.corrector},
       {"sc_train", c.sc_train},
       {"sc_models", models},
       {"lm", c.lm},
       {"lm_train", c.lm_train},
       {"grid", c.grid},
       {"win_loss_k", c.win_loss_k}};
}

void from_json(const nlohmann::json& j, PipelineConfig& c) {
  static const std::set<std::string> known = {"seed", "corpus", "synthetic", "dev_lines", "test_lines",
                                              "vocab_size", "channels", "main_channel", "n", "m", "corrector",
                                              "sc_train", "sc_models", "lm", "lm_train", "grid", "win_loss_k"};
  if (!j.is_object()) throw ConfigError("pipeline config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown pipeline config key \"" + k + "\"");
  }
  try {
    PipelineConfig d;
    c.seed = j.value("seed", d.seed);
    c.corpus = j.value("corpus", d.corpus);
    c.synthetic = j.contains("synthetic") ? j.at("synthetic").get<SynthConfig>() : d.synthetic;
    c.dev_lines = j.value("dev_lines", d.dev_lines);
    c.test_lines = j.value("test_lines", d.test_lines);
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.channels = j.contains("channels") ? j.at("channels").get<std::vector<ChannelSpec>>() : d.channels;
    c.main_channel = j.value("main_channel", d.main_channel);
    c.n = j.value("n", d.n);
    c.m = j.value("m", d.m);
    c.corrector = j.contains("corrector") ? j.at("corrector").get<CorrectorConfig>() : d.corrector;
    c.sc_train = j.contains("sc_train") ? j.at("sc_train").get<TrainConfig>() : d.sc_train;
    c.sc_models = d.sc_models;
    if (j.contains("sc_models")) {
      c.sc_models.clear();
      for (const auto& s : j.at("sc_models")) {
        c.sc_models.push_back({s.at("name").get<std::string>(), s.at("train_channels").get<std::vector<std::string>>()});
      }
    }
    c.lm = j.contains("lm") ? j.at("lm").get<LMConfig>() : d.lm;
    c.lm_train = j.contains("lm_train") ? j.at("lm_train").get<TrainConfig>() : d.lm_train;
    c.grid = j.contains("grid") ? j.at("grid").get<std::vector<Weights>>() : d.grid;
    c.win_loss_k = j.value("win_loss_k", d.win_loss_k);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid pipeline config: ") + e.what());
  }
}

void apply_env_overrides(nlohmann::json& config, const std::vector<std::pair<std::string, std::string>>& env) {
  for (const auto& [name, value] : env) {
    if (name.rfind("HYPO_", 0) != 0 || name.size() <= 5) continue;
    std::string key = name.substr(5);
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    std::vector<std::string> parts;
    for (std::size_t pos = 0;;) {
      const std::size_t next = key.find("__", pos);
      parts.push_back(key.substr(pos, next == std::string::npos ? std::string::npos : next - pos));
      if (next == std::string::npos) break;
      pos = next + 2;
    }
    json* node = &config;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!node->is_object()) throw ConfigError("override " + name + ": \"" + parts[i] + "\" is not an object");
      node = &(*node)[parts[i]];
      if (node->is_null()) *node = json::object();
    }
    if (!node->is_object()) throw ConfigError("override " + name + " does not address an object member");
    json parsed = json::parse(value, nullptr, false);
    (*node)[parts.back()] = parsed.is_discarded() ? json(value) : parsed;
  }
}

std::vector<std::pair<std::string, std::string>> hypo_environment() {
  std::vector<std::pair<std::string, std::string>> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry(*e);
    const auto eq = entry.find('=');
    if (eq == std::string::npos || entry.rfind("HYPO_", 0) != 0) continue;
    out.emplace_back(entry.substr(0, eq), entry.substr(eq + 1));
  }
  std::sort(out.begin(), out.end());
  return out;
}

PipelineConfig load_pipeline_config(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
  json j = json::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path);
  apply_env_overrides(j, hypo_environment());
  PipelineConfig cfg = j.get<PipelineConfig>();
  if (!cfg.corpus.empty() && fs::path(cfg.corpus).is_relative()) {
    cfg.corpus = (fs::absolute(path).parent_path() / cfg.corpus).lexically_normal().string();
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Stage hashes

namespace {

const std::map<std::string, std::vector<std::string>>& stage_graph() {
  // command -> (config sections read directly, upstream commands)
  static const std::map<std::string, std::vector<std::string>> g = {
      {"train-bpe", {"seed", "corpus", "synthetic", "dev_lines", "test_lines", "vocab_size"}},
      {"build-data", {"@train-bpe", "channels", "n"}},
      {"train-sc", {"@build-data", "corrector", "sc_train", "sc_models"}},
      {"train-lm", {"@train-bpe", "lm", "lm_train"}},
      {"decode", {"@train-sc", "m", "main_channel"}},
      {"rescore", {"@decode", "@train-lm"}},
      {"sweep", {"@rescore", "grid"}},
      {"evaluate", {"@sweep", "win_loss_k"}},
      {"report", {"@evaluate"}},
  };
  return g;
}

void collect_sections(const std::string& command, std::set<std::string>& out) {
  auto it = stage_graph().find(command);
  if (it == stage_graph().end()) throw ConfigError("unknown command \"" + command + "\"");
  for (const auto& s : it->second) {
    if (s[0] == '@') {
      collect_sections(s.substr(1), out);
    } else {
      out.insert(s);
    }
  }
}

}  // namespace

std::string stage_hash(const std::string& command, const PipelineConfig& cfg) {
  std::set<std::string> sections;
  collect_sections(command, sections);
  const json full = cfg;
  json part = json::object();
  for (const auto& s : sections) part[s] = full.at(s);
  return hash_string(part.dump());
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ArtifactError*>(&e) ||
      dynamic_cast<const EvaluationError*>(&e)) {
    return 1;
  }
  return 2;
}

// ---------------------------------------------------------------------------
// Run bookkeeping

namespace {

class Run {
 public:
  Run(std::string command, const PipelineConfig& cfg, const RunOptions& opts)
      : command_(std::move(command)), cfg_(cfg), opts_(opts), out_(opts.out_dir),
        start_(std::chrono::steady_clock::now()) {
    fs::create_directories(out_ / "manifests");
    event({{"event", "start"}, {"command", command_}});
  }

  const PipelineConfig& cfg() const { return cfg_; }

  std::string path(const std::string& rel) const {
    const fs::path p = out_ / rel;
    fs::create_directories(p.parent_path());
    return p.string();
  }

  void input(const std::string& rel) { inputs_[rel] = hash_file(path(rel)); }
  void input_external(const std::string& p) { inputs_[p] = hash_file(p); }
  void output(const std::string& rel) { outputs_[rel] = hash_file(path(rel)); }
  void timing(const std::string& name, double seconds) { timings_[name] = seconds; }
  void set(const std::string& key, json value) { extra_[key] = std::move(value); }

  // Loads and checks the manifest of an upstream command.
  json require(const std::string& producer) {
    const fs::path mp = out_ / "manifests" / (producer + ".json");
    if (!fs::exists(mp)) {
      throw ArtifactError("missing artifacts from `" + producer + "` in " + out_.string() + "; run `hypo " +
                          producer + " --config <file> --out " + out_.string() + "` first");
    }
    json m = json::parse(read_file(mp.string()), nullptr, false);
    if (m.is_discarded()) throw ArtifactError("corrupt manifest " + mp.string() + "; re-run `hypo " + producer + "`");
    if (m.value("stage_hash", "") != stage_hash(producer, cfg_)) {
      throw ArtifactError("artifacts from `" + producer + "` were produced under a different config (stage hash " +
                          m.value("stage_hash", "?") + ", expected " + stage_hash(producer, cfg_) +
                          "); re-run `hypo " + producer + "`");
    }
    for (const auto& [rel, h] : m.at("outputs").items()) {
      const fs::path p = out_ / rel;
      if (!fs::exists(p)) throw ArtifactError("missing artifact " + p.string() + "; re-run `hypo " + producer + "`");
      if (hash_file(p.string()) != h.get<std::string>()) {
        throw ArtifactError("artifact " + p.string() + " changed since `" + producer + "` wrote it; re-run `hypo " +
                            producer + "`");
      }
      inputs_[rel] = h.get<std::string>();
    }
    return m;
  }

  void event(json e) {
    e["command"] = command_;
    {
      std::ofstream log(out_ / "run_log.jsonl", std::ios::app);
      log << e.dump() << '\n';
    }
    if (!opts_.quiet) std::cerr << "[" << command_ << "] " << e.dump() << std::endl;
  }

  void finish() {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    timings_["total"] = secs;
    json m = {{"command", command_},
              {"stage_hash", stage_hash(command_, cfg_)},
              {"config_hash", hash_string(json(cfg_).dump())},
              {"seed", cfg_.seed},
              {"threads", 1},
              {"inputs", inputs_},
              {"outputs", outputs_},
              {"timings", timings_}};
    for (const auto& [k, v] : extra_.items()) m[k] = v;
    write_file_atomic((out_ / "manifests" / (command_ + ".json")).string(), m.dump(2) + "\n");
    event({{"event", "done"}, {"seconds", secs}});
  }

 private:
  std::string command_;
  const PipelineConfig& cfg_;
  RunOptions opts_;
  fs::path out_;
  std::chrono::steady_clock::time_point start_;
  json inputs_ = json::object();
  json outputs_ = json::object();
  json timings_ = json::object();
  json extra_ = json::object();
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const std::vector<std::string> kSplits = {"train", "dev", "test"};

std::string split_path(const std::string& split) { return "splits/" + split + ".txt"; }
std::string data_path(const std::string& label, const std::string& split) {
  return "data/" + label + "_" + split + ".jsonl";
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  write_file_atomic(path, text);
}

Vocabulary load_vocab(Run& run) {
  const std::string p = run.path("vocab.json");
  if (!fs::exists(p)) throw ArtifactError("missing " + p + "; run `hypo train-bpe` first");
  return Vocabulary::load(p);
}

void check_vocab(const json& manifest, const Vocabulary& vocab, const std::string& producer) {
  const std::string fp = manifest.value("vocab_fingerprint", "");
  if (fp != vocab.fingerprint()) {
    throw ArtifactError("vocabulary mismatch: `" + producer + "` artifacts were built with vocab " + fp +
                        " but vocab.json is " + vocab.fingerprint() + "; re-run `hypo " + producer + "`");
  }
}

std::size_t id_index(const std::string& id) {
  const auto dash = id.rfind('-');
  return static_cast<std::size_t>(std::stoull(id.substr(dash + 1)));
}

TextById refs_for(const std::vector<NBestList>& records, const std::vector<std::string>& lines) {
  TextById refs;
  for (const auto& r : records) refs[r.utterance_id] = lines.at(id_index(r.utterance_id));
  return refs;
}

std::uint64_t stage_seed(const PipelineConfig& cfg, std::uint64_t tag, std::uint64_t extra = 0) {
  return derive_seed(derive_seed(cfg.seed, tag), extra);
}

// ---------------------------------------------------------------------------
// Commands

void cmd_train_bpe(Run& run) {
  const auto& cfg = run.cfg();
  std::vector<std::string> lines;
  if (cfg.corpus.empty()) {
    lines = synthetic_corpus(cfg.synthetic);
  } else {
    if (!fs::exists(cfg.corpus)) throw ConfigError("corpus file not found: " + cfg.corpus);
    run.input_external(cfg.corpus);
    lines = read_lines(cfg.corpus);
  }
  if (lines.size() <= cfg.dev_lines + cfg.test_lines) {
    throw ConfigError("corpus has " + std::to_string(lines.size()) + " lines; need more than dev_lines + test_lines = " +
                      std::to_string(cfg.dev_lines + cfg.test_lines));
  }
  const auto test_begin = lines.end() - static_cast<std::ptrdiff_t>(cfg.test_lines);
  const auto dev_begin = test_begin - static_cast<std::ptrdiff_t>(cfg.dev_lines);
  const std::vector<std::string> train(lines.begin(), dev_begin), dev(dev_begin, test_begin), test(test_begin, lines.end());
  write_lines(run.path(split_path("train")), train);
  write_lines(run.path(split_path("dev")), dev);
  write_lines(run.path(split_path("test")), test);
  for (const auto& s : kSplits) run.output(split_path(s));

  const auto t0 = std::chrono::steady_clock::now();
  const Vocabulary vocab = train_bpe(train, cfg.vocab_size);
  run.timing("train_bpe", seconds_since(t0));
  vocab.save(run.path("vocab.json"));
  run.output("vocab.json");
  run.set("vocab_fingerprint", vocab.fingerprint());
  run.event({{"event", "vocab"}, {"size", vocab.size()}, {"train_lines", train.size()}});
}

void cmd_build_data(Run& run) {
  const auto& cfg = run.cfg();
  run.require("train-bpe");
  const Vocabulary vocab = load_vocab(run);
  for (std::size_t c = 0; c < cfg.channels.size(); ++c) {
    ChannelSpec spec = cfg.channels[c];
    json stats = json::object();
    for (std::size_t s = 0; s < kSplits.size(); ++s) {
      ChannelSpec split_spec = spec;
      split_spec.seed = derive_seed(stage_seed(cfg, 0xDA7A, spec.seed), s);
      const auto lines = read_lines(run.path(split_path(kSplits[s])));
      const Dataset ds = build_dataset(lines, vocab, split_spec, cfg.n);
      write_nbest_jsonl(run.path(data_path(spec.label, kSplits[s])), ds.records);
      run.output(data_path(spec.label, kSplits[s]));
      stats[kSplits[s]] = ds.stats.to_json();
      run.event({{"event", "dataset"}, {"channel", spec.label}, {"split", kSplits[s]}, {"records", ds.records.size()}});
    }
    const std::string sp = "data/" + spec.label + "_stats.json";
    write_file_atomic(run.path(sp), stats.dump(2) + "\n");
    run.output(sp);
  }
  run.set("vocab_fingerprint", vocab.fingerprint());
}

std::vector<NBestList> union_split(Run& run, const std::vector<std::string>& labels, const std::string& split) {
  std::vector<NBestList> out;
  for (const auto& l : labels) {
    auto part = read_nbest_jsonl(run.path(data_path(l, split)));
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return out;
}

void cmd_train_sc(Run& run) {
  const auto& cfg = run.cfg();
  const json data_manifest = run.require("build-data");
  const Vocabulary vocab = load_vocab(run);
  check_vocab(data_manifest, vocab, "build-data");
  json logs = json::object();
  for (std::size_t k = 0; k < cfg.sc_models.size(); ++k) {
    const auto& spec = cfg.sc_models[k];
    const auto t0 = std::chrono::steady_clock::now();
    const auto train = union_split(run, spec.train_channels, "train");
    const auto dev = union_split(run, spec.train_channels, "dev");
    CorrectorConfig cc = cfg.corrector;
    cc.vocab_size = static_cast<int>(vocab.size());
    Corrector model = Corrector::create(cc, stage_seed(cfg, 0x5C, k));
    TrainConfig tc = cfg.sc_train;
    tc.seed = stage_seed(cfg, 0x5C7, cfg.sc_train.seed + k);
    const TrainLog log = train_corrector(model, train, dev, tc, [&](const json& e) {
      if (e.value("event", "") != "train" || e.value("step", 0) % 100 == 0) {
        json ev = e;
        ev["model"] = spec.name;
        run.event(ev);
      }
    });
    const std::string ckpt = "models/" + spec.name + ".ckpt";
    model.save(run.path(ckpt));
    run.output(ckpt);
    json lj = {{"best_step", log.best_step}, {"best_dev_loss", log.best_dev_loss}, {"early_stopped", log.early_stopped},
               {"steps", log.train_loss.size()}, {"dev_loss", log.dev_loss}, {"train_pairs_source", train.size()}};
    logs[spec.name] = lj;
    run.timing(spec.name, seconds_since(t0));
  }
  write_file_atomic(run.path("models/sc_log.json"), logs.dump(2) + "\n");
  run.output("models/sc_log.json");
  run.set("vocab_fingerprint", vocab.fingerprint());
}

std::vector<TokenSeq> encode_lines(const Vocabulary& vocab, const std::vector<std::string>& lines) {
  std::vector<TokenSeq> out;
  for (const auto& l : lines) {
    const auto words = split_words(l);
    if (words.empty() || words.size() > kMaxWordsPerLine) continue;
    out.push_back(encode(vocab, l));
  }
  return out;
}

void cmd_train_lm(Run& run) {
  const auto& cfg = run.cfg();
  const json bpe_manifest = run.require("train-bpe");
  const Vocabulary vocab = load_vocab(run);
  check_vocab(bpe_manifest, vocab, "train-bpe");
  const auto train = encode_lines(vocab, read_lines(run.path(split_path("train"))));
  const auto dev = encode_lines(vocab, read_lines(run.path(split_path("dev"))));
  LMConfig lc = cfg.lm;
  lc.vocab_size = static_cast<int>(vocab.size());
  LanguageModel lm = LanguageModel::create(lc, stage_seed(cfg, 0x1A));
  TrainConfig tc = cfg.lm_train;
  tc.seed = stage_seed(cfg, 0x1A7, cfg.lm_train.seed);
  const LMTrainLog log = train_lm(lm, train, dev, tc, [&](const json& e) { run.event(e); });
  lm.save(run.path("models/lm.ckpt"));
  run.output("models/lm.ckpt");
  const json lj = {{"initial_dev_perplexity", log.initial_dev_perplexity},
                   {"dev_perplexity", log.dev_perplexity},
                   {"best_epoch", log.best_epoch},
                   {"best_dev_perplexity", log.best_dev_perplexity},
                   {"early_stopped", log.early_stopped},
                   {"steps", log.train_loss.size()}};
  write_file_atomic(run.path("models/lm_log.json"), lj.dump(2) + "\n");
  run.output("models/lm_log.json");
  run.set("vocab_fingerprint", vocab.fingerprint());
}

std::string sc1_path(const std::string& model, const std::string& label) {
  return "decode/sc1_" + model + "_" + label + ".jsonl";
}

void cmd_decode(Run& run) {
  const auto& cfg = run.cfg();
  const json sc_manifest = run.require("train-sc");
  run.require("build-data");
  const Vocabulary vocab = load_vocab(run);
  check_vocab(sc_manifest, vocab, "train-sc");
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Corrector> models;
  for (const auto& s : cfg.sc_models) {
    models.push_back(Corrector::load(run.path("models/" + s.name + ".ckpt")));
    if (models.back().config().vocab_size != static_cast<int>(vocab.size())) {
      throw ArtifactError("model " + s.name + " vocabulary size differs from vocab.json; re-run `hypo train-sc`");
    }
  }
  // SC(1): beam of one over the top channel hypothesis.
  for (std::size_t k = 0; k < models.size(); ++k) {
    for (const auto& ch : cfg.channels) {
      const auto records = read_nbest_jsonl(run.path(data_path(ch.label, "test")));
      std::vector<json> out;
      for (const auto& r : records) {
        const auto best = beam_search(models[k], r.hyps.front().ids, 1);
        out.push_back({{"id", r.utterance_id}, {"tokens", best.front().tokens}, {"q", best.front().score}});
      }
      const std::string p = sc1_path(cfg.sc_models[k].name, ch.label);
      write_jsonl_atomic(run.path(p), out);
      run.output(p);
      if (k == 0 && ch.label == cfg.main_channel) run.timing("sc1_main", seconds_since(t0));
    }
  }
  // N×M lattices for the main model on the main channel.
  for (const std::string split : {"dev", "test"}) {
    const auto t1 = std::chrono::steady_clock::now();
    const auto records = read_nbest_jsonl(run.path(data_path(cfg.main_channel, split)));
    std::vector<CandidateLattice> lattices;
    for (std::size_t i = 0; i < records.size(); ++i) {
      lattices.push_back(expand_lattice(records[i], models.front(), cfg.m));
      if ((i + 1) % 100 == 0) run.event({{"event", "lattice"}, {"split", split}, {"done", i + 1}});
    }
    const std::string p = "decode/lattice_" + split + ".jsonl";
    write_lattices_jsonl(run.path(p), lattices);
    run.output(p);
    run.timing("lattice_" + split, seconds_since(t1));
  }
  run.set("vocab_fingerprint", vocab.fingerprint());
}

void cmd_rescore(Run& run) {
  const auto& cfg = run.cfg();
  const json lm_manifest = run.require("train-lm");
  run.require("decode");
  const Vocabulary vocab = load_vocab(run);
  check_vocab(lm_manifest, vocab, "train-lm");
  const LanguageModel lm = LanguageModel::load(run.path("models/lm.ckpt"));
  for (const std::string split : {"dev", "test"}) {
    auto lattices = read_lattices_jsonl(run.path("decode/lattice_" + split + ".jsonl"));
    for (auto& l : lattices) lm_rescore_lattice(l, lm);
    const std::string lp = "rescore/lattice_" + split + ".jsonl";
    write_lattices_jsonl(run.path(lp), lattices);
    run.output(lp);

    std::vector<json> scores;
    for (const auto& r : read_nbest_jsonl(run.path(data_path(cfg.main_channel, split)))) {
      std::vector<TokenSeq> seqs;
      for (const auto& h : r.hyps) seqs.push_back(h.ids);
      scores.push_back({{"id", r.utterance_id}, {"lm", lm.score_batch(seqs)}});
    }
    const std::string np = "rescore/nbest_lm_" + split + ".jsonl";
    write_jsonl_atomic(run.path(np), scores);
    run.output(np);
  }
  run.set("vocab_fingerprint", vocab.fingerprint());
}

std::map<std::string, std::vector<double>> read_lm_scores(const std::string& path) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& j : read_jsonl(path)) out[j.at("id").get<std::string>()] = j.at("lm").get<std::vector<double>>();
  return out;
}

std::vector<double> eq1_lambdas(const std::vector<Weights>& grid) {
  std::set<double> ls;
  for (const auto& w : grid) {
    if (w.lambda_las == 1.0 && w.lambda_sc == 0.0) ls.insert(w.lambda_lm);
  }
  return {ls.begin(), ls.end()};
}

double eq1_wer(const std::vector<NBestList>& records, const std::map<std::string, std::vector<double>>& lm,
               double lambda, const Vocabulary& vocab) {
  EditCounts total;
  std::size_t words = 0;
  for (const auto& r : records) {
    const std::size_t i = rescore_eq1(r, lm.at(r.utterance_id), lambda);
    const WerResult w = wer(normalize_words(decode(vocab, r.hyps[i].ids)), normalize_words(decode(vocab, r.truth)));
    total += w.counts;
    words += w.ref_words;
  }
  return static_cast<double>(total.total()) / static_cast<double>(std::max<std::size_t>(words, 1));
}

void cmd_sweep(Run& run) {
  const auto& cfg = run.cfg();
  run.require("rescore");
  run.require("build-data");
  const Vocabulary vocab = load_vocab(run);
  const auto dev = read_lattices_jsonl(run.path("rescore/lattice_dev.jsonl"));
  const SweepResult eq2 = sweep_weights(dev, cfg.grid, vocab);
  json table = json::array();
  for (const auto& g : eq2.table) table.push_back({{"weights", g.weights}, {"dev_wer", g.wer}});

  const auto records = read_nbest_jsonl(run.path(data_path(cfg.main_channel, "dev")));
  const auto lm = read_lm_scores(run.path("rescore/nbest_lm_dev.jsonl"));
  double best_lambda = 0.0, best_wer = 0.0;
  json eq1_table = json::array();
  bool have = false;
  for (double lambda : eq1_lambdas(cfg.grid)) {
    const double w = eq1_wer(records, lm, lambda, vocab);
    eq1_table.push_back({{"lambda", lambda}, {"dev_wer", w}});
    if (!have || w < best_wer) {
      best_wer = w;
      best_lambda = lambda;
      have = true;
    }
  }
  const json out = {{"eq2", {{"weights", eq2.best}, {"dev_wer", eq2.best_wer}, {"table", table}}},
                    {"eq1", {{"lambda", best_lambda}, {"dev_wer", best_wer}, {"table", eq1_table}}}};
  write_file_atomic(run.path("sweep/weights.json"), out.dump(2) + "\n");
  run.output("sweep/weights.json");
  run.event({{"event", "sweep"}, {"eq2", eq2.best}, {"eq2_dev_wer", eq2.best_wer}, {"eq1_lambda", best_lambda}});
}

json summary(const EvalReport& r) {
  json j = {{"corpus_wer", r.corpus_wer},
            {"sub", r.totals.sub},
            {"del", r.totals.del},
            {"ins", r.totals.ins},
            {"ref_words", r.ref_words}};
  if (r.oracle_wer >= 0.0) j["oracle_wer"] = r.oracle_wer;
  return j;
}

void cmd_evaluate(Run& run) {
  const auto& cfg = run.cfg();
  run.require("sweep");
  run.require("decode");
  run.require("rescore");
  const Vocabulary vocab = load_vocab(run);
  const json weights = json::parse(read_file(run.path("sweep/weights.json")));
  const Weights w2 = weights.at("eq2").at("weights").get<Weights>();
  const double lambda = weights.at("eq1").at("lambda").get<double>();
  const auto test_lines = read_lines(run.path(split_path("test")));

  const auto records = read_nbest_jsonl(run.path(data_path(cfg.main_channel, "test")));
  const TextById refs = refs_for(records, test_lines);
  const auto lm = read_lm_scores(run.path("rescore/nbest_lm_test.jsonl"));
  const auto lattices = read_lattices_jsonl(run.path("rescore/lattice_test.jsonl"));

  TextById top1, eq1, eq2, sc1;
  CandidatesById nbest_cands, lattice_cands;
  for (const auto& r : records) {
    top1[r.utterance_id] = decode(vocab, r.hyps.front().ids);
    eq1[r.utterance_id] = decode(vocab, r.hyps[rescore_eq1(r, lm.at(r.utterance_id), lambda)].ids);
    auto& c = nbest_cands[r.utterance_id];
    for (const auto& h : r.hyps) c.push_back(decode(vocab, h.ids));
  }
  for (const auto& l : lattices) {
    eq2[l.utterance_id] = decode(vocab, select_best(l, w2).cell->tokens);
    auto& c = lattice_cands[l.utterance_id];
    for (const auto& row : l.rows) {
      for (const auto& cell : row) c.push_back(decode(vocab, cell.tokens));
    }
  }
  for (const auto& j : read_jsonl(run.path(sc1_path(cfg.sc_models.front().name, cfg.main_channel)))) {
    sc1[j.at("id").get<std::string>()] = decode(vocab, j.at("tokens").get<TokenSeq>());
  }

  std::vector<EvalReport> reports = {
      evaluate_corpus(top1, refs, "top1", &nbest_cands), evaluate_corpus(sc1, refs, "sc1"),
      evaluate_corpus(eq1, refs, "eq1"), evaluate_corpus(eq2, refs, "eq2", &lattice_cands)};
  json systems = json::object();
  for (const auto& r : reports) {
    systems[r.system] = summary(r);
    const std::string p = "reports/systems/" + r.system + ".json";
    write_file_atomic(run.path(p), r.to_json().dump(1) + "\n");
    run.output(p);
  }

  // Every channel's test set against top-1 and each model's SC(1) output.
  json channels = json::object();
  for (const auto& ch : cfg.channels) {
    const auto ch_records = read_nbest_jsonl(run.path(data_path(ch.label, "test")));
    const TextById ch_refs = refs_for(ch_records, test_lines);
    TextById ch_top1;
    for (const auto& r : ch_records) ch_top1[r.utterance_id] = decode(vocab, r.hyps.front().ids);
    json models = json::object();
    for (const auto& s : cfg.sc_models) {
      TextById out;
      for (const auto& j : read_jsonl(run.path(sc1_path(s.name, ch.label)))) {
        out[j.at("id").get<std::string>()] = decode(vocab, j.at("tokens").get<TokenSeq>());
      }
      models[s.name] = evaluate_corpus(out, ch_refs, s.name).corpus_wer;
    }
    channels[ch.label] = {{"top1", evaluate_corpus(ch_top1, ch_refs, "top1").corpus_wer}, {"sc1", models}};
  }

  const auto wl = win_loss_report(top1, eq2, refs, cfg.win_loss_k);
  write_file_atomic(run.path("reports/win_loss.json"), win_loss_json(wl).dump(1) + "\n");
  write_file_atomic(run.path("reports/win_loss.txt"), format_win_loss(wl, "top1", "eq2"));
  run.output("reports/win_loss.json");
  run.output("reports/win_loss.txt");

  const json eval = {{"main_channel", cfg.main_channel},
                     {"n", cfg.n},
                     {"m", cfg.m},
                     {"test_utterances", records.size()},
                     {"weights", {{"eq2", w2}, {"eq1_lambda", lambda}}},
                     {"systems", systems},
                     {"oracle", {{"nbest", reports[0].oracle_wer}, {"lattice", reports[3].oracle_wer}}},
                     {"channels", channels}};
  write_file_atomic(run.path("reports/eval.json"), eval.dump(2) + "\n");
  run.output("reports/eval.json");
  run.event({{"event", "evaluate"}, {"systems", systems}});
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * x);
  return buf;
}

std::string rel(double base, double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.1f%%", base > 0 ? 100.0 * (x - base) / base : 0.0);
  return buf;
}

void cmd_report(Run& run) {
  const auto& cfg = run.cfg();
  run.require("evaluate");
  const json e = json::parse(read_file(run.path("reports/eval.json")));
  const json& s = e.at("systems");
  const double base = s.at("top1").at("corpus_wer").get<double>();
  std::string md = "# Correction report\n\n";
  md += "Test channel `" + e.at("main_channel").get<std::string>() + "`, N = " + std::to_string(cfg.n) +
        ", M = " + std::to_string(cfg.m) + ", " + std::to_string(e.at("test_utterances").get<std::size_t>()) +
        " utterances.\n\n";
  md += "## WER\n\n| system | WER % | vs top-1 |\n|---|---|---|\n";
  const std::vector<std::pair<std::string, std::string>> rows = {
      {"top1", "channel top-1"}, {"eq1", "top-1 + LM rescoring"}, {"sc1", "SC (1)"},
      {"eq2", "SC (N×M) + LM, log-linear"}};
  for (const auto& [key, label] : rows) {
    const double w = s.at(key).at("corpus_wer").get<double>();
    md += "| " + label + " | " + fmt(w) + " | " + rel(base, w) + " |\n";
  }
  const Weights w2 = e.at("weights").at("eq2").get<Weights>();
  char buf[160];
  std::snprintf(buf, sizeof buf, "\nWeights: las %.2f, sc %.2f, lm %.2f; n-best LM lambda %.2f.\n", w2.lambda_las,
                w2.lambda_sc, w2.lambda_lm, e.at("weights").at("eq1_lambda").get<double>());
  md += buf;
  const double on = e.at("oracle").at("nbest").get<double>(), ol = e.at("oracle").at("lattice").get<double>();
  md += "\n## Oracle WER\n\n| list | oracle WER % |\n|---|---|\n";
  md += "| channel " + std::to_string(cfg.n) + "-best | " + fmt(on) + " |\n";
  md += "| lattice " + std::to_string(cfg.n) + "×" + std::to_string(cfg.m) + " | " + fmt(ol) + " (" + rel(on, ol) +
        ") |\n";
  md += "\n## SC (1) by test channel\n\n| channel | top-1 |";
  for (const auto& m : cfg.sc_models) md += " " + m.name + " |";
  md += "\n|---|---|";
  for (std::size_t i = 0; i < cfg.sc_models.size(); ++i) md += "---|";
  md += "\n";
  for (const auto& [label, c] : e.at("channels").items()) {
    md += "| " + label + " | " + fmt(c.at("top1").get<double>()) + " |";
    for (const auto& m : cfg.sc_models) md += " " + fmt(c.at("sc1").at(m.name).get<double>()) + " |";
    md += "\n";
  }
  md += "\n## Wins of the log-linear system over top-1\n\n```\n" + read_file(run.path("reports/win_loss.txt")) + "```\n";
  write_file_atomic(run.path("reports/report.md"), md);
  run.output("reports/report.md");
}

}  // namespace

EvalReport evaluate_text_files(const std::string& hyp_path, const std::string& ref_path, const std::string& out_path) {
  for (const auto& p : {hyp_path, ref_path}) {
    if (!fs::exists(p)) throw ConfigError("file not found: " + p);
  }
  auto by_line = [](const std::vector<std::string>& lines) {
    TextById m;
    char id[32];
    for (std::size_t i = 0; i < lines.size(); ++i) {
      std::snprintf(id, sizeof id, "%06zu", i);
      m[id] = lines[i];
    }
    return m;
  };
  const EvalReport r = evaluate_corpus(by_line(read_lines(hyp_path)), by_line(read_lines(ref_path)), hyp_path);
  if (!out_path.empty()) {
    fs::create_directories(fs::absolute(out_path).parent_path());
    write_file_atomic(out_path, r.to_json().dump(1) + "\n");
  }
  return r;
}

void run_command(const std::string& command, const PipelineConfig& cfg, const RunOptions& opts) {
  static const std::map<std::string, void (*)(Run&)> table = {
      {"train-bpe", cmd_train_bpe}, {"build-data", cmd_build_data}, {"train-sc", cmd_train_sc},
      {"train-lm", cmd_train_lm},   {"decode", cmd_decode},         {"rescore", cmd_rescore},
      {"sweep", cmd_sweep},         {"evaluate", cmd_evaluate},     {"report", cmd_report}};
  auto it = table.find(command);
  if (it == table.end()) throw ConfigError("unknown command \"" + command + "\"");
  cfg.validate();
  Run run(command, cfg, opts);
  it->second(run);
  run.finish();
}

}  // namespace hypo
