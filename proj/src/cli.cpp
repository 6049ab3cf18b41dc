#include "mhc/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <ctime>
#include <deque>
#include <fstream>
#include <json.hpp>
#include <sstream>

namespace mhc {
namespace {

const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& kv : {ModelConfig{}.to_key_values(), TrainConfig{}.to_key_values(),
                           BenchConfig{}.to_key_values(), DataConfig{}.to_key_values(),
                           RunConfig{}.to_key_values()})
      for (const auto& [key, value] : kv) k.push_back(key);
    return k;
  }();
  return keys;
}

std::string timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  MHC_CHECK(out.good(), DataError, "cannot write " + path.string());
  out << text;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  return cells;
}

// Options shared by every config-driven subcommand.
struct ConfigFlags {
  std::string config_path;
  struct Entry {
    std::vector<std::string> keys;
    CLI::Option* opt = nullptr;
    std::string value;
  };
  std::deque<Entry> entries;
  bool mixed_precision = false;
  CLI::Option* mixed_opt = nullptr;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    for (const auto& key : known_keys()) {
      entries.push_back({{key}, nullptr, {}});
      entries.back().opt = app->add_option("--" + key, entries.back().value)->group("Config keys");
    }
    const std::vector<std::pair<std::string, std::vector<std::string>>> aliases{
        {"--variant", {"model.variant"}},    {"--streams,-n", {"model.streams"}},
        {"--layers", {"model.layers"}},      {"--d-model", {"model.d_model"}},
        {"--seq-len", {"model.seq_len"}},    {"--rank", {"model.adapter_rank"}},
        {"--epochs", {"train.epochs"}},      {"--batch,-b", {"train.batch"}},
        {"--lr", {"train.lr"}},              {"--steps", {"train.max_steps"}},
        {"--eval-interval", {"train.eval_interval"}},
        {"--seed", {"model.seed", "train.seed"}},
        {"--tokenizer", {"data.tokenizer"}}, {"--train", {"data.train"}},
        {"--valid", {"data.valid"}},         {"--vocab-file", {"data.vocab_file"}},
        {"--merges-file", {"data.merges_file"}},
        {"--out,-o", {"run.out"}},
    };
    for (const auto& [flag, keys] : aliases) {
      entries.push_back({keys, nullptr, {}});
      entries.back().opt = app->add_option(flag, entries.back().value)->group("Shortcuts");
    }
    mixed_opt = app->add_flag("--mixed-precision", mixed_precision, "emulated fp16 with loss scaling")
                    ->group("Shortcuts");
  }

  KeyValues flags() const {
    KeyValues kv;
    // Shortcuts first so fully dotted flags win on conflict.
    for (auto it = entries.rbegin(); it != entries.rend(); ++it)
      if (it->opt->count() > 0)
        for (const auto& k : it->keys) kv[k] = it->value;
    if (mixed_opt->count() > 0) kv["train.mixed_precision"] = mixed_precision ? "true" : "false";
    return kv;
  }

  KeyValues file() const { return config_path.empty() ? KeyValues{} : read_key_values(config_path); }
};

void echo_config(const std::filesystem::path& run_dir, const ResolvedConfig& cfg, std::ostream& out) {
  const auto text = format_key_values(cfg.to_key_values());
  write_file(run_dir / "config.resolved", text);
  out << "run directory: " << run_dir.string() << "\n" << text;
}

ResolvedConfig resolve_for_checkpoint(const ConfigFlags& f, const CheckpointBundle& ckpt) {
  const KeyValues base = parse_key_values(ckpt.config_text);
  ResolvedConfig cfg = resolve_config(f.file(), f.flags(), base);
  ModelConfig stored;
  stored.apply(base);
  MHC_CHECK(cfg.model == stored, ConfigError,
            "model.* settings come from the checkpoint and cannot be overridden");
  return cfg;
}

void check_vocab_locked(const ResolvedConfig& cfg, const Tokenizer& tok) {
  MHC_CHECK(cfg.model.vocab == tok.vocab_size(), ConfigError,
            "checkpoint vocabulary " + std::to_string(cfg.model.vocab) + " does not match tokenizer " +
                std::to_string(tok.vocab_size()));
}

int cmd_prepare(const ConfigFlags& f, std::ostream& out) {
  ResolvedConfig cfg = resolve_config(f.file(), f.flags());
  LoadedCorpus corpus = load_corpus(cfg.data, cfg.model.seq_len);
  reconcile_vocab(cfg, corpus.tokenizer);
  const auto run_dir = make_run_dir(cfg.run.out, "prepare", cfg.data.tokenizer);
  echo_config(run_dir, cfg, out);
  save_token_cache(run_dir / "train.tokens", corpus.train.tokens(), corpus.tokenizer.vocab_size());
  save_token_cache(run_dir / "valid.tokens", corpus.valid.tokens(), corpus.tokenizer.vocab_size());
  nlohmann::json stats{{"vocab", corpus.tokenizer.vocab_size()},
                       {"train_tokens", corpus.train.tokens().size()},
                       {"valid_tokens", corpus.valid.tokens().size()},
                       {"seq_len", cfg.model.seq_len},
                       {"train_samples", corpus.train.samples()},
                       {"valid_samples", corpus.valid.samples()}};
  write_file(run_dir / "stats.json", stats.dump(2) + "\n");
  out << stats.dump() << "\n";
  return 0;
}

int cmd_train(const ConfigFlags& f, const std::string& resume, std::ostream& out) {
  ResolvedConfig cfg = resolve_config(f.file(), f.flags());
  LoadedCorpus corpus = load_corpus(cfg.data, cfg.model.seq_len);
  reconcile_vocab(cfg, corpus.tokenizer);
  cfg.validate();
  LanguageModel<float> model(cfg.model);
  Trainer<float> trainer(model, cfg.train, corpus.train, corpus.valid);
  if (!resume.empty()) trainer.restore(load_checkpoint(resume));
  const auto run_dir = make_run_dir(cfg.run.out, "train", to_string(cfg.model.variant));
  echo_config(run_dir, cfg, out);
  out << "parameters: " << model.parameter_count() << ", steps: " << trainer.total_steps()
      << " (" << trainer.steps_per_epoch() << " per epoch)\n";
  CsvMetricsSink csv(run_dir / "metrics.csv");
  ConsoleMetricsSink console(out, to_string(cfg.model.variant));
  const auto summary = trainer.run({&csv, &console}, run_dir / "checkpoints");
  emit_training_curves(run_dir);
  out << "final validation loss " << format_double(summary.final_eval.loss) << ", ppl "
      << format_double(summary.final_eval.ppl) << "\n";
  return 0;
}

int cmd_eval(const ConfigFlags& f, const std::string& checkpoint, std::ostream& out) {
  const auto bundle = load_checkpoint(checkpoint);
  ResolvedConfig cfg = resolve_for_checkpoint(f, bundle);
  LoadedCorpus corpus = load_corpus(cfg.data, cfg.model.seq_len);
  check_vocab_locked(cfg, corpus.tokenizer);
  LanguageModel<float> model(cfg.model);
  model.import_parameters(bundle.params);
  const auto r = evaluate(model, corpus.valid, cfg.train.batch, cfg.train.mixed_precision);
  const auto run_dir = make_run_dir(cfg.run.out, "eval", to_string(cfg.model.variant));
  echo_config(run_dir, cfg, out);
  nlohmann::json j{{"checkpoint", checkpoint}, {"val_loss", r.loss}, {"ppl", r.ppl}, {"tokens", r.tokens}};
  write_file(run_dir / "eval.json", j.dump(2) + "\n");
  out << "val_loss " << format_double(r.loss) << " ppl " << format_double(r.ppl) << " over " << r.tokens
      << " tokens\n";
  return 0;
}

int cmd_bench(const ConfigFlags& f, const std::string& checkpoint, std::ostream& out) {
  const auto bundle = load_checkpoint(checkpoint);
  ResolvedConfig cfg = resolve_for_checkpoint(f, bundle);
  LoadedCorpus corpus = load_corpus(cfg.data, cfg.model.seq_len);
  check_vocab_locked(cfg, corpus.tokenizer);
  LanguageModel<float> model(cfg.model);
  Trainer<float> trainer(model, cfg.train, corpus.train, corpus.valid);
  trainer.restore(bundle);
  const auto run_dir = make_run_dir(cfg.run.out, "bench", to_string(cfg.model.variant));
  echo_config(run_dir, cfg, out);
  const auto report = run_fair_bench(trainer, model, corpus.valid, cfg.bench, to_string(cfg.model.variant));
  append_bench_jsonl(run_dir / "bench.jsonl", report);
  const auto table = format_bench_table({report});
  write_file(run_dir / "report.txt", table);
  out << table;
  return 0;
}

int cmd_compare(const std::vector<std::string>& inputs, const std::string& out_dir, std::ostream& out) {
  MHC_CHECK(!inputs.empty(), ConfigError, "compare needs run directories or bench.jsonl files");
  std::vector<BenchReport> reports;
  std::string curves;
  for (const auto& in : inputs) {
    const std::filesystem::path p(in);
    bool found = false;
    if (std::filesystem::is_directory(p)) {
      if (std::filesystem::exists(p / "bench.jsonl")) {
        for (auto& r : read_bench_jsonl(p / "bench.jsonl")) reports.push_back(std::move(r));
        found = true;
      }
      if (std::filesystem::exists(p / "curves.csv")) {
        std::istringstream lines(read_text_file(p / "curves.csv"));
        std::string line;
        std::getline(lines, line);  // header
        while (std::getline(lines, line))
          if (!line.empty()) curves += line + "\n";
        found = true;
      }
    } else if (std::filesystem::is_regular_file(p)) {
      for (auto& r : read_bench_jsonl(p)) reports.push_back(std::move(r));
      found = true;
    }
    MHC_CHECK(found, DataError, "compare: nothing to read in " + in + " (expected bench.jsonl or curves.csv)");
  }
  const auto run_dir = make_run_dir(out_dir, "compare", "all");
  out << "run directory: " << run_dir.string() << "\n";
  if (!curves.empty()) write_file(run_dir / "curves.csv", "variant,step,val_loss,ppl\n" + curves);
  if (reports.size() >= 2) {
    const auto rows = compare_variants(reports);
    const auto table = format_comparison_table(rows);
    write_file(run_dir / "comparison.txt", table);
    std::string jsonl;
    for (const auto& row : rows) {
      auto j = nlohmann::json::parse(to_json_line(row.report));
      auto pack_deltas = [](const MetricDeltas& d) {
        auto one = [](const Delta& x) { return nlohmann::json{{"abs", x.abs}, {"pct", x.pct}}; };
        return nlohmann::json{{"val_loss", one(d.val_loss)},
                              {"ppl", one(d.ppl)},
                              {"tokens_per_sec", one(d.tokens_per_sec)},
                              {"peak_mem", one(d.peak_mem)}};
      };
      j["vs_first"] = pack_deltas(row.vs_first);
      j["vs_previous"] = pack_deltas(row.vs_previous);
      jsonl += j.dump() + "\n";
    }
    write_file(run_dir / "comparison.jsonl", jsonl);
    out << table;
  } else {
    MHC_CHECK(!curves.empty(), DataError, "compare: need at least two bench reports");
  }
  return 0;
}

}  // namespace

void DataConfig::validate() const {
  MHC_CHECK(tokenizer == "byte" || tokenizer == "gpt2", ConfigError,
            "data.tokenizer must be byte or gpt2, got '" + tokenizer + "'");
  MHC_CHECK(tokenizer != "gpt2" || (!vocab_file.empty() && !merges_file.empty()), ConfigError,
            "data.tokenizer = gpt2 needs data.vocab_file and data.merges_file");
  MHC_CHECK(synthetic_bytes > 0 || (!train.empty() && !valid.empty()), ConfigError,
            "data.train and data.valid are required unless data.synthetic_bytes is set");
}

KeyValues DataConfig::to_key_values() const {
  return {{"data.tokenizer", tokenizer},      {"data.vocab_file", vocab_file},
          {"data.merges_file", merges_file},  {"data.train", train},
          {"data.valid", valid},              {"data.cache_dir", cache_dir},
          {"data.synthetic_bytes", std::to_string(synthetic_bytes)},
          {"data.synthetic_seed", std::to_string(synthetic_seed)}};
}

void DataConfig::apply(const KeyValues& kv) {
  for (const auto& [key, value] : kv) {
    if (key.rfind("data.", 0) != 0) continue;
    const std::string field = key.substr(5);
    if (field == "tokenizer") tokenizer = value;
    else if (field == "vocab_file") vocab_file = value;
    else if (field == "merges_file") merges_file = value;
    else if (field == "train") train = value;
    else if (field == "valid") valid = value;
    else if (field == "cache_dir") cache_dir = value;
    else if (field == "synthetic_bytes") synthetic_bytes = parse_size(key, value);
    else if (field == "synthetic_seed") synthetic_seed = parse_u64(key, value);
    else throw ConfigError("unknown config key " + key);
  }
}

KeyValues RunConfig::to_key_values() const { return {{"run.out", out}}; }

void RunConfig::apply(const KeyValues& kv) {
  for (const auto& [key, value] : kv) {
    if (key.rfind("run.", 0) != 0) continue;
    if (key == "run.out") out = value;
    else throw ConfigError("unknown config key " + key);
  }
}

KeyValues ResolvedConfig::to_key_values() const {
  KeyValues kv = model.to_key_values();
  kv.merge(train.to_key_values());
  kv.merge(bench.to_key_values());
  kv.merge(data.to_key_values());
  kv.merge(run.to_key_values());
  return kv;
}

void ResolvedConfig::validate() const {
  model.validate();
  train.validate();
  bench.validate();
  data.validate();
}

ResolvedConfig resolve_config(const KeyValues& file, const KeyValues& flags, const KeyValues& base) {
  ResolvedConfig cfg;
  KeyValues merged = base;
  for (const auto* layer : {&file, &flags}) {
    for (const auto& [key, value] : *layer) {
      const auto dot = key.find('.');
      const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
      MHC_CHECK(section == "model" || section == "train" || section == "bench" || section == "data" ||
                    section == "run",
                ConfigError, "unknown config key " + key);
      merged[key] = value;
      cfg.explicit_keys[key] = value;
    }
  }
  cfg.model.apply(merged);
  cfg.train.apply(merged);
  cfg.bench.apply(merged);
  cfg.data.apply(merged);
  cfg.run.apply(merged);
  if (cfg.model.variant == Variant::baseline) {
    if (cfg.is_explicit("model.streams")) {
      MHC_CHECK(cfg.model.streams <= 1, ConfigError,
                "baseline has a single residual stream; model.streams = " +
                    std::to_string(cfg.model.streams) + " is only valid for mhc variants");
    } else if (!base.count("model.streams")) {
      cfg.model.streams = 1;
    }
  }
  cfg.model.validate();
  cfg.train.validate();
  cfg.bench.validate();
  return cfg;
}

LoadedCorpus load_corpus(const DataConfig& data, std::size_t seq_len) {
  data.validate();
  Tokenizer tok = data.tokenizer == "gpt2" ? Tokenizer::load_bpe(data.vocab_file, data.merges_file)
                                           : Tokenizer::byte_fallback();
  std::vector<TokenId> train, valid;
  if (data.synthetic_bytes > 0) {
    train = tok.encode(synthetic_corpus(data.synthetic_bytes, data.synthetic_seed));
    valid = tok.encode(synthetic_corpus(std::max<std::size_t>(data.synthetic_bytes / 10, 4 * seq_len + 64),
                                        data.synthetic_seed + 1));
  } else {
    auto cache_for = [&](const std::string& file) -> std::filesystem::path {
      if (data.cache_dir.empty()) return {};
      return std::filesystem::path(data.cache_dir) /
             (std::filesystem::path(file).filename().string() + "." + data.tokenizer + ".tokens");
    };
    train = tokenize_file(tok, data.train, cache_for(data.train));
    valid = tokenize_file(tok, data.valid, cache_for(data.valid));
  }
  return {std::move(tok), pack(std::move(train), seq_len), pack(std::move(valid), seq_len)};
}

void reconcile_vocab(ResolvedConfig& cfg, const Tokenizer& tok) {
  if (cfg.is_explicit("model.vocab")) {
    MHC_CHECK(cfg.model.vocab == tok.vocab_size(), ConfigError,
              "model.vocab = " + std::to_string(cfg.model.vocab) + " but the tokenizer has " +
                  std::to_string(tok.vocab_size()) + " ids");
  }
  cfg.model.vocab = tok.vocab_size();
}

void emit_training_curves(const std::filesystem::path& run_dir) {
  const auto metrics = run_dir / "metrics.csv";
  MHC_CHECK(std::filesystem::exists(metrics), DataError, "missing " + metrics.string());
  std::string variant = "unknown";
  if (std::filesystem::exists(run_dir / "config.resolved")) {
    const auto kv = read_key_values(run_dir / "config.resolved");
    if (auto it = kv.find("model.variant"); it != kv.end()) variant = it->second;
  }
  std::istringstream lines(read_text_file(metrics));
  std::string line;
  std::getline(lines, line);
  MHC_CHECK(line == "step,split,loss,ppl,elapsed_s", DataError, "unexpected metrics header in " + metrics.string());
  std::string out = "variant,step,val_loss,ppl\n";
  while (std::getline(lines, line)) {
    const auto cells = split_csv(line);
    if (cells.size() != 5 || cells[1] != "valid") continue;
    out += variant + "," + cells[0] + "," + cells[2] + "," + cells[3] + "\n";
  }
  write_file(run_dir / "curves.csv", out);
}

std::filesystem::path make_run_dir(const std::filesystem::path& out, const std::string& command,
                                   const std::string& tag) {
  const std::string stem = command + "-" + tag + "-" + timestamp();
  std::filesystem::path dir = out / stem;
  for (int k = 1; std::filesystem::exists(dir); ++k) dir = out / (stem + "-" + std::to_string(k));
  std::filesystem::create_directories(dir);
  return dir;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return 2;
    case ErrorKind::data: return 3;
    case ErrorKind::numeric: return 4;
    case ErrorKind::shape:
    case ErrorKind::internal: return 5;
  }
  return 5;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"mHC-SSM language model toolkit"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::simple);

  ConfigFlags prepare_f, train_f, eval_f, bench_f;
  auto* prepare = app.add_subcommand("prepare", "tokenize and pack the corpus splits, write token caches");
  prepare_f.attach(prepare);
  auto* train = app.add_subcommand("train", "train one variant, logging metrics and checkpoints");
  train_f.attach(train);
  std::string resume;
  train->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  auto* eval = app.add_subcommand("eval", "validation loss and perplexity of a checkpoint");
  eval_f.attach(eval);
  std::string eval_ckpt, bench_ckpt;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  auto* bench = app.add_subcommand("bench", "checkpoint-fair throughput, memory and perplexity benchmark");
  bench_f.attach(bench);
  bench->add_option("--checkpoint", bench_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  auto* compare = app.add_subcommand("compare", "compare bench reports and gather training curves");
  std::vector<std::string> inputs;
  std::string compare_out = "runs";
  compare->add_option("runs", inputs, "run directories or bench.jsonl files")->required();
  compare->add_option("--out,-o", compare_out, "output directory");
  auto* selftest = app.add_subcommand("selftest", "run the invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*prepare) return cmd_prepare(prepare_f, out);
    if (*train) return cmd_train(train_f, resume, out);
    if (*eval) return cmd_eval(eval_f, eval_ckpt, out);
    if (*bench) return cmd_bench(bench_f, bench_ckpt, out);
    if (*compare) return cmd_compare(inputs, compare_out, out);
    if (*selftest) return run_selftest(out) ? 0 : 4;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 5;
  }
  return 5;
}

}  // namespace mhc
