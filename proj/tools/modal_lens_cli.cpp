// modal-lens: pipeline driver for the synthetic audio-visual task.
//
// Subcommands: gen, train, sweep, probe, compare, pair. Every command
// writes its artifacts into --out and finishes by writing
// run_manifest.json (the commit marker); all randomness derives from
// --seed. Exit codes: 0 success, 2 input/config error, 3 numeric failure.

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mlens/checkpoint.hpp"
#include "mlens/counterfactual.hpp"
#include "mlens/distshift.hpp"
#include "mlens/interventions.hpp"
#include "mlens/model.hpp"
#include "mlens/parallel.hpp"
#include "mlens/probing.hpp"
#include "mlens/synthlab.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mlens;

namespace {

// ---------------------------------------------------------------- logging

enum class LogLevel { Debug = 0, Info = 1, Warn = 2, Error = 3 };

LogLevel log_level() {
  static LogLevel lvl = [] {
    const char* env = std::getenv("MODAL_LENS_LOG");
    std::string s = env ? env : "warn";
    if (s == "debug") return LogLevel::Debug;
    if (s == "info") return LogLevel::Info;
    if (s == "error") return LogLevel::Error;
    return LogLevel::Warn;
  }();
  return lvl;
}

void log(LogLevel lvl, const std::string& msg) {
  if (lvl < log_level()) return;
  static const char* names[] = {"debug", "info", "warn", "error"};
  std::fprintf(stderr, "[modal-lens %s] %s\n", names[static_cast<int>(lvl)], msg.c_str());
}

void log_info(const std::string& msg) { log(LogLevel::Info, msg); }

// ------------------------------------------------------------------- I/O

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write file: " + path.string());
  out << content;
  if (!out) throw ConfigError("write failed: " + path.string());
}

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

// Tracks emitted artifacts and writes run_manifest.json as the final step,
// so a present manifest marks a completed run.
struct Manifest {
  std::string command;
  fs::path out_dir;
  uint64_t seed = 0;
  std::vector<std::string> config_paths;
  std::vector<std::string> checkpoint_paths;
  std::vector<std::string> artifacts;  // paths relative to out_dir

  fs::path emit(const std::string& name, const std::string& content) {
    fs::path p = out_dir / name;
    write_file(p, content);
    artifacts.push_back(name);
    log_info(command + ": wrote " + name);
    return p;
  }

  void finish() {
    std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    json j;
    j["artifact_format_version"] = 1;
    j["command"] = command;
    j["out_dir"] = out_dir.string();
    j["seed"] = seed;
    j["config_paths"] = config_paths;
    j["checkpoint_paths"] = checkpoint_paths;
    j["artifacts"] = artifacts;
    j["timestamp"] = stamp;
    write_file(out_dir / "run_manifest.json", j.dump(2) + "\n");
  }
};

Manifest make_manifest(const std::string& command, const std::string& out, uint64_t seed) {
  fs::create_directories(out);
  Manifest m;
  m.command = command;
  m.out_dir = out;
  m.seed = seed;
  return m;
}

std::string split_filename(Split split) {
  switch (split) {
    case Split::Train: return "train.jsonl";
    case Split::FactualEval: return "factual.jsonl";
    case Split::CounterfactualEval: return "counterfactual.jsonl";
  }
  throw ConfigError("unknown split");
}

std::vector<SceneSample> load_dataset(const std::string& dataset_dir, Split split) {
  fs::path p = fs::path(dataset_dir) / split_filename(split);
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot read dataset file: " + p.string());
  std::vector<SceneSample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(sample_from_jsonl(line));
  }
  if (out.empty()) throw ConfigError("dataset file is empty: " + p.string());
  return out;
}

int num_classes_of(const Parameters& params) {
  int v = params.config.vocab_size;
  if (v < 6 || (v - 4) % 2 != 0) throw ConfigError("checkpoint vocabulary does not match the task layout");
  return (v - 4) / 2;
}

// ------------------------------------------------------------------- gen

int cmd_gen(const std::string& config_path, uint64_t seed, const std::string& out) {
  std::string text = read_file(config_path);
  TaskConfig task = TaskConfig::from_json(text);
  json j = json::parse(text);
  int num_train = j.value("num_train", 512);
  int num_eval = j.value("num_eval", 128);
  if (num_train <= 0 || num_eval <= 0) throw ConfigError("num_train and num_eval must be positive");

  Manifest m = make_manifest("gen", out, seed);
  m.config_paths.push_back(config_path);

  for (Split split : {Split::Train, Split::FactualEval, Split::CounterfactualEval}) {
    int n = split == Split::Train ? num_train : num_eval;
    std::string body;
    for (const SceneSample& s : gen_dataset(task, n, split, seed)) body += sample_to_jsonl(s) + "\n";
    m.emit(split_filename(split), body);
  }
  // Copy of the resolved task config so downstream commands are
  // self-contained on the dataset directory.
  m.emit("task_config.json", task.to_json() + "\n");
  m.finish();
  return 0;
}

// ----------------------------------------------------------------- train

int cmd_train(const std::string& config_path, const std::string& dataset_dir, uint64_t seed, const std::string& out,
              bool resume) {
  if (resume) throw ConfigError("--resume is not supported; training always starts from a fresh initialization");
  json j;
  try {
    j = json::parse(read_file(config_path));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed train config JSON: ") + e.what());
  }
  if (!j.contains("model")) throw ConfigError("train config missing field: model");
  if (!j.contains("train")) throw ConfigError("train config missing field: train");
  ModelConfig mc = ModelConfig::from_json(j.at("model").dump());
  TrainConfig tc = TrainConfig::from_json(j.at("train").dump());
  tc.seed = seed;

  std::vector<SceneSample> data = load_dataset(dataset_dir, Split::Train);
  Parameters params = Parameters::init(mc, Rng(seed).stream("init"));
  log_info("train: " + std::to_string(tc.steps) + " steps over " + std::to_string(data.size()) + " samples");
  std::vector<double> losses = train(params, data, tc);

  Manifest m = make_manifest("train", out, seed);
  m.config_paths.push_back(config_path);

  std::string csv = "step,loss\n";
  for (size_t i = 0; i < losses.size(); ++i) csv += std::to_string(i) + "," + fmt(losses[i]) + "\n";
  m.emit("loss.csv", csv);

  fs::path ckpt = m.out_dir / "model.ckpt";
  save_checkpoint(params, ckpt.string());
  m.artifacts.push_back("model.ckpt");
  m.checkpoint_paths.push_back(ckpt.string());
  log_info("train: wrote model.ckpt (final loss " + fmt(losses.back()) + ")");
  m.finish();
  return 0;
}

// ----------------------------------------------------------------- sweep

int cmd_sweep(const std::string& ckpt_path, const std::string& dataset_dir, const std::string& spec_path,
              const std::string& query_name, const std::string& split_name, const std::string& out, int threads,
              uint64_t seed) {
  Parameters params = load_checkpoint(ckpt_path);
  KnockoutSpec tmpl = KnockoutSpec::from_json(read_file(spec_path));
  QueryType query = query_from_string(query_name);
  std::vector<SceneSample> samples = load_dataset(dataset_dir, split_from_string(split_name));

  auto metric = [&](int i, const std::optional<KnockoutSpec>& spec) {
    return eval_one(params, samples[i], query, spec);
  };
  SweepResult r = knockout_sweep(tmpl, params.config.num_layers, static_cast<int>(samples.size()), metric, threads);

  Manifest m = make_manifest("sweep", out, seed);
  m.config_paths.push_back(spec_path);
  m.checkpoint_paths.push_back(ckpt_path);
  std::string csv = "center_layer,metric,baseline\n";
  for (size_t c = 0; c < r.per_center.size(); ++c)
    csv += std::to_string(c) + "," + fmt(r.per_center[c]) + "," + fmt(r.baseline) + "\n";
  csv += "baseline," + fmt(r.baseline) + "," + fmt(r.baseline) + "\n";
  m.emit("sweep.csv", csv);
  m.finish();
  return 0;
}

// ----------------------------------------------------------------- probe

int cmd_probe(const std::string& ckpt_path, const std::string& dataset_dir, const std::string& query_name,
              const std::string& split_name, int k, const std::string& out, int threads, uint64_t seed) {
  Parameters params = load_checkpoint(ckpt_path);
  QueryType query = query_from_string(query_name);
  std::vector<SceneSample> samples = load_dataset(dataset_dir, split_from_string(split_name));
  TaskVocab vocab(num_classes_of(params));
  const int L = params.config.num_layers;
  const int lens_lo = std::max(0, L - 4);  // last five traced layers, 0..L inclusive

  struct PerSample {
    std::vector<AttentionSummary> attention;
    std::vector<LogitLensRecord> lens;
    double recall = 0.0;
    double correct = 0.0;
  };
  std::vector<PerSample> results(samples.size());

  LensOptions opts;
  opts.k = k;
  parallel_for(samples.size(), threads, [&](size_t i) {
    EncodedSample enc = encode_sample(params, samples[i], query);
    GenerateResult g = generate_greedy(params, enc.input, static_cast<int>(enc.full_targets.size()));
    PerSample& r = results[i];
    r.attention = attention_by_group(g.trace, g.final_input.layout);
    r.lens = logit_lens(g.trace, params, g.final_input.layout.audio_positions, opts);
    r.recall = latent_recall(r.lens, {vocab.audio_label(samples[i].audio_class)}, lens_lo, L);
    r.correct = g.tokens.size() >= enc.label_targets.size() &&
                        std::equal(enc.label_targets.begin(), enc.label_targets.end(), g.tokens.begin())
                    ? 1.0
                    : 0.0;
  });

  // Mean attention share per (layer, group) over samples.
  std::vector<std::map<std::string, double>> shares(L);
  for (const PerSample& r : results)
    for (const AttentionSummary& a : r.attention)
      for (const auto& [group, share] : a.shares) shares[a.layer][group] += share / results.size();

  double mean_recall = 0.0, accuracy = 0.0;
  for (const PerSample& r : results) {
    mean_recall += r.recall / results.size();
    accuracy += r.correct / results.size();
  }

  Manifest m = make_manifest("probe", out, seed);
  m.checkpoint_paths.push_back(ckpt_path);

  std::string csv = "layer,group,share\n";
  for (int l = 0; l < L; ++l)
    for (const auto& [group, share] : shares[l]) csv += std::to_string(l) + "," + group + "," + fmt(share) + "\n";
  m.emit("attention.csv", csv);

  json lens_json = json::array();
  for (size_t i = 0; i < results.size(); ++i) {
    json recs = json::array();
    for (const LogitLensRecord& rec : results[i].lens) {
      json top = json::array();
      for (const auto& [tok, logit] : rec.top_k) top.push_back({tok, logit});
      recs.push_back({{"layer", rec.layer}, {"position", rec.position}, {"top_k", top}});
    }
    lens_json.push_back({{"sample", i}, {"records", recs}});
  }
  m.emit("logit_lens.json", lens_json.dump(2) + "\n");

  json summary;
  summary["query"] = query_name;
  summary["split"] = split_name;
  summary["k"] = k;
  summary["lens_layer_lo"] = lens_lo;
  summary["lens_layer_hi"] = L;
  summary["latent_recall"] = mean_recall;
  summary["generated_accuracy"] = accuracy;
  summary["num_samples"] = samples.size();
  m.emit("summary.json", summary.dump(2) + "\n");
  m.finish();
  return 0;
}

// --------------------------------------------------------------- compare

int cmd_compare(const std::string& full_ckpt, const std::string& base_ckpt, const std::string& dataset_dir,
                const std::string& query_name, const std::string& split_name, const std::string& out, int threads,
                uint64_t seed) {
  Parameters full = load_checkpoint(full_ckpt);
  Parameters base = load_checkpoint(base_ckpt);
  QueryType query = query_from_string(query_name);
  std::vector<SceneSample> samples = load_dataset(dataset_dir, split_from_string(split_name));
  TaskVocab vocab(num_classes_of(full));

  std::vector<std::vector<DistributionComparison>> per_sample(samples.size());
  parallel_for(samples.size(), threads, [&](size_t i) {
    EncodedSample fin = encode_sample(full, samples[i], query);
    EncodedSample bin = encode_sample(base, samples[i], query);
    per_sample[i] =
        compare_models(full, base, fin.input, bin.input, static_cast<int>(fin.full_targets.size()) + 1);
  });

  Manifest m = make_manifest("compare", out, seed);
  m.checkpoint_paths.push_back(full_ckpt);
  m.checkpoint_paths.push_back(base_ckpt);

  std::vector<DistributionComparison> all;
  std::string csv = "sample,position,chosen_token,kl,eta,category\n";
  for (size_t i = 0; i < per_sample.size(); ++i)
    for (const DistributionComparison& c : per_sample[i]) {
      csv += std::to_string(i) + "," + std::to_string(c.position) + "," + std::to_string(c.chosen_token) + "," +
             fmt(c.kl) + "," + std::to_string(c.eta) + "," + to_string(c.category) + "\n";
      all.push_back(c);
    }
  m.emit("distshift.csv", csv);

  auto summary_json = [&](const ShiftSummary& s, size_t count) {
    json j;
    j["token_subset"] = s.token_subset;
    j["count"] = count;
    j["mean_kl"] = s.mean_kl;
    j["fraction_unshifted"] = s.fraction_unshifted;
    j["fraction_marginal"] = s.fraction_marginal;
    j["fraction_shifted"] = s.fraction_shifted;
    j["median_rank"] = s.median_rank;
    return j;
  };

  auto is_audio_label = [&](int tok) { return vocab.is_audio_label(tok); };
  size_t audio_count = 0;
  for (const DistributionComparison& c : all) audio_count += is_audio_label(c.chosen_token) ? 1 : 0;

  json summaries = json::array();
  summaries.push_back(summary_json(aggregate(all, "all"), all.size()));
  if (audio_count > 0) {
    summaries.push_back(summary_json(aggregate(all, "audio-label", is_audio_label), audio_count));
  } else {
    summaries.push_back({{"token_subset", "audio-label"}, {"count", 0}});
  }
  m.emit("summary.json", summaries.dump(2) + "\n");
  m.finish();
  return 0;
}

// ------------------------------------------------------------------ pair

int cmd_pair(const std::string& embeddings_path, int k, const std::string& out, uint64_t seed) {
  std::ifstream in(embeddings_path);
  if (!in) throw ConfigError("cannot read embeddings file: " + embeddings_path);
  EmbeddingSet audio, visual;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ConfigError("embeddings line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.contains("id")) throw ConfigError("embeddings line " + std::to_string(lineno) + ": missing field: id");
    std::string id = j.at("id").get<std::string>();
    if (j.contains("visual_embedding")) {
      visual.ids.push_back(id);
      visual.embeddings.push_back(j.at("visual_embedding").get<Vec>());
    } else if (j.contains("audio_caption_embeddings")) {
      auto caps = j.at("audio_caption_embeddings").get<std::vector<Vec>>();
      audio.ids.push_back(id);
      audio.embeddings.push_back(centroid(caps));
    } else {
      throw ConfigError("embeddings line " + std::to_string(lineno) +
                        ": record must carry visual_embedding or audio_caption_embeddings");
    }
  }
  if (audio.size() == 0 || visual.size() == 0) throw ConfigError("embeddings file must contain both modalities");

  Matrix sim = similarity_matrix(audio, visual);
  // Assignments minimize similarity, so similarities are the costs.
  std::vector<int> pi = hungarian_min(sim);
  if (k <= 0) k = static_cast<int>(audio.size());
  PairingResult pr = select_pairs(pi, sim, k);

  Manifest m = make_manifest("pair", out, seed);
  json pairs = json::array();
  for (const auto& sel : pr.selected)
    pairs.push_back({{"audio_id", audio.ids[sel.audio_index]},
                     {"visual_id", visual.ids[sel.visual_index]},
                     {"similarity", sel.score}});
  json j;
  j["num_items"] = audio.size();
  j["k"] = k;
  j["pairs"] = pairs;
  m.emit("pairs.json", j.dump(2) + "\n");
  m.finish();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"modal-lens: synthetic audio-visual pipeline"};
  app.require_subcommand(1);

  std::string config_path, out, spec_path, query_name = "hear", split_name = "factual";
  std::string dataset_dir, ckpt_path, base_ckpt_path, embeddings_path;
  uint64_t seed = 0;
  int threads = 1, k = 5;
  bool resume = false;

  auto* gen = app.add_subcommand("gen", "Generate train/factual/counterfactual datasets");
  gen->add_option("--config", config_path, "Task config JSON")->required();
  gen->add_option("--seed", seed, "Master seed");
  gen->add_option("--out", out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a model on a generated dataset");
  tr->add_option("--config", config_path, "Model+train config JSON")->required();
  tr->add_option("dataset", dataset_dir, "Dataset directory from gen")->required();
  tr->add_option("--seed", seed, "Master seed");
  tr->add_option("--out", out, "Output directory")->required();
  tr->add_flag("--resume", resume, "Unsupported; reported as a config error");

  auto* sw = app.add_subcommand("sweep", "Knockout layer sweep over an eval split");
  sw->add_option("checkpoint", ckpt_path, "Model checkpoint")->required();
  sw->add_option("dataset", dataset_dir, "Dataset directory from gen")->required();
  sw->add_option("--spec", spec_path, "Knockout spec template JSON")->required();
  sw->add_option("--query", query_name, "see|hear|both");
  sw->add_option("--split", split_name, "factual|counterfactual");
  sw->add_option("--threads", threads, "Worker threads");
  sw->add_option("--seed", seed, "Recorded in the manifest");
  sw->add_option("--out", out, "Output directory")->required();

  auto* pr = app.add_subcommand("probe", "Attention shares, logit lens, latent recall");
  pr->add_option("checkpoint", ckpt_path, "Model checkpoint")->required();
  pr->add_option("dataset", dataset_dir, "Dataset directory from gen")->required();
  pr->add_option("--query", query_name, "see|hear|both");
  pr->add_option("--split", split_name, "factual|counterfactual");
  pr->add_option("--k", k, "Top-k for the logit lens");
  pr->add_option("--threads", threads, "Worker threads");
  pr->add_option("--seed", seed, "Recorded in the manifest");
  pr->add_option("--out", out, "Output directory")->required();

  auto* cp = app.add_subcommand("compare", "Token distribution shift between two models");
  cp->add_option("full_checkpoint", ckpt_path, "Full model checkpoint")->required();
  cp->add_option("base_checkpoint", base_ckpt_path, "Base (vision-only) checkpoint")->required();
  cp->add_option("dataset", dataset_dir, "Dataset directory from gen")->required();
  cp->add_option("--query", query_name, "see|hear|both");
  cp->add_option("--split", split_name, "factual|counterfactual");
  cp->add_option("--threads", threads, "Worker threads");
  cp->add_option("--seed", seed, "Recorded in the manifest");
  cp->add_option("--out", out, "Output directory")->required();

  auto* pa = app.add_subcommand("pair", "Counterfactual pairing from an embeddings JSONL");
  pa->add_option("embeddings", embeddings_path, "Embeddings JSONL")->required();
  pa->add_option("--k", k, "Number of lowest-similarity pairs (default: all)")->default_val(0);
  pa->add_option("--seed", seed, "Recorded in the manifest");
  pa->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen(config_path, seed, out);
    if (tr->parsed()) return cmd_train(config_path, dataset_dir, seed, out, resume);
    if (sw->parsed()) return cmd_sweep(ckpt_path, dataset_dir, spec_path, query_name, split_name, out, threads, seed);
    if (pr->parsed()) return cmd_probe(ckpt_path, dataset_dir, query_name, split_name, k, out, threads, seed);
    if (cp->parsed())
      return cmd_compare(ckpt_path, base_ckpt_path, dataset_dir, query_name, split_name, out, threads, seed);
    if (pa->parsed()) return cmd_pair(embeddings_path, k, out, seed);
  } catch (const NumericError& e) {
    log(LogLevel::Error, e.what());
    return 3;
  } catch (const Error& e) {
    log(LogLevel::Error, e.what());
    return 2;
  } catch (const std::exception& e) {
    log(LogLevel::Error, e.what());
    return 2;
  }
  return 0;
}
