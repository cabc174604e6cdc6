#include "mlens/synthlab.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "mlens/parallel.hpp"

namespace mlens {

void TaskConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (correlation < 0.0 || correlation > 1.0) throw ConfigError("correlation must be in [0, 1]");
  if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
  if (noise_scale < 0.0) throw ConfigError("noise_scale must be >= 0");
  if (audio_noise_mult < 0.0) throw ConfigError("audio_noise_mult must be >= 0");
  if (visual_slots < 1 || audio_slots < 1) throw ConfigError("slot counts must be >= 1");
}

std::string TaskConfig::to_json() const {
  nlohmann::json j{{"num_classes", num_classes}, {"correlation", correlation},
                   {"feature_dim", feature_dim}, {"noise_scale", noise_scale},
                   {"audio_noise_mult", audio_noise_mult}, {"visual_slots", visual_slots},
                   {"audio_slots", audio_slots}};
  return j.dump();
}

TaskConfig TaskConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed task config JSON: ") + e.what());
  }
  TaskConfig t;
  auto req = [&](const char* field) -> nlohmann::json {
    if (!j.contains(field)) throw ConfigError(std::string("task config missing field: ") + field);
    return j.at(field);
  };
  t.num_classes = req("num_classes").get<int>();
  t.correlation = req("correlation").get<double>();
  t.feature_dim = req("feature_dim").get<int>();
  t.noise_scale = req("noise_scale").get<double>();
  t.audio_noise_mult = j.value("audio_noise_mult", 1.0);
  t.visual_slots = req("visual_slots").get<int>();
  t.audio_slots = req("audio_slots").get<int>();
  t.validate();
  return t;
}

QueryType query_from_string(const std::string& s) {
  if (s == "see") return QueryType::See;
  if (s == "hear") return QueryType::Hear;
  if (s == "both") return QueryType::Both;
  throw ConfigError("unknown query type: " + s);
}

std::string to_string(QueryType q) {
  switch (q) {
    case QueryType::See: return "see";
    case QueryType::Hear: return "hear";
    case QueryType::Both: return "both";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "factual") return Split::FactualEval;
  if (s == "counterfactual") return Split::CounterfactualEval;
  throw ConfigError("unknown split: " + s);
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::FactualEval: return "factual";
    case Split::CounterfactualEval: return "counterfactual";
  }
  return "?";
}

namespace {

struct Prototypes {
  std::vector<Vec> visual;  // per class
  std::vector<Vec> audio;
};

Prototypes make_prototypes(const TaskConfig& task, uint64_t seed) {
  Rng rng = Rng(seed).stream("prototypes");
  Prototypes p;
  for (int c = 0; c < task.num_classes; ++c) {
    Vec v(static_cast<size_t>(task.feature_dim));
    for (double& x : v) x = rng.gaussian();
    p.visual.push_back(std::move(v));
  }
  for (int c = 0; c < task.num_classes; ++c) {
    Vec v(static_cast<size_t>(task.feature_dim));
    for (double& x : v) x = rng.gaussian();
    p.audio.push_back(std::move(v));
  }
  return p;
}

Vec noisy(const Vec& proto, double scale, Rng& rng) {
  Vec out = proto;
  for (double& x : out) x += scale * rng.gaussian();
  return out;
}

}  // namespace

std::vector<SceneSample> gen_dataset(const TaskConfig& task, int n, Split split, uint64_t seed) {
  task.validate();
  if (n < 1) throw ConfigError("dataset size must be >= 1");
  const Prototypes protos = make_prototypes(task, seed);
  Rng rng = Rng(seed).stream("data-" + to_string(split));
  std::vector<SceneSample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    SceneSample s;
    s.visual_class = rng.uniform_int(task.num_classes);
    switch (split) {
      case Split::Train:
        if (rng.uniform() < task.correlation) {
          s.audio_class = s.visual_class;
        } else {
          s.audio_class = rng.uniform_int(task.num_classes - 1);
          if (s.audio_class >= s.visual_class) ++s.audio_class;
        }
        break;
      case Split::FactualEval:
        s.audio_class = s.visual_class;
        break;
      case Split::CounterfactualEval:
        s.audio_class = rng.uniform_int(task.num_classes - 1);
        if (s.audio_class >= s.visual_class) ++s.audio_class;
        break;
    }
    s.factual = s.audio_class == s.visual_class;
    for (int k = 0; k < task.visual_slots; ++k)
      s.visual_features.push_back(noisy(protos.visual[static_cast<size_t>(s.visual_class)], task.noise_scale, rng));
    for (int k = 0; k < task.audio_slots; ++k)
      s.audio_features.push_back(
          noisy(protos.audio[static_cast<size_t>(s.audio_class)], task.noise_scale * task.audio_noise_mult, rng));
    out.push_back(std::move(s));
  }
  return out;
}

std::string sample_to_jsonl(const SceneSample& s) {
  nlohmann::json j{{"visual_class", s.visual_class},
                   {"audio_class", s.audio_class},
                   {"factual", s.factual},
                   {"visual_features", s.visual_features},
                   {"audio_features", s.audio_features}};
  return j.dump();
}

SceneSample sample_from_jsonl(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed sample JSONL: ") + e.what());
  }
  SceneSample s;
  s.visual_class = j.at("visual_class").get<int>();
  s.audio_class = j.at("audio_class").get<int>();
  s.factual = j.at("factual").get<bool>();
  s.visual_features = j.at("visual_features").get<std::vector<Vec>>();
  s.audio_features = j.at("audio_features").get<std::vector<Vec>>();
  return s;
}

EncodedSample encode_sample(const Parameters& params, const SceneSample& sample, QueryType query) {
  const TaskVocab vocab((params.config.vocab_size - 4) / 2);
  EncodedSample enc;
  int qtok = 0;
  switch (query) {
    case QueryType::See:
      qtok = vocab.query_see();
      enc.label_targets = {vocab.visual_label(sample.visual_class)};
      break;
    case QueryType::Hear:
      qtok = vocab.query_hear();
      enc.label_targets = {vocab.audio_label(sample.audio_class)};
      break;
    case QueryType::Both:
      qtok = vocab.query_both();
      enc.label_targets = {vocab.visual_label(sample.visual_class), vocab.audio_label(sample.audio_class)};
      break;
  }
  enc.full_targets = enc.label_targets;
  enc.full_targets.push_back(vocab.eos());
  enc.input = assemble_input(params, sample.visual_features, sample.audio_features, {qtok});
  return enc;
}

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (lr < 0.0) throw ConfigError("learning rate must be >= 0");
  if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
    throw ConfigError("adaptive-moment decay rates must be in (0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
}

std::string TrainConfig::to_json() const {
  nlohmann::json j{{"steps", steps},   {"batch_size", batch_size},     {"lr", lr},     {"beta1", beta1},
                   {"beta2", beta2},   {"weight_decay", weight_decay}, {"seed", seed}};
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed train config JSON: ") + e.what());
  }
  TrainConfig t;
  auto req = [&](const char* field) -> nlohmann::json {
    if (!j.contains(field)) throw ConfigError(std::string("train config missing field: ") + field);
    return j.at(field);
  };
  t.steps = req("steps").get<int>();
  t.batch_size = req("batch_size").get<int>();
  t.lr = req("lr").get<double>();
  t.beta1 = j.value("beta1", 0.9);
  t.beta2 = j.value("beta2", 0.999);
  t.weight_decay = j.value("weight_decay", 0.01);
  t.seed = j.value("seed", static_cast<uint64_t>(0));
  t.validate();
  return t;
}

std::vector<double> train(Parameters& params, const std::vector<SceneSample>& dataset, const TrainConfig& cfg) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("training dataset is empty");
  Rng batch_rng = Rng(cfg.seed).stream("batches");
  Rng query_rng = Rng(cfg.seed).stream("queries");

  std::vector<double*> scalars = params.scalars();
  const size_t np = scalars.size();
  std::vector<double> m(np, 0.0), v(np, 0.0);
  Parameters grads = Parameters::zeros_like(params);
  std::vector<double*> gscalars = grads.scalars();
  std::vector<double> curve;
  curve.reserve(static_cast<size_t>(cfg.steps));

  for (int step = 0; step < cfg.steps; ++step) {
    for (double* g : gscalars) *g = 0.0;
    double loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const SceneSample& sample = dataset[static_cast<size_t>(batch_rng.uniform_int(static_cast<int>(dataset.size())))];
      const int qpick = query_rng.uniform_int(3);
      const QueryType q = qpick == 0 ? QueryType::See : (qpick == 1 ? QueryType::Hear : QueryType::Both);
      EncodedSample enc = encode_sample(params, sample, q);
      // teacher forcing: append targets, loss at each predicting position
      std::vector<TargetSpec> targets;
      int pos = enc.input.length() - 1;
      for (size_t ti = 0; ti < enc.full_targets.size(); ++ti) {
        targets.push_back({pos, enc.full_targets[ti]});
        if (ti + 1 < enc.full_targets.size()) {
          append_generated_token(params, enc.input, enc.full_targets[ti]);
          ++pos;
        }
      }
      loss += loss_and_gradients(params, enc.input, causal_mask(enc.input.length()), targets, grads) /
              static_cast<double>(cfg.batch_size);
    }
    if (!std::isfinite(loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
    curve.push_back(loss);

    const double bc1 = 1.0 - std::pow(cfg.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(cfg.beta2, step + 1);
    for (size_t i = 0; i < np; ++i) {
      const double g = *gscalars[i] / static_cast<double>(cfg.batch_size);
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      *scalars[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + 1e-8) + cfg.weight_decay * *scalars[i]);
    }
  }
  return curve;
}

double eval_one(const Parameters& params, const SceneSample& sample, QueryType query,
                const std::optional<KnockoutSpec>& knockout) {
  EncodedSample enc = encode_sample(params, sample, query);
  const int max_new = static_cast<int>(enc.label_targets.size());
  GenerateResult gen = knockout ? knockout_generate(params, std::move(enc.input), *knockout, max_new)
                                : generate_greedy(params, std::move(enc.input), max_new);
  if (gen.tokens.size() < enc.label_targets.size()) return 0.0;
  for (size_t i = 0; i < enc.label_targets.size(); ++i)
    if (gen.tokens[i] != enc.label_targets[i]) return 0.0;
  return 1.0;
}

double eval_accuracy(const Parameters& params, const std::vector<SceneSample>& samples, QueryType query,
                     const std::optional<KnockoutSpec>& knockout, int threads) {
  if (samples.empty()) throw ConfigError("eval on empty sample set");
  std::vector<double> hits(samples.size(), 0.0);
  parallel_for(static_cast<int>(samples.size()), threads,
               [&](int i) { hits[static_cast<size_t>(i)] = eval_one(params, samples[static_cast<size_t>(i)], query, knockout); });
  double acc = 0.0;
  for (double h : hits) acc += h;
  return acc / static_cast<double>(samples.size());
}

}  // namespace mlens
