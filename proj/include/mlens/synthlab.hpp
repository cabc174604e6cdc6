#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mlens/interventions.hpp"
#include "mlens/model.hpp"
#include "mlens/rng.hpp"

namespace mlens {

// Synthetic audio-visual scene task. Each sample carries a visual class and
// an audio class; features are class prototypes plus spherical noise. The
// correlation knob controls how often the training audio class matches the
// class implied by the visual scene (partner map: identity).
struct TaskConfig {
  int num_classes = 8;
  double correlation = 0.95;  // P(audio_class == visual_class) in the train split
  int feature_dim = 16;
  double noise_scale = 0.25;
  double audio_noise_mult = 1.0;  // audio noise = noise_scale * audio_noise_mult
  int visual_slots = 4;
  int audio_slots = 4;

  void validate() const;
  std::string to_json() const;
  static TaskConfig from_json(const std::string& text);
};

// Reserved vocabulary layout for the task:
//   0        end-of-sequence
//   1..3     query tokens (see / hear / both)
//   4..4+C-1       visual class labels
//   4+C..4+2C-1    audio class labels
struct TaskVocab {
  int num_classes;

  explicit TaskVocab(int c) : num_classes(c) {}
  int size() const { return 4 + 2 * num_classes; }
  int eos() const { return 0; }
  int query_see() const { return 1; }
  int query_hear() const { return 2; }
  int query_both() const { return 3; }
  int visual_label(int c) const { return 4 + c; }
  int audio_label(int c) const { return 4 + num_classes + c; }
  bool is_audio_label(int tok) const { return tok >= 4 + num_classes && tok < 4 + 2 * num_classes; }
};

enum class QueryType { See, Hear, Both };

QueryType query_from_string(const std::string& s);
std::string to_string(QueryType q);

struct SceneSample {
  int visual_class = 0;
  int audio_class = 0;
  bool factual = true;
  std::vector<Vec> visual_features;
  std::vector<Vec> audio_features;
};

enum class Split { Train, FactualEval, CounterfactualEval };

Split split_from_string(const std::string& s);
std::string to_string(Split s);

// Deterministic given (task, split, seed). Class prototypes are derived
// only from the seed, so train and eval splits of the same seed share them.
std::vector<SceneSample> gen_dataset(const TaskConfig& task, int n, Split split, uint64_t seed);

std::string sample_to_jsonl(const SceneSample& s);
SceneSample sample_from_jsonl(const std::string& line);

struct EncodedSample {
  AssembledInput input;
  std::vector<int> label_targets;  // label tokens only, in emission order
  std::vector<int> full_targets;   // labels followed by eos
};

// Builds the model input [visual, audio, query] and the target tokens for
// the query type: see -> visual label, hear -> audio label, both -> visual
// then audio label; always terminated by eos in full_targets.
EncodedSample encode_sample(const Parameters& params, const SceneSample& sample, QueryType query);

struct TrainConfig {
  int steps = 2000;
  int batch_size = 16;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

// Adam with decoupled weight decay on the mean cross-entropy over target
// positions. Query types are drawn uniformly per sample from a dedicated
// stream. Returns the per-step loss curve. Throws NumericError (with the
// step index) on non-finite loss.
std::vector<double> train(Parameters& params, const std::vector<SceneSample>& dataset, const TrainConfig& cfg);

// Fraction of samples whose greedily decoded label tokens exactly match the
// targets; knockout applied when given.
double eval_accuracy(const Parameters& params, const std::vector<SceneSample>& samples, QueryType query,
                     const std::optional<KnockoutSpec>& knockout = std::nullopt, int threads = 1);

// Per-sample variant used by sweeps (1.0 on exact match, else 0.0).
double eval_one(const Parameters& params, const SceneSample& sample, QueryType query,
                const std::optional<KnockoutSpec>& knockout);

}  // namespace mlens
