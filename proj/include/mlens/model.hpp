#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mlens/matrix.hpp"
#include "mlens/numerics.hpp"
#include "mlens/rng.hpp"

namespace mlens {

struct ModelConfig {
  int num_layers = 2;
  int num_heads = 2;
  int model_dim = 16;
  int ffn_dim = 32;
  int vocab_size = 16;
  int max_seq_len = 32;
  int num_visual_slots = 2;
  int num_audio_slots = 2;
  int feature_dim = 8;
  int eos_token = 0;
  // Vision-only twin: audio slots are filled with a learned null embedding
  // and the audio features are ignored.
  bool vision_only = false;

  int head_dim() const { return model_dim / num_heads; }
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

struct LayerParams {
  Vec attn_norm_gain;  // d_m
  Matrix wq, wk, wv, wo;  // d_m x d_m each
  Vec ffn_norm_gain;  // d_m
  Matrix w1;  // d_m x ffn
  Vec b1;     // ffn
  Matrix w2;  // ffn x d_m
  Vec b2;     // d_m
};

struct Parameters {
  ModelConfig config;
  Matrix tok_emb;   // |V| x d_m
  Matrix pos_emb;   // max_seq_len x d_m
  Matrix vis_proj;  // feature_dim x d_m
  Matrix aud_proj;  // feature_dim x d_m
  Vec audio_null;   // d_m, used in vision-only assembly
  std::vector<LayerParams> layers;
  Vec final_norm_gain;  // d_m
  Matrix unembed;       // |V| x d_m
  Vec unembed_bias;     // |V|

  static Parameters init(const ModelConfig& cfg, Rng rng);
  static Parameters zeros_like(const Parameters& p);

  // Pointers to every scalar, in the checkpoint serialization order. Used
  // by the optimizer, the finite-difference harness, and checkpoint IO.
  std::vector<double*> scalars();
  std::vector<const double*> scalars() const;
};

// Partition of sequence positions by role. Spans are contiguous and ordered
// [visual, audio, query, generated].
struct SequenceLayout {
  std::vector<int> visual_positions;
  std::vector<int> audio_positions;
  std::vector<int> query_positions;
  std::vector<int> generated_positions;

  int total() const {
    return static_cast<int>(visual_positions.size() + audio_positions.size() + query_positions.size() +
                            generated_positions.size());
  }
};

// Provenance of one input position, so gradients can flow back into the
// right embedding parameter.
struct PositionSource {
  enum class Kind { VisualFeature, AudioFeature, AudioNull, Token };
  Kind kind = Kind::Token;
  int token = -1;       // for Kind::Token
  Vec feature;          // for feature kinds
};

struct AssembledInput {
  Matrix embeddings;  // n x d_m, position embeddings already added
  SequenceLayout layout;
  std::vector<PositionSource> sources;

  int length() const { return embeddings.rows; }
};

// Concatenates [visual, audio, query] per the model's slot configuration.
// When params.config.vision_only is set, audio feature content is replaced
// by the learned null embedding (feature vectors must still be supplied to
// fix the slot count, or may be empty to use the configured count).
AssembledInput assemble_input(const Parameters& params, const std::vector<Vec>& visual_features,
                              const std::vector<Vec>& audio_features, const std::vector<int>& query_tokens);

// Appends one generated token to an assembled input (embedding + layout).
void append_generated_token(const Parameters& params, AssembledInput& input, int token);

// Standard causal mask: (i, j) = 0 if j <= i else -inf.
Matrix causal_mask(int n);

struct ForwardTrace {
  // hidden_states[l] is the n x d_m residual stream after layer l;
  // index 0 is the embedding layer. Present only when tracing.
  std::vector<Matrix> hidden_states;
  // post_attention_states[l] is the stream after the attention residual add
  // of layer l (the h' of the residual decomposition). Present when tracing.
  std::vector<Matrix> post_attention_states;
  // attention_weights[l][h] is the n x n row-stochastic attention matrix.
  std::vector<std::vector<Matrix>> attention_weights;
  Matrix logits;  // n x |V|, always present

  int num_layers_traced() const { return static_cast<int>(attention_weights.size()); }
};

// masks: one mask shared across layers, or one per layer.
ForwardTrace forward(const Parameters& params, const Matrix& embeddings, const std::vector<Matrix>& masks,
                     bool trace);

struct GenerateResult {
  std::vector<int> tokens;
  // Trace of the final forward pass, covering the whole sequence including
  // generated positions.
  ForwardTrace trace;
  AssembledInput final_input;
};

// Greedy decoding with lowest-index argmax tie-break; stops at eos_token or
// max_new. mask_builder, when provided, produces the per-layer masks for the
// current layout at each step (used by attention knockout).
GenerateResult generate_greedy(
    const Parameters& params, AssembledInput input, int max_new,
    const std::function<std::vector<Matrix>(int n, const SequenceLayout&)>& mask_builder = nullptr);

// softmax of the final position's logits.
ProbVector next_token_distribution(const Parameters& params, const AssembledInput& input);

// (position, target token) pairs: cross-entropy is taken at `position`'s
// logits against `target`.
struct TargetSpec {
  int position;
  int target;
};

// Mean cross-entropy over targets, with gradients for every parameter
// accumulated into `grads` (which must be zeros_like-shaped). Returns loss.
double loss_and_gradients(const Parameters& params, const AssembledInput& input, const Matrix& mask,
                          const std::vector<TargetSpec>& targets, Parameters& grads);

int argmax_lowest_index(const Vec& v);

}  // namespace mlens
