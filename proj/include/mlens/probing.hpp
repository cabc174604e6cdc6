#pragma once

#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mlens/model.hpp"

namespace mlens {

// Top-k decode of one intermediate hidden state through the unembedding.
struct LogitLensRecord {
  int layer = 0;
  int position = 0;
  std::vector<std::pair<int, double>> top_k;  // (token, logit), descending; ties by lowest token
};

struct LensOptions {
  int k = 5;
  // Apply the model's final normalization before unembedding intermediate
  // states. Off reproduces the raw-unembedding variant.
  bool apply_final_norm = true;
};

// Decodes hidden states at every traced layer (0..L) for the given
// positions. At layer L the record matches the trace's final logits' top-k
// exactly. The trace must have been produced with tracing on.
std::vector<LogitLensRecord> logit_lens(const ForwardTrace& trace, const Parameters& params,
                                        const std::vector<int>& positions, const LensOptions& opts);

// Fraction of reference labels present in the union of top-k decodes over
// the given layer range (inclusive, in trace layer indices 0..L).
double latent_recall(const std::vector<LogitLensRecord>& records, const std::set<int>& reference_labels,
                     int layer_lo, int layer_hi);

enum class HeadAggregation { Mean, Max };

// Per-layer mean attention share from generated-token query rows to each
// position group.
struct AttentionSummary {
  int layer = 0;
  std::map<std::string, double> shares;  // visual / audio / query / generated-prior / other
};

std::vector<AttentionSummary> attention_by_group(const ForwardTrace& trace, const SequenceLayout& layout,
                                                 HeadAggregation agg = HeadAggregation::Mean);

}  // namespace mlens
