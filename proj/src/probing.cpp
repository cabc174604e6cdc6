#include "mlens/probing.hpp"

#include <algorithm>
#include <cmath>

namespace mlens {

namespace {

constexpr double kRmsEps = 1e-8;  // must match the model's normalization

Vec unembed_hidden(const Parameters& params, const double* h, bool apply_final_norm) {
  const int d = params.config.model_dim;
  Vec state(h, h + d);
  if (apply_final_norm) {
    double ss = 0.0;
    for (double v : state) ss += v * v;
    const double r = std::sqrt(ss / d + kRmsEps);
    for (int j = 0; j < d; ++j) state[j] = params.final_norm_gain[j] * state[j] / r;
  }
  Vec logits(params.config.vocab_size);
  for (int v = 0; v < params.config.vocab_size; ++v) {
    const double* w = params.unembed.row(v);
    double acc = params.unembed_bias[v];
    for (int j = 0; j < d; ++j) acc += w[j] * state[j];
    logits[static_cast<size_t>(v)] = acc;
  }
  return logits;
}

std::vector<std::pair<int, double>> top_k_tokens(const Vec& logits, int k) {
  std::vector<int> idx(logits.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (logits[static_cast<size_t>(a)] != logits[static_cast<size_t>(b)])
      return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)];
    return a < b;
  });
  std::vector<std::pair<int, double>> out;
  for (int i = 0; i < k; ++i) out.emplace_back(idx[static_cast<size_t>(i)], logits[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
  return out;
}

}  // namespace

std::vector<LogitLensRecord> logit_lens(const ForwardTrace& trace, const Parameters& params,
                                        const std::vector<int>& positions, const LensOptions& opts) {
  if (trace.hidden_states.empty()) throw ConfigError("logit_lens requires a trace with hidden states");
  if (opts.k < 1 || opts.k > params.config.vocab_size) throw ConfigError("logit_lens k out of range");
  const int n = trace.hidden_states[0].rows;
  for (int p : positions)
    if (p < 0 || p >= n) throw ConfigError("logit_lens position out of range");
  std::vector<LogitLensRecord> out;
  for (size_t l = 0; l < trace.hidden_states.size(); ++l) {
    for (int p : positions) {
      LogitLensRecord rec;
      rec.layer = static_cast<int>(l);
      rec.position = p;
      rec.top_k = top_k_tokens(unembed_hidden(params, trace.hidden_states[l].row(p), opts.apply_final_norm), opts.k);
      out.push_back(std::move(rec));
    }
  }
  return out;
}

double latent_recall(const std::vector<LogitLensRecord>& records, const std::set<int>& reference_labels,
                     int layer_lo, int layer_hi) {
  if (reference_labels.empty()) throw ConfigError("latent_recall needs reference labels");
  std::set<int> decoded;
  for (const LogitLensRecord& rec : records) {
    if (rec.layer < layer_lo || rec.layer > layer_hi) continue;
    for (const auto& [tok, logit] : rec.top_k) decoded.insert(tok);
  }
  int hits = 0;
  for (int label : reference_labels)
    if (decoded.count(label)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(reference_labels.size());
}

std::vector<AttentionSummary> attention_by_group(const ForwardTrace& trace, const SequenceLayout& layout,
                                                 HeadAggregation agg) {
  if (layout.generated_positions.empty()) throw ConfigError("attention_by_group needs generated positions");
  if (trace.attention_weights.empty()) throw ConfigError("attention_by_group requires a traced run");
  const int n = trace.attention_weights[0][0].rows;
  // group id per position: 0 visual, 1 audio, 2 query, 3 generated, 4 other
  std::vector<int> group(static_cast<size_t>(n), 4);
  for (int p : layout.visual_positions) group[static_cast<size_t>(p)] = 0;
  for (int p : layout.audio_positions) group[static_cast<size_t>(p)] = 1;
  for (int p : layout.query_positions) group[static_cast<size_t>(p)] = 2;
  for (int p : layout.generated_positions) group[static_cast<size_t>(p)] = 3;
  static const char* kNames[5] = {"visual", "audio", "query", "generated-prior", "other"};

  std::vector<AttentionSummary> out;
  for (size_t l = 0; l < trace.attention_weights.size(); ++l) {
    const auto& heads = trace.attention_weights[l];
    double acc[5] = {0, 0, 0, 0, 0};
    for (int q : layout.generated_positions) {
      double row_share[5] = {0, 0, 0, 0, 0};
      for (const Matrix& a : heads) {
        double head_share[5] = {0, 0, 0, 0, 0};
        const double* arow = a.row(q);
        for (int j = 0; j < n; ++j) head_share[group[static_cast<size_t>(j)]] += arow[j];
        for (int g = 0; g < 5; ++g) {
          if (agg == HeadAggregation::Mean)
            row_share[g] += head_share[g] / static_cast<double>(heads.size());
          else
            row_share[g] = std::max(row_share[g], head_share[g]);
        }
      }
      if (agg == HeadAggregation::Max) {
        // renormalize so per-row shares still sum to 1
        double s = row_share[0] + row_share[1] + row_share[2] + row_share[3] + row_share[4];
        for (double& v : row_share) v /= s;
      }
      for (int g = 0; g < 5; ++g) acc[g] += row_share[g] / static_cast<double>(layout.generated_positions.size());
    }
    AttentionSummary sum;
    sum.layer = static_cast<int>(l);
    for (int g = 0; g < 5; ++g) sum.shares[kNames[g]] = acc[g];
    out.push_back(std::move(sum));
  }
  return out;
}

}  // namespace mlens
