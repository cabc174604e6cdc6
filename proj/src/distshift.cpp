#include "mlens/distshift.hpp"

#include <algorithm>

namespace mlens {

std::string to_string(ShiftCategory c) {
  switch (c) {
    case ShiftCategory::Unshifted: return "unshifted";
    case ShiftCategory::Marginal: return "marginal";
    case ShiftCategory::Shifted: return "shifted";
  }
  return "?";
}

int base_rank(const ProbVector& p_base, int chosen) {
  if (chosen < 0 || static_cast<size_t>(chosen) >= p_base.size()) throw ConfigError("chosen token out of range");
  const double pc = p_base[static_cast<size_t>(chosen)];
  int rank = 1;
  for (size_t j = 0; j < p_base.size(); ++j) {
    if (static_cast<int>(j) == chosen) continue;
    if (p_base[j] > pc || (p_base[j] == pc && static_cast<int>(j) < chosen)) ++rank;
  }
  return rank;
}

ShiftCategory categorize(int eta) {
  if (eta < 1) throw ConfigError("base rank must be >= 1");
  if (eta == 1) return ShiftCategory::Unshifted;
  if (eta <= 3) return ShiftCategory::Marginal;
  return ShiftCategory::Shifted;
}

std::vector<DistributionComparison> compare_models(const Parameters& full_model, const Parameters& base_model,
                                                   const AssembledInput& full_input,
                                                   const AssembledInput& base_input, int max_new) {
  if (full_model.config.vocab_size != base_model.config.vocab_size)
    throw ConfigError("models do not share a vocabulary");

  GenerateResult gen = generate_greedy(full_model, full_input, max_new);
  const std::vector<int>& response = gen.tokens;

  // One traced-off forward per model over instruction + full response gives
  // the per-prefix next-token distributions at the causal positions.
  AssembledInput full_ctx = full_input;
  AssembledInput base_ctx = base_input;
  for (int tok : response) {
    append_generated_token(full_model, full_ctx, tok);
    append_generated_token(base_model, base_ctx, tok);
  }
  ForwardTrace ft = forward(full_model, full_ctx.embeddings, {causal_mask(full_ctx.length())}, false);
  ForwardTrace bt = forward(base_model, base_ctx.embeddings, {causal_mask(base_ctx.length())}, false);

  const int V = full_model.config.vocab_size;
  std::vector<DistributionComparison> out;
  const int full_prefix = full_input.length();
  const int base_prefix = base_input.length();
  for (size_t t = 0; t < response.size(); ++t) {
    const int fpos = full_prefix + static_cast<int>(t) - 1;
    const int bpos = base_prefix + static_cast<int>(t) - 1;
    Vec fl(ft.logits.row(fpos), ft.logits.row(fpos) + V);
    Vec bl(bt.logits.row(bpos), bt.logits.row(bpos) + V);
    ProbVector p_full = softmax(fl);
    ProbVector p_base = softmax(bl);
    DistributionComparison cmp;
    cmp.position = static_cast<int>(t);
    cmp.chosen_token = response[t];
    cmp.kl = kl_divergence(p_full, p_base);
    cmp.eta = base_rank(p_base, cmp.chosen_token);
    cmp.category = categorize(cmp.eta);
    out.push_back(cmp);
  }
  return out;
}

ShiftSummary aggregate(const std::vector<DistributionComparison>& comparisons, const std::string& subset_tag,
                       const std::function<bool(int)>& keep_token) {
  std::vector<const DistributionComparison*> kept;
  for (const auto& c : comparisons)
    if (!keep_token || keep_token(c.chosen_token)) kept.push_back(&c);
  if (kept.empty()) throw ConfigError("no tokens in subset");
  ShiftSummary s;
  s.token_subset = subset_tag;
  std::vector<int> ranks;
  for (const auto* c : kept) {
    s.mean_kl += c->kl;
    ranks.push_back(c->eta);
    switch (c->category) {
      case ShiftCategory::Unshifted: s.fraction_unshifted += 1.0; break;
      case ShiftCategory::Marginal: s.fraction_marginal += 1.0; break;
      case ShiftCategory::Shifted: s.fraction_shifted += 1.0; break;
    }
  }
  const double n = static_cast<double>(kept.size());
  s.mean_kl /= n;
  s.fraction_unshifted /= n;
  s.fraction_marginal /= n;
  s.fraction_shifted /= n;
  std::sort(ranks.begin(), ranks.end());
  s.median_rank = ranks[(ranks.size() - 1) / 2];
  return s;
}

}  // namespace mlens
