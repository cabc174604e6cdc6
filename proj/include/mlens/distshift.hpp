#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mlens/model.hpp"
#include "mlens/numerics.hpp"

namespace mlens {

enum class ShiftCategory { Unshifted, Marginal, Shifted };

std::string to_string(ShiftCategory c);

// 1-based rank of `chosen` under descending p_base, ties broken by lowest
// token index ranked first.
int base_rank(const ProbVector& p_base, int chosen);

// eta = 1 -> unshifted; 1 < eta <= 3 -> marginal; eta > 3 -> shifted.
ShiftCategory categorize(int eta);

struct DistributionComparison {
  int position = 0;
  int chosen_token = 0;
  double kl = 0.0;  // KL(p_full || p_base), nats
  int eta = 1;
  ShiftCategory category = ShiftCategory::Unshifted;
};

// Greedy-decodes a response from the full model, then for each response
// position feeds the shared instruction + response prefix to both models
// and compares their next-token distributions. The two inputs must cover
// the same instruction; the base input is typically the vision-only
// assembly of the same sample.
std::vector<DistributionComparison> compare_models(const Parameters& full_model, const Parameters& base_model,
                                                   const AssembledInput& full_input,
                                                   const AssembledInput& base_input, int max_new);

struct ShiftSummary {
  double mean_kl = 0.0;
  double fraction_unshifted = 0.0;
  double fraction_marginal = 0.0;
  double fraction_shifted = 0.0;
  int median_rank = 1;
  std::string token_subset = "all";
};

// Aggregates comparisons over the subset selected by `keep_token`
// (pass nullptr for "all"). Throws when the subset is empty.
ShiftSummary aggregate(const std::vector<DistributionComparison>& comparisons, const std::string& subset_tag,
                       const std::function<bool(int token)>& keep_token = nullptr);

}  // namespace mlens
