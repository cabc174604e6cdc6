#pragma once

#include <string>
#include <vector>

#include "mlens/matrix.hpp"

namespace mlens {

// Embeddings for one side of the pairing problem, in item order. Audio
// items carry one embedding per caption and are collapsed to centroids.
struct EmbeddingSet {
  std::vector<std::string> ids;
  std::vector<Vec> embeddings;  // one per item, uniform dimension

  size_t size() const { return ids.size(); }
};

// Coordinate-wise arithmetic mean.
Vec centroid(const std::vector<Vec>& embeddings);

// Entry (i, j) = cosine similarity of audio embedding i and visual
// embedding j. Requires a square problem (equal item counts).
Matrix similarity_matrix(const EmbeddingSet& audio, const EmbeddingSet& visual);

// Exact minimum-cost assignment: pi minimizes sum_i M[i, pi(i)]. Among
// cost-equal optima returns the lexicographically smallest permutation.
std::vector<int> hungarian_min(const Matrix& m);

struct PairingResult {
  std::vector<int> assignment;  // audio index -> visual index
  std::vector<double> pair_scores;  // per audio index
  struct Selected {
    int audio_index;
    int visual_index;
    double score;
  };
  std::vector<Selected> selected;  // k lowest-similarity pairs, ascending
};

// The k assignment pairs with lowest similarity, ascending; ties broken by
// audio index.
PairingResult select_pairs(const std::vector<int>& assignment, const Matrix& m, int k);

}  // namespace mlens
