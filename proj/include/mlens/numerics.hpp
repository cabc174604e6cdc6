#pragma once

#include <functional>
#include <vector>

#include "mlens/common.hpp"
#include "mlens/matrix.hpp"

namespace mlens {

// Probability distribution over a finite vocabulary: entries >= 0,
// summing to 1 within 1e-6.
struct ProbVector {
  Vec values;

  explicit ProbVector(Vec v);

  size_t size() const { return values.size(); }
  double operator[](size_t i) const { return values[i]; }
};

// Numerically stable softmax (max-subtraction). Entries equal to -inf are
// treated as excluded support and map to probability 0; at least one entry
// must be finite.
ProbVector softmax(const Vec& logits);

// KL(p || q) in nats. q is smoothed with the uniform distribution at
// kKlSmoothingEps before taking logs, so zero-support points in q cannot
// produce infinities.
inline constexpr double kKlSmoothingEps = 1e-8;
double kl_divergence(const ProbVector& p, const ProbVector& q);

// Cosine similarity in [-1, 1]. Throws on zero-norm input.
double cosine_similarity(const Vec& u, const Vec& v);

// -log softmax(logits)[target]
double cross_entropy_loss(const Vec& logits, int target);

// Central-difference gradient oracle: (f(x+eps e_i) - f(x-eps e_i)) / (2 eps).
Vec finite_difference_gradient(const std::function<double(const Vec&)>& f, const Vec& x, double eps);

}  // namespace mlens
