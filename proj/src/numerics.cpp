#include "mlens/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mlens {

ProbVector::ProbVector(Vec v) : values(std::move(v)) {
  if (values.empty()) throw ConfigError("empty probability vector");
  double sum = 0.0;
  for (double x : values) {
    if (!(x >= 0.0)) throw NumericError("probability entry negative or NaN");
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw NumericError("probabilities do not sum to 1");
}

ProbVector softmax(const Vec& logits) {
  if (logits.empty()) throw ConfigError("empty logits");
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : logits) {
    if (std::isnan(x) || x == std::numeric_limits<double>::infinity())
      throw NumericError("non-finite logit");
    mx = std::max(mx, x);
  }
  if (mx == -std::numeric_limits<double>::infinity())
    throw NumericError("all logits are -inf");
  Vec out(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return ProbVector(std::move(out));
}

double kl_divergence(const ProbVector& p, const ProbVector& q) {
  if (p.size() != q.size()) throw ConfigError("kl_divergence length mismatch");
  const double n = static_cast<double>(p.size());
  double kl = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    const double qs = (1.0 - kKlSmoothingEps) * q[i] + kKlSmoothingEps / n;
    kl += p[i] * std::log(p[i] / qs);
  }
  return std::max(kl, 0.0);
}

double cosine_similarity(const Vec& u, const Vec& v) {
  if (u.size() != v.size()) throw ConfigError("cosine_similarity length mismatch");
  if (u.empty()) throw ConfigError("cosine_similarity on empty vectors");
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0.0 || nv == 0.0) throw ConfigError("zero-norm embedding");
  const double sim = dot / (std::sqrt(nu) * std::sqrt(nv));
  return std::clamp(sim, -1.0, 1.0);
}

double cross_entropy_loss(const Vec& logits, int target) {
  if (target < 0 || static_cast<size_t>(target) >= logits.size())
    throw ConfigError("cross_entropy_loss target out of range");
  // log-sum-exp with max subtraction, then -log p directly from logits
  double mx = *std::max_element(logits.begin(), logits.end());
  double lse = 0.0;
  for (double x : logits) lse += std::exp(x - mx);
  return std::log(lse) + mx - logits[static_cast<size_t>(target)];
}

Vec finite_difference_gradient(const std::function<double(const Vec&)>& f, const Vec& x, double eps) {
  if (eps <= 0.0) throw ConfigError("finite difference eps must be positive");
  Vec grad(x.size());
  Vec probe = x;
  for (size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double fp = f(probe);
    probe[i] = x[i] - eps;
    const double fm = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("non-finite function evaluation in finite differences");
    grad[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

}  // namespace mlens
