#include "mlens/counterfactual.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mlens/numerics.hpp"

namespace mlens {

namespace {

// Jonker-Volgenant style shortest augmenting path assignment (min cost).
// Returns column potentials/duals alongside the assignment so callers can
// enumerate the tight-edge subgraph.
struct AssignmentSolution {
  std::vector<int> row_to_col;
  std::vector<double> row_dual;  // u
  std::vector<double> col_dual;  // v
  double cost = 0.0;
};

AssignmentSolution solve_assignment(const Matrix& a) {
  const int n = a.rows;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = -1;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  AssignmentSolution sol;
  sol.row_to_col.assign(n, -1);
  sol.row_dual.assign(n, 0.0);
  sol.col_dual.assign(n, 0.0);
  for (int j = 1; j <= n; ++j)
    if (p[j] != 0) sol.row_to_col[static_cast<size_t>(p[j] - 1)] = j - 1;
  for (int i = 0; i < n; ++i) sol.row_dual[static_cast<size_t>(i)] = u[i + 1];
  for (int j = 0; j < n; ++j) sol.col_dual[static_cast<size_t>(j)] = v[j + 1];
  for (int i = 0; i < n; ++i) sol.cost += a(i, sol.row_to_col[static_cast<size_t>(i)]);
  return sol;
}

// Kuhn augmenting-path matching over an adjacency list; used to check that
// a partial lexicographic choice still extends to a perfect matching.
bool try_augment(int row, const std::vector<std::vector<int>>& adj, std::vector<int>& col_match,
                 std::vector<char>& visited) {
  for (int c : adj[static_cast<size_t>(row)]) {
    if (visited[static_cast<size_t>(c)]) continue;
    visited[static_cast<size_t>(c)] = 1;
    if (col_match[static_cast<size_t>(c)] < 0 ||
        try_augment(col_match[static_cast<size_t>(c)], adj, col_match, visited)) {
      col_match[static_cast<size_t>(c)] = row;
      return true;
    }
  }
  return false;
}

bool has_perfect_matching(const std::vector<std::vector<int>>& adj, int cols) {
  std::vector<int> col_match(static_cast<size_t>(cols), -1);
  for (size_t r = 0; r < adj.size(); ++r) {
    std::vector<char> visited(static_cast<size_t>(cols), 0);
    if (!try_augment(static_cast<int>(r), adj, col_match, visited)) return false;
  }
  return true;
}

}  // namespace

Vec centroid(const std::vector<Vec>& embeddings) {
  if (embeddings.empty()) throw ConfigError("centroid of empty embedding list");
  const size_t dim = embeddings[0].size();
  Vec out(dim, 0.0);
  for (const Vec& e : embeddings) {
    if (e.size() != dim) throw ConfigError("centroid dimension mismatch");
    for (size_t i = 0; i < dim; ++i) out[i] += e[i];
  }
  for (double& x : out) x /= static_cast<double>(embeddings.size());
  return out;
}

Matrix similarity_matrix(const EmbeddingSet& audio, const EmbeddingSet& visual) {
  if (audio.size() != visual.size()) throw ConfigError("pairing requires equal item counts");
  if (audio.size() == 0) throw ConfigError("empty embedding sets");
  const int n = static_cast<int>(audio.size());
  Matrix m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      m(i, j) = cosine_similarity(audio.embeddings[static_cast<size_t>(i)], visual.embeddings[static_cast<size_t>(j)]);
  return m;
}

std::vector<int> hungarian_min(const Matrix& m) {
  if (m.rows != m.cols) throw ConfigError("hungarian_min requires a square matrix");
  if (m.rows == 0) throw ConfigError("hungarian_min on empty matrix");
  if (!all_finite(m)) throw ConfigError("hungarian_min requires finite entries");
  const int n = m.rows;
  AssignmentSolution sol = solve_assignment(m);

  // Every optimal assignment lies in the tight-edge subgraph of the duals
  // (complementary slackness), so the lexicographically smallest optimum is
  // the lexicographically smallest perfect matching over tight edges.
  double scale = 1.0;
  for (double v : m.data) scale = std::max(scale, std::abs(v));
  const double tol = 1e-9 * scale * n;
  std::vector<std::vector<int>> tight(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (m(i, j) - sol.row_dual[static_cast<size_t>(i)] - sol.col_dual[static_cast<size_t>(j)] <= tol)
        tight[static_cast<size_t>(i)].push_back(j);

  std::vector<int> result(static_cast<size_t>(n), -1);
  std::vector<char> col_used(static_cast<size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    bool fixed = false;
    for (int j : tight[static_cast<size_t>(i)]) {
      if (col_used[static_cast<size_t>(j)]) continue;
      // feasibility of the remainder with i -> j fixed
      std::vector<std::vector<int>> rest;
      rest.reserve(static_cast<size_t>(n - i - 1));
      for (int r = i + 1; r < n; ++r) {
        std::vector<int> adj;
        for (int c : tight[static_cast<size_t>(r)])
          if (!col_used[static_cast<size_t>(c)] && c != j) adj.push_back(c);
        rest.push_back(std::move(adj));
      }
      if (has_perfect_matching(rest, n)) {
        result[static_cast<size_t>(i)] = j;
        col_used[static_cast<size_t>(j)] = 1;
        fixed = true;
        break;
      }
    }
    if (!fixed) throw NumericError("assignment refinement failed");
  }
  return result;
}

PairingResult select_pairs(const std::vector<int>& assignment, const Matrix& m, int k) {
  const int n = static_cast<int>(assignment.size());
  if (k < 0 || k > n) throw ConfigError("select_pairs k out of range");
  PairingResult out;
  out.assignment = assignment;
  out.pair_scores.resize(static_cast<size_t>(n));
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    out.pair_scores[static_cast<size_t>(i)] = m(i, assignment[static_cast<size_t>(i)]);
    order[static_cast<size_t>(i)] = i;
  }
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (out.pair_scores[static_cast<size_t>(a)] != out.pair_scores[static_cast<size_t>(b)])
      return out.pair_scores[static_cast<size_t>(a)] < out.pair_scores[static_cast<size_t>(b)];
    return a < b;
  });
  for (int r = 0; r < k; ++r) {
    const int i = order[static_cast<size_t>(r)];
    out.selected.push_back({i, assignment[static_cast<size_t>(i)], out.pair_scores[static_cast<size_t>(i)]});
  }
  return out;
}

}  // namespace mlens
