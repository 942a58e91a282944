#pragma once

// Collaborative-filtering warm start for the modified PReF reward model:
// SVD of the (response pair x user) sign matrix, then an intercept-free
// regression from backbone embedding differences onto the pair features.

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/SVD>

#include "palign/corpus.hpp"
#include "palign/models.hpp"

namespace palign {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

struct PrefFactorization {
  Matrix item_features;    // U_S, pairs x rank, orthonormal columns
  Matrix user_embeddings;  // V_S, users x rank
  Vector singular_values;  // leading `rank` values
  Matrix head_weights;     // W, rank x embed dim (empty until regression)
  int rank = 0;
  double fill_rate = 0.0;
  /// sqrt of the discarded squared singular values: the Frobenius error of
  /// the rank-truncated reconstruction of the imputed matrix.
  double tail_norm = 0.0;
  /// Largest discarded singular value (0 when none).
  double next_singular_value = 0.0;
};

/// Truncated SVD of a {-1, +1, missing(NaN)} matrix. Missing entries are
/// filled with their row's observed mean first.
inline PrefFactorization pref_svd_init(const Matrix& pref_matrix, int rank) {
  const auto rows = pref_matrix.rows();
  const auto cols = pref_matrix.cols();
  if (rank < 1 || rank > std::min(rows, cols)) {
    throw InitError("rank " + std::to_string(rank) + " outside [1, " +
                    std::to_string(std::min(rows, cols)) + "]");
  }
  Matrix imputed(rows, cols);
  std::vector<int> col_obs(static_cast<std::size_t>(cols), 0);
  std::size_t observed = 0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    double sum = 0.0;
    int n = 0;
    for (Eigen::Index j = 0; j < cols; ++j) {
      const double v = pref_matrix(i, j);
      if (std::isnan(v)) continue;
      if (v != 1.0 && v != -1.0) {
        throw InitError("entry (" + std::to_string(i) + "," + std::to_string(j) +
                        ") is neither +1, -1 nor missing");
      }
      sum += v;
      ++n;
      ++col_obs[static_cast<std::size_t>(j)];
    }
    if (n == 0) throw InitError("row " + std::to_string(i) + " has no observed entry");
    observed += static_cast<std::size_t>(n);
    const double mean = sum / n;
    for (Eigen::Index j = 0; j < cols; ++j) {
      const double v = pref_matrix(i, j);
      imputed(i, j) = std::isnan(v) ? mean : v;
    }
  }
  for (Eigen::Index j = 0; j < cols; ++j) {
    if (col_obs[static_cast<std::size_t>(j)] == 0) {
      throw InitError("column " + std::to_string(j) + " has no observed entry");
    }
  }
  Eigen::BDCSVD<Matrix> svd(imputed, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  PrefFactorization f;
  f.rank = rank;
  f.item_features = svd.matrixU().leftCols(rank);
  f.user_embeddings = svd.matrixV().leftCols(rank);
  f.singular_values = s.head(rank);
  f.fill_rate = static_cast<double>(observed) / static_cast<double>(rows * cols);
  if (s.size() > rank) {
    f.tail_norm = s.tail(s.size() - rank).norm();
    f.next_singular_value = s[rank];
  }
  return f;
}

struct HeadRegression {
  Matrix weights;  // rank x embed dim
  double residual = 0.0;  // Frobenius norm of diffs * W' - targets
  bool degenerate = false;  // diffs lacked full column rank
};

/// Least-squares W minimizing ||diffs * W' - targets|| with no intercept;
/// rank-deficient designs get the minimum-norm solution.
inline HeadRegression pref_head_regression(const Matrix& embedding_diffs, const Matrix& item_features) {
  if (embedding_diffs.rows() != item_features.rows()) {
    throw InputError("row mismatch: " + std::to_string(embedding_diffs.rows()) + " diffs vs " +
                     std::to_string(item_features.rows()) + " targets");
  }
  if (embedding_diffs.size() == 0 || embedding_diffs.isZero(0.0)) {
    throw InputError("embedding differences are all zero");
  }
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(embedding_diffs);
  HeadRegression out;
  out.weights = cod.solve(item_features).transpose();
  out.degenerate = cod.rank() < embedding_diffs.cols();
  out.residual = (embedding_diffs * out.weights.transpose() - item_features).norm();
  return out;
}

// ---------------------------------------------------------------------------
// Preference matrix from records
// ---------------------------------------------------------------------------

/// Unordered response pair under one prompt. `first` < `second`
/// lexicographically; a +1 entry means the user chose `first`.
struct ResponsePair {
  std::string prompt;
  std::string first;
  std::string second;
  auto operator<=>(const ResponsePair&) const = default;
};

struct PreferenceMatrix {
  std::vector<ResponsePair> pairs;
  std::vector<std::string> users;
  Matrix signs;  // pairs x users, NaN where unobserved
};

inline PreferenceMatrix build_preference_matrix(const std::vector<PreferenceRecord>& records) {
  std::map<ResponsePair, std::size_t> pair_index;
  std::map<std::string, std::size_t> user_index;
  PreferenceMatrix pm;
  for (const auto& r : records) {
    const bool chosen_first = r.chosen < r.rejected;
    ResponsePair p{r.prompt, chosen_first ? r.chosen : r.rejected, chosen_first ? r.rejected : r.chosen};
    if (pair_index.emplace(p, pm.pairs.size()).second) pm.pairs.push_back(std::move(p));
    if (user_index.emplace(r.user_id, pm.users.size()).second) pm.users.push_back(r.user_id);
  }
  pm.signs = Matrix::Constant(static_cast<Eigen::Index>(pm.pairs.size()),
                              static_cast<Eigen::Index>(pm.users.size()), kMissing);
  for (const auto& r : records) {
    const bool chosen_first = r.chosen < r.rejected;
    ResponsePair p{r.prompt, chosen_first ? r.chosen : r.rejected, chosen_first ? r.rejected : r.chosen};
    pm.signs(static_cast<Eigen::Index>(pair_index.at(p)),
             static_cast<Eigen::Index>(user_index.at(r.user_id))) = chosen_first ? 1.0 : -1.0;
  }
  return pm;
}

}  // namespace palign
