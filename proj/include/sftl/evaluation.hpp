#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <tuple>
#include <utility>
#include <vector>

#include "sftl/data_io.hpp"
#include "sftl/engine.hpp"
#include "sftl/errors.hpp"
#include "sftl/linalg.hpp"
#include "sftl/rng.hpp"

namespace sftl {

struct CurvePoint {
  std::size_t processed = 0;
  double rmse = 0.0;
  double mae = 0.0;
};

struct ErrorReport {
  std::optional<double> rmse;
  std::optional<double> mae;
  std::size_t n = 0;
  std::vector<CurvePoint> curve;
};

/// RMSE and MAE of the posterior predictive mean over a test set.
inline std::pair<double, double> score(const PosteriorModel& model,
                                       const std::vector<Event>& test,
                                       bool use_smoothed = true) {
  if (test.empty()) throw EmptyTestSet("cannot score an empty test set");
  double se = 0.0;
  double ae = 0.0;
  for (const Event& e : test) {
    const double mean = model.predict_entry(e.idx, e.t, use_smoothed).first;
    const double r = mean - e.y;
    se += r * r;
    ae += std::abs(r);
  }
  const double n = static_cast<double>(test.size());
  return {std::sqrt(se / n), ae / n};
}

/// Streams the batches through the model, recording causal (filtered) test
/// errors after every `eval_every` batches plus a final causal point when the
/// batch count is not a multiple, then finalizes and reports the smoothed
/// errors. Curve points are keyed by cumulative processed event count.
inline ErrorReport online_score(PosteriorModel& model,
                                const std::vector<Batch>& batches,
                                const std::vector<Event>& test,
                                int eval_every = 0) {
  ErrorReport report;
  report.n = test.size();
  std::size_t processed = 0;
  int since_eval = 0;
  const bool curve = eval_every > 0 && !test.empty();
  for (const Batch& batch : batches) {
    model.process_batch(batch);
    processed += batch.entries.size();
    if (curve && ++since_eval == eval_every) {
      since_eval = 0;
      const auto [rmse, mae] = score(model, test, /*use_smoothed=*/false);
      report.curve.push_back(CurvePoint{processed, rmse, mae});
    }
  }
  if (curve && since_eval != 0) {
    const auto [rmse, mae] = score(model, test, /*use_smoothed=*/false);
    report.curve.push_back(CurvePoint{processed, rmse, mae});
  }
  model.finalize();
  if (!test.empty()) {
    const auto [rmse, mae] = score(model, test, /*use_smoothed=*/true);
    report.rmse = rmse;
    report.mae = mae;
  }
  return report;
}

struct Alignment {
  /// perm[r] is the estimated component matched to truth component r.
  std::vector<int> perm;
  /// signs[m][r] applied to the estimated component perm[r] in mode m; the
  /// product over modes is +1 for every r.
  std::vector<std::vector<double>> signs;
  /// Per-trajectory errors under the best alignment as (mode, object,
  /// component, rmse), modes/objects/components 1-based.
  std::vector<std::tuple<int, int, int, double>> rmse;
  double total_sse = std::numeric_limits<double>::infinity();
};

/// Resolves the inherent permutation and sign indeterminacy of multilinear
/// factorizations: estimates are compared to the truth under the best
/// component permutation and per-component sign pattern whose product over
/// modes is +1. est[m][j] and truth[m][j] are (n_samples x R) matrices of
/// factor trajectories sampled at common times.
inline Alignment align_trajectories(
    const std::vector<std::vector<Matrix>>& est,
    const std::vector<std::vector<Matrix>>& truth) {
  const int m_count = static_cast<int>(est.size());
  if (m_count == 0 || truth.size() != est.size()) {
    throw DimensionMismatch("estimate and truth mode counts differ");
  }
  int rank = -1;
  for (int m = 0; m < m_count; ++m) {
    if (est[m].size() != truth[m].size() || est[m].empty()) {
      throw DimensionMismatch("estimate and truth object counts differ");
    }
    for (std::size_t j = 0; j < est[m].size(); ++j) {
      if (rank < 0) rank = static_cast<int>(est[m][j].cols());
      if (est[m][j].cols() != rank || truth[m][j].cols() != rank) {
        throw IncompatibleRank("estimate and truth component counts differ");
      }
      if (est[m][j].rows() != truth[m][j].rows()) {
        throw DimensionMismatch("trajectory matrices have mismatched lengths");
      }
    }
  }

  // For one truth component r matched to estimate column c, the sign choice
  // decomposes across components, so each r is optimized independently.
  const auto component_best =
      [&](int r, int c) -> std::pair<double, std::vector<double>> {
    double best = std::numeric_limits<double>::infinity();
    std::vector<double> best_signs(m_count, 1.0);
    const int patterns = 1 << (m_count - 1);
    for (int mask = 0; mask < patterns; ++mask) {
      std::vector<double> signs(m_count, 1.0);
      double prod = 1.0;
      for (int m = 0; m + 1 < m_count; ++m) {
        signs[m] = (mask >> m) & 1 ? -1.0 : 1.0;
        prod *= signs[m];
      }
      signs[m_count - 1] = prod;
      double sse = 0.0;
      for (int m = 0; m < m_count; ++m) {
        for (std::size_t j = 0; j < est[m].size(); ++j) {
          sse += (signs[m] * est[m][j].col(c) - truth[m][j].col(r))
                     .squaredNorm();
        }
      }
      if (sse < best) {
        best = sse;
        best_signs = std::move(signs);
      }
    }
    return {best, best_signs};
  };

  Alignment out;
  std::vector<int> perm(rank);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<int> best_perm = perm;
  std::vector<std::vector<double>> best_signs;
  do {
    double total = 0.0;
    std::vector<std::vector<double>> signs(m_count,
                                           std::vector<double>(rank, 1.0));
    for (int r = 0; r < rank; ++r) {
      auto [sse, s] = component_best(r, perm[r]);
      total += sse;
      for (int m = 0; m < m_count; ++m) signs[m][r] = s[m];
    }
    if (total < out.total_sse) {
      out.total_sse = total;
      best_perm = perm;
      best_signs = std::move(signs);
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  out.perm = best_perm;
  out.signs = best_signs;
  for (int m = 0; m < m_count; ++m) {
    for (std::size_t j = 0; j < est[m].size(); ++j) {
      const double n = static_cast<double>(est[m][j].rows());
      for (int r = 0; r < rank; ++r) {
        const double sse = (best_signs[m][r] * est[m][j].col(best_perm[r]) -
                            truth[m][j].col(r))
                               .squaredNorm();
        out.rmse.emplace_back(m + 1, static_cast<int>(j) + 1, r + 1,
                              std::sqrt(sse / n));
      }
    }
  }
  return out;
}

/// One callable per (mode, object) mapping a time to that trajectory's
/// component values.
using TruthFunctions =
    std::vector<std::vector<std::function<Vector(double)>>>;

/// Factor-recovery error of a finalized model against known truth
/// trajectories, both sampled at n_points random times in [0, 1] and aligned
/// with align_trajectories. Requires the multiplicative form, whose
/// indeterminacies the alignment search undoes.
inline Alignment trajectory_rmse(const PosteriorModel& model,
                                 const TruthFunctions& truth,
                                 int n_points = 500, std::uint64_t seed = 0) {
  if (model.config().form != ObservationForm::kCp) {
    throw IncompatibleRank("trajectory alignment requires the CP form");
  }
  const std::vector<int>& dims = model.config().dims;
  if (truth.size() != dims.size()) {
    throw DimensionMismatch("truth mode count differs from the model");
  }
  for (std::size_t m = 0; m < truth.size(); ++m) {
    if (static_cast<int>(truth[m].size()) != dims[m]) {
      throw DimensionMismatch("truth object count differs from the model");
    }
  }
  if (n_points < 1) throw EmptyTestSet("n_points must be positive");

  Rng rng(seed);
  std::vector<double> ts(n_points);
  for (double& t : ts) t = rng.uniform();

  const int rank = model.config().rank;
  std::vector<std::vector<Matrix>> est(truth.size());
  std::vector<std::vector<Matrix>> ref(truth.size());
  for (std::size_t m = 0; m < truth.size(); ++m) {
    for (std::size_t j = 0; j < truth[m].size(); ++j) {
      Matrix e(n_points, rank);
      Matrix r(n_points, rank);
      for (int k = 0; k < n_points; ++k) {
        const int mode = static_cast<int>(m) + 1;
        const int object = static_cast<int>(j) + 1;
        e.row(k) = model.factor_mean_std(mode, object, ts[k]).first.transpose();
        const Vector v = truth[m][j](ts[k]);
        if (v.size() != rank) {
          throw IncompatibleRank("truth component count differs from the rank");
        }
        r.row(k) = v.transpose();
      }
      est[m].push_back(std::move(e));
      ref[m].push_back(std::move(r));
    }
  }
  return align_trajectories(est, ref);
}

}  // namespace sftl
