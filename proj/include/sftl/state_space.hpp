#pragma once

#include <algorithm>
#include <utility>
#include <vector>

#include "sftl/errors.hpp"
#include "sftl/linalg.hpp"
#include "sftl/matern.hpp"

namespace sftl {

/// Gaussian state over the stacked factor coordinates and their derivatives,
/// dimension D = R (p+1), at one timestamp (rescaled time units).
struct StateGaussian {
  Vector mean;
  Matrix cov;
  double t = 0.0;
};

/// Time-ordered filtered (and optionally smoothed) states of one
/// (mode, object) pair. Mode and object identifiers are 1-based.
struct FactorChain {
  int mode = 0;
  int object = 0;
  int rank = 1;
  std::vector<double> timestamps;
  std::vector<StateGaussian> filtered;
  std::vector<StateGaussian> smoothed;

  bool empty() const { return timestamps.empty(); }
  std::size_t size() const { return timestamps.size(); }
  bool is_smoothed() const { return smoothed.size() == timestamps.size() && !timestamps.empty(); }
};

/// Block-diagonal lift of a discretization to the R-factor state, with the
/// stationary covariance lifted alongside.
struct BlockDiscretization {
  Matrix F_bar;
  Matrix Q_bar;
  Matrix P_inf_bar;
};

inline BlockDiscretization block_discretization(const Discretization& disc,
                                                const Matrix& p_inf, int rank) {
  return BlockDiscretization{block_diagonal(disc.F, rank),
                             block_diagonal(disc.Q, rank),
                             block_diagonal(p_inf, rank)};
}

namespace detail {

inline const Discretization& discretization_for(const LtiSde& sde,
                                                const DiscretizationCache* cache,
                                                double dt, Discretization& local) {
  if (cache != nullptr) return cache->get(sde, dt);
  local = discretize(sde, dt);
  return local;
}

/// Forward propagation of a state by dt through the block transition.
inline StateGaussian propagate(const StateGaussian& state, const LtiSde& sde,
                               const DiscretizationCache* cache, int rank,
                               double new_t) {
  Discretization local;
  const Discretization& disc =
      discretization_for(sde, cache, new_t - state.t, local);
  const Matrix f_bar = block_diagonal(disc.F, rank);
  StateGaussian out;
  out.t = new_t;
  out.mean = f_bar * state.mean;
  out.cov = make_psd(f_bar * state.cov * f_bar.transpose() +
                     block_diagonal(disc.Q, rank));
  return out;
}

/// Conditions the stationary state at time t on a later posterior at
/// state.t > t, using the reverse-time factorization of the stationary
/// prior: gain G = P_inf_bar F_bar^T P_inf_bar^{-1}.
inline StateGaussian condition_before(const StateGaussian& state,
                                      const LtiSde& sde,
                                      const DiscretizationCache* cache,
                                      int rank, double t) {
  Discretization local;
  const Discretization& disc =
      discretization_for(sde, cache, state.t - t, local);
  const Matrix f_bar = block_diagonal(disc.F, rank);
  const Matrix p_inf_bar = block_diagonal(sde.P_inf, rank);
  Matrix gain;
  try {
    gain = (invert_spd(p_inf_bar) * f_bar * p_inf_bar).transpose();
  } catch (const SingularSystem& e) {
    throw SingularPredictCovariance(e.what());
  }
  StateGaussian out;
  out.t = t;
  out.mean = gain * state.mean;
  out.cov = make_psd(p_inf_bar - gain * f_bar * p_inf_bar +
                     gain * state.cov * gain.transpose());
  return out;
}

/// One backward smoothing correction: refines the filtered `state` given the
/// already-smoothed next state at next_smoothed.t > state.t.
inline StateGaussian smooth_against(const StateGaussian& state,
                                    const StateGaussian& next_smoothed,
                                    const LtiSde& sde,
                                    const DiscretizationCache* cache,
                                    int rank) {
  Discretization local;
  const Discretization& disc =
      discretization_for(sde, cache, next_smoothed.t - state.t, local);
  const Matrix f_bar = block_diagonal(disc.F, rank);
  const Vector mean_pred = f_bar * state.mean;
  const Matrix cov_pred = symmetrize(f_bar * state.cov * f_bar.transpose() +
                                     block_diagonal(disc.Q, rank));
  Matrix gain;
  try {
    gain = (invert_spd(cov_pred) * f_bar * state.cov).transpose();
  } catch (const SingularSystem& e) {
    throw SingularPredictCovariance(e.what());
  }
  StateGaussian out;
  out.t = state.t;
  out.mean = state.mean + gain * (next_smoothed.mean - mean_pred);
  out.cov = make_psd(state.cov +
                     gain * (next_smoothed.cov - cov_pred) * gain.transpose());
  return out;
}

}  // namespace detail

/// Kalman predict step to a strictly later timestamp. An empty chain yields
/// the stationary prior (zero mean, block P_inf).
inline StateGaussian predict(const FactorChain& chain, const LtiSde& sde,
                             double new_t,
                             const DiscretizationCache* cache = nullptr) {
  if (chain.empty()) {
    const int d = sde.dim() * chain.rank;
    StateGaussian out;
    out.t = new_t;
    out.mean = Vector::Zero(d);
    out.cov = block_diagonal(sde.P_inf, chain.rank);
    return out;
  }
  if (!(new_t > chain.timestamps.back())) {
    throw NonMonotoneTimestamp(
        "predict target " + std::to_string(new_t) +
        " is not after the last chain timestamp " +
        std::to_string(chain.timestamps.back()));
  }
  return detail::propagate(chain.filtered.back(), sde, cache, chain.rank,
                           new_t);
}

/// RTS backward pass over the filtered states. Returns the smoothed states
/// without mutating the chain; the last state is the last filtered state.
inline std::vector<StateGaussian> rts_smooth(
    const FactorChain& chain, const LtiSde& sde,
    const DiscretizationCache* cache = nullptr) {
  if (chain.empty()) {
    throw EmptyModel("cannot smooth an empty chain");
  }
  std::vector<StateGaussian> smoothed(chain.size());
  smoothed.back() = chain.filtered.back();
  for (std::size_t k = chain.size() - 1; k-- > 0;) {
    smoothed[k] = detail::smooth_against(chain.filtered[k], smoothed[k + 1],
                                         sde, cache, chain.rank);
  }
  return smoothed;
}

/// Posterior state at an arbitrary time point.
///
/// With use_smoothed (requires a smoothed chain): exact timestamps return the
/// smoothed state; beyond the last timestamp the smoothed tail is propagated
/// forward; before the first timestamp the smoothed head is conditioned
/// backward under the stationary prior; interior points insert an unobserved
/// pseudo-state (predict from the left filtered state, then one smoothing
/// correction against the right smoothed state), which reproduces the exact
/// Gaussian-process posterior in the linear-Gaussian case.
///
/// Without use_smoothed the query is causal: it uses the filtered state at or
/// before t (forward propagation), or backward conditioning before the first.
inline StateGaussian trajectory_state(const FactorChain& chain,
                                      const LtiSde& sde, double t,
                                      bool use_smoothed,
                                      const DiscretizationCache* cache = nullptr) {
  if (chain.empty()) {
    throw EmptyModel("trajectory query on an empty chain");
  }
  if (use_smoothed && !chain.is_smoothed()) {
    throw NotSmoothed("interpolation requires a smoothed chain");
  }
  const std::vector<StateGaussian>& states =
      use_smoothed ? chain.smoothed : chain.filtered;
  const auto& ts = chain.timestamps;
  const auto it = std::lower_bound(ts.begin(), ts.end(), t);
  const std::size_t k = static_cast<std::size_t>(it - ts.begin());
  if (it != ts.end() && *it == t) return states[k];
  if (k == ts.size()) {
    return detail::propagate(states.back(), sde, cache, chain.rank, t);
  }
  if (k == 0) {
    return detail::condition_before(states.front(), sde, cache, chain.rank, t);
  }
  StateGaussian pseudo =
      detail::propagate(chain.filtered[k - 1], sde, cache, chain.rank, t);
  if (!use_smoothed) return pseudo;
  return detail::smooth_against(pseudo, states[k], sde, cache, chain.rank);
}

/// Posterior state at an arbitrary time point of a smoothed chain.
inline StateGaussian interpolate(const FactorChain& chain, const LtiSde& sde,
                                 double t,
                                 const DiscretizationCache* cache = nullptr) {
  return trajectory_state(chain, sde, t, /*use_smoothed=*/true, cache);
}

/// Marginal of the factor coordinates: rows/columns at indices r (p+1),
/// r = 0..R-1, dropping the derivative coordinates.
inline std::pair<Vector, Matrix> extract_factor(const StateGaussian& state,
                                                int rank) {
  const Eigen::Index dim = state.mean.size();
  if (rank <= 0 || dim % rank != 0) {
    throw DimensionMismatch("state dimension " + std::to_string(dim) +
                            " not divisible by rank " + std::to_string(rank));
  }
  const Eigen::Index stride = dim / rank;
  Vector mean(rank);
  Matrix cov(rank, rank);
  for (int r = 0; r < rank; ++r) {
    mean[r] = state.mean[r * stride];
    for (int s = 0; s < rank; ++s) {
      cov(r, s) = state.cov(r * stride, s * stride);
    }
  }
  return {std::move(mean), std::move(cov)};
}

}  // namespace sftl
