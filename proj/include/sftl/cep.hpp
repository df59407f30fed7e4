#pragma once

#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "sftl/errors.hpp"
#include "sftl/linalg.hpp"
#include "sftl/state_space.hpp"

namespace sftl {

enum class ObservationForm { kCp, kTucker };

/// Gaussian site in natural parameters (precision, precision times mean).
/// Sites may be indefinite mid-run; only the composed posterior must stay
/// proper.
struct GaussianSite {
  Matrix precision;
  Vector shift;

  static GaussianSite zero(int dim) {
    return GaussianSite{Matrix::Zero(dim, dim), Vector::Zero(dim)};
  }
};

/// Gamma site for the noise precision, stored as increments over the prior.
/// The shape increment converges to exactly 1/2 per observation.
struct GammaSite {
  double shape_increment = 0.0;
  double rate_increment = 0.0;
};

/// Gamma posterior of the observation-noise precision tau.
struct NoisePosterior {
  double shape = 1.0;
  double rate = 0.1;

  double etau() const { return shape / rate; }
};

/// Gaussian posterior over the vectorized Tucker core.
struct TuckerCorePosterior {
  Vector mean;
  Matrix cov;

  /// Standard-normal prior over the core entries.
  static TuckerCorePosterior standard(int dim) {
    return TuckerCorePosterior{Vector::Zero(dim), Matrix::Identity(dim, dim)};
  }
};

/// Posterior with one site divided out, in both moment and natural form.
struct CalibratedGaussian {
  Vector mean;
  Matrix cov;
  Matrix precision;
  Vector shift;
};

/// Divides a Gaussian site out of a posterior given in natural parameters.
/// Throws ImproperCalibration when the remainder is not positive definite.
inline CalibratedGaussian calibrate(const Matrix& posterior_precision,
                                    const Vector& posterior_shift,
                                    const GaussianSite& site) {
  CalibratedGaussian out;
  out.precision = symmetrize(posterior_precision - site.precision);
  out.shift = posterior_shift - site.shift;
  if (!is_positive_definite(out.precision)) {
    throw ImproperCalibration("calibrated precision is not positive definite");
  }
  out.cov = invert_spd(out.precision);
  out.mean = out.cov * out.shift;
  return out;
}

/// Divides a Gamma site out of a Gamma posterior; returns (shape, rate).
inline std::pair<double, double> calibrate_gamma(double posterior_shape,
                                                 double posterior_rate,
                                                 const GammaSite& site) {
  const double shape = posterior_shape - site.shape_increment;
  const double rate = posterior_rate - site.rate_increment;
  if (!(shape > 0.0) || !(rate > 0.0)) {
    throw ImproperCalibration("calibrated Gamma parameters are not positive");
  }
  return {shape, rate};
}

/// Conditional tilted moments of one factor: S = [Omega^-1 + Etau E[vv^T]]^-1,
/// mean = S (Omega^-1 beta + Etau y E[v]), where v collects the other modes'
/// contributions (elementwise products of their means and second moments).
inline std::pair<Vector, Matrix> cp_conditional_moments(
    double y, const CalibratedGaussian& calibrated, const Vector& ev_other,
    const Matrix& evv_other, double etau) {
  const Matrix s_inv = calibrated.precision + etau * evv_other;
  const Matrix s = symmetrize(invert_spd(s_inv));
  const Vector mean = s * (calibrated.shift + etau * y * ev_other);
  return {mean, s};
}

/// Tilted Gamma parameters: shape grows by exactly 1/2; the rate grows by
/// half the expected squared residual of the multilinear fit.
inline std::pair<double, double> tau_tilted_params(double y,
                                                   double calibrated_shape,
                                                   double calibrated_rate,
                                                   const Vector& ev_full,
                                                   const Matrix& evv_full) {
  const double ef = ev_full.sum();
  const double ef2 = evv_full.sum();
  const double rate = calibrated_rate + 0.5 * y * y + 0.5 * ef2 - y * ef;
  if (!(rate > 0.0)) {
    throw NonPositiveRate("tilted Gamma rate is not positive");
  }
  return {calibrated_shape + 0.5, rate};
}

/// Flattening and mode-unfolding index maps for the Tucker core. vec(W) is
/// row-major over the mode indices (mode 1 slowest, mode M fastest), which
/// matches Kronecker products taken in increasing mode order.
class TuckerIndexer {
 public:
  explicit TuckerIndexer(std::vector<int> ranks) : ranks_(std::move(ranks)) {
    const int m_count = static_cast<int>(ranks_.size());
    total_ = 1;
    for (int r : ranks_) total_ *= r;
    strides_.assign(m_count, 1);
    for (int m = m_count - 2; m >= 0; --m) {
      strides_[m] = strides_[m + 1] * ranks_[m + 1];
    }
    unfold_.resize(m_count);
    for (int m = 0; m < m_count; ++m) {
      const int own = ranks_[m];
      const int others = total_ / own;
      unfold_[m].assign(own, std::vector<int>(others, 0));
      std::vector<int> digits(m_count, 0);
      for (int col = 0; col < others; ++col) {
        // Decode col into the other modes' indices, last other mode fastest.
        int rem = col;
        for (int j = m_count - 1; j >= 0; --j) {
          if (j == m) continue;
          digits[j] = rem % ranks_[j];
          rem /= ranks_[j];
        }
        for (int r = 0; r < own; ++r) {
          digits[m] = r;
          int flat = 0;
          for (int j = 0; j < m_count; ++j) flat += digits[j] * strides_[j];
          unfold_[m][r][col] = flat;
        }
      }
    }
  }

  int modes() const { return static_cast<int>(ranks_.size()); }
  int rank(int m) const { return ranks_[m]; }
  const std::vector<int>& ranks() const { return ranks_; }
  int total() const { return total_; }

  int flat(const std::vector<int>& index) const {
    int out = 0;
    for (std::size_t j = 0; j < ranks_.size(); ++j) {
      out += index[j] * strides_[j];
    }
    return out;
  }

  /// unfold(m)[r][col] is the flat position of core entry (r at mode m,
  /// col over the remaining modes in increasing mode order).
  const std::vector<std::vector<int>>& unfold(int m) const {
    return unfold_[m];
  }

 private:
  std::vector<int> ranks_;
  std::vector<int> strides_;
  int total_ = 1;
  std::vector<std::vector<std::vector<int>>> unfold_;
};

/// Moments of b^m = W_(m) (kron of other factors) for a factor target, where
/// the expectation runs over both the core and the other modes' posteriors.
/// core_second = cov + mean mean^T of vec(W).
inline std::pair<Vector, Matrix> tucker_factor_contraction(
    const TuckerIndexer& indexer, int target_mode, const Vector& core_mean,
    const Matrix& core_second, const std::vector<Vector>& factor_means,
    const std::vector<Matrix>& factor_seconds) {
  Vector kron_mean = Vector::Ones(1);
  Matrix kron_second = Matrix::Ones(1, 1);
  for (int j = 0; j < indexer.modes(); ++j) {
    if (j == target_mode) continue;
    kron_mean = kronecker(kron_mean, factor_means[j]);
    kron_second = kronecker(kron_second, factor_seconds[j]);
  }
  const auto& map = indexer.unfold(target_mode);
  const int own = indexer.rank(target_mode);
  const int others = indexer.total() / own;
  Vector eb = Vector::Zero(own);
  for (int r = 0; r < own; ++r) {
    for (int p = 0; p < others; ++p) {
      eb[r] += core_mean[map[r][p]] * kron_mean[p];
    }
  }
  Matrix ebb = Matrix::Zero(own, own);
  for (int r = 0; r < own; ++r) {
    for (int s = 0; s < own; ++s) {
      double acc = 0.0;
      for (int p = 0; p < others; ++p) {
        for (int q = 0; q < others; ++q) {
          acc += core_second(map[r][p], map[s][q]) * kron_second(q, p);
        }
      }
      ebb(r, s) = acc;
    }
  }
  return {std::move(eb), symmetrize(ebb)};
}

/// Conditional tilted moments for a Tucker target. For a factor target the
/// contraction above replaces the cross-mode Hadamard products; for the core
/// target the likelihood is linear in vec(W) with coefficient c = kron of all
/// factors, so E[c] and E[cc^T] are Kronecker products of the factor moments.
inline std::pair<Vector, Matrix> tucker_conditional_moments(
    double y, const CalibratedGaussian& calibrated,
    const TuckerIndexer& indexer, const Vector& core_mean,
    const Matrix& core_second, const std::vector<Vector>& factor_means,
    const std::vector<Matrix>& factor_seconds, double etau,
    std::optional<int> target_mode) {
  if (target_mode.has_value()) {
    auto [eb, ebb] = tucker_factor_contraction(
        indexer, *target_mode, core_mean, core_second, factor_means,
        factor_seconds);
    return cp_conditional_moments(y, calibrated, eb, ebb, etau);
  }
  Vector ec = Vector::Ones(1);
  Matrix ecc = Matrix::Ones(1, 1);
  for (int j = 0; j < indexer.modes(); ++j) {
    ec = kronecker(ec, factor_means[j]);
    ecc = kronecker(ecc, factor_seconds[j]);
  }
  return cp_conditional_moments(y, calibrated, ec, ecc, etau);
}

/// One observed tensor entry within a batch; indices are 1-based per mode.
struct BatchEntry {
  std::vector<int> idx;
  double y = 0.0;
};

/// Per-observation site approximations: one Gaussian site per mode, one for
/// the Tucker core when enabled, and one Gamma site for the noise precision.
struct SiteSet {
  std::vector<GaussianSite> factor;
  GaussianSite core;
  GammaSite noise;
};

struct CepConfig {
  int max_iters = 50;
  double tol = 1e-4;
  double damping = 0.5;
  /// Known observation-noise precision. When set, the Gamma posterior is
  /// left untouched and this value is used as E[tau] everywhere.
  std::optional<double> fixed_tau;
};

using ChainKey = std::pair<int, int>;  // (mode, object), both 1-based

struct CepResult {
  std::map<ChainKey, StateGaussian> posteriors;
  std::map<ChainKey, std::pair<Matrix, Vector>> naturals;
  NoisePosterior noise;
  std::optional<TuckerCorePosterior> core;
  std::vector<SiteSet> sites;
  int iterations = 0;
  bool converged = false;
  bool no_progress = false;
};

namespace detail {

struct FactorSnapshot {
  Vector state_mean;
  Vector mean;     // factor marginal mean
  Matrix second;   // factor marginal second moment
  Matrix precision;  // factor marginal precision
};

inline void lift_site(Matrix& lambda, Vector& theta, const GaussianSite& site,
                      int stride) {
  const int rank = static_cast<int>(site.shift.size());
  for (int r = 0; r < rank; ++r) {
    theta[r * stride] += site.shift[r];
    for (int s = 0; s < rank; ++s) {
      lambda(r * stride, s * stride) += site.precision(r, s);
    }
  }
}

}  // namespace detail

/// Runs the conditional-EP fixed point for one batch of same-timestamp
/// entries. All sites start at zero, every site is updated in parallel from
/// the sweep-start posterior with damped natural-parameter steps, and the
/// merged posterior is recomputed after each sweep. Iteration stops when the
/// largest absolute change over the posterior means (states and core) drops
/// below config.tol, or after config.max_iters sweeps.
///
/// `ranks` holds the factor rank per mode (all equal for the CP form).
/// `core_prior` and `indexer` are required for the Tucker form; with
/// update_core false the core is treated as deterministic and only read.
inline CepResult run_cep_batch(const std::vector<BatchEntry>& entries,
                               const std::map<ChainKey, StateGaussian>& priors,
                               const std::vector<int>& ranks,
                               ObservationForm form,
                               const NoisePosterior& noise_prior,
                               const TuckerCorePosterior* core_prior,
                               const TuckerIndexer* indexer,
                               const CepConfig& config,
                               bool update_core = true) {
  const int m_count = static_cast<int>(ranks.size());
  const std::size_t n = entries.size();
  const bool tucker = form == ObservationForm::kTucker;
  const bool learn_tau = !config.fixed_tau.has_value();
  const bool learn_core = tucker && update_core;

  // Prior natural parameters per involved state.
  std::map<ChainKey, std::pair<Matrix, Vector>> prior_naturals;
  std::map<ChainKey, int> strides;
  for (const auto& [key, state] : priors) {
    Matrix lambda = symmetrize(invert_spd(state.cov));
    Vector theta = lambda * state.mean;
    strides[key] =
        static_cast<int>(state.mean.size()) / ranks[key.first - 1];
    prior_naturals.emplace(key, std::make_pair(std::move(lambda), std::move(theta)));
  }

  std::pair<Matrix, Vector> core_prior_natural;
  if (learn_core) {
    core_prior_natural.first = symmetrize(invert_spd(core_prior->cov));
    core_prior_natural.second = core_prior_natural.first * core_prior->mean;
  }

  std::vector<SiteSet> sites(n);
  for (std::size_t e = 0; e < n; ++e) {
    sites[e].factor.reserve(m_count);
    for (int m = 0; m < m_count; ++m) {
      sites[e].factor.push_back(GaussianSite::zero(ranks[m]));
    }
    if (learn_core) sites[e].core = GaussianSite::zero(indexer->total());
  }

  // Recomputes posterior naturals, factor marginals, noise, and core from the
  // priors plus the current sites. Keeps the composition identity exact.
  std::map<ChainKey, std::pair<Matrix, Vector>> naturals;
  std::map<ChainKey, detail::FactorSnapshot> snapshot;
  NoisePosterior noise_cur = noise_prior;
  Vector core_mean;
  Matrix core_second;
  std::pair<Matrix, Vector> core_natural;
  if (tucker) {
    core_mean = core_prior->mean;
    core_second =
        core_prior->cov + core_prior->mean * core_prior->mean.transpose();
  }

  const auto merge = [&]() {
    naturals = prior_naturals;
    for (std::size_t e = 0; e < n; ++e) {
      for (int m = 0; m < m_count; ++m) {
        const ChainKey key{m + 1, entries[e].idx[m]};
        auto& [lambda, theta] = naturals[key];
        detail::lift_site(lambda, theta, sites[e].factor[m], strides[key]);
      }
    }
    snapshot.clear();
    for (auto& [key, nat] : naturals) {
      detail::FactorSnapshot snap;
      const Matrix cov = symmetrize(invert_spd(nat.first));
      snap.state_mean = nat.first.llt().solve(nat.second);
      const int rank = ranks[key.first - 1];
      const int stride = strides[key];
      snap.mean.resize(rank);
      Matrix vv(rank, rank);
      for (int r = 0; r < rank; ++r) {
        snap.mean[r] = snap.state_mean[r * stride];
        for (int s = 0; s < rank; ++s) {
          vv(r, s) = cov(r * stride, s * stride);
        }
      }
      snap.precision = symmetrize(invert_spd(vv));
      snap.second = symmetrize(vv) + snap.mean * snap.mean.transpose();
      snapshot.emplace(key, std::move(snap));
    }
    if (learn_tau) {
      noise_cur = noise_prior;
      for (const auto& set : sites) {
        noise_cur.shape += set.noise.shape_increment;
        noise_cur.rate += set.noise.rate_increment;
      }
    }
    if (learn_core) {
      core_natural = core_prior_natural;
      for (const auto& set : sites) {
        core_natural.first += set.core.precision;
        core_natural.second += set.core.shift;
      }
      const Matrix cov = symmetrize(invert_spd(core_natural.first));
      core_mean = core_natural.first.llt().solve(core_natural.second);
      core_second = cov + core_mean * core_mean.transpose();
    }
  };
  merge();

  CepResult result;
  result.noise = noise_prior;

  const auto collect_means = [&]() {
    std::vector<Vector> means;
    means.reserve(snapshot.size() + 1);
    for (const auto& [key, snap] : snapshot) means.push_back(snap.state_mean);
    if (learn_core) means.push_back(core_mean);
    return means;
  };
  std::vector<Vector> prev_means = collect_means();

  for (int it = 1; it <= config.max_iters; ++it) {
    result.iterations = it;
    const double etau =
        config.fixed_tau.has_value() ? *config.fixed_tau : noise_cur.etau();
    const auto frozen = snapshot;
    const Vector frozen_core_mean = core_mean;
    const Matrix frozen_core_second = core_second;
    std::vector<SiteSet> next = sites;
    int applied = 0;
    const double d = config.damping;

    for (std::size_t e = 0; e < n; ++e) {
      const BatchEntry& entry = entries[e];
      std::vector<const detail::FactorSnapshot*> marg(m_count);
      std::vector<Vector> means(m_count);
      std::vector<Matrix> seconds(m_count);
      for (int m = 0; m < m_count; ++m) {
        marg[m] = &frozen.at({m + 1, entry.idx[m]});
        means[m] = marg[m]->mean;
        seconds[m] = marg[m]->second;
      }

      // Factor sites.
      for (int m = 0; m < m_count; ++m) {
        const Matrix cal =
            symmetrize(marg[m]->precision - sites[e].factor[m].precision);
        if (!is_positive_definite(cal)) continue;
        Vector ev;
        Matrix evv;
        if (tucker) {
          std::tie(ev, evv) = tucker_factor_contraction(
              *indexer, m, frozen_core_mean, frozen_core_second, means,
              seconds);
        } else {
          ev = Vector::Ones(ranks[m]);
          evv = Matrix::Ones(ranks[m], ranks[m]);
          for (int j = 0; j < m_count; ++j) {
            if (j == m) continue;
            ev = ev.cwiseProduct(means[j]);
            evv = evv.cwiseProduct(seconds[j]);
          }
        }
        next[e].factor[m].precision =
            (1.0 - d) * sites[e].factor[m].precision + d * etau * evv;
        next[e].factor[m].shift =
            (1.0 - d) * sites[e].factor[m].shift + d * etau * entry.y * ev;
        ++applied;
      }

      // Core site.
      if (learn_core) {
        const Matrix cal =
            symmetrize(core_natural.first - sites[e].core.precision);
        if (is_positive_definite(cal)) {
          Vector ec = Vector::Ones(1);
          Matrix ecc = Matrix::Ones(1, 1);
          for (int j = 0; j < m_count; ++j) {
            ec = kronecker(ec, means[j]);
            ecc = kronecker(ecc, seconds[j]);
          }
          next[e].core.precision =
              (1.0 - d) * sites[e].core.precision + d * etau * ecc;
          next[e].core.shift =
              (1.0 - d) * sites[e].core.shift + d * etau * entry.y * ec;
          ++applied;
        }
      }

      // Gamma site. The shape target is the constant 1/2, so it is written
      // directly; only the rate is damped.
      if (learn_tau) {
        double ef;
        double ef2;
        if (tucker) {
          Vector ec = Vector::Ones(1);
          Matrix ecc = Matrix::Ones(1, 1);
          for (int j = 0; j < m_count; ++j) {
            ec = kronecker(ec, means[j]);
            ecc = kronecker(ecc, seconds[j]);
          }
          ef = frozen_core_mean.dot(ec);
          ef2 = frozen_core_second.cwiseProduct(ecc).sum();
        } else {
          Vector ev = Vector::Ones(ranks[0]);
          Matrix evv = Matrix::Ones(ranks[0], ranks[0]);
          for (int j = 0; j < m_count; ++j) {
            ev = ev.cwiseProduct(means[j]);
            evv = evv.cwiseProduct(seconds[j]);
          }
          ef = ev.sum();
          ef2 = evv.sum();
        }
        const double rate_target =
            0.5 * entry.y * entry.y + 0.5 * ef2 - entry.y * ef;
        bool proper = true;
        try {
          const auto cal =
              calibrate_gamma(noise_cur.shape, noise_cur.rate, sites[e].noise);
          proper = cal.second + rate_target > 0.0;
        } catch (const ImproperCalibration&) {
          proper = false;
        }
        if (proper) {
          next[e].noise.shape_increment = 0.5;
          next[e].noise.rate_increment =
              (1.0 - d) * sites[e].noise.rate_increment + d * rate_target;
          ++applied;
        }
      }
    }

    if (applied == 0) {
      result.no_progress = true;
      result.posteriors = priors;
      result.noise = noise_prior;
      if (tucker) result.core = *core_prior;
      result.sites = std::move(sites);
      return result;
    }

    sites = std::move(next);
    merge();

    double delta = 0.0;
    const std::vector<Vector> cur_means = collect_means();
    for (std::size_t i = 0; i < cur_means.size(); ++i) {
      delta = std::max(delta,
                       (cur_means[i] - prev_means[i]).cwiseAbs().maxCoeff());
    }
    prev_means = cur_means;
    if (delta < config.tol) {
      result.converged = true;
      break;
    }
  }

  for (const auto& [key, nat] : naturals) {
    StateGaussian state;
    state.t = priors.at(key).t;
    state.mean = nat.first.llt().solve(nat.second);
    state.cov = make_psd(invert_spd(nat.first));
    result.posteriors.emplace(key, std::move(state));
    result.naturals.emplace(key, nat);
  }
  result.noise = learn_tau ? noise_cur : noise_prior;
  if (tucker) {
    if (learn_core) {
      TuckerCorePosterior core_out;
      core_out.mean = core_mean;
      core_out.cov = make_psd(core_second - core_mean * core_mean.transpose());
      result.core = std::move(core_out);
    } else {
      result.core = *core_prior;
    }
  }
  result.sites = std::move(sites);
  return result;
}

/// Moment-matched mean and variance of one tensor entry given per-mode factor
/// moments, the core posterior (Tucker), and the expected noise precision.
inline std::pair<double, double> multilinear_prediction(
    ObservationForm form, const std::vector<Vector>& factor_means,
    const std::vector<Matrix>& factor_covs, const TuckerCorePosterior* core,
    double etau) {
  const int m_count = static_cast<int>(factor_means.size());
  double mean;
  double second;
  if (form == ObservationForm::kCp) {
    Vector ev = Vector::Ones(factor_means[0].size());
    Matrix evv = Matrix::Ones(factor_means[0].size(), factor_means[0].size());
    for (int j = 0; j < m_count; ++j) {
      ev = ev.cwiseProduct(factor_means[j]);
      evv = evv.cwiseProduct(
          (factor_covs[j] + factor_means[j] * factor_means[j].transpose())
              .eval());
    }
    mean = ev.sum();
    second = evv.sum();
  } else {
    Vector ec = Vector::Ones(1);
    Matrix ecc = Matrix::Ones(1, 1);
    for (int j = 0; j < m_count; ++j) {
      ec = kronecker(ec, factor_means[j]);
      ecc = kronecker(
          ecc, (factor_covs[j] + factor_means[j] * factor_means[j].transpose())
                   .eval());
    }
    const Matrix core_second = core->cov + core->mean * core->mean.transpose();
    mean = core->mean.dot(ec);
    second = core_second.cwiseProduct(ecc).sum();
  }
  return {mean, second - mean * mean + 1.0 / etau};
}

}  // namespace sftl
