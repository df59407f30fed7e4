#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <mutex>
#include <shared_mutex>
#include <unordered_map>

#include <unsupported/Eigen/MatrixFunctions>

#include "sftl/errors.hpp"
#include "sftl/linalg.hpp"

namespace sftl {

/// Matern covariance with half-integer smoothness nu = p + 1/2,
/// amplitude a (signal variance) and lengthscale rho (time units).
struct MaternKernel {
  int p;
  double amplitude;
  double lengthscale;

  MaternKernel(int p_, double amplitude_, double lengthscale_)
      : p(p_), amplitude(amplitude_), lengthscale(lengthscale_) {
    if (p < 0 || p > 2) {
      throw InvalidKernel("smoothness index p must be in {0, 1, 2}, got " +
                          std::to_string(p));
    }
    if (!(amplitude > 0.0)) {
      throw InvalidKernel("amplitude must be positive");
    }
    if (!(lengthscale > 0.0)) {
      throw InvalidKernel("lengthscale must be positive");
    }
  }

  double nu() const { return p + 0.5; }
  double alpha() const { return std::sqrt(2.0 * nu()) / lengthscale; }
};

/// Linear time-invariant SDE whose stationary output reproduces the kernel:
/// state dimension p+1, companion drift A, white-noise loading eta,
/// spectral density sigma2, stationary covariance P_inf.
struct LtiSde {
  Matrix A;
  Vector eta;
  double sigma2;
  Matrix P_inf;

  int dim() const { return static_cast<int>(A.rows()); }
};

/// Exact discretization of the SDE over a gap dt:
/// F = exp(dt A), Q = P_inf - F P_inf F^T (symmetrized, PSD-clamped).
struct Discretization {
  Matrix F;
  Matrix Q;
  double dt;
};

/// White-noise spectral density sigma^2 = a 2 sqrt(pi) Gamma(p+1) /
/// Gamma(p+1/2) alpha^(2p+1). Reduces to 2 a alpha at p=0 and
/// 4 a alpha^3 at p=1.
inline double spectral_density_scale(const MaternKernel& kernel) {
  const double alpha = kernel.alpha();
  const double p = kernel.p;
  return kernel.amplitude * 2.0 * std::sqrt(M_PI) * std::tgamma(p + 1.0) /
         std::tgamma(p + 0.5) * std::pow(alpha, 2.0 * p + 1.0);
}

/// Kernel value at lag dt. Half-integer smoothness admits the exponential
/// closed forms; the limit at dt = 0 is the amplitude.
inline double kernel_value(const MaternKernel& kernel, double dt) {
  const double x = kernel.alpha() * std::abs(dt);
  const double a = kernel.amplitude;
  switch (kernel.p) {
    case 0:
      return a * std::exp(-x);
    case 1:
      return a * (1.0 + x) * std::exp(-x);
    default:
      return a * (1.0 + x + x * x / 3.0) * std::exp(-x);
  }
}

/// Builds the companion-form SDE for the kernel. The bottom row of A holds
/// the negated coefficients of (alpha + s)^(p+1); P_inf solves the Lyapunov
/// equation A P + P A^T + sigma^2 eta eta^T = 0 via the vectorized linear
/// system (I (x) A + A (x) I) vec(P) = -sigma^2 vec(eta eta^T).
inline LtiSde build_sde(const MaternKernel& kernel) {
  const int d = kernel.p + 1;
  const double alpha = kernel.alpha();

  LtiSde sde;
  sde.A = Matrix::Zero(d, d);
  for (int i = 0; i + 1 < d; ++i) sde.A(i, i + 1) = 1.0;
  double binom = 1.0;
  for (int k = 0; k < d; ++k) {
    // binom = C(p+1, k), updated incrementally.
    sde.A(d - 1, k) = -binom * std::pow(alpha, static_cast<double>(d - k));
    binom = binom * (d - k) / (k + 1.0);
  }
  sde.eta = Vector::Zero(d);
  sde.eta[d - 1] = 1.0;
  sde.sigma2 = spectral_density_scale(kernel);

  const Matrix id = Matrix::Identity(d, d);
  const Matrix lhs = kronecker(id, sde.A) + kronecker(sde.A, id);
  const Matrix rhs_mat = -sde.sigma2 * (sde.eta * sde.eta.transpose());
  Vector rhs(d * d);
  for (int j = 0; j < d; ++j) {
    for (int i = 0; i < d; ++i) rhs[j * d + i] = rhs_mat(i, j);
  }
  Eigen::FullPivLU<Matrix> lu(lhs);
  if (!lu.isInvertible()) {
    throw LyapunovSolveFailure("Lyapunov system singular for alpha = " +
                               std::to_string(alpha));
  }
  const Vector vec_p = lu.solve(rhs);
  Matrix p_inf(d, d);
  for (int j = 0; j < d; ++j) {
    for (int i = 0; i < d; ++i) p_inf(i, j) = vec_p[j * d + i];
  }
  sde.P_inf = symmetrize(p_inf);
  return sde;
}

/// Discretizes the SDE over a non-negative gap. The matrix exponential uses
/// scaling-and-squaring with a Pade approximant.
inline Discretization discretize(const LtiSde& sde, double dt) {
  Discretization disc;
  disc.dt = dt;
  if (dt == 0.0) {
    disc.F = Matrix::Identity(sde.dim(), sde.dim());
    disc.Q = Matrix::Zero(sde.dim(), sde.dim());
    return disc;
  }
  disc.F = (dt * sde.A).exp();
  disc.Q = make_psd(sde.P_inf - disc.F * sde.P_inf * disc.F.transpose());
  return disc;
}

/// Read-mostly memoization of discretizations keyed by the bit pattern of
/// dt. Entries are never evicted and unordered_map references are stable, so
/// returned references stay valid; lookups are safe under concurrent readers.
/// Moving is only safe while no other thread touches either side.
class DiscretizationCache {
 public:
  DiscretizationCache() = default;
  DiscretizationCache(DiscretizationCache&& other) noexcept
      : cache_(std::move(other.cache_)) {}
  DiscretizationCache& operator=(DiscretizationCache&& other) noexcept {
    cache_ = std::move(other.cache_);
    return *this;
  }

  const Discretization& get(const LtiSde& sde, double dt) const {
    std::uint64_t key;
    std::memcpy(&key, &dt, sizeof(key));
    {
      std::shared_lock lock(mutex_);
      auto it = cache_.find(key);
      if (it != cache_.end()) return it->second;
    }
    Discretization fresh = discretize(sde, dt);
    std::unique_lock lock(mutex_);
    auto [it, inserted] = cache_.try_emplace(key, std::move(fresh));
    return it->second;
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return cache_.size();
  }

 private:
  mutable std::shared_mutex mutex_;
  mutable std::unordered_map<std::uint64_t, Discretization> cache_;
};

}  // namespace sftl
