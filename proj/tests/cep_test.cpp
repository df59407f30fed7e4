#include <cmath>
#include <map>
#include <vector>

#include <gtest/gtest.h>

#include "sftl/cep.hpp"
#include "sftl/matern.hpp"

namespace {

using sftl::BatchEntry;
using sftl::CalibratedGaussian;
using sftl::CepConfig;
using sftl::CepResult;
using sftl::ChainKey;
using sftl::GammaSite;
using sftl::GaussianSite;
using sftl::LtiSde;
using sftl::Matrix;
using sftl::MaternKernel;
using sftl::NoisePosterior;
using sftl::ObservationForm;
using sftl::StateGaussian;
using sftl::TuckerIndexer;
using sftl::Vector;

Matrix scalar_matrix(double v) { return Matrix::Constant(1, 1, v); }
Vector scalar_vector(double v) { return Vector::Constant(1, v); }

CalibratedGaussian flat_calibration(int dim) {
  CalibratedGaussian cal;
  cal.precision = Matrix::Zero(dim, dim);
  cal.shift = Vector::Zero(dim);
  cal.mean = Vector::Zero(dim);
  cal.cov = Matrix::Zero(dim, dim);
  return cal;
}

StateGaussian stationary_prior(const LtiSde& sde, int rank, double t) {
  StateGaussian prior;
  prior.t = t;
  prior.mean = Vector::Zero(rank * sde.dim());
  prior.cov = sftl::block_diagonal(sde.P_inf, rank);
  return prior;
}

TEST(Calibrate, DividesSiteOut) {
  // Posterior N(1, 2) in natural form (0.5, 0.5); removing site (0.1, 0.1)
  // leaves precision 0.4 and mean (0.5 - 0.1) / 0.4 = 1.
  const GaussianSite site{scalar_matrix(0.1), scalar_vector(0.1)};
  const CalibratedGaussian cal =
      sftl::calibrate(scalar_matrix(0.5), scalar_vector(0.5), site);
  EXPECT_NEAR(cal.precision(0, 0), 0.4, 1e-14);
  EXPECT_NEAR(cal.mean[0], 1.0, 1e-14);
  EXPECT_NEAR(cal.cov(0, 0), 2.5, 1e-14);
}

TEST(Calibrate, ZeroSiteIsIdentity) {
  Matrix precision(2, 2);
  precision << 2.0, 0.3, 0.3, 1.5;
  Vector shift(2);
  shift << 0.4, -0.2;
  const CalibratedGaussian cal =
      sftl::calibrate(precision, shift, GaussianSite::zero(2));
  EXPECT_EQ(cal.precision, precision);
  EXPECT_EQ(cal.shift, shift);
  EXPECT_LE((cal.precision * cal.mean - shift).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Calibrate, ThrowsWhenRemainderIsImproper) {
  const GaussianSite site{scalar_matrix(0.5), scalar_vector(0.0)};
  EXPECT_THROW(sftl::calibrate(scalar_matrix(0.5), scalar_vector(0.5), site),
               sftl::ImproperCalibration);
  const GaussianSite bigger{scalar_matrix(0.7), scalar_vector(0.0)};
  EXPECT_THROW(sftl::calibrate(scalar_matrix(0.5), scalar_vector(0.5), bigger),
               sftl::ImproperCalibration);
}

TEST(CalibrateGamma, SubtractsIncrements) {
  const auto [shape, rate] =
      sftl::calibrate_gamma(3.5, 2.0, GammaSite{0.5, 0.3});
  EXPECT_NEAR(shape, 3.0, 1e-14);
  EXPECT_NEAR(rate, 1.7, 1e-14);
  EXPECT_THROW(sftl::calibrate_gamma(0.5, 2.0, GammaSite{0.5, 0.0}),
               sftl::ImproperCalibration);
  EXPECT_THROW(sftl::calibrate_gamma(3.0, 0.2, GammaSite{0.5, 0.3}),
               sftl::ImproperCalibration);
}

TEST(CpConditionalMoments, FlatCalibrationIsLinearRegression) {
  // Other modes deterministic at 1, flat calibration, unit noise precision:
  // the tilted conditional is N(y, 1).
  const auto [mean, cov] = sftl::cp_conditional_moments(
      0.7, flat_calibration(1), scalar_vector(1.0), scalar_matrix(1.0), 1.0);
  EXPECT_NEAR(mean[0], 0.7, 1e-13);
  EXPECT_NEAR(cov(0, 0), 1.0, 1e-13);
}

TEST(CpConditionalMoments, ZeroNoisePrecisionReturnsCalibration) {
  CalibratedGaussian cal;
  cal.precision = scalar_matrix(2.0);
  cal.shift = scalar_vector(1.0);
  const auto [mean, cov] = sftl::cp_conditional_moments(
      5.0, cal, scalar_vector(3.0), scalar_matrix(9.0), 0.0);
  EXPECT_NEAR(mean[0], 0.5, 1e-13);
  EXPECT_NEAR(cov(0, 0), 0.5, 1e-13);
}

TEST(TauTilted, ShapeGrowsByExactlyHalf) {
  const auto [shape, rate] = sftl::tau_tilted_params(
      1.0, 2.25, 1.0, scalar_vector(0.5), scalar_matrix(0.3));
  EXPECT_DOUBLE_EQ(shape, 2.75);
  // rate = 1 + 1/2 + 0.15 - 0.5 = 1.15.
  EXPECT_NEAR(rate, 1.15, 1e-14);
}

TEST(TauTilted, PerfectDeterministicFitLeavesRateUnchanged) {
  const double y = 0.8;
  const auto [shape, rate] = sftl::tau_tilted_params(
      y, 1.0, 0.4, scalar_vector(y), scalar_matrix(y * y));
  EXPECT_DOUBLE_EQ(shape, 1.5);
  EXPECT_NEAR(rate, 0.4, 1e-14);
}

TEST(TauTilted, RejectsNonPositiveRate) {
  // Inconsistent pseudo-moments can drive the tilted rate negative.
  EXPECT_THROW(sftl::tau_tilted_params(1.0, 1.0, 0.1, scalar_vector(1.0),
                                       scalar_matrix(0.5)),
               sftl::NonPositiveRate);
}

TEST(Kronecker, ModeOneMajorOrdering) {
  Vector a(2);
  a << 1.0, 2.0;
  Vector b(2);
  b << 3.0, 4.0;
  const Vector k = sftl::kronecker(a, b);
  ASSERT_EQ(k.size(), 4);
  EXPECT_DOUBLE_EQ(k[0], 3.0);
  EXPECT_DOUBLE_EQ(k[1], 4.0);
  EXPECT_DOUBLE_EQ(k[2], 6.0);
  EXPECT_DOUBLE_EQ(k[3], 8.0);
}

TEST(TuckerIndexer, RowMajorFlattening) {
  const TuckerIndexer indexer({2, 3});
  EXPECT_EQ(indexer.total(), 6);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 3; ++j) {
      EXPECT_EQ(indexer.flat({i, j}), 3 * i + j);
    }
  }
  const TuckerIndexer three({2, 2, 2});
  EXPECT_EQ(three.flat({1, 0, 1}), 5);
  EXPECT_EQ(three.flat({0, 1, 0}), 2);
}

TEST(TuckerIndexer, UnfoldMapsMatchFlattening) {
  const TuckerIndexer indexer({2, 3});
  // Mode 0 unfolding: columns run over mode 1.
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 3; ++c) {
      EXPECT_EQ(indexer.unfold(0)[r][c], indexer.flat({r, c}));
    }
  }
  // Mode 1 unfolding: columns run over mode 0.
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 2; ++c) {
      EXPECT_EQ(indexer.unfold(1)[r][c], indexer.flat({c, r}));
    }
  }
  // Three modes: the columns of unfold(1) decode modes (0, 2), last fastest.
  const TuckerIndexer three({2, 2, 2});
  for (int r = 0; r < 2; ++r) {
    for (int i = 0; i < 2; ++i) {
      for (int k = 0; k < 2; ++k) {
        EXPECT_EQ(three.unfold(1)[r][2 * i + k], three.flat({i, r, k}));
      }
    }
  }
}

TEST(TuckerContraction, SuperdiagonalCoreReducesToCp) {
  const TuckerIndexer indexer({2, 2});
  Vector core_mean = Vector::Zero(4);
  core_mean[indexer.flat({0, 0})] = 1.0;
  core_mean[indexer.flat({1, 1})] = 1.0;
  const Matrix core_second = core_mean * core_mean.transpose();

  std::vector<Vector> means(2);
  std::vector<Matrix> seconds(2);
  means[0] = Vector(2);
  means[0] << 0.4, -0.7;
  means[1] = Vector(2);
  means[1] << 1.1, 0.2;
  Matrix s0(2, 2);
  s0 << 0.9, 0.1, 0.1, 1.4;
  Matrix s1(2, 2);
  s1 << 2.0, -0.3, -0.3, 0.8;
  seconds[0] = s0 + means[0] * means[0].transpose();
  seconds[1] = s1 + means[1] * means[1].transpose();

  for (int target = 0; target < 2; ++target) {
    const auto [eb, ebb] = sftl::tucker_factor_contraction(
        indexer, target, core_mean, core_second, means, seconds);
    const int other = 1 - target;
    EXPECT_LE((eb - means[other]).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((ebb - seconds[other]).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(TuckerConditionalMoments, FlatCoreIsScalarLinearRegression) {
  // Deterministic rank-1 factors u = 2, v = 3 and a flat core prior: the
  // core weight posterior is Bayesian linear regression on c = 6.
  const TuckerIndexer indexer({1, 1});
  std::vector<Vector> means = {scalar_vector(2.0), scalar_vector(3.0)};
  std::vector<Matrix> seconds = {scalar_matrix(4.0), scalar_matrix(9.0)};
  const double tau = 2.0;
  const double y = 1.2;
  const auto [mean, cov] = sftl::tucker_conditional_moments(
      y, flat_calibration(1), indexer, scalar_vector(0.0), scalar_matrix(0.0),
      means, seconds, tau, std::nullopt);
  EXPECT_NEAR(cov(0, 0), 1.0 / (tau * 36.0), 1e-13);
  EXPECT_NEAR(mean[0], y / 6.0, 1e-12);
}

TEST(RunCepBatch, SingleModeIsExactConjugateUpdate) {
  const LtiSde sde = sftl::build_sde(MaternKernel(1, 0.6, 0.25));
  const double tau = 25.0;
  const double y = 0.8;
  std::map<ChainKey, StateGaussian> priors;
  priors.emplace(ChainKey{1, 1}, stationary_prior(sde, 1, 0.5));

  CepConfig config;
  config.damping = 1.0;
  config.tol = 1e-12;
  config.max_iters = 200;
  config.fixed_tau = tau;
  const CepResult result =
      sftl::run_cep_batch({BatchEntry{{1}, y}}, priors, {1},
                          ObservationForm::kCp, NoisePosterior{}, nullptr,
                          nullptr, config);

  EXPECT_TRUE(result.converged);
  EXPECT_EQ(result.iterations, 2);
  EXPECT_FALSE(result.no_progress);

  Matrix lambda = sftl::invert_spd(priors.at({1, 1}).cov);
  lambda(0, 0) += tau;
  Vector theta = Vector::Zero(2);
  theta[0] = tau * y;
  const Matrix cov = sftl::invert_spd(lambda);
  const Vector mean = cov * theta;
  const StateGaussian& post = result.posteriors.at({1, 1});
  EXPECT_LE((post.mean - mean).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE((post.cov - cov).cwiseAbs().maxCoeff(), 1e-10);
}

class CepBatchFixture : public ::testing::Test {
 protected:
  CepBatchFixture() : sde_(sftl::build_sde(MaternKernel(1, 0.5, 0.3))) {
    entries_ = {BatchEntry{{1, 1}, 0.5}, BatchEntry{{2, 2}, -0.3},
                BatchEntry{{1, 2}, 0.2}};
    prior_means_ = {{{1, 1}, 0.3}, {{1, 2}, -0.5}, {{2, 1}, 0.8},
                    {{2, 2}, 0.15}};
    for (const auto& [key, mean0] : prior_means_) {
      StateGaussian prior = stationary_prior(sde_, 1, 0.4);
      prior.mean[0] = mean0;
      priors_.emplace(key, std::move(prior));
    }
    noise_.shape = 2.0;
    noise_.rate = 0.5;
  }

  CepResult run(CepConfig config) const {
    return sftl::run_cep_batch(entries_, priors_, {1, 1},
                               ObservationForm::kCp, noise_, nullptr, nullptr,
                               config);
  }

  LtiSde sde_;
  std::vector<BatchEntry> entries_;
  std::map<ChainKey, double> prior_means_;
  std::map<ChainKey, StateGaussian> priors_;
  NoisePosterior noise_;
};

TEST_F(CepBatchFixture, CompositionIdentityHolds) {
  CepConfig config;
  config.tol = 1e-10;
  config.max_iters = 300;
  const CepResult result = run(config);
  ASSERT_TRUE(result.converged);

  for (const auto& [key, prior] : priors_) {
    Matrix lambda = sftl::invert_spd(prior.cov);
    Vector theta = lambda * prior.mean;
    const int mode = key.first - 1;
    for (std::size_t e = 0; e < entries_.size(); ++e) {
      if (entries_[e].idx[mode] != key.second) continue;
      const GaussianSite& site = result.sites[e].factor[mode];
      lambda(0, 0) += site.precision(0, 0);
      theta[0] += site.shift[0];
    }
    const auto& [res_lambda, res_theta] = result.naturals.at(key);
    EXPECT_LE((res_lambda - lambda).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE((res_theta - theta).cwiseAbs().maxCoeff(), 1e-10);
  }

  double rate = noise_.rate;
  for (const auto& set : result.sites) rate += set.noise.rate_increment;
  EXPECT_NEAR(result.noise.rate, rate, 1e-12);
}

TEST_F(CepBatchFixture, NoiseShapeLedger) {
  CepConfig config;
  const CepResult result = run(config);
  EXPECT_NEAR(result.noise.shape,
              noise_.shape + 0.5 * static_cast<double>(entries_.size()),
              1e-12);
  for (const auto& set : result.sites) {
    EXPECT_DOUBLE_EQ(set.noise.shape_increment, 0.5);
  }
}

TEST_F(CepBatchFixture, FixedPointIsDampingIndependent) {
  CepConfig strong;
  strong.damping = 1.0;
  strong.tol = 1e-11;
  strong.max_iters = 1000;
  CepConfig gentle = strong;
  gentle.damping = 0.3;
  const CepResult a = run(strong);
  const CepResult b = run(gentle);
  ASSERT_TRUE(a.converged);
  ASSERT_TRUE(b.converged);
  for (const auto& [key, post] : a.posteriors) {
    EXPECT_LE((post.mean - b.posteriors.at(key).mean).cwiseAbs().maxCoeff(),
              1e-6);
  }
  EXPECT_NEAR(a.noise.rate, b.noise.rate, 1e-5);
}

TEST_F(CepBatchFixture, DampedFirstSweepSites) {
  // After a single sweep from zero sites, every factor site equals half the
  // conjugate target computed against the prior moments.
  CepConfig config;
  config.max_iters = 1;
  config.damping = 0.5;
  const CepResult result = run(config);
  const double etau0 = noise_.etau();
  for (std::size_t e = 0; e < entries_.size(); ++e) {
    for (int m = 0; m < 2; ++m) {
      const int other = 1 - m;
      const double mean_o =
          prior_means_.at({other + 1, entries_[e].idx[other]});
      const double second_o = sde_.P_inf(0, 0) + mean_o * mean_o;
      const GaussianSite& site = result.sites[e].factor[m];
      EXPECT_NEAR(site.precision(0, 0), 0.5 * etau0 * second_o, 1e-12);
      EXPECT_NEAR(site.shift[0], 0.5 * etau0 * entries_[e].y * mean_o, 1e-12);
    }
  }
}

TEST_F(CepBatchFixture, NegligibleFixedTauKeepsPriors) {
  CepConfig config;
  config.fixed_tau = 1e-12;
  const CepResult result = run(config);
  for (const auto& [key, prior] : priors_) {
    const StateGaussian& post = result.posteriors.at(key);
    EXPECT_LE((post.mean - prior.mean).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LE((post.cov - prior.cov).cwiseAbs().maxCoeff(), 1e-6);
  }
  EXPECT_DOUBLE_EQ(result.noise.shape, noise_.shape);
  EXPECT_DOUBLE_EQ(result.noise.rate, noise_.rate);
}

TEST_F(CepBatchFixture, NormalRunReportsProgress) {
  const CepResult result = run(CepConfig{});
  EXPECT_FALSE(result.no_progress);
  EXPECT_GE(result.iterations, 1);
}

TEST(RunCepBatch, EmptyEntriesReportNoProgress) {
  const LtiSde sde = sftl::build_sde(MaternKernel(1, 0.5, 0.3));
  std::map<ChainKey, StateGaussian> priors;
  priors.emplace(ChainKey{1, 1}, [&]() {
    StateGaussian s;
    s.t = 0.2;
    s.mean = Vector::Zero(2);
    s.cov = sde.P_inf;
    return s;
  }());
  const CepResult result =
      sftl::run_cep_batch({}, priors, {1}, ObservationForm::kCp,
                          NoisePosterior{}, nullptr, nullptr, CepConfig{});
  EXPECT_TRUE(result.no_progress);
  ASSERT_EQ(result.posteriors.size(), 1u);
  EXPECT_EQ(result.posteriors.at({1, 1}).mean, priors.at({1, 1}).mean);
  EXPECT_EQ(result.posteriors.at({1, 1}).cov, priors.at({1, 1}).cov);
  EXPECT_DOUBLE_EQ(result.noise.shape, NoisePosterior{}.shape);
}

TEST(RunCepBatch, TuckerWithFrozenSuperdiagonalCoreMatchesCp) {
  const LtiSde sde = sftl::build_sde(MaternKernel(1, 0.5, 0.3));
  const int rank = 2;
  std::vector<BatchEntry> entries = {BatchEntry{{1, 1}, 0.6},
                                     BatchEntry{{1, 2}, -0.4}};
  std::map<ChainKey, StateGaussian> priors;
  for (const BatchEntry& e : entries) {
    priors.emplace(ChainKey{1, e.idx[0]}, [&]() {
      StateGaussian s;
      s.t = 0.3;
      s.mean = Vector::Zero(rank * sde.dim());
      s.mean[0] = 0.4;
      s.mean[2] = -0.2;
      s.cov = sftl::block_diagonal(sde.P_inf, rank);
      return s;
    }());
    priors.emplace(ChainKey{2, e.idx[1]}, [&]() {
      StateGaussian s;
      s.t = 0.3;
      s.mean = Vector::Zero(rank * sde.dim());
      s.mean[0] = -0.1;
      s.mean[2] = 0.7;
      s.cov = sftl::block_diagonal(sde.P_inf, rank);
      return s;
    }());
  }

  CepConfig config;
  config.tol = 1e-10;
  config.max_iters = 400;

  const CepResult cp =
      sftl::run_cep_batch(entries, priors, {rank, rank}, ObservationForm::kCp,
                          NoisePosterior{}, nullptr, nullptr, config);

  const TuckerIndexer indexer({rank, rank});
  sftl::TuckerCorePosterior core;
  core.mean = Vector::Zero(indexer.total());
  core.mean[indexer.flat({0, 0})] = 1.0;
  core.mean[indexer.flat({1, 1})] = 1.0;
  core.cov = Matrix::Zero(indexer.total(), indexer.total());
  const CepResult tucker = sftl::run_cep_batch(
      entries, priors, {rank, rank}, ObservationForm::kTucker,
      NoisePosterior{}, &core, &indexer, config, /*update_core=*/false);

  for (const auto& [key, post] : cp.posteriors) {
    EXPECT_LE(
        (post.mean - tucker.posteriors.at(key).mean).cwiseAbs().maxCoeff(),
        1e-8);
    EXPECT_LE(
        (post.cov - tucker.posteriors.at(key).cov).cwiseAbs().maxCoeff(),
        1e-8);
  }
  EXPECT_NEAR(cp.noise.rate, tucker.noise.rate, 1e-8);
  ASSERT_TRUE(tucker.core.has_value());
  EXPECT_EQ(tucker.core->mean, core.mean);
}

TEST(MultilinearPrediction, DeterministicCpProduct) {
  // Deterministic u = 2, v = 3: mean 6, variance only from the noise.
  std::vector<Vector> means = {scalar_vector(2.0), scalar_vector(3.0)};
  std::vector<Matrix> covs = {scalar_matrix(0.0), scalar_matrix(0.0)};
  const auto [mean, var] = sftl::multilinear_prediction(
      ObservationForm::kCp, means, covs, nullptr, 4.0);
  EXPECT_NEAR(mean, 6.0, 1e-13);
  EXPECT_NEAR(var, 0.25, 1e-13);
}

TEST(MultilinearPrediction, OrthogonalComponentsCancel) {
  std::vector<Vector> means(2, Vector::Zero(2));
  means[0] << 1.0, 0.0;
  means[1] << 0.0, 1.0;
  std::vector<Matrix> covs(2, Matrix::Zero(2, 2));
  const auto [mean, var] = sftl::multilinear_prediction(
      ObservationForm::kCp, means, covs, nullptr, 2.0);
  EXPECT_NEAR(mean, 0.0, 1e-14);
  EXPECT_NEAR(var, 0.5, 1e-14);
}

TEST(MultilinearPrediction, TuckerMatchesCpUnderSuperdiagonalCore) {
  const TuckerIndexer indexer({2, 2});
  sftl::TuckerCorePosterior core;
  core.mean = Vector::Zero(4);
  core.mean[indexer.flat({0, 0})] = 1.0;
  core.mean[indexer.flat({1, 1})] = 1.0;
  core.cov = Matrix::Zero(4, 4);

  std::vector<Vector> means(2);
  means[0] = Vector(2);
  means[0] << 0.3, -0.8;
  means[1] = Vector(2);
  means[1] << 1.2, 0.4;
  std::vector<Matrix> covs(2);
  covs[0] = Matrix(2, 2);
  covs[0] << 0.5, 0.1, 0.1, 0.7;
  covs[1] = Matrix(2, 2);
  covs[1] << 0.9, -0.2, -0.2, 0.3;

  const auto cp = sftl::multilinear_prediction(ObservationForm::kCp, means,
                                               covs, nullptr, 5.0);
  const auto tk = sftl::multilinear_prediction(ObservationForm::kTucker,
                                               means, covs, &core, 5.0);
  EXPECT_NEAR(cp.first, tk.first, 1e-12);
  EXPECT_NEAR(cp.second, tk.second, 1e-12);
}

}  // namespace
