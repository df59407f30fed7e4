#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "sftl/cep.hpp"
#include "sftl/errors.hpp"
#include "sftl/linalg.hpp"
#include "sftl/matern.hpp"
#include "sftl/rng.hpp"
#include "sftl/state_space.hpp"

namespace sftl {

struct ModelConfig {
  std::vector<int> dims;
  ObservationForm form = ObservationForm::kCp;
  int rank = 1;
  /// Per-mode Tucker ranks; empty means `rank` for every mode.
  std::vector<int> tucker_ranks;
  MaternKernel kernel{1, 1.0, 1.0};
  double noise_shape = 1.0;
  double noise_rate = 0.1;
  CepConfig cep;
  /// First-appearance factor means are set to ±(init_scale * sqrt(a)) with
  /// independent random signs; the equal magnitudes keep no mode louder than
  /// another at the start. Zero disables the draw and leaves the exact
  /// zero-mean prior.
  double init_scale = 1.0;
  std::uint64_t init_seed = 0;
  /// Treat the Tucker core as a fixed deterministic tensor (no updates).
  bool fix_core = false;
  /// Value of the fixed core; empty means superdiagonal ones.
  std::vector<double> fixed_core;

  int modes() const { return static_cast<int>(dims.size()); }

  std::vector<int> mode_ranks() const {
    if (form == ObservationForm::kTucker && !tucker_ranks.empty()) {
      return tucker_ranks;
    }
    return std::vector<int>(dims.size(), rank);
  }
};

struct Batch {
  double t = 0.0;
  std::vector<BatchEntry> entries;
};

struct BatchReport {
  double t = 0.0;
  int n_entries = 0;
  int iterations = 0;
  bool converged = false;
  bool no_progress = false;
};

namespace detail {

inline int thread_cap(std::size_t jobs) {
  long cap = 0;
  if (const char* env = std::getenv("SFTL_THREADS")) {
    char* end = nullptr;
    const long parsed = std::strtol(env, &end, 10);
    if (end != env && parsed > 0) cap = parsed;
  }
  if (cap <= 0) {
    const unsigned hw = std::thread::hardware_concurrency();
    cap = hw > 0 ? static_cast<long>(hw) : 1;
  }
  if (static_cast<std::size_t>(cap) > jobs) cap = static_cast<long>(jobs);
  return static_cast<int>(cap > 0 ? cap : 1);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf, 8);
}

inline void put_u32(std::ostream& out, std::uint32_t v) {
  char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf, 4);
}

inline void put_u8(std::ostream& out, std::uint8_t v) {
  out.put(static_cast<char>(v));
}

inline void put_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

inline std::uint64_t get_u64(std::istream& in) {
  char buf[8];
  in.read(buf, 8);
  if (!in) throw CorruptCheckpoint("unexpected end of checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i]))
         << (8 * i);
  }
  return v;
}

inline std::uint32_t get_u32(std::istream& in) {
  char buf[4];
  in.read(buf, 4);
  if (!in) throw CorruptCheckpoint("unexpected end of checkpoint");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[i]))
         << (8 * i);
  }
  return v;
}

inline std::uint8_t get_u8(std::istream& in) {
  const int c = in.get();
  if (c == std::istream::traits_type::eof()) {
    throw CorruptCheckpoint("unexpected end of checkpoint");
  }
  return static_cast<std::uint8_t>(c);
}

inline double get_f64(std::istream& in) {
  const std::uint64_t bits = get_u64(in);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline void put_vector(std::ostream& out, const Vector& v) {
  put_u64(out, static_cast<std::uint64_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) put_f64(out, v[i]);
}

inline Vector get_vector(std::istream& in) {
  const std::uint64_t n = get_u64(in);
  if (n > (1u << 24)) throw CorruptCheckpoint("vector length out of range");
  Vector v(static_cast<Eigen::Index>(n));
  for (std::uint64_t i = 0; i < n; ++i) v[static_cast<Eigen::Index>(i)] = get_f64(in);
  return v;
}

inline void put_matrix(std::ostream& out, const Matrix& m) {
  put_u64(out, static_cast<std::uint64_t>(m.rows()));
  put_u64(out, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) put_f64(out, m(i, j));
  }
}

inline Matrix get_matrix(std::istream& in) {
  const std::uint64_t rows = get_u64(in);
  const std::uint64_t cols = get_u64(in);
  if (rows > (1u << 16) || cols > (1u << 16)) {
    throw CorruptCheckpoint("matrix dimensions out of range");
  }
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = get_f64(in);
  }
  return m;
}

inline void put_state(std::ostream& out, const StateGaussian& s) {
  put_f64(out, s.t);
  put_vector(out, s.mean);
  put_matrix(out, s.cov);
}

inline StateGaussian get_state(std::istream& in) {
  StateGaussian s;
  s.t = get_f64(in);
  s.mean = get_vector(in);
  s.cov = get_matrix(in);
  return s;
}

}  // namespace detail

/// Streaming posterior over all factor trajectories, the noise precision,
/// and (for the Tucker form) the core tensor. Batches must arrive in strictly
/// increasing time order; each batch is absorbed by one conditional-EP run
/// against the predicted state priors.
class PosteriorModel {
 public:
  explicit PosteriorModel(ModelConfig config)
      : config_(std::move(config)),
        sde_(build_sde(config_.kernel)),
        rng_(config_.init_seed) {
    if (config_.dims.empty()) {
      throw DimensionMismatch("model needs at least one mode");
    }
    for (int d : config_.dims) {
      if (d < 1) throw DimensionMismatch("mode dimensions must be positive");
    }
    ranks_ = config_.mode_ranks();
    if (static_cast<int>(ranks_.size()) != config_.modes()) {
      throw DimensionMismatch("one rank per mode required");
    }
    for (int r : ranks_) {
      if (r < 1) throw DimensionMismatch("ranks must be positive");
    }
    noise_.shape = config_.noise_shape;
    noise_.rate = config_.noise_rate;
    if (config_.form == ObservationForm::kTucker) {
      indexer_.emplace(ranks_);
      if (config_.fix_core) {
        Vector core = Vector::Zero(indexer_->total());
        if (!config_.fixed_core.empty()) {
          if (static_cast<int>(config_.fixed_core.size()) !=
              indexer_->total()) {
            throw DimensionMismatch("fixed core has wrong length");
          }
          for (int i = 0; i < indexer_->total(); ++i) {
            core[i] = config_.fixed_core[i];
          }
        } else {
          for (int j = 1; j < config_.modes(); ++j) {
            if (ranks_[j] != ranks_[0]) {
              throw DimensionMismatch(
                  "superdiagonal core needs equal ranks; pass fixed_core");
            }
          }
          for (int r = 0; r < ranks_[0]; ++r) {
            core[indexer_->flat(std::vector<int>(config_.modes(), r))] = 1.0;
          }
        }
        core_ = TuckerCorePosterior{
            core, Matrix::Zero(indexer_->total(), indexer_->total())};
      } else {
        core_ = TuckerCorePosterior::standard(indexer_->total());
      }
    }
  }

  const ModelConfig& config() const { return config_; }
  const LtiSde& sde() const { return sde_; }
  const NoisePosterior& noise() const { return noise_; }
  const std::optional<TuckerCorePosterior>& core() const { return core_; }
  const std::map<ChainKey, FactorChain>& chains() const { return chains_; }
  std::optional<double> last_time() const { return last_t_; }
  bool finalized() const { return finalized_; }

  BatchReport process_batch(const Batch& batch) {
    BatchReport report;
    report.t = batch.t;
    report.n_entries = static_cast<int>(batch.entries.size());
    if (batch.entries.empty()) return report;
    if (last_t_.has_value() && !(batch.t > *last_t_)) {
      throw NonMonotoneTimestamp("batch timestamps must strictly increase");
    }
    validate_indices(batch.entries);

    std::map<ChainKey, StateGaussian> priors;
    for (const BatchEntry& entry : batch.entries) {
      for (int m = 0; m < config_.modes(); ++m) {
        priors.emplace(ChainKey{m + 1, entry.idx[m]}, StateGaussian{});
      }
    }
    for (auto& [key, prior] : priors) {
      auto it = chains_.find(key);
      if (it == chains_.end()) {
        FactorChain fresh;
        fresh.mode = key.first;
        fresh.object = key.second;
        fresh.rank = ranks_[key.first - 1];
        prior = predict(fresh, sde_, batch.t, &cache_);
        randomize_prior_mean(prior, fresh.rank);
      } else {
        prior = predict(it->second, sde_, batch.t, &cache_);
      }
    }

    CepResult result = run_cep_batch(
        batch.entries, priors, ranks_, config_.form, noise_,
        core_.has_value() ? &*core_ : nullptr,
        indexer_.has_value() ? &*indexer_ : nullptr, config_.cep,
        /*update_core=*/!config_.fix_core);

    for (auto& [key, state] : result.posteriors) {
      auto [it, inserted] = chains_.try_emplace(key);
      if (inserted) {
        it->second.mode = key.first;
        it->second.object = key.second;
        it->second.rank = ranks_[key.first - 1];
      }
      it->second.timestamps.push_back(batch.t);
      it->second.filtered.push_back(std::move(state));
      it->second.smoothed.clear();
    }
    noise_ = result.noise;
    if (result.core.has_value()) core_ = result.core;
    last_t_ = batch.t;
    finalized_ = false;

    report.iterations = result.iterations;
    report.converged = result.converged;
    report.no_progress = result.no_progress;
    return report;
  }

  /// Backward smoothing pass over every chain. Chains are independent given
  /// their filtered states, so they are smoothed in parallel; SFTL_THREADS
  /// caps the worker count.
  void finalize() {
    if (chains_.empty()) throw EmptyModel("no data has been absorbed");
    std::vector<FactorChain*> jobs;
    jobs.reserve(chains_.size());
    for (auto& [key, chain] : chains_) jobs.push_back(&chain);
    const int workers = detail::thread_cap(jobs.size());
    if (workers <= 1) {
      for (FactorChain* chain : jobs) {
        chain->smoothed = rts_smooth(*chain, sde_, &cache_);
      }
    } else {
      std::atomic<std::size_t> cursor{0};
      std::vector<std::exception_ptr> errors(workers);
      std::vector<std::thread> pool;
      pool.reserve(workers);
      for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
          try {
            for (std::size_t i = cursor.fetch_add(1); i < jobs.size();
                 i = cursor.fetch_add(1)) {
              jobs[i]->smoothed = rts_smooth(*jobs[i], sde_, &cache_);
            }
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
      for (std::thread& t : pool) t.join();
      for (const std::exception_ptr& err : errors) {
        if (err) std::rethrow_exception(err);
      }
    }
    finalized_ = true;
  }

  /// Full-state posterior of one factor trajectory at an arbitrary time.
  /// Objects inside the valid range that were never observed follow the
  /// stationary prior.
  StateGaussian trajectory(int mode, int object, double t,
                           bool use_smoothed = true) const {
    check_object(mode, object);
    const auto it = chains_.find({mode, object});
    const int rank = ranks_[mode - 1];
    if (it == chains_.end() || it->second.empty()) {
      StateGaussian prior;
      prior.t = t;
      prior.mean = Vector::Zero(rank * sde_.dim());
      prior.cov = block_diagonal(sde_.P_inf, rank);
      return prior;
    }
    return trajectory_state(it->second, sde_, t, use_smoothed, &cache_);
  }

  StateGaussian interpolate(int mode, int object, double t) const {
    return trajectory(mode, object, t, /*use_smoothed=*/true);
  }

  /// Marginal mean and standard deviation of the factor coordinates.
  std::pair<Vector, Vector> factor_mean_std(int mode, int object, double t,
                                            bool use_smoothed = true) const {
    const StateGaussian state = trajectory(mode, object, t, use_smoothed);
    auto [mean, cov] = extract_factor(state, ranks_[mode - 1]);
    return {mean, cov.diagonal().cwiseMax(0.0).cwiseSqrt()};
  }

  /// Posterior predictive mean and variance of one tensor entry at time t.
  /// The variance includes the expected observation-noise contribution.
  std::pair<double, double> predict_entry(const std::vector<int>& idx,
                                          double t,
                                          bool use_smoothed = true) const {
    if (static_cast<int>(idx.size()) != config_.modes()) {
      throw DimensionMismatch("index arity does not match mode count");
    }
    std::vector<Vector> means(config_.modes());
    std::vector<Matrix> covs(config_.modes());
    for (int m = 0; m < config_.modes(); ++m) {
      check_object(m + 1, idx[m]);
      const auto it = chains_.find({m + 1, idx[m]});
      const int rank = ranks_[m];
      if (it == chains_.end() || it->second.empty()) {
        means[m] = Vector::Zero(rank);
        covs[m] = config_.kernel.amplitude * Matrix::Identity(rank, rank);
      } else {
        const StateGaussian state =
            trajectory_state(it->second, sde_, t, use_smoothed, &cache_);
        std::tie(means[m], covs[m]) = extract_factor(state, rank);
      }
    }
    const double etau = config_.cep.fixed_tau.has_value()
                            ? *config_.cep.fixed_tau
                            : noise_.etau();
    return multilinear_prediction(config_.form, means, covs,
                                  core_.has_value() ? &*core_ : nullptr, etau);
  }

  void checkpoint(std::ostream& out) const {
    out.write(kMagic, 8);
    detail::put_u32(out, kVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(config_.dims.size()));
    for (int d : config_.dims) detail::put_u32(out, static_cast<std::uint32_t>(d));
    detail::put_u8(out, config_.form == ObservationForm::kTucker ? 1 : 0);
    detail::put_u32(out, static_cast<std::uint32_t>(config_.rank));
    detail::put_u32(out, static_cast<std::uint32_t>(config_.tucker_ranks.size()));
    for (int r : config_.tucker_ranks) {
      detail::put_u32(out, static_cast<std::uint32_t>(r));
    }
    detail::put_u32(out, static_cast<std::uint32_t>(config_.kernel.p));
    detail::put_f64(out, config_.kernel.amplitude);
    detail::put_f64(out, config_.kernel.lengthscale);
    detail::put_f64(out, config_.noise_shape);
    detail::put_f64(out, config_.noise_rate);
    detail::put_u32(out, static_cast<std::uint32_t>(config_.cep.max_iters));
    detail::put_f64(out, config_.cep.tol);
    detail::put_f64(out, config_.cep.damping);
    detail::put_u8(out, config_.cep.fixed_tau.has_value() ? 1 : 0);
    detail::put_f64(out, config_.cep.fixed_tau.value_or(0.0));
    detail::put_f64(out, config_.init_scale);
    detail::put_u64(out, config_.init_seed);
    detail::put_u8(out, config_.fix_core ? 1 : 0);
    detail::put_u64(out, config_.fixed_core.size());
    for (double v : config_.fixed_core) detail::put_f64(out, v);

    detail::put_u64(out, rng_.state());
    detail::put_u8(out, rng_.have_spare() ? 1 : 0);
    detail::put_f64(out, rng_.spare());
    detail::put_u8(out, last_t_.has_value() ? 1 : 0);
    detail::put_f64(out, last_t_.value_or(0.0));
    detail::put_u8(out, finalized_ ? 1 : 0);
    detail::put_f64(out, noise_.shape);
    detail::put_f64(out, noise_.rate);
    detail::put_u8(out, core_.has_value() ? 1 : 0);
    if (core_.has_value()) {
      detail::put_vector(out, core_->mean);
      detail::put_matrix(out, core_->cov);
    }
    detail::put_u64(out, chains_.size());
    for (const auto& [key, chain] : chains_) {
      detail::put_u32(out, static_cast<std::uint32_t>(key.first));
      detail::put_u32(out, static_cast<std::uint32_t>(key.second));
      detail::put_u64(out, chain.timestamps.size());
      for (double t : chain.timestamps) detail::put_f64(out, t);
      for (const StateGaussian& s : chain.filtered) detail::put_state(out, s);
      detail::put_u64(out, chain.smoothed.size());
      for (const StateGaussian& s : chain.smoothed) detail::put_state(out, s);
    }
    if (!out) throw IoError("failed to write checkpoint stream");
  }

  static PosteriorModel restore(std::istream& in) {
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) {
      throw CorruptCheckpoint("bad checkpoint magic");
    }
    const std::uint32_t version = detail::get_u32(in);
    if (version != kVersion) {
      throw CorruptCheckpoint("unsupported checkpoint version");
    }
    ModelConfig config;
    const std::uint32_t m_count = detail::get_u32(in);
    if (m_count == 0 || m_count > 64) {
      throw CorruptCheckpoint("mode count out of range");
    }
    config.dims.resize(m_count);
    for (auto& d : config.dims) d = static_cast<int>(detail::get_u32(in));
    config.form = detail::get_u8(in) != 0 ? ObservationForm::kTucker
                                          : ObservationForm::kCp;
    config.rank = static_cast<int>(detail::get_u32(in));
    const std::uint32_t n_ranks = detail::get_u32(in);
    if (n_ranks > 64) throw CorruptCheckpoint("rank count out of range");
    config.tucker_ranks.resize(n_ranks);
    for (auto& r : config.tucker_ranks) {
      r = static_cast<int>(detail::get_u32(in));
    }
    const int p = static_cast<int>(detail::get_u32(in));
    const double amplitude = detail::get_f64(in);
    const double lengthscale = detail::get_f64(in);
    config.kernel = MaternKernel(p, amplitude, lengthscale);
    config.noise_shape = detail::get_f64(in);
    config.noise_rate = detail::get_f64(in);
    config.cep.max_iters = static_cast<int>(detail::get_u32(in));
    config.cep.tol = detail::get_f64(in);
    config.cep.damping = detail::get_f64(in);
    const bool has_fixed_tau = detail::get_u8(in) != 0;
    const double fixed_tau = detail::get_f64(in);
    if (has_fixed_tau) config.cep.fixed_tau = fixed_tau;
    config.init_scale = detail::get_f64(in);
    config.init_seed = detail::get_u64(in);
    config.fix_core = detail::get_u8(in) != 0;
    const std::uint64_t core_len = detail::get_u64(in);
    if (core_len > (1u << 20)) {
      throw CorruptCheckpoint("fixed core length out of range");
    }
    config.fixed_core.resize(core_len);
    for (auto& v : config.fixed_core) v = detail::get_f64(in);

    PosteriorModel model(std::move(config));
    const std::uint64_t rng_state = detail::get_u64(in);
    const bool have_spare = detail::get_u8(in) != 0;
    const double spare = detail::get_f64(in);
    model.rng_.set_state(rng_state, have_spare, spare);
    const bool has_last = detail::get_u8(in) != 0;
    const double last_t = detail::get_f64(in);
    if (has_last) model.last_t_ = last_t;
    model.finalized_ = detail::get_u8(in) != 0;
    model.noise_.shape = detail::get_f64(in);
    model.noise_.rate = detail::get_f64(in);
    if (detail::get_u8(in) != 0) {
      TuckerCorePosterior core;
      core.mean = detail::get_vector(in);
      core.cov = detail::get_matrix(in);
      model.core_ = std::move(core);
    } else {
      model.core_.reset();
    }
    const std::uint64_t n_chains = detail::get_u64(in);
    if (n_chains > (1u << 24)) {
      throw CorruptCheckpoint("chain count out of range");
    }
    for (std::uint64_t c = 0; c < n_chains; ++c) {
      FactorChain chain;
      chain.mode = static_cast<int>(detail::get_u32(in));
      chain.object = static_cast<int>(detail::get_u32(in));
      if (chain.mode < 1 || chain.mode > model.config_.modes()) {
        throw CorruptCheckpoint("chain mode out of range");
      }
      chain.rank = model.ranks_[chain.mode - 1];
      const std::uint64_t n = detail::get_u64(in);
      if (n > (1u << 28)) throw CorruptCheckpoint("chain length out of range");
      chain.timestamps.resize(n);
      for (auto& t : chain.timestamps) t = detail::get_f64(in);
      chain.filtered.reserve(n);
      for (std::uint64_t i = 0; i < n; ++i) {
        chain.filtered.push_back(detail::get_state(in));
      }
      const std::uint64_t n_smoothed = detail::get_u64(in);
      if (n_smoothed > n) throw CorruptCheckpoint("smoothed chain too long");
      chain.smoothed.reserve(n_smoothed);
      for (std::uint64_t i = 0; i < n_smoothed; ++i) {
        chain.smoothed.push_back(detail::get_state(in));
      }
      model.chains_.emplace(ChainKey{chain.mode, chain.object},
                            std::move(chain));
    }
    return model;
  }

 private:
  static constexpr char kMagic[9] = "SFTLCKPT";
  static constexpr std::uint32_t kVersion = 1;

  void validate_indices(const std::vector<BatchEntry>& entries) const {
    for (const BatchEntry& entry : entries) {
      if (static_cast<int>(entry.idx.size()) != config_.modes()) {
        throw DimensionMismatch("entry arity does not match mode count");
      }
      for (int m = 0; m < config_.modes(); ++m) {
        if (entry.idx[m] < 1 || entry.idx[m] > config_.dims[m]) {
          throw IndexOutOfRange("entry index outside mode dimension");
        }
      }
    }
  }

  void check_object(int mode, int object) const {
    if (mode < 1 || mode > config_.modes()) {
      throw UnknownObject("mode out of range");
    }
    if (object < 1 || object > config_.dims[mode - 1]) {
      throw UnknownObject("object out of range for mode");
    }
  }

  /// Breaks the multiplicative sign symmetry: a cold-started chain gets a
  /// random-sign, fixed-magnitude factor mean so the mean dynamics can leave
  /// the zero fixed point without favoring any mode's scale. Draw order is the
  /// sorted (mode, object) order, so runs with equal seeds see identical
  /// draws.
  void randomize_prior_mean(StateGaussian& prior, int rank) {
    if (config_.init_scale <= 0.0) return;
    const double scale =
        config_.init_scale * std::sqrt(config_.kernel.amplitude);
    const int stride = sde_.dim();
    for (int r = 0; r < rank; ++r) {
      prior.mean[r * stride] = rng_.normal() < 0.0 ? -scale : scale;
    }
  }

  ModelConfig config_;
  LtiSde sde_;
  mutable DiscretizationCache cache_;
  Rng rng_;
  std::vector<int> ranks_;
  std::map<ChainKey, FactorChain> chains_;
  NoisePosterior noise_;
  std::optional<TuckerCorePosterior> core_;
  std::optional<TuckerIndexer> indexer_;
  std::optional<double> last_t_;
  bool finalized_ = false;
};

}  // namespace sftl
