#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dpp/approx.hpp"
#include "dpp/estimate.hpp"

namespace dpp {

//! Counter-based generator: output i is the SplitMix64 finalizer applied to
//! key + (i+1) * golden gamma. Bitwise reproducible across platforms; the
//! generator name and seed are echoed in every report.
class CounterRng {
public:
  static constexpr const char* kName = "splitmix64-counter";

  explicit CounterRng(std::uint64_t key) : key_(key) {}
  //! Stream for one replicate, decorrelated from the master key.
  static CounterRng for_replicate(std::uint64_t master, std::uint64_t replicate);

  std::uint64_t next_u64();
  //! Uniform double in [0, 1).
  double next_unit();

private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

//! Polynomial on an arbitrary axis-aligned box, in the orthonormal
//! tensor-Legendre basis of that box. Pieces tile [0,1]^d.
struct DensityPiece {
  std::vector<double> lo, hi;
  DegreeVector degrees;
  std::vector<double> coeffs;

  int dim() const { return static_cast<int>(lo.size()); }
  double volume() const;
  bool contains(std::span<const double> x) const;
  double operator()(std::span<const double> x) const;
};

//! Test density with known structure: closed-form evaluator, exact integrals
//! against polynomials, per-axis marginal CDF and a reproducible sampler.
class TestDensity {
public:
  enum class Kind { Uniform, PiecewisePolynomial, ProductSmooth, Spike };

  static TestDensity uniform(int d);
  static TestDensity from_piecewise(const PiecewisePoly& poly, Kind kind, std::string name);
  //! Pieces with arbitrary (possibly non-dyadic) boxes; they must tile the
  //! cube and integrate to one.
  static TestDensity from_pieces(Kind kind, std::string name, std::vector<DensityPiece> pieces);
  //! Product of 1-d factors (each a piece list on [0,1]).
  static TestDensity product(const std::vector<TestDensity>& factors, std::string name);
  //! Named catalog used by tests and the CLI; d selects the dimension for
  //! the d-parametric entries.
  static TestDensity builtin(const std::string& name, int d = 1);
  static std::vector<std::string> builtin_names();

  int dim() const { return pieces_[0].dim(); }
  Kind kind() const { return kind_; }
  const std::string& name() const { return name_; }
  const std::vector<DensityPiece>& pieces() const { return pieces_; }
  bool is_product() const { return !factors_.empty(); }

  double operator()(std::span<const double> x) const;
  //! Grid-estimated sup norm (reported; the rejection envelope is rigorous).
  double sup_norm() const { return sup_norm_; }
  double envelope() const { return envelope_; }
  double integral() const;
  double l2_norm_sq() const;
  //! P(X_axis <= x) for the marginal along one axis.
  double marginal_cdf(int axis, double x) const;
  //! As a Target for the approximation module (exact when dyadic).
  Target target() const;

private:
  TestDensity(Kind kind, std::string name, std::vector<DensityPiece> pieces);
  void finalize();

  Kind kind_;
  std::string name_;
  std::vector<DensityPiece> pieces_;
  std::vector<TestDensity> factors_;           // nonempty for product densities
  std::shared_ptr<const PiecewisePoly> poly_;  // set when the pieces are dyadic
  double sup_norm_ = 0.0;
  double envelope_ = 0.0;

  friend Sample sample_density(const TestDensity&, std::size_t, std::uint64_t);
};

//! i.i.d. draws: per-axis inverse CDF for product densities, rejection
//! against the uniform envelope otherwise. Deterministic given the seed.
Sample sample_density(const TestDensity& density, std::size_t n, std::uint64_t seed);

//! (E[Phi_{K,k}(Y)], E[Phi_{K,k}^2(Y)]) under the density, exact.
std::pair<double, double> phi_moments(const TestDensity& density, const DyadicRectangle& K,
                                      const MultiIndex& k);

//! ||s - t||_2^2, integrated exactly over piece/leaf intersections.
double exact_risk(const PiecewisePoly& estimate, const TestDensity& truth);
double exact_risk(const FittedModel& model, const TestDensity& truth);

struct OracleResult {
  PartitionTree tree;
  std::vector<DegreeVector> degrees;
  double risk = 0.0;
  std::size_t models_searched = 0;
};

//! Minimal true risk E||s - s_hat(m, rho)||^2 over all tree partitions with
//! scales <= j_star and per-leaf degrees in Lambda(r_star).
OracleResult oracle_risk(const TestDensity& truth, std::size_t n, const PenaltyConfig& family);

struct RiskReport {
  std::vector<double> risks;
  double mean = 0.0;
  double stderr_mean = 0.0;
  std::optional<double> oracle;
  std::optional<double> ratio;  // mean / oracle
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::string rng = CounterRng::kName;
};

//! Monte Carlo risk of the fitted estimator at one sample size.
RiskReport risk_study(const TestDensity& truth, std::size_t n, int replicates,
                      const FitOptions& options, std::uint64_t seed, int threads = 1);

struct RateStudyRow {
  std::size_t n = 0;
  double mean = 0.0;
  double stderr_mean = 0.0;
};

struct RateStudy {
  std::vector<RateStudyRow> rows;
  double slope = 0.0;            // log2 mean risk vs log2 n
  double target_exponent = 0.0;  // -2H/(d+2H) for the declared class
  std::uint64_t seed = 0;
  std::string rng = CounterRng::kName;
};

//! Risk decay across sample sizes, compared with the minimax exponent of the
//! declared smoothness.
RateStudy rate_study(const TestDensity& truth, const AnisoFamily& declared_sigma,
                     std::span<const std::size_t> n_schedule, int replicates,
                     const FitOptions& options, std::uint64_t seed, int threads = 1);

struct CalibrationRow {
  std::array<double, 5> kappa{};
  double mean_ratio = 0.0;
};

struct CalibrationResult {
  std::vector<CalibrationRow> rows;
  std::array<double, 5> best{};
  std::uint64_t seed = 0;
};

//! Grid-search of the penalty constants: minimizes the average fitted/oracle
//! risk ratio over the density suite (every truth must have a positive
//! oracle risk under the given family).
CalibrationResult calibrate(const std::vector<std::array<double, 5>>& grid,
                            const std::vector<TestDensity>& suite, std::size_t n,
                            int replicates, const PenaltyConfig& family,
                            std::uint64_t seed, int threads = 1);

//! Deterministic parallel map: results land in per-index slots.
void parallel_for(std::size_t count, int threads,
                  const std::function<void(std::size_t)>& fn);

}  // namespace dpp
