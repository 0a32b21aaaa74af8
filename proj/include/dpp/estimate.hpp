#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpp/dyadic.hpp"
#include "dpp/legendre.hpp"

namespace dpp {

//! File/format errors; the CLI maps these to exit code 2.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

//! n observation points in [0,1]^d, row-major. Requires n >= 4.
class Sample {
public:
  Sample(int d, std::vector<double> flat);

  int dim() const { return d_; }
  std::size_t size() const { return flat_.size() / static_cast<std::size_t>(d_); }
  std::span<const double> point(std::size_t i) const {
    return {flat_.data() + i * static_cast<std::size_t>(d_), static_cast<std::size_t>(d_)};
  }
  const std::vector<double>& flat() const { return flat_; }

private:
  int d_;
  std::vector<double> flat_;
};

//! Reads one point per row, d comma-separated coordinates in [0,1]; an
//! optional non-numeric header row is skipped. d <= 0 infers the dimension
//! from the first data row. Errors carry 1-based row numbers.
Sample read_sample_csv(const std::string& path, int d = 0);
void write_sample_csv(const std::string& path, const Sample& sample);

//! Largest J with 2^{Jd} <= n / log(n |Lambda(r_star)|); 0 when even J = 0
//! fails (flagged in FitDiagnostics).
int compute_Jstar(std::size_t n, const DegreeVector& r_star, int d);

struct PenaltyConfig {
  std::array<double, 5> kappa{2.0, 0.5, 0.05, 0.05, 0.05};
  DegreeVector r_star;
  int j_star = 0;

  //! Uniform model weight L = log(8 d |Lambda(r_star)|).
  double weight_L() const;
  //! Theorem hypotheses |Lambda| <= max(e^n/n, n^d), 2^{dJ} <= n/log(n|Lambda|).
  bool hypotheses_hold(std::size_t n) const;
};

//! Sufficient statistics over every dyadic rectangle with all axis scales
//! <= j_star: per-rectangle counts and centered power sums
//! sum_{Y_i in K} prod_l (Y_il - c_l(K))^{a_l} for a_l <= max_power_l.
//! Built in one pass over the points at the finest scale, then by pairwise
//! merges with binomial recentering up the scale lattice.
class CellStats {
public:
  CellStats(const Sample& sample, const DegreeVector& max_power, int j_star);

  int dim() const { return d_; }
  int j_star() const { return j_star_; }
  std::size_t n() const { return n_; }
  const DegreeVector& max_power() const { return max_power_; }
  std::size_t power_count() const { return alpha_count_; }

  //! Centered power sums of K, row-major over the power box (last axis fastest).
  std::span<const double> cell_sums(const DyadicRectangle& K) const;
  double count(const DyadicRectangle& K) const { return cell_sums(K)[0]; }

  // scale-lattice iteration helpers for the estimator
  int scale_ordinal(const std::vector<int>& scales) const;
  std::span<const double> block(int scale_ordinal) const;
  std::size_t position_index(const DyadicRectangle& K) const;

private:
  int d_;
  int j_star_;
  std::size_t n_;
  DegreeVector max_power_;
  std::size_t alpha_count_;
  std::vector<std::vector<double>> blocks_;
};

//! (S1, S2) = (sum_i Phi_{K,k}(Y_i), sum_i Phi_{K,k}^2(Y_i)) as exact linear
//! functionals of the centered power sums.
std::pair<double, double> phi_sums(const CellStats& stats, const DyadicRectangle& K,
                                   const MultiIndex& k);

//! Unbiased variance estimator (n S2 - S1^2) / (n (n-1)); equals the averaged
//! squared pairwise differences of the basis evaluations.
double sigma_hat(const CellStats& stats, const DyadicRectangle& K, const MultiIndex& k);

struct FitDiagnostics {
  double m1_star = 0.0;
  double m2_star = 0.0;
  int j_star = 0;
  bool j_star_floor_warning = false;  // even J = 0 failed the defining bound
  double criterion = 0.0;
  double seconds_stats = 0.0;
  double seconds_select = 0.0;
  double seconds_total = 0.0;
};

//! Selected model: tree, per-leaf degrees and coefficients (a density
//! estimate), the achieved criterion and the configuration echo.
class FittedModel {
public:
  FittedModel(PiecewisePoly density, PenaltyConfig config, std::size_t n,
              FitDiagnostics diagnostics);

  const PiecewisePoly& density() const { return density_; }
  const PenaltyConfig& config() const { return config_; }
  const FitDiagnostics& diagnostics() const { return diagnostics_; }
  std::size_t n() const { return n_; }
  int dim() const { return density_.dim(); }

  double operator()(std::span<const double> x) const { return density_(x); }

  std::string to_json() const;
  static FittedModel from_json(const std::string& text);
  void save(const std::string& path) const;
  static FittedModel load(const std::string& path);

private:
  PiecewisePoly density_;
  PenaltyConfig config_;
  std::size_t n_;
  FitDiagnostics diagnostics_;
};

//! The six-step selection engine: statistics, variance overestimates, the
//! per-rectangle degree optimization and the bottom-up partition search.
class DyadicEstimator {
public:
  DyadicEstimator(const Sample& sample, PenaltyConfig config);

  const CellStats& stats() const { return stats_; }
  const PenaltyConfig& config() const { return config_; }
  double m1_star() const { return m1_star_; }
  double m2_star() const { return m2_star_; }
  //! r-independent additive charge shared by every leaf of the criterion.
  double leaf_constant() const { return leaf_constant_; }

  //! The penalized per-rectangle score W(K, r).
  double cell_criterion(const DyadicRectangle& K, const DegreeVector& r) const;
  //! Exhaustive minimizer of W(K, .) over Lambda(r_star); ties prefer the
  //! smaller coefficient set, then lexicographic order.
  std::pair<DegreeVector, double> best_degree(const DyadicRectangle& K) const;
  //! Bottom-up dynamic program over all rectangles of the lattice; ties
  //! prefer keeping a leaf, then the smallest cutting axis.
  FittedModel select_partition() const;

private:
  std::size_t total_rects() const;
  std::size_t rect_ordinal(const DyadicRectangle& K) const;
  void for_each_scale(const std::function<void(const std::vector<int>&)>& fn) const;
  std::vector<double> degree_prefix_sums(const DyadicRectangle& K) const;
  std::pair<std::size_t, double> argmin_degree(const std::vector<double>& prefix) const;

  std::size_t n_;
  PenaltyConfig config_;
  CellStats stats_;
  double m1_star_ = 0.0;
  double m2_star_ = 0.0;
  double leaf_constant_ = 0.0;
  bool j_star_floor_warning_ = false;
  double seconds_stats_ = 0.0;
  std::vector<double> terms_;          // per-rectangle per-degree criterion terms
  std::vector<std::size_t> offsets_;   // rectangle ordinal base per scale vector
  std::vector<std::size_t> lambda_sizes_;

  friend FittedModel fit(const Sample&, const struct FitOptions&);
};

enum class DegreePreset { Constant, LogN };

struct FitOptions {
  std::array<double, 5> kappa{2.0, 0.5, 0.05, 0.05, 0.05};
  DegreeVector r_star;                          // empty: use preset
  DegreePreset preset = DegreePreset::Constant; // Constant defaults to all-ones
  std::optional<int> j_star;                    // unset: compute_Jstar
};

//! Runs the full pipeline and returns the selected model.
FittedModel fit(const Sample& sample, const FitOptions& options = {});

//! Empirical least-squares contrast ||t||^2 - (2/n) sum_i t(Y_i).
double empirical_contrast(const PiecewisePoly& t, const Sample& sample);

}  // namespace dpp
