#pragma once

#include <optional>
#include <span>
#include <vector>

#include "dpp/dyadic.hpp"
#include "dpp/legendre.hpp"

namespace dpp {

struct ApproxConfig {
  AnisoFamily sigma;
  DegreeVector r;         // per-axis maximal degree
  double q = 2.0;         // norm index, may be infinity
  double epsilon = 1e-3;  // per-cell error threshold
  std::optional<int> max_level;  // cells at this level are never refined
  ErrorOptions error;
  std::size_t cell_budget = 1 << 22;

  //! Checks sigma_l < r_l + 1 and q in [1, infinity].
  void validate() const;
};

struct ApproxCell {
  int level = 0;
  DyadicRectangle rect;
  double error = 0.0;
};

struct ApproxResult {
  std::vector<ApproxCell> partition;
  PiecewisePoly approximant;  // per-cell best polynomials on the final tree
  double total_error;
  double epsilon;
  double q;
};

enum class RefineSchedule { AllPerPass, OnePerStep };

//! Refine every cell whose best-polynomial error is >= epsilon into its
//! anisotropic children until all cells pass (level-capped cells are kept
//! as is). The approximant uses the per-cell best L_q polynomial.
ApproxResult greedy_partition(const Target& s, const ApproxConfig& cfg,
                              RefineSchedule schedule = RefineSchedule::AllPerPass);

//! Error of the best piecewise polynomial on the full level-k grid in L_p.
double linear_error(const Target& s, const ApproxConfig& cfg, int k, double p = 2.0);

struct TheoryParams {
  double harmonic_mean = 0.0;
  double sigma_min = 0.0;
  double minimax_exponent = 0.0;  // 2H / (d + 2H)
  double q_index = 0.0;           // q(d, sigma, p)
  double nu = 0.0;                // nu(sigma, p)
  double w_weight = 0.0;          // w(r_star)
};
TheoryParams theory_params(const AnisoFamily& sigma, double p, int d,
                           const DegreeVector& r_star);

struct SmoothnessReport {
  std::vector<int> levels;
  std::vector<double> linear_errors;
  double seminorm = 0.0;
  double tail_proxy = 0.0;  // last weighted term, the truncation residual scale
  bool divergent = false;
  double p = 2.0;
  double p_prime = 2.0;
  TheoryParams theory;
};

//! Truncated N_{r,sigma,p,p'} from linear errors at levels 0..kmax.
SmoothnessReport seminorm(const Target& s, const ApproxConfig& cfg, double p,
                          double p_prime, int kmax);

struct RateRow {
  double epsilon = 0.0;
  std::size_t cells = 0;
  double error = 0.0;
};

struct RateTable {
  std::vector<RateRow> rows;
  double slope = 0.0;  // least-squares slope of log2(error) vs log2(cells)
};

//! Runs the greedy algorithm over a threshold schedule and fits the
//! log-log decay of error against partition size.
RateTable rate_experiment(const Target& s, const ApproxConfig& cfg,
                          std::span<const double> eps_schedule);

//! Threshold schedule eps_k = lambda R 2^{-k d (tau + 1/p)} matched to the
//! greedy analysis, for k in [kmin, kmax].
std::vector<double> eps_schedule_from_k(const ApproxConfig& cfg, double R, double p,
                                        int kmin, int kmax);

//! Synthetic target with prescribed smoothness: a sum over axes of wave
//! cascades (scale ratio 2^{1/3}, golden-ratio phases) whose grid errors
//! decay like 2^{-j sigma_l} along axis l. Axes with sigma_l >= 2 use a C1
//! piecewise-quadratic wave, the others a piecewise-linear one.
Target cascade_target(const std::vector<double>& sigma, int levels = 30);

//! Writes a rate table as CSV (epsilon, cells, error, log2_cells, log2_error)
//! with '#'-prefixed header lines.
std::string rate_table_csv(const RateTable& table, const ApproxConfig& cfg);

}  // namespace dpp
