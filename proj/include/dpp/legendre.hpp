#pragma once

#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "dpp/dyadic.hpp"

namespace dpp {

//! Per-axis degree of one tensor basis function.
using MultiIndex = std::vector<int>;
//! Per-axis maximal degree; Lambda(rho) is the box of multi-indices k <= rho.
using DegreeVector = std::vector<int>;

//! pi(k) = prod (2 k_l + 1); the squared sup norm of Phi_{K,k} times lambda(K).
long long pi_weight(const MultiIndex& k);
//! |Lambda(rho)| = prod (rho_l + 1).
long long lambda_size(const DegreeVector& rho);
//! All multi-indices k <= rho, row-major with the last axis fastest.
std::vector<MultiIndex> lambda_indices(const DegreeVector& rho);

//! Legendre polynomial Q_j on [-1,1] by the three-term recurrence;
//! Q_j(1) = 1, sup |Q_j| = 1 and the squared L2 norm is 2/(2j+1).
double legendre_eval(int j, double u);
//! Q_0(u), ..., Q_jmax(u) in one sweep; out must hold jmax+1 values.
void legendre_all(int jmax, double u, std::span<double> out);
//! Coefficients of Q_j in powers of u (index = power).
const std::vector<double>& legendre_monomial_coeffs(int j);
//! Coefficients of Q_j^2 in powers of u.
const std::vector<double>& legendre_square_monomial_coeffs(int j);

//! Gauss-Legendre rule on [-1,1]; exact for polynomials of degree 2*order-1.
struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};
const QuadratureRule& gauss_legendre(int order);

//! Orthonormal tensor-Legendre basis function on K evaluated at x
//! (zero outside K).
double phi_eval(const DyadicRectangle& K, const MultiIndex& k, std::span<const double> x);

//! Polynomial with the given coefficients in the orthonormal basis of K,
//! evaluated at x (no support check).
double eval_in_cell_basis(const DyadicRectangle& K, const DegreeVector& rho,
                          std::span<const double> coeffs, std::span<const double> x);

//! One leaf of a piecewise polynomial: coefficients of the orthonormal
//! tensor-Legendre basis on `rect`, row-major over Lambda(degrees)
//! (last axis fastest).
struct LeafPoly {
  DyadicRectangle rect;
  DegreeVector degrees;
  std::vector<double> coeffs;
};

//! Piecewise polynomial on the dyadic partition given by a tree; leaf
//! coefficient blocks are stored in tree depth-first order. The squared L2
//! norm is the plain sum of squared coefficients.
class PiecewisePoly {
public:
  PiecewisePoly(PartitionTree tree, std::vector<LeafPoly> leaves);
  static PiecewisePoly constant(int d, double value);

  int dim() const { return leaves_[0].rect.dim(); }
  const PartitionTree& tree() const { return tree_; }
  const std::vector<LeafPoly>& leaves() const { return leaves_; }

  //! Index of the unique leaf whose rectangle contains x.
  int leaf_index(std::span<const double> x) const;
  double operator()(std::span<const double> x) const;

  double l2_norm_sq() const;
  //! Integral over the cube: sum of constant-term coefficients times
  //! the square root of the leaf measures.
  double integral() const;

private:
  PartitionTree tree_;
  std::vector<LeafPoly> leaves_;
  std::vector<std::int32_t> leaf_counts_;  // per node, for point location
};

//! Expansion of the parent orthonormal Legendre basis restricted to one half
//! of the interval, in the child's orthonormal basis. Row = parent degree,
//! column = child degree; lower triangular. Valid for any interval.
const std::vector<std::vector<double>>& transport_matrix(int degree, bool right_half);

//! Re-expand src on a contained rectangle; same degrees, exact.
std::vector<double> transport_to(const LeafPoly& src, const DyadicRectangle& target);

//! Exact L2 distance via re-expansion on the common refinement.
double l2_dist(const PiecewisePoly& a, const PiecewisePoly& b);

//! Function on [0,1]^d, either an analytic closure or a piecewise polynomial
//! (the latter is integrated exactly wherever possible).
class Target {
public:
  Target(std::function<double(std::span<const double>)> fn);
  explicit Target(PiecewisePoly poly);

  double operator()(std::span<const double> x) const;
  const PiecewisePoly* poly() const { return poly_.get(); }

private:
  std::function<double(std::span<const double>)> fn_;
  std::shared_ptr<const PiecewisePoly> poly_;
};

//! Coefficients <f, Phi_{K,k}> for k in Lambda(rho) via tensor Gauss-Legendre
//! quadrature (quad_order <= 0 picks max(rho)+4 per axis); exact algebra when
//! f is a piecewise polynomial.
std::vector<double> project(const Target& f, const DyadicRectangle& K,
                            const DegreeVector& rho, int quad_order = 0);

struct ErrorOptions {
  int quad_order = 0;   // 0: max(degree)+4 per axis
  int grid = 64;        // points per axis for the q != 2 objective
  int max_passes = 80;  // coordinate-descent passes
  double tol = 1e-12;
};

//! Best polynomial on K with per-axis degrees r under the L_q norm, plus the
//! attained error. q = 2 is the orthogonal projection (exact); other q come
//! from coordinate descent on a grid-discretized objective seeded with the
//! projection.
struct CellFit {
  std::vector<double> coeffs;
  double error = 0.0;
};
CellFit fit_cell(const Target& f, const DyadicRectangle& K, const DegreeVector& r,
                 double q, const ErrorOptions& opt = {});

//! E_r(f, K)_q, the error of the best degree-r polynomial approximation on K.
double residual_norm(const Target& f, const DyadicRectangle& K, const DegreeVector& r,
                     double q, const ErrorOptions& opt = {});

}  // namespace dpp
