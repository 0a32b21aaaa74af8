#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "dpp/legendre.hpp"
#include "oracles.hpp"

using namespace dpp;

namespace {

PiecewisePoly random_poly(std::mt19937& rng, int d, int max_depth, int max_degree) {
  std::uniform_real_distribution<double> coef(-1.0, 1.0);
  std::uniform_int_distribution<int> deg(0, max_degree);
  const auto tree = oracles::random_tree(rng, d, max_depth, 0.6);
  const auto rects = tree.leaves(d);
  std::vector<LeafPoly> leaves;
  for (const auto& rect : rects) {
    DegreeVector degrees(static_cast<std::size_t>(d));
    for (int l = 0; l < d; ++l) degrees[static_cast<std::size_t>(l)] = deg(rng);
    std::vector<double> coeffs(static_cast<std::size_t>(lambda_size(degrees)));
    for (auto& c : coeffs) c = coef(rng);
    leaves.push_back(LeafPoly{rect, std::move(degrees), std::move(coeffs)});
  }
  return PiecewisePoly(tree, std::move(leaves));
}

}  // namespace

TEST_CASE("legendre recurrence basics") {
  CHECK(legendre_eval(0, 0.37) == 1.0);
  CHECK(legendre_eval(1, 0.37) == 0.37);
  CHECK(legendre_eval(3, 1.0) == doctest::Approx(1.0));
  // sup norm 1, attained at u = 1
  for (int j = 0; j <= 10; ++j) {
    double sup = 0.0;
    for (int g = 0; g <= 400; ++g) sup = std::max(sup, std::abs(legendre_eval(j, -1.0 + g / 200.0)));
    CHECK(sup == doctest::Approx(1.0).epsilon(1e-12));
  }
  // squared L2 norm on [-1,1] is 2/(2j+1)
  const auto& rule = gauss_legendre(16);
  for (int j = 0; j <= 10; ++j) {
    double norm = 0.0;
    for (std::size_t g = 0; g < rule.nodes.size(); ++g) {
      const double q = legendre_eval(j, rule.nodes[g]);
      norm += rule.weights[g] * q * q;
    }
    CHECK(norm == doctest::Approx(2.0 / (2 * j + 1)).epsilon(1e-12));
  }
}

TEST_CASE("monomial coefficient tables match the recurrence") {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  for (int j = 0; j <= 12; ++j) {
    const auto& c = legendre_monomial_coeffs(j);
    const auto& sq = legendre_square_monomial_coeffs(j);
    for (int t = 0; t < 10; ++t) {
      const double u = unif(rng);
      double horner = 0.0;
      for (std::size_t i = c.size(); i-- > 0;) horner = horner * u + c[i];
      CHECK(horner == doctest::Approx(legendre_eval(j, u)).epsilon(1e-12));
      double hsq = 0.0;
      for (std::size_t i = sq.size(); i-- > 0;) hsq = hsq * u + sq[i];
      const double q = legendre_eval(j, u);
      // the monomial form cancels heavily at high degree
      CHECK(hsq == doctest::Approx(q * q).epsilon(j <= 8 ? 1e-11 : 1e-7));
    }
  }
}

TEST_CASE("multi-index helpers") {
  CHECK(pi_weight({0, 0}) == 1);
  CHECK(pi_weight({1, 2}) == 15);
  CHECK(pi_weight({1, 1}) == 9);
  CHECK(lambda_size({1, 2}) == 6);
  const auto ks = lambda_indices({1, 1});
  REQUIRE(ks.size() == 4);
  CHECK(ks[0] == MultiIndex{0, 0});
  CHECK(ks[1] == MultiIndex{0, 1});
  CHECK(ks[3] == MultiIndex{1, 1});
}

TEST_CASE("phi basis") {
  SUBCASE("constant basis function is one on the cube") {
    const DyadicRectangle unit(2);
    const double pt[2] = {0.3, 0.9};
    CHECK(phi_eval(unit, {0, 0}, pt) == doctest::Approx(1.0));
  }
  SUBCASE("zero outside the support") {
    const DyadicRectangle cell({1, 1}, {0, 0});
    const double pt[2] = {0.75, 0.25};
    CHECK(phi_eval(cell, {2, 1}, pt) == 0.0);
  }
  SUBCASE("squared sup norm is pi(k)/measure, attained at the upper corner") {
    for (int d = 1; d <= 3; ++d) {
      std::mt19937 rng(d);
      std::uniform_int_distribution<int> deg(0, 6);
      for (int t = 0; t < 5; ++t) {
        std::vector<int> scale(static_cast<std::size_t>(d));
        std::vector<std::uint64_t> pos(static_cast<std::size_t>(d));
        MultiIndex k(static_cast<std::size_t>(d));
        for (int l = 0; l < d; ++l) {
          scale[static_cast<std::size_t>(l)] = t % 3;
          pos[static_cast<std::size_t>(l)] = (t % 3) ? 1 : 0;
          k[static_cast<std::size_t>(l)] = deg(rng);
        }
        const DyadicRectangle K(scale, pos);
        std::vector<double> corner(static_cast<std::size_t>(d));
        for (int l = 0; l < d; ++l) corner[static_cast<std::size_t>(l)] = K.upper(l);
        const double v = phi_eval(K, k, corner);
        CHECK(v * v ==
              doctest::Approx(static_cast<double>(pi_weight(k)) / K.measure()).epsilon(1e-9));
      }
    }
  }
  SUBCASE("gram matrix is the identity under quadrature") {
    const DyadicRectangle cell({1, 2}, {1, 2});
    const auto ks = lambda_indices({4, 4});
    const auto& rule = gauss_legendre(8);
    for (std::size_t a = 0; a < ks.size(); ++a)
      for (std::size_t b = a; b < ks.size(); ++b) {
        double acc = 0.0;
        std::vector<double> x(2);
        for (std::size_t g1 = 0; g1 < rule.nodes.size(); ++g1)
          for (std::size_t g2 = 0; g2 < rule.nodes.size(); ++g2) {
            x[0] = cell.center(0) + 0.5 * cell.side(0) * rule.nodes[g1];
            x[1] = cell.center(1) + 0.5 * cell.side(1) * rule.nodes[g2];
            const double w =
                0.25 * cell.side(0) * cell.side(1) * rule.weights[g1] * rule.weights[g2];
            acc += w * phi_eval(cell, ks[a], x) * phi_eval(cell, ks[b], x);
          }
        CHECK(acc == doctest::Approx(a == b ? 1.0 : 0.0).epsilon(1e-12));
      }
  }
}

TEST_CASE("projection") {
  SUBCASE("constant target") {
    const Target one([](std::span<const double>) { return 1.0; });
    const auto c = project(one, DyadicRectangle(2), {1, 1});
    CHECK(c[0] == doctest::Approx(1.0));
    for (std::size_t i = 1; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(0.0));
  }
  SUBCASE("a basis function projects to its indicator") {
    const DyadicRectangle unit(1);
    const Target f([&](std::span<const double> x) { return phi_eval(unit, {2}, x); });
    const auto c = project(f, unit, {3});
    CHECK(c[0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(c[1] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(c[2] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(c[3] == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("identity function on [0,1]") {
    const Target f([](std::span<const double> x) { return x[0]; });
    const auto c = project(f, DyadicRectangle(1), {1});
    CHECK(c[0] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(c[1] == doctest::Approx(1.0 / (2.0 * std::sqrt(3.0))).epsilon(1e-14));
  }
  SUBCASE("order below max degree + 1 is rejected") {
    const Target one([](std::span<const double>) { return 1.0; });
    CHECK_THROWS_AS(project(one, DyadicRectangle(1), {3}, 2), std::invalid_argument);
  }
  SUBCASE("non-finite values are rejected") {
    const Target bad([](std::span<const double> x) { return 1.0 / (x[0] - x[0]); });
    CHECK_THROWS_AS(project(bad, DyadicRectangle(1), {1}), std::domain_error);
  }
}

TEST_CASE("piecewise polynomials") {
  std::mt19937 rng(17);
  SUBCASE("parseval and quadrature norms agree") {
    for (int t = 0; t < 10; ++t) {
      const auto p = random_poly(rng, 2, 3, 2);
      const double direct = oracles::quadrature_l2_dist(p, PiecewisePoly::constant(2, 0.0), 3, 6);
      CHECK(std::sqrt(p.l2_norm_sq()) == doctest::Approx(direct).epsilon(1e-9));
    }
  }
  SUBCASE("evaluation picks the unique leaf") {
    const auto p = random_poly(rng, 2, 4, 2);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int t = 0; t < 50; ++t) {
      const double pt[2] = {unif(rng), unif(rng)};
      const int idx = p.leaf_index(pt);
      CHECK(p.leaves()[static_cast<std::size_t>(idx)].rect.contains(pt));
    }
  }
  SUBCASE("leaf order must match the tree") {
    auto tree = PartitionTree::node(0, PartitionTree::leaf(), PartitionTree::leaf());
    auto [lo, hi] = DyadicRectangle(1).split(0);
    std::vector<LeafPoly> swapped{LeafPoly{hi, {0}, {1.0}}, LeafPoly{lo, {0}, {1.0}}};
    CHECK_THROWS_AS(PiecewisePoly(tree, std::move(swapped)), std::invalid_argument);
  }
}

TEST_CASE("coefficient transport") {
  SUBCASE("transport is an isometry onto the two halves") {
    std::mt19937 rng(5);
    std::uniform_real_distribution<double> coef(-1.0, 1.0);
    for (int deg = 0; deg <= 5; ++deg) {
      std::vector<double> c(static_cast<std::size_t>(deg) + 1);
      for (auto& v : c) v = coef(rng);
      const LeafPoly parent{DyadicRectangle(1), {deg}, c};
      auto [lo, hi] = DyadicRectangle(1).split(0);
      const auto cl = transport_to(parent, lo);
      const auto cr = transport_to(parent, hi);
      double total = 0.0;
      for (double v : cl) total += v * v;
      for (double v : cr) total += v * v;
      double orig = 0.0;
      for (double v : c) orig += v * v;
      CHECK(total == doctest::Approx(orig).epsilon(1e-12));
    }
  }
  SUBCASE("transported coefficients reproduce the parent pointwise") {
    std::mt19937 rng(29);
    std::uniform_real_distribution<double> coef(-1.0, 1.0);
    std::vector<double> c(6);
    for (auto& v : c) v = coef(rng);
    const LeafPoly parent{DyadicRectangle({0, 0}, {0, 0}), {2, 1}, c};
    const DyadicRectangle sub({2, 1}, {1, 1});
    const auto cs = transport_to(parent, sub);
    std::uniform_real_distribution<double> ux(0.25, 0.5), uy(0.5, 1.0);
    for (int t = 0; t < 20; ++t) {
      const double pt[2] = {ux(rng), uy(rng)};
      const double direct = eval_in_cell_basis(parent.rect, parent.degrees, parent.coeffs, pt);
      const double via = eval_in_cell_basis(sub, parent.degrees, cs, pt);
      CHECK(via == doctest::Approx(direct).epsilon(1e-12));
    }
  }
}

TEST_CASE("l2 distance via common refinement") {
  std::mt19937 rng(41);
  SUBCASE("identical and trivial cases") {
    const auto p = random_poly(rng, 1, 3, 2);
    CHECK(l2_dist(p, p) == doctest::Approx(0.0).epsilon(1e-14));
    const auto one = PiecewisePoly::constant(1, 1.0);
    const auto zero = PiecewisePoly::constant(1, 0.0);
    CHECK(l2_dist(one, zero) == doctest::Approx(1.0));
  }
  SUBCASE("matches the quadrature oracle") {
    for (int t = 0; t < 20; ++t) {
      const auto a = random_poly(rng, 1, 4, 2);
      const auto b = random_poly(rng, 1, 4, 2);
      const double direct = oracles::quadrature_l2_dist(a, b, 4, 8);
      CHECK(l2_dist(a, b) == doctest::Approx(direct).epsilon(1e-10));
    }
  }
}

TEST_CASE("residual norms") {
  SUBCASE("representable targets have zero error") {
    std::mt19937 rng(53);
    const auto p = random_poly(rng, 1, 0, 2);  // single global polynomial
    const Target f(p);
    CHECK(residual_norm(f, DyadicRectangle(1), {2}, 2.0) ==
          doctest::Approx(0.0).epsilon(1e-10));
    auto [lo, hi] = DyadicRectangle(1).split(0);
    CHECK(residual_norm(f, lo, {2}, 2.0) == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(residual_norm(f, hi, {3}, 2.0) == doctest::Approx(0.0).epsilon(1e-10));
  }
  SUBCASE("quadratic against constants") {
    const Target f([](std::span<const double> x) { return x[0] * x[0]; });
    CHECK(residual_norm(f, DyadicRectangle(1), {0}, 2.0) ==
          doctest::Approx(std::sqrt(1.0 / 5.0 - 1.0 / 9.0)).epsilon(1e-12));
  }
  SUBCASE("sup-norm best constant for the identity") {
    const Target f([](std::span<const double> x) { return x[0]; });
    const double e = residual_norm(f, DyadicRectangle(1), {0},
                                   std::numeric_limits<double>::infinity());
    CHECK(e == doctest::Approx(0.5).epsilon(1e-6));
  }
  SUBCASE("l1 error of the identity against constants") {
    // best L1 constant for x on [0,1] is the median 1/2, error 1/4
    const Target f([](std::span<const double> x) { return x[0]; });
    ErrorOptions opt;
    opt.grid = 256;
    const double e = residual_norm(f, DyadicRectangle(1), {0}, 1.0, opt);
    CHECK(e == doctest::Approx(0.25).epsilon(2e-2));
  }
  SUBCASE("monotone in the degree") {
    const Target f([](std::span<const double> x) { return std::sin(3.0 * x[0]); });
    ErrorOptions opt;
    opt.quad_order = 12;
    double prev = 1e9;
    for (int r = 0; r <= 4; ++r) {
      const double e = residual_norm(f, DyadicRectangle(1), {r}, 2.0, opt);
      CHECK(e <= prev + 1e-12);
      prev = e;
    }
  }
}
