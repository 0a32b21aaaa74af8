#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <random>

#include "dpp/estimate.hpp"
#include "oracles.hpp"

using namespace dpp;

namespace {

Sample random_sample(std::mt19937& rng, int d, std::size_t n) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> flat(n * static_cast<std::size_t>(d));
  for (auto& v : flat) v = unif(rng);
  return Sample(d, std::move(flat));
}

// direct centered power sums over one rectangle
std::vector<double> direct_cell_sums(const Sample& sample, const DyadicRectangle& K,
                                     const DegreeVector& max_power) {
  const int d = sample.dim();
  const auto alphas = lambda_indices(max_power);
  std::vector<double> out(alphas.size(), 0.0);
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const auto x = sample.point(i);
    if (!K.contains(x)) continue;
    for (std::size_t a = 0; a < alphas.size(); ++a) {
      double prod = 1.0;
      for (int l = 0; l < d; ++l)
        prod *= std::pow(x[static_cast<std::size_t>(l)] - K.center(l),
                         alphas[a][static_cast<std::size_t>(l)]);
      out[a] += prod;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("sample validation") {
  CHECK_THROWS_AS(Sample(1, {0.1, 0.2, 0.3}), std::invalid_argument);        // n < 4
  CHECK_THROWS_AS(Sample(1, {0.1, 0.2, 0.3, 1.5}), std::invalid_argument);   // out of range
  CHECK_THROWS_AS(Sample(2, {0.1, 0.2, 0.3}), std::invalid_argument);        // ragged
  CHECK_NOTHROW(Sample(1, {0.0, 0.25, 0.5, 1.0}));
}

TEST_CASE("finest-scale cap computation") {
  CHECK(compute_Jstar(1024, {0}, 1) == 7);
  CHECK(compute_Jstar(4, {0, 0, 0}, 3) == 0);
  std::size_t prev = 0;
  for (std::size_t n = 8; n <= 1 << 16; n *= 2) {
    const std::size_t J = static_cast<std::size_t>(compute_Jstar(n, {1}, 1));
    CHECK(J >= prev);
    prev = J;
  }
}

TEST_CASE("penalty configuration") {
  PenaltyConfig cfg;
  cfg.r_star = {1};
  cfg.j_star = 7;
  CHECK(cfg.weight_L() == doctest::Approx(std::log(16.0)));
  CHECK(cfg.hypotheses_hold(1024));
  cfg.j_star = 10;
  CHECK_FALSE(cfg.hypotheses_hold(1024));
}

TEST_CASE("cell statistics") {
  SUBCASE("membership counts at both scales") {
    const Sample s(1, {0.1, 0.6, 0.7, 0.9});
    const CellStats stats(s, {0}, 1);
    auto [lo, hi] = DyadicRectangle(1).split(0);
    CHECK(stats.count(lo) == 1.0);
    CHECK(stats.count(hi) == 3.0);
    CHECK(stats.count(DyadicRectangle(1)) == 4.0);
  }
  SUBCASE("boundary points follow the half-open convention") {
    const Sample s(1, {0.0, 0.5, 0.5 + 1e-12, 1.0});
    const CellStats stats(s, {0}, 1);
    auto [lo, hi] = DyadicRectangle(1).split(0);
    CHECK(stats.count(lo) == 2.0);  // 0 and 1/2
    CHECK(stats.count(hi) == 2.0);
  }
  SUBCASE("merged sums match direct recomputation") {
    std::mt19937 rng(13);
    for (int d = 1; d <= 2; ++d) {
      const DegreeVector mp(static_cast<std::size_t>(d), 2);
      const auto sample = random_sample(rng, d, 150);
      const int J = d == 1 ? 4 : 2;
      const CellStats stats(sample, mp, J);
      for (const auto& K : oracles::all_lattice_rects(d, J)) {
        const auto direct = direct_cell_sums(sample, K, mp);
        const auto merged = stats.cell_sums(K);
        REQUIRE(merged.size() == direct.size());
        for (std::size_t a = 0; a < direct.size(); ++a)
          CHECK(merged[a] == doctest::Approx(direct[a]).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("basis sums from the statistics") {
  std::mt19937 rng(19);
  SUBCASE("constant basis function reduces to counts") {
    const auto sample = random_sample(rng, 1, 64);
    const CellStats stats(sample, {2}, 3);
    for (const auto& K : oracles::all_lattice_rects(1, 3)) {
      const auto [s1, s2] = phi_sums(stats, K, {0});
      CHECK(s1 == doctest::Approx(stats.count(K) / std::sqrt(K.measure())).epsilon(1e-12));
      CHECK(s2 == doctest::Approx(stats.count(K) / K.measure()).epsilon(1e-12));
    }
  }
  SUBCASE("matches direct summation for degrees up to two") {
    for (int d = 1; d <= 2; ++d) {
      const auto sample = random_sample(rng, d, 120);
      const DegreeVector rstar(static_cast<std::size_t>(d), 2);
      DegreeVector mp(static_cast<std::size_t>(d), 4);
      const int J = d == 1 ? 3 : 2;
      const CellStats stats(sample, mp, J);
      for (const auto& K : oracles::all_lattice_rects(d, J)) {
        for (const auto& k : lambda_indices(rstar)) {
          const auto [s1, s2] = phi_sums(stats, K, k);
          const auto [d1, d2] = oracles::direct_phi_sums(sample, K, k);
          CHECK(s1 == doctest::Approx(d1).epsilon(1e-9));
          CHECK(s2 == doctest::Approx(d2).epsilon(1e-9));
        }
      }
    }
  }
  SUBCASE("empty cells give zero") {
    const Sample s(1, {0.1, 0.2, 0.21, 0.3});
    const CellStats stats(s, {2}, 2);
    const DyadicRectangle hi({1}, {1});
    const auto [s1, s2] = phi_sums(stats, hi, {1});
    CHECK(s1 == 0.0);
    CHECK(s2 == 0.0);
  }
  SUBCASE("requesting more than the stored order fails") {
    const Sample s(1, {0.1, 0.2, 0.21, 0.3});
    const CellStats stats(s, {2}, 1);
    CHECK_THROWS_AS(phi_sums(stats, DyadicRectangle(1), {2}), std::invalid_argument);
  }
}

TEST_CASE("variance estimator") {
  SUBCASE("two-point closed form") {
    // with two observations the closed form collapses to half the squared gap
    const double a = 1.37, b = -0.42;
    const double n = 2.0;
    const double closed = (n * (a * a + b * b) - (a + b) * (a + b)) / (n * (n - 1.0));
    CHECK(closed == doctest::Approx((a - b) * (a - b) / 2.0).epsilon(1e-15));
  }
  SUBCASE("zero when every point misses the cell") {
    const Sample s(1, {0.1, 0.2, 0.3, 0.4});
    const CellStats stats(s, {2}, 1);
    CHECK(sigma_hat(stats, DyadicRectangle({1}, {1}), {1}) == doctest::Approx(0.0));
  }
  SUBCASE("matches the pairwise double loop") {
    std::mt19937 rng(31);
    const auto sample = random_sample(rng, 1, 50);
    const CellStats stats(sample, {2}, 3);
    for (const auto& K : oracles::all_lattice_rects(1, 3)) {
      for (int k = 0; k <= 1; ++k) {
        const double closed = sigma_hat(stats, K, {k});
        const double brute = oracles::pairwise_sigma_hat(sample, K, {k});
        CHECK(closed == doctest::Approx(brute).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("variance overestimates") {
  std::mt19937 rng(37);
  SUBCASE("degree zero: both maxima equal the density-style count ratio") {
    const auto sample = random_sample(rng, 1, 100);
    PenaltyConfig cfg;
    cfg.r_star = {0};
    cfg.j_star = 3;
    const DyadicEstimator est(sample, cfg);
    double expect = 0.0;
    for (const auto& K : oracles::all_lattice_rects(1, 3)) {
      const CellStats stats(sample, {0}, 3);
      expect = std::max(expect, stats.count(K) / (100.0 * K.measure()));
    }
    CHECK(est.m1_star() == doctest::Approx(expect).epsilon(1e-12));
    CHECK(est.m2_star() == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("the root term makes the second overestimate at least one") {
    const auto sample = random_sample(rng, 2, 64);
    PenaltyConfig cfg;
    cfg.r_star = {1, 1};
    cfg.j_star = 2;
    const DyadicEstimator est(sample, cfg);
    CHECK(est.m2_star() >= 1.0 - 1e-12);
  }
}

TEST_CASE("per-rectangle criterion") {
  std::mt19937 rng(43);
  const auto sample = random_sample(rng, 1, 80);
  PenaltyConfig cfg;
  cfg.r_star = {1};
  cfg.j_star = 2;
  const DyadicEstimator est(sample, cfg);
  const auto ctx = oracles::direct_penalty_context(sample, cfg);

  SUBCASE("matches the from-scratch evaluation") {
    for (const auto& K : oracles::all_lattice_rects(1, 2)) {
      for (int r = 0; r <= 1; ++r) {
        const double lib = est.cell_criterion(K, {r});
        const double direct = oracles::direct_cell_criterion(sample, cfg, ctx, K, {r});
        CHECK(lib == doctest::Approx(direct).epsilon(1e-10));
      }
    }
  }
  SUBCASE("additive over the added coefficients") {
    const DyadicRectangle K({1}, {0});
    const double w0 = est.cell_criterion(K, {0});
    const double w1 = est.cell_criterion(K, {1});
    const CellStats stats(sample, {2}, 2);
    const auto [s1, s2] = phi_sums(stats, K, {1});
    const double n = 80.0;
    const double var = (n * s2 - s1 * s1) / (n * (n - 1.0));
    const double term = -(s1 / n) * (s1 / n) + cfg.kappa[0] * var / n + cfg.kappa[1] * 3.0 / n;
    CHECK(w1 - w0 == doctest::Approx(term).epsilon(1e-10));
  }
  SUBCASE("empty cells keep only the dimension charges") {
    const Sample conc(1, {0.1, 0.11, 0.12, 0.13});
    PenaltyConfig cfg2;
    cfg2.r_star = {1};
    cfg2.j_star = 1;
    const DyadicEstimator est2(conc, cfg2);
    const DyadicRectangle hi({1}, {1});
    const double w = est2.cell_criterion(hi, {1});
    const double expect = cfg2.kappa[1] * (1.0 + 3.0) / 4.0 + est2.leaf_constant();
    CHECK(w == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("criterion sums decompose into contrast plus penalty") {
  std::mt19937 rng(47);
  const auto sample = random_sample(rng, 1, 60);
  PenaltyConfig cfg;
  cfg.r_star = {1};
  cfg.j_star = 2;
  const DyadicEstimator est(sample, cfg);
  const auto ctx = oracles::direct_penalty_context(sample, cfg);
  const double n = static_cast<double>(sample.size());

  for (const auto& tree : enumerate_partitions(2, 1)) {
    const auto rects = tree.leaves(1);
    // alternate degree assignments across leaves
    std::vector<DegreeVector> rho;
    for (std::size_t i = 0; i < rects.size(); ++i) rho.push_back({static_cast<int>(i % 2)});

    double lib_sum = 0.0;
    std::vector<LeafPoly> leaves;
    double pen = ctx.leaf_constant * static_cast<double>(rects.size());
    for (std::size_t i = 0; i < rects.size(); ++i) {
      lib_sum += est.cell_criterion(rects[i], rho[i]);
      std::vector<double> coeffs;
      for (const auto& k : lambda_indices(rho[i])) {
        const auto [s1, s2] = oracles::direct_phi_sums(sample, rects[i], k);
        coeffs.push_back(s1 / n);
        pen += (cfg.kappa[0] * oracles::pairwise_sigma_hat(sample, rects[i], k) +
                cfg.kappa[1] * static_cast<double>(pi_weight(k))) /
               n;
      }
      leaves.push_back(LeafPoly{rects[i], rho[i], std::move(coeffs)});
    }
    const PiecewisePoly shat(tree, std::move(leaves));
    const double gamma = empirical_contrast(shat, sample);
    CHECK(lib_sum == doctest::Approx(gamma + pen).epsilon(1e-10));
  }
}

TEST_CASE("degree optimization") {
  std::mt19937 rng(53);
  SUBCASE("empty cells select the constant") {
    const Sample conc(1, {0.1, 0.11, 0.12, 0.13});
    PenaltyConfig cfg;
    cfg.r_star = {1};
    cfg.j_star = 1;
    const DyadicEstimator est(conc, cfg);
    const auto [r, w] = est.best_degree(DyadicRectangle({1}, {1}));
    CHECK(r == DegreeVector{0});
    CHECK(w == doctest::Approx(est.cell_criterion(DyadicRectangle({1}, {1}), {0})));
  }
  SUBCASE("matches independent enumeration") {
    for (int d = 1; d <= 2; ++d) {
      const auto sample = random_sample(rng, d, 90);
      PenaltyConfig cfg;
      cfg.r_star.assign(static_cast<std::size_t>(d), 1);
      cfg.j_star = 2;
      const DyadicEstimator est(sample, cfg);
      const auto ctx = oracles::direct_penalty_context(sample, cfg);
      for (const auto& K : oracles::all_lattice_rects(d, 2)) {
        const auto [r, w] = est.best_degree(K);
        double best = 1e300;
        for (const auto& cand : lambda_indices(cfg.r_star))
          best = std::min(best, oracles::direct_cell_criterion(sample, cfg, ctx, K, cand));
        CHECK(w == doctest::Approx(best).epsilon(1e-10));
        CHECK(est.cell_criterion(K, r) == doctest::Approx(w).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("partition selection") {
  std::mt19937 rng(59);
  SUBCASE("depth zero returns the trivial model") {
    const auto sample = random_sample(rng, 1, 40);
    PenaltyConfig cfg;
    cfg.r_star = {1};
    cfg.j_star = 0;
    const DyadicEstimator est(sample, cfg);
    const auto model = est.select_partition();
    CHECK(model.density().leaves().size() == 1);
    const auto [r, w] = est.best_degree(DyadicRectangle(1));
    CHECK(model.diagnostics().criterion == doctest::Approx(w));
    CHECK(model.density().leaves()[0].degrees == r);
  }
  SUBCASE("equals the exhaustive search over partitions and degrees") {
    for (int d = 1; d <= 2; ++d) {
      for (int rep = 0; rep < 3; ++rep) {
        const auto sample = random_sample(rng, d, 120);
        PenaltyConfig cfg;
        cfg.r_star.assign(static_cast<std::size_t>(d), 1);
        cfg.j_star = 2;
        const DyadicEstimator est(sample, cfg);
        const auto model = est.select_partition();
        const double brute = oracles::exhaustive_selection_minimum(sample, cfg);
        CHECK(model.diagnostics().criterion ==
              doctest::Approx(brute).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("full fit") {
  std::mt19937 rng(61);
  SUBCASE("total mass is always one") {
    const auto sample = random_sample(rng, 1, 500);
    const auto model = fit(sample);
    double mass = 0.0;
    for (const auto& lp : model.density().leaves())
      mass += lp.coeffs[0] * std::sqrt(lp.rect.measure());
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(model.density().integral() == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("deterministic: identical samples give identical models") {
    const auto sample = random_sample(rng, 2, 300);
    const auto a = fit(sample);
    const auto b = fit(sample);
    CHECK(a.density().tree() == b.density().tree());
    REQUIRE(a.density().leaves().size() == b.density().leaves().size());
    for (std::size_t i = 0; i < a.density().leaves().size(); ++i) {
      CHECK(a.density().leaves()[i].degrees == b.density().leaves()[i].degrees);
      const auto& ca = a.density().leaves()[i].coeffs;
      const auto& cb = b.density().leaves()[i].coeffs;
      REQUIRE(ca.size() == cb.size());
      for (std::size_t c = 0; c < ca.size(); ++c) CHECK(ca[c] == cb[c]);
    }
  }
  SUBCASE("leaf scales never exceed the depth cap") {
    const auto sample = random_sample(rng, 1, 2000);
    const auto model = fit(sample);
    for (const auto& lp : model.density().leaves())
      CHECK(lp.rect.scale(0) <= model.config().j_star);
  }
  SUBCASE("empty leaves evaluate to zero") {
    const Sample conc(1, {0.05, 0.1, 0.15, 0.2, 0.3, 0.35, 0.4, 0.45});
    FitOptions opt;
    opt.j_star = 1;
    const auto model = fit(conc, opt);
    const double pt[1] = {0.9};
    CHECK(model(pt) == doctest::Approx(0.0));
  }
  SUBCASE("order of the observations does not matter") {
    auto flat = random_sample(rng, 1, 200).flat();
    Sample fwd(1, flat);
    std::reverse(flat.begin(), flat.end());
    Sample rev(1, flat);
    const auto a = fit(fwd);
    const auto b = fit(rev);
    CHECK(a.density().tree() == b.density().tree());
    CHECK(a.diagnostics().criterion == doctest::Approx(b.diagnostics().criterion).epsilon(1e-13));
  }
}

TEST_CASE("empirical contrast") {
  std::mt19937 rng(67);
  const auto sample = random_sample(rng, 1, 100);
  SUBCASE("zero function") {
    CHECK(empirical_contrast(PiecewisePoly::constant(1, 0.0), sample) == 0.0);
  }
  SUBCASE("the projection estimator attains minus its squared norm") {
    const auto model = fit(sample);
    const double gamma = empirical_contrast(model.density(), sample);
    CHECK(gamma == doctest::Approx(-model.density().l2_norm_sq()).epsilon(1e-10));
  }
  SUBCASE("perturbing any coefficient increases the contrast") {
    FitOptions opt;
    opt.j_star = 1;
    const auto model = fit(random_sample(rng, 1, 120), opt);
    const double base = empirical_contrast(model.density(), sample);
    auto leaves = model.density().leaves();
    for (double delta : {0.05, -0.05}) {
      auto bumped = leaves;
      bumped[0].coeffs[0] += delta;
      const PiecewisePoly t(model.density().tree(), std::move(bumped));
      CHECK(empirical_contrast(t, sample) > base);
    }
  }
}

TEST_CASE("model file round trip") {
  std::mt19937 rng(71);
  const auto sample = random_sample(rng, 2, 250);
  const auto model = fit(sample);
  const std::string text = model.to_json();
  const auto loaded = FittedModel::from_json(text);
  CHECK(loaded.n() == model.n());
  CHECK(loaded.dim() == model.dim());
  CHECK(loaded.density().tree() == model.density().tree());
  REQUIRE(loaded.density().leaves().size() == model.density().leaves().size());
  for (std::size_t i = 0; i < model.density().leaves().size(); ++i) {
    const auto& a = model.density().leaves()[i];
    const auto& b = loaded.density().leaves()[i];
    CHECK(a.degrees == b.degrees);
    REQUIRE(a.coeffs.size() == b.coeffs.size());
    for (std::size_t c = 0; c < a.coeffs.size(); ++c) CHECK(a.coeffs[c] == b.coeffs[c]);
  }
  CHECK(loaded.to_json() == text);
  CHECK_THROWS_AS(FittedModel::from_json("{\"format\":\"other\"}"), std::invalid_argument);
}

TEST_CASE("csv input") {
  const std::string path = "test_sample_roundtrip.csv";
  std::mt19937 rng(73);
  const auto sample = random_sample(rng, 2, 50);
  write_sample_csv(path, sample);
  const auto loaded = read_sample_csv(path, 2);
  REQUIRE(loaded.size() == sample.size());
  for (std::size_t i = 0; i < sample.size(); ++i)
    for (int l = 0; l < 2; ++l)
      CHECK(loaded.point(i)[static_cast<std::size_t>(l)] ==
            sample.point(i)[static_cast<std::size_t>(l)]);

  SUBCASE("dimension inference from the first data row") {
    const auto inferred = read_sample_csv(path, 0);
    CHECK(inferred.dim() == 2);
  }
  SUBCASE("malformed rows are reported with their number") {
    std::FILE* f = std::fopen("test_sample_bad.csv", "w");
    std::fputs("x1\n0.1\n0.2\nnot-a-number\n0.4\n", f);
    std::fclose(f);
    try {
      read_sample_csv("test_sample_bad.csv", 1);
      FAIL("expected a parse error");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("row 4") != std::string::npos);
    }
  }
  SUBCASE("out-of-range coordinates are rejected") {
    std::FILE* f = std::fopen("test_sample_range.csv", "w");
    std::fputs("0.1\n0.2\n1.5\n0.4\n", f);
    std::fclose(f);
    CHECK_THROWS_AS(read_sample_csv("test_sample_range.csv", 1), std::invalid_argument);
  }
  SUBCASE("missing files raise io errors") {
    CHECK_THROWS_AS(read_sample_csv("does_not_exist.csv", 1), IoError);
  }
}
