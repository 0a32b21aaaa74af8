#include "dpp/approx.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <stdexcept>

namespace dpp {

void ApproxConfig::validate() const {
  if (sigma.dim() != static_cast<int>(r.size()))
    throw std::invalid_argument("sigma and r dimension mismatch");
  for (int l = 0; l < sigma.dim(); ++l)
    if (!(sigma.sigma()[l] < r[l] + 1.0))
      throw std::invalid_argument("sigma_l must be below r_l + 1");
  if (!(q >= 1.0)) throw std::invalid_argument("q must lie in [1, infinity]");
  if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
  if (max_level && *max_level < 0) throw std::invalid_argument("max_level must be >= 0");
}

namespace {

struct WorkCell {
  int level;
  DyadicRectangle rect;
  CellFit fit;
};

// binary expansion of a multiway refinement: split axes in increasing order
PartitionTree expand_cell(const DyadicRectangle& rect, const AnisoFamily& sigma, int level,
                          const std::map<std::string, std::size_t>& final_index,
                          std::vector<std::size_t>& leaf_order);

std::string rect_key(const DyadicRectangle& r) {
  std::string key;
  for (int l = 0; l < r.dim(); ++l) {
    key += std::to_string(r.scale(l));
    key += ':';
    key += std::to_string(r.pos(l));
    key += ',';
  }
  return key;
}

PartitionTree expand_binary(const DyadicRectangle& rect, std::vector<int>& delta,
                            const AnisoFamily& sigma, int level,
                            const std::map<std::string, std::size_t>& final_index,
                            std::vector<std::size_t>& leaf_order) {
  int axis = -1;
  for (std::size_t l = 0; l < delta.size(); ++l)
    if (delta[l] > 0) { axis = static_cast<int>(l); break; }
  if (axis < 0) return expand_cell(rect, sigma, level, final_index, leaf_order);
  auto [lo, hi] = rect.split(axis);
  delta[static_cast<std::size_t>(axis)]--;
  PartitionTree left = expand_binary(lo, delta, sigma, level, final_index, leaf_order);
  PartitionTree right = expand_binary(hi, delta, sigma, level, final_index, leaf_order);
  delta[static_cast<std::size_t>(axis)]++;
  return PartitionTree::node(axis, left, right);
}

PartitionTree expand_cell(const DyadicRectangle& rect, const AnisoFamily& sigma, int level,
                          const std::map<std::string, std::size_t>& final_index,
                          std::vector<std::size_t>& leaf_order) {
  auto it = final_index.find(rect_key(rect));
  if (it != final_index.end()) {
    leaf_order.push_back(it->second);
    return PartitionTree::leaf();
  }
  const auto next_scales = sigma.level_scales(level + 1);
  std::vector<int> delta(static_cast<std::size_t>(rect.dim()));
  for (int l = 0; l < rect.dim(); ++l)
    delta[static_cast<std::size_t>(l)] = next_scales[static_cast<std::size_t>(l)] - rect.scale(l);
  return expand_binary(rect, delta, sigma, level + 1, final_index, leaf_order);
}

}  // namespace

ApproxResult greedy_partition(const Target& s, const ApproxConfig& cfg,
                              RefineSchedule schedule) {
  cfg.validate();
  const int d = cfg.sigma.dim();

  std::vector<WorkCell> cells;
  cells.push_back({0, DyadicRectangle(d), fit_cell(s, DyadicRectangle(d), cfg.r, cfg.q, cfg.error)});

  auto refinable = [&](const WorkCell& c) {
    if (!(c.fit.error >= cfg.epsilon)) return false;
    return !cfg.max_level || c.level < *cfg.max_level;
  };

  while (true) {
    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < cells.size(); ++i)
      if (refinable(cells[i])) {
        todo.push_back(i);
        if (schedule == RefineSchedule::OnePerStep) break;
      }
    if (todo.empty()) break;

    std::vector<WorkCell> next;
    next.reserve(cells.size());
    std::size_t t = 0;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (t < todo.size() && todo[t] == i) {
        ++t;
        for (const auto& child : aniso_children(cells[i].rect, cfg.sigma, cells[i].level)) {
          next.push_back({cells[i].level + 1, child, fit_cell(s, child, cfg.r, cfg.q, cfg.error)});
          if (next.size() + cells.size() > cfg.cell_budget)
            throw std::length_error("greedy refinement exceeds cell budget");
        }
      } else {
        next.push_back(std::move(cells[i]));
      }
    }
    cells = std::move(next);
  }

  std::vector<ApproxCell> partition;
  partition.reserve(cells.size());
  for (const auto& c : cells) partition.push_back({c.level, c.rect, c.fit.error});

  double total_error = 0.0;
  if (std::isinf(cfg.q)) {
    for (const auto& c : cells) total_error = std::max(total_error, c.fit.error);
  } else {
    double acc = 0.0;
    for (const auto& c : cells) acc += std::pow(c.fit.error, cfg.q);
    total_error = std::pow(acc, 1.0 / cfg.q);
  }

  // assemble the approximant tree by replaying the anisotropic refinements
  std::map<std::string, std::size_t> final_index;
  for (std::size_t i = 0; i < cells.size(); ++i) final_index[rect_key(cells[i].rect)] = i;
  std::vector<std::size_t> leaf_order;
  PartitionTree tree = expand_cell(DyadicRectangle(d), cfg.sigma, 0, final_index, leaf_order);
  std::vector<LeafPoly> leaves;
  leaves.reserve(leaf_order.size());
  const auto rects = tree.leaves(d);
  for (std::size_t i = 0; i < leaf_order.size(); ++i) {
    const WorkCell& c = cells[leaf_order[i]];
    leaves.push_back(LeafPoly{rects[i], cfg.r, c.fit.coeffs});
  }
  return ApproxResult{std::move(partition),
                      PiecewisePoly(std::move(tree), std::move(leaves)), total_error,
                      cfg.epsilon, cfg.q};
}

namespace {

// grid L_p norm of s minus the polynomial with the given coefficients on K;
// used below p = 1 where the per-cell objective is not convex
double grid_lp_error(const Target& s, const DyadicRectangle& K, const DegreeVector& r,
                     const std::vector<double>& coeffs, double p, int grid) {
  const int d = K.dim();
  const int G = std::max(2, grid);
  std::vector<int> idx(static_cast<std::size_t>(d), 0);
  std::vector<double> x(static_cast<std::size_t>(d));
  std::size_t npts = 1;
  for (int l = 0; l < d; ++l) npts *= static_cast<std::size_t>(G);
  const double w = K.measure() / static_cast<double>(npts);
  double acc = 0.0;
  for (std::size_t pt = 0; pt < npts; ++pt) {
    for (int l = 0; l < d; ++l)
      x[l] = K.lower(l) + (idx[l] + 0.5) / G * K.side(l);
    const double pv = eval_in_cell_basis(K, r, coeffs, x);
    acc += w * std::pow(std::abs(s(x) - pv), p);
    int l = d - 1;
    for (; l >= 0; --l) {
      if (++idx[l] < G) break;
      idx[l] = 0;
    }
  }
  return std::pow(acc, 1.0 / p);
}

}  // namespace

double linear_error(const Target& s, const ApproxConfig& cfg, int k, double p) {
  if (k < 0) throw std::invalid_argument("level must be nonnegative");
  if (!(p > 0.0)) throw std::invalid_argument("p must be positive");
  const auto cells = aniso_cells(cfg.sigma, k);
  if (std::isinf(p)) {
    double m = 0.0;
    for (const auto& K : cells)
      m = std::max(m, residual_norm(s, K, cfg.r, p, cfg.error));
    return m;
  }
  // e_k^p is the sum over the level-k grid of per-cell L_p errors to the p
  double acc = 0.0;
  for (const auto& K : cells) {
    double e;
    if (p >= 1.0) {
      e = residual_norm(s, K, cfg.r, p, cfg.error);
    } else {
      // seed with the L1 minimizer, then measure its L_p grid error
      const CellFit cf = fit_cell(s, K, cfg.r, 1.0, cfg.error);
      e = grid_lp_error(s, K, cfg.r, cf.coeffs, p, cfg.error.grid);
    }
    acc += std::pow(e, p);
  }
  return std::pow(acc, 1.0 / p);
}

TheoryParams theory_params(const AnisoFamily& sigma, double p, int d,
                           const DegreeVector& r_star) {
  if (sigma.dim() != d) throw std::invalid_argument("sigma dimension mismatch");
  TheoryParams t;
  t.harmonic_mean = sigma.harmonic_mean();
  t.sigma_min = sigma.sigma_min();
  const double H = t.harmonic_mean;
  t.minimax_exponent = 2.0 * H / (d + 2.0 * H);
  const double deficit = std::max(0.0, 1.0 / p - 0.5);
  t.q_index = (t.sigma_min / H) * ((d + 2.0 * H) / H) * (H / d - deficit);
  const double mu = H / t.sigma_min;
  const double a = 0.5 * (mu - 1.0) + deficit;
  t.nu = 0.5 * (a + std::sqrt(a * a + 2.0 * deficit));
  if (!r_star.empty()) {
    const double lam = static_cast<double>(lambda_size(r_star));
    t.w_weight = static_cast<double>(pi_weight(r_star)) * lam *
                 std::log(8.0 * std::exp(1.0) * d * lam);
  }
  return t;
}

SmoothnessReport seminorm(const Target& s, const ApproxConfig& cfg, double p,
                          double p_prime, int kmax) {
  if (kmax < 0) throw std::invalid_argument("kmax must be nonnegative");
  SmoothnessReport rep;
  rep.p = p;
  rep.p_prime = p_prime;
  rep.theory = theory_params(cfg.sigma, p, cfg.sigma.dim(), cfg.r);
  std::vector<double> weighted;
  for (int k = 0; k <= kmax; ++k) {
    const double ek = linear_error(s, cfg, k, p);
    rep.levels.push_back(k);
    rep.linear_errors.push_back(ek);
    weighted.push_back(std::pow(2.0, k * cfg.sigma.sigma_min()) * ek);
  }
  if (std::isinf(p_prime)) {
    rep.seminorm = *std::max_element(weighted.begin(), weighted.end());
  } else {
    double acc = 0.0;
    for (double w : weighted) acc += std::pow(w, p_prime);
    rep.seminorm = std::pow(acc, 1.0 / p_prime);
  }
  rep.tail_proxy = weighted.back();
  const std::size_t m = weighted.size();
  rep.divergent = m >= 3 && weighted[m - 1] > weighted[m - 2] &&
                  weighted[m - 2] > weighted[m - 3] && weighted[m - 1] > weighted[0];
  return rep;
}

RateTable rate_experiment(const Target& s, const ApproxConfig& cfg,
                          std::span<const double> eps_schedule) {
  RateTable table;
  for (double eps : eps_schedule) {
    ApproxConfig run = cfg;
    run.epsilon = eps;
    const ApproxResult res = greedy_partition(s, run);
    table.rows.push_back({eps, res.partition.size(), res.total_error});
  }
  // least-squares fit over rows with positive error and more than one cell
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int m = 0;
  for (const auto& row : table.rows) {
    if (row.error <= 0.0 || row.cells < 1) continue;
    const double x = std::log2(static_cast<double>(row.cells));
    const double y = std::log2(row.error);
    sx += x; sy += y; sxx += x * x; sxy += x * y;
    ++m;
  }
  const double denom = m * sxx - sx * sx;
  table.slope = (m >= 2 && std::abs(denom) > 1e-12) ? (m * sxy - sx * sy) / denom : 0.0;
  return table;
}

std::vector<double> eps_schedule_from_k(const ApproxConfig& cfg, double R, double p,
                                        int kmin, int kmax) {
  if (kmin < 0 || kmax < kmin) throw std::invalid_argument("bad k range");
  const double H = cfg.sigma.harmonic_mean();
  const double smin = cfg.sigma.sigma_min();
  const int d = cfg.sigma.dim();
  const double qq = cfg.q;
  const double deficit = std::isinf(qq) ? 1.0 / p : std::max(0.0, 1.0 / p - 1.0 / qq);
  const double tau = H / d - deficit;
  const double lambda = std::pow(2.0, (1.0 + (1.0 + tau * p) * smin / H) * d / p);
  std::vector<double> out;
  for (int k = kmin; k <= kmax; ++k)
    out.push_back(lambda * R * std::pow(2.0, -k * d * (tau + 1.0 / p)));
  return out;
}

namespace {

double triangle_wave(double t) {
  const double f = t - std::floor(t);
  return 4.0 * std::abs(f - 0.5) - 1.0;
}

// integral of the triangle wave, rescaled to unit amplitude; C1 and
// piecewise quadratic
double smooth_wave(double t) {
  const double u = t - std::floor(t);
  return u <= 0.5 ? 8.0 * (u - 2.0 * u * u)
                  : 8.0 * (-(u - 0.5) + 2.0 * (u - 0.5) * (u - 0.5));
}

}  // namespace

Target cascade_target(const std::vector<double>& sigma, int levels) {
  for (double s : sigma)
    if (!(s > 0.0)) throw std::invalid_argument("sigma entries must be positive");
  const auto sig = sigma;
  return Target([sig, levels](std::span<const double> x) {
    double v = 0.0;
    for (std::size_t l = 0; l < sig.size(); ++l) {
      for (int m = 0; m <= levels; ++m) {
        const double scale = std::pow(2.0, m / 3.0);
        const double phase = (m + static_cast<int>(l) * 7) * 0.6180339887498949;
        const double wave = sig[l] >= 2.0 ? smooth_wave(scale * x[l] + phase)
                                          : triangle_wave(scale * x[l] + phase);
        v += std::pow(scale, -sig[l]) * wave;
      }
    }
    return v;
  });
}

std::string rate_table_csv(const RateTable& table, const ApproxConfig& cfg) {
  std::string out;
  char buf[256];
  out += "# greedy approximation rate table\n";
  std::snprintf(buf, sizeof buf, "# q=%g eps_rows=%zu slope_log2err_vs_log2cells=%.6f\n",
                cfg.q, table.rows.size(), table.slope);
  out += buf;
  out += "# sigma=";
  for (int l = 0; l < cfg.sigma.dim(); ++l) {
    std::snprintf(buf, sizeof buf, "%s%g", l ? "," : "", cfg.sigma.sigma()[l]);
    out += buf;
  }
  out += " r=";
  for (std::size_t l = 0; l < cfg.r.size(); ++l) {
    std::snprintf(buf, sizeof buf, "%s%d", l ? "," : "", cfg.r[l]);
    out += buf;
  }
  out += "\nepsilon,cells,error,log2_cells,log2_error\n";
  for (const auto& row : table.rows) {
    const double lc = std::log2(static_cast<double>(row.cells));
    const double le = row.error > 0 ? std::log2(row.error) : -std::numeric_limits<double>::infinity();
    std::snprintf(buf, sizeof buf, "%.12g,%zu,%.12g,%.6f,%.6f\n", row.epsilon, row.cells,
                  row.error, lc, le);
    out += buf;
  }
  return out;
}

}  // namespace dpp
