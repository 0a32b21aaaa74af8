#include "dpp/legendre.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <map>
#include <mutex>
#include <numbers>
#include <stdexcept>

namespace dpp {

long long pi_weight(const MultiIndex& k) {
  long long p = 1;
  for (int kl : k) {
    if (kl < 0) throw std::invalid_argument("negative degree");
    p *= 2LL * kl + 1;
  }
  return p;
}

long long lambda_size(const DegreeVector& rho) {
  long long p = 1;
  for (int rl : rho) {
    if (rl < 0) throw std::invalid_argument("negative degree");
    p *= rl + 1LL;
  }
  return p;
}

std::vector<MultiIndex> lambda_indices(const DegreeVector& rho) {
  std::vector<MultiIndex> out;
  out.reserve(static_cast<std::size_t>(lambda_size(rho)));
  MultiIndex k(rho.size(), 0);
  while (true) {
    out.push_back(k);
    int l = static_cast<int>(rho.size()) - 1;
    for (; l >= 0; --l) {
      if (++k[l] <= rho[l]) break;
      k[l] = 0;
    }
    if (l < 0) break;
  }
  return out;
}

double legendre_eval(int j, double u) {
  if (j < 0) throw std::invalid_argument("negative degree");
  if (u < -1.0 - 1e-9 || u > 1.0 + 1e-9)
    throw std::invalid_argument("legendre argument outside [-1,1]");
  double prev = 1.0;
  if (j == 0) return prev;
  double cur = u;
  for (int m = 1; m < j; ++m) {
    double next = ((2 * m + 1) * u * cur - m * prev) / (m + 1);
    prev = cur;
    cur = next;
  }
  return cur;
}

void legendre_all(int jmax, double u, std::span<double> out) {
  out[0] = 1.0;
  if (jmax == 0) return;
  out[1] = u;
  for (int m = 1; m < jmax; ++m)
    out[m + 1] = ((2 * m + 1) * u * out[m] - m * out[m - 1]) / (m + 1);
}

namespace {

std::mutex g_table_mutex;

// deque keeps references stable while the tables grow
std::deque<std::vector<double>>& monomial_table() {
  static std::deque<std::vector<double>> table = {{1.0}, {0.0, 1.0}};
  return table;
}

}  // namespace

const std::vector<double>& legendre_monomial_coeffs(int j) {
  if (j < 0) throw std::invalid_argument("negative degree");
  std::lock_guard lock(g_table_mutex);
  auto& table = monomial_table();
  while (static_cast<int>(table.size()) <= j) {
    const int m = static_cast<int>(table.size()) - 1;
    const auto& qm = table[m];
    const auto& qp = table[m - 1];
    std::vector<double> next(m + 2, 0.0);
    for (int i = 0; i <= m; ++i) next[i + 1] += (2 * m + 1) * qm[i] / (m + 1);
    for (int i = 0; i < m; ++i) next[i] -= m * qp[i] / (m + 1);
    table.push_back(std::move(next));
  }
  return table[j];
}

const std::vector<double>& legendre_square_monomial_coeffs(int j) {
  static std::deque<std::vector<double>> table;
  legendre_monomial_coeffs(j);  // fills the base table first
  std::lock_guard lock(g_table_mutex);
  while (static_cast<int>(table.size()) <= j) {
    const auto& c = monomial_table()[table.size()];
    std::vector<double> sq(2 * table.size() + 1, 0.0);
    for (std::size_t i = 0; i < c.size(); ++i)
      for (std::size_t m = 0; m < c.size(); ++m) sq[i + m] += c[i] * c[m];
    table.push_back(std::move(sq));
  }
  return table[j];
}

const QuadratureRule& gauss_legendre(int order) {
  if (order < 1) throw std::invalid_argument("quadrature order must be positive");
  static std::map<int, QuadratureRule> cache;
  static std::mutex mutex;
  std::lock_guard lock(mutex);
  auto it = cache.find(order);
  if (it != cache.end()) return it->second;

  QuadratureRule rule;
  rule.nodes.resize(order);
  rule.weights.resize(order);
  const int n = order;
  for (int i = 0; i < n; ++i) {
    double x = std::cos(std::numbers::pi * (4 * i + 3) / (4 * n + 2));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double prev = 1.0, cur = x;
      for (int m = 1; m < n; ++m) {
        double next = ((2 * m + 1) * x * cur - m * prev) / (m + 1);
        prev = cur;
        cur = next;
      }
      double p = n == 0 ? 1.0 : cur;
      dp = n * (x * cur - prev) / (x * x - 1.0);
      double dx = p / dp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    rule.nodes[i] = x;
    rule.weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
  }
  return cache.emplace(order, std::move(rule)).first->second;
}

double phi_eval(const DyadicRectangle& K, const MultiIndex& k, std::span<const double> x) {
  if (static_cast<int>(k.size()) != K.dim()) throw std::invalid_argument("degree dimension mismatch");
  if (!K.contains(x)) return 0.0;
  double v = std::sqrt(static_cast<double>(pi_weight(k)) / K.measure());
  for (int l = 0; l < K.dim(); ++l) {
    const double t = (x[l] - K.center(l)) * 2.0 / K.side(l);
    v *= legendre_eval(k[l], std::clamp(t, -1.0, 1.0));
  }
  return v;
}

// ---------------------------------------------------------------------------

PiecewisePoly::PiecewisePoly(PartitionTree tree, std::vector<LeafPoly> leaves)
    : tree_(std::move(tree)), leaves_(std::move(leaves)) {
  if (leaves_.empty()) throw std::invalid_argument("no leaves");
  const int d = leaves_[0].rect.dim();
  const auto rects = tree_.leaves(d);
  if (rects.size() != leaves_.size())
    throw std::invalid_argument("leaf count does not match tree");
  for (std::size_t i = 0; i < leaves_.size(); ++i) {
    if (!(leaves_[i].rect == rects[i]))
      throw std::invalid_argument("leaf rectangles must follow tree depth-first order");
    if (static_cast<long long>(leaves_[i].coeffs.size()) != lambda_size(leaves_[i].degrees))
      throw std::invalid_argument("coefficient block size mismatch");
  }
  leaf_counts_ = tree_.subtree_leaf_counts();
}

PiecewisePoly PiecewisePoly::constant(int d, double value) {
  LeafPoly lp{DyadicRectangle(d), DegreeVector(static_cast<std::size_t>(d), 0), {value}};
  return PiecewisePoly(PartitionTree::leaf(), {std::move(lp)});
}

int PiecewisePoly::leaf_index(std::span<const double> x) const {
  constexpr int kStack = 16;
  std::array<double, kStack> lo_s{}, side_s{};
  std::vector<double> lo_h, side_h;
  double* lo = lo_s.data();
  double* side = side_s.data();
  const int d = dim();
  if (d > kStack) {
    lo_h.assign(static_cast<std::size_t>(d), 0.0);
    side_h.assign(static_cast<std::size_t>(d), 1.0);
    lo = lo_h.data();
    side = side_h.data();
  } else {
    for (int l = 0; l < d; ++l) {
      lo[l] = 0.0;
      side[l] = 1.0;
    }
  }
  const auto& nodes = tree_.nodes();
  std::int32_t node = 0;
  int ordinal = 0;
  while (nodes[node].axis >= 0) {
    const int a = nodes[node].axis;
    const double mid = lo[a] + side[a] * 0.5;
    side[a] *= 0.5;
    if (x[a] <= mid) {
      node = nodes[node].left;
    } else {
      lo[a] = mid;
      ordinal += leaf_counts_[nodes[node].left];
      node = nodes[node].right;
    }
  }
  return ordinal;
}

double PiecewisePoly::operator()(std::span<const double> x) const {
  const LeafPoly& lp = leaves_[static_cast<std::size_t>(leaf_index(x))];
  const int d = dim();
  // per-axis Legendre values up to the leaf degree
  double value = 0.0;
  std::vector<std::vector<double>> q(static_cast<std::size_t>(d));
  for (int l = 0; l < d; ++l) {
    q[l].resize(static_cast<std::size_t>(lp.degrees[l]) + 1);
    const double t = std::clamp((x[l] - lp.rect.center(l)) * 2.0 / lp.rect.side(l), -1.0, 1.0);
    legendre_all(lp.degrees[l], t, q[l]);
  }
  const double inv_sqrt_measure = 1.0 / std::sqrt(lp.rect.measure());
  MultiIndex k(static_cast<std::size_t>(d), 0);
  std::size_t flat = 0;
  while (true) {
    double term = lp.coeffs[flat];
    if (term != 0.0) {
      double norm = 1.0;
      double prod = 1.0;
      for (int l = 0; l < d; ++l) {
        norm *= 2.0 * k[l] + 1.0;
        prod *= q[l][static_cast<std::size_t>(k[l])];
      }
      value += term * std::sqrt(norm) * inv_sqrt_measure * prod;
    }
    ++flat;
    int l = d - 1;
    for (; l >= 0; --l) {
      if (++k[l] <= lp.degrees[l]) break;
      k[l] = 0;
    }
    if (l < 0) break;
  }
  return value;
}

double PiecewisePoly::l2_norm_sq() const {
  double s = 0.0;
  for (const auto& lp : leaves_)
    for (double c : lp.coeffs) s += c * c;
  return s;
}

double PiecewisePoly::integral() const {
  double s = 0.0;
  for (const auto& lp : leaves_) s += lp.coeffs[0] * std::sqrt(lp.rect.measure());
  return s;
}

// ---------------------------------------------------------------------------

const std::vector<std::vector<double>>& transport_matrix(int degree, bool right_half) {
  if (degree < 0) throw std::invalid_argument("negative degree");
  static std::map<std::pair<int, bool>, std::vector<std::vector<double>>> cache;
  static std::mutex mutex;
  std::lock_guard lock(mutex);
  auto it = cache.find({degree, right_half});
  if (it != cache.end()) return it->second;

  // reference parent [-1,1]; child [-1,0] or [0,1]
  const QuadratureRule& rule = gauss_legendre(degree + 1);
  const double child_lo = right_half ? 0.0 : -1.0;
  std::vector<std::vector<double>> T(degree + 1, std::vector<double>(degree + 1, 0.0));
  std::vector<double> qp(degree + 1), qc(degree + 1);
  for (std::size_t g = 0; g < rule.nodes.size(); ++g) {
    const double xc = child_lo + 0.5 * (rule.nodes[g] + 1.0);  // point in child
    const double w = 0.5 * rule.weights[g];
    legendre_all(degree, xc, qp);
    legendre_all(degree, 2.0 * xc - (2.0 * child_lo + 1.0), qc);
    for (int i = 0; i <= degree; ++i)
      for (int j = 0; j <= i; ++j) {
        const double norm = std::sqrt((2.0 * i + 1.0) / 2.0) * std::sqrt(2.0 * j + 1.0);
        T[i][j] += w * norm * qp[i] * qc[j];
      }
  }
  return cache.emplace(std::make_pair(degree, right_half), std::move(T)).first->second;
}

namespace {

std::vector<std::size_t> strides_of(const std::vector<int>& dims) {
  std::vector<std::size_t> st(dims.size());
  std::size_t s = 1;
  for (std::size_t l = dims.size(); l-- > 0;) {
    st[l] = s;
    s *= static_cast<std::size_t>(dims[l]);
  }
  return st;
}

std::size_t total_of(const std::vector<int>& dims) {
  std::size_t s = 1;
  for (int v : dims) s *= static_cast<std::size_t>(v);
  return s;
}

// out[..., j, ...] = sum_i M[i][j] in[..., i, ...]  (transposed = false)
// out[..., j, ...] = sum_i M[j][i] in[..., i, ...]  (transposed = true)
std::vector<double> apply_matrix_axis(const std::vector<double>& in,
                                      const std::vector<int>& dims, int axis,
                                      const std::vector<std::vector<double>>& M,
                                      bool transposed) {
  const auto st = strides_of(dims);
  const std::size_t total = total_of(dims);
  const std::size_t inner = st[static_cast<std::size_t>(axis)];
  const std::size_t na = static_cast<std::size_t>(dims[static_cast<std::size_t>(axis)]);
  const std::size_t chunk = na * inner;
  std::vector<double> out(total, 0.0);
  for (std::size_t base = 0; base < total; base += chunk) {
    for (std::size_t off = 0; off < inner; ++off) {
      for (std::size_t j = 0; j < na; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < na; ++i) {
          const double m = transposed ? M[j][i] : M[i][j];
          acc += m * in[base + i * inner + off];
        }
        out[base + j * inner + off] = acc;
      }
    }
  }
  return out;
}

std::vector<int> dims_of(const DegreeVector& degrees) {
  std::vector<int> dims(degrees.size());
  for (std::size_t l = 0; l < degrees.size(); ++l) dims[l] = degrees[l] + 1;
  return dims;
}

}  // namespace

std::vector<double> transport_to(const LeafPoly& src, const DyadicRectangle& target) {
  if (!src.rect.contains(target))
    throw std::invalid_argument("transport target not contained in source rectangle");
  std::vector<double> coeffs = src.coeffs;
  const auto dims = dims_of(src.degrees);
  for (int a = 0; a < src.rect.dim(); ++a) {
    const int steps = target.scale(a) - src.rect.scale(a);
    for (int t = 0; t < steps; ++t) {
      const bool right = (target.pos(a) >> (steps - 1 - t)) & 1;
      coeffs = apply_matrix_axis(coeffs, dims, a, transport_matrix(src.degrees[a], right), false);
    }
  }
  return coeffs;
}

double l2_dist(const PiecewisePoly& a, const PiecewisePoly& b) {
  if (a.dim() != b.dim()) throw std::invalid_argument("dimension mismatch");
  double acc = 0.0;
  for (const LeafPoly& la : a.leaves()) {
    for (const LeafPoly& lb : b.leaves()) {
      if (!la.rect.intersects(lb.rect)) continue;
      const DyadicRectangle cell = la.rect.intersect(lb.rect);
      const std::vector<double> ca = (cell == la.rect) ? la.coeffs : transport_to(la, cell);
      const std::vector<double> cb = (cell == lb.rect) ? lb.coeffs : transport_to(lb, cell);
      // joint degree box, missing coefficients are zero
      DegreeVector joint(la.degrees.size());
      for (std::size_t l = 0; l < joint.size(); ++l)
        joint[l] = std::max(la.degrees[l], lb.degrees[l]);
      const auto da = dims_of(la.degrees);
      const auto db = dims_of(lb.degrees);
      const auto sa = strides_of(da);
      const auto sb = strides_of(db);
      MultiIndex k(joint.size(), 0);
      while (true) {
        double va = 0.0, vb = 0.0;
        bool ina = true, inb = true;
        std::size_t fa = 0, fb = 0;
        for (std::size_t l = 0; l < joint.size(); ++l) {
          if (k[l] > la.degrees[l]) ina = false;
          else fa += static_cast<std::size_t>(k[l]) * sa[l];
          if (k[l] > lb.degrees[l]) inb = false;
          else fb += static_cast<std::size_t>(k[l]) * sb[l];
        }
        if (ina) va = ca[fa];
        if (inb) vb = cb[fb];
        const double dlt = va - vb;
        acc += dlt * dlt;
        int l = static_cast<int>(joint.size()) - 1;
        for (; l >= 0; --l) {
          if (++k[l] <= joint[l]) break;
          k[l] = 0;
        }
        if (l < 0) break;
      }
    }
  }
  return std::sqrt(acc);
}

// ---------------------------------------------------------------------------

Target::Target(std::function<double(std::span<const double>)> fn) : fn_(std::move(fn)) {}

Target::Target(PiecewisePoly poly)
    : poly_(std::make_shared<PiecewisePoly>(std::move(poly))) {
  auto p = poly_;
  fn_ = [p](std::span<const double> x) { return (*p)(x); };
}

double Target::operator()(std::span<const double> x) const { return fn_(x); }

// ---------------------------------------------------------------------------

namespace {

// tensor Gauss nodes over K; calls visit(point, weight)
template <typename Visit>
void tensor_quadrature(const DyadicRectangle& K, int order, Visit&& visit) {
  const int d = K.dim();
  const QuadratureRule& rule = gauss_legendre(order);
  std::vector<int> idx(static_cast<std::size_t>(d), 0);
  std::vector<double> x(static_cast<std::size_t>(d));
  const double cell_factor = K.measure() / std::pow(2.0, d);
  while (true) {
    double w = cell_factor;
    for (int l = 0; l < d; ++l) {
      x[l] = K.center(l) + 0.5 * K.side(l) * rule.nodes[static_cast<std::size_t>(idx[l])];
      w *= rule.weights[static_cast<std::size_t>(idx[l])];
    }
    visit(std::span<const double>(x), w);
    int l = d - 1;
    for (; l >= 0; --l) {
      if (++idx[l] < order) break;
      idx[l] = 0;
    }
    if (l < 0) break;
  }
}

int auto_order(const DegreeVector& rho, int requested) {
  if (requested > 0) {
    int mx = 0;
    for (int r : rho) mx = std::max(mx, r);
    if (requested < mx + 1)
      throw std::invalid_argument("quadrature order below max degree + 1");
    return requested;
  }
  int mx = 0;
  for (int r : rho) mx = std::max(mx, r);
  return mx + 4;
}

// exact projection coefficients of a piecewise polynomial target
std::vector<double> project_poly(const PiecewisePoly& f, const DyadicRectangle& K,
                                 const DegreeVector& rho) {
  const int d = K.dim();
  const auto dims = dims_of(rho);
  std::vector<double> c(total_of(dims), 0.0);
  for (const LeafPoly& lf : f.leaves()) {
    if (!lf.rect.intersects(K)) continue;
    const DyadicRectangle cell = lf.rect.intersect(K);
    const std::vector<double> u = (cell == lf.rect) ? lf.coeffs : transport_to(lf, cell);
    // pad/truncate u to the rho degree box; higher f-degrees are orthogonal
    // to every transported basis function and drop out
    std::vector<double> up(total_of(dims), 0.0);
    const auto su = strides_of(dims_of(lf.degrees));
    const auto sp = strides_of(dims);
    std::vector<int> cap(static_cast<std::size_t>(d));
    for (int l = 0; l < d; ++l) cap[l] = std::min(rho[l], lf.degrees[l]);
    MultiIndex k(static_cast<std::size_t>(d), 0);
    while (true) {
      std::size_t fu = 0, fp = 0;
      for (int l = 0; l < d; ++l) {
        fu += static_cast<std::size_t>(k[l]) * su[l];
        fp += static_cast<std::size_t>(k[l]) * sp[l];
      }
      up[fp] = u[fu];
      int l = d - 1;
      for (; l >= 0; --l) {
        if (++k[l] <= cap[l]) break;
        k[l] = 0;
      }
      if (l < 0) break;
    }
    // apply the transposed transport chain K -> cell per axis
    for (int a = 0; a < d; ++a) {
      const int steps = cell.scale(a) - K.scale(a);
      if (steps == 0) continue;
      // chain = product of the step matrices, applied in descent order
      std::vector<std::vector<double>> chain;
      for (int t = 0; t < steps; ++t) {
        const bool right = (cell.pos(a) >> (steps - 1 - t)) & 1;
        const auto& T = transport_matrix(rho[a], right);
        if (chain.empty()) {
          chain = T;
        } else {
          std::vector<std::vector<double>> next(chain.size(),
                                                std::vector<double>(chain.size(), 0.0));
          for (std::size_t i = 0; i < chain.size(); ++i)
            for (std::size_t j = 0; j < chain.size(); ++j) {
              double acc = 0.0;
              for (std::size_t m = 0; m < chain.size(); ++m) acc += chain[i][m] * T[m][j];
              next[i][j] = acc;
            }
          chain = std::move(next);
        }
      }
      up = apply_matrix_axis(up, dims, a, chain, true);
    }
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += up[i];
  }
  return c;
}

}  // namespace

std::vector<double> project(const Target& f, const DyadicRectangle& K,
                            const DegreeVector& rho, int quad_order) {
  if (static_cast<int>(rho.size()) != K.dim())
    throw std::invalid_argument("degree dimension mismatch");
  if (f.poly()) return project_poly(*f.poly(), K, rho);

  const int order = auto_order(rho, quad_order);
  const int d = K.dim();
  const auto dims = dims_of(rho);
  std::vector<double> c(total_of(dims), 0.0);
  const double inv_sqrt_measure = 1.0 / std::sqrt(K.measure());
  std::vector<std::vector<double>> q(static_cast<std::size_t>(d));
  for (int l = 0; l < d; ++l) q[l].resize(static_cast<std::size_t>(rho[l]) + 1);
  tensor_quadrature(K, order, [&](std::span<const double> x, double w) {
    const double fv = f(x);
    if (!std::isfinite(fv)) throw std::domain_error("non-finite target value");
    for (int l = 0; l < d; ++l) {
      const double t = std::clamp((x[l] - K.center(l)) * 2.0 / K.side(l), -1.0, 1.0);
      legendre_all(rho[l], t, q[l]);
    }
    MultiIndex k(static_cast<std::size_t>(d), 0);
    std::size_t flat = 0;
    while (true) {
      double phi = inv_sqrt_measure;
      for (int l = 0; l < d; ++l)
        phi *= std::sqrt(2.0 * k[l] + 1.0) * q[l][static_cast<std::size_t>(k[l])];
      c[flat] += w * fv * phi;
      ++flat;
      int l = d - 1;
      for (; l >= 0; --l) {
        if (++k[l] <= rho[l]) break;
        k[l] = 0;
      }
      if (l < 0) break;
    }
  });
  return c;
}

double eval_in_cell_basis(const DyadicRectangle& K, const DegreeVector& rho,
                          std::span<const double> coeffs, std::span<const double> x) {
  const int d = K.dim();
  std::vector<std::vector<double>> q(static_cast<std::size_t>(d));
  for (int l = 0; l < d; ++l) {
    q[l].resize(static_cast<std::size_t>(rho[l]) + 1);
    const double t = std::clamp((x[l] - K.center(l)) * 2.0 / K.side(l), -1.0, 1.0);
    legendre_all(rho[l], t, q[l]);
  }
  const double inv_sqrt_measure = 1.0 / std::sqrt(K.measure());
  double v = 0.0;
  MultiIndex k(static_cast<std::size_t>(d), 0);
  std::size_t flat = 0;
  while (true) {
    double phi = inv_sqrt_measure;
    for (int l = 0; l < d; ++l)
      phi *= std::sqrt(2.0 * k[l] + 1.0) * q[l][static_cast<std::size_t>(k[l])];
    v += coeffs[flat] * phi;
    ++flat;
    int l = d - 1;
    for (; l >= 0; --l) {
      if (++k[l] <= rho[l]) break;
      k[l] = 0;
    }
    if (l < 0) break;
  }
  return v;
}

namespace {

// grid for the discretized l_q objective: midpoints for finite q,
// endpoint-including for the sup norm
std::vector<std::vector<double>> objective_grid(const DyadicRectangle& K, int grid,
                                                bool sup_norm) {
  const int d = K.dim();
  std::vector<std::vector<double>> pts(static_cast<std::size_t>(d));
  for (int l = 0; l < d; ++l) {
    pts[l].resize(static_cast<std::size_t>(grid));
    for (int i = 0; i < grid; ++i) {
      const double frac = sup_norm ? (grid == 1 ? 0.5 : static_cast<double>(i) / (grid - 1))
                                   : (i + 0.5) / grid;
      pts[l][static_cast<std::size_t>(i)] = K.lower(l) + frac * K.side(l);
    }
  }
  return pts;
}

CellFit fit_cell_lq(const Target& f, const DyadicRectangle& K, const DegreeVector& r,
                    double q, const ErrorOptions& opt) {
  const int d = K.dim();
  const bool sup = std::isinf(q);
  const int G = std::max(2, opt.grid);
  const auto pts = objective_grid(K, G, sup);
  std::size_t npts = 1;
  for (int l = 0; l < d; ++l) npts *= static_cast<std::size_t>(G);

  // target values over the grid
  std::vector<double> fv(npts);
  {
    std::vector<int> idx(static_cast<std::size_t>(d), 0);
    std::vector<double> x(static_cast<std::size_t>(d));
    for (std::size_t p = 0; p < npts; ++p) {
      for (int l = 0; l < d; ++l) x[l] = pts[l][static_cast<std::size_t>(idx[l])];
      fv[p] = f(x);
      if (!std::isfinite(fv[p])) throw std::domain_error("non-finite target value");
      int l = d - 1;
      for (; l >= 0; --l) {
        if (++idx[l] < G) break;
        idx[l] = 0;
      }
    }
  }

  // basis values per axis and per degree
  std::vector<std::vector<std::vector<double>>> qa(static_cast<std::size_t>(d));
  for (int l = 0; l < d; ++l) {
    qa[l].assign(static_cast<std::size_t>(r[l]) + 1, std::vector<double>(G));
    std::vector<double> buf(static_cast<std::size_t>(r[l]) + 1);
    for (int i = 0; i < G; ++i) {
      const double t = std::clamp(
          (pts[l][static_cast<std::size_t>(i)] - K.center(l)) * 2.0 / K.side(l), -1.0, 1.0);
      legendre_all(r[l], t, buf);
      for (int j = 0; j <= r[l]; ++j)
        qa[l][static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] =
            std::sqrt(2.0 * j + 1.0) * buf[static_cast<std::size_t>(j)];
    }
  }
  const double inv_sqrt_measure = 1.0 / std::sqrt(K.measure());
  const auto ks = lambda_indices(r);

  auto basis_at = [&](const MultiIndex& k, std::size_t flat_pt) {
    double v = inv_sqrt_measure;
    std::size_t rem = flat_pt;
    for (int l = d - 1; l >= 0; --l) {
      const std::size_t i = rem % static_cast<std::size_t>(G);
      rem /= static_cast<std::size_t>(G);
      v *= qa[l][static_cast<std::size_t>(k[l])][i];
    }
    return v;
  };

  std::vector<double> coeffs = project(f, K, r, opt.quad_order);
  std::vector<double> resid(npts);
  {
    std::vector<int> idx(static_cast<std::size_t>(d), 0);
    std::vector<double> x(static_cast<std::size_t>(d));
    for (std::size_t p = 0; p < npts; ++p) {
      for (int l = 0; l < d; ++l) x[l] = pts[l][static_cast<std::size_t>(idx[l])];
      resid[p] = fv[p] - eval_in_cell_basis(K, r, coeffs, x);
      int l = d - 1;
      for (; l >= 0; --l) {
        if (++idx[l] < G) break;
        idx[l] = 0;
      }
    }
  }

  const double wq = K.measure() / static_cast<double>(npts);
  auto objective = [&](const std::vector<double>& rr) {
    if (sup) {
      double m = 0.0;
      for (double v : rr) m = std::max(m, std::abs(v));
      return m;
    }
    double s = 0.0;
    for (double v : rr) s += std::pow(std::abs(v), q);
    return wq * s;
  };

  std::vector<double> phi_vals(npts), trial(npts);
  double obj = objective(resid);
  for (int pass = 0; pass < opt.max_passes; ++pass) {
    const double start = obj;
    for (std::size_t ck = 0; ck < ks.size(); ++ck) {
      for (std::size_t p = 0; p < npts; ++p) phi_vals[p] = basis_at(ks[ck], p);
      auto g = [&](double t) {
        for (std::size_t p = 0; p < npts; ++p) trial[p] = resid[p] - t * phi_vals[p];
        return objective(trial);
      };
      // expand a bracket around 0, then golden-section (g is convex in t)
      double step = std::max(1e-3, std::abs(coeffs[ck]));
      double lo = -step, hi = step;
      for (int e = 0; e < 60 && g(lo) < g(0.0); ++e) lo *= 2.0;
      for (int e = 0; e < 60 && g(hi) < g(0.0); ++e) hi *= 2.0;
      const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
      double a = lo, b = hi;
      double c1 = b - gr * (b - a), c2 = a + gr * (b - a);
      double g1 = g(c1), g2 = g(c2);
      for (int itr = 0; itr < 70 && (b - a) > 1e-14 * (1.0 + std::abs(a) + std::abs(b)); ++itr) {
        if (g1 <= g2) {
          b = c2; c2 = c1; g2 = g1;
          c1 = b - gr * (b - a); g1 = g(c1);
        } else {
          a = c1; c1 = c2; g1 = g2;
          c2 = a + gr * (b - a); g2 = g(c2);
        }
      }
      const double t = 0.5 * (a + b);
      const double gt = g(t);
      if (gt < obj) {
        coeffs[ck] += t;
        for (std::size_t p = 0; p < npts; ++p) resid[p] -= t * phi_vals[p];
        obj = gt;
      }
    }
    if (start - obj <= opt.tol * (1.0 + std::abs(start))) break;
  }

  CellFit out;
  out.coeffs = std::move(coeffs);
  out.error = sup ? obj : std::pow(obj, 1.0 / q);
  return out;
}

}  // namespace

CellFit fit_cell(const Target& f, const DyadicRectangle& K, const DegreeVector& r,
                 double q, const ErrorOptions& opt) {
  if (!(q >= 1.0)) throw std::invalid_argument("q must lie in [1, infinity]");
  if (q != 2.0) return fit_cell_lq(f, K, r, q, opt);

  CellFit out;
  out.coeffs = project(f, K, r, opt.quad_order);
  if (f.poly()) {
    // coefficient-level residual on the common refinement; exact and
    // cancellation-free when f is representable
    const PiecewisePoly& fp = *f.poly();
    const LeafPoly proj{K, r, out.coeffs};
    double acc = 0.0;
    for (const LeafPoly& lf : fp.leaves()) {
      if (!lf.rect.intersects(K)) continue;
      const DyadicRectangle cell = lf.rect.intersect(K);
      const std::vector<double> u = (cell == lf.rect) ? lf.coeffs : transport_to(lf, cell);
      const std::vector<double> v = (cell == K) ? proj.coeffs : transport_to(proj, cell);
      DegreeVector joint(r.size());
      for (std::size_t l = 0; l < joint.size(); ++l)
        joint[l] = std::max(lf.degrees[l], r[l]);
      const auto du = dims_of(lf.degrees);
      const auto dv = dims_of(r);
      const auto su = strides_of(du);
      const auto sv = strides_of(dv);
      MultiIndex k(joint.size(), 0);
      while (true) {
        double uu = 0.0, vv = 0.0;
        std::size_t fu = 0, fvx = 0;
        bool inu = true, inv = true;
        for (std::size_t l = 0; l < joint.size(); ++l) {
          if (k[l] > lf.degrees[l]) inu = false;
          else fu += static_cast<std::size_t>(k[l]) * su[l];
          if (k[l] > r[l]) inv = false;
          else fvx += static_cast<std::size_t>(k[l]) * sv[l];
        }
        if (inu) uu = u[fu];
        if (inv) vv = v[fvx];
        const double dd = uu - vv;
        acc += dd * dd;
        int l = static_cast<int>(joint.size()) - 1;
        for (; l >= 0; --l) {
          if (++k[l] <= joint[l]) break;
          k[l] = 0;
        }
        if (l < 0) break;
      }
    }
    out.error = std::sqrt(std::max(0.0, acc));
  } else {
    const int order = auto_order(r, opt.quad_order);
    double acc = 0.0;
    tensor_quadrature(K, order, [&](std::span<const double> x, double w) {
      const double rr = f(x) - eval_in_cell_basis(K, r, out.coeffs, x);
      acc += w * rr * rr;
    });
    out.error = std::sqrt(std::max(0.0, acc));
  }
  return out;
}

double residual_norm(const Target& f, const DyadicRectangle& K, const DegreeVector& r,
                     double q, const ErrorOptions& opt) {
  return fit_cell(f, K, r, q, opt).error;
}

}  // namespace dpp
