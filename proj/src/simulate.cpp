#include "dpp/simulate.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace dpp {

namespace {

constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

CounterRng CounterRng::for_replicate(std::uint64_t master, std::uint64_t replicate) {
  return CounterRng(mix64(master ^ mix64(replicate + 1)));
}

std::uint64_t CounterRng::next_u64() { return mix64(key_ + (++counter_) * kGamma); }

double CounterRng::next_unit() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

// ---------------------------------------------------------------------------

double DensityPiece::volume() const {
  double v = 1.0;
  for (int l = 0; l < dim(); ++l) v *= hi[static_cast<std::size_t>(l)] - lo[static_cast<std::size_t>(l)];
  return v;
}

bool DensityPiece::contains(std::span<const double> x) const {
  for (int l = 0; l < dim(); ++l) {
    const double a = lo[static_cast<std::size_t>(l)], b = hi[static_cast<std::size_t>(l)];
    if (a <= 0.0) {
      if (x[l] < 0.0 || x[l] > b) return false;
    } else {
      if (x[l] <= a || x[l] > b) return false;
    }
  }
  return true;
}

double DensityPiece::operator()(std::span<const double> x) const {
  const int d = dim();
  std::vector<std::vector<double>> q(static_cast<std::size_t>(d));
  for (int l = 0; l < d; ++l) {
    q[l].resize(static_cast<std::size_t>(degrees[static_cast<std::size_t>(l)]) + 1);
    const double a = lo[static_cast<std::size_t>(l)], b = hi[static_cast<std::size_t>(l)];
    const double t = std::clamp((2.0 * x[l] - a - b) / (b - a), -1.0, 1.0);
    legendre_all(degrees[static_cast<std::size_t>(l)], t, q[l]);
  }
  const double inv_sqrt_vol = 1.0 / std::sqrt(volume());
  double v = 0.0;
  MultiIndex k(static_cast<std::size_t>(d), 0);
  std::size_t flat = 0;
  while (true) {
    double phi = inv_sqrt_vol;
    for (int l = 0; l < d; ++l)
      phi *= std::sqrt(2.0 * k[l] + 1.0) * q[l][static_cast<std::size_t>(k[l])];
    v += coeffs[flat] * phi;
    ++flat;
    int l = d - 1;
    for (; l >= 0; --l) {
      if (++k[l] <= degrees[l]) break;
      k[l] = 0;
    }
    if (l < 0) break;
  }
  return v;
}

namespace {

// tensor Gauss over an arbitrary box, per-axis orders
template <typename Visit>
void gauss_box(std::span<const double> lo, std::span<const double> hi,
               std::span<const int> orders, Visit&& visit) {
  const int d = static_cast<int>(lo.size());
  std::vector<const QuadratureRule*> rules(static_cast<std::size_t>(d));
  for (int l = 0; l < d; ++l) rules[static_cast<std::size_t>(l)] = &gauss_legendre(orders[l]);
  std::vector<int> idx(static_cast<std::size_t>(d), 0);
  std::vector<double> x(static_cast<std::size_t>(d));
  while (true) {
    double w = 1.0;
    for (int l = 0; l < d; ++l) {
      const auto& r = *rules[static_cast<std::size_t>(l)];
      const double half = 0.5 * (hi[l] - lo[l]);
      x[static_cast<std::size_t>(l)] =
          0.5 * (lo[l] + hi[l]) + half * r.nodes[static_cast<std::size_t>(idx[l])];
      w *= half * r.weights[static_cast<std::size_t>(idx[l])];
    }
    visit(std::span<const double>(x), w);
    int l = d - 1;
    for (; l >= 0; --l) {
      if (++idx[l] < orders[l]) break;
      idx[l] = 0;
    }
    if (l < 0) break;
  }
}

// exact L2 projection of fn (polynomial of coordinate degree <= degrees)
// onto the orthonormal basis of the box
DensityPiece make_piece(std::vector<double> lo, std::vector<double> hi, DegreeVector degrees,
                        const std::function<double(std::span<const double>)>& fn) {
  const int d = static_cast<int>(lo.size());
  DensityPiece piece{std::move(lo), std::move(hi), std::move(degrees), {}};
  piece.coeffs.assign(static_cast<std::size_t>(lambda_size(piece.degrees)), 0.0);
  std::vector<int> orders(static_cast<std::size_t>(d));
  for (int l = 0; l < d; ++l) orders[static_cast<std::size_t>(l)] = piece.degrees[static_cast<std::size_t>(l)] + 2;
  const double inv_sqrt_vol = 1.0 / std::sqrt(piece.volume());
  gauss_box(piece.lo, piece.hi, orders, [&](std::span<const double> x, double w) {
    const double fv = fn(x);
    MultiIndex k(static_cast<std::size_t>(d), 0);
    std::size_t flat = 0;
    while (true) {
      double phi = inv_sqrt_vol;
      for (int l = 0; l < d; ++l) {
        const double a = piece.lo[static_cast<std::size_t>(l)], b = piece.hi[static_cast<std::size_t>(l)];
        const double t = std::clamp((2.0 * x[l] - a - b) / (b - a), -1.0, 1.0);
        phi *= std::sqrt(2.0 * k[l] + 1.0) * legendre_eval(k[l], t);
      }
      piece.coeffs[flat] += w * fv * phi;
      ++flat;
      int l = d - 1;
      for (; l >= 0; --l) {
        if (++k[l] <= piece.degrees[l]) break;
        k[l] = 0;
      }
      if (l < 0) break;
    }
  });
  return piece;
}

// splits `rect` toward `target` and returns the leaves of the resulting tree
// with the target as one of them
PartitionTree isolate_cell(const DyadicRectangle& rect, const DyadicRectangle& target) {
  if (rect == target) return PartitionTree::leaf();
  int axis = -1;
  for (int l = 0; l < rect.dim(); ++l)
    if (rect.scale(l) < target.scale(l)) { axis = l; break; }
  auto [lo, hi] = rect.split(axis);
  if (lo.contains(target))
    return PartitionTree::node(axis, isolate_cell(lo, target), PartitionTree::leaf());
  return PartitionTree::node(axis, PartitionTree::leaf(), isolate_cell(hi, target));
}

}  // namespace

// ---------------------------------------------------------------------------

TestDensity::TestDensity(Kind kind, std::string name, std::vector<DensityPiece> pieces)
    : kind_(kind), name_(std::move(name)), pieces_(std::move(pieces)) {
  finalize();
}

void TestDensity::finalize() {
  if (pieces_.empty()) throw std::invalid_argument("density has no pieces");
  const int d = dim();
  double vol = 0.0;
  for (const auto& p : pieces_) {
    if (p.dim() != d) throw std::invalid_argument("piece dimension mismatch");
    vol += p.volume();
  }
  if (std::abs(vol - 1.0) > 1e-9)
    throw std::invalid_argument("pieces do not tile the unit cube");
  const double mass = integral();
  if (std::abs(mass - 1.0) > 1e-8)
    throw std::invalid_argument("density does not integrate to one");

  // grid scan: nonnegativity and the reported sup norm
  const int G = d <= 2 ? 65 : 17;
  double smax = 0.0, smin = 0.0;
  for (const auto& p : pieces_) {
    std::vector<int> idx(static_cast<std::size_t>(d), 0);
    std::vector<double> x(static_cast<std::size_t>(d));
    while (true) {
      for (int l = 0; l < d; ++l) {
        const double a = p.lo[static_cast<std::size_t>(l)], b = p.hi[static_cast<std::size_t>(l)];
        x[static_cast<std::size_t>(l)] = a + (b - a) * idx[static_cast<std::size_t>(l)] / (G - 1);
      }
      const double v = p(x);
      smax = std::max(smax, v);
      smin = std::min(smin, v);
      int l = d - 1;
      for (; l >= 0; --l) {
        if (++idx[static_cast<std::size_t>(l)] < G) break;
        idx[static_cast<std::size_t>(l)] = 0;
      }
      if (l < 0) break;
    }
  }
  if (smin < -1e-9) throw std::invalid_argument("density is negative on its support");
  sup_norm_ = smax;

  // rigorous rejection envelope from the coefficient bound
  double env = 0.0;
  for (const auto& p : pieces_) {
    const auto ks = lambda_indices(p.degrees);
    double bound = 0.0;
    for (std::size_t c = 0; c < ks.size(); ++c)
      bound += std::abs(p.coeffs[c]) *
               std::sqrt(static_cast<double>(pi_weight(ks[c])) / p.volume());
    env = std::max(env, bound);
  }
  envelope_ = env;
}

TestDensity TestDensity::uniform(int d) {
  DensityPiece p{std::vector<double>(static_cast<std::size_t>(d), 0.0),
                 std::vector<double>(static_cast<std::size_t>(d), 1.0),
                 DegreeVector(static_cast<std::size_t>(d), 0),
                 {1.0}};
  return TestDensity(Kind::Uniform, "uniform", {std::move(p)});
}

TestDensity TestDensity::from_piecewise(const PiecewisePoly& poly, Kind kind, std::string name) {
  std::vector<DensityPiece> pieces;
  for (const auto& lp : poly.leaves()) {
    DensityPiece p{std::vector<double>(static_cast<std::size_t>(lp.rect.dim())),
                   std::vector<double>(static_cast<std::size_t>(lp.rect.dim())),
                   lp.degrees, lp.coeffs};
    for (int l = 0; l < lp.rect.dim(); ++l) {
      p.lo[static_cast<std::size_t>(l)] = lp.rect.lower(l);
      p.hi[static_cast<std::size_t>(l)] = lp.rect.upper(l);
    }
    pieces.push_back(std::move(p));
  }
  TestDensity out(kind, std::move(name), std::move(pieces));
  out.poly_ = std::make_shared<PiecewisePoly>(poly);
  return out;
}

TestDensity TestDensity::from_pieces(Kind kind, std::string name,
                                     std::vector<DensityPiece> pieces) {
  return TestDensity(kind, std::move(name), std::move(pieces));
}

TestDensity TestDensity::product(const std::vector<TestDensity>& factors, std::string name) {
  if (factors.empty()) throw std::invalid_argument("no factors");
  for (const auto& f : factors)
    if (f.dim() != 1) throw std::invalid_argument("factors must be univariate");
  const int d = static_cast<int>(factors.size());
  std::vector<DensityPiece> pieces;
  std::vector<std::size_t> idx(static_cast<std::size_t>(d), 0);
  while (true) {
    DensityPiece p{std::vector<double>(static_cast<std::size_t>(d)),
                   std::vector<double>(static_cast<std::size_t>(d)),
                   DegreeVector(static_cast<std::size_t>(d)), {}};
    std::size_t csize = 1;
    for (int l = 0; l < d; ++l) {
      const auto& f = factors[static_cast<std::size_t>(l)].pieces()[idx[static_cast<std::size_t>(l)]];
      p.lo[static_cast<std::size_t>(l)] = f.lo[0];
      p.hi[static_cast<std::size_t>(l)] = f.hi[0];
      p.degrees[static_cast<std::size_t>(l)] = f.degrees[0];
      csize *= f.coeffs.size();
    }
    p.coeffs.assign(csize, 0.0);
    // outer product of the factor coefficient vectors
    MultiIndex k(static_cast<std::size_t>(d), 0);
    std::size_t flat = 0;
    while (true) {
      double c = 1.0;
      for (int l = 0; l < d; ++l)
        c *= factors[static_cast<std::size_t>(l)]
                 .pieces()[idx[static_cast<std::size_t>(l)]]
                 .coeffs[static_cast<std::size_t>(k[l])];
      p.coeffs[flat] = c;
      ++flat;
      int l = d - 1;
      for (; l >= 0; --l) {
        if (++k[l] <= p.degrees[l]) break;
        k[l] = 0;
      }
      if (l < 0) break;
    }
    pieces.push_back(std::move(p));
    int l = d - 1;
    for (; l >= 0; --l) {
      if (++idx[static_cast<std::size_t>(l)] <
          factors[static_cast<std::size_t>(l)].pieces().size())
        break;
      idx[static_cast<std::size_t>(l)] = 0;
    }
    if (l < 0) break;
  }
  TestDensity out(Kind::ProductSmooth, std::move(name), std::move(pieces));
  out.factors_ = factors;
  return out;
}

double TestDensity::operator()(std::span<const double> x) const {
  for (const auto& p : pieces_)
    if (p.contains(x)) return p(x);
  return 0.0;
}

double TestDensity::integral() const {
  double s = 0.0;
  for (const auto& p : pieces_) s += p.coeffs[0] * std::sqrt(p.volume());
  return s;
}

double TestDensity::l2_norm_sq() const {
  double s = 0.0;
  for (const auto& p : pieces_)
    for (double c : p.coeffs) s += c * c;
  return s;
}

double TestDensity::marginal_cdf(int axis, double x) const {
  if (axis < 0 || axis >= dim()) throw std::invalid_argument("axis out of range");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  double acc = 0.0;
  const int d = dim();
  for (const auto& p : pieces_) {
    const double a = p.lo[static_cast<std::size_t>(axis)], b = p.hi[static_cast<std::size_t>(axis)];
    if (x >= b) {
      acc += p.coeffs[0] * std::sqrt(p.volume());
      continue;
    }
    if (x <= a) continue;
    // partial mass: only indices constant along the other axes contribute
    double other_len = 1.0;
    std::vector<std::size_t> stride(static_cast<std::size_t>(d), 1);
    for (int l = d - 2; l >= 0; --l)
      stride[static_cast<std::size_t>(l)] =
          stride[static_cast<std::size_t>(l + 1)] *
          (static_cast<std::size_t>(p.degrees[static_cast<std::size_t>(l + 1)]) + 1);
    for (int l = 0; l < d; ++l)
      if (l != axis)
        other_len *= p.hi[static_cast<std::size_t>(l)] - p.lo[static_cast<std::size_t>(l)];
    const double t = (2.0 * x - a - b) / (b - a);
    const double len = b - a;
    for (int j = 0; j <= p.degrees[static_cast<std::size_t>(axis)]; ++j) {
      const double c = p.coeffs[static_cast<std::size_t>(j) * stride[static_cast<std::size_t>(axis)]];
      if (c == 0.0) continue;
      // int_{-1}^{t} Q_j du
      double anti;
      if (j == 0)
        anti = t + 1.0;
      else
        anti = (legendre_eval(j + 1, t) - legendre_eval(j - 1, t)) / (2.0 * j + 1.0);
      const double norm = std::sqrt((2.0 * j + 1.0) / p.volume());
      acc += c * norm * other_len * (len / 2.0) * anti;
    }
  }
  return acc;
}

Target TestDensity::target() const {
  if (poly_) return Target(*poly_);
  std::vector<DensityPiece> pieces = pieces_;
  return Target([pieces](std::span<const double> x) {
    for (const auto& p : pieces)
      if (p.contains(x)) return p(x);
    return 0.0;
  });
}

// ---------------------------------------------------------------------------

namespace {

// mass of one univariate piece left of x (0 or full mass outside)
double piece_mass_below(const DensityPiece& p, double x) {
  const double a = p.lo[0], b = p.hi[0];
  if (x <= a) return 0.0;
  if (x >= b) return p.coeffs[0] * std::sqrt(p.volume());
  const double t = (2.0 * x - a - b) / (b - a);
  double acc = 0.0;
  for (int j = 0; j <= p.degrees[0]; ++j) {
    const double c = p.coeffs[static_cast<std::size_t>(j)];
    if (c == 0.0) continue;
    const double anti = j == 0 ? t + 1.0
                               : (legendre_eval(j + 1, t) - legendre_eval(j - 1, t)) /
                                     (2.0 * j + 1.0);
    acc += c * std::sqrt((2.0 * j + 1.0) / p.volume()) * (b - a) / 2.0 * anti;
  }
  return acc;
}

// cumulative table over the sorted pieces of a univariate density; draws
// locate their piece by mass and bisect only inside it
struct InverseSampler {
  std::vector<const DensityPiece*> pieces;
  std::vector<double> cum;  // cumulative mass before each piece

  explicit InverseSampler(const TestDensity& density) {
    for (const auto& p : density.pieces()) pieces.push_back(&p);
    std::sort(pieces.begin(), pieces.end(),
              [](const DensityPiece* a, const DensityPiece* b) { return a->lo[0] < b->lo[0]; });
    cum.resize(pieces.size() + 1, 0.0);
    for (std::size_t i = 0; i < pieces.size(); ++i)
      cum[i + 1] = cum[i] + pieces[i]->coeffs[0] * std::sqrt(pieces[i]->volume());
  }

  double draw(double u) const {
    const double target = u * cum.back();
    const auto it = std::upper_bound(cum.begin(), cum.end(), target);
    std::size_t idx = it == cum.begin() ? 0 : static_cast<std::size_t>(it - cum.begin()) - 1;
    idx = std::min(idx, pieces.size() - 1);
    const DensityPiece& p = *pieces[idx];
    const double local = target - cum[idx];
    double lo = p.lo[0], hi = p.hi[0];
    for (int iter = 0; iter < 60; ++iter) {
      const double mid = 0.5 * (lo + hi);
      if (piece_mass_below(p, mid) < local)
        lo = mid;
      else
        hi = mid;
    }
    return std::clamp(0.5 * (lo + hi), 0.0, 1.0);
  }
};

}  // namespace

Sample sample_density(const TestDensity& density, std::size_t n, std::uint64_t seed) {
  if (n < 4) throw std::invalid_argument("need at least 4 observations");
  const int d = density.dim();
  CounterRng rng(mix64(seed ^ 0xD1CEF00Dull));
  std::vector<double> flat;
  flat.reserve(n * static_cast<std::size_t>(d));

  const bool invertible = d == 1 || density.is_product();
  if (invertible) {
    std::vector<InverseSampler> samplers;
    if (density.is_product()) {
      for (const auto& f : density.factors_) samplers.emplace_back(f);
    } else {
      samplers.emplace_back(density);
    }
    for (std::size_t i = 0; i < n; ++i)
      for (int l = 0; l < d; ++l) {
        const auto& s = samplers[static_cast<std::size_t>(density.is_product() ? l : 0)];
        flat.push_back(s.draw(rng.next_unit()));
      }
  } else {
    const double envelope = density.envelope();
    std::vector<double> x(static_cast<std::size_t>(d));
    std::size_t accepted = 0;
    while (accepted < n) {
      for (int l = 0; l < d; ++l) x[static_cast<std::size_t>(l)] = rng.next_unit();
      const double u = rng.next_unit();
      const double s = density(x);
      if (s > envelope * (1.0 + 1e-9))
        throw std::runtime_error("density exceeds its declared envelope");
      if (u * envelope <= s) {
        flat.insert(flat.end(), x.begin(), x.end());
        ++accepted;
      }
    }
  }
  return Sample(d, std::move(flat));
}

// ---------------------------------------------------------------------------

namespace {

struct Box {
  std::vector<double> lo, hi;
  bool empty = true;
};

Box intersect_box(const DensityPiece& p, const DyadicRectangle& K) {
  const int d = p.dim();
  Box b{std::vector<double>(static_cast<std::size_t>(d)),
        std::vector<double>(static_cast<std::size_t>(d)), false};
  for (int l = 0; l < d; ++l) {
    b.lo[static_cast<std::size_t>(l)] = std::max(p.lo[static_cast<std::size_t>(l)], K.lower(l));
    b.hi[static_cast<std::size_t>(l)] = std::min(p.hi[static_cast<std::size_t>(l)], K.upper(l));
    if (!(b.lo[static_cast<std::size_t>(l)] < b.hi[static_cast<std::size_t>(l)])) {
      b.empty = true;
      return b;
    }
  }
  return b;
}

}  // namespace

std::pair<double, double> phi_moments(const TestDensity& density, const DyadicRectangle& K,
                                      const MultiIndex& k) {
  const int d = K.dim();
  double m1 = 0.0, m2 = 0.0;
  for (const auto& p : density.pieces()) {
    const Box b = intersect_box(p, K);
    if (b.empty) continue;
    std::vector<int> orders(static_cast<std::size_t>(d));
    for (int l = 0; l < d; ++l)
      orders[static_cast<std::size_t>(l)] =
          2 * k[static_cast<std::size_t>(l)] + p.degrees[static_cast<std::size_t>(l)] + 2;
    gauss_box(b.lo, b.hi, orders, [&](std::span<const double> x, double w) {
      double phi = std::sqrt(static_cast<double>(pi_weight(k)) / K.measure());
      for (int l = 0; l < d; ++l) {
        const double t =
            std::clamp((x[l] - K.center(l)) * 2.0 / K.side(l), -1.0, 1.0);
        phi *= legendre_eval(k[static_cast<std::size_t>(l)], t);
      }
      const double sv = p(x);
      m1 += w * sv * phi;
      m2 += w * sv * phi * phi;
    });
  }
  return {m1, m2};
}

double exact_risk(const PiecewisePoly& estimate, const TestDensity& truth) {
  const int d = estimate.dim();
  if (truth.dim() != d) throw std::invalid_argument("dimension mismatch");
  double acc = 0.0;
  for (const auto& lp : estimate.leaves()) {
    for (const auto& p : truth.pieces()) {
      const Box b = intersect_box(p, lp.rect);
      if (b.empty) continue;
      std::vector<int> orders(static_cast<std::size_t>(d));
      for (int l = 0; l < d; ++l)
        orders[static_cast<std::size_t>(l)] =
            std::max(p.degrees[static_cast<std::size_t>(l)], lp.degrees[static_cast<std::size_t>(l)]) + 1;
      gauss_box(b.lo, b.hi, orders, [&](std::span<const double> x, double w) {
        const double diff = p(x) - eval_in_cell_basis(lp.rect, lp.degrees, lp.coeffs, x);
        acc += w * diff * diff;
      });
    }
  }
  return acc;
}

double exact_risk(const FittedModel& model, const TestDensity& truth) {
  return exact_risk(model.density(), truth);
}

// ---------------------------------------------------------------------------

OracleResult oracle_risk(const TestDensity& truth, std::size_t n, const PenaltyConfig& family) {
  const int d = truth.dim();
  const double nn = static_cast<double>(n);
  const auto partitions = enumerate_partitions(family.j_star, d);
  const auto ks = lambda_indices(family.r_star);

  // per-rectangle: minimal bias + variance over the degree box, memoized
  std::map<std::string, std::pair<double, DegreeVector>> memo;
  auto leaf_best = [&](const DyadicRectangle& K) {
    std::string key;
    for (int l = 0; l < d; ++l) {
      key += std::to_string(K.scale(l));
      key += ':';
      key += std::to_string(K.pos(l));
      key += ',';
    }
    auto it = memo.find(key);
    if (it != memo.end()) return it->second;

    // squared L2 mass of the truth on K
    double mass2 = 0.0;
    for (const auto& p : truth.pieces()) {
      const Box b = intersect_box(p, K);
      if (b.empty) continue;
      std::vector<int> orders(static_cast<std::size_t>(d));
      for (int l = 0; l < d; ++l)
        orders[static_cast<std::size_t>(l)] = p.degrees[static_cast<std::size_t>(l)] + 1;
      gauss_box(b.lo, b.hi, orders, [&](std::span<const double> x, double w) {
        const double sv = p(x);
        mass2 += w * sv * sv;
      });
    }
    // per-degree moments
    std::vector<double> c1(ks.size()), c2(ks.size());
    for (std::size_t c = 0; c < ks.size(); ++c) {
      const auto [m1, m2] = phi_moments(truth, K, ks[c]);
      c1[c] = m1;
      c2[c] = m2;
    }
    double best = 0.0;
    DegreeVector best_r;
    bool first = true;
    MultiIndex r(static_cast<std::size_t>(d), 0);
    while (true) {
      double risk = mass2;
      for (std::size_t c = 0; c < ks.size(); ++c) {
        bool inside = true;
        for (int l = 0; l < d; ++l)
          if (ks[c][static_cast<std::size_t>(l)] > r[static_cast<std::size_t>(l)]) {
            inside = false;
            break;
          }
        if (!inside) continue;
        risk += -c1[c] * c1[c] + (c2[c] - c1[c] * c1[c]) / nn;
      }
      if (first || risk < best) {
        best = risk;
        best_r = r;
        first = false;
      }
      int l = d - 1;
      for (; l >= 0; --l) {
        if (++r[l] <= family.r_star[static_cast<std::size_t>(l)]) break;
        r[l] = 0;
      }
      if (l < 0) break;
    }
    auto out = std::make_pair(best, best_r);
    memo.emplace(std::move(key), out);
    return out;
  };

  bool first = true;
  OracleResult result;
  for (const auto& tree : partitions) {
    const auto rects = tree.leaves(d);
    double risk = 0.0;
    std::vector<DegreeVector> degs;
    degs.reserve(rects.size());
    for (const auto& K : rects) {
      const auto [r, rdeg] = leaf_best(K);
      risk += r;
      degs.push_back(rdeg);
    }
    if (first || risk < result.risk) {
      result.tree = tree;
      result.degrees = std::move(degs);
      result.risk = risk;
      first = false;
    }
  }
  result.models_searched = partitions.size();
  return result;
}

// ---------------------------------------------------------------------------

void parallel_for(std::size_t count, int threads,
                  const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  const int nw = std::min<int>(threads, static_cast<int>(count));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(nw));
  for (int w = 0; w < nw; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
    });
  for (auto& t : pool) t.join();
}

RiskReport risk_study(const TestDensity& truth, std::size_t n, int replicates,
                      const FitOptions& options, std::uint64_t seed, int threads) {
  RiskReport report;
  report.n = n;
  report.seed = seed;
  report.risks.assign(static_cast<std::size_t>(replicates), 0.0);
  parallel_for(static_cast<std::size_t>(replicates), threads, [&](std::size_t i) {
    const std::uint64_t rep_seed = CounterRng::for_replicate(seed, i).next_u64();
    const Sample sample = sample_density(truth, n, rep_seed);
    const FittedModel model = fit(sample, options);
    report.risks[i] = exact_risk(model, truth);
  });
  double mean = 0.0;
  for (double r : report.risks) mean += r;
  mean /= static_cast<double>(replicates);
  double var = 0.0;
  for (double r : report.risks) var += (r - mean) * (r - mean);
  var /= std::max(1.0, static_cast<double>(replicates - 1));
  report.mean = mean;
  report.stderr_mean = std::sqrt(var / static_cast<double>(replicates));
  return report;
}

RateStudy rate_study(const TestDensity& truth, const AnisoFamily& declared_sigma,
                     std::span<const std::size_t> n_schedule, int replicates,
                     const FitOptions& options, std::uint64_t seed, int threads) {
  RateStudy study;
  study.seed = seed;
  const double H = declared_sigma.harmonic_mean();
  const int d = truth.dim();
  study.target_exponent = -2.0 * H / (d + 2.0 * H);
  for (std::size_t ni = 0; ni < n_schedule.size(); ++ni) {
    const RiskReport rep =
        risk_study(truth, n_schedule[ni], replicates, options, seed + ni, threads);
    study.rows.push_back({n_schedule[ni], rep.mean, rep.stderr_mean});
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int m = 0;
  for (const auto& row : study.rows) {
    if (row.mean <= 0.0) continue;
    const double x = std::log2(static_cast<double>(row.n));
    const double y = std::log2(row.mean);
    sx += x; sy += y; sxx += x * x; sxy += x * y;
    ++m;
  }
  const double denom = m * sxx - sx * sx;
  study.slope = (m >= 2 && std::abs(denom) > 1e-12) ? (m * sxy - sx * sy) / denom : 0.0;
  return study;
}

CalibrationResult calibrate(const std::vector<std::array<double, 5>>& grid,
                            const std::vector<TestDensity>& suite, std::size_t n,
                            int replicates, const PenaltyConfig& family,
                            std::uint64_t seed, int threads) {
  if (grid.empty()) throw std::invalid_argument("empty kappa grid");
  if (suite.empty()) throw std::invalid_argument("empty density suite");
  CalibrationResult result;
  result.seed = seed;

  std::vector<double> oracles(suite.size());
  for (std::size_t t = 0; t < suite.size(); ++t) {
    oracles[t] = oracle_risk(suite[t], n, family).risk;
    if (!(oracles[t] > 0.0))
      throw std::invalid_argument("suite density '" + suite[t].name() +
                                  "' has zero oracle risk");
  }

  for (const auto& kappa : grid) {
    double ratio_sum = 0.0;
    for (std::size_t t = 0; t < suite.size(); ++t) {
      FitOptions opt;
      opt.kappa = kappa;
      opt.r_star = family.r_star;
      opt.j_star = family.j_star;
      const RiskReport rep = risk_study(suite[t], n, replicates, opt, seed + t, threads);
      ratio_sum += rep.mean / oracles[t];
    }
    result.rows.push_back({kappa, ratio_sum / static_cast<double>(suite.size())});
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < result.rows.size(); ++i)
    if (result.rows[i].mean_ratio < result.rows[best].mean_ratio) best = i;
  result.best = result.rows[best].kappa;
  return result;
}

// ---------------------------------------------------------------------------

namespace {

TestDensity make_step_half() {
  // 2 on [0,1/2], 0 on (1/2,1]
  auto [lo, hi] = DyadicRectangle(1).split(0);
  PartitionTree tree = PartitionTree::node(0, PartitionTree::leaf(), PartitionTree::leaf());
  std::vector<LeafPoly> leaves;
  leaves.push_back(LeafPoly{lo, {0}, {2.0 * std::sqrt(0.5)}});
  leaves.push_back(LeafPoly{hi, {0}, {0.0}});
  return TestDensity::from_piecewise(PiecewisePoly(tree, std::move(leaves)),
                                     TestDensity::Kind::PiecewisePolynomial, "step-half");
}

TestDensity make_step() {
  // jump at 1/2: 1.5 on the left, 0.5 on the right
  auto [lo, hi] = DyadicRectangle(1).split(0);
  PartitionTree tree = PartitionTree::node(0, PartitionTree::leaf(), PartitionTree::leaf());
  std::vector<LeafPoly> leaves;
  leaves.push_back(LeafPoly{lo, {0}, {1.5 * std::sqrt(0.5)}});
  leaves.push_back(LeafPoly{hi, {0}, {0.5 * std::sqrt(0.5)}});
  return TestDensity::from_piecewise(PiecewisePoly(tree, std::move(leaves)),
                                     TestDensity::Kind::PiecewisePolynomial, "step");
}

TestDensity make_jump_linear() {
  // piecewise linear with a jump at 1/3; smoothness 1 when measured in L1
  std::vector<DensityPiece> pieces;
  pieces.push_back(make_piece({0.0}, {1.0 / 3.0}, {1},
                              [](std::span<const double>) { return 0.5; }));
  pieces.push_back(make_piece({1.0 / 3.0}, {1.0}, {1}, [](std::span<const double> x) {
    return 1.25 + 0.6 * (x[0] - 2.0 / 3.0);
  }));
  return TestDensity::from_pieces(TestDensity::Kind::PiecewisePolynomial,
                                  "jump-linear", std::move(pieces));
}

TestDensity make_tent() {
  // continuous tent with peak 2 at 1/3
  std::vector<DensityPiece> pieces;
  pieces.push_back(make_piece({0.0}, {1.0 / 3.0}, {1},
                              [](std::span<const double> x) { return 6.0 * x[0]; }));
  pieces.push_back(make_piece({1.0 / 3.0}, {1.0}, {1}, [](std::span<const double> x) {
    return 3.0 * (1.0 - x[0]);
  }));
  return TestDensity::from_pieces(TestDensity::Kind::PiecewisePolynomial, "tent",
                                  std::move(pieces));
}

TestDensity make_smooth_product(int d) {
  std::vector<TestDensity> factors;
  for (int l = 0; l < d; ++l) {
    std::vector<DensityPiece> pieces;
    pieces.push_back(make_piece({0.0}, {1.0}, {2}, [](std::span<const double> x) {
      return 0.6 + 2.4 * x[0] * (1.0 - x[0]);
    }));
    factors.push_back(TestDensity::from_pieces(TestDensity::Kind::ProductSmooth,
                                               "smooth-1d", std::move(pieces)));
  }
  return TestDensity::product(factors, "smooth-product");
}

TestDensity make_spike(int d) {
  // flat background plus a localized polynomial bump on one dyadic cell
  const int scale = d == 1 ? 3 : 2;
  std::vector<int> scales(static_cast<std::size_t>(d), scale);
  std::vector<std::uint64_t> pos(static_cast<std::size_t>(d),
                                 std::uint64_t{1} << (scale - 2));  // cell starting at 1/4
  const DyadicRectangle bump_cell(scales, pos);
  PartitionTree tree = isolate_cell(DyadicRectangle(d), bump_cell);
  const auto rects = tree.leaves(d);

  const double bump_mass = 0.25;
  const double base = 1.0 - bump_mass;
  const double amp = bump_mass / (bump_cell.measure() * std::pow(8.0 / 15.0, d));

  std::vector<LeafPoly> leaves;
  for (const auto& rect : rects) {
    if (rect == bump_cell) {
      const Target bump([&](std::span<const double> x) {
        double v = amp;
        for (int l = 0; l < d; ++l) {
          const double t = (x[l] - bump_cell.center(l)) * 2.0 / bump_cell.side(l);
          const double s = 1.0 - t * t;
          v *= s * s;
        }
        return v + base;
      });
      DegreeVector deg(static_cast<std::size_t>(d), 4);
      leaves.push_back(LeafPoly{rect, deg, project(bump, rect, deg, 6)});
    } else {
      leaves.push_back(LeafPoly{rect, DegreeVector(static_cast<std::size_t>(d), 0),
                                {base * std::sqrt(rect.measure())}});
    }
  }
  return TestDensity::from_piecewise(PiecewisePoly(tree, std::move(leaves)),
                                     TestDensity::Kind::Spike, "spike");
}

double triangle_wave(double t) {
  const double f = t - std::floor(t);
  return 4.0 * std::abs(f - 0.5) - 1.0;
}

TestDensity make_sawtooth() {
  // piecewise-linear cascade with ternary kinks and geometric amplitudes;
  // its linear approximation errors on dyadic grids decay like 2^-j, so it
  // fills out the smoothness-one class instead of a single localized feature
  const int levels = 5;
  const double c = 0.9;
  auto value = [=](double x) {
    double v = 1.0, pow3 = 1.0;
    for (int k = 1; k <= levels; ++k) {
      pow3 *= 3.0;
      v += c / pow3 * triangle_wave(pow3 * x);
    }
    return v;
  };
  long cells = 2;
  for (int k = 1; k <= levels; ++k) cells *= 3;  // kinks at i / (2 * 3^levels)
  std::vector<DensityPiece> pieces;
  for (long i = 0; i < cells; ++i) {
    const double lo = static_cast<double>(i) / static_cast<double>(cells);
    const double hi = static_cast<double>(i + 1) / static_cast<double>(cells);
    pieces.push_back(make_piece({lo}, {hi}, {1},
                                [&](std::span<const double> x) { return value(x[0]); }));
  }
  return TestDensity::from_pieces(TestDensity::Kind::PiecewisePolynomial, "sawtooth",
                                  std::move(pieces));
}

TestDensity make_grid2() {
  // 2x2 histogram, heights 0.4, 1.2, 1.6, 0.8
  const DyadicRectangle unit(2);
  auto [west, east] = unit.split(0);
  auto [sw, nw] = west.split(1);
  auto [se, ne] = east.split(1);
  PartitionTree tree = PartitionTree::node(
      0, PartitionTree::node(1, PartitionTree::leaf(), PartitionTree::leaf()),
      PartitionTree::node(1, PartitionTree::leaf(), PartitionTree::leaf()));
  std::vector<LeafPoly> leaves;
  const double rt = std::sqrt(0.25);
  leaves.push_back(LeafPoly{sw, {0, 0}, {0.4 * rt}});
  leaves.push_back(LeafPoly{nw, {0, 0}, {1.2 * rt}});
  leaves.push_back(LeafPoly{se, {0, 0}, {1.6 * rt}});
  leaves.push_back(LeafPoly{ne, {0, 0}, {0.8 * rt}});
  return TestDensity::from_piecewise(PiecewisePoly(tree, std::move(leaves)),
                                     TestDensity::Kind::PiecewisePolynomial, "grid2");
}

}  // namespace

TestDensity TestDensity::builtin(const std::string& name, int d) {
  if (name == "uniform") return uniform(d);
  if (name == "step-half") return make_step_half();
  if (name == "step") return make_step();
  if (name == "jump-linear") return make_jump_linear();
  if (name == "tent") return make_tent();
  if (name == "smooth-product") return make_smooth_product(d);
  if (name == "spike") return make_spike(d);
  if (name == "sawtooth") return make_sawtooth();
  if (name == "grid2") return make_grid2();
  throw std::invalid_argument("unknown density '" + name + "'");
}

std::vector<std::string> TestDensity::builtin_names() {
  return {"uniform", "step-half", "step", "jump-linear", "tent",
          "smooth-product", "spike", "sawtooth", "grid2"};
}

}  // namespace dpp
