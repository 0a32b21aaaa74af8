#include "dpp/estimate.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace dpp {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

Sample::Sample(int d, std::vector<double> flat) : d_(d), flat_(std::move(flat)) {
  if (d_ < 1) throw std::invalid_argument("dimension must be positive");
  if (flat_.size() % static_cast<std::size_t>(d_) != 0)
    throw std::invalid_argument("flat data length not a multiple of d");
  if (size() < 4) throw std::invalid_argument("need at least 4 observations");
  for (double v : flat_)
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument("sample coordinate outside [0,1]");
}

Sample read_sample_csv(const std::string& path, int d) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<double> flat;
  std::string line;
  std::size_t row = 0;
  int cols = d;
  bool saw_data = false;
  while (std::getline(in, line)) {
    ++row;
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> vals;
    std::size_t start = 0;
    bool ok = true;
    while (start <= line.size()) {
      std::size_t comma = line.find(',', start);
      std::string cell = line.substr(start, comma == std::string::npos ? comma : comma - start);
      const char* b = cell.c_str();
      char* e = nullptr;
      double v = std::strtod(b, &e);
      while (e && *e == ' ') ++e;
      if (e == b || (e && *e != '\0')) {
        ok = false;
        break;
      }
      vals.push_back(v);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (!ok) {
      if (!saw_data) continue;  // header row
      throw std::invalid_argument("malformed CSV value at row " + std::to_string(row) +
                                  " of '" + path + "'");
    }
    if (cols <= 0) cols = static_cast<int>(vals.size());
    if (static_cast<int>(vals.size()) != cols)
      throw std::invalid_argument("row " + std::to_string(row) + " has " +
                                  std::to_string(vals.size()) + " columns, expected " +
                                  std::to_string(cols));
    for (double v : vals)
      if (!(v >= 0.0 && v <= 1.0))
        throw std::invalid_argument("coordinate outside [0,1] at row " + std::to_string(row));
    flat.insert(flat.end(), vals.begin(), vals.end());
    saw_data = true;
  }
  if (!saw_data) throw std::invalid_argument("no data rows in '" + path + "'");
  return Sample(cols, std::move(flat));
}

void write_sample_csv(const std::string& path, const Sample& sample) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  for (int l = 0; l < sample.dim(); ++l) out << (l ? ",x" : "x") << l + 1;
  out << "\n";
  char buf[64];
  for (std::size_t i = 0; i < sample.size(); ++i) {
    auto p = sample.point(i);
    for (int l = 0; l < sample.dim(); ++l) {
      std::snprintf(buf, sizeof buf, "%.17g", p[static_cast<std::size_t>(l)]);
      out << (l ? "," : "") << buf;
    }
    out << "\n";
  }
}

int compute_Jstar(std::size_t n, const DegreeVector& r_star, int d) {
  if (n < 4) throw std::invalid_argument("need at least 4 observations");
  const double lam = static_cast<double>(lambda_size(r_star));
  const double ratio = static_cast<double>(n) / std::log(static_cast<double>(n) * lam);
  int J = 0;
  while (J < kMaxScale / d && std::ldexp(1.0, (J + 1) * d) <= ratio) ++J;
  if (std::ldexp(1.0, J * d) > ratio) return 0;  // even J = 0 fails; callers warn
  return J;
}

double PenaltyConfig::weight_L() const {
  return std::log(8.0 * r_star.size() * static_cast<double>(lambda_size(r_star)));
}

bool PenaltyConfig::hypotheses_hold(std::size_t n) const {
  const int d = static_cast<int>(r_star.size());
  const double log_lam = std::log(static_cast<double>(lambda_size(r_star)));
  const double nn = static_cast<double>(n);
  const double bound = std::max(nn - std::log(nn), d * std::log(nn));
  if (log_lam > bound) return false;
  const double ratio = nn / std::log(nn * static_cast<double>(lambda_size(r_star)));
  return std::ldexp(1.0, j_star * d) <= ratio;
}

// ---------------------------------------------------------------------------

CellStats::CellStats(const Sample& sample, const DegreeVector& max_power, int j_star)
    : d_(sample.dim()), j_star_(j_star), n_(sample.size()), max_power_(max_power) {
  if (static_cast<int>(max_power_.size()) != d_)
    throw std::invalid_argument("max_power dimension mismatch");
  if (j_star_ < 0 || j_star_ > kMaxScale) throw std::invalid_argument("bad j_star");
  alpha_count_ = 1;
  for (int m : max_power_) {
    if (m < 0) throw std::invalid_argument("negative power");
    alpha_count_ *= static_cast<std::size_t>(m) + 1;
  }

  const int J = j_star_;
  const int nscales = J + 1;
  std::size_t nvec = 1;
  for (int l = 0; l < d_; ++l) nvec *= static_cast<std::size_t>(nscales);
  blocks_.resize(nvec);

  // alpha decode table: per flat index, the per-axis exponents
  std::vector<int> adec(alpha_count_ * static_cast<std::size_t>(d_));
  {
    MultiIndex a(static_cast<std::size_t>(d_), 0);
    for (std::size_t f = 0; f < alpha_count_; ++f) {
      for (int l = 0; l < d_; ++l) adec[f * d_ + l] = a[static_cast<std::size_t>(l)];
      int l = d_ - 1;
      for (; l >= 0; --l) {
        if (++a[l] <= max_power_[l]) break;
        a[l] = 0;
      }
    }
  }

  auto alloc = [&](const std::vector<int>& s) {
    std::size_t cells = 1;
    for (int l = 0; l < d_; ++l) cells <<= s[static_cast<std::size_t>(l)];
    blocks_[static_cast<std::size_t>(scale_ordinal(s))].assign(cells * alpha_count_, 0.0);
  };

  // finest level: one pass over the points
  std::vector<int> fine(static_cast<std::size_t>(d_), J);
  alloc(fine);
  {
    auto& B = blocks_[static_cast<std::size_t>(scale_ordinal(fine))];
    std::vector<std::vector<double>> pw(static_cast<std::size_t>(d_));
    for (int l = 0; l < d_; ++l) pw[l].resize(static_cast<std::size_t>(max_power_[l]) + 1);
    for (std::size_t i = 0; i < n_; ++i) {
      auto x = sample.point(i);
      std::size_t idx = 0;
      for (int l = 0; l < d_; ++l) {
        const double scaled = std::ldexp(x[static_cast<std::size_t>(l)], J);
        std::uint64_t p = x[static_cast<std::size_t>(l)] <= 0.0
                              ? 0
                              : static_cast<std::uint64_t>(std::ceil(scaled)) - 1;
        idx = (idx << J) + p;
        const double c = std::ldexp(static_cast<double>(2 * p + 1), -J - 1);
        const double t = x[static_cast<std::size_t>(l)] - c;
        double acc = 1.0;
        for (int a = 0; a <= max_power_[l]; ++a) {
          pw[l][static_cast<std::size_t>(a)] = acc;
          acc *= t;
        }
      }
      double* cell = B.data() + idx * alpha_count_;
      for (std::size_t f = 0; f < alpha_count_; ++f) {
        double prod = 1.0;
        for (int l = 0; l < d_; ++l)
          prod *= pw[l][static_cast<std::size_t>(adec[f * d_ + l])];
        cell[f] += prod;
      }
    }
  }

  // binomial table for the recentering expansion
  int max_mp = 0;
  for (int m : max_power_) max_mp = std::max(max_mp, m);
  std::vector<std::vector<double>> binom(static_cast<std::size_t>(max_mp) + 1);
  for (int i = 0; i <= max_mp; ++i) {
    binom[static_cast<std::size_t>(i)].assign(static_cast<std::size_t>(i) + 1, 1.0);
    for (int j = 1; j < i; ++j)
      binom[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          binom[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j - 1)] +
          binom[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j)];
  }

  // pairwise merges up the scale lattice; scales are visited in descending
  // digit order so the source block (one level finer on the merge axis) is
  // always built before its parent
  std::vector<int> s(static_cast<std::size_t>(d_));
  for (std::size_t ord = 0; ord < nvec; ++ord) {
    std::size_t rem = ord;
    for (int l = d_ - 1; l >= 0; --l) {
      s[static_cast<std::size_t>(l)] = J - static_cast<int>(rem % nscales);
      rem /= static_cast<std::size_t>(nscales);
    }
    int axis = -1;
    for (int l = 0; l < d_; ++l)
      if (s[static_cast<std::size_t>(l)] < J) { axis = l; break; }
    if (axis < 0) continue;  // finest block, already built

    alloc(s);
    auto& P = blocks_[static_cast<std::size_t>(scale_ordinal(s))];
    std::vector<int> sc = s;
    sc[static_cast<std::size_t>(axis)]++;
    const auto& C = blocks_[static_cast<std::size_t>(scale_ordinal(sc))];

    // child-block strides
    std::vector<std::size_t> cstride(static_cast<std::size_t>(d_), 1);
    for (int l = d_ - 2; l >= 0; --l)
      cstride[static_cast<std::size_t>(l)] =
          cstride[static_cast<std::size_t>(l + 1)] << sc[static_cast<std::size_t>(l + 1)];

    const double h = std::ldexp(1.0, -s[static_cast<std::size_t>(axis)]);
    const int mpa = max_power_[static_cast<std::size_t>(axis)];
    // factor[side][alpha_a][beta] = binom * (side delta)^(alpha_a - beta)
    std::vector<std::vector<double>> facL(static_cast<std::size_t>(mpa) + 1),
        facR(static_cast<std::size_t>(mpa) + 1);
    for (int a = 0; a <= mpa; ++a) {
      facL[static_cast<std::size_t>(a)].resize(static_cast<std::size_t>(a) + 1);
      facR[static_cast<std::size_t>(a)].resize(static_cast<std::size_t>(a) + 1);
      for (int b = 0; b <= a; ++b) {
        const double base = binom[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] *
                            std::pow(h / 4.0, a - b);
        facL[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] =
            ((a - b) % 2 ? -base : base);
        facR[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] = base;
      }
    }
    std::size_t astride = 1;
    for (int l = axis + 1; l < d_; ++l) astride *= static_cast<std::size_t>(max_power_[l]) + 1;

    std::vector<std::uint64_t> p(static_cast<std::size_t>(d_), 0);
    std::size_t ncells = P.size() / alpha_count_;
    for (std::size_t pidx = 0; pidx < ncells; ++pidx) {
      std::size_t idxL = 0;
      for (int l = 0; l < d_; ++l) {
        const std::uint64_t pl =
            l == axis ? 2 * p[static_cast<std::size_t>(l)] : p[static_cast<std::size_t>(l)];
        idxL += pl * cstride[static_cast<std::size_t>(l)];
      }
      const std::size_t idxR = idxL + cstride[static_cast<std::size_t>(axis)];
      double* dst = P.data() + pidx * alpha_count_;
      const double* srcL = C.data() + idxL * alpha_count_;
      const double* srcR = C.data() + idxR * alpha_count_;
      for (std::size_t f = 0; f < alpha_count_; ++f) {
        const int aa = adec[f * d_ + axis];
        const std::size_t base = f - static_cast<std::size_t>(aa) * astride;
        double acc = 0.0;
        for (int b = 0; b <= aa; ++b) {
          const std::size_t g = base + static_cast<std::size_t>(b) * astride;
          acc += facL[static_cast<std::size_t>(aa)][static_cast<std::size_t>(b)] * srcL[g] +
                 facR[static_cast<std::size_t>(aa)][static_cast<std::size_t>(b)] * srcR[g];
        }
        dst[f] = acc;
      }
      // advance the parent position odometer (last axis fastest)
      int l = d_ - 1;
      for (; l >= 0; --l) {
        if (++p[static_cast<std::size_t>(l)] <
            (std::uint64_t{1} << s[static_cast<std::size_t>(l)]))
          break;
        p[static_cast<std::size_t>(l)] = 0;
      }
    }
  }
}

int CellStats::scale_ordinal(const std::vector<int>& scales) const {
  int ord = 0;
  for (int l = 0; l < d_; ++l) {
    if (scales[static_cast<std::size_t>(l)] < 0 || scales[static_cast<std::size_t>(l)] > j_star_)
      throw std::invalid_argument("scale outside the lattice");
    ord = ord * (j_star_ + 1) + scales[static_cast<std::size_t>(l)];
  }
  return ord;
}

std::span<const double> CellStats::block(int scale_ordinal) const {
  return blocks_[static_cast<std::size_t>(scale_ordinal)];
}

std::size_t CellStats::position_index(const DyadicRectangle& K) const {
  std::size_t idx = 0;
  for (int l = 0; l < d_; ++l) idx = (idx << K.scale(l)) + K.pos(l);
  return idx;
}

std::span<const double> CellStats::cell_sums(const DyadicRectangle& K) const {
  if (K.dim() != d_) throw std::invalid_argument("dimension mismatch");
  const auto& B = blocks_[static_cast<std::size_t>(scale_ordinal(K.scales()))];
  return {B.data() + position_index(K) * alpha_count_, alpha_count_};
}

std::pair<double, double> phi_sums(const CellStats& stats, const DyadicRectangle& K,
                                   const MultiIndex& k) {
  const int d = K.dim();
  if (static_cast<int>(k.size()) != d) throw std::invalid_argument("degree dimension mismatch");
  for (int l = 0; l < d; ++l)
    if (2 * k[static_cast<std::size_t>(l)] > stats.max_power()[static_cast<std::size_t>(l)])
      throw std::invalid_argument("degree exceeds stored power order");
  const auto sums = stats.cell_sums(K);
  const auto& mp = stats.max_power();

  std::vector<std::size_t> astride(static_cast<std::size_t>(d), 1);
  for (int l = d - 2; l >= 0; --l)
    astride[static_cast<std::size_t>(l)] =
        astride[static_cast<std::size_t>(l + 1)] *
        (static_cast<std::size_t>(mp[static_cast<std::size_t>(l + 1)]) + 1);

  // sum over monomial multi-indices of prod coeff * 2^{(j_l+1) i_l} * P_i;
  // the power-of-two factor is folded into P_i to avoid overflow
  auto contract = [&](const std::vector<const std::vector<double>*>& coef) {
    MultiIndex i(static_cast<std::size_t>(d), 0);
    double total = 0.0;
    while (true) {
      double cprod = 1.0;
      int shift = 0;
      std::size_t flat = 0;
      for (int l = 0; l < d; ++l) {
        const int il = i[static_cast<std::size_t>(l)];
        cprod *= (*coef[static_cast<std::size_t>(l)])[static_cast<std::size_t>(il)];
        shift += (K.scale(l) + 1) * il;
        flat += static_cast<std::size_t>(il) * astride[static_cast<std::size_t>(l)];
      }
      total += cprod * std::ldexp(sums[flat], shift);
      int l = d - 1;
      for (; l >= 0; --l) {
        if (++i[l] < static_cast<int>(coef[static_cast<std::size_t>(l)]->size())) break;
        i[l] = 0;
      }
      if (l < 0) break;
    }
    return total;
  };

  std::vector<const std::vector<double>*> c1(static_cast<std::size_t>(d)),
      c2(static_cast<std::size_t>(d));
  for (int l = 0; l < d; ++l) {
    c1[static_cast<std::size_t>(l)] = &legendre_monomial_coeffs(k[static_cast<std::size_t>(l)]);
    c2[static_cast<std::size_t>(l)] =
        &legendre_square_monomial_coeffs(k[static_cast<std::size_t>(l)]);
  }
  const double norm_sq = static_cast<double>(pi_weight(k)) / K.measure();
  const double s1 = std::sqrt(norm_sq) * contract(c1);
  const double s2 = norm_sq * contract(c2);
  return {s1, s2};
}

double sigma_hat(const CellStats& stats, const DyadicRectangle& K, const MultiIndex& k) {
  const auto [s1, s2] = phi_sums(stats, K, k);
  const double n = static_cast<double>(stats.n());
  return (n * s2 - s1 * s1) / (n * (n - 1.0));
}

// ---------------------------------------------------------------------------

DyadicEstimator::DyadicEstimator(const Sample& sample, PenaltyConfig config)
    : n_(sample.size()),
      config_(std::move(config)),
      stats_(sample,
             [&] {
               DegreeVector mp(config_.r_star.size());
               for (std::size_t l = 0; l < mp.size(); ++l) mp[l] = 2 * config_.r_star[l];
               return mp;
             }(),
             config_.j_star) {
  const auto t0 = Clock::now();
  const int d = stats_.dim();
  const int J = config_.j_star;
  const auto ks = lambda_indices(config_.r_star);
  const double n = static_cast<double>(n_);
  const auto& kap = config_.kappa;

  // rectangle ordinal bases, one per scale vector
  {
    std::size_t nvec = 1;
    for (int l = 0; l < d; ++l) nvec *= static_cast<std::size_t>(J) + 1;
    offsets_.assign(nvec + 1, 0);
    for (std::size_t ord = 0; ord < nvec; ++ord) {
      std::size_t rem = ord;
      int total = 0;
      for (int l = d - 1; l >= 0; --l) {
        total += static_cast<int>(rem % (static_cast<std::size_t>(J) + 1));
        rem /= static_cast<std::size_t>(J) + 1;
      }
      offsets_[ord + 1] = offsets_[ord] + (std::size_t{1} << total);
    }
  }

  // model sizes |Lambda(r)| aligned with the flat degree-vector order
  lambda_sizes_.resize(ks.size());
  for (std::size_t f = 0; f < ks.size(); ++f) {
    std::size_t sz = 1;
    for (int v : ks[f]) sz *= static_cast<std::size_t>(v) + 1;
    lambda_sizes_[f] = sz;
  }

  // one sweep over the lattice: per-rectangle per-degree criterion terms and
  // the two variance overestimates
  terms_.assign(total_rects() * ks.size(), 0.0);
  double m1 = 0.0, m2 = 0.0;
  std::vector<std::uint64_t> p(static_cast<std::size_t>(d));
  for_each_scale([&](const std::vector<int>& s) {
    std::fill(p.begin(), p.end(), 0);
    std::size_t cells = 1;
    for (int l = 0; l < d; ++l) cells <<= s[static_cast<std::size_t>(l)];
    for (std::size_t pidx = 0; pidx < cells; ++pidx) {
      const DyadicRectangle K(s, p);
      double m1_cand = 0.0;
      double* trow = terms_.data() + rect_ordinal(K) * ks.size();
      const double inv_meas = 1.0 / K.measure();
      for (std::size_t c = 0; c < ks.size(); ++c) {
        const auto [s1, s2] = phi_sums(stats_, K, ks[c]);
        const double var = (n * s2 - s1 * s1) / (n * (n - 1.0));
        const double mean = s1 / n;
        trow[c] = -mean * mean + kap[0] * var / n +
                  kap[1] * static_cast<double>(pi_weight(ks[c])) / n;
        m1_cand += std::sqrt(static_cast<double>(pi_weight(ks[c])) * inv_meas) * std::abs(s1);
        m2 = std::max(m2, s2 / n);
      }
      m1 = std::max(m1, m1_cand / n);
      int l = d - 1;
      for (; l >= 0; --l) {
        if (++p[static_cast<std::size_t>(l)] <
            (std::uint64_t{1} << s[static_cast<std::size_t>(l)]))
          break;
        p[static_cast<std::size_t>(l)] = 0;
      }
    }
  });
  m1_star_ = m1;
  m2_star_ = m2;
  const double lam = static_cast<double>(lambda_size(config_.r_star));
  leaf_constant_ = config_.weight_L() / n *
                   ((kap[2] * m2_star_ + kap[3] * static_cast<double>(pi_weight(config_.r_star))) * lam +
                    kap[4] * m1_star_);
  seconds_stats_ = seconds_since(t0);
}

std::size_t DyadicEstimator::total_rects() const {
  std::size_t per_axis = (std::size_t{2} << config_.j_star) - 1;  // 2^{J+1} - 1
  std::size_t total = 1;
  for (int l = 0; l < stats_.dim(); ++l) total *= per_axis;
  return total;
}

void DyadicEstimator::for_each_scale(
    const std::function<void(const std::vector<int>&)>& fn) const {
  const int d = stats_.dim();
  const int J = config_.j_star;
  std::vector<int> s(static_cast<std::size_t>(d), 0);
  while (true) {
    fn(s);
    int l = d - 1;
    for (; l >= 0; --l) {
      if (++s[static_cast<std::size_t>(l)] <= J) break;
      s[static_cast<std::size_t>(l)] = 0;
    }
    if (l < 0) break;
  }
}

std::size_t DyadicEstimator::rect_ordinal(const DyadicRectangle& K) const {
  return offsets_[static_cast<std::size_t>(stats_.scale_ordinal(K.scales()))] +
         stats_.position_index(K);
}

double DyadicEstimator::cell_criterion(const DyadicRectangle& K, const DegreeVector& r) const {
  const auto ks = lambda_indices(config_.r_star);
  for (std::size_t l = 0; l < r.size(); ++l)
    if (r[l] < 0 || r[l] > config_.r_star[l])
      throw std::invalid_argument("degree outside Lambda(r_star)");
  const double* trow = terms_.data() + rect_ordinal(K) * ks.size();
  double total = leaf_constant_;
  for (std::size_t c = 0; c < ks.size(); ++c) {
    bool inside = true;
    for (std::size_t l = 0; l < r.size(); ++l)
      if (ks[c][l] > r[l]) { inside = false; break; }
    if (inside) total += trow[c];
  }
  return total;
}

std::pair<DegreeVector, double> DyadicEstimator::best_degree(const DyadicRectangle& K) const {
  const auto prefix = degree_prefix_sums(K);
  const auto [flat, value] = argmin_degree(prefix);
  const int d = stats_.dim();
  DegreeVector r(static_cast<std::size_t>(d));
  std::size_t rem = flat;
  for (int l = d - 1; l >= 0; --l) {
    r[static_cast<std::size_t>(l)] =
        static_cast<int>(rem % (static_cast<std::size_t>(config_.r_star[static_cast<std::size_t>(l)]) + 1));
    rem /= static_cast<std::size_t>(config_.r_star[static_cast<std::size_t>(l)]) + 1;
  }
  return {r, value};
}

std::vector<double> DyadicEstimator::degree_prefix_sums(const DyadicRectangle& K) const {
  const int d = stats_.dim();
  const auto ncoef = static_cast<std::size_t>(lambda_size(config_.r_star));
  std::vector<double> acc(terms_.begin() + static_cast<std::ptrdiff_t>(rect_ordinal(K) * ncoef),
                          terms_.begin() + static_cast<std::ptrdiff_t>((rect_ordinal(K) + 1) * ncoef));
  // d-dimensional prefix sums turn per-k terms into W-body(r) for every r
  std::vector<int> dims(static_cast<std::size_t>(d));
  for (int l = 0; l < d; ++l) dims[static_cast<std::size_t>(l)] = config_.r_star[static_cast<std::size_t>(l)] + 1;
  std::vector<std::size_t> stride(static_cast<std::size_t>(d), 1);
  for (int l = d - 2; l >= 0; --l)
    stride[static_cast<std::size_t>(l)] =
        stride[static_cast<std::size_t>(l + 1)] * static_cast<std::size_t>(dims[static_cast<std::size_t>(l + 1)]);
  for (int l = 0; l < d; ++l) {
    const std::size_t st = stride[static_cast<std::size_t>(l)];
    const std::size_t na = static_cast<std::size_t>(dims[static_cast<std::size_t>(l)]);
    for (std::size_t base = 0; base < ncoef; base += na * st)
      for (std::size_t off = 0; off < st; ++off)
        for (std::size_t i = 1; i < na; ++i)
          acc[base + i * st + off] += acc[base + (i - 1) * st + off];
  }
  return acc;
}

std::pair<std::size_t, double> DyadicEstimator::argmin_degree(
    const std::vector<double>& prefix) const {
  std::size_t best = 0;
  double best_v = prefix[0] + leaf_constant_;
  for (std::size_t f = 1; f < prefix.size(); ++f) {
    const double v = prefix[f] + leaf_constant_;
    if (v < best_v ||
        (v == best_v && (lambda_sizes_[f] < lambda_sizes_[best] ||
                         (lambda_sizes_[f] == lambda_sizes_[best] && f < best)))) {
      best = f;
      best_v = v;
    }
  }
  return {best, best_v};
}

FittedModel DyadicEstimator::select_partition() const {
  const auto t0 = Clock::now();
  const int d = stats_.dim();
  const int J = config_.j_star;
  const double n = static_cast<double>(n_);

  const std::size_t nrects = total_rects();
  std::vector<double> wstar(nrects, 0.0);
  std::vector<std::int8_t> choice(nrects, -1);
  std::vector<std::int32_t> bestdeg(nrects, 0);

  // scale vectors by decreasing total scale so children are always ready
  std::vector<std::pair<int, std::vector<int>>> order;
  for_each_scale([&](const std::vector<int>& s) {
    int total = 0;
    for (int v : s) total += v;
    order.emplace_back(total, s);
  });
  std::stable_sort(order.begin(), order.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });

  std::vector<std::uint64_t> p(static_cast<std::size_t>(d));
  for (const auto& [total, s] : order) {
    (void)total;
    std::size_t cells = 1;
    for (int l = 0; l < d; ++l) cells <<= s[static_cast<std::size_t>(l)];
    std::fill(p.begin(), p.end(), 0);
    for (std::size_t pidx = 0; pidx < cells; ++pidx) {
      const DyadicRectangle K(s, p);
      const std::size_t ro = rect_ordinal(K);
      const auto [flat, wleaf] = argmin_degree(degree_prefix_sums(K));
      double w = wleaf;
      std::int8_t ch = -1;
      bestdeg[ro] = static_cast<std::int32_t>(flat);
      for (int a = 0; a < d; ++a) {
        if (s[static_cast<std::size_t>(a)] >= J) continue;
        auto [lo, hi] = K.split(a);
        const double wsplit = wstar[rect_ordinal(lo)] + wstar[rect_ordinal(hi)];
        if (wsplit < w) {
          w = wsplit;
          ch = static_cast<std::int8_t>(a);
        }
      }
      wstar[ro] = w;
      choice[ro] = ch;
      int l = d - 1;
      for (; l >= 0; --l) {
        if (++p[static_cast<std::size_t>(l)] <
            (std::uint64_t{1} << s[static_cast<std::size_t>(l)]))
          break;
        p[static_cast<std::size_t>(l)] = 0;
      }
    }
  }

  // rebuild the optimal tree and extract leaf degrees and coefficients
  std::vector<LeafPoly> leaves;
  auto rebuild = [&](auto&& self, const DyadicRectangle& K) -> PartitionTree {
    const std::size_t ro = rect_ordinal(K);
    if (choice[ro] < 0) {
      DegreeVector r(static_cast<std::size_t>(d));
      std::size_t rem = static_cast<std::size_t>(bestdeg[ro]);
      for (int l = d - 1; l >= 0; --l) {
        const std::size_t na = static_cast<std::size_t>(config_.r_star[static_cast<std::size_t>(l)]) + 1;
        r[static_cast<std::size_t>(l)] = static_cast<int>(rem % na);
        rem /= na;
      }
      const auto ks = lambda_indices(r);
      std::vector<double> coeffs(ks.size());
      for (std::size_t c = 0; c < ks.size(); ++c)
        coeffs[c] = phi_sums(stats_, K, ks[c]).first / n;
      leaves.push_back(LeafPoly{K, std::move(r), std::move(coeffs)});
      return PartitionTree::leaf();
    }
    auto [lo, hi] = K.split(choice[ro]);
    PartitionTree left = self(self, lo);
    PartitionTree right = self(self, hi);
    return PartitionTree::node(choice[ro], left, right);
  };
  PartitionTree tree = rebuild(rebuild, DyadicRectangle(d));

  FitDiagnostics diag;
  diag.m1_star = m1_star_;
  diag.m2_star = m2_star_;
  diag.j_star = J;
  diag.j_star_floor_warning = j_star_floor_warning_;
  diag.criterion = wstar[rect_ordinal(DyadicRectangle(d))];
  diag.seconds_stats = seconds_stats_;
  diag.seconds_select = seconds_since(t0);
  diag.seconds_total = diag.seconds_stats + diag.seconds_select;
  return FittedModel(PiecewisePoly(std::move(tree), std::move(leaves)), config_, n_, diag);
}

// ---------------------------------------------------------------------------

FittedModel::FittedModel(PiecewisePoly density, PenaltyConfig config, std::size_t n,
                         FitDiagnostics diagnostics)
    : density_(std::move(density)),
      config_(std::move(config)),
      n_(n),
      diagnostics_(diagnostics) {}

std::string FittedModel::to_json() const {
  nlohmann::json j;
  j["format"] = "dpp.model/1";
  j["d"] = density_.dim();
  j["n"] = n_;
  j["tree"] = density_.tree().encode();
  nlohmann::json leaves = nlohmann::json::array();
  for (const auto& lp : density_.leaves()) {
    nlohmann::json leaf;
    leaf["degrees"] = lp.degrees;
    leaf["coeffs"] = lp.coeffs;
    leaves.push_back(std::move(leaf));
  }
  j["leaves"] = std::move(leaves);
  j["penalty"] = {{"kappa", config_.kappa},
                  {"r_star", config_.r_star},
                  {"j_star", config_.j_star},
                  {"weight_L", config_.weight_L()}};
  j["diagnostics"] = {{"m1_star", diagnostics_.m1_star},
                      {"m2_star", diagnostics_.m2_star},
                      {"j_star", diagnostics_.j_star},
                      {"j_star_floor_warning", diagnostics_.j_star_floor_warning},
                      {"criterion", diagnostics_.criterion},
                      {"seconds_stats", diagnostics_.seconds_stats},
                      {"seconds_select", diagnostics_.seconds_select},
                      {"seconds_total", diagnostics_.seconds_total}};
  return j.dump(2);
}

FittedModel FittedModel::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  if (j.value("format", "") != "dpp.model/1")
    throw std::invalid_argument("not a dpp.model/1 file");
  const int d = j.at("d").get<int>();
  PartitionTree tree = PartitionTree::decode(j.at("tree").get<std::string>(), d);
  const auto rects = tree.leaves(d);
  std::vector<LeafPoly> leaves;
  const auto& jl = j.at("leaves");
  if (jl.size() != rects.size()) throw std::invalid_argument("leaf count mismatch");
  for (std::size_t i = 0; i < rects.size(); ++i)
    leaves.push_back(LeafPoly{rects[i], jl[i].at("degrees").get<DegreeVector>(),
                              jl[i].at("coeffs").get<std::vector<double>>()});
  PenaltyConfig cfg;
  const auto& jp = j.at("penalty");
  const auto kv = jp.at("kappa").get<std::vector<double>>();
  if (kv.size() != 5) throw std::invalid_argument("expected 5 kappa constants");
  std::copy(kv.begin(), kv.end(), cfg.kappa.begin());
  cfg.r_star = jp.at("r_star").get<DegreeVector>();
  cfg.j_star = jp.at("j_star").get<int>();
  FitDiagnostics diag;
  const auto& jd = j.at("diagnostics");
  diag.m1_star = jd.value("m1_star", 0.0);
  diag.m2_star = jd.value("m2_star", 0.0);
  diag.j_star = jd.value("j_star", cfg.j_star);
  diag.j_star_floor_warning = jd.value("j_star_floor_warning", false);
  diag.criterion = jd.value("criterion", 0.0);
  diag.seconds_stats = jd.value("seconds_stats", 0.0);
  diag.seconds_select = jd.value("seconds_select", 0.0);
  diag.seconds_total = jd.value("seconds_total", 0.0);
  return FittedModel(PiecewisePoly(std::move(tree), std::move(leaves)),
                     std::move(cfg), j.at("n").get<std::size_t>(), diag);
}

void FittedModel::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << to_json() << "\n";
}

FittedModel FittedModel::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

// ---------------------------------------------------------------------------

FittedModel fit(const Sample& sample, const FitOptions& options) {
  const auto t0 = Clock::now();
  PenaltyConfig cfg;
  cfg.kappa = options.kappa;
  if (!options.r_star.empty()) {
    if (static_cast<int>(options.r_star.size()) != sample.dim())
      throw std::invalid_argument("r_star dimension mismatch");
    cfg.r_star = options.r_star;
  } else if (options.preset == DegreePreset::LogN) {
    const int r = std::max(0, static_cast<int>(std::floor(std::log(static_cast<double>(sample.size())))));
    cfg.r_star.assign(static_cast<std::size_t>(sample.dim()), r);
  } else {
    cfg.r_star.assign(static_cast<std::size_t>(sample.dim()), 1);
  }
  for (int r : cfg.r_star)
    if (r < 0) throw std::invalid_argument("negative degree in r_star");

  bool floor_warning = false;
  if (options.j_star) {
    if (*options.j_star < 0 || *options.j_star > kMaxScale / sample.dim())
      throw std::invalid_argument("j_star outside valid range");
    cfg.j_star = *options.j_star;
  } else {
    cfg.j_star = compute_Jstar(sample.size(), cfg.r_star, sample.dim());
    if (cfg.j_star == 0) {
      const double lam = static_cast<double>(lambda_size(cfg.r_star));
      const double ratio =
          static_cast<double>(sample.size()) / std::log(static_cast<double>(sample.size()) * lam);
      floor_warning = ratio < 1.0;
    }
  }

  DyadicEstimator estimator(sample, cfg);
  estimator.j_star_floor_warning_ = floor_warning;
  FittedModel model = estimator.select_partition();
  // stamp the total wall time including construction
  FitDiagnostics diag = model.diagnostics();
  diag.seconds_total = seconds_since(t0);
  return FittedModel(model.density(), model.config(), model.n(), diag);
}

double empirical_contrast(const PiecewisePoly& t, const Sample& sample) {
  double mean = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) mean += t(sample.point(i));
  mean /= static_cast<double>(sample.size());
  return t.l2_norm_sq() - 2.0 * mean;
}

}  // namespace dpp
