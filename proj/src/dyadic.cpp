#include "dpp/dyadic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace dpp {

namespace {

void check_axis(int axis, int d) {
  if (axis < 0 || axis >= d) throw std::invalid_argument("axis out of range");
}

}  // namespace

DyadicRectangle::DyadicRectangle(int d)
    : scale_(static_cast<std::size_t>(d), 0), pos_(static_cast<std::size_t>(d), 0) {
  if (d < 1) throw std::invalid_argument("dimension must be positive");
}

DyadicRectangle::DyadicRectangle(std::vector<int> scale, std::vector<std::uint64_t> pos)
    : scale_(std::move(scale)), pos_(std::move(pos)) {
  if (scale_.empty() || scale_.size() != pos_.size())
    throw std::invalid_argument("scale/pos size mismatch");
  for (std::size_t l = 0; l < scale_.size(); ++l) {
    if (scale_[l] < 0 || scale_[l] > kMaxScale)
      throw std::invalid_argument("scale outside [0, 62]");
    if (pos_[l] >> scale_[l] != 0)
      throw std::invalid_argument("position not below 2^scale");
  }
}

int DyadicRectangle::total_scale() const {
  int t = 0;
  for (int s : scale_) t += s;
  return t;
}

double DyadicRectangle::lower(int axis) const {
  return std::ldexp(static_cast<double>(pos_[axis]), -scale_[axis]);
}

double DyadicRectangle::upper(int axis) const {
  return std::ldexp(static_cast<double>(pos_[axis] + 1), -scale_[axis]);
}

double DyadicRectangle::center(int axis) const {
  return std::ldexp(static_cast<double>(2 * pos_[axis] + 1), -scale_[axis] - 1);
}

double DyadicRectangle::side(int axis) const { return std::ldexp(1.0, -scale_[axis]); }

double DyadicRectangle::measure() const { return std::ldexp(1.0, -total_scale()); }

bool DyadicRectangle::contains(std::span<const double> x) const {
  if (x.size() != scale_.size()) throw std::invalid_argument("point dimension mismatch");
  for (std::size_t l = 0; l < scale_.size(); ++l) {
    const double lo = lower(static_cast<int>(l));
    const double hi = upper(static_cast<int>(l));
    if (pos_[l] == 0) {
      if (x[l] < 0.0 || x[l] > hi) return false;
    } else {
      if (x[l] <= lo || x[l] > hi) return false;
    }
  }
  return true;
}

bool DyadicRectangle::contains(const DyadicRectangle& other) const {
  if (other.dim() != dim()) throw std::invalid_argument("dimension mismatch");
  for (int l = 0; l < dim(); ++l) {
    if (other.scale_[l] < scale_[l]) return false;
    if ((other.pos_[l] >> (other.scale_[l] - scale_[l])) != pos_[l]) return false;
  }
  return true;
}

bool DyadicRectangle::intersects(const DyadicRectangle& other) const {
  if (other.dim() != dim()) throw std::invalid_argument("dimension mismatch");
  for (int l = 0; l < dim(); ++l) {
    // two dyadic intervals meet iff the shallower one contains the other
    const int sa = scale_[l], sb = other.scale_[l];
    if (sa <= sb) {
      if ((other.pos_[l] >> (sb - sa)) != pos_[l]) return false;
    } else {
      if ((pos_[l] >> (sa - sb)) != other.pos_[l]) return false;
    }
  }
  return true;
}

DyadicRectangle DyadicRectangle::intersect(const DyadicRectangle& other) const {
  if (!intersects(other)) throw std::invalid_argument("rectangles are disjoint");
  std::vector<int> s(scale_.size());
  std::vector<std::uint64_t> p(scale_.size());
  for (int l = 0; l < dim(); ++l) {
    if (scale_[l] >= other.scale_[l]) {
      s[l] = scale_[l];
      p[l] = pos_[l];
    } else {
      s[l] = other.scale_[l];
      p[l] = other.pos_[l];
    }
  }
  return DyadicRectangle(std::move(s), std::move(p));
}

std::pair<DyadicRectangle, DyadicRectangle> DyadicRectangle::split(int axis) const {
  check_axis(axis, dim());
  if (scale_[axis] >= kMaxScale) throw std::overflow_error("scale budget exceeded");
  DyadicRectangle left = *this, right = *this;
  left.scale_[axis]++;
  right.scale_[axis]++;
  left.pos_[axis] = 2 * pos_[axis];
  right.pos_[axis] = 2 * pos_[axis] + 1;
  return {std::move(left), std::move(right)};
}

std::string DyadicRectangle::to_string() const {
  std::string out = "{";
  for (int l = 0; l < dim(); ++l) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%llu/2^%d", l ? ", " : "",
                  static_cast<unsigned long long>(pos_[l]), scale_[l]);
    out += buf;
  }
  return out + "}";
}

// ---------------------------------------------------------------------------

PartitionTree::PartitionTree() : nodes_{Node{-1, -1, -1}} {}

PartitionTree PartitionTree::leaf() { return PartitionTree(); }

PartitionTree PartitionTree::node(int axis, const PartitionTree& left,
                                  const PartitionTree& right) {
  if (axis < 0 || axis > std::numeric_limits<std::int16_t>::max())
    throw std::invalid_argument("axis out of range");
  PartitionTree t;
  t.nodes_.clear();
  const auto ln = static_cast<std::int32_t>(left.nodes_.size());
  t.nodes_.push_back(Node{static_cast<std::int16_t>(axis), 1, 1 + ln});
  for (Node n : left.nodes_) {
    if (n.axis >= 0) { n.left += 1; n.right += 1; }
    t.nodes_.push_back(n);
  }
  for (Node n : right.nodes_) {
    if (n.axis >= 0) { n.left += 1 + ln; n.right += 1 + ln; }
    t.nodes_.push_back(n);
  }
  return t;
}

std::size_t PartitionTree::leaf_count() const {
  std::size_t c = 0;
  for (const Node& n : nodes_)
    if (n.axis < 0) ++c;
  return c;
}

std::vector<std::int32_t> PartitionTree::subtree_leaf_counts() const {
  std::vector<std::int32_t> counts(nodes_.size(), 0);
  // children are stored after their parent, so one reverse sweep suffices
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    const Node& n = nodes_[i];
    counts[i] = n.axis < 0 ? 1 : counts[n.left] + counts[n.right];
  }
  return counts;
}

std::vector<DyadicRectangle> PartitionTree::leaves(int d) const {
  return leaves(DyadicRectangle(d));
}

std::vector<DyadicRectangle> PartitionTree::leaves(const DyadicRectangle& root) const {
  std::vector<DyadicRectangle> out;
  out.reserve(leaf_count());
  struct Item { std::int32_t node; DyadicRectangle rect; };
  std::vector<Item> stack;
  stack.push_back({0, root});
  while (!stack.empty()) {
    Item it = std::move(stack.back());
    stack.pop_back();
    const Node& n = nodes_[it.node];
    if (n.axis < 0) {
      out.push_back(std::move(it.rect));
    } else {
      auto [lo, hi] = it.rect.split(n.axis);
      stack.push_back({n.right, std::move(hi)});
      stack.push_back({n.left, std::move(lo)});
    }
  }
  return out;
}

std::string PartitionTree::encode() const {
  std::string out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (i) out += ' ';
    if (nodes_[i].axis < 0)
      out += 'L';
    else
      out += std::to_string(nodes_[i].axis + 1);
  }
  return out;
}

PartitionTree PartitionTree::decode(std::string_view text, int d) {
  std::vector<std::string_view> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j > i) tokens.push_back(text.substr(i, j - i));
    i = j;
  }
  if (tokens.empty()) throw std::invalid_argument("empty tree encoding");

  std::size_t cursor = 0;
  auto parse = [&](auto&& self) -> PartitionTree {
    if (cursor >= tokens.size()) throw std::invalid_argument("truncated tree encoding");
    std::string_view tok = tokens[cursor++];
    if (tok == "L") return PartitionTree::leaf();
    int axis = 0;
    for (char c : tok) {
      if (c < '0' || c > '9') throw std::invalid_argument("bad tree token '" + std::string(tok) + "'");
      axis = axis * 10 + (c - '0');
      if (axis > d + 9) break;
    }
    if (axis < 1 || axis > d)
      throw std::invalid_argument("cut direction out of range in tree encoding");
    PartitionTree left = self(self);
    PartitionTree right = self(self);
    return PartitionTree::node(axis - 1, left, right);
  };
  PartitionTree t = parse(parse);
  if (cursor != tokens.size()) throw std::invalid_argument("trailing tokens in tree encoding");
  return t;
}

// ---------------------------------------------------------------------------

AnisoFamily::AnisoFamily(std::vector<double> sigma) : sigma_(std::move(sigma)) {
  if (sigma_.empty()) throw std::invalid_argument("sigma must be nonempty");
  double inv_sum = 0.0;
  sigma_min_ = std::numeric_limits<double>::infinity();
  for (double s : sigma_) {
    if (!(s > 0.0)) throw std::invalid_argument("sigma entries must be positive");
    sigma_min_ = std::min(sigma_min_, s);
    inv_sum += 1.0 / s;
  }
  harmonic_ = static_cast<double>(sigma_.size()) / inv_sum;
}

int AnisoFamily::axis_scale(int j, int axis) const {
  if (j < 0) throw std::invalid_argument("level must be nonnegative");
  // snap values that sit a rounding error below an integer (exact ratios
  // like sigma = (1,3) would otherwise floor one too low)
  const double x = j * sigma_min_ / sigma_[axis];
  return static_cast<int>(std::floor(x + 1e-9));
}

std::vector<int> AnisoFamily::level_scales(int j) const {
  std::vector<int> s(sigma_.size());
  for (int l = 0; l < dim(); ++l) s[l] = axis_scale(j, l);
  return s;
}

std::vector<DyadicRectangle> aniso_cells(const AnisoFamily& family, int j,
                                         int total_scale_budget) {
  const int d = family.dim();
  std::vector<int> scales = family.level_scales(j);
  int total = 0;
  for (int s : scales) {
    if (s > kMaxScale) throw std::length_error("aniso level exceeds scale cap");
    total += s;
  }
  if (total > total_scale_budget)
    throw std::length_error("aniso grid exceeds total scale budget");

  std::vector<DyadicRectangle> out;
  out.reserve(std::size_t{1} << total);
  std::vector<std::uint64_t> pos(static_cast<std::size_t>(d), 0);
  while (true) {
    out.emplace_back(scales, pos);
    int l = d - 1;
    for (; l >= 0; --l) {
      if (++pos[l] < (std::uint64_t{1} << scales[l])) break;
      pos[l] = 0;
    }
    if (l < 0) break;
  }
  return out;
}

bool on_level(const DyadicRectangle& K, const AnisoFamily& family, int j) {
  if (K.dim() != family.dim()) return false;
  for (int l = 0; l < K.dim(); ++l)
    if (K.scale(l) != family.axis_scale(j, l)) return false;
  return true;
}

std::vector<DyadicRectangle> aniso_children(const DyadicRectangle& K,
                                            const AnisoFamily& family, int j) {
  if (!on_level(K, family, j))
    throw std::invalid_argument("rectangle is not on the level-j grid");
  const int d = K.dim();
  std::vector<int> child_scales = family.level_scales(j + 1);
  std::vector<int> delta(static_cast<std::size_t>(d));
  for (int l = 0; l < d; ++l) {
    delta[l] = child_scales[l] - K.scale(l);
    if (child_scales[l] > kMaxScale) throw std::overflow_error("scale budget exceeded");
  }
  std::vector<DyadicRectangle> out;
  std::vector<std::uint64_t> sub(static_cast<std::size_t>(d), 0);
  while (true) {
    std::vector<std::uint64_t> pos(static_cast<std::size_t>(d));
    for (int l = 0; l < d; ++l) pos[l] = (K.pos(l) << delta[l]) + sub[l];
    out.emplace_back(child_scales, std::move(pos));
    int l = d - 1;
    for (; l >= 0; --l) {
      if (++sub[l] < (std::uint64_t{1} << delta[l])) break;
      sub[l] = 0;
    }
    if (l < 0) break;
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string partition_key(std::vector<DyadicRectangle> leaves) {
  std::sort(leaves.begin(), leaves.end(), [](const DyadicRectangle& a, const DyadicRectangle& b) {
    for (int l = 0; l < a.dim(); ++l) {
      if (a.scale(l) != b.scale(l)) return a.scale(l) < b.scale(l);
      if (a.pos(l) != b.pos(l)) return a.pos(l) < b.pos(l);
    }
    return false;
  });
  std::string key;
  key.reserve(leaves.size() * leaves.front().dim() * 9);
  for (const auto& r : leaves) {
    for (int l = 0; l < r.dim(); ++l) {
      key.push_back(static_cast<char>(r.scale(l)));
      std::uint64_t p = r.pos(l);
      for (int b = 0; b < 8; ++b) {
        key.push_back(static_cast<char>(p & 0xff));
        p >>= 8;
      }
    }
  }
  return key;
}

struct EnumState {
  int max_depth;
  std::size_t budget;
  std::size_t produced = 0;
};

std::vector<PartitionTree> enumerate_rec(const DyadicRectangle& rect, long leaf_budget,
                                         EnumState& st) {
  std::vector<PartitionTree> out;
  std::unordered_set<std::string> seen;
  auto add = [&](PartitionTree t) {
    std::string key = partition_key(t.leaves(rect));
    if (seen.insert(std::move(key)).second) {
      if (++st.produced > st.budget)
        throw std::length_error("partition enumeration budget exceeded");
      out.push_back(std::move(t));
    }
  };
  add(PartitionTree::leaf());
  if (leaf_budget >= 0 && leaf_budget < 2) return out;
  for (int axis = 0; axis < rect.dim(); ++axis) {
    if (rect.scale(axis) >= st.max_depth) continue;
    auto [lo, hi] = rect.split(axis);
    long child_budget = leaf_budget < 0 ? -1 : leaf_budget - 1;
    std::vector<PartitionTree> lefts = enumerate_rec(lo, child_budget, st);
    std::vector<PartitionTree> rights = enumerate_rec(hi, child_budget, st);
    for (const auto& lt : lefts) {
      const long ln = static_cast<long>(lt.leaf_count());
      for (const auto& rt : rights) {
        if (leaf_budget >= 0 && ln + static_cast<long>(rt.leaf_count()) > leaf_budget)
          continue;
        add(PartitionTree::node(axis, lt, rt));
      }
    }
  }
  return out;
}

}  // namespace

std::vector<PartitionTree> enumerate_partitions(int max_depth, int d,
                                                std::size_t tree_budget, long max_leaves) {
  if (max_depth < 0 || max_depth > kMaxScale)
    throw std::invalid_argument("max_depth outside [0, 62]");
  EnumState st{max_depth, tree_budget, 0};
  return enumerate_rec(DyadicRectangle(d), max_leaves, st);
}

}  // namespace dpp
