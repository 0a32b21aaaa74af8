#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace dpp {

//! Hard cap on per-axis refinement depth. Up to this scale the integer
//! (scale, position) representation and all interval comparisons stay exact.
inline constexpr int kMaxScale = 62;

//! Product of dyadic intervals of [0,1], coded per axis by a scale j and a
//! position k < 2^j. The axis interval is [0, 2^-j] when k = 0 and
//! (k 2^-j, (k+1) 2^-j] otherwise, so each point of [0,1]^d lies in exactly
//! one cell of any dyadic grid.
class DyadicRectangle {
public:
  //! Unit cube [0,1]^d.
  explicit DyadicRectangle(int d);
  DyadicRectangle(std::vector<int> scale, std::vector<std::uint64_t> pos);

  int dim() const { return static_cast<int>(scale_.size()); }
  int scale(int axis) const { return scale_[axis]; }
  std::uint64_t pos(int axis) const { return pos_[axis]; }
  const std::vector<int>& scales() const { return scale_; }
  const std::vector<std::uint64_t>& positions() const { return pos_; }
  int total_scale() const;

  double lower(int axis) const;
  double upper(int axis) const;
  double center(int axis) const;
  double side(int axis) const;
  //! Lebesgue measure 2^{-sum of scales}.
  double measure() const;

  bool contains(std::span<const double> x) const;
  bool contains(const DyadicRectangle& other) const;
  bool intersects(const DyadicRectangle& other) const;
  //! Intersection of two overlapping rectangles (the finer interval per axis).
  DyadicRectangle intersect(const DyadicRectangle& other) const;

  //! The two halves along `axis`; scale goes up by one, positions 2k and 2k+1.
  std::pair<DyadicRectangle, DyadicRectangle> split(int axis) const;

  bool operator==(const DyadicRectangle&) const = default;
  std::string to_string() const;

private:
  std::vector<int> scale_;
  std::vector<std::uint64_t> pos_;
};

//! Complete binary tree whose internal nodes carry a cutting axis (0-based).
//! Read against a root rectangle, the leaves form a partition of it.
//! Immutable after construction; stored flat in preorder.
class PartitionTree {
public:
  struct Node {
    std::int16_t axis;  // -1 for leaves
    std::int32_t left;
    std::int32_t right;
    bool operator==(const Node&) const = default;
  };

  PartitionTree();  // single leaf
  static PartitionTree leaf();
  static PartitionTree node(int axis, const PartitionTree& left, const PartitionTree& right);

  bool root_is_leaf() const { return nodes_[0].axis < 0; }
  std::size_t node_count() const { return nodes_.size(); }
  std::size_t leaf_count() const;
  const std::vector<Node>& nodes() const { return nodes_; }
  //! Number of leaves below each node, aligned with nodes().
  std::vector<std::int32_t> subtree_leaf_counts() const;

  //! Leaf rectangles in depth-first (left before right) order.
  std::vector<DyadicRectangle> leaves(int d) const;
  std::vector<DyadicRectangle> leaves(const DyadicRectangle& root) const;

  //! Canonical preorder text form: internal nodes print their 1-based cutting
  //! axis, leaves print "L", tokens are space-separated.
  std::string encode() const;
  static PartitionTree decode(std::string_view text, int d);

  bool operator==(const PartitionTree&) const = default;

private:
  std::vector<Node> nodes_;
};

//! Anisotropic scale family: the level-j grid uses per-axis scale
//! floor(j * sigma_min / sigma_l), so the least smooth axis is the finest.
class AnisoFamily {
public:
  explicit AnisoFamily(std::vector<double> sigma);

  int dim() const { return static_cast<int>(sigma_.size()); }
  const std::vector<double>& sigma() const { return sigma_; }
  double sigma_min() const { return sigma_min_; }
  //! H(sigma) = (d^{-1} sum 1/sigma_l)^{-1}; sigma_min <= H always.
  double harmonic_mean() const { return harmonic_; }

  int axis_scale(int j, int axis) const;
  std::vector<int> level_scales(int j) const;

private:
  std::vector<double> sigma_;
  double sigma_min_ = 0.0;
  double harmonic_ = 0.0;
};

//! All cells of the level-j grid of `family`. Throws std::length_error when
//! the total scale exceeds `total_scale_budget` bits.
std::vector<DyadicRectangle> aniso_cells(const AnisoFamily& family, int j,
                                         int total_scale_budget = 24);

//! True when K lies on the level-j grid of `family`.
bool on_level(const DyadicRectangle& K, const AnisoFamily& family, int j);

//! The level-(j+1) cells contained in K; K must be a level-j cell.
std::vector<DyadicRectangle> aniso_children(const DyadicRectangle& K,
                                            const AnisoFamily& family, int j);

//! All partitions of [0,1]^d into dyadic rectangles with every sidelength
//! >= 2^-max_depth, one representative tree per distinct leaf set. Distinct
//! trees realizing the same partition are deduplicated via canonical sorted
//! leaf lists. `max_leaves < 0` means unbounded.
std::vector<PartitionTree> enumerate_partitions(int max_depth, int d,
                                                std::size_t tree_budget = 1000000,
                                                long max_leaves = -1);

}  // namespace dpp
