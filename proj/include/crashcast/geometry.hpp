#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace crashcast::geometry {

/// Axis-aligned rectangle in pixel coordinates, origin at the top-left.
/// Coordinates are reals; a box is valid when it has strictly positive area.
struct BoundingBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const { return x2 > x1 && y2 > y1; }

  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }

  /// Every side moved outward by `margin` (inward when negative).
  BoundingBox expanded(double margin) const {
    return {x1 - margin, y1 - margin, x2 + margin, y2 + margin};
  }

  /// Horizontal sides moved by dx, vertical sides by dy (outward when positive).
  BoundingBox offset_sides(double dx, double dy) const {
    return {x1 - dx, y1 - dy, x2 + dx, y2 + dy};
  }

  BoundingBox clipped(double image_width, double image_height) const {
    return {std::max(0.0, std::min(x1, image_width)), std::max(0.0, std::min(y1, image_height)),
            std::max(0.0, std::min(x2, image_width)), std::max(0.0, std::min(y2, image_height))};
  }

  bool operator==(const BoundingBox& o) const {
    return x1 == o.x1 && y1 == o.y1 && x2 == o.x2 && y2 == o.y2;
  }
};

struct ImageDims {
  int width = 0;
  int height = 0;
  double area() const { return static_cast<double>(width) * static_cast<double>(height); }
};

inline double intersection_area(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

/// Intersection over union. Throws on boxes with non-positive area.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("iou: box with non-positive area");
  const double inter = intersection_area(a, b);
  if (inter == 0.0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

/// A scored, categorized box. `category` indexes into the dataset category
/// list; -1 means category-free (e.g. raw region proposals).
struct Detection {
  BoundingBox box;
  double score = 0.0;
  int category = -1;
};

/// Greedy descending-score non-maximum suppression. A box is suppressed when
/// its IoU with an already kept box exceeds `overlap_threshold`; survivors
/// therefore pairwise satisfy IoU <= threshold. Equal scores keep the earlier
/// input first. Output is sorted by descending score.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double overlap_threshold) {
  if (overlap_threshold < 0.0 || overlap_threshold > 1.0)
    throw std::invalid_argument("nms: overlap threshold outside [0,1]");
  for (const auto& d : dets) {
    if (d.score < 0.0 || d.score > 1.0)
      throw std::invalid_argument("nms: detection score outside [0,1]");
    if (!d.box.valid()) throw std::invalid_argument("nms: box with non-positive area");
  }
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  std::vector<Detection> kept;
  for (std::size_t idx : order) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (iou(dets[idx].box, k.box) > overlap_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(dets[idx]);
  }
  return kept;
}

/// Gate that decides whether context mining applies to a region: true iff
/// the box area is at most `alpha` times the image area.
inline bool should_mine(const BoundingBox& box, double image_area, double alpha) {
  if (image_area <= 0.0) throw std::invalid_argument("should_mine: image_area must be positive");
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("should_mine: alpha outside [0,1]");
  if (!box.valid()) throw std::invalid_argument("should_mine: box with non-positive area");
  return box.area() <= alpha * image_area;
}

enum class ContextMode { CM, ACM };

/// The context regions mined around one origin box. `dropped` counts
/// candidate contexts discarded because they collapsed to zero area or
/// duplicated an earlier context after clipping.
struct ContextSet {
  BoundingBox origin;
  std::vector<BoundingBox> contexts;
  ContextMode mode = ContextMode::CM;
  int stride = 0;
  int n_c = 0;   // CM: number of concentric contexts
  int m = 0;     // ACM: horizontal steps
  int n = 0;     // ACM: vertical steps
  int dropped = 0;
};

namespace detail {
inline void push_context(ContextSet& set, const BoundingBox& candidate) {
  if (!candidate.valid()) {
    ++set.dropped;
    return;
  }
  for (const auto& existing : set.contexts) {
    if (existing == candidate) {
      ++set.dropped;
      return;
    }
  }
  set.contexts.push_back(candidate);
}
}  // namespace detail

/// Context mining: n_c concentric enlargements of the origin box, the k-th
/// grown by k*stride pixels on every side, clipped to the image last.
inline ContextSet mine_cm(const BoundingBox& box, int n_c, int stride, ImageDims image) {
  if (n_c < 1) throw std::invalid_argument("mine_cm: n_c must be >= 1");
  if (stride < 1) throw std::invalid_argument("mine_cm: stride must be >= 1");
  if (!box.valid()) throw std::invalid_argument("mine_cm: box with non-positive area");
  ContextSet set;
  set.origin = box;
  set.mode = ContextMode::CM;
  set.stride = stride;
  set.n_c = n_c;
  for (int k = 1; k <= n_c; ++k) {
    const BoundingBox candidate =
        box.expanded(static_cast<double>(k) * stride)
            .clipped(static_cast<double>(image.width), static_cast<double>(image.height));
    detail::push_context(set, candidate);
  }
  return set;
}

/// Augmented context mining: all offset pairs (i, j) with i in [-m, m] and
/// j in [-n, n] except (0, 0). Horizontal sides move by i*stride and vertical
/// sides by j*stride, outward for positive offsets and inward for negative
/// ones. Candidates that lose all width or height are dropped.
inline ContextSet mine_acm(const BoundingBox& box, int m, int n, int stride, ImageDims image) {
  if (m < 1 || n < 1) throw std::invalid_argument("mine_acm: m and n must be >= 1");
  if (stride < 1) throw std::invalid_argument("mine_acm: stride must be >= 1");
  if (!box.valid()) throw std::invalid_argument("mine_acm: box with non-positive area");
  ContextSet set;
  set.origin = box;
  set.mode = ContextMode::ACM;
  set.stride = stride;
  set.m = m;
  set.n = n;
  for (int i = -m; i <= m; ++i) {
    for (int j = -n; j <= n; ++j) {
      if (i == 0 && j == 0) continue;
      const BoundingBox moved =
          box.offset_sides(static_cast<double>(i) * stride, static_cast<double>(j) * stride);
      if (!moved.valid()) {
        ++set.dropped;
        continue;
      }
      detail::push_context(
          set, moved.clipped(static_cast<double>(image.width), static_cast<double>(image.height)));
    }
  }
  return set;
}

}  // namespace crashcast::geometry
