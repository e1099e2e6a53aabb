#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "crashcast/config.hpp"
#include "crashcast/data.hpp"
#include "crashcast/forecasting.hpp"
#include "crashcast/geometry.hpp"

namespace crashcast::evaluation {

using geometry::BoundingBox;
using geometry::Detection;

// ---------------------------------------------------------------------------
// detection mAP@IoU

struct GroundTruthBox {
  int category = 0;
  BoundingBox box;
};

struct DetectionEvalReport {
  std::map<int, double> ap_per_category;  // categories with >= 1 ground-truth box
  std::vector<int> categories_without_gt;  // detected but never annotated
  double map = 0.0;

  config::KeyValues to_kv() const {
    config::KeyValues kv;
    kv["map"] = config::format_double(map);
    for (const auto& [cat, ap] : ap_per_category)
      kv["ap." + std::string(data::category_name(static_cast<data::Category>(cat)))] =
          config::format_double(ap);
    return kv;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "detection evaluation (mAP " << config::format_double(map) << ")\n";
    for (const auto& [cat, ap] : ap_per_category)
      os << "  " << data::category_name(static_cast<data::Category>(cat)) << ": AP "
         << config::format_double(ap) << "\n";
    for (int cat : categories_without_gt)
      os << "  " << data::category_name(static_cast<data::Category>(cat))
         << ": no ground truth (excluded from mean)\n";
    return os.str();
  }
};

/// All-point interpolated average precision from a TP/FP flag sequence in
/// descending-score order.
inline double average_precision(const std::vector<bool>& is_tp, long n_gt) {
  if (n_gt <= 0) throw std::invalid_argument("average_precision: no ground truth");
  std::vector<double> recalls, precisions;
  long tp = 0;
  for (std::size_t i = 0; i < is_tp.size(); ++i) {
    if (is_tp[i]) ++tp;
    recalls.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    precisions.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  // Precision envelope, integrated over recall.
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < recalls.size(); ++i) {
    double max_prec = 0.0;
    for (std::size_t j = i; j < precisions.size(); ++j) max_prec = std::max(max_prec, precisions[j]);
    ap += (recalls[i] - prev_recall) * max_prec;
    prev_recall = recalls[i];
  }
  return ap;
}

/// PASCAL-style evaluation: per category, detections pooled over images and
/// sorted by descending score (ties keep image order, then input order); each
/// is matched greedily to the highest-IoU unmatched ground-truth box of the
/// same image and category, a true positive iff that IoU >= iou_threshold.
/// mAP averages AP over categories with at least one ground-truth instance.
inline DetectionEvalReport detection_map(
    const std::vector<std::vector<Detection>>& detections_per_image,
    const std::vector<std::vector<GroundTruthBox>>& ground_truth_per_image,
    double iou_threshold = 0.5) {
  if (detections_per_image.size() != ground_truth_per_image.size())
    throw std::invalid_argument("detection_map: image count mismatch");
  if (iou_threshold <= 0.0 || iou_threshold > 1.0)
    throw std::invalid_argument("detection_map: iou_threshold outside (0,1]");

  DetectionEvalReport report;
  std::map<int, long> gt_count;
  std::map<int, bool> seen_in_detections;
  for (const auto& dets : detections_per_image)
    for (const auto& d : dets) seen_in_detections[d.category] = true;
  for (const auto& gts : ground_truth_per_image)
    for (const auto& g : gts) ++gt_count[g.category];

  for (const auto& [cat, n_gt] : gt_count) {
    struct Entry {
      std::size_t image;
      std::size_t order;
      double score;
      const BoundingBox* box;
    };
    std::vector<Entry> entries;
    for (std::size_t img = 0; img < detections_per_image.size(); ++img) {
      const auto& dets = detections_per_image[img];
      for (std::size_t i = 0; i < dets.size(); ++i)
        if (dets[i].category == cat) entries.push_back({img, i, dets[i].score, &dets[i].box});
    }
    std::stable_sort(entries.begin(), entries.end(),
                     [](const Entry& a, const Entry& b) { return a.score > b.score; });

    std::vector<std::vector<bool>> matched(ground_truth_per_image.size());
    for (std::size_t img = 0; img < ground_truth_per_image.size(); ++img)
      matched[img].assign(ground_truth_per_image[img].size(), false);

    std::vector<bool> is_tp;
    is_tp.reserve(entries.size());
    for (const auto& e : entries) {
      const auto& gts = ground_truth_per_image[e.image];
      double best = 0.0;
      int best_j = -1;
      for (std::size_t j = 0; j < gts.size(); ++j) {
        if (gts[j].category != cat || matched[e.image][j]) continue;
        const double v = geometry::iou(*e.box, gts[j].box);
        if (v > best) {
          best = v;
          best_j = static_cast<int>(j);
        }
      }
      if (best_j >= 0 && best >= iou_threshold) {
        matched[e.image][static_cast<std::size_t>(best_j)] = true;
        is_tp.push_back(true);
      } else {
        is_tp.push_back(false);
      }
    }
    report.ap_per_category[cat] = average_precision(is_tp, n_gt);
  }

  for (const auto& [cat, seen] : seen_in_detections)
    if (!gt_count.count(cat)) report.categories_without_gt.push_back(cat);

  if (!report.ap_per_category.empty()) {
    double sum = 0.0;
    for (const auto& [cat, ap] : report.ap_per_category) sum += ap;
    report.map = sum / static_cast<double>(report.ap_per_category.size());
  }
  return report;
}

// ---------------------------------------------------------------------------
// time-to-accident

/// Seconds between the first frame whose score reaches the threshold (at or
/// before the accident frame) and the accident. No value means no alarm.
inline std::optional<double> toa(const forecasting::ForecastCurve& curve, double theta, int y,
                                 double fps) {
  if (theta < 0.0 || theta > 1.0) throw std::invalid_argument("toa: threshold outside [0,1]");
  if (fps <= 0.0) throw std::invalid_argument("toa: fps must be positive");
  if (y < 0 || y >= static_cast<int>(curve.scores.size()))
    throw std::invalid_argument("toa: accident frame outside curve");
  for (int t = 0; t <= y; ++t)
    if (curve.scores[static_cast<std::size_t>(t)] >= theta)
      return (static_cast<double>(y - t)) / fps;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// forecasting evaluation over a threshold sweep

struct PositiveCurve {
  forecasting::ForecastCurve curve;
  int accident_index = forecasting::kAccidentIndex;
};

struct OperatingPoint {
  double theta = 0.0;
  double recall = 0.0;
  double precision = 1.0;
  std::optional<double> mean_toa;  // mean ToA over true positives at this threshold
  long true_positives = 0;
  long false_alarm_negatives = 0;
};

struct ForecastEvalReport {
  double ap = 0.0;
  std::optional<double> mean_toa;       // mToA: mean over operating points with >= 1 TP
  std::optional<double> toa_at_recall;  // ToA@recall_target (linear interpolation)
  double recall_target = 0.8;
  std::vector<OperatingPoint> points;   // ordered by descending theta

  config::KeyValues to_kv() const {
    config::KeyValues kv;
    kv["ap"] = config::format_double(ap);
    kv["mtoa"] = mean_toa ? config::format_double(*mean_toa) : std::string("unavailable");
    kv["recall_target"] = config::format_double(recall_target);
    kv["toa_at_recall"] =
        toa_at_recall ? config::format_double(*toa_at_recall) : std::string("unavailable");
    return kv;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "forecasting evaluation\n";
    os << "  AP: " << config::format_double(ap) << "\n";
    os << "  mToA: " << (mean_toa ? config::format_double(*mean_toa) + " s" : "unavailable")
       << "\n";
    os << "  ToA@" << config::format_double(recall_target) << ": "
       << (toa_at_recall ? config::format_double(*toa_at_recall) + " s" : "unavailable") << "\n";
    return os.str();
  }

  /// Delimited export consumed by the plot command: theta recall precision
  /// mean_toa per line ("nan" when a point has no true positive).
  void save_curve(const std::filesystem::path& file) const {
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write curve file " + file.string());
    out << "# theta recall precision mean_toa\n";
    for (const auto& p : points)
      out << config::format_double(p.theta) << " " << config::format_double(p.recall) << " "
          << config::format_double(p.precision) << " "
          << (p.mean_toa ? config::format_double(*p.mean_toa) : std::string("nan")) << "\n";
    if (!out) throw std::runtime_error("write failed for " + file.string());
  }
};

inline std::vector<double> default_theta_grid() {
  std::vector<double> grid;
  grid.reserve(201);
  for (int i = 0; i <= 200; ++i) grid.push_back(static_cast<double>(i) / 200.0);
  return grid;
}

/// Threshold sweep over forecast curves. A positive alarms at theta when some
/// frame at or before its accident index has score strictly above theta
/// (alarms after the accident do not count); a negative clip counts as at
/// most one false alarm per threshold. Precision at a silent threshold is 1.
inline ForecastEvalReport forecast_curve_eval(const std::vector<PositiveCurve>& positives,
                                              const std::vector<forecasting::ForecastCurve>& negatives,
                                              std::vector<double> theta_grid = {},
                                              double fps = 10.0, double recall_target = 0.8) {
  if (positives.empty()) throw std::invalid_argument("forecast_curve_eval: no positive curves");
  if (fps <= 0.0) throw std::invalid_argument("forecast_curve_eval: fps must be positive");
  if (theta_grid.empty()) theta_grid = default_theta_grid();
  for (double th : theta_grid)
    if (th < 0.0 || th > 1.0)
      throw std::invalid_argument("forecast_curve_eval: threshold outside [0,1]");
  std::sort(theta_grid.begin(), theta_grid.end(), std::greater<double>());

  ForecastEvalReport report;
  report.recall_target = recall_target;

  for (double theta : theta_grid) {
    OperatingPoint pt;
    pt.theta = theta;
    double toa_sum = 0.0;
    for (const auto& pos : positives) {
      const int y = pos.accident_index;
      if (y < 0 || y >= static_cast<int>(pos.curve.scores.size()))
        throw std::invalid_argument("forecast_curve_eval: accident index outside curve");
      int first = -1;
      for (int t = 0; t <= y; ++t)
        if (pos.curve.scores[static_cast<std::size_t>(t)] > theta) {
          first = t;
          break;
        }
      if (first >= 0) {
        ++pt.true_positives;
        toa_sum += static_cast<double>(y - first) / fps;
      }
    }
    for (const auto& neg : negatives) {
      bool alarmed = false;
      for (double a : neg.scores)
        if (a > theta) {
          alarmed = true;
          break;
        }
      if (alarmed) ++pt.false_alarm_negatives;
    }
    pt.recall = static_cast<double>(pt.true_positives) / static_cast<double>(positives.size());
    const long alarms = pt.true_positives + pt.false_alarm_negatives;
    pt.precision = alarms > 0 ? static_cast<double>(pt.true_positives) / static_cast<double>(alarms)
                              : 1.0;
    if (pt.true_positives > 0)
      pt.mean_toa = toa_sum / static_cast<double>(pt.true_positives);
    report.points.push_back(pt);
  }

  // AP: step integration of precision over recall, thresholds descending.
  double prev_recall = 0.0;
  for (const auto& pt : report.points) {
    report.ap += (pt.recall - prev_recall) * pt.precision;
    prev_recall = pt.recall;
  }

  // mToA over operating points that saw at least one true positive.
  double mtoa_sum = 0.0;
  long mtoa_n = 0;
  for (const auto& pt : report.points)
    if (pt.mean_toa) {
      mtoa_sum += *pt.mean_toa;
      ++mtoa_n;
    }
  if (mtoa_n > 0) report.mean_toa = mtoa_sum / static_cast<double>(mtoa_n);

  // ToA at the recall target, linearly interpolated between the bracketing
  // operating points (recall is nondecreasing as theta falls).
  for (std::size_t i = 0; i < report.points.size(); ++i) {
    const auto& pt = report.points[i];
    if (pt.recall < recall_target) continue;
    if (!pt.mean_toa) break;  // recall > 0 implies TPs, defensive only
    if (pt.recall == recall_target || i == 0 || !report.points[i - 1].mean_toa) {
      report.toa_at_recall = *pt.mean_toa;
    } else {
      const auto& lo = report.points[i - 1];
      const double span = pt.recall - lo.recall;
      const double w = span > 0.0 ? (recall_target - lo.recall) / span : 1.0;
      report.toa_at_recall = (1.0 - w) * *lo.mean_toa + w * *pt.mean_toa;
    }
    break;
  }
  return report;
}

}  // namespace crashcast::evaluation
