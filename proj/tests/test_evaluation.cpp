#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "crashcast/evaluation.hpp"
#include "crashcast/plot.hpp"

using namespace crashcast;
using evaluation::GroundTruthBox;
using evaluation::PositiveCurve;
using forecasting::ForecastCurve;
using geometry::BoundingBox;
using geometry::Detection;

#include "oracles.hpp"

using oracles::category_ap;
using oracles::sweep_recount;

namespace {

ForecastCurve flat(double v, int n = 100) {
  ForecastCurve c;
  c.scores.assign(static_cast<std::size_t>(n), v);
  return c;
}

}  // namespace

TEST_CASE("detection_map trivial cases") {
  std::vector<std::vector<GroundTruthBox>> gt = {
      {{0, {0, 0, 10, 10}}, {1, {20, 20, 40, 44}}},
      {{0, {5, 5, 9, 9}}}};
  // Detections exactly equal to the ground truth at score 1.
  std::vector<std::vector<Detection>> perfect = {
      {{{0, 0, 10, 10}, 1.0, 0}, {{20, 20, 40, 44}, 1.0, 1}},
      {{{5, 5, 9, 9}, 1.0, 0}}};
  auto report = evaluation::detection_map(perfect, gt, 0.5);
  CHECK(report.map == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(report.ap_per_category.at(0) == doctest::Approx(1.0));
  CHECK(report.ap_per_category.at(1) == doctest::Approx(1.0));

  // No detections at all.
  std::vector<std::vector<Detection>> none(2);
  CHECK(evaluation::detection_map(none, gt, 0.5).map == 0.0);
  CHECK_THROWS_AS(evaluation::detection_map(none, gt, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(evaluation::detection_map({{}}, gt, 0.5), std::invalid_argument);
}

TEST_CASE("detection_map duplicate detections count as false positives") {
  std::vector<std::vector<GroundTruthBox>> gt = {{{0, {0, 0, 10, 10}}, {0, {30, 0, 44, 10}}}};
  // Three detections, two ground-truth boxes, the middle one duplicates the
  // first match and must become a false positive.
  std::vector<std::vector<Detection>> dets = {{{{0, 0, 10, 10}, 0.9, 0},
                                               {{1, 0, 11, 10}, 0.8, 0},
                                               {{30, 0, 44, 10}, 0.7, 0}}};
  const auto report = evaluation::detection_map(dets, gt, 0.5);
  const double oracle = category_ap(0, dets, gt, 0.5);
  CHECK(report.ap_per_category.at(0) == oracle);
  // Precision sequence: 1/1 TP, 1/2 dup FP, 2/3 TP -> AP = 0.5*1 + 0.5*(2/3).
  CHECK(report.ap_per_category.at(0) == doctest::Approx(0.5 + 0.5 * (2.0 / 3.0)).epsilon(1e-12));
}

TEST_CASE("detection_map equals the oracle exactly on 50 random micro-scenes") {
  Rng rng(71);
  for (int scene = 0; scene < 50; ++scene) {
    const int n_img = 1 + static_cast<int>(rng.uniform_int(0, 2));
    std::vector<std::vector<GroundTruthBox>> gt(static_cast<std::size_t>(n_img));
    std::vector<std::vector<Detection>> dets(static_cast<std::size_t>(n_img));
    for (int img = 0; img < n_img; ++img) {
      const int n_gt = static_cast<int>(rng.uniform_int(1, 5));
      for (int i = 0; i < n_gt; ++i) {
        const double x = rng.uniform(0, 80), y = rng.uniform(0, 80);
        gt[static_cast<std::size_t>(img)].push_back(
            {static_cast<int>(rng.uniform_int(0, 2)),
             {x, y, x + rng.uniform(4, 20), y + rng.uniform(4, 20)}});
      }
      const int n_det = static_cast<int>(rng.uniform_int(0, 5));
      for (int i = 0; i < n_det; ++i) {
        // Half the detections perturb a ground-truth box, half are random.
        if (rng.uniform() < 0.5 && !gt[static_cast<std::size_t>(img)].empty()) {
          const auto& base =
              gt[static_cast<std::size_t>(img)]
                [static_cast<std::size_t>(rng.uniform_int(
                     0, static_cast<std::int64_t>(gt[static_cast<std::size_t>(img)].size()) - 1))];
          const double dx = rng.uniform(-3, 3), dy = rng.uniform(-3, 3);
          dets[static_cast<std::size_t>(img)].push_back(
              {{base.box.x1 + dx, base.box.y1 + dy, base.box.x2 + dx, base.box.y2 + dy},
               rng.uniform(),
               base.category});
        } else {
          const double x = rng.uniform(0, 80), y = rng.uniform(0, 80);
          dets[static_cast<std::size_t>(img)].push_back(
              {{x, y, x + rng.uniform(4, 20), y + rng.uniform(4, 20)},
               rng.uniform(),
               static_cast<int>(rng.uniform_int(0, 2))});
        }
      }
    }
    const auto report = evaluation::detection_map(dets, gt, 0.5);
    for (const auto& [cat, ap] : report.ap_per_category)
      CHECK(ap == category_ap(cat, dets, gt, 0.5));
  }
}

TEST_CASE("categories without ground truth are excluded and reported") {
  std::vector<std::vector<GroundTruthBox>> gt = {{{0, {0, 0, 10, 10}}}};
  std::vector<std::vector<Detection>> dets = {
      {{{0, 0, 10, 10}, 0.9, 0}, {{50, 50, 60, 60}, 0.8, 3}}};
  const auto report = evaluation::detection_map(dets, gt, 0.5);
  CHECK(report.ap_per_category.size() == 1);
  CHECK(report.map == doctest::Approx(1.0));
  REQUIRE(report.categories_without_gt.size() == 1);
  CHECK(report.categories_without_gt[0] == 3);
  CHECK(report.to_text().find("no ground truth") != std::string::npos);
}

TEST_CASE("toa definition arithmetic") {
  ForecastCurve c = flat(0.0);
  for (int t = 60; t < 100; ++t) c.scores[static_cast<std::size_t>(t)] = 0.9;
  auto v = evaluation::toa(c, 0.5, 90, 10.0);
  REQUIRE(v.has_value());
  CHECK(*v == doctest::Approx(3.0));  // (90 - 60) / 10

  ForecastCurve at_y = flat(0.0);
  at_y.scores[90] = 1.0;
  v = evaluation::toa(at_y, 0.5, 90, 10.0);
  REQUIRE(v.has_value());
  CHECK(*v == 0.0);

  CHECK_FALSE(evaluation::toa(flat(0.1), 0.5, 90, 10.0).has_value());
  // Crossing only after y does not alarm.
  ForecastCurve late = flat(0.0);
  late.scores[95] = 1.0;
  CHECK_FALSE(evaluation::toa(late, 0.5, 90, 10.0).has_value());

  CHECK_THROWS_AS(evaluation::toa(c, 1.5, 90, 10.0), std::invalid_argument);
  CHECK_THROWS_AS(evaluation::toa(c, 0.5, 200, 10.0), std::invalid_argument);
  CHECK_THROWS_AS(evaluation::toa(c, 0.5, 90, 0.0), std::invalid_argument);
}

TEST_CASE("toa is nonincreasing in the threshold") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    ForecastCurve c;
    for (int t = 0; t < 100; ++t) c.scores.push_back(rng.uniform());
    double prev = 1e300;
    for (double th = 0.0; th <= 1.0; th += 0.1) {
      const auto v = evaluation::toa(c, th, 90, 10.0);
      const double now = v ? *v : -1.0;  // no-alarm sorts below any alarm
      CHECK(now <= prev + 1e-12);
      prev = now;
    }
  }
}

TEST_CASE("perfect and degenerate forecasters") {
  std::vector<PositiveCurve> pos;
  for (int i = 0; i < 5; ++i) pos.push_back({flat(1.0), 90});
  std::vector<ForecastCurve> neg(4, flat(0.0));
  const auto report = evaluation::forecast_curve_eval(pos, neg, {}, 10.0);
  CHECK(report.ap == doctest::Approx(1.0).epsilon(1e-12));
  for (const auto& pt : report.points)
    if (pt.theta < 1.0) {
      CHECK(pt.recall == 1.0);
      CHECK(pt.precision == 1.0);
    }

  // All-zero scores: no operating point with recall > 0, AP = 0.
  std::vector<PositiveCurve> dead;
  for (int i = 0; i < 3; ++i) dead.push_back({flat(0.0), 90});
  const auto zero = evaluation::forecast_curve_eval(dead, neg, {}, 10.0);
  CHECK(zero.ap == 0.0);
  for (const auto& pt : zero.points) CHECK(pt.recall == 0.0);
  CHECK_FALSE(zero.mean_toa.has_value());
  CHECK_FALSE(zero.toa_at_recall.has_value());
}

TEST_CASE("sweep matches the per-threshold recount oracle within 1e-9") {
  Rng rng(13);
  std::vector<PositiveCurve> pos;
  std::vector<ForecastCurve> neg;
  for (int i = 0; i < 10; ++i) {
    ForecastCurve c = flat(0.0);
    // Hand-planted crossing: ramp up before the accident at a random frame.
    const int first = static_cast<int>(rng.uniform_int(20, 89));
    const double level = rng.uniform(0.2, 0.95);
    for (int t = first; t < 100; ++t)
      c.scores[static_cast<std::size_t>(t)] = std::min(1.0, level + 0.002 * (t - first));
    pos.push_back({c, 90});
    ForecastCurve n = flat(0.0);
    const double noise = rng.uniform(0.0, 0.6);
    for (int t = 0; t < 100; ++t)
      n.scores[static_cast<std::size_t>(t)] = noise * rng.uniform();
    neg.push_back(n);
  }
  const auto grid = evaluation::default_theta_grid();
  const auto report = evaluation::forecast_curve_eval(pos, neg, grid, 10.0);
  const auto oracle = sweep_recount(pos, neg, grid, 10.0);
  CHECK(std::abs(report.ap - oracle.ap) < 1e-9);
  REQUIRE(report.mean_toa.has_value());
  REQUIRE(oracle.mtoa.has_value());
  CHECK(std::abs(*report.mean_toa - *oracle.mtoa) < 1e-9);
  REQUIRE(report.points.size() == oracle.recalls.size());
  for (std::size_t i = 0; i < report.points.size(); ++i) {
    CHECK(std::abs(report.points[i].recall - oracle.recalls[i]) < 1e-12);
    CHECK(std::abs(report.points[i].precision - oracle.precisions[i]) < 1e-12);
  }
  // Recall monotone nonincreasing in theta (points are theta-descending).
  for (std::size_t i = 1; i < report.points.size(); ++i)
    CHECK(report.points[i].recall >= report.points[i - 1].recall);
}

TEST_CASE("threshold reparameterization leaves operating points unchanged") {
  Rng rng(29);
  std::vector<PositiveCurve> pos;
  std::vector<ForecastCurve> neg;
  for (int i = 0; i < 6; ++i) {
    ForecastCurve c;
    for (int t = 0; t < 100; ++t) c.scores.push_back(rng.uniform());
    pos.push_back({c, 90});
    ForecastCurve n;
    for (int t = 0; t < 100; ++t) n.scores.push_back(rng.uniform(0.0, 0.7));
    neg.push_back(n);
  }
  std::vector<double> grid;
  for (int i = 0; i <= 100; ++i) grid.push_back(i / 100.0);
  const auto base = evaluation::forecast_curve_eval(pos, neg, grid, 10.0);

  // Square every score (strictly increasing on [0,1]) and sweep the squared
  // grid: identical (recall, precision) points.
  auto pos2 = pos;
  for (auto& p : pos2)
    for (auto& s : p.curve.scores) s = s * s;
  auto neg2 = neg;
  for (auto& n : neg2)
    for (auto& s : n.scores) s = s * s;
  std::vector<double> grid2;
  for (double th : grid) grid2.push_back(th * th);
  const auto mapped = evaluation::forecast_curve_eval(pos2, neg2, grid2, 10.0);
  REQUIRE(base.points.size() == mapped.points.size());
  for (std::size_t i = 0; i < base.points.size(); ++i) {
    CHECK(base.points[i].recall == mapped.points[i].recall);
    CHECK(base.points[i].precision == mapped.points[i].precision);
  }
}

TEST_CASE("toa at the recall target interpolates between bracketing points") {
  // Three positives alarm early (lead 30 frames, score 0.9); two alarm low
  // (lead 10 frames, score 0.3). Recall jumps 0.6 -> 1.0 across theta 0.3.
  std::vector<PositiveCurve> pos;
  for (int i = 0; i < 3; ++i) {
    ForecastCurve c = flat(0.0);
    for (int t = 60; t < 100; ++t) c.scores[static_cast<std::size_t>(t)] = 0.9;
    pos.push_back({c, 90});
  }
  for (int i = 0; i < 2; ++i) {
    ForecastCurve c = flat(0.0);
    for (int t = 80; t < 100; ++t) c.scores[static_cast<std::size_t>(t)] = 0.3;
    pos.push_back({c, 90});
  }
  std::vector<ForecastCurve> neg(3, flat(0.0));
  std::vector<double> grid = {0.0, 0.5, 1.0};
  const auto report = evaluation::forecast_curve_eval(pos, neg, grid, 10.0, 0.8);
  // theta=0.5: recall 0.6, mean ToA 3.0 s; theta=0.0: recall 1.0,
  // mean ToA (3*3 + 2*1)/5 = 2.2 s. Interpolating at recall 0.8 -> 2.6 s.
  REQUIRE(report.toa_at_recall.has_value());
  CHECK(*report.toa_at_recall == doctest::Approx(2.6).epsilon(1e-12));

  // Recall never reaching the target reports unavailable.
  std::vector<PositiveCurve> weak = {pos[3], pos[4]};
  std::vector<PositiveCurve> mixed = {pos[0], pos[3], pos[4]};
  const auto low = evaluation::forecast_curve_eval(mixed, neg, {0.5, 1.0}, 10.0, 0.8);
  CHECK_FALSE(low.toa_at_recall.has_value());
  (void)weak;
}

TEST_CASE("report serialization and curve plotting round trip") {
  namespace fs = std::filesystem;
  std::vector<PositiveCurve> pos = {{flat(1.0), 90}, {flat(0.8), 90}};
  std::vector<ForecastCurve> neg = {flat(0.05)};
  const auto report = evaluation::forecast_curve_eval(pos, neg, {}, 10.0);
  const auto kv = report.to_kv();
  CHECK(config::has(kv, "ap"));
  CHECK(config::has(kv, "mtoa"));
  CHECK(report.to_text().find("AP") != std::string::npos);

  const fs::path dir = fs::temp_directory_path() / "crashcast_test_eval";
  fs::create_directories(dir);
  report.save_curve(dir / "curve.txt");
  const auto curve = plot::load_curve_file(dir / "curve.txt");
  CHECK(curve.theta.size() == report.points.size());
  plot::plot_curves(dir / "curve.txt", dir / "pr.ppm", dir / "toa.ppm");
  CHECK(fs::exists(dir / "pr.ppm"));
  const Image img = Image::load_ppm(dir / "pr.ppm");
  CHECK(img.width() == 640);
  fs::remove_all(dir);
}
