#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <vector>

#include "crashcast/geometry.hpp"
#include "crashcast/random.hpp"
#include "oracles.hpp"

using namespace crashcast;
using geometry::BoundingBox;
using geometry::Detection;
using oracles::iou_rasterized;
using oracles::nms_oracle;
using oracles::random_int_box;
using oracles::same_detections;

TEST_CASE("iou identity, disjoint, and a hand case") {
  const BoundingBox a{0, 0, 10, 10};
  CHECK(geometry::iou(a, a) == doctest::Approx(1.0));
  CHECK(geometry::iou(a, {20, 20, 30, 30}) == 0.0);
  // (0,0,10,10) vs (5,0,15,10): intersection 50, union 150.
  const double v = geometry::iou(a, {5, 0, 15, 10});
  CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(v == iou_rasterized(a, {5, 0, 15, 10}));
}

TEST_CASE("iou rejects degenerate boxes") {
  CHECK_THROWS_AS(geometry::iou({0, 0, 0, 10}, {0, 0, 10, 10}), std::invalid_argument);
  CHECK_THROWS_AS(geometry::iou({0, 0, 10, 10}, {5, 5, 5, 9}), std::invalid_argument);
}

TEST_CASE("iou matches the rasterized oracle exactly on random integer boxes") {
  Rng rng(42);
  for (int i = 0; i < 1000; ++i) {
    const auto a = random_int_box(rng, 64);
    const auto b = random_int_box(rng, 64);
    const double analytic = geometry::iou(a, b);
    CHECK(analytic == iou_rasterized(a, b));  // exact, both are small-integer ratios
    CHECK(analytic == geometry::iou(b, a));
  }
}

TEST_CASE("nms keeps the higher-scoring of two heavily overlapping boxes") {
  // (0,0,10,10) vs (0,0,10,8): intersection 80, union 100 -> IoU 0.8.
  std::vector<Detection> dets = {{{0, 0, 10, 10}, 0.9, 0}, {{0, 0, 10, 8}, 0.8, 0}};
  const auto kept = nms(dets, 0.7);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9);
  CHECK(same_detections(kept, nms_oracle(dets, 0.7)));
}

TEST_CASE("nms trivial cases") {
  std::vector<Detection> one = {{{0, 0, 4, 4}, 0.5, 1}};
  CHECK(same_detections(nms(one, 0.7), one));

  std::vector<Detection> disjoint = {{{0, 0, 4, 4}, 0.4, 0}, {{10, 10, 14, 14}, 0.6, 0}};
  const auto kept = nms(disjoint, 0.7);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].score == 0.6);  // sorted by descending score
  CHECK(kept[1].score == 0.4);
}

TEST_CASE("nms rejects bad thresholds and scores") {
  std::vector<Detection> dets = {{{0, 0, 4, 4}, 0.5, 0}};
  CHECK_THROWS_AS(nms(dets, -0.1), std::invalid_argument);
  CHECK_THROWS_AS(nms(dets, 1.1), std::invalid_argument);
  std::vector<Detection> bad = {{{0, 0, 4, 4}, 1.5, 0}};
  CHECK_THROWS_AS(nms(bad, 0.5), std::invalid_argument);
}

TEST_CASE("nms equals the oracle and is input-order independent") {
  Rng rng(7);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(1, 10));
    std::vector<Detection> dets;
    std::vector<double> scores;
    for (int i = 0; i < n; ++i) {
      double s;
      do {
        s = rng.uniform();
      } while (std::find(scores.begin(), scores.end(), s) != scores.end());
      scores.push_back(s);
      dets.push_back({random_int_box(rng, 32), s, 0});
    }
    const double thr = rng.uniform();
    const auto kept = nms(dets, thr);
    CHECK(same_detections(kept, nms_oracle(dets, thr)));

    // Survivors pairwise respect the overlap bound; every suppressed box has
    // a strictly better kept suppressor.
    for (std::size_t i = 0; i < kept.size(); ++i)
      for (std::size_t j = i + 1; j < kept.size(); ++j)
        CHECK(geometry::iou(kept[i].box, kept[j].box) <= thr);
    for (const auto& d : dets) {
      const bool was_kept =
          std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
            return k.box == d.box && k.score == d.score;
          });
      if (was_kept) continue;
      const bool suppressed =
          std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
            return k.score > d.score && geometry::iou(k.box, d.box) > thr;
          });
      CHECK(suppressed);
    }

    // Same set under a shuffled input order (scores are distinct).
    auto shuffled = dets;
    rng.shuffle(shuffled);
    CHECK(same_detections(nms(shuffled, thr), kept));
  }
}

TEST_CASE("nms breaks score ties by input order") {
  std::vector<Detection> dets = {{{0, 0, 10, 10}, 0.5, 0}, {{0, 0, 10, 9}, 0.5, 1}};
  const auto kept = nms(dets, 0.5);  // IoU 0.9 > 0.5 suppresses the later one
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].category == 0);
}

TEST_CASE("should_mine gate") {
  // 100x90 box in a 1280x720 image at alpha 0.01: 9000 <= 9216.
  CHECK(geometry::should_mine({0, 0, 100, 90}, 1280.0 * 720.0, 0.01));
  CHECK_FALSE(geometry::should_mine({0, 0, 1280, 720}, 1280.0 * 720.0, 0.01));
  CHECK_FALSE(geometry::should_mine({0, 0, 1, 1}, 1280.0 * 720.0, 0.0));
  CHECK_THROWS_AS(geometry::should_mine({0, 0, 1, 1}, -5.0, 0.01), std::invalid_argument);
  CHECK_THROWS_AS(geometry::should_mine({0, 0, 1, 1}, 100.0, 1.5), std::invalid_argument);
}

TEST_CASE("should_mine is monotone under shrinking") {
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const auto box = random_int_box(rng, 200);
    const double image_area = 400.0 * 300.0;
    const double alpha = rng.uniform();
    if (!geometry::should_mine(box, image_area, alpha)) continue;
    // Any shrunken version must still pass the gate.
    const double sx = rng.uniform(0.2, 1.0), sy = rng.uniform(0.2, 1.0);
    BoundingBox small{box.x1, box.y1, box.x1 + std::max(0.5, box.width() * sx),
                      box.y1 + std::max(0.5, box.height() * sy)};
    CHECK(geometry::should_mine(small, image_area, alpha));
  }
}

TEST_CASE("mine_cm constructs concentric contexts") {
  const geometry::ImageDims img{1280, 720};
  const auto set = geometry::mine_cm({100, 100, 110, 110}, 2, 2, img);
  REQUIRE(set.contexts.size() == 2);
  CHECK(set.contexts[0] == BoundingBox{98, 98, 112, 112});
  CHECK(set.contexts[1] == BoundingBox{96, 96, 114, 114});
  CHECK(set.dropped == 0);
  CHECK(set.mode == geometry::ContextMode::CM);
}

TEST_CASE("mine_cm clips at the image border") {
  const auto set = geometry::mine_cm({0, 0, 4, 4}, 1, 2, {640, 480});
  REQUIRE(set.contexts.size() == 1);
  CHECK(set.contexts[0] == BoundingBox{0, 0, 6, 6});
}

TEST_CASE("mine_cm n_c=16 s=4 grows 64 px per side") {
  const BoundingBox box{400, 400, 420, 420};
  const auto set = geometry::mine_cm(box, 16, 4, {1000, 1000});
  REQUIRE(set.contexts.size() == 16);
  CHECK(set.contexts.back() == BoundingBox{336, 336, 484, 484});  // +16*4 per side
  // Nesting: each context strictly contains its predecessor and the origin.
  for (std::size_t k = 0; k + 1 < set.contexts.size(); ++k) {
    CHECK(set.contexts[k + 1].x1 < set.contexts[k].x1);
    CHECK(set.contexts[k + 1].x2 > set.contexts[k].x2);
  }
  for (const auto& c : set.contexts) {
    CHECK(c.x1 <= box.x1);
    CHECK(c.y1 <= box.y1);
    CHECK(c.x2 >= box.x2);
    CHECK(c.y2 >= box.y2);
  }
}

TEST_CASE("mine_cm deduplicates identical clipped contexts") {
  const auto set = geometry::mine_cm({0, 0, 4, 4}, 3, 2, {6, 6});
  CHECK(set.contexts.size() == 1);  // all three clip to the full canvas
  CHECK(set.dropped == 2);
}

TEST_CASE("mine_acm enumerates the offset grid") {
  const auto set = geometry::mine_acm({100, 100, 110, 110}, 1, 1, 2, {1280, 720});
  CHECK(set.contexts.size() == 8);
  CHECK(set.dropped == 0);
  CHECK(set.mode == geometry::ContextMode::ACM);
}

TEST_CASE("mine_acm m=n=8 yields the full 288 grid away from borders") {
  const auto set = geometry::mine_acm({300, 300, 400, 400}, 8, 8, 4, {1000, 1000});
  CHECK(set.contexts.size() == 288);  // 17*17 - 1
  CHECK(set.dropped == 0);
}

TEST_CASE("mine_acm drops degenerate narrowings") {
  // 4x4 box, stride 2: i=-1 removes all width, j=-1 removes all height, so
  // the five offsets with a -1 component (including (-1,-1)) are dropped.
  const auto set = geometry::mine_acm({10, 10, 14, 14}, 1, 1, 2, {640, 480});
  CHECK(set.dropped == 5);
  CHECK(set.contexts.size() == 3);
  for (const auto& c : set.contexts) CHECK(c.valid());
}

TEST_CASE("mine_acm set size accounting holds on random inputs") {
  Rng rng(23);
  for (int i = 0; i < 200; ++i) {
    const auto box = random_int_box(rng, 100);
    const int m = static_cast<int>(rng.uniform_int(1, 4));
    const int n = static_cast<int>(rng.uniform_int(1, 4));
    const int s = static_cast<int>(rng.uniform_int(1, 6));
    const auto set = geometry::mine_acm(box, m, n, s, {120, 120});
    CHECK(static_cast<int>(set.contexts.size()) + set.dropped == (2 * m + 1) * (2 * n + 1) - 1);
    for (const auto& c : set.contexts) CHECK(c.valid());
  }
}

TEST_CASE("context miners validate their inputs") {
  CHECK_THROWS_AS(geometry::mine_cm({0, 0, 4, 4}, 0, 2, {64, 64}), std::invalid_argument);
  CHECK_THROWS_AS(geometry::mine_cm({0, 0, 4, 4}, 2, 0, {64, 64}), std::invalid_argument);
  CHECK_THROWS_AS(geometry::mine_acm({0, 0, 4, 4}, 0, 1, 2, {64, 64}), std::invalid_argument);
  CHECK_THROWS_AS(geometry::mine_cm({4, 4, 4, 8}, 1, 1, {64, 64}), std::invalid_argument);
}
