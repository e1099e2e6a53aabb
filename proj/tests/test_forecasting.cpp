#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "crashcast/forecasting.hpp"

using namespace crashcast;
using forecasting::ForecastCurve;
using forecasting::ForecasterConfig;
using forecasting::SegmentSample;

namespace {

ForecasterConfig micro_config(int d, int k) {
  ForecasterConfig cfg;
  cfg.hidden_size = 6;
  cfg.attention_size = 4;
  cfg.feature_dim = d;
  cfg.max_objects = k;
  cfg.seed = 2;
  return cfg;
}

/// Segment whose features carry a constant signature; positives and
/// negatives are trivially separable.
SegmentSample signed_segment(int frames, int d, int k, double sign, bool positive, Rng& rng) {
  SegmentSample s;
  s.video_id = positive ? "pos" : "neg";
  s.positive = positive;
  s.accident_index = positive ? std::min(frames - 1, forecasting::kAccidentIndex) : -1;
  s.full = Tensor({frames, d});
  s.objects = Tensor({frames, k, d});
  s.mask = Tensor({frames, k});
  for (int t = 0; t < frames; ++t) {
    for (int j = 0; j < d; ++j) s.full.at(t, j) = sign * 0.8 + 0.05 * rng.normal();
    for (int o = 0; o < k; ++o) {
      const bool valid = rng.uniform() < 0.8;
      s.mask.at(t, o) = valid ? 1.0 : 0.0;
      if (valid)
        for (int j = 0; j < d; ++j) s.objects.at(t, o, j) = sign * 0.5 + 0.05 * rng.normal();
    }
  }
  return s;
}

}  // namespace

TEST_CASE("positive frame weights: exponential before the accident, one after") {
  const int y = forecasting::kAccidentIndex;
  for (int t = 0; t < forecasting::kSegmentLength; ++t) {
    const double w = forecasting::positive_frame_weight(t, y);
    if (t >= y)
      CHECK(w == 1.0);
    else
      CHECK(w == doctest::Approx(std::exp(-(double)(y - t))).epsilon(1e-15));
  }
  // Nondecreasing in t up to y.
  for (int t = 1; t <= y; ++t)
    CHECK(forecasting::positive_frame_weight(t, y) >=
          forecasting::positive_frame_weight(t - 1, y));
}

TEST_CASE("positive_loss hand oracles") {
  ForecastCurve ones;
  ones.scores.assign(100, 1.0);
  CHECK(forecasting::positive_loss(ones, 90) == 0.0);

  // Single frame at t = y with a = e^-1: weight 1, -log(e^-1) = 1.
  ForecastCurve single;
  single.scores = {std::exp(-1.0)};
  CHECK(std::abs(forecasting::positive_loss(single, 0) - 1.0) < 1e-12);

  // Single informative frame at t = y - 10 with a = 0.5; all other frames 1.
  ForecastCurve early;
  early.scores.assign(11, 1.0);
  early.scores[0] = 0.5;
  const double expect = std::exp(-10.0) * std::log(2.0);
  CHECK(std::abs(forecasting::positive_loss(early, 10) - expect) < 1e-12);

  // At t = y the per-frame term is exactly the plain cross-entropy term.
  ForecastCurve at_y;
  at_y.scores = {0.37};
  CHECK(forecasting::positive_loss(at_y, 0) == -std::log(0.37));

  CHECK_THROWS_AS(forecasting::positive_loss(single, 5), std::invalid_argument);
}

TEST_CASE("negative_loss hand oracles") {
  ForecastCurve zeros;
  zeros.scores.assign(100, 0.0);
  CHECK(forecasting::negative_loss(zeros) == 0.0);

  ForecastCurve half;
  half.scores.assign(100, 0.5);
  CHECK(std::abs(forecasting::negative_loss(half) - 100.0 * std::log(2.0)) < 1e-12);

  ForecastCurve one_frame;
  one_frame.scores = {1.0 - std::exp(-1.0)};
  CHECK(std::abs(forecasting::negative_loss(one_frame) - 1.0) < 1e-12);

  ForecastCurve bad;
  bad.scores = {1.5};
  CHECK_THROWS_AS(forecasting::negative_loss(bad), std::invalid_argument);
}

TEST_CASE("dsa_step attention normalization and masking") {
  const int d = 5;
  forecasting::DsaLstm model;
  model.cfg = micro_config(d, 3);
  model.initialize(7);
  auto state = forecasting::initial_state(model);
  Rng rng(9);

  // K = 1 valid object gets all the attention.
  Tensor one_obj({1, d});
  for (int j = 0; j < d; ++j) one_obj.at(0, j) = rng.normal();
  Tensor full({d});
  for (int j = 0; j < d; ++j) full[j] = rng.normal();
  auto r1 = forecasting::dsa_step(model, state, full, one_obj, {1});
  CHECK(r1.attention_weights[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r1.accident_score > 0.0);
  CHECK(r1.accident_score < 1.0);

  // Two identical objects split the attention evenly.
  Tensor twin({2, d});
  for (int j = 0; j < d; ++j) twin.at(0, j) = twin.at(1, j) = rng.normal();
  auto r2 = forecasting::dsa_step(model, state, full, twin, {1, 1});
  CHECK(r2.attention_weights[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r2.attention_weights[1] == doctest::Approx(0.5).epsilon(1e-12));

  // Property sweep: weights over valid slots sum to 1 within 1e-6, masked
  // slots get exactly zero; all-masked frames still produce a score.
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 1 + static_cast<int>(rng.uniform_int(0, 3));
    Tensor objs({k, d});
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(k));
    bool any = false;
    for (int o = 0; o < k; ++o) {
      mask[static_cast<std::size_t>(o)] = rng.uniform() < 0.7 ? 1 : 0;
      any = any || mask[static_cast<std::size_t>(o)];
      for (int j = 0; j < d; ++j) objs.at(o, j) = rng.normal();
    }
    Tensor f({d});
    for (int j = 0; j < d; ++j) f[j] = rng.normal();
    const auto r = forecasting::dsa_step(model, state, f, objs, mask);
    double sum = 0.0;
    for (int o = 0; o < k; ++o) {
      if (!mask[static_cast<std::size_t>(o)]) CHECK(r.attention_weights[static_cast<std::size_t>(o)] == 0.0);
      sum += r.attention_weights[static_cast<std::size_t>(o)];
    }
    if (any)
      CHECK(std::abs(sum - 1.0) < 1e-6);
    else
      CHECK(sum == 0.0);
    CHECK(r.accident_score > 0.0);
    CHECK(r.accident_score < 1.0);
    state = r.state;  // walk the recurrence as well
  }

  // Dimension mismatch is rejected.
  Tensor wrong({2, d + 1});
  CHECK_THROWS_AS(forecasting::dsa_step(model, state, full, wrong, {1, 1}),
                  std::invalid_argument);
  CHECK_THROWS_AS(forecasting::dsa_step(model, state, Tensor({d + 2}), one_obj, {1}),
                  std::invalid_argument);
}

TEST_CASE("forward pass is deterministic") {
  Rng rng(3);
  auto seg = signed_segment(20, 4, 2, 1.0, true, rng);
  forecasting::DsaLstm model;
  model.cfg = micro_config(4, 2);
  model.initialize(5);
  const auto c1 = forecasting::forecast(model, seg);
  const auto c2 = forecasting::forecast(model, seg);
  REQUIRE(c1.scores.size() == 20);
  for (std::size_t i = 0; i < c1.scores.size(); ++i) CHECK(c1.scores[i] == c2.scores[i]);
}

TEST_CASE("mine_segments window arithmetic") {
  const int d = 3, frames = 400;
  data::VideoRecord video;
  video.id = "v";
  video.frame_count = frames;
  video.fps = 10;
  video.width = 64;
  video.height = 64;
  video.events.push_back({120, 130});
  std::vector<forecasting::FrameFeatures> feats(static_cast<std::size_t>(frames));
  for (int f = 0; f < frames; ++f) {
    feats[static_cast<std::size_t>(f)].full = Tensor({d});
    feats[static_cast<std::size_t>(f)].full[0] = static_cast<double>(f);  // frame fingerprint
    Tensor obj({d});
    obj[0] = 1000.0 + f;
    feats[static_cast<std::size_t>(f)].objects.push_back(obj);
  }
  forecasting::MinerConfig mcfg;
  mcfg.max_objects = 4;
  mcfg.seed = 13;
  const auto result = forecasting::mine_segments(video, feats, mcfg);
  REQUIRE(result.samples.size() == 2);  // one positive, one negative
  const auto& pos = result.samples[0];
  CHECK(pos.positive);
  CHECK(pos.window_start == 30);
  CHECK(pos.accident_index == 90);
  CHECK(pos.dummy_prefix == 0);
  CHECK(pos.length() == 100);
  CHECK(pos.full.at(0, 0) == 30.0);    // first frame is video frame 30
  CHECK(pos.full.at(90, 0) == 120.0);  // accident frame lands at index 90
  CHECK(pos.full.at(99, 0) == 129.0);
  CHECK(pos.mask.at(0, 0) == 1.0);
  CHECK(pos.mask.at(0, 1) == 0.0);  // only one object provided

  const auto& neg = result.samples[1];
  CHECK_FALSE(neg.positive);
  CHECK(neg.length() == 100);
  // Zero overlap with the positive window [30, 129].
  const int lo = neg.window_start, hi = neg.window_start + 99;
  CHECK((hi < 30 || lo > 129));
  CHECK(result.warnings.empty());
}

TEST_CASE("mine_segments pads early accidents with dummies") {
  const int d = 2;
  data::VideoRecord video;
  video.id = "v";
  video.frame_count = 300;
  video.fps = 10;
  video.width = 64;
  video.height = 64;
  video.events.push_back({50, 60});
  video.events.push_back({90, 95});
  std::vector<forecasting::FrameFeatures> feats(300);
  for (int f = 0; f < 300; ++f) {
    feats[static_cast<std::size_t>(f)].full = Tensor({d});
    feats[static_cast<std::size_t>(f)].full[0] = f + 1.0;  // nonzero fingerprint
  }
  forecasting::MinerConfig mcfg;
  const auto result = forecasting::mine_segments(video, feats, mcfg);
  REQUIRE(result.samples.size() == 3);

  const auto& early = result.samples[0];  // accident at frame 50
  CHECK(early.dummy_prefix == 40);
  CHECK(early.window_start == -40);
  CHECK(early.accident_index == 90);
  for (int t = 0; t < 40; ++t) {
    CHECK(early.full.at(t, 0) == 0.0);  // dummy frames carry zero features
    CHECK(early.mask.at(t, 0) == 0.0);
  }
  CHECK(early.full.at(40, 0) == 1.0);   // video frame 0
  CHECK(early.full.at(90, 0) == 51.0);  // video frame 50

  const auto& boundary = result.samples[1];  // accident at frame 90
  CHECK(boundary.dummy_prefix == 0);
  CHECK(boundary.window_start == 0);

  // Negative avoids both positive windows.
  const auto& neg = result.samples[2];
  for (const auto& win : {std::pair{0, 59}, std::pair{0, 99}})
    CHECK((neg.window_start + 99 < win.first || neg.window_start > win.second));
  CHECK(neg.window_start >= 100);  // only the tail is free here
}

TEST_CASE("mine_segments emits a warning when no negative window exists") {
  data::VideoRecord video;
  video.id = "tight";
  video.frame_count = 150;
  video.fps = 10;
  video.width = 64;
  video.height = 64;
  video.events.push_back({75, 80});  // positive window [0..84] leaves no free 100 frames
  std::vector<forecasting::FrameFeatures> feats(150);
  for (auto& f : feats) f.full = Tensor({2});
  const auto result = forecasting::mine_segments(video, feats, {});
  CHECK(result.samples.size() == 1);
  REQUIRE(result.warnings.size() == 1);
  CHECK(result.warnings[0].find("tight") != std::string::npos);

  data::VideoRecord no_events = video;
  no_events.events.clear();
  CHECK_THROWS_AS(forecasting::mine_segments(no_events, feats, {}), std::invalid_argument);
  std::vector<forecasting::FrameFeatures> short_feats(10);
  CHECK_THROWS_AS(forecasting::mine_segments(video, short_feats, {}), std::invalid_argument);
}

TEST_CASE("paper-default epochs and training input validation") {
  CHECK(ForecasterConfig().epochs == 40);
  CHECK(ForecasterConfig().hidden_size == 256);
  CHECK(ForecasterConfig().feature_dim == 2048);
  CHECK(ForecasterConfig().grad_clip == 5.0);
  CHECK(ForecasterConfig().learning_rate == 1e-4);

  Rng rng(1);
  auto pos = signed_segment(10, 3, 2, 1.0, true, rng);
  auto neg = signed_segment(10, 3, 2, -1.0, false, rng);
  ForecasterConfig cfg = micro_config(3, 2);
  CHECK_THROWS_WITH_AS(forecasting::train_forecaster({neg}, cfg), doctest::Contains("no positive"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(forecasting::train_forecaster({pos}, cfg), doctest::Contains("no negative"),
                       std::invalid_argument);
}

TEST_CASE("overfit one positive and one negative segment") {
  Rng rng(21);
  const int d = 4, k = 2;
  auto pos = signed_segment(100, d, k, 1.0, true, rng);
  auto neg = signed_segment(100, d, k, -1.0, false, rng);
  ForecasterConfig cfg = micro_config(d, k);
  cfg.learning_rate = 0.02;
  cfg.epochs = 150;
  forecasting::ForecastTrainTrace trace;
  const auto model = forecasting::train_forecaster({pos, neg}, cfg, &trace);
  REQUIRE(trace.epoch_losses.size() == 150);
  CHECK(trace.epoch_losses.back() < 0.1);
  CHECK(trace.epoch_losses.back() < trace.epoch_losses.front());

  // Scores behave on held-back shapes of the same signature.
  const auto pc = forecasting::forecast(model, pos);
  const auto nc = forecasting::forecast(model, neg);
  CHECK(pc.scores[95] > 0.9);
  CHECK(nc.scores[95] < 0.1);
}

TEST_CASE("training is deterministic given a seed") {
  Rng rng(33);
  const int d = 3, k = 2;
  auto pos = signed_segment(30, d, k, 1.0, true, rng);
  pos.accident_index = 25;
  auto neg = signed_segment(30, d, k, -1.0, false, rng);
  ForecasterConfig cfg = micro_config(d, k);
  cfg.epochs = 5;
  const auto m1 = forecasting::train_forecaster({pos, neg}, cfg);
  const auto m2 = forecasting::train_forecaster({pos, neg}, cfg);
  const auto c1 = forecasting::forecast(m1, pos);
  const auto c2 = forecasting::forecast(m2, pos);
  for (std::size_t i = 0; i < c1.scores.size(); ++i) CHECK(c1.scores[i] == c2.scores[i]);
}

TEST_CASE("segment loss gradients match finite differences on a micro-segment") {
  Rng rng(8);
  const int d = 4, k = 2, frames = 5;
  auto seg = signed_segment(frames, d, k, 0.7, true, rng);
  seg.accident_index = 3;
  forecasting::DsaLstm model;
  model.cfg = micro_config(d, k);
  model.cfg.hidden_size = 3;
  model.cfg.attention_size = 3;
  model.initialize(4);

  auto params = model.params();
  auto loss = forecasting::segment_loss_graph(model, seg);
  nn::reset_grads(params);
  nn::backward(loss);
  std::vector<Tensor> analytic;
  for (const auto& p : params) analytic.push_back(p->grad);

  const double h = 1e-6;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (int i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double f1 = nn::scalar_value(forecasting::segment_loss_graph(model, seg));
      p->value[i] = orig - h;
      const double f0 = nn::scalar_value(forecasting::segment_loss_graph(model, seg));
      p->value[i] = orig;
      const double numeric = (f1 - f0) / (2 * h);
      const double err =
          std::abs(analytic[pi][i] - numeric) / std::max({1.0, std::abs(numeric)});
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("segment cache round trip") {
  namespace fs = std::filesystem;
  Rng rng(12);
  std::vector<SegmentSample> samples;
  samples.push_back(signed_segment(100, 5, 3, 1.0, true, rng));
  samples.push_back(signed_segment(100, 5, 3, -1.0, false, rng));
  samples[0].dummy_prefix = 12;
  samples[0].window_start = -12;
  samples[0].event_frame = 78;
  const fs::path file = fs::temp_directory_path() / "crashcast_test_segments.bin";
  forecasting::save_segments(file, samples);
  const auto loaded = forecasting::load_segments(file);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].video_id == samples[0].video_id);
  CHECK(loaded[0].positive);
  CHECK(loaded[0].accident_index == samples[0].accident_index);
  CHECK(loaded[0].dummy_prefix == 12);
  CHECK(loaded[0].window_start == -12);
  CHECK(loaded[0].event_frame == 78);
  for (int i = 0; i < samples[0].full.size(); ++i) CHECK(loaded[0].full[i] == samples[0].full[i]);
  for (int i = 0; i < samples[0].objects.size(); ++i)
    CHECK(loaded[0].objects[i] == samples[0].objects[i]);
  for (int i = 0; i < samples[0].mask.size(); ++i) CHECK(loaded[0].mask[i] == samples[0].mask[i]);
  fs::remove(file);
  CHECK_THROWS_AS(forecasting::load_segments(file), std::runtime_error);
}

TEST_CASE("forecaster checkpoint round trip and readiness") {
  namespace fs = std::filesystem;
  forecasting::DsaLstm model;
  model.cfg = micro_config(4, 2);
  model.initialize(19);
  const fs::path dir = fs::temp_directory_path() / "crashcast_test_fc_ckpt";
  fs::remove_all(dir);
  forecasting::save_checkpoint(model, dir);
  const auto loaded = forecasting::load_checkpoint(dir);
  CHECK(loaded.cfg.feature_dim == 4);
  Rng rng(2);
  auto seg = signed_segment(15, 4, 2, 1.0, true, rng);
  seg.accident_index = 10;
  const auto c1 = forecasting::forecast(model, seg);
  const auto c2 = forecasting::forecast(loaded, seg);
  for (std::size_t i = 0; i < c1.scores.size(); ++i) CHECK(c1.scores[i] == c2.scores[i]);
  fs::remove_all(dir);

  forecasting::DsaLstm cold;
  cold.cfg = micro_config(4, 2);
  CHECK_THROWS_WITH_AS(forecasting::forecast(cold, seg), doctest::Contains("not ready"),
                       std::runtime_error);
}
