#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "crashcast/autodiff.hpp"
#include "crashcast/checkpoint.hpp"
#include "crashcast/config.hpp"
#include "crashcast/data.hpp"
#include "crashcast/geometry.hpp"
#include "crashcast/image.hpp"
#include "crashcast/random.hpp"
#include "crashcast/tensor.hpp"

namespace crashcast::detection {

using geometry::BoundingBox;
using geometry::Detection;
using geometry::ImageDims;

// ---------------------------------------------------------------------------
// losses

/// Probabilities are floored here before entering a log.
inline constexpr double kProbabilityFloor = 1e-12;

/// 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
inline double smooth_l1(double x) {
  if (!std::isfinite(x)) throw std::invalid_argument("smooth_l1: non-finite input");
  const double ax = std::abs(x);
  return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
}

/// Sum of smooth-L1 penalties over the four box-delta coordinates.
inline double regression_loss(const std::array<double, 4>& predicted,
                              const std::array<double, 4>& target) {
  double loss = 0.0;
  for (int i = 0; i < 4; ++i) loss += smooth_l1(predicted[i] - target[i]);
  return loss;
}

/// -log of the probability assigned to the true class.
inline double classification_loss(double p_u) {
  if (p_u < 0.0 || p_u > 1.0)
    throw std::invalid_argument("classification_loss: probability outside [0,1]");
  return -std::log(std::max(p_u, kProbabilityFloor));
}

inline double classification_loss(const std::vector<double>& p_u) {
  double loss = 0.0;
  for (double p : p_u) loss += classification_loss(p);
  return loss;
}

// ---------------------------------------------------------------------------
// anchors

struct AnchorConfig {
  std::vector<double> scales = {128.0 * 128.0, 256.0 * 256.0, 512.0 * 512.0};  // areas, px^2
  std::vector<double> ratios = {1.0, 2.0, 0.5};  // width : height
  int image_short_side = 600;

  int anchors_per_location() const {
    return static_cast<int>(scales.size() * ratios.size());
  }
};

/// Anchor (width, height) pairs: w = sqrt(area * ratio), h = sqrt(area / ratio),
/// so every anchor hits its configured area exactly.
inline std::vector<std::pair<double, double>> anchor_shapes(const AnchorConfig& cfg) {
  if (cfg.scales.empty() || cfg.ratios.empty())
    throw std::invalid_argument("anchor_shapes: scales and ratios must be non-empty");
  std::vector<std::pair<double, double>> shapes;
  for (double area : cfg.scales)
    for (double ratio : cfg.ratios)
      shapes.emplace_back(std::sqrt(area * ratio), std::sqrt(area / ratio));
  return shapes;
}

/// Anchors tiled over a feature map, ordered anchor-major to match the RPN
/// readout layout: index = (a * feat_h + y) * feat_w + x.
inline std::vector<BoundingBox> generate_anchors(const AnchorConfig& cfg, int feat_h, int feat_w,
                                                 double stride) {
  const auto shapes = anchor_shapes(cfg);
  std::vector<BoundingBox> anchors;
  anchors.reserve(shapes.size() * static_cast<std::size_t>(feat_h) * feat_w);
  for (const auto& [w, h] : shapes)
    for (int y = 0; y < feat_h; ++y)
      for (int x = 0; x < feat_w; ++x) {
        const double cx = (x + 0.5) * stride;
        const double cy = (y + 0.5) * stride;
        anchors.push_back({cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0});
      }
  return anchors;
}

// ---------------------------------------------------------------------------
// box-delta encoding (center/size log-space)

inline std::array<double, 4> encode_box_delta(const BoundingBox& reference,
                                              const BoundingBox& target) {
  const double rw = reference.width(), rh = reference.height();
  return {(target.center_x() - reference.center_x()) / rw,
          (target.center_y() - reference.center_y()) / rh, std::log(target.width() / rw),
          std::log(target.height() / rh)};
}

inline BoundingBox decode_box_delta(const BoundingBox& reference,
                                    const std::array<double, 4>& delta) {
  const double rw = reference.width(), rh = reference.height();
  const double cx = reference.center_x() + delta[0] * rw;
  const double cy = reference.center_y() + delta[1] * rh;
  const double w = rw * std::exp(std::clamp(delta[2], -6.0, 6.0));
  const double h = rh * std::exp(std::clamp(delta[3], -6.0, 6.0));
  return {cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0};
}

// ---------------------------------------------------------------------------
// configuration

enum class ContextMode { None, CM, ACM };

inline const char* context_mode_name(ContextMode m) {
  switch (m) {
    case ContextMode::None: return "none";
    case ContextMode::CM: return "cm";
    case ContextMode::ACM: return "acm";
  }
  return "?";
}

inline ContextMode context_mode_from_name(const std::string& s) {
  if (s == "none") return ContextMode::None;
  if (s == "cm") return ContextMode::CM;
  if (s == "acm") return ContextMode::ACM;
  throw std::runtime_error("unknown context mode: '" + s + "' (expected none|cm|acm)");
}

struct ContextSetting {
  ContextMode mode = ContextMode::None;
  int n_c = 16;       // CM: number of contexts
  int m = 8, n = 8;   // ACM: horizontal/vertical steps
  int stride = 4;     // step stride in pixels
  double alpha = 0.01;  // area-ratio gate: mine iff box_area <= alpha * image_area
};

struct DetectorConfig {
  // training objective
  double loss_balance = 1.0;  // lambda in L = L_cls + lambda * L_reg
  double learning_rate = 1e-5;
  int iterations = 2000;
  bool flip_horizontal = true;
  bool flip_vertical = true;
  std::uint64_t seed = 1;

  // candidate mining
  double nms_threshold = 0.7;          // proposal NMS
  double hard_negative_lo = 0.1;       // [lo, hi) is the hard-negative band
  double hard_negative_hi = 0.5;
  double positive_threshold = 0.5;     // confidence >= this is a positive
  int batch_candidates = 32;
  int positive_slots = 16;
  int rpn_batch = 64;
  int proposal_top_n_train = 48;
  int proposal_top_n_test = 64;

  // architecture (desk-scale backbone, stride 8)
  int backbone_channels = 16;
  int head_fc_width = 64;
  int roi_grid = 7;

  // inference
  double score_threshold = 0.5;
  double detection_nms_threshold = 0.3;
  std::vector<double> test_scales;  // short sides for multi-scale testing; empty = native

  ContextSetting context;
  AnchorConfig anchors;

  void validate() const {
    if (!(0.0 <= hard_negative_lo && hard_negative_lo < hard_negative_hi &&
          hard_negative_hi <= positive_threshold && positive_threshold <= 1.0))
      throw std::invalid_argument("DetectorConfig: thresholds must satisfy 0 <= lo < hi <= pos <= 1");
    if (batch_candidates < positive_slots)
      throw std::invalid_argument("DetectorConfig: batch_candidates < positive_slots");
    if (roi_grid < 1 || head_fc_width < 1 || backbone_channels < 1)
      throw std::invalid_argument("DetectorConfig: architecture sizes must be positive");
  }

  config::KeyValues to_kv() const {
    config::KeyValues kv;
    kv["lambda"] = config::format_double(loss_balance);
    kv["learning_rate"] = config::format_double(learning_rate);
    kv["iterations"] = std::to_string(iterations);
    kv["flip_horizontal"] = flip_horizontal ? "true" : "false";
    kv["flip_vertical"] = flip_vertical ? "true" : "false";
    kv["seed"] = std::to_string(seed);
    kv["nms_threshold"] = config::format_double(nms_threshold);
    kv["hard_negative_lo"] = config::format_double(hard_negative_lo);
    kv["hard_negative_hi"] = config::format_double(hard_negative_hi);
    kv["positive_threshold"] = config::format_double(positive_threshold);
    kv["batch_candidates"] = std::to_string(batch_candidates);
    kv["positive_slots"] = std::to_string(positive_slots);
    kv["rpn_batch"] = std::to_string(rpn_batch);
    kv["proposal_top_n_train"] = std::to_string(proposal_top_n_train);
    kv["proposal_top_n_test"] = std::to_string(proposal_top_n_test);
    kv["backbone_channels"] = std::to_string(backbone_channels);
    kv["head_fc_width"] = std::to_string(head_fc_width);
    kv["roi_grid"] = std::to_string(roi_grid);
    kv["score_threshold"] = config::format_double(score_threshold);
    kv["detection_nms_threshold"] = config::format_double(detection_nms_threshold);
    kv["test_scales"] = config::format_list(test_scales);
    kv["context"] = context_mode_name(context.mode);
    kv["context_nc"] = std::to_string(context.n_c);
    kv["context_m"] = std::to_string(context.m);
    kv["context_n"] = std::to_string(context.n);
    kv["context_stride"] = std::to_string(context.stride);
    kv["context_alpha"] = config::format_double(context.alpha);
    kv["anchor_scales"] = config::format_list(anchors.scales);
    kv["anchor_ratios"] = config::format_list(anchors.ratios);
    kv["image_short_side"] = std::to_string(anchors.image_short_side);
    return kv;
  }

  static DetectorConfig from_kv(const config::KeyValues& kv) {
    DetectorConfig c;
    c.loss_balance = config::get_double(kv, "lambda", c.loss_balance);
    c.learning_rate = config::get_double(kv, "learning_rate", c.learning_rate);
    c.iterations = static_cast<int>(config::get_int(kv, "iterations", c.iterations));
    c.flip_horizontal = config::get_bool(kv, "flip_horizontal", c.flip_horizontal);
    c.flip_vertical = config::get_bool(kv, "flip_vertical", c.flip_vertical);
    c.seed = static_cast<std::uint64_t>(config::get_int(kv, "seed", static_cast<long>(c.seed)));
    c.nms_threshold = config::get_double(kv, "nms_threshold", c.nms_threshold);
    c.hard_negative_lo = config::get_double(kv, "hard_negative_lo", c.hard_negative_lo);
    c.hard_negative_hi = config::get_double(kv, "hard_negative_hi", c.hard_negative_hi);
    c.positive_threshold = config::get_double(kv, "positive_threshold", c.positive_threshold);
    c.batch_candidates = static_cast<int>(config::get_int(kv, "batch_candidates", c.batch_candidates));
    c.positive_slots = static_cast<int>(config::get_int(kv, "positive_slots", c.positive_slots));
    c.rpn_batch = static_cast<int>(config::get_int(kv, "rpn_batch", c.rpn_batch));
    c.proposal_top_n_train =
        static_cast<int>(config::get_int(kv, "proposal_top_n_train", c.proposal_top_n_train));
    c.proposal_top_n_test =
        static_cast<int>(config::get_int(kv, "proposal_top_n_test", c.proposal_top_n_test));
    c.backbone_channels =
        static_cast<int>(config::get_int(kv, "backbone_channels", c.backbone_channels));
    c.head_fc_width = static_cast<int>(config::get_int(kv, "head_fc_width", c.head_fc_width));
    c.roi_grid = static_cast<int>(config::get_int(kv, "roi_grid", c.roi_grid));
    c.score_threshold = config::get_double(kv, "score_threshold", c.score_threshold);
    c.detection_nms_threshold =
        config::get_double(kv, "detection_nms_threshold", c.detection_nms_threshold);
    if (config::has(kv, "test_scales"))
      c.test_scales = config::parse_list(kv.at("test_scales"));
    c.context.mode = context_mode_from_name(config::get_string(kv, "context", "none"));
    c.context.n_c = static_cast<int>(config::get_int(kv, "context_nc", c.context.n_c));
    c.context.m = static_cast<int>(config::get_int(kv, "context_m", c.context.m));
    c.context.n = static_cast<int>(config::get_int(kv, "context_n", c.context.n));
    c.context.stride = static_cast<int>(config::get_int(kv, "context_stride", c.context.stride));
    c.context.alpha = config::get_double(kv, "context_alpha", c.context.alpha);
    if (config::has(kv, "anchor_scales")) c.anchors.scales = config::parse_list(kv.at("anchor_scales"));
    if (config::has(kv, "anchor_ratios")) c.anchors.ratios = config::parse_list(kv.at("anchor_ratios"));
    c.anchors.image_short_side =
        static_cast<int>(config::get_int(kv, "image_short_side", c.anchors.image_short_side));
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// RoI candidates and minibatch sampling

/// Head label convention: 0 is background, category c maps to label c + 1.
inline constexpr int kBackgroundLabel = 0;
inline constexpr int kNumHeadClasses = data::kNumCategories + 1;

struct RoICandidate {
  BoundingBox box;
  double confidence = 0.0;     // RPN objectness after NMS
  int assigned_class = kBackgroundLabel;
  BoundingBox target_box;      // meaningful only when assigned_class != background
  bool has_target = false;
};

struct SampledBatch {
  std::vector<RoICandidate> rois;
  bool empty_pool_warning = false;
};

/// Fills up to `positive_slots` positions with positives (confidence >=
/// positive_threshold) first, then hard negatives (confidence in
/// [hard_negative_lo, hard_negative_hi)) up to `batch_candidates`. Candidates
/// below the hard-negative floor are never selected. Positives are capped at
/// `positive_slots` whenever any hard negative exists; with no negatives they
/// may take the whole batch.
inline SampledBatch sample_minibatch(const std::vector<RoICandidate>& candidates,
                                     const DetectorConfig& cfg, Rng& rng) {
  std::vector<const RoICandidate*> positives, negatives;
  for (const auto& c : candidates) {
    if (c.confidence >= cfg.positive_threshold)
      positives.push_back(&c);
    else if (c.confidence >= cfg.hard_negative_lo && c.confidence < cfg.hard_negative_hi)
      negatives.push_back(&c);
  }
  SampledBatch batch;
  if (positives.empty() && negatives.empty()) {
    batch.empty_pool_warning = true;
    return batch;
  }
  rng.shuffle(positives);
  rng.shuffle(negatives);
  const std::size_t pos_cap = negatives.empty()
                                  ? static_cast<std::size_t>(cfg.batch_candidates)
                                  : static_cast<std::size_t>(cfg.positive_slots);
  const std::size_t pos_take = std::min(positives.size(), pos_cap);
  for (std::size_t i = 0; i < pos_take; ++i) batch.rois.push_back(*positives[i]);
  const std::size_t neg_take =
      std::min(negatives.size(), static_cast<std::size_t>(cfg.batch_candidates) - pos_take);
  for (std::size_t i = 0; i < neg_take; ++i) batch.rois.push_back(*negatives[i]);
  return batch;
}

// ---------------------------------------------------------------------------
// RoI pooling and Maxout fusion (value-level API; the training path uses the
// same underlying ops through the autodiff graph)

using PooledFeature = Tensor;  // shape [channels, grid, grid]

inline PooledFeature roi_pool(const Tensor& feature_map, const BoundingBox& box, double stride_px,
                              int grid) {
  return nn::roi_max_pool(nn::make_const(feature_map), box, stride_px, grid)->value;
}

/// Element-wise maximum across equal-shape pooled features.
inline PooledFeature maxout_fuse(const std::vector<PooledFeature>& features) {
  if (features.empty()) throw std::invalid_argument("maxout_fuse: empty feature list");
  std::vector<nn::Var> vars;
  vars.reserve(features.size());
  for (const auto& f : features) vars.push_back(nn::make_const(f));
  return nn::maxout(vars)->value;
}

// ---------------------------------------------------------------------------
// model

inline constexpr int kFeatureStride = 8;

struct DetectorModel {
  DetectorConfig cfg;
  bool ready = false;

  // backbone: three stride-2 convs + one stride-1 conv (total stride 8)
  nn::Var conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b, conv4_w, conv4_b;
  // region proposal network
  nn::Var rpn_conv_w, rpn_conv_b, rpn_obj_w, rpn_obj_b, rpn_delta_w, rpn_delta_b;
  // RoI head
  nn::Var head_fc_w, head_fc_b, head_cls_w, head_cls_b, head_reg_w, head_reg_b;

  std::vector<nn::Var> params() const {
    return {conv1_w, conv1_b, conv2_w,     conv2_b,     conv3_w,    conv3_b,
            conv4_w, conv4_b, rpn_conv_w,  rpn_conv_b,  rpn_obj_w,  rpn_obj_b,
            rpn_delta_w, rpn_delta_b, head_fc_w, head_fc_b, head_cls_w, head_cls_b,
            head_reg_w, head_reg_b};
  }

  std::vector<std::pair<std::string, const Tensor*>> named_weights() const {
    return {{"conv1_w", &conv1_w->value},         {"conv1_b", &conv1_b->value},
            {"conv2_w", &conv2_w->value},         {"conv2_b", &conv2_b->value},
            {"conv3_w", &conv3_w->value},         {"conv3_b", &conv3_b->value},
            {"conv4_w", &conv4_w->value},         {"conv4_b", &conv4_b->value},
            {"rpn_conv_w", &rpn_conv_w->value},   {"rpn_conv_b", &rpn_conv_b->value},
            {"rpn_obj_w", &rpn_obj_w->value},     {"rpn_obj_b", &rpn_obj_b->value},
            {"rpn_delta_w", &rpn_delta_w->value}, {"rpn_delta_b", &rpn_delta_b->value},
            {"head_fc_w", &head_fc_w->value},     {"head_fc_b", &head_fc_b->value},
            {"head_cls_w", &head_cls_w->value},   {"head_cls_b", &head_cls_b->value},
            {"head_reg_w", &head_reg_w->value},   {"head_reg_b", &head_reg_b->value}};
  }

  void initialize(std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed ^ 0xde7ec7edull);
    auto conv_init = [&](int out_c, int in_c, int k) {
      Tensor w({out_c, in_c, k, k});
      const double std = std::sqrt(2.0 / (in_c * k * k));
      for (int i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, std);
      return nn::make_param(std::move(w));
    };
    auto bias_init = [&](int n) { return nn::make_param(Tensor({n})); };
    auto fc_init = [&](int out_n, int in_n) {
      Tensor w({out_n, in_n});
      const double std = std::sqrt(2.0 / in_n);
      for (int i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, std);
      return nn::make_param(std::move(w));
    };
    const int c4 = cfg.backbone_channels;
    const int a = cfg.anchors.anchors_per_location();
    conv1_w = conv_init(8, 3, 3);
    conv1_b = bias_init(8);
    conv2_w = conv_init(12, 8, 3);
    conv2_b = bias_init(12);
    conv3_w = conv_init(16, 12, 3);
    conv3_b = bias_init(16);
    conv4_w = conv_init(c4, 16, 3);
    conv4_b = bias_init(c4);
    rpn_conv_w = conv_init(c4, c4, 3);
    rpn_conv_b = bias_init(c4);
    rpn_obj_w = conv_init(a, c4, 1);
    rpn_obj_b = bias_init(a);
    rpn_delta_w = conv_init(4 * a, c4, 1);
    rpn_delta_b = bias_init(4 * a);
    head_fc_w = fc_init(cfg.head_fc_width, c4 * cfg.roi_grid * cfg.roi_grid);
    head_fc_b = bias_init(cfg.head_fc_width);
    head_cls_w = fc_init(kNumHeadClasses, cfg.head_fc_width);
    head_cls_b = bias_init(kNumHeadClasses);
    head_reg_w = fc_init(4, cfg.head_fc_width);
    head_reg_b = bias_init(4);
    ready = true;
  }

  nn::Var backbone(const nn::Var& image) const {
    auto f1 = nn::relu(nn::conv2d(image, conv1_w, conv1_b, 2, 1));
    auto f2 = nn::relu(nn::conv2d(f1, conv2_w, conv2_b, 2, 1));
    auto f3 = nn::relu(nn::conv2d(f2, conv3_w, conv3_b, 2, 1));
    return nn::relu(nn::conv2d(f3, conv4_w, conv4_b, 1, 1));
  }

  void require_ready(const char* op) const {
    if (!ready)
      throw std::runtime_error(std::string(op) +
                               ": detector not ready (train or load a checkpoint first)");
  }
};

inline Tensor image_to_tensor(const Image& img) {
  Tensor t({3, img.height(), img.width()});
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c)
        t.at(c, y, x) = static_cast<double>(img.at(x, y, c)) / 255.0 - 0.5;
  return t;
}

/// Input rescaling: images are resized so the short side matches the
/// configured target before entering the backbone; boxes map back by the
/// per-axis factors. A non-positive target keeps the native size.
struct ScaledInput {
  Image image;
  double to_native_x = 1.0;
  double to_native_y = 1.0;
};

inline ScaledInput rescale_to_short_side(const Image& img, int short_side) {
  ScaledInput out;
  const int native_short = std::min(img.width(), img.height());
  if (short_side <= 0 || short_side == native_short) {
    out.image = img;
    return out;
  }
  const double factor = static_cast<double>(short_side) / native_short;
  const int w = std::max(16, static_cast<int>(std::lround(img.width() * factor)));
  const int h = std::max(16, static_cast<int>(std::lround(img.height() * factor)));
  out.image = img.resized(w, h);
  out.to_native_x = static_cast<double>(img.width()) / w;
  out.to_native_y = static_cast<double>(img.height()) / h;
  return out;
}

// ---------------------------------------------------------------------------
// proposals

struct RawProposal {
  BoundingBox box;
  double objectness = 0.0;
};

/// Decodes RPN readouts into scored, clipped proposals and applies NMS at the
/// configured overlap threshold.
inline std::vector<RawProposal> decode_proposals(const Tensor& obj_logits, const Tensor& deltas,
                                                 const std::vector<BoundingBox>& anchors,
                                                 ImageDims dims, const DetectorConfig& cfg,
                                                 int top_n) {
  const int a = cfg.anchors.anchors_per_location();
  const int fh = obj_logits.dim(1), fw = obj_logits.dim(2);
  std::vector<Detection> scored;
  scored.reserve(anchors.size());
  for (int ai = 0; ai < a; ++ai)
    for (int y = 0; y < fh; ++y)
      for (int x = 0; x < fw; ++x) {
        const std::size_t idx = (static_cast<std::size_t>(ai) * fh + y) * fw + x;
        const double logit = obj_logits.at(ai, y, x);
        const double score = 1.0 / (1.0 + std::exp(-logit));
        const std::array<double, 4> delta = {deltas.at(4 * ai + 0, y, x), deltas.at(4 * ai + 1, y, x),
                                             deltas.at(4 * ai + 2, y, x), deltas.at(4 * ai + 3, y, x)};
        BoundingBox box = decode_box_delta(anchors[idx], delta)
                              .clipped(static_cast<double>(dims.width),
                                       static_cast<double>(dims.height));
        if (box.width() < 2.0 || box.height() < 2.0) continue;
        scored.push_back({box, score, -1});
      }
  std::sort(scored.begin(), scored.end(),
            [](const Detection& l, const Detection& r) { return l.score > r.score; });
  if (scored.size() > 256) scored.resize(256);  // pre-NMS cap
  auto kept = geometry::nms(scored, cfg.nms_threshold);
  if (static_cast<int>(kept.size()) > top_n) kept.resize(static_cast<std::size_t>(top_n));
  std::vector<RawProposal> out;
  out.reserve(kept.size());
  for (const auto& d : kept) out.push_back({d.box, d.score});
  return out;
}

/// Pooled head input for one box: RoI pooling, plus CM/ACM Maxout fusion when
/// the context gate admits the box. The origin box's own feature is always
/// part of the fused set.
inline nn::Var pooled_head_input(const DetectorModel& model, const nn::Var& feature_map,
                                 const BoundingBox& box, ImageDims dims) {
  const auto& ctx = model.cfg.context;
  nn::Var pooled =
      nn::roi_max_pool(feature_map, box, kFeatureStride, model.cfg.roi_grid);
  if (ctx.mode != ContextMode::None && geometry::should_mine(box, dims.area(), ctx.alpha)) {
    geometry::ContextSet set =
        ctx.mode == ContextMode::CM
            ? geometry::mine_cm(box, ctx.n_c, ctx.stride, {dims.width, dims.height})
            : geometry::mine_acm(box, ctx.m, ctx.n, ctx.stride, {dims.width, dims.height});
    std::vector<nn::Var> feats;
    feats.reserve(set.contexts.size() + 1);
    feats.push_back(pooled);
    for (const auto& c : set.contexts)
      feats.push_back(nn::roi_max_pool(feature_map, c, kFeatureStride, model.cfg.roi_grid));
    pooled = nn::maxout(feats);
  }
  return nn::flatten(pooled);
}

// ---------------------------------------------------------------------------
// training

struct TrainingFrame {
  Image image;
  std::vector<std::pair<data::Category, BoundingBox>> ground_truth;
};

/// Samples every `frame_step`-th frame of each video as a training image.
inline std::vector<TrainingFrame> collect_training_frames(
    const std::vector<data::SynthVideo>& videos, int frame_step = 10) {
  std::vector<TrainingFrame> frames;
  for (const auto& v : videos) {
    for (int f = 0; f < v.record.frame_count; f += frame_step) {
      auto gt = v.record.boxes_at(f);
      if (gt.empty()) continue;
      if (v.frames.empty()) continue;
      frames.push_back({v.frames[static_cast<std::size_t>(f)], std::move(gt)});
    }
  }
  return frames;
}

struct StepLoss {
  double total = 0.0, rpn_cls = 0.0, rpn_reg = 0.0, head_cls = 0.0, head_reg = 0.0;
};

struct TrainTrace {
  std::vector<StepLoss> steps;

  void save(const std::filesystem::path& file) const {
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write loss trace " + file.string());
    out << "# iteration total rpn_cls rpn_reg head_cls head_reg\n";
    for (std::size_t i = 0; i < steps.size(); ++i)
      out << i << " " << config::format_double(steps[i].total) << " "
          << config::format_double(steps[i].rpn_cls) << " "
          << config::format_double(steps[i].rpn_reg) << " "
          << config::format_double(steps[i].head_cls) << " "
          << config::format_double(steps[i].head_reg) << "\n";
  }
};

namespace detail {

inline constexpr double kRpnPositiveIou = 0.7;
inline constexpr double kRpnNegativeIou = 0.3;

struct AnchorLabels {
  std::vector<int> label;  // 1 positive, 0 negative, -1 ignore
  std::vector<int> matched_gt;
};

inline AnchorLabels label_anchors(const std::vector<BoundingBox>& anchors,
                                  const std::vector<BoundingBox>& gt, ImageDims dims) {
  AnchorLabels out;
  out.label.assign(anchors.size(), -1);
  out.matched_gt.assign(anchors.size(), -1);
  std::vector<double> best_gt_iou(gt.size(), 0.0);
  std::vector<int> best_gt_anchor(gt.size(), -1);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const auto& a = anchors[i];
    // Cross-boundary anchors are excluded from the threshold rules but stay
    // eligible for the per-ground-truth argmax so border objects still get a
    // positive anchor.
    const bool inside = a.x1 >= 0.0 && a.y1 >= 0.0 && a.x2 <= dims.width && a.y2 <= dims.height;
    double best = 0.0;
    int best_j = -1;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      const double v = geometry::iou(a, gt[j]);
      if (v > best) {
        best = v;
        best_j = static_cast<int>(j);
      }
      if (v > best_gt_iou[j]) {
        best_gt_iou[j] = v;
        best_gt_anchor[j] = static_cast<int>(i);
      }
    }
    if (!inside) continue;
    if (best >= kRpnPositiveIou) {
      out.label[i] = 1;
      out.matched_gt[i] = best_j;
    } else if (best < kRpnNegativeIou) {
      out.label[i] = 0;
    }
  }
  // Guarantee a positive anchor per ground-truth box.
  for (std::size_t j = 0; j < gt.size(); ++j) {
    if (best_gt_anchor[j] >= 0 && best_gt_iou[j] > 0.0) {
      out.label[static_cast<std::size_t>(best_gt_anchor[j])] = 1;
      out.matched_gt[static_cast<std::size_t>(best_gt_anchor[j])] = static_cast<int>(j);
    }
  }
  return out;
}

}  // namespace detail

/// One optimization step on a single (possibly flipped) frame. Exposed so
/// tests can drive micro-training runs directly.
inline StepLoss detector_train_step(DetectorModel& model, const TrainingFrame& frame,
                                    nn::Adam& adam, Rng& rng) {
  const DetectorConfig& cfg = model.cfg;
  const auto scaled = rescale_to_short_side(frame.image, cfg.anchors.image_short_side);
  const ImageDims dims{scaled.image.width(), scaled.image.height()};

  auto x = nn::make_const(image_to_tensor(scaled.image));
  auto fm = model.backbone(x);
  auto rpn_hidden = nn::relu(nn::conv2d(fm, model.rpn_conv_w, model.rpn_conv_b, 1, 1));
  auto obj = nn::conv2d(rpn_hidden, model.rpn_obj_w, model.rpn_obj_b, 1, 0);
  auto deltas = nn::conv2d(rpn_hidden, model.rpn_delta_w, model.rpn_delta_b, 1, 0);

  const int fh = obj->value.dim(1), fw = obj->value.dim(2);
  const auto anchors = generate_anchors(cfg.anchors, fh, fw, kFeatureStride);

  std::vector<BoundingBox> gt_boxes;
  std::vector<int> gt_labels;
  for (const auto& [cat, box] : frame.ground_truth) {
    gt_boxes.push_back({box.x1 / scaled.to_native_x, box.y1 / scaled.to_native_y,
                        box.x2 / scaled.to_native_x, box.y2 / scaled.to_native_y});
    gt_labels.push_back(static_cast<int>(cat) + 1);
  }

  // --- RPN losses over a sampled anchor minibatch
  const auto labels = detail::label_anchors(anchors, gt_boxes, dims);
  std::vector<int> pos_idx, neg_idx;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (labels.label[i] == 1) pos_idx.push_back(static_cast<int>(i));
    if (labels.label[i] == 0) neg_idx.push_back(static_cast<int>(i));
  }
  rng.shuffle(pos_idx);
  rng.shuffle(neg_idx);
  const std::size_t pos_take = std::min(pos_idx.size(), static_cast<std::size_t>(cfg.rpn_batch / 2));
  const std::size_t neg_take =
      std::min(neg_idx.size(), static_cast<std::size_t>(cfg.rpn_batch) - pos_take);
  std::vector<int> cls_sel;
  for (std::size_t i = 0; i < pos_take; ++i) cls_sel.push_back(pos_idx[i]);
  for (std::size_t i = 0; i < neg_take; ++i) cls_sel.push_back(neg_idx[i]);

  nn::Var rpn_cls, rpn_reg;
  auto obj_flat = nn::flatten(obj);
  if (!cls_sel.empty()) {
    Tensor targets({static_cast<int>(cls_sel.size())});
    for (std::size_t i = 0; i < pos_take; ++i) targets[static_cast<int>(i)] = 1.0;
    rpn_cls = nn::scale(nn::bce_with_logits(nn::gather(obj_flat, cls_sel), std::move(targets)),
                        1.0 / static_cast<double>(cls_sel.size()));
  } else {
    rpn_cls = nn::make_const(Tensor::scalar(0.0));
  }
  if (pos_take > 0) {
    auto deltas_flat = nn::flatten(deltas);
    std::vector<int> comp_idx;
    Tensor reg_targets({static_cast<int>(pos_take) * 4});
    int w_out = 0;
    for (std::size_t i = 0; i < pos_take; ++i) {
      const int ai = pos_idx[i];
      const int per_loc = fh * fw;
      const int anchor_of = ai / per_loc;
      const int cell = ai % per_loc;
      const auto enc =
          encode_box_delta(anchors[static_cast<std::size_t>(ai)],
                           gt_boxes[static_cast<std::size_t>(labels.matched_gt[static_cast<std::size_t>(ai)])]);
      for (int c = 0; c < 4; ++c) {
        comp_idx.push_back((4 * anchor_of + c) * per_loc + cell);
        reg_targets[w_out++] = enc[static_cast<std::size_t>(c)];
      }
    }
    rpn_reg = nn::scale(nn::smooth_l1_sum(nn::gather(deltas_flat, comp_idx), std::move(reg_targets)),
                        1.0 / static_cast<double>(pos_take));
  } else {
    rpn_reg = nn::make_const(Tensor::scalar(0.0));
  }

  // --- RoI candidates: NMS-filtered proposals scored by RPN objectness,
  // plus the ground-truth boxes themselves (training aid).
  auto proposals =
      decode_proposals(obj->value, deltas->value, anchors, dims, cfg, cfg.proposal_top_n_train);
  std::vector<RoICandidate> candidates;
  auto assign = [&](const BoundingBox& box, double confidence) {
    RoICandidate cand;
    cand.box = box;
    cand.confidence = confidence;
    double best = 0.0;
    int best_j = -1;
    for (std::size_t j = 0; j < gt_boxes.size(); ++j) {
      const double v = geometry::iou(box, gt_boxes[j]);
      if (v > best) {
        best = v;
        best_j = static_cast<int>(j);
      }
    }
    if (best_j >= 0 && best >= cfg.positive_threshold) {
      cand.assigned_class = gt_labels[static_cast<std::size_t>(best_j)];
      cand.target_box = gt_boxes[static_cast<std::size_t>(best_j)];
      cand.has_target = true;
    }
    candidates.push_back(cand);
  };
  for (const auto& p : proposals) assign(p.box, p.objectness);
  for (const auto& g : gt_boxes) assign(g, 1.0);

  auto batch = sample_minibatch(candidates, cfg, rng);

  nn::Var head_cls, head_reg;
  if (!batch.rois.empty()) {
    std::vector<nn::Var> rows;
    std::vector<int> row_labels;
    std::vector<std::uint8_t> positive_mask;
    Tensor reg_targets({static_cast<int>(batch.rois.size()), 4});
    for (std::size_t i = 0; i < batch.rois.size(); ++i) {
      const auto& roi = batch.rois[i];
      rows.push_back(pooled_head_input(model, fm, roi.box, dims));
      row_labels.push_back(roi.assigned_class);
      positive_mask.push_back(roi.has_target ? 1 : 0);
      if (roi.has_target) {
        const auto enc = encode_box_delta(roi.box, roi.target_box);
        for (int c = 0; c < 4; ++c) reg_targets.at(static_cast<int>(i), c) = enc[static_cast<std::size_t>(c)];
      }
    }
    auto stacked = nn::stack_rows(rows);
    auto hidden = nn::relu(nn::linear(stacked, model.head_fc_w, model.head_fc_b));
    auto cls_logits = nn::linear(hidden, model.head_cls_w, model.head_cls_b);
    auto reg_out = nn::linear(hidden, model.head_reg_w, model.head_reg_b);
    head_cls = nn::scale(nn::softmax_ce_rows(cls_logits, row_labels),
                         1.0 / static_cast<double>(batch.rois.size()));
    bool any_pos = false;
    for (auto m : positive_mask) any_pos = any_pos || m;
    head_reg = any_pos ? nn::scale(nn::smooth_l1_sum(reg_out, std::move(reg_targets), positive_mask),
                                   1.0 / static_cast<double>(batch.rois.size()))
                       : nn::make_const(Tensor::scalar(0.0));
  } else {
    head_cls = nn::make_const(Tensor::scalar(0.0));
    head_reg = nn::make_const(Tensor::scalar(0.0));
  }

  auto reg_total = nn::add(rpn_reg, head_reg);
  auto cls_total = nn::add(rpn_cls, head_cls);
  auto total = nn::add(cls_total, nn::scale(reg_total, cfg.loss_balance));

  auto params = model.params();
  nn::reset_grads(params);
  nn::backward(total);
  adam.step(params);

  StepLoss loss;
  loss.total = nn::scalar_value(total);
  loss.rpn_cls = nn::scalar_value(rpn_cls);
  loss.rpn_reg = nn::scalar_value(rpn_reg);
  loss.head_cls = nn::scalar_value(head_cls);
  loss.head_reg = nn::scalar_value(head_reg);
  return loss;
}

struct FrameVariant {
  int frame_index = 0;
  bool flip_h = false;
  bool flip_v = false;
};

inline TrainingFrame apply_variant(const TrainingFrame& base, const FrameVariant& variant) {
  if (!variant.flip_h && !variant.flip_v) return base;
  TrainingFrame out;
  out.image = base.image;
  const double w = base.image.width(), h = base.image.height();
  if (variant.flip_h) out.image = out.image.flipped_horizontal();
  if (variant.flip_v) out.image = out.image.flipped_vertical();
  for (auto [cat, box] : base.ground_truth) {
    BoundingBox b = box;
    if (variant.flip_h) b = {w - box.x2, b.y1, w - box.x1, b.y2};
    if (variant.flip_v) b = {b.x1, h - box.y2, b.x2, h - box.y1};
    out.ground_truth.emplace_back(cat, b);
  }
  return out;
}

/// The per-epoch sample list: every frame times every enabled flip variant
/// (identity, H, V, HV), so both flips enabled quadruple the base set.
inline std::vector<FrameVariant> epoch_variants(std::size_t frame_count,
                                                const DetectorConfig& cfg) {
  std::vector<FrameVariant> out;
  for (std::size_t i = 0; i < frame_count; ++i) {
    out.push_back({static_cast<int>(i), false, false});
    if (cfg.flip_horizontal) out.push_back({static_cast<int>(i), true, false});
    if (cfg.flip_vertical) out.push_back({static_cast<int>(i), false, true});
    if (cfg.flip_horizontal && cfg.flip_vertical) out.push_back({static_cast<int>(i), true, true});
  }
  return out;
}

/// Trains a detector for cfg.iterations steps, cycling seeded shuffles of the
/// augmented frame list. Returns the model with its loss trace.
inline DetectorModel train_detector(const std::vector<TrainingFrame>& frames,
                                    const DetectorConfig& cfg, TrainTrace* trace = nullptr) {
  if (frames.empty()) throw std::invalid_argument("train_detector: empty dataset");
  cfg.validate();
  DetectorModel model;
  model.cfg = cfg;
  model.initialize(cfg.seed);
  nn::Adam adam(cfg.learning_rate);
  Rng rng(cfg.seed);
  auto order_rng = rng.child(11);
  auto sample_rng = rng.child(23);

  std::vector<FrameVariant> epoch = epoch_variants(frames.size(), cfg);
  std::size_t cursor = epoch.size();  // trigger shuffle on first step
  for (int it = 0; it < cfg.iterations; ++it) {
    if (cursor >= epoch.size()) {
      order_rng.shuffle(epoch);
      cursor = 0;
    }
    const auto& variant = epoch[cursor++];
    const TrainingFrame item =
        apply_variant(frames[static_cast<std::size_t>(variant.frame_index)], variant);
    const StepLoss loss = detector_train_step(model, item, adam, sample_rng);
    if (trace) trace->steps.push_back(loss);
  }
  return model;
}

// ---------------------------------------------------------------------------
// inference

namespace detail {

struct HeadOutputs {
  std::vector<RawProposal> proposals;                 // boxes in resized space
  std::vector<std::array<double, 4>> reg;             // per proposal
  std::vector<std::vector<double>> class_probs;       // per proposal, kNumHeadClasses
  std::vector<Tensor> head_activations;               // per proposal, [head_fc_width]
  nn::Var feature_map;
  ImageDims scaled_dims;
  double to_native_x = 1.0;
  double to_native_y = 1.0;
};

inline HeadOutputs run_heads(const DetectorModel& model, const Image& image, int top_n,
                             int short_side) {
  const DetectorConfig& cfg = model.cfg;
  HeadOutputs out;
  const auto scaled = rescale_to_short_side(image, short_side);
  out.scaled_dims = {scaled.image.width(), scaled.image.height()};
  out.to_native_x = scaled.to_native_x;
  out.to_native_y = scaled.to_native_y;
  auto x = nn::make_const(image_to_tensor(scaled.image));
  out.feature_map = model.backbone(x);
  auto rpn_hidden =
      nn::relu(nn::conv2d(out.feature_map, model.rpn_conv_w, model.rpn_conv_b, 1, 1));
  auto obj = nn::conv2d(rpn_hidden, model.rpn_obj_w, model.rpn_obj_b, 1, 0);
  auto deltas = nn::conv2d(rpn_hidden, model.rpn_delta_w, model.rpn_delta_b, 1, 0);
  const auto anchors =
      generate_anchors(cfg.anchors, obj->value.dim(1), obj->value.dim(2), kFeatureStride);
  out.proposals =
      decode_proposals(obj->value, deltas->value, anchors, out.scaled_dims, cfg, top_n);
  if (out.proposals.empty()) return out;

  std::vector<nn::Var> rows;
  rows.reserve(out.proposals.size());
  for (const auto& p : out.proposals)
    rows.push_back(pooled_head_input(model, out.feature_map, p.box, out.scaled_dims));
  auto stacked = nn::stack_rows(rows);
  auto hidden = nn::relu(nn::linear(stacked, model.head_fc_w, model.head_fc_b));
  auto cls_logits = nn::linear(hidden, model.head_cls_w, model.head_cls_b);
  auto reg_out = nn::linear(hidden, model.head_reg_w, model.head_reg_b);

  for (std::size_t i = 0; i < out.proposals.size(); ++i) {
    const int r = static_cast<int>(i);
    std::vector<double> probs(kNumHeadClasses);
    double max_l = cls_logits->value.at(r, 0);
    for (int c = 1; c < kNumHeadClasses; ++c) max_l = std::max(max_l, cls_logits->value.at(r, c));
    double z = 0.0;
    for (int c = 0; c < kNumHeadClasses; ++c) {
      probs[static_cast<std::size_t>(c)] = std::exp(cls_logits->value.at(r, c) - max_l);
      z += probs[static_cast<std::size_t>(c)];
    }
    for (auto& p : probs) p /= z;
    out.class_probs.push_back(std::move(probs));
    out.reg.push_back({reg_out->value.at(r, 0), reg_out->value.at(r, 1), reg_out->value.at(r, 2),
                       reg_out->value.at(r, 3)});
    Tensor act({cfg.head_fc_width});
    for (int c = 0; c < cfg.head_fc_width; ++c) act[c] = hidden->value.at(r, c);
    out.head_activations.push_back(std::move(act));
  }
  return out;
}

/// Refines, scores, and per-class-suppresses the head outputs; returned
/// boxes are mapped back to native image coordinates.
inline std::vector<Detection> detections_from_heads(const HeadOutputs& heads, ImageDims native,
                                                    const DetectorConfig& cfg) {
  std::vector<Detection> all;
  for (std::size_t i = 0; i < heads.proposals.size(); ++i) {
    const BoundingBox refined =
        decode_box_delta(heads.proposals[i].box, heads.reg[i])
            .clipped(static_cast<double>(heads.scaled_dims.width),
                     static_cast<double>(heads.scaled_dims.height));
    if (!refined.valid()) continue;
    const BoundingBox mapped =
        BoundingBox{refined.x1 * heads.to_native_x, refined.y1 * heads.to_native_y,
                    refined.x2 * heads.to_native_x, refined.y2 * heads.to_native_y}
            .clipped(static_cast<double>(native.width), static_cast<double>(native.height));
    if (!mapped.valid()) continue;
    for (int c = 1; c < kNumHeadClasses; ++c) {
      const double p = heads.class_probs[i][static_cast<std::size_t>(c)];
      if (p >= cfg.score_threshold) all.push_back({mapped, p, c - 1});
    }
  }
  std::vector<Detection> kept;
  for (int cat = 0; cat < data::kNumCategories; ++cat) {
    std::vector<Detection> of_cat;
    for (const auto& d : all)
      if (d.category == cat) of_cat.push_back(d);
    if (of_cat.empty()) continue;
    auto survivors = geometry::nms(of_cat, cfg.detection_nms_threshold);
    kept.insert(kept.end(), survivors.begin(), survivors.end());
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return kept;
}

inline std::vector<Detection> detect_at_short_side(const DetectorModel& model, const Image& image,
                                                   int short_side) {
  const ImageDims native{image.width(), image.height()};
  const auto heads = run_heads(model, image, model.cfg.proposal_top_n_test, short_side);
  return detections_from_heads(heads, native, model.cfg);
}

}  // namespace detail

/// Runs the full two-stage pipeline on one image, rescaled to the configured
/// short side. Boxes come back in native image coordinates.
inline std::vector<Detection> detect(const DetectorModel& model, const Image& image) {
  model.require_ready("detect");
  return detail::detect_at_short_side(model, image, model.cfg.anchors.image_short_side);
}

/// Multi-scale testing: detect at each short-side scale and merge the mapped
/// detections with per-class NMS.
inline std::vector<Detection> detect_multiscale(const DetectorModel& model, const Image& image,
                                                const std::vector<double>& short_sides) {
  model.require_ready("detect_multiscale");
  if (short_sides.empty()) return detect(model, image);
  std::vector<Detection> merged;
  for (double target : short_sides) {
    auto dets = detail::detect_at_short_side(model, image, static_cast<int>(std::lround(target)));
    merged.insert(merged.end(), dets.begin(), dets.end());
  }
  std::vector<Detection> kept;
  for (int cat = 0; cat < data::kNumCategories; ++cat) {
    std::vector<Detection> of_cat;
    for (const auto& d : merged)
      if (d.category == cat) of_cat.push_back(d);
    if (of_cat.empty()) continue;
    auto survivors = geometry::nms(of_cat, model.cfg.detection_nms_threshold);
    kept.insert(kept.end(), survivors.begin(), survivors.end());
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return kept;
}

// ---------------------------------------------------------------------------
// per-frame observation for the forecasting stage

/// Appended to every appearance feature: normalized center, size, and score.
inline constexpr int kGeometryFeatureSize = 5;

struct FrameObservation {
  Tensor full_frame;                  // [head_fc_width + 5]
  std::vector<Tensor> object_features;  // per detection, same length
  std::vector<Detection> detections;
};

/// Extracts the forecaster's per-frame inputs: the whole-frame head feature
/// and one feature per kept detection (appearance activations plus box
/// geometry and score).
inline FrameObservation observe_frame(const DetectorModel& model, const Image& image,
                                      int max_objects) {
  model.require_ready("observe_frame");
  const DetectorConfig& cfg = model.cfg;
  const ImageDims native{image.width(), image.height()};
  const auto heads =
      detail::run_heads(model, image, cfg.proposal_top_n_test, cfg.anchors.image_short_side);
  FrameObservation obs;

  // Pooling happens in the resized space the feature map lives in; the
  // appended geometry is normalized so it is scale-free.
  auto feature_for_scaled_box = [&](const BoundingBox& box, double score) {
    nn::Var pooled = pooled_head_input(model, heads.feature_map, box, heads.scaled_dims);
    auto hidden_row = nn::relu(nn::add(nn::matvec(model.head_fc_w, pooled), model.head_fc_b));
    Tensor feat({cfg.head_fc_width + kGeometryFeatureSize});
    for (int i = 0; i < cfg.head_fc_width; ++i) feat[i] = hidden_row->value[i];
    feat[cfg.head_fc_width + 0] = box.center_x() / heads.scaled_dims.width;
    feat[cfg.head_fc_width + 1] = box.center_y() / heads.scaled_dims.height;
    feat[cfg.head_fc_width + 2] = box.width() / heads.scaled_dims.width;
    feat[cfg.head_fc_width + 3] = box.height() / heads.scaled_dims.height;
    feat[cfg.head_fc_width + 4] = score;
    return feat;
  };

  const BoundingBox whole{0.0, 0.0, static_cast<double>(heads.scaled_dims.width),
                          static_cast<double>(heads.scaled_dims.height)};
  obs.full_frame = feature_for_scaled_box(whole, 1.0);

  obs.detections = detail::detections_from_heads(heads, native, cfg);
  if (static_cast<int>(obs.detections.size()) > max_objects)
    obs.detections.resize(static_cast<std::size_t>(max_objects));
  for (const auto& d : obs.detections) {
    const BoundingBox scaled_box{d.box.x1 / heads.to_native_x, d.box.y1 / heads.to_native_y,
                                 d.box.x2 / heads.to_native_x, d.box.y2 / heads.to_native_y};
    obs.object_features.push_back(feature_for_scaled_box(
        scaled_box.valid() ? scaled_box : BoundingBox{0, 0, 1, 1}, d.score));
  }
  return obs;
}

// ---------------------------------------------------------------------------
// checkpoints

inline void save_checkpoint(const DetectorModel& model, const std::filesystem::path& dir) {
  model.require_ready("save_checkpoint");
  checkpoint::save(dir, "detector", model.cfg.to_kv(), model.named_weights());
}

inline DetectorModel load_checkpoint(const std::filesystem::path& dir) {
  auto ck = checkpoint::load(dir);
  if (ck.kind != "detector")
    throw std::runtime_error("checkpoint at " + dir.string() + " is not a detector");
  DetectorModel model;
  model.cfg = DetectorConfig::from_kv(ck.cfg);
  model.initialize(model.cfg.seed);
  auto assign = [&](const char* name, nn::Var& param) {
    auto it = ck.weights.find(name);
    if (it == ck.weights.end())
      throw std::runtime_error(std::string("checkpoint missing weight ") + name);
    check_same_shape(param->value, it->second, "load_checkpoint");
    param->value = it->second;
  };
  assign("conv1_w", model.conv1_w);
  assign("conv1_b", model.conv1_b);
  assign("conv2_w", model.conv2_w);
  assign("conv2_b", model.conv2_b);
  assign("conv3_w", model.conv3_w);
  assign("conv3_b", model.conv3_b);
  assign("conv4_w", model.conv4_w);
  assign("conv4_b", model.conv4_b);
  assign("rpn_conv_w", model.rpn_conv_w);
  assign("rpn_conv_b", model.rpn_conv_b);
  assign("rpn_obj_w", model.rpn_obj_w);
  assign("rpn_obj_b", model.rpn_obj_b);
  assign("rpn_delta_w", model.rpn_delta_w);
  assign("rpn_delta_b", model.rpn_delta_b);
  assign("head_fc_w", model.head_fc_w);
  assign("head_fc_b", model.head_fc_b);
  assign("head_cls_w", model.head_cls_w);
  assign("head_cls_b", model.head_cls_b);
  assign("head_reg_w", model.head_reg_w);
  assign("head_reg_b", model.head_reg_b);
  model.ready = true;
  return model;
}

}  // namespace crashcast::detection
