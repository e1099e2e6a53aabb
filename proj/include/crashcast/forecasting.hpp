#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "crashcast/autodiff.hpp"
#include "crashcast/checkpoint.hpp"
#include "crashcast/config.hpp"
#include "crashcast/data.hpp"
#include "crashcast/random.hpp"
#include "crashcast/tensor.hpp"

namespace crashcast::forecasting {

inline constexpr int kSegmentLength = 100;
inline constexpr int kAccidentIndex = 90;  // y lands here in every mined positive
inline constexpr double kProbabilityFloor = 1e-12;

// ---------------------------------------------------------------------------
// samples and curves

/// A fixed-length clip of per-frame features. Positives carry the accident
/// frame index; clips mined near the video start are padded with zero-feature
/// dummy frames (mask all-invalid) so the accident always lands at index 90.
struct SegmentSample {
  std::string video_id;
  bool positive = false;
  int accident_index = -1;  // y; -1 on negatives
  int dummy_prefix = 0;     // leading dummy frames
  int window_start = 0;     // first frame in video coordinates (t - 90, may be negative)
  int event_frame = -1;     // accident onset t in video coordinates
  Tensor full;              // [T, D]
  Tensor objects;           // [T, K, D]
  Tensor mask;              // [T, K]; 1 = valid object slot

  int length() const { return full.empty() ? 0 : full.dim(0); }
  int feature_dim() const { return full.empty() ? 0 : full.dim(1); }
  int max_objects() const { return objects.empty() ? 0 : objects.dim(1); }
};

struct ForecastCurve {
  std::string segment_id;
  std::vector<double> scores;  // a_t per frame, in [0,1]
};

// ---------------------------------------------------------------------------
// losses

/// Per-frame weight of the positive loss: e^{-max(0, y-t)}. Frames at or
/// after the accident weigh 1; earlier frames decay exponentially.
inline double positive_frame_weight(int t, int y) {
  return std::exp(-static_cast<double>(std::max(0, y - t)));
}

/// Exponentially weighted cross-entropy on the accident score of a positive
/// segment: sum_t -e^{-max(0,y-t)} * log(a_t).
inline double positive_loss(const ForecastCurve& curve, int y) {
  if (y < 0 || y >= static_cast<int>(curve.scores.size()))
    throw std::invalid_argument("positive_loss: accident frame outside segment");
  double loss = 0.0;
  for (int t = 0; t < static_cast<int>(curve.scores.size()); ++t) {
    const double a = curve.scores[static_cast<std::size_t>(t)];
    if (a < 0.0 || a > 1.0) throw std::invalid_argument("positive_loss: score outside [0,1]");
    loss += -positive_frame_weight(t, y) * std::log(std::max(a, kProbabilityFloor));
  }
  return loss;
}

/// Cross-entropy on the no-accident probability of a negative segment:
/// sum_t -log(1 - a_t). Zero iff the accident score is 0 at every frame.
inline double negative_loss(const ForecastCurve& curve) {
  double loss = 0.0;
  for (double a : curve.scores) {
    if (a < 0.0 || a > 1.0) throw std::invalid_argument("negative_loss: score outside [0,1]");
    loss += -std::log(std::max(1.0 - a, kProbabilityFloor));
  }
  return loss;
}

// ---------------------------------------------------------------------------
// model

struct ForecasterConfig {
  int hidden_size = 256;
  int attention_size = 64;
  int max_objects = 10;    // K
  int feature_dim = 2048;  // D
  double learning_rate = 1e-4;
  double grad_clip = 5.0;
  int epochs = 40;
  std::uint64_t seed = 1;

  config::KeyValues to_kv() const {
    config::KeyValues kv;
    kv["hidden_size"] = std::to_string(hidden_size);
    kv["attention_size"] = std::to_string(attention_size);
    kv["max_objects"] = std::to_string(max_objects);
    kv["feature_dim"] = std::to_string(feature_dim);
    kv["learning_rate"] = config::format_double(learning_rate);
    kv["grad_clip"] = config::format_double(grad_clip);
    kv["epochs"] = std::to_string(epochs);
    kv["seed"] = std::to_string(seed);
    return kv;
  }

  static ForecasterConfig from_kv(const config::KeyValues& kv) {
    ForecasterConfig c;
    c.hidden_size = static_cast<int>(config::get_int(kv, "hidden_size", c.hidden_size));
    c.attention_size = static_cast<int>(config::get_int(kv, "attention_size", c.attention_size));
    c.max_objects = static_cast<int>(config::get_int(kv, "max_objects", c.max_objects));
    c.feature_dim = static_cast<int>(config::get_int(kv, "feature_dim", c.feature_dim));
    c.learning_rate = config::get_double(kv, "learning_rate", c.learning_rate);
    c.grad_clip = config::get_double(kv, "grad_clip", c.grad_clip);
    c.epochs = static_cast<int>(config::get_int(kv, "epochs", c.epochs));
    c.seed = static_cast<std::uint64_t>(config::get_int(kv, "seed", static_cast<long>(c.seed)));
    return c;
  }
};

/// Dynamic-spatial-attention recurrent forecaster. Per frame it scores each
/// detected object against the previous hidden state, soft-selects an
/// attended object feature, and feeds [full-frame ; attended] into an LSTM
/// whose hidden state drives a two-way accident/no-accident softmax.
struct DsaLstm {
  ForecasterConfig cfg;
  bool ready = false;

  nn::Var att_hidden_w;  // [A, H]
  nn::Var att_object_w;  // [A, D]
  nn::Var att_bias;      // [A]
  nn::Var att_score_v;   // [A]
  nn::Var lstm_w;        // [4H, H + 2D]
  nn::Var lstm_b;        // [4H]
  nn::Var out_w;         // [2, H]
  nn::Var out_b;         // [2]

  std::vector<nn::Var> params() const {
    return {att_hidden_w, att_object_w, att_bias, att_score_v, lstm_w, lstm_b, out_w, out_b};
  }

  std::vector<std::pair<std::string, const Tensor*>> named_weights() const {
    return {{"att_hidden_w", &att_hidden_w->value}, {"att_object_w", &att_object_w->value},
            {"att_bias", &att_bias->value},         {"att_score_v", &att_score_v->value},
            {"lstm_w", &lstm_w->value},             {"lstm_b", &lstm_b->value},
            {"out_w", &out_w->value},               {"out_b", &out_b->value}};
  }

  void initialize(std::uint64_t seed) {
    if (cfg.hidden_size < 1 || cfg.attention_size < 1 || cfg.feature_dim < 1 ||
        cfg.max_objects < 1)
      throw std::invalid_argument("DsaLstm: config sizes must be positive");
    Rng rng(seed ^ 0xf0eca57ull);
    auto init = [&](std::vector<int> shape, double fan_in) {
      Tensor t(std::move(shape));
      const double std = std::sqrt(1.0 / fan_in);
      for (int i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, std);
      return nn::make_param(std::move(t));
    };
    const int h = cfg.hidden_size, a = cfg.attention_size, d = cfg.feature_dim;
    att_hidden_w = init({a, h}, h);
    att_object_w = init({a, d}, d);
    att_bias = nn::make_param(Tensor({a}));
    att_score_v = init({a}, a);
    lstm_w = init({4 * h, h + 2 * d}, h + 2 * d);
    Tensor lb({4 * h});
    for (int i = h; i < 2 * h; ++i) lb[i] = 1.0;  // forget-gate bias
    lstm_b = nn::make_param(std::move(lb));
    out_w = init({2, h}, h);
    out_b = nn::make_param(Tensor({2}));
    ready = true;
  }

  void require_ready(const char* op) const {
    if (!ready)
      throw std::runtime_error(std::string(op) +
                               ": forecaster not ready (train or load a checkpoint first)");
  }
};

struct HiddenState {
  Tensor h;
  Tensor c;
};

inline HiddenState initial_state(const DsaLstm& model) {
  return {Tensor({model.cfg.hidden_size}), Tensor({model.cfg.hidden_size})};
}

namespace detail {

struct StepGraph {
  nn::Var h;
  nn::Var c;
  nn::Var attention;     // [K]
  nn::Var log_probs;     // [2]: log P(accident), log P(no accident)
};

/// One recurrent step as a graph; shared by training, inference, and the
/// public dsa_step operation.
inline StepGraph build_step(const DsaLstm& model, const nn::Var& h_prev, const nn::Var& c_prev,
                            const nn::Var& full_frame, const Tensor& objects,
                            const std::vector<std::uint8_t>& mask) {
  const int k = objects.empty() ? 0 : objects.dim(0);
  const int d = model.cfg.feature_dim;
  if (full_frame->value.size() != d)
    throw std::invalid_argument("dsa_step: full-frame feature dimension mismatch");
  if (k > 0 && objects.dim(1) != d)
    throw std::invalid_argument("dsa_step: object feature dimension mismatch");
  if (static_cast<int>(mask.size()) != k)
    throw std::invalid_argument("dsa_step: mask length mismatch");

  StepGraph out;
  nn::Var attended;
  if (k > 0) {
    Tensor objects_t({d, k});
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < d; ++j) objects_t.at(j, i) = objects.at(i, j);
    auto obj_proj = nn::matmul(model.att_object_w, nn::make_const(std::move(objects_t)));  // [A,K]
    auto hid_proj = nn::add(nn::matvec(model.att_hidden_w, h_prev), model.att_bias);       // [A]
    auto scores_mat = nn::tanh_op(nn::add_col(obj_proj, hid_proj));                        // [A,K]
    auto scores = nn::matvec_t(scores_mat, model.att_score_v);                             // [K]
    out.attention = nn::masked_softmax(scores, mask);
    attended = nn::matvec_t(nn::make_const(objects), out.attention);  // [D]
  } else {
    out.attention = nn::make_const(Tensor({1}));  // placeholder, no objects
    attended = nn::make_const(Tensor({d}));
  }

  auto z = nn::concat({full_frame, attended});
  auto hz = nn::concat({h_prev, z});
  auto gates = nn::add(nn::matvec(model.lstm_w, hz), model.lstm_b);
  const int h = model.cfg.hidden_size;
  auto gate_i = nn::sigmoid(nn::slice(gates, 0, h));
  auto gate_f = nn::sigmoid(nn::slice(gates, h, h));
  auto gate_o = nn::sigmoid(nn::slice(gates, 2 * h, h));
  auto gate_g = nn::tanh_op(nn::slice(gates, 3 * h, h));
  out.c = nn::add(nn::mul(gate_f, c_prev), nn::mul(gate_i, gate_g));
  out.h = nn::mul(gate_o, nn::tanh_op(out.c));
  out.log_probs = nn::log_softmax(nn::add(nn::matvec(model.out_w, out.h), model.out_b));
  return out;
}

inline Tensor objects_at(const SegmentSample& s, int t) {
  const int k = s.max_objects(), d = s.feature_dim();
  Tensor out({std::max(k, 1), d});
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < d; ++j) out.at(i, j) = s.objects.at(t, i, j);
  return out;
}

inline std::vector<std::uint8_t> mask_at(const SegmentSample& s, int t) {
  const int k = s.max_objects();
  std::vector<std::uint8_t> m(static_cast<std::size_t>(std::max(k, 1)), 0);
  for (int i = 0; i < k; ++i) m[static_cast<std::size_t>(i)] = s.mask.at(t, i) != 0.0 ? 1 : 0;
  return m;
}

inline Tensor full_at(const SegmentSample& s, int t) {
  const int d = s.feature_dim();
  Tensor out({d});
  for (int j = 0; j < d; ++j) out[j] = s.full.at(t, j);
  return out;
}

}  // namespace detail

struct DsaStepResult {
  HiddenState state;
  std::vector<double> attention_weights;  // one per object slot; masked slots are exactly 0
  double accident_score = 0.0;            // a_t in (0,1)
};

/// One forward step of the forecaster. Attention weights over valid objects
/// sum to 1; an all-masked frame attends to the zero vector.
inline DsaStepResult dsa_step(const DsaLstm& model, const HiddenState& state,
                              const Tensor& full_frame, const Tensor& objects,
                              const std::vector<std::uint8_t>& mask) {
  model.require_ready("dsa_step");
  auto g = detail::build_step(model, nn::make_const(state.h), nn::make_const(state.c),
                              nn::make_const(full_frame), objects, mask);
  DsaStepResult out;
  out.state = {g.h->value, g.c->value};
  out.attention_weights.resize(mask.size(), 0.0);
  for (std::size_t i = 0; i < mask.size(); ++i)
    out.attention_weights[i] = g.attention->value.size() > static_cast<int>(i)
                                   ? g.attention->value[static_cast<int>(i)]
                                   : 0.0;
  out.accident_score = std::exp(g.log_probs->value[0]);
  return out;
}

/// Accident-score curve for one segment.
inline ForecastCurve forecast(const DsaLstm& model, const SegmentSample& sample) {
  model.require_ready("forecast");
  if (sample.feature_dim() != model.cfg.feature_dim)
    throw std::invalid_argument("forecast: segment feature dimension mismatch");
  ForecastCurve curve;
  curve.segment_id = sample.video_id;
  auto h = nn::make_const(Tensor({model.cfg.hidden_size}));
  auto c = nn::make_const(Tensor({model.cfg.hidden_size}));
  for (int t = 0; t < sample.length(); ++t) {
    auto g = detail::build_step(model, h, c, nn::make_const(detail::full_at(sample, t)),
                                detail::objects_at(sample, t), detail::mask_at(sample, t));
    curve.scores.push_back(std::exp(g.log_probs->value[0]));
    // Values only from here on; detach to keep the graph shallow.
    h = nn::make_const(g.h->value);
    c = nn::make_const(g.c->value);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// segment mining

/// Plain per-frame feature bundle handed over by the feature extractor
/// (object features ordered by descending detection confidence).
struct FrameFeatures {
  Tensor full;                  // [D]
  std::vector<Tensor> objects;  // each [D]
};

struct MinerConfig {
  int max_objects = 10;
  std::uint64_t seed = 1;
};

struct MiningResult {
  std::vector<SegmentSample> samples;
  std::vector<std::string> warnings;
};

/// Mines one positive segment per accident event (window [t-90, t+9], dummy
/// zero-frames prepended when t < 90 so the accident sits at index 90) and
/// one random negative segment with zero overlap with every positive window.
inline MiningResult mine_segments(const data::VideoRecord& video,
                                  const std::vector<FrameFeatures>& per_frame,
                                  const MinerConfig& cfg) {
  if (video.events.empty())
    throw std::invalid_argument("mine_segments: video has no annotated accident events");
  if (static_cast<int>(per_frame.size()) != video.frame_count)
    throw std::invalid_argument("mine_segments: one feature bundle per frame required");
  const int d = per_frame.empty() ? 0 : per_frame[0].full.size();
  const int k = cfg.max_objects;
  MiningResult result;
  Rng rng(cfg.seed);

  auto build = [&](int window_start, bool positive, int event_frame) {
    SegmentSample s;
    s.video_id = video.id;
    s.positive = positive;
    s.window_start = window_start;
    s.event_frame = event_frame;
    s.accident_index = positive ? kAccidentIndex : -1;
    s.dummy_prefix = std::max(0, -window_start);
    s.full = Tensor({kSegmentLength, d});
    s.objects = Tensor({kSegmentLength, k, d});
    s.mask = Tensor({kSegmentLength, k});
    for (int idx = 0; idx < kSegmentLength; ++idx) {
      const int frame = window_start + idx;
      if (frame < 0 || frame >= video.frame_count) continue;  // dummy frame, stays zero
      const auto& ff = per_frame[static_cast<std::size_t>(frame)];
      if (ff.full.size() != d)
        throw std::invalid_argument("mine_segments: inconsistent feature dimension");
      for (int j = 0; j < d; ++j) s.full.at(idx, j) = ff.full[j];
      const int n_obj = std::min<int>(static_cast<int>(ff.objects.size()), k);
      for (int o = 0; o < n_obj; ++o) {
        for (int j = 0; j < d; ++j) s.objects.at(idx, o, j) = ff.objects[static_cast<std::size_t>(o)][j];
        s.mask.at(idx, o) = 1.0;
      }
    }
    return s;
  };

  struct Window {
    int lo, hi;  // inclusive, clamped to real frames
  };
  std::vector<Window> positive_windows;
  for (const auto& ev : video.events) {
    const int t = ev.start_frame;
    result.samples.push_back(build(t - kAccidentIndex, true, t));
    positive_windows.push_back(
        {std::max(0, t - kAccidentIndex), std::min(video.frame_count - 1, t + 9)});
  }

  std::vector<int> feasible;
  for (int s = 0; s + kSegmentLength <= video.frame_count; ++s) {
    bool clash = false;
    for (const auto& w : positive_windows)
      if (s <= w.hi && s + kSegmentLength - 1 >= w.lo) {
        clash = true;
        break;
      }
    if (!clash) feasible.push_back(s);
  }
  if (feasible.empty()) {
    result.warnings.push_back(video.id +
                              ": no negative window free of positive-event coverage; none emitted");
  } else {
    const int s = feasible[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(feasible.size()) - 1))];
    result.samples.push_back(build(s, false, -1));
  }
  return result;
}

// ---------------------------------------------------------------------------
// training

struct ForecastTrainTrace {
  std::vector<double> epoch_losses;

  void save(const std::filesystem::path& file) const {
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write loss trace " + file.string());
    out << "# epoch total_loss\n";
    for (std::size_t i = 0; i < epoch_losses.size(); ++i)
      out << i << " " << config::format_double(epoch_losses[i]) << "\n";
  }
};

/// Loss graph for one segment; returns the scalar loss node.
inline nn::Var segment_loss_graph(const DsaLstm& model, const SegmentSample& sample) {
  auto h = nn::make_const(Tensor({model.cfg.hidden_size}));
  auto c = nn::make_const(Tensor({model.cfg.hidden_size}));
  std::vector<nn::Var> terms;
  for (int t = 0; t < sample.length(); ++t) {
    auto g = detail::build_step(model, h, c, nn::make_const(detail::full_at(sample, t)),
                                detail::objects_at(sample, t), detail::mask_at(sample, t));
    if (sample.positive)
      terms.push_back(
          nn::scale(nn::pick(g.log_probs, 0), -positive_frame_weight(t, sample.accident_index)));
    else
      terms.push_back(nn::scale(nn::pick(g.log_probs, 1), -1.0));
    h = g.h;
    c = g.c;
  }
  return nn::add_n(terms);
}

/// Trains the forecaster with per-segment steps for cfg.epochs epochs.
inline DsaLstm train_forecaster(const std::vector<SegmentSample>& samples,
                                const ForecasterConfig& cfg, ForecastTrainTrace* trace = nullptr) {
  bool any_pos = false, any_neg = false;
  for (const auto& s : samples) (s.positive ? any_pos : any_neg) = true;
  if (!any_pos) throw std::invalid_argument("train_forecaster: no positive samples");
  if (!any_neg) throw std::invalid_argument("train_forecaster: no negative samples");
  for (const auto& s : samples)
    if (s.feature_dim() != cfg.feature_dim)
      throw std::invalid_argument("train_forecaster: sample feature dimension != config");

  DsaLstm model;
  model.cfg = cfg;
  model.initialize(cfg.seed);
  nn::Adam adam(cfg.learning_rate);
  Rng rng(cfg.seed);
  auto order_rng = rng.child(31);

  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto params = model.params();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t idx : order) {
      auto loss = segment_loss_graph(model, samples[idx]);
      nn::reset_grads(params);
      nn::backward(loss);
      nn::clip_grad_norm(params, cfg.grad_clip);
      adam.step(params);
      epoch_loss += nn::scalar_value(loss);
    }
    if (trace) trace->epoch_losses.push_back(epoch_loss);
  }
  return model;
}

// ---------------------------------------------------------------------------
// segment cache (binary, versioned)

inline constexpr char kSegmentMagic[8] = {'C', 'C', 'S', 'G', '0', '0', '0', '1'};

inline void save_segments(const std::filesystem::path& file,
                          const std::vector<SegmentSample>& samples) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write segment cache " + file.string());
  out.write(kSegmentMagic, sizeof(kSegmentMagic));
  const std::uint32_t version = 1, count = static_cast<std::uint32_t>(samples.size());
  checkpoint::detail::write_pod(out, version);
  checkpoint::detail::write_pod(out, count);
  for (const auto& s : samples) {
    const std::uint32_t id_len = static_cast<std::uint32_t>(s.video_id.size());
    checkpoint::detail::write_pod(out, id_len);
    out.write(s.video_id.data(), id_len);
    checkpoint::detail::write_pod(out, static_cast<std::uint8_t>(s.positive ? 1 : 0));
    checkpoint::detail::write_pod(out, static_cast<std::int32_t>(s.accident_index));
    checkpoint::detail::write_pod(out, static_cast<std::int32_t>(s.dummy_prefix));
    checkpoint::detail::write_pod(out, static_cast<std::int32_t>(s.window_start));
    checkpoint::detail::write_pod(out, static_cast<std::int32_t>(s.event_frame));
    const std::uint32_t t = static_cast<std::uint32_t>(s.length());
    const std::uint32_t k = static_cast<std::uint32_t>(s.max_objects());
    const std::uint32_t d = static_cast<std::uint32_t>(s.feature_dim());
    checkpoint::detail::write_pod(out, t);
    checkpoint::detail::write_pod(out, k);
    checkpoint::detail::write_pod(out, d);
    out.write(reinterpret_cast<const char*>(s.full.data()),
              static_cast<std::streamsize>(sizeof(double)) * s.full.size());
    out.write(reinterpret_cast<const char*>(s.objects.data()),
              static_cast<std::streamsize>(sizeof(double)) * s.objects.size());
    out.write(reinterpret_cast<const char*>(s.mask.data()),
              static_cast<std::streamsize>(sizeof(double)) * s.mask.size());
  }
  if (!out) throw std::runtime_error("write failed for " + file.string());
}

inline std::vector<SegmentSample> load_segments(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open segment cache " + file.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kSegmentMagic, sizeof(magic)) != 0)
    throw std::runtime_error("not a segment cache: " + file.string());
  std::uint32_t version = 0, count = 0;
  checkpoint::detail::read_pod(in, version);
  if (version != 1) throw std::runtime_error("unsupported segment cache version");
  checkpoint::detail::read_pod(in, count);
  std::vector<SegmentSample> samples;
  samples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    SegmentSample s;
    std::uint32_t id_len = 0;
    checkpoint::detail::read_pod(in, id_len);
    s.video_id.resize(id_len);
    in.read(s.video_id.data(), id_len);
    std::uint8_t pos = 0;
    std::int32_t acc = 0, dummy = 0, start = 0, event = 0;
    checkpoint::detail::read_pod(in, pos);
    checkpoint::detail::read_pod(in, acc);
    checkpoint::detail::read_pod(in, dummy);
    checkpoint::detail::read_pod(in, start);
    checkpoint::detail::read_pod(in, event);
    s.positive = pos != 0;
    s.accident_index = acc;
    s.dummy_prefix = dummy;
    s.window_start = start;
    s.event_frame = event;
    std::uint32_t t = 0, k = 0, d = 0;
    checkpoint::detail::read_pod(in, t);
    checkpoint::detail::read_pod(in, k);
    checkpoint::detail::read_pod(in, d);
    s.full = Tensor({static_cast<int>(t), static_cast<int>(d)});
    s.objects = Tensor({static_cast<int>(t), static_cast<int>(k), static_cast<int>(d)});
    s.mask = Tensor({static_cast<int>(t), static_cast<int>(k)});
    in.read(reinterpret_cast<char*>(s.full.data()),
            static_cast<std::streamsize>(sizeof(double)) * s.full.size());
    in.read(reinterpret_cast<char*>(s.objects.data()),
            static_cast<std::streamsize>(sizeof(double)) * s.objects.size());
    in.read(reinterpret_cast<char*>(s.mask.data()),
            static_cast<std::streamsize>(sizeof(double)) * s.mask.size());
    if (!in) throw std::runtime_error("truncated segment cache: " + file.string());
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// checkpoints

inline void save_checkpoint(const DsaLstm& model, const std::filesystem::path& dir) {
  model.require_ready("save_checkpoint");
  checkpoint::save(dir, "forecaster", model.cfg.to_kv(), model.named_weights());
}

inline DsaLstm load_checkpoint(const std::filesystem::path& dir) {
  auto ck = checkpoint::load(dir);
  if (ck.kind != "forecaster")
    throw std::runtime_error("checkpoint at " + dir.string() + " is not a forecaster");
  DsaLstm model;
  model.cfg = ForecasterConfig::from_kv(ck.cfg);
  model.initialize(model.cfg.seed);
  for (auto& [name, param] : std::vector<std::pair<std::string, nn::Var*>>{
           {"att_hidden_w", &model.att_hidden_w},
           {"att_object_w", &model.att_object_w},
           {"att_bias", &model.att_bias},
           {"att_score_v", &model.att_score_v},
           {"lstm_w", &model.lstm_w},
           {"lstm_b", &model.lstm_b},
           {"out_w", &model.out_w},
           {"out_b", &model.out_b}}) {
    auto it = ck.weights.find(name);
    if (it == ck.weights.end())
      throw std::runtime_error("checkpoint missing weight " + name);
    check_same_shape((*param)->value, it->second, "load_checkpoint");
    (*param)->value = it->second;
  }
  model.ready = true;
  return model;
}

}  // namespace crashcast::forecasting
