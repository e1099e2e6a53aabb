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

#include "crashcast/config.hpp"
#include "crashcast/geometry.hpp"
#include "crashcast/image.hpp"
#include "crashcast/random.hpp"

namespace crashcast::data {

using geometry::BoundingBox;

// ---------------------------------------------------------------------------
// categories

enum class Category { Person = 0, Car, Bus, TwoWheeler, ThreeWheeler, Others };

inline constexpr int kNumCategories = 6;

inline const char* category_name(Category c) {
  switch (c) {
    case Category::Person: return "Person";
    case Category::Car: return "Car";
    case Category::Bus: return "Bus";
    case Category::TwoWheeler: return "Two-wheeler";
    case Category::ThreeWheeler: return "Three-wheeler";
    case Category::Others: return "Others";
  }
  return "?";
}

inline Category category_from_name(const std::string& name) {
  for (int i = 0; i < kNumCategories; ++i) {
    const auto c = static_cast<Category>(i);
    if (name == category_name(c)) return c;
  }
  throw std::runtime_error("unknown category token: '" + name + "'");
}

// ---------------------------------------------------------------------------
// annotation model

struct TrackEntry {
  int frame = 0;
  BoundingBox box;
  bool lost = false;
  bool occluded = false;
  bool generated = false;
};

struct Track {
  int id = 0;
  Category category = Category::Others;
  std::vector<TrackEntry> entries;  // frame indices strictly increasing
};

struct AccidentEvent {
  int start_frame = 0;
  int end_frame = 0;  // inclusive
};

struct VideoRecord {
  std::string id;
  int frame_count = 0;
  double fps = 10.0;
  int width = 0;
  int height = 0;
  std::vector<Track> tracks;
  std::vector<AccidentEvent> events;
  std::filesystem::path frames_dir;  // optional; empty when frames are not on disk

  std::filesystem::path frame_path(int frame) const {
    char name[32];
    std::snprintf(name, sizeof(name), "%06d.ppm", frame);
    return frames_dir / name;
  }

  /// Ground-truth boxes visible at one frame (lost entries excluded).
  std::vector<std::pair<Category, BoundingBox>> boxes_at(int frame) const {
    std::vector<std::pair<Category, BoundingBox>> out;
    for (const auto& t : tracks)
      for (const auto& e : t.entries)
        if (e.frame == frame && !e.lost) out.emplace_back(t.category, e.box);
    return out;
  }
};

// ---------------------------------------------------------------------------
// parsing / serialization
//
// Line format of the classic spatio-temporal dump:
//   track_id xmin ymin xmax ymax frame lost occluded generated "label"
// The first line is a machine-readable header comment carrying the video
// metadata. Accident events live in an `events.txt` sidecar with one
// `start_frame end_frame` pair per line.

namespace detail {

inline std::runtime_error parse_error(const std::string& origin, int lineno, const std::string& msg) {
  return std::runtime_error(origin + ":" + std::to_string(lineno) + ": " + msg);
}

inline std::map<std::string, std::string> parse_header_fields(const std::string& line) {
  std::map<std::string, std::string> fields;
  std::stringstream ss(line);
  std::string tok;
  while (ss >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) continue;
    fields[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return fields;
}

}  // namespace detail

inline VideoRecord parse_annotations_stream(std::istream& in, const std::string& origin,
                                            std::istream* events_in = nullptr,
                                            const std::string& events_origin = "events.txt") {
  VideoRecord rec;
  std::string line;
  int lineno = 0;
  bool have_header = false;
  std::map<int, Track> by_id;

  while (std::getline(in, line)) {
    ++lineno;
    const std::string trimmed = config::trim(line);
    if (trimmed.empty()) continue;
    if (trimmed[0] == '#') {
      if (!have_header && trimmed.find("video=") != std::string::npos) {
        const auto fields = detail::parse_header_fields(trimmed.substr(1));
        try {
          rec.id = fields.at("video");
          rec.frame_count = std::stoi(fields.at("frames"));
          rec.fps = std::stod(fields.at("fps"));
          rec.width = std::stoi(fields.at("width"));
          rec.height = std::stoi(fields.at("height"));
        } catch (const std::exception&) {
          throw detail::parse_error(origin, lineno, "malformed header line");
        }
        if (rec.frame_count <= 0 || rec.width <= 0 || rec.height <= 0 || rec.fps <= 0.0)
          throw detail::parse_error(origin, lineno, "header fields must be positive");
        have_header = true;
      }
      continue;
    }
    if (!have_header)
      throw detail::parse_error(origin, lineno, "annotation data before header line");

    std::stringstream ss(trimmed);
    long track_id;
    double x1, y1, x2, y2;
    long frame;
    int lost, occluded, generated;
    std::string label;
    if (!(ss >> track_id >> x1 >> y1 >> x2 >> y2 >> frame >> lost >> occluded >> generated >> label))
      throw detail::parse_error(origin, lineno, "malformed annotation line: '" + trimmed + "'");
    std::string extra;
    if (ss >> extra) throw detail::parse_error(origin, lineno, "trailing tokens after label");
    if (label.size() >= 2 && label.front() == '"' && label.back() == '"')
      label = label.substr(1, label.size() - 2);

    Category cat;
    try {
      cat = category_from_name(label);
    } catch (const std::exception& e) {
      throw detail::parse_error(origin, lineno, e.what());
    }
    if (frame < 0 || frame >= rec.frame_count)
      throw detail::parse_error(origin, lineno, "frame index out of range");
    const BoundingBox box{x1, y1, x2, y2};
    if (!box.valid()) throw detail::parse_error(origin, lineno, "box with non-positive area");
    if ((lost != 0 && lost != 1) || (occluded != 0 && occluded != 1) ||
        (generated != 0 && generated != 1))
      throw detail::parse_error(origin, lineno, "flags must be 0 or 1");

    auto& track = by_id[static_cast<int>(track_id)];
    if (track.entries.empty()) {
      track.id = static_cast<int>(track_id);
      track.category = cat;
    } else if (track.category != cat) {
      throw detail::parse_error(origin, lineno, "track category changed mid-track");
    }
    if (!track.entries.empty() && track.entries.back().frame >= frame)
      throw detail::parse_error(origin, lineno, "track frames must be strictly increasing");
    track.entries.push_back({static_cast<int>(frame), box, lost == 1, occluded == 1, generated == 1});
  }
  if (!have_header) throw std::runtime_error(origin + ": missing header line");
  for (auto& [id, track] : by_id) rec.tracks.push_back(std::move(track));

  if (events_in) {
    std::string ev_line;
    int ev_lineno = 0;
    while (std::getline(*events_in, ev_line)) {
      ++ev_lineno;
      const std::string t = config::trim(ev_line);
      if (t.empty() || t[0] == '#') continue;
      std::stringstream ss(t);
      long start, end;
      if (!(ss >> start >> end))
        throw detail::parse_error(events_origin, ev_lineno, "malformed event line: '" + t + "'");
      if (start < 0 || end < start || end >= rec.frame_count)
        throw detail::parse_error(events_origin, ev_lineno, "event interval out of range");
      rec.events.push_back({static_cast<int>(start), static_cast<int>(end)});
    }
    std::sort(rec.events.begin(), rec.events.end(),
              [](const AccidentEvent& a, const AccidentEvent& b) {
                return a.start_frame < b.start_frame;
              });
  }
  return rec;
}

/// Parses one video's annotations. `path` is either the annotation file or a
/// video directory containing `annotations.txt`; the `events.txt` sidecar and
/// `frames/` directory are picked up from the same directory when present.
inline VideoRecord parse_annotations(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  fs::path ann = path;
  if (fs::is_directory(path)) ann = path / "annotations.txt";
  std::ifstream in(ann);
  if (!in) throw std::runtime_error("cannot open annotations file " + ann.string());
  const fs::path dir = ann.parent_path();
  const fs::path events = dir / "events.txt";
  VideoRecord rec;
  if (fs::exists(events)) {
    std::ifstream ev(events);
    if (!ev) throw std::runtime_error("cannot open events file " + events.string());
    rec = parse_annotations_stream(in, ann.string(), &ev, events.string());
  } else {
    rec = parse_annotations_stream(in, ann.string());
  }
  if (fs::is_directory(dir / "frames")) rec.frames_dir = dir / "frames";
  return rec;
}

inline void serialize_annotations_stream(const VideoRecord& rec, std::ostream& out) {
  out << "# video=" << rec.id << " frames=" << rec.frame_count << " fps="
      << config::format_double(rec.fps) << " width=" << rec.width << " height=" << rec.height
      << "\n";
  std::vector<const Track*> tracks;
  for (const auto& t : rec.tracks) tracks.push_back(&t);
  std::sort(tracks.begin(), tracks.end(),
            [](const Track* a, const Track* b) { return a->id < b->id; });
  for (const Track* t : tracks)
    for (const auto& e : t->entries)
      out << t->id << " " << config::format_double(e.box.x1) << " "
          << config::format_double(e.box.y1) << " " << config::format_double(e.box.x2) << " "
          << config::format_double(e.box.y2) << " " << e.frame << " " << (e.lost ? 1 : 0) << " "
          << (e.occluded ? 1 : 0) << " " << (e.generated ? 1 : 0) << " \""
          << category_name(t->category) << "\"\n";
}

inline void serialize_events_stream(const VideoRecord& rec, std::ostream& out) {
  for (const auto& ev : rec.events) out << ev.start_frame << " " << ev.end_frame << "\n";
}

/// Writes annotations.txt and events.txt into a video directory.
inline void write_video_annotations(const VideoRecord& rec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "annotations.txt");
    if (!out) throw std::runtime_error("cannot write " + (dir / "annotations.txt").string());
    serialize_annotations_stream(rec, out);
  }
  {
    std::ofstream out(dir / "events.txt");
    if (!out) throw std::runtime_error("cannot write " + (dir / "events.txt").string());
    serialize_events_stream(rec, out);
  }
}

/// Loads every `video_*`-style subdirectory (any directory with an
/// annotations.txt) of a dataset root, sorted by name.
inline std::vector<VideoRecord> load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw std::runtime_error("dataset root is not a directory: " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory() && fs::exists(entry.path() / "annotations.txt"))
      dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<VideoRecord> records;
  records.reserve(dirs.size());
  for (const auto& d : dirs) records.push_back(parse_annotations(d));
  if (records.empty())
    throw std::runtime_error("no annotations found under " + root.string());
  return records;
}

// ---------------------------------------------------------------------------
// statistics

struct StatsReport {
  std::array<long, kNumCategories> tracks_per_category{};
  long boxes_small = 0;   // longer side < 100 px
  long boxes_medium = 0;  // 100..300 px
  long boxes_large = 0;   // > 300 px
  long total_tracks = 0;
  long total_box_entries = 0;
  std::vector<std::pair<std::string, int>> frames_per_video;
  double mean_frame_count = 0.0;
  long videos_with_events = 0;
  std::optional<double> mean_time_to_first_accident_s;
};

inline StatsReport dataset_stats(const std::vector<VideoRecord>& records) {
  if (records.empty()) throw std::invalid_argument("dataset_stats: no records");
  StatsReport r;
  double tta_sum = 0.0;
  long frame_sum = 0;
  for (const auto& rec : records) {
    r.frames_per_video.emplace_back(rec.id, rec.frame_count);
    frame_sum += rec.frame_count;
    for (const auto& t : rec.tracks) {
      ++r.total_tracks;
      ++r.tracks_per_category[static_cast<std::size_t>(t.category)];
      for (const auto& e : t.entries) {
        if (e.lost) continue;
        ++r.total_box_entries;
        const double side = std::max(e.box.width(), e.box.height());
        if (side < 100.0)
          ++r.boxes_small;
        else if (side <= 300.0)
          ++r.boxes_medium;
        else
          ++r.boxes_large;
      }
    }
    if (!rec.events.empty()) {
      ++r.videos_with_events;
      int first = rec.events.front().start_frame;
      for (const auto& ev : rec.events) first = std::min(first, ev.start_frame);
      tta_sum += static_cast<double>(first) / rec.fps;
    }
  }
  r.mean_frame_count = static_cast<double>(frame_sum) / static_cast<double>(records.size());
  if (r.videos_with_events > 0)
    r.mean_time_to_first_accident_s = tta_sum / static_cast<double>(r.videos_with_events);
  return r;
}

inline std::string stats_to_text(const StatsReport& r) {
  std::ostringstream os;
  os << "dataset statistics\n";
  os << "  videos: " << r.frames_per_video.size() << "  (mean frames "
     << config::format_double(r.mean_frame_count) << ")\n";
  os << "  tracks by category:\n";
  for (int i = 0; i < kNumCategories; ++i)
    os << "    " << category_name(static_cast<Category>(i)) << ": "
       << r.tracks_per_category[static_cast<std::size_t>(i)] << "\n";
  os << "  box entries by size (longer side): small(<100px) " << r.boxes_small
     << " | medium(100-300px) " << r.boxes_medium << " | large(>300px) " << r.boxes_large << "\n";
  if (r.mean_time_to_first_accident_s)
    os << "  mean time to first accident: "
       << config::format_double(*r.mean_time_to_first_accident_s) << " s over "
       << r.videos_with_events << " videos\n";
  else
    os << "  mean time to first accident: unavailable (no accident events)\n";
  return os.str();
}

inline config::KeyValues stats_to_kv(const StatsReport& r) {
  config::KeyValues kv;
  kv["videos"] = std::to_string(r.frames_per_video.size());
  kv["mean_frames"] = config::format_double(r.mean_frame_count);
  for (int i = 0; i < kNumCategories; ++i) {
    std::string key = std::string("tracks.") + category_name(static_cast<Category>(i));
    for (auto& ch : key) ch = ch == '-' ? '_' : static_cast<char>(std::tolower(ch));
    kv[key] = std::to_string(r.tracks_per_category[static_cast<std::size_t>(i)]);
  }
  kv["boxes.small"] = std::to_string(r.boxes_small);
  kv["boxes.medium"] = std::to_string(r.boxes_medium);
  kv["boxes.large"] = std::to_string(r.boxes_large);
  kv["tracks.total"] = std::to_string(r.total_tracks);
  kv["boxes.total"] = std::to_string(r.total_box_entries);
  kv["videos_with_events"] = std::to_string(r.videos_with_events);
  kv["mean_time_to_first_accident_s"] =
      r.mean_time_to_first_accident_s ? config::format_double(*r.mean_time_to_first_accident_s)
                                      : std::string("unavailable");
  return kv;
}

// ---------------------------------------------------------------------------
// splits

struct FrameRef {
  std::string video_id;
  int frame = 0;
  bool operator==(const FrameRef& o) const { return video_id == o.video_id && frame == o.frame; }
};

struct Fold {
  std::vector<FrameRef> train;
  std::vector<FrameRef> test;
};

struct SplitPlan {
  std::uint64_t seed = 0;
  std::vector<std::string> trainval_ids;
  std::vector<std::string> test_ids;
  std::array<Fold, 3> folds;
};

/// 50:50 video split greedily balanced on per-video track counts, plus three
/// seeded frame-level train/test folds inside the trainval half.
inline SplitPlan make_splits(const std::vector<VideoRecord>& records, std::uint64_t seed) {
  if (records.size() < 2) throw std::invalid_argument("make_splits: need at least 2 videos");
  SplitPlan plan;
  plan.seed = seed;
  Rng rng(seed);

  struct Item {
    const VideoRecord* rec;
    long count;
  };
  std::vector<Item> items;
  for (const auto& r : records) items.push_back({&r, static_cast<long>(r.tracks.size())});
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    if (a.count != b.count) return a.count > b.count;
    return a.rec->id < b.rec->id;
  });

  const std::size_t cap = (records.size() + 1) / 2;
  long total_a = 0, total_b = 0;
  for (const auto& it : items) {
    const bool a_full = plan.trainval_ids.size() >= cap;
    const bool b_full = plan.test_ids.size() >= cap;
    bool to_a;
    if (a_full)
      to_a = false;
    else if (b_full)
      to_a = true;
    else if (total_a != total_b)
      to_a = total_a < total_b;
    else
      to_a = plan.trainval_ids.size() <= plan.test_ids.size();
    if (to_a) {
      plan.trainval_ids.push_back(it.rec->id);
      total_a += it.count;
    } else {
      plan.test_ids.push_back(it.rec->id);
      total_b += it.count;
    }
  }
  std::sort(plan.trainval_ids.begin(), plan.trainval_ids.end());
  std::sort(plan.test_ids.begin(), plan.test_ids.end());

  std::vector<FrameRef> frames;
  for (const auto& r : records) {
    if (std::find(plan.trainval_ids.begin(), plan.trainval_ids.end(), r.id) ==
        plan.trainval_ids.end())
      continue;
    for (int f = 0; f < r.frame_count; ++f) frames.push_back({r.id, f});
  }
  for (int k = 0; k < 3; ++k) {
    auto fold_rng = rng.child(static_cast<std::uint64_t>(k) + 1);
    std::vector<FrameRef> shuffled = frames;
    fold_rng.shuffle(shuffled);
    const std::size_t half = shuffled.size() / 2;
    plan.folds[static_cast<std::size_t>(k)].train.assign(shuffled.begin(), shuffled.begin() + half);
    plan.folds[static_cast<std::size_t>(k)].test.assign(shuffled.begin() + half, shuffled.end());
  }
  return plan;
}

// ---------------------------------------------------------------------------
// synthetic video generator
//
// Desk-scale test substrate: moving colored rectangles over noise, with
// horizontal lanes per object. Scripted collisions put two objects on the
// same lane heading at each other; the emitted accident events are recomputed
// from the actual per-frame geometry, so ground truth is exact by
// construction.

struct SynthConfig {
  int width = 128;
  int height = 96;
  int frame_count = 360;  // long enough for a disjoint 100-frame negative window
  double fps = 10.0;
  int min_objects = 3;
  int max_objects = 5;
  double collision_probability = 0.5;  // chance a video gets a scripted collision
  int collision_hold_frames = 10;      // frames the pair stays in contact
  double noise_level = 10.0;           // background noise amplitude
  bool draw_bands = true;              // lane bands (lighter walkway vs darker road)
  double object_scale = 1.0;           // global multiplier on object sizes
  bool render_frames = true;           // false skips rasterization (annotations only)
};

struct SynthVideo {
  VideoRecord record;
  std::vector<Image> frames;  // empty when render_frames is false
};

namespace detail {

struct ObjectSpec {
  Category category;
  double w, h;
  std::array<std::uint8_t, 3> color;
};

inline ObjectSpec object_spec(Category c, double scale) {
  switch (c) {
    case Category::Person: return {c, 6 * scale, 9 * scale, {235, 80, 70}};
    case Category::Car: return {c, 18 * scale, 10 * scale, {70, 130, 235}};
    case Category::Bus: return {c, 28 * scale, 12 * scale, {240, 205, 70}};
    case Category::TwoWheeler: return {c, 8 * scale, 6 * scale, {70, 220, 130}};
    case Category::ThreeWheeler: return {c, 12 * scale, 9 * scale, {205, 90, 225}};
    case Category::Others: return {c, 10 * scale, 10 * scale, {170, 170, 170}};
  }
  return {c, 10 * scale, 10 * scale, {170, 170, 170}};
}

struct MovingObject {
  ObjectSpec spec;
  double x, y;    // top-left
  double vx;      // px per frame, horizontal motion only
  int lane_top;   // lane band for rendering
  int lane_height;
  bool frozen_until_bounce = false;
};

}  // namespace detail

inline SynthVideo synth_one_video(const std::string& video_id, std::uint64_t seed,
                                  const SynthConfig& cfg) {
  if (cfg.width < 48 || cfg.height < 48) throw std::invalid_argument("synth: canvas too small");
  if (cfg.frame_count < 1) throw std::invalid_argument("synth: frame_count must be >= 1");
  Rng rng(seed);

  const int n_objects =
      static_cast<int>(rng.uniform_int(cfg.min_objects, std::max(cfg.min_objects, cfg.max_objects)));
  const bool collide = rng.uniform() < cfg.collision_probability && n_objects >= 2;

  // Lanes: disjoint horizontal bands, one object per lane; the colliding pair
  // shares the last lane exclusively. Persons walk on light bands, vehicles
  // on dark bands, so the band brightness is a context cue around an object.
  const int lane_count = std::max(n_objects - (collide ? 1 : 0), 1);
  const int lane_height = cfg.height / std::max(lane_count, 1);

  static const Category kPalette[] = {Category::Person,       Category::Car,
                                      Category::TwoWheeler,   Category::Bus,
                                      Category::ThreeWheeler, Category::Others};

  std::vector<detail::MovingObject> objects;
  for (int i = 0; i < n_objects; ++i) {
    const Category cat = kPalette[rng.uniform_int(0, 5)];
    auto spec = detail::object_spec(cat, cfg.object_scale);
    // Objects must fit their lane so disjoint lanes guarantee no overlap.
    if (spec.h > lane_height - 2.0 && lane_height > 3) {
      const double shrink = (lane_height - 2.0) / spec.h;
      spec.w = std::max(2.0, spec.w * shrink);
      spec.h = std::max(2.0, spec.h * shrink);
    }
    int lane;
    if (collide)
      lane = i < 2 ? lane_count - 1 : i - 2;
    else
      lane = i;
    const int lane_top = lane * lane_height;
    detail::MovingObject obj;
    obj.spec = spec;
    obj.lane_top = lane_top;
    obj.lane_height = lane_height;
    obj.y = lane_top + std::max(1.0, (lane_height - spec.h) / 2.0);
    obj.x = rng.uniform(0.0, std::max(1.0, cfg.width - spec.w));
    obj.vx = (rng.uniform() < 0.5 ? 1.0 : -1.0) * rng.uniform(0.8, 2.0);
    objects.push_back(obj);
  }

  int planned_meet_frame = -1;
  if (collide) {
    // Objects 0 and 1 share the last lane and head at each other, timed to
    // meet near the middle of the clip.
    auto& a = objects[0];
    auto& b = objects[1];
    const int lane_top = (lane_count - 1) * lane_height;
    a.lane_top = b.lane_top = lane_top;
    a.lane_height = b.lane_height = lane_height;
    a.y = lane_top + std::max(1.0, (lane_height - a.spec.h) / 2.0);
    b.y = lane_top + std::max(1.0, (lane_height - b.spec.h) / 2.0);
    // Early enough that a disjoint negative window fits after the event.
    planned_meet_frame =
        static_cast<int>(rng.uniform_int(cfg.frame_count / 3, cfg.frame_count / 2));
    const double meet_x = cfg.width / 2.0;
    const double speed_a = rng.uniform(1.0, 1.8);
    const double speed_b = rng.uniform(1.0, 1.8);
    a.x = meet_x - a.spec.w - speed_a * planned_meet_frame;
    a.vx = speed_a;
    b.x = meet_x + speed_b * planned_meet_frame;
    b.vx = -speed_b;
  }

  // Simulate, collecting per-frame positions. Objects with less than half of
  // their area inside the canvas are marked lost, the way annotators label
  // objects leaving the view.
  std::vector<std::vector<std::optional<BoundingBox>>> positions(
      static_cast<std::size_t>(cfg.frame_count),
      std::vector<std::optional<BoundingBox>>(objects.size()));
  std::vector<std::vector<bool>> lost_flags(static_cast<std::size_t>(cfg.frame_count),
                                            std::vector<bool>(objects.size(), false));
  int contact_frames_left = -1;
  for (int f = 0; f < cfg.frame_count; ++f) {
    for (std::size_t i = 0; i < objects.size(); ++i) {
      auto& o = objects[i];
      const BoundingBox raw{o.x, o.y, o.x + o.spec.w, o.y + o.spec.h};
      const BoundingBox clipped = raw.clipped(cfg.width, cfg.height);
      if (clipped.valid()) {
        positions[static_cast<std::size_t>(f)][i] = clipped;
        lost_flags[static_cast<std::size_t>(f)][i] = clipped.area() < 0.5 * raw.area();
      }
    }
    if (collide) {
      const auto& pa = positions[static_cast<std::size_t>(f)][0];
      const auto& pb = positions[static_cast<std::size_t>(f)][1];
      const bool touching = pa && pb && intersection_area(*pa, *pb) > 0.0;
      if (touching && contact_frames_left == -1) contact_frames_left = cfg.collision_hold_frames;
      if (contact_frames_left > 0) {
        --contact_frames_left;  // both stand still while in contact
      } else if (contact_frames_left == 0) {
        objects[0].vx = -std::abs(objects[0].vx);  // bounce apart
        objects[1].vx = std::abs(objects[1].vx);
        contact_frames_left = -2;  // done, never re-trigger
      }
    }
    for (std::size_t i = 0; i < objects.size(); ++i) {
      auto& o = objects[i];
      const bool in_contact_pair = collide && contact_frames_left >= 0 && i < 2;
      if (!in_contact_pair) o.x += o.vx;
    }
  }

  // Build the record; events recomputed from actual overlap.
  SynthVideo out;
  out.record.id = video_id;
  out.record.frame_count = cfg.frame_count;
  out.record.fps = cfg.fps;
  out.record.width = cfg.width;
  out.record.height = cfg.height;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    Track t;
    t.id = static_cast<int>(i);
    t.category = objects[i].spec.category;
    for (int f = 0; f < cfg.frame_count; ++f) {
      const auto& pos = positions[static_cast<std::size_t>(f)][i];
      if (pos)
        t.entries.push_back({f, *pos, lost_flags[static_cast<std::size_t>(f)][i], false, f > 0});
    }
    if (!t.entries.empty()) out.record.tracks.push_back(std::move(t));
  }
  bool prev_overlap = false;
  for (int f = 0; f < cfg.frame_count; ++f) {
    bool any = false;
    const auto& row = positions[static_cast<std::size_t>(f)];
    for (std::size_t i = 0; i < row.size() && !any; ++i)
      for (std::size_t j = i + 1; j < row.size() && !any; ++j)
        if (row[i] && row[j] && intersection_area(*row[i], *row[j]) > 0.0) any = true;
    if (any && !prev_overlap) out.record.events.push_back({f, f});
    if (any) out.record.events.back().end_frame = f;
    prev_overlap = any;
  }

  if (cfg.render_frames) {
    out.frames.reserve(static_cast<std::size_t>(cfg.frame_count));
    auto noise_rng = rng.child(77);
    for (int f = 0; f < cfg.frame_count; ++f) {
      Image img(cfg.width, cfg.height);
      for (int y = 0; y < cfg.height; ++y) {
        int base = 55;
        if (cfg.draw_bands) {
          const int lane = std::min(y / std::max(lane_height, 1), lane_count - 1);
          bool person_lane = false;
          for (const auto& o : objects)
            if (o.lane_top == lane * lane_height && o.spec.category == Category::Person)
              person_lane = true;
          base = person_lane ? 95 : 40;  // light walkway vs dark road
        }
        for (int x = 0; x < cfg.width; ++x) {
          const int v =
              std::clamp(base + static_cast<int>(noise_rng.uniform(-cfg.noise_level,
                                                                   cfg.noise_level)),
                         0, 255);
          img.set_pixel(x, y, static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v),
                        static_cast<std::uint8_t>(v));
        }
      }
      const auto& row = positions[static_cast<std::size_t>(f)];
      for (std::size_t i = 0; i < row.size(); ++i) {
        if (!row[i]) continue;
        const auto& c = objects[i].spec.color;
        img.fill_rect(row[i]->x1, row[i]->y1, row[i]->x2, row[i]->y2, c[0], c[1], c[2],
                      /*additive=*/true);
      }
      out.frames.push_back(std::move(img));
    }
  }
  return out;
}

/// Generates `count` videos. When `out_dir` is non-empty each video is written
/// as `<out_dir>/video_NNN/{annotations.txt, events.txt, frames/*.ppm}`.
inline std::vector<SynthVideo> synth_videos(int count, std::uint64_t seed, const SynthConfig& cfg,
                                            const std::filesystem::path& out_dir = {}) {
  if (count < 1) throw std::invalid_argument("synth_videos: count must be >= 1");
  Rng master(seed);
  std::vector<SynthVideo> videos;
  videos.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "video_%03d", i);
    auto video = synth_one_video(name, master.child(static_cast<std::uint64_t>(i) + 101).next_u64(),
                                 cfg);
    if (!out_dir.empty()) {
      const auto dir = out_dir / name;
      write_video_annotations(video.record, dir);
      if (cfg.render_frames) {
        std::filesystem::create_directories(dir / "frames");
        video.record.frames_dir = dir / "frames";
        for (int f = 0; f < cfg.frame_count; ++f)
          video.frames[static_cast<std::size_t>(f)].save_ppm(video.record.frame_path(f));
      }
    }
    videos.push_back(std::move(video));
  }
  return videos;
}

}  // namespace crashcast::data
