#include "vlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>

#include <json.hpp>

#include "vlab/prompts.hpp"
#include "vlab/rng.hpp"

namespace vlab::data {

namespace {
constexpr std::uint64_t kWorldSalt = 0x5a5e7e5d00c0ffeeULL;

struct Rgb {
  float r, g, b;
};

Rgb color_rgb(Color c) {
  switch (c) {
    case Color::Red: return {1.0f, 0.0f, 0.0f};
    case Color::Green: return {0.0f, 1.0f, 0.0f};
    case Color::Blue: return {0.0f, 0.0f, 1.0f};
    case Color::Yellow: return {1.0f, 1.0f, 0.0f};
  }
  return {0, 0, 0};
}

Index cell_row(Index cell) { return cell / kGrid; }
Index cell_col(Index cell) { return cell % kGrid; }

std::pair<Index, Index> direction_delta(Direction d) {
  switch (d) {
    case Direction::Left: return {0, -1};
    case Direction::Right: return {0, 1};
    case Direction::Up: return {-1, 0};
    case Direction::Down: return {1, 0};
  }
  return {0, 0};
}

constexpr double kHalfExtent = 6.0;  // shapes span 12px inside 16px cells

bool covers(ObjShape s, double dx, double dy) {
  switch (s) {
    case ObjShape::Circle:
      return dx * dx + dy * dy <= kHalfExtent * kHalfExtent;
    case ObjShape::Square:
      return std::abs(dx) <= kHalfExtent && std::abs(dy) <= kHalfExtent;
    case ObjShape::Triangle:
      // Apex up: (0,-6), (-6,6), (6,6).
      return dy <= kHalfExtent && dy >= 2.0 * std::abs(dx) - kHalfExtent;
  }
  return false;
}
}  // namespace

const char* to_word(ObjShape s) {
  switch (s) {
    case ObjShape::Circle: return "circle";
    case ObjShape::Square: return "square";
    case ObjShape::Triangle: return "triangle";
  }
  return "?";
}

const char* to_word(Color c) {
  switch (c) {
    case Color::Red: return "red";
    case Color::Green: return "green";
    case Color::Blue: return "blue";
    case Color::Yellow: return "yellow";
  }
  return "?";
}

const char* to_word(Direction d) {
  switch (d) {
    case Direction::Left: return "left";
    case Direction::Right: return "right";
    case Direction::Up: return "up";
    case Direction::Down: return "down";
  }
  return "?";
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw ContractError("unknown split '" + name + "'");
}

std::uint64_t Scene::hash() const {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  auto mix = [&h](std::uint64_t v) { h = splitmix64(h ^ (v + 0x9e3779b97f4a7c15ULL)); };
  mix(objects.size());
  for (const auto& o : objects) {
    mix(static_cast<std::uint64_t>(o.shape));
    mix(static_cast<std::uint64_t>(o.color));
    mix(static_cast<std::uint64_t>(o.cell));
  }
  mix(motion ? 1 + static_cast<std::uint64_t>(*motion) : 0);
  return h;
}

std::pair<double, double> object_center(const Scene& scene, std::size_t obj_index,
                                        Index frame) {
  const auto& obj = scene.objects.at(obj_index);
  double cx = static_cast<double>(cell_col(obj.cell) * kCell) + kCell / 2.0;
  double cy = static_cast<double>(cell_row(obj.cell) * kCell) + kCell / 2.0;
  if (obj_index == 0 && scene.motion) {
    auto [dr, dc] = direction_delta(*scene.motion);
    const double t = static_cast<double>(kCell) * static_cast<double>(frame) /
                     static_cast<double>(kFrames - 1);
    cx += dc * t;
    cy += dr * t;
  }
  return {cx, cy};
}

std::vector<float> render(const Scene& scene, Index frame) {
  std::vector<float> img(static_cast<std::size_t>(kImageSize * kImageSize * 3), 1.0f);
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& obj = scene.objects[i];
    auto [cx, cy] = object_center(scene, i, frame);
    const Rgb rgb = color_rgb(obj.color);
    const Index x0 = std::max<Index>(0, static_cast<Index>(std::floor(cx - kHalfExtent - 1)));
    const Index x1 = std::min<Index>(kImageSize - 1, static_cast<Index>(std::ceil(cx + kHalfExtent + 1)));
    const Index y0 = std::max<Index>(0, static_cast<Index>(std::floor(cy - kHalfExtent - 1)));
    const Index y1 = std::min<Index>(kImageSize - 1, static_cast<Index>(std::ceil(cy + kHalfExtent + 1)));
    for (Index py = y0; py <= y1; ++py) {
      for (Index px = x0; px <= x1; ++px) {
        const double dx = (static_cast<double>(px) + 0.5) - cx;
        const double dy = (static_cast<double>(py) + 0.5) - cy;
        if (covers(obj.shape, dx, dy)) {
          auto base = static_cast<std::size_t>((py * kImageSize + px) * 3);
          img[base] = rgb.r;
          img[base + 1] = rgb.g;
          img[base + 2] = rgb.b;
        }
      }
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Grammar
// ---------------------------------------------------------------------------

namespace {
std::string object_phrase(const Scene& scene, std::size_t i) {
  const auto& o = scene.objects[i];
  std::string s = std::string("a ") + to_word(o.color) + " " + to_word(o.shape);
  if (i == 0 && scene.motion) s += std::string(" moving ") + to_word(*scene.motion);
  return s;
}

std::string relation_word(const SceneObject& a, const SceneObject& b) {
  if (cell_row(a.cell) < cell_row(b.cell)) return "above";
  if (cell_row(a.cell) > cell_row(b.cell)) return "below";
  return cell_col(a.cell) < cell_col(b.cell) ? "left of" : "right of";
}
}  // namespace

std::string caption(const Scene& scene) {
  check(!scene.objects.empty(), "caption: empty scene");
  std::string text = object_phrase(scene, 0);
  if (scene.objects.size() >= 2) {
    text += " " + relation_word(scene.objects[0], scene.objects[1]) + " " +
            object_phrase(scene, 1);
  }
  if (scene.objects.size() >= 3) text += " and " + object_phrase(scene, 2);
  return text;
}

namespace {
std::optional<Color> color_from(const std::string& w) {
  for (Color c : {Color::Red, Color::Green, Color::Blue, Color::Yellow})
    if (w == to_word(c)) return c;
  return std::nullopt;
}
std::optional<ObjShape> shape_from(const std::string& w) {
  for (ObjShape s : {ObjShape::Circle, ObjShape::Square, ObjShape::Triangle})
    if (w == to_word(s)) return s;
  return std::nullopt;
}
std::optional<Direction> direction_from(const std::string& w) {
  for (Direction d : {Direction::Left, Direction::Right, Direction::Up, Direction::Down})
    if (w == to_word(d)) return d;
  return std::nullopt;
}
}  // namespace

ParsedCaption parse_caption(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> words;
  for (std::string w; is >> w;) words.push_back(w);
  std::size_t pos = 0;
  auto expect = [&](const std::string& w) {
    check(pos < words.size() && words[pos] == w,
          "parse_caption: expected '" + w + "' in '" + text + "'");
    ++pos;
  };
  auto parse_object = [&]() {
    expect("a");
    check(pos + 1 < words.size() + 1, "parse_caption: truncated object");
    auto color = color_from(words.at(pos));
    check(color.has_value(), "parse_caption: bad color '" + words.at(pos) + "'");
    ++pos;
    auto shape = shape_from(words.at(pos));
    check(shape.has_value(), "parse_caption: bad shape '" + words.at(pos) + "'");
    ++pos;
    ParsedObject obj{*color, *shape, std::nullopt};
    if (pos < words.size() && words[pos] == "moving") {
      ++pos;
      auto dir = direction_from(words.at(pos));
      check(dir.has_value(), "parse_caption: bad direction '" + words.at(pos) + "'");
      obj.motion = dir;
      ++pos;
    }
    return obj;
  };

  ParsedCaption out;
  out.objects.push_back(parse_object());
  if (pos < words.size() && words[pos] != "and") {
    if (words[pos] == "above" || words[pos] == "below") {
      out.relation = words[pos];
      ++pos;
    } else if (words[pos] == "left" || words[pos] == "right") {
      out.relation = words[pos] + " of";
      ++pos;
      expect("of");
    } else {
      throw ContractError("parse_caption: bad relation '" + words[pos] + "'");
    }
    out.objects.push_back(parse_object());
  }
  if (pos < words.size()) {
    expect("and");
    out.objects.push_back(parse_object());
  }
  check(pos == words.size(), "parse_caption: trailing words in '" + text + "'");
  return out;
}

std::pair<std::string, std::string> make_qa(const Scene& scene) {
  const std::uint64_t h = splitmix64(scene.hash() ^ 0x9a3c0ffeeULL);
  if (scene.motion) {
    return {"which direction is it moving?", to_word(*scene.motion)};
  }
  static const char* kCounts[] = {"one", "two", "three"};
  // Rotate through applicable templates; each is total for its guard.
  for (std::uint64_t attempt = 0; attempt < 4; ++attempt) {
    switch ((h + attempt) % 4) {
      case 0: {
        // Unique-shape color question.
        for (ObjShape s : {ObjShape::Circle, ObjShape::Square, ObjShape::Triangle}) {
          int count = 0;
          Color color = Color::Red;
          for (const auto& o : scene.objects)
            if (o.shape == s) {
              ++count;
              color = o.color;
            }
          if (count == 1) {
            return {std::string("what color is the ") + to_word(s) + "?", to_word(color)};
          }
        }
        break;  // no unique shape; fall through to another template
      }
      case 1: {
        // Colors are unique within a scene by construction.
        const auto& o = scene.objects[h % scene.objects.size()];
        return {std::string("what shape is the ") + to_word(o.color) + " object?",
                to_word(o.shape)};
      }
      case 2:
        return {"how many objects are there?", kCounts[scene.objects.size() - 1]};
      case 3: {
        const auto color = static_cast<Color>((h >> 8) % 4);
        const auto shape = static_cast<ObjShape>((h >> 16) % 3);
        bool present = false;
        for (const auto& o : scene.objects)
          present = present || (o.color == color && o.shape == shape);
        return {std::string("is there a ") + to_word(color) + " " + to_word(shape) + "?",
                present ? "yes" : "no"};
      }
    }
  }
  return {"how many objects are there?", kCounts[scene.objects.size() - 1]};
}

// ---------------------------------------------------------------------------
// Pools
// ---------------------------------------------------------------------------

namespace {

Split split_of(std::uint64_t scene_hash) {
  const std::uint64_t bucket = splitmix64(scene_hash ^ kWorldSalt) % 10;
  if (bucket < 8) return Split::Train;
  return bucket == 8 ? Split::Val : Split::Test;
}

Scene sample_scene(std::uint64_t key, bool force_motion) {
  Rng rng(splitmix64(key ^ kWorldSalt));
  for (;;) {
    Scene scene;
    const auto n = 1 + rng.uniform_index(3);
    std::vector<Index> cells(static_cast<std::size_t>(kGrid * kGrid));
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<Index>(i);
    std::vector<Color> colors{Color::Red, Color::Green, Color::Blue, Color::Yellow};
    // Fisher-Yates with our rng keeps this platform-stable.
    for (std::size_t i = cells.size(); i > 1; --i)
      std::swap(cells[i - 1], cells[rng.uniform_index(i)]);
    for (std::size_t i = colors.size(); i > 1; --i)
      std::swap(colors[i - 1], colors[rng.uniform_index(i)]);
    for (std::uint64_t i = 0; i < n; ++i) {
      SceneObject o;
      o.shape = static_cast<ObjShape>(rng.uniform_index(3));
      o.color = colors[i];
      o.cell = cells[i];
      scene.objects.push_back(o);
    }
    if (force_motion) {
      std::vector<Direction> valid;
      for (Direction d : {Direction::Left, Direction::Right, Direction::Up, Direction::Down}) {
        auto [dr, dc] = direction_delta(d);
        const Index r = cell_row(scene.objects[0].cell) + dr;
        const Index c = cell_col(scene.objects[0].cell) + dc;
        if (r < 0 || r >= kGrid || c < 0 || c >= kGrid) continue;
        const Index target = r * kGrid + c;
        bool occupied = false;
        for (std::size_t i = 1; i < scene.objects.size(); ++i)
          occupied = occupied || scene.objects[i].cell == target;
        if (!occupied) valid.push_back(d);
      }
      if (valid.empty()) continue;  // corner case: redraw
      scene.motion = valid[rng.uniform_index(valid.size())];
    }
    return scene;
  }
}

struct PoolKey {
  Index ti, tv, ei, ev;
  Split split;
  bool operator<(const PoolKey& o) const {
    return std::tie(ti, tv, ei, ev, split) < std::tie(o.ti, o.tv, o.ei, o.ev, o.split);
  }
};

ScenePool build_pool(const DataConfig& cfg, Split split) {
  ScenePool out;
  const Index want_images = split == Split::Train ? cfg.train_images : cfg.eval_images;
  const Index want_videos = split == Split::Train ? cfg.train_videos : cfg.eval_videos;
  std::uint64_t key = 0;
  std::unordered_map<std::uint64_t, bool> seen;
  while (static_cast<Index>(out.images.size()) < want_images) {
    Scene s = sample_scene(key++, false);
    const auto h = s.hash();
    if (split_of(h) != split || seen.count(h)) continue;
    seen[h] = true;
    out.images.push_back(std::move(s));
  }
  key = 1ULL << 32;  // disjoint key range for video sampling
  while (static_cast<Index>(out.videos.size()) < want_videos) {
    Scene s = sample_scene(key++, true);
    const auto h = s.hash();
    if (split_of(h) != split || seen.count(h)) continue;
    seen[h] = true;
    out.videos.push_back(std::move(s));
  }
  return out;
}

}  // namespace

const ScenePool& pool(const DataConfig& cfg, Split split) {
  static std::map<PoolKey, ScenePool> cache;
  static std::mutex mu;
  std::lock_guard<std::mutex> lk(mu);
  PoolKey k{cfg.train_images, cfg.train_videos, cfg.eval_images, cfg.eval_videos, split};
  auto it = cache.find(k);
  if (it == cache.end()) it = cache.emplace(k, build_pool(cfg, split)).first;
  return it->second;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

namespace {
std::vector<Index> caption_prompt_ids() {
  const auto& tok = lm::tokenizer();
  auto [before, after] = eval::split_at_vis(eval::render_prompt(eval::Task::Caption));
  std::vector<Index> ids{tok.bos_id()};
  for (Index id : tok.encode(before)) ids.push_back(id);
  ids.push_back(tok.vis_id());
  for (Index id : tok.encode(after)) ids.push_back(id);
  return ids;
}
}  // namespace

SampleBatch make_caption_batch(const DataConfig& cfg, Split split, std::uint64_t seed,
                               Index batch_index, Index batch_size) {
  check(batch_size >= 1, "make_caption_batch: batch_size must be >= 1");
  const ScenePool& p = pool(cfg, split);
  const bool video_batch = split == Split::Train && cfg.video_batch_period > 0 &&
                           !p.videos.empty() &&
                           batch_index % cfg.video_batch_period == cfg.video_batch_period - 1;
  const auto& scenes = video_batch ? p.videos : p.images;
  check(!scenes.empty(), "make_caption_batch: empty scene pool");

  SampleBatch batch;
  batch.batch = batch_size;
  batch.frames = video_batch ? kFrames : 1;
  const auto frame_elems =
      static_cast<std::size_t>(batch.frames * kImageSize * kImageSize * 3);
  batch.frame_data.resize(static_cast<std::size_t>(batch_size) * frame_elems);
  const auto& tok = lm::tokenizer();
  const std::vector<Index> prompt = caption_prompt_ids();
  const std::uint64_t stream = derive_seed(seed, "caption-batch");

  for (Index i = 0; i < batch_size; ++i) {
    std::size_t idx;
    if (split == Split::Train) {
      idx = static_cast<std::size_t>(
          splitmix64(stream ^ (static_cast<std::uint64_t>(batch_index) * 131071ULL + i)) %
          scenes.size());
    } else {
      idx = static_cast<std::size_t>((batch_index * batch_size + i) %
                                     static_cast<Index>(scenes.size()));
    }
    const Scene& scene = scenes[idx];
    SampleRecord rec;
    rec.scene = scene;
    rec.caption = caption(scene);
    auto [q, a] = make_qa(scene);
    rec.question = q;
    rec.answer = a;

    for (Index f = 0; f < batch.frames; ++f) {
      auto img = render(scene, f);
      std::copy(img.begin(), img.end(),
                batch.frame_data.begin() + static_cast<std::size_t>(i) * frame_elems +
                    static_cast<std::size_t>(f) * img.size());
    }
    std::vector<Index> target = tok.encode(rec.caption);
    target.push_back(tok.eos_id());
    std::vector<std::uint8_t> mask(prompt.size(), 0);
    mask.insert(mask.end(), target.size(), 1);
    batch.prompt_ids.push_back(prompt);
    batch.target_ids.push_back(std::move(target));
    batch.loss_mask.push_back(std::move(mask));
    batch.records.push_back(std::move(rec));
  }
  return batch;
}

TextBatch make_text_batch(const DataConfig& cfg, std::uint64_t seed, Index batch_index,
                          Index batch_size) {
  const ScenePool& p = pool(cfg, Split::Train);
  const auto& tok = lm::tokenizer();
  const std::uint64_t stream = derive_seed(seed, "text-batch");
  TextBatch out;
  for (Index i = 0; i < batch_size; ++i) {
    const std::uint64_t h =
        splitmix64(stream ^ (static_cast<std::uint64_t>(batch_index) * 262139ULL + i));
    const bool video = (h % 7) == 6 && !p.videos.empty();
    const auto& scenes = video ? p.videos : p.images;
    const Scene& scene = scenes[h / 7 % scenes.size()];
    const std::string cap = caption(scene);
    auto [q, a] = make_qa(scene);
    std::string qa_text = q;
    while (!qa_text.empty() && qa_text.back() == '?') qa_text.pop_back();
    std::string line;
    switch (splitmix64(h) % 4) {
      case 0: line = cap; break;
      case 1: line = "question: " + qa_text + "? answer: " + a; break;
      default: line = cap + " . question: " + qa_text + "? answer: " + a; break;
    }
    std::vector<Index> ids{tok.bos_id()};
    for (Index id : tok.encode(line)) ids.push_back(id);
    ids.push_back(tok.eos_id());
    out.rows.push_back(std::move(ids));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

namespace {
nlohmann::json scene_json(const Scene& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : s.objects) {
    objs.push_back({{"shape", to_word(o.shape)},
                    {"color", to_word(o.color)},
                    {"cell", o.cell}});
  }
  nlohmann::json j{{"objects", objs}};
  j["motion"] = s.motion ? nlohmann::json(to_word(*s.motion)) : nlohmann::json(nullptr);
  return j;
}
}  // namespace

void export_split(const DataConfig& cfg, Split split, const std::string& dir,
                  Index n_samples) {
  namespace fs = std::filesystem;
  const fs::path root = fs::path(dir) / split_name(split);
  fs::create_directories(root);
  const ScenePool& p = pool(cfg, split);
  std::ofstream meta(root / "meta.jsonl");
  check(meta.good(), "export: cannot write " + (root / "meta.jsonl").string());
  for (Index i = 0; i < n_samples; ++i) {
    const bool video = cfg.video_batch_period > 0 && !p.videos.empty() &&
                       i % cfg.video_batch_period == cfg.video_batch_period - 1;
    const auto& scenes = video ? p.videos : p.images;
    const Scene& scene = scenes[static_cast<std::size_t>(i) % scenes.size()];
    const Index frames = video ? kFrames : 1;

    char name[32];
    std::snprintf(name, sizeof(name), "frames_%05lld.f32", static_cast<long long>(i));
    std::ofstream fbin(root / name, std::ios::binary);
    for (Index f = 0; f < frames; ++f) {
      auto img = render(scene, f);
      fbin.write(reinterpret_cast<const char*>(img.data()),
                 static_cast<std::streamsize>(img.size() * sizeof(float)));
    }

    auto [q, a] = make_qa(scene);
    nlohmann::json j{{"file", name},
                     {"frames", frames},
                     {"caption", caption(scene)},
                     {"qa", {{"question", q}, {"answer", a}}},
                     {"scene", scene_json(scene)}};
    meta << j.dump() << '\n';
  }
}

}  // namespace vlab::data
