#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vlab/common.hpp"
#include "vlab/tokenizer.hpp"

namespace vlab::data {

// Shapes world geometry: 48x48 images, a 3x3 grid of 16px cells, 8 frames
// for videos. A moving object crosses exactly one grid step over the clip.
inline constexpr Index kImageSize = 48;
inline constexpr Index kGrid = 3;
inline constexpr Index kCell = kImageSize / kGrid;
inline constexpr Index kFrames = 8;

enum class ObjShape : std::uint8_t { Circle, Square, Triangle };
enum class Color : std::uint8_t { Red, Green, Blue, Yellow };
enum class Direction : std::uint8_t { Left, Right, Up, Down };

const char* to_word(ObjShape s);
const char* to_word(Color c);
const char* to_word(Direction d);

struct SceneObject {
  ObjShape shape;
  Color color;
  Index cell;  // 0..8 row-major on the grid
};

// 1-3 objects on distinct cells with pairwise distinct colors. Motion, when
// present, moves objects[0] one grid step; the target cell is inside the
// grid and unoccupied, so shapes never overlap or leave the image.
struct Scene {
  std::vector<SceneObject> objects;
  std::optional<Direction> motion;

  std::uint64_t hash() const;
  bool is_video() const { return motion.has_value(); }
};

enum class Split { Train, Val, Test };
const char* split_name(Split s);
Split split_from_name(const std::string& name);

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

// Continuous center (x, y) of an object at a frame. For the moving object the
// centroid advances by exactly kCell/7 pixels per frame.
std::pair<double, double> object_center(const Scene& scene, std::size_t obj_index,
                                        Index frame);

// (H, W, 3) row-major float pixels in [0, 1]; solid shapes on white, no
// anti-aliasing. Deterministic.
std::vector<float> render(const Scene& scene, Index frame);

// ---------------------------------------------------------------------------
// Language
// ---------------------------------------------------------------------------

std::string caption(const Scene& scene);

struct ParsedObject {
  Color color;
  ObjShape shape;
  std::optional<Direction> motion;
};
struct ParsedCaption {
  std::vector<ParsedObject> objects;
  std::string relation;  // "", "above", "below", "left of", "right of"
};

// Exact inverse of the caption grammar; throws on any non-grammar string.
ParsedCaption parse_caption(const std::string& text);

// Deterministic single-word-answer question for the scene.
std::pair<std::string, std::string> make_qa(const Scene& scene);

// ---------------------------------------------------------------------------
// Pools, batches, corpora
// ---------------------------------------------------------------------------

struct DataConfig {
  Index train_images = 4096;
  Index train_videos = 512;
  Index eval_images = 224;  // per val/test split
  Index eval_videos = 32;
  Index video_batch_period = 5;  // every Nth training batch is a video batch
};

struct ScenePool {
  std::vector<Scene> images;
  std::vector<Scene> videos;
};

// Split membership is a pure function of the scene hash (train/val/test are
// disjoint regardless of run seed); pools are deterministic and cached.
const ScenePool& pool(const DataConfig& cfg, Split split);

struct SampleRecord {
  Scene scene;
  std::string caption;
  std::string question, answer;
};

struct SampleBatch {
  Index batch = 0;
  Index frames = 1;  // 1 for images, kFrames for videos
  std::vector<float> frame_data;  // (B, frames, H, W, 3)
  std::vector<std::vector<Index>> prompt_ids;  // [BOS ... VIS ... ] one VIS each
  std::vector<std::vector<Index>> target_ids;  // caption ids + EOS
  // Mask over the concatenated (prompt, target) stream per sample: 0 on
  // prompt positions, 1 on target positions.
  std::vector<std::vector<std::uint8_t>> loss_mask;
  std::vector<SampleRecord> records;
};

// Captioning batch. Train split draws scenes pseudo-randomly from the pool
// (pure function of seed and batch_index); val/test enumerate sequentially.
// Every video_batch_period-th train batch is a video batch.
SampleBatch make_caption_batch(const DataConfig& cfg, Split split, std::uint64_t seed,
                               Index batch_index, Index batch_size);

// Text-only corpus for LM pretraining: captions, QA lines and combined
// caption+QA lines. Rows are [BOS ... EOS].
struct TextBatch {
  std::vector<std::vector<Index>> rows;
};
TextBatch make_text_batch(const DataConfig& cfg, std::uint64_t seed, Index batch_index,
                          Index batch_size);

// Raw float32 frames plus JSON-lines metadata, one directory per split.
void export_split(const DataConfig& cfg, Split split, const std::string& dir,
                  Index n_samples);

}  // namespace vlab::data
