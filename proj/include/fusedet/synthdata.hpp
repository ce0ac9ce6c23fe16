#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "fusedet/boxes.hpp"

namespace fusedet {

struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t width = 64;
  std::size_t height = 64;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  double min_size = 0.1;
  double max_size = 0.3;
  double texture_amplitude = 0.12;
  double hotspot_contrast = 0.5;

  void validate() const;
};

struct ScenePair {
  std::string id;
  Tensor visible;
  Tensor infrared;
  BoxSet boxes;
  SceneSpec spec;
};

/// Procedural visible/infrared pair. Objects are non-overlapping ellipses whose
/// boxes are tight; each is a textured silhouette in the visible image and a warm
/// blob in the infrared image. Throws std::runtime_error if the objects cannot be
/// placed.
ScenePair generate_scene(const SceneSpec& spec);

/// Malformed file contents, with the byte offset where parsing failed.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Binary 8-bit PGM ("P5", maxval 255); values are clamped to [0, 1] and rounded.
void write_image(const std::filesystem::path& path, const Tensor& image);
std::string encode_pgm(const Tensor& image);
/// Accepts any maxval in [1, 255] and '#' comments in the header.
Tensor read_image(const std::filesystem::path& path);
Tensor decode_pgm(const std::string& bytes);

struct Annotations {
  std::string scene;
  BoxSet boxes;
};

void write_annotations(const std::filesystem::path& path, const Annotations& annotations);
std::string encode_annotations(const Annotations& annotations);
Annotations read_annotations(const std::filesystem::path& path);
Annotations decode_annotations(const std::string& text);

/// "scene_0007".
std::string scene_id(std::size_t index);
/// Seed of scene `index` in `split`; independent across splits.
std::uint64_t scene_seed(std::uint64_t seed, const std::string& split, std::size_t index);

/// Writes <root>/<split>/<id>.{vis.pgm, ir.pgm, boxes.json} for `count` scenes.
std::vector<std::string> write_split(const std::filesystem::path& root, const std::string& split, std::size_t count,
                                     const SceneSpec& base, std::uint64_t seed);

/// Loads every scene of a split in id order.
std::vector<ScenePair> read_split(const std::filesystem::path& root, const std::string& split);

}  // namespace fusedet
