#include "fusedet/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "fusedet/rng.hpp"

namespace fusedet {

namespace fs = std::filesystem;

void SceneSpec::validate() const {
  if (width < 32 || height < 32) throw std::invalid_argument("scene: width and height must be at least 32");
  if (min_objects > max_objects) throw std::invalid_argument("scene: min_objects exceeds max_objects");
  if (!(min_size > 0.0 && max_size < 1.0 && min_size <= max_size))
    throw std::invalid_argument("scene: object sizes must satisfy 0 < min_size <= max_size < 1");
  if (!(texture_amplitude >= 0.0 && texture_amplitude <= 0.5))
    throw std::invalid_argument("scene: texture_amplitude must lie in [0, 0.5]");
  if (!(hotspot_contrast > 0.0 && hotspot_contrast <= 0.8))
    throw std::invalid_argument("scene: hotspot_contrast must lie in (0, 0.8]");
}

namespace {

constexpr int kPlacementAttempts = 200;
constexpr double kPlacementGap = 0.02;

bool separated(const Box& a, const Box& b) {
  return a.x1() + kPlacementGap <= b.x0() || b.x1() + kPlacementGap <= a.x0() || a.y1() + kPlacementGap <= b.y0() ||
         b.y1() + kPlacementGap <= a.y0();
}

// Squared normalized radius of pixel (i, j) with respect to the ellipse inscribed in b.
double ellipse_r2(const Box& b, double x, double y) {
  const double dx = (x - b.cx) / (0.5 * b.w);
  const double dy = (y - b.cy) / (0.5 * b.h);
  return dx * dx + dy * dy;
}

}  // namespace

ScenePair generate_scene(const SceneSpec& spec) {
  spec.validate();
  SplitMix64 rng(spec.seed);
  const std::size_t H = spec.height, W = spec.width;

  const std::size_t count = spec.min_objects + rng.below(spec.max_objects - spec.min_objects + 1);
  BoxSet boxes;
  for (std::size_t k = 0; k < count; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
      Box b;
      b.w = rng.uniform(spec.min_size, spec.max_size);
      b.h = rng.uniform(spec.min_size, spec.max_size);
      b.cx = rng.uniform(0.5 * b.w, 1.0 - 0.5 * b.w);
      b.cy = rng.uniform(0.5 * b.h, 1.0 - 0.5 * b.h);
      if (std::all_of(boxes.begin(), boxes.end(), [&](const Box& o) { return separated(b, o); })) {
        boxes.push_back(b);
        placed = true;
      }
    }
    if (!placed)
      throw std::runtime_error("scene " + std::to_string(spec.seed) + ": could not place object " + std::to_string(k + 1) +
                               " of " + std::to_string(count) + " after " + std::to_string(kPlacementAttempts) +
                               " attempts");
  }

  // Visible background: gradient plus two sinusoidal textures.
  const double g0 = rng.uniform(0.3, 0.6), gx = rng.uniform(-0.2, 0.2), gy = rng.uniform(-0.2, 0.2);
  const double f1 = rng.uniform(6.0, 14.0), f2 = rng.uniform(6.0, 14.0), p1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double f3 = rng.uniform(15.0, 30.0), p3 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  // Infrared background: cool and nearly flat.
  const double ir0 = rng.uniform(0.15, 0.25), irf = rng.uniform(1.0, 3.0), irp = rng.uniform(0.0, 2.0 * std::numbers::pi);

  struct Look {
    double tone, stripe_freq, stripe_phase, heat;
  };
  std::vector<Look> looks;
  for (std::size_t k = 0; k < boxes.size(); ++k) {
    const double tone = rng.uniform() < 0.5 ? rng.uniform(0.05, 0.25) : rng.uniform(0.75, 0.95);
    looks.push_back({tone, rng.uniform(20.0, 40.0), rng.uniform(0.0, 2.0 * std::numbers::pi),
                     spec.hotspot_contrast * rng.uniform(0.8, 1.0)});
  }

  ScenePair out;
  out.spec = spec;
  out.boxes = boxes;
  out.visible = Tensor(Shape{H, W});
  out.infrared = Tensor(Shape{H, W});
  const double A = spec.texture_amplitude;
  for (std::size_t i = 0; i < H; ++i) {
    const double y = (static_cast<double>(i) + 0.5) / static_cast<double>(H);
    for (std::size_t j = 0; j < W; ++j) {
      const double x = (static_cast<double>(j) + 0.5) / static_cast<double>(W);
      double v = g0 + gx * (x - 0.5) + gy * (y - 0.5) + A * std::sin(f1 * x + p1) * std::sin(f2 * y) +
                 0.5 * A * std::sin(f3 * (x + y) + p3);
      double ir = ir0 + 0.04 * std::sin(irf * x + irp) * std::cos(irf * y);
      for (std::size_t k = 0; k < boxes.size(); ++k) {
        const double r2 = ellipse_r2(boxes[k], x, y);
        if (r2 >= 1.0) continue;
        const Look& lk = looks[k];
        v = lk.tone + 0.5 * A * std::sin(lk.stripe_freq * (x - boxes[k].cx) + lk.stripe_phase);
        ir += lk.heat * (1.0 - r2);
      }
      out.visible.at(i, j) = std::clamp(v, 0.0, 1.0);
      out.infrared.at(i, j) = std::clamp(ir, 0.0, 1.0);
    }
  }
  return out;
}

std::string encode_pgm(const Tensor& image) {
  if (image.rank() != 2) throw ShapeError("write_image: expected an H x W image, got " + shape_string(image.shape()));
  std::string out = "P5\n" + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(0)) + "\n255\n";
  for (double v : image.data()) out.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return out;
}

void write_image(const fs::path& path, const Tensor& image) {
  const std::string bytes = encode_pgm(image);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing '" + path.string() + "'");
}

Tensor decode_pgm(const std::string& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 24)) throw ParseError(std::string("pgm: ") + what + " too large", start);
      ++pos;
    }
    if (pos == start) throw ParseError(std::string("pgm: expected ") + what, start);
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw ParseError("pgm: missing P5 magic", 0);
  pos = 2;
  const std::size_t w = read_uint("width");
  const std::size_t h = read_uint("height");
  const std::size_t maxval = read_uint("maxval");
  if (w == 0 || h == 0) throw ParseError("pgm: zero image dimension", pos);
  if (maxval == 0 || maxval > 255) throw ParseError("pgm: maxval must be in [1, 255]", pos);
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw ParseError("pgm: expected whitespace after header", pos);
  ++pos;
  if (bytes.size() - pos < w * h)
    throw ParseError("pgm: truncated pixel data (" + std::to_string(bytes.size() - pos) + " of " +
                         std::to_string(w * h) + " bytes)",
                     bytes.size());
  Tensor out(Shape{h, w});
  for (std::size_t k = 0; k < w * h; ++k) {
    const auto b = static_cast<unsigned char>(bytes[pos + k]);
    if (b > maxval) throw ParseError("pgm: sample exceeds maxval", pos + k);
    out[k] = static_cast<double>(b) / static_cast<double>(maxval);
  }
  return out;
}

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void spit(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw std::runtime_error("failed writing '" + path.string() + "'");
}

}  // namespace

Tensor read_image(const fs::path& path) {
  try {
    return decode_pgm(slurp(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + std::string(e.what()).substr(0, std::string(e.what()).rfind(" at byte")),
                     e.offset());
  }
}

std::string encode_annotations(const Annotations& a) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const Box& b : a.boxes) boxes.push_back({{"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"h", b.h}});
  nlohmann::ordered_json j;
  j["scene"] = a.scene;
  j["boxes"] = boxes;
  return j.dump(2) + "\n";
}

Annotations decode_annotations(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("annotations: ") + e.what(), e.byte);
  }
  Annotations a;
  try {
    a.scene = j.at("scene").get<std::string>();
    for (const auto& b : j.at("boxes"))
      a.boxes.push_back({b.at("cx").get<double>(), b.at("cy").get<double>(), b.at("w").get<double>(),
                         b.at("h").get<double>()});
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("annotations: schema error: ") + e.what(), 0);
  }
  return a;
}

void write_annotations(const fs::path& path, const Annotations& annotations) {
  spit(path, encode_annotations(annotations));
}

Annotations read_annotations(const fs::path& path) { return decode_annotations(slurp(path)); }

std::string scene_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu", index);
  return buf;
}

std::uint64_t scene_seed(std::uint64_t seed, const std::string& split, std::size_t index) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : split) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return derive_seed(derive_seed(seed, h), index);
}

std::vector<std::string> write_split(const fs::path& root, const std::string& split, std::size_t count,
                                     const SceneSpec& base, std::uint64_t seed) {
  base.validate();
  const fs::path dir = root / split;
  fs::create_directories(dir);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < count; ++i) {
    SceneSpec spec = base;
    spec.seed = scene_seed(seed, split, i);
    const ScenePair scene = generate_scene(spec);
    const std::string id = scene_id(i);
    write_image(dir / (id + ".vis.pgm"), scene.visible);
    write_image(dir / (id + ".ir.pgm"), scene.infrared);
    write_annotations(dir / (id + ".boxes.json"), {id, scene.boxes});
    ids.push_back(id);
  }
  return ids;
}

std::vector<ScenePair> read_split(const fs::path& root, const std::string& split) {
  const fs::path dir = root / split;
  if (!fs::is_directory(dir)) throw std::runtime_error("dataset split '" + dir.string() + "' does not exist");
  std::vector<std::string> ids;
  const std::string suffix = ".boxes.json";
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() > suffix.size() && name.ends_with(suffix)) ids.push_back(name.substr(0, name.size() - suffix.size()));
  }
  std::sort(ids.begin(), ids.end());
  std::vector<ScenePair> out;
  for (const std::string& id : ids) {
    ScenePair s;
    s.id = id;
    s.visible = read_image(dir / (id + ".vis.pgm"));
    s.infrared = read_image(dir / (id + ".ir.pgm"));
    if (s.visible.shape() != s.infrared.shape())
      throw std::runtime_error("scene '" + id + "': visible and infrared sizes differ");
    s.boxes = read_annotations(dir / (id + ".boxes.json")).boxes;
    s.spec.width = s.visible.dim(1);
    s.spec.height = s.visible.dim(0);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace fusedet
