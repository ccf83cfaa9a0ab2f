#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vcgpt/error.hpp"
#include "vcgpt/rng.hpp"
#include "vcgpt/tensor.hpp"
#include "vcgpt/tokenizer.hpp"

namespace vcgpt {

enum class ShapeKind { circle, square, triangle };
enum class Color { red, green, blue, yellow };
enum class SizeKind { small, big };

inline constexpr std::array<const char*, 3> kShapeNames{"circle", "square", "triangle"};
inline constexpr std::array<const char*, 4> kColorNames{"red", "green", "blue", "yellow"};
inline constexpr std::array<const char*, 2> kSizeNames{"small", "big"};

struct SceneObject {
  ShapeKind shape = ShapeKind::circle;
  Color color = Color::red;
  SizeKind size = SizeKind::small;
  int row = 0;  // cell in the 2x2 layout
  int col = 0;

  int cell() const { return row * 2 + col; }
  bool same_look(const SceneObject& o) const {
    return shape == o.shape && color == o.color && size == o.size;
  }
  bool operator==(const SceneObject&) const = default;
};

/// 1-3 objects on a 2x2 layout, at most one per cell, kept sorted by cell.
struct SyntheticScene {
  std::vector<SceneObject> objects;

  bool operator==(const SyntheticScene&) const = default;
};

inline std::string noun_phrase(const SceneObject& o) {
  return std::string(kSizeNames[static_cast<int>(o.size)]) + ' ' +
         kColorNames[static_cast<int>(o.color)] + ' ' + kShapeNames[static_cast<int>(o.shape)];
}

/// Canonical text form, e.g. "0:big red circle|3:small blue square".
inline std::string scene_descriptor(const SyntheticScene& scene) {
  std::string out;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    if (i) out += '|';
    out += std::to_string(scene.objects[i].cell()) + ':' + noun_phrase(scene.objects[i]);
  }
  return out;
}

inline SyntheticScene parse_scene_descriptor(const std::string& text) {
  SyntheticScene scene;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('|', start);
    if (end == std::string::npos) end = text.size();
    const std::string item = text.substr(start, end - start);
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw DataError("bad scene descriptor '" + text + "'");
    const int cell = std::stoi(item.substr(0, colon));
    const auto words = split_words(item.substr(colon + 1));
    auto index_of = [&](const auto& names, const std::string& w) {
      for (std::size_t i = 0; i < names.size(); ++i)
        if (w == names[i]) return static_cast<int>(i);
      throw DataError("bad scene descriptor '" + text + "'");
    };
    if (words.size() != 3 || cell < 0 || cell > 3) throw DataError("bad scene descriptor '" + text + "'");
    SceneObject o;
    o.size = static_cast<SizeKind>(index_of(kSizeNames, words[0]));
    o.color = static_cast<Color>(index_of(kColorNames, words[1]));
    o.shape = static_cast<ShapeKind>(index_of(kShapeNames, words[2]));
    o.row = cell / 2;
    o.col = cell % 2;
    scene.objects.push_back(o);
    start = end + 1;
  }
  return scene;
}

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Scenes are partitioned by a keyed hash of their descriptor: buckets 0-7
// train, 8 val, 9 test. This keeps the splits' scene sets disjoint even though
// the single-object scene space is tiny.
inline Split scene_bucket(const SyntheticScene& scene, std::uint64_t seed) {
  const std::uint64_t b = mix_seed(fnv1a(scene_descriptor(scene)), seed) % 10;
  if (b < 8) return Split::train;
  return b == 8 ? Split::val : Split::test;
}

inline SyntheticScene draw_scene(Rng& rng) {
  SyntheticScene scene;
  const std::size_t count = 1 + rng.below(3);
  std::array<int, 4> cells{0, 1, 2, 3};
  rng.shuffle(std::span<int>(cells));
  std::sort(cells.begin(), cells.begin() + static_cast<std::ptrdiff_t>(count));
  for (std::size_t i = 0; i < count; ++i) {
    SceneObject o;
    o.shape = static_cast<ShapeKind>(rng.below(3));
    o.color = static_cast<Color>(rng.below(4));
    o.size = static_cast<SizeKind>(rng.below(2));
    o.row = cells[i] / 2;
    o.col = cells[i] % 2;
    scene.objects.push_back(o);
  }
  return scene;
}

}  // namespace detail

/// Deterministic scene for (seed, split, index).
inline SyntheticScene generate_scene(std::uint64_t seed, Split split, std::uint64_t index) {
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(split) + 1, index));
  for (;;) {
    SyntheticScene scene = detail::draw_scene(rng);
    if (detail::scene_bucket(scene, seed) == split) return scene;
  }
}

// Object geometry in unit image coordinates.
inline constexpr double kBigRadius = 0.18;
inline constexpr double kSmallRadius = 0.10;
inline constexpr double kBackground = 0.5;

inline std::array<double, 3> color_rgb(Color c) {
  switch (c) {
    case Color::red: return {0.9, 0.1, 0.1};
    case Color::green: return {0.1, 0.8, 0.1};
    case Color::blue: return {0.1, 0.2, 0.9};
    case Color::yellow: return {0.95, 0.9, 0.1};
  }
  return {0, 0, 0};
}

inline bool covers(const SceneObject& o, double x, double y) {
  const double cx = (o.col + 0.5) / 2.0;
  const double cy = (o.row + 0.5) / 2.0;
  const double r = o.size == SizeKind::big ? kBigRadius : kSmallRadius;
  const double dx = x - cx, dy = y - cy;
  switch (o.shape) {
    case ShapeKind::circle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::square: return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    case ShapeKind::triangle: return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
  }
  return false;
}

/// Rasterizes the scene by sampling pixel centers; [resolution, resolution, 3].
inline Tensor render(const SyntheticScene& scene, std::size_t resolution,
                     std::size_t patch_size = 1) {
  if (resolution == 0 || patch_size == 0 || resolution % patch_size != 0) {
    throw ConfigError("resolution " + std::to_string(resolution) +
                      " is not divisible by patch size " + std::to_string(patch_size));
  }
  Tensor image(Shape{resolution, resolution, 3}, kBackground);
  const double inv = 1.0 / static_cast<double>(resolution);
  for (std::size_t y = 0; y < resolution; ++y) {
    for (std::size_t x = 0; x < resolution; ++x) {
      const double px = (static_cast<double>(x) + 0.5) * inv;
      const double py = (static_cast<double>(y) + 0.5) * inv;
      for (const auto& o : scene.objects) {
        if (!covers(o, px, py)) continue;
        const auto rgb = color_rgb(o.color);
        // float-representable so images survive the f32 file format bit-exactly
        for (std::size_t c = 0; c < 3; ++c)
          image[(y * resolution + x) * 3 + c] = static_cast<double>(static_cast<float>(rgb[c]));
      }
    }
  }
  return image;
}

inline std::string relation_words(const SceneObject& a, const SceneObject& b) {
  if (a.row == b.row) return "left of";
  if (a.col == b.col) return "above";
  return "next to";
}

/// Every surface form the grammar can emit for `scene`, in a fixed order.
inline std::vector<std::string> caption_forms(const SyntheticScene& scene) {
  const auto& objs = scene.objects;
  if (objs.empty() || objs.size() > 3) {
    throw DataError("scenes hold 1-3 objects, got " + std::to_string(objs.size()));
  }
  auto np = [](const SceneObject& o) { return "a " + noun_phrase(o); };
  if (objs.size() == 1) {
    return {np(objs[0]), "there is " + np(objs[0]), "a picture of " + np(objs[0])};
  }
  std::string core = np(objs[0]) + ' ' + relation_words(objs[0], objs[1]) + ' ' + np(objs[1]);
  std::string swapped = np(objs[1]) + " next to " + np(objs[0]);
  if (objs.size() == 3) {
    core += " and " + np(objs[2]);
    swapped = np(objs[2]) + " next to " + np(objs[0]) + " and " + np(objs[1]);
  }
  return {core, "there is " + core, swapped};
}

/// One caption drawn from the grammar.
inline std::string caption_grammar(const SyntheticScene& scene, Rng& rng) {
  auto forms = caption_forms(scene);
  return forms[rng.below(forms.size())];
}

/// Result of reading a caption back into scene attributes.
struct ParsedCaption {
  std::vector<SceneObject> objects;  // row/col unset
  std::optional<std::string> relation;  // between objects[0] and objects[1]
};

/// Inverse of the caption grammar. Returns nullopt on anything the grammar
/// could not have produced.
inline std::optional<ParsedCaption> parse_caption(const std::string& caption) {
  const auto w = split_words(caption);
  std::size_t i = 0;
  auto accept = [&](std::initializer_list<const char*> seq) {
    std::size_t j = i;
    for (const char* s : seq) {
      if (j >= w.size() || w[j] != s) return false;
      ++j;
    }
    i = j;
    return true;
  };
  auto lookup = [&](const auto& names, int& out) {
    if (i >= w.size()) return false;
    for (std::size_t k = 0; k < names.size(); ++k) {
      if (w[i] == names[k]) {
        out = static_cast<int>(k);
        ++i;
        return true;
      }
    }
    return false;
  };
  auto phrase = [&](ParsedCaption& pc) {
    int s = 0, c = 0, sh = 0;
    if (!accept({"a"}) || !lookup(kSizeNames, s) || !lookup(kColorNames, c) ||
        !lookup(kShapeNames, sh)) {
      return false;
    }
    SceneObject o;
    o.size = static_cast<SizeKind>(s);
    o.color = static_cast<Color>(c);
    o.shape = static_cast<ShapeKind>(sh);
    pc.objects.push_back(o);
    return true;
  };

  ParsedCaption pc;
  if (!accept({"there", "is"})) accept({"a", "picture", "of"});
  if (!phrase(pc)) return std::nullopt;
  if (i < w.size()) {
    if (accept({"left", "of"})) pc.relation = "left of";
    else if (accept({"above"})) pc.relation = "above";
    else if (accept({"next", "to"})) pc.relation = "next to";
    else return std::nullopt;
    if (!phrase(pc)) return std::nullopt;
    if (i < w.size()) {
      if (!accept({"and"}) || !phrase(pc)) return std::nullopt;
    }
  }
  if (i != w.size()) return std::nullopt;
  return pc;
}

/// True when the caption parses and states only facts true of `scene`.
inline bool caption_matches_scene(const std::string& caption, const SyntheticScene& scene) {
  auto parsed = parse_caption(caption);
  if (!parsed || parsed->objects.size() != scene.objects.size()) return false;
  const auto& objs = scene.objects;
  const std::size_t n = objs.size();
  // Try every assignment of parsed phrases to scene objects.
  std::vector<std::size_t> perm(n);
  for (std::size_t k = 0; k < n; ++k) perm[k] = k;
  do {
    bool ok = true;
    for (std::size_t k = 0; k < n && ok; ++k) ok = parsed->objects[k].same_look(objs[perm[k]]);
    if (!ok) continue;
    if (!parsed->relation) return true;
    const auto& a = objs[perm[0]];
    const auto& b = objs[perm[1]];
    const std::string& rel = *parsed->relation;
    if (rel == "next to") return true;
    if (rel == "left of" && a.row == b.row && a.col < b.col) return true;
    if (rel == "above" && a.col == b.col && a.row < b.row) return true;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return false;
}

struct SyntheticSample {
  std::size_t id = 0;
  Tensor image;  // [R, R, 3]
  std::vector<std::string> captions;
  SyntheticScene scene;
};

inline SyntheticSample make_sample(std::uint64_t seed, Split split, std::size_t index,
                                   std::size_t resolution) {
  SyntheticSample s;
  s.id = index;
  s.scene = generate_scene(seed, split, index);
  s.image = render(s.scene, resolution);
  s.captions = caption_forms(s.scene);
  return s;
}

struct Dataset {
  std::string split;
  std::size_t resolution = 0;
  std::vector<SyntheticSample> samples;

  std::vector<std::string> all_captions() const {
    std::vector<std::string> out;
    for (const auto& s : samples) out.insert(out.end(), s.captions.begin(), s.captions.end());
    return out;
  }
};

inline Dataset generate_split(std::uint64_t seed, Split split, std::size_t count,
                              std::size_t resolution) {
  Dataset d;
  d.split = split_name(split);
  d.resolution = resolution;
  d.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) d.samples.push_back(make_sample(seed, split, i, resolution));
  return d;
}

/// Same scenes and captions, rendered at another resolution.
inline Dataset rerender(const Dataset& d, std::size_t resolution) {
  Dataset out = d;
  out.resolution = resolution;
  for (auto& s : out.samples) s.image = render(s.scene, resolution);
  return out;
}

// ---------------------------------------------------------------------------
// On-disk format: header.json, {split}.jsonl, {split}/{id}.f32

namespace detail {

inline void write_f32(const std::filesystem::path& path, std::span<const double> values) {
  std::vector<char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

inline std::vector<double> read_f32(const std::filesystem::path& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot read " + path.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size != expected * 4) {
    throw DataError(path.string() + ": expected " + std::to_string(expected * 4) +
                    " bytes, found " + std::to_string(size));
  }
  in.seekg(0);
  std::vector<unsigned char> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  std::vector<double> values(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    values[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return values;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace detail

/// Reads a raw little-endian float32 image of known resolution.
inline Tensor load_image(const std::filesystem::path& path, std::size_t resolution) {
  return Tensor(Shape{resolution, resolution, 3},
                detail::read_f32(path, resolution * resolution * 3));
}

inline void save_image(const std::filesystem::path& path, const Tensor& image) {
  detail::write_f32(path, image.data());
}

struct DatasetCounts {
  std::size_t train = 0, val = 0, test = 0;
};

/// Writes all three splits under `dir`. Output is a pure function of the
/// arguments.
inline void make_dataset(const std::filesystem::path& dir, std::uint64_t seed,
                         DatasetCounts counts, std::size_t resolution) {
  if (counts.train == 0 || counts.val == 0 || counts.test == 0) {
    throw ConfigError("dataset split counts must be positive");
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json header = {{"seed", seed},
                           {"resolution", resolution},
                           {"counts", {{"train", counts.train}, {"val", counts.val}, {"test", counts.test}}}};
  detail::write_text(dir / "header.json", header.dump(2) + "\n");
  for (auto [split, n] : {std::pair{Split::train, counts.train}, std::pair{Split::val, counts.val},
                          std::pair{Split::test, counts.test}}) {
    const std::string name = split_name(split);
    std::filesystem::create_directories(dir / name, ec);
    if (ec) throw IoError("cannot create " + (dir / name).string() + ": " + ec.message());
    std::string lines;
    for (std::size_t i = 0; i < n; ++i) {
      SyntheticSample s = make_sample(seed, split, i, resolution);
      const std::string rel = name + "/" + std::to_string(s.id) + ".f32";
      save_image(dir / rel, s.image);
      nlohmann::json rec = {{"id", s.id},
                            {"captions", s.captions},
                            {"image_file", rel},
                            {"scene", scene_descriptor(s.scene)}};
      lines += rec.dump() + "\n";
    }
    detail::write_text(dir / (name + ".jsonl"), lines);
  }
}

struct DatasetHeader {
  std::uint64_t seed = 0;
  std::size_t resolution = 0;
  DatasetCounts counts;
};

inline DatasetHeader read_dataset_header(const std::filesystem::path& dir) {
  std::ifstream in(dir / "header.json");
  if (!in) throw IoError("cannot read " + (dir / "header.json").string());
  try {
    auto j = nlohmann::json::parse(in);
    DatasetHeader h;
    h.seed = j.at("seed").get<std::uint64_t>();
    h.resolution = j.at("resolution").get<std::size_t>();
    h.counts.train = j.at("counts").at("train").get<std::size_t>();
    h.counts.val = j.at("counts").at("val").get<std::size_t>();
    h.counts.test = j.at("counts").at("test").get<std::size_t>();
    return h;
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "header.json").string() + ": " + e.what());
  }
}

/// Loads one split. Images are read at the stored resolution; pass
/// `resolution` to re-render the recorded scenes at another size instead.
inline Dataset load_split(const std::filesystem::path& dir, const std::string& split,
                          std::optional<std::size_t> resolution = std::nullopt) {
  const DatasetHeader header = read_dataset_header(dir);
  Dataset d;
  d.split = split;
  d.resolution = resolution.value_or(header.resolution);
  const auto path = dir / (split + ".jsonl");
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto rec = nlohmann::json::parse(line);
      SyntheticSample s;
      s.id = rec.at("id").get<std::size_t>();
      s.captions = rec.at("captions").get<std::vector<std::string>>();
      if (rec.contains("scene")) s.scene = parse_scene_descriptor(rec.at("scene").get<std::string>());
      if (d.resolution == header.resolution) {
        s.image = load_image(dir / rec.at("image_file").get<std::string>(), header.resolution);
      } else {
        if (s.scene.objects.empty()) {
          throw DataError("record has no scene; cannot re-render at " + std::to_string(d.resolution));
        }
        s.image = render(s.scene, d.resolution);
      }
      d.samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return d;
}

}  // namespace vcgpt
