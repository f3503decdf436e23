#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "acmn/common.hpp"
#include "acmn/image.hpp"
#include "acmn/layout.hpp"
#include "acmn/rng.hpp"

// A synthetic scene-and-question corpus: 6 uniquely colored objects (circle
// or square) on a 75x75 canvas, 20 templated questions per scene (10 spatial
// or shape queries about one object, 10 that require relating two objects),
// each question shipped with a hand-annotated dependency parse and a gold
// answer from exhaustive geometry.

namespace acmn {

inline constexpr int kCanvas = 75;
inline constexpr int kObjectHalf = 5;      // circle radius and square half-side
inline constexpr int kMinSeparation = 12;  // Chebyshev distance between centers
inline constexpr int kObjectsPerScene = 6;

struct NamedColor {
  const char* name;
  std::array<std::uint8_t, 3> rgb;
};

inline constexpr std::array<NamedColor, 6> kColors = {{
    {"red", {255, 0, 0}},
    {"green", {0, 255, 0}},
    {"blue", {0, 0, 255}},
    {"orange", {255, 165, 0}},
    {"gray", {128, 128, 128}},
    {"yellow", {255, 255, 0}},
}};

inline const std::vector<std::string>& answer_vocab() {
  static const std::vector<std::string> v = {"circle", "square", "yes", "no",
                                             "1", "2", "3", "4", "5", "6"};
  return v;
}

enum class ShapeKind { Circle, Square };

struct SceneObject {
  int color = 0;  // index into kColors; unique within a scene
  ShapeKind shape = ShapeKind::Circle;
  int x = 0;  // center, pixels
  int y = 0;
};

struct Scene {
  long id = 0;
  std::array<SceneObject, kObjectsPerScene> objects;
};

// ---- scene sampling --------------------------------------------------------

namespace detail {

inline bool fits(const Scene& scene, int placed, int x, int y, int separation) {
  for (int i = 0; i < placed; ++i) {
    int dx = std::abs(scene.objects[i].x - x);
    int dy = std::abs(scene.objects[i].y - y);
    if (std::max(dx, dy) < separation) return false;
  }
  return true;
}

}  // namespace detail

// Deterministic in (seed, scene_index).  Positions are rejection-sampled;
// if an object cannot be placed after 1000 draws the whole scene restarts
// on the next sub-stream (practically unreachable at the default sizes).
inline Scene sample_scene(std::uint64_t seed, long scene_index,
                          int separation = kMinSeparation,
                          int lo = kObjectHalf, int hi = kCanvas - 1 - kObjectHalf) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng = Rng::stream(seed, "scene." + std::to_string(attempt),
                          std::uint64_t(scene_index));
    Scene scene;
    scene.id = scene_index;
    bool ok = true;
    for (int i = 0; i < kObjectsPerScene && ok; ++i) {
      SceneObject& obj = scene.objects[i];
      obj.color = i;  // one object per color
      obj.shape = rng.below(2) == 0 ? ShapeKind::Circle : ShapeKind::Square;
      ok = false;
      for (int tries = 0; tries < 1000; ++tries) {
        int x = rng.uniform_int(lo, hi);
        int y = rng.uniform_int(lo, hi);
        if (detail::fits(scene, i, x, y, separation)) {
          obj.x = x;
          obj.y = y;
          ok = true;
          break;
        }
      }
    }
    if (ok) return scene;
  }
}

// ---- rendering -------------------------------------------------------------

inline ImageU8 render(const Scene& scene, int n_objects = kObjectsPerScene) {
  ImageU8 img;
  img.width = kCanvas;
  img.height = kCanvas;
  img.rgb.assign(std::size_t(kCanvas) * kCanvas * 3, 0);  // black background
  for (int i = 0; i < n_objects; ++i) {
    const SceneObject& obj = scene.objects[i];
    const auto& rgb = kColors[std::size_t(obj.color)].rgb;
    for (int dy = -kObjectHalf; dy <= kObjectHalf; ++dy) {
      for (int dx = -kObjectHalf; dx <= kObjectHalf; ++dx) {
        if (obj.shape == ShapeKind::Circle &&
            dx * dx + dy * dy > kObjectHalf * kObjectHalf)
          continue;
        int x = obj.x + dx;
        int y = obj.y + dy;
        if (x < 0 || x >= kCanvas || y < 0 || y >= kCanvas) continue;
        std::uint8_t* px = img.rgb.data() + (std::size_t(y) * kCanvas + x) * 3;
        px[0] = rgb[0];
        px[1] = rgb[1];
        px[2] = rgb[2];
      }
    }
  }
  return img;
}

// Stored images are canvas-sized; the network input is a larger square grid,
// so loading nearest-upscales each channel plane and maps bytes to [0,1].
template <typename T>
void image_to_input(const ImageU8& img, int out_size, T* out) {
  std::vector<T> plane(std::size_t(img.width) * img.height);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        plane[std::size_t(y) * img.width + x] =
            T(img.rgb[(std::size_t(y) * img.width + x) * 3 + c]) / T(255);
    resize_nearest(plane.data(), img.width, img.height,
                   out + std::size_t(c) * out_size * out_size, out_size, out_size);
  }
}

// ---- question templates ----------------------------------------------------

enum class QTemplate {
  Shape,          // What is the shape of the C object ?
  Left,           // Is the C object on the left side of the image ?
  Top,            // Is the C object on the top side of the image ?
  FurthestShape,  // What is the shape of the object that is furthest from the C object ?
  ClosestShape,   // What is the shape of the object that is closest to the C object ?
  CountSame,      // How many objects have the same shape as the C object ?
};

inline bool is_relational(QTemplate t) {
  return t == QTemplate::FurthestShape || t == QTemplate::ClosestShape ||
         t == QTemplate::CountSame;
}

namespace detail {

struct TemplateRow {
  const char* form;  // "{C}" marks the color slot
  const char* upos;
  int head;
  const char* deprel;
};

// Hand annotations following UD conventions; these are fixed assets, not
// parser output, so the corpus is reproducible without a parser dependency.
inline const std::vector<TemplateRow>& template_rows(QTemplate t) {
  static const std::vector<TemplateRow> shape = {
      {"What", "PRON", 0, "root"},  {"is", "AUX", 1, "cop"},
      {"the", "DET", 4, "det"},     {"shape", "NOUN", 1, "nsubj"},
      {"of", "ADP", 8, "case"},     {"the", "DET", 8, "det"},
      {"{C}", "ADJ", 8, "amod"},    {"object", "NOUN", 4, "nmod"},
      {"?", "PUNCT", 1, "punct"},
  };
  static const std::vector<TemplateRow> left = {
      {"Is", "AUX", 8, "cop"},      {"the", "DET", 4, "det"},
      {"{C}", "ADJ", 4, "amod"},    {"object", "NOUN", 8, "nsubj"},
      {"on", "ADP", 8, "case"},     {"the", "DET", 8, "det"},
      {"left", "ADJ", 8, "amod"},   {"side", "NOUN", 0, "root"},
      {"of", "ADP", 11, "case"},    {"the", "DET", 11, "det"},
      {"image", "NOUN", 8, "nmod"}, {"?", "PUNCT", 8, "punct"},
  };
  static const std::vector<TemplateRow> top = [] {
    std::vector<TemplateRow> rows = left;
    rows[6].form = "top";
    return rows;
  }();
  static const std::vector<TemplateRow> furthest = {
      {"What", "PRON", 0, "root"},      {"is", "AUX", 1, "cop"},
      {"the", "DET", 4, "det"},         {"shape", "NOUN", 1, "nsubj"},
      {"of", "ADP", 7, "case"},         {"the", "DET", 7, "det"},
      {"object", "NOUN", 4, "nmod"},    {"that", "PRON", 10, "nsubj"},
      {"is", "AUX", 10, "cop"},         {"furthest", "ADJ", 7, "acl:relcl"},
      {"from", "ADP", 14, "case"},      {"the", "DET", 14, "det"},
      {"{C}", "ADJ", 14, "amod"},       {"object", "NOUN", 10, "nmod"},
      {"?", "PUNCT", 1, "punct"},
  };
  static const std::vector<TemplateRow> closest = [] {
    std::vector<TemplateRow> rows = furthest;
    rows[9].form = "closest";
    rows[10].form = "to";
    return rows;
  }();
  static const std::vector<TemplateRow> count = {
      {"How", "ADV", 2, "advmod"},   {"many", "ADJ", 3, "amod"},
      {"objects", "NOUN", 4, "nsubj"}, {"have", "VERB", 0, "root"},
      {"the", "DET", 7, "det"},      {"same", "ADJ", 7, "amod"},
      {"shape", "NOUN", 4, "dobj"},  {"as", "ADP", 11, "case"},
      {"the", "DET", 11, "det"},     {"{C}", "ADJ", 11, "amod"},
      {"object", "NOUN", 7, "nmod"}, {"?", "PUNCT", 4, "punct"},
  };
  switch (t) {
    case QTemplate::Shape: return shape;
    case QTemplate::Left: return left;
    case QTemplate::Top: return top;
    case QTemplate::FurthestShape: return furthest;
    case QTemplate::ClosestShape: return closest;
    default: return count;
  }
}

}  // namespace detail

inline std::vector<std::string> question_tokens(QTemplate t, int color) {
  std::vector<std::string> out;
  for (const auto& row : detail::template_rows(t))
    out.push_back(std::string(row.form) == "{C}" ? kColors[std::size_t(color)].name
                                                 : row.form);
  return out;
}

inline std::string question_conllu(QTemplate t, int color) {
  std::string out;
  const auto& rows = detail::template_rows(t);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::string form = std::string(rows[i].form) == "{C}"
                           ? kColors[std::size_t(color)].name
                           : rows[i].form;
    out += std::to_string(i + 1) + "\t" + form + "\t_\t" + rows[i].upos +
           "\t_\t_\t" + std::to_string(rows[i].head) + "\t" + rows[i].deprel +
           "\t_\t_\n";
  }
  return out;
}

// ---- answer oracle ---------------------------------------------------------

inline std::string answer_oracle(const Scene& scene, QTemplate t, int color) {
  const SceneObject* target = nullptr;
  int target_idx = -1;
  for (int i = 0; i < kObjectsPerScene; ++i)
    if (scene.objects[i].color == color) {
      target = &scene.objects[i];
      target_idx = i;
      break;
    }
  if (target == nullptr) throw ContractError("answer_oracle: color not in scene");

  auto shape_name = [](ShapeKind s) {
    return s == ShapeKind::Circle ? "circle" : "square";
  };
  switch (t) {
    case QTemplate::Shape:
      return shape_name(target->shape);
    case QTemplate::Left:
      return 2 * target->x < kCanvas ? "yes" : "no";  // strictly left of midline
    case QTemplate::Top:
      return 2 * target->y < kCanvas ? "yes" : "no";
    case QTemplate::FurthestShape:
    case QTemplate::ClosestShape: {
      long best = -1;
      int best_idx = -1;
      for (int i = 0; i < kObjectsPerScene; ++i) {
        if (i == target_idx) continue;
        long dx = scene.objects[i].x - target->x;
        long dy = scene.objects[i].y - target->y;
        long d2 = dx * dx + dy * dy;
        bool better = best_idx < 0 || (t == QTemplate::FurthestShape ? d2 > best
                                                                     : d2 < best);
        if (better) {  // strict comparison: ties keep the lower index
          best = d2;
          best_idx = i;
        }
      }
      return shape_name(scene.objects[best_idx].shape);
    }
    case QTemplate::CountSame: {
      int n = 0;
      for (const SceneObject& o : scene.objects)
        if (o.shape == target->shape) ++n;  // the target counts itself
      return std::to_string(n);
    }
  }
  throw ContractError("answer_oracle: unknown template");
}

// ---- question selection ----------------------------------------------------

struct QAInstance {
  QTemplate tmpl;
  int target_color = 0;
  std::string answer;
};

// 10 one-object questions and 10 relating questions per scene, sampled
// without replacement from the (color x template) grid.
inline std::vector<QAInstance> generate_questions(const Scene& scene,
                                                  std::uint64_t seed,
                                                  bool with_count = true) {
  Rng rng = Rng::stream(seed, "questions", std::uint64_t(scene.id));
  std::vector<QAInstance> out;
  out.reserve(20);

  const std::array<QTemplate, 3> nonrel = {QTemplate::Shape, QTemplate::Left,
                                           QTemplate::Top};
  for (int pick : rng.sample(10, 6 * 3)) {
    QTemplate t = nonrel[std::size_t(pick % 3)];
    int color = pick / 3;
    out.push_back({t, color, answer_oracle(scene, t, color)});
  }
  std::vector<QTemplate> rel = {QTemplate::FurthestShape, QTemplate::ClosestShape};
  if (with_count) rel.push_back(QTemplate::CountSame);
  for (int pick : rng.sample(10, 6 * int(rel.size()))) {
    QTemplate t = rel[std::size_t(pick) % rel.size()];
    int color = pick / int(rel.size());
    out.push_back({t, color, answer_oracle(scene, t, color)});
  }
  return out;
}

// ---- corpus writing --------------------------------------------------------

struct DatasetOptions {
  long n_train = 9800;
  long n_test = 200;
  std::uint64_t seed = 0;
  bool with_count = true;
};

namespace detail {

inline std::string zero_pad(long v, int width) {
  std::string s = std::to_string(v);
  while (int(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

inline nlohmann::json scene_to_json(const Scene& scene, const char* split) {
  nlohmann::json objs = nlohmann::json::array();
  for (const SceneObject& o : scene.objects)
    objs.push_back({{"color", kColors[std::size_t(o.color)].name},
                    {"shape", o.shape == ShapeKind::Circle ? "circle" : "square"},
                    {"x", o.x},
                    {"y", o.y}});
  return {{"scene_id", scene.id}, {"split", split}, {"objects", std::move(objs)}};
}

}  // namespace detail

// Lays out out_dir as: meta.json, vocab.txt, images/{split}_{n}.ppm,
// {split}.jsonl (one QAInstance per line), scenes_{split}.jsonl.
// Byte-reproducible from (seed, sizes, with_count).
inline void write_dataset(const std::string& out_dir, const DatasetOptions& opt) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (ec) throw IoError("cannot create " + out_dir + "/images: " + ec.message());

  // The token inventory is closed over the templates, so the vocabulary is
  // fixed: sorted unique forms, with id 0 reserved for unknowns.
  std::set<std::string> forms;
  for (QTemplate t : {QTemplate::Shape, QTemplate::Left, QTemplate::Top,
                      QTemplate::FurthestShape, QTemplate::ClosestShape,
                      QTemplate::CountSame})
    for (int c = 0; c < int(kColors.size()); ++c)
      for (const std::string& tok : question_tokens(t, c)) forms.insert(tok);
  {
    std::ofstream vocab(fs::path(out_dir) / "vocab.txt");
    if (!vocab) throw IoError("cannot open for writing: " + out_dir + "/vocab.txt");
    vocab << "<unk>\n";
    for (const std::string& f : forms) vocab << f << "\n";
  }

  nlohmann::json meta = {
      {"seed", opt.seed},          {"n_train", opt.n_train},
      {"n_test", opt.n_test},      {"with_count", opt.with_count},
      {"image_size", kCanvas},     {"separation", kMinSeparation},
      {"answers", answer_vocab()},
  };
  {
    nlohmann::json colors = nlohmann::json::array();
    for (const NamedColor& c : kColors)
      colors.push_back({{"name", c.name}, {"rgb", {c.rgb[0], c.rgb[1], c.rgb[2]}}});
    meta["colors"] = std::move(colors);
    std::ofstream mf(fs::path(out_dir) / "meta.json");
    if (!mf) throw IoError("cannot open for writing: " + out_dir + "/meta.json");
    mf << meta.dump(2) << "\n";
  }

  long next_scene = 0;
  for (const auto& [split, count] :
       std::vector<std::pair<const char*, long>>{{"train", opt.n_train},
                                                 {"test", opt.n_test}}) {
    std::ofstream manifest(fs::path(out_dir) / (std::string(split) + ".jsonl"));
    std::ofstream scenes(fs::path(out_dir) /
                         ("scenes_" + std::string(split) + ".jsonl"));
    if (!manifest || !scenes)
      throw IoError("cannot open manifests for writing under " + out_dir);
    for (long i = 0; i < count; ++i) {
      Scene scene = sample_scene(opt.seed, next_scene);
      std::string rel_path = "images/" + std::string(split) + "_" +
                             detail::zero_pad(i, 6) + ".ppm";
      write_ppm((fs::path(out_dir) / rel_path).string(), render(scene));
      scenes << detail::scene_to_json(scene, split).dump() << "\n";
      for (const QAInstance& qa :
           generate_questions(scene, opt.seed, opt.with_count)) {
        nlohmann::json line = {
            {"scene_id", scene.id},
            {"image_path", rel_path},
            {"question", question_tokens(qa.tmpl, qa.target_color)},
            {"conllu", question_conllu(qa.tmpl, qa.target_color)},
            {"answer", qa.answer},
            {"relational", is_relational(qa.tmpl)},
        };
        manifest << line.dump() << "\n";
      }
      ++next_scene;
    }
  }
}

// ---- loading ---------------------------------------------------------------

struct LoadedQA {
  long scene_id = 0;
  int image = 0;  // index into the split's image list
  std::vector<std::string> tokens;
  std::vector<int> token_ids;
  ExecutionPlan plan;
  int answer = 0;  // index into answers
  bool relational = false;
};

struct LoadedSplit {
  std::vector<ImageU8> images;
  std::vector<LoadedQA> qa;  // 20 consecutive entries per image
};

struct LoadedDataset {
  std::string dir;
  nlohmann::json meta;
  std::vector<std::string> vocab;
  std::unordered_map<std::string, int> token_ids;
  std::vector<std::string> answers;
  LoadedSplit train;
  LoadedSplit test;

  int token_id(const std::string& form) const {
    auto it = token_ids.find(form);
    return it == token_ids.end() ? 0 : it->second;
  }
  int answer_id(const std::string& symbol) const {
    for (std::size_t i = 0; i < answers.size(); ++i)
      if (answers[i] == symbol) return int(i);
    throw FormatError("answer symbol not in vocabulary: " + symbol);
  }
};

namespace detail {

inline void load_split(LoadedDataset& data, const std::string& split,
                       LoadedSplit& out, bool fixed_point_prune) {
  namespace fs = std::filesystem;
  std::ifstream manifest(fs::path(data.dir) / (split + ".jsonl"));
  if (!manifest) throw IoError("cannot open: " + data.dir + "/" + split + ".jsonl");
  std::unordered_map<std::string, int> image_index;
  std::string line;
  long line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(split + ".jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
    LoadedQA qa;
    qa.scene_id = j.at("scene_id").get<long>();
    qa.relational = j.at("relational").get<bool>();
    qa.answer = data.answer_id(j.at("answer").get<std::string>());
    qa.tokens = j.at("question").get<std::vector<std::string>>();
    for (const std::string& tok : qa.tokens) qa.token_ids.push_back(data.token_id(tok));

    auto sentences = parse_conllu(j.at("conllu").get<std::string>());
    if (sentences.size() != 1)
      throw FormatError(split + ".jsonl line " + std::to_string(line_no) +
                        ": expected exactly one sentence in conllu");
    qa.plan = compile_plan(
        prune_tree(build_tree(sentences[0].tokens), fixed_point_prune));

    std::string path = j.at("image_path").get<std::string>();
    auto [it, fresh] = image_index.emplace(path, int(out.images.size()));
    if (fresh) out.images.push_back(read_ppm((fs::path(data.dir) / path).string()));
    qa.image = it->second;
    out.qa.push_back(std::move(qa));
  }
}

}  // namespace detail

inline LoadedDataset load_dataset(const std::string& dir,
                                  bool fixed_point_prune = false) {
  namespace fs = std::filesystem;
  LoadedDataset data;
  data.dir = dir;
  {
    std::ifstream mf(fs::path(dir) / "meta.json");
    if (!mf) throw IoError("cannot open: " + dir + "/meta.json");
    try {
      mf >> data.meta;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(dir + "/meta.json: " + e.what());
    }
    data.answers = data.meta.at("answers").get<std::vector<std::string>>();
  }
  {
    std::ifstream vf(fs::path(dir) / "vocab.txt");
    if (!vf) throw IoError("cannot open: " + dir + "/vocab.txt");
    std::string tok;
    while (std::getline(vf, tok)) {
      data.token_ids.emplace(tok, int(data.vocab.size()));
      data.vocab.push_back(tok);
    }
    if (data.vocab.empty() || data.vocab[0] != "<unk>")
      throw FormatError(dir + "/vocab.txt: line 0 must be <unk>");
  }
  detail::load_split(data, "train", data.train, fixed_point_prune);
  detail::load_split(data, "test", data.test, fixed_point_prune);
  return data;
}

}  // namespace acmn
