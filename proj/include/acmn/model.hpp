#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "acmn/common.hpp"
#include "acmn/layout.hpp"
#include "acmn/rng.hpp"
#include "acmn/tensor.hpp"

// The model: a small CNN encodes the image into a spatial feature grid, a
// Bi-LSTM encodes the question, and the compiled dependency plan is executed
// bottom-up.  Each node runs an attention module (children's attention maps
// mask the features adversarially: already-attended regions are suppressed)
// and a composition module (gated fusion of child hidden state and attended
// features, plus a residual sum over all children).  The root's hidden
// feature feeds an MLP over the answer vocabulary.

namespace acmn {

enum class Variant { Full, NoResidual, ConcatAttention };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoResidual: return "noresidual";
    default: return "concat";
  }
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::Full;
  if (s == "noresidual") return Variant::NoResidual;
  if (s == "concat") return Variant::ConcatAttention;
  throw FormatError("unknown variant: " + s + " (want full|noresidual|concat)");
}

struct ModelConfig {
  int grid_h = 8, grid_w = 8;
  int c_vis = 24;    // CNN output channels
  int d_word = 300;  // word encoding width; Bi-LSTM uses d_word/2 per direction
  int d_hidden = 256;
  int d_fuse = 512;  // width of the two fusion projections
  int d_att = 128;   // width of the attention scoring space
  int heights = 5;   // parameter sets; deeper nodes clamp to the last one
  std::vector<int> mlp_sizes = {256, 256};
  int n_answers = 10;
  int vocab = 1;
  int image_size = 128;
  Variant variant = Variant::Full;
  bool use_coords = false;             // append x,y ramps to the feature grid
  bool attention_child_context = false;  // extra scoring term from child-attended features

  int cells() const { return grid_h * grid_w; }
  int v_channels() const { return c_vis + (use_coords ? 2 : 0); }
  int score_channels() const {
    return v_channels() + (variant == Variant::ConcatAttention ? 1 : 0);
  }
  bool has_child_context() const {
    return attention_child_context && variant != Variant::ConcatAttention;
  }

  void validate() const {
    auto positive = [](int v, const char* what) {
      if (v < 1) throw ContractError(std::string("config: ") + what + " must be >= 1");
    };
    positive(grid_h, "grid_h");
    positive(grid_w, "grid_w");
    positive(c_vis, "c_vis");
    positive(d_word, "d_word");
    positive(d_hidden, "d_hidden");
    positive(d_fuse, "d_fuse");
    positive(d_att, "d_att");
    positive(heights, "heights");
    positive(n_answers, "n_answers");
    positive(vocab, "vocab");
    if (d_word % 2 != 0) throw ContractError("config: d_word must be even (two LSTM directions)");
    if (mlp_sizes.size() != 2)
      throw ContractError("config: mlp_sizes must list the two hidden widths");
    for (int m : mlp_sizes) positive(m, "mlp width");
    if (grid_h != grid_w)
      throw ContractError("config: the four stride-2 conv layers need a square grid");
    if (image_size != grid_h << 4)
      throw ContractError("config: image_size must be 16 * grid (four stride-2 halvings)");
  }

  nlohmann::json to_json() const {
    return {{"grid_h", grid_h},
            {"grid_w", grid_w},
            {"c_vis", c_vis},
            {"d_word", d_word},
            {"d_hidden", d_hidden},
            {"d_fuse", d_fuse},
            {"d_att", d_att},
            {"heights", heights},
            {"mlp_sizes", mlp_sizes},
            {"n_answers", n_answers},
            {"vocab", vocab},
            {"image_size", image_size},
            {"variant", variant_name(variant)},
            {"use_coords", use_coords},
            {"attention_child_context", attention_child_context}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
      c.grid_h = j.at("grid_h").get<int>();
      c.grid_w = j.at("grid_w").get<int>();
      c.c_vis = j.at("c_vis").get<int>();
      c.d_word = j.at("d_word").get<int>();
      c.d_hidden = j.at("d_hidden").get<int>();
      c.d_fuse = j.at("d_fuse").get<int>();
      c.d_att = j.at("d_att").get<int>();
      c.heights = j.at("heights").get<int>();
      c.mlp_sizes = j.at("mlp_sizes").get<std::vector<int>>();
      c.n_answers = j.at("n_answers").get<int>();
      c.vocab = j.at("vocab").get<int>();
      c.image_size = j.at("image_size").get<int>();
      c.variant = variant_from_string(j.at("variant").get<std::string>());
      c.use_coords = j.at("use_coords").get<bool>();
      c.attention_child_context = j.at("attention_child_context").get<bool>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

// ---- parameters ------------------------------------------------------------

namespace detail {

// Single source of truth for tensor names, shapes, and their fixed order.
template <typename Fn>
void for_each_tensor(const ModelConfig& cfg, Fn&& fn) {
  int h2 = cfg.d_word / 2;
  fn("embed", Shape{cfg.vocab, cfg.d_word});
  for (const char* dir : {"fwd", "bwd"}) {
    std::string p = std::string("lstm.") + dir;
    fn(p + ".wx", Shape{4 * h2, cfg.d_word});
    fn(p + ".wh", Shape{4 * h2, h2});
    fn(p + ".b", Shape{4 * h2});
  }
  int cin = 3;
  for (int l = 0; l < 4; ++l) {
    std::string p = "cnn." + std::to_string(l);
    fn(p + ".k", Shape{cfg.c_vis, cin, 3, 3});
    fn(p + ".b", Shape{cfg.c_vis});
    cin = cfg.c_vis;
  }
  for (int h = 0; h < cfg.heights; ++h) {
    std::string p = "fa." + std::to_string(h);
    fn(p + ".wv", Shape{cfg.d_att, cfg.score_channels()});
    fn(p + ".ww", Shape{cfg.d_att, cfg.d_word});
    fn(p + ".u", Shape{cfg.d_att});
    if (cfg.has_child_context()) fn(p + ".wg", Shape{cfg.d_att, cfg.v_channels()});
  }
  for (int h = 0; h < cfg.heights; ++h) {
    std::string p = "fh." + std::to_string(h);
    fn(p + ".w1", Shape{cfg.d_fuse, cfg.d_hidden + cfg.v_channels()});
    fn(p + ".b1", Shape{cfg.d_fuse});
    fn(p + ".w2", Shape{cfg.d_fuse, cfg.d_word});
    fn(p + ".b2", Shape{cfg.d_fuse});
    fn(p + ".w3", Shape{cfg.d_hidden, cfg.d_fuse});
    fn(p + ".b3", Shape{cfg.d_hidden});
  }
  const std::array<int, 3> widths = {cfg.mlp_sizes[0], cfg.mlp_sizes[1],
                                     cfg.n_answers};
  int in = cfg.d_hidden;
  for (int i = 0; i < 3; ++i) {
    std::string p = "mlp." + std::to_string(i);
    fn(p + ".w", Shape{widths[std::size_t(i)], in});
    fn(p + ".b", Shape{widths[std::size_t(i)]});
    in = widths[std::size_t(i)];
  }
}

inline bool is_bias_name(const std::string& name) {
  auto dot = name.rfind('.');
  return dot != std::string::npos && dot + 1 < name.size() && name[dot + 1] == 'b';
}

inline std::size_t fan_in(const Shape& shape) {
  if (shape.size() == 2) return std::size_t(shape[1]);
  if (shape.size() == 4) return std::size_t(shape[1]) * shape[2] * shape[3];
  return std::size_t(shape[0]);  // scoring vector
}

}  // namespace detail

template <typename T>
struct ParamTensor {
  std::string name;
  Shape shape;
  std::vector<T> data;
};

template <typename T>
struct ParamSet {
  ModelConfig cfg;
  std::vector<ParamTensor<T>> tensors;
  std::unordered_map<std::string, std::size_t> index;

  std::size_t index_of(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw ContractError("no parameter tensor named " + name);
    return it->second;
  }
  ParamTensor<T>& at(const std::string& name) { return tensors[index_of(name)]; }
  const ParamTensor<T>& at(const std::string& name) const {
    return tensors[index_of(name)];
  }
  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.data.size();
    return n;
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    out.cfg = cfg;
    out.index = index;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) {
      ParamTensor<U> u{t.name, t.shape, std::vector<U>(t.data.size())};
      for (std::size_t i = 0; i < t.data.size(); ++i) u.data[i] = U(t.data[i]);
      out.tensors.push_back(std::move(u));
    }
    return out;
  }

  // All-zero tensors in canonical order (checkpoint loading fills them in).
  static ParamSet<T> zeros(const ModelConfig& cfg) {
    cfg.validate();
    ParamSet<T> out;
    out.cfg = cfg;
    detail::for_each_tensor(cfg, [&](const std::string& name, const Shape& shape) {
      out.index.emplace(name, out.tensors.size());
      out.tensors.push_back({name, shape, std::vector<T>(numel(shape), T(0))});
    });
    return out;
  }

  // Weights ~ uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) from a named stream
  // per tensor, except that layers feeding a relu use the sqrt(6/fan_in)
  // bound that keeps their output variance flat (a plain 1/sqrt(fan_in)
  // stack shrinks activations by ~2.4x per relu layer, which starves the
  // visual pathway: four conv layers leave feature magnitudes ~30x below
  // the coordinate channels and training stalls on answer marginals).
  // Biases are zero except the gates: LSTM forget gates and the composition
  // gate start at 1 so their multiplicative paths pass signal from the
  // first step instead of a product of near-zero affines.
  static ParamSet<T> init(const ModelConfig& cfg, std::uint64_t seed) {
    ParamSet<T> out = zeros(cfg);
    int h2 = cfg.d_word / 2;
    for (ParamTensor<T>& t : out.tensors) {
      if (detail::is_bias_name(t.name)) {
        if (t.name == "lstm.fwd.b" || t.name == "lstm.bwd.b")
          std::fill(t.data.begin() + h2, t.data.begin() + 2 * h2, T(1));
        if (t.name.rfind("fh.", 0) == 0 && t.name.size() >= 3 &&
            t.name.compare(t.name.size() - 3, 3, ".b2") == 0)
          std::fill(t.data.begin(), t.data.end(), T(1));
        continue;
      }
      bool feeds_relu = t.name.rfind("cnn.", 0) == 0 || t.name == "mlp.0.w" ||
                        t.name == "mlp.1.w";
      double gain = feeds_relu ? std::sqrt(6.0) : 1.0;
      // The attention scorer needs its tanh inputs and its softmax logits at
      // unit order from the start. Under plain 1/sqrt(fan) the logits sit at
      // std ~0.27, so attention opens uniform over the cells: softmax
      // gradients are attenuated by the cell count, the word projection is
      // cell-constant and cancels out of the softmax until the tanh leaves
      // its linear regime, and training settles into answering from the
      // global average of the feature map (observed on a stalled run as
      // attention mass on object cells 15-100x below uniform and maps that
      // ignore the question words). Gains below rescale each projection by
      // the measured scale of its input at init: visual features and pooled
      // context ~0.25, word encodings ~0.1, tanh outputs ~0.5.
      if (t.name.rfind("fa.", 0) == 0) {
        if (t.name.ends_with(".ww")) gain = 13.0;
        else gain = 4.0;  // .wv, .wg, .u
      }
      Rng rng = Rng::stream(seed, "init." + t.name);
      double bound = gain / std::sqrt(double(detail::fan_in(t.shape)));
      // The embedding is a lookup, not an affine map; fan-in scaling would
      // leave word vectors (and so the tanh operating points of the
      // attention scorer, whose only word/cell interaction is tanh
      // curvature) an order of magnitude too small to train quickly.
      if (t.name == "embed") bound = 1.0;
      for (T& v : t.data) v = T((rng.uniform() * 2.0 - 1.0) * bound);
    }
    return out;
  }
};

template <typename T>
struct GradBuffers {
  std::vector<std::vector<T>> g;  // aligned with ParamSet::tensors

  explicit GradBuffers(const ParamSet<T>& params) {
    g.reserve(params.tensors.size());
    for (const auto& t : params.tensors) g.emplace_back(t.data.size(), T(0));
  }
  void zero() {
    for (auto& v : g) std::fill(v.begin(), v.end(), T(0));
  }
};

// ---- tape binding ----------------------------------------------------------

template <typename T>
struct BoundModel {
  const ModelConfig* cfg = nullptr;

  struct Lstm {
    Var<T> wx, wh, b;
  };
  struct Fa {
    Var<T> wv, ww, u, wg;
    bool has_g = false;
  };
  struct Fh {
    Var<T> w1, b1, w2, b2, w3, b3;
  };

  Var<T> embed;
  Lstm lstm_fwd, lstm_bwd;
  std::array<Var<T>, 4> cnn_k, cnn_b;
  std::vector<Fa> fa;
  std::vector<Fh> fh;
  std::array<Var<T>, 3> mlp_w, mlp_b;
};

// Creates one leaf per tensor.  With grads == nullptr the graph is built for
// inference only; otherwise backward() accumulates into the buffers.
template <typename T>
BoundModel<T> bind_model(Tape<T>& tape, const ParamSet<T>& params,
                         GradBuffers<T>* grads = nullptr) {
  const ModelConfig& cfg = params.cfg;
  std::vector<Var<T>> vars(params.tensors.size());
  for (std::size_t i = 0; i < params.tensors.size(); ++i)
    vars[i] = tape.leaf(params.tensors[i].shape, params.tensors[i].data.data(),
                        grads ? grads->g[i].data() : Tape<T>::kNoGrad);
  auto at = [&](const std::string& name) { return vars[params.index_of(name)]; };

  BoundModel<T> m;
  m.cfg = &params.cfg;
  m.embed = at("embed");
  m.lstm_fwd = {at("lstm.fwd.wx"), at("lstm.fwd.wh"), at("lstm.fwd.b")};
  m.lstm_bwd = {at("lstm.bwd.wx"), at("lstm.bwd.wh"), at("lstm.bwd.b")};
  for (int l = 0; l < 4; ++l) {
    std::string p = "cnn." + std::to_string(l);
    m.cnn_k[std::size_t(l)] = at(p + ".k");
    m.cnn_b[std::size_t(l)] = at(p + ".b");
  }
  for (int h = 0; h < cfg.heights; ++h) {
    std::string p = "fa." + std::to_string(h);
    typename BoundModel<T>::Fa fa{at(p + ".wv"), at(p + ".ww"), at(p + ".u"), {}, false};
    if (cfg.has_child_context()) {
      fa.wg = at(p + ".wg");
      fa.has_g = true;
    }
    m.fa.push_back(fa);
    p = "fh." + std::to_string(h);
    m.fh.push_back({at(p + ".w1"), at(p + ".b1"), at(p + ".w2"), at(p + ".b2"),
                    at(p + ".w3"), at(p + ".b3")});
  }
  for (int i = 0; i < 3; ++i) {
    std::string p = "mlp." + std::to_string(i);
    m.mlp_w[std::size_t(i)] = at(p + ".w");
    m.mlp_b[std::size_t(i)] = at(p + ".b");
  }
  return m;
}

// ---- encoders --------------------------------------------------------------

namespace detail {

template <typename T>
std::pair<Var<T>, Var<T>> lstm_step(Var<T> x, Var<T> h_prev, Var<T> c_prev,
                                    const typename BoundModel<T>::Lstm& p, int h2) {
  // Gate order in the stacked projection: input, forget, cell, output.
  Var<T> z = add(add(matmul(p.wx, x), matmul(p.wh, h_prev)), p.b);
  Var<T> gi = sigmoid(slice(z, 0, h2));
  Var<T> gf = sigmoid(slice(z, h2, h2));
  Var<T> gc = acmn::tanh(slice(z, 2 * h2, h2));
  Var<T> go = sigmoid(slice(z, 3 * h2, h2));
  Var<T> c = add(mul(gf, c_prev), mul(gi, gc));
  return {mul(go, acmn::tanh(c)), c};
}

template <typename T>
std::vector<T> coord_values(int gh, int gw) {
  std::vector<T> out(std::size_t(2) * gh * gw);
  for (int y = 0; y < gh; ++y)
    for (int x = 0; x < gw; ++x) {
      out[std::size_t(y) * gw + x] = gh == 1 ? T(0) : T(2.0 * y / (gh - 1) - 1.0);
      out[std::size_t(gh) * gw + std::size_t(y) * gw + x] =
          gw == 1 ? T(0) : T(2.0 * x / (gw - 1) - 1.0);
    }
  return out;
}

}  // namespace detail

// Word encodings: embedding rows through both LSTM directions, concatenated
// per position, so each w[i] carries the whole question's context.
template <typename T>
std::vector<Var<T>> encode_words(Tape<T>& tape, const BoundModel<T>& m,
                                 const std::vector<int>& token_ids) {
  const ModelConfig& cfg = *m.cfg;
  if (token_ids.empty()) throw ContractError("encode_words: empty question");
  int n = int(token_ids.size());
  int h2 = cfg.d_word / 2;

  std::vector<Var<T>> xs;
  xs.reserve(std::size_t(n));
  for (int id : token_ids) {
    if (id < 0 || id >= cfg.vocab)
      throw ContractError("encode_words: token id " + std::to_string(id) +
                          " outside vocab of " + std::to_string(cfg.vocab));
    xs.push_back(row(m.embed, id));
  }

  std::vector<Var<T>> fwd(static_cast<std::size_t>(n));
  std::vector<Var<T>> bwd(static_cast<std::size_t>(n));
  Var<T> h = tape.make({h2}, false), c = tape.make({h2}, false);
  for (int t = 0; t < n; ++t) {
    auto [nh, nc] = detail::lstm_step(xs[std::size_t(t)], h, c, m.lstm_fwd, h2);
    h = nh;
    c = nc;
    fwd[std::size_t(t)] = h;
  }
  h = tape.make({h2}, false);
  c = tape.make({h2}, false);
  for (int t = n - 1; t >= 0; --t) {
    auto [nh, nc] = detail::lstm_step(xs[std::size_t(t)], h, c, m.lstm_bwd, h2);
    h = nh;
    c = nc;
    bwd[std::size_t(t)] = h;
  }

  std::vector<Var<T>> out;
  out.reserve(std::size_t(n));
  for (int t = 0; t < n; ++t)
    out.push_back(acmn::concat<T>({fwd[std::size_t(t)], bwd[std::size_t(t)]}));
  return out;
}

// Image to feature grid: four (conv 3x3, stride 2, pad 1, relu) layers, then
// optional x/y coordinate ramps as two extra channels.
template <typename T>
Var<T> encode_image(Tape<T>& tape, const BoundModel<T>& m, Var<T> image) {
  const ModelConfig& cfg = *m.cfg;
  detail::require_shape(image, {3, cfg.image_size, cfg.image_size}, "encode_image");
  Var<T> x = image;
  for (int l = 0; l < 4; ++l)
    x = relu(channel_bias(conv2d(x, m.cnn_k[std::size_t(l)], 2, 1),
                          m.cnn_b[std::size_t(l)]));
  detail::require_shape(x, {cfg.c_vis, cfg.grid_h, cfg.grid_w}, "encode_image output");
  if (cfg.use_coords) {
    Var<T> coords = tape.constant({2, cfg.grid_h, cfg.grid_w},
                                  detail::coord_values<T>(cfg.grid_h, cfg.grid_w));
    x = concat_channels(x, coords);
  }
  return x;
}

// ---- per-node modules ------------------------------------------------------

// Attention over grid cells.  Children's summed maps either carve an
// adversarial mask out of the features (relu(1 - att_in), so attended cells
// are suppressed and over-attended ones clamp at zero) or, in the concat
// variant, ride along as an extra feature channel with no masking.
template <typename T>
Var<T> attention_module(Tape<T>& tape, const BoundModel<T>& m, int height,
                        const Var<T>* att_in, Var<T> v, Var<T> w) {
  const ModelConfig& cfg = *m.cfg;
  const auto& p = m.fa[std::size_t(std::min(height, cfg.heights - 1))];
  int cells = cfg.cells();

  Var<T> feats;  // [score_channels, cells]
  if (cfg.variant == Variant::ConcatAttention) {
    Var<T> amap = att_in ? *att_in : tape.make({cells}, false);
    Var<T> vcat = concat_channels(v, reshape(amap, {1, cfg.grid_h, cfg.grid_w}));
    feats = reshape(vcat, {cfg.score_channels(), cells});
  } else {
    Var<T> vflat = reshape(v, {cfg.v_channels(), cells});
    if (att_in) {
      Var<T> mask = relu(scale_add(*att_in, T(-1), T(1)));
      feats = mul_rows(vflat, mask);
    } else {
      feats = vflat;  // leaf: mask = relu(1 - 0) is all ones
    }
  }

  Var<T> wterm = matmul(p.ww, w);
  if (p.has_g && att_in) {
    Var<T> g = weighted_spatial_sum(*att_in, v);
    wterm = add(wterm, matmul(p.wg, g));
  }
  Var<T> scores = matmul(reshape(p.u, {1, cfg.d_att}),
                         acmn::tanh(add_cols(matmul(p.wv, feats), wterm)));
  return softmax(reshape(scores, {cells}));
}

// Gated fusion of the children's composed hidden state with the freshly
// attended visual feature, plus (in the full variant) a residual sum over
// every child's hidden feature.
template <typename T>
Var<T> composition_module(Tape<T>& tape, const BoundModel<T>& m, int height,
                          const Var<T>* h_in, Var<T> h_prime, Var<T> w,
                          const std::vector<Var<T>>& children_h) {
  const ModelConfig& cfg = *m.cfg;
  const auto& p = m.fh[std::size_t(std::min(height, cfg.heights - 1))];

  Var<T> hin = h_in ? *h_in : tape.make({cfg.d_hidden}, false);
  Var<T> fused = mul(affine(acmn::concat<T>({hin, h_prime}), p.w1, p.b1),
                     affine(w, p.w2, p.b2));
  Var<T> delta = affine(fused, p.w3, p.b3);
  if (cfg.variant == Variant::NoResidual || children_h.empty()) return delta;
  return add(delta, sum_vars(children_h));
}

// ---- plan execution --------------------------------------------------------

template <typename T>
struct ExecOutput {
  Var<T> h_root;
  std::vector<Var<T>> att;  // per plan step
  std::vector<Var<T>> h;    // per plan step
};

// Runs the compiled plan bottom-up.  Modifier and neutral children feed the
// attention input; clausal-predicate and neutral children feed the hidden
// input; every child joins the residual sum.  With debug set, each emitted
// attention map is checked to be a probability distribution.
template <typename T>
ExecOutput<T> execute_plan(Tape<T>& tape, const BoundModel<T>& m,
                           const ExecutionPlan& plan, Var<T> v,
                           const std::vector<Var<T>>& words, bool debug = false) {
  if (plan.steps.empty()) throw ContractError("execute_plan: empty plan");
  ExecOutput<T> out;
  out.att.reserve(plan.steps.size());
  out.h.reserve(plan.steps.size());

  for (const PlanStep& step : plan.steps) {
    if (step.word_position < 0 || step.word_position >= int(words.size()))
      throw ContractError("execute_plan: word position " +
                          std::to_string(step.word_position) + " outside question of " +
                          std::to_string(words.size()) + " words");
    Var<T> w = words[std::size_t(step.word_position)];

    std::vector<Var<T>> att_in_list, h_in_list, residual;
    for (const auto& [child, rel] : step.children) {
      if (rel != RelationClass::ClausalPredicate)
        att_in_list.push_back(out.att[std::size_t(child)]);
      if (rel != RelationClass::Modifier)
        h_in_list.push_back(out.h[std::size_t(child)]);
      residual.push_back(out.h[std::size_t(child)]);
    }
    std::optional<Var<T>> att_in, h_in;
    if (!att_in_list.empty()) att_in = sum_vars(att_in_list);
    if (!h_in_list.empty()) h_in = sum_vars(h_in_list);

    Var<T> att = attention_module(tape, m, step.height,
                                  att_in ? &*att_in : nullptr, v, w);
    if (debug) {
      double total = 0;
      for (std::size_t i = 0; i < att.node->n; ++i) {
        if (att.node->values[i] < T(0))
          throw ContractError("attention map has a negative entry at node " + step.form);
        total += double(att.node->values[i]);
      }
      if (std::abs(total - 1.0) > 1e-5)
        throw ContractError("attention map sums to " + std::to_string(total) +
                            " at node " + step.form);
    }
    Var<T> h_prime = weighted_spatial_sum(att, v);
    Var<T> h = composition_module(tape, m, step.height, h_in ? &*h_in : nullptr,
                                  h_prime, w, residual);
    out.att.push_back(att);
    out.h.push_back(h);
  }
  out.h_root = out.h.back();
  return out;
}

template <typename T>
Var<T> answer_head(const BoundModel<T>& m, Var<T> h_root) {
  Var<T> x = relu(affine(h_root, m.mlp_w[0], m.mlp_b[0]));
  x = relu(affine(x, m.mlp_w[1], m.mlp_b[1]));
  return affine(x, m.mlp_w[2], m.mlp_b[2]);
}

template <typename T>
struct ForwardResult {
  Var<T> logits;
  ExecOutput<T> exec;
};

// Full pass over one question given an already-encoded feature grid.
template <typename T>
ForwardResult<T> forward(Tape<T>& tape, const BoundModel<T>& m,
                         const ExecutionPlan& plan, const std::vector<int>& token_ids,
                         Var<T> v, bool debug = false) {
  std::vector<Var<T>> words = encode_words(tape, m, token_ids);
  ExecOutput<T> exec = execute_plan(tape, m, plan, v, words, debug);
  Var<T> logits = answer_head(m, exec.h_root);
  return {logits, std::move(exec)};
}

}  // namespace acmn
