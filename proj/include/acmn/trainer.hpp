#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "acmn/checkpoint.hpp"
#include "acmn/common.hpp"
#include "acmn/dataset.hpp"
#include "acmn/model.hpp"
#include "acmn/rng.hpp"
#include "acmn/tensor.hpp"

namespace acmn {

// ---- loss ------------------------------------------------------------------

// Fused softmax cross-entropy against a single gold class: logsumexp(x) minus
// x[gold], with the usual softmax-minus-onehot gradient.
template <typename T>
Var<T> cross_entropy(Var<T> logits, int gold) {
  if (logits.node->shape.size() != 1)
    throw ShapeError("cross_entropy: expects rank-1 logits, got " +
                     shape_str(logits.node->shape));
  std::size_t n = logits.node->n;
  if (gold < 0 || std::size_t(gold) >= n)
    throw ContractError("cross_entropy: gold class " + std::to_string(gold) +
                        " out of range for " + std::to_string(n) + " logits");
  Var<T> out = logits.tape->make({1}, logits.node->requires_grad);
  const T* x = logits.node->values;
  T mx = x[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  T z = 0;
  for (std::size_t i = 0; i < n; ++i) z += std::exp(x[i] - mx);
  out.node->value_store[0] = mx + std::log(z) - x[std::size_t(gold)];
  if (out.node->requires_grad) {
    TapeNode<T>*xn = logits.node, *on = out.node;
    out.node->backward = [xn, on, mx, z, gold] {
      T g = on->grad[0];
      T inv = T(1) / z;
      for (std::size_t i = 0; i < xn->n; ++i)
        xn->grad[i] += g * std::exp(xn->values[i] - mx) * inv;
      xn->grad[std::size_t(gold)] -= g;
    };
  }
  return out;
}

// ---- optimizer ---------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip = 5.0;  // global gradient norm cap, 0 disables
};

template <typename T>
struct AdamState {
  long t = 0;
  std::vector<std::vector<T>> m, v;  // aligned with ParamSet::tensors

  AdamState() = default;
  explicit AdamState(const ParamSet<T>& params) {
    m.reserve(params.tensors.size());
    v.reserve(params.tensors.size());
    for (const auto& tn : params.tensors) {
      m.emplace_back(tn.data.size(), T(0));
      v.emplace_back(tn.data.size(), T(0));
    }
  }

  void step(ParamSet<T>& params, const GradBuffers<T>& grads,
            const AdamConfig& cfg) {
    if (m.size() != params.tensors.size())
      throw ContractError("adam: state does not match parameter set");
    ++t;
    T bc1 = T(1) - T(std::pow(cfg.beta1, double(t)));
    T bc2 = T(1) - T(std::pow(cfg.beta2, double(t)));
    T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
    T lr = T(cfg.lr), eps = T(cfg.eps), wd = T(cfg.weight_decay);
    for (std::size_t ti = 0; ti < params.tensors.size(); ++ti) {
      T* p = params.tensors[ti].data.data();
      const T* g = grads.g[ti].data();
      T* mi = m[ti].data();
      T* vi = v[ti].data();
      for (std::size_t e = 0; e < params.tensors[ti].data.size(); ++e) {
        T gv = g[e] + wd * p[e];
        mi[e] = b1 * mi[e] + (T(1) - b1) * gv;
        vi[e] = b2 * vi[e] + (T(1) - b2) * gv * gv;
        p[e] -= lr * (mi[e] / bc1) / (std::sqrt(vi[e] / bc2) + eps);
      }
    }
  }
};

// Scales gradients so their global l2 norm does not exceed max_norm.
// Returns the pre-clip norm.
template <typename T>
double clip_global_norm(GradBuffers<T>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads.g)
    for (T x : g) sq += double(x) * double(x);
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    T s = T(max_norm / norm);
    for (auto& g : grads.g)
      for (T& x : g) x *= s;
  }
  return norm;
}

// ---- batch gradients ---------------------------------------------------------

// Forward and backward for one question; accumulates parameter gradients into
// grads (pass nullptr for a loss-only evaluation) and returns the loss.
template <typename T>
double sample_loss(const ParamSet<T>& params, GradBuffers<T>* grads,
                   const LoadedSplit& split, const LoadedQA& qa) {
  int s = params.cfg.image_size;
  std::vector<T> input(std::size_t(3) * s * s);
  image_to_input(split.images[std::size_t(qa.image)], s, input.data());

  Tape<T> tape(grads != nullptr);
  BoundModel<T> m = bind_model(tape, params, grads);
  Var<T> x = tape.constant_view({3, s, s}, input.data());
  Var<T> v = encode_image(tape, m, x);
  ForwardResult<T> fr = forward(tape, m, qa.plan, qa.token_ids, v);
  Var<T> loss = cross_entropy(fr.logits, qa.answer);
  if (grads) tape.backward(loss);
  return double(loss.node->values[0]);
}

// Mean loss and mean parameter gradients over the given samples. Workers take
// contiguous slices and their buffers are reduced in worker order, so the
// result does not depend on thread scheduling.
template <typename T>
double batch_gradients(const ParamSet<T>& params, const LoadedSplit& split,
                       const std::vector<int>& samples, int n_workers,
                       GradBuffers<T>& out) {
  std::size_t b = samples.size();
  if (b == 0) throw ContractError("batch_gradients: empty batch");
  std::size_t w = std::size_t(std::max(1, n_workers));
  if (w > b) w = b;

  std::vector<GradBuffers<T>> wg;
  wg.reserve(w);
  for (std::size_t i = 0; i < w; ++i) wg.emplace_back(params);
  std::vector<double> wloss(w, 0.0);

  auto run = [&](std::size_t wi) {
    std::size_t lo = b * wi / w, hi = b * (wi + 1) / w;
    for (std::size_t i = lo; i < hi; ++i)
      wloss[wi] +=
          sample_loss(params, &wg[wi], split, split.qa[std::size_t(samples[i])]);
  };
  if (w == 1) {
    run(0);
  } else {
    std::vector<std::thread> threads;
    threads.reserve(w);
    for (std::size_t wi = 0; wi < w; ++wi) threads.emplace_back(run, wi);
    for (auto& th : threads) th.join();
  }

  out.zero();
  double loss = 0;
  T inv = T(1) / T(b);
  for (std::size_t wi = 0; wi < w; ++wi) {
    loss += wloss[wi];
    for (std::size_t ti = 0; ti < out.g.size(); ++ti) {
      T* dst = out.g[ti].data();
      const T* src = wg[wi].g[ti].data();
      for (std::size_t e = 0; e < out.g[ti].size(); ++e) dst[e] += src[e];
    }
  }
  for (auto& g : out.g)
    for (T& x : g) x *= inv;
  return loss / double(b);
}

// ---- evaluation --------------------------------------------------------------

struct EvalResult {
  long n = 0, correct = 0;
  long n_rel = 0, correct_rel = 0;
  long n_nonrel = 0, correct_nonrel = 0;

  static double frac(long c, long n) { return n ? double(c) / double(n) : 0.0; }
  double overall() const { return frac(correct, n); }
  double relational() const { return frac(correct_rel, n_rel); }
  double non_relational() const { return frac(correct_nonrel, n_nonrel); }
};

// Accuracy over a split. Questions are grouped by image so each scene's
// visual features are encoded once. debug turns on the executor's attention
// distribution checks.
template <typename T>
EvalResult evaluate(const ParamSet<T>& params, const LoadedSplit& split,
                    bool debug = false) {
  EvalResult r;
  int s = params.cfg.image_size;
  std::vector<T> input(std::size_t(3) * s * s);
  std::size_t i = 0;
  while (i < split.qa.size()) {
    int img = split.qa[i].image;
    Tape<T> tape(false);
    BoundModel<T> m = bind_model(tape, params);
    image_to_input(split.images[std::size_t(img)], s, input.data());
    Var<T> x = tape.constant_view({3, s, s}, input.data());
    Var<T> v = encode_image(tape, m, x);
    for (; i < split.qa.size() && split.qa[i].image == img; ++i) {
      const LoadedQA& qa = split.qa[i];
      ForwardResult<T> fr = forward(tape, m, qa.plan, qa.token_ids, v, debug);
      int pred = argmax(fr.logits.node->values, params.cfg.n_answers);
      bool ok = pred == qa.answer;
      ++r.n;
      r.correct += ok;
      if (qa.relational) {
        ++r.n_rel;
        r.correct_rel += ok;
      } else {
        ++r.n_nonrel;
        r.correct_nonrel += ok;
      }
    }
  }
  return r;
}

// ---- training loop -----------------------------------------------------------

struct TrainOptions {
  int epochs = 100;
  int batch_size = 32;
  int n_workers = 1;
  std::uint64_t seed = 0;
  std::string out_dir;
  double time_budget_s = 0;  // stop between batches once exceeded, 0 = none
  AdamConfig adam;
  bool eval_debug = false;
};

struct EpochMetrics {
  int epoch = 0;  // 1-based
  double train_loss = 0;
  EvalResult eval;
  double wall_seconds = 0;

  nlohmann::json to_json() const {
    return {{"epoch", epoch},
            {"train_loss", train_loss},
            {"eval_overall", eval.overall()},
            {"eval_rel", eval.relational()},
            {"eval_nonrel", eval.non_relational()},
            {"wall_seconds", wall_seconds}};
  }
};

namespace detail {

inline std::map<std::string, std::vector<float>> adam_blobs(
    const ParamSet<float>& params, const AdamState<float>& adam) {
  std::map<std::string, std::vector<float>> blobs;
  for (std::size_t ti = 0; ti < params.tensors.size(); ++ti) {
    blobs["adam.m." + params.tensors[ti].name] = adam.m[ti];
    blobs["adam.v." + params.tensors[ti].name] = adam.v[ti];
  }
  return blobs;
}

inline void adam_from_blobs(const ParamSet<float>& params,
                            const std::map<std::string, std::vector<float>>& blobs,
                            AdamState<float>& adam) {
  for (std::size_t ti = 0; ti < params.tensors.size(); ++ti) {
    const std::string& name = params.tensors[ti].name;
    auto mi = blobs.find("adam.m." + name);
    auto vi = blobs.find("adam.v." + name);
    if (mi == blobs.end() || vi == blobs.end())
      throw FormatError("checkpoint: missing optimizer state for " + name);
    if (mi->second.size() != params.tensors[ti].data.size() ||
        vi->second.size() != params.tensors[ti].data.size())
      throw FormatError("checkpoint: optimizer state size mismatch for " + name);
    adam.m[ti] = mi->second;
    adam.v[ti] = vi->second;
  }
}

}  // namespace detail

// Runs epochs [start_epoch, opt.epochs), appending one metrics line per epoch
// to out_dir/metrics.jsonl and rewriting out_dir/latest.ckpt after each.
// Returns the metrics of the last completed epoch.
inline EpochMetrics train(const LoadedDataset& data, ParamSet<float>& params,
                          AdamState<float>& adam, int start_epoch,
                          const TrainOptions& opt) {
  if (opt.batch_size < 1) throw ContractError("train: batch_size must be >= 1");
  if (data.train.qa.empty()) throw ContractError("train: empty training split");

  std::filesystem::create_directories(opt.out_dir);
  std::ofstream metrics(opt.out_dir + "/metrics.jsonl", std::ios::app);
  if (!metrics) throw IoError("train: cannot open metrics log in " + opt.out_dir);

  auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
  };

  GradBuffers<float> grads(params);
  std::vector<int> order(data.train.qa.size());
  EpochMetrics last;
  bool out_of_time = false;

  for (int epoch = start_epoch; epoch < opt.epochs && !out_of_time; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    Rng rng = Rng::stream(opt.seed, "shuffle", std::uint64_t(epoch));
    rng.shuffle(order);

    double loss_sum = 0;
    long batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += std::size_t(opt.batch_size)) {
      if (opt.time_budget_s > 0 && elapsed() > opt.time_budget_s) {
        out_of_time = true;
        break;
      }
      std::size_t b1 = std::min(order.size(), b0 + std::size_t(opt.batch_size));
      std::vector<int> batch(order.begin() + long(b0), order.begin() + long(b1));
      loss_sum += batch_gradients(params, data.train, batch, opt.n_workers, grads);
      if (opt.adam.clip > 0) clip_global_norm(grads, opt.adam.clip);
      adam.step(params, grads, opt.adam);
      ++batches;
    }
    if (batches == 0) break;  // budget hit before any work this epoch

    last.epoch = epoch + 1;
    last.train_loss = loss_sum / double(batches);
    last.eval = evaluate(params, data.test, opt.eval_debug);
    last.wall_seconds = elapsed();
    metrics << last.to_json().dump() << "\n";
    metrics.flush();

    nlohmann::json extra = {{"epoch", epoch + 1}, {"adam_t", adam.t}};
    write_checkpoint(opt.out_dir + "/latest.ckpt", params, extra,
                     detail::adam_blobs(params, adam));
  }
  return last;
}

// Restores parameters and optimizer state written by train(); returns the
// next epoch index to run.
inline int resume_from(const std::string& ckpt_path, ParamSet<float>& params,
                       AdamState<float>& adam) {
  Checkpoint ck = read_checkpoint(ckpt_path);
  params = std::move(ck.params);
  adam = AdamState<float>(params);
  adam.t = ck.extra.value("adam_t", 0L);
  detail::adam_from_blobs(params, ck.blobs, adam);
  return ck.extra.value("epoch", 0);
}

}  // namespace acmn
