#include <catch2/catch_amalgamated.hpp>

#include <functional>
#include <vector>

#include "acmn/rng.hpp"
#include "acmn/tensor.hpp"

using acmn::Rng;
using acmn::Shape;
using acmn::Tape;
using acmn::Var;

namespace {

// Central finite differences against the tape's reverse pass, in double.
// build() must be a pure function of the input values: it receives leaf
// variables in the order of `shapes` and returns a scalar loss.
struct FdCheck {
  std::vector<Shape> shapes;
  std::vector<std::vector<double>> values;
  std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)> build;

  static constexpr double kStep = 1e-5;
  static constexpr double kTol = 1e-4;

  double eval(bool with_grads, std::vector<std::vector<double>>* grads) {
    Tape<double> tape(with_grads);
    std::vector<Var<double>> leaves;
    leaves.reserve(values.size());
    if (with_grads) {
      for (std::size_t i = 0; i < values.size(); ++i)
        leaves.push_back(tape.leaf(shapes[i], values[i].data(), (*grads)[i].data()));
    } else {
      for (std::size_t i = 0; i < values.size(); ++i)
        leaves.push_back(tape.leaf(shapes[i], values[i].data(), nullptr));
    }
    Var<double> loss = build(tape, leaves);
    if (with_grads) tape.backward(loss);
    return loss.scalar();
  }

  void run() {
    std::vector<std::vector<double>> grads;
    for (auto& v : values) grads.emplace_back(v.size(), 0.0);
    eval(true, &grads);
    for (std::size_t t = 0; t < values.size(); ++t) {
      for (std::size_t i = 0; i < values[t].size(); ++i) {
        double keep = values[t][i];
        values[t][i] = keep + kStep;
        double up = eval(false, nullptr);
        values[t][i] = keep - kStep;
        double down = eval(false, nullptr);
        values[t][i] = keep;
        double fd = (up - down) / (2 * kStep);
        double an = grads[t][i];
        double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
        INFO("tensor " << t << " element " << i << " analytic " << an << " fd " << fd);
        REQUIRE(rel < kTol);
      }
    }
  }
};

std::vector<double> random_vec(Rng& rng, std::size_t n, double lo = -1.0,
                               double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Inputs for relu stay clear of the kink so the finite difference is valid.
std::vector<double> random_vec_off_zero(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) {
    double m = rng.uniform(0.05, 1.0);
    x = rng.uniform() < 0.5 ? -m : m;
  }
  return v;
}

// Projects a tensor output to a scalar with fixed random weights.
std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>
project(Rng& rng, std::size_t out_n,
        std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)> op) {
  auto weights = random_vec(rng, out_n);
  return [op = std::move(op), weights](Tape<double>& tape,
                                       const std::vector<Var<double>>& in) {
    Var<double> y = op(tape, in);
    Var<double> w = tape.constant(Shape{int(y.size())}, weights);
    return sum(mul(reshape(y, {int(y.size())}), w));
  };
}

constexpr int kRounds = 20;

}  // namespace

TEST_CASE("gradcheck: elementwise ops") {
  Rng rng = Rng::stream(11, "fd-elementwise");
  for (int it = 0; it < kRounds; ++it) {
    int n = rng.uniform_int(1, 8);
    SECTION("round " + std::to_string(it)) {}
    FdCheck add_check{
        {{n}, {n}},
        {random_vec(rng, n), random_vec(rng, n)},
        project(rng, n, [](Tape<double>&, const std::vector<Var<double>>& in) {
          return add(in[0], in[1]);
        })};
    add_check.run();

    FdCheck scalar_mix{
        {{n}, {1}},
        {random_vec(rng, n), random_vec(rng, 1)},
        project(rng, n, [](Tape<double>&, const std::vector<Var<double>>& in) {
          return mul(sub(in[0], in[1]), in[1]);
        })};
    scalar_mix.run();

    FdCheck mul_check{
        {{n}, {n}},
        {random_vec(rng, n), random_vec(rng, n)},
        project(rng, n, [](Tape<double>&, const std::vector<Var<double>>& in) {
          return mul(in[0], in[1]);
        })};
    mul_check.run();

    FdCheck unary{
        {{n}},
        {random_vec_off_zero(rng, n)},
        project(rng, n, [](Tape<double>&, const std::vector<Var<double>>& in) {
          return relu(scale_add(acmn::tanh(sigmoid(in[0])), 2.0, -1.0));
        })};
    unary.run();
  }
}

TEST_CASE("gradcheck: softmax and reductions") {
  Rng rng = Rng::stream(11, "fd-softmax");
  for (int it = 0; it < kRounds; ++it) {
    int n = rng.uniform_int(2, 10);
    FdCheck sm{{{n}},
               {random_vec(rng, n, -3.0, 3.0)},
               project(rng, n, [](Tape<double>&, const std::vector<Var<double>>& in) {
                 return softmax(in[0]);
               })};
    sm.run();

    FdCheck red{{{n}},
                {random_vec(rng, n)},
                [](Tape<double>&, const std::vector<Var<double>>& in) {
                  return add(sum(in[0]), mean(mul(in[0], in[0])));
                }};
    red.run();
  }
}

TEST_CASE("gradcheck: matmul and affine") {
  Rng rng = Rng::stream(11, "fd-linear");
  for (int it = 0; it < kRounds; ++it) {
    int m = rng.uniform_int(1, 5);
    int k = rng.uniform_int(1, 5);
    int n = rng.uniform_int(1, 5);

    FdCheck mm{{{m, k}, {k, n}},
               {random_vec(rng, std::size_t(m) * k), random_vec(rng, std::size_t(k) * n)},
               project(rng, std::size_t(m) * n,
                       [](Tape<double>&, const std::vector<Var<double>>& in) {
                         return matmul(in[0], in[1]);
                       })};
    mm.run();

    FdCheck mv{{{m, k}, {k}},
               {random_vec(rng, std::size_t(m) * k), random_vec(rng, k)},
               project(rng, m, [](Tape<double>&, const std::vector<Var<double>>& in) {
                 return matmul(in[0], in[1]);
               })};
    mv.run();

    FdCheck aff_vec{{{k}, {m, k}, {m}},
                    {random_vec(rng, k), random_vec(rng, std::size_t(m) * k),
                     random_vec(rng, m)},
                    project(rng, m, [](Tape<double>&, const std::vector<Var<double>>& in) {
                      return affine(in[0], in[1], in[2]);
                    })};
    aff_vec.run();

    FdCheck aff_batch{{{k, n}, {m, k}, {m}},
                      {random_vec(rng, std::size_t(k) * n),
                       random_vec(rng, std::size_t(m) * k), random_vec(rng, m)},
                      project(rng, std::size_t(m) * n,
                              [](Tape<double>&, const std::vector<Var<double>>& in) {
                                return affine(in[0], in[1], in[2]);
                              })};
    aff_batch.run();
  }
}

TEST_CASE("gradcheck: conv2d and channel bias") {
  Rng rng = Rng::stream(11, "fd-conv");
  for (int it = 0; it < kRounds; ++it) {
    int ci = rng.uniform_int(1, 3);
    int co = rng.uniform_int(1, 3);
    int h = rng.uniform_int(3, 6);
    int w = rng.uniform_int(3, 6);
    int stride = rng.uniform_int(1, 2);
    int pad = rng.uniform_int(0, 1);
    int oh = acmn::kernels::conv_out_dim(h, 3, stride, pad);
    int ow = acmn::kernels::conv_out_dim(w, 3, stride, pad);
    if (oh < 1 || ow < 1) continue;

    FdCheck cv{{{ci, h, w}, {co, ci, 3, 3}, {co}},
               {random_vec(rng, std::size_t(ci) * h * w),
                random_vec(rng, std::size_t(co) * ci * 9), random_vec(rng, co)},
               project(rng, std::size_t(co) * oh * ow,
                       [stride, pad](Tape<double>&, const std::vector<Var<double>>& in) {
                         return channel_bias(conv2d(in[0], in[1], stride, pad), in[2]);
                       })};
    cv.run();
  }
}

TEST_CASE("gradcheck: structure ops") {
  Rng rng = Rng::stream(11, "fd-structure");
  for (int it = 0; it < kRounds; ++it) {
    int n = rng.uniform_int(4, 10);
    int off = rng.uniform_int(0, n - 2);
    int len = rng.uniform_int(1, n - off - 1);

    FdCheck sl{{{n}},
               {random_vec(rng, n)},
               project(rng, len, [off, len](Tape<double>&, const std::vector<Var<double>>& in) {
                 return slice(in[0], off, len);
               })};
    sl.run();

    FdCheck cats{{{n}, {3}},
                 {random_vec(rng, n), random_vec(rng, 3)},
                 project(rng, n + 3, [](Tape<double>&, const std::vector<Var<double>>& in) {
                   return acmn::concat<double>({in[0], in[1]});
                 })};
    cats.run();

    int rows = rng.uniform_int(2, 4);
    int width = rng.uniform_int(1, 4);
    int idx = rng.uniform_int(0, rows - 1);
    FdCheck rowck{{{rows, width}},
                  {random_vec(rng, std::size_t(rows) * width)},
                  project(rng, width, [idx](Tape<double>&, const std::vector<Var<double>>& in) {
                    return row(in[0], idx);
                  })};
    rowck.run();

    FdCheck rs{{{6}},
               {random_vec(rng, 6)},
               project(rng, 4, [](Tape<double>&, const std::vector<Var<double>>& in) {
                 return matmul(reshape(in[0], {2, 3}), reshape(in[0], {3, 2}));
               })};
    rs.run();
  }
}

TEST_CASE("gradcheck: spatial ops") {
  Rng rng = Rng::stream(11, "fd-spatial");
  for (int it = 0; it < kRounds; ++it) {
    int c = rng.uniform_int(1, 4);
    int gh = rng.uniform_int(2, 3);
    int gw = rng.uniform_int(2, 3);
    int p = gh * gw;

    FdCheck ws{{{p}, {c, gh, gw}},
               {random_vec(rng, p, 0.0, 1.0), random_vec(rng, std::size_t(c) * p)},
               project(rng, c, [](Tape<double>&, const std::vector<Var<double>>& in) {
                 return weighted_spatial_sum(in[0], in[1]);
               })};
    ws.run();

    FdCheck mr{{{c, gh, gw}, {p}},
               {random_vec(rng, std::size_t(c) * p), random_vec(rng, p)},
               project(rng, std::size_t(c) * p,
                       [](Tape<double>&, const std::vector<Var<double>>& in) {
                         return mul_rows(in[0], in[1]);
                       })};
    mr.run();

    FdCheck acls{{{c, p}, {c}},
                 {random_vec(rng, std::size_t(c) * p), random_vec(rng, c)},
                 project(rng, std::size_t(c) * p,
                         [](Tape<double>&, const std::vector<Var<double>>& in) {
                           return add_cols(in[0], in[1]);
                         })};
    acls.run();

    FdCheck cc{{{c, gh, gw}, {2, gh, gw}},
               {random_vec(rng, std::size_t(c) * p), random_vec(rng, 2 * std::size_t(p))},
               project(rng, std::size_t(c + 2) * p,
                       [](Tape<double>&, const std::vector<Var<double>>& in) {
                         return concat_channels(in[0], in[1]);
                       })};
    cc.run();
  }
}

TEST_CASE("gradcheck: composed expression with reuse") {
  Rng rng = Rng::stream(11, "fd-composed");
  for (int it = 0; it < kRounds; ++it) {
    int k = rng.uniform_int(2, 4);
    int m = rng.uniform_int(2, 4);
    FdCheck comp{
        {{m, k}, {k}, {m}},
        {random_vec(rng, std::size_t(m) * k), random_vec(rng, k), random_vec(rng, m)},
        [](Tape<double>&, const std::vector<Var<double>>& in) {
          Var<double> h1 = acmn::tanh(affine(in[1], in[0], in[2]));
          Var<double> h2 = sigmoid(affine(in[1], in[0], in[2]));
          return sum(mul(h1, h2));
        }};
    comp.run();
  }
}
