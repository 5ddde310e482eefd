#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "ensemble/core/rng.hpp"
#include "ensemble/nn/autograd.hpp"
#include "ensemble/nn/layers.hpp"

using namespace ensemble;
using namespace ensemble::nn;

namespace {

Matrix rand_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double sd = 1.0) {
  auto rng = make_rng(seed);
  return randn(r, c, sd, rng);
}

// Central-difference check of d(sum(f(inputs) * probe))/d(inputs).
double max_grad_error(const std::function<Var(std::vector<Var>&)>& f, std::vector<Matrix> init,
                      double h = 1e-6) {
  std::vector<Var> vars;
  for (auto& m : init) vars.emplace_back(m, true);
  Var out = f(vars);
  const Matrix probe = rand_matrix(out.rows(), out.cols(), 99);
  auto loss_of = [&](std::vector<Var>& vs) {
    Var o = f(vs);
    double s = 0.0;
    for (std::size_t i = 0; i < o.value().size(); ++i) s += o.value().data()[i] * probe.data()[i];
    return s;
  };
  backward(sum(mul(out, constant(probe))));
  double worst = 0.0;
  for (std::size_t v = 0; v < vars.size(); ++v) {
    for (std::size_t i = 0; i < init[v].size(); ++i) {
      std::vector<Var> plus, minus;
      for (std::size_t w = 0; w < vars.size(); ++w) {
        Matrix a = init[w], b = init[w];
        if (w == v) {
          a.data()[i] += h;
          b.data()[i] -= h;
        }
        plus.emplace_back(a, false);
        minus.emplace_back(b, false);
      }
      const double fd = (loss_of(plus) - loss_of(minus)) / (2.0 * h);
      const double an = vars[v].has_grad() ? vars[v].grad().data()[i] : 0.0;
      worst = std::max(worst, std::abs(fd - an) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("elementwise and linear ops pass gradient checks") {
  CHECK(max_grad_error([](auto& v) { return matmul(v[0], v[1]); }, {rand_matrix(3, 4, 1), rand_matrix(4, 5, 2)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return matmul_nt(v[0], v[1]); }, {rand_matrix(3, 4, 1), rand_matrix(5, 4, 2)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return transpose(v[0]); }, {rand_matrix(3, 4, 1)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return add(v[0], v[1]); }, {rand_matrix(3, 4, 1), rand_matrix(3, 4, 2)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return sub(v[0], v[1]); }, {rand_matrix(3, 4, 1), rand_matrix(3, 4, 2)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return mul(v[0], v[1]); }, {rand_matrix(3, 4, 1), rand_matrix(3, 4, 2)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return add_row(v[0], v[1]); }, {rand_matrix(3, 4, 1), rand_matrix(1, 4, 2)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return mul_row(v[0], v[1]); }, {rand_matrix(3, 4, 1), rand_matrix(1, 4, 2)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return mul_col(v[0], v[1]); }, {rand_matrix(3, 4, 1), rand_matrix(3, 1, 2)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return scale(add_scalar(v[0], 0.3), -1.7); }, {rand_matrix(3, 4, 1)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return gelu(v[0]); }, {rand_matrix(3, 4, 1, 2.0)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return silu(v[0]); }, {rand_matrix(3, 4, 1, 2.0)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return nn::tanh(v[0]); }, {rand_matrix(3, 4, 1)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return sigmoid(v[0]); }, {rand_matrix(3, 4, 1)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return nn::exp(v[0]); }, {rand_matrix(3, 4, 1)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return square(v[0]); }, {rand_matrix(3, 4, 1)}) < 1e-7);
}

TEST_CASE("normalization, softmax and attention pass gradient checks") {
  CHECK(max_grad_error([](auto& v) { return layer_norm(v[0], v[1], v[2]); },
                       {rand_matrix(4, 6, 1), rand_matrix(1, 6, 2), rand_matrix(1, 6, 3)}) < 1e-6);
  CHECK(max_grad_error([](auto& v) { return softmax_rows(v[0]); }, {rand_matrix(4, 6, 1)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return attention(v[0], v[1], v[2], 2, 3, 4, 2); },
                       {rand_matrix(6, 8, 1), rand_matrix(8, 8, 2), rand_matrix(8, 8, 3)}) < 1e-6);
  const std::vector<std::size_t> lens{2, 4};
  CHECK(max_grad_error([&](auto& v) { return attention(v[0], v[1], v[2], 2, 1, 4, 4, lens); },
                       {rand_matrix(2, 8, 1), rand_matrix(8, 8, 2), rand_matrix(8, 8, 3)}) < 1e-6);
}

TEST_CASE("shape ops and convolution pass gradient checks") {
  CHECK(max_grad_error([](auto& v) { return concat_cols({v[0], v[1]}); }, {rand_matrix(3, 2, 1), rand_matrix(3, 4, 2)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return concat_rows({v[0], v[1]}); }, {rand_matrix(2, 3, 1), rand_matrix(4, 3, 2)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return slice_cols(v[0], 1, 3); }, {rand_matrix(3, 4, 1)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return slice_rows(v[0], 1, 3); }, {rand_matrix(4, 3, 1)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return repeat_rows(v[0], 3); }, {rand_matrix(2, 3, 1)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return mean_row_groups(v[0], 2); }, {rand_matrix(6, 3, 1)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return reshape(v[0], 2, 6); }, {rand_matrix(4, 3, 1)}) < 1e-7);
  const std::vector<std::size_t> idx{2, 0, 2, 1};
  CHECK(max_grad_error([&](auto& v) { return gather_rows(v[0], idx); }, {rand_matrix(3, 4, 1)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return conv1d(v[0], v[1], v[2], 2, 3, 1, 1); },
                       {rand_matrix(10, 3, 1), rand_matrix(9, 4, 2), rand_matrix(1, 4, 3)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return conv1d(v[0], v[1], v[2], 2, 4, 2, 1); },
                       {rand_matrix(16, 3, 1), rand_matrix(12, 2, 2), rand_matrix(1, 2, 3)}) < 1e-7);
}

TEST_CASE("losses pass gradient checks and match closed forms") {
  CHECK(max_grad_error([](auto& v) { return mse(v[0], v[1]); }, {rand_matrix(3, 4, 1), rand_matrix(3, 4, 2)}) < 1e-7);
  CHECK(max_grad_error([](auto& v) { return gaussian_kl(v[0], v[1]); }, {rand_matrix(3, 4, 1), rand_matrix(3, 4, 2)}) < 1e-7);
  Matrix t(3, 4);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = (i % 3 == 0) ? 1.0 : 0.0;
  CHECK(max_grad_error([&](auto& v) { return bce_with_logits(v[0], t); }, {rand_matrix(3, 4, 1)}) < 1e-7);
  const Matrix w = rand_matrix(3, 4, 5);
  const Matrix b = rand_matrix(3, 4, 6);
  CHECK(max_grad_error([&](auto& v) { return weighted_mse(v[0], b, w); }, {rand_matrix(3, 4, 1)}) < 1e-7);

  CHECK(gaussian_kl(constant(Matrix(1, 1, 1.0)), constant(Matrix(1, 1, 0.0))).item() == doctest::Approx(0.5));
  CHECK(gaussian_kl(constant(Matrix(2, 2, 0.0)), constant(Matrix(2, 2, 0.0))).item() == 0.0);
}

TEST_CASE("transformer block passes a gradient check") {
  ParamStore ps;
  auto rng = make_rng(3);
  TransformerBlock block(ps, "blk", 8, 2, 16, rng);
  const Matrix x0 = rand_matrix(6, 8, 4);
  CHECK(max_grad_error([&](auto& v) { return block(v[0], 2, 3); }, {x0}) < 1e-6);
  // Parameter gradients agree with finite differences too.
  Var x(x0, false);
  const Matrix probe = rand_matrix(6, 8, 99);
  ps.zero_grad();
  backward(sum(mul(block(x, 2, 3), constant(probe))));
  for (const auto& e : ps.entries()) {
    Var p = e.var;
    for (std::size_t i = 0; i < std::min<std::size_t>(p.value().size(), 5); ++i) {
      const double orig = p.value().data()[i];
      auto eval = [&] { NoGradGuard ng; Var o = block(x, 2, 3); double s = 0; for (std::size_t j = 0; j < o.value().size(); ++j) s += o.value().data()[j] * probe.data()[j]; return s; };
      p.mutable_value().data()[i] = orig + 1e-6;
      const double lp = eval();
      p.mutable_value().data()[i] = orig - 1e-6;
      const double lm = eval();
      p.mutable_value().data()[i] = orig;
      CHECK(p.grad().data()[i] == doctest::Approx((lp - lm) / 2e-6).epsilon(1e-5));
    }
  }
}

TEST_CASE("no-grad guard records no tape") {
  Var a(rand_matrix(2, 2, 1), true);
  {
    NoGradGuard ng;
    Var b = gelu(a);
    CHECK_FALSE(b.requires_grad());
  }
  CHECK(gelu(a).requires_grad());
}

TEST_CASE("adamw minimizes a quadratic and checkpoints round trip") {
  ParamStore ps;
  Var w = ps.add("w", Matrix(1, 3, 5.0));
  AdamW opt(ps, {.lr = 0.1, .weight_decay = 0.0, .clip_norm = 0.0});
  const Var target = constant(Matrix(1, 3, std::vector<double>{1.0, -2.0, 0.5}));
  for (int i = 0; i < 500; ++i) {
    ps.zero_grad();
    backward(mse(w, target));
    opt.step();
  }
  CHECK(max_abs_diff(w.value(), target.value()) < 1e-3);

  Checkpoint ck;
  ck.meta["kind"] = "test";
  export_params(ps, ck, "p.");
  for (auto& t : opt.export_state()) ck.tensors.push_back(t);
  const auto path = std::filesystem::temp_directory_path() / "ensemble_ckpt_test.bin";
  save_checkpoint(path, ck);
  Checkpoint back = load_checkpoint(path);
  CHECK(back.meta["kind"] == "test");
  ParamStore ps2;
  ps2.add("w", Matrix(1, 3));
  import_params(ps2, back, "p.");
  CHECK(ps2.get("w").value() == w.value());
  AdamW opt2(ps2, opt.config());
  opt2.import_state(back.tensors, opt.steps());
  CHECK(opt2.steps() == 500);
  std::filesystem::remove(path);
}
