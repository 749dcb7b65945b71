#include <doctest.h>

#include <cmath>
#include <numbers>

#include "patchlm/autodiff.hpp"
#include "patchlm/errors.hpp"
#include "patchlm/grad_check.hpp"

using namespace patchlm;

namespace {

Tensor rnd(Shape s, std::uint64_t seed, double std = 1.0) {
  std::mt19937_64 rng(seed);
  return Tensor::normal(std::move(s), std, rng);
}

// Scalar <x, w> for a fixed random w, so every output element contributes.
Var probe(Var x, std::uint64_t seed = 99) {
  Graph& g = *x.graph;
  const std::size_t n = x.value().size();
  Var flat = g.make_node(x.value().reshaped({1, n}), std::array{x}, [id = x.id](Graph& gr, std::size_t self) {
    gr.accumulate(id, gr.grad_ref(self).reshaped(gr.value_of(id).shape()));
  });
  return ops::sum(ops::matmul_nt(flat, g.constant(rnd({1, n}, seed))));
}

void check_grad(const ScalarFn& f, const std::vector<Tensor>& params, double tol = 1e-7) {
  const GradCheckReport r = grad_check(f, params);
  INFO("worst tensor " << r.worst_tensor << " rel err " << r.max_relative_error);
  CHECK(r.max_relative_error < tol);
}

// Direct evaluation of softmax(q kᵀ/√d + mask) v.
Tensor naive_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask) {
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols();
  Tensor out({n, v.cols()});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(m, -INFINITY);
    double mx = -INFINITY;
    for (std::size_t j = 0; j < m; ++j) {
      if (!mask.allows(i, j)) continue;
      double dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += q.at(i, c) * k.at(j, c);
      s[j] = dot / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, s[j]);
    }
    double z = 0;
    for (std::size_t j = 0; j < m; ++j) z += std::isinf(s[j]) ? 0.0 : std::exp(s[j] - mx);
    for (std::size_t j = 0; j < m; ++j) {
      if (std::isinf(s[j])) continue;
      const double p = std::exp(s[j] - mx) / z;
      for (std::size_t c = 0; c < v.cols(); ++c) out.at(i, c) += p * v.at(j, c);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("tape records values and backward visits each node once") {
  Graph g;
  Var a = g.parameter(Tensor::matrix({{1, 2}, {3, 4}}));
  Var b = g.parameter(Tensor::matrix({{5}, {6}}));
  Var c = ops::matmul(a, b);
  CHECK(c.value() == Tensor::matrix({{17}, {39}}));
  int calls = 0;
  Var counted = g.make_node(c.value(), std::array{c}, [&calls, id = c.id](Graph& gr, std::size_t self) {
    ++calls;
    gr.accumulate(id, gr.grad_ref(self));
  });
  Var loss = ops::sum(counted);
  g.backward(loss);
  CHECK(calls == 1);
  CHECK(g.grad(a) == Tensor::matrix({{5, 6}, {5, 6}}));
  CHECK(g.grad(b) == Tensor::matrix({{4}, {6}}));
}

TEST_CASE("shared subexpressions accumulate gradients") {
  Graph g;
  Var x = g.parameter(Tensor::matrix({{2, -1}}));
  Var y = ops::add(x, x);
  Var z = ops::sum(ops::add(y, ops::scale(x, 3.0)));
  g.backward(z);
  CHECK(g.grad(x) == Tensor::matrix({{5, 5}}));
}

TEST_CASE("constants receive no gradient and backward needs a scalar root") {
  Graph g;
  Var c = g.constant(Tensor::ones({2, 2}));
  Var p = g.parameter(Tensor::ones({2, 2}));
  Var s = ops::sum(ops::matmul(c, p));
  CHECK_FALSE(g.requires_grad(c));
  CHECK(g.requires_grad(s));
  g.backward(s);
  CHECK(g.grad(c) == Tensor::zeros({2, 2}));
  CHECK_THROWS_AS(g.backward(p), ContractError);
}

TEST_CASE("op values against closed forms") {
  Graph g;
  Var x = g.constant(Tensor::matrix({{1, 2, 3}}));
  Var ln = ops::layer_norm(x, g.constant(Tensor::ones({3})), g.constant(Tensor::zeros({3})));
  const double sd = std::sqrt(2.0 / 3.0 + 1e-5);
  CHECK(ln.value().at(0, 0) == doctest::Approx(-1.0 / sd).epsilon(1e-12));
  CHECK(ln.value().at(0, 1) == doctest::Approx(0.0));

  Var r = ops::relu_squared(g.constant(Tensor::matrix({{-2, 0, 3}})));
  CHECK(r.value() == Tensor::matrix({{0, 0, 9}}));

  const std::size_t targets[] = {0};
  const double weights[] = {1.0};
  Var ce = ops::cross_entropy(g.constant(Tensor::matrix({{0, 0}})), targets, weights);
  CHECK(ce.value().item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));

  Var gathered = ops::gather_rows(g.constant(Tensor::matrix({{1, 1}, {2, 2}, {3, 3}})), std::vector<std::size_t>{2, 0, 2});
  CHECK(gathered.value() == Tensor::matrix({{3, 3}, {1, 1}, {3, 3}}));
  CHECK(ops::slice_cols(g.constant(Tensor::matrix({{1, 2, 3, 4}})), 1, 2).value() == Tensor::matrix({{2, 3}}));
}

TEST_CASE("elementwise and linear ops pass finite-difference checks") {
  check_grad([](Graph&, std::span<const Var> v) { return probe(ops::add(v[0], v[1])); }, {rnd({3, 4}, 1), rnd({3, 4}, 2)});
  check_grad([](Graph&, std::span<const Var> v) { return probe(ops::add_bias(v[0], v[1])); }, {rnd({3, 4}, 1), rnd({4}, 2)});
  check_grad([](Graph&, std::span<const Var> v) { return probe(ops::scale(v[0], -1.7)); }, {rnd({2, 5}, 3)});
  check_grad([](Graph&, std::span<const Var> v) { return probe(ops::matmul(v[0], v[1])); }, {rnd({3, 4}, 1), rnd({4, 2}, 2)});
  check_grad([](Graph&, std::span<const Var> v) { return probe(ops::matmul_nt(v[0], v[1])); },
             {rnd({3, 4}, 1), rnd({5, 4}, 2)});
  check_grad([](Graph&, std::span<const Var> v) { return probe(ops::relu_squared(v[0])); }, {rnd({4, 4}, 5)});
}

TEST_CASE("normalization and softmax ops pass finite-difference checks") {
  check_grad([](Graph&, std::span<const Var> v) { return probe(ops::softmax_rows(v[0])); }, {rnd({3, 5}, 1)});
  check_grad(
      [](Graph&, std::span<const Var> v) {
        return probe(ops::masked_softmax_rows(v[0], AttentionMask{true, 4}));
      },
      {rnd({5, 5}, 2)});
  check_grad([](Graph&, std::span<const Var> v) { return probe(ops::layer_norm(v[0], v[1], v[2])); },
             {rnd({3, 6}, 1), rnd({6}, 2), rnd({6}, 3)});
}

TEST_CASE("indexing ops pass finite-difference checks") {
  const std::vector<std::size_t> rows{1, 1, 0, 3};
  check_grad([&](Graph&, std::span<const Var> v) { return probe(ops::gather_rows(v[0], rows)); }, {rnd({4, 3}, 1)});
  check_grad(
      [](Graph&, std::span<const Var> v) {
        const Var parts[] = {v[0], v[1]};
        return probe(ops::concat_rows(parts));
      },
      {rnd({2, 3}, 1), rnd({4, 3}, 2)});
  check_grad(
      [](Graph&, std::span<const Var> v) {
        const Var parts[] = {v[0], v[1]};
        return probe(ops::concat_cols(parts));
      },
      {rnd({3, 2}, 1), rnd({3, 4}, 2)});
  check_grad([](Graph&, std::span<const Var> v) { return probe(ops::slice_cols(v[0], 2, 3)); }, {rnd({3, 6}, 4)});
  const std::vector<std::size_t> pos{0, 3, 7};
  check_grad([&](Graph&, std::span<const Var> v) { return probe(ops::rope(v[0], pos)); }, {rnd({3, 6}, 5)});
}

TEST_CASE("cross entropy gradient matches finite differences") {
  const std::vector<std::size_t> targets{2, 0, 4};
  const std::vector<double> weights{1.0, 0.0, 0.5};
  check_grad([&](Graph&, std::span<const Var> v) { return ops::cross_entropy(v[0], targets, weights); },
             {rnd({3, 5}, 8, 3.0)});
}

TEST_CASE("both attention kernels match the naive formula and finite differences") {
  const Tensor q = rnd({7, 4}, 1), k = rnd({7, 4}, 2), v = rnd({7, 3}, 3);
  for (AttentionMask mask : {AttentionMask{true, 0}, AttentionMask{false, 0}, AttentionMask{true, 5}}) {
    const Tensor expected = naive_attention(q, k, v, mask);
    for (AttentionKernel kernel : {AttentionKernel::kReference, AttentionKernel::kBlocked}) {
      for (std::size_t block : {1, 3, 32}) {
        Graph g;
        Var out = ops::attention(g.constant(q), g.constant(k), g.constant(v), mask, kernel, block);
        CHECK(max_abs_diff(out.value(), expected) < 1e-12);
      }
      check_grad([&](Graph&, std::span<const Var> x) { return probe(ops::attention(x[0], x[1], x[2], mask, kernel, 3)); },
                 {q, k, v});
    }
  }
}

TEST_CASE("blocked attention gradients equal reference gradients") {
  const Tensor q = rnd({37, 8}, 4), k = rnd({37, 8}, 5), v = rnd({37, 8}, 6);
  std::vector<Tensor> grads[2];
  int idx = 0;
  for (AttentionKernel kernel : {AttentionKernel::kReference, AttentionKernel::kBlocked}) {
    Graph g;
    Var vq = g.parameter(q), vk = g.parameter(k), vv = g.parameter(v);
    g.backward(probe(ops::attention(vq, vk, vv, AttentionMask{}, kernel, 8)));
    grads[idx++] = {g.grad(vq), g.grad(vk), g.grad(vv)};
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(max_abs_diff(grads[0][i], grads[1][i]) < 1e-12);
}

TEST_CASE("rotary embedding: relative position identity and norm preservation") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> pos(0, 3000);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor q = rnd({1, 16}, 100 + trial), k = rnd({1, 16}, 200 + trial);
    const std::size_t m = pos(rng), n = pos(rng), shift = pos(rng);
    auto dot_at = [&](std::size_t a, std::size_t b) {
      const std::size_t pa[] = {a}, pb[] = {b};
      return kernels::matmul_nt(rope_apply(q, pa), rope_apply(k, pb)).item();
    };
    CHECK(std::abs(dot_at(m, n) - dot_at(m + shift, n + shift)) < 1e-9);
    const std::size_t pm[] = {m};
    const Tensor rq = rope_apply(q, pm);
    CHECK(std::abs(kernels::matmul_nt(rq, rq).item() - kernels::matmul_nt(q, q).item()) < 1e-9);
  }
  // Position 0 is the identity; the first pair at position 1 rotates by one radian.
  const Tensor x = Tensor::matrix({{1, 0, 1, 0}});
  const std::size_t p0[] = {0}, p1[] = {1};
  CHECK(rope_apply(x, p0) == x);
  const Tensor r1 = rope_apply(x, p1);
  CHECK(r1.at(0, 0) == doctest::Approx(std::cos(1.0)).epsilon(1e-14));
  CHECK(r1.at(0, 1) == doctest::Approx(std::sin(1.0)).epsilon(1e-14));
  CHECK(r1.at(0, 2) == doctest::Approx(std::cos(0.01)).epsilon(1e-14));
  CHECK_THROWS_AS(rope_apply(Tensor::zeros({1, 3}), p0), ConfigError);
}

TEST_CASE("grad_check reports non-scalar functions and buggy gradients") {
  CHECK_THROWS_AS(grad_check([](Graph&, std::span<const Var> v) { return v[0]; }, {rnd({2, 2}, 1)}), ContractError);

  // Backward that reports twice the true derivative of sum(x).
  const ScalarFn wrong = [](Graph& g, std::span<const Var> v) {
    Var s = g.make_node(Tensor::scalar(v[0].value().data()[0] + v[0].value().data()[1]), std::array{v[0]},
                        [id = v[0].id](Graph& gr, std::size_t self) {
                          gr.accumulate(id, Tensor(gr.value_of(id).shape(), 2.0 * gr.grad_ref(self).item()));
                        });
    return s;
  };
  const GradCheckReport r = grad_check(wrong, {rnd({2}, 1)});
  CHECK_FALSE(r.passed);
  CHECK(r.max_relative_error == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
}

TEST_CASE("relative error conventions") {
  const std::vector<double> zero{0.0, 0.0};
  const std::vector<double> a{3.0, 4.0}, b{3.0, 4.0}, c{0.0, 0.0};
  CHECK(relative_error(zero, zero) == 0.0);
  CHECK(relative_error(a, b) == 0.0);
  CHECK(relative_error(a, c) == doctest::Approx(1.0));
}
