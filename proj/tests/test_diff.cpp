// SPDX-License-Identifier: Apache-2.0
#include <functional>

#include "doctest.h"

#include "cycleadapt/diff/graph.hpp"
#include "cycleadapt/error.hpp"
#include "test_util.hpp"

using namespace cycleadapt;
using diff::Bindings;
using diff::Graph;
using diff::NodeId;
using diff::Tensor;
using testutil::random_tensor;

TEST_SUITE("diffcore") {
  TEST_CASE("add of a leaf with itself doubles it") {
    Graph g;
    const NodeId x = g.leaf("x");
    const NodeId y = g.add(x, x);
    const auto v = diff::evaluate(g, {{"x", Tensor({1}, {3.0})}});
    CHECK(v[y].item() == 6.0);
  }

  TEST_CASE("layer norm of a constant row collapses to the bias") {
    Graph g;
    const NodeId x = g.leaf("x", false);
    const NodeId y = g.layer_norm(x, g.leaf("gain"), g.leaf("bias"));
    const auto v = diff::evaluate(g, {{"x", Tensor({4}, 5.0)}, {"gain", Tensor({4}, 1.0)}, {"bias", Tensor({4}, 0.0)}});
    for (double e : v[y].data) CHECK(e == 0.0);
  }

  TEST_CASE("matmul by hand") {
    Graph g;
    const NodeId y = g.matmul(g.leaf("a"), g.leaf("b"));
    const auto v = diff::evaluate(g, {{"a", Tensor::from_rows({{1, 2}, {3, 4}})}, {"b", Tensor::from_rows({{5}, {6}})}});
    CHECK(v[y].shape == diff::Shape{2, 1});
    CHECK(v[y].data == std::vector<double>{17, 39});
  }

  TEST_CASE("mean-abs gradient is the residual sign") {
    Graph g;
    const NodeId x = g.leaf("x");
    const NodeId loss = g.mean_abs(g.sub(x, g.constant(Tensor({1}, {0.0}))));
    const auto grads = diff::backward(g, Bindings{{"x", Tensor({1}, {2.0})}}, loss);
    CHECK(grads.at("x").item() == 1.0);
  }

  TEST_CASE("mean-abs subgradient at zero is zero") {
    Graph g;
    const NodeId x = g.leaf("x");
    const NodeId loss = g.mean_abs(g.sub(x, g.constant(Tensor({2}, {1.0, -1.0}))));
    const auto grads = diff::backward(g, Bindings{{"x", Tensor({2}, {1.0, -1.0})}}, loss);
    CHECK(grads.at("x").data == std::vector<double>{0.0, 0.0});
  }

  TEST_CASE("gradient of sum of squares") {
    Graph g;
    const NodeId x = g.leaf("x");
    const NodeId loss = g.sum(g.mul(x, x));
    const auto grads = diff::backward(g, Bindings{{"x", Tensor({1}, {3.0})}}, loss);
    CHECK(grads.at("x").item() == 6.0);
  }

  TEST_CASE("fan-out accumulates gradients") {
    Graph g;
    const NodeId x = g.leaf("x");
    const NodeId loss = g.sum(g.add(g.scale(x, 2.0), g.scale(x, 3.0)));
    const auto grads = diff::backward(g, Bindings{{"x", Tensor({3}, 1.0)}}, loss);
    for (double e : grads.at("x").data) CHECK(e == 5.0);
  }

  TEST_CASE("three-layer perceptron matches central differences") {
    std::mt19937_64 rng(0);
    Graph g;
    NodeId h = g.leaf("x", false);
    Bindings b{{"x", random_tensor({4, 5}, rng)}};
    const std::size_t dims[] = {5, 6, 6, 3};
    for (int l = 0; l < 3; ++l) {
      const std::string w = "w" + std::to_string(l), c = "b" + std::to_string(l);
      h = g.add(g.matmul(h, g.leaf(w)), g.leaf(c));
      if (l < 2) h = g.relu(h);
      b[w] = random_tensor({dims[l], dims[l + 1]}, rng, 0.5);
      b[c] = random_tensor({dims[l + 1]}, rng, 0.1);
    }
    const NodeId loss = g.sum(h);
    const auto grads = diff::backward(g, b, loss);
    for (int l = 0; l < 3; ++l)
      for (const std::string& name : {"w" + std::to_string(l), "b" + std::to_string(l)})
        CHECK(testutil::relative_error(grads.at(name), testutil::numeric_grad(g, b, loss, name)) < 1e-4);
  }

  TEST_CASE("grad_check on a linear layer and a layer-norm block") {
    {
      std::mt19937_64 rng(0);
      Graph g;
      const NodeId y = g.add(g.matmul(g.leaf("x", false), g.leaf("w")), g.leaf("b"));
      const NodeId loss = g.sum(g.mul(y, g.constant(random_tensor({3, 4}, rng))));
      Bindings b{{"x", random_tensor({3, 5}, rng)}, {"w", random_tensor({5, 4}, rng)}, {"b", random_tensor({4}, rng)}};
      CHECK(diff::grad_check(g, b, loss, 1e-6) < 1e-4);
    }
    {
      std::mt19937_64 rng(1);
      Graph g;
      const NodeId y = g.layer_norm(g.leaf("x"), g.leaf("gain"), g.leaf("bias"));
      const NodeId loss = g.sum(g.mul(y, g.constant(random_tensor({3, 6}, rng))));
      Bindings b{{"x", random_tensor({3, 6}, rng)}, {"gain", random_tensor({6}, rng)}, {"bias", random_tensor({6}, rng)}};
      CHECK(diff::grad_check(g, b, loss, 1e-6) < 1e-4);
    }
  }

  TEST_CASE("grad_check skips L1 kinks") {
    Graph g;
    const NodeId x = g.leaf("x");
    const NodeId loss = g.mean_abs(g.sub(x, g.constant(Tensor({3}, {1.0, 2.0, 3.0}))));
    CHECK(diff::grad_check(g, {{"x", Tensor({3}, {1.0, 2.0, 3.0})}}, loss, 1e-6) == 0.0);
  }

  TEST_CASE("every primitive passes grad_check on 100 random instances") {
    using Builder = std::function<NodeId(Graph&, Bindings&, std::mt19937_64&)>;
    auto leaf = [](Graph& g, Bindings& b, std::mt19937_64& rng, const std::string& name, diff::Shape s) {
      b[name] = random_tensor(std::move(s), rng);
      return g.leaf(name);
    };
    const std::vector<std::pair<std::string, Builder>> prims = {
        {"matmul", [&](Graph& g, Bindings& b, auto& r) { return g.matmul(leaf(g, b, r, "a", {2, 3, 4}), leaf(g, b, r, "b", {4, 2})); }},
        {"bmm", [&](Graph& g, Bindings& b, auto& r) { return g.bmm(leaf(g, b, r, "a", {2, 3, 4}), leaf(g, b, r, "b", {2, 4, 2})); }},
        {"add", [&](Graph& g, Bindings& b, auto& r) { return g.add(leaf(g, b, r, "a", {3, 4}), leaf(g, b, r, "b", {4})); }},
        {"sub", [&](Graph& g, Bindings& b, auto& r) { return g.sub(leaf(g, b, r, "a", {3, 4}), leaf(g, b, r, "b", {3, 4})); }},
        {"mul", [&](Graph& g, Bindings& b, auto& r) { return g.mul(leaf(g, b, r, "a", {3, 4}), leaf(g, b, r, "b", {4})); }},
        {"scale", [&](Graph& g, Bindings& b, auto& r) { return g.scale(leaf(g, b, r, "a", {3, 4}), -1.7); }},
        {"transpose", [&](Graph& g, Bindings& b, auto& r) { return g.transpose(leaf(g, b, r, "a", {2, 3, 4})); }},
        {"reshape", [&](Graph& g, Bindings& b, auto& r) { return g.reshape(leaf(g, b, r, "a", {3, 4}), {2, 6}); }},
        {"concat", [&](Graph& g, Bindings& b, auto& r) { return g.concat({leaf(g, b, r, "a", {3, 2}), leaf(g, b, r, "b", {3, 4})}, 1); }},
        {"slice", [&](Graph& g, Bindings& b, auto& r) { return g.slice(leaf(g, b, r, "a", {3, 5}), 1, 1, 3); }},
        {"relu", [&](Graph& g, Bindings& b, auto& r) { return g.relu(leaf(g, b, r, "a", {3, 4})); }},
        {"layer_norm", [&](Graph& g, Bindings& b, auto& r) { return g.layer_norm(leaf(g, b, r, "a", {3, 5}), leaf(g, b, r, "gain", {5}), leaf(g, b, r, "bias", {5})); }},
        {"mean_abs", [&](Graph& g, Bindings& b, auto& r) { return g.mean_abs(leaf(g, b, r, "a", {3, 4})); }},
        {"mask_select", [&](Graph& g, Bindings& b, auto& r) { return g.mask_select(leaf(g, b, r, "a", {2, 4, 3}), 1, {1, 0, 1, 1}); }},
        {"sum", [&](Graph& g, Bindings& b, auto& r) { return g.sum(leaf(g, b, r, "a", {3, 4})); }},
        {"rot6d", [&](Graph& g, Bindings& b, auto& r) { return g.rot6d(leaf(g, b, r, "a", {3, 6})); }},
    };
    for (const auto& [name, build] : prims) {
      double worst = 0.0;
      for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(seed);
        Graph g;
        Bindings b;
        const NodeId out = build(g, b, rng);
        const auto shape = diff::evaluate(g, b)[out].shape;
        // random projection to a scalar so every output entry matters
        const NodeId loss = g.sum(g.mul(out, g.constant(random_tensor(shape, rng))));
        worst = std::max(worst, diff::grad_check(g, b, loss, 1e-6));
      }
      INFO(name);
      CHECK(worst < 1e-4);
    }
  }

  TEST_CASE("evaluate is bit-deterministic") {
    std::mt19937_64 rng(5);
    Graph g;
    const NodeId y = g.layer_norm(g.matmul(g.leaf("x"), g.leaf("w")), g.leaf("gain"), g.leaf("bias"));
    Bindings b{{"x", random_tensor({7, 9}, rng)}, {"w", random_tensor({9, 9}, rng)},
               {"gain", random_tensor({9}, rng)}, {"bias", random_tensor({9}, rng)}};
    CHECK(diff::evaluate(g, b)[y] == diff::evaluate(g, b)[y]);
  }

  TEST_CASE("leaves that do not reach the loss get exact zeros") {
    Graph g;
    const NodeId x = g.leaf("x");
    g.scale(g.leaf("unused"), 3.0);
    const NodeId loss = g.sum(x);
    const auto grads = diff::backward(g, Bindings{{"x", Tensor({2}, 1.0)}, {"unused", Tensor({2, 2}, 4.0)}}, loss);
    REQUIRE(grads.count("unused") == 1);
    CHECK(grads.at("unused") == Tensor({2, 2}, 0.0));
  }

  TEST_CASE("double transpose is the identity on values and gradients") {
    std::mt19937_64 rng(3);
    const Tensor x = random_tensor({2, 3, 4}, rng);
    const Tensor w = random_tensor({2, 3, 4}, rng);
    Graph g1, g2;
    const NodeId tt = g1.transpose(g1.transpose(g1.leaf("x")));
    const NodeId l1 = g1.sum(g1.mul(tt, g1.constant(w)));
    const NodeId x2 = g2.leaf("x");
    const NodeId l2 = g2.sum(g2.mul(x2, g2.constant(w)));
    const Bindings b{{"x", x}};
    CHECK(diff::evaluate(g1, b)[tt] == x);
    CHECK(diff::evaluate(g1, b)[l1] == diff::evaluate(g2, b)[l2]);
    CHECK(diff::backward(g1, b, l1).at("x") == diff::backward(g2, b, l2).at("x"));
  }

  TEST_CASE("errors") {
    SUBCASE("shape mismatch names the node") {
      Graph g;
      const NodeId y = g.matmul(g.leaf("a"), g.leaf("b"));
      try {
        diff::evaluate(g, {{"a", Tensor({2, 3})}, {"b", Tensor({2, 2})}});
        FAIL("expected a shape error");
      } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("node " + std::to_string(y)) != std::string::npos);
      }
    }
    SUBCASE("unbound leaf") {
      Graph g;
      g.sum(g.leaf("missing"));
      CHECK_THROWS_AS(diff::evaluate(g, {}), UnboundLeafError);
    }
    SUBCASE("non-scalar loss") {
      Graph g;
      const NodeId x = g.leaf("x");
      CHECK_THROWS_AS(diff::backward(g, Bindings{{"x", Tensor({2}, 1.0)}}, x), ShapeError);
    }
  }

  TEST_CASE("tensor invariants") {
    CHECK_THROWS(Tensor({2, 3}, std::vector<double>{1, 2, 3}));
    CHECK(Tensor({2, 3}).numel() == 6);
    std::mt19937_64 rng(2);
    Graph g;
    const NodeId y = g.layer_norm(g.leaf("x"), g.leaf("gain"), g.leaf("bias"));
    const auto v = diff::evaluate(g, {{"x", random_tensor({5, 8}, rng)}, {"gain", Tensor({8}, 1.0)}, {"bias", Tensor({8}, 0.0)}});
    CHECK(v[y].all_finite());
  }
}
