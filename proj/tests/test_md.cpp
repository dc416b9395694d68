// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <numeric>

#include "doctest.h"

#include "cycleadapt/error.hpp"
#include "cycleadapt/md/md_net.hpp"
#include "test_util.hpp"

using namespace cycleadapt;
using diff::Tensor;
using md::MdConfig;
using testutil::random_tensor;

namespace {

MdConfig small_config() {
  MdConfig c;
  c.T = 8;
  c.H = 12;
  c.M = 2;
  return c;
}

// Smooth per-column sinusoids around the rest code.
Tensor smooth_motion(std::size_t L, std::size_t H, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> freq(0.01, 0.05), amp(0.05, 0.3), phase(0.0, 6.283);
  Tensor m({L, H});
  for (std::size_t h = 0; h < H; ++h) {
    const double f = freq(rng), a = amp(rng), p = phase(rng);
    const double base = (h % 6 == 0 || h % 6 == 4) ? 1.0 : 0.0;
    for (std::size_t t = 0; t < L; ++t) m.data[t * H + h] = base + a * std::sin(6.283 * f * t + p);
  }
  return m;
}

double mean_abs(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::abs(a.data[i] - b.data[i]);
  return s / static_cast<double>(a.numel());
}

}  // namespace

TEST_SUITE("mdnet") {
  TEST_CASE("parameter count by enumeration") {
    const auto net = md::md_init(MdConfig{}, 0);
    std::size_t count = 0;
    for (const auto& e : net.params.entries()) count += e.value.numel();
    // two H x H layers with bias, M time layers with bias and a layer norm each
    const std::size_t H = 144, T = 49, M = 4;
    CHECK(count == 2 * (H * H + H) + M * (T * T + T + 2 * T));
    CHECK(count == 51952);
    CHECK(net.params.scalar_count() == count);
    for (const auto& e : net.params.entries()) {
      INFO(e.name);
      CHECK(e.value.shape.front() == e.value.shape.back());
    }
  }

  TEST_CASE("initialization is seeded and preserves shape") {
    const auto a = md::md_init(MdConfig{}, 3), b = md::md_init(MdConfig{}, 3);
    CHECK(a.params == b.params);
    std::mt19937_64 rng(0);
    const Tensor x = random_tensor({49, 144}, rng);
    CHECK(md::md_forward(a, x).shape == x.shape);
    CHECK(md::md_forward(a, random_tensor({3, 49, 144}, rng)).shape == diff::Shape{3, 49, 144});
    CHECK_THROWS_AS(md::md_forward(a, random_tensor({48, 144}, rng)), ShapeError);
  }

  TEST_CASE("the rest pose is a fixed point of the untrained network") {
    const auto net = md::md_init(MdConfig{}, 5);
    Tensor rest({49, 144});
    for (std::size_t t = 0; t < 49; ++t)
      for (std::size_t h = 0; h < 144; h += 6) {
        rest.data[t * 144 + h] = 1.0;
        rest.data[t * 144 + h + 4] = 1.0;
      }
    CHECK(md::md_forward(net, rest) == rest);
  }

  TEST_CASE("rest offset needs whole rotation codes") {
    MdConfig c = small_config();
    c.H = 10;
    CHECK_THROWS_AS(md::md_init(c, 0), ConfigError);
    c.rest_offset = false;
    CHECK_NOTHROW(md::md_init(c, 0));
  }

  TEST_CASE("sample_mask cardinality and uniformity") {
    std::mt19937_64 rng(0);
    for (std::size_t T = 1; T <= 200; ++T) {
      const auto m = md::sample_mask(T, rng);
      REQUIRE(m.size() == T);
      CHECK(static_cast<std::size_t>(std::count(m.begin(), m.end(), 1)) == (T + 1) / 2);
    }
    CHECK(md::sample_mask(1, rng) == md::Mask{1});
    std::vector<int> hits(49, 0);
    for (int draw = 0; draw < 10000; ++draw) {
      const auto m = md::sample_mask(49, rng);
      for (std::size_t t = 0; t < 49; ++t) hits[t] += m[t];
    }
    for (int h : hits) CHECK(std::abs(h / 10000.0 - 25.0 / 49.0) <= 0.02);
    std::mt19937_64 r1(9), r2(9);
    CHECK(md::sample_mask(49, r1) == md::sample_mask(49, r2));
  }

  TEST_CASE("prefix masks only touch real rows") {
    std::mt19937_64 rng(1);
    for (std::size_t n = 1; n <= 49; ++n) {
      const auto m = md::sample_mask_prefix(49, n, rng);
      CHECK(static_cast<std::size_t>(std::count(m.begin(), m.end(), 1)) == (n + 1) / 2);
      CHECK(std::count(m.begin() + static_cast<std::ptrdiff_t>(n), m.end(), 1) == 0);
    }
  }

  TEST_CASE("masking") {
    const auto net = md::md_init(small_config(), 1);
    std::mt19937_64 rng(2);
    Tensor x = random_tensor({8, 12}, rng);
    const md::Mask none(8, 0);
    CHECK(md::md_forward(net, x, &none) == md::md_forward(net, x));
    const md::Mask m{1, 0, 0, 1, 1, 0, 1, 0};
    const Tensor masked = md::md_forward(net, x, &m);
    for (std::size_t t = 0; t < 8; ++t)
      if (m[t])
        for (std::size_t h = 0; h < 12; ++h) x.data[t * 12 + h] += 10.0;
    // the replaced values never reach the network
    CHECK(md::md_forward(net, x, &m) == masked);
  }

  TEST_CASE("self-supervised loss by hand") {
    const Tensor a({8, 12}, 0.3);
    CHECK(md::md_selfsup_loss(a, Tensor({8, 12}, 1.0), md::Mask(8, 0)) == 0.0);
    Tensor out({2, 3}, 0.0), in({2, 3}, 0.0);
    out.data[0] = 0.4;
    out.data[1] = -0.4;
    out.data[2] = 0.4;
    out.data[3] = 9.0;  // unmasked row, ignored
    CHECK(md::md_selfsup_loss(out, in, {1, 0}) == doctest::Approx(0.2).epsilon(1e-15));
    CHECK_THROWS_AS(md::md_selfsup_loss(out, Tensor({3, 3}), {1, 0}), ShapeError);
  }

  TEST_CASE("unmasked rows get no self-supervised gradient") {
    std::mt19937_64 rng(3);
    diff::Graph g;
    const auto x = g.leaf("out");
    const Tensor target = random_tensor({4, 5}, rng);
    const md::Mask m{0, 1, 1, 0};
    const auto loss = md::build_md_selfsup_loss(g, x, target, m);
    const diff::Bindings b{{"out", random_tensor({4, 5}, rng)}};
    const Tensor numeric = testutil::numeric_grad(g, b, loss, "out");
    const Tensor analytic = diff::backward(g, b, loss).at("out");
    for (std::size_t t : {0u, 3u})
      for (std::size_t h = 0; h < 5; ++h) {
        CHECK(numeric.data[t * 5 + h] == 0.0);
        CHECK(analytic.data[t * 5 + h] == 0.0);
      }
    CHECK(testutil::relative_error(analytic, numeric) < 1e-4);
  }

  TEST_CASE("network and masked loss pass grad_check") {
    for (bool residual : {true, false})
      for (bool relu : {false, true}) {
        MdConfig c = small_config();
        c.residual = residual;
        c.relu = relu;
        // an odd count of masked rows, so L1 signs cannot cancel to an exact
        // zero gradient that central differences only resolve as noise
        c.T = 9;
        const auto net = md::md_init(c, 4);
        std::mt19937_64 rng(5);
        const Tensor theta = random_tensor({3, 9, 12}, rng);
        const md::Mask m = md::sample_mask(9, rng);
        diff::Graph g;
        const auto x = g.leaf("window", false);
        const auto out = md::build_md_forward(g, net, x);
        const auto loss = md::build_md_selfsup_loss(g, out, theta, m);
        diff::Bindings b{{"window", md::apply_mask(theta, m)}};
        net.params.bind(b);
        INFO("residual=" << residual << " relu=" << relu);
        CHECK(diff::grad_check(g, b, loss, 1e-6) < 1e-4);
      }
  }

  TEST_CASE("time mixing is order sensitive") {
    auto net = md::md_init(small_config(), 6);
    std::mt19937_64 rng(7);
    const Tensor x = random_tensor({8, 12}, rng);
    Tensor shuffled = x;
    std::vector<std::size_t> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    std::rotate(perm.begin(), perm.begin() + 3, perm.end());
    for (std::size_t t = 0; t < 8; ++t)
      std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(perm[t] * 12), 12,
                  shuffled.data.begin() + static_cast<std::ptrdiff_t>(t * 12));
    const Tensor a = md::md_forward(net, x), b = md::md_forward(net, shuffled);
    double diff = 0.0;
    for (std::size_t t = 0; t < 8; ++t)
      for (std::size_t h = 0; h < 12; ++h) diff += std::abs(b.data[t * 12 + h] - a.data[perm[t] * 12 + h]);
    CHECK(diff > 1e-6);
  }

  TEST_CASE("noise-free pre-training approaches the identity") {
    int monotone = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::mt19937_64 rng(seed);
      MdConfig c = small_config();
      auto net = md::md_init(c, seed);
      // start from a perturbed network so there is something to learn
      std::normal_distribution<double> g(0.0, 0.05);
      for (auto& e : net.params.entries())
        for (double& v : e.value.data) v += g(rng);
      std::vector<Tensor> motions{smooth_motion(64, 12, rng), smooth_motion(64, 12, rng)};
      md::MdPretrainConfig pc;
      pc.steps = 300;
      pc.sigma = 0.0;
      pc.log_every = 60;
      pc.seed = seed;
      const auto log = md::md_pretrain(net, motions, pc);
      REQUIRE(log.probe_error.size() == 6);
      monotone += std::is_sorted(log.probe_error.rbegin(), log.probe_error.rend()) ? 1 : 0;
    }
    CHECK(monotone >= 9);
  }

  TEST_CASE("pre-training beats the identity map on held-out noisy windows") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      std::mt19937_64 rng(100 + seed);
      MdConfig c;
      c.T = 16;
      c.H = 12;
      c.M = 2;
      auto net = md::md_init(c, seed);
      std::vector<Tensor> motions;
      for (int i = 0; i < 6; ++i) motions.push_back(smooth_motion(80, 12, rng));
      md::MdPretrainConfig pc;
      pc.steps = 600;
      pc.sigma = 0.05;
      pc.seed = seed;
      md::md_pretrain(net, motions, pc);
      const Tensor full = smooth_motion(16, 12, rng);
      Tensor noisy = full;
      std::normal_distribution<double> g(0.0, 0.05);
      for (double& v : noisy.data) v += g(rng);
      INFO("seed " << seed);
      CHECK(mean_abs(md::md_forward(net, noisy), full) < mean_abs(noisy, full));
    }
  }

  TEST_CASE("pre-training contracts") {
    auto net = md::md_init(small_config(), 0);
    CHECK_THROWS_AS(md::md_pretrain(net, {}, {}), RangeError);
    md::MdPretrainConfig pc;
    pc.sigma = -1.0;
    std::mt19937_64 rng(0);
    CHECK_THROWS_AS(md::md_pretrain(net, {smooth_motion(20, 12, rng)}, pc), RangeError);
    CHECK(md::kDefaultPretrainSigma == 0.01);
    pc = {};
    pc.steps = 20;
    auto a = md::md_init(small_config(), 0), b = md::md_init(small_config(), 0);
    const std::vector<Tensor> motions{smooth_motion(30, 12, rng)};
    md::md_pretrain(a, motions, pc);
    md::md_pretrain(b, motions, pc);
    CHECK(a.params == b.params);
  }

  TEST_CASE("Gaussian filter baseline") {
    CHECK(testutil::max_abs_diff(md::gaussian_filter_baseline(Tensor({20, 3}, 1.5), 2.0), Tensor({20, 3}, 1.5)) < 1e-14);
    Tensor impulse({21, 1}, 0.0);
    impulse.data[10] = 1.0;
    const Tensor out = md::gaussian_filter_baseline(impulse, 1.0);
    double total = 0.0;
    for (int i = -3; i <= 3; ++i) total += std::exp(-0.5 * i * i);
    CHECK(out.data[10] == doctest::Approx(1.0 / total).epsilon(1e-14));
    CHECK(md::gaussian_kernel(1.0).size() == 7);
    CHECK(md::gaussian_kernel(1.2).size() == 9);
    Tensor ramp({30, 2});
    for (std::size_t t = 0; t < 30; ++t) {
      ramp.data[2 * t] = 0.5 * t;
      ramp.data[2 * t + 1] = 3.0 - 0.2 * t;
    }
    const Tensor r = md::gaussian_filter_baseline(ramp, 1.5);
    for (std::size_t t = 5; t < 25; ++t) {
      CHECK(std::abs(r.data[2 * t] - ramp.data[2 * t]) < 1e-9);
      CHECK(std::abs(r.data[2 * t + 1] - ramp.data[2 * t + 1]) < 1e-9);
    }
    CHECK_THROWS_AS(md::gaussian_filter_baseline(ramp, 0.0), RangeError);
  }

  TEST_CASE("parameter file round trip") {
    const auto net = md::md_init(small_config(), 2);
    testutil::TempDir dir("md");
    nn::save_params(dir.file("md.bin"), md::kMdMagic, net.params);
    auto loaded = md::md_init(small_config(), 3);
    nn::load_params(dir.file("md.bin"), md::kMdMagic, loaded.params);
    CHECK(loaded.params == net.params);
    CHECK_THROWS_AS(nn::load_params(dir.file("md.bin"), nn::Magic{'C', 'A', 'H', 'M'}, loaded.params), FormatError);
  }
}
