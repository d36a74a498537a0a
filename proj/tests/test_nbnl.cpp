#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "block_pipeline.hpp"
#include "fcnbnl/nbnl.hpp"
#include "fd_oracle.hpp"

using namespace fcnbnl;

namespace {

std::vector<double> rand_unit_ball(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> ur(0.05, 1.0);
  std::vector<double> v(d);
  double norm2 = 0.0;
  for (auto& x : v) {
    x = n(rng);
    norm2 += x * x;
  }
  const double scale = ur(rng) / std::sqrt(std::max(norm2, 1e-30));
  for (auto& x : v) x *= scale;
  return v;
}

PrototypeBank<double> random_bank(NbnlConfig cfg, int d, std::mt19937_64& rng) {
  PrototypeBank<double> bank(cfg, d);
  for (int y = 0; y < cfg.k; ++y)
    for (int j = 0; j < cfg.p; ++j) {
      auto v = rand_unit_ball(d, rng);
      std::copy(v.begin(), v.end(), bank.prototype(y, j).begin());
    }
  return bank;
}

MultiScaleDescriptors<double> random_msd(int m, int d, std::mt19937_64& rng, int max_side = 3) {
  std::uniform_int_distribution<int> side(1, max_side);
  MultiScaleDescriptors<double> x;
  for (int s = 0; s < m; ++s) {
    DescriptorGrid<double> g(side(rng), side(rng), d);
    for (int i = 0; i < g.eta(); ++i) {
      auto v = rand_unit_ball(d, rng);
      std::copy(v.begin(), v.end(), g.descriptor(i).begin());
    }
    x.scales.push_back(std::move(g));
  }
  return x;
}

// Smallest |<z,s>| over all (descriptor, prototype) pairs; finite-difference
// checks need configurations away from the hinge boundary.
double min_hinge_margin(const MultiScaleDescriptors<double>& x, const PrototypeBank<double>& bank) {
  double m = 1e300;
  for (const auto& g : x.scales)
    for (int i = 0; i < g.eta(); ++i) {
      auto z = g.descriptor(i);
      for (int y = 0; y < bank.config.k; ++y)
        for (int j = 0; j < bank.config.p; ++j) {
          auto s = bank.prototype(y, j);
          double dot = 0.0;
          for (std::size_t t = 0; t < z.size(); ++t) dot += z[t] * s[t];
          m = std::min(m, std::abs(dot));
        }
    }
  return m;
}

}  // namespace

TEST_CASE("omega basic cases", "[nbnl]") {
  SECTION("matching unit prototype scores 1 for any q") {
    std::vector<double> z{0.6, 0.8};
    for (double q : {1.0, 2.5, 10.0}) {
      REQUIRE(omega<double>(z, std::span<const double>(z), 1, q) == Catch::Approx(1.0));
    }
  }
  SECTION("all non-positive dots give 0") {
    std::vector<double> z{1.0, 0.0};
    std::vector<double> protos{-0.5, 0.3, 0.0, 1.0};  // dots -0.5 and 0
    REQUIRE(omega<double>(z, protos, 2, 4.0) == 0.0);
  }
  SECTION("dots (0.5, 0.3) at q=2") {
    std::vector<double> z{1.0, 0.0};
    std::vector<double> protos{0.5, 0.0, 0.3, 0.9};
    REQUIRE(omega<double>(z, protos, 2, 2.0) == Catch::Approx(std::sqrt(0.34)).epsilon(1e-12));
  }
  SECTION("q below 1 is a hard error") {
    std::vector<double> z{1.0};
    std::vector<double> protos{1.0};
    REQUIRE_THROWS_AS(omega<double>(z, protos, 1, 0.5), std::invalid_argument);
  }
}

TEST_CASE("omega_backward", "[nbnl]") {
  SECTION("inactive hinges give zero gradients") {
    std::vector<double> z{1.0, 0.0};
    std::vector<double> protos{-0.5, 0.2, -0.1, 0.8};
    std::vector<double> gz(2, 0.0), gw(4, 0.0);
    omega_backward<double>(z, protos, 2, 3.0, 1.0, gz, gw);
    for (double v : gz) REQUIRE(v == 0.0);
    for (double v : gw) REQUIRE(v == 0.0);
  }
  SECTION("q=1 with a single active prototype is the linear regime") {
    std::vector<double> z{0.3, -0.4};
    std::vector<double> s{0.5, -0.5};  // dot 0.35 > 0
    std::vector<double> gz(2, 0.0), gw(2, 0.0);
    omega_backward<double>(z, s, 1, 1.0, 1.0, gz, gw);
    REQUIRE(gw[0] == Catch::Approx(z[0]));
    REQUIRE(gw[1] == Catch::Approx(z[1]));
    REQUIRE(gz[0] == Catch::Approx(s[0]));
    REQUIRE(gz[1] == Catch::Approx(s[1]));
  }
  SECTION("matches finite differences on random instances") {
    std::mt19937_64 rng(55);
    int done = 0;
    while (done < 20) {
      const int d = 4, p = 3;
      const double q = std::vector<double>{1.0, 2.0, 4.0, 10.0}[done % 4];
      auto z = rand_unit_ball(d, rng);
      std::vector<double> protos;
      for (int j = 0; j < p; ++j) {
        auto s = rand_unit_ball(d, rng);
        protos.insert(protos.end(), s.begin(), s.end());
      }
      // keep away from the hinge kink and from omega == 0
      bool ok = true;
      double any_active = false;
      for (int j = 0; j < p; ++j) {
        double dot = 0;
        for (int t = 0; t < d; ++t) dot += z[t] * protos[j * d + t];
        if (std::abs(dot) < 1e-2) ok = false;
        if (dot > 0) any_active = true;
      }
      if (!ok || !any_active) continue;
      ++done;

      std::vector<double> gz(d, 0.0), gw(p * d, 0.0);
      omega_backward<double>(z, protos, p, q, 1.0, gz, gw);

      auto fd_z = testutil::fd_gradient(z, [&](const std::vector<double>& zz) {
        return omega<double>(zz, protos, p, q);
      });
      auto fd_w = testutil::fd_gradient(protos, [&](const std::vector<double>& ww) {
        return omega<double>(z, ww, p, q);
      });
      REQUIRE(testutil::max_rel_err(gz, fd_z) < 1e-5);
      REQUIRE(testutil::max_rel_err(gw, fd_w) < 1e-5);
    }
  }
}

TEST_CASE("bar_omega and likelihood_h", "[nbnl]") {
  NbnlConfig cfg;
  cfg.k = 2;
  cfg.p = 1;
  cfg.q = 4.0;
  PrototypeBank<double> bank(cfg, 2);
  bank.prototype(0, 0)[0] = 1.0;  // W_0 = {(1,0)}
  bank.prototype(1, 0)[1] = 1.0;  // W_1 = {(0,1)}

  SECTION("single descriptor equals its omega") {
    DescriptorGrid<double> g(1, 1, 2);
    g.descriptor(0)[0] = 0.7;
    REQUIRE(bar_omega(g, bank, 0) == Catch::Approx(0.7));
  }
  SECTION("duplicating every descriptor leaves the mean unchanged") {
    DescriptorGrid<double> g(1, 2, 2);
    g.descriptor(0)[0] = 0.2;
    g.descriptor(1)[0] = 0.6;
    DescriptorGrid<double> dup(1, 4, 2);
    dup.descriptor(0)[0] = 0.2;
    dup.descriptor(1)[0] = 0.6;
    dup.descriptor(2)[0] = 0.2;
    dup.descriptor(3)[0] = 0.6;
    REQUIRE(bar_omega(g, bank, 0) == Catch::Approx(0.4));
    REQUIRE(bar_omega(dup, bank, 0) == Catch::Approx(bar_omega(g, bank, 0)));
  }
  SECTION("likelihood averages scales") {
    MultiScaleDescriptors<double> x;
    DescriptorGrid<double> g1(1, 1, 2);
    g1.descriptor(0)[0] = 0.1;
    DescriptorGrid<double> g2(1, 1, 2);
    g2.descriptor(0)[0] = 0.3;
    x.scales = {g1, g2};
    REQUIRE(likelihood_h(x, bank, 0) == Catch::Approx(0.2));

    MultiScaleDescriptors<double> single;
    single.scales = {g1};
    REQUIRE(likelihood_h(single, bank, 0) == Catch::Approx(bar_omega(g1, bank, 0)));
  }
  SECTION("all-inactive descriptors give 0") {
    MultiScaleDescriptors<double> x;
    DescriptorGrid<double> g(1, 2, 2);
    g.descriptor(0)[0] = -0.5;
    g.descriptor(1)[0] = -0.1;
    x.scales = {g};
    REQUIRE(likelihood_h(x, bank, 0) == 0.0);
  }
  SECTION("empty scale list is a hard error") {
    MultiScaleDescriptors<double> x;
    REQUIRE_THROWS_AS(likelihood_h(x, bank, 0), std::invalid_argument);
  }
}

TEST_CASE("classify_nbnl", "[nbnl]") {
  SECTION("bank holding exact copies of the query wins") {
    NbnlConfig cfg;
    cfg.k = 2;
    cfg.p = 2;
    cfg.q = 10.0;
    PrototypeBank<double> bank(cfg, 4);
    // W_1 = {e1, e2}, W_0 = {e3, e4}; query = {e1, e2}
    bank.prototype(0, 0)[2] = 1.0;
    bank.prototype(0, 1)[3] = 1.0;
    bank.prototype(1, 0)[0] = 1.0;
    bank.prototype(1, 1)[1] = 1.0;
    MultiScaleDescriptors<double> x;
    DescriptorGrid<double> g(1, 2, 4);
    g.descriptor(0)[0] = 1.0;
    g.descriptor(1)[1] = 1.0;
    x.scales = {g};
    REQUIRE(likelihood_h(x, bank, 1) == Catch::Approx(1.0));
    REQUIRE(likelihood_h(x, bank, 0) == 0.0);
    REQUIRE(classify_nbnl(x, bank) == 1);
  }
  SECTION("identical prototype sets tie to label 0") {
    NbnlConfig cfg;
    cfg.k = 2;
    cfg.p = 1;
    PrototypeBank<double> bank(cfg, 2);
    bank.prototype(0, 0)[0] = 0.8;
    bank.prototype(1, 0)[0] = 0.8;
    MultiScaleDescriptors<double> x;
    DescriptorGrid<double> g(1, 1, 2);
    g.descriptor(0)[0] = 0.5;
    x.scales = {g};
    REQUIRE(classify_nbnl(x, bank) == 0);
  }
  SECTION("uniform positive scaling of descriptors never changes the argmax") {
    std::mt19937_64 rng(91);
    for (int trial = 0; trial < 20; ++trial) {
      NbnlConfig cfg;
      cfg.k = 3;
      cfg.p = 2;
      cfg.q = 4.0;
      auto bank = random_bank(cfg, 5, rng);
      auto x = random_msd(2, 5, rng);
      const int label = classify_nbnl(x, bank);
      auto scaled = x;
      const double alpha = std::uniform_real_distribution<double>(0.1, 9.0)(rng);
      for (auto& g : scaled.scales)
        for (auto& v : g.data) v *= alpha;
      REQUIRE(classify_nbnl(scaled, bank) == label);
    }
  }
}

TEST_CASE("descriptor_loss", "[nbnl]") {
  SECTION("uniform logits") {
    std::vector<double> u{0.0, 0.0};
    REQUIRE(descriptor_loss(u, 0) == Catch::Approx(std::log(2.0)));
  }
  SECTION("closed-form value") {
    std::vector<double> u{1.0, 0.0, 0.0};
    REQUIRE(descriptor_loss(u, 0) == Catch::Approx(-1.0 + std::log(std::exp(1.0) + 2.0)).epsilon(1e-12));
    REQUIRE(descriptor_loss(u, 0) == Catch::Approx(0.5514447139320511).epsilon(1e-10));
  }
  SECTION("shift invariance") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> ur(-2.0, 2.0);
    for (int t = 0; t < 20; ++t) {
      std::vector<double> u{ur(rng), ur(rng), ur(rng), ur(rng)};
      auto shifted = u;
      const double c = ur(rng);
      for (auto& v : shifted) v += c;
      REQUIRE(descriptor_loss(shifted, 2) == Catch::Approx(descriptor_loss(u, 2)).margin(1e-12));
    }
  }
  SECTION("label out of range is a hard error") {
    std::vector<double> u{0.0, 0.0};
    REQUIRE_THROWS_AS(descriptor_loss(u, 2), std::invalid_argument);
  }
}

TEST_CASE("surrogate_loss equals the plain loss when m=1 and eta=1", "[nbnl]") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    NbnlConfig cfg;
    cfg.k = 3;
    cfg.p = 2;
    cfg.q = (trial % 2) ? 10.0 : 2.0;
    const int d = 4;
    auto bank = random_bank(cfg, d, rng);
    MultiScaleDescriptors<double> x;
    DescriptorGrid<double> g(1, 1, d);
    auto z = rand_unit_ball(d, rng);
    std::copy(z.begin(), z.end(), g.descriptor(0).begin());
    x.scales = {g};

    auto r = surrogate_loss(x, bank, 1);
    const auto h = class_likelihoods(x, bank);
    REQUIRE(std::abs(r.loss - descriptor_loss(h, 1)) < 1e-12);
  }
}

TEST_CASE("Jensen bound holds on 1000 random instances", "[nbnl][acceptance-support]") {
  std::mt19937_64 rng(777);
  std::uniform_int_distribution<int> uk(2, 4), up(1, 3), um(1, 3), ud(3, 6), uy(0, 1);
  const double qs[4] = {1.0, 2.0, 4.0, 10.0};
  for (int trial = 0; trial < 1000; ++trial) {
    NbnlConfig cfg;
    cfg.k = uk(rng);
    cfg.p = up(rng);
    cfg.q = qs[trial % 4];
    const int d = ud(rng);
    auto bank = random_bank(cfg, d, rng);
    auto x = random_msd(um(rng), d, rng);
    const int label = trial % cfg.k;

    auto r = surrogate_loss(x, bank, label);
    const auto h = class_likelihoods(x, bank);
    REQUIRE(descriptor_loss(h, label) <= r.loss + 1e-9);
  }
}

TEST_CASE("surrogate gradient for a prototype with no active hinge is zero", "[nbnl]") {
  NbnlConfig cfg;
  cfg.k = 2;
  cfg.p = 2;
  cfg.q = 3.0;
  PrototypeBank<double> bank(cfg, 2);
  bank.prototype(0, 0)[0] = 0.9;    // active for the query
  bank.prototype(0, 1)[0] = -0.9;   // dot < 0: dead hinge
  bank.prototype(1, 0)[1] = 0.7;
  bank.prototype(1, 1)[1] = -0.7;

  MultiScaleDescriptors<double> x;
  DescriptorGrid<double> g(1, 1, 2);
  g.descriptor(0)[0] = 1.0;  // dots: +0.9, -0.9 for class 0; 0, 0 for class 1
  x.scales = {g};

  auto r = surrogate_loss(x, bank, 0);
  // class 0 prototype 1 and both class-1 prototypes have no active hinge
  REQUIRE(r.grad_prototypes(0, 1, 0) == 0.0);
  REQUIRE(r.grad_prototypes(0, 1, 1) == 0.0);
  REQUIRE(r.grad_prototypes(1, 0, 0) == 0.0);
  REQUIRE(r.grad_prototypes(1, 1, 0) == 0.0);
  // the active prototype must receive gradient
  REQUIRE(r.grad_prototypes(0, 0, 0) != 0.0);
}

TEST_CASE("surrogate_loss gradients match finite differences", "[nbnl]") {
  std::mt19937_64 rng(101);
  int done = 0;
  while (done < 12) {
    NbnlConfig cfg;
    cfg.k = 3;
    cfg.p = 2;
    cfg.q = (done % 2) ? 10.0 : 2.0;
    const int d = 4;
    auto bank = random_bank(cfg, d, rng);
    auto x = random_msd(2, d, rng, 2);
    if (min_hinge_margin(x, bank) < 1e-2) continue;
    ++done;
    const int label = done % cfg.k;
    auto r = surrogate_loss(x, bank, label);

    auto fd_w = testutil::fd_gradient(bank.w.data, [&](const std::vector<double>& w) {
      auto b2 = bank;
      b2.w.data = w;
      return surrogate_loss(x, b2, label).loss;
    });
    REQUIRE(testutil::max_rel_err(r.grad_prototypes.data, fd_w) < 1e-5);

    for (std::size_t s = 0; s < x.scales.size(); ++s) {
      auto fd_z = testutil::fd_gradient(x.scales[s].data, [&](const std::vector<double>& zd) {
        auto x2 = x;
        x2.scales[s].data = zd;
        return surrogate_loss(x2, bank, label).loss;
      });
      REQUIRE(testutil::max_rel_err(r.grad_descriptors.scales[s].data, fd_z) < 1e-5);
    }
  }
}

TEST_CASE("omega properties", "[nbnl]") {
  std::mt19937_64 rng(404);
  for (int trial = 0; trial < 200; ++trial) {
    const int d = 5, p = 3;
    auto z = rand_unit_ball(d, rng);
    std::vector<double> protos;
    for (int j = 0; j < p; ++j) {
      auto s = rand_unit_ball(d, rng);
      protos.insert(protos.end(), s.begin(), s.end());
    }

    // nonnegativity and the max-hinge lower bound, across q
    double max_hinge = 0.0;
    for (int j = 0; j < p; ++j) {
      double dot = 0;
      for (int t = 0; t < d; ++t) dot += z[t] * protos[j * d + t];
      max_hinge = std::max(max_hinge, std::max(dot, 0.0));
    }
    double prev = 1e300;
    for (double q : {1.0, 2.0, 4.0, 10.0}) {
      const double w = omega<double>(z, protos, p, q);
      REQUIRE(w >= 0.0);
      REQUIRE(w >= max_hinge - 1e-12);
      REQUIRE(w <= prev + 1e-12);  // non-increasing in q
      prev = w;
    }

    // positive homogeneity in z
    const double alpha = std::uniform_real_distribution<double>(0.0, 3.0)(rng);
    auto scaled = z;
    for (auto& v : scaled) v *= alpha;
    REQUIRE(omega<double>(scaled, protos, p, 4.0) ==
            Catch::Approx(alpha * omega<double>(z, protos, p, 4.0)).margin(1e-9));
  }
}

TEST_CASE("block pipeline computes omega for every prototype and cell", "[nbnl][acceptance-support]") {
  std::mt19937_64 rng(606);
  for (int trial = 0; trial < 100; ++trial) {
    NbnlConfig cfg;
    cfg.k = 2 + trial % 3;
    cfg.p = 1 + trial % 3;
    cfg.q = std::vector<double>{1.0, 2.0, 4.0, 10.0}[trial % 4];
    const int d = 4, h = 1 + trial % 3, w = 1 + (trial / 2) % 3;
    auto bank = random_bank(cfg, d, rng);

    Tensor<double> grid({d, h, w});
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (auto& v : grid.data) v = u(rng);

    auto block = testutil::omega_via_block_pipeline(grid, bank);
    for (int y = 0; y < cfg.k; ++y)
      for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx) {
          std::vector<double> z(d);
          for (int c = 0; c < d; ++c) z[c] = grid(c, yy, xx);
          const double direct = omega<double>(z, bank, y);
          REQUIRE(std::abs(block(y, yy, xx) - direct) < 1e-6);
        }
  }
}
