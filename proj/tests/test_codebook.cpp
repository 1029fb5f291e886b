#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "brute_force.hpp"
#include "doctest.h"
#include "dml/codebook.hpp"
#include "gradcheck.hpp"

using namespace dml;

TEST_CASE("hand-built cost matrix") {
  CostMatrix m{3, 3, {1, 2, 3, 2, 4, 6, 3, 6, 9}};
  auto s = solve_assignment(m);
  CHECK(s.column_of_row == std::vector<std::size_t>{2, 1, 0});
  CHECK(s.total_cost == 10.0);
}

TEST_CASE("assignment matches exhaustive enumeration") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const auto n = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    const auto k = std::uniform_int_distribution<std::size_t>(n, 8)(rng);
    CostMatrix m{n, k, {}};
    const bool integral = trial % 3 == 0;  // small integers force many ties
    for (std::size_t i = 0; i < n * k; ++i)
      m.cost.push_back(integral ? static_cast<double>(rng() % 4)
                                : std::uniform_real_distribution<double>(0.0, 5.0)(rng));
    const auto oracle = dml::testing::brute_force_assignment(m);
    const auto got = solve_assignment(m);
    CAPTURE(trial);
    CHECK(got.total_cost == oracle.total_cost);
    if (integral) CHECK(got.column_of_row == oracle.column_of_row);
  }
}

TEST_CASE("ties resolve to the lexicographically smallest assignment") {
  CostMatrix zeros{2, 4, std::vector<double>(8, 0.0)};
  CHECK(solve_assignment(zeros).column_of_row == std::vector<std::size_t>{0, 1});
  CostMatrix m{2, 3, {1, 0, 1, 0, 1, 1}};
  CHECK(solve_assignment(m).column_of_row == std::vector<std::size_t>{1, 0});
}

TEST_CASE("more rows than columns is infeasible") {
  CostMatrix m{3, 2, std::vector<double>(6, 1.0)};
  CHECK_THROWS_AS(solve_assignment(m), InfeasibleAssignment);
  auto cb = init_codebook(2, 4, 1);
  CHECK_THROWS_AS(hungarian_assign(Tensor::zeros({3, 4}), cb), InfeasibleAssignment);
}

TEST_CASE("nearest lookup examples") {
  Codebook cb(Tensor::from({3, 2}, {1, 0, 0, 0.5, -2, 0}));
  std::vector<double> e{0, 0};
  CHECK(nearest_lookup(e, cb) == 1);
  for (std::size_t j = 0; j < 3; ++j) CHECK(nearest_lookup(cb.entry(j), cb) == j);
  Codebook tie(Tensor::from({2, 1}, {1, -1}));
  std::vector<double> mid{0};
  CHECK(nearest_lookup(mid, tie) == 0);
}

TEST_CASE("a single caption reduces to nearest lookup") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto cb = init_codebook(7, 5, rng());
    auto e = dml::testing::random_tensor(rng, {1, 5}, -1, 1, false);
    auto a = hungarian_assign(e, cb);
    CHECK(a.entry_of_caption[0] == nearest_lookup(e.values(), cb));
  }
}

TEST_CASE("hungarian is injective, nearest may repeat") {
  // All embeddings sit on entry 0.
  Codebook cb(Tensor::from({3, 2}, {0, 0, 5, 5, -5, 5}));
  auto e = Tensor::from({3, 2}, {0, 0, 0.1, 0, 0, 0.1});
  auto h = hungarian_assign(e, cb);
  CHECK(h.injective());
  auto n = nearest_assign(e, cb);
  CHECK_FALSE(n.injective());
  CHECK(n.entry_of_caption == std::vector<std::size_t>{0, 0, 0});
  double total = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto j = h.entry_of_caption[i];
    const double d = std::hypot(e.at(i, 0) - cb.entry(j)[0], e.at(i, 1) - cb.entry(j)[1]);
    CHECK(h.costs[i] == doctest::Approx(d).epsilon(1e-15));
    total += h.costs[i];
  }
  CHECK(h.total_cost == doctest::Approx(total).epsilon(1e-15));
}

TEST_CASE("codebook init is seeded and shaped") {
  auto a = init_codebook(16, 8, 42), b = init_codebook(16, 8, 42), c = init_codebook(16, 8, 43);
  CHECK(a.size() == 16);
  CHECK(a.dim() == 8);
  CHECK(std::equal(a.entries().values().begin(), a.entries().values().end(), b.entries().values().begin()));
  CHECK_FALSE(std::equal(a.entries().values().begin(), a.entries().values().end(), c.entries().values().begin()));
  auto big = init_codebook(200, 50, 5);
  double ss = 0;
  for (auto v : big.entries().values()) ss += v * v;
  CHECK(std::sqrt(ss / 10000.0) == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("vq losses by substitution") {
  auto e = Tensor::from({2}, {1, 0}, true);
  auto q = Tensor::from({2}, {0, 0}, true);
  auto l = vq_losses(e, q, 0.25);
  CHECK(l.codebook_loss.item() == 1.0);
  CHECK(l.commitment_loss.item() == 0.25);
  auto same = vq_losses(e, e, 0.25);
  CHECK(same.codebook_loss.item() == 0.0);
  CHECK(same.commitment_loss.item() == 0.0);
}

TEST_CASE("each vq term reaches only its own target") {
  auto e = Tensor::from({2}, {1, 0.5}, true);
  auto q = Tensor::from({2}, {-0.5, 2}, true);
  auto l = vq_losses(e, q, 0.25);
  backward(l.codebook_loss);
  CHECK_FALSE(e.has_grad());
  REQUIRE(q.has_grad());
  CHECK(q.grad()[0] == 2 * (-0.5 - 1));
  CHECK(q.grad()[1] == 2 * (2 - 0.5));
  q.zero_grad();
  auto l2 = vq_losses(e, q, 0.25);
  backward(l2.commitment_loss);
  CHECK_FALSE(q.has_grad());
  REQUIRE(e.has_grad());
  CHECK(e.grad()[0] == 0.25 * 2 * (1 + 0.5));
  CHECK(e.grad()[1] == 0.25 * 2 * (0.5 - 2));
}

TEST_CASE("scalar composite: commitment plus straight-through downstream") {
  // Loss = ||sg e - q||^2 + b ||e - sg q||^2 + st(e, q)^2 at e = 1, q = 0.
  auto e = Tensor::from({1}, {1.0}, true);
  auto q = Tensor::from({1}, {0.0}, true);
  auto loss_fn = [&] {
    auto l = vq_losses(e, q, 0.25);
    auto s = straight_through(e, q);
    return add(add(l.codebook_loss, l.commitment_loss), sum(mul(s, s)));
  };
  backward(loss_fn());
  // Downstream gradient is 2 q = 0, so e sees the commitment term alone: 0.25 * 2 * (1 - 0).
  CHECK(e.grad()[0] == 0.5);
  CHECK(q.grad()[0] == -2.0);
  // Finite differences of each piece on its own.
  auto piece = [&](int which) {
    auto l = vq_losses(e, q, 0.25);
    if (which == 0) return l.codebook_loss;
    if (which == 1) return l.commitment_loss;
    auto s = straight_through(e, q);
    return sum(mul(s, s));
  };
  auto r_cb = dml::testing::grad_check([&] { return piece(0); }, {q}, 1e-6);
  auto r_cm = dml::testing::grad_check([&] { return piece(1); }, {e}, 1e-6);
  CHECK(r_cb.failures == 0);
  CHECK(r_cb.checked == 1);
  CHECK(r_cm.failures == 0);
  CHECK(r_cm.checked == 1);
}

TEST_CASE("usage counts and effective modes") {
  auto cb = init_codebook(16, 4, 9);
  CHECK(usage_report(cb).effective_modes == 0);
  std::mt19937_64 rng(2);
  auto e = dml::testing::random_tensor(rng, {5, 4}, -1, 1, false);
  cb.record(hungarian_assign(e, cb));
  auto r = usage_report(cb);
  CHECK(r.effective_modes == 5);
  CHECK(r.active_entries().size() == 5);
  CHECK(std::accumulate(r.counts.begin(), r.counts.end(), std::uint64_t{0}) == 5);
  CHECK_THROWS(cb.set_usage_counts({1, 2}));
}
