// The parallel reductions must agree with their serial references bit for
// bit at every thread count; that property is what makes seeded runs of the
// whole pipeline reproducible.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "qs/parallel.hpp"
#include "qs/rng.hpp"

using namespace qs;

namespace {

double wobbly(std::int64_t i) {
  // Non-associative enough that summation order shows up in the last bits.
  return std::sin(0.1 * static_cast<double>(i)) * 1e-3 +
         to_unit(rand_at(77, static_cast<std::uint64_t>(i)));
}

}  // namespace

TEST_CASE("block_sum: parallel equals serial bitwise at several thread counts") {
  for (std::int64_t n : {0L, 1L, 5L, 8192L, 8193L, 100000L}) {
    const double ref = par::block_sum_serial(n, wobbly);
    for (int threads : {1, 2, 3, 8}) {
      par::set_max_threads(threads);
      const double got = par::block_sum(n, wobbly);
      CHECK(got == ref);
    }
  }
  par::set_max_threads(0);
}

TEST_CASE("block_sum matches a naive sum to rounding error") {
  const std::int64_t n = 50000;
  double naive = 0.0;
  for (std::int64_t i = 0; i < n; ++i) naive += wobbly(i);
  const double blocked = par::block_sum_serial(n, wobbly);
  CHECK(std::abs(naive - blocked) < 1e-9 * std::abs(naive) + 1e-12);
}

TEST_CASE("block_sum_vec: parallel equals serial bitwise") {
  const std::int64_t n = 40000;
  const std::size_t dim = 7;
  auto map = [](std::int64_t i, double* acc) {
    for (std::size_t d = 0; d < 7; ++d) {
      acc[d] += to_unit(rand_at(3 + d, static_cast<std::uint64_t>(i))) - 0.5;
    }
  };
  const std::vector<double> ref = par::block_sum_vec_serial(n, dim, map);
  for (int threads : {1, 3, 8}) {
    par::set_max_threads(threads);
    CHECK(par::block_sum_vec(n, dim, map) == ref);
  }
  par::set_max_threads(0);
}

TEST_CASE("block size changes the value only within rounding error") {
  const std::int64_t n = 30000;
  const double a = par::block_sum_serial(n, wobbly, 512);
  const double b = par::block_sum_serial(n, wobbly, 8192);
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("for_each covers every index exactly once") {
  const std::int64_t n = 10000;
  std::vector<int> hits(n, 0);
  par::for_each(n, [&](std::int64_t i) { ++hits[i]; });
  for (int h : hits) CHECK(h == 1);
}
