#pragma once
// OpenMP helpers with a deterministic reduction layout.
//
// Floating-point sums are cut into fixed-size blocks: each block is
// accumulated serially in index order, and the block partials are combined
// in block order.  The result is therefore bit-identical for any thread
// count, including one — the serial reference paths used in tests and in the
// kernel benchmark call the same per-block code with the parallel loop
// disabled, so "serial vs OpenMP" comparisons can demand exact equality.

#include <cstdint>
#include <vector>

namespace qs::par {

// Caps the worker count for all parallel regions.  n <= 0 restores the
// hardware default.  Thread count never changes results, only speed.
void set_max_threads(int n);
int max_threads();

inline constexpr std::int64_t kDefaultBlock = 8192;

inline std::int64_t block_count(std::int64_t n, std::int64_t block) {
  return (n + block - 1) / block;
}

// fn(i) for i in [0, n), no ordering guarantees between iterations.
template <class Fn>
void for_each(std::int64_t n, Fn&& fn) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) fn(i);
}

// fn(b, lo, hi) for each fixed block [lo, hi); blocks run concurrently when
// `parallel`, but the block layout itself never depends on the schedule.
template <class Fn>
void for_blocks(std::int64_t n, std::int64_t block, bool parallel, Fn&& fn) {
  const std::int64_t nb = block_count(n, block);
  if (parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t b = 0; b < nb; ++b) {
      fn(b, b * block, std::min(n, (b + 1) * block));
    }
  } else {
    for (std::int64_t b = 0; b < nb; ++b) {
      fn(b, b * block, std::min(n, (b + 1) * block));
    }
  }
}

namespace detail {

template <class Map>
double block_sum_impl(std::int64_t n, Map&& map, std::int64_t block, bool parallel) {
  if (n <= 0) return 0.0;
  std::vector<double> partial(static_cast<std::size_t>(block_count(n, block)), 0.0);
  for_blocks(n, block, parallel, [&](std::int64_t b, std::int64_t lo, std::int64_t hi) {
    double acc = 0.0;
    for (std::int64_t i = lo; i < hi; ++i) acc += map(i);
    partial[static_cast<std::size_t>(b)] = acc;
  });
  double total = 0.0;
  for (double p : partial) total += p;  // fixed combine order
  return total;
}

template <class Map>
std::vector<double> block_sum_vec_impl(std::int64_t n, std::size_t dim, Map&& map,
                                       std::int64_t block, bool parallel) {
  std::vector<double> total(dim, 0.0);
  if (n <= 0) return total;
  const std::int64_t nb = block_count(n, block);
  std::vector<double> partial(static_cast<std::size_t>(nb) * dim, 0.0);
  for_blocks(n, block, parallel, [&](std::int64_t b, std::int64_t lo, std::int64_t hi) {
    double* acc = partial.data() + static_cast<std::size_t>(b) * dim;
    for (std::int64_t i = lo; i < hi; ++i) map(i, acc);
  });
  for (std::int64_t b = 0; b < nb; ++b) {
    const double* acc = partial.data() + static_cast<std::size_t>(b) * dim;
    for (std::size_t d = 0; d < dim; ++d) total[d] += acc[d];
  }
  return total;
}

}  // namespace detail

// Deterministic blocked sum of map(i) over [0, n).
template <class Map>
double block_sum(std::int64_t n, Map&& map, std::int64_t block = kDefaultBlock) {
  return detail::block_sum_impl(n, map, block, /*parallel=*/true);
}

// Serial reference: same block layout, same code path, no OpenMP loop.
template <class Map>
double block_sum_serial(std::int64_t n, Map&& map, std::int64_t block = kDefaultBlock) {
  return detail::block_sum_impl(n, map, block, /*parallel=*/false);
}

// Deterministic blocked accumulation of dim-sized vectors.
// map(i, acc) must add example i's contribution into acc[0..dim).
template <class Map>
std::vector<double> block_sum_vec(std::int64_t n, std::size_t dim, Map&& map,
                                  std::int64_t block = kDefaultBlock) {
  return detail::block_sum_vec_impl(n, dim, map, block, /*parallel=*/true);
}

template <class Map>
std::vector<double> block_sum_vec_serial(std::int64_t n, std::size_t dim, Map&& map,
                                         std::int64_t block = kDefaultBlock) {
  return detail::block_sum_vec_impl(n, dim, map, block, /*parallel=*/false);
}

}  // namespace qs::par
