// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The mohge Authors.

#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace mohge {

// Fixed shard size for batch work. Reductions run per shard and are merged in
// shard order, so results do not depend on the worker count.
inline constexpr std::size_t kShardSize = 256;

inline std::size_t num_shards(std::size_t n) { return (n + kShardSize - 1) / kShardSize; }

// Calls fn(shard, begin, end) for every shard of [0, n). Shards are handed to
// `workers` threads round-robin; workers <= 1 runs inline.
template <typename Fn>
void parallel_for_chunks(std::size_t n, std::size_t workers, Fn&& fn) {
  const std::size_t shards = num_shards(n);
  auto run = [&](std::size_t s) {
    const std::size_t b = s * kShardSize;
    fn(s, b, std::min(n, b + kShardSize));
  };
  if (workers <= 1 || shards <= 1) {
    for (std::size_t s = 0; s < shards; ++s) run(s);
    return;
  }
  workers = std::min(workers, shards);
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t s = w; s < shards; s += workers) run(s);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Ordered reduction over shards. Each shard accumulates into a fresh value
// from make(); merge(acc) is called serially in shard order. Shards run in
// waves of `workers`, so at most `workers` accumulators are alive at once.
template <typename Make, typename Fn, typename Merge>
void parallel_reduce_ordered(std::size_t n, std::size_t workers, Make&& make, Fn&& fn,
                             Merge&& merge) {
  const std::size_t shards = num_shards(n);
  workers = std::max<std::size_t>(1, workers);
  for (std::size_t wave = 0; wave < shards; wave += workers) {
    const std::size_t count = std::min(workers, shards - wave);
    using Acc = decltype(make());
    std::vector<Acc> accs;
    accs.reserve(count);
    for (std::size_t k = 0; k < count; ++k) accs.push_back(make());
    auto run = [&](std::size_t k) {
      const std::size_t b = (wave + k) * kShardSize;
      fn(accs[k], b, std::min(n, b + kShardSize));
    };
    if (count == 1) {
      run(0);
    } else {
      std::vector<std::exception_ptr> errors(count);
      std::vector<std::thread> pool;
      for (std::size_t k = 0; k < count; ++k)
        pool.emplace_back([&, k] {
          try {
            run(k);
          } catch (...) {
            errors[k] = std::current_exception();
          }
        });
      for (auto& th : pool) th.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }
    for (auto& acc : accs) merge(acc);
  }
}

}  // namespace mohge
