// Copyright 2026 The Incepkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "incepkit/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace incepkit {

int max_threads() {
  static const int cached = [] {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw <= 0) hw = 1;
    const char* env = std::getenv("INCEPKIT_THREADS");
    if (env != nullptr) {
      int requested = std::atoi(env);
      if (requested > 0) return std::min(requested, hw);
    }
    return hw;
  }();
  return cached;
}

void parallel_for(std::int64_t count, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (count <= 0) return;
  if (grain < 1) grain = 1;
  std::int64_t workers = std::min<std::int64_t>(max_threads(), (count + grain - 1) / grain);
  if (workers <= 1) {
    fn(0, count);
    return;
  }
  std::int64_t chunk = (count + workers - 1) / workers;
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(workers) - 1);
  for (std::int64_t w = 1; w < workers; ++w) {
    std::int64_t begin = w * chunk;
    std::int64_t end = std::min(count, begin + chunk);
    if (begin >= end) break;
    threads.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  fn(0, std::min(count, chunk));
  for (auto& t : threads) t.join();
}

}  // namespace incepkit
