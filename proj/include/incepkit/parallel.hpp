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

#pragma once

#include <cstdint>
#include <functional>

namespace incepkit {

// Worker thread cap, resolved once per process from INCEPKIT_THREADS
// (unset or 0 means hardware concurrency).
int max_threads();

// Runs fn(begin, end) over contiguous chunks covering [0, count).
// Every index is assigned to exactly one chunk, so callers stay
// deterministic as long as chunks do not write to shared locations.
// `grain` is the minimum chunk size worth a thread.
void parallel_for(std::int64_t count, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace incepkit
