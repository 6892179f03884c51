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

#include <stdexcept>
#include <string>

namespace incepkit {

// Base class for everything incepkit throws.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed files, incompatible shapes, invalid configuration. Maps to
// CLI exit code 2.
struct BadInput : Error {
  using Error::Error;
};

// Non-finite values encountered during computation. Maps to CLI exit
// code 3.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace incepkit
