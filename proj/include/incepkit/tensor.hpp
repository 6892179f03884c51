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

#include <array>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "incepkit/error.hpp"

namespace incepkit {

// Dimension vector of a dense tensor. Activations are NHWC, convolution
// weights are [Kh, Kw, Cin, Cout], everything is row-major contiguous.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::int64_t> dims);

  static Shape nhwc(std::int64_t n, std::int64_t h, std::int64_t w, std::int64_t c) {
    return Shape{n, h, w, c};
  }

  int rank() const { return rank_; }
  std::int64_t operator[](int i) const { return dims_[static_cast<std::size_t>(i)]; }
  std::int64_t& operator[](int i) { return dims_[static_cast<std::size_t>(i)]; }

  // Total element count (1 for a rank-0 shape).
  std::int64_t count() const;

  // NHWC accessors, valid for rank-4 shapes.
  std::int64_t n() const { return dims_[0]; }
  std::int64_t h() const { return dims_[1]; }
  std::int64_t w() const { return dims_[2]; }
  std::int64_t c() const { return dims_[rank_ > 0 ? static_cast<std::size_t>(rank_ - 1) : 0]; }

  bool operator==(const Shape& other) const;
  bool operator!=(const Shape& other) const { return !(*this == other); }

  std::string str() const;  // e.g. "1x35x35x384"

  std::vector<std::int64_t> dims() const;

 private:
  std::array<std::int64_t, 4> dims_{1, 1, 1, 1};
  int rank_ = 0;
};

template <typename T>
struct TensorT {
  Shape shape;
  std::vector<T> data;

  TensorT() = default;
  explicit TensorT(Shape s) : shape(s), data(static_cast<std::size_t>(s.count()), T(0)) {
    check_shape(s);
  }
  TensorT(Shape s, std::vector<T> values) : shape(s), data(std::move(values)) {
    check_shape(s);
    if (static_cast<std::int64_t>(data.size()) != s.count())
      throw BadInput("tensor data size " + std::to_string(data.size()) +
                     " does not match shape " + s.str());
  }

  std::int64_t count() const { return static_cast<std::int64_t>(data.size()); }

  // Flat index of an NHWC coordinate.
  std::int64_t idx4(std::int64_t n, std::int64_t h, std::int64_t w, std::int64_t c) const {
    return ((n * shape[1] + h) * shape[2] + w) * shape[3] + c;
  }
  T& at4(std::int64_t n, std::int64_t h, std::int64_t w, std::int64_t c) {
    return data[static_cast<std::size_t>(idx4(n, h, w, c))];
  }
  const T& at4(std::int64_t n, std::int64_t h, std::int64_t w, std::int64_t c) const {
    return data[static_cast<std::size_t>(idx4(n, h, w, c))];
  }
  T& at2(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * shape[1] + c)]; }
  const T& at2(std::int64_t r, std::int64_t c) const {
    return data[static_cast<std::size_t>(r * shape[1] + c)];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(shape);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  static TensorT full(Shape s, T v) {
    TensorT t(s);
    t.fill(v);
    return t;
  }

 private:
  static void check_shape(const Shape& s) {
    if (s.rank() != 1 && s.rank() != 2 && s.rank() != 4)
      throw BadInput("tensor rank must be 1, 2 or 4, got shape " + s.str());
    for (int i = 0; i < s.rank(); ++i)
      if (s[i] < 1) throw BadInput("tensor dims must be positive, got " + s.str());
  }
};

using TensorF = TensorT<float>;
using TensorD = TensorT<double>;

enum class DType : std::uint8_t { Float32 = 1, Float64 = 2 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::Float32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::Float64;
}

// Deterministic random source. Draws are fully specified by the seed:
// the engine is the standard mt19937_64 and the value mappings are done
// by hand, so streams are reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  double normal();                        // standard normal, Box-Muller
  std::int64_t index(std::int64_t n);     // [0, n)

  // Fisher-Yates shuffle with this stream.
  template <typename V>
  void shuffle(V& v) {
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
      std::int64_t j = index(i + 1);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stable mixing for derived seeds (per-node, per-step, per-sample).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

template <typename T>
TensorT<T> random_uniform(Shape s, Rng& rng, T lo = T(-1), T hi = T(1)) {
  TensorT<T> t(s);
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
  return t;
}

template <typename T>
TensorT<T> random_normal(Shape s, Rng& rng, T stddev = T(1)) {
  TensorT<T> t(s);
  for (auto& v : t.data) v = static_cast<T>(rng.normal() * static_cast<double>(stddev));
  return t;
}

// ---------------------------------------------------------------------------
// TBIN v1 tensor file format
//
//   magic "TNSR" | u32 version=1 | u8 dtype (1=float32, 2=float64) |
//   u8 rank | rank x u64 dims | row-major little-endian payload
// ---------------------------------------------------------------------------

using AnyTensor = std::variant<TensorF, TensorD>;

void save_tbin(std::ostream& os, const TensorF& t);
void save_tbin(std::ostream& os, const TensorD& t);
void save_tbin(const std::string& path, const TensorF& t);
void save_tbin(const std::string& path, const TensorD& t);

AnyTensor load_tbin(std::istream& is);
AnyTensor load_tbin(const std::string& path);

DType dtype_of_any(const AnyTensor& t);

// Loads and converts to the requested element type.
template <typename T>
TensorT<T> load_tbin_as(const std::string& path) {
  AnyTensor any = load_tbin(path);
  if (auto* p = std::get_if<TensorT<T>>(&any)) return std::move(*p);
  if (auto* f = std::get_if<TensorF>(&any)) return f->template cast<T>();
  return std::get<TensorD>(any).template cast<T>();
}

}  // namespace incepkit
