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

#include "incepkit/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "TBIN I/O assumes a little-endian host");

namespace incepkit {

Shape::Shape(std::initializer_list<std::int64_t> dims) {
  if (dims.size() > 4) throw BadInput("shape rank must be <= 4");
  rank_ = static_cast<int>(dims.size());
  int i = 0;
  for (std::int64_t d : dims) dims_[static_cast<std::size_t>(i++)] = d;
}

std::int64_t Shape::count() const {
  std::int64_t p = 1;
  for (int i = 0; i < rank_; ++i) p *= dims_[static_cast<std::size_t>(i)];
  return p;
}

bool Shape::operator==(const Shape& other) const {
  if (rank_ != other.rank_) return false;
  for (int i = 0; i < rank_; ++i)
    if (dims_[static_cast<std::size_t>(i)] != other.dims_[static_cast<std::size_t>(i)]) return false;
  return true;
}

std::string Shape::str() const {
  if (rank_ == 0) return "scalar";
  std::string s;
  for (int i = 0; i < rank_; ++i) {
    if (i) s += 'x';
    s += std::to_string(dims_[static_cast<std::size_t>(i)]);
  }
  return s;
}

std::vector<std::int64_t> Shape::dims() const {
  return std::vector<std::int64_t>(dims_.begin(), dims_.begin() + rank_);
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

Rng::Rng(std::uint64_t seed) : engine_(seed) {}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() {
  // 53 mantissa bits, value in [0, 1).
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::int64_t Rng::index(std::int64_t n) {
  if (n <= 0) throw BadInput("Rng::index needs a positive bound");
  // Rejection sampling keeps the draw unbiased.
  std::uint64_t un = static_cast<std::uint64_t>(n);
  std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  std::uint64_t v = 0;
  do {
    v = engine_();
  } while (v >= limit);
  return static_cast<std::int64_t>(v % un);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over the combined words.
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL + (b << 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// TBIN
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw BadInput("TBIN: truncated file");
  return v;
}

template <typename T>
void save_tbin_impl(std::ostream& os, const TensorT<T>& t) {
  os.write(kMagic, 4);
  write_raw(os, kVersion);
  write_raw(os, static_cast<std::uint8_t>(dtype_of<T>()));
  write_raw(os, static_cast<std::uint8_t>(t.shape.rank()));
  for (int i = 0; i < t.shape.rank(); ++i) write_raw(os, static_cast<std::uint64_t>(t.shape[i]));
  os.write(reinterpret_cast<const char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(T)));
  if (!os) throw BadInput("TBIN: write failed");
}

template <typename T>
TensorT<T> read_payload(std::istream& is, const Shape& shape) {
  TensorT<T> t(shape);
  is.read(reinterpret_cast<char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * sizeof(T)));
  if (!is) throw BadInput("TBIN: truncated payload");
  return t;
}

}  // namespace

void save_tbin(std::ostream& os, const TensorF& t) { save_tbin_impl(os, t); }
void save_tbin(std::ostream& os, const TensorD& t) { save_tbin_impl(os, t); }

void save_tbin(const std::string& path, const TensorF& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw BadInput("cannot open for writing: " + path);
  save_tbin_impl(os, t);
}

void save_tbin(const std::string& path, const TensorD& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw BadInput("cannot open for writing: " + path);
  save_tbin_impl(os, t);
}

AnyTensor load_tbin(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw BadInput("TBIN: bad magic");
  auto version = read_raw<std::uint32_t>(is);
  if (version != kVersion) throw BadInput("TBIN: unsupported version " + std::to_string(version));
  auto dtype = read_raw<std::uint8_t>(is);
  auto rank = read_raw<std::uint8_t>(is);
  if (rank != 1 && rank != 2 && rank != 4)
    throw BadInput("TBIN: unsupported rank " + std::to_string(rank));
  std::initializer_list<std::int64_t> empty{};
  Shape shape(empty);
  std::vector<std::int64_t> dims;
  for (int i = 0; i < rank; ++i) {
    auto d = read_raw<std::uint64_t>(is);
    if (d == 0 || d > (1ULL << 32)) throw BadInput("TBIN: implausible dim");
    dims.push_back(static_cast<std::int64_t>(d));
  }
  switch (dims.size()) {
    case 1: shape = Shape{dims[0]}; break;
    case 2: shape = Shape{dims[0], dims[1]}; break;
    default: shape = Shape{dims[0], dims[1], dims[2], dims[3]}; break;
  }
  if (dtype == static_cast<std::uint8_t>(DType::Float32)) return read_payload<float>(is, shape);
  if (dtype == static_cast<std::uint8_t>(DType::Float64)) return read_payload<double>(is, shape);
  throw BadInput("TBIN: unknown dtype code " + std::to_string(dtype));
}

AnyTensor load_tbin(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw BadInput("cannot open: " + path);
  return load_tbin(is);
}

DType dtype_of_any(const AnyTensor& t) {
  return std::holds_alternative<TensorF>(t) ? DType::Float32 : DType::Float64;
}

}  // namespace incepkit
