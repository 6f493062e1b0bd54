// Copyright 2026 The NiT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Core>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace nit {

// Row-major so that one row is one token.
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

// Raised whenever an input violates a documented precondition.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised for malformed on-disk artifacts.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}

template <typename... Args>
void require(bool cond, Args&&... args) {
  if (!cond) throw ValidationError(concat(std::forward<Args>(args)...));
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    if (!std::isfinite(m.data()[i])) return false;
  }
  return true;
}

// Little-endian primitives used by both on-disk formats.
template <typename U>
void write_le(std::ostream& os, U value) {
  static_assert(std::is_integral_v<U> || std::is_floating_point_v<U>);
  using Bits = std::conditional_t<sizeof(U) == 2, std::uint16_t,
               std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>>;
  Bits bits = std::bit_cast<Bits>(value);
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    buf[i] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
  }
  os.write(buf, sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  using Bits = std::conditional_t<sizeof(U) == 2, std::uint16_t,
               std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>>;
  unsigned char buf[sizeof(U)];
  is.read(reinterpret_cast<char*>(buf), sizeof(U));
  if (!is) throw FormatError("unexpected end of stream");
  Bits bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bits |= static_cast<Bits>(static_cast<Bits>(buf[i]) << (8 * i));
  }
  return std::bit_cast<U>(bits);
}

inline void write_magic(std::ostream& os, std::string_view magic) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& is, std::string_view magic) {
  std::string got(magic.size(), '\0');
  is.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (!is || got != magic) {
    throw FormatError(concat("bad magic, expected ", magic));
  }
}

}  // namespace detail

// Casts every element; used to lift float data into the 64-bit check path.
template <typename To, typename From>
Matrix<To> cast_matrix(const Matrix<From>& m) {
  return m.template cast<To>();
}

}  // namespace nit
