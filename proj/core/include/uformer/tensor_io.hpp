#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "uformer/tensor.hpp"

namespace uformer {

// "UFT1" binary tensor format: magic, u32 LE rank, rank x u64 LE extents,
// u8 dtype code (0 = f32, 1 = f64), raw LE scalars in row-major order.

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

/// Writes the value (not the gradient) of `t` with its native dtype.
template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t);

/// Reads one tensor, converting from the stored dtype to T when they differ.
template <typename T>
Tensor<T> read_tensor(std::istream& in);

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t);
template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);

// Little-endian primitives shared with the checkpoint format.
namespace io {
void write_u8(std::ostream& out, std::uint8_t v);
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
std::uint8_t read_u8(std::istream& in);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
void read_exact(std::istream& in, char* dst, std::size_t n);
}  // namespace io

}  // namespace uformer
