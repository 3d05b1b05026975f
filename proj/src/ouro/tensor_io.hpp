#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ouro/tensor.hpp"

namespace ouro {

// Binary tensor container: "OURO" magic, u32 version, u32 rank, u64 dims,
// u32 dtype, then the payload. All fields and f64 payloads little-endian.
// Packed 4-bit payloads hold two's-complement nibbles in row-major element
// order, low nibble first; a trailing odd element leaves the high nibble 0.
enum class Dtype : std::uint32_t { F64 = 0, I8 = 1, U4 = 2 };

constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor_f64(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor_f64(const std::filesystem::path& path);

void write_tensor_i8(const std::filesystem::path& path, const Shape& shape,
                     const std::vector<std::int8_t>& v);
std::pair<Shape, std::vector<std::int8_t>> read_tensor_i8(const std::filesystem::path& path);

// `codes` are unpacked int4 values in [-8, 7]; packing happens here.
void write_tensor_u4(const std::filesystem::path& path, const Shape& shape,
                     const std::vector<std::int8_t>& codes);
std::pair<Shape, std::vector<std::int8_t>> read_tensor_u4(const std::filesystem::path& path);

// Peek at header without loading the payload.
struct TensorFileInfo {
    Shape shape;
    Dtype dtype;
};
TensorFileInfo tensor_file_info(const std::filesystem::path& path);

// All output files go through a temp-file + rename so a crash never leaves a
// half-written artifact at the destination path.
void atomic_write_bytes(const std::filesystem::path& path, const void* data, std::size_t size);
void atomic_write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace ouro
