#include "uformer/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "uformer/error.hpp"

namespace uformer {

namespace io {

namespace {
template <typename U>
void write_le(std::ostream& out, U v) {
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes, sizeof(U));
}

template <typename U>
U read_le(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  read_exact(in, reinterpret_cast<char*>(bytes), sizeof(U));
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}
}  // namespace

void write_u8(std::ostream& out, std::uint8_t v) { out.put(static_cast<char>(v)); }
void write_u32(std::ostream& out, std::uint32_t v) { write_le(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { write_le(out, v); }
std::uint8_t read_u8(std::istream& in) { return read_le<std::uint8_t>(in); }
std::uint32_t read_u32(std::istream& in) { return read_le<std::uint32_t>(in); }
std::uint64_t read_u64(std::istream& in) { return read_le<std::uint64_t>(in); }

void read_exact(std::istream& in, char* dst, std::size_t n) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw FormatError("unexpected end of stream");
}

}  // namespace io

namespace {
constexpr char kMagic[4] = {'U', 'F', 'T', '1'};
constexpr std::uint32_t kMaxRank = 16;
}  // namespace

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t) {
  out.write(kMagic, 4);
  io::write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) io::write_u64(out, static_cast<std::uint64_t>(d));
  io::write_u8(out, static_cast<std::uint8_t>(dtype_of<T>()));
  for (const T v : t.data()) {
    if constexpr (sizeof(T) == 4) {
      io::write_u32(out, std::bit_cast<std::uint32_t>(v));
    } else {
      io::write_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  if (!out) throw FormatError("failed writing tensor");
}

template <typename T>
Tensor<T> read_tensor(std::istream& in) {
  char magic[4];
  io::read_exact(in, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad tensor magic (expected UFT1)");
  const auto rank = io::read_u32(in);
  if (rank > kMaxRank) throw FormatError("tensor rank " + std::to_string(rank) + " exceeds limit");
  Shape shape(rank);
  for (auto& d : shape) {
    const auto v = io::read_u64(in);
    if (v == 0 || v > (std::uint64_t{1} << 40)) throw FormatError("implausible tensor extent " + std::to_string(v));
    d = static_cast<std::int64_t>(v);
  }
  const auto code = io::read_u8(in);
  if (code > 1) throw FormatError("unknown dtype code " + std::to_string(code));
  const auto n = static_cast<std::size_t>(numel(shape));
  std::vector<T> data(n);
  for (auto& v : data) {
    if (code == static_cast<std::uint8_t>(DType::f32)) {
      v = static_cast<T>(std::bit_cast<float>(io::read_u32(in)));
    } else {
      v = static_cast<T>(std::bit_cast<double>(io::read_u64(in)));
    }
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_tensor<T>(in);
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);
template void save_tensor(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::filesystem::path&);
template Tensor<double> load_tensor(const std::filesystem::path&);

}  // namespace uformer
