#include "pudnet/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "pudnet/errors.hpp"

namespace pudnet {

namespace io {

namespace {
// Guards against absurd allocations when reading corrupt headers.
constexpr std::uint32_t kMaxNameLength = 1u << 16;
constexpr std::uint32_t kMaxRank = 8;
}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_f32(std::ostream& os, float v) { write_u32(os, std::bit_cast<std::uint32_t>(v)); }

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw FormatError(std::string("truncated file while reading ") + what);
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

float read_f32(std::istream& is, const char* what) {
  return std::bit_cast<float>(read_u32(is, what));
}

std::string read_string(std::istream& is, const char* what) {
  const std::uint32_t n = read_u32(is, what);
  if (n > kMaxNameLength) throw FormatError(std::string("implausible string length for ") + what);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw FormatError(std::string("truncated file while reading ") + what);
  return s;
}

void write_f32_array(std::ostream& os, std::span<const float> values) {
  std::vector<unsigned char> buf(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t v = std::bit_cast<std::uint32_t>(values[i]);
    buf[4 * i] = static_cast<unsigned char>(v);
    buf[4 * i + 1] = static_cast<unsigned char>(v >> 8);
    buf[4 * i + 2] = static_cast<unsigned char>(v >> 16);
    buf[4 * i + 3] = static_cast<unsigned char>(v >> 24);
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void read_f32_array(std::istream& is, std::span<float> out, const char* what) {
  std::vector<unsigned char> buf(out.size() * 4);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw FormatError(std::string("truncated payload for ") + what);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint32_t v = static_cast<std::uint32_t>(buf[4 * i]) |
                            (static_cast<std::uint32_t>(buf[4 * i + 1]) << 8) |
                            (static_cast<std::uint32_t>(buf[4 * i + 2]) << 16) |
                            (static_cast<std::uint32_t>(buf[4 * i + 3]) << 24);
    out[i] = std::bit_cast<float>(v);
  }
}

}  // namespace io

void write_named_tensors(std::ostream& os, std::span<const NamedTensor> tensors) {
  os.write(kTensorMagic, 4);
  io::write_u32(os, kTensorFormatVersion);
  io::write_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (shape_numel(t.shape) != t.values.size()) {
      throw DimensionError("tensor '" + t.name + "' payload does not match its shape");
    }
    io::write_string(os, t.name);
    io::write_u32(os, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) io::write_u32(os, static_cast<std::uint32_t>(d));
    io::write_f32_array(os, t.values);
  }
  if (!os) throw FormatError("failed writing named tensors");
}

std::vector<NamedTensor> read_named_tensors(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kTensorMagic, 4) != 0) {
    throw FormatError("bad magic: not a PUDN tensor file");
  }
  const std::uint32_t version = io::read_u32(is, "version");
  if (version != kTensorFormatVersion) {
    throw FormatError("unsupported tensor format version " + std::to_string(version));
  }
  const std::uint32_t count = io::read_u32(is, "tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = io::read_string(is, "tensor name");
    const std::uint32_t rank = io::read_u32(is, "rank");
    if (rank > io::kMaxRank) throw FormatError("implausible rank for tensor '" + t.name + "'");
    std::uint64_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const std::uint32_t d = io::read_u32(is, "dims");
      if (d == 0) throw FormatError("zero dimension in tensor '" + t.name + "'");
      t.shape.push_back(d);
      n *= d;
      if (n > (1ull << 32)) throw FormatError("implausible size for tensor '" + t.name + "'");
    }
    t.values.resize(n);
    io::read_f32_array(is, t.values, t.name.c_str());
    out.push_back(std::move(t));
  }
  return out;
}

void save_named_tensors(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_named_tensors(os, tensors);
}

std::vector<NamedTensor> load_named_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("cannot open " + path.string());
  return read_named_tensors(is);
}

}  // namespace pudnet
