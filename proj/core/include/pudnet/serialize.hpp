#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "pudnet/tensor.hpp"

namespace pudnet {

/// Layout (all integers u32 little-endian):
///   "PUDN" | version | count | count × { name_len | name (UTF-8) | rank | dims[rank] | f32 payload }
inline constexpr char kTensorMagic[4] = {'P', 'U', 'D', 'N'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

void write_named_tensors(std::ostream& os, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> read_named_tensors(std::istream& is);

void save_named_tensors(const std::filesystem::path& path, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> load_named_tensors(const std::filesystem::path& path);

template <class T>
NamedTensor to_named(std::string name, const Tensor<T>& t) {
  NamedTensor nt{std::move(name), t.shape(), {}};
  nt.values.reserve(t.numel());
  for (T v : t.data()) nt.values.push_back(static_cast<float>(v));
  return nt;
}

template <class T>
Tensor<T> from_named(const NamedTensor& nt) {
  std::vector<T> v(nt.values.begin(), nt.values.end());
  return Tensor<T>(nt.shape, std::move(v));
}

namespace io {

// Little-endian primitives shared by the tensor and corpus formats.
void write_u32(std::ostream& os, std::uint32_t v);
void write_f32(std::ostream& os, float v);
void write_string(std::ostream& os, const std::string& s);
std::uint32_t read_u32(std::istream& is, const char* what);
float read_f32(std::istream& is, const char* what);
std::string read_string(std::istream& is, const char* what);
void write_f32_array(std::ostream& os, std::span<const float> values);
void read_f32_array(std::istream& is, std::span<float> out, const char* what);

}  // namespace io

}  // namespace pudnet
