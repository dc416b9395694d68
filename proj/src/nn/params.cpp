// SPDX-License-Identifier: Apache-2.0
#include "cycleadapt/nn/params.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "cycleadapt/error.hpp"

namespace cycleadapt::nn {

void ParamSet::add(std::string name, diff::Tensor value) {
  for (const auto& e : entries_)
    if (e.name == name) throw ConfigError("duplicate parameter '" + name + "'");
  entries_.push_back({std::move(name), std::move(value)});
}

diff::Tensor& ParamSet::at(const std::string& name) {
  for (auto& e : entries_)
    if (e.name == name) return e.value;
  throw ConfigError("no parameter named '" + name + "'");
}

const diff::Tensor& ParamSet::at(const std::string& name) const {
  return const_cast<ParamSet*>(this)->at(name);
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

void ParamSet::bind(diff::Bindings& bindings) const {
  for (const auto& e : entries_) bindings.insert_or_assign(e.name, e.value);
}

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void put_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T get_le(std::istream& in, const std::string& path) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T)))
    throw FormatError("'" + path + "': truncated parameter file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

void save_params(const std::string& path, const Magic& magic, const ParamSet& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(magic.data(), 4);
  put_le<std::uint32_t>(out, kParamFileVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.entries().size()));
  for (const auto& e : params.entries()) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.value.rank()));
    for (std::size_t d : e.value.shape) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  for (const auto& e : params.entries())
    for (double v : e.value.data) put_le<double>(out, v);
  if (!out) throw IoError("write to '" + path + "' failed");
}

void load_params(const std::string& path, const Magic& magic, ParamSet& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  Magic got{};
  if (!in.read(got.data(), 4)) throw FormatError("'" + path + "': truncated parameter file");
  if (got != magic)
    throw FormatError("'" + path + "': bad magic, expected " + std::string(magic.data(), 4));
  const auto version = get_le<std::uint32_t>(in, path);
  if (version != kParamFileVersion)
    throw VersionError("'" + path + "': unsupported parameter file version " + std::to_string(version));
  const auto count = get_le<std::uint32_t>(in, path);
  if (count != params.entries().size())
    throw FormatError("'" + path + "': holds " + std::to_string(count) + " tensors, expected " +
                      std::to_string(params.entries().size()));
  for (const auto& e : params.entries()) {
    const auto rank = get_le<std::uint32_t>(in, path);
    diff::Shape shape(rank);
    for (auto& d : shape) d = get_le<std::uint32_t>(in, path);
    if (shape != e.value.shape)
      throw FormatError("'" + path + "': tensor '" + e.name + "' has shape " + diff::to_string(shape) +
                        ", expected " + diff::to_string(e.value.shape));
  }
  ParamSet loaded = params;
  for (auto& e : loaded.entries())
    for (double& v : e.value.data) v = get_le<double>(in, path);
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("'" + path + "': trailing bytes");
  params = std::move(loaded);
}

}  // namespace cycleadapt::nn
