// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cycleadapt/diff/graph.hpp"

namespace cycleadapt::nn {

struct NamedTensor {
  std::string name;
  diff::Tensor value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Trainable tensors in declaration order. Names double as graph leaf names.
class ParamSet {
 public:
  void add(std::string name, diff::Tensor value);

  diff::Tensor& at(const std::string& name);
  const diff::Tensor& at(const std::string& name) const;

  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<NamedTensor>& entries() { return entries_; }

  std::size_t scalar_count() const;

  /// Adds every parameter to the bindings under its own name.
  void bind(diff::Bindings& bindings) const;

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::vector<NamedTensor> entries_;
};

using Magic = std::array<char, 4>;
inline constexpr std::uint32_t kParamFileVersion = 1;

/// Binary layout: magic, u32 version, u32 tensor count, then per tensor u32
/// rank and u32 dims, then every value as a little-endian IEEE double in
/// declaration order.
void save_params(const std::string& path, const Magic& magic, const ParamSet& params);

/// Reads a file written by save_params into `params`, whose names and shapes
/// must match the file layout.
void load_params(const std::string& path, const Magic& magic, ParamSet& params);

}  // namespace cycleadapt::nn
