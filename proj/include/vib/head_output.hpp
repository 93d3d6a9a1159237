#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace vib {

// Snapshot of every pre-projection attention head output o^{l,h} at one
// decoding step, laid out layer-major: values[(l * heads + h) * head_dim + i].
struct HeadOutputTensor {
  std::uint32_t layers = 0;
  std::uint32_t heads = 0;
  std::uint32_t head_dim = 0;
  std::vector<double> values;

  HeadOutputTensor() = default;
  HeadOutputTensor(std::uint32_t l, std::uint32_t h, std::uint32_t d)
      : layers(l), heads(h), head_dim(d), values(static_cast<std::size_t>(l) * h * d, 0.0) {}

  std::size_t size() const { return values.size(); }
  std::size_t offset(std::size_t layer, std::size_t head) const {
    return (layer * heads + head) * head_dim;
  }
  std::span<double> head(std::size_t layer, std::size_t head) {
    return std::span<double>(values).subspan(offset(layer, head), head_dim);
  }
  std::span<const double> head(std::size_t layer, std::size_t head) const {
    return std::span<const double>(values).subspan(offset(layer, head), head_dim);
  }
  bool same_dims(const HeadOutputTensor& o) const {
    return layers == o.layers && heads == o.heads && head_dim == o.head_dim;
  }
  bool operator==(const HeadOutputTensor&) const = default;
};

}  // namespace vib
