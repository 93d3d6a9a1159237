#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vib/head_output.hpp"
#include "vib/rng.hpp"
#include "vib/toyvlm.hpp"

namespace vib::capture {

struct LabeledExample {
  HeadOutputTensor features;
  std::uint8_t y = 0;  // 1 = hallucination
  std::uint64_t scene_id = 0;
  std::uint32_t step_index = 0;
  bool operator==(const LabeledExample&) const = default;
};

// Header flag layout: bits 0-31 hold the positive-example count, bit 32 marks
// last-token-only collection, bit 33 marks a distribution-shifted scene pool.
inline constexpr std::uint64_t kFlagLastTokenOnly = 1ULL << 32;
inline constexpr std::uint64_t kFlagShifted = 1ULL << 33;
inline constexpr std::uint64_t kPositiveCountMask = 0xffffffffULL;

struct FeatureDataset {
  std::uint32_t layers = 0;
  std::uint32_t heads = 0;
  std::uint32_t head_dim = 0;
  std::uint64_t flags = 0;
  std::vector<LabeledExample> examples;

  std::size_t count() const { return examples.size(); }
  std::size_t feature_size() const { return static_cast<std::size_t>(layers) * heads * head_dim; }
  std::size_t positives() const;
  // Recomputes the positive count stored in the low flag bits.
  void refresh_flags();
  // Throws ShapeError if any example's dims differ from the header.
  void check() const;
  bool operator==(const FeatureDataset&) const = default;
};

struct CollectOptions {
  // Keep only the final object token of each generation.
  bool last_token_only = false;
  bool shifted = false;
  toyvlm::DecodeOptions decode;
};

// Decodes every scene, labels emitted object tokens against the scene, and
// keeps one example per labeled token, ordered by (scene_id, step_index).
FeatureDataset collect(const toyvlm::ToyModel& model, std::span<const toyvlm::SceneSpec> scenes,
                       Rng& rng, const CollectOptions& opts = {});

// 1-based inclusive layer range.
struct LayerWindow {
  std::uint32_t lo = 1;
  std::uint32_t hi = 1;
};

// Parses "lo:hi".
LayerWindow parse_window(const std::string& text);

FeatureDataset slice_layers(const FeatureDataset& ds, LayerWindow w);

void write_dataset(const FeatureDataset& ds, const std::string& path);
void write_dataset(const FeatureDataset& ds, std::ostream& out);
FeatureDataset read_dataset(const std::string& path);
FeatureDataset read_dataset(std::istream& in);

// Random partition into (train, valid). With group_by_scene every scene lands
// wholly on one side. Relative order is preserved on each side.
std::pair<FeatureDataset, FeatureDataset> split(const FeatureDataset& ds, double train_frac,
                                                Rng& rng, bool group_by_scene = true);

}  // namespace vib::capture
