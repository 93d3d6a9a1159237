#pragma once

#include <compare>
#include <cstdint>
#include <span>
#include <vector>

#include "vib/capture.hpp"
#include "vib/head_output.hpp"
#include "vib/probe.hpp"
#include "vib/toyvlm.hpp"

namespace vib::mitigation {

struct HeadAttribution {
  double logit = 0.0;
  HeadOutputTensor grads;  // g^{l,h} = ds/do^{l,h}, same layout as the input
};

// Backward pass through the frozen probe along the deterministic path
// s = w^T mu + b. The probe is only read.
HeadAttribution head_gradients(const HeadOutputTensor& v, const probe::ProbeParams& params);

struct HeadSensitivity {
  std::uint32_t layers = 0;
  std::uint32_t heads = 0;
  std::vector<double> dot;         // <g^{l,h}, o^{l,h}> = ds/dalpha^{l,h} at alpha = 1
  std::vector<double> importance;  // |dot|

  double dot_at(std::size_t l, std::size_t h) const { return dot[l * heads + h]; }
  double importance_at(std::size_t l, std::size_t h) const { return importance[l * heads + h]; }
};

HeadSensitivity sensitivities(const HeadOutputTensor& v, const HeadOutputTensor& grads);

struct HeadIndex {
  std::uint32_t layer = 0;
  std::uint32_t head = 0;
  auto operator<=>(const HeadIndex&) const = default;
};

struct MitigationConfig {
  double tau = 0.0;
  // Desk-scale strength: the median alpha of heads that get scaled is about
  // 0.7 on the default toy pipeline.
  double lambda = 0.1;
  double top_fraction = 0.05;
  std::size_t fallback_k = 1;

  // Suppression strength used in the original large-model setting.
  static constexpr double kLargeModelLambda = 0.001;
  void validate() const;
};

// The max(fallback_k, ceil(top_fraction * L * H)) heads with the largest
// importance; ties go to the lower (layer, head). Returned in rank order.
std::vector<HeadIndex> select_heads(const HeadSensitivity& sens, const MitigationConfig& cfg);

struct SuppressionPlan {
  Tensor alpha;  // layers x heads
  std::vector<HeadIndex> selected;
  double lambda = 0.0;
};

// alpha = 1 - lambda * ReLU(dot) for selected heads, 1 elsewhere.
SuppressionPlan suppression_plan(const HeadSensitivity& sens, std::span<const HeadIndex> selected,
                                 double lambda);

struct InterventionRecord {
  std::uint64_t scene_id = 0;
  int step = 0;
  double logit = 0.0;
  double tau = 0.0;
  std::size_t k_size = 0;
  double alpha_min = 1.0;
  double alpha_mean = 1.0;  // over selected heads
  int token_before = 0;
  int token_after = 0;
};

struct GuardedResult {
  std::vector<toyvlm::DecodeStep> steps;
  std::vector<InterventionRecord> interventions;
};

// Decodes like toyvlm::decode, scoring every step with the probe. When the risk
// logit exceeds tau, the step is recomputed once with the suppression plan
// applied at the current position and the regenerated token is emitted.
GuardedResult guarded_decode(const toyvlm::ToyModel& model, const probe::ProbeParams& probe,
                             const toyvlm::SceneSpec& scene, const MitigationConfig& cfg, Rng& rng,
                             const toyvlm::DecodeOptions& opts = {});

// Mean risk logit over the training examples. Throws DataError when empty.
double calibrate_tau(const capture::FeatureDataset& train, const probe::ProbeParams& probe);

}  // namespace vib::mitigation
