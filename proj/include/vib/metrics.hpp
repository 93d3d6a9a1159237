#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace vib::capture {
struct FeatureDataset;
}
namespace vib::probe {
struct ProbeParams;
}

namespace vib::metrics {

// Probability that a random positive scores above a random negative, ties
// counted as one half. Throws DataError unless both classes are present.
double auroc(std::span<const double> scores, std::span<const int> labels);

// Average precision: sum over descending score thresholds of
// (recall_k - recall_{k-1}) * precision_k. Equal scores form one threshold.
// Throws DataError when there are no positives.
double auprc(std::span<const double> scores, std::span<const int> labels);

struct AccuracyF1 {
  double accuracy = 0.0;
  double f1 = 0.0;
};

// Predicts positive when score >= threshold. F1 is 0 when nothing is
// predicted positive.
AccuracyF1 accuracy_f1(std::span<const double> scores, std::span<const int> labels,
                       double threshold);

struct CaptionEval {
  std::vector<int> mentioned_objects;  // multiset, in mention order
  std::vector<int> ground_truth;       // present objects
};

struct ChairResult {
  std::optional<double> chair_i;  // absent when no objects were mentioned
  double chair_s = 0.0;
  std::size_t mentions = 0;
  std::size_t hallucinated_mentions = 0;
  std::size_t captions = 0;
  std::size_t hallucinated_captions = 0;
};

// CHAIR_i = hallucinated mentions / all mentions (repeats count each time);
// CHAIR_s = captions with at least one hallucinated mention / all captions.
ChairResult chair(std::span<const CaptionEval> evals);

struct GapReport {
  double auprc_in = 0.0;
  double auprc_out = 0.0;
  double gap = 0.0;
};

// AUPRC of the probe's risk logits on each dataset and their difference.
GapReport generalization_gap(const probe::ProbeParams& probe,
                             const capture::FeatureDataset& in_domain,
                             const capture::FeatureDataset& shifted);

}  // namespace vib::metrics
