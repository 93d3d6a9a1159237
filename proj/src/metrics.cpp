#include "vib/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "vib/capture.hpp"
#include "vib/error.hpp"
#include "vib/probe.hpp"

namespace vib::metrics {
namespace {

void check_pairs(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw ShapeError("metrics: " + std::to_string(scores.size()) + " scores but " +
                     std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw DataError("metrics: labels must be 0 or 1");
  }
}

std::vector<std::size_t> order_by_score(std::span<const double> scores, bool descending) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return descending ? scores[a] > scores[b] : scores[a] < scores[b];
  });
  return idx;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
  check_pairs(scores, labels);
  const auto positives = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double negatives = static_cast<double>(labels.size()) - positives;
  if (positives == 0 || negatives == 0) throw DataError("auroc: needs both classes");

  // Mann-Whitney U from mid-ranks.
  const auto idx = order_by_score(scores, false);
  double positive_rank_sum = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]] == 1) positive_rank_sum += mid_rank;
    }
    i = j;
  }
  const double u = positive_rank_sum - positives * (positives + 1.0) / 2.0;
  return u / (positives * negatives);
}

double auprc(std::span<const double> scores, std::span<const int> labels) {
  check_pairs(scores, labels);
  const auto positives = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  if (positives == 0) throw DataError("auprc: needs at least one positive");

  const auto idx = order_by_score(scores, true);
  double tp = 0.0, fp = 0.0, prev_recall = 0.0, area = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] == 1 ? tp : fp) += 1.0;
      ++j;
    }
    const double recall = tp / positives;
    area += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
    i = j;
  }
  return area;
}

AccuracyF1 accuracy_f1(std::span<const double> scores, std::span<const int> labels,
                       double threshold) {
  check_pairs(scores, labels);
  if (scores.empty()) throw DataError("accuracy_f1: empty input");
  double tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    if (predicted) {
      (labels[i] == 1 ? tp : fp) += 1;
    } else {
      (labels[i] == 1 ? fn : tn) += 1;
    }
  }
  AccuracyF1 r;
  r.accuracy = (tp + tn) / static_cast<double>(scores.size());
  r.f1 = (tp + fp) == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
  return r;
}

ChairResult chair(std::span<const CaptionEval> evals) {
  if (evals.empty()) throw DataError("chair: no captions");
  ChairResult r;
  r.captions = evals.size();
  for (const CaptionEval& e : evals) {
    std::vector<int> truth = e.ground_truth;
    std::sort(truth.begin(), truth.end());
    bool any = false;
    for (int o : e.mentioned_objects) {
      ++r.mentions;
      if (!std::binary_search(truth.begin(), truth.end(), o)) {
        ++r.hallucinated_mentions;
        any = true;
      }
    }
    r.hallucinated_captions += any ? 1 : 0;
  }
  if (r.mentions > 0) {
    r.chair_i = static_cast<double>(r.hallucinated_mentions) / static_cast<double>(r.mentions);
  }
  r.chair_s = static_cast<double>(r.hallucinated_captions) / static_cast<double>(r.captions);
  return r;
}

GapReport generalization_gap(const probe::ProbeParams& probe,
                             const capture::FeatureDataset& in_domain,
                             const capture::FeatureDataset& shifted) {
  GapReport r;
  const auto in_scores = probe::score_dataset(in_domain, probe);
  const auto out_scores = probe::score_dataset(shifted, probe);
  r.auprc_in = auprc(in_scores.logits, in_scores.labels);
  r.auprc_out = auprc(out_scores.logits, out_scores.labels);
  r.gap = r.auprc_in - r.auprc_out;
  return r;
}

}  // namespace vib::metrics
