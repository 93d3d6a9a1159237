#pragma once

// Slow, independent reference implementations used to check the library.
// Nothing here calls into the code paths it is used to verify.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "vib/head_output.hpp"
#include "vib/metrics.hpp"
#include "vib/probe.hpp"
#include "vib/rng.hpp"

namespace vib::oracle {

// O(n^2) pair count.
inline double auroc_pairs(std::span<const double> s, std::span<const int> y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1.0;
      if (s[i] > s[j]) wins += 1.0;
      if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

// Enumerates every distinct score as a threshold "predict positive iff s >= t",
// from high to low, and sums (delta recall) * precision.
inline double ap_thresholds(std::span<const double> s, std::span<const int> y) {
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  double total_pos = 0.0;
  for (int v : y) total_pos += v;
  double prev_recall = 0.0, ap = 0.0;
  for (double t : thresholds) {
    double tp = 0.0, pp = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) {
        pp += 1.0;
        tp += y[i];
      }
    }
    const double recall = tp / total_pos;
    ap += (recall - prev_recall) * (tp / pp);
    prev_recall = recall;
  }
  return ap;
}

struct ChairCounts {
  double chair_i = 0.0;
  double chair_s = 0.0;
};

inline ChairCounts chair_recount(std::span<const metrics::CaptionEval> evals) {
  int mentions = 0, bad_mentions = 0, bad_captions = 0;
  for (const auto& e : evals) {
    bool any = false;
    for (int m : e.mentioned_objects) {
      ++mentions;
      if (std::find(e.ground_truth.begin(), e.ground_truth.end(), m) == e.ground_truth.end()) {
        ++bad_mentions;
        any = true;
      }
    }
    bad_captions += any ? 1 : 0;
  }
  ChairCounts c;
  c.chair_i = mentions ? static_cast<double>(bad_mentions) / mentions : 0.0;
  c.chair_s = evals.empty() ? 0.0 : static_cast<double>(bad_captions) / static_cast<double>(evals.size());
  return c;
}

// Monte-Carlo E_q[log q(z) - log p(z)] for q = N(mu, diag exp(log_var)), p = N(0, I).
inline double kl_monte_carlo(const probe::GaussianPosterior& q, std::size_t samples, Rng& rng) {
  const std::size_t d = q.mu.size();
  double total = 0.0;
  for (std::size_t n = 0; n < samples; ++n) {
    double log_ratio = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double eps = rng.normal();
      const double z = q.mu[i] + std::exp(0.5 * q.log_var[i]) * eps;
      // log q - log p; the 2 pi terms cancel.
      log_ratio += -0.5 * q.log_var[i] - 0.5 * eps * eps + 0.5 * z * z;
    }
    total += log_ratio;
  }
  return total / static_cast<double>(samples);
}

// Central differences of the VIB loss with respect to every trainable parameter.
inline std::vector<Tensor> vib_loss_numeric_grads(const probe::Batch& batch,
                                                  const probe::ProbeParams& params, double beta,
                                                  const Tensor& noise, bool kl_enabled,
                                                  double h = 1e-5) {
  probe::ProbeParams work = params;
  std::vector<Tensor> grads;
  const auto ps = work.parameters();
  for (Tensor* p : ps) {
    Tensor g(p->shape());
    for (std::size_t j = 0; j < p->size(); ++j) {
      const double x0 = (*p)[j];
      (*p)[j] = x0 + h;
      const double up = probe::vib_loss(batch, work, beta, noise, kl_enabled).loss;
      (*p)[j] = x0 - h;
      const double down = probe::vib_loss(batch, work, beta, noise, kl_enabled).loss;
      (*p)[j] = x0;
      g[j] = (up - down) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

// Central differences of the deterministic risk logit with respect to the input.
inline std::vector<double> logit_numeric_grad(const HeadOutputTensor& v,
                                              const probe::ProbeParams& params, double h = 1e-5) {
  HeadOutputTensor work = v;
  std::vector<double> g(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) {
    const double x0 = work.values[j];
    work.values[j] = x0 + h;
    const double up = probe::infer_logit(work, params).logit;
    work.values[j] = x0 - h;
    const double down = probe::infer_logit(work, params).logit;
    work.values[j] = x0;
    g[j] = (up - down) / (2.0 * h);
  }
  return g;
}

// ds/dalpha for one head, by scaling that head's slice of the input.
inline double head_scale_derivative(const HeadOutputTensor& v, const probe::ProbeParams& params,
                                    std::size_t layer, std::size_t head, double h = 1e-5) {
  auto scaled = [&](double alpha) {
    HeadOutputTensor w = v;
    for (double& x : w.head(layer, head)) x *= alpha;
    return probe::infer_logit(w, params).logit;
  };
  return (scaled(1.0 + h) - scaled(1.0 - h)) / (2.0 * h);
}

inline double rel_err(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

}  // namespace vib::oracle
