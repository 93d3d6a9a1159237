#include "vib/mitigation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "vib/error.hpp"
#include "vib/tape.hpp"

namespace vib::mitigation {

HeadAttribution head_gradients(const HeadOutputTensor& v, const probe::ProbeParams& params) {
  const probe::ProbeDims& d = params.dims;
  if (v.layers != d.layers || v.heads != d.heads || v.head_dim != d.head_dim ||
      v.values.size() != d.input_size()) {
    throw ShapeError("head_gradients: tensor " + std::to_string(v.layers) + "x" +
                     std::to_string(v.heads) + "x" + std::to_string(v.head_dim) +
                     " does not match probe input " + std::to_string(d.layers) + "x" +
                     std::to_string(d.heads) + "x" + std::to_string(d.head_dim));
  }
  Tape tape;
  probe::ProbeVars pv = probe::bind(tape, params, false);
  Var input = tape.leaf(Tensor({1, v.size()}, v.values));
  Var s = probe::risk_logits(pv, probe::posterior(pv, probe::encode(pv, input)).mu);
  Gradients grads = tape.backward(s);

  HeadAttribution out;
  out.logit = s.value().item();
  out.grads = HeadOutputTensor(v.layers, v.heads, v.head_dim);
  const auto g = grads.of(input).data();
  std::copy(g.begin(), g.end(), out.grads.values.begin());
  return out;
}

HeadSensitivity sensitivities(const HeadOutputTensor& v, const HeadOutputTensor& grads) {
  if (!v.same_dims(grads)) throw ShapeError("sensitivities: gradient dims differ from head outputs");
  HeadSensitivity s;
  s.layers = v.layers;
  s.heads = v.heads;
  for (std::size_t l = 0; l < v.layers; ++l) {
    for (std::size_t h = 0; h < v.heads; ++h) {
      const auto o = v.head(l, h);
      const auto g = grads.head(l, h);
      const double dot = std::inner_product(g.begin(), g.end(), o.begin(), 0.0);
      s.dot.push_back(dot);
      s.importance.push_back(std::abs(dot));
    }
  }
  return s;
}

void MitigationConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("mitigation: lambda must be >= 0");
  if (!(top_fraction > 0.0 && top_fraction <= 1.0)) {
    throw ConfigError("mitigation: top fraction must lie in (0, 1]");
  }
  if (fallback_k < 1) throw ConfigError("mitigation: fallback_k must be >= 1");
}

std::vector<HeadIndex> select_heads(const HeadSensitivity& sens, const MitigationConfig& cfg) {
  cfg.validate();
  const std::size_t total = sens.importance.size();
  if (total == 0) throw DataError("select_heads: empty sensitivity table");
  // Guard the ceiling against representation error, e.g. 0.1 * 30.
  const double raw = cfg.top_fraction * static_cast<double>(total);
  auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  k = std::min(total, std::max(k, cfg.fallback_k));

  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (sens.importance[a] != sens.importance[b]) {
                        return sens.importance[a] > sens.importance[b];
                      }
                      return a < b;
                    });
  std::vector<HeadIndex> out;
  for (std::size_t i = 0; i < k; ++i) {
    out.push_back({static_cast<std::uint32_t>(idx[i] / sens.heads),
                   static_cast<std::uint32_t>(idx[i] % sens.heads)});
  }
  return out;
}

SuppressionPlan suppression_plan(const HeadSensitivity& sens, std::span<const HeadIndex> selected,
                                 double lambda) {
  if (lambda < 0.0) throw ConfigError("suppression_plan: lambda must be >= 0");
  SuppressionPlan plan;
  plan.alpha = Tensor({sens.layers, sens.heads}, 1.0);
  plan.selected.assign(selected.begin(), selected.end());
  plan.lambda = lambda;
  for (const HeadIndex& k : selected) {
    if (k.layer >= sens.layers || k.head >= sens.heads) {
      throw ShapeError("suppression_plan: head index out of range");
    }
    plan.alpha(k.layer, k.head) = 1.0 - lambda * std::max(0.0, sens.dot_at(k.layer, k.head));
  }
  return plan;
}

GuardedResult guarded_decode(const toyvlm::ToyModel& model, const probe::ProbeParams& probe,
                             const toyvlm::SceneSpec& scene, const MitigationConfig& cfg, Rng& rng,
                             const toyvlm::DecodeOptions& opts) {
  cfg.validate();
  const toyvlm::ModelConfig& mc = model.config;
  std::vector<int> tokens = toyvlm::encode_prompt(mc, scene);
  GuardedResult result;
  int step = 0;
  while (tokens.size() < static_cast<std::size_t>(mc.max_seq)) {
    toyvlm::DecodeStep ds;
    ds.step_index = step;
    {
      Tape tape(false);
      toyvlm::ForwardResult fr = toyvlm::forward(tape, model, tokens);
      const Tensor& logits = fr.logits.value();
      const std::size_t v = logits.cols();
      ds.logits = Tensor({1, v}, std::vector<double>(logits.data().end() - static_cast<std::ptrdiff_t>(v),
                                                     logits.data().end()));
      ds.head_outputs = std::move(fr.last_heads);
    }
    ds.sampled_token = toyvlm::pick_token(ds.logits, opts, rng);

    HeadAttribution attr = head_gradients(ds.head_outputs, probe);
    if (attr.logit > cfg.tau) {
      const HeadSensitivity sens = sensitivities(ds.head_outputs, attr.grads);
      const std::vector<HeadIndex> selected = select_heads(sens, cfg);
      SuppressionPlan plan = suppression_plan(sens, selected, cfg.lambda);

      InterventionRecord rec;
      rec.scene_id = scene.scene_id;
      rec.step = step;
      rec.logit = attr.logit;
      rec.tau = cfg.tau;
      rec.k_size = selected.size();
      rec.token_before = ds.sampled_token;
      double alpha_sum = 0.0;
      rec.alpha_min = 1.0;
      for (const HeadIndex& k : selected) {
        rec.alpha_min = std::min(rec.alpha_min, plan.alpha(k.layer, k.head));
        alpha_sum += plan.alpha(k.layer, k.head);
      }
      rec.alpha_mean = alpha_sum / static_cast<double>(selected.size());

      toyvlm::HeadScaling scaling{std::move(plan.alpha), tokens.size() - 1};
      Tape tape(false);
      toyvlm::ForwardResult fr = toyvlm::forward(tape, model, tokens, &scaling);
      const Tensor& logits = fr.logits.value();
      const std::size_t v = logits.cols();
      ds.logits = Tensor({1, v}, std::vector<double>(logits.data().end() - static_cast<std::ptrdiff_t>(v),
                                                     logits.data().end()));
      ds.sampled_token = toyvlm::pick_token(ds.logits, opts, rng);
      rec.token_after = ds.sampled_token;
      result.interventions.push_back(rec);
    }

    tokens.push_back(ds.sampled_token);
    result.steps.push_back(std::move(ds));
    ++step;
    if (tokens.back() == toyvlm::kEos) break;
  }
  return result;
}

double calibrate_tau(const capture::FeatureDataset& train, const probe::ProbeParams& probe) {
  if (train.count() == 0) throw DataError("calibrate_tau: empty training set");
  const probe::DatasetScores scores = probe::score_dataset(train, probe);
  double total = 0.0;
  for (double s : scores.logits) total += s;
  return total / static_cast<double>(scores.logits.size());
}

}  // namespace vib::mitigation
