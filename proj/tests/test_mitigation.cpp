#include <algorithm>
#include <cmath>
#include <limits>

#include "doctest.h"
#include "oracles.hpp"
#include "vib/error.hpp"
#include "vib/mitigation.hpp"

using namespace vib;
using namespace vib::mitigation;

namespace {

probe::ProbeDims dims(std::uint32_t layers, std::uint32_t heads, std::uint32_t head_dim) {
  probe::ProbeDims d;
  d.layers = layers;
  d.heads = heads;
  d.head_dim = head_dim;
  d.encoder = {8, 6, 5};
  d.d_z = 3;
  return d;
}

probe::ProbeParams zeroed(const probe::ProbeDims& d) {
  Rng rng(0);
  probe::ProbeParams p = probe::ProbeParams::init(d, rng);
  for (Tensor* t : p.parameters()) std::fill(t->storage().begin(), t->storage().end(), 0.0);
  for (auto& b : p.blocks) std::fill(b.ln_gain.storage().begin(), b.ln_gain.storage().end(), 1.0);
  return p;
}

// s = GELU(GELU(GELU(v[input]))) + bias: a chain through one unit of every layer.
probe::ProbeParams single_input_probe(const probe::ProbeDims& d, std::size_t input, double bias) {
  probe::ProbeParams p = zeroed(d);
  p.enc_w[0](input, 0) = 1.0;
  p.enc_w[1](0, 0) = 1.0;
  p.enc_w[2](0, 0) = 1.0;
  p.post_w(0, 0) = 1.0;
  p.cls_w(0, 0) = 1.0;
  p.cls_b(0, 0) = bias;
  return p;
}

probe::ProbeParams random_probe(const probe::ProbeDims& d, Rng& rng) {
  probe::ProbeParams p = probe::ProbeParams::init(d, rng);
  for (Tensor* t : p.parameters()) {
    for (double& x : t->storage()) x += 0.1 * rng.normal();
  }
  return p;
}

HeadOutputTensor random_heads(const probe::ProbeDims& d, Rng& rng) {
  HeadOutputTensor v(d.layers, d.heads, d.head_dim);
  for (double& x : v.values) x = rng.normal();
  return v;
}

HeadSensitivity table(std::uint32_t layers, std::uint32_t heads, std::vector<double> dots) {
  HeadSensitivity s;
  s.layers = layers;
  s.heads = heads;
  s.dot = dots;
  for (double x : dots) s.importance.push_back(std::abs(x));
  return s;
}

}  // namespace

TEST_CASE("attribution gradients") {
  const auto d = dims(2, 2, 3);
  Rng rng(1);
  const HeadOutputTensor v = random_heads(d, rng);

  SUBCASE("zero classifier weights give zero gradients") {
    probe::ProbeParams p = random_probe(d, rng);
    p.cls_w = Tensor(p.cls_w.shape());
    for (double g : head_gradients(v, p).grads.values) CHECK(g == 0.0);
  }
  SUBCASE("a probe reading one coordinate has gradient only there") {
    const probe::ProbeParams p = single_input_probe(d, 0, 0.0);
    const HeadAttribution a = head_gradients(v, p);
    CHECK(a.grads.values[0] != 0.0);
    for (std::size_t i = 1; i < a.grads.size(); ++i) CHECK(a.grads.values[i] == 0.0);
    CHECK(a.logit == doctest::Approx(probe::infer_logit(v, p).logit).epsilon(1e-15));
  }
  SUBCASE("gradients match finite differences") {
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const probe::ProbeParams p = random_probe(d, rng);
      const HeadOutputTensor x = random_heads(d, rng);
      const HeadAttribution a = head_gradients(x, p);
      const auto numeric = oracle::logit_numeric_grad(x, p);
      for (std::size_t i = 0; i < numeric.size(); ++i) worst = std::max(worst, oracle::rel_err(a.grads.values[i], numeric[i]));
    }
    CHECK(worst < 1e-4);
  }
  SUBCASE("dimension mismatch rejected") {
    const probe::ProbeParams p = random_probe(d, rng);
    CHECK_THROWS_AS(head_gradients(HeadOutputTensor(2, 2, 2), p), ShapeError);
  }
}

TEST_CASE("sensitivity values") {
  HeadOutputTensor o(1, 2, 2), g(1, 2, 2);
  o.values = {3, 4, 0, 0};
  g.values = {1, 2, 5, 6};
  const HeadSensitivity s = sensitivities(o, g);
  CHECK(s.dot_at(0, 0) == 11.0);
  CHECK(s.importance_at(0, 0) == 11.0);
  CHECK(s.dot_at(0, 1) == 0.0);
  g.values = {-1, -2, 0, 0};
  CHECK(sensitivities(o, g).importance_at(0, 0) == 11.0);
  CHECK_THROWS_AS(sensitivities(o, HeadOutputTensor(1, 1, 2)), ShapeError);
}

TEST_CASE("dot product equals the derivative along alpha") {
  Rng rng(2);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto d = dims(2 + static_cast<std::uint32_t>(rng.uniform_int(2)), 2, 3);
    const probe::ProbeParams p = random_probe(d, rng);
    const HeadOutputTensor v = random_heads(d, rng);
    const HeadSensitivity s = sensitivities(v, head_gradients(v, p).grads);
    for (std::size_t l = 0; l < d.layers; ++l) {
      for (std::size_t h = 0; h < d.heads; ++h) {
        worst = std::max(worst, oracle::rel_err(s.dot_at(l, h), oracle::head_scale_derivative(v, p, l, h)));
      }
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("head selection") {
  MitigationConfig cfg;
  SUBCASE("ceiling of 5% of 16 heads is one") {
    const auto s = table(4, 4, {0, 0, 0, 0, 0, 0, 7, 0, 0, 0, 0, 0, 0, 0, 0, 0});
    CHECK(select_heads(s, cfg) == std::vector<HeadIndex>{{1, 2}});
  }
  SUBCASE("fraction boundaries") {
    const auto s = table(5, 6, std::vector<double>(30, 1.0));
    cfg.top_fraction = 0.1;  // 0.1 * 30 is 3 up to rounding
    CHECK(select_heads(s, cfg).size() == 3);
    cfg.top_fraction = 0.11;
    CHECK(select_heads(s, cfg).size() == 4);
    cfg.top_fraction = 1.0;
    CHECK(select_heads(s, cfg).size() == 30);
  }
  SUBCASE("ties go to the lexicographically first heads") {
    const auto s = table(2, 3, std::vector<double>(6, -2.0));
    cfg.top_fraction = 0.5;
    CHECK(select_heads(s, cfg) == std::vector<HeadIndex>{{0, 0}, {0, 1}, {0, 2}});
  }
  SUBCASE("matches a full sort on random tables") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
      const auto layers = 1 + static_cast<std::uint32_t>(rng.uniform_int(5));
      const auto heads = 1 + static_cast<std::uint32_t>(rng.uniform_int(5));
      std::vector<double> dots;
      for (std::uint32_t i = 0; i < layers * heads; ++i) dots.push_back(std::round(rng.normal() * 3.0) / 2.0);
      const auto s = table(layers, heads, dots);
      cfg.top_fraction = 0.05 + 0.95 * rng.uniform();

      std::vector<std::pair<double, HeadIndex>> all;
      for (std::uint32_t l = 0; l < layers; ++l) {
        for (std::uint32_t h = 0; h < heads; ++h) all.push_back({-std::abs(dots[l * heads + h]), {l, h}});
      }
      std::sort(all.begin(), all.end());
      const auto got = select_heads(s, cfg);
      REQUIRE(got.size() <= all.size());
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == all[i].second);
    }
  }
  SUBCASE("config validation") {
    cfg.top_fraction = 0.0;
    CHECK_THROWS_AS(select_heads(table(1, 1, {1}), cfg), ConfigError);
    cfg = {};
    cfg.lambda = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}

TEST_CASE("suppression plan") {
  const auto s = table(2, 2, {11, -5, 3, 0});
  const std::vector<HeadIndex> k{{0, 0}, {0, 1}};
  const SuppressionPlan plan = suppression_plan(s, k, MitigationConfig::kLargeModelLambda);
  CHECK(plan.alpha(0, 0) == doctest::Approx(0.989).epsilon(1e-15));
  CHECK(plan.alpha(0, 1) == 1.0);
  CHECK(plan.alpha(1, 0) == 1.0);  // not selected
  CHECK(plan.alpha(1, 1) == 1.0);
  const SuppressionPlan identity = suppression_plan(s, k, 0.0);
  for (double a : identity.alpha.data()) CHECK(a == 1.0);
  CHECK_THROWS_AS(suppression_plan(s, std::vector<HeadIndex>{{2, 0}}, 0.1), ShapeError);
}

TEST_CASE("small suppression lowers the risk logit to first order") {
  Rng rng(4);
  const auto d = dims(4, 4, 2);
  MitigationConfig cfg;
  cfg.top_fraction = 0.25;
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const probe::ProbeParams p = random_probe(d, rng);
    const HeadOutputTensor v = random_heads(d, rng);
    const HeadAttribution a = head_gradients(v, p);
    const HeadSensitivity s = sensitivities(v, a.grads);
    const auto selected = select_heads(s, cfg);
    if (std::none_of(selected.begin(), selected.end(), [&](HeadIndex k) { return s.dot_at(k.layer, k.head) > 0; })) continue;
    const SuppressionPlan plan = suppression_plan(s, selected, 1e-4);
    HeadOutputTensor scaled = v;
    for (std::uint32_t l = 0; l < d.layers; ++l) {
      for (std::uint32_t h = 0; h < d.heads; ++h) {
        for (double& x : scaled.head(l, h)) x *= plan.alpha(l, h);
      }
    }
    CHECK(probe::infer_logit(scaled, p).logit <= a.logit);
    ++checked;
  }
  CHECK(checked > 20);
}

namespace {

// One layer, two heads. Head (0, 0) always outputs (1, 0) and writes it into
// residual dimension 0; the rest of the residual is a constant 1 in dimension
// 3. Unembedding reads dimension 0 for the hallucinated object and dimension 3
// (at half weight) for the grounded one, so the hallucinated object wins only
// while head (0, 0) is at least half strength.
struct HandBuilt {
  toyvlm::ToyModel model;
  probe::ProbeParams probe;
  toyvlm::SceneSpec scene{{2}, {3}, 0};
  int grounded = 0;
  int hallucinated = 0;

  HandBuilt() {
    toyvlm::ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.head_dim = 2;
    cfg.n_objects = 8;
    cfg.max_present = 3;
    cfg.mlp_dim = 4;
    cfg.max_seq = 10;
    Rng rng(0);
    model = toyvlm::ToyModel::init(cfg, rng);
    for (Tensor* t : model.parameters()) std::fill(t->storage().begin(), t->storage().end(), 0.0);
    for (std::size_t r = 0; r < model.pos_embed.rows(); ++r) model.pos_embed(r, 3) = 1.0;
    auto& b = model.blocks[0];
    std::fill(b.ln1_gain.storage().begin(), b.ln1_gain.storage().end(), 1.0);
    std::fill(b.ln2_gain.storage().begin(), b.ln2_gain.storage().end(), 1.0);
    std::fill(model.lnf_gain.storage().begin(), model.lnf_gain.storage().end(), 1.0);
    // LayerNorm of (0, 0, 0, 1) has sqrt(3) in dimension 3.
    b.attn.w_v[0](3, 0) = 1.0 / std::sqrt(3.0);
    b.attn.w_o(0, 0) = 1.0;
    grounded = toyvlm::object_token(cfg, 2);
    hallucinated = toyvlm::object_token(cfg, 5);
    model.unembed(0, static_cast<std::size_t>(hallucinated)) = 1.0;
    model.unembed(3, static_cast<std::size_t>(grounded)) = 0.5;

    probe = single_input_probe(dims(1, 2, 2), 0, -0.1);
  }
};

}  // namespace

TEST_CASE("guarded decoding on a hand-built model flips the driven token") {
  HandBuilt hb;
  Rng r1(1);
  const auto vanilla = toyvlm::decode(hb.model, hb.scene, r1);
  REQUIRE(!vanilla.empty());
  CHECK(vanilla[0].sampled_token == hb.hallucinated);
  CHECK(vanilla[0].head_outputs.head(0, 0)[0] == doctest::Approx(1.0).epsilon(1e-4));  // LayerNorm eps

  const HeadAttribution a = head_gradients(vanilla[0].head_outputs, hb.probe);
  REQUIRE(a.logit > 0.0);
  const double dot = sensitivities(vanilla[0].head_outputs, a.grads).dot_at(0, 0);
  REQUIRE(dot > 0.0);

  MitigationConfig cfg;
  cfg.tau = 0.0;
  cfg.lambda = 0.75 / dot;  // alpha = 0.25 on the driving head
  Rng r2(1);
  const GuardedResult guarded = guarded_decode(hb.model, hb.probe, hb.scene, cfg, r2);
  REQUIRE(!guarded.interventions.empty());
  const InterventionRecord& rec = guarded.interventions.front();
  CHECK(rec.step == 0);
  CHECK(rec.k_size == 1);
  CHECK(rec.alpha_min == doctest::Approx(0.25));
  CHECK(rec.token_before == hb.hallucinated);
  CHECK(rec.token_after == hb.grounded);
  for (const auto& s : guarded.steps) CHECK(s.sampled_token == hb.grounded);
}

TEST_CASE("guarded decoding identities") {
  Rng rng(5);
  toyvlm::ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.head_dim = 4;
  cfg.n_objects = 8;
  cfg.max_present = 3;
  cfg.mlp_dim = 16;
  cfg.max_seq = 12;
  const toyvlm::ToyModel model = toyvlm::ToyModel::init(cfg, rng);
  const probe::ProbeParams p = random_probe(dims(2, 2, 4), rng);
  const auto scenes = toyvlm::generate_scenes(rng, cfg, 10, 0);
  for (const auto& scene : scenes) {
    Rng r1(1), r2(1), r3(1);
    const auto vanilla = toyvlm::decode(model, scene, r1);

    MitigationConfig never;
    never.tau = std::numeric_limits<double>::infinity();
    const GuardedResult a = guarded_decode(model, p, scene, never, r2);
    CHECK(a.interventions.empty());
    REQUIRE(a.steps.size() == vanilla.size());
    for (std::size_t i = 0; i < vanilla.size(); ++i) {
      CHECK(a.steps[i].sampled_token == vanilla[i].sampled_token);
      CHECK(a.steps[i].logits == vanilla[i].logits);
    }

    MitigationConfig always;
    always.tau = -std::numeric_limits<double>::infinity();
    always.lambda = 0.0;
    const GuardedResult b = guarded_decode(model, p, scene, always, r3);
    CHECK(b.interventions.size() == vanilla.size());
    for (const auto& rec : b.interventions) {
      CHECK(rec.token_before == rec.token_after);
      CHECK(rec.alpha_min == 1.0);
    }
  }
}

TEST_CASE("tau calibration") {
  const auto d = dims(1, 2, 2);
  capture::FeatureDataset ds;
  ds.layers = 1;
  ds.heads = 2;
  ds.head_dim = 2;
  Rng rng(6);
  for (int i = 0; i < 10000; ++i) {
    capture::LabeledExample ex;
    ex.features = HeadOutputTensor(1, 2, 2);
    for (double& x : ex.features.values) x = rng.normal();
    ex.y = static_cast<std::uint8_t>(i % 2);
    ds.examples.push_back(ex);
  }

  probe::ProbeParams constant = zeroed(d);
  constant.cls_b(0, 0) = 0.37;
  CHECK(std::abs(calibrate_tau(ds, constant) - 0.37) < 1e-12);

  // An odd probe on mirrored inputs gives logits {-c, c}, so tau = 0.
  probe::ProbeParams odd = zeroed(d);
  odd.enc_w[0](0, 0) = 1.0;
  odd.enc_w[0](0, 1) = -1.0;
  odd.enc_w[1](0, 0) = 1.0;
  odd.enc_w[1](1, 1) = 1.0;
  odd.enc_w[2](0, 0) = 1.0;
  odd.enc_w[2](1, 1) = 1.0;
  odd.post_w(0, 0) = 1.0;
  odd.post_w(1, 0) = -1.0;
  odd.cls_w(0, 0) = 1.0;
  capture::FeatureDataset pair = ds;
  pair.examples.resize(2);
  pair.examples[0].features.values = {1.3, 0, 0, 0};
  pair.examples[1].features.values = {-1.3, 0, 0, 0};
  const auto scores = probe::score_dataset(pair, odd);
  CHECK(scores.logits[0] == doctest::Approx(-scores.logits[1]).epsilon(1e-14));
  CHECK(std::abs(calibrate_tau(pair, odd)) < 1e-15);

  const probe::ProbeParams p = random_probe(d, rng);
  double mean = 0.0;
  std::size_t n = 0;
  for (const auto& ex : ds.examples) {
    ++n;
    mean += (probe::infer_logit(ex.features, p).logit - mean) / static_cast<double>(n);
  }
  CHECK(std::abs(calibrate_tau(ds, p) - mean) < 1e-12);

  CHECK_THROWS_AS(calibrate_tau(capture::FeatureDataset{}, p), DataError);
}
