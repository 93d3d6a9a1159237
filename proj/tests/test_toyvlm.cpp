#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "vib/error.hpp"
#include "vib/toyvlm.hpp"

using namespace vib;
using namespace vib::toyvlm;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.head_dim = 4;
  cfg.n_objects = 8;
  cfg.max_present = 3;
  cfg.mlp_dim = 16;
  cfg.max_seq = 12;
  return cfg;
}

AttentionLayerParams random_attention(std::size_t d_model, std::size_t heads, Rng& rng) {
  AttentionLayerParams p;
  const std::size_t dh = d_model / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    p.w_q.push_back(Tensor::randn({d_model, dh}, 0.5, rng));
    p.w_k.push_back(Tensor::randn({d_model, dh}, 0.5, rng));
    p.w_v.push_back(Tensor::randn({d_model, dh}, 0.5, rng));
  }
  p.w_o = Tensor::randn({d_model, d_model}, 0.5, rng);
  return p;
}

void check_close(const Tensor& a, const Tensor& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= tol);
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.max_present = 13;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.max_seq = 8;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.n_heads = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("scene generation invariants and golden snapshot") {
  const ModelConfig cfg;
  Rng rng(7);
  const auto scenes = generate_scenes(rng, cfg, 3, 0);
  CHECK(scenes[0].present == std::vector<int>{18});
  CHECK(scenes[0].distractors == std::vector<int>{19});
  CHECK(scenes[1].present == std::vector<int>{3, 6, 12, 14});
  CHECK(scenes[1].distractors == std::vector<int>{2, 7, 13, 15});
  CHECK(scenes[2].present == std::vector<int>{6, 9, 10, 16});

  Rng shifted(7);
  CHECK(generate_scene(shifted, cfg, 0, {.shifted = true}).present == std::vector<int>{6, 18, 19});

  Rng again(7);
  CHECK(generate_scenes(again, cfg, 3, 0) == scenes);

  Rng many(1);
  for (const SceneSpec& s : generate_scenes(many, cfg, 2000, 0)) {
    CHECK(!s.present.empty());
    CHECK(static_cast<int>(s.present.size()) <= cfg.max_present);
    CHECK(std::is_sorted(s.present.begin(), s.present.end()));
    CHECK(!s.distractors.empty());
    for (int d : s.distractors) CHECK(!std::binary_search(s.present.begin(), s.present.end(), d));
  }
}

TEST_CASE("small scene limits") {
  ModelConfig cfg;
  cfg.max_present = 3;
  Rng zero(0);
  const SceneSpec s = generate_scene(zero, cfg, 0);
  CHECK(s.present == std::vector<int>{11});
  CHECK(s.distractors == std::vector<int>{10});

  cfg.max_present = 1;
  Rng rng(2);
  for (const SceneSpec& one : generate_scenes(rng, cfg, 500, 0)) CHECK(one.present.size() == 1);
}

TEST_CASE("present sets are uniform over objects and sizes") {
  const ModelConfig cfg;
  const int n = 30000;
  Rng rng(2);
  std::vector<int> object_counts(static_cast<std::size_t>(cfg.n_objects));
  std::vector<int> size_counts(static_cast<std::size_t>(cfg.max_present) + 1);
  for (const SceneSpec& s : generate_scenes(rng, cfg, n, 0)) {
    ++size_counts[s.present.size()];
    for (int o : s.present) ++object_counts[static_cast<std::size_t>(o)];
  }
  // Size k uniform on 1..5 gives E[k] = 3, so each object appears with p = 3/24.
  const double p_obj = 3.0 / cfg.n_objects;
  const double sd_obj = std::sqrt(n * p_obj * (1 - p_obj));
  for (int c : object_counts) CHECK(std::abs(c - n * p_obj) <= 3 * sd_obj);
  const double p_size = 1.0 / cfg.max_present;
  const double sd_size = std::sqrt(n * p_size * (1 - p_size));
  for (int k = 1; k <= cfg.max_present; ++k) CHECK(std::abs(size_counts[static_cast<std::size_t>(k)] - n * p_size) <= 3 * sd_size);
}

TEST_CASE("prompt and teacher caption layout") {
  const ModelConfig cfg;
  const SceneSpec scene{{2, 5, 9}, {3, 4, 8}, 42};
  CHECK(encode_prompt(cfg, scene) == std::vector<int>{0, 30, 37, 33, 2, 3});
  CHECK(teacher_caption(cfg, scene, std::nullopt) == std::vector<int>{6, 9, 13, kEos});
  CHECK(teacher_caption(cfg, scene, 4) == std::vector<int>{6, 8, 9, 13, kEos});
}

TEST_CASE("single-token attention returns the value row") {
  Rng rng(1);
  const AttentionLayerParams p = random_attention(8, 2, rng);
  const Tensor x = Tensor::randn({1, 8}, 1.0, rng);
  const AttentionOutput out = attention_forward(x, p);
  for (std::size_t h = 0; h < 2; ++h) check_close(out.head_outputs[h], matmul(x, p.w_v[h]), 1e-15);
}

TEST_CASE("attention scaling identities") {
  Rng rng(4);
  const AttentionLayerParams p = random_attention(8, 2, rng);
  const Tensor x = Tensor::randn({5, 8}, 1.0, rng);
  const AttentionOutput base = attention_forward(x, p);

  const std::vector<double> ones{1.0, 1.0};
  CHECK(attention_forward(x, p, ones).y == base.y);

  // alpha = 0 on head 1 against a recomputation with that head's values zeroed.
  const std::vector<double> drop{1.0, 0.0};
  AttentionLayerParams zeroed = p;
  zeroed.w_v[1] = Tensor(p.w_v[1].shape());
  check_close(attention_forward(x, p, drop).y, attention_forward(x, zeroed).y, 1e-12);

  // Scaling from row 3 on leaves earlier rows untouched.
  const std::vector<double> half{0.5, 0.25};
  const Tensor late = attention_forward(x, p, half, 3).y;
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 8; ++c) CHECK(late(r, c) == base.y(r, c));
  }
  CHECK(late(4, 0) != base.y(4, 0));
}

TEST_CASE("concat-then-project equals the per-head sum") {
  Rng rng(8);
  const AttentionLayerParams p = random_attention(12, 3, rng);
  const Tensor x = Tensor::randn({6, 12}, 1.0, rng);
  const AttentionOutput out = attention_forward(x, p);
  Tensor sum({6, 12});
  for (std::size_t h = 0; h < 3; ++h) {
    Tensor rows({4, 12});
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t c = 0; c < 12; ++c) rows(i, c) = p.w_o(h * 4 + i, c);
    }
    const Tensor part = matmul(out.head_outputs[h], rows);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += part[i];
  }
  check_close(out.y, sum, 1e-10);
}

TEST_CASE("forward is causal") {
  const ModelConfig cfg = small_config();
  Rng rng(5);
  const ToyModel model = ToyModel::init(cfg, rng);
  const std::vector<int> a{0, 12, 14, 2, 3, 5, 7};
  for (std::size_t t = 1; t < a.size(); ++t) {
    std::vector<int> b = a;
    b[t] = (b[t] + 3) % cfg.vocab_size();
    Tape ta(false), tb(false);
    const Tensor la = forward(ta, model, a).logits.value();
    const Tensor lb = forward(tb, model, b).logits.value();
    for (std::size_t r = 0; r < t; ++r) {
      for (std::size_t c = 0; c < la.cols(); ++c) CHECK(la(r, c) == lb(r, c));
    }
  }
}

TEST_CASE("forward rejects over-long sequences and records every head") {
  const ModelConfig cfg = small_config();
  Rng rng(5);
  const ToyModel model = ToyModel::init(cfg, rng);
  Tape tape(false);
  CHECK_THROWS_AS(forward(tape, model, std::vector<int>(13, 0)), ShapeError);
  const ForwardResult fr = forward(tape, model, std::vector<int>{0, 1, 2});
  CHECK(fr.last_heads.layers == 2);
  CHECK(fr.last_heads.heads == 2);
  CHECK(fr.last_heads.head_dim == 4);
  CHECK(fr.last_heads.size() == 16);
}

TEST_CASE("decoding") {
  const ModelConfig cfg;
  Rng mr(123);
  const ToyModel model = ToyModel::init(cfg, mr);
  const SceneSpec scene{{2, 5, 9}, {3, 4, 8}, 42};
  auto tokens = [](const std::vector<DecodeStep>& steps) {
    std::vector<int> out;
    for (const DecodeStep& s : steps) out.push_back(s.sampled_token);
    return out;
  };

  SUBCASE("greedy is deterministic") {
    Rng r1(1), r2(2);
    CHECK(tokens(decode(model, scene, r1)) == tokens(decode(model, scene, r2)));
    Rng r3(1);
    CHECK(tokens(decode(model, scene, r3)) == std::vector<int>{45, 3, 4, 39, 35, 22, 1});
  }
  SUBCASE("seeded temperature sampling reproduces a golden sequence") {
    Rng r(99);
    CHECK(tokens(decode(model, scene, r, {Sampling::kTemperature, 1.0})) ==
          std::vector<int>{16, 49, 32, 5, 23, 18, 35, 9, 3, 11});
  }
  SUBCASE("all-ones plan changes nothing") {
    Rng r1(1), r2(1);
    const StepPlanFn plan = [&](int) { return std::optional<Tensor>(Tensor({4, 4}, 1.0)); };
    const auto a = decode(model, scene, r1);
    const auto b = decode(model, scene, r2, {}, plan);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].logits == b[i].logits);
      CHECK(a[i].head_outputs == b[i].head_outputs);
    }
  }
  SUBCASE("steps stop at max_seq and carry full head tensors") {
    Rng r(1);
    const auto steps = decode(model, scene, r);
    CHECK(encode_prompt(cfg, scene).size() + steps.size() <= static_cast<std::size_t>(cfg.max_seq));
    for (const DecodeStep& s : steps) CHECK(s.head_outputs.size() == 4u * 4u * 16u);
  }
}

TEST_CASE("token labels") {
  const ModelConfig cfg;
  const SceneSpec scene{{3}, {2}, 0};
  std::vector<DecodeStep> steps(3);
  steps[0].step_index = 0;
  steps[0].sampled_token = object_token(cfg, 3);
  steps[1].step_index = 1;
  steps[1].sampled_token = object_token(cfg, 7);
  steps[2].step_index = 2;
  steps[2].sampled_token = kEos;
  const auto labels = label_tokens(cfg, steps, scene);
  CHECK(labels == std::vector<TokenLabel>{{0, 0}, {1, 1}});
  CHECK(label_tokens(cfg, steps, scene) == labels);
}

TEST_CASE("training produces a model that hallucinates at a moderate rate") {
  const ModelConfig cfg;
  const ToyTrainConfig tcfg;
  Rng rng(1);
  const auto scenes = generate_scenes(rng, cfg, tcfg.n_scenes, 0);
  const auto data = make_training_set(cfg, scenes, tcfg.distractor_rate, rng);
  ToyTrainLog log;
  const ToyModel model = train_toy_model(data, cfg, tcfg, rng, &log);

  REQUIRE(log.epoch_loss.size() >= 3);
  for (std::size_t k = 0; k + 1 < 3; ++k) CHECK(log.epoch_loss[k + 1] <= log.epoch_loss[k]);

  Rng held(1000);
  const auto test_scenes = generate_scenes(held, cfg, 300, 1'000'000);
  const auto test_data = make_training_set(cfg, test_scenes, 0.0, held);
  CHECK(token_accuracy(model, test_data) > 1.0 / cfg.vocab_size());
  const double rate = hallucination_stats(model, test_scenes, 3).rate();
  CHECK(rate >= 0.05);
  CHECK(rate <= 0.6);

  CHECK_THROWS_AS(train_toy_model({}, cfg, tcfg, rng), DataError);
}

TEST_CASE("model checkpoint round trip and corruption") {
  const ModelConfig cfg = small_config();
  Rng rng(3);
  const ToyModel model = ToyModel::init(cfg, rng);
  const std::string path = temp_path("vib_test_model.tvlm");
  save_model(model, path);
  const ToyModel loaded = load_model(path);
  CHECK(loaded.config == cfg);
  const auto a = model.parameters();
  const auto b = loaded.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i] == *b[i]);

  const auto full = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full - 8);
  try {
    load_model(path);
    FAIL("expected truncation error");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatErrorKind::kTruncated);
  }

  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "NOPE0000";
  }
  try {
    load_model(path);
    FAIL("expected bad magic");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatErrorKind::kBadMagic);
  }
  std::filesystem::remove(path);
}
