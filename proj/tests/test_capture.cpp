#include <filesystem>
#include <set>
#include <sstream>

#include "doctest.h"
#include "vib/binio.hpp"
#include "vib/capture.hpp"
#include "vib/error.hpp"

using namespace vib;
using namespace vib::toyvlm;
using namespace vib::capture;

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

struct Fixture {
  ModelConfig cfg = small_config();
  ToyModel model;
  std::vector<SceneSpec> scenes;
  Fixture() {
    Rng mr(11);
    model = ToyModel::init(cfg, mr);
    Rng sr(12);
    scenes = generate_scenes(sr, cfg, 20, 0);
  }
  FeatureDataset collect_default(CollectOptions opts = {}) const {
    Rng cr(13);
    return collect(model, scenes, cr, opts);
  }
};

std::string bytes_of(const FeatureDataset& ds) {
  std::ostringstream os;
  write_dataset(ds, os);
  return os.str();
}

FeatureDataset toy_dataset(std::size_t n, std::uint64_t scenes) {
  FeatureDataset ds;
  ds.layers = 1;
  ds.heads = 1;
  ds.head_dim = 2;
  for (std::size_t i = 0; i < n; ++i) {
    LabeledExample ex;
    ex.features = HeadOutputTensor(1, 1, 2);
    ex.features.values = {static_cast<double>(i), -static_cast<double>(i)};
    ex.y = static_cast<std::uint8_t>(i % 3 == 0);
    ex.scene_id = i % scenes;
    ex.step_index = static_cast<std::uint32_t>(i);
    ds.examples.push_back(ex);
  }
  ds.refresh_flags();
  return ds;
}

}  // namespace

TEST_CASE("collect emits one example per labeled object token") {
  Fixture f;
  const FeatureDataset ds = f.collect_default();
  ds.check();

  std::size_t expected = 0, expected_pos = 0;
  Rng rng(13);
  for (const SceneSpec& s : f.scenes) {
    const auto steps = decode(f.model, s, rng);
    for (const TokenLabel& l : label_tokens(f.cfg, steps, s)) {
      ++expected;
      expected_pos += static_cast<std::size_t>(l.y);
    }
  }
  CHECK(ds.count() == expected);
  CHECK(ds.positives() == expected_pos);
  CHECK((ds.flags & kPositiveCountMask) == expected_pos);
  CHECK(ds.count() == 103);
  CHECK(ds.positives() == 77);

  for (std::size_t i = 1; i < ds.count(); ++i) {
    const auto& a = ds.examples[i - 1];
    const auto& b = ds.examples[i];
    CHECK(std::make_pair(a.scene_id, a.step_index) < std::make_pair(b.scene_id, b.step_index));
  }
}

TEST_CASE("collect counts a single scene exactly") {
  Fixture f;
  const std::vector<SceneSpec> one{f.scenes.front()};
  Rng r1(3), r2(3);
  const auto steps = decode(f.model, one[0], r1);
  const FeatureDataset ds = collect(f.model, one, r2);
  CHECK(ds.count() == label_tokens(f.cfg, steps, one[0]).size());
  for (const LabeledExample& ex : ds.examples) {
    CHECK(ex.features == steps[ex.step_index].head_outputs);
  }
}

TEST_CASE("collect options and errors") {
  Fixture f;
  const FeatureDataset last = f.collect_default({.last_token_only = true});
  CHECK((last.flags & kFlagLastTokenOnly) != 0);
  std::set<std::uint64_t> seen;
  for (const LabeledExample& ex : last.examples) CHECK(seen.insert(ex.scene_id).second);
  CHECK((f.collect_default({.shifted = true}).flags & kFlagShifted) != 0);

  Rng rng(1);
  CHECK_THROWS_AS(collect(f.model, std::vector<SceneSpec>{}, rng), DataError);
}

TEST_CASE("collection is byte-identical under a fixed seed and matches a golden hash") {
  Fixture f;
  const std::string a = bytes_of(f.collect_default());
  const std::string b = bytes_of(f.collect_default());
  CHECK(a == b);
  CHECK(a.size() == 36 + 103 * (16 + 8 * 16));
  CHECK(binio::hex64(binio::fnv1a(std::span<const char>(a.data(), a.size()))) == "cd21916918a0b4c3");
}

TEST_CASE("layer slicing") {
  Fixture f;
  const FeatureDataset ds = f.collect_default();
  CHECK(slice_layers(ds, {1, 2}) == ds);
  const FeatureDataset second = slice_layers(ds, {2, 2});
  CHECK(second.layers == 1);
  CHECK(second.feature_size() == 8);
  CHECK_THROWS_AS(slice_layers(ds, {0, 1}), ConfigError);
  CHECK_THROWS_AS(slice_layers(ds, {2, 3}), ConfigError);
  CHECK_THROWS_AS(slice_layers(ds, {2, 1}), ConfigError);

  const FeatureDataset first = slice_layers(ds, {1, 1});
  for (std::size_t i = 0; i < ds.count(); ++i) {
    std::vector<double> joined = first.examples[i].features.values;
    const auto& tail = second.examples[i].features.values;
    joined.insert(joined.end(), tail.begin(), tail.end());
    CHECK(joined == ds.examples[i].features.values);
    CHECK(first.examples[i].y == ds.examples[i].y);
  }
}

TEST_CASE("parse_window") {
  const LayerWindow w = parse_window("3:4");
  CHECK(w.lo == 3);
  CHECK(w.hi == 4);
  CHECK_THROWS_AS(parse_window("3"), ConfigError);
  CHECK_THROWS_AS(parse_window("a:b"), ConfigError);
}

TEST_CASE("dataset file round trip and corruption") {
  Fixture f;
  const FeatureDataset ds = f.collect_default();
  const std::string path = (std::filesystem::temp_directory_path() / "vib_test_ds.vibf").string();
  write_dataset(ds, path);
  CHECK(read_dataset(path) == ds);

  std::string bytes = bytes_of(ds);
  {
    std::istringstream in(bytes.substr(0, bytes.size() - 5));
    try {
      read_dataset(in);
      FAIL("expected truncation");
    } catch (const FormatError& e) {
      CHECK(e.kind() == FormatErrorKind::kTruncated);
    }
  }
  {
    std::string bad = bytes;
    bad[0] = 'X';
    std::istringstream in(bad);
    try {
      read_dataset(in);
      FAIL("expected bad magic");
    } catch (const FormatError& e) {
      CHECK(e.kind() == FormatErrorKind::kBadMagic);
    }
  }
  {
    std::string bad = bytes;
    bad[4] = 9;  // version
    std::istringstream in(bad);
    try {
      read_dataset(in);
      FAIL("expected version mismatch");
    } catch (const FormatError& e) {
      CHECK(e.kind() == FormatErrorKind::kVersionMismatch);
    }
  }
  try {
    read_dataset(std::string("/nonexistent/dir/file.vibf"));
    FAIL("expected io error");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatErrorKind::kIo);
  }
  std::filesystem::remove(path);
}

TEST_CASE("split") {
  SUBCASE("example-level counts and disjointness") {
    const FeatureDataset ds = toy_dataset(10, 10);
    Rng rng(4);
    const auto [train, valid] = split(ds, 0.8, rng, false);
    CHECK(train.count() == 8);
    CHECK(valid.count() == 2);
    std::set<std::uint32_t> a, b;
    for (const auto& ex : train.examples) a.insert(ex.step_index);
    for (const auto& ex : valid.examples) b.insert(ex.step_index);
    std::set<std::uint32_t> all = a;
    all.insert(b.begin(), b.end());
    CHECK(all.size() == 10);
    CHECK(train.positives() + valid.positives() == ds.positives());
    CHECK((train.flags & kPositiveCountMask) == train.positives());
  }
  SUBCASE("grouped split keeps scenes whole") {
    const FeatureDataset ds = toy_dataset(40, 7);
    Rng rng(5);
    const auto [train, valid] = split(ds, 0.7, rng, true);
    std::set<std::uint64_t> a, b;
    for (const auto& ex : train.examples) a.insert(ex.scene_id);
    for (const auto& ex : valid.examples) b.insert(ex.scene_id);
    for (std::uint64_t s : a) CHECK(b.count(s) == 0);
    CHECK(a.size() == 5);  // llround(0.7 * 7)
    CHECK(train.count() + valid.count() == 40);
  }
  SUBCASE("same seed, same split") {
    const FeatureDataset ds = toy_dataset(30, 9);
    Rng r1(8), r2(8);
    CHECK(split(ds, 0.5, r1).first == split(ds, 0.5, r2).first);
  }
  SUBCASE("errors") {
    Rng rng(1);
    CHECK_THROWS_AS(split(toy_dataset(1, 1), 0.5, rng), DataError);
    CHECK_THROWS_AS(split(toy_dataset(10, 10), 1.0, rng), ConfigError);
    CHECK_THROWS_AS(split(toy_dataset(10, 10), 0.0, rng), ConfigError);
  }
}
