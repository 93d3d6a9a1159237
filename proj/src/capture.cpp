#include "vib/capture.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include "vib/binio.hpp"
#include "vib/error.hpp"

namespace vib::capture {
namespace {

constexpr char kMagic[5] = "VIBF";
constexpr std::uint32_t kVersion = 1;

FeatureDataset empty_like(const FeatureDataset& ds) {
  FeatureDataset out;
  out.layers = ds.layers;
  out.heads = ds.heads;
  out.head_dim = ds.head_dim;
  out.flags = ds.flags & ~kPositiveCountMask;
  return out;
}

}  // namespace

std::size_t FeatureDataset::positives() const {
  std::size_t n = 0;
  for (const LabeledExample& ex : examples) n += ex.y;
  return n;
}

void FeatureDataset::refresh_flags() {
  flags = (flags & ~kPositiveCountMask) | (static_cast<std::uint64_t>(positives()) & kPositiveCountMask);
}

void FeatureDataset::check() const {
  for (const LabeledExample& ex : examples) {
    if (ex.features.layers != layers || ex.features.heads != heads ||
        ex.features.head_dim != head_dim || ex.features.values.size() != feature_size()) {
      throw ShapeError("example (scene " + std::to_string(ex.scene_id) + ", step " +
                       std::to_string(ex.step_index) + ") has dims " +
                       std::to_string(ex.features.layers) + "x" + std::to_string(ex.features.heads) +
                       "x" + std::to_string(ex.features.head_dim) + ", dataset header says " +
                       std::to_string(layers) + "x" + std::to_string(heads) + "x" +
                       std::to_string(head_dim));
    }
    if (ex.y > 1) throw DataError("label outside {0,1}");
  }
}

FeatureDataset collect(const toyvlm::ToyModel& model, std::span<const toyvlm::SceneSpec> scenes,
                       Rng& rng, const CollectOptions& opts) {
  if (scenes.empty()) throw DataError("collect: empty scene list");
  const toyvlm::ModelConfig& cfg = model.config;
  FeatureDataset ds;
  ds.layers = static_cast<std::uint32_t>(cfg.n_layers);
  ds.heads = static_cast<std::uint32_t>(cfg.n_heads);
  ds.head_dim = static_cast<std::uint32_t>(cfg.head_dim);
  if (opts.last_token_only) ds.flags |= kFlagLastTokenOnly;
  if (opts.shifted) ds.flags |= kFlagShifted;

  for (const toyvlm::SceneSpec& scene : scenes) {
    std::vector<toyvlm::DecodeStep> steps = toyvlm::decode(model, scene, rng, opts.decode);
    std::vector<toyvlm::TokenLabel> labels = toyvlm::label_tokens(cfg, steps, scene);
    if (opts.last_token_only && labels.size() > 1) labels.erase(labels.begin(), labels.end() - 1);
    for (const toyvlm::TokenLabel& label : labels) {
      LabeledExample ex;
      ex.features = std::move(steps[static_cast<std::size_t>(label.step_index)].head_outputs);
      ex.y = static_cast<std::uint8_t>(label.y);
      ex.scene_id = scene.scene_id;
      ex.step_index = static_cast<std::uint32_t>(label.step_index);
      ds.examples.push_back(std::move(ex));
    }
  }
  std::stable_sort(ds.examples.begin(), ds.examples.end(),
                   [](const LabeledExample& a, const LabeledExample& b) {
                     return std::tie(a.scene_id, a.step_index) < std::tie(b.scene_id, b.step_index);
                   });
  ds.refresh_flags();
  return ds;
}

LayerWindow parse_window(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw ConfigError("layer window must be lo:hi, got '" + text + "'");
  try {
    std::size_t used_lo = 0, used_hi = 0;
    const std::string lo_text = text.substr(0, colon), hi_text = text.substr(colon + 1);
    const long lo = std::stol(lo_text, &used_lo);
    const long hi = std::stol(hi_text, &used_hi);
    if (used_lo != lo_text.size() || used_hi != hi_text.size() || lo < 1 || hi < lo) {
      throw ConfigError("");
    }
    return LayerWindow{static_cast<std::uint32_t>(lo), static_cast<std::uint32_t>(hi)};
  } catch (const std::exception&) {
    throw ConfigError("layer window must be lo:hi with 1 <= lo <= hi, got '" + text + "'");
  }
}

FeatureDataset slice_layers(const FeatureDataset& ds, LayerWindow w) {
  if (w.lo < 1 || w.lo > w.hi || w.hi > ds.layers) {
    throw ConfigError("layer window " + std::to_string(w.lo) + ":" + std::to_string(w.hi) +
                      " outside [1, " + std::to_string(ds.layers) + "]");
  }
  FeatureDataset out = empty_like(ds);
  out.layers = w.hi - w.lo + 1;
  const std::size_t per_layer = static_cast<std::size_t>(ds.heads) * ds.head_dim;
  for (const LabeledExample& ex : ds.examples) {
    LabeledExample sliced = ex;
    sliced.features.layers = out.layers;
    const auto first = ex.features.values.begin() + static_cast<std::ptrdiff_t>((w.lo - 1) * per_layer);
    sliced.features.values.assign(first, first + static_cast<std::ptrdiff_t>(out.layers * per_layer));
    out.examples.push_back(std::move(sliced));
  }
  out.refresh_flags();
  return out;
}

void write_dataset(const FeatureDataset& ds, std::ostream& out) {
  ds.check();
  binio::write_magic(out, kMagic);
  binio::write_u32(out, kVersion);
  binio::write_u32(out, ds.layers);
  binio::write_u32(out, ds.heads);
  binio::write_u32(out, ds.head_dim);
  binio::write_u64(out, ds.count());
  binio::write_u64(out, ds.flags);
  for (const LabeledExample& ex : ds.examples) {
    binio::write_u64(out, ex.scene_id);
    binio::write_u32(out, ex.step_index);
    binio::write_u8(out, ex.y);
    for (int pad = 0; pad < 3; ++pad) binio::write_u8(out, 0);
    binio::write_f64s(out, ex.features.values);
  }
}

void write_dataset(const FeatureDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write feature file: " + path);
  write_dataset(ds, out);
  if (!out) throw DataError("failed writing feature file: " + path);
}

FeatureDataset read_dataset(std::istream& in) {
  binio::expect_magic(in, kMagic);
  const std::uint32_t version = binio::read_u32(in);
  if (version != kVersion) {
    throw FormatError(FormatErrorKind::kVersionMismatch,
                      "feature file version " + std::to_string(version) + ", expected " +
                          std::to_string(kVersion));
  }
  FeatureDataset ds;
  ds.layers = binio::read_u32(in);
  ds.heads = binio::read_u32(in);
  ds.head_dim = binio::read_u32(in);
  const std::uint64_t count = binio::read_u64(in);
  ds.flags = binio::read_u64(in);
  if (ds.layers == 0 || ds.heads == 0 || ds.head_dim == 0) {
    throw FormatError(FormatErrorKind::kDimMismatch, "zero feature dimension in header");
  }
  const std::size_t n = ds.feature_size();
  // Bound the allocation by what the stream could possibly hold.
  ds.examples.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(count, 1u << 20)));
  for (std::uint64_t i = 0; i < count; ++i) {
    LabeledExample ex;
    ex.scene_id = binio::read_u64(in);
    ex.step_index = binio::read_u32(in);
    ex.y = binio::read_u8(in);
    for (int pad = 0; pad < 3; ++pad) binio::read_u8(in);
    if (ex.y > 1) throw FormatError(FormatErrorKind::kDimMismatch, "label byte outside {0,1}");
    ex.features = HeadOutputTensor(ds.layers, ds.heads, ds.head_dim);
    binio::read_f64s(in, std::span<double>(ex.features.values.data(), n));
    ds.examples.push_back(std::move(ex));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(FormatErrorKind::kDimMismatch,
                      "trailing bytes after " + std::to_string(count) + " examples of " +
                          std::to_string(n) + " values");
  }
  if ((ds.flags & kPositiveCountMask) != (ds.positives() & kPositiveCountMask)) {
    throw FormatError(FormatErrorKind::kDimMismatch, "header positive count disagrees with labels");
  }
  return ds;
}

FeatureDataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open feature file " + path);
  return read_dataset(in);
}

std::pair<FeatureDataset, FeatureDataset> split(const FeatureDataset& ds, double train_frac,
                                                Rng& rng, bool group_by_scene) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) {
    throw ConfigError("split: train fraction must lie in (0, 1)");
  }
  // Units are scenes when grouping, single examples otherwise.
  std::vector<std::uint64_t> unit_of(ds.count());
  std::vector<std::uint64_t> units;
  if (group_by_scene) {
    std::map<std::uint64_t, std::uint64_t> index;
    for (std::size_t i = 0; i < ds.count(); ++i) {
      const auto [it, inserted] = index.emplace(ds.examples[i].scene_id, units.size());
      if (inserted) units.push_back(units.size());
      unit_of[i] = it->second;
    }
  } else {
    for (std::size_t i = 0; i < ds.count(); ++i) {
      unit_of[i] = i;
      units.push_back(i);
    }
  }
  if (units.size() < 2) {
    throw DataError(group_by_scene ? "split: need at least two scenes to split by scene"
                                   : "split: need at least two examples");
  }
  for (std::size_t i = units.size(); i > 1; --i) std::swap(units[i - 1], units[rng.uniform_int(i)]);
  auto n_train = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(units.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, units.size() - 1);
  std::vector<bool> in_train(units.size(), false);
  for (std::size_t i = 0; i < n_train; ++i) in_train[units[i]] = true;

  FeatureDataset train = empty_like(ds), valid = empty_like(ds);
  for (std::size_t i = 0; i < ds.count(); ++i) {
    (in_train[unit_of[i]] ? train : valid).examples.push_back(ds.examples[i]);
  }
  train.refresh_flags();
  valid.refresh_flags();
  return {std::move(train), std::move(valid)};
}

}  // namespace vib::capture
