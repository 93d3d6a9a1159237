#include "vib/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "vib/binio.hpp"
#include "vib/error.hpp"

namespace vib::pipeline {
namespace fs = std::filesystem;

namespace {

enum StageTag : std::uint64_t {
  kToyScenes = 1,
  kToyData,
  kToyTrain,
  kProbePool,
  kShiftPool,
  kEvalPool,
  kHallucinationEval,
  kCollect,
  kCollectShift,
  kSplit,
  kProbeTrain,
  kMitigate,
};

constexpr std::uint64_t kProbePoolFirstId = 1'000'000;
constexpr std::uint64_t kShiftPoolFirstId = 2'000'000;
constexpr std::uint64_t kEvalPoolFirstId = 3'000'000;

// Reads fields of one JSON object and rejects keys it was never asked about.
class Fields {
 public:
  Fields(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where_ + "." + key + ": wrong type (" + j_.at(key).dump() + ")");
    }
  }

  const Json* object(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void require_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("working directory does not exist: " + dir.string());
}

void require_file(const fs::path& path) {
  if (!fs::exists(path)) {
    throw DataError("missing input " + path.string() + " (run the producing stage first)");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

Json read_json(const fs::path& path) {
  require_file(path);
  std::ifstream in(path);
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("cannot parse " + path.string() + ": " + e.what());
  }
}

std::string hash_of(const fs::path& path) { return binio::hex64(binio::file_hash(path.string())); }

void write_resolved_config(const RunConfig& cfg, const std::string& stage, const Json& flags) {
  Json j;
  j["stage"] = stage;
  j["flags"] = flags;
  j["config"] = config_to_json(cfg);
  write_json(paths_for(cfg).dir / ("config." + stage + ".json"), j);
}

std::string window_text(capture::LayerWindow w) {
  return std::to_string(w.lo) + ":" + std::to_string(w.hi);
}

Json window_json(const std::optional<capture::LayerWindow>& w) {
  return w ? Json(window_text(*w)) : Json(nullptr);
}

capture::FeatureDataset read_features(const fs::path& path) {
  require_file(path);
  return capture::read_dataset(path.string());
}

probe::ProbeParams read_probe(const fs::path& path) {
  require_file(path);
  return probe::load_probe(path.string());
}

void check_probe_fits(const probe::ProbeParams& p, std::uint32_t layers, std::uint32_t heads,
                      std::uint32_t head_dim, const std::string& what) {
  const probe::ProbeDims& d = p.dims;
  if (d.layers != layers || d.heads != heads || d.head_dim != head_dim) {
    throw ShapeError("probe expects " + std::to_string(d.layers) + "x" + std::to_string(d.heads) +
                     "x" + std::to_string(d.head_dim) + " features but " + what + " has " +
                     std::to_string(layers) + "x" + std::to_string(heads) + "x" +
                     std::to_string(head_dim));
  }
}

Json scene_json(const toyvlm::SceneSpec& s) {
  return Json{{"id", s.scene_id}, {"present", s.present}, {"distractors", s.distractors}};
}

std::vector<toyvlm::SceneSpec> scenes_from_json(const Json& arr, const std::string& where) {
  std::vector<toyvlm::SceneSpec> out;
  try {
    for (const Json& j : arr) {
      toyvlm::SceneSpec s;
      s.scene_id = j.at("id").get<std::uint64_t>();
      s.present = j.at("present").get<std::vector<int>>();
      s.distractors = j.at("distractors").get<std::vector<int>>();
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed scene list " + where + ": " + e.what());
  }
  return out;
}

Json chair_json(const metrics::ChairResult& c) {
  return Json{{"chair_i", c.chair_i ? Json(*c.chair_i) : Json(nullptr)},
              {"chair_s", c.chair_s},
              {"mentions", c.mentions},
              {"hallucinated_mentions", c.hallucinated_mentions},
              {"captions", c.captions},
              {"hallucinated_captions", c.hallucinated_captions}};
}

metrics::ChairResult chair_from_json(const Json& j) {
  metrics::ChairResult c;
  if (!j.at("chair_i").is_null()) c.chair_i = j.at("chair_i").get<double>();
  c.chair_s = j.at("chair_s").get<double>();
  c.mentions = j.at("mentions").get<std::size_t>();
  c.hallucinated_mentions = j.at("hallucinated_mentions").get<std::size_t>();
  c.captions = j.at("captions").get<std::size_t>();
  c.hallucinated_captions = j.at("hallucinated_captions").get<std::size_t>();
  return c;
}

Json opt_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

Json mitigate_json(const MitigateSummary& m) {
  return Json{{"tau", m.tau},
              {"lambda", m.lambda},
              {"top_fraction", m.top_fraction},
              {"vanilla", chair_json(m.vanilla)},
              {"guarded", chair_json(m.guarded)},
              {"interventions", m.interventions},
              {"suppressing", m.suppressing},
              {"changed_tokens", m.changed_tokens},
              {"median_alpha_min", opt_json(m.median_alpha_min)}};
}

MitigateSummary mitigate_from_json(const Json& j) {
  MitigateSummary m;
  try {
    m.tau = j.at("tau").is_null() ? std::numeric_limits<double>::infinity() : j.at("tau").get<double>();
    m.lambda = j.at("lambda").get<double>();
    m.top_fraction = j.at("top_fraction").get<double>();
    m.vanilla = chair_from_json(j.at("vanilla"));
    m.guarded = chair_from_json(j.at("guarded"));
    m.interventions = j.at("interventions").get<std::size_t>();
    m.suppressing = j.at("suppressing").get<std::size_t>();
    m.changed_tokens = j.at("changed_tokens").get<std::size_t>();
    if (!j.at("median_alpha_min").is_null()) m.median_alpha_min = j.at("median_alpha_min").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed mitigation summary: ") + e.what());
  }
  return m;
}

Json variant_json(const VariantResult& v) {
  return Json{{"name", v.name},           {"window", v.window},       {"kl", v.kl},
              {"best_epoch", v.best_epoch}, {"auroc_in", v.auroc_in}, {"auprc_in", v.auprc_in},
              {"auprc_out", v.auprc_out},  {"gap", v.gap}};
}

metrics::CaptionEval caption_of(const toyvlm::ModelConfig& mc, const std::vector<toyvlm::DecodeStep>& steps,
                                const toyvlm::SceneSpec& scene) {
  metrics::CaptionEval e;
  e.ground_truth = scene.present;
  for (const toyvlm::DecodeStep& s : steps) {
    if (toyvlm::is_object_token(mc, s.sampled_token)) {
      e.mentioned_objects.push_back(toyvlm::object_of_token(mc, s.sampled_token));
    }
  }
  return e;
}

struct VariantSpec {
  std::string name;
  std::optional<capture::LayerWindow> window;
  bool no_kl = false;
};

std::vector<VariantSpec> variant_specs(std::uint32_t layers) {
  return {{"vib", std::nullopt, false},
          {"no_kl", std::nullopt, true},
          {"shallow", shallow_half(layers), false},
          {"deep", deep_half(layers), false}};
}

// Scores one trained variant on its validation and shifted sets.
VariantResult score_variant(const RunConfig& cfg, const VariantSpec& v) {
  const Paths p = paths_for(cfg);
  const auto layers = static_cast<std::uint32_t>(cfg.model.n_layers);
  const std::string wsfx = window_suffix(v.window, layers);
  const probe::ProbeParams params = read_probe(p.probe(probe_suffix(v.window, layers, v.no_kl)));
  const capture::FeatureDataset valid = read_features(p.features("valid", wsfx));
  const capture::FeatureDataset shifted = read_features(p.features("shift", wsfx));
  check_probe_fits(params, valid.layers, valid.heads, valid.head_dim, "the validation set");

  VariantResult r;
  r.name = v.name;
  r.window = window_text(v.window.value_or(capture::LayerWindow{1, layers}));
  r.kl = !v.no_kl && cfg.probe.kl_enabled;
  const probe::DatasetScores scores = probe::score_dataset(valid, params);
  r.auroc_in = metrics::auroc(scores.logits, scores.labels);
  const metrics::GapReport gap = metrics::generalization_gap(params, valid, shifted);
  r.auprc_in = gap.auprc_in;
  r.auprc_out = gap.auprc_out;
  r.gap = gap.gap;
  return r;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  if (toy.n_scenes == 0 || toy.epochs <= 0 || toy.batch_size == 0 || !(toy.lr > 0.0) ||
      !(toy.distractor_rate >= 0.0 && toy.distractor_rate <= 1.0) || toy.weight_decay < 0.0) {
    throw ConfigError("toy_train: sizes must be positive, lr > 0, distractor_rate in [0, 1]");
  }
  if (data.probe_scenes < 2 || data.shift_scenes == 0 || data.eval_scenes == 0) {
    throw ConfigError("data: probe_scenes >= 2, shift_scenes and eval_scenes >= 1 required");
  }
  if (!(data.valid_fraction > 0.0 && data.valid_fraction < 1.0)) {
    throw ConfigError("data.valid_fraction must lie in (0, 1)");
  }
  probe::ProbeDims dims;
  dims.encoder = probe.encoder;
  dims.d_z = probe.d_z;
  dims.validate();
  if (!(probe.lr > 0.0) || probe.batch_size == 0 || probe.epochs <= 0 || !(probe.beta_cap >= 0.0) ||
      probe.weight_decay < 0.0) {
    throw ConfigError("probe: lr > 0, batch_size and epochs >= 1, beta_cap >= 0 required");
  }
  mitigation.validate();
}

RunConfig config_from_json(const Json& j) {
  RunConfig cfg;
  Fields root(j, "config");
  root.get("seed", cfg.seed);
  root.get("work_dir", cfg.work_dir);

  if (const Json* m = root.object("model")) {
    Fields f(*m, "model");
    f.get("n_layers", cfg.model.n_layers);
    f.get("n_heads", cfg.model.n_heads);
    f.get("head_dim", cfg.model.head_dim);
    f.get("n_objects", cfg.model.n_objects);
    f.get("max_present", cfg.model.max_present);
    f.get("mlp_dim", cfg.model.mlp_dim);
    f.get("max_seq", cfg.model.max_seq);
    f.finish();
  }
  if (const Json* t = root.object("toy_train")) {
    Fields f(*t, "toy_train");
    f.get("n_scenes", cfg.toy.n_scenes);
    f.get("epochs", cfg.toy.epochs);
    f.get("batch_size", cfg.toy.batch_size);
    f.get("lr", cfg.toy.lr);
    f.get("weight_decay", cfg.toy.weight_decay);
    f.get("distractor_rate", cfg.toy.distractor_rate);
    f.finish();
  }
  if (const Json* d = root.object("data")) {
    Fields f(*d, "data");
    f.get("probe_scenes", cfg.data.probe_scenes);
    f.get("shift_scenes", cfg.data.shift_scenes);
    f.get("eval_scenes", cfg.data.eval_scenes);
    f.get("valid_fraction", cfg.data.valid_fraction);
    f.get("last_token_only", cfg.data.last_token_only);
    f.finish();
  }
  if (const Json* p = root.object("probe")) {
    Fields f(*p, "probe");
    f.get("beta_cap", cfg.probe.beta_cap);
    f.get("beta_warmup_steps", cfg.probe.beta_warmup_steps);
    f.get("lr", cfg.probe.lr);
    f.get("weight_decay", cfg.probe.weight_decay);
    f.get("batch_size", cfg.probe.batch_size);
    f.get("epochs", cfg.probe.epochs);
    f.get("encoder", cfg.probe.encoder);
    f.get("d_z", cfg.probe.d_z);
    f.get("kl_enabled", cfg.probe.kl_enabled);
    f.get("standardize", cfg.probe.standardize);
    f.finish();
  }
  if (const Json* m = root.object("mitigation")) {
    Fields f(*m, "mitigation");
    if (const Json* tau = f.object("tau"); tau && !tau->is_null()) {
      if (!tau->is_number()) throw ConfigError("mitigation.tau: expected a number or null");
      cfg.mitigation.tau = tau->get<double>();
      cfg.calibrate_tau = false;
    }
    f.get("lambda", cfg.mitigation.lambda);
    f.get("top_fraction", cfg.mitigation.top_fraction);
    f.get("fallback_k", cfg.mitigation.fallback_k);
    f.finish();
  }
  root.finish();
  cfg.validate();
  return cfg;
}

Json config_to_json(const RunConfig& cfg) {
  const auto& m = cfg.model;
  const auto& t = cfg.toy;
  const auto& d = cfg.data;
  const auto& p = cfg.probe;
  const auto& g = cfg.mitigation;
  Json tau = nullptr;
  if (!cfg.calibrate_tau && std::isfinite(g.tau)) tau = g.tau;
  return Json{
      {"seed", cfg.seed},
      {"work_dir", cfg.work_dir},
      {"model",
       {{"n_layers", m.n_layers}, {"n_heads", m.n_heads}, {"head_dim", m.head_dim},
        {"n_objects", m.n_objects}, {"max_present", m.max_present}, {"mlp_dim", m.mlp_dim},
        {"max_seq", m.max_seq}}},
      {"toy_train",
       {{"n_scenes", t.n_scenes}, {"epochs", t.epochs}, {"batch_size", t.batch_size}, {"lr", t.lr},
        {"weight_decay", t.weight_decay}, {"distractor_rate", t.distractor_rate}}},
      {"data",
       {{"probe_scenes", d.probe_scenes}, {"shift_scenes", d.shift_scenes},
        {"eval_scenes", d.eval_scenes}, {"valid_fraction", d.valid_fraction},
        {"last_token_only", d.last_token_only}}},
      {"probe",
       {{"beta_cap", p.beta_cap}, {"beta_warmup_steps", p.beta_warmup_steps}, {"lr", p.lr},
        {"weight_decay", p.weight_decay}, {"batch_size", p.batch_size}, {"epochs", p.epochs},
        {"encoder", p.encoder}, {"d_z", p.d_z}, {"kl_enabled", p.kl_enabled},
        {"standardize", p.standardize}}},
      {"mitigation",
       {{"tau", tau}, {"lambda", g.lambda}, {"top_fraction", g.top_fraction},
        {"fallback_k", g.fallback_k}}},
  };
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

Paths paths_for(const RunConfig& cfg) { return Paths{fs::path(cfg.work_dir)}; }

std::string window_suffix(const std::optional<capture::LayerWindow>& w, std::uint32_t n_layers) {
  if (!w || (w->lo == 1 && w->hi == n_layers)) return "";
  return "_L" + std::to_string(w->lo) + "-" + std::to_string(w->hi);
}

std::string probe_suffix(const std::optional<capture::LayerWindow>& w, std::uint32_t n_layers, bool no_kl) {
  return window_suffix(w, n_layers) + (no_kl ? "_nokl" : "");
}

capture::LayerWindow shallow_half(std::uint32_t n_layers) {
  if (n_layers < 2) throw ConfigError("layer ablation needs at least two layers");
  return {1, n_layers / 2};
}

capture::LayerWindow deep_half(std::uint32_t n_layers) {
  if (n_layers < 2) throw ConfigError("layer ablation needs at least two layers");
  return {n_layers / 2 + 1, n_layers};
}

Rng stage_rng(std::uint64_t seed, std::uint64_t stage_tag) {
  return Rng(Rng::mix(Rng::mix(seed) ^ (stage_tag * 0x9e3779b97f4a7c15ULL)));
}

void write_scenes(const ScenePools& pools, const fs::path& path) {
  Json j;
  for (const auto& [name, list] : {std::pair{"probe", &pools.probe}, std::pair{"shift", &pools.shift},
                                   std::pair{"eval", &pools.eval}}) {
    Json arr = Json::array();
    for (const auto& s : *list) arr.push_back(scene_json(s));
    j[name] = std::move(arr);
  }
  write_text(path, j.dump() + "\n");
}

ScenePools read_scenes(const fs::path& path) {
  const Json j = read_json(path);
  ScenePools pools;
  for (const char* key : {"probe", "shift", "eval"}) {
    if (!j.contains(key)) throw DataError("scene file " + path.string() + " lacks '" + key + "'");
  }
  pools.probe = scenes_from_json(j.at("probe"), path.string());
  pools.shift = scenes_from_json(j.at("shift"), path.string());
  pools.eval = scenes_from_json(j.at("eval"), path.string());
  return pools;
}

GenDataSummary gen_data(const RunConfig& cfg) {
  cfg.validate();
  const Paths p = paths_for(cfg);
  require_dir(p.dir);

  Rng scene_rng = stage_rng(cfg.seed, kToyScenes);
  const auto train_scenes = toyvlm::generate_scenes(scene_rng, cfg.model, cfg.toy.n_scenes, 0);
  Rng data_rng = stage_rng(cfg.seed, kToyData);
  const auto data = toyvlm::make_training_set(cfg.model, train_scenes, cfg.toy.distractor_rate, data_rng);
  Rng train_rng = stage_rng(cfg.seed, kToyTrain);
  toyvlm::ToyTrainLog log;
  const toyvlm::ToyModel model = toyvlm::train_toy_model(data, cfg.model, cfg.toy, train_rng, &log);

  ScenePools pools;
  Rng probe_rng = stage_rng(cfg.seed, kProbePool);
  pools.probe = toyvlm::generate_scenes(probe_rng, cfg.model, cfg.data.probe_scenes, kProbePoolFirstId);
  Rng shift_rng = stage_rng(cfg.seed, kShiftPool);
  pools.shift = toyvlm::generate_scenes(shift_rng, cfg.model, cfg.data.shift_scenes, kShiftPoolFirstId,
                                        {.shifted = true});
  Rng eval_rng = stage_rng(cfg.seed, kEvalPool);
  pools.eval = toyvlm::generate_scenes(eval_rng, cfg.model, cfg.data.eval_scenes, kEvalPoolFirstId);

  toyvlm::save_model(model, p.model().string());
  write_scenes(pools, p.scenes());

  GenDataSummary s;
  s.epoch_loss = log.epoch_loss;
  Rng unused(0);
  const auto eval_data = toyvlm::make_training_set(cfg.model, pools.eval, 0.0, unused);
  s.token_accuracy = toyvlm::token_accuracy(model, eval_data);
  s.eval_stats = toyvlm::hallucination_stats(model, pools.eval, Rng::mix(cfg.seed ^ kHallucinationEval));
  s.model_hash = hash_of(p.model());

  write_json(p.summary("gen_data"),
             Json{{"epoch_loss", s.epoch_loss},
                  {"token_accuracy", s.token_accuracy},
                  {"eval_object_tokens", s.eval_stats.object_tokens},
                  {"eval_hallucinated", s.eval_stats.hallucinated},
                  {"eval_hallucination_rate", s.eval_stats.rate()},
                  {"model_hash", s.model_hash}});
  write_resolved_config(cfg, "gen-data", Json::object());
  return s;
}

ExtractSummary extract(const RunConfig& cfg, const ExtractOptions& opts) {
  cfg.validate();
  const Paths p = paths_for(cfg);
  require_dir(p.dir);
  require_file(p.model());
  const toyvlm::ToyModel model = toyvlm::load_model(p.model().string());
  const ScenePools pools = read_scenes(p.scenes());
  const auto layers = static_cast<std::uint32_t>(model.config.n_layers);
  const std::string wsfx = window_suffix(opts.layers, layers);
  auto sliced = [&](const capture::FeatureDataset& ds) {
    return opts.layers ? capture::slice_layers(ds, *opts.layers) : ds;
  };

  capture::CollectOptions co;
  co.last_token_only = cfg.data.last_token_only;
  co.shifted = opts.shift;

  ExtractSummary s;
  std::vector<std::pair<std::string, capture::FeatureDataset>> outputs;
  if (opts.shift) {
    Rng rng = stage_rng(cfg.seed, kCollectShift);
    outputs.emplace_back("shift", sliced(capture::collect(model, pools.shift, rng, co)));
  } else {
    Rng rng = stage_rng(cfg.seed, kCollect);
    const capture::FeatureDataset all = capture::collect(model, pools.probe, rng, co);
    Rng split_rng = stage_rng(cfg.seed, kSplit);
    auto [train, valid] = capture::split(all, 1.0 - cfg.data.valid_fraction, split_rng, true);
    outputs.emplace_back("train", sliced(train));
    outputs.emplace_back("valid", sliced(valid));
  }

  Json files = Json::object();
  for (const auto& [split, ds] : outputs) {
    const fs::path path = p.features(split, wsfx);
    capture::write_dataset(ds, path.string());
    s.files.emplace_back(split, path);
    s.examples += ds.count();
    s.positives += ds.positives();
    files[split] = Json{{"path", path.filename().string()},
                        {"examples", ds.count()},
                        {"positives", ds.positives()},
                        {"hash", hash_of(path)}};
  }
  const Json flags{{"shift", opts.shift}, {"layers", window_json(opts.layers)}};
  const std::string name = std::string("extract") + (opts.shift ? "_shift" : "") + wsfx;
  write_json(p.summary(name), Json{{"files", files}, {"flags", flags}});
  write_resolved_config(cfg, name, flags);
  return s;
}

TrainSummary train_probe(const RunConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  const Paths p = paths_for(cfg);
  require_dir(p.dir);
  const auto layers = static_cast<std::uint32_t>(cfg.model.n_layers);
  const std::string wsfx = window_suffix(opts.layers, layers);
  const std::string psfx = probe_suffix(opts.layers, layers, opts.no_kl);
  const capture::FeatureDataset train = read_features(p.features("train", wsfx));
  const capture::FeatureDataset valid = read_features(p.features("valid", wsfx));

  probe::TrainConfig tc = cfg.probe;
  tc.kl_enabled = cfg.probe.kl_enabled && !opts.no_kl;
  tc.seed = Rng::mix(cfg.seed ^ kProbeTrain);
  const probe::TrainResult result = probe::train_probe(train, valid, tc);
  probe::save_probe(result.params, p.probe(psfx).string());

  std::string log_text;
  for (const probe::EpochRecord& e : result.log.epochs) {
    log_text += Json{{"epoch", e.epoch},
                     {"loss", e.loss},
                     {"bce", e.bce},
                     {"kl", e.kl},
                     {"beta", e.beta},
                     {"valid_auroc", opt_json(e.valid_auroc)},
                     {"valid_auprc", opt_json(e.valid_auprc)}}
                    .dump();
    log_text += "\n";
  }
  write_text(p.train_log(psfx), log_text);

  TrainSummary s;
  s.best_epoch = result.log.best_epoch;
  const probe::EpochRecord& best = result.log.epochs.at(static_cast<std::size_t>(s.best_epoch - 1));
  s.best_valid_auroc = best.valid_auroc;
  s.best_valid_auprc = best.valid_auprc;
  s.probe_hash = hash_of(p.probe(psfx));
  const Json flags{{"no_kl", opts.no_kl}, {"layers", window_json(opts.layers)}};
  write_json(p.summary("train" + psfx), Json{{"best_epoch", s.best_epoch},
                                             {"best_valid_auroc", opt_json(s.best_valid_auroc)},
                                             {"best_valid_auprc", opt_json(s.best_valid_auprc)},
                                             {"probe_hash", s.probe_hash},
                                             {"flags", flags}});
  write_resolved_config(cfg, "train-probe" + psfx, flags);
  return s;
}

DetectSummary eval_detect(const RunConfig& cfg, const DetectOptions& opts) {
  cfg.validate();
  const Paths p = paths_for(cfg);
  require_dir(p.dir);
  const auto layers = static_cast<std::uint32_t>(cfg.model.n_layers);
  const std::string wsfx = window_suffix(opts.layers, layers);
  const std::string psfx = probe_suffix(opts.layers, layers, opts.no_kl);
  const probe::ProbeParams params = read_probe(p.probe(psfx));
  const fs::path data_path = p.features(opts.shift ? "shift" : "valid", wsfx);
  const capture::FeatureDataset ds = read_features(data_path);
  check_probe_fits(params, ds.layers, ds.heads, ds.head_dim, data_path.string());

  const probe::DatasetScores scores = probe::score_dataset(ds, params);
  DetectSummary s;
  s.examples = ds.count();
  s.positives = ds.positives();
  s.auroc = metrics::auroc(scores.logits, scores.labels);
  s.auprc = metrics::auprc(scores.logits, scores.labels);
  const metrics::AccuracyF1 af = metrics::accuracy_f1(scores.logits, scores.labels, 0.0);
  s.accuracy = af.accuracy;
  s.f1 = af.f1;
  const std::vector<double> constant(scores.logits.size(), 0.0);
  s.constant_auroc = metrics::auroc(constant, scores.labels);
  s.constant_auprc = metrics::auprc(constant, scores.labels);

  const Json flags{{"no_kl", opts.no_kl}, {"shift", opts.shift}, {"layers", window_json(opts.layers)}};
  write_json(p.summary("detect" + psfx + (opts.shift ? "_shift" : "")),
             Json{{"dataset", data_path.filename().string()},
                  {"examples", s.examples},
                  {"positives", s.positives},
                  {"auroc", s.auroc},
                  {"auprc", s.auprc},
                  {"accuracy", s.accuracy},
                  {"f1", s.f1},
                  {"constant_auroc", s.constant_auroc},
                  {"constant_auprc", s.constant_auprc},
                  {"flags", flags}});
  return s;
}

MitigateSummary mitigate(const RunConfig& cfg, const MitigateOptions& opts) {
  cfg.validate();
  const Paths p = paths_for(cfg);
  require_dir(p.dir);
  require_file(p.model());
  const toyvlm::ToyModel model = toyvlm::load_model(p.model().string());
  const probe::ProbeParams params = read_probe(p.probe(""));
  const toyvlm::ModelConfig& mc = model.config;
  check_probe_fits(params, static_cast<std::uint32_t>(mc.n_layers), static_cast<std::uint32_t>(mc.n_heads),
                   static_cast<std::uint32_t>(mc.head_dim), "the model");
  const ScenePools pools = read_scenes(p.scenes());

  mitigation::MitigationConfig mcfg = cfg.mitigation;
  if (opts.lambda) mcfg.lambda = *opts.lambda;
  if (opts.top_fraction) mcfg.top_fraction = *opts.top_fraction;
  if (opts.tau) {
    mcfg.tau = *opts.tau;
  } else if (cfg.calibrate_tau) {
    mcfg.tau = mitigation::calibrate_tau(read_features(p.features("train", "")), params);
  }
  mcfg.validate();

  std::vector<metrics::CaptionEval> vanilla_evals, guarded_evals;
  std::vector<double> alpha_mins;
  std::string log_text;
  MitigateSummary s;
  Rng rng = stage_rng(cfg.seed, kMitigate);
  for (const toyvlm::SceneSpec& scene : pools.eval) {
    const auto vanilla = toyvlm::decode(model, scene, rng);
    const mitigation::GuardedResult guarded = mitigation::guarded_decode(model, params, scene, mcfg, rng);
    vanilla_evals.push_back(caption_of(mc, vanilla, scene));
    guarded_evals.push_back(caption_of(mc, guarded.steps, scene));
    for (const mitigation::InterventionRecord& r : guarded.interventions) {
      ++s.interventions;
      s.changed_tokens += r.token_before != r.token_after ? 1 : 0;
      if (r.alpha_min < 1.0) {
        ++s.suppressing;
        alpha_mins.push_back(r.alpha_min);
      }
      log_text += Json{{"scene_id", r.scene_id},     {"step", r.step},
                       {"logit", r.logit},           {"tau", r.tau},
                       {"k_size", r.k_size},         {"alpha_min", r.alpha_min},
                       {"alpha_mean", r.alpha_mean}, {"token_before", r.token_before},
                       {"token_after", r.token_after}}
                      .dump();
      log_text += "\n";
    }
  }
  write_text(p.interventions(), log_text);

  s.tau = mcfg.tau;
  s.lambda = mcfg.lambda;
  s.top_fraction = mcfg.top_fraction;
  s.vanilla = metrics::chair(vanilla_evals);
  s.guarded = metrics::chair(guarded_evals);
  if (!alpha_mins.empty()) {
    const auto mid = alpha_mins.begin() + static_cast<std::ptrdiff_t>(alpha_mins.size() / 2);
    std::nth_element(alpha_mins.begin(), mid, alpha_mins.end());
    double median = *mid;
    if (alpha_mins.size() % 2 == 0) median = 0.5 * (median + *std::max_element(alpha_mins.begin(), mid));
    s.median_alpha_min = median;
  }

  write_json(p.summary("mitigate"), mitigate_json(s));
  write_resolved_config(cfg, "mitigate",
                        Json{{"tau", opts.tau ? Json(*opts.tau) : Json(nullptr)},
                             {"lambda", opts.lambda ? Json(*opts.lambda) : Json(nullptr)},
                             {"top_frac", opts.top_fraction ? Json(*opts.top_fraction) : Json(nullptr)}});
  return s;
}

const VariantResult& AblationSummary::get(const std::string& name) const {
  for (const VariantResult& v : variants) {
    if (v.name == name) return v;
  }
  throw DataError("ablation has no variant '" + name + "'");
}

AblationSummary ablate(const RunConfig& cfg) {
  cfg.validate();
  const Paths p = paths_for(cfg);
  require_dir(p.dir);
  const auto layers = static_cast<std::uint32_t>(cfg.model.n_layers);

  // Sliced copies of the full-window datasets for the layer variants.
  for (const std::string split : {"train", "valid", "shift"}) {
    const capture::FeatureDataset full = read_features(p.features(split, ""));
    for (const capture::LayerWindow w : {shallow_half(layers), deep_half(layers)}) {
      capture::write_dataset(capture::slice_layers(full, w), p.features(split, window_suffix(w, layers)).string());
    }
  }

  AblationSummary s;
  Json rows = Json::array();
  for (const VariantSpec& v : variant_specs(layers)) {
    const TrainSummary t = train_probe(cfg, TrainOptions{v.no_kl, v.window});
    VariantResult r = score_variant(cfg, v);
    r.best_epoch = t.best_epoch;
    rows.push_back(variant_json(r));
    s.variants.push_back(std::move(r));
  }
  write_json(p.summary("ablation"), Json{{"variants", rows}});
  write_resolved_config(cfg, "ablate", Json::object());
  return s;
}

ReportSummary report(const RunConfig& cfg) {
  cfg.validate();
  const Paths p = paths_for(cfg);
  require_dir(p.dir);
  const auto layers = static_cast<std::uint32_t>(cfg.model.n_layers);

  ReportSummary s;
  Json checks = Json::array();
  for (const VariantSpec& v : variant_specs(layers)) {
    const std::string psfx = probe_suffix(v.window, layers, v.no_kl);
    const bool required = !v.window;
    if (!required && !fs::exists(p.probe(psfx))) continue;
    VariantResult r = score_variant(cfg, v);

    // The log's best epoch must be the first epoch with the highest validation
    // AUPRC, and the checkpoint must reproduce that value.
    const fs::path log_path = p.train_log(psfx);
    require_file(log_path);
    std::ifstream in(log_path);
    std::string line;
    double best = -1.0;
    int best_epoch = 0;
    while (std::getline(in, line)) {
      const Json e = Json::parse(line);
      if (e.at("valid_auprc").is_null()) continue;
      const double a = e.at("valid_auprc").get<double>();
      if (a > best) {
        best = a;
        best_epoch = e.at("epoch").get<int>();
      }
    }
    const Json claimed = read_json(p.summary("train" + psfx));
    const bool consistent = claimed.at("best_epoch").get<int>() == best_epoch &&
                            std::abs(best - r.auprc_in) <= 1e-12;
    s.logs_consistent = s.logs_consistent && consistent;
    checks.push_back(Json{{"variant", v.name}, {"log_best_epoch", best_epoch},
                          {"log_best_auprc", best}, {"recomputed_auprc", r.auprc_in},
                          {"consistent", consistent}});
    r.best_epoch = best_epoch;
    s.rows.push_back(std::move(r));
  }
  s.probe_hash = hash_of(p.probe(""));
  if (fs::exists(p.summary("mitigate"))) s.mitigation = mitigate_from_json(read_json(p.summary("mitigate")));

  Json rows = Json::array();
  for (const VariantResult& r : s.rows) rows.push_back(variant_json(r));
  Json j{{"variants", rows}, {"log_checks", checks}, {"logs_consistent", s.logs_consistent},
         {"probe_hash", s.probe_hash}};
  if (s.mitigation) j["mitigation"] = mitigate_json(*s.mitigation);
  write_json(p.summary("report"), j);

  std::ostringstream md;
  md.setf(std::ios::fixed);
  md.precision(4);
  auto find = [&](const std::string& name) -> const VariantResult* {
    for (const VariantResult& r : s.rows) {
      if (r.name == name) return &r;
    }
    return nullptr;
  };
  md << "# Run report (seed " << cfg.seed << ")\n\n";
  md << "Probe checkpoint hash: `" << s.probe_hash << "`\n\n";
  md << "## KL ablation\n\n| probe | AUROC (valid) | AUPRC in | AUPRC out (shift) | gap |\n|---|---|---|---|---|\n";
  for (const char* name : {"vib", "no_kl"}) {
    const VariantResult* r = find(name);
    md << "| " << (std::string(name) == "vib" ? "VIB (BCE + KL)" : "BCE only") << " | " << r->auroc_in
       << " | " << r->auprc_in << " | " << r->auprc_out << " | " << r->gap << " |\n";
  }
  if (find("shallow") && find("deep")) {
    md << "\n## Layer ablation\n\n| layers | AUROC (valid) | AUPRC (valid) |\n|---|---|---|\n";
    for (const char* name : {"shallow", "deep", "vib"}) {
      const VariantResult* r = find(name);
      md << "| " << r->window << " | " << r->auroc_in << " | " << r->auprc_in << " |\n";
    }
  }
  if (s.mitigation) {
    const MitigateSummary& m = *s.mitigation;
    auto ci = [](const metrics::ChairResult& c) { return c.chair_i ? *c.chair_i : 0.0; };
    md << "\n## Mitigation\n\n| decoding | CHAIR_i | CHAIR_s |\n|---|---|---|\n";
    md << "| vanilla | " << ci(m.vanilla) << " | " << m.vanilla.chair_s << " |\n";
    md << "| guarded | " << ci(m.guarded) << " | " << m.guarded.chair_s << " |\n";
    md << "\ntau " << m.tau << ", lambda " << m.lambda << ", top fraction " << m.top_fraction << ": "
       << m.interventions << " interventions, " << m.suppressing << " scaled a head, " << m.changed_tokens
       << " changed the token";
    if (m.median_alpha_min) md << ", median alpha " << *m.median_alpha_min;
    md << "\n";
  }
  md << "\nTraining logs consistent with checkpoints: " << (s.logs_consistent ? "yes" : "NO") << "\n";
  write_text(p.report_md(), md.str());
  return s;
}

ReportSummary run_all(const RunConfig& cfg) {
  gen_data(cfg);
  extract(cfg, ExtractOptions{});
  extract(cfg, ExtractOptions{.shift = true, .layers = std::nullopt});
  ablate(cfg);
  eval_detect(cfg, DetectOptions{});
  eval_detect(cfg, DetectOptions{.no_kl = true, .shift = true, .layers = std::nullopt});
  eval_detect(cfg, DetectOptions{.no_kl = false, .shift = true, .layers = std::nullopt});
  mitigate(cfg, {});
  return report(cfg);
}

}  // namespace vib::pipeline
