#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vib/capture.hpp"
#include "vib/metrics.hpp"
#include "vib/mitigation.hpp"
#include "vib/probe.hpp"
#include "vib/toyvlm.hpp"

// End-to-end experiment stages. Stages hand off through files in a single
// working directory; each one writes its outputs plus the configuration it ran
// with, and every output is a pure function of (config, seed, input files).
namespace vib::pipeline {

using Json = nlohmann::ordered_json;

struct DataConfig {
  std::size_t probe_scenes = 4000;  // in-domain pool for probe datasets
  std::size_t shift_scenes = 2000;  // shifted pool, test only
  std::size_t eval_scenes = 300;    // held-out pool for hallucination rate and mitigation
  double valid_fraction = 0.2;
  bool last_token_only = false;
};

// Probe training settings for the toy pipeline. The library default learning
// rate leaves the probe still improving after 30 epochs.
inline probe::TrainConfig desk_probe_defaults() {
  probe::TrainConfig c;
  c.lr = 1e-3;
  c.epochs = 20;
  return c;
}

struct RunConfig {
  std::uint64_t seed = 1;
  std::string work_dir = "run";
  toyvlm::ModelConfig model;
  toyvlm::ToyTrainConfig toy;
  DataConfig data;
  probe::TrainConfig probe = desk_probe_defaults();  // probe.seed is derived from `seed`
  mitigation::MitigationConfig mitigation;
  bool calibrate_tau = true;       // when true, mitigation.tau is replaced by the training mean

  void validate() const;
};

// Unknown keys anywhere in the document are rejected with ConfigError.
RunConfig config_from_json(const Json& j);
Json config_to_json(const RunConfig& cfg);
RunConfig load_config(const std::string& path);

// File layout inside the working directory. A non-full layer window adds an
// "_L<lo>-<hi>" suffix, the KL ablation adds "_nokl".
struct Paths {
  std::filesystem::path dir;

  std::filesystem::path model() const { return dir / "model.tvlm"; }
  std::filesystem::path scenes() const { return dir / "scenes.json"; }
  std::filesystem::path features(const std::string& split, const std::string& suffix) const {
    return dir / ("features_" + split + suffix + ".vibf");
  }
  std::filesystem::path probe(const std::string& suffix) const { return dir / ("probe" + suffix + ".vibp"); }
  std::filesystem::path train_log(const std::string& suffix) const {
    return dir / ("train_log" + suffix + ".jsonl");
  }
  std::filesystem::path summary(const std::string& name) const { return dir / (name + ".json"); }
  std::filesystem::path interventions() const { return dir / "interventions.jsonl"; }
  std::filesystem::path report_md() const { return dir / "report.md"; }
};

Paths paths_for(const RunConfig& cfg);

// "" for the full window, "_L<lo>-<hi>" otherwise.
std::string window_suffix(const std::optional<capture::LayerWindow>& w, std::uint32_t n_layers);
std::string probe_suffix(const std::optional<capture::LayerWindow>& w, std::uint32_t n_layers, bool no_kl);

capture::LayerWindow shallow_half(std::uint32_t n_layers);
capture::LayerWindow deep_half(std::uint32_t n_layers);

// Independent stream for a named stage, derived from the run seed.
Rng stage_rng(std::uint64_t seed, std::uint64_t stage_tag);

struct ScenePools {
  std::vector<toyvlm::SceneSpec> probe, shift, eval;
};
void write_scenes(const ScenePools& pools, const std::filesystem::path& path);
ScenePools read_scenes(const std::filesystem::path& path);

// ---- stages ----

struct GenDataSummary {
  std::vector<double> epoch_loss;
  double token_accuracy = 0.0;
  toyvlm::HallucinationStats eval_stats;
  std::string model_hash;
};
// Trains the toy model and draws the scene pools.
GenDataSummary gen_data(const RunConfig& cfg);

struct ExtractOptions {
  bool shift = false;
  std::optional<capture::LayerWindow> layers;
};
struct ExtractSummary {
  std::vector<std::pair<std::string, std::filesystem::path>> files;  // (split, path)
  std::size_t examples = 0;
  std::size_t positives = 0;
};
// In-domain: collect, grouped split, write train/valid. Shifted: write the
// whole shifted pool as one test set.
ExtractSummary extract(const RunConfig& cfg, const ExtractOptions& opts);

struct TrainOptions {
  bool no_kl = false;
  std::optional<capture::LayerWindow> layers;
};
struct TrainSummary {
  int best_epoch = 0;
  std::optional<double> best_valid_auroc;
  std::optional<double> best_valid_auprc;
  std::string probe_hash;
};
TrainSummary train_probe(const RunConfig& cfg, const TrainOptions& opts);

struct DetectOptions {
  bool no_kl = false;
  bool shift = false;
  std::optional<capture::LayerWindow> layers;
};
struct DetectSummary {
  std::size_t examples = 0;
  std::size_t positives = 0;
  double auroc = 0.0;
  double auprc = 0.0;
  double accuracy = 0.0;  // at p = 0.5
  double f1 = 0.0;
  double constant_auroc = 0.5;  // trivial baseline: every score equal
  double constant_auprc = 0.0;  // equals the positive rate
};
// Read-only. Scores the validation split, or the shifted set with `shift`.
DetectSummary eval_detect(const RunConfig& cfg, const DetectOptions& opts);

struct MitigateOptions {
  std::optional<double> tau;
  std::optional<double> lambda;
  std::optional<double> top_fraction;
};
struct MitigateSummary {
  double tau = 0.0;
  double lambda = 0.0;
  double top_fraction = 0.0;
  metrics::ChairResult vanilla;
  metrics::ChairResult guarded;
  std::size_t interventions = 0;
  std::size_t suppressing = 0;  // interventions that scaled at least one head
  std::size_t changed_tokens = 0;
  std::optional<double> median_alpha_min;  // over suppressing interventions
};
// Vanilla and guarded greedy decoding over the held-out pool; writes paired
// CHAIR metrics and the intervention log.
MitigateSummary mitigate(const RunConfig& cfg, const MitigateOptions& opts);

struct VariantResult {
  std::string name;
  std::string window;  // "lo:hi"
  bool kl = true;
  int best_epoch = 0;
  double auroc_in = 0.0;
  double auprc_in = 0.0;
  double auprc_out = 0.0;
  double gap = 0.0;
};
struct AblationSummary {
  std::vector<VariantResult> variants;  // vib, no_kl, shallow, deep
  const VariantResult& get(const std::string& name) const;
};
// Trains the full-window probe with and without KL and the shallow-half and
// deep-half probes (writing the usual probe files), then scores each on the
// validation and shifted sets. Needs both extract runs.
AblationSummary ablate(const RunConfig& cfg);

struct ReportSummary {
  std::vector<VariantResult> rows;
  bool logs_consistent = true;
  std::string probe_hash;
  std::optional<MitigateSummary> mitigation;
};
// Read-only. Recomputes every metric from the probe checkpoints and datasets,
// cross-checks the training logs, and writes report.json and report.md.
ReportSummary report(const RunConfig& cfg);

// gen-data, both extracts, ablate, mitigate, report.
ReportSummary run_all(const RunConfig& cfg);

}  // namespace vib::pipeline
