#include <cmath>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "vib/error.hpp"
#include "vib/pipeline.hpp"

namespace pl = vib::pipeline;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> work_dir;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON config file (defaults apply to missing keys)");
  cmd->add_option("--seed", c.seed, "Run seed");
  cmd->add_option("--work-dir", c.work_dir, "Directory holding every stage's inputs and outputs");
}

pl::RunConfig resolve(const Common& c) {
  pl::RunConfig cfg = c.config_path.empty() ? pl::RunConfig{} : pl::load_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  if (c.work_dir) cfg.work_dir = *c.work_dir;
  cfg.validate();
  return cfg;
}

std::optional<vib::capture::LayerWindow> window_of(const std::string& text) {
  if (text.empty()) return std::nullopt;
  try {
    return vib::capture::parse_window(text);
  } catch (const std::exception& e) {
    throw vib::ConfigError(std::string("--layers: ") + e.what());
  }
}

void print(const pl::Json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train and evaluate hallucination-risk probes on a toy vision-language model"};
  app.require_subcommand(1);

  Common common;
  std::string layers;
  bool no_kl = false;
  bool shift = false;
  std::optional<double> tau, lambda, top_frac;

  auto* gen = app.add_subcommand("gen-data", "Train the toy model and draw the scene pools");
  auto* ext = app.add_subcommand("extract", "Collect labeled head-output features");
  auto* trn = app.add_subcommand("train-probe", "Train a probe on the extracted features");
  auto* det = app.add_subcommand("eval-detect", "Score a trained probe");
  auto* mit = app.add_subcommand("mitigate", "Compare vanilla and guarded decoding");
  auto* abl = app.add_subcommand("ablate", "Train and score the KL and layer ablation probes");
  auto* rep = app.add_subcommand("report", "Recompute every metric and write report.json/report.md");
  auto* run = app.add_subcommand("run", "Run every stage in order");
  for (auto* cmd : {gen, ext, trn, det, mit, abl, rep, run}) add_common(cmd, common);
  for (auto* cmd : {ext, trn, det}) cmd->add_option("--layers", layers, "Layer window lo:hi (1-based, inclusive)");
  for (auto* cmd : {trn, det}) cmd->add_flag("--no-kl", no_kl, "Drop the KL term (BCE only)");
  for (auto* cmd : {ext, det}) cmd->add_flag("--shift", shift, "Use the distribution-shifted scene pool");
  mit->add_option("--tau", tau, "Risk-logit threshold (default: training-set mean)");
  mit->add_option("--lambda", lambda, "Suppression strength");
  mit->add_option("--top-frac", top_frac, "Fraction of heads to suppress");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const pl::RunConfig cfg = resolve(common);
    if (*gen) {
      const pl::GenDataSummary s = pl::gen_data(cfg);
      print({{"final_loss", s.epoch_loss.empty() ? 0.0 : s.epoch_loss.back()},
             {"token_accuracy", s.token_accuracy},
             {"hallucination_rate", s.eval_stats.rate()},
             {"model_hash", s.model_hash}});
    } else if (*ext) {
      const pl::ExtractSummary s = pl::extract(cfg, {shift, window_of(layers)});
      pl::Json files = pl::Json::object();
      for (const auto& [split, path] : s.files) files[split] = path.string();
      print({{"files", files}, {"examples", s.examples}, {"positives", s.positives}});
    } else if (*trn) {
      const pl::TrainSummary s = pl::train_probe(cfg, {no_kl, window_of(layers)});
      print({{"best_epoch", s.best_epoch},
             {"best_valid_auroc", s.best_valid_auroc ? pl::Json(*s.best_valid_auroc) : pl::Json(nullptr)},
             {"best_valid_auprc", s.best_valid_auprc ? pl::Json(*s.best_valid_auprc) : pl::Json(nullptr)},
             {"probe_hash", s.probe_hash}});
    } else if (*det) {
      const pl::DetectSummary s = pl::eval_detect(cfg, {no_kl, shift, window_of(layers)});
      print({{"examples", s.examples}, {"positives", s.positives}, {"auroc", s.auroc}, {"auprc", s.auprc},
             {"accuracy", s.accuracy}, {"f1", s.f1}, {"constant_auprc", s.constant_auprc}});
    } else if (*mit) {
      const pl::MitigateSummary s = pl::mitigate(cfg, {tau, lambda, top_frac});
      auto ci = [](const vib::metrics::ChairResult& c) { return c.chair_i ? pl::Json(*c.chair_i) : pl::Json(nullptr); };
      print({{"tau", std::isfinite(s.tau) ? pl::Json(s.tau) : pl::Json(s.tau > 0 ? "inf" : "-inf")},
             {"lambda", s.lambda},
             {"top_fraction", s.top_fraction},
             {"vanilla_chair_i", ci(s.vanilla)},
             {"vanilla_chair_s", s.vanilla.chair_s},
             {"guarded_chair_i", ci(s.guarded)},
             {"guarded_chair_s", s.guarded.chair_s},
             {"interventions", s.interventions},
             {"suppressing", s.suppressing},
             {"changed_tokens", s.changed_tokens},
             {"median_alpha_min", s.median_alpha_min ? pl::Json(*s.median_alpha_min) : pl::Json(nullptr)}});
    } else if (*abl) {
      const pl::AblationSummary s = pl::ablate(cfg);
      pl::Json rows = pl::Json::array();
      for (const auto& v : s.variants) {
        rows.push_back({{"name", v.name}, {"window", v.window}, {"auroc_in", v.auroc_in},
                        {"auprc_in", v.auprc_in}, {"auprc_out", v.auprc_out}, {"gap", v.gap}});
      }
      print(rows);
    } else if (*rep) {
      const pl::ReportSummary s = pl::report(cfg);
      std::cout << "wrote " << pl::paths_for(cfg).report_md().string() << "\n";
      if (!s.logs_consistent) {
        std::cerr << "error: training logs disagree with the checkpoints\n";
        return 3;
      }
    } else if (*run) {
      const pl::ReportSummary s = pl::run_all(cfg);
      std::cout << "wrote " << pl::paths_for(cfg).report_md().string() << "\n";
      if (!s.logs_consistent) return 3;
    }
  } catch (const vib::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const vib::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 4;
  } catch (const vib::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const vib::ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
