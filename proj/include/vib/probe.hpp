#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vib/capture.hpp"
#include "vib/head_output.hpp"
#include "vib/rng.hpp"
#include "vib/tape.hpp"
#include "vib/tensor.hpp"

// Variational information bottleneck probe.
//
//   v (flattened head outputs) -> encoder -> h
//   h -> posterior head -> [mu, log sigma^2]        q(z | v) = N(mu, diag sigma^2)
//   z = mu + sigma * eps (training) or z = mu (inference)
//   s = w^T z + b,  p = sigmoid(s)
//
// Trained on BCE(y, p) + beta * KL(q(z|v) || N(0, I)).
namespace vib::probe {

inline constexpr double kLogVarMin = -15.0;
inline constexpr double kLogVarMax = 15.0;

struct ProbeDims {
  std::uint32_t layers = 4;
  std::uint32_t heads = 4;
  std::uint32_t head_dim = 16;
  std::vector<std::size_t> encoder{256, 128, 64};  // e1, e2, d_f
  std::size_t d_z = 32;

  std::size_t input_size() const { return static_cast<std::size_t>(layers) * heads * head_dim; }
  std::size_t d_f() const { return encoder.back(); }
  void validate() const;
  bool operator==(const ProbeDims&) const = default;
};

// LayerNorm -> affine -> GELU -> affine, plus the skip connection.
struct ResidualBlock {
  Tensor ln_gain, ln_bias;
  Tensor w1, b1, w2, b2;
  bool operator==(const ResidualBlock&) const = default;
};

struct ProbeParams {
  ProbeDims dims;
  std::vector<Tensor> enc_w, enc_b;  // three affine layers, each followed by GELU
  std::vector<ResidualBlock> blocks;  // two
  Tensor post_w, post_b;              // d_f x 2 d_z; columns [0, d_z) are mu
  Tensor cls_w;                       // d_z x 1
  Tensor cls_b;                       // 1 x 1
  // Optional input standardizer fitted on the training split; applied as
  // (v - mean) * inv_std before the encoder. Not trained.
  std::optional<Tensor> input_mean, input_inv_std;

  // Affine weights ~ N(0, 2 / fan_in), biases 0, LayerNorm gain 1.
  static ProbeParams init(const ProbeDims& dims, Rng& rng);
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  bool operator==(const ProbeParams&) const = default;
};

// Parameters bound onto a tape.
struct ProbeVars {
  std::vector<Var> enc_w, enc_b;
  struct Block {
    Var ln_gain, ln_bias, w1, b1, w2, b2;
  };
  std::vector<Block> blocks;
  Var post_w, post_b, cls_w, cls_b;
  std::optional<Var> input_shift;  // -mean, 1 x input
  std::optional<Tensor> input_inv_std;
  std::vector<Var> all;  // trainable, same order as ProbeParams::parameters()
};

ProbeVars bind(Tape& tape, const ProbeParams& params, bool requires_grad);

// Graph builders over a batch of rows.
Var encode(const ProbeVars& p, Var inputs);
struct PosteriorVars {
  Var mu, log_var;
};
PosteriorVars posterior(const ProbeVars& p, Var h);
Var risk_logits(const ProbeVars& p, Var z);

struct GaussianPosterior {
  std::vector<double> mu;
  std::vector<double> log_var;
};

struct RiskScore {
  double logit = 0.0;
  double prob = 0.5;
};

std::vector<double> encode(const HeadOutputTensor& v, const ProbeParams& params);
GaussianPosterior posterior(std::span<const double> h, const ProbeParams& params);
// z = mu + exp(log_var / 2) * eps with eps ~ N(0, I).
std::vector<double> sample_latent(const GaussianPosterior& post, Rng& rng);
std::vector<double> sample_latent(const GaussianPosterior& post, std::span<const double> eps);
// Deterministic path: s = w^T mu + b.
RiskScore infer_logit(const HeadOutputTensor& v, const ProbeParams& params);
double sigmoid(double s);
// -y log p - (1 - y) log(1 - p), evaluated as softplus(s) - y s.
double bce(int y, double logit);
// 1/2 sum (mu^2 + sigma^2 - log sigma^2 - 1)
double kl_to_standard_normal(const GaussianPosterior& post);

struct TrainConfig {
  double beta_cap = 3e-4;
  // Steps to reach beta_cap; 0 means one epoch of steps.
  std::size_t beta_warmup_steps = 0;
  double lr = 2e-5;
  double weight_decay = 0.01;
  std::size_t batch_size = 32;
  int epochs = 30;
  std::vector<std::size_t> encoder{256, 128, 64};
  std::size_t d_z = 32;
  std::uint64_t seed = 0;
  bool kl_enabled = true;
  bool standardize = false;
};

// beta_cap * min(1, step / warmup_steps)
double beta_schedule(std::size_t step, const TrainConfig& cfg, std::size_t warmup_steps);

struct LossParts {
  double loss = 0.0;
  double bce = 0.0;  // batch mean
  double kl = 0.0;   // batch mean; 0 when the KL term is disabled
};

struct LossGraph {
  Var loss;
  LossParts parts;
};

// Builds mean_batch[BCE + beta * KL] with the given reparameterization noise
// (batch x d_z).
LossGraph build_vib_loss(const ProbeVars& p, Var inputs, std::span<const int> labels,
                         const Tensor& noise, double beta, bool kl_enabled);

// Batch as a matrix plus labels.
struct Batch {
  Tensor inputs;  // n x input_size
  std::vector<int> labels;
};
Batch make_batch(const capture::FeatureDataset& ds, std::span<const std::size_t> indices);

LossParts vib_loss(const Batch& batch, const ProbeParams& params, double beta, const Tensor& noise,
                   bool kl_enabled = true);
// Draws the noise from rng. Throws DataError on an empty batch.
LossParts vib_loss(const Batch& batch, const ProbeParams& params, double beta, Rng& rng,
                   bool kl_enabled = true);

struct LossAndGrads {
  LossParts parts;
  std::vector<Tensor> grads;  // same order as ProbeParams::parameters()
};
LossAndGrads vib_loss_grads(const Batch& batch, const ProbeParams& params, double beta,
                            const Tensor& noise, bool kl_enabled = true);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double loss = 0.0;
  double bce = 0.0;
  double kl = 0.0;
  double beta = 0.0;
  std::optional<double> valid_auroc;
  std::optional<double> valid_auprc;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
};

struct TrainResult {
  ProbeParams params;
  TrainLog log;
};

// AdamW on vib_loss with the beta warm-up; returns the parameters of the epoch
// with the best validation AUPRC. Throws DataError when the training set has a
// single class and ShapeError when the splits' feature dims differ.
TrainResult train_probe(const capture::FeatureDataset& train, const capture::FeatureDataset& valid,
                        const TrainConfig& cfg);

struct DatasetScores {
  std::vector<double> logits;
  std::vector<int> labels;
};
DatasetScores score_dataset(const capture::FeatureDataset& ds, const ProbeParams& params);

void save_probe(const ProbeParams& params, const std::string& path);
ProbeParams load_probe(const std::string& path);

}  // namespace vib::probe
