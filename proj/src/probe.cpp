#include "vib/probe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "vib/adamw.hpp"
#include "vib/binio.hpp"
#include "vib/error.hpp"
#include "vib/metrics.hpp"

namespace vib::probe {
namespace {

constexpr char kMagic[5] = "VIBP";
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kResidualBlocks = 2;

Tensor he_normal(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return Tensor::randn({fan_in, fan_out}, std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

std::string dims_string(std::uint32_t l, std::uint32_t h, std::uint32_t d) {
  return std::to_string(l) + "x" + std::to_string(h) + "x" + std::to_string(d);
}

void check_input_dims(const ProbeDims& dims, std::uint32_t l, std::uint32_t h, std::uint32_t d) {
  if (dims.layers != l || dims.heads != h || dims.head_dim != d) {
    throw ShapeError("probe expects head outputs of shape " +
                     dims_string(dims.layers, dims.heads, dims.head_dim) + ", got " +
                     dims_string(l, h, d));
  }
}

// Applies the optional standardizer on the tape so gradients reach raw inputs.
Var prepare_inputs(const ProbeVars& p, Var inputs) {
  if (!p.input_shift) return inputs;
  Var shifted = ops::add_row(inputs, *p.input_shift);
  const std::size_t n = inputs.value().rows();
  const std::size_t m = inputs.value().cols();
  Tensor tiled({n, m});
  for (std::size_t r = 0; r < n; ++r) {
    std::copy(p.input_inv_std->data().begin(), p.input_inv_std->data().end(),
              tiled.data().begin() + static_cast<std::ptrdiff_t>(r * m));
  }
  return ops::mul(shifted, inputs.tape->constant(std::move(tiled)));
}

}  // namespace

void ProbeDims::validate() const {
  if (layers == 0 || heads == 0 || head_dim == 0) throw ConfigError("probe: zero input dimension");
  if (encoder.size() != 3) throw ConfigError("probe: encoder must have exactly three layer widths");
  for (std::size_t w : encoder) {
    if (w == 0) throw ConfigError("probe: encoder widths must be positive");
  }
  if (d_z == 0) throw ConfigError("probe: bottleneck dimension must be positive");
}

ProbeParams ProbeParams::init(const ProbeDims& dims, Rng& rng) {
  dims.validate();
  ProbeParams p;
  p.dims = dims;
  std::size_t fan_in = dims.input_size();
  for (std::size_t width : dims.encoder) {
    p.enc_w.push_back(he_normal(fan_in, width, rng));
    p.enc_b.push_back(Tensor({1, width}));
    fan_in = width;
  }
  const std::size_t df = dims.d_f();
  for (std::size_t b = 0; b < kResidualBlocks; ++b) {
    ResidualBlock block;
    block.ln_gain = Tensor({1, df}, 1.0);
    block.ln_bias = Tensor({1, df});
    block.w1 = he_normal(df, df, rng);
    block.b1 = Tensor({1, df});
    block.w2 = he_normal(df, df, rng);
    block.b2 = Tensor({1, df});
    p.blocks.push_back(std::move(block));
  }
  p.post_w = he_normal(df, 2 * dims.d_z, rng);
  p.post_b = Tensor({1, 2 * dims.d_z});
  p.cls_w = he_normal(dims.d_z, 1, rng);
  p.cls_b = Tensor({1, 1});
  return p;
}

std::vector<Tensor*> ProbeParams::parameters() {
  std::vector<Tensor*> ps;
  for (std::size_t i = 0; i < enc_w.size(); ++i) {
    ps.push_back(&enc_w[i]);
    ps.push_back(&enc_b[i]);
  }
  for (ResidualBlock& b : blocks) {
    for (Tensor* t : {&b.ln_gain, &b.ln_bias, &b.w1, &b.b1, &b.w2, &b.b2}) ps.push_back(t);
  }
  for (Tensor* t : {&post_w, &post_b, &cls_w, &cls_b}) ps.push_back(t);
  return ps;
}

std::vector<const Tensor*> ProbeParams::parameters() const {
  auto ps = const_cast<ProbeParams*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

ProbeVars bind(Tape& tape, const ProbeParams& params, bool requires_grad) {
  ProbeVars v;
  auto put = [&](const Tensor& t) {
    Var var = tape.leaf(t, requires_grad);
    v.all.push_back(var);
    return var;
  };
  for (std::size_t i = 0; i < params.enc_w.size(); ++i) {
    v.enc_w.push_back(put(params.enc_w[i]));
    v.enc_b.push_back(put(params.enc_b[i]));
  }
  for (const ResidualBlock& b : params.blocks) {
    ProbeVars::Block block;
    block.ln_gain = put(b.ln_gain);
    block.ln_bias = put(b.ln_bias);
    block.w1 = put(b.w1);
    block.b1 = put(b.b1);
    block.w2 = put(b.w2);
    block.b2 = put(b.b2);
    v.blocks.push_back(block);
  }
  v.post_w = put(params.post_w);
  v.post_b = put(params.post_b);
  v.cls_w = put(params.cls_w);
  v.cls_b = put(params.cls_b);
  if (params.input_mean) {
    Tensor shift = *params.input_mean;
    for (double& x : shift.data()) x = -x;
    v.input_shift = tape.constant(std::move(shift));
    v.input_inv_std = params.input_inv_std;
  }
  return v;
}

Var encode(const ProbeVars& p, Var inputs) {
  Var h = prepare_inputs(p, inputs);
  for (std::size_t i = 0; i < p.enc_w.size(); ++i) h = ops::gelu(ops::affine(h, p.enc_w[i], p.enc_b[i]));
  for (const ProbeVars::Block& b : p.blocks) {
    Var inner = ops::gelu(ops::affine(ops::layer_norm(h, b.ln_gain, b.ln_bias), b.w1, b.b1));
    h = ops::add(h, ops::affine(inner, b.w2, b.b2));
  }
  return h;
}

PosteriorVars posterior(const ProbeVars& p, Var h) {
  Var stats = ops::affine(h, p.post_w, p.post_b);
  const std::size_t dz = stats.value().cols() / 2;
  return {ops::slice_cols(stats, 0, dz),
          ops::clamp(ops::slice_cols(stats, dz, 2 * dz), kLogVarMin, kLogVarMax)};
}

Var risk_logits(const ProbeVars& p, Var z) { return ops::add_row(ops::matmul(z, p.cls_w), p.cls_b); }

std::vector<double> encode(const HeadOutputTensor& v, const ProbeParams& params) {
  check_input_dims(params.dims, v.layers, v.heads, v.head_dim);
  Tape tape(false);
  ProbeVars pv = bind(tape, params, false);
  Var h = encode(pv, tape.constant(Tensor({1, v.size()}, v.values)));
  return h.value().storage();
}

GaussianPosterior posterior(std::span<const double> h, const ProbeParams& params) {
  if (h.size() != params.dims.d_f()) {
    throw ShapeError("posterior: feature has " + std::to_string(h.size()) + " entries, expected " +
                     std::to_string(params.dims.d_f()));
  }
  Tape tape(false);
  ProbeVars pv = bind(tape, params, false);
  PosteriorVars post =
      posterior(pv, tape.constant(Tensor({1, h.size()}, std::vector<double>(h.begin(), h.end()))));
  return {post.mu.value().storage(), post.log_var.value().storage()};
}

std::vector<double> sample_latent(const GaussianPosterior& post, std::span<const double> eps) {
  if (eps.size() != post.mu.size()) throw ShapeError("sample_latent: noise size mismatch");
  std::vector<double> z(post.mu.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = post.mu[i] + std::exp(0.5 * post.log_var[i]) * eps[i];
  }
  return z;
}

std::vector<double> sample_latent(const GaussianPosterior& post, Rng& rng) {
  std::vector<double> eps(post.mu.size());
  for (double& e : eps) e = rng.normal();
  return sample_latent(post, eps);
}

double sigmoid(double s) {
  return s >= 0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
}

RiskScore infer_logit(const HeadOutputTensor& v, const ProbeParams& params) {
  check_input_dims(params.dims, v.layers, v.heads, v.head_dim);
  Tape tape(false);
  ProbeVars pv = bind(tape, params, false);
  Var h = encode(pv, tape.constant(Tensor({1, v.size()}, v.values)));
  const double s = risk_logits(pv, posterior(pv, h).mu).value().item();
  return {s, sigmoid(s)};
}

double bce(int y, double logit) {
  const double softplus = std::max(logit, 0.0) + std::log1p(std::exp(-std::abs(logit)));
  return softplus - static_cast<double>(y) * logit;
}

double kl_to_standard_normal(const GaussianPosterior& post) {
  double total = 0.0;
  for (std::size_t i = 0; i < post.mu.size(); ++i) {
    total += post.mu[i] * post.mu[i] + std::exp(post.log_var[i]) - post.log_var[i] - 1.0;
  }
  return 0.5 * total;
}

double beta_schedule(std::size_t step, const TrainConfig& cfg, std::size_t warmup_steps) {
  if (warmup_steps == 0) throw ConfigError("beta warm-up must span at least one step");
  const double ramp = std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_steps));
  return cfg.beta_cap * ramp;
}

LossGraph build_vib_loss(const ProbeVars& p, Var inputs, std::span<const int> labels,
                         const Tensor& noise, double beta, bool kl_enabled) {
  Tape& tape = *inputs.tape;
  const std::size_t n = inputs.value().rows();
  if (n == 0 || labels.size() != n) throw DataError("vib_loss: empty or mislabeled batch");
  PosteriorVars post = posterior(p, encode(p, inputs));
  if (!noise.same_shape(post.mu.value())) {
    throw ShapeError("vib_loss: noise " + noise.shape_string() + " does not match latent " +
                     post.mu.value().shape_string());
  }
  Var sigma = ops::exp(ops::scale(post.log_var, 0.5));
  Var z = ops::add(post.mu, ops::mul(sigma, tape.constant(noise)));
  Var s = risk_logits(p, z);

  Tensor y({n, 1});
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<double>(labels[i]);
  Var bce_rows = ops::sub(ops::softplus(s), ops::mul(tape.constant(std::move(y)), s));
  Var bce_mean = ops::mean(bce_rows);

  LossGraph g;
  g.parts.bce = bce_mean.value().item();
  if (kl_enabled) {
    Var terms = ops::add_scalar(
        ops::sub(ops::add(ops::mul(post.mu, post.mu), ops::exp(post.log_var)), post.log_var), -1.0);
    Var kl_mean = ops::scale(ops::mean(ops::sum_cols(terms)), 0.5);
    g.parts.kl = kl_mean.value().item();
    g.loss = ops::add(bce_mean, ops::scale(kl_mean, beta));
  } else {
    g.loss = bce_mean;
  }
  g.parts.loss = g.loss.value().item();
  return g;
}

Batch make_batch(const capture::FeatureDataset& ds, std::span<const std::size_t> indices) {
  const std::size_t m = ds.feature_size();
  Batch b;
  b.inputs = Tensor({std::max<std::size_t>(indices.size(), 1), m});
  if (indices.empty()) {
    b.inputs = Tensor();
    return b;
  }
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const capture::LabeledExample& ex = ds.examples.at(indices[r]);
    std::copy(ex.features.values.begin(), ex.features.values.end(),
              b.inputs.data().begin() + static_cast<std::ptrdiff_t>(r * m));
    b.labels.push_back(ex.y);
  }
  return b;
}

namespace {

void check_batch(const Batch& batch, const ProbeParams& params) {
  if (batch.labels.empty()) throw DataError("vib_loss: empty batch");
  if (batch.inputs.cols() != params.dims.input_size()) {
    throw ShapeError("vib_loss: batch has " + std::to_string(batch.inputs.cols()) +
                     " features, probe expects " + std::to_string(params.dims.input_size()));
  }
}

}  // namespace

LossParts vib_loss(const Batch& batch, const ProbeParams& params, double beta, const Tensor& noise,
                   bool kl_enabled) {
  check_batch(batch, params);
  Tape tape(false);
  ProbeVars pv = bind(tape, params, false);
  return build_vib_loss(pv, tape.constant(batch.inputs), batch.labels, noise, beta, kl_enabled).parts;
}

LossParts vib_loss(const Batch& batch, const ProbeParams& params, double beta, Rng& rng,
                   bool kl_enabled) {
  check_batch(batch, params);
  const Tensor noise = Tensor::randn({batch.labels.size(), params.dims.d_z}, 1.0, rng);
  return vib_loss(batch, params, beta, noise, kl_enabled);
}

LossAndGrads vib_loss_grads(const Batch& batch, const ProbeParams& params, double beta,
                            const Tensor& noise, bool kl_enabled) {
  check_batch(batch, params);
  Tape tape;
  ProbeVars pv = bind(tape, params, true);
  LossGraph g = build_vib_loss(pv, tape.constant(batch.inputs), batch.labels, noise, beta, kl_enabled);
  Gradients grads = tape.backward(g.loss);
  LossAndGrads out;
  out.parts = g.parts;
  for (Var v : pv.all) out.grads.push_back(grads.of(v));
  return out;
}

DatasetScores score_dataset(const capture::FeatureDataset& ds, const ProbeParams& params) {
  check_input_dims(params.dims, ds.layers, ds.heads, ds.head_dim);
  DatasetScores out;
  constexpr std::size_t kChunk = 256;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.count(); start += kChunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.count(), start + kChunk); ++i) idx.push_back(i);
    Batch b = make_batch(ds, idx);
    Tape tape(false);
    ProbeVars pv = bind(tape, params, false);
    Var s = risk_logits(pv, posterior(pv, encode(pv, tape.constant(b.inputs))).mu);
    for (double v : s.value().data()) out.logits.push_back(v);
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  }
  return out;
}

TrainResult train_probe(const capture::FeatureDataset& train, const capture::FeatureDataset& valid,
                        const TrainConfig& cfg) {
  if (train.layers != valid.layers || train.heads != valid.heads ||
      train.head_dim != valid.head_dim) {
    throw ShapeError("train_probe: train features " +
                     dims_string(train.layers, train.heads, train.head_dim) +
                     " vs valid features " + dims_string(valid.layers, valid.heads, valid.head_dim));
  }
  const std::size_t positives = train.positives();
  if (train.count() == 0 || positives == 0 || positives == train.count()) {
    throw DataError("train_probe: class imbalance, training set has " + std::to_string(positives) +
                    " positives out of " + std::to_string(train.count()));
  }
  if (cfg.batch_size == 0 || cfg.epochs <= 0) throw ConfigError("train_probe: bad schedule");

  Rng rng(cfg.seed);
  ProbeDims dims;
  dims.layers = train.layers;
  dims.heads = train.heads;
  dims.head_dim = train.head_dim;
  dims.encoder = cfg.encoder;
  dims.d_z = cfg.d_z;
  ProbeParams params = ProbeParams::init(dims, rng);

  if (cfg.standardize) {
    const std::size_t m = train.feature_size();
    Tensor mean({1, m}), inv_std({1, m});
    for (const auto& ex : train.examples) {
      for (std::size_t j = 0; j < m; ++j) mean[j] += ex.features.values[j];
    }
    for (std::size_t j = 0; j < m; ++j) mean[j] /= static_cast<double>(train.count());
    for (const auto& ex : train.examples) {
      for (std::size_t j = 0; j < m; ++j) {
        const double d = ex.features.values[j] - mean[j];
        inv_std[j] += d * d;
      }
    }
    for (std::size_t j = 0; j < m; ++j) {
      inv_std[j] = 1.0 / std::max(std::sqrt(inv_std[j] / static_cast<double>(train.count())), 1e-6);
    }
    params.input_mean = std::move(mean);
    params.input_inv_std = std::move(inv_std);
  }

  const std::size_t steps_per_epoch = (train.count() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t warmup = cfg.beta_warmup_steps ? cfg.beta_warmup_steps : steps_per_epoch;
  const AdamWConfig opt{.lr = cfg.lr, .weight_decay = cfg.weight_decay};
  AdamWState state;

  const bool can_rank = valid.positives() > 0;
  const bool both_classes = can_rank && valid.positives() < valid.count();

  TrainResult result;
  ProbeParams best = params;
  double best_auprc = -1.0;
  std::size_t step = 0;
  std::vector<std::size_t> order(train.count());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      Batch batch = make_batch(train, std::span<const std::size_t>(order).subspan(start, end - start));
      const Tensor noise = Tensor::randn({batch.labels.size(), dims.d_z}, 1.0, rng);
      const double beta = beta_schedule(step, cfg, warmup);
      LossAndGrads lg = vib_loss_grads(batch, params, beta, noise, cfg.kl_enabled);
      if (!std::isfinite(lg.parts.loss)) {
        throw NumericalError("train_probe: non-finite loss at epoch " + std::to_string(epoch));
      }
      std::vector<const Tensor*> gs;
      for (const Tensor& g : lg.grads) gs.push_back(&g);
      adamw_step(params.parameters(), gs, state, opt);
      const double weight = static_cast<double>(batch.labels.size()) / static_cast<double>(train.count());
      rec.loss += weight * lg.parts.loss;
      rec.bce += weight * lg.parts.bce;
      rec.kl += weight * lg.parts.kl;
      rec.beta = cfg.kl_enabled ? beta : 0.0;
      ++step;
    }

    if (can_rank) {
      DatasetScores scores = score_dataset(valid, params);
      rec.valid_auprc = metrics::auprc(scores.logits, scores.labels);
      if (both_classes) rec.valid_auroc = metrics::auroc(scores.logits, scores.labels);
      if (*rec.valid_auprc > best_auprc) {
        best_auprc = *rec.valid_auprc;
        best = params;
        result.log.best_epoch = epoch;
      }
    } else {
      best = params;
      result.log.best_epoch = epoch;
    }
    result.log.epochs.push_back(rec);
  }
  result.params = std::move(best);
  return result;
}

void save_probe(const ProbeParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write probe checkpoint: " + path);
  const ProbeDims& d = params.dims;
  binio::write_magic(out, kMagic);
  binio::write_u32(out, kVersion);
  for (std::size_t v : {static_cast<std::size_t>(d.layers), static_cast<std::size_t>(d.heads),
                        static_cast<std::size_t>(d.head_dim), d.encoder[0], d.encoder[1],
                        d.encoder[2], d.d_z}) {
    binio::write_u32(out, static_cast<std::uint32_t>(v));
  }
  binio::write_u32(out, params.input_mean ? 1 : 0);
  for (const Tensor* t : params.parameters()) binio::write_f64s(out, t->data());
  if (params.input_mean) {
    binio::write_f64s(out, params.input_mean->data());
    binio::write_f64s(out, params.input_inv_std->data());
  }
  if (!out) throw DataError("failed writing probe checkpoint: " + path);
}

ProbeParams load_probe(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open probe checkpoint " + path);
  binio::expect_magic(in, kMagic);
  const std::uint32_t version = binio::read_u32(in);
  if (version != kVersion) {
    throw FormatError(FormatErrorKind::kVersionMismatch,
                      "probe checkpoint version " + std::to_string(version));
  }
  ProbeDims d;
  d.layers = binio::read_u32(in);
  d.heads = binio::read_u32(in);
  d.head_dim = binio::read_u32(in);
  for (std::size_t& w : d.encoder) w = binio::read_u32(in);
  d.d_z = binio::read_u32(in);
  const bool standardized = binio::read_u32(in) != 0;
  try {
    d.validate();
  } catch (const ConfigError& e) {
    throw FormatError(FormatErrorKind::kDimMismatch, e.what());
  }
  Rng scratch(0);
  ProbeParams p = ProbeParams::init(d, scratch);
  for (Tensor* t : p.parameters()) binio::read_f64s(in, t->data());
  if (standardized) {
    p.input_mean = Tensor({1, d.input_size()});
    p.input_inv_std = Tensor({1, d.input_size()});
    binio::read_f64s(in, p.input_mean->data());
    binio::read_f64s(in, p.input_inv_std->data());
  }
  return p;
}

}  // namespace vib::probe
