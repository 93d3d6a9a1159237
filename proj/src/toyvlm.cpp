#include "vib/toyvlm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "vib/adamw.hpp"
#include "vib/binio.hpp"
#include "vib/error.hpp"

namespace vib::toyvlm {
namespace {

constexpr std::uint32_t kModelVersion = 1;
constexpr char kModelMagic[5] = "TVLM";

bool contains(const std::vector<int>& sorted, int v) {
  return std::binary_search(sorted.begin(), sorted.end(), v);
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers <= 0 || n_heads <= 0 || head_dim <= 0 || n_objects <= 0 || max_present <= 0 ||
      mlp_dim <= 0 || max_seq <= 0) {
    throw ConfigError("model config: all sizes must be positive");
  }
  if (2 * max_present > n_objects) {
    throw ConfigError("model config: max_present " + std::to_string(max_present) +
                      " exceeds half the object vocabulary (" + std::to_string(n_objects) + ")");
  }
  // BOS + visual prefix + 2 prompt tokens + at least one generated token.
  if (max_seq < max_present + 4) {
    throw ConfigError("model config: max_seq " + std::to_string(max_seq) +
                      " cannot hold a prompt of " + std::to_string(max_present) + " objects");
  }
}

int object_token(const ModelConfig& cfg, int object) {
  if (object < 0 || object >= cfg.n_objects) throw std::out_of_range("object id out of range");
  return kFirstObject + object;
}

int visual_token(const ModelConfig& cfg, int object) {
  if (object < 0 || object >= cfg.n_objects) throw std::out_of_range("object id out of range");
  return kFirstObject + cfg.n_objects + object;
}

bool is_object_token(const ModelConfig& cfg, int token) {
  return token >= kFirstObject && token < kFirstObject + cfg.n_objects;
}

int object_of_token(const ModelConfig& cfg, int token) {
  if (!is_object_token(cfg, token)) throw std::out_of_range("not an object token");
  return token - kFirstObject;
}

SceneSpec generate_scene(Rng& rng, const ModelConfig& cfg, std::uint64_t scene_id,
                         SceneOptions opts) {
  cfg.validate();
  const int n = cfg.n_objects;
  SceneSpec scene;
  scene.scene_id = scene_id;

  if (!opts.shifted) {
    const int k = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.max_present)));
    std::vector<int> pool(static_cast<std::size_t>(n));
    std::iota(pool.begin(), pool.end(), 0);
    for (int i = 0; i < k; ++i) {
      const auto j = i + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n - i)));
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
      scene.present.push_back(pool[static_cast<std::size_t>(i)]);
    }
  } else {
    const int lo = (cfg.max_present + 1) / 2;
    const int k = lo + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.max_present - lo + 1)));
    std::vector<int> chosen;
    while (static_cast<int>(chosen.size()) < k) {
      const int o = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n)));
      if (std::find(chosen.begin(), chosen.end(), o) != chosen.end()) continue;
      chosen.push_back(o);
      const int c = companion(o);
      if (static_cast<int>(chosen.size()) < k && c < n &&
          std::find(chosen.begin(), chosen.end(), c) == chosen.end() && rng.uniform() < 0.5) {
        chosen.push_back(c);
      }
    }
    scene.present = std::move(chosen);
  }
  std::sort(scene.present.begin(), scene.present.end());

  for (int o : scene.present) {
    const int c = companion(o);
    if (c < n && !contains(scene.present, c)) scene.distractors.push_back(c);
  }
  if (scene.distractors.empty()) {
    std::vector<int> complement;
    for (int o = 0; o < n; ++o) {
      if (!contains(scene.present, o)) complement.push_back(o);
    }
    scene.distractors.push_back(complement[rng.uniform_int(complement.size())]);
  }
  std::sort(scene.distractors.begin(), scene.distractors.end());
  scene.distractors.erase(std::unique(scene.distractors.begin(), scene.distractors.end()),
                          scene.distractors.end());
  return scene;
}

std::vector<SceneSpec> generate_scenes(Rng& rng, const ModelConfig& cfg, std::size_t count,
                                       std::uint64_t first_id, SceneOptions opts) {
  std::vector<SceneSpec> scenes;
  scenes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) scenes.push_back(generate_scene(rng, cfg, first_id + i, opts));
  return scenes;
}

std::vector<int> encode_prompt(const ModelConfig& cfg, const SceneSpec& scene) {
  std::vector<int> order = scene.present;
  Rng rng(Rng::mix(scene.scene_id ^ 0x5ce4e5b9f00dULL));
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.uniform_int(i)]);
  }
  std::vector<int> tokens{kBos};
  for (int o : order) tokens.push_back(visual_token(cfg, o));
  tokens.push_back(kPromptList);
  tokens.push_back(kPromptObjects);
  return tokens;
}

std::vector<int> teacher_caption(const ModelConfig& cfg, const SceneSpec& scene,
                                 std::optional<int> distractor) {
  std::vector<int> objects = scene.present;
  if (distractor) {
    objects.insert(std::upper_bound(objects.begin(), objects.end(), *distractor), *distractor);
  }
  std::vector<int> tokens;
  for (int o : objects) tokens.push_back(object_token(cfg, o));
  tokens.push_back(kEos);
  return tokens;
}

ToyModel ToyModel::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_model());
  const auto dh = static_cast<std::size_t>(cfg.head_dim);
  const auto f = static_cast<std::size_t>(cfg.mlp_dim);
  const auto v = static_cast<std::size_t>(cfg.vocab_size());
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid_std = proj_std / std::sqrt(2.0 * cfg.n_layers);

  ToyModel m;
  m.config = cfg;
  m.tok_embed = Tensor::randn({v, d}, 0.5, rng);
  m.pos_embed = Tensor::randn({static_cast<std::size_t>(cfg.max_seq), d}, 0.5, rng);
  for (int l = 0; l < cfg.n_layers; ++l) {
    BlockParams b;
    b.ln1_gain = Tensor({1, d}, 1.0);
    b.ln1_bias = Tensor({1, d});
    for (int h = 0; h < cfg.n_heads; ++h) {
      b.attn.w_q.push_back(Tensor::randn({d, dh}, proj_std, rng));
      b.attn.w_k.push_back(Tensor::randn({d, dh}, proj_std, rng));
      b.attn.w_v.push_back(Tensor::randn({d, dh}, proj_std, rng));
    }
    b.attn.w_o = Tensor::randn({d, d}, resid_std, rng);
    b.ln2_gain = Tensor({1, d}, 1.0);
    b.ln2_bias = Tensor({1, d});
    b.mlp_w1 = Tensor::randn({d, f}, proj_std, rng);
    b.mlp_b1 = Tensor({1, f});
    b.mlp_w2 = Tensor::randn({f, d}, 1.0 / std::sqrt(static_cast<double>(f)) / std::sqrt(2.0 * cfg.n_layers), rng);
    b.mlp_b2 = Tensor({1, d});
    m.blocks.push_back(std::move(b));
  }
  m.lnf_gain = Tensor({1, d}, 1.0);
  m.lnf_bias = Tensor({1, d});
  m.unembed = Tensor::randn({d, v}, proj_std, rng);
  return m;
}

std::vector<Tensor*> ToyModel::parameters() {
  std::vector<Tensor*> ps{&tok_embed, &pos_embed};
  for (BlockParams& b : blocks) {
    ps.push_back(&b.ln1_gain);
    ps.push_back(&b.ln1_bias);
    for (Tensor& w : b.attn.w_q) ps.push_back(&w);
    for (Tensor& w : b.attn.w_k) ps.push_back(&w);
    for (Tensor& w : b.attn.w_v) ps.push_back(&w);
    ps.push_back(&b.attn.w_o);
    for (Tensor* t : {&b.ln2_gain, &b.ln2_bias, &b.mlp_w1, &b.mlp_b1, &b.mlp_w2, &b.mlp_b2}) {
      ps.push_back(t);
    }
  }
  ps.push_back(&lnf_gain);
  ps.push_back(&lnf_bias);
  ps.push_back(&unembed);
  return ps;
}

std::vector<const Tensor*> ToyModel::parameters() const {
  auto mutable_ps = const_cast<ToyModel*>(this)->parameters();
  return {mutable_ps.begin(), mutable_ps.end()};
}

ModelVars bind(Tape& tape, const ToyModel& model, bool requires_grad) {
  ModelVars mv;
  auto put = [&](const Tensor& t) {
    Var v = tape.leaf(t, requires_grad);
    mv.all.push_back(v);
    return v;
  };
  mv.tok_embed = put(model.tok_embed);
  mv.pos_embed = put(model.pos_embed);
  for (const BlockParams& b : model.blocks) {
    BlockVars bv;
    bv.ln1_gain = put(b.ln1_gain);
    bv.ln1_bias = put(b.ln1_bias);
    for (const Tensor& w : b.attn.w_q) bv.attn.w_q.push_back(put(w));
    for (const Tensor& w : b.attn.w_k) bv.attn.w_k.push_back(put(w));
    for (const Tensor& w : b.attn.w_v) bv.attn.w_v.push_back(put(w));
    bv.attn.w_o = put(b.attn.w_o);
    bv.ln2_gain = put(b.ln2_gain);
    bv.ln2_bias = put(b.ln2_bias);
    bv.mlp_w1 = put(b.mlp_w1);
    bv.mlp_b1 = put(b.mlp_b1);
    bv.mlp_w2 = put(b.mlp_w2);
    bv.mlp_b2 = put(b.mlp_b2);
    mv.blocks.push_back(std::move(bv));
  }
  mv.lnf_gain = put(model.lnf_gain);
  mv.lnf_bias = put(model.lnf_bias);
  mv.unembed = put(model.unembed);
  return mv;
}

AttentionResult attention_forward(Var x, const AttentionVars& params, int head_dim,
                                  std::span<const double> alpha, std::size_t first_row) {
  Tape& tape = *x.tape;
  const std::size_t n_heads = params.w_q.size();
  if (!alpha.empty() && alpha.size() != n_heads) {
    throw ShapeError("attention_forward: " + std::to_string(alpha.size()) +
                     " scaling coefficients for " + std::to_string(n_heads) + " heads");
  }
  const std::size_t seq = x.value().rows();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(head_dim));

  AttentionResult result;
  std::vector<Var> mixed_inputs;
  for (std::size_t h = 0; h < n_heads; ++h) {
    Var q = ops::matmul(x, params.w_q[h]);
    Var k = ops::matmul(x, params.w_k[h]);
    Var v = ops::matmul(x, params.w_v[h]);
    Var attn = ops::softmax_rows(ops::scale(ops::matmul_nt(q, k), inv_sqrt_dh), /*causal=*/true);
    Var o = ops::matmul(attn, v);
    result.head_outputs.push_back(o);
    if (!alpha.empty() && alpha[h] != 1.0 && first_row < seq) {
      Tensor factors({seq, static_cast<std::size_t>(head_dim)}, 1.0);
      for (std::size_t r = first_row; r < seq; ++r) {
        for (int c = 0; c < head_dim; ++c) factors(r, static_cast<std::size_t>(c)) = alpha[h];
      }
      o = ops::mul(o, tape.constant(std::move(factors)));
    }
    mixed_inputs.push_back(o);
  }
  result.y = ops::matmul(ops::concat_cols(mixed_inputs), params.w_o);
  return result;
}

AttentionOutput attention_forward(const Tensor& x, const AttentionLayerParams& params,
                                  std::span<const double> alpha, std::size_t first_row) {
  if (params.w_q.empty()) throw ShapeError("attention_forward: no heads");
  const std::size_t d_model = params.w_q.front().rows();
  if (x.rank() != 2 || x.cols() != d_model) {
    throw ShapeError("attention_forward: input " + x.shape_string() + " does not have " +
                     std::to_string(d_model) + " columns");
  }
  Tape tape(false);
  AttentionVars vars;
  for (const Tensor& w : params.w_q) vars.w_q.push_back(tape.constant(w));
  for (const Tensor& w : params.w_k) vars.w_k.push_back(tape.constant(w));
  for (const Tensor& w : params.w_v) vars.w_v.push_back(tape.constant(w));
  vars.w_o = tape.constant(params.w_o);
  const int head_dim = static_cast<int>(params.w_q.front().cols());
  AttentionResult r = attention_forward(tape.constant(x), vars, head_dim, alpha, first_row);
  AttentionOutput out;
  out.y = r.y.value();
  for (Var o : r.head_outputs) out.head_outputs.push_back(o.value());
  return out;
}

ForwardResult forward(const ModelVars& vars, const ModelConfig& cfg,
                      std::span<const int> tokens, const HeadScaling* scaling) {
  const std::size_t seq = tokens.size();
  if (seq == 0) throw ShapeError("forward: empty token sequence");
  if (seq > static_cast<std::size_t>(cfg.max_seq)) {
    throw ShapeError("forward: sequence length " + std::to_string(seq) + " exceeds max_seq " +
                     std::to_string(cfg.max_seq));
  }
  const auto layers = static_cast<std::size_t>(cfg.n_layers);
  const auto heads = static_cast<std::size_t>(cfg.n_heads);
  if (scaling && (scaling->alpha.rank() != 2 || scaling->alpha.rows() != layers ||
                  scaling->alpha.cols() != heads)) {
    throw ShapeError("forward: scaling must be " + std::to_string(layers) + "x" +
                     std::to_string(heads) + ", got " + scaling->alpha.shape_string());
  }

  std::vector<int> positions(seq);
  std::iota(positions.begin(), positions.end(), 0);
  Var x = ops::add(ops::gather_rows(vars.tok_embed, tokens), ops::gather_rows(vars.pos_embed, positions));

  ForwardResult result;
  result.last_heads = HeadOutputTensor(static_cast<std::uint32_t>(layers),
                                       static_cast<std::uint32_t>(heads),
                                       static_cast<std::uint32_t>(cfg.head_dim));
  for (std::size_t l = 0; l < layers; ++l) {
    const BlockVars& b = vars.blocks[l];
    std::span<const double> alpha;
    std::size_t first_row = 0;
    if (scaling) {
      alpha = scaling->alpha.data().subspan(l * heads, heads);
      first_row = scaling->first_row;
    }
    AttentionResult attn = attention_forward(ops::layer_norm(x, b.ln1_gain, b.ln1_bias), b.attn,
                                             cfg.head_dim, alpha, first_row);
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor& o = attn.head_outputs[h].value();
      auto dst = result.last_heads.head(l, h);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = o(seq - 1, i);
    }
    x = ops::add(x, attn.y);
    Var hidden = ops::gelu(ops::affine(ops::layer_norm(x, b.ln2_gain, b.ln2_bias), b.mlp_w1, b.mlp_b1));
    x = ops::add(x, ops::affine(hidden, b.mlp_w2, b.mlp_b2));
  }
  result.logits = ops::matmul(ops::layer_norm(x, vars.lnf_gain, vars.lnf_bias), vars.unembed);
  return result;
}

ForwardResult forward(Tape& tape, const ToyModel& model, std::span<const int> tokens,
                      const HeadScaling* scaling) {
  ModelVars vars = bind(tape, model, tape.recording());
  return forward(vars, model.config, tokens, scaling);
}

std::vector<TrainExample> make_training_set(const ModelConfig& cfg,
                                            std::span<const SceneSpec> scenes,
                                            double distractor_rate, Rng& rng) {
  std::vector<TrainExample> data;
  data.reserve(scenes.size());
  for (const SceneSpec& scene : scenes) {
    TrainExample ex;
    ex.tokens = encode_prompt(cfg, scene);
    ex.prompt_len = ex.tokens.size();
    std::optional<int> distractor;
    if (rng.uniform() < distractor_rate && !scene.distractors.empty()) {
      distractor = scene.distractors[rng.uniform_int(scene.distractors.size())];
    }
    for (int t : teacher_caption(cfg, scene, distractor)) ex.tokens.push_back(t);
    if (ex.tokens.size() > static_cast<std::size_t>(cfg.max_seq)) ex.tokens.resize(static_cast<std::size_t>(cfg.max_seq));
    data.push_back(std::move(ex));
  }
  return data;
}

namespace {

// Inputs are tokens[0..n-2]; row t predicts tokens[t+1] when t+1 >= prompt_len.
std::vector<int> shifted_targets(const TrainExample& ex) {
  std::vector<int> targets(ex.tokens.size() - 1, -1);
  for (std::size_t t = 0; t + 1 < ex.tokens.size(); ++t) {
    if (t + 1 >= ex.prompt_len) targets[t] = ex.tokens[t + 1];
  }
  return targets;
}

}  // namespace

ToyModel train_toy_model(std::span<const TrainExample> data, const ModelConfig& cfg,
                         const ToyTrainConfig& tcfg, Rng& rng, ToyTrainLog* log) {
  if (data.empty()) throw DataError("train_toy_model: empty dataset");
  if (tcfg.batch_size == 0 || tcfg.epochs <= 0) throw ConfigError("train_toy_model: bad schedule");
  ToyModel model = ToyModel::init(cfg, rng);
  AdamWState state;
  const AdamWConfig opt{.lr = tcfg.lr, .weight_decay = tcfg.weight_decay};

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + tcfg.batch_size);
      Tape tape;
      ModelVars vars = bind(tape, model, true);
      std::vector<Var> losses;
      for (std::size_t i = start; i < end; ++i) {
        const TrainExample& ex = data[order[i]];
        if (ex.tokens.size() < 2) continue;
        std::span<const int> inputs(ex.tokens.data(), ex.tokens.size() - 1);
        ForwardResult fr = forward(vars, cfg, inputs);
        const std::vector<int> targets = shifted_targets(ex);
        losses.push_back(ops::cross_entropy(fr.logits, targets));
      }
      if (losses.empty()) continue;
      Var total = losses.front();
      for (std::size_t i = 1; i < losses.size(); ++i) total = ops::add(total, losses[i]);
      Var loss = ops::scale(total, 1.0 / static_cast<double>(losses.size()));
      if (!std::isfinite(loss.value().item())) throw NumericalError("toy model loss is not finite");
      Gradients grads = tape.backward(loss);
      std::vector<const Tensor*> gs;
      for (Var v : vars.all) gs.push_back(&grads.of(v));
      adamw_step(model.parameters(), gs, state, opt);
      epoch_loss += loss.value().item();
      ++batches;
    }
    if (log) log->epoch_loss.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
  }
  return model;
}

int pick_token(const Tensor& logits_row, const DecodeOptions& opts, Rng& rng) {
  const auto values = logits_row.data();
  if (opts.sampling == Sampling::kGreedy) {
    return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
  }
  if (!(opts.temperature > 0.0)) throw ConfigError("temperature must be positive");
  const double mx = *std::max_element(values.begin(), values.end());
  std::vector<double> weights(values.size());
  double total = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    weights[i] = std::exp((values[i] - mx) / opts.temperature);
    total += weights[i];
  }
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    u -= weights[i];
    if (u < 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(weights.size() - 1);
}

std::vector<DecodeStep> decode_prompt(const ToyModel& model, std::vector<int> prompt, Rng& rng,
                                      const DecodeOptions& opts, const StepPlanFn& plan) {
  const ModelConfig& cfg = model.config;
  std::vector<int> tokens = std::move(prompt);
  std::vector<DecodeStep> steps;
  int step = 0;
  while (tokens.size() < static_cast<std::size_t>(cfg.max_seq)) {
    std::optional<HeadScaling> scaling;
    if (plan) {
      if (std::optional<Tensor> alpha = plan(step)) {
        scaling = HeadScaling{std::move(*alpha), tokens.size() - 1};
      }
    }
    Tape tape(false);
    ForwardResult fr = forward(tape, model, tokens, scaling ? &*scaling : nullptr);
    const Tensor& logits = fr.logits.value();
    const std::size_t v = logits.cols();
    DecodeStep ds;
    ds.step_index = step;
    ds.logits = Tensor({1, v}, std::vector<double>(logits.data().end() - static_cast<std::ptrdiff_t>(v),
                                                   logits.data().end()));
    ds.sampled_token = pick_token(ds.logits, opts, rng);
    ds.head_outputs = std::move(fr.last_heads);
    tokens.push_back(ds.sampled_token);
    steps.push_back(std::move(ds));
    ++step;
    if (tokens.back() == kEos) break;
  }
  return steps;
}

std::vector<DecodeStep> decode(const ToyModel& model, const SceneSpec& scene, Rng& rng,
                               const DecodeOptions& opts, const StepPlanFn& plan) {
  return decode_prompt(model, encode_prompt(model.config, scene), rng, opts, plan);
}

std::vector<TokenLabel> label_tokens(const ModelConfig& cfg, std::span<const DecodeStep> steps,
                                     const SceneSpec& scene) {
  std::vector<TokenLabel> labels;
  for (const DecodeStep& s : steps) {
    if (!is_object_token(cfg, s.sampled_token)) continue;
    const int object = object_of_token(cfg, s.sampled_token);
    labels.push_back({s.step_index, contains(scene.present, object) ? 0 : 1});
  }
  return labels;
}

HallucinationStats hallucination_stats(const ToyModel& model, std::span<const SceneSpec> scenes,
                                       std::uint64_t seed) {
  HallucinationStats stats;
  Rng rng(seed);
  for (const SceneSpec& scene : scenes) {
    const auto steps = decode(model, scene, rng);
    for (const TokenLabel& label : label_tokens(model.config, steps, scene)) {
      ++stats.object_tokens;
      stats.hallucinated += static_cast<std::size_t>(label.y);
    }
  }
  return stats;
}

double token_accuracy(const ToyModel& model, std::span<const TrainExample> data) {
  std::size_t correct = 0, total = 0;
  for (const TrainExample& ex : data) {
    if (ex.tokens.size() < 2) continue;
    Tape tape(false);
    std::span<const int> inputs(ex.tokens.data(), ex.tokens.size() - 1);
    ForwardResult fr = forward(tape, model, inputs);
    const Tensor& logits = fr.logits.value();
    const std::vector<int> targets = shifted_targets(ex);
    for (std::size_t t = 0; t < targets.size(); ++t) {
      if (targets[t] < 0) continue;
      const double* row = logits.data().data() + t * logits.cols();
      const auto best = std::max_element(row, row + logits.cols()) - row;
      correct += best == targets[t] ? 1 : 0;
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

void save_model(const ToyModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write model checkpoint: " + path);
  binio::write_magic(out, kModelMagic);
  binio::write_u32(out, kModelVersion);
  const ModelConfig& c = model.config;
  for (int v : {c.n_layers, c.n_heads, c.head_dim, c.n_objects, c.max_present, c.mlp_dim, c.max_seq}) {
    binio::write_u32(out, static_cast<std::uint32_t>(v));
  }
  for (const Tensor* t : model.parameters()) binio::write_f64s(out, t->data());
  if (!out) throw DataError("failed writing model checkpoint: " + path);
}

ToyModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open model checkpoint " + path);
  binio::expect_magic(in, kModelMagic);
  const std::uint32_t version = binio::read_u32(in);
  if (version != kModelVersion) {
    throw FormatError(FormatErrorKind::kVersionMismatch,
                      "model checkpoint version " + std::to_string(version));
  }
  ModelConfig c;
  for (int* v : {&c.n_layers, &c.n_heads, &c.head_dim, &c.n_objects, &c.max_present, &c.mlp_dim,
                 &c.max_seq}) {
    *v = static_cast<int>(binio::read_u32(in));
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(FormatErrorKind::kDimMismatch, e.what());
  }
  Rng scratch(0);
  ToyModel model = ToyModel::init(c, scratch);
  for (Tensor* t : model.parameters()) binio::read_f64s(in, t->data());
  return model;
}

}  // namespace vib::toyvlm
