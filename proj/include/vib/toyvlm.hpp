#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vib/head_output.hpp"
#include "vib/rng.hpp"
#include "vib/tape.hpp"
#include "vib/tensor.hpp"

// A small decoder-only transformer trained on a synthetic grounded-captioning
// task. A scene is a set of objects. The model sees the scene as "visual"
// prefix tokens, then a fixed prompt, and must list the present objects in
// ascending id order followed by an end token. Objects it lists that are not
// in the scene are hallucinations.
namespace vib::toyvlm {

// Token layout: control tokens, then one text token per object, then one
// visual (prefix) token per object.
inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kPromptList = 2;
inline constexpr int kPromptObjects = 3;
inline constexpr int kFirstObject = 4;

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int head_dim = 16;
  int n_objects = 24;
  int max_present = 5;
  int mlp_dim = 128;
  int max_seq = 16;

  int d_model() const { return n_heads * head_dim; }
  int vocab_size() const { return kFirstObject + 2 * n_objects; }
  // Throws ConfigError on non-positive sizes, max_present > n_objects / 2, or a
  // max_seq too short for the longest prompt.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

int object_token(const ModelConfig& cfg, int object);
int visual_token(const ModelConfig& cfg, int object);
bool is_object_token(const ModelConfig& cfg, int token);
int object_of_token(const ModelConfig& cfg, int token);
// Objects come in co-occurring pairs (0,1), (2,3), ...; training captions
// sometimes mention the partner of a present object.
inline int companion(int object) { return object ^ 1; }

struct SceneSpec {
  std::vector<int> present;      // ascending
  std::vector<int> distractors;  // ascending, disjoint from present
  std::uint64_t scene_id = 0;
  bool operator==(const SceneSpec&) const = default;
};

struct SceneOptions {
  // Distribution shift: larger scenes, and co-occurring pairs are more often
  // both present.
  bool shifted = false;
};

SceneSpec generate_scene(Rng& rng, const ModelConfig& cfg, std::uint64_t scene_id,
                         SceneOptions opts = {});
std::vector<SceneSpec> generate_scenes(Rng& rng, const ModelConfig& cfg, std::size_t count,
                                       std::uint64_t first_id, SceneOptions opts = {});

// BOS, visual tokens, prompt. The visual token order is a fixed shuffle
// derived from scene_id, so a scene always encodes to the same prompt.
std::vector<int> encode_prompt(const ModelConfig& cfg, const SceneSpec& scene);
// Present objects in ascending order, optionally with one distractor merged in
// at its sorted position, then EOS.
std::vector<int> teacher_caption(const ModelConfig& cfg, const SceneSpec& scene,
                                 std::optional<int> distractor);

struct AttentionLayerParams {
  std::vector<Tensor> w_q;  // per head, d_model x head_dim
  std::vector<Tensor> w_k;
  std::vector<Tensor> w_v;
  Tensor w_o;  // d_model x d_model; rows [h*d_h, (h+1)*d_h) read head h
};

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  AttentionLayerParams attn;
  Tensor ln2_gain, ln2_bias;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct ToyModel {
  ModelConfig config;
  Tensor tok_embed;  // vocab x d_model
  Tensor pos_embed;  // max_seq x d_model
  std::vector<BlockParams> blocks;
  Tensor lnf_gain, lnf_bias;
  Tensor unembed;  // d_model x vocab

  static ToyModel init(const ModelConfig& cfg, Rng& rng);
  // Stable declaration order; also the checkpoint order.
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
};

// Per-head output multipliers alpha (n_layers x n_heads) applied as
// O~ = alpha * O before the output projection, on rows >= first_row.
struct HeadScaling {
  Tensor alpha;
  std::size_t first_row = 0;
};

struct AttentionVars {
  std::vector<Var> w_q, w_k, w_v;
  Var w_o;
};

struct AttentionResult {
  Var y;                          // seq x d_model, after W^O
  std::vector<Var> head_outputs;  // per head, seq x d_h, before W^O (and before scaling)
};

// Causal multi-head attention on a (normalized) input x of shape seq x d_model.
// `alpha`, when non-empty, holds one multiplier per head.
AttentionResult attention_forward(Var x, const AttentionVars& params, int head_dim,
                                  std::span<const double> alpha = {}, std::size_t first_row = 0);

struct AttentionOutput {
  Tensor y;
  std::vector<Tensor> head_outputs;
};
AttentionOutput attention_forward(const Tensor& x, const AttentionLayerParams& params,
                                  std::span<const double> alpha = {}, std::size_t first_row = 0);

struct ForwardResult {
  Var logits;                    // seq x vocab
  HeadOutputTensor last_heads;   // head outputs at the final position
};

// Full model forward on `tokens`. Parameters are bound onto `tape` (as
// gradient leaves when the tape records). Throws ShapeError if the sequence
// exceeds max_seq.
ForwardResult forward(Tape& tape, const ToyModel& model, std::span<const int> tokens,
                      const HeadScaling* scaling = nullptr);

struct BlockVars {
  Var ln1_gain, ln1_bias;
  AttentionVars attn;
  Var ln2_gain, ln2_bias;
  Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct ModelVars {
  Var tok_embed, pos_embed;
  std::vector<BlockVars> blocks;
  Var lnf_gain, lnf_bias, unembed;
  std::vector<Var> all;  // same order as ToyModel::parameters()
};

ModelVars bind(Tape& tape, const ToyModel& model, bool requires_grad);

ForwardResult forward(const ModelVars& vars, const ModelConfig& cfg,
                      std::span<const int> tokens, const HeadScaling* scaling = nullptr);

struct ToyTrainConfig {
  std::size_t n_scenes = 300;
  int epochs = 3;
  std::size_t batch_size = 16;
  double lr = 3e-3;
  double weight_decay = 0.01;
  double distractor_rate = 0.15;
};

struct TrainExample {
  std::vector<int> tokens;
  std::size_t prompt_len = 0;  // loss is taken on predictions of tokens[prompt_len..]
};

struct ToyTrainLog {
  std::vector<double> epoch_loss;
};

// Builds teacher-forced training sequences; a distractor is mentioned with
// probability distractor_rate.
std::vector<TrainExample> make_training_set(const ModelConfig& cfg,
                                            std::span<const SceneSpec> scenes,
                                            double distractor_rate, Rng& rng);

// Next-token cross-entropy on caption positions, AdamW. Throws DataError on an
// empty dataset.
ToyModel train_toy_model(std::span<const TrainExample> data, const ModelConfig& cfg,
                         const ToyTrainConfig& tcfg, Rng& rng, ToyTrainLog* log = nullptr);

enum class Sampling { kGreedy, kTemperature };

struct DecodeOptions {
  Sampling sampling = Sampling::kGreedy;
  double temperature = 1.0;
};

struct DecodeStep {
  int step_index = 0;
  int sampled_token = 0;
  Tensor logits;  // 1 x vocab
  HeadOutputTensor head_outputs;
};

// Returns the alpha matrix to apply at a decoding step, or nullopt.
using StepPlanFn = std::function<std::optional<Tensor>(int step_index)>;

// Autoregressive generation from the scene prompt until EOS or max_seq.
std::vector<DecodeStep> decode(const ToyModel& model, const SceneSpec& scene, Rng& rng,
                               const DecodeOptions& opts = {}, const StepPlanFn& plan = {});
// Same, from an explicit prompt.
std::vector<DecodeStep> decode_prompt(const ToyModel& model, std::vector<int> prompt, Rng& rng,
                                      const DecodeOptions& opts = {},
                                      const StepPlanFn& plan = {});

int pick_token(const Tensor& logits_row, const DecodeOptions& opts, Rng& rng);

struct TokenLabel {
  int step_index = 0;
  int y = 0;  // 1 = hallucinated object
  bool operator==(const TokenLabel&) const = default;
};

// One label per emitted object token; other tokens are skipped.
std::vector<TokenLabel> label_tokens(const ModelConfig& cfg, std::span<const DecodeStep> steps,
                                     const SceneSpec& scene);

struct HallucinationStats {
  std::size_t object_tokens = 0;
  std::size_t hallucinated = 0;
  double rate() const {
    return object_tokens ? static_cast<double>(hallucinated) / static_cast<double>(object_tokens)
                         : 0.0;
  }
};

// Greedy decode + label over the scenes.
HallucinationStats hallucination_stats(const ToyModel& model, std::span<const SceneSpec> scenes,
                                       std::uint64_t seed);

// Teacher-forced next-token accuracy on caption positions.
double token_accuracy(const ToyModel& model, std::span<const TrainExample> data);

void save_model(const ToyModel& model, const std::string& path);
ToyModel load_model(const std::string& path);

}  // namespace vib::toyvlm
