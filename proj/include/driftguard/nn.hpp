#pragma once

// Compact 1D CNN for single-lead sleep staging with exact per-layer
// reverse-mode gradients.
//
//   stem conv(k=7, s=2) + BN + ReLU
//   3 x [depthwise conv(k=5, s=2) + pointwise conv + BN + ReLU + SE(r=4)]
//   temporal attention pooling (linear score per step, softmax over time)
//   linear -> 5 logits
//
// Channels default to 16 -> 32 -> 64 -> 64, reducing a 3000-sample epoch to
// 188 steps before pooling. Convolutions carry no bias: each one feeds a
// BatchNorm, whose shift absorbs it. Everything runs in float64.

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "driftguard/stage.hpp"

namespace driftguard::nn {

// Dense [batch, channels, length] tensor, row-major.
struct Tensor {
  std::size_t batch{0}, channels{0}, length{0};
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t b, std::size_t c, std::size_t l) : batch(b), channels(c), length(l), data(b * c * l, 0.0) {}

  double& at(std::size_t b, std::size_t c, std::size_t t) { return data[(b * channels + c) * length + t]; }
  double at(std::size_t b, std::size_t c, std::size_t t) const { return data[(b * channels + c) * length + t]; }
  double* row(std::size_t b, std::size_t c) { return data.data() + (b * channels + c) * length; }
  const double* row(std::size_t b, std::size_t c) const { return data.data() + (b * channels + c) * length; }
};

enum class BnMode { Train, Eval };

enum class ParamRole { Weight, Bias, BnGamma, BnBeta };

struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> value;
  std::vector<double> grad;
  ParamRole role{ParamRole::Weight};

  Param() = default;
  Param(std::string n, std::vector<std::size_t> s, ParamRole r);
  bool is_bn_affine() const { return role == ParamRole::BnGamma || role == ParamRole::BnBeta; }
};

// Non-trainable state (BN running statistics).
struct Buffer {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> value;
};

struct ArchConfig {
  std::size_t input_len{kEpochSamples};
  std::array<std::size_t, 4> channels{16, 32, 64, 64};
  std::size_t stem_kernel{7};
  std::size_t block_kernel{5};
  std::size_t se_reduction{4};
  std::size_t n_classes{kNumStages};
  double bn_momentum{0.1};
  double bn_eps{1e-5};

  bool operator==(const ArchConfig&) const = default;
};

struct Prediction {
  std::array<double, kNumStages> logits{};
  std::array<double, kNumStages> probs{};
  double entropy{0.0};  // nats

  int argmax() const;
  double confidence() const;
};

// Numerically stable softmax (max-shifted).
std::array<double, kNumStages> softmax(const std::array<double, kNumStages>& logits);

// Shannon entropy in nats with 0 log 0 = 0. Throws NotADistribution when the
// values are negative or do not sum to 1 within 1e-6.
double entropy(std::span<const double> probs);

// d H(softmax(z)) / d z = p * (-log p - H)
std::array<double, kNumStages> entropy_grad_logits(const std::array<double, kNumStages>& probs);

// ---------------------------------------------------------------------------
// Layers. Each forward fills a cache consumed by the matching backward.
// Parameter gradients are accumulated into Param::grad when requested.

class Conv1d {
 public:
  // groups == 1 (dense) or groups == in == out (depthwise). No bias.
  Conv1d(std::string name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
         bool depthwise);

  std::size_t out_length(std::size_t in_len) const { return (in_len + 2 * pad_ - kernel_) / stride_ + 1; }
  Tensor forward(const Tensor& x) const;
  // `x` is the forward input.
  Tensor backward(const Tensor& x, const Tensor& dy, bool param_grads, bool input_grad);

  Param weight;  // [out, in/groups, kernel]

 private:
  std::size_t in_, out_, kernel_, stride_, pad_;
  bool depthwise_;
};

class BatchNorm1d {
 public:
  BatchNorm1d(std::string name, std::size_t channels, double momentum, double eps);

  struct Cache {
    Tensor xhat;
    std::vector<double> inv_std;
    std::vector<double> batch_mean;  // Train mode only
    std::vector<double> batch_var;   // population variance
    BnMode mode{BnMode::Eval};
  };

  Tensor forward(const Tensor& x, BnMode mode, Cache& cache) const;
  // run <- (1 - m) * run + m * batch_stat, for a Train-mode cache.
  void update_running(const Cache& cache);
  Tensor backward(const Cache& cache, const Tensor& dy, bool param_grads);

  std::size_t channels() const { return gamma.value.size(); }
  double momentum() const { return momentum_; }
  void set_momentum(double m) { momentum_ = m; }
  double eps() const { return eps_; }

  Param gamma;
  Param beta;
  Buffer running_mean;
  Buffer running_var;

 private:
  double momentum_;
  double eps_;
};

class SqueezeExcite {
 public:
  SqueezeExcite(std::string name, std::size_t channels, std::size_t reduction);

  struct Cache {
    Tensor x;
    std::vector<double> squeeze;  // [B, C]
    std::vector<double> hidden;   // [B, H] post-ReLU
    std::vector<double> excite;   // [B, C] post-sigmoid
  };

  Tensor forward(const Tensor& x, Cache& cache) const;
  Tensor backward(const Cache& cache, const Tensor& dy, bool param_grads);

  Param w1, b1, w2, b2;  // w1 [H, C], w2 [C, H]

 private:
  std::size_t channels_, hidden_;
};

class AttentionPool {
 public:
  AttentionPool(std::string name, std::size_t channels);

  struct Cache {
    Tensor h;
    std::vector<double> alpha;  // [B, T]
  };

  // Returns pooled features [B, C].
  std::vector<double> forward(const Tensor& h, Cache& cache) const;
  Tensor backward(const Cache& cache, std::span<const double> dpooled, bool param_grads);

  Param score;  // [C]
};

class Linear {
 public:
  Linear(std::string name, std::size_t in, std::size_t out);

  std::vector<double> forward(std::span<const double> x, std::size_t batch) const;
  std::vector<double> backward(std::span<const double> x, std::span<const double> dy, std::size_t batch,
                               bool param_grads, bool input_grad);

  Param weight;  // [out, in]
  Param bias;    // [out]

 private:
  std::size_t in_, out_;
};

// ---------------------------------------------------------------------------

enum class GradScope {
  All,       // every parameter
  BnAffine,  // only BN gamma/beta; other gradients stay zero
};

struct ForwardCache {
  std::uint64_t generation{0};
  BnMode mode{BnMode::Eval};
  std::size_t batch{0};

  Tensor input;
  BatchNorm1d::Cache stem_bn;
  struct Block {
    Tensor input;  // post-ReLU stem output or previous block's SE output
    Tensor dw_out;
    BatchNorm1d::Cache bn;
    SqueezeExcite::Cache se;  // se.x holds the post-ReLU activation
  };
  std::array<Block, 3> blocks;
  AttentionPool::Cache attn;
  std::vector<double> pooled;  // [B, C]
};

struct ForwardResult {
  std::vector<Prediction> predictions;
  ForwardCache cache;
};

class Model {
 public:
  explicit Model(const ArchConfig& arch = {});

  // He-normal convolutions, small classifier weights, zero classifier bias.
  void init(std::uint64_t seed);

  const ArchConfig& arch() const { return arch_; }

  // x is [B, 1, input_len]. Train mode normalizes with batch statistics and
  // folds them into the running statistics with the BN momentum (unless
  // update_stats is false); Eval mode uses the running statistics.
  ForwardResult forward(const Tensor& x, BnMode mode, bool update_stats = true);

  // Eval-mode inference without building a backward cache.
  std::vector<Prediction> predict(const Tensor& x) const;

  // Overwrites Param::grad for every parameter (zeroing first). dlogits is
  // [B, n_classes], the gradient of the scalar loss w.r.t. the logits.
  void backward(const ForwardCache& cache, std::span<const double> dlogits, GradScope scope = GradScope::All);

  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  std::vector<Buffer*> buffers();
  std::vector<const Buffer*> buffers() const;
  std::vector<BatchNorm1d*> batch_norms();
  std::vector<const BatchNorm1d*> batch_norms() const;
  Linear& classifier() { return classifier_; }
  const Linear& classifier() const { return classifier_; }

  std::size_t parameter_count() const;
  void zero_grad();
  void set_bn_momentum(double m);

  // Bumped by every in-API parameter mutation; a cache from an earlier
  // generation is rejected by backward with StaleCache.
  std::uint64_t generation() const { return generation_; }
  void touch() { ++generation_; }

 private:
  std::vector<Prediction> run(const Tensor& x, BnMode mode, ForwardCache& cache) const;

  ArchConfig arch_;
  Conv1d stem_;
  BatchNorm1d stem_bn_;
  struct Block {
    Conv1d dw;
    Conv1d pw;
    BatchNorm1d bn;
    SqueezeExcite se;
  };
  std::vector<Block> blocks_;
  AttentionPool attn_;
  Linear classifier_;
  std::uint64_t generation_{0};
};

// Builds the [B, 1, L] input tensor from equally sized sample windows.
Tensor make_batch(std::span<const std::vector<double>> windows);

// Hash of all parameter values outside the BN layers (raw little-endian
// float64 bytes in params() order), hex-encoded SHA-256.
std::string backbone_hash(const Model& model);
// Same over every parameter and buffer.
std::string full_hash(const Model& model);

// ---------------------------------------------------------------------------
// Checkpoint: JSON document
//   { "format": "driftguard-checkpoint", "version": 1,
//     "arch": {...ArchConfig...},
//     "tensors": { "<name>": { "shape": [...], "values": [... row-major ...] }, ... } }
// covering every Param and Buffer by name. Doubles are written with
// round-trip precision.

void save_checkpoint(const Model& model, const std::string& path);
std::string checkpoint_json(const Model& model);
// Throws CheckpointFormat on malformed documents, unknown or missing tensors,
// or shape mismatches.
Model load_checkpoint(const std::string& path);
Model checkpoint_from_json(const std::string& text);

}  // namespace driftguard::nn
