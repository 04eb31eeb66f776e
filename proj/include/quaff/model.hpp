// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "quaff/outlier.hpp"
#include "quaff/qlinear.hpp"
#include "quaff/tensor.hpp"

namespace quaff {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 128;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t max_seq_len = 128;
  std::array<EngineKind, 6> engine_kind{EngineKind::FP32, EngineKind::FP32, EngineKind::FP32,
                                        EngineKind::FP32, EngineKind::FP32, EngineKind::FP32};
  std::uint64_t seed = 0;

  std::size_t lora_rank = 16;
  float lora_alpha = 16.0f;
  float lora_dropout = 0.1f;

  // Synthetic outlier injection: per layer, this many channels of every linear input are
  // amplified by outlier_gain while the consuming weight rows are divided by it.
  std::size_t outlier_channels = 0;
  float outlier_gain = 1.0f;

  void set_engine(EngineKind k) { engine_kind.fill(k); }
  EngineKind engine_for(LayerRole r) const { return engine_kind[static_cast<std::size_t>(r)]; }
  std::size_t head_dim() const { return d_model / n_heads; }
  // Throws ConfigError.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// (c_in, c_out) of a role.
std::pair<std::size_t, std::size_t> role_shape(const ModelConfig& mc, LayerRole role);
std::string linear_name(std::size_t layer, LayerRole role);

struct LoraAdapter {
  Matrix a;  // c_in x r
  Matrix b;  // r x c_out, zero at init
  float alpha = 16.0f;
  float dropout_p = 0.1f;

  float scale() const { return alpha / static_cast<float>(a.cols); }
  static LoraAdapter init(std::size_t c_in, std::size_t c_out, std::size_t rank, float alpha, float dropout_p,
                          std::uint64_t seed);
};

struct LoraGrad {
  Matrix a, b;
};

class Linear {
 public:
  Linear(std::string name, LayerRole role, Matrix w, LoraAdapter lora);

  const std::string& name() const { return name_; }
  LayerRole role() const { return role_; }
  const Matrix& weight() const { return w_; }
  // Replaces the frozen weight; the engine must be re-prepared afterwards.
  void set_weight(Matrix w);
  const std::vector<float>& weight_row_abs_max() const { return w_row_abs_max_; }
  QLinearEngine& engine() { return *engine_; }
  const QLinearEngine& engine() const { return *engine_; }
  // Throws DataError on a shape mismatch.
  void set_engine(std::unique_ptr<QLinearEngine> engine);
  LoraAdapter& lora() { return lora_; }
  const LoraAdapter& lora() const { return lora_; }

  // engine(x) + scale * dropout(x) A B. Dropout is skipped when dropout_seed is empty.
  Matrix forward(const Matrix& x, std::optional<std::uint64_t> dropout_seed);
  // Uses the caches of the latest forward; returns dX and writes the LoRA gradients.
  Matrix backward(const Matrix& grad_out, LoraGrad& grad) const;

  const Matrix& last_input() const { return x_; }
  const Matrix& last_engine_output() const { return y_engine_; }

 private:
  std::string name_;
  LayerRole role_;
  Matrix w_;
  std::vector<float> w_row_abs_max_;
  std::unique_ptr<QLinearEngine> engine_;
  LoraAdapter lora_;
  Matrix x_, y_engine_, mask_, x_drop_, xa_;
};

struct LayerNorm {
  std::vector<float> gamma, beta;
  Matrix x_hat;
  std::vector<float> rstd;

  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& grad_out) const;
};

struct Block {
  LayerNorm ln1, ln2;
  std::vector<Linear> linears;  // indexed by LayerRole

  Linear& linear(LayerRole r) { return linears[static_cast<std::size_t>(r)]; }
  const Linear& linear(LayerRole r) const { return linears[static_cast<std::size_t>(r)]; }

  // Caches for backward.
  Matrix q, k, v, probs, up_out, gelu_out;
};

struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::uint32_t> inputs;   // batch * seq, row-major
  std::vector<std::uint32_t> targets;  // next tokens, same layout
};

struct LinearTrace {
  std::string name;
  LayerRole role = LayerRole::QProj;
  Matrix x;         // engine input
  Matrix y_engine;  // engine output, without the adapter
};

struct ForwardOptions {
  bool record = false;
  std::optional<std::uint64_t> dropout_seed;
};

struct LmOutput {
  Matrix logits;  // (batch * seq) x vocab
  std::vector<LinearTrace> traces;
};

struct LossAndGrads {
  double loss = 0.0;
  std::vector<LoraGrad> grads;  // Model::linears() order
  std::vector<LinearTrace> traces;
};

struct ParameterCount {
  std::size_t frozen = 0;
  std::size_t trainable = 0;
  std::size_t total() const { return frozen + trainable; }
};

class Model {
 public:
  // Deterministic init from mc.seed with FP32 engines everywhere.
  explicit Model(ModelConfig mc);

  const ModelConfig& config() const { return mc_; }
  std::vector<Linear*> linears();
  std::vector<const Linear*> linears() const;
  Block& block(std::size_t i) { return blocks_[i]; }
  const Block& block(std::size_t i) const { return blocks_[i]; }

  // Replaces every engine following mc.engine_kind. `calib` provides per-layer stats and O.
  void prepare_engines(const CalibrationArtifact* calib, const EngineConfig& config = {});

  LmOutput forward(const TokenBatch& batch, const ForwardOptions& opt = {});
  LossAndGrads loss_and_grads(const TokenBatch& batch, const ForwardOptions& opt = {});

  ParameterCount parameter_count() const;

  // Frozen tensors, exposed for checkpointing and tests.
  Matrix tok_emb, pos_emb, lm_head;
  LayerNorm ln_f;

 private:
  ModelConfig mc_;
  std::vector<Block> blocks_;
  Matrix final_hidden_;
};

// Closed-form census for a config; matches Model::parameter_count.
ParameterCount parameter_census(const ModelConfig& mc);

float gelu(float z);
float gelu_grad(float z);

}  // namespace quaff
