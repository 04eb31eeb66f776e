// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "quaff/checkpoint.hpp"
#include "quaff/model.hpp"

namespace quaff {

// Vocabulary ordered by codepoint.
struct CharVocab {
  std::vector<char32_t> symbols;
  std::size_t size() const { return symbols.size(); }
  // Throws DataError for an unknown symbol.
  std::uint32_t id(char32_t c) const;
};

struct Tokenized {
  CharVocab vocab;
  std::vector<std::uint32_t> ids;
};

// Throws DataError on empty or malformed UTF-8 input.
Tokenized char_tokenize(std::string_view utf8);
std::string read_text_file(const std::string& path);

class BatchSampler {
 public:
  // Throws DataError if the corpus is shorter than seq_len + 1 tokens.
  BatchSampler(std::vector<std::uint32_t> ids, std::size_t batch_size, std::size_t seq_len, std::uint64_t seed);
  // Random windows, a pure function of (seed, step, micro).
  TokenBatch sample(std::uint64_t step, std::uint64_t micro = 0) const;

 private:
  std::vector<std::uint32_t> ids_;
  std::size_t batch_size_, seq_len_;
  std::uint64_t seed_;
};

struct TrainConfig {
  float lr = 2e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  std::size_t batch_size = 16;
  std::size_t grad_accum = 1;
  std::size_t seq_len = 64;
  std::size_t steps = 500;
  std::uint64_t seed = 0;
  bool dropout = true;

  // Throws ConfigError.
  void validate() const;
};

struct AdamState {
  std::vector<LoraGrad> m, v;  // Model::linears() order
  std::uint64_t t = 0;

  static AdamState zeros(const Model& model);
};

void adam_update(Model& model, AdamState& state, const std::vector<LoraGrad>& grads, const TrainConfig& tc);

struct StepMetrics {
  std::uint64_t step = 0;
  double loss = 0.0;
  double step_latency_ms = 0.0;
  std::vector<LinearTrace> traces;             // first micro-batch, when recording
  std::vector<std::vector<float>> scaling;     // Quaff s per linear after the step, empty otherwise
};

// One optimizer step over grad_accum micro-batches. The step index is state.t before the update.
StepMetrics train_step(Model& model, AdamState& state, const BatchSampler& sampler, const TrainConfig& tc,
                       bool record = false);

TensorTable model_to_table(const Model& model, const AdamState& adam);
struct LoadedModel {
  Model model;
  AdamState adam;
};
// Throws DataError on missing tensors or when `expected` disagrees with the stored config.
LoadedModel model_from_table(const TensorTable& table, const ModelConfig* expected = nullptr);

void save_model_checkpoint(const std::string& path, const Model& model, const AdamState& adam);
LoadedModel load_model_checkpoint(const std::string& path, const ModelConfig* expected = nullptr);

}  // namespace quaff
