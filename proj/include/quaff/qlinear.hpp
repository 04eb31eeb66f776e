// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "quaff/checkpoint.hpp"
#include "quaff/outlier.hpp"
#include "quaff/quantizer.hpp"
#include "quaff/scaling.hpp"
#include "quaff/tensor.hpp"

namespace quaff {

enum class EngineKind { FP32, Naive, SmoothStatic, SmoothDynamic, LLMInt8, Quaff, QuaffNoMomentum };

inline constexpr EngineKind kAllEngineKinds[] = {EngineKind::FP32,          EngineKind::Naive,   EngineKind::SmoothStatic,
                                                 EngineKind::SmoothDynamic, EngineKind::LLMInt8, EngineKind::Quaff,
                                                 EngineKind::QuaffNoMomentum};

std::string_view to_string(EngineKind kind);
std::optional<EngineKind> parse_engine_kind(std::string_view s);

inline constexpr float kDefaultLlmInt8Sigma = 6.0f;

struct EngineConfig {
  int bits = kDefaultBits;
  float gamma = kDefaultMomentum;    // Quaff momentum; QuaffNoMomentum forces 0
  float sigma = kDefaultLlmInt8Sigma;  // LLM.int8 live outlier threshold
  float alpha = kDefaultSmoothAlpha;   // SmoothQuant migration strength
};

// A frozen linear layer y = x W (W is c_in x c_out) prepared under one scheme.
// Stateful kinds (Quaff variants, SmoothDynamic) follow a single-writer contract.
class QLinearEngine {
 public:
  QLinearEngine(EngineKind kind, std::size_t c_in, std::size_t c_out) : kind_(kind), c_in_(c_in), c_out_(c_out) {}
  virtual ~QLinearEngine() = default;

  EngineKind kind() const { return kind_; }
  std::size_t c_in() const { return c_in_; }
  std::size_t c_out() const { return c_out_; }

  // Integer-kernel forward. Quaff variants advance their scaling state once per call.
  Matrix forward(const Matrix& x);
  // Same control flow with every integer GEMM replaced by a float GEMM on dequantized operands.
  Matrix forward_reference(const Matrix& x);
  // Straight-through backward: grad_out * W_eff^T, with W_eff the effective (dequantized,
  // scaled) weight of the most recent forward. Scaling factors are treated as constants.
  virtual Matrix backward_input(const Matrix& grad_out) const = 0;

  // Bytes held by the prepared layer: int8 values 1 byte, floats 4 bytes.
  virtual std::size_t storage_bytes() const = 0;
  virtual std::unique_ptr<QLinearEngine> clone() const = 0;
  virtual void save(TensorTable& table, const std::string& prefix) const = 0;

  double last_forward_ms() const { return last_forward_ms_; }

 protected:
  virtual Matrix run(const Matrix& x, bool reference) = 0;
  void check_grad(const Matrix& g) const;

 private:
  EngineKind kind_;
  std::size_t c_in_, c_out_;
  double last_forward_ms_ = 0.0;
};

// Prepares W for `kind`. `calib` supplies channel maxima (required for SmoothStatic, used to
// seed the Quaff scaling state); `outliers` is the pre-identified set O (Quaff variants).
// Throws DataError when an outlier weight row is all zero.
std::unique_ptr<QLinearEngine> prepare_engine(const Matrix& w, EngineKind kind, const CalibrationStats* calib,
                                              const ChannelIndexSet& outliers, const EngineConfig& config = {});

std::unique_ptr<QLinearEngine> load_engine(const TensorTable& table, const std::string& prefix, std::size_t c_in,
                                           std::size_t c_out);

// Full-precision outlier decomposition: (X / s) W + (X / s)_{:,O} ((s_O - 1) W_O).
Matrix decomposed_forward_f32(const Matrix& x, const Matrix& w, const ChannelIndexSet& outliers, std::span<const float> s);

// Everything the decomposed Quaff forward produced on one call.
// term1_row_steps and term2_row_steps both view x_hat_q.steps; they stay valid while
// the trace is moved but not after it is copied.
struct QuaffTrace {
  std::vector<float> s;               // scaling used for this call
  QuantizedTensor x_hat_q;            // X_hat_int and its per-token steps
  IntMatrix x_hat_outlier_int;        // columns O of X_hat_int, no requantization
  QuantizedTensor w_hat_q;            // (s_O - 1) * W_O, per-OC
  std::span<const float> term1_row_steps;
  std::span<const float> term2_row_steps;
  Matrix y;
};

class QuaffEngine final : public QLinearEngine {
 public:
  QuaffEngine(EngineKind kind, QuantizedTensor w_q, ChannelIndexSet outliers, Matrix w_outlier_rows,
              ScalingState state);

  Matrix backward_input(const Matrix& grad_out) const override;
  std::size_t storage_bytes() const override;
  std::unique_ptr<QLinearEngine> clone() const override { return std::make_unique<QuaffEngine>(*this); }
  void save(TensorTable& table, const std::string& prefix) const override;
  static std::unique_ptr<QuaffEngine> load(const TensorTable& table, const std::string& prefix, EngineKind kind,
                                           std::size_t c_in, std::size_t c_out);

  // Advances the scaling state exactly like forward().
  QuaffTrace forward_traced(const Matrix& x, bool reference = false);

  const ScalingState& scaling_state() const { return state_; }
  void set_scaling_state(ScalingState s);
  const ChannelIndexSet& outliers() const { return outliers_; }
  const QuantizedTensor& weights() const { return w_q_; }
  const Matrix& outlier_weights() const { return w_o_; }
  std::span<const float> outlier_row_abs_max() const { return w_o_abs_max_; }

 protected:
  Matrix run(const Matrix& x, bool reference) override;

 private:
  QuantizedTensor w_q_;
  ChannelIndexSet outliers_;
  Matrix w_o_;                       // |O| x c_out full precision
  std::vector<float> w_o_abs_max_;   // per outlier row
  ScalingState state_;
  // Scaling and scaled outlier weights of the most recent forward, for backward.
  std::vector<float> last_s_;
  QuantizedTensor last_w_hat_;
};

}  // namespace quaff
