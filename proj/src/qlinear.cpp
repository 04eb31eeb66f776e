// SPDX-License-Identifier: Apache-2.0
#include "quaff/qlinear.hpp"

#include <chrono>
#include <cmath>

#include "quaff/error.hpp"

namespace quaff {

std::string_view to_string(EngineKind kind) {
  switch (kind) {
    case EngineKind::FP32: return "fp32";
    case EngineKind::Naive: return "naive";
    case EngineKind::SmoothStatic: return "smooth_static";
    case EngineKind::SmoothDynamic: return "smooth_dynamic";
    case EngineKind::LLMInt8: return "llm_int8";
    case EngineKind::Quaff: return "quaff";
    case EngineKind::QuaffNoMomentum: return "quaff_no_momentum";
  }
  return "?";
}

std::optional<EngineKind> parse_engine_kind(std::string_view s) {
  for (EngineKind k : kAllEngineKinds) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

Matrix QLinearEngine::forward(const Matrix& x) {
  if (x.cols != c_in_) {
    throw DataError(std::string(to_string(kind_)) + " forward: input " + x.shape() + " does not match c_in " +
                    std::to_string(c_in_));
  }
  if (!all_finite(x)) throw NumericalError(std::string(to_string(kind_)) + " forward: non-finite input");
  if (x.rows == 0) {
    last_forward_ms_ = 0.0;
    return Matrix(0, c_out_);
  }
  const auto t0 = std::chrono::steady_clock::now();
  Matrix y = run(x, false);
  last_forward_ms_ = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return y;
}

Matrix QLinearEngine::forward_reference(const Matrix& x) {
  if (x.cols != c_in_) {
    throw DataError(std::string(to_string(kind_)) + " forward: input " + x.shape() + " does not match c_in " +
                    std::to_string(c_in_));
  }
  if (!all_finite(x)) throw NumericalError(std::string(to_string(kind_)) + " forward: non-finite input");
  if (x.rows == 0) return Matrix(0, c_out_);
  return run(x, true);
}

void QLinearEngine::check_grad(const Matrix& g) const {
  if (g.cols != c_out_) {
    throw DataError("backward: gradient " + g.shape() + " does not match c_out " + std::to_string(c_out_));
  }
}

namespace {

// x_q (activations) times w_q (weights), either on the integer kernel or emulated in float.
Matrix qmatmul(const QuantizedTensor& x_q, const QuantizedTensor& w_q, bool reference) {
  if (reference) return matmul_f32(dequantize(x_q), dequantize(w_q));
  return quantized_matmul(x_q, w_q);
}

void put_header(TensorTable& t, const std::string& prefix, EngineKind kind) {
  t.put_u32(prefix + ".kind", {static_cast<std::uint32_t>(kind)});
}

void put_quantized(TensorTable& t, const std::string& name, const QuantizedTensor& q) {
  t.put_i8(name + "_int", q.values);
  t.put_f32(name + "_steps", q.steps);
}

QuantizedTensor get_quantized_per_oc(const TensorTable& t, const std::string& name, std::size_t rows, std::size_t cols,
                                     int bits = kDefaultBits) {
  QuantizedTensor q;
  q.values = t.get_i8(name + "_int", rows, cols);
  q.steps = t.get_f32(name + "_steps", cols);
  q.granularity = Granularity::PerOC;
  q.bits = bits;
  return q;
}

class Fp32Engine final : public QLinearEngine {
 public:
  explicit Fp32Engine(Matrix w) : QLinearEngine(EngineKind::FP32, w.rows, w.cols), w_(std::move(w)) {}

  Matrix backward_input(const Matrix& g) const override {
    check_grad(g);
    return matmul_f32_bt(g, w_);
  }
  std::size_t storage_bytes() const override { return 4 * c_in() * c_out(); }
  std::unique_ptr<QLinearEngine> clone() const override { return std::make_unique<Fp32Engine>(*this); }
  void save(TensorTable& t, const std::string& p) const override {
    put_header(t, p, kind());
    t.put_f32(p + ".W", w_);
  }

 protected:
  Matrix run(const Matrix& x, bool) override { return matmul_f32(x, w_); }

 private:
  Matrix w_;
};

class NaiveEngine final : public QLinearEngine {
 public:
  explicit NaiveEngine(QuantizedTensor w_q)
      : QLinearEngine(EngineKind::Naive, w_q.values.rows, w_q.values.cols), w_q_(std::move(w_q)) {}

  Matrix backward_input(const Matrix& g) const override {
    check_grad(g);
    return matmul_dequantized_bt(g, w_q_);
  }
  std::size_t storage_bytes() const override { return c_in() * c_out() + 4 * w_q_.steps.size(); }
  std::unique_ptr<QLinearEngine> clone() const override { return std::make_unique<NaiveEngine>(*this); }
  void save(TensorTable& t, const std::string& p) const override {
    put_header(t, p, kind());
    put_quantized(t, p + ".W", w_q_);
  }

 protected:
  Matrix run(const Matrix& x, bool reference) override {
    return qmatmul(quantize(x, Granularity::PerToken, w_q_.bits), w_q_, reference);
  }

 private:
  QuantizedTensor w_q_;
};

// Static smoothing: s fixed at prepare from calibration maxima, fused into the stored weights.
class SmoothStaticEngine final : public QLinearEngine {
 public:
  SmoothStaticEngine(QuantizedTensor w_hat_q, std::vector<float> s)
      : QLinearEngine(EngineKind::SmoothStatic, w_hat_q.values.rows, w_hat_q.values.cols),
        w_hat_q_(std::move(w_hat_q)),
        s_(std::move(s)) {}

  Matrix backward_input(const Matrix& g) const override {
    check_grad(g);
    return scale_columns(matmul_dequantized_bt(g, w_hat_q_), s_, ScaleMode::Divide);
  }
  std::size_t storage_bytes() const override { return c_in() * c_out() + 4 * w_hat_q_.steps.size() + 4 * s_.size(); }
  std::unique_ptr<QLinearEngine> clone() const override { return std::make_unique<SmoothStaticEngine>(*this); }
  void save(TensorTable& t, const std::string& p) const override {
    put_header(t, p, kind());
    put_quantized(t, p + ".W_hat", w_hat_q_);
    t.put_f32(p + ".s", s_);
  }

 protected:
  Matrix run(const Matrix& x, bool reference) override {
    Matrix x_hat = scale_columns(x, s_, ScaleMode::Divide);
    return qmatmul(quantize(x_hat, Granularity::PerToken, w_hat_q_.bits), w_hat_q_, reference);
  }

 private:
  QuantizedTensor w_hat_q_;
  std::vector<float> s_;
};

// Dynamic smoothing: keeps full-precision W and rescales/requantizes it on every call.
class SmoothDynamicEngine final : public QLinearEngine {
 public:
  SmoothDynamicEngine(Matrix w, float alpha, int bits)
      : QLinearEngine(EngineKind::SmoothDynamic, w.rows, w.cols),
        w_(std::move(w)),
        w_row_abs_max_(w_.empty() ? std::vector<float>(w_.rows, 0.0f) : row_abs_max(w_)),
        alpha_(alpha),
        bits_(bits) {}

  Matrix backward_input(const Matrix& g) const override {
    check_grad(g);
    if (last_s_.empty()) throw DataError("smooth_dynamic backward called before forward");
    return scale_columns(matmul_dequantized_bt(g, last_w_hat_), last_s_, ScaleMode::Divide);
  }
  std::size_t storage_bytes() const override { return 4 * c_in() * c_out() + 4 * c_in(); }
  std::unique_ptr<QLinearEngine> clone() const override { return std::make_unique<SmoothDynamicEngine>(*this); }
  void save(TensorTable& t, const std::string& p) const override {
    put_header(t, p, kind());
    t.put_f32(p + ".W", w_);
    t.put_f32(p + ".alpha", std::vector<float>{alpha_});
  }

 protected:
  Matrix run(const Matrix& x, bool reference) override {
    std::vector<float> xmax = x.rows ? col_abs_max(x) : std::vector<float>(c_in(), 0.0f);
    last_s_ = smooth_factors(xmax, w_row_abs_max_, alpha_);
    last_w_hat_ = quantize(scale_rows(w_, last_s_), Granularity::PerOC, bits_);
    Matrix x_hat = scale_columns(x, last_s_, ScaleMode::Divide);
    return qmatmul(quantize(x_hat, Granularity::PerToken, bits_), last_w_hat_, reference);
  }

 private:
  Matrix w_;
  std::vector<float> w_row_abs_max_;
  float alpha_;
  int bits_;
  std::vector<float> last_s_;
  QuantizedTensor last_w_hat_;
};

// Mixed-precision decomposition: live channels with abs-max above sigma go through a
// float GEMM against the retained W rows, the rest through the int8 path.
class LlmInt8Engine final : public QLinearEngine {
 public:
  LlmInt8Engine(Matrix w, QuantizedTensor w_q, float sigma)
      : QLinearEngine(EngineKind::LLMInt8, w.rows, w.cols), w_(std::move(w)), w_q_(std::move(w_q)), sigma_(sigma) {}

  Matrix backward_input(const Matrix& g) const override {
    check_grad(g);
    Matrix dx = matmul_dequantized_bt(g, w_q_);
    if (!last_live_.empty()) {
      Matrix dx_fp = matmul_f32_bt(g, select_rows(w_, last_live_));
      for (std::size_t i = 0; i < dx.rows; ++i) {
        for (std::size_t k = 0; k < last_live_.size(); ++k) dx(i, last_live_[k]) = dx_fp(i, k);
      }
    }
    return dx;
  }
  std::size_t storage_bytes() const override {
    return 4 * c_in() * c_out() + c_in() * c_out() + 4 * w_q_.steps.size();
  }
  std::unique_ptr<QLinearEngine> clone() const override { return std::make_unique<LlmInt8Engine>(*this); }
  void save(TensorTable& t, const std::string& p) const override {
    put_header(t, p, kind());
    t.put_f32(p + ".W", w_);
    put_quantized(t, p + ".W", w_q_);
    t.put_f32(p + ".sigma", std::vector<float>{sigma_});
  }

 protected:
  Matrix run(const Matrix& x, bool reference) override {
    std::vector<std::uint32_t> live;
    if (x.rows) {
      auto colmax = col_abs_max(x);
      for (std::uint32_t i = 0; i < colmax.size(); ++i) {
        if (colmax[i] > sigma_) live.push_back(i);
      }
    }
    last_live_ = ChannelIndexSet(std::move(live), c_in());
    if (last_live_.empty()) return qmatmul(quantize(x, Granularity::PerToken, w_q_.bits), w_q_, reference);

    Matrix x_rest = x;
    for (std::size_t i = 0; i < x.rows; ++i) {
      for (std::uint32_t c : last_live_) x_rest(i, c) = 0.0f;
    }
    Matrix y = qmatmul(quantize(x_rest, Granularity::PerToken, w_q_.bits), w_q_, reference);
    add_inplace(y, matmul_f32(select_columns(x, last_live_), select_rows(w_, last_live_)));
    return y;
  }

 private:
  Matrix w_;
  QuantizedTensor w_q_;
  float sigma_;
  ChannelIndexSet last_live_;
};

}  // namespace

// ---------------------------------------------------------------------------------------------
// Quaff

QuaffEngine::QuaffEngine(EngineKind kind, QuantizedTensor w_q, ChannelIndexSet outliers, Matrix w_outlier_rows,
                         ScalingState state)
    : QLinearEngine(kind, w_q.values.rows, w_q.values.cols),
      w_q_(std::move(w_q)),
      outliers_(std::move(outliers)),
      w_o_(std::move(w_outlier_rows)),
      state_(std::move(state)) {
  if (kind != EngineKind::Quaff && kind != EngineKind::QuaffNoMomentum) throw DataError("QuaffEngine needs a Quaff kind");
  if (w_o_.rows != outliers_.size() || w_o_.cols != c_out()) {
    throw DataError("outlier weights " + w_o_.shape() + " do not match |O| = " + std::to_string(outliers_.size()));
  }
  if (state_.s.size() != c_in()) throw DataError("scaling state length does not match c_in");
  if (kind == EngineKind::QuaffNoMomentum) state_.gamma = 0.0f;
  w_o_abs_max_.assign(outliers_.size(), 0.0f);
  for (std::size_t k = 0; k < outliers_.size(); ++k) {
    for (float v : w_o_.row(k)) w_o_abs_max_[k] = std::max(w_o_abs_max_[k], std::fabs(v));
    if (!(w_o_abs_max_[k] > 0.0f)) {
      throw DataError("outlier weight row " + std::to_string(outliers_[k]) + " is all zero; it cannot be scaled");
    }
  }
}

void QuaffEngine::set_scaling_state(ScalingState s) {
  if (s.s.size() != c_in()) throw DataError("scaling state length does not match c_in");
  if (kind() == EngineKind::QuaffNoMomentum) s.gamma = 0.0f;
  state_ = std::move(s);
}

QuaffTrace QuaffEngine::forward_traced(const Matrix& x, bool reference) {
  if (x.cols != c_in()) throw DataError("quaff forward: input " + x.shape() + " does not match c_in");
  if (!all_finite(x)) throw NumericalError("quaff forward: non-finite input");
  QuaffTrace tr;
  if (!outliers_.empty() && x.rows > 0) {
    momentum_update(state_, compute_beta(x, w_o_abs_max_, outliers_));
  } else {
    ++state_.step;
  }
  tr.s = state_.s;

  Matrix x_hat = scale_columns(x, tr.s, ScaleMode::Divide);
  tr.x_hat_q = quantize(x_hat, Granularity::PerToken, w_q_.bits);
  tr.term1_row_steps = tr.x_hat_q.steps;
  tr.y = qmatmul(tr.x_hat_q, w_q_, reference);

  // w_hat = (s_O - 1) * W_O, requantized every call.
  Matrix w_hat = w_o_;
  for (std::size_t k = 0; k < outliers_.size(); ++k) {
    const float f = tr.s[outliers_[k]] - 1.0f;
    for (float& v : w_hat.row(k)) v *= f;
  }
  tr.w_hat_q = quantize(w_hat, Granularity::PerOC, w_q_.bits);
  tr.x_hat_outlier_int = select_columns(tr.x_hat_q.values, outliers_);
  tr.term2_row_steps = tr.x_hat_q.steps;

  if (!outliers_.empty()) {
    Matrix term2;
    if (reference) {
      Matrix x_o(tr.x_hat_outlier_int.rows, tr.x_hat_outlier_int.cols);
      for (std::size_t i = 0; i < x_o.rows; ++i) {
        for (std::size_t k = 0; k < x_o.cols; ++k) {
          x_o(i, k) = static_cast<float>(tr.x_hat_outlier_int(i, k)) * tr.term2_row_steps[i];
        }
      }
      term2 = matmul_f32(x_o, dequantize(tr.w_hat_q));
    } else {
      term2 = rescale_accumulator(matmul_i8_acc32(tr.x_hat_outlier_int, tr.w_hat_q.values), tr.term2_row_steps,
                                  tr.w_hat_q.steps);
    }
    add_inplace(tr.y, term2);
  }
  last_s_ = tr.s;
  last_w_hat_ = tr.w_hat_q;
  return tr;
}

Matrix QuaffEngine::run(const Matrix& x, bool reference) { return forward_traced(x, reference).y; }

Matrix QuaffEngine::backward_input(const Matrix& g) const {
  check_grad(g);
  Matrix dx_hat = matmul_dequantized_bt(g, w_q_);
  if (!outliers_.empty() && !last_s_.empty()) {
    Matrix d_o = matmul_dequantized_bt(g, last_w_hat_);
    for (std::size_t i = 0; i < dx_hat.rows; ++i) {
      for (std::size_t k = 0; k < outliers_.size(); ++k) dx_hat(i, outliers_[k]) += d_o(i, k);
    }
  }
  const std::vector<float>& s = last_s_.empty() ? state_.s : last_s_;
  return scale_columns(dx_hat, s, ScaleMode::Divide);
}

std::size_t QuaffEngine::storage_bytes() const {
  return c_in() * c_out()             // W_int
         + 4 * w_q_.steps.size()      // Delta_W
         + 4 * w_o_.size()            // W_O
         + 4 * w_o_abs_max_.size()    // weight row maxima over O
         + 4 * state_.s.size();       // s
}

void QuaffEngine::save(TensorTable& t, const std::string& p) const {
  put_header(t, p, kind());
  t.put_u32(p + ".O", std::vector<std::uint32_t>(outliers_.begin(), outliers_.end()));
  put_quantized(t, p + ".W", w_q_);
  t.put_f32(p + ".W_O", w_o_);
  t.put_f32(p + ".s", state_.s);
  t.put_f32(p + ".gamma", std::vector<float>{state_.gamma});
  t.put_u64(p + ".step", {state_.step});
}

std::unique_ptr<QuaffEngine> QuaffEngine::load(const TensorTable& t, const std::string& p, EngineKind kind,
                                               std::size_t c_in, std::size_t c_out) {
  ChannelIndexSet o(t.get_u32(p + ".O"), c_in);
  auto w_q = get_quantized_per_oc(t, p + ".W", c_in, c_out);
  Matrix w_o = t.get_matrix(p + ".W_O", o.size(), c_out);
  ScalingState st;
  st.s = t.get_f32(p + ".s", c_in);
  st.gamma = t.get_f32(p + ".gamma", 1)[0];
  auto step = t.get_u64(p + ".step");
  if (step.size() != 1) throw DataError("tensor " + p + ".step must hold one value");
  st.step = step[0];
  return std::make_unique<QuaffEngine>(kind, std::move(w_q), std::move(o), std::move(w_o), std::move(st));
}

// ---------------------------------------------------------------------------------------------

Matrix decomposed_forward_f32(const Matrix& x, const Matrix& w, const ChannelIndexSet& outliers, std::span<const float> s) {
  if (x.cols != w.rows || s.size() != x.cols) throw DataError("decomposed forward: shape mismatch");
  Matrix x_hat = scale_columns(x, s, ScaleMode::Divide);
  Matrix y = matmul_f32(x_hat, w);
  if (outliers.empty()) return y;
  Matrix w_hat = select_rows(w, outliers);
  for (std::size_t k = 0; k < outliers.size(); ++k) {
    const float f = s[outliers[k]] - 1.0f;
    for (float& v : w_hat.row(k)) v *= f;
  }
  add_inplace(y, matmul_f32(select_columns(x_hat, outliers), w_hat));
  return y;
}

std::unique_ptr<QLinearEngine> prepare_engine(const Matrix& w, EngineKind kind, const CalibrationStats* calib,
                                              const ChannelIndexSet& outliers, const EngineConfig& config) {
  if (!all_finite(w)) throw NumericalError("cannot prepare an engine from non-finite weights");
  if (!outliers.empty() && outliers.indices().back() >= w.rows) {
    throw DataError("outlier channel " + std::to_string(outliers.indices().back()) + " out of range for c_in " +
                    std::to_string(w.rows));
  }
  if (calib && calib->c_in() != w.rows) {
    throw DataError("calibration stats cover " + std::to_string(calib->c_in()) + " channels, weights have " +
                    std::to_string(w.rows));
  }
  switch (kind) {
    case EngineKind::FP32: return std::make_unique<Fp32Engine>(w);
    case EngineKind::Naive: return std::make_unique<NaiveEngine>(quantize(w, Granularity::PerOC, config.bits));
    case EngineKind::SmoothStatic: {
      if (!calib) throw ConfigError("smooth_static needs calibration statistics");
      auto s = smooth_factors(calib->channel_abs_max, row_abs_max(w), config.alpha);
      return std::make_unique<SmoothStaticEngine>(quantize(scale_rows(w, s), Granularity::PerOC, config.bits),
                                                  std::move(s));
    }
    case EngineKind::SmoothDynamic: return std::make_unique<SmoothDynamicEngine>(w, config.alpha, config.bits);
    case EngineKind::LLMInt8:
      return std::make_unique<LlmInt8Engine>(w, quantize(w, Granularity::PerOC, config.bits), config.sigma);
    case EngineKind::Quaff:
    case EngineKind::QuaffNoMomentum: {
      Matrix w_o = select_rows(w, outliers);
      std::vector<float> w_o_max(outliers.size(), 0.0f);
      for (std::size_t k = 0; k < outliers.size(); ++k) {
        for (float v : w_o.row(k)) w_o_max[k] = std::max(w_o_max[k], std::fabs(v));
        if (!(w_o_max[k] > 0.0f)) {
          throw DataError("outlier weight row " + std::to_string(outliers[k]) + " is all zero; it cannot be scaled");
        }
      }
      const float gamma = kind == EngineKind::QuaffNoMomentum ? 0.0f : config.gamma;
      ScalingState st = ScalingState::identity(w.rows, gamma);
      if (calib && !outliers.empty()) st.s = compute_beta_from_maxima(calib->channel_abs_max, w_o_max, outliers);
      return std::make_unique<QuaffEngine>(kind, quantize(w, Granularity::PerOC, config.bits), outliers,
                                           std::move(w_o), std::move(st));
    }
  }
  throw ConfigError("unknown engine kind");
}

std::unique_ptr<QLinearEngine> load_engine(const TensorTable& t, const std::string& p, std::size_t c_in,
                                           std::size_t c_out) {
  auto k = t.get_u32(p + ".kind");
  if (k.size() != 1 || k[0] > static_cast<std::uint32_t>(EngineKind::QuaffNoMomentum)) {
    throw DataError("tensor " + p + ".kind is not a valid engine kind");
  }
  const auto kind = static_cast<EngineKind>(k[0]);
  switch (kind) {
    case EngineKind::FP32: return std::make_unique<Fp32Engine>(t.get_matrix(p + ".W", c_in, c_out));
    case EngineKind::Naive: return std::make_unique<NaiveEngine>(get_quantized_per_oc(t, p + ".W", c_in, c_out));
    case EngineKind::SmoothStatic:
      return std::make_unique<SmoothStaticEngine>(get_quantized_per_oc(t, p + ".W_hat", c_in, c_out),
                                                  t.get_f32(p + ".s", c_in));
    case EngineKind::SmoothDynamic:
      return std::make_unique<SmoothDynamicEngine>(t.get_matrix(p + ".W", c_in, c_out), t.get_f32(p + ".alpha", 1)[0],
                                                   kDefaultBits);
    case EngineKind::LLMInt8:
      return std::make_unique<LlmInt8Engine>(t.get_matrix(p + ".W", c_in, c_out),
                                             get_quantized_per_oc(t, p + ".W", c_in, c_out),
                                             t.get_f32(p + ".sigma", 1)[0]);
    case EngineKind::Quaff:
    case EngineKind::QuaffNoMomentum: return QuaffEngine::load(t, p, kind, c_in, c_out);
  }
  throw DataError("unknown engine kind in checkpoint");
}

}  // namespace quaff
