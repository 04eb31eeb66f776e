// SPDX-License-Identifier: Apache-2.0
#include "quaff/model.hpp"

#include <algorithm>
#include <cmath>

#include "quaff/error.hpp"
#include "quaff/random.hpp"

namespace quaff {

namespace {

constexpr float kLayerNormEps = 1e-5f;

Matrix normal_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, float stddev) {
  return seeded_random_matrix(rows, cols, seed, Distribution::normal(0.0f, stddev));
}

std::vector<std::uint32_t> pick_channels(CounterRng& rng, std::size_t n, std::size_t k) {
  std::vector<std::uint32_t> all(n);
  for (std::uint32_t i = 0; i < n; ++i) all[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(all[i], all[i + rng.below(n - i)]);
  all.resize(k);
  std::sort(all.begin(), all.end());
  return all;
}

void scale_inplace(Matrix& m, float s) {
  for (float& v : m.data) v *= s;
}

}  // namespace

float gelu(float z) {
  constexpr float c = 0.7978845608028654f;  // sqrt(2 / pi)
  return 0.5f * z * (1.0f + std::tanh(c * (z + 0.044715f * z * z * z)));
}

float gelu_grad(float z) {
  constexpr float c = 0.7978845608028654f;
  const float t = std::tanh(c * (z + 0.044715f * z * z * z));
  return 0.5f * (1.0f + t) + 0.5f * z * (1.0f - t * t) * c * (1.0f + 3.0f * 0.044715f * z * z);
}

void ModelConfig::validate() const {
  if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_seq_len == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("n_heads (" + std::to_string(n_heads) + ") must divide d_model (" + std::to_string(d_model) + ")");
  }
  if (lora_rank == 0) throw ConfigError("lora_rank must be positive");
  if (!(lora_dropout >= 0.0f && lora_dropout < 1.0f)) throw ConfigError("lora_dropout must be in [0, 1)");
  if (outlier_channels > std::min(d_model, d_ff)) throw ConfigError("outlier_channels exceeds model width");
  if (!(outlier_gain > 0.0f) || !std::isfinite(outlier_gain)) throw ConfigError("outlier_gain must be positive");
}

std::pair<std::size_t, std::size_t> role_shape(const ModelConfig& mc, LayerRole role) {
  switch (role) {
    case LayerRole::UpProj: return {mc.d_model, mc.d_ff};
    case LayerRole::DownProj: return {mc.d_ff, mc.d_model};
    default: return {mc.d_model, mc.d_model};
  }
}

std::string linear_name(std::size_t layer, LayerRole role) {
  return "layers." + std::to_string(layer) + "." + std::string(to_string(role));
}

LoraAdapter LoraAdapter::init(std::size_t c_in, std::size_t c_out, std::size_t rank, float alpha, float dropout_p,
                              std::uint64_t seed) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(c_in));
  LoraAdapter l;
  l.a = seeded_random_matrix(c_in, rank, seed, Distribution::uniform(-bound, bound));
  l.b = Matrix(rank, c_out, 0.0f);
  l.alpha = alpha;
  l.dropout_p = dropout_p;
  return l;
}

// ---- Linear ----

Linear::Linear(std::string name, LayerRole role, Matrix w, LoraAdapter lora)
    : name_(std::move(name)), role_(role), w_(std::move(w)), lora_(std::move(lora)) {
  w_row_abs_max_ = row_abs_max(w_);
  engine_ = prepare_engine(w_, EngineKind::FP32, nullptr, {});
}

void Linear::set_engine(std::unique_ptr<QLinearEngine> engine) {
  if (engine->c_in() != w_.rows || engine->c_out() != w_.cols) {
    throw DataError(name_ + ": engine shape " + std::to_string(engine->c_in()) + "x" +
                    std::to_string(engine->c_out()) + " does not match weight " + w_.shape());
  }
  engine_ = std::move(engine);
}

void Linear::set_weight(Matrix w) {
  if (w.rows != w_.rows || w.cols != w_.cols) throw DataError(name_ + ": weight shape " + w.shape() + " expected " + w_.shape());
  w_ = std::move(w);
  w_row_abs_max_ = row_abs_max(w_);
}

Matrix Linear::forward(const Matrix& x, std::optional<std::uint64_t> dropout_seed) {
  x_ = x;
  y_engine_ = engine_->forward(x);
  const float p = lora_.dropout_p;
  if (dropout_seed && p > 0.0f) {
    CounterRng rng(*dropout_seed);
    const float keep = 1.0f / (1.0f - p);
    mask_ = Matrix(x.rows, x.cols);
    x_drop_ = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      mask_.data[i] = rng.uniform() < p ? 0.0f : keep;
      x_drop_.data[i] *= mask_.data[i];
    }
  } else {
    mask_ = Matrix();
    x_drop_ = x;
  }
  xa_ = matmul_f32(x_drop_, lora_.a);
  Matrix delta = matmul_f32(xa_, lora_.b);
  const float s = lora_.scale();
  Matrix y = y_engine_;
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += s * delta.data[i];
  return y;
}

Matrix Linear::backward(const Matrix& grad_out, LoraGrad& grad) const {
  const float s = lora_.scale();
  Matrix gb = matmul_f32_bt(grad_out, lora_.b);
  grad.a = matmul_f32_at(x_drop_, gb);
  scale_inplace(grad.a, s);
  grad.b = matmul_f32_at(xa_, grad_out);
  scale_inplace(grad.b, s);

  Matrix dx = engine_->backward_input(grad_out);
  Matrix dl = matmul_f32_bt(gb, lora_.a);
  for (std::size_t i = 0; i < dx.size(); ++i) {
    const float m = mask_.empty() ? 1.0f : mask_.data[i];
    dx.data[i] += s * dl.data[i] * m;
  }
  return dx;
}

// ---- LayerNorm ----

Matrix LayerNorm::forward(const Matrix& x) {
  const std::size_t n = x.cols;
  x_hat = Matrix(x.rows, n);
  rstd.assign(x.rows, 0.0f);
  Matrix y(x.rows, n);
  for (std::size_t i = 0; i < x.rows; ++i) {
    auto r = x.row(i);
    double mean = 0.0, var = 0.0;
    for (float v : r) mean += v;
    mean /= static_cast<double>(n);
    for (float v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const float rs = static_cast<float>(1.0 / std::sqrt(var + kLayerNormEps));
    rstd[i] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const float xh = (r[j] - static_cast<float>(mean)) * rs;
      x_hat(i, j) = xh;
      y(i, j) = xh * gamma[j] + beta[j];
    }
  }
  return y;
}

Matrix LayerNorm::backward(const Matrix& grad_out) const {
  const std::size_t n = grad_out.cols;
  Matrix dx(grad_out.rows, n);
  std::vector<float> dxh(n);
  for (std::size_t i = 0; i < grad_out.rows; ++i) {
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      dxh[j] = grad_out(i, j) * gamma[j];
      m1 += dxh[j];
      m2 += dxh[j] * x_hat(i, j);
    }
    const float a = static_cast<float>(m1 / static_cast<double>(n));
    const float b = static_cast<float>(m2 / static_cast<double>(n));
    for (std::size_t j = 0; j < n; ++j) dx(i, j) = rstd[i] * (dxh[j] - a - x_hat(i, j) * b);
  }
  return dx;
}

// ---- Model ----

Model::Model(ModelConfig mc) : mc_(std::move(mc)) {
  mc_.validate();
  const std::uint64_t seed = mc_.seed;
  const std::size_t d = mc_.d_model;
  tok_emb = normal_matrix(mc_.vocab_size, d, derive_seed(seed, "tok_emb"), 1.0f);
  pos_emb = normal_matrix(mc_.max_seq_len, d, derive_seed(seed, "pos_emb"), 1.0f);
  lm_head = normal_matrix(d, mc_.vocab_size, derive_seed(seed, "lm_head"), 1.0f / std::sqrt(static_cast<float>(d)));
  ln_f.gamma.assign(d, 1.0f);
  ln_f.beta.assign(d, 0.0f);

  CounterRng pick(derive_seed(seed, "outliers"));
  for (std::size_t l = 0; l < mc_.n_layers; ++l) {
    const std::uint64_t ls = derive_seed(seed, l);
    std::array<Matrix, 6> w;
    for (LayerRole r : kAllRoles) {
      auto [c_in, c_out] = role_shape(mc_, r);
      w[static_cast<std::size_t>(r)] =
          normal_matrix(c_in, c_out, derive_seed(ls, to_string(r)), 1.0f / std::sqrt(static_cast<float>(c_in)));
    }
    auto W = [&](LayerRole r) -> Matrix& { return w[static_cast<std::size_t>(r)]; };

    Block b;
    b.ln1.gamma.assign(d, 1.0f);
    b.ln1.beta.assign(d, 0.0f);
    b.ln2 = b.ln1;

    const std::size_t k = mc_.outlier_channels;
    const float g = mc_.outlier_gain;
    if (k > 0) {
      for (std::uint32_t c : pick_channels(pick, d, k)) {
        b.ln1.gamma[c] = g;
        b.ln2.gamma[c] = g;
        for (LayerRole r : {LayerRole::QProj, LayerRole::KProj, LayerRole::VProj, LayerRole::UpProj}) {
          for (float& v : W(r).row(c)) v /= g;
        }
      }
      for (std::uint32_t c : pick_channels(pick, d, k)) {
        for (std::size_t i = 0; i < d; ++i) W(LayerRole::VProj)(i, c) *= g;
        for (float& v : W(LayerRole::OProj).row(c)) v /= g;
      }
      for (std::uint32_t c : pick_channels(pick, mc_.d_ff, k)) {
        for (std::size_t i = 0; i < d; ++i) W(LayerRole::UpProj)(i, c) *= g;
        for (float& v : W(LayerRole::DownProj).row(c)) v /= g;
      }
    }

    for (LayerRole r : kAllRoles) {
      auto [c_in, c_out] = role_shape(mc_, r);
      auto lora = LoraAdapter::init(c_in, c_out, mc_.lora_rank, mc_.lora_alpha, mc_.lora_dropout,
                                    derive_seed(ls, "lora." + std::string(to_string(r))));
      b.linears.emplace_back(linear_name(l, r), r, std::move(W(r)), std::move(lora));
    }
    blocks_.push_back(std::move(b));
  }
}

std::vector<Linear*> Model::linears() {
  std::vector<Linear*> out;
  for (auto& b : blocks_) {
    for (auto& l : b.linears) out.push_back(&l);
  }
  return out;
}

std::vector<const Linear*> Model::linears() const {
  std::vector<const Linear*> out;
  for (const auto& b : blocks_) {
    for (const auto& l : b.linears) out.push_back(&l);
  }
  return out;
}

void Model::prepare_engines(const CalibrationArtifact* calib, const EngineConfig& config) {
  for (Linear* l : linears()) {
    const EngineKind kind = mc_.engine_for(l->role());
    const CalibrationLayer* cl = calib ? calib->find(l->name()) : nullptr;
    if (calib && !cl) throw DataError("calibration artifact has no layer " + l->name());
    if (cl && (cl->stats.c_in() != l->weight().rows || cl->c_out != l->weight().cols)) {
      throw DataError("calibration layer " + l->name() + " does not match the model shape");
    }
    l->set_engine(prepare_engine(l->weight(), kind, cl ? &cl->stats : nullptr, cl ? cl->outliers : ChannelIndexSet(),
                                 config));
  }
}

namespace {

void check_batch(const ModelConfig& mc, const TokenBatch& tb, bool need_targets) {
  if (tb.batch == 0 || tb.seq == 0) throw DataError("empty token batch");
  if (tb.seq > mc.max_seq_len) {
    throw DataError("sequence length " + std::to_string(tb.seq) + " exceeds max_seq_len " + std::to_string(mc.max_seq_len));
  }
  const std::size_t n = tb.batch * tb.seq;
  if (tb.inputs.size() != n) throw DataError("token batch inputs do not match batch x seq");
  if (need_targets && tb.targets.size() != n) throw DataError("token batch targets do not match batch x seq");
  for (auto id : tb.inputs) {
    if (id >= mc.vocab_size) throw DataError("token id " + std::to_string(id) + " out of vocabulary");
  }
  if (need_targets) {
    for (auto id : tb.targets) {
      if (id >= mc.vocab_size) throw DataError("target id " + std::to_string(id) + " out of vocabulary");
    }
  }
}

std::optional<std::uint64_t> dropout_stream(const ForwardOptions& opt, std::size_t layer, LayerRole r) {
  if (!opt.dropout_seed) return std::nullopt;
  return derive_seed(derive_seed(*opt.dropout_seed, layer), to_string(r));
}

// probs holds (batch * heads * seq) x seq causal attention weights.
Matrix attention_forward(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t batch, std::size_t seq,
                         std::size_t heads, Matrix& probs) {
  const std::size_t d = q.cols, dh = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  probs = Matrix(batch * heads * seq, seq, 0.0f);
  Matrix out(q.rows, d, 0.0f);
  std::vector<float> sc(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < seq; ++i) {
        const float* qi = &q(b * seq + i, c0);
        float mx = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) {
          const float* kj = &k(b * seq + j, c0);
          float acc = 0.0f;
          for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          sc[j] = acc * scale;
          mx = std::max(mx, sc[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          sc[j] = std::exp(sc[j] - mx);
          sum += sc[j];
        }
        float* p = &probs((b * heads + h) * seq + i, 0);
        float* oi = &out(b * seq + i, c0);
        for (std::size_t j = 0; j <= i; ++j) {
          p[j] = static_cast<float>(sc[j] / sum);
          const float* vj = &v(b * seq + j, c0);
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }
  return out;
}

void attention_backward(const Matrix& d_out, const Matrix& q, const Matrix& k, const Matrix& v, const Matrix& probs,
                        std::size_t batch, std::size_t seq, std::size_t heads, Matrix& dq, Matrix& dk, Matrix& dv) {
  const std::size_t d = q.cols, dh = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  dq = Matrix(q.rows, d, 0.0f);
  dk = Matrix(q.rows, d, 0.0f);
  dv = Matrix(q.rows, d, 0.0f);
  std::vector<float> dp(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < seq; ++i) {
        const float* p = &probs((b * heads + h) * seq + i, 0);
        const float* doi = &d_out(b * seq + i, c0);
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const float* vj = &v(b * seq + j, c0);
          float* dvj = &dv(b * seq + j, c0);
          float acc = 0.0f;
          for (std::size_t c = 0; c < dh; ++c) {
            acc += doi[c] * vj[c];
            dvj[c] += p[j] * doi[c];
          }
          dp[j] = acc;
          dot += static_cast<double>(acc) * p[j];
        }
        const float* qi = &q(b * seq + i, c0);
        float* dqi = &dq(b * seq + i, c0);
        for (std::size_t j = 0; j <= i; ++j) {
          const float ds = p[j] * (dp[j] - static_cast<float>(dot)) * scale;
          if (ds == 0.0f) continue;
          const float* kj = &k(b * seq + j, c0);
          float* dkj = &dk(b * seq + j, c0);
          for (std::size_t c = 0; c < dh; ++c) {
            dqi[c] += ds * kj[c];
            dkj[c] += ds * qi[c];
          }
        }
      }
    }
  }
}

void record(std::vector<LinearTrace>& traces, const Linear& l) {
  traces.push_back({l.name(), l.role(), l.last_input(), l.last_engine_output()});
}

}  // namespace

LmOutput Model::forward(const TokenBatch& tb, const ForwardOptions& opt) {
  check_batch(mc_, tb, false);
  const std::size_t n = tb.batch * tb.seq, d = mc_.d_model;
  Matrix x(n, d);
  for (std::size_t b = 0; b < tb.batch; ++b) {
    for (std::size_t t = 0; t < tb.seq; ++t) {
      const std::size_t r = b * tb.seq + t;
      auto e = tok_emb.row(tb.inputs[r]);
      auto p = pos_emb.row(t);
      for (std::size_t c = 0; c < d; ++c) x(r, c) = e[c] + p[c];
    }
  }

  LmOutput out;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    Block& blk = blocks_[l];
    auto fwd = [&](LayerRole r, const Matrix& in) {
      Matrix y = blk.linear(r).forward(in, dropout_stream(opt, l, r));
      if (opt.record) record(out.traces, blk.linear(r));
      return y;
    };
    Matrix a = blk.ln1.forward(x);
    blk.q = fwd(LayerRole::QProj, a);
    blk.k = fwd(LayerRole::KProj, a);
    blk.v = fwd(LayerRole::VProj, a);
    Matrix att = attention_forward(blk.q, blk.k, blk.v, tb.batch, tb.seq, mc_.n_heads, blk.probs);
    add_inplace(x, fwd(LayerRole::OProj, att));
    Matrix m = blk.ln2.forward(x);
    blk.up_out = fwd(LayerRole::UpProj, m);
    blk.gelu_out = blk.up_out;
    for (float& v : blk.gelu_out.data) v = gelu(v);
    add_inplace(x, fwd(LayerRole::DownProj, blk.gelu_out));
  }
  final_hidden_ = ln_f.forward(x);
  out.logits = matmul_f32(final_hidden_, lm_head);
  return out;
}

LossAndGrads Model::loss_and_grads(const TokenBatch& tb, const ForwardOptions& opt) {
  check_batch(mc_, tb, true);
  LmOutput fwd = forward(tb, opt);
  const std::size_t n = tb.batch * tb.seq, vocab = mc_.vocab_size;

  LossAndGrads res;
  res.traces = std::move(fwd.traces);
  Matrix dlogits(n, vocab);
  double total = 0.0;
  const float inv_n = 1.0f / static_cast<float>(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto z = fwd.logits.row(i);
    const float mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (float v : z) sum += std::exp(static_cast<double>(v - mx));
    const double lse = mx + std::log(sum);
    total += lse - z[tb.targets[i]];
    for (std::size_t c = 0; c < vocab; ++c) {
      dlogits(i, c) = static_cast<float>(std::exp(static_cast<double>(z[c]) - lse)) * inv_n;
    }
    dlogits(i, tb.targets[i]) -= inv_n;
  }
  res.loss = total / static_cast<double>(n);
  if (!std::isfinite(res.loss)) throw NumericalError("non-finite loss");

  Matrix dx = ln_f.backward(matmul_f32_bt(dlogits, lm_head));

  res.grads.resize(blocks_.size() * 6);
  for (std::size_t li = blocks_.size(); li-- > 0;) {
    Block& blk = blocks_[li];
    auto grad = [&](LayerRole r) -> LoraGrad& { return res.grads[li * 6 + static_cast<std::size_t>(r)]; };

    Matrix dg = blk.linear(LayerRole::DownProj).backward(dx, grad(LayerRole::DownProj));
    for (std::size_t i = 0; i < dg.size(); ++i) dg.data[i] *= gelu_grad(blk.up_out.data[i]);
    Matrix dm = blk.linear(LayerRole::UpProj).backward(dg, grad(LayerRole::UpProj));
    add_inplace(dx, blk.ln2.backward(dm));

    Matrix datt = blk.linear(LayerRole::OProj).backward(dx, grad(LayerRole::OProj));
    Matrix dq, dk, dv;
    attention_backward(datt, blk.q, blk.k, blk.v, blk.probs, tb.batch, tb.seq, mc_.n_heads, dq, dk, dv);
    Matrix da = blk.linear(LayerRole::QProj).backward(dq, grad(LayerRole::QProj));
    add_inplace(da, blk.linear(LayerRole::KProj).backward(dk, grad(LayerRole::KProj)));
    add_inplace(da, blk.linear(LayerRole::VProj).backward(dv, grad(LayerRole::VProj)));
    add_inplace(dx, blk.ln1.backward(da));
  }
  return res;
}

ParameterCount Model::parameter_count() const {
  ParameterCount pc;
  pc.frozen = tok_emb.size() + pos_emb.size() + lm_head.size() + ln_f.gamma.size() + ln_f.beta.size();
  for (const auto& b : blocks_) {
    pc.frozen += b.ln1.gamma.size() + b.ln1.beta.size() + b.ln2.gamma.size() + b.ln2.beta.size();
    for (const auto& l : b.linears) {
      pc.frozen += l.weight().size();
      pc.trainable += l.lora().a.size() + l.lora().b.size();
    }
  }
  return pc;
}

ParameterCount parameter_census(const ModelConfig& mc) {
  const std::size_t V = mc.vocab_size, d = mc.d_model, f = mc.d_ff, L = mc.n_layers, S = mc.max_seq_len,
                    r = mc.lora_rank;
  ParameterCount pc;
  pc.frozen = V * d + S * d + d * V + 2 * d + L * (4 * d + 4 * d * d + 2 * d * f);
  pc.trainable = L * r * (4 * (d + d) + 2 * (d + f));
  return pc;
}

}  // namespace quaff
