// SPDX-License-Identifier: Apache-2.0
#include "quaff/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "quaff/error.hpp"
#include "quaff/random.hpp"

namespace quaff {

namespace {

std::vector<char32_t> decode_utf8(std::string_view s) {
  std::vector<char32_t> out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      len = 1;
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      len = 4;
      cp = b0 & 0x07;
    } else {
      throw DataError("invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    if (i + len > s.size()) throw DataError("truncated UTF-8 sequence at offset " + std::to_string(i));
    for (std::size_t k = 1; k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b & 0xC0) != 0x80) throw DataError("invalid UTF-8 continuation at offset " + std::to_string(i + k));
      cp = (cp << 6) | (b & 0x3F);
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

}  // namespace

std::uint32_t CharVocab::id(char32_t c) const {
  auto it = std::lower_bound(symbols.begin(), symbols.end(), c);
  if (it == symbols.end() || *it != c) throw DataError("symbol U+" + std::to_string(static_cast<std::uint32_t>(c)) + " not in vocabulary");
  return static_cast<std::uint32_t>(it - symbols.begin());
}

Tokenized char_tokenize(std::string_view utf8) {
  if (utf8.empty()) throw DataError("empty corpus");
  auto cps = decode_utf8(utf8);
  Tokenized t;
  t.vocab.symbols = cps;
  std::sort(t.vocab.symbols.begin(), t.vocab.symbols.end());
  t.vocab.symbols.erase(std::unique(t.vocab.symbols.begin(), t.vocab.symbols.end()), t.vocab.symbols.end());
  t.ids.reserve(cps.size());
  for (char32_t c : cps) t.ids.push_back(t.vocab.id(c));
  return t;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

BatchSampler::BatchSampler(std::vector<std::uint32_t> ids, std::size_t batch_size, std::size_t seq_len,
                           std::uint64_t seed)
    : ids_(std::move(ids)), batch_size_(batch_size), seq_len_(seq_len), seed_(derive_seed(seed, "batches")) {
  if (batch_size_ == 0 || seq_len_ == 0) throw ConfigError("batch_size and seq_len must be positive");
  if (ids_.size() < seq_len_ + 1) {
    throw DataError("corpus has " + std::to_string(ids_.size()) + " tokens, need at least " + std::to_string(seq_len_ + 1));
  }
}

TokenBatch BatchSampler::sample(std::uint64_t step, std::uint64_t micro) const {
  CounterRng rng(derive_seed(derive_seed(seed_, step), micro));
  TokenBatch tb;
  tb.batch = batch_size_;
  tb.seq = seq_len_;
  tb.inputs.resize(batch_size_ * seq_len_);
  tb.targets.resize(batch_size_ * seq_len_);
  const std::size_t starts = ids_.size() - seq_len_;
  for (std::size_t b = 0; b < batch_size_; ++b) {
    const std::size_t off = rng.below(starts);
    std::copy_n(ids_.begin() + static_cast<std::ptrdiff_t>(off), seq_len_, tb.inputs.begin() + static_cast<std::ptrdiff_t>(b * seq_len_));
    std::copy_n(ids_.begin() + static_cast<std::ptrdiff_t>(off + 1), seq_len_,
                tb.targets.begin() + static_cast<std::ptrdiff_t>(b * seq_len_));
  }
  return tb;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0f) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (!(beta1 >= 0.0f && beta1 < 1.0f) || !(beta2 >= 0.0f && beta2 < 1.0f)) throw ConfigError("adam betas must be in [0, 1)");
  if (!(eps > 0.0f)) throw ConfigError("adam eps must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (grad_accum == 0) throw ConfigError("grad_accum must be at least 1");
  if (seq_len == 0) throw ConfigError("seq_len must be at least 1");
}

AdamState AdamState::zeros(const Model& model) {
  AdamState s;
  for (const Linear* l : model.linears()) {
    LoraGrad z{Matrix(l->lora().a.rows, l->lora().a.cols, 0.0f), Matrix(l->lora().b.rows, l->lora().b.cols, 0.0f)};
    s.m.push_back(z);
    s.v.push_back(z);
  }
  return s;
}

namespace {

void adam_apply(Matrix& p, Matrix& m, Matrix& v, const Matrix& g, const TrainConfig& tc, float bc1, float bc2) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    const float gi = g.data[i];
    m.data[i] = tc.beta1 * m.data[i] + (1.0f - tc.beta1) * gi;
    v.data[i] = tc.beta2 * v.data[i] + (1.0f - tc.beta2) * gi * gi;
    const float mh = m.data[i] / bc1, vh = v.data[i] / bc2;
    p.data[i] -= tc.lr * mh / (std::sqrt(vh) + tc.eps);
  }
}

}  // namespace

void adam_update(Model& model, AdamState& state, const std::vector<LoraGrad>& grads, const TrainConfig& tc) {
  auto lin = model.linears();
  if (grads.size() != lin.size() || state.m.size() != lin.size()) throw DataError("gradient / optimizer state size mismatch");
  ++state.t;
  const float bc1 = 1.0f - static_cast<float>(std::pow(tc.beta1, static_cast<double>(state.t)));
  const float bc2 = 1.0f - static_cast<float>(std::pow(tc.beta2, static_cast<double>(state.t)));
  for (std::size_t i = 0; i < lin.size(); ++i) {
    adam_apply(lin[i]->lora().a, state.m[i].a, state.v[i].a, grads[i].a, tc, bc1, bc2);
    adam_apply(lin[i]->lora().b, state.m[i].b, state.v[i].b, grads[i].b, tc, bc1, bc2);
  }
}

StepMetrics train_step(Model& model, AdamState& state, const BatchSampler& sampler, const TrainConfig& tc, bool record) {
  const auto t0 = std::chrono::steady_clock::now();
  StepMetrics sm;
  sm.step = state.t;
  const std::uint64_t drop_root = derive_seed(tc.seed, "dropout");
  std::vector<LoraGrad> acc;
  double loss = 0.0;
  for (std::size_t micro = 0; micro < tc.grad_accum; ++micro) {
    ForwardOptions opt;
    opt.record = record && micro == 0;
    if (tc.dropout) opt.dropout_seed = derive_seed(derive_seed(drop_root, sm.step), micro);
    LossAndGrads lg;
    try {
      lg = model.loss_and_grads(sampler.sample(sm.step, micro), opt);
    } catch (const NumericalError& e) {
      throw NumericalError("step " + std::to_string(sm.step) + ": " + e.what());
    }
    loss += lg.loss;
    if (opt.record) sm.traces = std::move(lg.traces);
    if (acc.empty()) {
      acc = std::move(lg.grads);
    } else {
      for (std::size_t i = 0; i < acc.size(); ++i) {
        add_inplace(acc[i].a, lg.grads[i].a);
        add_inplace(acc[i].b, lg.grads[i].b);
      }
    }
  }
  if (tc.grad_accum > 1) {
    const float inv = 1.0f / static_cast<float>(tc.grad_accum);
    for (auto& g : acc) {
      for (float& v : g.a.data) v *= inv;
      for (float& v : g.b.data) v *= inv;
    }
  }
  sm.loss = loss / static_cast<double>(tc.grad_accum);
  adam_update(model, state, acc, tc);
  for (const Linear* l : model.linears()) {
    const auto* q = dynamic_cast<const QuaffEngine*>(&l->engine());
    sm.scaling.push_back(q ? q->scaling_state().s : std::vector<float>{});
  }
  sm.step_latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return sm;
}

// ---- checkpoint ----

namespace {

void put_layer_norm(TensorTable& t, const std::string& p, const LayerNorm& ln) {
  t.put_f32(p + ".gamma", ln.gamma);
  t.put_f32(p + ".beta", ln.beta);
}

void get_layer_norm(const TensorTable& t, const std::string& p, LayerNorm& ln) {
  ln.gamma = t.get_f32(p + ".gamma", ln.gamma.size());
  ln.beta = t.get_f32(p + ".beta", ln.beta.size());
}

ModelConfig config_from_table(const TensorTable& t) {
  auto dims = t.get_u64("config.dims");
  auto f = t.get_f32("config.f32", 3);
  auto kinds = t.get_u32("config.engines");
  if (dims.size() != 9 || kinds.size() != 6) throw DataError("malformed config record in checkpoint");
  ModelConfig mc;
  mc.vocab_size = dims[0];
  mc.d_model = dims[1];
  mc.n_layers = dims[2];
  mc.n_heads = dims[3];
  mc.d_ff = dims[4];
  mc.max_seq_len = dims[5];
  mc.seed = dims[6];
  mc.lora_rank = dims[7];
  mc.outlier_channels = dims[8];
  mc.lora_alpha = f[0];
  mc.lora_dropout = f[1];
  mc.outlier_gain = f[2];
  for (std::size_t i = 0; i < 6; ++i) {
    if (kinds[i] > static_cast<std::uint32_t>(EngineKind::QuaffNoMomentum)) throw DataError("unknown engine kind in checkpoint");
    mc.engine_kind[i] = static_cast<EngineKind>(kinds[i]);
  }
  return mc;
}

std::string describe(const ModelConfig& mc) {
  return "vocab " + std::to_string(mc.vocab_size) + ", d_model " + std::to_string(mc.d_model) + ", layers " +
         std::to_string(mc.n_layers) + ", heads " + std::to_string(mc.n_heads) + ", d_ff " + std::to_string(mc.d_ff) +
         ", max_seq_len " + std::to_string(mc.max_seq_len) + ", rank " + std::to_string(mc.lora_rank);
}

}  // namespace

TensorTable model_to_table(const Model& model, const AdamState& adam) {
  const ModelConfig& mc = model.config();
  TensorTable t;
  t.put_u64("config.dims", {mc.vocab_size, mc.d_model, mc.n_layers, mc.n_heads, mc.d_ff, mc.max_seq_len, mc.seed,
                            mc.lora_rank, mc.outlier_channels});
  t.put_f32("config.f32", std::vector<float>{mc.lora_alpha, mc.lora_dropout, mc.outlier_gain});
  std::vector<std::uint32_t> kinds;
  for (EngineKind k : mc.engine_kind) kinds.push_back(static_cast<std::uint32_t>(k));
  t.put_u32("config.engines", kinds);

  t.put_f32("tok_emb", model.tok_emb);
  t.put_f32("pos_emb", model.pos_emb);
  t.put_f32("lm_head", model.lm_head);
  put_layer_norm(t, "ln_f", model.ln_f);
  for (std::size_t l = 0; l < mc.n_layers; ++l) {
    put_layer_norm(t, "layers." + std::to_string(l) + ".ln1", model.block(l).ln1);
    put_layer_norm(t, "layers." + std::to_string(l) + ".ln2", model.block(l).ln2);
  }
  auto lin = model.linears();
  for (std::size_t i = 0; i < lin.size(); ++i) {
    const std::string& n = lin[i]->name();
    t.put_f32(n + ".w", lin[i]->weight());
    t.put_f32(n + ".lora.a", lin[i]->lora().a);
    t.put_f32(n + ".lora.b", lin[i]->lora().b);
    lin[i]->engine().save(t, n + ".engine");
    if (i < adam.m.size()) {
      t.put_f32(n + ".adam.m.a", adam.m[i].a);
      t.put_f32(n + ".adam.m.b", adam.m[i].b);
      t.put_f32(n + ".adam.v.a", adam.v[i].a);
      t.put_f32(n + ".adam.v.b", adam.v[i].b);
    }
  }
  t.put_u64("adam.t", {adam.t});
  return t;
}

LoadedModel model_from_table(const TensorTable& t, const ModelConfig* expected) {
  ModelConfig mc = config_from_table(t);
  if (expected) {
    ModelConfig want = *expected;
    want.engine_kind = mc.engine_kind;
    if (!(want == mc)) throw DataError("checkpoint config (" + describe(mc) + ") does not match expected (" + describe(*expected) + ")");
  }
  try {
    mc.validate();
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint config invalid: ") + e.what());
  }
  LoadedModel lm{Model(mc), AdamState{}};
  Model& m = lm.model;
  m.tok_emb = t.get_matrix("tok_emb", m.tok_emb.rows, m.tok_emb.cols);
  m.pos_emb = t.get_matrix("pos_emb", m.pos_emb.rows, m.pos_emb.cols);
  m.lm_head = t.get_matrix("lm_head", m.lm_head.rows, m.lm_head.cols);
  get_layer_norm(t, "ln_f", m.ln_f);
  for (std::size_t l = 0; l < mc.n_layers; ++l) {
    get_layer_norm(t, "layers." + std::to_string(l) + ".ln1", m.block(l).ln1);
    get_layer_norm(t, "layers." + std::to_string(l) + ".ln2", m.block(l).ln2);
  }
  lm.adam = AdamState::zeros(m);
  auto lin = m.linears();
  for (std::size_t i = 0; i < lin.size(); ++i) {
    Linear& L = *lin[i];
    const std::string& n = L.name();
    const Matrix& w = L.weight();
    L.set_weight(t.get_matrix(n + ".w", w.rows, w.cols));
    L.lora().a = t.get_matrix(n + ".lora.a", L.lora().a.rows, L.lora().a.cols);
    L.lora().b = t.get_matrix(n + ".lora.b", L.lora().b.rows, L.lora().b.cols);
    L.set_engine(load_engine(t, n + ".engine", L.weight().rows, L.weight().cols));
    auto& ms = lm.adam.m[i];
    auto& vs = lm.adam.v[i];
    ms.a = t.get_matrix(n + ".adam.m.a", ms.a.rows, ms.a.cols);
    ms.b = t.get_matrix(n + ".adam.m.b", ms.b.rows, ms.b.cols);
    vs.a = t.get_matrix(n + ".adam.v.a", vs.a.rows, vs.a.cols);
    vs.b = t.get_matrix(n + ".adam.v.b", vs.b.rows, vs.b.cols);
  }
  auto step = t.get_u64("adam.t");
  if (step.size() != 1) throw DataError("malformed adam.t record");
  lm.adam.t = step[0];
  return lm;
}

void save_model_checkpoint(const std::string& path, const Model& model, const AdamState& adam) {
  write_checkpoint(path, model_to_table(model, adam));
}

LoadedModel load_model_checkpoint(const std::string& path, const ModelConfig* expected) {
  return model_from_table(read_checkpoint(path), expected);
}

}  // namespace quaff
