// SPDX-License-Identifier: Apache-2.0
#include "quaff/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>

#include "quaff/error.hpp"

namespace quaff {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

class Parser {
 public:
  Parser(std::size_t line, std::string key) : line_(line), key_(std::move(key)) {}

  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError("line " + std::to_string(line_) + ": " + key_ + ": " + msg);
  }

  template <typename T>
  T number(std::string_view v) const {
    T out{};
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) fail("expected a number, got '" + std::string(v) + "'");
    return out;
  }

  bool boolean(std::string_view v) const {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    fail("expected true/false, got '" + std::string(v) + "'");
  }

  EngineKind engine(std::string_view v) const {
    auto k = parse_engine_kind(v);
    if (!k) fail("unknown engine '" + std::string(v) + "'");
    return *k;
  }

  LayerRole role(std::string_view v) const {
    auto r = parse_layer_role(v);
    if (!r) fail("unknown layer role '" + std::string(v) + "'");
    return *r;
  }

 private:
  std::size_t line_;
  std::string key_;
};

std::filesystem::path resolve(const std::filesystem::path& base, std::string_view v) {
  std::filesystem::path p{std::string(v)};
  if (p.is_relative() && !base.empty()) p = base / p;
  return p.lexically_normal();
}

template <typename T>
std::string fmt(T v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (!(engine_config.gamma >= 0.0f && engine_config.gamma <= 1.0f)) throw ConfigError("gamma must be in [0, 1]");
  if (!(engine_config.alpha >= 0.0f && engine_config.alpha <= 1.0f)) throw ConfigError("alpha must be in [0, 1]");
  if (!(engine_config.sigma >= 0.0f)) throw ConfigError("sigma must be non-negative");
  if (engine_config.bits < 4 || engine_config.bits > 8) throw ConfigError("bits must be in [4, 8]");
  for (float b : budget) {
    if (!(b >= 0.0f && b <= 1.0f)) throw ConfigError("budget fractions must be in [0, 1]");
  }
  if (!(max_full_precision >= 0.0 && max_full_precision <= 1.0)) throw ConfigError("max_fraction must be in [0, 1]");
  if (!(threshold > 0.0f)) throw ConfigError("threshold must be positive");
  if (!(pearson_top > 0.0 && pearson_top <= 1.0)) throw ConfigError("pearson_top must be in (0, 1]");
  if (calib_batches == 0) throw ConfigError("calibration batches must be at least 1");
  if (train.seq_len > model.max_seq_len) throw ConfigError("train.seq_len exceeds model.max_seq_len");
  if (corpus.empty()) throw ConfigError("corpus.path is required");
  if (!std::filesystem::is_regular_file(corpus)) throw ConfigError("corpus not found: " + corpus.string());
  if (!calib.empty() && !std::filesystem::is_regular_file(calib)) throw ConfigError("calibration artifact not found: " + calib.string());
  if (bench_reps == 0) throw ConfigError("microbench reps must be at least 1");
}

RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir) {
  RunConfig rc;
  rc.model.vocab_size = 1;  // placeholder until the corpus is read
  std::array<std::optional<EngineKind>, 6> role_engine;
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = trim(text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos));
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (section != "corpus" && section != "model" && section != "train" && section != "quant" &&
          section != "calibration" && section != "run" && section != "microbench" && section != "manifest") {
        throw ConfigError("line " + std::to_string(line_no) + ": unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view v = trim(line.substr(eq + 1));
    if (section.empty()) throw ConfigError("line " + std::to_string(line_no) + ": key outside any section");
    Parser p(line_no, section + "." + key);
    auto& m = rc.model;
    auto& t = rc.train;
    auto& e = rc.engine_config;

    if (section == "manifest") continue;  // provenance only
    if (section == "corpus" && key == "path") {
      rc.corpus = resolve(base_dir, v);
    } else if (section == "model") {
      if (key == "seed") m.seed = p.number<std::uint64_t>(v);
      else if (key == "d_model") m.d_model = p.number<std::size_t>(v);
      else if (key == "n_layers") m.n_layers = p.number<std::size_t>(v);
      else if (key == "n_heads") m.n_heads = p.number<std::size_t>(v);
      else if (key == "d_ff") m.d_ff = p.number<std::size_t>(v);
      else if (key == "max_seq_len") m.max_seq_len = p.number<std::size_t>(v);
      else if (key == "lora_rank") m.lora_rank = p.number<std::size_t>(v);
      else if (key == "lora_alpha") m.lora_alpha = p.number<float>(v);
      else if (key == "lora_dropout") m.lora_dropout = p.number<float>(v);
      else if (key == "outlier_channels") m.outlier_channels = p.number<std::size_t>(v);
      else if (key == "outlier_gain") m.outlier_gain = p.number<float>(v);
      else p.fail("unknown key");
    } else if (section == "train") {
      if (key == "lr") t.lr = p.number<float>(v);
      else if (key == "beta1") t.beta1 = p.number<float>(v);
      else if (key == "beta2") t.beta2 = p.number<float>(v);
      else if (key == "eps") t.eps = p.number<float>(v);
      else if (key == "batch_size") t.batch_size = p.number<std::size_t>(v);
      else if (key == "grad_accum") t.grad_accum = p.number<std::size_t>(v);
      else if (key == "seq_len") t.seq_len = p.number<std::size_t>(v);
      else if (key == "steps") t.steps = p.number<std::size_t>(v);
      else if (key == "dropout") t.dropout = p.boolean(v);
      else if (key == "checkpoint_every") rc.checkpoint_every = p.number<std::size_t>(v);
      else if (key == "record_latency") rc.record_latency = p.boolean(v);
      else p.fail("unknown key");
    } else if (section == "quant") {
      if (key == "engine") rc.engine = p.engine(v);
      else if (key.rfind("engine.", 0) == 0) role_engine[static_cast<std::size_t>(p.role(key.substr(7)))] = p.engine(v);
      else if (key == "bits") e.bits = p.number<int>(v);
      else if (key == "gamma") e.gamma = p.number<float>(v);
      else if (key == "sigma") e.sigma = v == "inf" ? std::numeric_limits<float>::infinity() : p.number<float>(v);
      else if (key == "alpha") e.alpha = p.number<float>(v);
      else if (key == "threshold") rc.threshold = p.number<float>(v);
      else if (key == "pearson_top") rc.pearson_top = p.number<double>(v);
      else p.fail("unknown key");
    } else if (section == "calibration") {
      if (key == "batches") rc.calib_batches = p.number<std::size_t>(v);
      else if (key == "max_fraction") rc.max_full_precision = p.number<double>(v);
      else if (key == "path") rc.calib = resolve(base_dir, v);
      else if (key.rfind("budget.", 0) == 0) rc.budget[static_cast<std::size_t>(p.role(key.substr(7)))] = p.number<float>(v);
      else p.fail("unknown key");
    } else if (section == "run") {
      if (key == "seed") rc.seed = p.number<std::uint64_t>(v);
      else if (key == "out") rc.out = resolve(base_dir, v);
      else p.fail("unknown key");
    } else if (section == "microbench") {
      if (key == "shapes") {
        rc.bench_shapes.clear();
        std::string_view rest = v;
        while (!rest.empty()) {
          const auto c = rest.find(',');
          rc.bench_shapes.push_back(p.number<std::size_t>(trim(rest.substr(0, c))));
          rest = c == std::string_view::npos ? std::string_view{} : rest.substr(c + 1);
        }
      } else if (key == "tokens") rc.bench_tokens = p.number<std::size_t>(v);
      else if (key == "reps") rc.bench_reps = p.number<std::size_t>(v);
      else if (key == "warmup") rc.bench_warmup = p.number<std::size_t>(v);
      else p.fail("unknown key");
    } else {
      p.fail("unknown key");
    }
  }
  for (LayerRole r : kAllRoles) {
    const auto i = static_cast<std::size_t>(r);
    rc.model.engine_kind[i] = role_engine[i].value_or(rc.engine);
  }
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), std::filesystem::absolute(path).parent_path());
}

std::string render_run_config(const RunConfig& rc) {
  const auto& m = rc.model;
  const auto& t = rc.train;
  const auto& e = rc.engine_config;
  auto abs = [](const std::filesystem::path& p) { return p.empty() ? std::string() : std::filesystem::absolute(p).lexically_normal().string(); };
  std::ostringstream o;
  o << "[corpus]\npath = " << abs(rc.corpus) << "\n\n";
  o << "[model]\nseed = " << m.seed << "\nd_model = " << m.d_model << "\nn_layers = " << m.n_layers
    << "\nn_heads = " << m.n_heads << "\nd_ff = " << m.d_ff << "\nmax_seq_len = " << m.max_seq_len
    << "\nlora_rank = " << m.lora_rank << "\nlora_alpha = " << fmt(m.lora_alpha) << "\nlora_dropout = " << fmt(m.lora_dropout)
    << "\noutlier_channels = " << m.outlier_channels << "\noutlier_gain = " << fmt(m.outlier_gain) << "\n\n";
  o << "[train]\nlr = " << fmt(t.lr) << "\nbeta1 = " << fmt(t.beta1) << "\nbeta2 = " << fmt(t.beta2) << "\neps = " << fmt(t.eps)
    << "\nbatch_size = " << t.batch_size << "\ngrad_accum = " << t.grad_accum << "\nseq_len = " << t.seq_len
    << "\nsteps = " << t.steps << "\ndropout = " << (t.dropout ? "true" : "false")
    << "\ncheckpoint_every = " << rc.checkpoint_every << "\nrecord_latency = " << (rc.record_latency ? "true" : "false") << "\n\n";
  o << "[quant]\nengine = " << to_string(rc.engine) << "\n";
  for (LayerRole r : kAllRoles) {
    if (m.engine_for(r) != rc.engine) o << "engine." << to_string(r) << " = " << to_string(m.engine_for(r)) << "\n";
  }
  o << "bits = " << e.bits << "\ngamma = " << fmt(e.gamma) << "\nsigma = "
    << (std::isinf(e.sigma) ? std::string("inf") : fmt(e.sigma)) << "\nalpha = " << fmt(e.alpha)
    << "\nthreshold = " << fmt(rc.threshold) << "\npearson_top = " << fmt(rc.pearson_top) << "\n\n";
  o << "[calibration]\nbatches = " << rc.calib_batches << "\nmax_fraction = " << fmt(rc.max_full_precision) << "\n";
  for (LayerRole r : kAllRoles) o << "budget." << to_string(r) << " = " << fmt(rc.budget[static_cast<std::size_t>(r)]) << "\n";
  if (!rc.calib.empty()) o << "path = " << abs(rc.calib) << "\n";
  o << "\n[run]\nseed = " << rc.seed << "\n";
  if (!rc.out.empty()) o << "out = " << abs(rc.out) << "\n";
  o << "\n[microbench]\nshapes = ";
  for (std::size_t i = 0; i < rc.bench_shapes.size(); ++i) o << (i ? "," : "") << rc.bench_shapes[i];
  o << "\ntokens = " << rc.bench_tokens << "\nreps = " << rc.bench_reps << "\nwarmup = " << rc.bench_warmup << "\n";
  return o.str();
}

}  // namespace quaff
