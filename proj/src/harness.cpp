// SPDX-License-Identifier: Apache-2.0
#include "quaff/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "quaff/error.hpp"
#include "quaff/plot.hpp"
#include "quaff/random.hpp"
#include "quaff/scaling.hpp"
#include "quaff/train.hpp"

namespace quaff {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t b = 0;
  while (true) {
    const auto e = s.find(sep, b);
    out.push_back(s.substr(b, e == std::string_view::npos ? std::string_view::npos : e - b));
    if (e == std::string_view::npos) break;
    b = e + 1;
  }
  return out;
}

template <typename T>
std::optional<T> parse_field(std::string_view f, const std::string& where) {
  if (f.empty()) return std::nullopt;
  T v{};
  auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
  if (ec != std::errc() || p != f.data() + f.size()) throw DataError(where + ": bad number '" + std::string(f) + "'");
  return v;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("short write to " + path.string());
}

struct Corpus {
  Tokenized tok;
  ModelConfig mc;
};

Corpus load_corpus(const RunConfig& rc) {
  Corpus c{char_tokenize(read_text_file(rc.corpus.string())), rc.model};
  c.mc.vocab_size = c.tok.vocab.size();
  c.mc.validate();
  return c;
}

}  // namespace

std::string format_metrics_row(const MetricsRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  std::string s = std::to_string(r.step) + "," + r.layer + "," + r.role + "," + opt(r.loss) + "," + opt(r.hit_rate) + "," +
                  opt(r.pearson_sim) + "," + opt(r.quant_error) + "," + opt(r.step_latency_ms) + ",";
  if (r.storage_bytes) s += std::to_string(*r.storage_bytes);
  return s;
}

std::vector<MetricsRecord> read_metrics_csv(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing metrics file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw DataError(path.string() + ": unexpected metrics header");
  std::vector<MetricsRecord> rows;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(n);
    auto f = split(line, ',');
    if (f.size() != 9) throw DataError(where + ": expected 9 fields, got " + std::to_string(f.size()));
    MetricsRecord r;
    auto step = parse_field<std::uint64_t>(f[0], where);
    if (!step) throw DataError(where + ": missing step");
    r.step = *step;
    r.layer = std::string(f[1]);
    r.role = std::string(f[2]);
    r.loss = parse_field<double>(f[3], where);
    r.hit_rate = parse_field<double>(f[4], where);
    r.pearson_sim = parse_field<double>(f[5], where);
    r.quant_error = parse_field<double>(f[6], where);
    r.step_latency_ms = parse_field<double>(f[7], where);
    r.storage_bytes = parse_field<std::uint64_t>(f[8], where);
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---- calibrate ----

CalibrationArtifact run_calibration(const RunConfig& rc, std::ostream* log) {
  Corpus c = load_corpus(rc);
  c.mc.set_engine(EngineKind::FP32);
  Model model(c.mc);
  BatchSampler sampler(c.tok.ids, rc.train.batch_size, rc.train.seq_len, derive_seed(c.mc.seed, "calibration"));

  auto lin = model.linears();
  std::vector<CalibrationStats> stats;
  for (const Linear* l : lin) stats.push_back(CalibrationStats::empty(l->weight().rows));
  for (std::size_t b = 0; b < rc.calib_batches; ++b) {
    ForwardOptions opt;
    opt.record = true;
    LmOutput out = model.forward(sampler.sample(b), opt);
    for (std::size_t i = 0; i < lin.size(); ++i) accumulate_calibration(stats[i], out.traces[i].x, rc.threshold);
  }

  std::vector<LayerBudgetSpec> specs;
  for (const Linear* l : lin) {
    specs.push_back({l->role(), l->weight().rows, l->weight().cols, rc.budget[static_cast<std::size_t>(l->role())]});
  }
  BudgetAllocation alloc = allocate_budgets(specs, rc.max_full_precision);

  CalibrationArtifact art;
  double kept = 0.0, total = 0.0;
  for (std::size_t i = 0; i < lin.size(); ++i) {
    CalibrationLayer cl;
    cl.name = lin[i]->name();
    cl.role = lin[i]->role();
    cl.c_out = lin[i]->weight().cols;
    cl.stats = std::move(stats[i]);
    cl.budget = alloc.counts[i];
    cl.outliers = select_outliers(cl.stats, cl.budget);
    kept += static_cast<double>(cl.outliers.size() * cl.c_out);
    total += static_cast<double>(cl.stats.c_in() * cl.c_out);
    if (log) *log << cl.name << " |O|=" << cl.outliers.size() << " budget=" << cl.budget << "\n";
    art.layers.push_back(std::move(cl));
  }
  art.full_precision_fraction = total > 0 ? kept / total : 0.0;
  if (log) *log << "full_precision_fraction " << art.full_precision_fraction << "\n";
  return art;
}

// ---- train ----

TrainResult run_training(const RunConfig& rc, bool resume, std::ostream* log) {
  if (rc.calib.empty()) throw ConfigError("train needs a calibration artifact");
  if (rc.out.empty()) throw ConfigError("train needs an output directory");
  Corpus c = load_corpus(rc);
  const CalibrationArtifact art = load_calibration(rc.calib.string());
  {
    Model probe(c.mc);
    auto lin = probe.linears();
    if (art.layers.size() != lin.size()) {
      throw DataError("calibration artifact has " + std::to_string(art.layers.size()) + " layers, model has " +
                      std::to_string(lin.size()));
    }
  }

  TrainResult res;
  res.run_dir = rc.out;
  fs::create_directories(rc.out);
  const fs::path ckpt = rc.out / "checkpoint.bin", metrics_path = rc.out / "metrics.csv";
  const fs::path calib_copy = rc.out / "calibration.txt";

  TrainConfig tc = rc.train;
  tc.seed = rc.seed;

  std::optional<LoadedModel> loaded;
  std::vector<MetricsRecord> kept_rows;
  if (resume && fs::exists(ckpt)) {
    loaded.emplace(load_model_checkpoint(ckpt.string(), &c.mc));
    for (auto& r : read_metrics_csv(metrics_path)) {
      if (r.step < loaded->adam.t) kept_rows.push_back(std::move(r));
    }
  } else {
    Model m(c.mc);
    m.prepare_engines(&art, rc.engine_config);
    AdamState a = AdamState::zeros(m);
    loaded.emplace(LoadedModel{std::move(m), std::move(a)});
    if (fs::absolute(rc.calib) != fs::absolute(calib_copy)) write_file(calib_copy, render_calibration(art));
    RunConfig manifest = rc;
    manifest.calib = fs::absolute(calib_copy);
    manifest.out = fs::absolute(rc.out);
    std::string text = "# Resolved run configuration; rerun with: quaff train --config manifest.ini\n";
    text += "[manifest]\nversion = " + std::string(kToolVersion) + "\nvocab_size = " + std::to_string(c.mc.vocab_size) +
            "\ncorpus_tokens = " + std::to_string(c.tok.ids.size()) + "\n\n";
    text += render_run_config(manifest);
    write_file(rc.out / "manifest.ini", text);
  }
  Model& model = loaded->model;
  AdamState& adam = loaded->adam;
  res.first_step = adam.t;

  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
  if (!metrics) throw DataError("cannot write " + metrics_path.string());
  metrics << kMetricsHeader << "\n";
  for (const auto& r : kept_rows) metrics << format_metrics_row(r) << "\n";

  auto lin = model.linears();
  std::vector<std::vector<float>> static_s;
  std::vector<const CalibrationLayer*> cal;
  for (const Linear* l : lin) {
    const CalibrationLayer* cl = art.find(l->name());
    if (!cl) throw DataError("calibration artifact has no layer " + l->name());
    cal.push_back(cl);
    static_s.push_back(smooth_factors(cl->stats.channel_abs_max, l->weight_row_abs_max(), rc.engine_config.alpha));
  }
  std::uint64_t total_storage = 0;
  for (const Linear* l : lin) total_storage += l->engine().storage_bytes();

  BatchSampler sampler(c.tok.ids, tc.batch_size, tc.seq_len, rc.seed);
  while (adam.t < tc.steps) {
    StepMetrics sm = train_step(model, adam, sampler, tc, true);
    res.losses.push_back(sm.loss);
    MetricsRecord mr;
    mr.step = sm.step;
    mr.layer = "model";
    mr.role = "all";
    mr.loss = sm.loss;
    if (rc.record_latency) mr.step_latency_ms = sm.step_latency_ms;
    mr.storage_bytes = total_storage;
    metrics << format_metrics_row(mr) << "\n";
    for (std::size_t i = 0; i < sm.traces.size(); ++i) {
      const LinearTrace& t = sm.traces[i];
      MetricsRecord lr;
      lr.step = sm.step;
      lr.layer = t.name;
      lr.role = std::string(to_string(t.role));
      lr.hit_rate = hit_rate(cal[i]->outliers, runtime_outliers(t.x, rc.threshold));
      if (std::ceil(rc.pearson_top * static_cast<double>(static_s[i].size())) >= 2.0) {
        auto dyn = smooth_factors(col_abs_max(t.x), lin[i]->weight_row_abs_max(), rc.engine_config.alpha);
        lr.pearson_sim = pearson_similarity(static_s[i], dyn, rc.pearson_top);
      }
      lr.quant_error = quant_error(t.y_engine, matmul_f32(t.x, lin[i]->weight())).frobenius_rel;
      lr.storage_bytes = lin[i]->engine().storage_bytes();
      metrics << format_metrics_row(lr) << "\n";
    }
    if (log && (sm.step % 50 == 0 || adam.t == tc.steps)) *log << "step " << sm.step << " loss " << sm.loss << "\n";
    if (rc.checkpoint_every > 0 && adam.t % rc.checkpoint_every == 0) {
      metrics.flush();
      save_model_checkpoint(ckpt.string(), model, adam);
    }
  }
  metrics.flush();
  save_model_checkpoint(ckpt.string(), model, adam);
  return res;
}

// ---- compare ----

namespace {

struct RunData {
  fs::path dir;
  std::string engine;
  std::uint64_t seed = 0;
  std::vector<MetricsRecord> rows;
};

struct MeanStd {
  double mean = NAN, std = 0.0;
};

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  if (v.empty()) return m;
  double s = 0.0;
  for (double x : v) s += x;
  m.mean = s / static_cast<double>(v.size());
  double q = 0.0;
  for (double x : v) q += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(q / static_cast<double>(v.size()));
  return m;
}

// Per-run, per-step average of `field` over rows accepted by `keep`.
template <typename Keep, typename Field>
std::map<std::uint64_t, double> per_step(const RunData& r, Keep keep, Field field) {
  std::map<std::uint64_t, std::pair<double, std::size_t>> acc;
  for (const auto& row : r.rows) {
    if (!keep(row)) continue;
    auto v = field(row);
    if (!v) continue;
    auto& a = acc[row.step];
    a.first += *v;
    a.second += 1;
  }
  std::map<std::uint64_t, double> out;
  for (auto& [s, a] : acc) out[s] = a.first / static_cast<double>(a.second);
  return out;
}

template <typename Keep, typename Field>
std::vector<PlotSeries> series_by_engine(const std::map<std::string, std::vector<const RunData*>>& groups,
                                         const std::vector<std::uint64_t>& steps, Keep keep, Field field) {
  std::vector<PlotSeries> out;
  for (const auto& [engine, runs] : groups) {
    std::vector<std::map<std::uint64_t, double>> curves;
    for (const RunData* r : runs) curves.push_back(per_step(*r, keep, field));
    PlotSeries ps;
    ps.label = engine + " (n=" + std::to_string(runs.size()) + ")";
    bool any = false;
    for (std::uint64_t s : steps) {
      std::vector<double> vals;
      for (const auto& c : curves) {
        auto it = c.find(s);
        if (it != c.end()) vals.push_back(it->second);
      }
      MeanStd m = mean_std(vals);
      ps.x.push_back(static_cast<double>(s));
      ps.y.push_back(m.mean);
      ps.lo.push_back(m.mean - m.std);
      ps.hi.push_back(m.mean + m.std);
      any = any || !vals.empty();
    }
    if (any) out.push_back(std::move(ps));
  }
  return out;
}

}  // namespace

std::vector<EngineSummary> run_compare(const std::vector<fs::path>& dirs, const fs::path& out, std::ostream* log) {
  if (dirs.empty()) throw ConfigError("compare needs at least one run directory");
  std::vector<RunData> runs;
  for (const auto& d : dirs) {
    if (fs::exists(out) && fs::exists(d) && fs::equivalent(d, out)) {
      throw ConfigError("compare output must not be one of the run directories: " + d.string());
    }
    RunData r;
    r.dir = d;
    const fs::path manifest = d / "manifest.ini";
    std::ifstream in(manifest, std::ios::binary);
    if (!in) throw DataError("missing manifest " + manifest.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    RunConfig rc;
    try {
      rc = parse_run_config(ss.str(), d);
    } catch (const ConfigError& e) {
      throw DataError(manifest.string() + ": " + e.what());
    }
    r.engine = std::string(to_string(rc.engine));
    r.seed = rc.seed;
    r.rows = read_metrics_csv(d / "metrics.csv");
    if (r.rows.empty()) throw DataError(d.string() + ": metrics.csv has no rows");
    runs.push_back(std::move(r));
  }
  fs::create_directories(out);

  std::map<std::string, std::vector<const RunData*>> groups;
  std::set<std::uint64_t> step_set;
  std::set<std::string> roles;
  for (const auto& r : runs) {
    groups[r.engine].push_back(&r);
    for (const auto& row : r.rows) {
      step_set.insert(row.step);
      if (row.layer != "model") roles.insert(row.role);
    }
  }
  const std::vector<std::uint64_t> steps(step_set.begin(), step_set.end());

  {
    std::ostringstream m;
    m << "run,engine,seed," << kMetricsHeader << "\n";
    for (const auto& r : runs) {
      for (const auto& row : r.rows) m << r.dir.filename().string() << "," << r.engine << "," << r.seed << "," << format_metrics_row(row) << "\n";
    }
    write_file(out / "merged.csv", m.str());
  }

  auto is_model = [](const MetricsRecord& r) { return r.layer == "model"; };
  auto is_layer = [](const MetricsRecord& r) { return r.layer != "model"; };
  write_file(out / "loss.svg", render_line_chart("Training loss", "step", "loss (nats)",
                                                 series_by_engine(groups, steps, is_model, [](const MetricsRecord& r) { return r.loss; })));
  for (const auto& role : roles) {
    auto keep = [&](const MetricsRecord& r) { return r.role == role; };
    write_file(out / ("hit_rate_" + role + ".svg"),
               render_line_chart("Outlier hit rate, " + role, "step", "hit rate",
                                 series_by_engine(groups, steps, keep, [](const MetricsRecord& r) { return r.hit_rate; })));
  }
  write_file(out / "pearson.svg", render_line_chart("Pearson similarity of static vs dynamic scaling (top channels)", "step", "pearson",
                                                    series_by_engine(groups, steps, is_layer, [](const MetricsRecord& r) { return r.pearson_sim; })));

  std::vector<EngineSummary> summaries;
  for (const auto& [engine, rs] : groups) {
    EngineSummary s;
    s.engine = engine;
    s.runs = rs.size();
    std::vector<double> finals, hits, pears, qerrs, lats;
    for (const RunData* r : rs) {
      const MetricsRecord* last = nullptr;
      for (const auto& row : r->rows) {
        if (is_model(row)) {
          if (row.loss && (!last || row.step >= last->step)) last = &row;
          if (row.step_latency_ms) lats.push_back(*row.step_latency_ms);
          if (row.storage_bytes) s.storage_bytes = *row.storage_bytes;
        } else {
          if (row.hit_rate) hits.push_back(*row.hit_rate);
          if (row.pearson_sim) pears.push_back(*row.pearson_sim);
          if (row.quant_error) qerrs.push_back(*row.quant_error);
        }
      }
      if (last) finals.push_back(*last->loss);
    }
    MeanStd f = mean_std(finals);
    s.final_loss_mean = f.mean;
    s.final_loss_std = f.std;
    s.mean_hit_rate = mean_std(hits).mean;
    s.mean_pearson = mean_std(pears).mean;
    s.mean_quant_error = mean_std(qerrs).mean;
    s.mean_step_latency_ms = mean_std(lats).mean;
    summaries.push_back(s);
  }

  std::vector<std::string> names;
  std::vector<double> storage, latency;
  for (const auto& s : summaries) {
    names.push_back(s.engine);
    storage.push_back(static_cast<double>(s.storage_bytes));
    latency.push_back(s.mean_step_latency_ms);
  }
  write_file(out / "storage_latency.svg",
             render_bar_chart("Linear-layer storage and step latency", {{"storage (bytes)", names, storage}, {"mean step latency (ms)", names, latency}}));

  std::ostringstream csv, md;
  csv << "engine,runs,final_loss_mean,final_loss_std,mean_hit_rate,mean_pearson,mean_quant_error,mean_step_latency_ms,storage_bytes\n";
  md << "| engine | runs | final loss | hit rate | pearson | quant error | step latency (ms) | storage (bytes) |\n"
     << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& s : summaries) {
    csv << s.engine << "," << s.runs << "," << fmt(s.final_loss_mean) << "," << fmt(s.final_loss_std) << "," << fmt(s.mean_hit_rate)
        << "," << fmt(s.mean_pearson) << "," << fmt(s.mean_quant_error) << "," << fmt(s.mean_step_latency_ms) << "," << s.storage_bytes << "\n";
    char buf[256];
    std::snprintf(buf, sizeof buf, "| %s | %zu | %.4f ± %.4f | %.3f | %.3f | %.4f | %.2f | %llu |\n", s.engine.c_str(), s.runs,
                  s.final_loss_mean, s.final_loss_std, s.mean_hit_rate, s.mean_pearson, s.mean_quant_error,
                  s.mean_step_latency_ms, static_cast<unsigned long long>(s.storage_bytes));
    md << buf;
  }
  write_file(out / "summary.csv", csv.str());
  write_file(out / "report.md", "# Run comparison\n\n" + md.str());
  if (log) *log << md.str();
  return summaries;
}

// ---- microbench ----

namespace {

template <typename F>
double median_ms(std::size_t warmup, std::size_t reps, F&& f) {
  for (std::size_t i = 0; i < warmup; ++i) f();
  std::vector<double> t;
  for (std::size_t i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    t.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(t.begin(), t.end());
  return t.size() % 2 ? t[t.size() / 2] : 0.5 * (t[t.size() / 2 - 1] + t[t.size() / 2]);
}

}  // namespace

std::vector<BenchRow> run_microbench(const RunConfig& rc) {
  std::vector<BenchRow> rows;
  const std::size_t t = rc.bench_tokens;
  for (std::size_t n : rc.bench_shapes) {
    const std::uint64_t seed = derive_seed(rc.seed, n);
    Matrix x = seeded_random_matrix(t, n, derive_seed(seed, "x"), Distribution::normal(0.0f, 1.0f));
    for (std::size_t i = 0; i < t; ++i) x(i, 0) *= 100.0f;
    Matrix w = seeded_random_matrix(n, n, derive_seed(seed, "w"), Distribution::normal(0.0f, 1.0f / std::sqrt(static_cast<float>(n))));
    auto calib = CalibrationStats::empty(n);
    if (t > 0) accumulate_calibration(calib, x, rc.threshold);
    const ChannelIndexSet o = select_outliers(calib, std::max<std::size_t>(1, n / 100));

    auto add = [&](std::string kernel, double ms) { rows.push_back({std::move(kernel), t, n, n, ms, rc.bench_reps}); };
    add("matmul_f32", median_ms(rc.bench_warmup, rc.bench_reps, [&] { (void)matmul_f32(x, w); }));
    IntMatrix xi = t > 0 ? quantize(x, Granularity::PerToken).values : IntMatrix(0, n);
    IntMatrix wi = quantize(w, Granularity::PerOC).values;
    add("matmul_i8_acc32", median_ms(rc.bench_warmup, rc.bench_reps, [&] { (void)matmul_i8_acc32(xi, wi); }));
    for (EngineKind k : kAllEngineKinds) {
      auto eng = prepare_engine(w, k, &calib, o, rc.engine_config);
      add("engine." + std::string(to_string(k)), median_ms(rc.bench_warmup, rc.bench_reps, [&] { (void)eng->forward(x); }));
    }
  }
  return rows;
}

std::string render_bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream o;
  o << "kernel,tokens,c_in,c_out,median_ms,reps\n";
  for (const auto& r : rows) o << r.kernel << "," << r.tokens << "," << r.c_in << "," << r.c_out << "," << fmt(r.median_ms) << "," << r.reps << "\n";
  return o.str();
}

}  // namespace quaff
