// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "quaff/harness.hpp"
#include "quaff/plot.hpp"
#include "quaff/qlinear.hpp"
#include "quaff/random.hpp"
#include "quaff/train.hpp"

using namespace quaff;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmtd(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double rel_err(const Matrix& a, const Matrix& ref) { return quant_error(a, ref).frobenius_rel; }

fs::path out_root() { return fs::path(QUAFF_ACCEPTANCE_OUT); }

RunConfig desk_config(std::uint64_t seed, std::size_t steps) {
  RunConfig rc = load_run_config(QUAFF_DESK_CONFIG);
  rc.model.seed = seed;
  rc.seed = seed;
  rc.train.steps = steps;
  rc.record_latency = false;
  rc.checkpoint_every = steps;
  rc.validate();
  return rc;
}

// ---- 1 ----
Outcome rtn_bound() {
  const auto t0 = Clock::now();
  double worst_excess = -std::numeric_limits<double>::infinity();
  std::size_t violations = 0, elements = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    CounterRng rng(derive_seed(seed, "rtn"));
    const std::size_t rows = 1 + rng.below(48), cols = 1 + rng.below(48);
    const float sd = std::pow(10.0f, rng.uniform(-2.0f, 0.0f));
    Matrix x = seeded_random_matrix(rows, cols, derive_seed(seed, "x"), Distribution::normal(0.0f, sd));
    if (rng.below(4) == 0) {
      const std::size_t c = rng.below(cols);
      for (std::size_t i = 0; i < rows; ++i) x(i, c) *= 30.0f;
    }
    if (rng.below(8) == 0) {
      auto zero_row = x.row(rng.below(rows));
      std::fill(zero_row.begin(), zero_row.end(), 0.0f);
    }
    for (Granularity g : {Granularity::PerTensor, Granularity::PerToken, Granularity::PerOC}) {
      QuantizedTensor q = quantize(x, g);
      Matrix d = dequantize(q);
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
          const double err = std::fabs(static_cast<double>(x(i, j)) - static_cast<double>(d(i, j)));
          const double bound = 0.5 * static_cast<double>(q.step_at(i, j)) + 1e-7;
          worst_excess = std::max(worst_excess, err - bound);
          violations += err > bound;
          ++elements;
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  return {violations == 0 && secs < 10.0, std::to_string(elements) + " elements, " + std::to_string(violations) +
                                              " over bound, worst margin " + fmtd(worst_excess) + ", " + fmtd(secs, 3) + " s"};
}

// ---- 2 ----
Outcome decomposition_identity() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    CounterRng rng(derive_seed(seed, "decomp"));
    const std::size_t t = 1 + rng.below(32), c_in = 2 + rng.below(255), c_out = 1 + rng.below(64);
    Matrix x = seeded_random_matrix(t, c_in, derive_seed(seed, "x"), Distribution::normal(0, 1));
    Matrix w = seeded_random_matrix(c_in, c_out, derive_seed(seed, "w"), Distribution::normal(0, 0.1f));
    std::vector<std::uint32_t> o;
    std::vector<float> s(c_in, 1.0f);
    for (std::uint32_t i = 0; i < c_in; ++i) {
      if (rng.below(8) == 0) {
        o.push_back(i);
        s[i] = rng.uniform(1.0f, 100.0f);
      }
    }
    Matrix fused = matmul_f32(scale_columns(x, s, ScaleMode::Divide), scale_rows(w, s));
    worst = std::max(worst, rel_err(decomposed_forward_f32(x, w, ChannelIndexSet(o, c_in), s), fused));
  }
  return {worst <= 1e-5, "100 instances, worst relative Frobenius " + fmtd(worst)};
}

// ---- 3 ----
Outcome inheritance() {
  std::size_t ok = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto c = testing::outlier_injected_case(seed, 1 + seed % 32, 64 + 4 * seed, 24);
    std::vector<std::uint32_t> extra{c.channel};
    if (c.channel + 3 < c.x.cols) extra.push_back(c.channel + 3);
    ChannelIndexSet o = ChannelIndexSet::from_unsorted(extra, c.x.cols);
    auto eng = prepare_engine(c.w, EngineKind::Quaff, &c.calib, o);
    QuaffTrace tr = dynamic_cast<QuaffEngine&>(*eng).forward_traced(c.x);
    const bool same = tr.x_hat_outlier_int == select_columns(tr.x_hat_q.values, o) &&
                      tr.term1_row_steps.data() == tr.x_hat_q.steps.data() &&
                      tr.term2_row_steps.data() == tr.x_hat_q.steps.data() && tr.term2_row_steps.size() == c.x.rows;
    ok += same;
  }
  return {ok == 50, std::to_string(ok) + "/50 forwards reuse X_hat_int columns and steps exactly"};
}

// ---- 4 ----
Outcome momentum() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = testing::outlier_injected_case(100 + seed);
    auto eng = prepare_engine(c.w, EngineKind::Quaff, &c.calib, c.outliers);
    auto& q = dynamic_cast<QuaffEngine&>(*eng);
    const double s0 = q.scaling_state().s[c.channel];
    const double beta = compute_beta(c.x, q.outlier_row_abs_max(), c.outliers)[c.channel];
    for (int t = 0; t < 10; ++t) q.forward(c.x);
    const double g = std::pow(0.2, 10);
    const double want = g * s0 + (1 - g) * beta;
    worst = std::max(worst, std::fabs(q.scaling_state().s[c.channel] - want) / want);
  }
  ScalingState st{{3.0f}, 0.2f, 0};
  const std::vector<float> beta{5.0f};
  momentum_update(st, beta);
  const bool exact = st.s[0] == 4.6f;
  return {worst <= 1e-6 && exact, "T=10 worst relative deviation " + fmtd(worst) + "; 0.2*3+0.8*5 -> " + fmtd(st.s[0], 9) +
                                      (exact ? " (exact)" : " (not exact)")};
}

// ---- 5 ----
Outcome suppression_gain() {
  std::string detail;
  bool all = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = testing::outlier_injected_case(seed, 32, 256, 64, 100.0f);
    Matrix ref = matmul_f32(c.x, c.w);
    const double e_naive = rel_err(prepare_engine(c.w, EngineKind::Naive, nullptr, {})->forward(c.x), ref);
    const double e_quaff = rel_err(prepare_engine(c.w, EngineKind::Quaff, &c.calib, c.outliers)->forward(c.x), ref);
    all = all && e_quaff < e_naive;
    detail += (seed ? "; " : "") + fmtd(e_quaff, 3) + " vs " + fmtd(e_naive, 3);
  }
  return {all, "quaff vs naive relative error per seed: " + detail};
}

// ---- 6 ----
Outcome degenerations() {
  bool empty_o = true, llm_inf = true;
  double llm_zero = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = testing::outlier_injected_case(200 + seed, 16, 128, 32);
    auto naive = prepare_engine(c.w, EngineKind::Naive, nullptr, {});
    const Matrix yn = naive->forward(c.x);
    empty_o = empty_o && prepare_engine(c.w, EngineKind::Quaff, &c.calib, ChannelIndexSet())->forward(c.x) == yn;
    EngineConfig inf, zero;
    inf.sigma = std::numeric_limits<float>::infinity();
    zero.sigma = 0.0f;
    llm_inf = llm_inf && prepare_engine(c.w, EngineKind::LLMInt8, nullptr, {}, inf)->forward(c.x) == yn;
    llm_zero = std::max(llm_zero, rel_err(prepare_engine(c.w, EngineKind::LLMInt8, nullptr, {}, zero)->forward(c.x),
                                          matmul_f32(c.x, c.w)));
  }

  const fs::path root = out_root() / "degenerations";
  fs::remove_all(root);
  fs::create_directories(root);
  RunConfig rc = desk_config(0, 20);
  save_calibration(run_calibration(rc), (root / "calibration.txt").string());
  rc.calib = root / "calibration.txt";
  RunConfig a = rc, b = rc;
  a.out = root / "quaff_gamma0";
  a.engine = EngineKind::Quaff;
  a.model.set_engine(EngineKind::Quaff);
  a.engine_config.gamma = 0.0f;
  b.out = root / "quaff_no_momentum";
  b.engine = EngineKind::QuaffNoMomentum;
  b.model.set_engine(EngineKind::QuaffNoMomentum);
  run_training(a);
  run_training(b);
  const bool metrics_same = slurp(a.out / "metrics.csv") == slurp(b.out / "metrics.csv");

  return {empty_o && llm_inf && llm_zero <= 1e-5 && metrics_same,
          std::string("quaff O=empty == naive: ") + (empty_o ? "yes" : "no") + "; llm_int8 sigma=inf == naive: " +
              (llm_inf ? "yes" : "no") + "; llm_int8 sigma=0 vs fp32 " + fmtd(llm_zero) +
              "; quaff(gamma=0) vs no-momentum metrics identical over 20 desk steps: " + (metrics_same ? "yes" : "no")};
}

// ---- 7 ----
Outcome storage() {
  const std::size_t c = 1024;
  BudgetAllocation alloc = allocate_budgets({{LayerRole::QProj, c, c, 0.05f}}, 0.05);
  const std::size_t n_o = alloc.counts[0];
  std::vector<std::uint32_t> o;
  for (std::size_t i = 0; i < n_o; ++i) o.push_back(static_cast<std::uint32_t>(i * 20));
  Matrix w = seeded_random_matrix(c, c, 7, Distribution::normal(0.0f, 0.03f));
  const std::size_t fp32 = prepare_engine(w, EngineKind::FP32, nullptr, {})->storage_bytes();
  const std::size_t qf = prepare_engine(w, EngineKind::Quaff, nullptr, ChannelIndexSet(o, c))->storage_bytes();
  // int8 W, per-OC steps, fp32 outlier rows, s, outlier row maxima.
  const std::size_t census = c * c + 4 * c + 4 * n_o * c + 4 * c + 4 * n_o;
  const double ratio = static_cast<double>(qf) / static_cast<double>(fp32);
  return {n_o == 51 && qf == census && fp32 == 4 * c * c && ratio <= 0.31,
          "|O|=" + std::to_string(n_o) + ", quaff " + std::to_string(qf) + " B (census " + std::to_string(census) +
              ") / fp32 " + std::to_string(fp32) + " B = " + fmtd(ratio)};
}

// ---- 8 ----
Outcome gradient_check() {
  const auto t0 = Clock::now();
  ModelConfig mc;
  mc.vocab_size = 12;
  mc.d_model = 32;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.d_ff = 64;
  mc.max_seq_len = 8;
  mc.lora_rank = 4;
  mc.lora_alpha = 4;
  mc.seed = 21;
  Model m(mc);
  for (Linear* l : m.linears()) {
    l->lora().b = seeded_random_matrix(l->lora().b.rows, l->lora().b.cols, derive_seed(21, l->name()),
                                       Distribution::normal(0.0f, 0.5f));
  }
  TokenBatch tb{2, 8, {}, {}};
  CounterRng rng(22);
  for (int i = 0; i < 16; ++i) {
    tb.inputs.push_back(static_cast<std::uint32_t>(rng.below(12)));
    tb.targets.push_back(static_cast<std::uint32_t>(rng.below(12)));
  }
  LossAndGrads lg = m.loss_and_grads(tb);
  auto lin = m.linears();
  CounterRng pick(23);
  double num2 = 0.0, diff2 = 0.0;
  std::vector<double> per;
  for (int n = 0; n < 100; ++n) {
    const std::size_t li = pick.below(lin.size());
    const bool use_a = pick.below(2) == 0;
    Matrix& p = use_a ? lin[li]->lora().a : lin[li]->lora().b;
    const Matrix& g = use_a ? lg.grads[li].a : lg.grads[li].b;
    const std::size_t k = pick.below(p.size());
    const float orig = p.data[k];
    p.data[k] = orig + 1e-3f;
    const float hi = p.data[k];
    const double up = m.loss_and_grads(tb).loss;
    p.data[k] = orig - 1e-3f;
    const float lo = p.data[k];
    const double down = m.loss_and_grads(tb).loss;
    p.data[k] = orig;
    const double numeric = (up - down) / (static_cast<double>(hi) - static_cast<double>(lo));
    num2 += numeric * numeric;
    diff2 += (numeric - g.data[k]) * (numeric - g.data[k]);
    per.push_back(std::fabs(numeric - g.data[k]) / std::max(std::fabs(numeric), 1e-12));
  }
  std::sort(per.begin(), per.end());
  const double vec_rel = std::sqrt(diff2 / num2);
  const double secs = seconds_since(t0);
  return {vec_rel <= 1e-2 && secs < 60.0, "100 coordinates, ||analytic-numeric||/||numeric|| = " + fmtd(vec_rel) +
                                              ", per-coordinate median " + fmtd(per[50]) + ", " + fmtd(secs, 3) + " s"};
}

// ---- 9 ----
struct HitTally {
  double hits = 0.0, runtime = 0.0;
  double rate() const { return runtime > 0 ? hits / runtime : 1.0; }
};

Outcome ossh_probe(std::vector<double>& quaff_final_500) {
  const fs::path root = out_root() / "hit_rate";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::size_t steps = 500;
  std::size_t wins = 0;
  std::string detail;
  // role -> seed -> per-step mean hit rate
  std::map<std::string, std::vector<std::vector<double>>> curves;
  double pooled_hits = 0.0, pooled_runtime = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RunConfig rc = desk_config(seed, steps);
    CalibrationArtifact art = run_calibration(rc);
    Tokenized tok = char_tokenize(read_text_file(rc.corpus.string()));
    ModelConfig mc = rc.model;
    mc.vocab_size = tok.vocab.size();
    mc.set_engine(EngineKind::Quaff);
    Model model(mc);
    model.prepare_engines(&art, rc.engine_config);
    AdamState adam = AdamState::zeros(model);
    TrainConfig tc = rc.train;
    tc.seed = rc.seed;
    BatchSampler sampler(tok.ids, tc.batch_size, tc.seq_len, rc.seed);

    std::vector<ChannelIndexSet> random_sets;
    CounterRng rr(derive_seed(seed, "random_set"));
    for (const auto& l : art.layers) {
      const std::size_t n = l.stats.c_in();
      std::vector<std::uint32_t> all(n);
      for (std::uint32_t i = 0; i < n; ++i) all[i] = i;
      for (std::size_t i = 0; i < l.outliers.size(); ++i) std::swap(all[i], all[i + rr.below(n - i)]);
      random_sets.push_back(ChannelIndexSet::from_unsorted({all.begin(), all.begin() + l.outliers.size()}, n));
    }

    HitTally calib_t, random_t;
    std::map<std::string, std::vector<double>> seed_curves;
    double last_loss = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      StepMetrics sm = train_step(model, adam, sampler, tc, true);
      last_loss = sm.loss;
      std::map<std::string, std::pair<double, int>> per_role;
      for (std::size_t i = 0; i < sm.traces.size(); ++i) {
        const ChannelIndexSet rt = runtime_outliers(sm.traces[i].x, rc.threshold);
        std::size_t hit_o = 0, hit_r = 0;
        for (std::uint32_t ch : rt) {
          hit_o += art.layers[i].outliers.contains(ch);
          hit_r += random_sets[i].contains(ch);
        }
        calib_t.hits += static_cast<double>(hit_o);
        calib_t.runtime += static_cast<double>(rt.size());
        random_t.hits += static_cast<double>(hit_r);
        random_t.runtime += static_cast<double>(rt.size());
        auto& pr = per_role[std::string(to_string(sm.traces[i].role))];
        pr.first += hit_rate(art.layers[i].outliers, rt);
        pr.second += 1;
      }
      for (auto& [role, pr] : per_role) seed_curves[role].push_back(pr.first / pr.second);
    }
    for (auto& [role, c] : seed_curves) curves[role].push_back(std::move(c));
    quaff_final_500.push_back(last_loss);
    pooled_hits += calib_t.hits;
    pooled_runtime += calib_t.runtime;
    const bool win = calib_t.rate() >= random_t.rate();
    wins += win;
    std::size_t n_o = 0;
    for (const auto& l : art.layers) n_o += l.outliers.size();
    detail += (seed ? "; " : "") + std::string("seed ") + std::to_string(seed) + ": calibrated " + fmtd(calib_t.rate(), 3) +
              " vs random " + fmtd(random_t.rate(), 3) + " (|O| total " + std::to_string(n_o) + ")";
  }

  for (const auto& [role, per_seed] : curves) {
    PlotSeries ps;
    ps.label = "quaff, 5 seeds";
    for (std::size_t s = 0; s < steps; ++s) {
      double m = 0.0, q = 0.0;
      for (const auto& c : per_seed) m += c[s];
      m /= static_cast<double>(per_seed.size());
      for (const auto& c : per_seed) q += (c[s] - m) * (c[s] - m);
      const double sd = std::sqrt(q / static_cast<double>(per_seed.size()));
      ps.x.push_back(static_cast<double>(s));
      ps.y.push_back(m);
      ps.lo.push_back(m - sd);
      ps.hi.push_back(m + sd);
    }
    std::ofstream(root / ("hit_rate_" + role + ".svg")) << render_line_chart("Outlier hit rate, " + role, "step", "hit rate", {ps});
  }
  const double overall = pooled_runtime > 0 ? pooled_hits / pooled_runtime : 1.0;
  return {wins >= 4, std::to_string(wins) + "/5 seeds at or above a size-matched random set; " + detail +
                         "; overall hit rate " + fmtd(overall, 4) + (overall > 0.9 ? " (above" : " (not above") +
                         " the 90% reference, reported only); curves in " + root.string()};
}

// ---- 10 ----
Outcome end_to_end(const std::vector<double>& quaff_final_500) {
  const fs::path root = out_root() / "regression";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::size_t steps = 200;
  std::vector<fs::path> dirs;

  auto train = [&](std::uint64_t seed, EngineKind k, const std::string& name) {
    RunConfig rc = desk_config(seed, steps);
    const fs::path calib = root / ("calibration_seed" + std::to_string(seed) + ".txt");
    if (!fs::exists(calib)) save_calibration(run_calibration(rc), calib.string());
    rc.calib = calib;
    rc.out = root / name;
    rc.engine = k;
    rc.model.set_engine(k);
    TrainResult r = run_training(rc);
    return std::make_pair(rc.out, r.losses);
  };

  auto [fa, la] = train(0, EngineKind::FP32, "fp32_seed0");
  auto [fb, lb] = train(0, EngineKind::FP32, "fp32_seed0_repeat");
  dirs.push_back(fa);
  const bool reduced = la.back() < 0.8 * la.front();
  const bool repro = la == lb && slurp(fa / "metrics.csv") == slurp(fb / "metrics.csv") &&
                     slurp(fa / "checkpoint.bin") == slurp(fb / "checkpoint.bin");

  std::vector<double> fq, fn;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto [dq, lq] = train(seed, EngineKind::Quaff, "quaff_seed" + std::to_string(seed));
    auto [dn, ln] = train(seed, EngineKind::Naive, "naive_seed" + std::to_string(seed));
    fq.push_back(lq.back());
    fn.push_back(ln.back());
    dirs.push_back(dq);
    dirs.push_back(dn);
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  const double mq = median(fq), mn = median(fn);

  run_compare(dirs, root / "report");
  std::cout << "---- report (200 steps, desk model) ----\n" << slurp(root / "report" / "report.md");
  if (!quaff_final_500.empty()) {
    std::cout << "quaff final loss after 500 steps per seed:";
    for (double v : quaff_final_500) std::cout << ' ' << fmtd(v, 5);
    std::cout << "\n";
  }
  std::cout << "----\n";

  return {reduced && repro && mq <= mn,
          "fp32 loss " + fmtd(la.front()) + " -> " + fmtd(la.back()) + " (" + fmtd(la.back() / la.front(), 3) +
              "x); bit-reproducible: " + (repro ? "yes" : "no") + "; median final loss quaff " + fmtd(mq, 5) +
              " vs naive " + fmtd(mn, 5) + "; report in " + (root / "report").string()};
}

}  // namespace

int main(int argc, char** argv) {
  const bool quick = argc > 1 && std::string(argv[1]) == "--quick";
  fs::create_directories(out_root());
  std::vector<double> quaff_final_500;
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
    bool slow;
  };
  const std::vector<Criterion> criteria = {
      {1, "rtn-bound", rtn_bound, false},
      {2, "decomposition-identity", decomposition_identity, false},
      {3, "activation-inheritance", inheritance, false},
      {4, "momentum-closed-form", momentum, false},
      {5, "outlier-suppression-gain", suppression_gain, false},
      {6, "baseline-degenerations", degenerations, false},
      {7, "storage-census", storage, false},
      {8, "gradient-check", gradient_check, false},
      {9, "hit-rate-probe", [&] { return ossh_probe(quaff_final_500); }, true},
      {10, "end-to-end-regression", [&] { return end_to_end(quaff_final_500); }, true},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (quick && c.slow) {
      std::cout << "[SKIP] " << c.id << " " << c.name << "\n";
      continue;
    }
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << c.id << " " << c.name << " (" << fmtd(seconds_since(t0), 3)
              << " s): " << o.detail << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << "\n";
  return failed ? 1 : 0;
}
