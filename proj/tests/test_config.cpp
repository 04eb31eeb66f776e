// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "quaff/config.hpp"
#include "quaff/error.hpp"

using namespace quaff;
namespace fs = std::filesystem;

namespace {

const char* kSample = R"(# comment
; another
[corpus]
path = text.txt

[model]
seed = 4
d_model = 32
n_heads = 2
outlier_gain = 50

[train]
lr = 1e-3
steps = 12
dropout = off
record_latency = false

[quant]
engine = quaff
engine.down_proj = naive
gamma = 0.5
sigma = inf

[calibration]
budget.o_proj = 0.25
path = cal/calib.txt

[run]
seed = 9
out = runs/x

[microbench]
shapes = 8, 16
)";

std::string error_of(const std::string& text) {
  try {
    parse_run_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("parse a config with every section") {
  RunConfig rc = parse_run_config(kSample, "/base");
  CHECK(rc.corpus == fs::path("/base/text.txt"));
  CHECK(rc.calib == fs::path("/base/cal/calib.txt"));
  CHECK(rc.out == fs::path("/base/runs/x"));
  CHECK(rc.model.seed == 4);
  CHECK(rc.model.d_model == 32);
  CHECK(rc.model.n_layers == 2);
  CHECK(rc.model.outlier_gain == 50.0f);
  CHECK(rc.train.lr == 1e-3f);
  CHECK(rc.train.steps == 12);
  CHECK_FALSE(rc.train.dropout);
  CHECK_FALSE(rc.record_latency);
  CHECK(rc.engine == EngineKind::Quaff);
  CHECK(rc.model.engine_for(LayerRole::QProj) == EngineKind::Quaff);
  CHECK(rc.model.engine_for(LayerRole::DownProj) == EngineKind::Naive);
  CHECK(rc.engine_config.gamma == 0.5f);
  CHECK(std::isinf(rc.engine_config.sigma));
  CHECK(rc.budget[static_cast<std::size_t>(LayerRole::OProj)] == 0.25f);
  CHECK(rc.budget[static_cast<std::size_t>(LayerRole::QProj)] == 0.0003f);
  CHECK(rc.seed == 9);
  CHECK(rc.bench_shapes == std::vector<std::size_t>{8, 16});
}

TEST_CASE("defaults without a file") {
  RunConfig rc = parse_run_config("");
  CHECK(rc.engine == EngineKind::Quaff);
  CHECK(rc.train.lr == 2e-4f);
  CHECK(rc.model.lora_rank == 16);
  CHECK(rc.engine_config.gamma == 0.2f);
  CHECK(rc.engine_config.sigma == 6.0f);
  CHECK(rc.threshold == 100.0f);
  CHECK(rc.max_full_precision == doctest::Approx(0.05));
}

TEST_CASE("errors name the line") {
  CHECK(error_of("[model]\nd_model = 32\nwidth = 3\n").find("line 3") != std::string::npos);
  CHECK(error_of("[bogus]\n").find("unknown section") != std::string::npos);
  CHECK(error_of("[model]\nd_model = abc\n").find("line 2") != std::string::npos);
  CHECK(error_of("d_model = 3\n").find("outside any section") != std::string::npos);
  CHECK(error_of("[quant]\nengine = turbo\n").find("unknown engine") != std::string::npos);
  CHECK(error_of("[quant]\nengine.lm_head = fp32\n").find("unknown layer role") != std::string::npos);
  CHECK(error_of("[train]\ndropout = maybe\n").find("true/false") != std::string::npos);
  CHECK(error_of("[model\n").find("malformed") != std::string::npos);
  CHECK(error_of("[model]\njust words\n").find("key = value") != std::string::npos);
  CHECK(error_of("[manifest]\nanything = goes\n").empty());
}

TEST_CASE("render parses back to the same config") {
  RunConfig rc = parse_run_config(kSample, "/base");
  const std::string text = render_run_config(rc);
  RunConfig back = parse_run_config(text);
  CHECK(render_run_config(back) == text);
  CHECK(back.model == rc.model);
  CHECK(back.corpus == rc.corpus);
  CHECK(back.calib == rc.calib);
  CHECK(std::isinf(back.engine_config.sigma));
}

TEST_CASE("validation") {
  const auto dir = fs::temp_directory_path() / "quaff_test_config";
  fs::create_directories(dir);
  std::ofstream(dir / "text.txt") << "hello";
  std::ofstream(dir / "run.ini") << "[corpus]\npath = text.txt\n[model]\nmax_seq_len = 32\n[train]\nseq_len = 32\n";
  RunConfig rc = load_run_config(dir / "run.ini");
  CHECK(rc.corpus == dir / "text.txt");
  CHECK_NOTHROW(rc.validate());

  RunConfig bad = rc;
  bad.train.seq_len = 33;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = rc;
  bad.corpus = dir / "absent.txt";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = rc;
  bad.budget[2] = 1.5f;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = rc;
  bad.engine_config.gamma = -0.1f;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = rc;
  bad.calib = dir / "absent_calib.txt";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(load_run_config(dir / "nope.ini"), ConfigError);
  fs::remove_all(dir);
}
