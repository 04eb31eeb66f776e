// SPDX-License-Identifier: Apache-2.0
#include "quaff/outlier.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "quaff/error.hpp"

namespace quaff {

void CalibrationStats::merge(const CalibrationStats& other) {
  if (other.c_in() != c_in()) {
    throw DataError("cannot merge calibration stats over " + std::to_string(c_in()) + " and " +
                    std::to_string(other.c_in()) + " channels");
  }
  for (std::size_t i = 0; i < xi.size(); ++i) {
    xi[i] += other.xi[i];
    channel_abs_max[i] = std::max(channel_abs_max[i], other.channel_abs_max[i]);
  }
  samples_seen += other.samples_seen;
}

void accumulate_calibration(CalibrationStats& stats, const Matrix& x, float threshold) {
  if (x.cols != stats.c_in()) {
    throw DataError("calibration sample has " + std::to_string(x.cols) + " channels, stats track " +
                    std::to_string(stats.c_in()));
  }
  if (x.empty()) throw DataError("empty calibration sample");
  const std::vector<float> colmax = col_abs_max(x);
  const float cut = threshold * abs_mean(x);
  for (std::size_t o = 0; o < colmax.size(); ++o) {
    if (colmax[o] > cut) ++stats.xi[o];
    stats.channel_abs_max[o] = std::max(stats.channel_abs_max[o], colmax[o]);
  }
  ++stats.samples_seen;
}

ChannelIndexSet select_outliers(const CalibrationStats& stats, std::size_t budget) {
  std::vector<std::uint32_t> order;
  for (std::uint32_t i = 0; i < stats.c_in(); ++i) {
    if (stats.xi[i] > 0) order.push_back(i);
  }
  std::sort(order.begin(), order.end(), [&](std::uint32_t l, std::uint32_t r) {
    if (stats.xi[l] != stats.xi[r]) return stats.xi[l] > stats.xi[r];
    if (stats.channel_abs_max[l] != stats.channel_abs_max[r]) return stats.channel_abs_max[l] > stats.channel_abs_max[r];
    return l < r;
  });
  if (order.size() > budget) order.resize(budget);
  return ChannelIndexSet::from_unsorted(std::move(order), stats.c_in());
}

ChannelIndexSet runtime_outliers(const Matrix& x, float threshold) {
  if (x.empty()) throw DataError("runtime outlier detection on an empty batch");
  const std::vector<float> colmax = col_abs_max(x);
  const float cut = threshold * abs_mean(x);
  std::vector<std::uint32_t> out;
  for (std::uint32_t o = 0; o < colmax.size(); ++o) {
    if (colmax[o] > cut) out.push_back(o);
  }
  return ChannelIndexSet(std::move(out), x.cols);
}

double hit_rate(const ChannelIndexSet& predefined, const ChannelIndexSet& runtime) {
  if (runtime.empty()) return 1.0;
  std::size_t hits = 0;
  for (std::uint32_t c : runtime) hits += predefined.contains(c) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(runtime.size());
}

std::string_view to_string(LayerRole role) {
  switch (role) {
    case LayerRole::QProj: return "q_proj";
    case LayerRole::KProj: return "k_proj";
    case LayerRole::VProj: return "v_proj";
    case LayerRole::OProj: return "o_proj";
    case LayerRole::UpProj: return "up_proj";
    case LayerRole::DownProj: return "down_proj";
  }
  return "?";
}

std::optional<LayerRole> parse_layer_role(std::string_view s) {
  for (LayerRole r : kAllRoles) {
    if (to_string(r) == s) return r;
  }
  return std::nullopt;
}

float default_budget_fraction(LayerRole role) {
  switch (role) {
    case LayerRole::OProj: return 0.04f;
    case LayerRole::DownProj: return 0.10f;
    default: return 0.0003f;
  }
}

BudgetAllocation allocate_budgets(const std::vector<LayerBudgetSpec>& layers, double max_fraction) {
  BudgetAllocation out;
  out.counts.resize(layers.size());
  double total = 0.0, fixed = 0.0, scalable = 0.0;
  auto is_scalable = [](LayerRole r) { return r == LayerRole::OProj || r == LayerRole::DownProj; };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& spec = layers[l];
    // Small epsilon keeps products like 0.1f * 3070 from landing just below an integer.
    double raw = static_cast<double>(spec.budget_frac) * static_cast<double>(spec.c_in);
    out.counts[l] = std::min(spec.c_in, static_cast<std::size_t>(std::floor(raw + 1e-6)));
    const double cost = static_cast<double>(out.counts[l]) * static_cast<double>(spec.c_out);
    total += static_cast<double>(spec.c_in) * static_cast<double>(spec.c_out);
    (is_scalable(spec.role) ? scalable : fixed) += cost;
  }
  if (total == 0.0) return out;
  if ((fixed + scalable) / total > max_fraction && scalable > 0.0) {
    const double factor = std::max(0.0, (max_fraction * total - fixed) / scalable);
    scalable = 0.0;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (!is_scalable(layers[l].role)) continue;
      out.counts[l] = static_cast<std::size_t>(std::floor(static_cast<double>(out.counts[l]) * factor));
      scalable += static_cast<double>(out.counts[l]) * static_cast<double>(layers[l].c_out);
    }
  }
  out.full_precision_fraction = (fixed + scalable) / total;
  return out;
}

const CalibrationLayer* CalibrationArtifact::find(std::string_view name) const {
  for (const auto& l : layers) {
    if (l.name == name) return &l;
  }
  return nullptr;
}

namespace {

template <typename T>
void append_number(std::string& out, T v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

template <typename T>
T parse_number(std::string_view tok, std::string_view context) {
  T v{};
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
    throw DataError("calibration artifact: bad number '" + std::string(tok) + "' in " + std::string(context));
  }
  return v;
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

class LineReader {
 public:
  explicit LineReader(std::string_view text) : text_(text) {}
  std::vector<std::string_view> next(std::string_view expect_key) {
    if (pos_ >= text_.size()) throw DataError("calibration artifact truncated; expected '" + std::string(expect_key) + "'");
    std::size_t nl = text_.find('\n', pos_);
    if (nl == std::string_view::npos) nl = text_.size();
    auto toks = split_ws(text_.substr(pos_, nl - pos_));
    pos_ = nl + 1;
    if (toks.empty() || toks[0] != expect_key) {
      throw DataError("calibration artifact: expected '" + std::string(expect_key) + "'");
    }
    return toks;
  }
  std::string_view header() {
    std::size_t nl = text_.find('\n');
    pos_ = nl == std::string_view::npos ? text_.size() : nl + 1;
    auto h = text_.substr(0, nl);
    if (!h.empty() && h.back() == '\r') h.remove_suffix(1);
    return h;
  }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string render_calibration(const CalibrationArtifact& artifact) {
  std::string out(kCalibrationHeader);
  out += "\nfull_precision_fraction ";
  append_number(out, artifact.full_precision_fraction);
  out += "\nlayers ";
  append_number(out, artifact.layers.size());
  out += '\n';
  for (const auto& l : artifact.layers) {
    out += "layer " + l.name + " role " + std::string(to_string(l.role)) + " c_in ";
    append_number(out, l.stats.c_in());
    out += " c_out ";
    append_number(out, l.c_out);
    out += " samples ";
    append_number(out, l.stats.samples_seen);
    out += " budget ";
    append_number(out, l.budget);
    out += "\nxi";
    for (auto v : l.stats.xi) {
      out += ' ';
      append_number(out, v);
    }
    out += "\nchannel_abs_max";
    for (auto v : l.stats.channel_abs_max) {
      out += ' ';
      append_number(out, v);
    }
    out += "\noutliers ";
    append_number(out, l.outliers.size());
    for (auto v : l.outliers) {
      out += ' ';
      append_number(out, v);
    }
    out += "\nend\n";
  }
  return out;
}

CalibrationArtifact parse_calibration(std::string_view text) {
  LineReader in(text);
  if (in.header() != kCalibrationHeader) {
    throw DataError("not a calibration artifact (expected header '" + std::string(kCalibrationHeader) + "')");
  }
  CalibrationArtifact a;
  auto fp = in.next("full_precision_fraction");
  if (fp.size() != 2) throw DataError("calibration artifact: malformed full_precision_fraction");
  a.full_precision_fraction = parse_number<double>(fp[1], "full_precision_fraction");
  auto nl = in.next("layers");
  if (nl.size() != 2) throw DataError("calibration artifact: malformed layer count");
  const auto n = parse_number<std::size_t>(nl[1], "layers");
  for (std::size_t k = 0; k < n; ++k) {
    auto h = in.next("layer");
    if (h.size() != 12 || h[2] != "role" || h[4] != "c_in" || h[6] != "c_out" || h[8] != "samples" ||
        h[10] != "budget") {
      throw DataError("calibration artifact: malformed layer header");
    }
    CalibrationLayer l;
    l.name = std::string(h[1]);
    auto role = parse_layer_role(h[3]);
    if (!role) throw DataError("calibration artifact: unknown role '" + std::string(h[3]) + "'");
    l.role = *role;
    const auto c_in = parse_number<std::size_t>(h[5], l.name);
    l.c_out = parse_number<std::size_t>(h[7], l.name);
    l.stats = CalibrationStats::empty(c_in);
    l.stats.samples_seen = parse_number<std::uint64_t>(h[9], l.name);
    l.budget = parse_number<std::size_t>(h[11], l.name);

    auto xi = in.next("xi");
    if (xi.size() != c_in + 1) throw DataError("calibration artifact: xi length mismatch in " + l.name);
    for (std::size_t i = 0; i < c_in; ++i) l.stats.xi[i] = parse_number<std::uint32_t>(xi[i + 1], l.name);
    auto mx = in.next("channel_abs_max");
    if (mx.size() != c_in + 1) throw DataError("calibration artifact: channel_abs_max length mismatch in " + l.name);
    for (std::size_t i = 0; i < c_in; ++i) l.stats.channel_abs_max[i] = parse_number<float>(mx[i + 1], l.name);
    auto ol = in.next("outliers");
    if (ol.size() < 2) throw DataError("calibration artifact: malformed outliers in " + l.name);
    const auto cnt = parse_number<std::size_t>(ol[1], l.name);
    if (ol.size() != cnt + 2) throw DataError("calibration artifact: outlier count mismatch in " + l.name);
    std::vector<std::uint32_t> idx(cnt);
    for (std::size_t i = 0; i < cnt; ++i) idx[i] = parse_number<std::uint32_t>(ol[i + 2], l.name);
    l.outliers = ChannelIndexSet(std::move(idx), c_in);
    for (std::size_t i = 0; i < c_in; ++i) {
      if (l.stats.xi[i] > l.stats.samples_seen) throw DataError("calibration artifact: xi exceeds samples in " + l.name);
    }
    in.next("end");
    a.layers.push_back(std::move(l));
  }
  return a;
}

void save_calibration(const CalibrationArtifact& artifact, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write calibration artifact " + path);
  f << render_calibration(artifact);
  if (!f) throw DataError("failed writing calibration artifact " + path);
}

CalibrationArtifact load_calibration(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read calibration artifact " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_calibration(ss.str());
}

}  // namespace quaff
