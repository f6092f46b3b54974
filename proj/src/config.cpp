// Copyright 2026 The pnstage Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "pnstage/config.h"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <optional>

#include "binary_io.h"
#include "csv.h"
#include "pnstage/error.h"

namespace pnstage {

namespace {

[[noreturn]] void bad(const std::string& message) { throw Error(ErrorCode::kBadConfig, message); }

std::string_view strip_comment(std::string_view line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_string = !in_string;
    if (line[i] == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

std::optional<double> parse_number(std::string_view s, bool& is_int, std::int64_t& as_int) {
  std::string clean;
  for (char c : s) {
    if (c != '_') clean.push_back(c);
  }
  is_int = clean.find_first_of(".eE") == std::string::npos;
  if (is_int) {
    const auto [p, ec] = std::from_chars(clean.data(), clean.data() + clean.size(), as_int);
    if (ec == std::errc() && p == clean.data() + clean.size()) return static_cast<double>(as_int);
    return std::nullopt;
  }
  char* end = nullptr;
  const double v = std::strtod(clean.c_str(), &end);
  if (end != clean.c_str() + clean.size() || clean.empty()) return std::nullopt;
  return v;
}

ConfigValue parse_value(std::string_view raw, const std::string& key) {
  const std::string_view v = detail::trim(raw);
  if (v.empty()) bad("missing value for " + key);
  if (v.front() == '"') {
    if (v.size() < 2 || v.back() != '"') bad("unterminated string for " + key);
    return std::string(v.substr(1, v.size() - 2));
  }
  if (v == "true") return true;
  if (v == "false") return false;
  if (v.front() == '[') {
    if (v.back() != ']') bad("unterminated array for " + key);
    std::vector<double> out;
    const std::string_view body = detail::trim(v.substr(1, v.size() - 2));
    if (!body.empty()) {
      for (const std::string& item : detail::split_csv_line(body)) {
        bool is_int = false;
        std::int64_t i = 0;
        const auto num = parse_number(item, is_int, i);
        if (!num) bad("non-numeric array element '" + item + "' in " + key);
        out.push_back(*num);
      }
    }
    return out;
  }
  bool is_int = false;
  std::int64_t i = 0;
  const auto num = parse_number(v, is_int, i);
  if (!num) bad("cannot parse value '" + std::string(v) + "' for " + key);
  if (is_int) return i;
  return *num;
}

double as_double(const ConfigValue& v, const std::string& key) {
  if (const auto* d = std::get_if<double>(&v)) return *d;
  if (const auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
  bad(key + " must be a number");
}

std::int64_t as_int(const ConfigValue& v, const std::string& key) {
  if (const auto* i = std::get_if<std::int64_t>(&v)) return *i;
  bad(key + " must be an integer");
}

bool as_bool(const ConfigValue& v, const std::string& key) {
  if (const auto* b = std::get_if<bool>(&v)) return *b;
  bad(key + " must be true or false");
}

std::string as_string(const ConfigValue& v, const std::string& key) {
  if (const auto* s = std::get_if<std::string>(&v)) return *s;
  bad(key + " must be a string");
}

}  // namespace

std::map<std::string, ConfigValue> parse_toml(std::string_view text) {
  std::map<std::string, ConfigValue> out;
  std::string section;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    ++line_no;
    const std::string_view line = detail::trim(strip_comment(text.substr(pos, nl - pos)));
    pos = nl + 1;
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') bad("line " + std::to_string(line_no) + ": bad section header");
      section = std::string(detail::trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) bad("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = std::string(detail::trim(line.substr(0, eq)));
    const std::string full = section.empty() ? key : section + "." + key;
    if (out.count(full)) bad("duplicate key " + full);
    out[full] = parse_value(line.substr(eq + 1), full);
  }
  return out;
}

void PipelineConfig::apply(const std::map<std::string, ConfigValue>& values) {
  // Scorer fields are collected first: the kind decides which apply.
  std::optional<std::string> scorer_kind;
  std::optional<double> constant;
  std::optional<double> sigma;
  std::optional<std::uint64_t> oracle_seed;
  std::optional<std::string> command;

  for (const auto& [key, v] : values) {
    if (key == "paths.cohort") paths.cohort = as_string(v, key);
    else if (key == "paths.output") paths.output = as_string(v, key);
    else if (key == "paths.model") paths.model = as_string(v, key);
    else if (key == "paths.rules") paths.rules = as_string(v, key);
    else if (key == "roi.threshold") roi_threshold = as_double(v, key);
    else if (key == "patch.size") patch_size = static_cast<int>(as_int(v, key));
    else if (key == "patch.stride") patch_stride = static_cast<int>(as_int(v, key));
    else if (key == "heatmap.cell") heatmap_cell = static_cast<int>(as_int(v, key));
    else if (key == "heatmap.overlap") {
      try {
        heatmap_overlap = parse_overlap(as_string(v, key));
      } catch (const Error& e) {
        bad(e.what());
      }
    }
    else if (key == "heatmap.batch_size") heatmap_batch = static_cast<std::size_t>(as_int(v, key));
    else if (key == "heatmap.png") heatmap_png = as_bool(v, key);
    else if (key == "postproc.t") postproc_t = as_double(v, key);
    else if (key == "scorer.kind") scorer_kind = as_string(v, key);
    else if (key == "scorer.constant") constant = as_double(v, key);
    else if (key == "scorer.sigma") sigma = as_double(v, key);
    else if (key == "scorer.seed") oracle_seed = static_cast<std::uint64_t>(as_int(v, key));
    else if (key == "scorer.command") command = as_string(v, key);
    else if (key == "scorer.timeout_ms") scorer_timeout_ms = as_int(v, key);
    else if (key == "forest.n_trees") forest.n_trees = static_cast<int>(as_int(v, key));
    else if (key == "forest.max_depth") {
      const auto d = as_int(v, key);
      forest.max_depth = d < 0 ? std::nullopt : std::optional<int>(static_cast<int>(d));
    }
    else if (key == "forest.min_samples_leaf") forest.min_samples_leaf = static_cast<int>(as_int(v, key));
    else if (key == "forest.features_per_split") forest.features_per_split = static_cast<int>(as_int(v, key));
    else if (key == "forest.balanced_class_weight") forest.balanced_class_weight = as_bool(v, key);
    else if (key == "forest.seed") forest_seed = static_cast<std::uint64_t>(as_int(v, key));
    else if (key == "cv.k") cv_k = static_cast<int>(as_int(v, key));
    else if (key == "cv.seed") cv_seed = static_cast<std::uint64_t>(as_int(v, key));
    else if (key == "eval.froc_points") {
      if (const auto* arr = std::get_if<std::vector<double>>(&v)) froc_points = *arr;
      else bad(key + " must be an array");
    }
    else if (key == "run.workers") workers = static_cast<int>(as_int(v, key));
    else if (key == "run.force") force = as_bool(v, key);
    else bad("unknown config key " + key);
  }

  if (scorer_kind || constant || sigma || oracle_seed || command) {
    ScorerSpec spec;
    const std::string kind = scorer_kind.value_or([&] {
      switch (scorer.kind) {
        case ScorerSpec::Kind::kConstant: return std::string("constant");
        case ScorerSpec::Kind::kOracle: return std::string("oracle");
        case ScorerSpec::Kind::kExternal: return std::string("external");
      }
      return std::string("oracle");
    }());
    if (kind == "constant") {
      spec.kind = ScorerSpec::Kind::kConstant;
      spec.constant_value = constant ? constant : scorer.constant_value;
    } else if (kind == "oracle") {
      spec.kind = ScorerSpec::Kind::kOracle;
      spec.oracle_noise_sigma = sigma ? sigma : scorer.oracle_noise_sigma;
      spec.oracle_seed = oracle_seed ? oracle_seed : scorer.oracle_seed;
    } else if (kind == "external") {
      spec.kind = ScorerSpec::Kind::kExternal;
      spec.external_cmd = command ? command : scorer.external_cmd;
    } else {
      bad("scorer.kind must be constant, oracle or external");
    }
    try {
      spec.validate();
    } catch (const Error& e) {
      bad(std::string("scorer settings: ") + e.what());
    }
    scorer = spec;
  }
}

void PipelineConfig::apply_override(std::string_view assignment) {
  apply_overrides({std::string(assignment)});
}

void PipelineConfig::apply_overrides(const std::vector<std::string>& assignments) {
  std::map<std::string, ConfigValue> values;
  for (const std::string& a : assignments) {
    const std::size_t eq = a.find('=');
    if (eq == std::string::npos) bad("override must look like section.key=value");
    const std::string key = std::string(detail::trim(std::string_view(a).substr(0, eq)));
    values[key] = parse_value(std::string_view(a).substr(eq + 1), key);
  }
  apply(values);
}

void PipelineConfig::validate() const {
  if (!(roi_threshold > 0.0 && roi_threshold <= 1.0)) bad("roi.threshold must lie in (0, 1]");
  if (patch_size != kPatchSize || patch_stride != kPatchStride) {
    bad("patch.size and patch.stride are fixed at 256 and 128");
  }
  if (heatmap_cell != kHeatmapCell) bad("heatmap.cell is fixed at 128");
  if (heatmap_batch == 0) bad("heatmap.batch_size must be positive");
  if (!(postproc_t > 0.0 && postproc_t < 1.0)) bad("postproc.t must lie in (0, 1)");
  if (forest.n_trees < 1 || forest.min_samples_leaf < 1 || forest.features_per_split < 1) {
    bad("forest hyperparameters must be positive");
  }
  if (cv_k < 2) bad("cv.k must be at least 2");
  if (froc_points.empty() || !std::is_sorted(froc_points.begin(), froc_points.end())) {
    bad("eval.froc_points must be nonempty and ascending");
  }
  if (workers < 1) bad("run.workers must be positive");
  if (scorer_timeout_ms <= 0) bad("scorer.timeout_ms must be positive");
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& file) {
  PipelineConfig config;
  std::string text;
  try {
    text = detail::read_text(file);
  } catch (const Error& e) {
    bad(e.what());
  }
  config.apply(parse_toml(text));
  config.validate();
  return config;
}

int workers_from_env(int fallback) {
  if (const char* env = std::getenv("PNSTAGE_WORKERS")) {
    int v = 0;
    const std::string_view s(env);
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec == std::errc() && p == s.data() + s.size() && v > 0) return v;
  }
  return fallback;
}

}  // namespace pnstage
