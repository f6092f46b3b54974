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

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "pnstage/forest.h"
#include "pnstage/heatmap.h"
#include "pnstage/metrics.h"
#include "pnstage/scoring.h"

namespace pnstage {

// Values a config file may hold.
using ConfigValue = std::variant<bool, std::int64_t, double, std::string, std::vector<double>>;

// Flat "section.key" -> value view of a TOML document. Supports the subset
// the pipeline needs: [section] headers, key = value with strings, integers,
// floats, booleans and flat numeric arrays, and # comments.
std::map<std::string, ConfigValue> parse_toml(std::string_view text);

struct PipelineConfig {
  struct Paths {
    std::filesystem::path cohort = "cohort";
    std::filesystem::path output = "out";
    std::filesystem::path model = "model.json";
    std::filesystem::path rules;  // empty = built-in staging table
  } paths;
  double roi_threshold = kDefaultTissueThreshold;
  int patch_size = kPatchSize;
  int patch_stride = kPatchStride;
  int heatmap_cell = kHeatmapCell;
  Overlap heatmap_overlap = Overlap::kHalf;
  std::size_t heatmap_batch = 32;
  bool heatmap_png = false;
  double postproc_t = kRegionThreshold;
  ScorerSpec scorer = ScorerSpec::parse("oracle:0.05:7");
  std::int64_t scorer_timeout_ms = 60'000;
  ForestParams forest;
  std::uint64_t forest_seed = 42;
  int cv_k = 5;
  std::uint64_t cv_seed = 1234;
  std::vector<double> froc_points = kDefaultFrocPoints;
  int workers = 1;
  bool force = false;  // recompute per-slide artifacts that already exist

  // Throws BadConfig on unknown keys, wrong types, or values the pipeline
  // cannot honor.
  void apply(const std::map<std::string, ConfigValue>& values);
  // "section.key=value" with the value in TOML syntax.
  void apply_override(std::string_view assignment);
  // Applied together, so scorer.kind and its fields may arrive separately.
  void apply_overrides(const std::vector<std::string>& assignments);
  void validate() const;

  static PipelineConfig load(const std::filesystem::path& file);
};

// PNSTAGE_WORKERS if set and positive, else `fallback`.
int workers_from_env(int fallback);

}  // namespace pnstage
