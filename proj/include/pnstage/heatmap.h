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

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pnstage/raster.h"
#include "pnstage/roi.h"
#include "pnstage/scoring.h"
#include "pnstage/slide_io.h"

namespace pnstage {

inline constexpr int kHeatmapCell = 128;  // level-0 px per heatmap cell
inline constexpr double kRegionThreshold = 0.9;

enum class Overlap { kNone, kHalf };

std::string_view to_string(Overlap overlap);
Overlap parse_overlap(std::string_view s);

struct Heatmap {
  std::string slide_id;
  int cell_size = kHeatmapCell;
  FloatGrid grid;  // probabilities in [0, 1]
};

// Heatmap-grid tissue: a cell is tissue when any ROI mask pixel inside its
// footprint is tissue.
BoolGrid heatmap_tissue(const TissueMask& tissue, int width0, int height0,
                        int cell_size = kHeatmapCell);

struct StitchOptions {
  Overlap overlap = Overlap::kHalf;
  int cell_size = kHeatmapCell;
  std::size_t batch_size = 32;
};

// Scores the patch grid (stride 128 for half overlap, 256 for none) and
// averages, per cell, every scored patch that contains the cell. A patch is
// scored when it covers at least one tissue cell; non-tissue cells are 0.
// With several scorers the batches are spread across them, one thread per
// scorer; the result does not depend on that split.
Heatmap stitch_heatmap(const SlideBundle& bundle, const TissueMask& tissue,
                       std::span<PatchScorer* const> scorers, const StitchOptions& options = {});
Heatmap stitch_heatmap(const SlideBundle& bundle, const TissueMask& tissue, PatchScorer& scorer,
                       const StitchOptions& options = {});

// Cellwise mean of heatmaps with identical shape.
Heatmap average_heatmaps(std::span<const Heatmap> heatmaps);

struct Cell {
  int row = 0;
  int col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

struct Region {
  std::vector<Cell> cells;  // row-major order
  double max_prob = 0.0;
  double mean_prob = 0.0;
  int area = 0;
  double major_axis_len = 0.0;
};

// 8-connected components of {prob >= t}, ordered by their first cell in
// row-major order.
std::vector<Region> threshold_regions(const Heatmap& hm, double t = kRegionThreshold);

// 4 * sqrt(largest eigenvalue) of the population covariance of the cell
// coordinates; 0 for a single cell.
double major_axis(std::span<const Cell> cells);

inline constexpr std::size_t kFeatureCount = 11;
using RegionFeatureVector = std::array<double, kFeatureCount>;

// f1 largest region major axis, f2/f3 its max/mean prob, f4 its area,
// f5 mean of region means, f6 total region area, f7/f8 max/mean prob over
// tissue cells, f9 region count, f10 tissue cells, f11 tissue/non-tissue.
RegionFeatureVector extract_features(const Heatmap& hm, const BoolGrid& tissue_cells,
                                     double t = kRegionThreshold);

void write_heatmap(const std::filesystem::path& file, const Heatmap& hm);
Heatmap read_heatmap(const std::filesystem::path& file, std::string slide_id = {});
void write_heatmap_png(const std::filesystem::path& file, const Heatmap& hm);

}  // namespace pnstage
