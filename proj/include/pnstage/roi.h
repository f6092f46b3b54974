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

#include <string>

#include "pnstage/raster.h"
#include "pnstage/slide_io.h"

namespace pnstage {

inline constexpr double kDefaultTissueThreshold = 0.8;

struct TissueMask {
  std::string slide_id;
  int level = kRoiLevel;
  BoolGrid grid;  // true = tissue
};

// Rec. 601 luma scaled to [0, 1]. Integer weights keep white at exactly 1.
inline double gray_value(Rgb c) {
  return (299.0 * c.r + 587.0 * c.g + 114.0 * c.b) / 255000.0;
}

Grid<double> to_gray(const RgbImage& rgb);

// Tissue is every ROI-level pixel darker than `threshold`; H&E background
// is the bright side.
TissueMask tissue_mask(const SlideBundle& bundle, double threshold = kDefaultTissueThreshold);

void write_tissue_mask(const std::filesystem::path& file, const TissueMask& mask);
TissueMask read_tissue_mask(const std::filesystem::path& file, std::string slide_id,
                            int level = kRoiLevel);

}  // namespace pnstage
