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

#include "pnstage/roi.h"

#include <algorithm>

#include "pnstage/error.h"

namespace pnstage {

Grid<double> to_gray(const RgbImage& rgb) {
  Grid<double> gray(rgb.width(), rgb.height());
  for (int y = 0; y < rgb.height(); ++y) {
    for (int x = 0; x < rgb.width(); ++x) {
      gray(x, y) = gray_value(rgb.at(x, y));
    }
  }
  return gray;
}

TissueMask tissue_mask(const SlideBundle& bundle, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "tissue threshold must lie in (0, 1]");
  }
  if (!bundle.has_level(kRoiLevel)) {
    throw Error(ErrorCode::kMissingLevel,
                "bundle " + bundle.id() + " has no 32x level (level 5)");
  }
  const LevelInfo& info = bundle.level(kRoiLevel);
  TissueMask mask{bundle.id(), kRoiLevel, BoolGrid(info.width, info.height, 0)};
  // One stripe of rows at a time keeps memory bounded on large slides.
  constexpr int kStripe = 256;
  for (int y0 = 0; y0 < info.height; y0 += kStripe) {
    const int rows = std::min(kStripe, info.height - y0);
    const RgbImage stripe = bundle.read_region(kRoiLevel, 0, y0, info.width, rows);
    for (int y = 0; y < rows; ++y) {
      for (int x = 0; x < info.width; ++x) {
        mask.grid(x, y0 + y) = gray_value(stripe.at(x, y)) < threshold ? 1 : 0;
      }
    }
  }
  return mask;
}

void write_tissue_mask(const std::filesystem::path& file, const TissueMask& mask) {
  write_mask_file(file, mask.grid);
}

TissueMask read_tissue_mask(const std::filesystem::path& file, std::string slide_id,
                            int level) {
  return {std::move(slide_id), level, read_mask_file(file)};
}

}  // namespace pnstage
