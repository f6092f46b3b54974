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
#include <string>
#include <utility>
#include <vector>

#include "pnstage/heatmap.h"
#include "pnstage/staging.h"

namespace pnstage {

struct ScoredSlide {
  std::string slide_id;
  bool tumor = false;
  double score = 0.0;  // max heatmap cell
};

// Mann-Whitney AUC with ties counted as one half.
double auc(const std::vector<ScoredSlide>& slides);

struct LesionDetection {
  std::string slide_id;
  Cell location;
  double confidence = 0.0;
};

struct GroundTruthRegion {
  std::string slide_id;
  std::vector<Cell> cells;
};

// One detection per thresholded region, at the region's highest cell
// (earliest in row-major order on ties).
std::vector<LesionDetection> detect_lesions(const Heatmap& hm, double t = kRegionThreshold);

struct FrocPoint {
  double threshold = 0.0;
  double fps_per_slide = 0.0;
  double sensitivity = 0.0;
};

struct FrocResult {
  std::vector<FrocPoint> curve;              // thresholds descending
  std::vector<double> sensitivity_at_points;  // one per requested FP rate
  double score = 0.0;
};

inline const std::vector<double> kDefaultFrocPoints = {0.25, 0.5, 1, 2, 4, 8};

// Sweeps every distinct detection confidence. A region is hit once any
// detection at or above the threshold lies in it; detections outside all
// regions are false positives, averaged over `normal_slide_count` slides.
// Sensitivity at an FP rate is the best sensitivity reached without
// exceeding it.
FrocResult froc(const std::vector<LesionDetection>& detections,
                const std::vector<GroundTruthRegion>& truth, int normal_slide_count,
                const std::vector<double>& fp_points = kDefaultFrocPoints);

// Five-class quadratic weighted kappa over pN stages.
double quadratic_weighted_kappa(const std::vector<std::pair<PNStage, PNStage>>& pairs);

struct ConfusionMatrix {
  std::array<std::array<int, kNodeClassCount>, kNodeClassCount> counts{};  // [reference][predicted]
  std::array<std::array<double, kNodeClassCount>, kNodeClassCount> row_percent{};
};

ConfusionMatrix confusion_matrix(const std::vector<std::pair<NodeClass, NodeClass>>& pairs);

double accuracy(const std::vector<std::pair<NodeClass, NodeClass>>& pairs);

}  // namespace pnstage
