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
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pnstage/config.h"
#include "pnstage/forest.h"
#include "pnstage/heatmap.h"
#include "pnstage/metrics.h"
#include "pnstage/staging.h"

namespace pnstage {

enum class Stage { kConfig, kRoi, kHeatmap, kFeatures, kForest, kStaging, kEval, kSynth };

std::string_view to_string(Stage stage);
// Distinct nonzero process exit code per stage.
int exit_code(Stage stage);

// A failure tagged with the pipeline stage it happened in.
class StageError : public std::runtime_error {
 public:
  StageError(Stage stage, const std::string& message)
      : std::runtime_error(std::string(to_string(stage)) + " stage: " + message), stage_(stage) {}
  Stage stage() const noexcept { return stage_; }

 private:
  Stage stage_;
};

// Cohort layout on disk:
//   slides.csv                    patient_id,slide_id[,class] (reference labels)
//   stages.csv                    patient_id,stage (reference pN stages)
//   annotations.csv               patient_id,slide_id,lesion_annotation
//   slides/<slide_id>/            slide bundle plus annotation.tmsk
struct CohortSlide {
  std::string patient_id;
  std::string slide_id;
  std::optional<NodeClass> reference;  // absent when the cohort is unlabeled
  std::filesystem::path bundle_dir;
};

struct Cohort {
  std::filesystem::path root;
  std::vector<CohortSlide> slides;
};

Cohort read_cohort(const std::filesystem::path& root);

struct CohortSpec {
  int n_patients = 40;
  // Slide class proportions: negative, ITC, micro, macro.
  std::array<double, kNodeClassCount> class_mix{0.5, 0.15, 0.15, 0.2};
  std::uint64_t seed = 2018;
  int width0 = 768;
  int height0 = 768;
  // Share of patients (among those with a metastatic slide) whose tumor
  // slides carry lesion-level annotations.
  double annotated_fraction = 0.43;
};

// Level-0 lesion radius band, as a fraction of the shorter slide side, for
// each metastatic class. Bands are disjoint so the class is recoverable from
// the lesion's extent.
struct RadiusBand {
  double lo;
  double hi;
};
RadiusBand lesion_radius_band(NodeClass c);

// Writes a cohort of n_patients x 5 synthetic slides and the reference
// labels. Throws BadMix for a malformed class mix.
Cohort synth_cohort(const std::filesystem::path& root, const CohortSpec& spec, int workers = 1);

// Per-slide artifacts.
std::filesystem::path mask_path(const std::filesystem::path& out, const std::string& slide_id);
std::filesystem::path heatmap_path(const std::filesystem::path& out, const std::string& slide_id);

struct SlideFeatures {
  std::string patient_id;
  std::string slide_id;
  RegionFeatureVector features{};
};

void write_features_csv(const std::filesystem::path& file, const std::vector<SlideFeatures>& rows);
std::vector<SlideFeatures> read_features_csv(const std::filesystem::path& file);

// Joins features with reference classes by slide id.
std::vector<LabeledSample> labeled_samples(const std::vector<SlideFeatures>& features,
                                           const std::vector<SlideLabel>& labels);

// roi -> heatmap -> features for every cohort slide, reusing artifacts
// already on disk unless config.force. Returns features in cohort order.
std::vector<SlideFeatures> compute_cohort_features(const Cohort& cohort,
                                                   const PipelineConfig& config);

struct RunReport {
  std::vector<SlideLabel> predictions;
  std::map<std::string, PNStage> stages;
  std::optional<double> slide_accuracy;
  std::optional<double> kappa;
};

// Full pipeline over the configured cohort. Artifacts land in
// config.paths.output: masks/, heatmaps/, features.csv, predictions.csv,
// stages.csv and report.json. Throws StageError.
RunReport run_pipeline(const PipelineConfig& config);

}  // namespace pnstage
