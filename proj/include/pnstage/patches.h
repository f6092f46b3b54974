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
#include <vector>

#include "pnstage/raster.h"
#include "pnstage/rng.h"
#include "pnstage/roi.h"
#include "pnstage/slide_io.h"

namespace pnstage {

inline constexpr int kPatchSize = 256;
inline constexpr int kPatchStride = 128;
// A patch is tumor when strictly more than this fraction of its pixels is
// annotated; anything between zero and this is excluded from training.
inline constexpr double kTumorFraction = 0.75;

enum class PatchLabel { kTumor, kNormal, kExcluded };

std::string_view to_string(PatchLabel label);
PatchLabel parse_patch_label(std::string_view s);

struct PatchRef {
  std::string slide_id;
  std::int64_t x = 0;  // level-0 top-left
  std::int64_t y = 0;
  int size = kPatchSize;
  PatchLabel label = PatchLabel::kNormal;

  friend bool operator==(const PatchRef&, const PatchRef&) = default;
};

PatchLabel label_for_fraction(double tumor_fraction);

// Exact tumor-pixel counts over rectangles of a level-0 annotation. Counts
// for 128-aligned rectangles come from a summed table of per-block counts;
// other rectangles are counted directly. Pixels outside the mask are not
// tumor.
class TumorFractionIndex {
 public:
  explicit TumorFractionIndex(BoolGrid level0_annotation);

  std::uint64_t count(std::int64_t x, std::int64_t y, std::int64_t w, std::int64_t h) const;
  double fraction(std::int64_t x, std::int64_t y, int size = kPatchSize) const {
    return static_cast<double>(count(x, y, size, size)) /
           (static_cast<double>(size) * size);
  }
  int width() const { return mask_.width(); }
  int height() const { return mask_.height(); }

 private:
  static constexpr int kBlock = kPatchStride;
  std::uint64_t count_direct(std::int64_t x, std::int64_t y, std::int64_t w,
                             std::int64_t h) const;

  BoolGrid mask_;
  int blocks_x_ = 0;
  int blocks_y_ = 0;
  std::vector<std::uint64_t> table_;  // (blocks_x_+1) x (blocks_y_+1)
};

// True when the level-0 point (x, y) falls on a tissue pixel of the mask.
bool point_in_tissue(const TissueMask& tissue, std::int64_t x, std::int64_t y);

// Stride-128 grid of 256x256 level-0 patches whose center lies in tissue.
// Without an annotation every kept patch is normal.
std::vector<PatchRef> enumerate_patches(const SlideBundle& bundle, const TissueMask& tissue,
                                        const AnnotationMask* annotation = nullptr);

struct SamplingOptions {
  // When false, normal patches are drawn only from slides with no tumor
  // patch at all.
  bool normals_from_tumor_slides = true;
};

// n/2 tumor and n/2 normal draws, alternating. Each draw picks a slide
// uniformly among the slides holding that class, then a patch uniformly
// within the slide, with replacement.
std::vector<PatchRef> balanced_sample(const std::map<std::string, std::vector<PatchRef>>& by_slide,
                                      std::size_t n, std::uint64_t seed,
                                      const SamplingOptions& options = {});

struct AugmentationParams {
  int dx = 0;  // [-8, 8]
  int dy = 0;
  bool flip = false;
  double angle = 0.0;  // degrees, [0, 360)
  double hue_delta = 0.0;        // [-0.04, 0.04]
  double sat_factor = 1.0;       // [0.75, 1.25]
  double bright_delta = 0.0;     // [-0.25, 0.25]
  double contrast_factor = 1.0;  // [0.25, 1.75]

  static AugmentationParams random(Rng& rng);
  void validate() const;
};

// Context side length read around a patch for geometric augmentation: the
// rotated, shifted 256 crop stays inside it for every parameter choice.
inline constexpr int kAugmentContext = 386;

// Rotates the context about its center, shifts by (dx, dy), optionally
// mirrors left-right, and returns the central 256x256 crop. Bilinear
// sampling; throws ContextTooSmall if any sample would leave the context.
RgbImage augment_geometric(const RgbImage& context, const AugmentationParams& params);

// Hue shift and saturation scale in HSV, then brightness offset and
// per-channel contrast about the patch mean in RGB, clamped and requantized.
RgbImage augment_color(const RgbImage& patch, const AugmentationParams& params);

RgbImage flip_horizontal(const RgbImage& img);

// Reads the augmentation context centered on the patch and applies both
// augmentations.
RgbImage training_patch(const SlideBundle& bundle, const PatchRef& ref,
                        const AugmentationParams& params);

enum class SplitBucket { kTrainM, kTrainL };

std::string_view to_string(SplitBucket bucket);

struct PatientSlides {
  std::string patient_id;
  std::vector<bool> slide_has_lesion_annotation;
};

struct SplitAssignment {
  std::string patient_id;
  SplitBucket bucket = SplitBucket::kTrainL;
};

// Patients with any lesion-annotated slide train the detector (train-M);
// the rest train the node classifier (train-L).
std::vector<SplitAssignment> split_patients(const std::vector<PatientSlides>& patients);

void write_patches_jsonl(const std::filesystem::path& file, const std::vector<PatchRef>& refs);
std::vector<PatchRef> read_patches_jsonl(const std::filesystem::path& file);

}  // namespace pnstage
