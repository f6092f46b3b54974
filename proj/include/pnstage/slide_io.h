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
#include <memory>
#include <string>
#include <vector>

#include "pnstage/raster.h"

namespace pnstage {

// Level of the pyramid used for tissue detection (32x) and the heatmap
// grid (128x).
inline constexpr int kRoiLevel = 5;
inline constexpr int kHeatmapLevel = 7;

struct LevelInfo {
  int level = 0;
  int width = 0;
  int height = 0;
  int downsample = 1;

  friend bool operator==(const LevelInfo&, const LevelInfo&) = default;
};

// Dimensions of `level` for a slide whose level 0 is width0 x height0.
LevelInfo level_dims(int width0, int height0, int level);

// An on-disk pyramid: `<dir>/manifest.json` plus one raw RGB8 file per
// level. Opening validates the manifest and every level's byte length but
// does not load pixels; region reads go straight to the files with
// positional reads, so a bundle can be shared across threads.
class SlideBundle {
 public:
  static SlideBundle open(const std::filesystem::path& dir);

  const std::string& id() const { return id_; }
  const std::filesystem::path& path() const { return path_; }
  const std::vector<LevelInfo>& levels() const { return levels_; }
  int level_count() const { return static_cast<int>(levels_.size()); }
  const LevelInfo& level(int k) const;
  bool has_level(int k) const { return k >= 0 && k < level_count(); }

  // w x h raster starting at (x, y) in `level` coordinates. Pixels outside
  // the level are white.
  RgbImage read_region(int level, std::int64_t x, std::int64_t y, int w,
                       int h) const;
  RgbImage read_level(int level) const;

 private:
  class LevelFile;

  std::string id_;
  std::filesystem::path path_;
  std::vector<LevelInfo> levels_;
  std::vector<std::shared_ptr<const LevelFile>> files_;
};

inline SlideBundle read_bundle(const std::filesystem::path& dir) {
  return SlideBundle::open(dir);
}

// Writes `levels` (level 0 first, each the ceil-half of the previous) as a
// bundle directory. Existing level files are overwritten.
void write_bundle(const std::filesystem::path& dir, const std::string& id,
                  const std::vector<RgbImage>& levels);

// Level 0 followed by successive 2x box downsamples; at least `min_levels`
// levels and continues until both dimensions reach 1.
std::vector<RgbImage> build_pyramid(RgbImage level0, int min_levels = kHeatmapLevel + 1);

struct AnnotationMask {
  std::string slide_id;
  int level = 0;
  BoolGrid grid;  // true = tumor
};

struct Lesion {
  double cx = 0;
  double cy = 0;
  double radius = 0;
};

struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::string id = "synthetic";
  int width0 = 512;
  int height0 = 512;
  int tissue_blobs = 2;
  std::vector<Lesion> tumor_lesions;
  Rgb stain_tint{170, 175, 215};
  Rgb tumor_tint{200, 110, 170};
};

struct SyntheticSlide {
  std::vector<RgbImage> levels;
  AnnotationMask annotation;  // level 0
};

// Deterministic for a fixed spec. Background is near-white, tissue is the
// stain tint, lesions use the tumor tint with a nuclei-like speckle, and
// every lesion sits inside a tissue margin wide enough that its pixels stay
// tissue after 32x downsampling.
SyntheticSlide synthesize_slide(const SyntheticSpec& spec);

// Synthesizes and writes the bundle plus `annotation.tmsk` into `dir`.
SlideBundle write_synthetic_bundle(const std::filesystem::path& dir,
                                   const SyntheticSpec& spec);

inline constexpr const char* kAnnotationFile = "annotation.tmsk";

// Bit-packed mask file: "TMSK", u32 width, u32 height, then rows packed
// MSB-first and padded to a byte boundary.
void write_mask_file(const std::filesystem::path& file, const BoolGrid& grid);
BoolGrid read_mask_file(const std::filesystem::path& file);

}  // namespace pnstage
