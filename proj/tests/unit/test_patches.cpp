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

#include <doctest.h>

#include <cmath>
#include <map>

#include "../support.h"
#include "pnstage/error.h"
#include "pnstage/patches.h"
#include "pnstage/rng.h"
#include "pnstage/roi.h"
#include "pnstage/slide_io.h"

using namespace pnstage;
using pnstage::testing::TempDir;

namespace {

RgbImage noise_image(int w, int h, std::uint64_t seed) {
  Rng rng(seed);
  RgbImage img(w, h);
  for (auto& b : img.bytes()) b = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

RgbImage center_crop(const RgbImage& src, int size) {
  const int off = (src.width() - size) / 2;
  RgbImage out(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) out.set(x, y, src.at(x + off, y + off));
  }
  return out;
}

PatchRef ref(const std::string& slide, std::int64_t x, PatchLabel label) {
  return {slide, x, 0, kPatchSize, label};
}

}  // namespace

TEST_CASE("label thresholds") {
  CHECK(label_for_fraction(1.0) == PatchLabel::kTumor);
  CHECK(label_for_fraction(0.76) == PatchLabel::kTumor);
  CHECK(label_for_fraction(0.75) == PatchLabel::kExcluded);
  CHECK(label_for_fraction(0.4) == PatchLabel::kExcluded);
  CHECK(label_for_fraction(0.0) == PatchLabel::kNormal);
  CHECK(parse_patch_label(to_string(PatchLabel::kExcluded)) == PatchLabel::kExcluded);
}

TEST_CASE("tumor fraction index equals the mask integral") {
  Rng rng(3);
  BoolGrid mask(700, 530, 0);
  for (int i = 0; i < 40; ++i) {
    const int cx = static_cast<int>(rng.below(700));
    const int cy = static_cast<int>(rng.below(530));
    const int r = 5 + static_cast<int>(rng.below(90));
    for (int y = std::max(0, cy - r); y < std::min(530, cy + r); ++y) {
      for (int x = std::max(0, cx - r); x < std::min(700, cx + r); ++x) mask(x, y) = 1;
    }
  }
  const TumorFractionIndex index(mask);
  for (int trial = 0; trial < 200; ++trial) {
    // Mix stride-aligned and arbitrary origins, some hanging off the edge.
    const bool aligned = trial % 2 == 0;
    const std::int64_t x = aligned ? 128 * static_cast<std::int64_t>(rng.below(6))
                                   : static_cast<std::int64_t>(rng.below(760)) - 30;
    const std::int64_t y = aligned ? 128 * static_cast<std::int64_t>(rng.below(5))
                                   : static_cast<std::int64_t>(rng.below(600)) - 30;
    std::uint64_t brute = 0;
    for (std::int64_t yy = y; yy < y + 256; ++yy) {
      for (std::int64_t xx = x; xx < x + 256; ++xx) {
        if (xx >= 0 && yy >= 0 && xx < 700 && yy < 530) brute += mask(int(xx), int(yy));
      }
    }
    REQUIRE(index.count(x, y, 256, 256) == brute);
    REQUIRE(index.fraction(x, y) == static_cast<double>(brute) / 65536.0);
  }
}

TEST_CASE("patch enumeration") {
  TempDir tmp("enum");
  SyntheticSpec spec;
  spec.seed = 21;
  spec.width0 = 1024;
  spec.height0 = 768;
  spec.tumor_lesions = {{500, 380, 230}};
  const SlideBundle b = write_synthetic_bundle(tmp.path(), spec);
  const TissueMask tissue = tissue_mask(b);
  const AnnotationMask annot = synthesize_slide(spec).annotation;
  const auto refs = enumerate_patches(b, tissue, &annot);
  REQUIRE(!refs.empty());

  const TumorFractionIndex index(annot.grid);
  bool saw_tumor = false, saw_excluded = false;
  for (const PatchRef& r : refs) {
    REQUIRE(r.x % kPatchStride == 0);
    REQUIRE(r.y % kPatchStride == 0);
    REQUIRE(r.size == kPatchSize);
    REQUIRE(point_in_tissue(tissue, r.x + 128, r.y + 128));
    REQUIRE(r.label == label_for_fraction(index.fraction(r.x, r.y)));
    saw_tumor |= r.label == PatchLabel::kTumor;
    saw_excluded |= r.label == PatchLabel::kExcluded;
  }
  CHECK(saw_tumor);
  CHECK(saw_excluded);

  SUBCASE("empty tissue gives no patches") {
    TissueMask none = tissue;
    for (auto& v : none.grid.values()) v = 0;
    CHECK(enumerate_patches(b, none, &annot).empty());
  }
  SUBCASE("masks from another slide are rejected") {
    TissueMask wrong = tissue;
    wrong.grid = BoolGrid(3, 3, 1);
    CHECK_THROWS_AS(enumerate_patches(b, wrong), Error);
    AnnotationMask bad = annot;
    bad.grid = BoolGrid(10, 10, 0);
    CHECK_THROWS_AS(enumerate_patches(b, tissue, &bad), Error);
  }
  SUBCASE("jsonl round trip") {
    write_patches_jsonl(tmp / "p.jsonl", refs);
    CHECK(read_patches_jsonl(tmp / "p.jsonl") == refs);
  }
}

TEST_CASE("balanced sampling") {
  std::map<std::string, std::vector<PatchRef>> by_slide;
  by_slide["t"] = {ref("t", 0, PatchLabel::kTumor), ref("t", 1, PatchLabel::kExcluded)};
  by_slide["n"] = {ref("n", 0, PatchLabel::kNormal), ref("n", 1, PatchLabel::kNormal)};

  SUBCASE("half tumor, half normal, never excluded") {
    const auto s = balanced_sample(by_slide, 4, 1);
    REQUIRE(s.size() == 4);
    int tumor = 0;
    for (const PatchRef& r : s) {
      REQUIRE(r.label != PatchLabel::kExcluded);
      tumor += r.label == PatchLabel::kTumor;
    }
    CHECK(tumor == 2);
  }
  SUBCASE("same seed, same sequence") {
    CHECK(balanced_sample(by_slide, 50, 9) == balanced_sample(by_slide, 50, 9));
    CHECK(balanced_sample(by_slide, 50, 9) != balanced_sample(by_slide, 50, 10));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(balanced_sample(by_slide, 3, 1), Error);
    by_slide.erase("t");
    try {
      balanced_sample(by_slide, 2, 1);
      FAIL("expected EmptyClass");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kEmptyClass);
    }
  }
  SUBCASE("normals can be restricted to normal slides") {
    by_slide["t"].push_back(ref("t", 2, PatchLabel::kNormal));
    SamplingOptions only_normal;
    only_normal.normals_from_tumor_slides = false;
    for (const PatchRef& r : balanced_sample(by_slide, 200, 4, only_normal)) {
      if (r.label == PatchLabel::kNormal) REQUIRE(r.slide_id == "n");
    }
  }
}

TEST_CASE("slide-uniform sampling weight") {
  // Ten tumor slides, one of which holds a single tumor patch. Two-stage
  // sampling gives that slide 1/2 * 1/10 of all draws.
  std::map<std::string, std::vector<PatchRef>> by_slide;
  for (int s = 0; s < 10; ++s) {
    const std::string id = "s" + std::to_string(s);
    const int tumors = s == 0 ? 1 : 50;
    for (int i = 0; i < tumors; ++i) by_slide[id].push_back(ref(id, i, PatchLabel::kTumor));
    for (int i = 0; i < 20; ++i) by_slide[id].push_back(ref(id, 1000 + i, PatchLabel::kNormal));
  }
  const std::size_t n = 20000;
  const auto sample = balanced_sample(by_slide, n, 77);
  double hits = 0;
  for (const PatchRef& r : sample) hits += (r.slide_id == "s0" && r.label == PatchLabel::kTumor);
  const double p = 0.5 * 0.1;
  const double sd = std::sqrt(n * p * (1 - p));
  CHECK(std::abs(hits - n * p) <= 3 * sd);
}

TEST_CASE("geometric augmentation") {
  const RgbImage ctx = noise_image(kAugmentContext, kAugmentContext, 5);
  const RgbImage crop = center_crop(ctx, kPatchSize);

  CHECK(augment_geometric(ctx, {}) == crop);

  AugmentationParams rot;
  rot.angle = 180;
  const RgbImage r180 = augment_geometric(ctx, rot);
  for (int y = 0; y < kPatchSize; ++y) {
    for (int x = 0; x < kPatchSize; ++x) {
      REQUIRE(r180.at(x, y) == crop.at(kPatchSize - 1 - x, kPatchSize - 1 - y));
    }
  }

  AugmentationParams flip;
  flip.flip = true;
  CHECK(augment_geometric(ctx, flip) == flip_horizontal(crop));
  CHECK(flip_horizontal(flip_horizontal(crop)) == crop);

  AugmentationParams shift;
  shift.dx = 3;
  shift.dy = -2;
  const RgbImage moved = augment_geometric(ctx, shift);
  CHECK(moved.at(10, 10) == ctx.at(65 + 10 - 3, 65 + 10 + 2));

  SUBCASE("worst-case corners stay inside the context") {
    Rng rng(8);
    for (int i = 0; i < 50; ++i) {
      AugmentationParams p = AugmentationParams::random(rng);
      p.dx = (i % 2) ? 8 : -8;
      p.dy = (i % 3) ? 8 : -8;
      p.angle = 45 + 90 * (i % 4);
      CHECK_NOTHROW(augment_geometric(ctx, p));
    }
  }
  SUBCASE("small context is rejected") {
    AugmentationParams p;
    p.angle = 45;
    try {
      augment_geometric(noise_image(300, 300, 1), p);
      FAIL("expected ContextTooSmall");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kContextTooSmall);
    }
  }
  SUBCASE("out-of-range parameters are rejected") {
    AugmentationParams p;
    p.dx = 9;
    CHECK_THROWS_AS(augment_geometric(ctx, p), Error);
  }
}

TEST_CASE("color augmentation") {
  const RgbImage patch = noise_image(64, 64, 6);
  CHECK(augment_color(patch, {}) == patch);

  SUBCASE("gray stays gray") {
    RgbImage gray(32, 32);
    Rng rng(2);
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        const auto v = static_cast<std::uint8_t>(rng.below(256));
        gray.set(x, y, {v, v, v});
      }
    }
    for (int i = 0; i < 20; ++i) {
      AugmentationParams p;
      p.hue_delta = rng.uniform(-0.04, 0.04);
      p.sat_factor = rng.uniform(0.75, 1.25);
      CHECK(augment_color(gray, p) == gray);
    }
  }
  SUBCASE("uniform patches ignore contrast") {
    const RgbImage flat(40, 40, {120, 60, 200});
    for (double f : {0.25, 1.0, 1.75}) {
      AugmentationParams p;
      p.contrast_factor = f;
      CHECK(augment_color(flat, p) == flat);
    }
  }
  SUBCASE("brightness shifts every channel") {
    const RgbImage flat(4, 4, {100, 100, 100});
    AugmentationParams p;
    p.bright_delta = 0.2;
    CHECK(augment_color(flat, p).at(0, 0) == Rgb{151, 151, 151});
  }
}

TEST_CASE("training patch reads centered context") {
  TempDir tmp("train_patch");
  SyntheticSpec spec;
  spec.tumor_lesions = {{256, 256, 100}};
  const SlideBundle b = write_synthetic_bundle(tmp.path(), spec);
  const PatchRef r{b.id(), 128, 128, kPatchSize, PatchLabel::kTumor};
  CHECK(training_patch(b, r, {}) == b.read_region(0, 128, 128, 256, 256));
}

TEST_CASE("patient split") {
  std::vector<PatientSlides> patients;
  for (int i = 0; i < 100; ++i) {
    std::vector<bool> flags(5, false);
    if (i < 43) flags[i % 5] = true;
    patients.push_back({"p" + std::to_string(i), flags});
  }
  int m = 0, l = 0;
  for (const SplitAssignment& a : split_patients(patients)) {
    (a.bucket == SplitBucket::kTrainM ? m : l)++;
  }
  CHECK(m == 43);
  CHECK(l == 57);
  CHECK(to_string(SplitBucket::kTrainM) == "train-M");
}
