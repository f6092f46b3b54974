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

#include "pnstage/patches.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numbers>
#include <optional>

#include "pnstage/error.h"

namespace pnstage {

std::string_view to_string(PatchLabel label) {
  switch (label) {
    case PatchLabel::kTumor: return "tumor";
    case PatchLabel::kNormal: return "normal";
    case PatchLabel::kExcluded: return "excluded";
  }
  return "excluded";
}

PatchLabel parse_patch_label(std::string_view s) {
  if (s == "tumor") return PatchLabel::kTumor;
  if (s == "normal") return PatchLabel::kNormal;
  if (s == "excluded") return PatchLabel::kExcluded;
  throw Error(ErrorCode::kInvalidArgument, "unknown patch label '" + std::string(s) + "'");
}

PatchLabel label_for_fraction(double tumor_fraction) {
  if (tumor_fraction > kTumorFraction) return PatchLabel::kTumor;
  if (tumor_fraction == 0.0) return PatchLabel::kNormal;
  return PatchLabel::kExcluded;
}

TumorFractionIndex::TumorFractionIndex(BoolGrid level0_annotation)
    : mask_(std::move(level0_annotation)),
      blocks_x_((mask_.width() + kBlock - 1) / kBlock),
      blocks_y_((mask_.height() + kBlock - 1) / kBlock),
      table_(static_cast<std::size_t>(blocks_x_ + 1) * (blocks_y_ + 1), 0) {
  const auto stride = static_cast<std::size_t>(blocks_x_ + 1);
  for (int by = 0; by < blocks_y_; ++by) {
    for (int bx = 0; bx < blocks_x_; ++bx) {
      const std::uint64_t c = count_direct(std::int64_t{bx} * kBlock, std::int64_t{by} * kBlock,
                                           kBlock, kBlock);
      table_[(by + 1) * stride + bx + 1] = c + table_[by * stride + bx + 1] +
                                           table_[(by + 1) * stride + bx] -
                                           table_[by * stride + bx];
    }
  }
}

std::uint64_t TumorFractionIndex::count_direct(std::int64_t x, std::int64_t y, std::int64_t w,
                                               std::int64_t h) const {
  const std::int64_t x0 = std::max<std::int64_t>(x, 0);
  const std::int64_t y0 = std::max<std::int64_t>(y, 0);
  const std::int64_t x1 = std::min<std::int64_t>(x + w, mask_.width());
  const std::int64_t y1 = std::min<std::int64_t>(y + h, mask_.height());
  std::uint64_t n = 0;
  for (std::int64_t yy = y0; yy < y1; ++yy) {
    for (std::int64_t xx = x0; xx < x1; ++xx) {
      n += mask_(static_cast<int>(xx), static_cast<int>(yy)) ? 1 : 0;
    }
  }
  return n;
}

std::uint64_t TumorFractionIndex::count(std::int64_t x, std::int64_t y, std::int64_t w,
                                        std::int64_t h) const {
  if (w <= 0 || h <= 0) return 0;
  const bool aligned = x % kBlock == 0 && y % kBlock == 0 && w % kBlock == 0 && h % kBlock == 0;
  if (!aligned) return count_direct(x, y, w, h);
  auto clamp_bx = [&](std::int64_t b) { return std::clamp<std::int64_t>(b, 0, blocks_x_); };
  auto clamp_by = [&](std::int64_t b) { return std::clamp<std::int64_t>(b, 0, blocks_y_); };
  const std::int64_t bx0 = clamp_bx(x / kBlock);
  const std::int64_t by0 = clamp_by(y / kBlock);
  const std::int64_t bx1 = clamp_bx((x + w) / kBlock);
  const std::int64_t by1 = clamp_by((y + h) / kBlock);
  if (bx0 >= bx1 || by0 >= by1) return 0;
  const auto stride = static_cast<std::size_t>(blocks_x_ + 1);
  return table_[by1 * stride + bx1] - table_[by0 * stride + bx1] - table_[by1 * stride + bx0] +
         table_[by0 * stride + bx0];
}

bool point_in_tissue(const TissueMask& tissue, std::int64_t x, std::int64_t y) {
  if (x < 0 || y < 0) return false;
  const std::int64_t mx = x >> tissue.level;
  const std::int64_t my = y >> tissue.level;
  if (mx >= tissue.grid.width() || my >= tissue.grid.height()) return false;
  return tissue.grid(static_cast<int>(mx), static_cast<int>(my)) != 0;
}

std::vector<PatchRef> enumerate_patches(const SlideBundle& bundle, const TissueMask& tissue,
                                        const AnnotationMask* annotation) {
  const LevelInfo& l0 = bundle.level(0);
  const LevelInfo expect = level_dims(l0.width, l0.height, tissue.level);
  if (tissue.grid.width() != expect.width || tissue.grid.height() != expect.height) {
    throw Error(ErrorCode::kMaskMismatch, "tissue mask does not match bundle " + bundle.id());
  }
  std::optional<TumorFractionIndex> index;
  if (annotation != nullptr) {
    if (annotation->level != 0 || annotation->grid.width() != l0.width ||
        annotation->grid.height() != l0.height) {
      throw Error(ErrorCode::kMaskMismatch,
                  "annotation must be a level-0 mask of bundle " + bundle.id());
    }
    index.emplace(annotation->grid);
  }

  std::vector<PatchRef> refs;
  for (std::int64_t y = 0; y < l0.height; y += kPatchStride) {
    for (std::int64_t x = 0; x < l0.width; x += kPatchStride) {
      if (!point_in_tissue(tissue, x + kPatchSize / 2, y + kPatchSize / 2)) continue;
      PatchRef ref{bundle.id(), x, y, kPatchSize, PatchLabel::kNormal};
      if (index) ref.label = label_for_fraction(index->fraction(x, y));
      refs.push_back(std::move(ref));
    }
  }
  return refs;
}

std::vector<PatchRef> balanced_sample(const std::map<std::string, std::vector<PatchRef>>& by_slide,
                                      std::size_t n, std::uint64_t seed,
                                      const SamplingOptions& options) {
  if (n % 2 != 0) throw Error(ErrorCode::kOddCount, "sample count must be even");

  // Per class: the slides holding that class and their patches of it.
  struct Pool {
    std::vector<std::vector<const PatchRef*>> slides;
  };
  Pool tumor;
  Pool normal;
  for (const auto& [slide, refs] : by_slide) {
    std::vector<const PatchRef*> t;
    std::vector<const PatchRef*> nm;
    for (const PatchRef& r : refs) {
      if (r.label == PatchLabel::kTumor) t.push_back(&r);
      if (r.label == PatchLabel::kNormal) nm.push_back(&r);
    }
    if (!nm.empty() && (t.empty() || options.normals_from_tumor_slides)) {
      normal.slides.push_back(std::move(nm));
    }
    if (!t.empty()) tumor.slides.push_back(std::move(t));
  }
  if (tumor.slides.empty() || normal.slides.empty()) {
    throw Error(ErrorCode::kEmptyClass, "balanced sampling needs tumor and normal patches");
  }

  Rng rng(seed);
  std::vector<PatchRef> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Pool& pool = (i % 2 == 0) ? tumor : normal;
    const auto& slide = pool.slides[rng.below(pool.slides.size())];
    out.push_back(*slide[rng.below(slide.size())]);
  }
  return out;
}

AugmentationParams AugmentationParams::random(Rng& rng) {
  AugmentationParams p;
  p.dx = static_cast<int>(rng.below(17)) - 8;
  p.dy = static_cast<int>(rng.below(17)) - 8;
  p.flip = rng.coin();
  p.angle = rng.uniform(0.0, 360.0);
  p.hue_delta = rng.uniform(-0.04, 0.04);
  p.sat_factor = rng.uniform(0.75, 1.25);
  p.bright_delta = rng.uniform(-0.25, 0.25);
  p.contrast_factor = rng.uniform(0.25, 1.75);
  return p;
}

void AugmentationParams::validate() const {
  auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
  if (!in(dx, -8, 8) || !in(dy, -8, 8) || !(angle >= 0.0 && angle < 360.0) ||
      !in(hue_delta, -0.04, 0.04) || !in(sat_factor, 0.75, 1.25) ||
      !in(bright_delta, -0.25, 0.25) || !in(contrast_factor, 0.25, 1.75)) {
    throw Error(ErrorCode::kInvalidArgument, "augmentation parameter out of range");
  }
}

namespace {

// Exact for multiples of 90 degrees so those rotations need no interpolation.
void exact_sincos(double degrees, double& s, double& c) {
  const double q = degrees / 90.0;
  if (q == std::floor(q)) {
    static constexpr double kSin[4] = {0, 1, 0, -1};
    static constexpr double kCos[4] = {1, 0, -1, 0};
    const int k = static_cast<int>(std::fmod(std::fmod(q, 4.0) + 4.0, 4.0));
    s = kSin[k];
    c = kCos[k];
    return;
  }
  const double rad = degrees * std::numbers::pi / 180.0;
  s = std::sin(rad);
  c = std::cos(rad);
}

std::uint8_t quantize(double v01) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v01, 0.0, 1.0) * 255.0));
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double range = mx - mn;
  v = mx;
  s = mx > 0 ? range / mx : 0.0;
  if (range <= 0) {
    h = 0;
    return;
  }
  double hh;
  if (mx == r) {
    hh = (g - b) / range;
  } else if (mx == g) {
    hh = 2.0 + (b - r) / range;
  } else {
    hh = 4.0 + (r - g) / range;
  }
  hh /= 6.0;
  h = hh < 0 ? hh + 1.0 : hh;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double c = v * s;
  const double m = v - c;
  const double h6 = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(h6, 2.0) - 1.0));
  const int sector = static_cast<int>(std::floor(h6)) % 6;
  double rr = 0, gg = 0, bb = 0;
  switch (sector) {
    case 0: rr = c; gg = x; break;
    case 1: rr = x; gg = c; break;
    case 2: gg = c; bb = x; break;
    case 3: gg = x; bb = c; break;
    case 4: rr = x; bb = c; break;
    default: rr = c; bb = x; break;
  }
  r = rr + m;
  g = gg + m;
  b = bb + m;
}

}  // namespace

RgbImage augment_geometric(const RgbImage& context, const AugmentationParams& params) {
  params.validate();
  double s, c;
  exact_sincos(params.angle, s, c);
  const double cx = context.width() / 2.0 - 0.5;
  const double cy = context.height() / 2.0 - 0.5;
  const double half = kPatchSize / 2.0;

  // Output pixel -> context coordinates (inverse of rotate, shift, flip).
  auto source = [&](int u, int v, double& sx, double& sy) {
    double qx = u + 0.5 - half;
    const double qy = v + 0.5 - half;
    if (params.flip) qx = -qx;
    const double px = qx - params.dx;
    const double py = qy - params.dy;
    sx = c * px + s * py + cx;
    sy = -s * px + c * py + cy;
  };

  for (int u : {0, kPatchSize - 1}) {
    for (int v : {0, kPatchSize - 1}) {
      double sx, sy;
      source(u, v, sx, sy);
      if (sx < 0 || sy < 0 || sx > context.width() - 1 || sy > context.height() - 1) {
        throw Error(ErrorCode::kContextTooSmall,
                    "context " + std::to_string(context.width()) + "x" +
                        std::to_string(context.height()) + " too small for these parameters");
      }
    }
  }

  RgbImage out(kPatchSize, kPatchSize);
  for (int v = 0; v < kPatchSize; ++v) {
    for (int u = 0; u < kPatchSize; ++u) {
      double sx, sy;
      source(u, v, sx, sy);
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0;
      const double fy = sy - y0;
      const int x1 = fx > 0 ? x0 + 1 : x0;
      const int y1 = fy > 0 ? y0 + 1 : y0;
      const Rgb p00 = context.at(x0, y0);
      const Rgb p10 = context.at(x1, y0);
      const Rgb p01 = context.at(x0, y1);
      const Rgb p11 = context.at(x1, y1);
      auto mix = [&](std::uint8_t a, std::uint8_t b, std::uint8_t cc, std::uint8_t d) {
        const double top = a + (b - a) * fx;
        const double bottom = cc + (d - cc) * fx;
        return static_cast<std::uint8_t>(
            std::clamp(std::lround(top + (bottom - top) * fy), 0L, 255L));
      };
      out.set(u, v,
              {mix(p00.r, p10.r, p01.r, p11.r), mix(p00.g, p10.g, p01.g, p11.g),
               mix(p00.b, p10.b, p01.b, p11.b)});
    }
  }
  return out;
}

RgbImage augment_color(const RgbImage& patch, const AugmentationParams& params) {
  params.validate();
  const std::size_t n = static_cast<std::size_t>(patch.width()) * patch.height();
  std::vector<double> buf(n * 3);
  const auto bytes = patch.bytes();
  for (std::size_t i = 0; i < n; ++i) {
    double h, s, v;
    rgb_to_hsv(bytes[3 * i] / 255.0, bytes[3 * i + 1] / 255.0, bytes[3 * i + 2] / 255.0, h, s,
               v);
    h += params.hue_delta;
    h -= std::floor(h);
    s = std::clamp(s * params.sat_factor, 0.0, 1.0);
    double r, g, b;
    hsv_to_rgb(h, s, v, r, g, b);
    buf[3 * i] = r + params.bright_delta;
    buf[3 * i + 1] = g + params.bright_delta;
    buf[3 * i + 2] = b + params.bright_delta;
  }

  RgbImage out(patch.width(), patch.height());
  auto dst = out.bytes();
  for (int ch = 0; ch < 3; ++ch) {
    double sum = 0;
    for (std::size_t i = 0; i < n; ++i) sum += buf[3 * i + ch];
    const double mean = n > 0 ? sum / static_cast<double>(n) : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = (buf[3 * i + ch] - mean) * params.contrast_factor + mean;
      dst[3 * i + ch] = quantize(v);
    }
  }
  return out;
}

RgbImage flip_horizontal(const RgbImage& img) {
  RgbImage out(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) out.set(img.width() - 1 - x, y, img.at(x, y));
  }
  return out;
}

RgbImage training_patch(const SlideBundle& bundle, const PatchRef& ref,
                        const AugmentationParams& params) {
  const std::int64_t offset = (kAugmentContext - ref.size) / 2;
  const RgbImage context =
      bundle.read_region(0, ref.x - offset, ref.y - offset, kAugmentContext, kAugmentContext);
  return augment_color(augment_geometric(context, params), params);
}

std::string_view to_string(SplitBucket bucket) {
  return bucket == SplitBucket::kTrainM ? "train-M" : "train-L";
}

std::vector<SplitAssignment> split_patients(const std::vector<PatientSlides>& patients) {
  std::vector<SplitAssignment> out;
  out.reserve(patients.size());
  for (const PatientSlides& p : patients) {
    const bool annotated = std::any_of(p.slide_has_lesion_annotation.begin(),
                                       p.slide_has_lesion_annotation.end(),
                                       [](bool b) { return b; });
    out.push_back({p.patient_id, annotated ? SplitBucket::kTrainM : SplitBucket::kTrainL});
  }
  return out;
}

void write_patches_jsonl(const std::filesystem::path& file, const std::vector<PatchRef>& refs) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + file.string());
  for (const PatchRef& r : refs) {
    nlohmann::ordered_json j;
    j["slide_id"] = r.slide_id;
    j["x"] = r.x;
    j["y"] = r.y;
    j["size"] = r.size;
    j["label"] = to_string(r.label);
    out << j.dump() << '\n';
  }
}

std::vector<PatchRef> read_patches_jsonl(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + file.string());
  std::vector<PatchRef> refs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      refs.push_back({j.at("slide_id").get<std::string>(), j.at("x").get<std::int64_t>(),
                      j.at("y").get<std::int64_t>(), j.at("size").get<int>(),
                      parse_patch_label(j.at("label").get<std::string>())});
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kIo, file.string() + ": " + e.what());
    }
  }
  return refs;
}

}  // namespace pnstage
