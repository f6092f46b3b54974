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

#include "pnstage/slide_io.h"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <numbers>
#include <nlohmann/json.hpp>

#include "binary_io.h"
#include "pnstage/error.h"
#include "pnstage/rng.h"

namespace pnstage {

namespace fs = std::filesystem;
using nlohmann::json;

LevelInfo level_dims(int width0, int height0, int level) {
  const std::int64_t ds = std::int64_t{1} << level;
  return {level, static_cast<int>((width0 + ds - 1) / ds),
          static_cast<int>((height0 + ds - 1) / ds), static_cast<int>(ds)};
}

class SlideBundle::LevelFile {
 public:
  explicit LevelFile(const fs::path& file) : fd_(::open(file.c_str(), O_RDONLY | O_CLOEXEC)) {
    if (fd_ < 0) {
      throw Error(ErrorCode::kMissingLevel, "cannot open " + file.string());
    }
  }
  ~LevelFile() { ::close(fd_); }
  LevelFile(const LevelFile&) = delete;
  LevelFile& operator=(const LevelFile&) = delete;

  std::uint64_t size() const {
    const off_t end = ::lseek(fd_, 0, SEEK_END);
    return end < 0 ? 0 : static_cast<std::uint64_t>(end);
  }

  void read_at(std::uint64_t offset, std::uint8_t* dst, std::size_t n) const {
    while (n > 0) {
      const ssize_t got = ::pread(fd_, dst, n, static_cast<off_t>(offset));
      if (got < 0 && errno == EINTR) continue;
      if (got <= 0) throw Error(ErrorCode::kIo, "short read from level file");
      dst += got;
      offset += static_cast<std::uint64_t>(got);
      n -= static_cast<std::size_t>(got);
    }
  }

 private:
  int fd_;
};

SlideBundle SlideBundle::open(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw Error(ErrorCode::kCorruptManifest, "no manifest.json in " + dir.string());
  }
  json manifest;
  try {
    manifest = json::parse(detail::read_text(manifest_path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kCorruptManifest, e.what());
  }

  SlideBundle bundle;
  bundle.path_ = dir;
  try {
    bundle.id_ = manifest.at("id").get<std::string>();
    const auto& levels = manifest.at("levels");
    if (!levels.is_array() || levels.empty()) {
      throw Error(ErrorCode::kCorruptManifest, "levels must be a nonempty array");
    }
    for (std::size_t k = 0; k < levels.size(); ++k) {
      const auto& entry = levels[k];
      LevelInfo info;
      info.level = entry.at("level").get<int>();
      info.width = entry.at("width").get<int>();
      info.height = entry.at("height").get<int>();
      if (info.level != static_cast<int>(k) || info.width < 1 || info.height < 1) {
        throw Error(ErrorCode::kCorruptManifest,
                    "level entries must be 0..n-1 in order with positive size");
      }
      info.downsample = 1 << info.level;
      if (k > 0) {
        const LevelInfo expect = level_dims(bundle.levels_[0].width, bundle.levels_[0].height,
                                            info.level);
        if (expect.width != info.width || expect.height != info.height) {
          throw Error(ErrorCode::kCorruptManifest,
                      "level " + std::to_string(k) + " dimensions break the 2^k pyramid");
        }
      }
      const fs::path file = dir / entry.at("file").get<std::string>();
      if (!fs::exists(file)) {
        throw Error(ErrorCode::kMissingLevel, "level file missing: " + file.string());
      }
      auto lf = std::make_shared<const LevelFile>(file);
      const std::uint64_t expected = std::uint64_t(info.width) * info.height * 3;
      if (lf->size() != expected) {
        throw Error(ErrorCode::kSizeMismatch,
                    file.string() + " has " + std::to_string(lf->size()) +
                        " bytes, expected " + std::to_string(expected));
      }
      bundle.levels_.push_back(info);
      bundle.files_.push_back(std::move(lf));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kCorruptManifest, e.what());
  }
  return bundle;
}

const LevelInfo& SlideBundle::level(int k) const {
  if (!has_level(k)) {
    throw Error(ErrorCode::kBadLevel, "level " + std::to_string(k) + " not in bundle " + id_);
  }
  return levels_[static_cast<std::size_t>(k)];
}

RgbImage SlideBundle::read_region(int lvl, std::int64_t x, std::int64_t y, int w,
                                  int h) const {
  const LevelInfo& info = level(lvl);
  if (w <= 0 || h <= 0) {
    throw Error(ErrorCode::kEmptyIntersection, "region has no area");
  }
  const std::int64_t x0 = std::max<std::int64_t>(x, 0);
  const std::int64_t y0 = std::max<std::int64_t>(y, 0);
  const std::int64_t x1 = std::min<std::int64_t>(x + w, info.width);
  const std::int64_t y1 = std::min<std::int64_t>(y + h, info.height);
  if (x0 >= x1 || y0 >= y1) {
    throw Error(ErrorCode::kEmptyIntersection, "region lies outside level bounds");
  }

  RgbImage out(w, h, kWhite);
  const LevelFile& file = *files_[static_cast<std::size_t>(lvl)];
  const std::size_t run = static_cast<std::size_t>(x1 - x0) * 3;
  for (std::int64_t sy = y0; sy < y1; ++sy) {
    const std::uint64_t src = (static_cast<std::uint64_t>(sy) * info.width + x0) * 3;
    auto dst = out.row(static_cast<int>(sy - y)).subspan(static_cast<std::size_t>(x0 - x) * 3);
    file.read_at(src, dst.data(), run);
  }
  return out;
}

RgbImage SlideBundle::read_level(int lvl) const {
  const LevelInfo& info = level(lvl);
  return read_region(lvl, 0, 0, info.width, info.height);
}

void write_bundle(const fs::path& dir, const std::string& id,
                  const std::vector<RgbImage>& levels) {
  if (levels.empty()) throw Error(ErrorCode::kInvalidArgument, "bundle needs a level");
  fs::create_directories(dir);
  json manifest;
  manifest["id"] = id;
  manifest["levels"] = json::array();
  for (std::size_t k = 0; k < levels.size(); ++k) {
    const RgbImage& img = levels[k];
    const LevelInfo expect =
        level_dims(levels[0].width(), levels[0].height(), static_cast<int>(k));
    if (img.width() != expect.width || img.height() != expect.height) {
      throw Error(ErrorCode::kSizeMismatch,
                  "level " + std::to_string(k) + " does not match the pyramid dims");
    }
    const std::string name = "level_" + std::to_string(k) + ".rgb";
    detail::write_file(dir / name, img.bytes());
    manifest["levels"].push_back(
        {{"level", k}, {"width", img.width()}, {"height", img.height()}, {"file", name}});
  }
  detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<RgbImage> build_pyramid(RgbImage level0, int min_levels) {
  std::vector<RgbImage> levels;
  levels.push_back(std::move(level0));
  while (static_cast<int>(levels.size()) < min_levels ||
         levels.back().width() > 1 || levels.back().height() > 1) {
    levels.push_back(box_downsample(levels.back()));
  }
  return levels;
}

namespace {

struct Ellipse {
  double cx, cy, a, b, cos_t, sin_t;

  bool contains(double x, double y) const {
    const double dx = x - cx;
    const double dy = y - cy;
    const double u = dx * cos_t + dy * sin_t;
    const double v = -dx * sin_t + dy * cos_t;
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
};

// Per-pixel hash noise in [-amp, amp], independent of traversal order.
int pixel_noise(std::uint64_t seed, int x, int y, int amp) {
  std::uint64_t h = seed ^ (static_cast<std::uint64_t>(x) * 0x9E3779B97F4A7C15ULL) ^
                    (static_cast<std::uint64_t>(y) * 0xC2B2AE3D27D4EB4FULL);
  h = (h ^ (h >> 33)) * 0xFF51AFD7ED558CCDULL;
  h = (h ^ (h >> 33)) * 0xC4CEB9FE1A85EC53ULL;
  h ^= h >> 33;
  return static_cast<int>(h % static_cast<std::uint64_t>(2 * amp + 1)) - amp;
}

std::uint8_t clamp_u8(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

Rgb jitter(Rgb base, int n) {
  return {clamp_u8(base.r + n), clamp_u8(base.g + n), clamp_u8(base.b + n)};
}

// Lesions are surrounded by at least this much tissue (level-0 px); more
// than the diagonal of one 32x32 block so tumor never blends with
// background at the ROI level.
constexpr double kLesionTissueMargin = 48.0;

}  // namespace

SyntheticSlide synthesize_slide(const SyntheticSpec& spec) {
  if (spec.width0 < 1 || spec.height0 < 1 || spec.tissue_blobs < 0) {
    throw Error(ErrorCode::kSpecOutOfBounds, "slide dimensions must be positive");
  }
  for (const Lesion& l : spec.tumor_lesions) {
    if (!(l.radius > 0) || l.cx - l.radius < 0 || l.cy - l.radius < 0 ||
        l.cx + l.radius > spec.width0 || l.cy + l.radius > spec.height0) {
      throw Error(ErrorCode::kSpecOutOfBounds, "lesion must have radius > 0 and lie in bounds");
    }
  }

  Rng rng(spec.seed);
  const double w = spec.width0;
  const double h = spec.height0;
  std::vector<Ellipse> blobs;
  for (int i = 0; i < spec.tissue_blobs; ++i) {
    const double a = rng.uniform(w / 8, w / 3);
    const double b = rng.uniform(h / 8, h / 3);
    const double t = rng.uniform(0, std::numbers::pi);
    blobs.push_back({rng.uniform(0.2 * w, 0.8 * w), rng.uniform(0.2 * h, 0.8 * h), a, b,
                     std::cos(t), std::sin(t)});
  }
  for (const Lesion& l : spec.tumor_lesions) {
    const double r = l.radius + kLesionTissueMargin;
    blobs.push_back({l.cx, l.cy, r, r, 1.0, 0.0});
  }
  const std::uint64_t noise_seed = rng.next_u64();

  SyntheticSlide out;
  RgbImage img(spec.width0, spec.height0);
  out.annotation.slide_id = spec.id;
  out.annotation.level = 0;
  out.annotation.grid = BoolGrid(spec.width0, spec.height0, 0);
  for (int y = 0; y < spec.height0; ++y) {
    for (int x = 0; x < spec.width0; ++x) {
      const double px = x + 0.5;
      const double py = y + 0.5;
      bool tumor = false;
      for (const Lesion& l : spec.tumor_lesions) {
        const double dx = px - l.cx;
        const double dy = py - l.cy;
        if (dx * dx + dy * dy <= l.radius * l.radius) {
          tumor = true;
          break;
        }
      }
      const int n = pixel_noise(noise_seed, x, y, 6);
      if (tumor) {
        out.annotation.grid(x, y) = 1;
        // Sparse dark "nuclei" on the tumor tint.
        const bool nucleus = pixel_noise(noise_seed ^ 0xABCDEFULL, x / 3, y / 3, 50) > 40;
        img.set(x, y, jitter(spec.tumor_tint, nucleus ? n - 40 : n));
        continue;
      }
      const bool tissue = std::any_of(blobs.begin(), blobs.end(),
                                      [&](const Ellipse& e) { return e.contains(px, py); });
      if (tissue) {
        img.set(x, y, jitter(spec.stain_tint, n));
      } else {
        img.set(x, y, jitter(Rgb{244, 243, 246}, n / 2));
      }
    }
  }
  out.levels = build_pyramid(std::move(img));
  return out;
}

SlideBundle write_synthetic_bundle(const fs::path& dir, const SyntheticSpec& spec) {
  SyntheticSlide slide = synthesize_slide(spec);
  write_bundle(dir, spec.id, slide.levels);
  write_mask_file(dir / kAnnotationFile, slide.annotation.grid);
  return SlideBundle::open(dir);
}

void write_mask_file(const fs::path& file, const BoolGrid& grid) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'T', 'M', 'S', 'K'});
  detail::put_u32(out, static_cast<std::uint32_t>(grid.width()));
  detail::put_u32(out, static_cast<std::uint32_t>(grid.height()));
  const std::size_t row_bytes = (static_cast<std::size_t>(grid.width()) + 7) / 8;
  for (int y = 0; y < grid.height(); ++y) {
    std::vector<std::uint8_t> row(row_bytes, 0);
    for (int x = 0; x < grid.width(); ++x) {
      if (grid(x, y)) row[static_cast<std::size_t>(x) / 8] |= std::uint8_t(0x80u >> (x % 8));
    }
    detail::put_bytes(out, row);
  }
  detail::write_file(file, out);
}

BoolGrid read_mask_file(const fs::path& file) {
  const auto data = detail::read_file(file);
  if (data.size() < 12 || std::memcmp(data.data(), "TMSK", 4) != 0) {
    throw Error(ErrorCode::kIo, file.string() + " is not a TMSK mask");
  }
  const std::uint32_t w = detail::get_u32(data.data() + 4);
  const std::uint32_t h = detail::get_u32(data.data() + 8);
  const std::size_t row_bytes = (static_cast<std::size_t>(w) + 7) / 8;
  if (data.size() != 12 + row_bytes * h) {
    throw Error(ErrorCode::kSizeMismatch, file.string() + " has the wrong payload length");
  }
  BoolGrid grid(static_cast<int>(w), static_cast<int>(h), 0);
  for (std::uint32_t y = 0; y < h; ++y) {
    const std::uint8_t* row = data.data() + 12 + row_bytes * y;
    for (std::uint32_t x = 0; x < w; ++x) {
      grid(static_cast<int>(x), static_cast<int>(y)) = (row[x / 8] >> (7 - x % 8)) & 1u;
    }
  }
  return grid;
}

}  // namespace pnstage
