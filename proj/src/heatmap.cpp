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

#include "pnstage/heatmap.h"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <exception>
#include <thread>

#include "binary_io.h"
#include "pnstage/error.h"

namespace pnstage {

std::string_view to_string(Overlap overlap) {
  return overlap == Overlap::kHalf ? "half" : "none";
}

Overlap parse_overlap(std::string_view s) {
  if (s == "half") return Overlap::kHalf;
  if (s == "none") return Overlap::kNone;
  throw Error(ErrorCode::kInvalidArgument, "overlap must be 'none' or 'half'");
}

BoolGrid heatmap_tissue(const TissueMask& tissue, int width0, int height0, int cell_size) {
  const int cw = (width0 + cell_size - 1) / cell_size;
  const int ch = (height0 + cell_size - 1) / cell_size;
  BoolGrid cells(cw, ch, 0);
  const int ds = 1 << tissue.level;
  for (int my = 0; my < tissue.grid.height(); ++my) {
    for (int mx = 0; mx < tissue.grid.width(); ++mx) {
      if (!tissue.grid(mx, my)) continue;
      // Level-0 footprint of this mask pixel, clipped to the slide.
      const std::int64_t x0 = std::int64_t{mx} * ds;
      const std::int64_t y0 = std::int64_t{my} * ds;
      const std::int64_t x1 = std::min<std::int64_t>(x0 + ds, width0);
      const std::int64_t y1 = std::min<std::int64_t>(y0 + ds, height0);
      for (std::int64_t cy = y0 / cell_size; cy <= (y1 - 1) / cell_size && cy < ch; ++cy) {
        for (std::int64_t cx = x0 / cell_size; cx <= (x1 - 1) / cell_size && cx < cw; ++cx) {
          cells(static_cast<int>(cx), static_cast<int>(cy)) = 1;
        }
      }
    }
  }
  return cells;
}

Heatmap stitch_heatmap(const SlideBundle& bundle, const TissueMask& tissue,
                       std::span<PatchScorer* const> scorers, const StitchOptions& options) {
  if (scorers.empty()) throw Error(ErrorCode::kInvalidArgument, "stitching needs a scorer");
  const LevelInfo& l0 = bundle.level(0);
  const LevelInfo expect = level_dims(l0.width, l0.height, tissue.level);
  if (tissue.grid.width() != expect.width || tissue.grid.height() != expect.height) {
    throw Error(ErrorCode::kMaskMismatch, "tissue mask does not match bundle " + bundle.id());
  }
  const int cell = options.cell_size;
  const int stride = options.overlap == Overlap::kHalf ? kPatchSize / 2 : kPatchSize;
  if (cell <= 0 || stride % cell != 0 || kPatchSize % cell != 0) {
    throw Error(ErrorCode::kInvalidArgument, "patch stride must be a multiple of the cell size");
  }
  if (options.batch_size == 0) throw Error(ErrorCode::kInvalidArgument, "batch size must be > 0");

  const BoolGrid tissue_cells = heatmap_tissue(tissue, l0.width, l0.height, cell);
  const int cw = tissue_cells.width();
  const int ch = tissue_cells.height();
  const int span_cells = kPatchSize / cell;

  struct Tile {
    std::int64_t x, y;
  };
  std::vector<Tile> tiles;
  for (std::int64_t y = 0; y < l0.height; y += stride) {
    for (std::int64_t x = 0; x < l0.width; x += stride) {
      const int c0 = static_cast<int>(x / cell);
      const int r0 = static_cast<int>(y / cell);
      bool covers_tissue = false;
      for (int r = r0; r < std::min(r0 + span_cells, ch) && !covers_tissue; ++r) {
        for (int c = c0; c < std::min(c0 + span_cells, cw); ++c) {
          if (tissue_cells(c, r)) {
            covers_tissue = true;
            break;
          }
        }
      }
      if (covers_tissue) tiles.push_back({x, y});
    }
  }

  std::vector<float> probs(tiles.size(), 0.0f);
  const std::size_t batches = (tiles.size() + options.batch_size - 1) / options.batch_size;

  auto run_batch = [&](PatchScorer& scorer, std::size_t b) {
    const std::size_t begin = b * options.batch_size;
    const std::size_t end = std::min(tiles.size(), begin + options.batch_size);
    std::vector<RgbImage> pixels;
    if (scorer.needs_pixels()) {
      pixels.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) {
        pixels.push_back(bundle.read_region(0, tiles[i].x, tiles[i].y, kPatchSize, kPatchSize));
      }
    }
    std::vector<PatchInput> inputs;
    for (std::size_t i = begin; i < end; ++i) {
      inputs.push_back({bundle.id(), tiles[i].x, tiles[i].y,
                        pixels.empty() ? nullptr : &pixels[i - begin]});
    }
    const std::vector<PatchScore> scores = scorer.score_batch(inputs);
    if (scores.size() != inputs.size()) {
      throw Error(ErrorCode::kProtocolViolation, "scorer returned the wrong number of scores");
    }
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const float p = scores[i].prob;
      if (!std::isfinite(p) || p < 0.0f || p > 1.0f) {
        throw Error(ErrorCode::kProtocolViolation, "scorer returned probability outside [0, 1]");
      }
      probs[begin + i] = p;
    }
  };

  if (scorers.size() == 1) {
    for (std::size_t b = 0; b < batches; ++b) run_batch(*scorers[0], b);
  } else {
    std::vector<std::exception_ptr> errors(scorers.size());
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < scorers.size(); ++w) {
      workers.emplace_back([&, w] {
        try {
          for (std::size_t b = w; b < batches; b += scorers.size()) run_batch(*scorers[w], b);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : workers) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  // Fixed accumulation order keeps the result independent of scheduling.
  Grid<double> sum(cw, ch, 0.0);
  Grid<int> count(cw, ch, 0);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const int c0 = static_cast<int>(tiles[i].x / cell);
    const int r0 = static_cast<int>(tiles[i].y / cell);
    for (int r = r0; r < std::min(r0 + span_cells, ch); ++r) {
      for (int c = c0; c < std::min(c0 + span_cells, cw); ++c) {
        sum(c, r) += probs[i];
        count(c, r) += 1;
      }
    }
  }
  Heatmap hm{bundle.id(), cell, FloatGrid(cw, ch, 0.0f)};
  for (int r = 0; r < ch; ++r) {
    for (int c = 0; c < cw; ++c) {
      if (tissue_cells(c, r) && count(c, r) > 0) {
        hm.grid(c, r) = static_cast<float>(sum(c, r) / count(c, r));
      }
    }
  }
  return hm;
}

Heatmap stitch_heatmap(const SlideBundle& bundle, const TissueMask& tissue, PatchScorer& scorer,
                       const StitchOptions& options) {
  PatchScorer* one[] = {&scorer};
  return stitch_heatmap(bundle, tissue, std::span<PatchScorer* const>(one), options);
}

Heatmap average_heatmaps(std::span<const Heatmap> heatmaps) {
  if (heatmaps.empty()) throw Error(ErrorCode::kInvalidArgument, "nothing to average");
  const Heatmap& first = heatmaps.front();
  for (const Heatmap& h : heatmaps) {
    if (h.grid.width() != first.grid.width() || h.grid.height() != first.grid.height() ||
        h.cell_size != first.cell_size) {
      throw Error(ErrorCode::kDimensionMismatch, "ensemble heatmaps differ in shape");
    }
  }
  Heatmap out{first.slide_id, first.cell_size,
              FloatGrid(first.grid.width(), first.grid.height(), 0.0f)};
  for (std::size_t i = 0; i < out.grid.size(); ++i) {
    double s = 0.0;
    for (const Heatmap& h : heatmaps) s += h.grid.values()[i];
    out.grid.values()[i] = static_cast<float>(s / static_cast<double>(heatmaps.size()));
  }
  return out;
}

double major_axis(std::span<const Cell> cells) {
  if (cells.size() <= 1) return 0.0;
  // Exact integer moments; the covariance entries are these divided by n^2.
  __int128 n = static_cast<__int128>(cells.size());
  __int128 sr = 0, sc = 0, srr = 0, scc = 0, src = 0;
  for (const Cell& c : cells) {
    sr += c.row;
    sc += c.col;
    srr += static_cast<__int128>(c.row) * c.row;
    scc += static_cast<__int128>(c.col) * c.col;
    src += static_cast<__int128>(c.row) * c.col;
  }
  const __int128 vrr = n * srr - sr * sr;
  const __int128 vcc = n * scc - sc * sc;
  const __int128 vrc = n * src - sr * sc;
  const __int128 diff = vrr - vcc;
  const double disc = static_cast<double>(diff * diff + 4 * vrc * vrc);
  const double lambda = (static_cast<double>(vrr + vcc) + std::sqrt(disc)) /
                        (2.0 * static_cast<double>(n * n));
  return 4.0 * std::sqrt(lambda);
}

std::vector<Region> threshold_regions(const Heatmap& hm, double t) {
  if (!(t > 0.0 && t < 1.0)) throw Error(ErrorCode::kInvalidArgument, "threshold must be in (0, 1)");
  const FloatGrid& g = hm.grid;
  Grid<std::uint8_t> seen(g.width(), g.height(), 0);
  std::vector<Region> regions;
  std::vector<Cell> stack;
  for (int r = 0; r < g.height(); ++r) {
    for (int c = 0; c < g.width(); ++c) {
      if (seen(c, r) || !(g(c, r) >= t)) continue;
      Region region;
      seen(c, r) = 1;
      stack.push_back({r, c});
      while (!stack.empty()) {
        const Cell cur = stack.back();
        stack.pop_back();
        region.cells.push_back(cur);
        for (int dr = -1; dr <= 1; ++dr) {
          for (int dc = -1; dc <= 1; ++dc) {
            const int nr = cur.row + dr;
            const int nc = cur.col + dc;
            if (!g.contains(nc, nr) || seen(nc, nr) || !(g(nc, nr) >= t)) continue;
            seen(nc, nr) = 1;
            stack.push_back({nr, nc});
          }
        }
      }
      std::sort(region.cells.begin(), region.cells.end(), [](const Cell& a, const Cell& b) {
        return a.row != b.row ? a.row < b.row : a.col < b.col;
      });
      double sum = 0.0;
      for (const Cell& cell : region.cells) {
        const double v = g(cell.col, cell.row);
        sum += v;
        region.max_prob = std::max(region.max_prob, v);
      }
      region.area = static_cast<int>(region.cells.size());
      region.mean_prob = sum / region.area;
      region.major_axis_len = major_axis(region.cells);
      regions.push_back(std::move(region));
    }
  }
  return regions;
}

RegionFeatureVector extract_features(const Heatmap& hm, const BoolGrid& tissue_cells, double t) {
  if (!(t > 0.0 && t < 1.0)) throw Error(ErrorCode::kInvalidArgument, "threshold must be in (0, 1)");
  if (tissue_cells.width() != hm.grid.width() || tissue_cells.height() != hm.grid.height()) {
    throw Error(ErrorCode::kMaskMismatch, "tissue grid does not match the heatmap");
  }
  RegionFeatureVector f{};
  const std::vector<Region> regions = threshold_regions(hm, t);
  if (!regions.empty()) {
    // Regions arrive in row-major order of their first cell, so keeping the
    // earliest on full ties gives the positional tie-break.
    const Region* largest = &regions.front();
    for (const Region& r : regions) {
      if (r.area > largest->area ||
          (r.area == largest->area && r.max_prob > largest->max_prob)) {
        largest = &r;
      }
    }
    f[0] = largest->major_axis_len;
    f[1] = largest->max_prob;
    f[2] = largest->mean_prob;
    f[3] = largest->area;
    double mean_sum = 0.0;
    double area_sum = 0.0;
    for (const Region& r : regions) {
      mean_sum += r.mean_prob;
      area_sum += r.area;
    }
    f[4] = mean_sum / static_cast<double>(regions.size());
    f[5] = area_sum;
  }
  double tissue_max = 0.0;
  double tissue_sum = 0.0;
  std::size_t tissue_n = 0;
  for (int r = 0; r < hm.grid.height(); ++r) {
    for (int c = 0; c < hm.grid.width(); ++c) {
      if (!tissue_cells(c, r)) continue;
      const double v = hm.grid(c, r);
      tissue_max = std::max(tissue_max, v);
      tissue_sum += v;
      ++tissue_n;
    }
  }
  const std::size_t background_n = hm.grid.size() - tissue_n;
  f[6] = tissue_max;
  f[7] = tissue_n > 0 ? tissue_sum / static_cast<double>(tissue_n) : 0.0;
  f[8] = static_cast<double>(regions.size());
  f[9] = static_cast<double>(tissue_n);
  f[10] = background_n > 0 ? static_cast<double>(tissue_n) / static_cast<double>(background_n)
                           : static_cast<double>(tissue_n);
  return f;
}

void write_heatmap(const std::filesystem::path& file, const Heatmap& hm) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'H', 'M', 'A', 'P'});
  detail::put_u32(out, static_cast<std::uint32_t>(hm.grid.width()));
  detail::put_u32(out, static_cast<std::uint32_t>(hm.grid.height()));
  detail::put_u32(out, static_cast<std::uint32_t>(hm.cell_size));
  for (float v : hm.grid.values()) detail::put_f32(out, v);
  detail::write_file(file, out);
}

Heatmap read_heatmap(const std::filesystem::path& file, std::string slide_id) {
  const auto data = detail::read_file(file);
  if (data.size() < 16 || std::memcmp(data.data(), "HMAP", 4) != 0) {
    throw Error(ErrorCode::kIo, file.string() + " is not an HMAP heatmap");
  }
  const std::uint32_t w = detail::get_u32(data.data() + 4);
  const std::uint32_t h = detail::get_u32(data.data() + 8);
  const std::uint32_t cell = detail::get_u32(data.data() + 12);
  if (data.size() != 16 + std::size_t{4} * w * h || cell == 0) {
    throw Error(ErrorCode::kSizeMismatch, file.string() + " has the wrong payload length");
  }
  Heatmap hm{std::move(slide_id), static_cast<int>(cell),
             FloatGrid(static_cast<int>(w), static_cast<int>(h))};
  for (std::size_t i = 0; i < hm.grid.size(); ++i) {
    hm.grid.values()[i] = detail::get_f32(data.data() + 16 + 4 * i);
  }
  return hm;
}

void write_heatmap_png(const std::filesystem::path& file, const Heatmap& hm) {
  std::vector<std::uint8_t> gray(hm.grid.size());
  for (std::size_t i = 0; i < gray.size(); ++i) {
    gray[i] = static_cast<std::uint8_t>(
        std::lround(std::clamp(static_cast<double>(hm.grid.values()[i]), 0.0, 1.0) * 255.0));
  }
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(hm.grid.width());
  image.height = static_cast<png_uint_32>(hm.grid.height());
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, file.c_str(), 0, gray.data(), 0, nullptr)) {
    throw Error(ErrorCode::kIo, "cannot write PNG " + file.string() + ": " + image.message);
  }
}

}  // namespace pnstage
