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

#include "pnstage/metrics.h"

#include <algorithm>
#include <map>
#include <set>

#include "pnstage/error.h"

namespace pnstage {

double auc(const std::vector<ScoredSlide>& slides) {
  std::vector<std::pair<double, bool>> v;
  v.reserve(slides.size());
  std::size_t n_pos = 0;
  for (const ScoredSlide& s : slides) {
    v.emplace_back(s.score, s.tumor);
    n_pos += s.tumor ? 1 : 0;
  }
  const std::size_t n_neg = v.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw Error(ErrorCode::kSingleClass, "AUC needs tumor and normal slides");
  }
  std::sort(v.begin(), v.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  // Rank sum of the positives with midranks for ties, all in half-units so
  // it stays an exact integer.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    while (j < v.size() && v[j].first == v[i].first) ++j;
    const std::uint64_t twice_mid = i + j + 1;  // 2 * average of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (v[k].second) twice_rank_sum += twice_mid;
    }
    i = j;
  }
  const std::uint64_t twice_u = twice_rank_sum - n_pos * (n_pos + 1);
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(n_pos) * n_neg);
}

std::vector<LesionDetection> detect_lesions(const Heatmap& hm, double t) {
  std::vector<LesionDetection> out;
  for (const Region& r : threshold_regions(hm, t)) {
    Cell best = r.cells.front();
    for (const Cell& c : r.cells) {
      if (hm.grid(c.col, c.row) > hm.grid(best.col, best.row)) best = c;
    }
    out.push_back({hm.slide_id, best, hm.grid(best.col, best.row)});
  }
  return out;
}

FrocResult froc(const std::vector<LesionDetection>& detections,
                const std::vector<GroundTruthRegion>& truth, int normal_slide_count,
                const std::vector<double>& fp_points) {
  if (truth.empty()) throw Error(ErrorCode::kNoGroundTruth, "FROC needs ground-truth regions");
  if (normal_slide_count <= 0) {
    throw Error(ErrorCode::kInvalidArgument, "FP averaging needs a positive slide count");
  }
  if (fp_points.empty() || !std::is_sorted(fp_points.begin(), fp_points.end())) {
    throw Error(ErrorCode::kInvalidArgument, "FP operating points must be nonempty ascending");
  }

  // Which region (if any) each detection falls in.
  std::map<std::pair<std::string, std::pair<int, int>>, std::size_t> owner;
  for (std::size_t g = 0; g < truth.size(); ++g) {
    for (const Cell& c : truth[g].cells) {
      owner.emplace(std::make_pair(truth[g].slide_id, std::make_pair(c.row, c.col)), g);
    }
  }
  struct Scored {
    double conf;
    long region;  // -1 = false positive
  };
  std::vector<Scored> scored;
  for (const LesionDetection& d : detections) {
    const auto it =
        owner.find(std::make_pair(d.slide_id, std::make_pair(d.location.row, d.location.col)));
    scored.push_back({d.confidence, it == owner.end() ? -1L : static_cast<long>(it->second)});
  }
  std::sort(scored.begin(), scored.end(),
            [](const Scored& a, const Scored& b) { return a.conf > b.conf; });

  FrocResult result;
  std::vector<bool> hit(truth.size(), false);
  std::size_t hits = 0;
  std::size_t fps = 0;
  for (std::size_t i = 0; i < scored.size();) {
    const double theta = scored[i].conf;
    for (; i < scored.size() && scored[i].conf == theta; ++i) {
      if (scored[i].region < 0) {
        ++fps;
      } else if (!hit[static_cast<std::size_t>(scored[i].region)]) {
        hit[static_cast<std::size_t>(scored[i].region)] = true;
        ++hits;
      }
    }
    result.curve.push_back({theta, static_cast<double>(fps) / normal_slide_count,
                            static_cast<double>(hits) / static_cast<double>(truth.size())});
  }

  double total = 0.0;
  for (double p : fp_points) {
    double best = 0.0;
    for (const FrocPoint& pt : result.curve) {
      if (pt.fps_per_slide <= p) best = std::max(best, pt.sensitivity);
    }
    result.sensitivity_at_points.push_back(best);
    total += best;
  }
  result.score = total / static_cast<double>(fp_points.size());
  return result;
}

double quadratic_weighted_kappa(const std::vector<std::pair<PNStage, PNStage>>& pairs) {
  if (pairs.empty()) throw Error(ErrorCode::kInvalidArgument, "kappa needs at least one pair");
  constexpr int kN = kStageCount;
  double observed[kN][kN] = {};
  double ref_marg[kN] = {};
  double pred_marg[kN] = {};
  for (const auto& [ref, pred] : pairs) {
    const int i = static_cast<int>(ref);
    const int j = static_cast<int>(pred);
    observed[i][j] += 1.0;
    ref_marg[i] += 1.0;
    pred_marg[j] += 1.0;
  }
  const double total = static_cast<double>(pairs.size());
  double num = 0.0;
  double den = 0.0;
  for (int i = 0; i < kN; ++i) {
    for (int j = 0; j < kN; ++j) {
      const double w = static_cast<double>((i - j) * (i - j)) / ((kN - 1) * (kN - 1));
      num += w * observed[i][j];
      den += w * ref_marg[i] * pred_marg[j] / total;
    }
  }
  if (den == 0.0) return num == 0.0 ? 1.0 : 0.0;
  return 1.0 - num / den;
}

ConfusionMatrix confusion_matrix(const std::vector<std::pair<NodeClass, NodeClass>>& pairs) {
  if (pairs.empty()) throw Error(ErrorCode::kInvalidArgument, "confusion matrix needs pairs");
  ConfusionMatrix m;
  for (const auto& [ref, pred] : pairs) ++m.counts[static_cast<int>(ref)][static_cast<int>(pred)];
  for (int i = 0; i < kNodeClassCount; ++i) {
    int row = 0;
    for (int j = 0; j < kNodeClassCount; ++j) row += m.counts[i][j];
    for (int j = 0; j < kNodeClassCount; ++j) {
      m.row_percent[i][j] = row > 0 ? 100.0 * m.counts[i][j] / row : 0.0;
    }
  }
  return m;
}

double accuracy(const std::vector<std::pair<NodeClass, NodeClass>>& pairs) {
  if (pairs.empty()) throw Error(ErrorCode::kInvalidArgument, "accuracy needs pairs");
  std::size_t ok = 0;
  for (const auto& [ref, pred] : pairs) ok += ref == pred ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(pairs.size());
}

}  // namespace pnstage
