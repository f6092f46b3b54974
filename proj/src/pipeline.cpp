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

#include "pnstage/pipeline.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <functional>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <thread>

#include "binary_io.h"
#include "csv.h"
#include "pnstage/error.h"
#include "pnstage/rng.h"
#include "pnstage/roi.h"
#include "pnstage/slide_io.h"

namespace pnstage {

namespace fs = std::filesystem;

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::kConfig: return "config";
    case Stage::kRoi: return "roi";
    case Stage::kHeatmap: return "heatmap";
    case Stage::kFeatures: return "features";
    case Stage::kForest: return "forest";
    case Stage::kStaging: return "staging";
    case Stage::kEval: return "eval";
    case Stage::kSynth: return "synth";
  }
  return "unknown";
}

int exit_code(Stage stage) {
  switch (stage) {
    case Stage::kConfig: return 2;
    case Stage::kRoi: return 10;
    case Stage::kHeatmap: return 11;
    case Stage::kFeatures: return 12;
    case Stage::kForest: return 13;
    case Stage::kStaging: return 14;
    case Stage::kEval: return 15;
    case Stage::kSynth: return 16;
  }
  return 1;
}

namespace {

// Runs body(i) for i in [0, n) on up to `workers` threads; rethrows the
// first failure by index so errors are reported deterministically.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& body) {
  const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

template <typename F>
auto in_stage(Stage stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

Cohort read_cohort(const fs::path& root) {
  const detail::CsvTable table = detail::read_csv(root / "slides.csv");
  const std::size_t cp = table.column("patient_id");
  const std::size_t cs = table.column("slide_id");
  std::optional<std::size_t> cc;
  for (std::size_t i = 0; i < table.header.size(); ++i) {
    if (table.header[i] == "class") cc = i;
  }
  Cohort cohort{root, {}};
  for (const auto& row : table.rows) {
    CohortSlide s{row[cp], row[cs], std::nullopt, root / "slides" / row[cs]};
    if (cc) s.reference = parse_node_class(row[*cc]);
    cohort.slides.push_back(std::move(s));
  }
  return cohort;
}

RadiusBand lesion_radius_band(NodeClass c) {
  switch (c) {
    case NodeClass::kItc: return {0.08, 0.11};
    case NodeClass::kMicro: return {0.17, 0.22};
    case NodeClass::kMacro: return {0.34, 0.45};
    case NodeClass::kNegative: break;
  }
  return {0.0, 0.0};
}

Cohort synth_cohort(const fs::path& root, const CohortSpec& spec, int workers) {
  double mix_total = 0.0;
  for (double m : spec.class_mix) {
    if (!std::isfinite(m) || m < 0.0) throw Error(ErrorCode::kBadMix, "class mix must be >= 0");
    mix_total += m;
  }
  if (!(mix_total > 0.0)) throw Error(ErrorCode::kBadMix, "class mix must not be all zero");
  if (spec.n_patients < 1) throw Error(ErrorCode::kInvalidArgument, "need at least one patient");
  if (!(spec.annotated_fraction >= 0.0 && spec.annotated_fraction <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "annotated fraction must lie in [0, 1]");
  }

  Rng rng(spec.seed);
  std::vector<SlideLabel> labels;
  std::vector<SyntheticSpec> slide_specs;
  const double side = std::min(spec.width0, spec.height0);
  for (int p = 0; p < spec.n_patients; ++p) {
    char pid[32];
    std::snprintf(pid, sizeof(pid), "patient_%03d", p);
    for (std::size_t n = 0; n < kSlidesPerPatient; ++n) {
      const std::string sid = std::string(pid) + "_node_" + std::to_string(n);
      double u = rng.uniform() * mix_total;
      int cls = 0;
      while (cls < kNodeClassCount - 1 && (u >= spec.class_mix[cls] || spec.class_mix[cls] == 0)) {
        u -= spec.class_mix[cls];
        ++cls;
      }
      while (spec.class_mix[cls] == 0) --cls;  // guard against rounding past the last class
      const auto node_class = static_cast<NodeClass>(cls);
      labels.push_back({pid, sid, node_class});

      SyntheticSpec s;
      s.id = sid;
      s.seed = rng.next_u64();
      s.width0 = spec.width0;
      s.height0 = spec.height0;
      s.tissue_blobs = 1 + static_cast<int>(rng.below(2));
      if (node_class != NodeClass::kNegative) {
        const RadiusBand band = lesion_radius_band(node_class);
        const double r = rng.uniform(band.lo, band.hi) * side;
        const double cx = rng.uniform(r, spec.width0 - r);
        const double cy = rng.uniform(r, spec.height0 - r);
        s.tumor_lesions.push_back({cx, cy, r});
      }
      slide_specs.push_back(std::move(s));
    }
  }

  // Lesion-level annotations for a share of the metastatic patients.
  const std::vector<PatientRecord> patients = group_by_patient(labels);
  std::vector<std::size_t> metastatic;
  for (std::size_t i = 0; i < patients.size(); ++i) {
    const auto& sl = patients[i].slides;
    if (std::any_of(sl.begin(), sl.end(), [](NodeClass c) { return c != NodeClass::kNegative; })) {
      metastatic.push_back(i);
    }
  }
  for (std::size_t i = metastatic.size(); i > 1; --i) std::swap(metastatic[i - 1], metastatic[rng.below(i)]);
  const auto want = static_cast<std::size_t>(std::lround(spec.annotated_fraction * spec.n_patients));
  std::set<std::string> annotated;
  for (std::size_t i = 0; i < std::min(want, metastatic.size()); ++i) {
    annotated.insert(patients[metastatic[i]].patient_id);
  }

  fs::create_directories(root / "slides");
  parallel_for(slide_specs.size(), workers, [&](std::size_t i) {
    write_synthetic_bundle(root / "slides" / slide_specs[i].id, slide_specs[i]);
  });

  write_slide_labels(root / "slides.csv", labels);
  write_stages(root / "stages.csv", stage_all(patients));
  std::ostringstream ann;
  ann << "patient_id,slide_id,lesion_annotation\n";
  for (const SlideLabel& l : labels) {
    const bool flag = annotated.count(l.patient_id) > 0 && l.node_class != NodeClass::kNegative;
    ann << l.patient_id << ',' << l.slide_id << ',' << (flag ? 1 : 0) << '\n';
  }
  detail::write_text(root / "annotations.csv", ann.str());
  return read_cohort(root);
}

fs::path mask_path(const fs::path& out, const std::string& slide_id) {
  return out / "masks" / (slide_id + ".tmsk");
}

fs::path heatmap_path(const fs::path& out, const std::string& slide_id) {
  return out / "heatmaps" / (slide_id + ".hmap");
}

void write_features_csv(const fs::path& file, const std::vector<SlideFeatures>& rows) {
  std::ostringstream out;
  out << "patient_id,slide_id";
  for (std::size_t i = 1; i <= kFeatureCount; ++i) out << ",f" << i;
  out << '\n';
  for (const SlideFeatures& r : rows) {
    out << r.patient_id << ',' << r.slide_id;
    for (double v : r.features) out << ',' << format_double(v);
    out << '\n';
  }
  detail::write_text(file, out.str());
}

std::vector<SlideFeatures> read_features_csv(const fs::path& file) {
  const detail::CsvTable table = detail::read_csv(file);
  const std::size_t cp = table.column("patient_id");
  const std::size_t cs = table.column("slide_id");
  std::array<std::size_t, kFeatureCount> cols{};
  for (std::size_t i = 0; i < kFeatureCount; ++i) cols[i] = table.column("f" + std::to_string(i + 1));
  std::vector<SlideFeatures> out;
  for (const auto& row : table.rows) {
    SlideFeatures f{row[cp], row[cs], {}};
    for (std::size_t i = 0; i < kFeatureCount; ++i) {
      char* end = nullptr;
      f.features[i] = std::strtod(row[cols[i]].c_str(), &end);
      if (end == row[cols[i]].c_str() || *end != '\0') {
        throw Error(ErrorCode::kInvalidArgument, "bad feature value '" + row[cols[i]] + "'");
      }
    }
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<LabeledSample> labeled_samples(const std::vector<SlideFeatures>& features,
                                           const std::vector<SlideLabel>& labels) {
  std::map<std::string, NodeClass> by_slide;
  for (const SlideLabel& l : labels) by_slide[l.slide_id] = l.node_class;
  std::vector<LabeledSample> out;
  for (const SlideFeatures& f : features) {
    const auto it = by_slide.find(f.slide_id);
    if (it == by_slide.end()) {
      throw Error(ErrorCode::kInvalidArgument, "no label for slide " + f.slide_id);
    }
    out.push_back({f.patient_id, f.slide_id, {f.features.begin(), f.features.end()}, it->second});
  }
  return out;
}

std::vector<SlideFeatures> compute_cohort_features(const Cohort& cohort,
                                                   const PipelineConfig& config) {
  const fs::path& out = config.paths.output;
  std::vector<SlideFeatures> rows(cohort.slides.size());
  const ExternalOptions ext{config.heatmap_batch,
                            std::chrono::milliseconds(config.scorer_timeout_ms)};
  parallel_for(cohort.slides.size(), config.workers, [&](std::size_t i) {
    const CohortSlide& slide = cohort.slides[i];
    const SlideBundle bundle =
        in_stage(Stage::kRoi, [&] { return SlideBundle::open(slide.bundle_dir); });

    const fs::path mpath = mask_path(out, slide.slide_id);
    const TissueMask tissue = in_stage(Stage::kRoi, [&] {
      if (!config.force && fs::exists(mpath)) return read_tissue_mask(mpath, slide.slide_id);
      TissueMask m = tissue_mask(bundle, config.roi_threshold);
      write_tissue_mask(mpath, m);
      return m;
    });

    const fs::path hpath = heatmap_path(out, slide.slide_id);
    const Heatmap hm = in_stage(Stage::kHeatmap, [&] {
      if (!config.force && fs::exists(hpath)) return read_heatmap(hpath, slide.slide_id);
      std::optional<BoolGrid> annotation;
      if (config.scorer.kind == ScorerSpec::Kind::kOracle) {
        annotation = read_mask_file(slide.bundle_dir / kAnnotationFile);
      }
      auto scorer = make_scorer(config.scorer, slide.slide_id,
                                annotation ? &*annotation : nullptr, ext);
      StitchOptions opts;
      opts.overlap = config.heatmap_overlap;
      opts.cell_size = config.heatmap_cell;
      opts.batch_size = config.heatmap_batch;
      Heatmap h = stitch_heatmap(bundle, tissue, *scorer, opts);
      write_heatmap(hpath, h);
      if (config.heatmap_png) {
        write_heatmap_png(out / "heatmaps" / (slide.slide_id + ".png"), h);
      }
      return h;
    });

    rows[i] = in_stage(Stage::kFeatures, [&] {
      const LevelInfo& l0 = bundle.level(0);
      const BoolGrid cells = heatmap_tissue(tissue, l0.width, l0.height, hm.cell_size);
      return SlideFeatures{slide.patient_id, slide.slide_id,
                           extract_features(hm, cells, config.postproc_t)};
    });
  });
  return rows;
}

namespace {

// Ground-truth lesion regions on the heatmap grid: connected groups of
// cells that contain annotated pixels.
std::vector<GroundTruthRegion> truth_regions(const std::string& slide_id, const BoolGrid& annot,
                                             int cell) {
  const int cw = (annot.width() + cell - 1) / cell;
  const int ch = (annot.height() + cell - 1) / cell;
  Heatmap cells{slide_id, cell, FloatGrid(cw, ch, 0.0f)};
  for (int y = 0; y < annot.height(); ++y) {
    for (int x = 0; x < annot.width(); ++x) {
      if (annot(x, y)) cells.grid(x / cell, y / cell) = 1.0f;
    }
  }
  std::vector<GroundTruthRegion> out;
  for (Region& r : threshold_regions(cells, 0.5)) out.push_back({slide_id, std::move(r.cells)});
  return out;
}

}  // namespace

RunReport run_pipeline(const PipelineConfig& config) {
  in_stage(Stage::kConfig, [&] { config.validate(); });
  const fs::path& out = config.paths.output;
  const Cohort cohort = in_stage(Stage::kConfig, [&] { return read_cohort(config.paths.cohort); });
  fs::create_directories(out);

  const std::vector<SlideFeatures> features = compute_cohort_features(cohort, config);
  in_stage(Stage::kFeatures, [&] { write_features_csv(out / "features.csv", features); });

  // Downstream outputs are rewritten from scratch; stale ones must not
  // survive a failed forest or staging step.
  for (const char* name : {"predictions.csv", "stages.csv", "report.json"}) fs::remove(out / name);

  RunReport report;
  std::vector<Prediction> predictions;
  in_stage(Stage::kForest, [&] {
    const ForestModel model = load_model(config.paths.model);
    std::ostringstream csv;
    csv << "patient_id,slide_id,class,p_negative,p_itc,p_micro,p_macro\n";
    for (const SlideFeatures& f : features) {
      const Prediction p = predict(model, f.features);
      predictions.push_back(p);
      report.predictions.push_back({f.patient_id, f.slide_id, p.node_class});
      csv << f.patient_id << ',' << f.slide_id << ',' << to_string(p.node_class);
      for (double v : p.probabilities) csv << ',' << format_double(v);
      csv << '\n';
    }
    detail::write_text(out / "predictions.csv", csv.str());
  });

  in_stage(Stage::kStaging, [&] {
    const StagingRules rules =
        config.paths.rules.empty() ? StagingRules::standard() : StagingRules::load(config.paths.rules);
    report.stages = stage_all(group_by_patient(report.predictions), rules);
    write_stages(out / "stages.csv", report.stages);
  });

  in_stage(Stage::kEval, [&] {
    nlohmann::ordered_json j;
    j["slides"] = cohort.slides.size();
    j["patients"] = report.stages.size();
    const bool labeled = std::all_of(cohort.slides.begin(), cohort.slides.end(),
                                     [](const CohortSlide& s) { return s.reference.has_value(); });
    if (labeled && !cohort.slides.empty()) {
      std::vector<std::pair<NodeClass, NodeClass>> pairs;
      std::vector<SlideLabel> reference;
      std::vector<ScoredSlide> scored;
      std::vector<LesionDetection> detections;
      std::vector<GroundTruthRegion> truth;
      int normal_slides = 0;
      for (std::size_t i = 0; i < cohort.slides.size(); ++i) {
        const CohortSlide& s = cohort.slides[i];
        pairs.emplace_back(*s.reference, report.predictions[i].node_class);
        reference.push_back({s.patient_id, s.slide_id, *s.reference});
        const bool tumor = *s.reference != NodeClass::kNegative;
        normal_slides += tumor ? 0 : 1;
        scored.push_back({s.slide_id, tumor, features[i].features[6]});
        const Heatmap hm = read_heatmap(heatmap_path(out, s.slide_id), s.slide_id);
        for (LesionDetection& d : detect_lesions(hm, config.postproc_t)) detections.push_back(std::move(d));
        const fs::path annot = s.bundle_dir / kAnnotationFile;
        if (tumor && fs::exists(annot)) {
          for (auto& r : truth_regions(s.slide_id, read_mask_file(annot), hm.cell_size)) {
            truth.push_back(std::move(r));
          }
        }
      }
      report.slide_accuracy = accuracy(pairs);
      j["slide_accuracy"] = *report.slide_accuracy;

      const StagingRules rules =
          config.paths.rules.empty() ? StagingRules::standard() : StagingRules::load(config.paths.rules);
      const auto ref_stages = stage_all(group_by_patient(reference), rules);
      std::vector<std::pair<PNStage, PNStage>> stage_pairs;
      for (const auto& [patient, stage] : ref_stages) {
        stage_pairs.emplace_back(stage, report.stages.at(patient));
      }
      report.kappa = quadratic_weighted_kappa(stage_pairs);
      j["kappa"] = *report.kappa;

      const ConfusionMatrix cm = confusion_matrix(pairs);
      j["confusion"]["counts"] = cm.counts;
      j["confusion"]["row_percent"] = cm.row_percent;

      const bool both = normal_slides > 0 && normal_slides < static_cast<int>(scored.size());
      j["auc"] = both ? nlohmann::ordered_json(auc(scored)) : nlohmann::ordered_json(nullptr);
      if (!truth.empty()) {
        const FrocResult fr =
            froc(detections, truth, std::max(normal_slides, 1), config.froc_points);
        j["froc"]["score"] = fr.score;
        j["froc"]["fp_points"] = config.froc_points;
        j["froc"]["sensitivity"] = fr.sensitivity_at_points;
        auto curve = nlohmann::ordered_json::array();
        for (const FrocPoint& p : fr.curve) {
          curve.push_back({{"threshold", p.threshold},
                           {"fps_per_slide", p.fps_per_slide},
                           {"sensitivity", p.sensitivity}});
        }
        j["froc"]["curve"] = std::move(curve);
      } else {
        j["froc"] = nullptr;
      }
    }
    detail::write_text(out / "report.json", j.dump(2) + "\n");
  });
  return report;
}

}  // namespace pnstage
