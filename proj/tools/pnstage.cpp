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

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pnstage/config.h"
#include "pnstage/error.h"
#include "pnstage/forest.h"
#include "pnstage/heatmap.h"
#include "pnstage/metrics.h"
#include "pnstage/patches.h"
#include "pnstage/pipeline.h"
#include "pnstage/roi.h"
#include "pnstage/scoring.h"
#include "pnstage/slide_io.h"
#include "pnstage/staging.h"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace pnstage;

namespace {

void write_json(const std::optional<fs::path>& out, const json& j) {
  const std::string text = j.dump(2) + "\n";
  if (!out) {
    std::cout << text;
    return;
  }
  if (out->has_parent_path()) fs::create_directories(out->parent_path());
  std::ofstream f(*out, std::ios::binary);
  f << text;
  if (!f) throw Error(ErrorCode::kIo, "cannot write " + out->string());
}

std::string slurp(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_predictions(const fs::path& file, const std::vector<SlideFeatures>& rows,
                       const std::vector<Prediction>& preds) {
  std::ostringstream out;
  out << "patient_id,slide_id,class,p_negative,p_itc,p_micro,p_macro\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << rows[i].patient_id << ',' << rows[i].slide_id << ',' << to_string(preds[i].node_class);
    for (double p : preds[i].probabilities) out << ',' << g17(p);
    out << '\n';
  }
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream f(file, std::ios::binary);
  f << out.str();
  if (!f) throw Error(ErrorCode::kIo, "cannot write " + file.string());
}

std::vector<LabeledSample> load_samples(const fs::path& features, const fs::path& labels) {
  return labeled_samples(read_features_csv(features), read_slide_labels(labels));
}


}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pN-stage prediction pipeline"};
  app.require_subcommand(1);
  const int env_workers = workers_from_env(1);

  // Each subcommand registers the stage its failures are reported under.
  std::map<const CLI::App*, Stage> stage_of;
  std::function<void()> action;
  auto command = [&](const char* name, const char* help, Stage stage) {
    CLI::App* sub = app.add_subcommand(name, help);
    stage_of[sub] = stage;
    return sub;
  };

  // roi
  fs::path roi_bundle, roi_out;
  double roi_threshold = kDefaultTissueThreshold;
  auto* roi = command("roi", "Tissue mask at level 5", Stage::kRoi);
  roi->add_option("--bundle", roi_bundle, "Slide bundle directory")->required();
  roi->add_option("--threshold", roi_threshold, "Gray threshold, tissue = gray < t");
  roi->add_option("--out", roi_out, "Mask file (TMSK)")->required();
  roi->callback([&] {
    action = [&] {
      const SlideBundle bundle = SlideBundle::open(roi_bundle);
      write_tissue_mask(roi_out, tissue_mask(bundle, roi_threshold));
    };
  });

  // patches
  fs::path pt_bundle, pt_mask, pt_out;
  std::optional<fs::path> pt_annot;
  auto* patches = command("patches", "Enumerate labeled patches", Stage::kRoi);
  patches->add_option("--bundle", pt_bundle)->required();
  patches->add_option("--mask", pt_mask)->required();
  patches->add_option("--annot", pt_annot, "Level-0 annotation mask (TMSK)");
  patches->add_option("--out", pt_out, "JSONL output")->required();
  patches->callback([&] {
    action = [&] {
      const SlideBundle bundle = SlideBundle::open(pt_bundle);
      const TissueMask tissue = read_tissue_mask(pt_mask, bundle.id());
      std::optional<AnnotationMask> annot;
      if (pt_annot) annot = AnnotationMask{bundle.id(), 0, read_mask_file(*pt_annot)};
      write_patches_jsonl(pt_out, enumerate_patches(bundle, tissue, annot ? &*annot : nullptr));
    };
  });

  // sample
  std::vector<fs::path> sm_in;
  fs::path sm_out;
  std::size_t sm_n = 0;
  std::uint64_t sm_seed = 0;
  bool sm_normal_only = false;
  auto* sample = command("sample", "Balanced tumor/normal patch sample", Stage::kRoi);
  sample->add_option("--in", sm_in, "Patch JSONL files")->required();
  sample->add_option("--n", sm_n, "Sample size (even)")->required();
  sample->add_option("--seed", sm_seed)->required();
  sample->add_flag("--normals-from-normal-slides-only", sm_normal_only);
  sample->add_option("--out", sm_out)->required();
  sample->callback([&] {
    action = [&] {
      std::map<std::string, std::vector<PatchRef>> by_slide;
      for (const fs::path& f : sm_in) {
        for (PatchRef& r : read_patches_jsonl(f)) by_slide[r.slide_id].push_back(std::move(r));
      }
      SamplingOptions opts;
      opts.normals_from_tumor_slides = !sm_normal_only;
      write_patches_jsonl(sm_out, balanced_sample(by_slide, sm_n, sm_seed, opts));
    };
  });

  // heatmap
  fs::path hm_bundle, hm_mask, hm_out;
  std::vector<fs::path> hm_ensemble;
  std::optional<fs::path> hm_annot, hm_png;
  std::string hm_scorer = "constant:0.5", hm_overlap = "half";
  std::size_t hm_batch = 32;
  int hm_timeout_ms = 60'000;
  auto* heatmap = command("heatmap", "Overlap-tile heatmap from a patch scorer", Stage::kHeatmap);
  heatmap->add_option("--bundle", hm_bundle);
  heatmap->add_option("--mask", hm_mask);
  heatmap->add_option("--annot", hm_annot, "Annotation mask for the oracle scorer");
  heatmap->add_option("--scorer", hm_scorer, "constant:<v> | oracle:<sigma>[:<seed>] | external:<cmd>");
  heatmap->add_option("--overlap", hm_overlap)->check(CLI::IsMember({"none", "half"}));
  heatmap->add_option("--batch", hm_batch);
  heatmap->add_option("--timeout-ms", hm_timeout_ms);
  heatmap->add_option("--ensemble", hm_ensemble, "Average these heatmap files instead of scoring");
  heatmap->add_option("--png", hm_png, "Also write a grayscale PNG");
  heatmap->add_option("--out", hm_out)->required();
  heatmap->callback([&] {
    action = [&] {
      Heatmap hm;
      if (!hm_ensemble.empty()) {
        std::vector<Heatmap> parts;
        for (const fs::path& f : hm_ensemble) parts.push_back(read_heatmap(f));
        hm = average_heatmaps(parts);
      } else {
        if (hm_bundle.empty() || hm_mask.empty()) {
          throw Error(ErrorCode::kInvalidArgument, "--bundle and --mask are required without --ensemble");
        }
        const SlideBundle bundle = SlideBundle::open(hm_bundle);
        const TissueMask tissue = read_tissue_mask(hm_mask, bundle.id());
        std::optional<BoolGrid> annot;
        if (hm_annot) annot = read_mask_file(*hm_annot);
        auto scorer = make_scorer(ScorerSpec::parse(hm_scorer), bundle.id(),
                                  annot ? &*annot : nullptr,
                                  {hm_batch, std::chrono::milliseconds(hm_timeout_ms)});
        StitchOptions opts;
        opts.overlap = parse_overlap(hm_overlap);
        opts.batch_size = hm_batch;
        hm = stitch_heatmap(bundle, tissue, *scorer, opts);
      }
      write_heatmap(hm_out, hm);
      if (hm_png) write_heatmap_png(*hm_png, hm);
    };
  });

  // features
  fs::path ft_heatmap, ft_mask, ft_bundle, ft_out;
  std::string ft_patient;
  double ft_t = kRegionThreshold;
  bool ft_append = false;
  auto* features = command("features", "Heatmap features f1..f11 for one slide", Stage::kFeatures);
  features->add_option("--heatmap", ft_heatmap)->required();
  features->add_option("--mask", ft_mask)->required();
  features->add_option("--bundle", ft_bundle, "Bundle, for level-0 dimensions")->required();
  features->add_option("--patient", ft_patient);
  features->add_option("--t", ft_t, "Region threshold");
  features->add_flag("--append", ft_append, "Append to an existing features CSV");
  features->add_option("--out", ft_out)->required();
  features->callback([&] {
    action = [&] {
      const SlideBundle bundle = SlideBundle::open(ft_bundle);
      const Heatmap hm = read_heatmap(ft_heatmap, bundle.id());
      const TissueMask tissue = read_tissue_mask(ft_mask, bundle.id());
      const LevelInfo& l0 = bundle.level(0);
      const BoolGrid cells = heatmap_tissue(tissue, l0.width, l0.height, hm.cell_size);
      std::vector<SlideFeatures> rows;
      if (ft_append && fs::exists(ft_out)) rows = read_features_csv(ft_out);
      rows.push_back({ft_patient, bundle.id(), extract_features(hm, cells, ft_t)});
      write_features_csv(ft_out, rows);
    };
  });

  // forest options shared by train-rf and cv
  ForestParams forest;
  std::optional<int> max_depth;
  std::uint64_t rf_seed = 42;
  auto add_forest_options = [&](CLI::App* sub) {
    sub->add_option("--trees", forest.n_trees);
    sub->add_option("--max-depth", max_depth);
    sub->add_option("--min-samples-leaf", forest.min_samples_leaf);
    sub->add_option("--features-per-split", forest.features_per_split);
    sub->add_flag("--balanced", forest.balanced_class_weight);
    sub->add_option("--seed", rf_seed);
  };
  fs::path rf_features, rf_labels, rf_out;

  auto* train = command("train-rf", "Train the node-class random forest", Stage::kForest);
  train->add_option("--features", rf_features)->required();
  train->add_option("--labels", rf_labels, "slides.csv with a class column")->required();
  train->add_option("--out", rf_out)->required();
  add_forest_options(train);
  train->callback([&] {
    action = [&] {
      forest.max_depth = max_depth;
      const auto samples = load_samples(rf_features, rf_labels);
      save_model(rf_out, train_forest(samples, forest, rf_seed, env_workers));
    };
  });

  int cv_k = 5;
  std::optional<fs::path> cv_out, cv_predictions;
  auto* cv = command("cv", "Patient-grouped k-fold cross-validation", Stage::kForest);
  cv->add_option("--features", rf_features)->required();
  cv->add_option("--labels", rf_labels)->required();
  cv->add_option("--k", cv_k);
  cv->add_option("--out", cv_out, "JSON report (stdout if omitted)");
  cv->add_option("--predictions", cv_predictions, "Out-of-fold predictions CSV");
  add_forest_options(cv);
  cv->callback([&] {
    action = [&] {
      forest.max_depth = max_depth;
      const auto rows = read_features_csv(rf_features);
      const auto labels = read_slide_labels(rf_labels);
      const auto samples = labeled_samples(rows, labels);
      const CvResult r = cross_validate(samples, cv_k, forest, rf_seed, env_workers);
      std::vector<std::pair<NodeClass, NodeClass>> pairs;
      std::vector<SlideLabel> predicted;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        pairs.emplace_back(samples[i].label, r.predictions[i].node_class);
        predicted.push_back({samples[i].patient_id, samples[i].slide_id, r.predictions[i].node_class});
      }
      std::vector<SlideLabel> reference;
      for (const auto& s : samples) reference.push_back({s.patient_id, s.slide_id, s.label});
      const auto ref_stages = stage_all(group_by_patient(reference));
      const auto pred_stages = stage_all(group_by_patient(predicted));
      std::vector<std::pair<PNStage, PNStage>> stage_pairs;
      for (const auto& [p, s] : ref_stages) stage_pairs.emplace_back(s, pred_stages.at(p));

      json j;
      j["k"] = cv_k;
      j["seed"] = rf_seed;
      j["fold_accuracy"] = r.fold_accuracy;
      j["mean_accuracy"] = r.mean_accuracy;
      j["slide_accuracy"] = accuracy(pairs);
      j["patient_kappa"] = quadratic_weighted_kappa(stage_pairs);
      write_json(cv_out, j);
      if (cv_predictions) write_predictions(*cv_predictions, rows, r.predictions);
    };
  });

  fs::path pr_model, pr_features, pr_out;
  auto* pred = command("predict-rf", "Predict node classes from features", Stage::kForest);
  pred->add_option("--model", pr_model)->required();
  pred->add_option("--features", pr_features)->required();
  pred->add_option("--out", pr_out)->required();
  pred->callback([&] {
    action = [&] {
      const ForestModel model = load_model(pr_model);
      const auto rows = read_features_csv(pr_features);
      std::vector<Prediction> preds;
      for (const auto& r : rows) preds.push_back(predict(model, r.features));
      write_predictions(pr_out, rows, preds);
    };
  });

  // stage
  fs::path st_in, st_out;
  std::optional<fs::path> st_rules;
  auto* stage_cmd = command("stage", "Patient pN-stage from slide classes", Stage::kStaging);
  stage_cmd->add_option("--in", st_in, "patient_id,slide_id,class CSV")->required();
  stage_cmd->add_option("--rules", st_rules, "Rule table CSV (built-in table if omitted)");
  stage_cmd->add_option("--out", st_out)->required();
  stage_cmd->callback([&] {
    action = [&] {
      const StagingRules rules = st_rules ? StagingRules::load(*st_rules) : StagingRules::standard();
      write_stages(st_out, stage_all(group_by_patient(read_slide_labels(st_in)), rules));
    };
  });

  // eval
  std::string ev_task;
  fs::path ev_reference;
  std::optional<fs::path> ev_predicted, ev_scores, ev_cohort, ev_heatmaps, ev_out;
  std::vector<double> ev_points = kDefaultFrocPoints;
  double ev_t = kRegionThreshold;
  auto* eval = command("eval", "Evaluation metrics as JSON", Stage::kEval);
  eval->add_option("--task", ev_task)->required()->check(
      CLI::IsMember({"auc", "froc", "kappa", "confusion"}));
  eval->add_option("--reference", ev_reference,
                   "Reference slides.csv (auc, froc, confusion) or stages.csv (kappa)")
      ->required();
  eval->add_option("--predicted", ev_predicted, "Predicted slides or stages CSV");
  eval->add_option("--scores", ev_scores, "Features CSV; f7 (max probability) is the slide score");
  eval->add_option("--cohort", ev_cohort, "Cohort root with annotation masks (froc)");
  eval->add_option("--heatmaps", ev_heatmaps, "Directory of <slide_id>.hmap (froc)");
  eval->add_option("--points", ev_points, "FP/slide operating points (froc)");
  eval->add_option("--t", ev_t, "Detection threshold (froc)");
  eval->add_option("--out", ev_out, "JSON output (stdout if omitted)");
  eval->callback([&] {
    action = [&] {
      auto need = [](const std::optional<fs::path>& p, const char* flag) -> const fs::path& {
        if (!p) throw Error(ErrorCode::kInvalidArgument, std::string(flag) + " is required for this task");
        return *p;
      };
      json j;
      j["task"] = ev_task;
      if (ev_task == "kappa") {
        const auto ref = read_stages(ev_reference);
        const auto pr = read_stages(need(ev_predicted, "--predicted"));
        std::vector<std::pair<PNStage, PNStage>> pairs;
        for (const auto& [p, s] : ref) {
          const auto it = pr.find(p);
          if (it == pr.end()) throw Error(ErrorCode::kInvalidArgument, "no prediction for " + p);
          pairs.emplace_back(s, it->second);
        }
        j["patients"] = pairs.size();
        j["kappa"] = quadratic_weighted_kappa(pairs);
      } else if (ev_task == "confusion") {
        std::map<std::string, NodeClass> pr;
        for (const auto& l : read_slide_labels(need(ev_predicted, "--predicted"))) pr[l.slide_id] = l.node_class;
        std::vector<std::pair<NodeClass, NodeClass>> pairs;
        for (const auto& l : read_slide_labels(ev_reference)) {
          const auto it = pr.find(l.slide_id);
          if (it == pr.end()) throw Error(ErrorCode::kInvalidArgument, "no prediction for " + l.slide_id);
          pairs.emplace_back(l.node_class, it->second);
        }
        const ConfusionMatrix cm = confusion_matrix(pairs);
        std::vector<std::string> names;
        for (int c = 0; c < kNodeClassCount; ++c) names.emplace_back(to_string(static_cast<NodeClass>(c)));
        j["classes"] = names;
        j["counts"] = cm.counts;
        j["row_percent"] = cm.row_percent;
        j["accuracy"] = accuracy(pairs);
      } else if (ev_task == "auc") {
        std::map<std::string, double> score;
        for (const auto& f : read_features_csv(need(ev_scores, "--scores"))) score[f.slide_id] = f.features[6];
        std::vector<ScoredSlide> slides;
        for (const auto& l : read_slide_labels(ev_reference)) {
          const auto it = score.find(l.slide_id);
          if (it == score.end()) throw Error(ErrorCode::kInvalidArgument, "no score for " + l.slide_id);
          slides.push_back({l.slide_id, l.node_class != NodeClass::kNegative, it->second});
        }
        j["slides"] = slides.size();
        j["auc"] = auc(slides);
      } else {
        const fs::path& cohort = need(ev_cohort, "--cohort");
        const fs::path& dir = need(ev_heatmaps, "--heatmaps");
        std::vector<LesionDetection> dets;
        std::vector<GroundTruthRegion> truth;
        int normals = 0;
        for (const auto& l : read_slide_labels(ev_reference)) {
          const Heatmap hm = read_heatmap(dir / (l.slide_id + ".hmap"), l.slide_id);
          for (auto& d : detect_lesions(hm, ev_t)) dets.push_back(std::move(d));
          if (l.node_class == NodeClass::kNegative) {
            ++normals;
            continue;
          }
          const fs::path annot = cohort / "slides" / l.slide_id / kAnnotationFile;
          if (!fs::exists(annot)) continue;
          const BoolGrid mask = read_mask_file(annot);
          Heatmap cells{l.slide_id, hm.cell_size, FloatGrid(hm.grid.width(), hm.grid.height(), 0.0f)};
          for (int y = 0; y < mask.height(); ++y) {
            for (int x = 0; x < mask.width(); ++x) {
              if (mask(x, y)) cells.grid(x / hm.cell_size, y / hm.cell_size) = 1.0f;
            }
          }
          for (Region& r : threshold_regions(cells, 0.5)) truth.push_back({l.slide_id, std::move(r.cells)});
        }
        const FrocResult fr = froc(dets, truth, normals, ev_points);
        j["fp_points"] = ev_points;
        j["sensitivity"] = fr.sensitivity_at_points;
        j["score"] = fr.score;
        json curve = json::array();
        for (const FrocPoint& p : fr.curve) {
          curve.push_back({{"threshold", p.threshold},
                           {"fps_per_slide", p.fps_per_slide},
                           {"sensitivity", p.sensitivity}});
        }
        j["curve"] = std::move(curve);
      }
      write_json(ev_out, j);
    };
  });

  // run
  std::optional<fs::path> run_config;
  std::vector<std::string> run_set;
  bool run_force = false;
  auto* run = command("run", "roi -> heatmap -> features -> forest -> stage -> eval", Stage::kConfig);
  run->add_option("--config", run_config, "TOML config file");
  run->add_option("--set", run_set, "Override, e.g. --set heatmap.overlap=\"none\"");
  run->add_flag("--force", run_force, "Recompute per-slide masks and heatmaps");
  run->callback([&] {
    action = [&] {
      PipelineConfig config;
      try {
        config = run_config ? PipelineConfig::load(*run_config) : PipelineConfig{};
        config.workers = workers_from_env(config.workers);
        config.apply_overrides(run_set);
        if (run_force) config.force = true;
        config.validate();
      } catch (const std::exception& e) {
        throw StageError(Stage::kConfig, e.what());
      }
      const RunReport report = run_pipeline(config);
      std::cout << "slides " << report.predictions.size() << ", patients " << report.stages.size();
      if (report.slide_accuracy) std::cout << ", slide accuracy " << *report.slide_accuracy;
      if (report.kappa) std::cout << ", kappa " << *report.kappa;
      std::cout << "\n";
    };
  });

  // synth-cohort
  CohortSpec cs;
  fs::path cs_out;
  std::vector<double> cs_mix;
  auto* synth = command("synth-cohort", "Generate a synthetic patient cohort", Stage::kSynth);
  synth->add_option("--out", cs_out)->required();
  synth->add_option("--patients", cs.n_patients);
  synth->add_option("--mix", cs_mix, "negative,itc,micro,macro proportions")->delimiter(',')->expected(4);
  synth->add_option("--seed", cs.seed);
  synth->add_option("--width", cs.width0);
  synth->add_option("--height", cs.height0);
  synth->add_option("--annotated-fraction", cs.annotated_fraction);
  synth->callback([&] {
    action = [&] {
      if (!cs_mix.empty()) std::copy(cs_mix.begin(), cs_mix.end(), cs.class_mix.begin());
      const Cohort c = synth_cohort(cs_out, cs, env_workers);
      std::cout << "wrote " << c.slides.size() << " slides to " << cs_out.string() << "\n";
    };
  });

  CLI11_PARSE(app, argc, argv);

  Stage stage = Stage::kConfig;
  for (const CLI::App* sub : app.get_subcommands()) stage = stage_of.at(sub);
  try {
    action();
  } catch (const StageError& e) {
    std::cerr << "pnstage: " << e.what() << "\n";
    return exit_code(e.stage());
  } catch (const std::exception& e) {
    std::cerr << "pnstage: " << to_string(stage) << " stage: " << e.what() << "\n";
    return exit_code(stage);
  }
  return 0;
}
