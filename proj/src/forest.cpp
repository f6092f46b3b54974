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

#include "pnstage/forest.h"

#include <algorithm>
#include <cmath>
#include <exception>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <thread>

#include "binary_io.h"
#include "pnstage/error.h"
#include "pnstage/rng.h"

namespace pnstage {

namespace {

constexpr const char* kModelFormat = "pnstage-forest";
constexpr int kModelVersion = 1;
constexpr double kMinImpurityDecrease = 1e-12;

ClassDistribution normalized(const ClassDistribution& w) {
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  ClassDistribution out{};
  if (total <= 0.0) return out;
  for (int c = 0; c < kNodeClassCount; ++c) out[c] = w[c] / total;
  return out;
}

class TreeBuilder {
 public:
  TreeBuilder(std::span<const LabeledSample> samples, std::span<const double> class_weight,
              const ForestParams& params, int feature_count, Rng& rng)
      : samples_(samples),
        class_weight_(class_weight),
        params_(params),
        feature_count_(feature_count),
        rng_(rng) {}

  DecisionTree build() {
    // Bootstrap: n draws with replacement, kept as per-sample multiplicity.
    const std::size_t n = samples_.size();
    draws_.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) ++draws_[rng_.below(n)];
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i) {
      if (draws_[i] > 0) idx.push_back(i);
    }
    DecisionTree tree;
    tree_ = &tree;
    grow(idx, 0);
    return tree;
  }

 private:
  double weight(std::size_t i) const {
    return draws_[i] * class_weight_[static_cast<int>(samples_[i].label)];
  }

  int grow(std::vector<std::size_t>& idx, int depth) {
    ClassDistribution w{};
    long draws = 0;
    for (std::size_t i : idx) {
      w[static_cast<int>(samples_[i].label)] += weight(i);
      draws += draws_[i];
    }
    const int node = static_cast<int>(tree_->nodes.size());
    tree_->nodes.push_back({});
    tree_->nodes[node].distribution = normalized(w);

    const double parent_gini = gini_impurity(w);
    const bool depth_ok = !params_.max_depth || depth < *params_.max_depth;
    if (parent_gini <= 0.0 || !depth_ok || draws < 2L * params_.min_samples_leaf) return node;

    // Candidate features, visited in ascending index order for tie-breaks.
    std::vector<int> features(static_cast<std::size_t>(feature_count_));
    std::iota(features.begin(), features.end(), 0);
    const int take = std::min(params_.features_per_split, feature_count_);
    for (int i = 0; i < take; ++i) {
      const auto j = static_cast<std::size_t>(i) + rng_.below(features.size() - i);
      std::swap(features[static_cast<std::size_t>(i)], features[j]);
    }
    features.resize(static_cast<std::size_t>(take));
    std::sort(features.begin(), features.end());

    double best_impurity = parent_gini - kMinImpurityDecrease;
    int best_feature = -1;
    double best_threshold = 0.0;
    const double total_w = std::accumulate(w.begin(), w.end(), 0.0);
    std::vector<std::size_t> order = idx;
    for (int f : features) {
      auto value = [&](std::size_t i) { return samples_[i].features[static_cast<std::size_t>(f)]; };
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return value(a) != value(b) ? value(a) < value(b) : a < b;
      });
      ClassDistribution left{};
      long left_draws = 0;
      for (std::size_t p = 0; p + 1 < order.size(); ++p) {
        left[static_cast<int>(samples_[order[p]].label)] += weight(order[p]);
        left_draws += draws_[order[p]];
        const double a = value(order[p]);
        const double b = value(order[p + 1]);
        if (!(a < b)) continue;
        if (left_draws < params_.min_samples_leaf ||
            draws - left_draws < params_.min_samples_leaf) {
          continue;
        }
        ClassDistribution right{};
        for (int c = 0; c < kNodeClassCount; ++c) right[c] = w[c] - left[c];
        const double wl = std::accumulate(left.begin(), left.end(), 0.0);
        const double wr = total_w - wl;
        const double impurity = (wl * gini_impurity(left) + wr * gini_impurity(right)) / total_w;
        if (impurity < best_impurity) {
          double t = a + (b - a) / 2.0;
          if (!(t < b)) t = a;
          best_impurity = impurity;
          best_feature = f;
          best_threshold = t;
        }
      }
    }
    if (best_feature < 0) return node;

    std::vector<std::size_t> left_idx;
    std::vector<std::size_t> right_idx;
    for (std::size_t i : idx) {
      (samples_[i].features[static_cast<std::size_t>(best_feature)] <= best_threshold ? left_idx
                                                                                       : right_idx)
          .push_back(i);
    }
    idx.clear();
    idx.shrink_to_fit();
    tree_->nodes[node].feature = best_feature;
    tree_->nodes[node].threshold = best_threshold;
    const int l = grow(left_idx, depth + 1);
    const int r = grow(right_idx, depth + 1);
    tree_->nodes[node].left = l;
    tree_->nodes[node].right = r;
    return node;
  }

  std::span<const LabeledSample> samples_;
  std::span<const double> class_weight_;
  const ForestParams& params_;
  int feature_count_;
  Rng& rng_;
  std::vector<long> draws_;
  DecisionTree* tree_ = nullptr;
};

void check_params(const ForestParams& p) {
  if (p.n_trees < 1 || p.min_samples_leaf < 1 || p.features_per_split < 1 ||
      (p.max_depth && *p.max_depth < 0)) {
    throw Error(ErrorCode::kInvalidArgument, "invalid forest hyperparameters");
  }
}

}  // namespace

double gini_impurity(std::span<const double> class_weights) {
  const double total = std::accumulate(class_weights.begin(), class_weights.end(), 0.0);
  if (total <= 0.0) return 0.0;
  double sq = 0.0;
  for (double w : class_weights) sq += (w / total) * (w / total);
  return std::max(0.0, 1.0 - sq);
}

const ClassDistribution& DecisionTree::leaf_for(std::span<const double> features) const {
  std::size_t i = 0;
  while (nodes[i].feature >= 0) {
    const TreeNode& n = nodes[i];
    i = static_cast<std::size_t>(features[static_cast<std::size_t>(n.feature)] <= n.threshold
                                     ? n.left
                                     : n.right);
  }
  return nodes[i].distribution;
}

ForestModel train_forest(std::span<const LabeledSample> samples, const ForestParams& params,
                         std::uint64_t seed, int workers) {
  check_params(params);
  if (samples.empty()) throw Error(ErrorCode::kEmptyTrainingSet, "no training samples");
  const std::size_t dim = samples.front().features.size();
  if (dim == 0) throw Error(ErrorCode::kDimensionMismatch, "samples have no features");
  for (const LabeledSample& s : samples) {
    if (s.features.size() != dim) {
      throw Error(ErrorCode::kDimensionMismatch, "samples disagree on feature count");
    }
    for (double v : s.features) {
      if (!std::isfinite(v)) throw Error(ErrorCode::kInvalidArgument, "non-finite feature value");
    }
  }

  ForestModel model;
  model.feature_count = static_cast<int>(dim);
  model.seed = seed;
  model.params = params;

  std::array<std::size_t, kNodeClassCount> class_count{};
  for (const LabeledSample& s : samples) ++class_count[static_cast<int>(s.label)];
  const auto distinct = std::count_if(class_count.begin(), class_count.end(),
                                      [](std::size_t c) { return c > 0; });
  if (samples.size() < 2 || distinct < 2) {
    std::clog << "warning: training set has " << samples.size() << " sample(s) and " << distinct
              << " class(es); returning a constant model\n";
    ClassDistribution w{};
    for (int c = 0; c < kNodeClassCount; ++c) w[c] = static_cast<double>(class_count[c]);
    DecisionTree leaf;
    leaf.nodes.push_back({-1, 0.0, -1, -1, normalized(w)});
    model.trees.push_back(std::move(leaf));
    return model;
  }

  std::array<double, kNodeClassCount> class_weight{1.0, 1.0, 1.0, 1.0};
  if (params.balanced_class_weight) {
    for (int c = 0; c < kNodeClassCount; ++c) {
      class_weight[c] = class_count[c] > 0 ? static_cast<double>(samples.size()) /
                                                 (distinct * static_cast<double>(class_count[c]))
                                           : 0.0;
    }
  }

  model.trees.resize(static_cast<std::size_t>(params.n_trees));
  auto build_tree = [&](std::size_t t) {
    Rng rng(mix_seed(seed, t));
    TreeBuilder builder(samples, class_weight, params, model.feature_count, rng);
    model.trees[t] = builder.build();
  };
  const std::size_t n_workers =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), 1, model.trees.size());
  if (n_workers == 1) {
    for (std::size_t t = 0; t < model.trees.size(); ++t) build_tree(t);
  } else {
    std::vector<std::exception_ptr> errors(n_workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t t = w; t < model.trees.size(); t += n_workers) build_tree(t);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  return model;
}

Prediction predict(const ForestModel& model, std::span<const double> features) {
  if (static_cast<int>(features.size()) != model.feature_count) {
    throw Error(ErrorCode::kDimensionMismatch,
                "model expects " + std::to_string(model.feature_count) + " features, got " +
                    std::to_string(features.size()));
  }
  if (model.trees.empty()) throw Error(ErrorCode::kCorruptModel, "model has no trees");
  Prediction p;
  for (const DecisionTree& tree : model.trees) {
    const ClassDistribution& d = tree.leaf_for(features);
    for (int c = 0; c < kNodeClassCount; ++c) p.probabilities[c] += d[c];
  }
  for (double& v : p.probabilities) v /= static_cast<double>(model.trees.size());
  int best = 0;
  for (int c = 1; c < kNodeClassCount; ++c) {
    if (p.probabilities[c] > p.probabilities[best]) best = c;
  }
  p.node_class = static_cast<NodeClass>(best);
  return p;
}

std::vector<std::vector<std::string>> patient_folds(std::span<const LabeledSample> samples, int k,
                                                    std::uint64_t seed) {
  if (k < 2) throw Error(ErrorCode::kInvalidArgument, "cross-validation needs k >= 2");
  std::map<std::string, int> severity;
  for (const LabeledSample& s : samples) {
    int& v = severity.try_emplace(s.patient_id, 0).first->second;
    v = std::max(v, static_cast<int>(s.label));
  }
  if (static_cast<int>(severity.size()) < k) {
    throw Error(ErrorCode::kTooFewPatients, "k = " + std::to_string(k) + " exceeds the " +
                                                std::to_string(severity.size()) + " patients");
  }
  std::array<std::vector<std::string>, kNodeClassCount> strata;
  for (const auto& [patient, sev] : severity) strata[static_cast<std::size_t>(sev)].push_back(patient);

  Rng rng(seed);
  std::vector<std::vector<std::string>> folds(static_cast<std::size_t>(k));
  std::size_t next = 0;
  for (auto& stratum : strata) {
    for (std::size_t i = stratum.size(); i > 1; --i) {
      std::swap(stratum[i - 1], stratum[rng.below(i)]);
    }
    for (const std::string& p : stratum) {
      folds[next % static_cast<std::size_t>(k)].push_back(p);
      ++next;
    }
  }
  return folds;
}

CvResult cross_validate(std::span<const LabeledSample> samples, int k, const ForestParams& params,
                        std::uint64_t seed, int workers) {
  if (samples.empty()) throw Error(ErrorCode::kEmptyTrainingSet, "no samples to cross-validate");
  const auto folds = patient_folds(samples, k, seed);
  std::map<std::string, int> fold_of_patient;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    for (const std::string& p : folds[f]) fold_of_patient[p] = static_cast<int>(f);
  }

  CvResult result;
  result.fold_of_sample.resize(samples.size());
  result.predictions.resize(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    result.fold_of_sample[i] = fold_of_patient.at(samples[i].patient_id);
  }
  for (int f = 0; f < k; ++f) {
    std::vector<LabeledSample> train;
    std::vector<std::size_t> held_out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (result.fold_of_sample[i] == f) {
        held_out.push_back(i);
      } else {
        train.push_back(samples[i]);
      }
    }
    if (train.empty()) throw Error(ErrorCode::kTooFewPatients, "a fold left no training data");
    const ForestModel model =
        train_forest(train, params, mix_seed(seed, static_cast<std::uint64_t>(f) + 1), workers);
    std::size_t correct = 0;
    for (std::size_t i : held_out) {
      result.predictions[i] = predict(model, samples[i].features);
      correct += result.predictions[i].node_class == samples[i].label ? 1 : 0;
    }
    result.fold_accuracy.push_back(
        held_out.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(held_out.size()));
  }
  result.mean_accuracy =
      std::accumulate(result.fold_accuracy.begin(), result.fold_accuracy.end(), 0.0) / k;
  return result;
}

std::string serialize_model(const ForestModel& model) {
  nlohmann::ordered_json j;
  j["format"] = kModelFormat;
  j["version"] = kModelVersion;
  j["n_classes"] = model.n_classes;
  j["feature_count"] = model.feature_count;
  j["seed"] = model.seed;
  nlohmann::ordered_json hp;
  hp["n_trees"] = model.params.n_trees;
  hp["max_depth"] = model.params.max_depth ? nlohmann::ordered_json(*model.params.max_depth)
                                           : nlohmann::ordered_json(nullptr);
  hp["min_samples_leaf"] = model.params.min_samples_leaf;
  hp["features_per_split"] = model.params.features_per_split;
  hp["balanced_class_weight"] = model.params.balanced_class_weight;
  j["hyperparams"] = hp;
  auto trees = nlohmann::ordered_json::array();
  for (const DecisionTree& t : model.trees) {
    nlohmann::ordered_json jt;
    auto feature = nlohmann::ordered_json::array();
    auto threshold = nlohmann::ordered_json::array();
    auto left = nlohmann::ordered_json::array();
    auto right = nlohmann::ordered_json::array();
    auto value = nlohmann::ordered_json::array();
    for (const TreeNode& n : t.nodes) {
      feature.push_back(n.feature);
      threshold.push_back(n.threshold);
      left.push_back(n.left);
      right.push_back(n.right);
      value.push_back(n.distribution);
    }
    jt["feature"] = std::move(feature);
    jt["threshold"] = std::move(threshold);
    jt["left"] = std::move(left);
    jt["right"] = std::move(right);
    jt["value"] = std::move(value);
    trees.push_back(std::move(jt));
  }
  j["trees"] = std::move(trees);
  return j.dump() + "\n";
}

ForestModel parse_model(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorruptModel, e.what());
  }
  ForestModel model;
  try {
    if (j.at("format").get<std::string>() != kModelFormat) {
      throw Error(ErrorCode::kCorruptModel, "not a pnstage forest model");
    }
    if (j.at("version").get<int>() != kModelVersion) {
      throw Error(ErrorCode::kVersionMismatch,
                  "model version " + j.at("version").dump() + ", expected " +
                      std::to_string(kModelVersion));
    }
    model.n_classes = j.at("n_classes").get<int>();
    model.feature_count = j.at("feature_count").get<int>();
    model.seed = j.at("seed").get<std::uint64_t>();
    const auto& hp = j.at("hyperparams");
    model.params.n_trees = hp.at("n_trees").get<int>();
    if (!hp.at("max_depth").is_null()) model.params.max_depth = hp.at("max_depth").get<int>();
    model.params.min_samples_leaf = hp.at("min_samples_leaf").get<int>();
    model.params.features_per_split = hp.at("features_per_split").get<int>();
    model.params.balanced_class_weight = hp.at("balanced_class_weight").get<bool>();
    if (model.n_classes != kNodeClassCount || model.feature_count < 1) {
      throw Error(ErrorCode::kCorruptModel, "unsupported class or feature count");
    }
    for (const auto& jt : j.at("trees")) {
      const auto feature = jt.at("feature").get<std::vector<int>>();
      const auto threshold = jt.at("threshold").get<std::vector<double>>();
      const auto left = jt.at("left").get<std::vector<int>>();
      const auto right = jt.at("right").get<std::vector<int>>();
      const auto value = jt.at("value").get<std::vector<ClassDistribution>>();
      const std::size_t n = feature.size();
      if (n == 0 || threshold.size() != n || left.size() != n || right.size() != n ||
          value.size() != n) {
        throw Error(ErrorCode::kCorruptModel, "tree node arrays disagree in length");
      }
      DecisionTree tree;
      for (std::size_t i = 0; i < n; ++i) {
        TreeNode node{feature[i], threshold[i], left[i], right[i], value[i]};
        if (node.feature >= 0) {
          // Children come after their parent, which also rules out cycles.
          if (node.feature >= model.feature_count || node.left <= static_cast<int>(i) ||
              node.right <= static_cast<int>(i) || node.left >= static_cast<int>(n) ||
              node.right >= static_cast<int>(n)) {
            throw Error(ErrorCode::kCorruptModel, "invalid split node");
          }
        } else {
          const double sum = std::accumulate(node.distribution.begin(), node.distribution.end(), 0.0);
          if (std::abs(sum - 1.0) > 1e-9) {
            throw Error(ErrorCode::kCorruptModel, "leaf distribution does not sum to 1");
          }
        }
        tree.nodes.push_back(node);
      }
      model.trees.push_back(std::move(tree));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorruptModel, e.what());
  }
  if (model.trees.empty()) throw Error(ErrorCode::kCorruptModel, "model has no trees");
  return model;
}

void save_model(const std::filesystem::path& file, const ForestModel& model) {
  detail::write_text(file, serialize_model(model));
}

ForestModel load_model(const std::filesystem::path& file) {
  if (!std::filesystem::exists(file)) {
    throw Error(ErrorCode::kIo, "model file " + file.string() + " does not exist");
  }
  return parse_model(detail::read_text(file));
}

}  // namespace pnstage
