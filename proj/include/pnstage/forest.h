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

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pnstage/staging.h"

namespace pnstage {

struct ForestParams {
  int n_trees = 500;
  std::optional<int> max_depth;  // unlimited when empty
  int min_samples_leaf = 1;
  int features_per_split = 3;
  // Reweights classes inversely to their frequency (ITC is rare).
  bool balanced_class_weight = false;
};

using ClassDistribution = std::array<double, kNodeClassCount>;

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;  // taken when value <= threshold
  int right = -1;
  ClassDistribution distribution{};  // normalized class weights at this node
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  const ClassDistribution& leaf_for(std::span<const double> features) const;
};

struct ForestModel {
  int n_classes = kNodeClassCount;
  int feature_count = 11;
  std::uint64_t seed = 0;
  ForestParams params;
  std::vector<DecisionTree> trees;
};

struct LabeledSample {
  std::string patient_id;
  std::string slide_id;
  std::vector<double> features;
  NodeClass label = NodeClass::kNegative;
};

// Bagged CART: each tree sees a bootstrap resample and considers
// `features_per_split` features (drawn without replacement) at every node,
// choosing the weighted-Gini-minimal midpoint split. Ties go to the lower
// feature index, then the lower threshold. Tree t uses a stream derived from
// (seed, t), so `workers` does not change the result. With fewer than two
// samples or a single class, returns a one-leaf constant model.
ForestModel train_forest(std::span<const LabeledSample> samples, const ForestParams& params,
                         std::uint64_t seed, int workers = 1);

struct Prediction {
  NodeClass node_class = NodeClass::kNegative;
  ClassDistribution probabilities{};
};

// Mean of leaf distributions; argmax with ties to the less severe class.
Prediction predict(const ForestModel& model, std::span<const double> features);

double gini_impurity(std::span<const double> class_weights);

struct CvResult {
  std::vector<double> fold_accuracy;
  double mean_accuracy = 0.0;
  std::vector<int> fold_of_sample;
  std::vector<Prediction> predictions;  // out-of-fold, in sample order
};

// Patient ids per fold. Patients are stratified by their most severe slide
// class and dealt round-robin after a seeded shuffle.
std::vector<std::vector<std::string>> patient_folds(std::span<const LabeledSample> samples, int k,
                                                    std::uint64_t seed);

CvResult cross_validate(std::span<const LabeledSample> samples, int k, const ForestParams& params,
                        std::uint64_t seed, int workers = 1);

std::string serialize_model(const ForestModel& model);
ForestModel parse_model(std::string_view text);
void save_model(const std::filesystem::path& file, const ForestModel& model);
ForestModel load_model(const std::filesystem::path& file);

}  // namespace pnstage
