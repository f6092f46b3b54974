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
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pnstage {

// Ordered by severity.
enum class NodeClass { kNegative = 0, kItc = 1, kMicro = 2, kMacro = 3 };
inline constexpr int kNodeClassCount = 4;

// Ordered by stage index.
enum class PNStage { kPN0 = 0, kPN0ItcPlus = 1, kPN1Mi = 2, kPN1 = 3, kPN2 = 4 };
inline constexpr int kStageCount = 5;

inline constexpr std::size_t kSlidesPerPatient = 5;

std::string_view to_string(NodeClass c);
std::string_view to_string(PNStage s);
NodeClass parse_node_class(std::string_view s);
PNStage parse_stage(std::string_view s);

struct PatientRecord {
  std::string patient_id;
  std::vector<NodeClass> slides;
};

// One row of the staging decision table. Rows are tried in order and the
// first whose count ranges all hold wins. "Positive" slides are Micro or
// Macro; ITC does not count toward it.
struct StageRule {
  PNStage stage = PNStage::kPN0;
  int macro_min = 0, macro_max = 5;
  int micro_min = 0, micro_max = 5;
  int positive_min = 0, positive_max = 5;
  int itc_min = 0, itc_max = 5;
};

class StagingRules {
 public:
  // The Camelyon17 simplified pN table, identical to data/pn_stage_rules.csv.
  static const StagingRules& standard();
  // CSV with header stage,macro_min,macro_max,micro_min,micro_max,
  // positive_min,positive_max,itc_min,itc_max.
  static StagingRules parse_csv(std::string_view text);
  static StagingRules load(const std::filesystem::path& file);

  // Null when no row matches.
  std::optional<PNStage> match(int itc, int micro, int macro) const;
  const std::vector<StageRule>& rules() const { return rules_; }

 private:
  std::vector<StageRule> rules_;
};

extern const char* const kStandardRulesCsv;

PNStage stage_patient(const PatientRecord& record,
                      const StagingRules& rules = StagingRules::standard());
std::map<std::string, PNStage> stage_all(const std::vector<PatientRecord>& records,
                                         const StagingRules& rules = StagingRules::standard());

struct SlideLabel {
  std::string patient_id;
  std::string slide_id;
  NodeClass node_class = NodeClass::kNegative;
};

// `patient_id,slide_id,class` rows (header required).
std::vector<SlideLabel> read_slide_labels(const std::filesystem::path& file);
void write_slide_labels(const std::filesystem::path& file, const std::vector<SlideLabel>& rows);

// Groups slide rows by patient, preserving first-seen patient order and the
// slide order within each patient.
std::vector<PatientRecord> group_by_patient(const std::vector<SlideLabel>& rows);

// `patient_id,stage` rows.
std::map<std::string, PNStage> read_stages(const std::filesystem::path& file);
void write_stages(const std::filesystem::path& file, const std::map<std::string, PNStage>& stages);

}  // namespace pnstage
