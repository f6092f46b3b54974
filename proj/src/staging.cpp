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

#include "pnstage/staging.h"

#include <algorithm>
#include <sstream>

#include "binary_io.h"
#include "csv.h"
#include "pnstage/error.h"

namespace pnstage {

const char* const kStandardRulesCsv =
    "stage,macro_min,macro_max,micro_min,micro_max,positive_min,positive_max,itc_min,itc_max\n"
    "pN2,1,5,0,5,4,5,0,5\n"
    "pN1,1,5,0,5,1,3,0,5\n"
    "pN1mi,0,0,1,5,1,5,0,5\n"
    "pN0(i+),0,0,0,0,0,0,1,5\n"
    "pN0,0,0,0,0,0,0,0,0\n";

std::string_view to_string(NodeClass c) {
  switch (c) {
    case NodeClass::kNegative: return "negative";
    case NodeClass::kItc: return "itc";
    case NodeClass::kMicro: return "micro";
    case NodeClass::kMacro: return "macro";
  }
  return "negative";
}

std::string_view to_string(PNStage s) {
  switch (s) {
    case PNStage::kPN0: return "pN0";
    case PNStage::kPN0ItcPlus: return "pN0(i+)";
    case PNStage::kPN1Mi: return "pN1mi";
    case PNStage::kPN1: return "pN1";
    case PNStage::kPN2: return "pN2";
  }
  return "pN0";
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace

NodeClass parse_node_class(std::string_view s) {
  const std::string v = lower(s);
  if (v == "negative" || v == "normal") return NodeClass::kNegative;
  if (v == "itc") return NodeClass::kItc;
  if (v == "micro") return NodeClass::kMicro;
  if (v == "macro") return NodeClass::kMacro;
  throw Error(ErrorCode::kInvalidArgument, "unknown node class '" + std::string(s) + "'");
}

PNStage parse_stage(std::string_view s) {
  const std::string v = lower(s);
  if (v == "pn0") return PNStage::kPN0;
  if (v == "pn0(i+)" || v == "pn0i+") return PNStage::kPN0ItcPlus;
  if (v == "pn1mi") return PNStage::kPN1Mi;
  if (v == "pn1") return PNStage::kPN1;
  if (v == "pn2") return PNStage::kPN2;
  throw Error(ErrorCode::kInvalidArgument, "unknown pN stage '" + std::string(s) + "'");
}

StagingRules StagingRules::parse_csv(std::string_view text) {
  const detail::CsvTable table = detail::parse_csv(text);
  StagingRules rules;
  const std::size_t c_stage = table.column("stage");
  const char* names[] = {"macro_min",    "macro_max",    "micro_min", "micro_max",
                         "positive_min", "positive_max", "itc_min",   "itc_max"};
  std::size_t cols[8];
  for (int i = 0; i < 8; ++i) cols[i] = table.column(names[i]);
  for (const auto& row : table.rows) {
    StageRule r;
    r.stage = parse_stage(row[c_stage]);
    int* fields[] = {&r.macro_min,    &r.macro_max,    &r.micro_min, &r.micro_max,
                     &r.positive_min, &r.positive_max, &r.itc_min,   &r.itc_max};
    for (int i = 0; i < 8; ++i) {
      try {
        *fields[i] = std::stoi(row[cols[i]]);
      } catch (const std::logic_error&) {
        throw Error(ErrorCode::kInvalidArgument, "bad count '" + row[cols[i]] + "' in rules");
      }
    }
    rules.rules_.push_back(r);
  }
  if (rules.rules_.empty()) throw Error(ErrorCode::kInvalidArgument, "rule table is empty");
  return rules;
}

const StagingRules& StagingRules::standard() {
  static const StagingRules rules = parse_csv(kStandardRulesCsv);
  return rules;
}

StagingRules StagingRules::load(const std::filesystem::path& file) {
  return parse_csv(detail::read_text(file));
}

std::optional<PNStage> StagingRules::match(int itc, int micro, int macro) const {
  const int positive = micro + macro;
  auto in = [](int v, int lo, int hi) { return v >= lo && v <= hi; };
  for (const StageRule& r : rules_) {
    if (in(macro, r.macro_min, r.macro_max) && in(micro, r.micro_min, r.micro_max) &&
        in(positive, r.positive_min, r.positive_max) && in(itc, r.itc_min, r.itc_max)) {
      return r.stage;
    }
  }
  return std::nullopt;
}

PNStage stage_patient(const PatientRecord& record, const StagingRules& rules) {
  if (record.slides.size() != kSlidesPerPatient) {
    throw Error(ErrorCode::kWrongSlideCount,
                "patient " + record.patient_id + " has " + std::to_string(record.slides.size()) +
                    " slides, expected 5");
  }
  int counts[kNodeClassCount] = {0, 0, 0, 0};
  for (NodeClass c : record.slides) ++counts[static_cast<int>(c)];
  const auto stage = rules.match(counts[1], counts[2], counts[3]);
  if (!stage) {
    throw Error(ErrorCode::kInvalidArgument,
                "no staging rule matches patient " + record.patient_id);
  }
  return *stage;
}

std::map<std::string, PNStage> stage_all(const std::vector<PatientRecord>& records,
                                         const StagingRules& rules) {
  std::map<std::string, PNStage> out;
  for (const PatientRecord& r : records) out[r.patient_id] = stage_patient(r, rules);
  return out;
}

std::vector<SlideLabel> read_slide_labels(const std::filesystem::path& file) {
  const detail::CsvTable table = detail::read_csv(file);
  const std::size_t cp = table.column("patient_id");
  const std::size_t cs = table.column("slide_id");
  const std::size_t cc = table.column("class");
  std::vector<SlideLabel> out;
  for (const auto& row : table.rows) {
    out.push_back({row[cp], row[cs], parse_node_class(row[cc])});
  }
  return out;
}

void write_slide_labels(const std::filesystem::path& file, const std::vector<SlideLabel>& rows) {
  std::ostringstream out;
  out << "patient_id,slide_id,class\n";
  for (const SlideLabel& r : rows) {
    out << r.patient_id << ',' << r.slide_id << ',' << to_string(r.node_class) << '\n';
  }
  detail::write_text(file, out.str());
}

std::vector<PatientRecord> group_by_patient(const std::vector<SlideLabel>& rows) {
  std::vector<PatientRecord> out;
  std::map<std::string, std::size_t> index;
  for (const SlideLabel& r : rows) {
    auto [it, inserted] = index.try_emplace(r.patient_id, out.size());
    if (inserted) out.push_back({r.patient_id, {}});
    out[it->second].slides.push_back(r.node_class);
  }
  return out;
}

std::map<std::string, PNStage> read_stages(const std::filesystem::path& file) {
  const detail::CsvTable table = detail::read_csv(file);
  const std::size_t cp = table.column("patient_id");
  const std::size_t cs = table.column("stage");
  std::map<std::string, PNStage> out;
  for (const auto& row : table.rows) out[row[cp]] = parse_stage(row[cs]);
  return out;
}

void write_stages(const std::filesystem::path& file, const std::map<std::string, PNStage>& stages) {
  std::ostringstream out;
  out << "patient_id,stage\n";
  for (const auto& [patient, stage] : stages) out << patient << ',' << to_string(stage) << '\n';
  detail::write_text(file, out.str());
}

}  // namespace pnstage
