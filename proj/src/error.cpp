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

#include "pnstage/error.h"

namespace pnstage {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kIo: return "Io";
    case ErrorCode::kMissingLevel: return "MissingLevel";
    case ErrorCode::kSizeMismatch: return "SizeMismatch";
    case ErrorCode::kCorruptManifest: return "CorruptManifest";
    case ErrorCode::kBadLevel: return "BadLevel";
    case ErrorCode::kEmptyIntersection: return "EmptyIntersection";
    case ErrorCode::kSpecOutOfBounds: return "SpecOutOfBounds";
    case ErrorCode::kMaskMismatch: return "MaskMismatch";
    case ErrorCode::kEmptyClass: return "EmptyClass";
    case ErrorCode::kOddCount: return "OddCount";
    case ErrorCode::kContextTooSmall: return "ContextTooSmall";
    case ErrorCode::kScorerCrashed: return "ScorerCrashed";
    case ErrorCode::kProtocolViolation: return "ProtocolViolation";
    case ErrorCode::kTimeout: return "Timeout";
    case ErrorCode::kSpawnFailed: return "SpawnFailed";
    case ErrorCode::kHandshakeMismatch: return "HandshakeMismatch";
    case ErrorCode::kEmptyTrainingSet: return "EmptyTrainingSet";
    case ErrorCode::kTooFewPatients: return "TooFewPatients";
    case ErrorCode::kCorruptModel: return "CorruptModel";
    case ErrorCode::kVersionMismatch: return "VersionMismatch";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kWrongSlideCount: return "WrongSlideCount";
    case ErrorCode::kSingleClass: return "SingleClass";
    case ErrorCode::kNoGroundTruth: return "NoGroundTruth";
    case ErrorCode::kBadMix: return "BadMix";
    case ErrorCode::kBadConfig: return "BadConfig";
  }
  return "Unknown";
}

}  // namespace pnstage
