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

#include <stdexcept>
#include <string>
#include <string_view>

namespace pnstage {

enum class ErrorCode {
  kInvalidArgument,
  kIo,
  // slide_io
  kMissingLevel,
  kSizeMismatch,
  kCorruptManifest,
  kBadLevel,
  kEmptyIntersection,
  kSpecOutOfBounds,
  // patches
  kMaskMismatch,
  kEmptyClass,
  kOddCount,
  kContextTooSmall,
  // scoring
  kScorerCrashed,
  kProtocolViolation,
  kTimeout,
  kSpawnFailed,
  kHandshakeMismatch,
  // forest
  kEmptyTrainingSet,
  kTooFewPatients,
  kCorruptModel,
  kVersionMismatch,
  kDimensionMismatch,
  // staging / metrics
  kWrongSlideCount,
  kSingleClass,
  kNoGroundTruth,
  // pipeline
  kBadMix,
  kBadConfig,
};

std::string_view error_code_name(ErrorCode code);

// All library failures are reported as Error; `code()` identifies the
// contract violation so callers can map it to exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace pnstage
