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

#include <sys/types.h>

#include <array>
#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pnstage/error.h"
#include "pnstage/patches.h"
#include "pnstage/raster.h"

namespace pnstage {

struct PatchInput {
  std::string_view slide_id;
  std::int64_t x = 0;
  std::int64_t y = 0;
  const RgbImage* pixels = nullptr;  // may be null when the scorer ignores pixels
};

struct PatchScore {
  std::string slide_id;
  std::int64_t x = 0;
  std::int64_t y = 0;
  float prob = 0.0f;
};

// Stands in for the patch classifier. Implementations return one score per
// input, in input order.
class PatchScorer {
 public:
  virtual ~PatchScorer() = default;
  virtual bool needs_pixels() const = 0;
  virtual std::vector<PatchScore> score_batch(std::span<const PatchInput> patches) = 0;
};

class ConstantScorer final : public PatchScorer {
 public:
  explicit ConstantScorer(float value);
  bool needs_pixels() const override { return false; }
  std::vector<PatchScore> score_batch(std::span<const PatchInput> patches) override;

 private:
  float value_;
};

// clamp(tumor_fraction + N(0, sigma)) from a level-0 annotation. The noise
// for a patch depends only on (seed, slide, x, y), so results do not depend
// on batching or order.
class OracleScorer final : public PatchScorer {
 public:
  OracleScorer(std::string slide_id, BoolGrid level0_annotation, double sigma,
               std::uint64_t seed);
  bool needs_pixels() const override { return false; }
  std::vector<PatchScore> score_batch(std::span<const PatchInput> patches) override;

 private:
  std::string slide_id_;
  TumorFractionIndex index_;
  double sigma_;
  std::uint64_t seed_;
};

namespace protocol {

inline constexpr std::array<std::uint8_t, 4> kMagic = {'P', 'N', 'S', '1'};
inline constexpr std::uint32_t kPatchBytes = kPatchSize * kPatchSize * 3;

// Frames: u32 frame_len (bytes after the length field), u64 request_id,
// u32 count, then per patch {u32 w, u32 h, w*h*3 RGB} for requests or one
// f32 per patch for responses. Little-endian throughout.
std::vector<std::uint8_t> encode_request(std::uint64_t request_id,
                                         std::span<const RgbImage* const> patches);
std::vector<std::uint8_t> encode_response(std::uint64_t request_id, std::span<const float> probs);

struct Request {
  std::uint64_t request_id = 0;
  std::vector<RgbImage> patches;
};
struct Response {
  std::uint64_t request_id = 0;
  std::vector<float> probs;
};

// `body` excludes the leading u32 frame_len.
Request decode_request(std::span<const std::uint8_t> body);
Response decode_response(std::span<const std::uint8_t> body);

}  // namespace protocol

struct ExternalOptions {
  std::size_t batch_size = 32;
  std::chrono::milliseconds timeout{60'000};
};

// Child process speaking the scoring protocol over stdin/stdout. One request
// in flight at a time.
class ExternalScorer final : public PatchScorer {
 public:
  // Runs `command` through /bin/sh and performs the handshake.
  static std::unique_ptr<ExternalScorer> spawn(const std::string& command,
                                               ExternalOptions options = {});
  ~ExternalScorer() override;
  ExternalScorer(const ExternalScorer&) = delete;
  ExternalScorer& operator=(const ExternalScorer&) = delete;

  bool needs_pixels() const override { return true; }
  std::vector<PatchScore> score_batch(std::span<const PatchInput> patches) override;

 private:
  ExternalScorer(pid_t pid, int to_child, int from_child, ExternalOptions options);
  void write_all(std::span<const std::uint8_t> data);
  void read_exact(std::uint8_t* dst, std::size_t n);
  std::vector<float> score_frame(std::span<const PatchInput> patches);
  [[noreturn]] void fail(ErrorCode code, const std::string& message);

  pid_t pid_;
  int to_child_;
  int from_child_;
  ExternalOptions options_;
  std::uint64_t next_request_id_ = 1;
  bool broken_ = false;
};

struct ScorerSpec {
  enum class Kind { kConstant, kOracle, kExternal };
  Kind kind = Kind::kConstant;
  std::optional<double> constant_value;
  std::optional<double> oracle_noise_sigma;
  std::optional<std::uint64_t> oracle_seed;
  std::optional<std::string> external_cmd;

  void validate() const;
  // "constant:0.5", "oracle:<sigma>[:<seed>]", "external:<command line>".
  static ScorerSpec parse(std::string_view text);
};

// Oracle scorers need the slide's level-0 annotation; other kinds ignore it.
std::unique_ptr<PatchScorer> make_scorer(const ScorerSpec& spec, std::string slide_id,
                                         const BoolGrid* level0_annotation,
                                         ExternalOptions external = {});

}  // namespace pnstage
