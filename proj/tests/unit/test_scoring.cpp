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

#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "../support.h"
#include "pnstage/error.h"
#include "pnstage/scoring.h"

using namespace pnstage;
using pnstage::testing::data_path;
using pnstage::testing::file_bytes;
using pnstage::testing::TempDir;

namespace {

// Same pattern as tests/fixtures/make_protocol_golden.py.
RgbImage golden_patch(int k) {
  RgbImage img(kPatchSize, kPatchSize);
  for (int y = 0; y < kPatchSize; ++y) {
    for (int x = 0; x < kPatchSize; ++x) {
      img.set(x, y, {static_cast<std::uint8_t>((x + 3 * y + 50 * k) % 256),
                     static_cast<std::uint8_t>((x * y + k) % 256),
                     static_cast<std::uint8_t>((255 - x + 7 * k) % 256)});
    }
  }
  return img;
}

std::string stub(const std::string& args) { return std::string(PNSTAGE_STUB_SCORER) + " " + args; }

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::kInvalidArgument;
}

std::vector<PatchInput> inputs(const std::vector<RgbImage>& imgs) {
  std::vector<PatchInput> in;
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    in.push_back({"s", static_cast<std::int64_t>(i) * 128, 0, &imgs[i]});
  }
  return in;
}

}  // namespace

TEST_CASE("constant scorer") {
  ConstantScorer s(0.5f);
  const std::vector<PatchInput> in = {{"a", 0, 0, nullptr}, {"a", 128, 0, nullptr}};
  for (const PatchScore& p : s.score_batch(in)) CHECK(p.prob == 0.5f);
}

TEST_CASE("oracle scorer") {
  BoolGrid annot(512, 512, 0);
  for (int y = 0; y < 256; ++y) {
    for (int x = 0; x < 256; ++x) annot(x, y) = 1;
  }
  for (int y = 256; y < 512; ++y) {
    for (int x = 256; x < 256 + 77; ++x) annot(x, y) = 1;
  }
  SUBCASE("sigma 0 is the exact tumor fraction") {
    OracleScorer s("s", annot, 0.0, 1);
    const std::vector<PatchInput> in = {{"s", 0, 0, nullptr}, {"s", 256, 256, nullptr},
                                        {"s", 128, 128, nullptr}, {"s", 384, 0, nullptr}};
    const auto out = s.score_batch(in);
    CHECK(out[0].prob == 1.0f);
    CHECK(out[1].prob == static_cast<float>(77.0 / 256));
    CHECK(out[2].prob == static_cast<float>((128.0 * 128 + 77.0 * 128) / 65536));
    CHECK(out[3].prob == 0.0f);
  }
  SUBCASE("noise is keyed by position, not batching") {
    OracleScorer s("s", annot, 0.1, 42);
    std::vector<PatchInput> in;
    for (int i = 0; i < 9; ++i) in.push_back({"s", 128 * (i % 3), 128 * (i / 3), nullptr});
    const auto all = s.score_batch(in);
    for (std::size_t i = 0; i < in.size(); ++i) {
      const auto one = s.score_batch(std::span(&in[i], 1));
      REQUIRE(one[0].prob == all[i].prob);
      REQUIRE(all[i].prob >= 0.0f);
      REQUIRE(all[i].prob <= 1.0f);
    }
    OracleScorer other("s", annot, 0.1, 43);
    CHECK(other.score_batch(in)[4].prob != all[4].prob);
  }
}

TEST_CASE("protocol golden frames") {
  const auto request = file_bytes(data_path("protocol.golden"));
  const auto response = file_bytes(data_path("protocol_response.golden"));
  const RgbImage p0 = golden_patch(0), p1 = golden_patch(1);
  const RgbImage* ptrs[] = {&p0, &p1};

  const auto enc = protocol::encode_request(1, ptrs);
  REQUIRE(request.size() == 4 + enc.size());
  CHECK(std::equal(enc.begin(), enc.end(), request.begin() + 4));

  const float probs[] = {0.25f, 0.25f};
  const auto enc_resp = protocol::encode_response(1, probs);
  REQUIRE(response.size() == 4 + enc_resp.size());
  CHECK(std::equal(enc_resp.begin(), enc_resp.end(), response.begin() + 4));

  const auto req = protocol::decode_request(std::span(enc).subspan(4));
  CHECK(req.request_id == 1);
  REQUIRE(req.patches.size() == 2);
  CHECK(req.patches[1] == p1);
  const auto resp = protocol::decode_response(std::span(enc_resp).subspan(4));
  CHECK(resp.probs == std::vector<float>{0.25f, 0.25f});

  CHECK(code_of([&] { protocol::decode_response(std::span(enc_resp).subspan(4, 10)); }) ==
        ErrorCode::kProtocolViolation);
}

TEST_CASE("external scorer transcript matches the golden file") {
  TempDir tmp("record");
  const auto rec = tmp / "transcript.bin";
  {
    auto s = ExternalScorer::spawn(stub("record:" + rec.string() + " constant:0.25"));
    const std::vector<RgbImage> imgs = {golden_patch(0), golden_patch(1)};
    const auto out = s->score_batch(inputs(imgs));
    REQUIRE(out.size() == 2);
    CHECK(out[0].prob == 0.25f);
    CHECK(out[1].x == 128);
  }
  CHECK(file_bytes(rec) == file_bytes(data_path("protocol.golden")));
}

TEST_CASE("external scorer scoring") {
  std::vector<RgbImage> imgs;
  for (int i = 0; i < 7; ++i) {
    imgs.emplace_back(kPatchSize, kPatchSize, i % 2 ? Rgb{200, 100, 150} : Rgb{100, 200, 150});
  }
  SUBCASE("checkerboard stub sees the pixels in order") {
    auto s = ExternalScorer::spawn(stub("checkerboard"), {3, std::chrono::milliseconds(10'000)});
    const auto out = s->score_batch(inputs(imgs));
    REQUIRE(out.size() == 7);
    for (int i = 0; i < 7; ++i) CHECK(out[i].prob == (i % 2 ? 1.0f : 0.0f));
  }
  SUBCASE("results do not depend on batch partitioning") {
    auto whole = ExternalScorer::spawn(stub("checkerboard"), {32, std::chrono::milliseconds(10'000)});
    auto single = ExternalScorer::spawn(stub("checkerboard"), {1, std::chrono::milliseconds(10'000)});
    const auto a = whole->score_batch(inputs(imgs));
    const auto b = single->score_batch(inputs(imgs));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].prob == b[i].prob);
  }
  SUBCASE("stub echoing zero") {
    auto s = ExternalScorer::spawn(stub("constant:0"));
    for (const auto& p : s->score_batch(inputs(imgs))) CHECK(p.prob == 0.0f);
  }
}

TEST_CASE("external scorer failures") {
  const std::vector<RgbImage> imgs = {RgbImage(kPatchSize, kPatchSize)};
  const ExternalOptions quick{32, std::chrono::milliseconds(300)};
  CHECK(code_of([&] { ExternalScorer::spawn(stub("bad-magic")); }) == ErrorCode::kHandshakeMismatch);
  CHECK(code_of([&] { ExternalScorer::spawn(stub("silent-handshake")); }) == ErrorCode::kSpawnFailed);
  CHECK(code_of([&] { ExternalScorer::spawn("/nonexistent/scorer"); }) == ErrorCode::kSpawnFailed);

  const std::pair<const char*, ErrorCode> cases[] = {
      {"out-of-range", ErrorCode::kProtocolViolation},
      {"nan", ErrorCode::kProtocolViolation},
      {"wrong-id", ErrorCode::kProtocolViolation},
      {"short", ErrorCode::kProtocolViolation},
      {"crash", ErrorCode::kScorerCrashed},
      {"hang", ErrorCode::kTimeout},
  };
  for (const auto& [mode, code] : cases) {
    CAPTURE(mode);
    auto s = ExternalScorer::spawn(stub(mode), quick);
    CHECK(code_of([&] { s->score_batch(inputs(imgs)); }) == code);
    CHECK(code_of([&] { s->score_batch(inputs(imgs)); }) == ErrorCode::kScorerCrashed);
  }
}

TEST_CASE("scorer specs") {
  const ScorerSpec c = ScorerSpec::parse("constant:0.7");
  CHECK(c.kind == ScorerSpec::Kind::kConstant);
  CHECK(*c.constant_value == 0.7);
  const ScorerSpec o = ScorerSpec::parse("oracle:0.05:9");
  CHECK(*o.oracle_noise_sigma == 0.05);
  CHECK(*o.oracle_seed == 9);
  const ScorerSpec e = ScorerSpec::parse("external:python3 -m scorer --stub constant:0.5");
  CHECK(*e.external_cmd == "python3 -m scorer --stub constant:0.5");

  CHECK_THROWS_AS(ScorerSpec::parse("constant:1.5"), Error);
  CHECK_THROWS_AS(ScorerSpec::parse("constant:abc"), Error);
  CHECK_THROWS_AS(ScorerSpec::parse("magic:1"), Error);
  ScorerSpec mixed = c;
  mixed.oracle_noise_sigma = 0.1;
  CHECK_THROWS_AS(mixed.validate(), Error);
  CHECK_THROWS_AS(make_scorer(o, "s", nullptr), Error);
}
