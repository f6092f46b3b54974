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

#include "pnstage/scoring.h"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <mutex>
#include <thread>

#include "binary_io.h"
#include "pnstage/error.h"
#include "pnstage/rng.h"

extern char** environ;

namespace pnstage {

ConstantScorer::ConstantScorer(float value) : value_(value) {
  if (!(value >= 0.0f && value <= 1.0f)) {
    throw Error(ErrorCode::kInvalidArgument, "constant score must lie in [0, 1]");
  }
}

std::vector<PatchScore> ConstantScorer::score_batch(std::span<const PatchInput> patches) {
  std::vector<PatchScore> out;
  out.reserve(patches.size());
  for (const PatchInput& p : patches) out.push_back({std::string(p.slide_id), p.x, p.y, value_});
  return out;
}

OracleScorer::OracleScorer(std::string slide_id, BoolGrid level0_annotation, double sigma,
                           std::uint64_t seed)
    : slide_id_(std::move(slide_id)),
      index_(std::move(level0_annotation)),
      sigma_(sigma),
      seed_(seed) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
    throw Error(ErrorCode::kInvalidArgument, "oracle sigma must be finite and >= 0");
  }
}

std::vector<PatchScore> OracleScorer::score_batch(std::span<const PatchInput> patches) {
  std::vector<PatchScore> out;
  out.reserve(patches.size());
  const std::uint64_t slide_key = hash_string(slide_id_);
  for (const PatchInput& p : patches) {
    if (p.slide_id != slide_id_) {
      throw Error(ErrorCode::kInvalidArgument,
                  "oracle for " + slide_id_ + " asked to score " + std::string(p.slide_id));
    }
    double prob = index_.fraction(p.x, p.y);
    if (sigma_ > 0.0) {
      Rng rng(mix_seed(mix_seed(seed_ ^ slide_key, static_cast<std::uint64_t>(p.x)),
                       static_cast<std::uint64_t>(p.y)));
      prob = std::clamp(prob + sigma_ * rng.normal(), 0.0, 1.0);
    }
    out.push_back({slide_id_, p.x, p.y, static_cast<float>(prob)});
  }
  return out;
}

namespace protocol {

std::vector<std::uint8_t> encode_request(std::uint64_t request_id,
                                         std::span<const RgbImage* const> patches) {
  std::vector<std::uint8_t> out;
  const std::uint64_t body = 12 + patches.size() * (8 + std::uint64_t{kPatchBytes});
  out.reserve(4 + body);
  detail::put_u32(out, static_cast<std::uint32_t>(body));
  detail::put_u64(out, request_id);
  detail::put_u32(out, static_cast<std::uint32_t>(patches.size()));
  for (const RgbImage* img : patches) {
    if (img == nullptr || img->width() != kPatchSize || img->height() != kPatchSize) {
      throw Error(ErrorCode::kInvalidArgument, "scorer patches must be 256x256 RGB");
    }
    detail::put_u32(out, kPatchSize);
    detail::put_u32(out, kPatchSize);
    detail::put_bytes(out, img->bytes());
  }
  return out;
}

std::vector<std::uint8_t> encode_response(std::uint64_t request_id,
                                          std::span<const float> probs) {
  std::vector<std::uint8_t> out;
  detail::put_u32(out, static_cast<std::uint32_t>(12 + 4 * probs.size()));
  detail::put_u64(out, request_id);
  detail::put_u32(out, static_cast<std::uint32_t>(probs.size()));
  for (float p : probs) detail::put_f32(out, p);
  return out;
}

Request decode_request(std::span<const std::uint8_t> body) {
  if (body.size() < 12) throw Error(ErrorCode::kProtocolViolation, "request frame too short");
  Request req;
  req.request_id = detail::get_u64(body.data());
  const std::uint32_t count = detail::get_u32(body.data() + 8);
  std::size_t pos = 12;
  for (std::uint32_t i = 0; i < count; ++i) {
    if (body.size() < pos + 8) throw Error(ErrorCode::kProtocolViolation, "truncated record");
    const std::uint32_t w = detail::get_u32(body.data() + pos);
    const std::uint32_t h = detail::get_u32(body.data() + pos + 4);
    pos += 8;
    if (w != kPatchSize || h != kPatchSize) {
      throw Error(ErrorCode::kProtocolViolation, "patch records must be 256x256");
    }
    if (body.size() < pos + kPatchBytes) {
      throw Error(ErrorCode::kProtocolViolation, "truncated patch pixels");
    }
    RgbImage img(kPatchSize, kPatchSize);
    std::memcpy(img.bytes().data(), body.data() + pos, kPatchBytes);
    pos += kPatchBytes;
    req.patches.push_back(std::move(img));
  }
  if (pos != body.size()) throw Error(ErrorCode::kProtocolViolation, "trailing request bytes");
  return req;
}

Response decode_response(std::span<const std::uint8_t> body) {
  if (body.size() < 12) throw Error(ErrorCode::kProtocolViolation, "response frame too short");
  Response resp;
  resp.request_id = detail::get_u64(body.data());
  const std::uint32_t count = detail::get_u32(body.data() + 8);
  if (body.size() != 12 + std::size_t{4} * count) {
    throw Error(ErrorCode::kProtocolViolation, "response length disagrees with count");
  }
  resp.probs.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    resp.probs.push_back(detail::get_f32(body.data() + 12 + 4 * i));
  }
  return resp;
}

}  // namespace protocol

namespace {

void ignore_sigpipe_once() {
  static std::once_flag once;
  std::call_once(once, [] {
    struct sigaction sa {};
    sa.sa_handler = SIG_IGN;
    sigemptyset(&sa.sa_mask);
    sigaction(SIGPIPE, &sa, nullptr);
  });
}

int remaining_ms(std::chrono::steady_clock::time_point deadline) {
  const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
      deadline - std::chrono::steady_clock::now());
  return static_cast<int>(std::max<std::int64_t>(left.count(), 0));
}

}  // namespace

std::unique_ptr<ExternalScorer> ExternalScorer::spawn(const std::string& command,
                                                      ExternalOptions options) {
  if (options.batch_size == 0) {
    throw Error(ErrorCode::kInvalidArgument, "external batch size must be positive");
  }
  ignore_sigpipe_once();
  int in_pipe[2];   // parent -> child stdin
  int out_pipe[2];  // child stdout -> parent
  if (::pipe2(in_pipe, O_CLOEXEC) != 0) {
    throw Error(ErrorCode::kSpawnFailed, std::strerror(errno));
  }
  if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    throw Error(ErrorCode::kSpawnFailed, std::strerror(errno));
  }

  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_adddup2(&actions, in_pipe[0], STDIN_FILENO);
  posix_spawn_file_actions_adddup2(&actions, out_pipe[1], STDOUT_FILENO);
  const std::string shell_cmd = "exec " + command;
  char* argv[] = {const_cast<char*>("sh"), const_cast<char*>("-c"),
                  const_cast<char*>(shell_cmd.c_str()), nullptr};
  pid_t pid = -1;
  const int rc = posix_spawn(&pid, "/bin/sh", &actions, nullptr, argv, environ);
  posix_spawn_file_actions_destroy(&actions);
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  if (rc != 0) {
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    throw Error(ErrorCode::kSpawnFailed, "cannot start '" + command + "': " + std::strerror(rc));
  }

  std::unique_ptr<ExternalScorer> scorer(
      new ExternalScorer(pid, in_pipe[1], out_pipe[0], options));
  scorer->write_all(protocol::kMagic);
  std::array<std::uint8_t, 4> reply{};
  try {
    scorer->read_exact(reply.data(), reply.size());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kScorerCrashed) {
      throw Error(ErrorCode::kSpawnFailed,
                  "'" + command + "' exited before the handshake completed");
    }
    throw;
  }
  if (reply != protocol::kMagic) {
    scorer->fail(ErrorCode::kHandshakeMismatch,
                 "scorer replied '" + std::string(reply.begin(), reply.end()) +
                     "' instead of PNS1");
  }
  return scorer;
}

ExternalScorer::ExternalScorer(pid_t pid, int to_child, int from_child, ExternalOptions options)
    : pid_(pid), to_child_(to_child), from_child_(from_child), options_(options) {}

ExternalScorer::~ExternalScorer() {
  if (to_child_ >= 0) ::close(to_child_);
  if (from_child_ >= 0) ::close(from_child_);
  if (pid_ <= 0) return;
  // Closing stdin asks the child to exit; give it a moment, then kill it.
  for (int i = 0; i < 50; ++i) {
    int status = 0;
    const pid_t r = ::waitpid(pid_, &status, WNOHANG);
    if (r == pid_ || r < 0) return;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  ::kill(pid_, SIGKILL);
  int status = 0;
  ::waitpid(pid_, &status, 0);
}

void ExternalScorer::fail(ErrorCode code, const std::string& message) {
  broken_ = true;
  if (pid_ > 0) {
    ::kill(pid_, SIGKILL);
    int status = 0;
    ::waitpid(pid_, &status, 0);
    pid_ = -1;
  }
  throw Error(code, message);
}

void ExternalScorer::write_all(std::span<const std::uint8_t> data) {
  const auto deadline = std::chrono::steady_clock::now() + options_.timeout;
  std::size_t done = 0;
  while (done < data.size()) {
    pollfd pfd{to_child_, POLLOUT, 0};
    const int ready = ::poll(&pfd, 1, remaining_ms(deadline));
    if (ready < 0 && errno == EINTR) continue;
    if (ready == 0) fail(ErrorCode::kTimeout, "scorer stopped reading its input");
    const ssize_t n = ::write(to_child_, data.data() + done, data.size() - done);
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      fail(ErrorCode::kScorerCrashed, std::string("write to scorer failed: ") +
                                          std::strerror(errno));
    }
    done += static_cast<std::size_t>(n);
  }
}

void ExternalScorer::read_exact(std::uint8_t* dst, std::size_t n) {
  const auto deadline = std::chrono::steady_clock::now() + options_.timeout;
  while (n > 0) {
    pollfd pfd{from_child_, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, remaining_ms(deadline));
    if (ready < 0 && errno == EINTR) continue;
    if (ready == 0) fail(ErrorCode::kTimeout, "scorer did not answer in time");
    const ssize_t got = ::read(from_child_, dst, n);
    if (got < 0 && (errno == EINTR || errno == EAGAIN)) continue;
    if (got <= 0) fail(ErrorCode::kScorerCrashed, "scorer closed its output");
    dst += got;
    n -= static_cast<std::size_t>(got);
  }
}

std::vector<float> ExternalScorer::score_frame(std::span<const PatchInput> patches) {
  std::vector<const RgbImage*> images;
  images.reserve(patches.size());
  for (const PatchInput& p : patches) images.push_back(p.pixels);
  const std::uint64_t id = next_request_id_++;
  write_all(protocol::encode_request(id, images));

  std::array<std::uint8_t, 4> len_bytes{};
  read_exact(len_bytes.data(), len_bytes.size());
  const std::uint32_t len = detail::get_u32(len_bytes.data());
  if (len != 12 + 4 * patches.size()) {
    fail(ErrorCode::kProtocolViolation,
         "response frame_len " + std::to_string(len) + " does not match the request");
  }
  std::vector<std::uint8_t> body(len);
  read_exact(body.data(), body.size());
  protocol::Response resp;
  try {
    resp = protocol::decode_response(body);
  } catch (const Error& e) {
    fail(ErrorCode::kProtocolViolation, e.what());
  }
  if (resp.request_id != id || resp.probs.size() != patches.size()) {
    fail(ErrorCode::kProtocolViolation, "response does not answer request " + std::to_string(id));
  }
  for (float p : resp.probs) {
    if (!std::isfinite(p) || p < 0.0f || p > 1.0f) {
      fail(ErrorCode::kProtocolViolation, "scorer returned probability outside [0, 1]");
    }
  }
  return resp.probs;
}

std::vector<PatchScore> ExternalScorer::score_batch(std::span<const PatchInput> patches) {
  if (broken_) throw Error(ErrorCode::kScorerCrashed, "scorer is no longer usable");
  std::vector<PatchScore> out;
  out.reserve(patches.size());
  for (std::size_t start = 0; start < patches.size(); start += options_.batch_size) {
    const auto chunk =
        patches.subspan(start, std::min(options_.batch_size, patches.size() - start));
    const std::vector<float> probs = score_frame(chunk);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      out.push_back({std::string(chunk[i].slide_id), chunk[i].x, chunk[i].y, probs[i]});
    }
  }
  return out;
}

void ScorerSpec::validate() const {
  const bool ok = [&] {
    switch (kind) {
      case Kind::kConstant:
        return constant_value && !oracle_noise_sigma && !oracle_seed && !external_cmd &&
               *constant_value >= 0.0 && *constant_value <= 1.0;
      case Kind::kOracle:
        return !constant_value && oracle_noise_sigma && !external_cmd &&
               *oracle_noise_sigma >= 0.0;
      case Kind::kExternal:
        return !constant_value && !oracle_noise_sigma && !oracle_seed && external_cmd &&
               !external_cmd->empty();
    }
    return false;
  }();
  if (!ok) throw Error(ErrorCode::kInvalidArgument, "scorer spec fields do not match its kind");
}

ScorerSpec ScorerSpec::parse(std::string_view text) {
  const auto colon = text.find(':');
  const std::string_view kind = text.substr(0, colon);
  const std::string_view rest = colon == std::string_view::npos ? "" : text.substr(colon + 1);
  ScorerSpec spec;
  try {
    if (kind == "constant") {
      spec.kind = Kind::kConstant;
      spec.constant_value = std::stod(std::string(rest));
    } else if (kind == "oracle") {
      spec.kind = Kind::kOracle;
      const auto c2 = rest.find(':');
      spec.oracle_noise_sigma = std::stod(std::string(rest.substr(0, c2)));
      spec.oracle_seed = c2 == std::string_view::npos
                             ? 0
                             : std::stoull(std::string(rest.substr(c2 + 1)));
    } else if (kind == "external") {
      spec.kind = Kind::kExternal;
      spec.external_cmd = std::string(rest);
    } else {
      throw Error(ErrorCode::kInvalidArgument, "unknown scorer kind '" + std::string(kind) + "'");
    }
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::kInvalidArgument, "malformed scorer spec '" + std::string(text) + "'");
  }
  spec.validate();
  return spec;
}

std::unique_ptr<PatchScorer> make_scorer(const ScorerSpec& spec, std::string slide_id,
                                         const BoolGrid* level0_annotation,
                                         ExternalOptions external) {
  spec.validate();
  switch (spec.kind) {
    case ScorerSpec::Kind::kConstant:
      return std::make_unique<ConstantScorer>(static_cast<float>(*spec.constant_value));
    case ScorerSpec::Kind::kOracle:
      if (level0_annotation == nullptr) {
        throw Error(ErrorCode::kInvalidArgument,
                    "oracle scorer needs an annotation for slide " + slide_id);
      }
      return std::make_unique<OracleScorer>(std::move(slide_id), *level0_annotation,
                                            *spec.oracle_noise_sigma, spec.oracle_seed.value_or(0));
    case ScorerSpec::Kind::kExternal:
      return ExternalScorer::spawn(*spec.external_cmd, external);
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown scorer kind");
}

}  // namespace pnstage
