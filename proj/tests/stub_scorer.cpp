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

// Minimal child process for exercising the external scorer client.
//
//   stub_scorer [record:<file>] <mode>
//
// modes: constant:<v>  checkerboard  bad-magic  out-of-range  nan  crash
//        hang  short  wrong-id  silent-handshake
// `record:<file>` appends every byte read from stdin to <file>.

#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>
#include <vector>

namespace {

FILE* g_record = nullptr;

bool read_exact(void* dst, std::size_t n) {
  auto* p = static_cast<unsigned char*>(dst);
  std::size_t got = 0;
  while (got < n) {
    const ssize_t r = ::read(0, p + got, n - got);
    if (r <= 0) return false;
    got += static_cast<std::size_t>(r);
  }
  if (g_record) {
    std::fwrite(p, 1, n, g_record);
    std::fflush(g_record);
  }
  return true;
}

void write_all(const void* src, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(src);
  while (n > 0) {
    const ssize_t w = ::write(1, p, n);
    if (w <= 0) std::exit(3);
    p += w;
    n -= static_cast<std::size_t>(w);
  }
}

void put(std::vector<unsigned char>& out, const void* v, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(v);
  out.insert(out.end(), p, p + n);
}

}  // namespace

int main(int argc, char** argv) {
  int arg = 1;
  if (arg < argc && std::strncmp(argv[arg], "record:", 7) == 0) {
    g_record = std::fopen(argv[arg] + 7, "ab");
    ++arg;
  }
  const std::string mode = arg < argc ? argv[arg] : "constant:0.5";

  char magic[4];
  if (!read_exact(magic, 4) || std::memcmp(magic, "PNS1", 4) != 0) return 2;
  if (mode == "silent-handshake") return 0;
  if (mode == "bad-magic") {
    write_all("PNS0", 4);
  } else {
    write_all("PNS1", 4);
  }

  for (;;) {
    std::uint32_t len = 0;
    if (!read_exact(&len, 4)) return 0;
    std::vector<unsigned char> body(len);
    if (!read_exact(body.data(), len)) return 2;
    if (mode == "crash") std::abort();
    if (mode == "hang") {
      for (;;) ::pause();
    }
    std::uint64_t id = 0;
    std::uint32_t count = 0;
    std::memcpy(&id, body.data(), 8);
    std::memcpy(&count, body.data() + 8, 4);

    std::vector<float> probs(count, 0.5f);
    std::size_t off = 12;
    for (std::uint32_t i = 0; i < count; ++i) {
      std::uint32_t w = 0, h = 0;
      std::memcpy(&w, body.data() + off, 4);
      std::memcpy(&h, body.data() + off + 4, 4);
      const unsigned char* px = body.data() + off + 8;
      off += 8 + std::size_t{w} * h * 3;
      if (mode.rfind("constant:", 0) == 0) {
        probs[i] = std::strtof(mode.c_str() + 9, nullptr);
      } else if (mode == "checkerboard") {
        std::uint64_t red = 0, green = 0;
        for (std::size_t p = 0; p < std::size_t{w} * h; ++p) {
          red += px[3 * p];
          green += px[3 * p + 1];
        }
        probs[i] = green < red ? 1.0f : 0.0f;
      } else if (mode == "out-of-range") {
        probs[i] = 1.5f;
      } else if (mode == "nan") {
        probs[i] = std::nanf("");
      }
    }
    if (mode == "wrong-id") ++id;
    if (mode == "short" && count > 0) --count;

    std::vector<unsigned char> out;
    const std::uint32_t out_len = 12 + 4 * count;
    put(out, &out_len, 4);
    put(out, &id, 8);
    put(out, &count, 4);
    put(out, probs.data(), 4 * std::size_t{count});
    write_all(out.data(), out.size());
  }
}
