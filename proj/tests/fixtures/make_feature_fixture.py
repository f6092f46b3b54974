#!/usr/bin/env python3
# Copyright 2026 The pnstage Authors. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Computes the expected feature vector for the 8x8 toy heatmap.

Cell values are dyadic so float32 storage and every sum below are exact.
The major axis is evaluated from integer moments in closed form and checked
against numpy's eigen-decomposition of the population covariance.
"""

import json
import math
import pathlib

import numpy as np

T = 0.9

# Rows top to bottom. Values >= 0.9 form three 8-connected regions:
#   A: 6 cells, an L plus a diagonal step (rows 0-3)
#   B: 3 cells on a pure diagonal (rows 5-7)
#   C: 1 cell at (2, 6) with the global maximum over tissue
# (0, 7) holds 1.0 but is background, so it must not reach f7.
HEATMAP = [
    [0.9375, 0.953125, 0.25, 0.0, 0.0, 0.0, 0.125, 1.0],
    [0.96875, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0],
    [0.9375, 0.0, 0.0, 0.0, 0.0, 0.0, 0.984375, 0.0],
    [0.0, 0.921875, 0.90625, 0.0, 0.0, 0.75, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.9375, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.96875, 0.0, 0.0, 0.0],
    [0.0625, 0.0, 0.0, 0.9140625, 0.0, 0.0, 0.0, 0.0],
]

# 1 = tissue. Column 7 and the bottom-left corner are background.
TISSUE = [
    [1, 1, 1, 1, 1, 1, 1, 0],
    [1, 1, 1, 1, 1, 1, 1, 0],
    [1, 1, 1, 1, 1, 1, 1, 0],
    [1, 1, 1, 1, 1, 1, 1, 0],
    [1, 1, 1, 1, 1, 1, 1, 0],
    [1, 1, 1, 1, 1, 1, 1, 0],
    [0, 1, 1, 1, 1, 1, 1, 0],
    [0, 0, 1, 1, 1, 1, 1, 0],
]


def regions(hm):
    h, w = len(hm), len(hm[0])
    label = [[-1] * w for _ in range(h)]
    out = []
    for r in range(h):
        for c in range(w):
            if hm[r][c] < T or label[r][c] >= 0:
                continue
            label[r][c] = len(out)
            queue, cells = [(r, c)], []
            while queue:
                cr, cc = queue.pop(0)
                cells.append((cr, cc))
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        nr, nc = cr + dr, cc + dc
                        if 0 <= nr < h and 0 <= nc < w and label[nr][nc] < 0 and hm[nr][nc] >= T:
                            label[nr][nc] = len(out)
                            queue.append((nr, nc))
            out.append(sorted(cells))
    return out


def major_axis(cells):
    n = len(cells)
    if n <= 1:
        return 0.0
    sr = sum(r for r, _ in cells)
    sc = sum(c for _, c in cells)
    vrr = n * sum(r * r for r, _ in cells) - sr * sr
    vcc = n * sum(c * c for _, c in cells) - sc * sc
    vrc = n * sum(r * c for r, c in cells) - sr * sc
    disc = float((vrr - vcc) ** 2 + 4 * vrc * vrc)
    lam = (float(vrr + vcc) + math.sqrt(disc)) / (2.0 * float(n * n))
    closed = 4.0 * math.sqrt(lam)

    pts = np.array(cells, dtype=float)
    cov = np.cov(pts.T, bias=True)
    check = 4.0 * math.sqrt(np.linalg.eigvalsh(cov)[-1])
    assert abs(closed - check) <= 1e-12, (closed, check)
    return closed


def features(hm, tissue):
    regs = regions(hm)
    f = [0.0] * 11
    if regs:
        stats = []
        for cells in regs:
            vals = [hm[r][c] for r, c in cells]
            stats.append(dict(cells=cells, area=len(cells), max=max(vals), mean=sum(vals) / len(vals)))
        largest = stats[0]
        for s in stats[1:]:
            if s["area"] > largest["area"] or (s["area"] == largest["area"] and s["max"] > largest["max"]):
                largest = s
        f[0] = major_axis(largest["cells"])
        f[1] = largest["max"]
        f[2] = largest["mean"]
        f[3] = float(largest["area"])
        f[4] = sum(s["mean"] for s in stats) / len(stats)
        f[5] = float(sum(s["area"] for s in stats))
    tv = [hm[r][c] for r in range(8) for c in range(8) if tissue[r][c]]
    bg = 64 - len(tv)
    f[6] = max(tv) if tv else 0.0
    f[7] = sum(tv) / len(tv) if tv else 0.0
    f[8] = float(len(regs))
    f[9] = float(len(tv))
    f[10] = len(tv) / bg if bg else float(len(tv))
    return f, regs


def main():
    for row in HEATMAP:
        for v in row:
            assert float(np.float32(v)) == v
    f, regs = features(HEATMAP, TISSUE)
    assert [len(r) for r in regs] == [6, 1, 1, 3], regs
    out = pathlib.Path(__file__).resolve().parent.parent / "data" / "feature_fixture.json"
    out.write_text(json.dumps({"threshold": T, "heatmap": HEATMAP, "tissue": TISSUE,
                               "expected": f}, indent=1) + "\n")


if __name__ == "__main__":
    main()
