"""Brute-force pixel-rectangle oracle for the crop-overlap geometry.

This path is deliberately independent of `cropgrid.compute_overlap`: every
token's pixel footprint is enumerated and intersected numerically, then the
two derivations are compared exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cropgrid import CropPair, GridSpec, compute_overlap, sample_crop_pair


def _rect(x0: int, y0: int, size: int) -> tuple[int, int, int, int]:
    return (x0, y0, x0 + size, y0 + size)


def _intersect(a, b):
    x0, y0 = max(a[0], b[0]), max(a[1], b[1])
    x1, y1 = min(a[2], b[2]), min(a[3], b[3])
    if x0 >= x1 or y0 >= y1:
        return None
    return (x0, y0, x1, y1)


def _area(r) -> int:
    return (r[2] - r[0]) * (r[3] - r[1])


def overlap_via_pixels(spec: GridSpec, anchor1, anchor2):
    """Overlap index sets derived purely from pixel rectangles.

    Returns (idx1, idx2, O1, O2, matches) where matches[i] is the tuple of
    four C1 token indices tiling the i-th overlapped C2 token.
    """
    m, t = spec.m, spec.T
    crop1 = _rect(anchor1[0] * m, anchor1[1] * m, spec.c1 * m)
    crop2 = _rect(anchor2[0] * m, anchor2[1] * m, spec.c2 * m)
    inter = _intersect(crop1, crop2)
    assert inter is not None, "sampled crops never miss each other"

    def token_rect(anchor, token_r, token_c, patches_per_token):
        size = patches_per_token * m
        return _rect(anchor[0] * m + token_c * size, anchor[1] * m + token_r * size, size)

    idx1, idx2 = [], []
    O1 = np.zeros((t, t), dtype=np.int8)
    O2 = np.zeros((t, t), dtype=np.int8)
    rects1, rects2 = {}, {}
    for r in range(t):
        for c in range(t):
            r1 = token_rect(anchor1, r, c, 1)
            ov = _intersect(r1, inter)
            if ov is not None:
                assert _area(ov) == _area(r1), "partial token overlap is a geometry bug"
                O1[r, c] = 1
                rects1[r * t + c] = r1
            r2 = token_rect(anchor2, r, c, 2)
            ov = _intersect(r2, inter)
            if ov is not None:
                assert _area(ov) == _area(r2), "partial token overlap is a geometry bug"
                O2[r, c] = 1
                idx2.append(r * t + c)
                rects2[r * t + c] = r2

    matches = []
    for i2 in idx2:
        big = rects2[i2]
        # the four C1 tokens tiling this C2 token, sub-ordered row-major
        members = sorted(
            (j for j, rect in rects1.items() if _intersect(rect, big) is not None
             and _area(_intersect(rect, big)) == _area(rect)),
            key=lambda j: (rects1[j][1], rects1[j][0]))
        assert len(members) == 4, "each overlapped C2 token must be tiled by 4 C1 tokens"
        matches.append(tuple(members))
        idx1.extend(members)
    o1_idx = sorted(rects1)
    assert o1_idx == sorted(idx1), "C1 overlap tokens must exactly tile the C2 side"
    return tuple(idx1), tuple(idx2), O1, O2, tuple(matches)


@dataclass
class GeometryReport:
    samples: int
    failures: list

    @property
    def ok(self) -> bool:
        return not self.failures


def check_pair(spec: GridSpec, pair: CropPair) -> list[str]:
    """Compare one sampled pair against the pixel oracle; returns mismatch notes."""
    notes = []
    idx1, idx2, O1, O2, _ = overlap_via_pixels(spec, pair.anchor1, pair.anchor2)
    if idx1 != pair.idx1:
        notes.append(f"idx1 mismatch at anchors {pair.anchor1}/{pair.anchor2}")
    if idx2 != pair.idx2:
        notes.append(f"idx2 mismatch at anchors {pair.anchor1}/{pair.anchor2}")
    if not np.array_equal(O1, pair.O1):
        notes.append(f"O1 mismatch at anchors {pair.anchor1}/{pair.anchor2}")
    if not np.array_equal(O2, pair.O2):
        notes.append(f"O2 mismatch at anchors {pair.anchor1}/{pair.anchor2}")
    if len(pair.idx1) != 4 * len(pair.idx2):
        notes.append(f"|idx1| != 4*|idx2| at anchors {pair.anchor1}/{pair.anchor2}")
    return notes


def verify_geometry(spec: GridSpec, samples: int, seed: int,
                    corrupt: bool = False) -> GeometryReport:
    """Sample pairs and check each against the oracle.

    `corrupt` is a test hook that shifts C1's anchor by one patch, breaking
    even alignment, to prove the oracle actually rejects bad geometry.
    """
    rng = np.random.default_rng(seed)
    failures = []
    for _ in range(samples):
        pair = sample_crop_pair(rng, spec)
        if corrupt:
            ax = min(pair.anchor1[0] + 1, spec.G - spec.c1)
            bad = CropPair(anchor1=(ax, pair.anchor1[1]), anchor2=pair.anchor2,
                           idx1=pair.idx1, idx2=pair.idx2, O1=pair.O1, O2=pair.O2)
            try:
                notes = check_pair(spec, bad)
            except AssertionError as exc:
                notes = [f"oracle rejection at anchors {bad.anchor1}/{bad.anchor2}: {exc}"]
        else:
            notes = check_pair(spec, pair)
        failures.extend(notes)
    return GeometryReport(samples=samples, failures=failures)
