"""Grid-wise image cropping: aligned crop pairs, overlap index sets and masks.

Images are plain 2-d float arrays with intensities in [0, 1].  Grid
coordinates follow an (x, y) = (column, row) convention; token coordinates
inside a crop are (row, col).  A C1 token covers exactly one grid patch, a
C2 token covers a 2x2 block of grid patches, so in the overlap four C1
tokens tile each C2 token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (AlignmentError, GeometryError, IndexRangeError,
                     ParameterError, ShapeError)


@dataclass(frozen=True)
class GridSpec:
    """Crop geometry: grid side G (patches), patch side m (pixels), crop sides."""

    G: int = 32
    m: int = 32
    c1: int = 14
    c2: int = 28
    H0: int = 448

    def __post_init__(self):
        if self.c2 != 2 * self.c1:
            raise ParameterError(f"c2 must equal 2*c1, got c1={self.c1}, c2={self.c2}")
        if self.c1 % 2 != 0:
            raise ParameterError(f"c1 must be even, got {self.c1}")
        if self.G < self.c2:
            raise ParameterError(f"G must be >= c2, got G={self.G}, c2={self.c2}")
        if min(self.G, self.m, self.c1, self.H0) <= 0:
            raise ParameterError("all grid extents must be positive")

    @property
    def T(self) -> int:
        """Encoder token-map side; both crops resize to H0 and embed to T x T tokens."""
        return self.c1

    @property
    def side(self) -> int:
        return self.G * self.m


@dataclass(frozen=True)
class CropPair:
    """A sampled (C1, C2) pair with exact overlap bookkeeping.

    idx1/idx2 are row-major flat token indices of the overlap; entry i of
    idx2 corresponds to entries 4i..4i+3 of idx1 in the fixed sub-order
    top-left, top-right, bottom-left, bottom-right.
    """

    anchor1: tuple[int, int]
    anchor2: tuple[int, int]
    idx1: tuple[int, ...] = field(repr=False)
    idx2: tuple[int, ...] = field(repr=False)
    O1: np.ndarray = field(repr=False)
    O2: np.ndarray = field(repr=False)


def compute_overlap(spec: GridSpec, anchor1: tuple[int, int], anchor2: tuple[int, int]):
    """Overlap index sets and token masks for a C1-inside-C2 anchor pair."""
    x1, y1 = anchor1
    x2, y2 = anchor2
    dx, dy = x1 - x2, y1 - y2
    if dx % 2 != 0 or dy % 2 != 0:
        raise AlignmentError(f"anchor offset ({dx}, {dy}) must be even on both axes")
    if dx < 0 or dy < 0 or x1 + spec.c1 > x2 + spec.c2 or y1 + spec.c1 > y2 + spec.c2:
        raise GeometryError(f"C1 at {anchor1} does not lie inside C2 at {anchor2}")
    T = spec.T
    half = T // 2
    ox, oy = dx // 2, dy // 2

    O1 = np.ones((T, T), dtype=np.int8)
    O2 = np.zeros((T, T), dtype=np.int8)
    O2[oy:oy + half, ox:ox + half] = 1

    idx2 = []
    idx1 = []
    for r in range(oy, oy + half):
        for c in range(ox, ox + half):
            idx2.append(r * T + c)
            r1, c1 = 2 * (r - oy), 2 * (c - ox)
            idx1.extend([r1 * T + c1, r1 * T + c1 + 1,
                         (r1 + 1) * T + c1, (r1 + 1) * T + c1 + 1])
    return tuple(idx1), tuple(idx2), O1, O2


def sample_crop_pair(rng: np.random.Generator, spec: GridSpec) -> CropPair:
    """Uniformly sample an even-aligned crop pair with C1 contained in C2."""
    lim2 = spec.G - spec.c2
    x2 = int(rng.integers(0, lim2 + 1))
    y2 = int(rng.integers(0, lim2 + 1))
    limu = (spec.c2 - spec.c1) // 2
    u = int(rng.integers(0, limu + 1))
    v = int(rng.integers(0, limu + 1))
    anchor2 = (x2, y2)
    anchor1 = (x2 + 2 * u, y2 + 2 * v)
    idx1, idx2, O1, O2 = compute_overlap(spec, anchor1, anchor2)
    return CropPair(anchor1=anchor1, anchor2=anchor2, idx1=idx1, idx2=idx2, O1=O1, O2=O2)


def _bilinear_resize(src: np.ndarray, out_side: int) -> np.ndarray:
    s = src.shape[0]
    coords = (np.arange(out_side) + 0.5) * (s / out_side) - 0.5
    lo = np.clip(np.floor(coords).astype(int), 0, s - 1)
    hi = np.clip(lo + 1, 0, s - 1)
    frac = np.clip(coords - lo, 0.0, 1.0)
    rows = src[lo][:, lo] * np.outer(1 - frac, 1 - frac) \
        + src[lo][:, hi] * np.outer(1 - frac, frac) \
        + src[hi][:, lo] * np.outer(frac, 1 - frac) \
        + src[hi][:, hi] * np.outer(frac, frac)
    return rows


def resize(src: np.ndarray, out_side: int) -> np.ndarray:
    """Bilinear resize of a square image; exact box average on integer downscale."""
    s = src.shape[0]
    if src.ndim != 2 or src.shape[0] != src.shape[1]:
        raise ShapeError(f"resize: expected a square image, got {src.shape}")
    if s == out_side:
        return src.copy()
    if s % out_side == 0:
        f = s // out_side
        return src.reshape(out_side, f, out_side, f).mean(axis=(1, 3))
    return _bilinear_resize(src, out_side)


def extract_and_resize(image: np.ndarray, anchor: tuple[int, int],
                       side_in_patches: int, spec: GridSpec) -> np.ndarray:
    """Cut the crop at a grid anchor and resize it to H0 x H0 pixels."""
    x, y = anchor
    px, py = x * spec.m, y * spec.m
    size = side_in_patches * spec.m
    if px < 0 or py < 0 or px + size > image.shape[1] or py + size > image.shape[0]:
        raise GeometryError(
            f"crop at grid ({x}, {y}) side {side_in_patches} exceeds image {image.shape}")
    crop = image[py:py + size, px:px + size]
    return np.clip(resize(crop, spec.H0), 0.0, 1.0)


def pool_mask(O1: np.ndarray) -> np.ndarray:
    """2x2 max-pool; a composed cell is in-overlap iff any constituent is."""
    t = O1.shape[0]
    if O1.ndim != 2 or O1.shape[0] != O1.shape[1] or t % 2 != 0:
        raise ShapeError(f"pool_mask: expected an even square mask, got {O1.shape}")
    return O1.reshape(t // 2, 2, t // 2, 2).max(axis=(1, 3))


def upsample_mask(O2: np.ndarray) -> np.ndarray:
    """Nearest-neighbor 2x replication: each cell becomes a 2x2 block."""
    if O2.ndim != 2:
        raise ShapeError(f"upsample_mask: expected a 2-d mask, got {O2.shape}")
    return np.repeat(np.repeat(O2, 2, axis=0), 2, axis=1)


def token_to_grid(spec: GridSpec, crop_role: str, anchor: tuple[int, int],
                  token: tuple[int, int]) -> tuple[tuple[int, int], int]:
    """Map a crop token (row, col) to its grid-patch footprint.

    Returns ((x, y) of the top-left grid patch, extent): extent 1 for a C1
    token, 2 for a C2 token.
    """
    r, c = token
    if not 0 <= r < spec.T or not 0 <= c < spec.T:
        raise IndexRangeError(f"token {token} outside {spec.T}x{spec.T} token grid")
    ax, ay = anchor
    if crop_role == "C1":
        return (ax + c, ay + r), 1
    if crop_role == "C2":
        return (ax + 2 * c, ay + 2 * r), 2
    raise ParameterError(f"crop_role must be 'C1' or 'C2', got {crop_role!r}")
