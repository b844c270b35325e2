"""Procedural phantom images with a fixed body plan and exact landmark ground truth.

Every phantom shares one canonical layout: two lateral lobes (ellipses),
a medial disc, a ladder of rib bars and two clavicle arcs, all mirror
symmetric about the vertical center line.  Per-instance jitter translates
and rescales each structure; landmarks move with their structure, so the
ground truth is exact by construction.  Images are written as 16-bit
binary PGM (P5) files plus a tab-separated manifest.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

LANDMARK_NAMES = (
    "left_lobe_center", "right_lobe_center",
    "left_lobe_apex", "right_lobe_apex",
    "left_clavicle_tip", "right_clavicle_tip",
    "left_rib2", "right_rib2",
    "disc_center",
)

# landmark pairs mirrored about the vertical center line (used by the symmetry probe)
MIRROR_PAIRS = (
    ("left_lobe_center", "right_lobe_center"),
    ("left_lobe_apex", "right_lobe_apex"),
    ("left_clavicle_tip", "right_clavicle_tip"),
    ("left_rib2", "right_rib2"),
)


@dataclass(frozen=True)
class PhantomSpec:
    side: int = 256
    jitter_translate: float = 0.04   # fraction of side, per structure
    jitter_scale: float = 0.12       # relative scale jitter, per structure
    intensity_noise: float = 0.02    # additive Gaussian sigma
    texture_amp: float = 0.15        # per-structure sinusoidal texture amplitude
    background: float = 0.12
    # instance-wide appearance: exposure-like parameters drawn once per
    # phantom and visible in every crop (background shift, intensity gain,
    # low-frequency illumination field)
    bg_jitter: float = 0.05
    gain_jitter: float = 0.25
    field_amp: float = 0.12
    # identity weave: a per-instance subset of oriented gratings at fixed
    # cycles-per-pixel slots, multiplied into the whole image.  Stationary, so
    # every crop of an instance carries the same signature.  Off by default:
    # it adds crop-readable instance identity for retrieval experiments but
    # degrades landmark-level feature quality.
    weave_amp: float = 0.0
    # per-structure intensity levels drawn once per instance
    level_jitter: float = 0.25
    # background mosaic: smooth random regions quantized to a per-instance set
    # of brightness plateaus; plateau values survive resizing exactly, so the
    # brightness distribution of any crop identifies the instance.  Off by
    # default for the same reason as the weave.
    mosaic_contrast: float = 0.0
    mosaic_levels: int = 5
    mosaic_scale: float = 0.04   # blob smoothing sigma as a fraction of side

    def __post_init__(self):
        if self.side <= 0:
            raise ParameterError(f"side must be positive, got {self.side}")
        if not 0 <= self.jitter_translate < 0.1 or not 0 <= self.jitter_scale < 0.3:
            raise ParameterError("jitter amplitudes out of the supported envelope")
        if not 0 <= self.bg_jitter < 0.1 or not 0 <= self.gain_jitter < 0.5 \
                or not 0 <= self.field_amp < 0.5:
            raise ParameterError("appearance amplitudes out of the supported envelope")
        if not 0 <= self.weave_amp < 0.3 or not 0 <= self.level_jitter < 0.5:
            raise ParameterError("weave/level amplitudes out of the supported envelope")
        if not 0 <= self.mosaic_contrast < 0.35 or not 1 <= self.mosaic_levels <= 8 \
                or not 0 < self.mosaic_scale < 0.2:
            raise ParameterError("mosaic parameters out of the supported envelope")


@dataclass(frozen=True)
class Phantom:
    image: np.ndarray
    landmarks: dict[str, tuple[float, float]]
    instance_id: str
    seed: int


# identity-weave parameters: oriented broadband noise.  Orientation survives
# resizing (absolute spatial frequency does not), so the per-instance subset
# of active orientations is readable from any crop at any view scale.
_WEAVE_ORIENTS = 12       # number of orientation slots over [0, pi)
_WEAVE_ACTIVE = 3         # active slots per instance
_WEAVE_BAND = (0.05, 0.35)  # native band, cycles per pixel
_WEAVE_HALFWIDTH = np.pi / 24


def _soft_mask(dist: np.ndarray, width: float) -> np.ndarray:
    # smooth 1 inside (dist < 0), 0 outside, logistic edge of the given width
    return 1.0 / (1.0 + np.exp(np.clip(dist / width, -40, 40)))


def generate(rng: np.random.Generator, spec: PhantomSpec,
             instance_id: str = "phantom", seed: int = 0) -> Phantom:
    """Render one phantom; deterministic given the generator state."""
    s = spec.side
    cx = (s - 1) / 2.0
    yy, xx = np.mgrid[0:s, 0:s].astype(float)

    def jitter():
        dx = rng.uniform(-spec.jitter_translate, spec.jitter_translate) * s
        dy = rng.uniform(-spec.jitter_translate, spec.jitter_translate) * s
        sc = rng.uniform(1.0 - spec.jitter_scale, 1.0 + spec.jitter_scale)
        return dx, dy, sc

    def texture(freq_lo=3.0, freq_hi=7.0):
        fx = rng.uniform(freq_lo, freq_hi)
        fy = rng.uniform(freq_lo, freq_hi)
        px = rng.uniform(0, 2 * np.pi)
        py = rng.uniform(0, 2 * np.pi)
        return 1.0 + spec.texture_amp * np.sin(2 * np.pi * fx * xx / s + px) \
            * np.sin(2 * np.pi * fy * yy / s + py)

    # instance-wide appearance parameters, drawn before any structure so the
    # per-structure stream stays aligned across spec variants
    bg = spec.background + rng.uniform(-spec.bg_jitter, spec.bg_jitter)
    gain = 1.0 + rng.uniform(-spec.gain_jitter, spec.gain_jitter)
    ffx = rng.uniform(0.5, 2.5)
    ffy = rng.uniform(0.5, 2.5)
    fpx = rng.uniform(0, 2 * np.pi)
    fpy = rng.uniform(0, 2 * np.pi)
    def level():
        return 1.0 + spec.level_jitter * rng.uniform(-1.0, 1.0)

    img = np.full((s, s), bg)
    landmarks: dict[str, tuple[float, float]] = {}

    # lateral lobes
    lobe_off = 0.18 * s
    lobe_cy = 0.45 * s
    lobe_ax, lobe_ay = 0.125 * s, 0.21 * s
    lobe_masks = {}
    for name, sign in (("left", -1.0), ("right", 1.0)):
        dx, dy, sc = jitter()
        ecx, ecy = cx + sign * lobe_off + dx, lobe_cy + dy
        ax, ay = lobe_ax * sc, lobe_ay * sc
        dist = np.sqrt(((xx - ecx) / ax) ** 2 + ((yy - ecy) / ay) ** 2) - 1.0
        mask = _soft_mask(dist * min(ax, ay), 1.5)
        img += 0.34 * level() * mask * texture()
        lobe_masks[name] = mask
        landmarks[f"{name}_lobe_center"] = (ecx, ecy)
        landmarks[f"{name}_lobe_apex"] = (ecx, ecy - ay)

    # rib ladder: four horizontal bars clipped to the lobe masks
    dxr, dyr, scr = jitter()
    rib_ys = (np.array([0.32, 0.42, 0.52, 0.62]) * s - lobe_cy) * scr + lobe_cy + dyr
    rib_h = 0.012 * s * scr
    bars = np.zeros_like(img)
    for ry in rib_ys:
        bars += _soft_mask(np.abs(yy - ry) - rib_h, 1.0)
    both_lobes = np.clip(lobe_masks["left"] + lobe_masks["right"], 0.0, 1.0)
    img += 0.18 * level() * bars * both_lobes * texture(5.0, 9.0)
    rib2_y = rib_ys[1]
    landmarks["left_rib2"] = (landmarks["left_lobe_center"][0] + dxr, rib2_y)
    landmarks["right_rib2"] = (landmarks["right_lobe_center"][0] + dxr, rib2_y)

    # clavicle arcs: shallow parabolic ridges above each lobe
    for name, sign in (("left", -1.0), ("right", 1.0)):
        dx, dy, sc = jitter()
        ccx = cx + sign * lobe_off + dx
        ccy = 0.22 * s + dy
        span = 0.13 * s * sc
        arc_y = ccy + 0.18 * ((xx - ccx) / span) ** 2 * span
        in_span = _soft_mask(np.abs(xx - ccx) - span, 1.5)
        img += 0.22 * level() * _soft_mask(np.abs(yy - arc_y) - 0.011 * s, 1.0) * in_span
        tip_x = ccx + sign * span
        landmarks[f"{name}_clavicle_tip"] = (tip_x, ccy + 0.18 * span)

    # medial disc
    dx, dy, sc = jitter()
    dcx, dcy, dr = cx + dx, 0.74 * s + dy, 0.085 * s * sc
    dist = np.sqrt((xx - dcx) ** 2 + (yy - dcy) ** 2) - dr
    img += 0.30 * level() * _soft_mask(dist, 1.5) * texture(2.0, 5.0)
    landmarks["disc_center"] = (dcx, dcy)

    # multiply in the identity weave: per-instance subset of orientation slots,
    # each carrying band-limited noise at that orientation
    if spec.weave_amp > 0:
        slots = rng.choice(_WEAVE_ORIENTS, size=_WEAVE_ACTIVE, replace=False)
        gains = rng.uniform(0.8, 1.2, size=_WEAVE_ACTIVE)
        fy = np.fft.fftfreq(s)[:, None]
        fx = np.fft.fftfreq(s)[None, :]
        radius = np.hypot(fx, fy)
        angle = np.arctan2(fy * np.ones_like(fx), fx * np.ones_like(fy)) % np.pi
        in_band = (radius > _WEAVE_BAND[0]) & (radius < _WEAVE_BAND[1])
        weave = np.ones_like(img)
        for slot, g in zip(slots, gains):
            theta = slot * np.pi / _WEAVE_ORIENTS
            d = np.abs(((angle - theta + np.pi / 2) % np.pi) - np.pi / 2)
            spectrum = np.fft.fft2(rng.normal(size=(s, s)))
            spectrum[~(in_band & (d < _WEAVE_HALFWIDTH))] = 0.0
            noise = np.fft.ifft2(spectrum).real
            weave += spec.weave_amp * g * noise / noise.std()
        img *= weave

    # add the background mosaic: a smoothed noise field quantized into
    # equal-area regions, each assigned a per-instance brightness plateau
    if spec.mosaic_contrast > 0 and spec.mosaic_levels > 1:
        sigma = spec.mosaic_scale * s
        mfy = np.fft.fftfreq(s)[:, None]
        mfx = np.fft.fftfreq(s)[None, :]
        spectrum = np.fft.fft2(rng.normal(size=(s, s)))
        spectrum *= np.exp(-2.0 * np.pi ** 2 * sigma ** 2 * (mfx ** 2 + mfy ** 2))
        blobs = np.fft.ifft2(spectrum).real
        cuts = np.quantile(blobs, np.linspace(0, 1, spec.mosaic_levels + 1)[1:-1])
        plateaus = rng.uniform(-spec.mosaic_contrast, spec.mosaic_contrast,
                               size=spec.mosaic_levels)
        img += plateaus[np.digitize(blobs, cuts)]

    # apply the instance-wide illumination field and gain
    if spec.field_amp > 0:
        field = 1.0 + spec.field_amp * np.sin(2 * np.pi * ffx * xx / s + fpx) \
            * np.sin(2 * np.pi * ffy * yy / s + fpy)
        img *= field
    img *= gain

    if spec.intensity_noise > 0:
        img += rng.normal(0.0, spec.intensity_noise, size=img.shape)

    img = np.clip(img, 0.0, 1.0)
    return Phantom(image=img, landmarks=landmarks, instance_id=instance_id, seed=seed)


# ---------------------------------------------------------------------------
# PGM (P5) reading and writing


def write_image(path, image: np.ndarray) -> None:
    """16-bit binary PGM; quantization error is at most 1/65535 per pixel."""
    h, w = image.shape
    q = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(q.tobytes())


def read_image(path) -> np.ndarray:
    """Read binary PGM (P5), 8- or 16-bit, into floats in [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise FormatError(f"{path}: not a P5 PGM (offset 0)")
    pos = 2
    fields = []
    while len(fields) < 3:
        m = re.compile(rb"\s*(?:#[^\n]*\n)*\s*(\d+)").match(raw, pos)
        if not m:
            raise FormatError(f"{path}: malformed header near byte {pos}")
        fields.append(int(m.group(1)))
        pos = m.end()
    w, h, maxval = fields
    if maxval not in (255, 65535):
        raise FormatError(f"{path}: unsupported maxval {maxval} (offset {pos})")
    pos += 1  # single whitespace byte after maxval
    itemsize = 1 if maxval == 255 else 2
    need = w * h * itemsize
    payload = raw[pos:pos + need]
    if len(payload) != need:
        raise FormatError(
            f"{path}: truncated payload at byte {pos + len(payload)}, need {need} bytes")
    dtype = np.uint8 if maxval == 255 else ">u2"
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w).astype(float)
    return arr / maxval


# ---------------------------------------------------------------------------
# manifest: UTF-8, tab separated, paths relative to the manifest file

MANIFEST_NAME = "manifest.tsv"


def build_manifest(directory, phantoms: list[Phantom]) -> Path:
    """Write images (if absent) plus the manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cols = ["instance_id", "path"] + [f"{n}_x\t{n}_y" for n in LANDMARK_NAMES] + ["seed"]
    lines = ["\t".join(cols)]
    for ph in phantoms:
        rel = f"{ph.instance_id}.pgm"
        img_path = directory / rel
        if not img_path.exists():
            write_image(img_path, ph.image)
        row = [ph.instance_id, rel]
        for name in LANDMARK_NAMES:
            x, y = ph.landmarks[name]
            row.append(repr(float(x)))
            row.append(repr(float(y)))
        row.append(str(ph.seed))
        lines.append("\t".join(row))
    manifest = directory / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_manifest(manifest_path, load_images: bool = True) -> list[Phantom]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    lines = manifest_path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError(f"{manifest_path}: empty manifest")
    phantoms = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 + 2 * len(LANDMARK_NAMES):
            raise FormatError(f"{manifest_path}:{lineno}: wrong column count {len(parts)}")
        instance_id, rel = parts[0], parts[1]
        seed = int(parts[-1])
        coords = [float(v) for v in parts[2:-1]]
        landmarks = {name: (coords[2 * i], coords[2 * i + 1])
                     for i, name in enumerate(LANDMARK_NAMES)}
        img_path = base / rel
        if load_images:
            if not img_path.exists():
                raise FormatError(
                    f"{manifest_path}:{lineno}: record {instance_id!r} names missing file {rel}")
            image = read_image(img_path)
        else:
            image = np.zeros((0, 0))
        phantoms.append(Phantom(image=image, landmarks=landmarks,
                                instance_id=instance_id, seed=seed))
    return phantoms


def instance_rng(master_seed: int, index: int) -> tuple[np.random.Generator, int]:
    """Per-instance RNG stream derived deterministically from the master seed."""
    ss = np.random.SeedSequence(entropy=(int(master_seed), int(index)))
    return np.random.default_rng(ss), index


def generate_dataset(directory, count: int, spec: PhantomSpec, master_seed: int) -> Path:
    """Generate `count` phantoms, write PGMs and the manifest; returns manifest path."""
    phantoms = []
    for i in range(count):
        rng, _ = instance_rng(master_seed, i)
        phantoms.append(generate(rng, spec, instance_id=f"phantom{i:05d}", seed=i))
    return build_manifest(directory, phantoms)
