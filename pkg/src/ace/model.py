"""Toy student/teacher token-map encoders, composer/decomposer heads, EMA updates.

The encoder is a token-mixing MLP: images are cut into T x T pixel patches,
linearly embedded to K dims, then refined by `depth` blocks of
(pre-normalized token mixing + pre-normalized per-token MLP), each with a
residual connection.  It produces the same T x T x K spatial token-map
interface a transformer backbone would, which is all the loss graph needs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np

from . import tensor as tz
from .errors import FormatError, ParameterError, ShapeError
from .tensor import Tensor

EMA_BASE = 0.996  # cosine-scheduled EMA rate runs from this value to 1


@dataclass(frozen=True)
class EncoderConfig:
    K: int = 32
    T: int = 8
    H0: int = 64
    depth: int = 2
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.H0 % self.T != 0:
            raise ParameterError(f"H0 ({self.H0}) must be divisible by T ({self.T})")
        if min(self.K, self.depth + 1, self.hidden) <= 0:
            raise ParameterError("K, hidden must be positive and depth non-negative")
        if self.T % 2 != 0:
            raise ParameterError(f"T must be even, got {self.T}")

    @property
    def patch(self) -> int:
        return self.H0 // self.T

    @property
    def n_tokens(self) -> int:
        return self.T * self.T


@dataclass
class EncoderState:
    """Student parameters, gradient-free EMA teacher, center vector, step count."""

    config: EncoderConfig
    student: dict[str, Tensor]
    teacher: dict[str, np.ndarray]
    center: np.ndarray
    step: int = 0


def _param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    k, n, h = cfg.K, cfg.n_tokens, cfg.hidden
    p2 = cfg.patch * cfg.patch
    shapes: dict[str, tuple[int, ...]] = {"embed.w": (p2, k), "embed.b": (k,)}
    for i in range(cfg.depth):
        b = f"block{i}"
        shapes[f"{b}.norm1.g"] = (k,)
        shapes[f"{b}.norm1.b"] = (k,)
        shapes[f"{b}.mix.w"] = (n, n)
        shapes[f"{b}.norm2.g"] = (k,)
        shapes[f"{b}.norm2.b"] = (k,)
        shapes[f"{b}.mlp.w1"] = (k, h)
        shapes[f"{b}.mlp.b1"] = (h,)
        shapes[f"{b}.mlp.w2"] = (h, k)
        shapes[f"{b}.mlp.b2"] = (k,)
    shapes.update({
        "comp.w1": (4 * k, 4 * k), "comp.b1": (4 * k,),
        "comp.w2": (4 * k, k), "comp.b2": (k,),
        "decomp.w1": (k, 4 * k), "decomp.b1": (4 * k,),
        "decomp.w2": (4 * k, 4 * k), "decomp.b2": (4 * k,),
        "ghead.w1": (k, h), "ghead.b1": (h,),
        "ghead.w2": (h, k), "ghead.b2": (k,),
    })
    return shapes


def init(cfg: EncoderConfig, rng: np.random.Generator) -> EncoderState:
    """Fan-in scaled uniform init; teacher starts as an exact copy of the student."""
    student: dict[str, Tensor] = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith((".b", ".b1", ".b2")) or ".norm" in name:
            data = np.zeros(shape)
        else:
            fan_in = shape[0]
            bound = np.sqrt(3.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        student[name] = Tensor(data, requires_grad=True)
    teacher = {name: t.data.copy() for name, t in student.items()}
    return EncoderState(config=cfg, student=student, teacher=teacher,
                        center=np.zeros(cfg.K), step=0)


def _image_to_patches(cfg: EncoderConfig, image: np.ndarray) -> np.ndarray:
    if image.shape != (cfg.H0, cfg.H0):
        raise ShapeError(f"encode: expected {cfg.H0}x{cfg.H0} image, got {image.shape}")
    p, t = cfg.patch, cfg.T
    return image.reshape(t, p, t, p).transpose(0, 2, 1, 3).reshape(t * t, p * p)


def _affine(x: Tensor, params, prefix: str) -> Tensor:
    return tz.add_rowvec(tz.mul_rowvec(x, params[f"{prefix}.g"]), params[f"{prefix}.b"])


def encode(cfg: EncoderConfig, params: dict[str, Tensor], image: np.ndarray) -> Tensor:
    """Embed an H0 x H0 image into an N x K token matrix (row-major T x T layout)."""
    x = tz.matmul(Tensor(_image_to_patches(cfg, image)), params["embed.w"])
    x = tz.add_rowvec(x, params["embed.b"])
    for i in range(cfg.depth):
        b = f"block{i}"
        y = _affine(tz.row_norm(x), params, f"{b}.norm1")
        y = tz.matmul(params[f"{b}.mix.w"], y)
        x = tz.add(x, y)
        y = _affine(tz.row_norm(x), params, f"{b}.norm2")
        y = tz.add_rowvec(tz.matmul(y, params[f"{b}.mlp.w1"]), params[f"{b}.mlp.b1"])
        y = tz.silu(y)
        y = tz.add_rowvec(tz.matmul(y, params[f"{b}.mlp.w2"]), params[f"{b}.mlp.b2"])
        x = tz.add(x, y)
    return x


def _silu_np(x: np.ndarray) -> np.ndarray:
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return x * s


def _row_norm_np(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def encode_batch(cfg: EncoderConfig, params: dict[str, np.ndarray],
                 images: np.ndarray) -> np.ndarray:
    """Gradient-free batched forward pass, numerically identical to `encode`.

    images: (B, H0, H0) -> token maps (B, N, K).
    """
    if images.ndim == 2:
        images = images[None]
    b = images.shape[0]
    p, t = cfg.patch, cfg.T
    if images.shape[1:] != (cfg.H0, cfg.H0):
        raise ShapeError(f"encode_batch: expected {cfg.H0}x{cfg.H0} images, got {images.shape}")
    x = images.reshape(b, t, p, t, p).transpose(0, 1, 3, 2, 4).reshape(b, t * t, p * p)
    x = x @ params["embed.w"] + params["embed.b"]
    for i in range(cfg.depth):
        bl = f"block{i}"
        y = _row_norm_np(x) * params[f"{bl}.norm1.g"] + params[f"{bl}.norm1.b"]
        y = params[f"{bl}.mix.w"] @ y
        x = x + y
        y = _row_norm_np(x) * params[f"{bl}.norm2.g"] + params[f"{bl}.norm2.b"]
        y = _silu_np(y @ params[f"{bl}.mlp.w1"] + params[f"{bl}.mlp.b1"])
        y = y @ params[f"{bl}.mlp.w2"] + params[f"{bl}.mlp.b2"]
        x = x + y
    return x


@lru_cache(maxsize=None)
def _compose_gather(t: int) -> np.ndarray:
    # rows 4i..4i+3 are the 2x2 block members of composed cell i, row-major
    idx = []
    for r in range(0, t, 2):
        for c in range(0, t, 2):
            idx.extend([r * t + c, r * t + c + 1, (r + 1) * t + c, (r + 1) * t + c + 1])
    return np.asarray(idx, dtype=np.intp)


@lru_cache(maxsize=None)
def _decompose_scatter(t: int) -> np.ndarray:
    # perm[k] = source row in the chunked (4N x K) layout for output row k
    # of the row-major (2T x 2T) sub-token grid
    perm = []
    for rr in range(2 * t):
        for cc in range(2 * t):
            i = (rr // 2) * t + (cc // 2)
            j = (rr % 2) * 2 + (cc % 2)
            perm.append(4 * i + j)
    return np.asarray(perm, dtype=np.intp)


def compose_head(cfg: EncoderConfig, params: dict[str, Tensor], tokens: Tensor) -> Tensor:
    """Merge each 2x2 token block (concatenated to 4K dims) through a 2-layer MLP.

    Input N x K with T x T layout; output (N/4) x K with (T/2) x (T/2) layout.
    """
    n, k = tokens.data.shape
    t = int(np.sqrt(n))
    if t * t != n or t % 2 != 0:
        raise ShapeError(f"compose_head: token count {n} is not an even square")
    grouped = tz.reshape(tz.take_rows(tokens, _compose_gather(t)), (n // 4, 4 * k))
    y = tz.add_rowvec(tz.matmul(grouped, params["comp.w1"]), params["comp.b1"])
    y = tz.silu(y)
    return tz.add_rowvec(tz.matmul(y, params["comp.w2"]), params["comp.b2"])


def decompose_head(cfg: EncoderConfig, params: dict[str, Tensor], tokens: Tensor) -> Tensor:
    """Expand each token to 4K dims through a 2-layer MLP, then chunk into 2x2 sub-tokens.

    Input N x K with T x T layout; output 4N x K with (2T) x (2T) layout.
    """
    n, k = tokens.data.shape
    t = int(np.sqrt(n))
    if t * t != n:
        raise ShapeError(f"decompose_head: token count {n} is not a square")
    y = tz.add_rowvec(tz.matmul(tokens, params["decomp.w1"]), params["decomp.b1"])
    y = tz.silu(y)
    y = tz.add_rowvec(tz.matmul(y, params["decomp.w2"]), params["decomp.b2"])
    chunked = tz.reshape(y, (4 * n, k))
    return tz.take_rows(chunked, _decompose_scatter(t))


def global_head(cfg: EncoderConfig, params: dict[str, Tensor], pooled: Tensor) -> Tensor:
    """Projection for the pooled global branch, keeping it off the token dims
    the positional matching losses compete for.  (K,) -> (K,)."""
    x = tz.reshape(pooled, (1, pooled.data.shape[0]))
    y = tz.silu(tz.add_rowvec(tz.matmul(x, params["ghead.w1"]), params["ghead.b1"]))
    y = tz.add_rowvec(tz.matmul(y, params["ghead.w2"]), params["ghead.b2"])
    return tz.reshape(y, (cfg.K,))


def global_head_np(params: dict[str, np.ndarray], pooled: np.ndarray) -> np.ndarray:
    """Gradient-free mirror of `global_head` for the teacher side."""
    y = _silu_np(pooled @ params["ghead.w1"] + params["ghead.b1"])
    return y @ params["ghead.w2"] + params["ghead.b2"]


def teacher_params(state: EncoderState) -> dict[str, Tensor]:
    """Teacher weights wrapped as constant tensors (never tracked for gradients)."""
    return {name: Tensor(arr) for name, arr in state.teacher.items()}


def ema_lambda(step: int, total_steps: int) -> float:
    """Cosine schedule of the teacher EMA rate, from 0.996 at step 0 to 1 at the end."""
    if total_steps <= 0:
        raise ParameterError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    return 1.0 - (1.0 - EMA_BASE) * (np.cos(np.pi * step / total_steps) + 1.0) / 2.0


def ema_update(state: EncoderState, lam: float) -> None:
    """teacher <- lam * teacher + (1 - lam) * student, in place."""
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"EMA rate must lie in [0, 1], got {lam}")
    for name, arr in state.teacher.items():
        arr *= lam
        arr += (1.0 - lam) * state.student[name].data


# ---------------------------------------------------------------------------
# checkpoint container: magic "ACE1", JSON header, float64 little-endian blobs

_MAGIC = b"ACE1"
_VERSION = 1


def write_blob_file(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header["blobs"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()]
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(raw)))
        f.write(raw)
        for a in arrays.values():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_blob_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        head = f.read(12)
        if len(head) != 12:
            raise FormatError(f"{path}: truncated header")
        version, hlen = struct.unpack("<IQ", head)
        if version != _VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        raw = f.read(hlen)
        if len(raw) != hlen:
            raise FormatError(f"{path}: truncated header payload")
        header = json.loads(raw.decode("utf-8"))
        arrays = {}
        for blob in header.pop("blobs"):
            shape = tuple(blob["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise FormatError(f"{path}: truncated blob {blob['name']!r}")
            arrays[blob["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header, arrays


def save_state(path, state: EncoderState, extra: dict | None = None,
               extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    header = {"config": asdict(state.config), "step": state.step, "extra": extra or {}}
    arrays: dict[str, np.ndarray] = {"center": state.center}
    for name, t in state.student.items():
        arrays[f"student.{name}"] = t.data
    for name, a in state.teacher.items():
        arrays[f"teacher.{name}"] = a
    for name, a in (extra_arrays or {}).items():
        arrays[f"extra.{name}"] = a
    write_blob_file(path, header, arrays)


def load_state(path) -> tuple[EncoderState, dict, dict[str, np.ndarray]]:
    header, arrays = read_blob_file(path)
    cfg = EncoderConfig(**header["config"])
    student = {}
    teacher = {}
    extra_arrays = {}
    center = arrays.pop("center")
    for name, a in arrays.items():
        if name.startswith("student."):
            student[name[len("student."):]] = Tensor(a, requires_grad=True)
        elif name.startswith("teacher."):
            teacher[name[len("teacher."):]] = a
        elif name.startswith("extra."):
            extra_arrays[name[len("extra."):]] = a
    state = EncoderState(config=cfg, student=student, teacher=teacher,
                         center=center, step=int(header["step"]))
    return state, header.get("extra", {}), extra_arrays
