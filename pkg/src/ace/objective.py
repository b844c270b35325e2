"""Correspondence targets and the three-term pretraining loss.

Target matrices pair teacher tokens (rows) with student head outputs
(columns).  Composition: teacher C2 tokens vs composed student C1 cells,
both living on the 2m-block scale.  Decomposition: teacher C1 tokens vs
decomposed student C2 sub-cells, both on the m-patch scale.  Exact spatial
matches get value 1 and neighbors within the kernel radius get Gaussian
weights; kernel mass falling outside the overlap stays 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .cropgrid import CropPair, GridSpec
from .errors import DomainError, EmptyOverlapError, ParameterError, ShapeError
from .tensor import Tensor

DEFAULT_LAMBDA1 = 0.1
DEFAULT_LAMBDA2 = 1.0
DEFAULT_LAMBDA3 = 1.0
DEFAULT_ALPHA_COMP = 0.9
DEFAULT_ALPHA_DECOMP = 0.99
CENTER_RATE = 0.9


@dataclass(frozen=True)
class MatchTarget:
    """Gaussian-smoothed correspondence target plus its kernel parameters."""

    matrix: np.ndarray
    kernel_size: int
    sigma: float
    role: str


@dataclass(frozen=True)
class LossBreakdown:
    global_term: float
    comp_term: float
    decomp_term: float
    total: float
    lambda1: float
    lambda2: float
    lambda3: float


def gaussian_kernel(k: int, sigma: float) -> np.ndarray:
    """Centered k x k evaluation of exp(-(x^2 + y^2) / (2 sigma^2)); center is 1."""
    if k <= 0 or k % 2 == 0:
        raise ParameterError(f"kernel size must be odd and positive, got {k}")
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    half = (k - 1) // 2
    ax = np.arange(-half, half + 1, dtype=float)
    xx, yy = np.meshgrid(ax, ax, indexing="xy")
    return np.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma ** 2))


def build_target(pair: CropPair, spec: GridSpec, role: str,
                 k: int = 3, sigma: float = 1.0) -> MatchTarget:
    """Target matrix for one crop pair.

    composition   -> shape (N, N/4): C2 teacher tokens x composed C1 cells.
    decomposition -> shape (N, 4N):  C1 teacher tokens x decomposed C2 sub-cells.
    """
    if role not in ("composition", "decomposition"):
        raise ParameterError(f"role must be composition or decomposition, got {role!r}")
    t = spec.T
    n = t * t
    half_k = (k - 1) // 2
    kern = gaussian_kernel(k, sigma)
    ox = (pair.anchor1[0] - pair.anchor2[0]) // 2
    oy = (pair.anchor1[1] - pair.anchor2[1]) // 2
    h = t // 2

    if role == "composition":
        target = np.zeros((n, n // 4))
        # every composed C1 cell is in the overlap (C1 lies inside C2)
        for cr in range(h):
            for cc in range(h):
                col = cr * h + cc
                tr0, tc0 = cr + oy, cc + ox  # exact-match C2 token
                for dr in range(-half_k, half_k + 1):
                    for dc in range(-half_k, half_k + 1):
                        r, c = tr0 + dr, tc0 + dc
                        # clip kernel mass outside the overlap block
                        if oy <= r < oy + h and ox <= c < ox + h:
                            target[r * t + c, col] = kern[dr + half_k, dc + half_k]
    else:
        target = np.zeros((n, 4 * n))
        # decomposed C2 sub-cells live on a (2T x 2T) m-patch lattice;
        # the in-overlap window is the T x T block at offset (2*oy, 2*ox)
        for rr in range(2 * oy, 2 * oy + t):
            for cc in range(2 * ox, 2 * ox + t):
                col = rr * 2 * t + cc
                tr0, tc0 = rr - 2 * oy, cc - 2 * ox  # exact-match C1 token
                for dr in range(-half_k, half_k + 1):
                    for dc in range(-half_k, half_k + 1):
                        r, c = tr0 + dr, tc0 + dc
                        if 0 <= r < t and 0 <= c < t:
                            target[r * t + c, col] = kern[dr + half_k, dc + half_k]
    return MatchTarget(matrix=target, kernel_size=k, sigma=sigma, role=role)


def matching_logits(y_teacher: Tensor, y_student_head: Tensor) -> Tensor:
    """Pre-sigmoid inner-product matrix: rows index teacher tokens."""
    if y_teacher.data.shape[1] != y_student_head.data.shape[1]:
        raise ShapeError(
            f"matching: embedding dims differ, {y_teacher.data.shape} vs {y_student_head.data.shape}")
    return tz.matmul(y_teacher, tz.transpose(y_student_head))


def matching_matrix(y_teacher: Tensor, y_student_head: Tensor) -> Tensor:
    """sigmoid of the teacher-by-student inner products, entries in (0, 1)."""
    return tz.sigmoid(matching_logits(y_teacher, y_student_head))


def matching_loss(m: Tensor, target: MatchTarget, alpha: float,
                  positive_only: bool = False) -> Tensor:
    """Weighted binary matching loss on an explicit probability matrix.

    L = -mean over rows of sum_cols[ alpha*T*log M + (1-alpha)*(1-T)*log(1-M) ].
    The positive-only variant drops the second term (it then exerts no
    downward force on unpaired entries).
    """
    t = target.matrix
    if m.data.shape != t.shape:
        raise ShapeError(f"matching_loss: matrix {m.data.shape} vs target {t.shape}")
    if np.any(m.data <= 0.0) or np.any(m.data >= 1.0):
        raise DomainError("matching_loss: matrix entries must lie strictly in (0, 1)")
    rows = t.shape[0]
    pos = tz.mul(Tensor(alpha * t), tz.log(m))
    if positive_only:
        total = pos
    else:
        one_minus = tz.sub(Tensor(np.ones_like(m.data)), m)
        neg = tz.mul(Tensor((1.0 - alpha) * (1.0 - t)), tz.log(one_minus))
        total = tz.add(pos, neg)
    return tz.scale(tz.tensor_sum(total), -1.0 / rows)


def matching_loss_logits(z: Tensor, target: MatchTarget, alpha: float,
                         positive_only: bool = False) -> Tensor:
    """Numerically stable matching loss taken directly on pre-sigmoid logits."""
    return tz.weighted_match_loss_logits(z, target.matrix, alpha,
                                         positive_only=positive_only)


def teacher_distribution(t_pooled: np.ndarray, center: np.ndarray, tau_t: float) -> np.ndarray:
    """Detached teacher softmax with optional centering shift applied first."""
    if tau_t <= 0:
        raise ParameterError(f"teacher temperature must be positive, got {tau_t}")
    z = (t_pooled - center) / tau_t
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def global_loss(y_s: Tensor, y_t: np.ndarray, o_s: np.ndarray, o_t: np.ndarray,
                tau_s: float, tau_t: float, center: np.ndarray,
                student_head=None, teacher_head=None):
    """Cross-entropy between pooled-overlap teacher and student distributions.

    Optional head callables project the pooled embeddings before the
    temperature softmaxes.  Returns (loss tensor, pooled teacher output);
    the caller owns the center vector and updates it from the latter.
    """
    s_pooled = tz.masked_mean_pool(y_s, o_s.reshape(-1))
    if student_head is not None:
        s_pooled = student_head(s_pooled)
    mask = o_t.reshape(-1).astype(bool)
    if not mask.any():
        raise EmptyOverlapError("global_loss: teacher overlap mask is empty")
    t_pooled = y_t[mask].mean(axis=0)
    if teacher_head is not None:
        t_pooled = teacher_head(t_pooled)
    p_t = teacher_distribution(t_pooled, center, tau_t)
    loss = tz.cross_entropy_with_logits(p_t, s_pooled, tau_s)
    return loss, t_pooled


def update_center(center: np.ndarray, t_pooled_mean: np.ndarray,
                  rate: float = CENTER_RATE) -> np.ndarray:
    """EMA of teacher pooled outputs, the collapse guard for the global branch."""
    return rate * center + (1.0 - rate) * t_pooled_mean


def total_loss(global_term: Tensor, comp_term: Tensor, decomp_term: Tensor,
               lambda1: float = DEFAULT_LAMBDA1, lambda2: float = DEFAULT_LAMBDA2,
               lambda3: float = DEFAULT_LAMBDA3):
    """Weighted sum of the three branches; returns (tensor, breakdown record)."""
    total = tz.add(tz.add(tz.scale(global_term, lambda1), tz.scale(comp_term, lambda2)),
                   tz.scale(decomp_term, lambda3))
    breakdown = LossBreakdown(
        global_term=global_term.item(), comp_term=comp_term.item(),
        decomp_term=decomp_term.item(), total=total.item(),
        lambda1=lambda1, lambda2=lambda2, lambda3=lambda3)
    return total, breakdown
