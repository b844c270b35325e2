"""Pretraining loop: crop-pair batching, photometric augmentation, the two
forward passes per pair, AdamW with warmup/cosine schedules, gradient
clipping, EMA teacher updates, checkpointing and per-step metrics.

Single-threaded execution is bit deterministic: one RNG drives phantom
order, crop sampling and augmentation, and its state travels with the
checkpoint so a resumed run reproduces the uninterrupted metrics stream.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import cropgrid, model, objective
from . import tensor as tz
from .config import RunConfig
from .errors import AceError, ParameterError
from .synthgen import load_manifest
from .tensor import Tape, Tensor

METRICS_NAME = "metrics.jsonl"
CHECKPOINT_NAME = "checkpoint.ace"


@dataclass
class StepRecord:
    step: int
    epoch: int
    ema_lambda: float
    lr: float
    weight_decay: float
    loss_global: float
    loss_comp: float
    loss_decomp: float
    loss_total: float
    grad_norm: float


# ---------------------------------------------------------------------------
# schedules


def learning_rate(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * (step - warmup_steps) / span))


def weight_decay(step: int, total_steps: int, start: float, end: float) -> float:
    """Cosine ramp from start at step 0 to end at total_steps."""
    if not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    return start + (end - start) * (1.0 - np.cos(np.pi * step / total_steps)) / 2.0


# ---------------------------------------------------------------------------
# augmentation


def augment(rng: np.random.Generator, image: np.ndarray, brightness: float = 0.1,
            contrast: float = 0.1, noise: float = 0.02, blur_prob: float = 0.0) -> np.ndarray:
    """Photometric-only transform; pixel positions never move."""
    out = image
    c = 1.0 + rng.uniform(-contrast, contrast)
    out = (out - 0.5) * c + 0.5
    out = out + rng.uniform(-brightness, brightness)
    if noise > 0:
        out = out + rng.normal(0.0, noise, size=image.shape)
    if rng.random() < blur_prob:
        # mild 3x3 binomial blur, reflect padding
        pad = np.pad(out, 1, mode="edge")
        out = (pad[:-2, 1:-1] + pad[2:, 1:-1] + pad[1:-1, :-2] + pad[1:-1, 2:]
               + 4.0 * pad[1:-1, 1:-1] + pad[:-2, :-2] + pad[:-2, 2:]
               + pad[2:, :-2] + pad[2:, 2:]) / 12.0
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay; state keyed like the parameter dict."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float, wd: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            # decay is skipped for norm gains/biases and other 1-d parameters
            if p.data.ndim > 1:
                update = update + wd * p.data
            p.data -= lr * update

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int):
        self.t = t
        for name in self.params:
            self.m[name] = arrays[f"opt.m.{name}"].copy()
            self.v[name] = arrays[f"opt.v.{name}"].copy()


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Global-norm clipping; returns the pre-clip norm."""
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(sq))
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# the training step


def _pair_losses(state: model.EncoderState, image: np.ndarray, pair: cropgrid.CropPair,
                 cfg: RunConfig, spec: cropgrid.GridSpec, rng: np.random.Generator):
    """Forward passes and the three loss terms for one crop pair."""
    enc = state.config
    c1_img = augment(rng, cropgrid.extract_and_resize(image, pair.anchor1, spec.c1, spec),
                     cfg.aug_brightness, cfg.aug_contrast, cfg.aug_noise, cfg.aug_blur)
    c2_img = augment(rng, cropgrid.extract_and_resize(image, pair.anchor2, spec.c2, spec),
                     cfg.aug_brightness, cfg.aug_contrast, cfg.aug_noise, cfg.aug_blur)

    s1 = model.encode(enc, state.student, c1_img)
    s2 = model.encode(enc, state.student, c2_img)
    t_arrays = state.teacher
    t1 = model.encode_batch(enc, t_arrays, c1_img)[0]
    t2 = model.encode_batch(enc, t_arrays, c2_img)[0]

    # composition: C1 -> student -> composer vs C2 -> teacher
    comp_target = objective.build_target(pair, spec, "composition",
                                         k=cfg.kernel_size, sigma=cfg.kernel_sigma)
    z_comp = objective.matching_logits(Tensor(t2), model.compose_head(enc, state.student, s1))
    loss_comp = objective.matching_loss_logits(z_comp, comp_target, cfg.alpha_comp,
                                               positive_only=cfg.positive_only)

    # decomposition: C2 -> student -> decomposer vs C1 -> teacher
    decomp_target = objective.build_target(pair, spec, "decomposition",
                                           k=cfg.kernel_size, sigma=cfg.kernel_sigma)
    z_dec = objective.matching_logits(Tensor(t1), model.decompose_head(enc, state.student, s2))
    loss_decomp = objective.matching_loss_logits(z_dec, decomp_target, cfg.alpha_decomp,
                                                 positive_only=cfg.positive_only)

    # global: pooled overlap embeddings through the projection heads,
    # both orderings averaged
    s_head = lambda pooled: model.global_head(enc, state.student, pooled)
    t_head = lambda pooled: model.global_head_np(t_arrays, pooled)
    g1, tp2 = objective.global_loss(s1, t2, pair.O1, pair.O2,
                                    cfg.tau_student, cfg.tau_teacher, state.center,
                                    student_head=s_head, teacher_head=t_head)
    g2, tp1 = objective.global_loss(s2, t1, pair.O2, pair.O1,
                                    cfg.tau_student, cfg.tau_teacher, state.center,
                                    student_head=s_head, teacher_head=t_head)
    loss_global = tz.scale(tz.add(g1, g2), 0.5)
    return loss_global, loss_comp, loss_decomp, 0.5 * (tp1 + tp2)


def train_step(state: model.EncoderState, opt: AdamW,
               batch: list[tuple[np.ndarray, cropgrid.CropPair]], cfg: RunConfig,
               spec: cropgrid.GridSpec, rng: np.random.Generator,
               total_steps: int, warmup_steps: int, epoch: int) -> StepRecord:
    local_scale = 0.5 if cfg.local_halving else 1.0
    with Tape():
        g_terms, c_terms, d_terms = [], [], []
        pooled = []
        for image, pair in batch:
            lg, lc, ld, tp = _pair_losses(state, image, pair, cfg, spec, rng)
            g_terms.append(lg)
            c_terms.append(lc)
            d_terms.append(ld)
            pooled.append(tp)

        def batch_mean(terms):
            acc = terms[0]
            for t in terms[1:]:
                acc = tz.add(acc, t)
            return tz.scale(acc, 1.0 / len(terms))

        total, breakdown = objective.total_loss(
            batch_mean(g_terms), batch_mean(c_terms), batch_mean(d_terms),
            lambda1=cfg.lambda_global, lambda2=cfg.lambda_comp * local_scale,
            lambda3=cfg.lambda_decomp * local_scale)
        if not np.isfinite(total.item()):
            anchors = [(p.anchor1, p.anchor2) for _, p in batch]
            raise AceError(f"non-finite loss at step {state.step}; pair anchors: {anchors}")
        tz.backward(total)

    grad_norm = clip_gradients(state.student, cfg.grad_clip_norm)
    lr = learning_rate(state.step + 1, total_steps, warmup_steps, cfg.base_lr)
    wd = weight_decay(state.step, total_steps, cfg.weight_decay_start, cfg.weight_decay_end)
    opt.step(lr, wd)
    opt.zero_grad()

    lam = model.ema_lambda(min(state.step + 1, total_steps), total_steps)
    model.ema_update(state, lam)
    if cfg.centering:
        state.center = objective.update_center(state.center,
                                               np.mean(np.stack(pooled), axis=0))
    state.step += 1
    return StepRecord(step=state.step, epoch=epoch, ema_lambda=lam, lr=lr,
                      weight_decay=wd, loss_global=breakdown.global_term,
                      loss_comp=breakdown.comp_term, loss_decomp=breakdown.decomp_term,
                      loss_total=breakdown.total, grad_norm=grad_norm)


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, state: model.EncoderState, opt: AdamW,
                    rng: np.random.Generator, cfg: RunConfig) -> None:
    extra = {
        "rng_state": json.dumps(rng.bit_generator.state),
        "opt_t": opt.t,
        "run_config": asdict(cfg),
    }
    model.save_state(path, state, extra=extra, extra_arrays=opt.state_arrays())


def load_checkpoint(path):
    """Returns (state, optimizer, rng, run_config)."""
    state, extra, extra_arrays = model.load_state(path)
    cfg = RunConfig(**extra["run_config"])
    opt = AdamW(state.student)
    opt.load_state_arrays(extra_arrays, int(extra["opt_t"]))
    rng = np.random.default_rng(0)
    rng.bit_generator.state = json.loads(extra["rng_state"])
    return state, opt, rng, cfg


# ---------------------------------------------------------------------------
# the loop


def _truncate_metrics(path: Path, upto_step: int):
    if not path.exists():
        return
    kept = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if json.loads(line)["step"] <= upto_step:
            kept.append(line)
    path.write_text("".join(l + "\n" for l in kept), encoding="utf-8")


def train_loop(cfg: RunConfig, manifest_path, out_dir, resume_from=None,
               progress=None) -> Path:
    """Run pretraining; writes checkpoints and metrics, returns final checkpoint path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = cfg.grid_spec()
    phantoms = load_manifest(manifest_path)
    images = [p.image for p in phantoms]
    if not images:
        raise AceError(f"no phantoms in manifest {manifest_path}")
    for img in images:
        if img.shape != (spec.side, spec.side):
            raise AceError(
                f"phantom shape {img.shape} does not match grid side {spec.side}")

    steps_per_epoch = max(1, len(images) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    if resume_from is not None:
        state, opt, rng, _ = load_checkpoint(resume_from)
    else:
        rng = np.random.default_rng(cfg.seed)
        state = model.init(cfg.encoder_config(), rng)
        opt = AdamW(state.student)

    metrics_path = out_dir / METRICS_NAME
    if resume_from is not None:
        _truncate_metrics(metrics_path, state.step)
    elif metrics_path.exists():
        metrics_path.unlink()

    ckpt_path = out_dir / CHECKPOINT_NAME
    start_epoch = state.step // steps_per_epoch
    with open(metrics_path, "a", encoding="utf-8") as mf:
        for epoch in range(start_epoch, cfg.epochs):
            order = rng.permutation(len(images))
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = []
                for i in idx:
                    pair = cropgrid.sample_crop_pair(rng, spec)
                    batch.append((images[i], pair))
                rec = train_step(state, opt, batch, cfg, spec, rng,
                                 total_steps, warmup_steps, epoch)
                mf.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
            mf.flush()
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                save_checkpoint(ckpt_path, state, opt, rng, cfg)
            if progress is not None:
                progress(epoch, state)
    return ckpt_path
