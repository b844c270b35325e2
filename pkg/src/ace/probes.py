"""Frozen-checkpoint property probes scored against synthetic ground truth.

All probes share one feature extractor: crop, resize to the encoder input
side, student encode, mean over tokens.  No probe fine-tunes anything, and
feature extraction never sees labels; ground truth enters only at scoring
time.  Each probe is a pure function of (checkpoint, phantoms, seed).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cropgrid import resize
from .errors import GeometryError, ParameterError
from .model import EncoderState, encode_batch
from .synthgen import MIRROR_PAIRS, Phantom

_RESIZE_CHUNK = 256


@dataclass
class ProbeReport:
    name: str
    checkpoint_id: str
    summary: dict
    samples: list[dict] = field(repr=False, default_factory=list)

    def write_csv(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as f:
            if not self.samples:
                f.write("")
                return
            writer = csv.DictWriter(f, fieldnames=list(self.samples[0].keys()))
            writer.writeheader()
            writer.writerows(self.samples)

    def write_summary_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["key", "value"])
            for k, v in self.summary.items():
                writer.writerow([k, v])


def _student_arrays(state: EncoderState) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in state.student.items()}


def _resize_batch(crops: np.ndarray, out_side: int) -> np.ndarray:
    b, s, _ = crops.shape
    if s == out_side:
        return crops.astype(float, copy=True)
    if s % out_side == 0:
        f = s // out_side
        return crops.reshape(b, out_side, f, out_side, f).mean(axis=(2, 4))
    coords = (np.arange(out_side) + 0.5) * (s / out_side) - 0.5
    lo = np.clip(np.floor(coords).astype(int), 0, s - 1)
    hi = np.clip(lo + 1, 0, s - 1)
    fr = np.clip(coords - lo, 0.0, 1.0)
    a = crops[:, lo][:, :, lo]
    bq = crops[:, lo][:, :, hi]
    c = crops[:, hi][:, :, lo]
    d = crops[:, hi][:, :, hi]
    w00 = np.outer(1 - fr, 1 - fr)[None]
    w01 = np.outer(1 - fr, fr)[None]
    w10 = np.outer(fr, 1 - fr)[None]
    w11 = np.outer(fr, fr)[None]
    return a * w00 + bq * w01 + c * w10 + d * w11


def embed_crops(state: EncoderState, crops: np.ndarray) -> np.ndarray:
    """Shared feature path: resize to H0, encode, mean-pool tokens -> (B, K)."""
    cfg = state.config
    params = _student_arrays(state)
    feats = []
    for i in range(0, len(crops), _RESIZE_CHUNK):
        chunk = np.asarray(crops[i:i + _RESIZE_CHUNK], dtype=float)
        resized = _resize_batch(chunk, cfg.H0)
        feats.append(encode_batch(cfg, params, resized).mean(axis=1))
    return np.concatenate(feats, axis=0)


def embed_region(state: EncoderState, image: np.ndarray, rect) -> np.ndarray:
    """Embed one rectangular region (x, y, w, h) of an image."""
    x, y, w, h = rect
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > image.shape[1] or y + h > image.shape[0]:
        raise GeometryError(f"degenerate or out-of-bounds rect {rect} for image {image.shape}")
    crop = image[y:y + h, x:x + w]
    side = min(w, h)
    crop = crop[:side, :side] if w != h else crop
    return embed_crops(state, crop[None])[0]


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _cosine_matrix(q: np.ndarray, keys: np.ndarray) -> np.ndarray:
    qn = q / max(np.linalg.norm(q), 1e-30)
    kn = keys / np.maximum(np.linalg.norm(keys, axis=1, keepdims=True), 1e-30)
    return kn @ qn


def _crop_centered(image: np.ndarray, cx: float, cy: float, side: int) -> np.ndarray:
    """Square crop centered at (cx, cy) with zero padding past the borders."""
    h, w = image.shape
    half = side // 2
    x0, y0 = int(round(cx)) - half, int(round(cy)) - half
    out = np.zeros((side, side))
    sx0, sy0 = max(0, x0), max(0, y0)
    sx1, sy1 = min(w, x0 + side), min(h, y0 + side)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = image[sy0:sy1, sx0:sx1]
    return out


def _random_square(rng: np.random.Generator, side: int, frac_lo: float, frac_hi: float,
                   multiple: int = 2):
    size = int(rng.uniform(frac_lo, frac_hi) * side)
    size -= size % multiple
    size = max(multiple, size)
    x = int(rng.integers(0, side - size + 1))
    y = int(rng.integers(0, side - size + 1))
    return x, y, size


# ---------------------------------------------------------------------------


def compositionality_probe(state: EncoderState, phantoms: list[Phantom], n_parts: int,
                           samples: int, rng: np.random.Generator,
                           frac_lo: float = 0.3, frac_hi: float = 0.6,
                           checkpoint_id: str = "") -> ProbeReport:
    """Cosine between a patch embedding and the mean embedding of its sub-patches."""
    if n_parts not in (2, 4):
        raise ParameterError(f"n_parts must be 2 or 4, got {n_parts}")
    records = []
    for s in range(samples):
        ph = phantoms[int(rng.integers(0, len(phantoms)))]
        side = ph.image.shape[0]
        x, y, size = _random_square(rng, side, frac_lo, frac_hi)
        whole = ph.image[y:y + size, x:x + size]
        h = size // 2
        if n_parts == 2:
            parts = [whole[:, :h], whole[:, h:]]
        else:
            parts = [whole[:h, :h], whole[:h, h:], whole[h:, :h], whole[h:, h:]]
        feats = embed_crops(state, np.stack([resize(p, size) for p in parts] + [whole]))
        sim = _cosine(feats[-1], feats[:-1].mean(axis=0))
        records.append({"sample": s, "instance_id": ph.instance_id, "x": x, "y": y,
                        "size": size, "cosine": sim})
    sims = np.array([r["cosine"] for r in records])
    hist, edges = np.histogram(sims, bins=40, range=(-1.0, 1.0))
    summary = {"n_parts": n_parts, "samples": samples,
               "mean_cosine": float(sims.mean()), "std_cosine": float(sims.std())}
    for i, count in enumerate(hist):
        summary[f"hist_{edges[i]:+.2f}"] = int(count)
    return ProbeReport("compositionality", checkpoint_id, summary, records)


def decompositionality_probe(state: EncoderState, phantoms: list[Phantom],
                             rng: np.random.Generator, batch_size: int = 32,
                             n_batches: int = 8, frac_lo: float = 0.3,
                             frac_hi: float = 0.6, checkpoint_id: str = "") -> ProbeReport:
    """Match embed(X) - embed(X without a patch) against the excised patches."""
    if len(phantoms) < batch_size:
        raise ParameterError(f"need at least {batch_size} phantoms, got {len(phantoms)}")
    records = []
    correct = ties = 0
    for b in range(n_batches):
        chosen = rng.choice(len(phantoms), size=batch_size, replace=False)
        wholes, excised, patches = [], [], []
        for i in chosen:
            img = phantoms[int(i)].image
            x, y, size = _random_square(rng, img.shape[0], frac_lo, frac_hi)
            cut = img.copy()
            cut[y:y + size, x:x + size] = 0.0
            wholes.append(resize(img, state.config.H0))
            excised.append(resize(cut, state.config.H0))
            patches.append(resize(img[y:y + size, x:x + size], state.config.H0))
        f_whole = embed_crops(state, np.stack(wholes))
        f_exc = embed_crops(state, np.stack(excised))
        f_patch = embed_crops(state, np.stack(patches))
        diffs = f_whole - f_exc
        for j in range(batch_size):
            sims = _cosine_matrix(diffs[j], f_patch)
            best = sims.max()
            winners = np.flatnonzero(sims >= best - 1e-12)
            tie = len(winners) > 1
            pred = int(winners[0])  # degenerate ties break to the lowest index
            hit = pred == j
            correct += hit
            ties += tie
            order = np.sort(sims)[::-1]
            records.append({"batch": b, "item": j, "correct": int(hit), "tie": int(tie),
                            "margin": float(order[0] - order[1])})
    total = n_batches * batch_size
    summary = {"batches": n_batches, "batch_size": batch_size,
               "accuracy": correct / total, "ties": ties, "chance": 1.0 / batch_size}
    return ProbeReport("decompositionality", checkpoint_id, summary, records)


def retrieval_probe(state: EncoderState, phantoms: list[Phantom],
                    rng: np.random.Generator, batch_size: int = 32,
                    n_batches: int = 8, frac_lo: float = 0.3, frac_hi: float = 0.6,
                    checkpoint_id: str = "") -> ProbeReport:
    """Whole-image retrieval from one query patch per batch item."""
    if len(phantoms) < batch_size:
        raise ParameterError(f"need at least {batch_size} phantoms, got {len(phantoms)}")
    records = []
    correct = 0
    n_queries = 0
    for b in range(n_batches):
        chosen = rng.choice(len(phantoms), size=batch_size, replace=False)
        wholes = np.stack([resize(phantoms[int(i)].image, state.config.H0) for i in chosen])
        f_whole = embed_crops(state, wholes)
        for j in range(batch_size):
            img = phantoms[int(chosen[j])].image
            x, y, size = _random_square(rng, img.shape[0], frac_lo, frac_hi)
            f_query = embed_crops(state, img[y:y + size, x:x + size][None])[0]
            sims = _cosine_matrix(f_query, f_whole)
            pred = int(np.argmax(sims))
            hit = pred == j
            correct += hit
            n_queries += 1
            order = np.sort(sims)[::-1]
            records.append({"batch": b, "item": j, "correct": int(hit),
                            "margin": float(order[0] - order[1])})
    summary = {"batches": n_batches, "batch_size": batch_size,
               "accuracy": correct / n_queries, "chance": 1.0 / batch_size,
               "degenerate": int(batch_size == 1)}
    return ProbeReport("retrieval", checkpoint_id, summary, records)


def _key_dictionary(state: EncoderState, image: np.ndarray, window: int, stride: int):
    """Features of all stride-grid windows plus their center coordinates.

    The image is zero padded by half a window so the grid of window centers
    covers every image pixel, including landmarks close to the border.
    """
    half = window // 2
    padded = np.pad(image, half)
    view = np.lib.stride_tricks.sliding_window_view(padded, (window, window))
    view = view[::stride, ::stride]
    ny, nx = view.shape[:2]
    crops = view.reshape(ny * nx, window, window)
    feats = embed_crops(state, crops)
    ys, xs = np.mgrid[0:ny, 0:nx]
    centers = np.stack([xs.reshape(-1).astype(float) * stride,
                        ys.reshape(-1).astype(float) * stride], axis=1)
    return feats, centers


def correspondence_probe(state: EncoderState, queries, keys: list[Phantom],
                         window: int, stride: int, checkpoint_id: str = "") -> ProbeReport:
    """Cross-image landmark matching by nearest feature over a sliding window grid.

    ``queries`` is one Phantom or a list of them; each key image's window
    dictionary is built once and scored against every query, so the probe
    covers len(queries) * len(keys) image pairs.
    """
    if isinstance(queries, Phantom):
        queries = [queries]
    if stride > window:
        raise ParameterError(f"stride {stride} exceeds window {window}")
    for q in queries:
        if window > q.image.shape[0]:
            raise ParameterError(f"window {window} exceeds image side {q.image.shape[0]}")
    names = list(queries[0].landmarks.keys())
    q_feats = []
    for q in queries:
        crops = np.stack([_crop_centered(q.image, x, y, window)
                          for x, y in q.landmarks.values()])
        q_feats.append(embed_crops(state, crops))
    records = []
    for key in keys:
        k_feats, k_centers = _key_dictionary(state, key.image, window, stride)
        for q, feats in zip(queries, q_feats):
            for i, name in enumerate(names):
                d2 = ((k_feats - feats[i]) ** 2).sum(axis=1)
                best = int(np.argmin(d2))
                px, py = k_centers[best]
                gx, gy = key.landmarks[name]
                err = float(np.hypot(px - gx, py - gy))
                records.append({"query_instance": q.instance_id,
                                "key_instance": key.instance_id, "landmark": name,
                                "pred_x": px, "pred_y": py, "gt_x": gx, "gt_y": gy,
                                "error_px": err})
    per_landmark = {}
    for name in names:
        errs = [r["error_px"] for r in records if r["landmark"] == name]
        per_landmark[f"mean_error_{name}"] = float(np.mean(errs))
    summary = {"window": window, "stride": stride, "queries": len(queries),
               "keys": len(keys),
               "mean_error_px": float(np.mean([r["error_px"] for r in records]))}
    summary.update(per_landmark)
    return ProbeReport("correspondence", checkpoint_id, summary, records)


def symmetry_probe(state: EncoderState, phantoms: list[Phantom],
                   patch_frac: float = 0.35, checkpoint_id: str = "") -> ProbeReport:
    """Flip-equivariance: mirrored landmark patches should match once flipped."""
    records = []
    for ph in phantoms:
        side = ph.image.shape[0]
        # odd patch side keeps the window symmetric about its center pixel,
        # so a flip maps a left-landmark patch exactly onto the right one
        patch = int(patch_frac * side) | 1
        for left, right in MIRROR_PAIRS:
            lx, ly = ph.landmarks[left]
            rx, ry = ph.landmarks[right]
            c_l = _crop_centered(ph.image, lx, ly, patch)
            c_r = _crop_centered(ph.image, rx, ry, patch)
            feats = embed_crops(state, np.stack([np.fliplr(c_l), c_r, c_l]))
            flipped_sim = _cosine(feats[0], feats[1])
            control_sim = _cosine(feats[2], feats[1])
            records.append({"instance_id": ph.instance_id, "pair": f"{left}|{right}",
                            "flipped_cosine": flipped_sim, "control_cosine": control_sim,
                            "gap": flipped_sim - control_sim})
    gaps = np.array([r["gap"] for r in records])
    summary = {"instances": len(phantoms), "mean_gap": float(gaps.mean()),
               "mean_flipped_cosine": float(np.mean([r["flipped_cosine"] for r in records])),
               "mean_control_cosine": float(np.mean([r["control_cosine"] for r in records]))}
    for left, right in MIRROR_PAIRS:
        key = f"{left}|{right}"
        summary[f"gap_{key}"] = float(np.mean([r["gap"] for r in records if r["pair"] == key]))
    return ProbeReport("symmetry", checkpoint_id, summary, records)


def landmark_separability(state: EncoderState, phantoms: list[Phantom],
                          patch_frac: float = 0.35, checkpoint_id: str = "",
                          embeddings_csv=None) -> ProbeReport:
    """Leave-one-instance-out nearest-centroid accuracy over landmark identity."""
    if len(phantoms) < 2:
        raise ParameterError("landmark separability needs at least 2 instances")
    names = list(phantoms[0].landmarks.keys())
    n_inst, n_lm = len(phantoms), len(names)
    patch = int(patch_frac * phantoms[0].image.shape[0])
    crops = []
    for ph in phantoms:
        for name in names:
            x, y = ph.landmarks[name]
            crops.append(_crop_centered(ph.image, x, y, patch))
    feats = embed_crops(state, np.stack(crops)).reshape(n_inst, n_lm, -1)

    if embeddings_csv is not None:
        with open(embeddings_csv, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["instance_id", "landmark"]
                            + [f"e{i}" for i in range(feats.shape[-1])])
            for i, ph in enumerate(phantoms):
                for j, name in enumerate(names):
                    writer.writerow([ph.instance_id, name] + [repr(v) for v in feats[i, j]])

    norm = feats / np.maximum(np.linalg.norm(feats, axis=-1, keepdims=True), 1e-30)
    records = []
    correct = 0
    for i in range(n_inst):
        others = np.delete(norm, i, axis=0)
        centroids = others.mean(axis=0)
        centroids /= np.maximum(np.linalg.norm(centroids, axis=-1, keepdims=True), 1e-30)
        sims = norm[i] @ centroids.T
        preds = sims.argmax(axis=1)
        for j, name in enumerate(names):
            hit = int(preds[j] == j)
            correct += hit
            records.append({"instance_id": phantoms[i].instance_id, "landmark": name,
                            "predicted": names[int(preds[j])], "correct": hit})
    summary = {"instances": n_inst, "landmarks": n_lm,
               "accuracy": correct / (n_inst * n_lm), "chance": 1.0 / n_lm}
    return ProbeReport("landmark_separability", checkpoint_id, summary, records)
