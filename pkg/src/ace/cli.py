"""Command-line entry points: data generation, pretraining, probes, self-checks.

Diagnostics go to stderr; result files go under --out.  Exit codes: 0 on
success, 1 on any domain error, 2 on usage errors (argparse default).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import probes as pb
from .config import load_config, write_snapshot
from .errors import AceError
from .pixelcheck import verify_geometry
from .synthgen import generate_dataset, load_manifest
from .tensor import Tape, Tensor, grad_check
from .trainer import load_checkpoint, train_loop
from . import tensor as tz

PROBE_NAMES = ("compositionality", "decompositionality", "retrieval",
               "correspondence", "symmetry", "separability")


def _log(msg: str) -> None:
    if os.environ.get("ACE_LOG", "1") != "0":
        print(msg, file=sys.stderr)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a single config key (repeatable)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--threads", type=int, default=None, help="worker thread cap")


def _resolve(args) -> tuple:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out / "config.resolved")
    return cfg, out


def _cmd_gen_data(args) -> int:
    cfg, out = _resolve(args)
    t0 = time.time()
    manifest = generate_dataset(out / "data", cfg.phantom_count, cfg.phantom_spec(),
                                cfg.seed)
    _log(f"wrote {cfg.phantom_count} phantoms in {time.time() - t0:.1f}s -> {manifest}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg, out = _resolve(args)
    t0 = time.time()

    def progress(epoch, state):
        _log(f"epoch {epoch + 1}/{cfg.epochs} done, step {state.step}, "
             f"{time.time() - t0:.0f}s elapsed")

    ckpt = train_loop(cfg, args.manifest, out, resume_from=args.resume,
                      progress=progress)
    _log(f"final checkpoint: {ckpt}")
    return 0


def _cmd_probe(args) -> int:
    cfg, out = _resolve(args)
    state, _, _, _ = load_checkpoint(args.ckpt)
    phantoms = load_manifest(args.manifest)
    rng = np.random.default_rng(cfg.seed)
    ckpt_id = str(args.ckpt)
    name = args.name
    if name == "compositionality":
        report = pb.compositionality_probe(state, phantoms, n_parts=args.parts,
                                           samples=args.samples, rng=rng,
                                           checkpoint_id=ckpt_id)
    elif name == "decompositionality":
        report = pb.decompositionality_probe(state, phantoms, rng,
                                             n_batches=args.batches,
                                             checkpoint_id=ckpt_id)
    elif name == "retrieval":
        report = pb.retrieval_probe(state, phantoms, rng, n_batches=args.batches,
                                    checkpoint_id=ckpt_id)
    elif name == "correspondence":
        side = phantoms[0].image.shape[0]
        window = args.window or round(3 * side / 4)
        stride = args.stride or max(1, round(side / 32))
        report = pb.correspondence_probe(state, phantoms[:args.queries],
                                         phantoms[args.queries:args.queries + args.keys],
                                         window=window, stride=stride,
                                         checkpoint_id=ckpt_id)
    elif name == "symmetry":
        report = pb.symmetry_probe(state, phantoms[:args.samples], checkpoint_id=ckpt_id)
    elif name == "separability":
        report = pb.landmark_separability(state, phantoms[:args.samples],
                                          checkpoint_id=ckpt_id,
                                          embeddings_csv=out / "landmark_embeddings.csv")
    else:  # pragma: no cover - argparse choices guard this
        raise AceError(f"unknown probe {name!r}")
    report.write_csv(out / f"{report.name}_samples.csv")
    report.write_summary_csv(out / f"{report.name}_summary.csv")
    _log(json.dumps(report.summary, sort_keys=True, default=str))
    return 0


def _cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    worst = 0.0
    for trial in range(args.trials):
        x0 = Tensor(rng.normal(size=(5, 4)))

        def f(t):
            return tz.tensor_mean(tz.mul(tz.sigmoid(t), tz.silu(t)))

        err = grad_check(f, x0)
        worst = max(worst, err)
    ok = worst < 1e-4
    _log(f"gradcheck: {args.trials} trials, worst relative error {worst:.3e}, "
         f"{'pass' if ok else 'FAIL'}")
    return 0 if ok else 1


def _cmd_geom_verify(args) -> int:
    cfg, _ = _resolve(args)
    report = verify_geometry(cfg.grid_spec(), args.samples,
                             cfg.seed, corrupt=args.corrupt)
    for note in report.failures[:20]:
        _log(note)
    _log(f"geom-verify: {report.samples} pairs, {len(report.failures)} failures")
    if args.corrupt:
        return 0 if report.failures else 1
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ace", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom dataset + manifest")
    _add_common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="run self-supervised pretraining")
    _add_common(p)
    p.add_argument("--manifest", required=True, help="dataset manifest TSV")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("probe", help="score a frozen checkpoint")
    p.add_argument("name", choices=PROBE_NAMES)
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--manifest", required=True, help="dataset manifest TSV")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--batches", type=int, default=8)
    p.add_argument("--parts", type=int, default=4, choices=(2, 4))
    p.add_argument("--keys", type=int, default=8)
    p.add_argument("--queries", type=int, default=1)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference check of the autodiff engine")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("geom-verify", help="crop geometry vs the pixel oracle")
    _add_common(p)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--corrupt", action="store_true",
                   help="inject a misalignment and require the oracle to catch it")
    p.set_defaults(func=_cmd_geom_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (AceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
