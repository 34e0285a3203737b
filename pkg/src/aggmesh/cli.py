"""Command-line entry point: ``aggmesh <command> ...``.

Exit codes: 0 on success, 1 on an internal or numerical failure, 2 on a
usage or validation error. Every command writes ``manifest.json`` into its
output location before doing any heavy work.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, DatasetInfo, DeformSpec, load_dataset, read_ppm, save_dataset, synth_dataset, write_vtx
from .engine import CheckpointError, EngineError, NonFiniteError
from .graph import GraphError, read_off
from .losses import EvalReport, MetricError, dense_nme, nme
from .model import AggregationNet, ConfigError
from .sampling import SamplingError, build_hierarchy, load_hierarchy, save_hierarchy
from .training import RunConfig, TrainLogWriter, check_records, predict, train

USAGE_ERRORS = (ConfigError, DataError, GraphError, SamplingError, MetricError, CheckpointError,
                FileNotFoundError, NotADirectoryError)


class UsageError(Exception):
    pass


# -- manifest -------------------------------------------------------------------


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """``manifest.json`` written at start and completed at the end of a command."""

    def __init__(self, path: Path, command: str, args: argparse.Namespace, seed=None, config=None):
        self.path = path
        self.data = {
            "command": command,
            "arguments": {k: v for k, v in vars(args).items() if k != "func"},
            "config": None if config is None else str(config),
            "seed": seed,
            "version": version_string(),
            "start": _now(),
            "end": None,
            "output": str(path.parent),
            "status": "running",
        }
        self._write()

    def _write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, default=str) + "\n")

    def finish(self, status: str = "ok", **extra):
        self.data.update(extra)
        self.data["end"] = _now()
        self.data["status"] = status
        self._write()


def _threads() -> int:
    raw = os.environ.get("SPECMESH_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"SPECMESH_THREADS must be an integer, got {raw!r}") from exc
    return max(n, 1)


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} directory {p} does not exist")
    return p


def _load_run(config_path, hierarchy_path=None):
    cfg = RunConfig.load(config_path)
    hpath = hierarchy_path or cfg.net.hierarchy
    if hpath is None:
        raise UsageError("no hierarchy given (use --hierarchy or set net.hierarchy in the config)")
    hp = Path(hpath)
    if not hp.is_absolute() and hierarchy_path is None:
        hp = Path(config_path).parent / hp
    return cfg, load_hierarchy(hp)


# -- commands ---------------------------------------------------------------------


def cmd_hierarchy(args) -> int:
    schedule = [int(s) for s in args.schedule.split(",") if s.strip()]
    out = Path(args.out)
    man = Manifest(out / "manifest.json", "hierarchy", args)
    mesh = read_off(args.mesh)
    h = build_hierarchy(mesh, schedule)
    save_hierarchy(h, out)
    man.finish(counts=h.counts, lambda_max=h.lambda_max)
    print(f"hierarchy {h.counts} written to {out}")
    return 0


def cmd_synth(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    out = Path(args.out)
    man = Manifest(out / "manifest.json", "synth", args, seed=args.seed)
    template = read_off(args.template)
    spec = DeformSpec(args.basis_count, args.coeff_range, args.max_yaw)
    records = synth_dataset(template, spec, args.count, args.seed, args.image_size)
    info = DatasetInfo(str(args.template), spec.__dict__, args.seed, args.count, args.image_size)
    save_dataset(out, records, info)
    man.finish()
    print(f"{len(records)} samples written to {out / 'samples'}")
    return 0


def cmd_train(args) -> int:
    data_dir = _require_dir(args.data, "data")
    out = Path(args.out)
    cfg, h = _load_run(args.config, args.hierarchy)
    man = Manifest(out / "manifest.json", "train", args, seed=cfg.train.seed, config=args.config)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    _, records = load_dataset(data_dir)
    model = AggregationNet(cfg.net, h, seed=cfg.train.seed)
    check_records(records, cfg.net, model.n_output)
    start = 0
    if args.resume:
        meta = model.load_state(Path(args.resume).read_bytes())
        start = int(meta.get("step", 0))
    remaining = max(cfg.train.steps - start, 0)
    run_cfg = type(cfg.train)(**{**cfg.train.__dict__, "steps": remaining})
    log = TrainLogWriter(out / "train_log.csv", append=bool(args.resume))

    def checkpoint(step):
        model.save_checkpoint(out / f"ckpt_{step:06d}.ckpt", {"step": step})

    try:
        rows = train(model, records, run_cfg, start_step=start, on_log=log, on_checkpoint=checkpoint)
    finally:
        log.close()
    final = start + remaining
    model.save_checkpoint(out / "final.ckpt", {"step": final})
    last = rows[-1][2] if rows else None
    man.finish(final_step=final, final_loss=last)
    print(f"trained to step {final}; final loss {last}")
    return 0


def _nme_one(args):
    p, r, mode, landmarks_only = args
    gt = np.asarray(r.gt_vertices, dtype=np.float64)
    if landmarks_only:
        if not r.landmark_indices:
            raise UsageError("--landmarks-only needs landmark indices in every sample")
        li = np.asarray(r.landmark_indices)
        return nme(p[li], gt[li], mode)
    return dense_nme(p, gt, r.landmark_indices, mode)


def cmd_eval(args) -> int:
    data_dir = _require_dir(args.data, "data")
    out = Path(args.out)
    cfg, h = _load_run(args.config, args.hierarchy)
    man = Manifest(out / "manifest.json", "eval", args, seed=cfg.train.seed, config=args.config)
    ids, records = load_dataset(data_dir)
    model = AggregationNet(cfg.net, h)
    model.load_state(Path(args.ckpt).read_bytes())
    check_records(records, cfg.net, model.n_output)
    images = np.stack([r.image for r in records]).astype(cfg.net.dtype)
    pred = predict(model, images, cfg.train.batch_size)
    mode = 2 if args.mode == "2d" else 3
    jobs = [(p, r, mode, args.landmarks_only) for p, r in zip(pred, records)]
    # map() preserves input order, so the aggregate is independent of scheduling
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        errs = list(pool.map(_nme_one, jobs))
    report = EvalReport(ids, errs, [r.yaw_degrees for r in records])
    report.write_csv(out)
    summary = {"mean_nme": report.mean_nme, "count": len(errs), "mode": args.mode,
               "landmarks_only": args.landmarks_only, "yaw_bins": report.yaw_means}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    man.finish(mean_nme=report.mean_nme)
    print(f"mean NME {report.mean_nme:.6f} over {len(errs)} samples")
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    if args.op and args.op not in gradcheck.REGISTRY:
        raise UsageError(f"unknown op {args.op!r}; known: {', '.join(gradcheck.REGISTRY)}")
    names = [args.op] if args.op and not args.all else list(gradcheck.REGISTRY)
    ok = True
    print(f"{'op':<22}{'max_rel_err':>14}  result")
    for name, err, passed in gradcheck.run(names):
        ok &= passed
        print(f"{name:<22}{err:>14.3e}  {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_infer(args) -> int:
    out = Path(args.out)
    cfg, h = _load_run(args.config, args.hierarchy)
    man = Manifest(out.with_suffix(".manifest.json"), "infer", args, config=args.config)
    image = read_ppm(args.image)
    if image.shape[0] != cfg.net.input_size or image.shape[1] != cfg.net.input_size:
        raise UsageError(f"image is {image.shape[1]}x{image.shape[0]}, config expects {cfg.net.input_size}")
    model = AggregationNet(cfg.net, h)
    model.load_state(Path(args.ckpt).read_bytes())
    model.eval()
    t0 = time.perf_counter()
    verts = model.forward(image[None].astype(cfg.net.dtype))[0]
    elapsed_ms = (time.perf_counter() - t0) * 1e3
    out.parent.mkdir(parents=True, exist_ok=True)
    write_vtx(out, verts)
    out.with_suffix(".json").write_text(json.dumps({"elapsed_ms": elapsed_ms, "vertices": len(verts)}) + "\n")
    man.finish(elapsed_ms=elapsed_ms)
    print(f"{len(verts)} vertices written to {out} ({elapsed_ms:.1f} ms)")
    return 0


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aggmesh", description="Image to mesh regression toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("hierarchy", help="decimate a mesh into a sampling hierarchy")
    s.add_argument("--mesh", required=True)
    s.add_argument("--schedule", required=True, help="comma-separated vertex counts, finest first")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_hierarchy)

    s = sub.add_parser("synth", help="generate a synthetic image/mesh dataset")
    s.add_argument("--template", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--basis-count", type=int, default=8)
    s.add_argument("--coeff-range", type=float, default=0.15)
    s.add_argument("--max-yaw", type=float, default=0.0)
    s.add_argument("--image-size", type=int, default=64)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--hierarchy", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--hierarchy")
    s.add_argument("--mode", choices=("2d", "3d"), default="3d")
    s.add_argument("--landmarks-only", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    s.add_argument("--op")
    s.add_argument("--all", action="store_true")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("infer", help="predict a mesh for one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--hierarchy")
    s.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteError, EngineError, FloatingPointError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
