"""Command-line surface: reproducible data generation, pretraining, evaluation.

Exit codes: 0 success, 2 input/config error, 3 runtime numerical failure.
Every command takes an --out run directory, holds an advisory lock on it for
the duration of the run, and leaves exactly one run_manifest.json behind.
All randomness flows from the config/spec seed (overridable with --seed).
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import sys
from pathlib import Path

from . import __version__, evaluate, motion, synthdata, trainer
from .core import (
    OBJECTIVES,
    Config,
    InputError,
    NumericalError,
    config_from_text,
    config_hash,
    config_to_text,
    validate_config,
)

_LOCK_NAME = ".lock"
_MANIFEST_NAME = "run_manifest.json"


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


class RunDir:
    """Locked output directory that records a manifest when the run finishes."""

    def __init__(self, path: str, command: str, seed, config_digest: str = ""):
        self.path = Path(path)
        self.command = command
        self.seed = seed
        self.config_digest = config_digest
        self.outputs: list[str] = []
        self.started = _now()

    def __enter__(self) -> "RunDir":
        self.path.mkdir(parents=True, exist_ok=True)
        self._lock = self.path / _LOCK_NAME
        try:
            self._lock.touch(exist_ok=False)
        except FileExistsError:
            raise InputError(
                f"run directory {self.path} is locked by another run "
                f"(remove {self._lock} if stale)"
            ) from None
        return self

    def add(self, *paths: Path) -> None:
        self.outputs.extend(str(Path(p).relative_to(self.path)) for p in paths)

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                manifest = {
                    "command": self.command,
                    "config_hash": self.config_digest,
                    "seed": self.seed,
                    "artifact_version": __version__,
                    "started_at": self.started,
                    "finished_at": _now(),
                    "outputs": sorted(self.outputs),
                }
                (self.path / _MANIFEST_NAME).write_text(
                    json.dumps(manifest, indent=2, sort_keys=True) + "\n"
                )
        finally:
            self._lock.unlink(missing_ok=True)
        return False


def _read_text(path: str, what: str) -> str:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {path}")
    return p.read_text()


def _load_config(args) -> Config:
    cfg = config_from_text(_read_text(args.config, "config file"))
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "objective", None) is not None:
        cfg = dataclasses.replace(cfg, objective=args.objective)
    bad = validate_config(cfg)
    if bad:
        raise InputError("invalid config: " + "; ".join(bad))
    return cfg


def _load_dataset(path: str) -> synthdata.Dataset:
    return synthdata.load_dataset(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = synthdata.spec_from_text(_read_text(args.spec, "dataset spec"))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    bad = spec.violations()
    if bad:
        raise InputError("invalid dataset spec: " + "; ".join(bad))
    with RunDir(args.out, "gen-data", spec.seed) as run:
        dataset = synthdata.generate(spec)
        synthdata.save_dataset(dataset, run.path)
        run.add(run.path / "manifest.json")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    dataset = _load_dataset(args.data)
    with RunDir(args.out, "pretrain", cfg.seed, config_hash(cfg)) as run:
        (run.path / "config.txt").write_text(config_to_text(cfg))
        if args.resume:
            state = trainer.load_checkpoint(args.resume)
            steps = args.steps if args.steps is not None else cfg.total_steps - state.step
            trainer.run_steps(
                state, dataset, steps, out_dir=run.path,
                checkpoint_every=args.checkpoint_every,
            )
            trainer.save_checkpoint(state, run.path / "final.ckpt")
        else:
            trainer.pretrain(
                cfg, dataset, steps=args.steps, out_dir=run.path,
                checkpoint_every=args.checkpoint_every, serial=not args.parallel,
            )
        run.add(run.path / "final.ckpt", run.path / "metrics.jsonl", run.path / "config.txt")
    return 0


def _probe_cfg(args) -> evaluate.ProbeConfig:
    pc = evaluate.ProbeConfig()
    if getattr(args, "probe_seed", None) is not None:
        pc = dataclasses.replace(pc, seed=args.probe_seed)
    return pc


def _ckpt_meta(path: str) -> dict:
    header, _ = trainer.read_checkpoint(path)
    cfg = config_from_text(header["config_text"])
    return {"config_hash": config_hash(cfg), "checkpoint_id": trainer.checkpoint_id(path)}


def cmd_probe(args) -> int:
    dataset = _load_dataset(args.data)
    meta = _ckpt_meta(args.checkpoint)
    with RunDir(args.out, "probe", args.probe_seed, meta["config_hash"]) as run:
        result = evaluate.linear_probe(args.checkpoint, dataset, _probe_cfg(args))
        rows = [["top1", f"{result.top1:.6f}", result.n_eval]]
        for c, acc in enumerate(result.per_class):
            rows.append([f"class_{c}", f"{acc:.6f}", ""])
        run.add(evaluate.write_report(
            run.path / "probe.tsv", "linear probe", meta,
            ["metric", "value", "n_eval"], rows,
        ))
    return 0


def cmd_eval_shuffle(args) -> int:
    dataset = _load_dataset(args.data)
    meta = _ckpt_meta(args.checkpoint)
    with RunDir(args.out, "eval-shuffle", args.probe_seed, meta["config_hash"]) as run:
        res = evaluate.shuffle_eval(args.checkpoint, dataset, _probe_cfg(args))
        run.add(evaluate.write_report(
            run.path / "shuffle_eval.tsv", "shuffle sensitivity", meta,
            ["acc_normal", "acc_shuffled", "drop"],
            [[f"{res['acc_normal']:.6f}", f"{res['acc_shuffled']:.6f}", f"{res['drop']:.6f}"]],
        ))
    return 0


def cmd_retrieve(args) -> int:
    dataset = _load_dataset(args.data)
    if not (0 <= args.query_id < len(dataset)):
        raise InputError(f"query id {args.query_id} outside dataset of {len(dataset)}")
    meta = _ckpt_meta(args.checkpoint)
    with RunDir(args.out, "retrieve", None, meta["config_hash"]) as run:
        gallery = [s.video for s in dataset.samples]
        ranked = evaluate.retrieve_topk(
            args.checkpoint, dataset[args.query_id].video, gallery, args.k
        )
        rows = [[rank, idx, f"{sim:.6f}", dataset[idx].label]
                for rank, (idx, sim) in enumerate(ranked)]
        run.add(evaluate.write_report(
            run.path / "retrieval.tsv", f"top-{args.k} retrieval for query {args.query_id}",
            meta, ["rank", "gallery_id", "similarity", "label"], rows,
        ))
    return 0


def cmd_lowshot(args) -> int:
    dataset = _load_dataset(args.data)
    fractions = [float(f) for f in args.fractions.split(",")]
    meta = _ckpt_meta(args.checkpoint)
    with RunDir(args.out, "lowshot", args.probe_seed, meta["config_hash"]) as run:
        res = evaluate.lowshot_eval(args.checkpoint, dataset, fractions, _probe_cfg(args))
        base = None
        if args.baseline:
            base = evaluate.lowshot_eval(args.baseline, dataset, fractions, _probe_cfg(args))
        rows = []
        for frac in fractions:
            row = [frac, f"{res[frac].top1:.6f}"]
            if base is not None:
                b = base[frac].top1
                rel = (res[frac].top1 - b) / b * 100.0 if b > 0 else float("nan")
                row += [f"{b:.6f}", f"{rel:+.1f}"]
            rows.append(row)
        cols = ["fraction", "top1"] + (["baseline_top1", "rel_delta_pct"] if base else [])
        run.add(evaluate.write_report(
            run.path / "lowshot.tsv", "low-shot evaluation", meta, cols, rows,
        ))
    return 0


def cmd_motion_profile(args) -> int:
    dataset = _load_dataset(args.data)
    ids = [args.video_id] if args.video_id is not None else range(len(dataset))
    with RunDir(args.out, "motion-profile", None) as run:
        rows = []
        for vid in ids:
            if not (0 <= vid < len(dataset)):
                raise InputError(f"video id {vid} outside dataset of {len(dataset)}")
            prof = motion.profile(dataset[vid].video, beta=args.beta)
            for i in range(prof.n_windows):
                rows.append([vid, i, f"{prof.amplitudes[i]:.6f}", f"{prof.probabilities[i]:.6f}"])
        run.add(evaluate.write_report(
            run.path / "motion_profile.tsv", "motion profiles",
            {"beta": args.beta}, ["video_id", "window", "m", "p"], rows,
        ))
    return 0


def cmd_report(args) -> int:
    with RunDir(args.out, "report", None) as run:
        rows = []
        for run_dir in args.runs:
            tsv = Path(run_dir) / "shuffle_eval.tsv"
            if not tsv.exists():
                raise InputError(f"no shuffle_eval.tsv in {run_dir}")
            lines = [l for l in tsv.read_text().splitlines() if l and not l.startswith("#")]
            vals = lines[1].split("\t")
            rows.append([Path(run_dir).name, vals[0], vals[1], vals[2]])
        run.add(evaluate.write_report(
            run.path / "comparison.tsv", "shuffle sensitivity comparison", {},
            ["run", "acc_normal", "acc_shuffled", "drop"], rows,
        ))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vidcl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="self-supervised pretraining")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--objective", choices=list(OBJECTIVES), default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--resume", default=None)
    t.add_argument("--parallel", action="store_true",
                   help="allow multithreaded kernels (bit-exactness not guaranteed)")
    t.set_defaults(func=cmd_pretrain)

    def eval_common(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--probe-seed", type=int, default=None)

    pr = sub.add_parser("probe", help="linear probe on frozen backbone")
    eval_common(pr)
    pr.set_defaults(func=cmd_probe)

    es = sub.add_parser("eval-shuffle", help="clean vs shuffled probe accuracy")
    eval_common(es)
    es.set_defaults(func=cmd_eval_shuffle)

    rt = sub.add_parser("retrieve", help="nearest neighbors in visual-head space")
    eval_common(rt)
    rt.add_argument("--query-id", type=int, required=True)
    rt.add_argument("-k", type=int, default=3)
    rt.set_defaults(func=cmd_retrieve)

    ls = sub.add_parser("lowshot", help="probe accuracy per labeled fraction")
    eval_common(ls)
    ls.add_argument("--fractions", default="0.01,0.05,0.1,0.25,0.5,1.0")
    ls.add_argument("--baseline", default=None, help="second checkpoint for rel. deltas")
    ls.set_defaults(func=cmd_lowshot)

    mp = sub.add_parser("motion-profile", help="per-window motion records")
    mp.add_argument("--data", required=True)
    mp.add_argument("--out", required=True)
    mp.add_argument("--video-id", type=int, default=None)
    mp.add_argument("--beta", type=float, default=5.0)
    mp.set_defaults(func=cmd_motion_profile)

    rp = sub.add_parser("report", help="aggregate shuffle evals across runs")
    rp.add_argument("--runs", nargs="+", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
