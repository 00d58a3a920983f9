"""``sinklab`` command line: train, construct, verify, export and sample.

Every invocation writes a fresh run directory under ``--out`` (default
``$SINKLAB_OUT`` or ``./runs``) with a manifest of SHA-256 hashes.

Exit codes: 0 pass, 1 check failure, 2 usage or config error,
3 non-convergence or divergence.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import os
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .analysis import attention_stats, export_stats, sink_report
from .errors import ConfigError, DimensionError, DivergenceError
from .grad import TrainConfig, init_params, train
from .model import forward_batch, load_metadata, load_model, save_model
from .taskgen import ContentDistribution, MIN_DIM, MIN_LENGTH, sample_batch, write_binary, write_csv
from .theory import (
    SinkCriteria,
    build_relu_construction,
    consequence_checks,
    construction_test_set,
    lemma_evaluation_set,
    sink_predicate,
    verify_relu_construction,
)

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NONCONVERGED = 0, 1, 2, 3
OUT_ENV = "SINKLAB_OUT"


@dataclass
class ExperimentConfig:
    seed: int
    task: dict = field(default_factory=lambda: {"L": 16, "n": 16, "distribution": {"kind": "uniform", "low": -1.0, "high": 1.0}})
    model: dict = field(default_factory=lambda: {"kind": "softmax", "layers": 1, "heads": 1, "residual": False, "init_scale": 0.1})
    train: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=lambda: {"count": 1000, "trigger_pin": 8, "epsilon": 0.1, "delta": 0.05})

    def validate(self) -> None:
        L, n = self.task["L"], self.task["n"]
        if L < MIN_LENGTH or n < MIN_DIM:
            raise DimensionError(f"need L >= {MIN_LENGTH} and n >= {MIN_DIM}, got L={L}, n={n}")
        if self.model["kind"] not in ("softmax", "relu"):
            raise ConfigError(f"unknown attention kind {self.model['kind']!r}")
        if self.model["layers"] < 1 or self.model["heads"] < 1:
            raise ConfigError("layers and heads must be >= 1")
        pin = self.analysis.get("trigger_pin")
        if pin is not None and not 2 <= pin <= L:
            raise ConfigError(f"trigger_pin must lie in 2..{L}")
        self.distribution()
        self.train_config()
        self.criteria()

    def distribution(self) -> ContentDistribution:
        try:
            return ContentDistribution.from_dict(self.task.get("distribution", {}))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad content distribution: {exc}") from exc

    def train_config(self) -> TrainConfig:
        settings = {"learning_rate": 1e-3 if self.model["layers"] == 1 else 1e-4, **self.train, "seed": self.seed}
        try:
            return TrainConfig.from_dict(settings)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def criteria(self) -> SinkCriteria:
        try:
            return SinkCriteria(self.analysis["epsilon"], self.analysis["delta"], self.analysis["count"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - {"seed", "task", "model", "train", "analysis", "out"}
    if unknown:
        raise ConfigError(f"unknown config blocks: {sorted(unknown)}")
    return doc


def build_config(args) -> ExperimentConfig:
    doc = load_config(args.config) if args.config else {}
    cfg = ExperimentConfig(seed=-1)
    for block in ("task", "model", "train", "analysis"):
        getattr(cfg, block).update(doc.get(block, {}))
    seed = args.seed if args.seed is not None else doc.get("seed")
    if seed is None:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    cfg.seed = int(seed)
    flags = {
        ("task", "L"): getattr(args, "L", None),
        ("task", "n"): getattr(args, "n", None),
        ("model", "kind"): getattr(args, "kind", None),
        ("model", "layers"): getattr(args, "layers", None),
        ("model", "heads"): getattr(args, "heads", None),
        ("model", "residual"): getattr(args, "residual", None),
        ("train", "learning_rate"): getattr(args, "lr", None),
        ("train", "max_steps"): getattr(args, "max_steps", None),
        ("train", "eval_every"): getattr(args, "eval_every", None),
        ("analysis", "count"): getattr(args, "count", None),
        ("analysis", "trigger_pin"): getattr(args, "trigger_pin", None),
        ("analysis", "epsilon"): getattr(args, "epsilon", None),
        ("analysis", "delta"): getattr(args, "delta", None),
    }
    for (block, key), value in flags.items():
        if value is not None:
            getattr(cfg, block)[key] = value
    if doc.get("out") and not args.out:
        args.out = doc["out"]
    cfg.validate()
    return cfg


# -- run directories and manifests ------------------------------------------


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def new_run_dir(out: str | None, command: str, seed: int | None) -> Path:
    root = Path(out or os.environ.get(OUT_ENV) or "runs")
    stamp = dt.datetime.now(dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = f"{command}-{stamp}" + ("" if seed is None else f"-s{seed}")
    for k in range(10_000):
        path = root / (base if k == 0 else f"{base}-{k}")
        try:
            path.mkdir(parents=True, exist_ok=False)
            return path
        except FileExistsError:
            continue
    raise RuntimeError("could not allocate a run directory")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir: Path, command: str, config: dict, status: str, started: str, extra: dict | None = None) -> Path:
    files = sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "status": status,
        "config": config,
        "started": started,
        "finished": _now(),
        "versions": {"sinklab": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "kernel_backend": kernels.BACKEND,
        "files": [{"path": str(p.relative_to(run_dir)), "sha256": sha256(p), "bytes": p.stat().st_size} for p in files],
        **(extra or {}),
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def check_manifest(run_dir) -> list[str]:
    """Paths whose hashes no longer match (or that are missing)."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    bad = []
    for entry in manifest["files"]:
        p = run_dir / entry["path"]
        if not p.is_file() or sha256(p) != entry["sha256"]:
            bad.append(entry["path"])
    return bad


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1) + "\n")


# -- commands ---------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = build_config(args)
    started = _now()
    run_dir = new_run_dir(args.out, "train", cfg.seed)
    _write_json(run_dir / "config.json", cfg.to_dict())
    m, task = cfg.model, cfg.task
    arch = init_params(cfg.seed, [m["heads"]] * m["layers"], task["n"], m["kind"], m["residual"], m.get("init_scale", 0.1))
    tc = cfg.train_config()

    def progress(record):
        if not args.quiet:
            print(f"step {record['step']:>7}  l2 {record['l2']:.4e}  linf {record['linf']:.4e}", file=sys.stderr)

    try:
        params, history = train(arch, tc, cfg.distribution(), task["L"], task["n"], on_eval=progress)
    except DivergenceError as exc:
        if exc.snapshot is not None:
            save_model(exc.snapshot, run_dir / "snapshot.json", {"L": task["L"], "seed": cfg.seed})
        write_manifest(run_dir, "train", cfg.to_dict(), "diverged", started, {"error": str(exc)})
        print(f"diverged: {exc}", file=sys.stderr)
        print(run_dir)
        return EXIT_NONCONVERGED
    meta = {"L": task["L"], "seed": cfg.seed, "steps": history.steps, "converged": history.converged, "final_linf": history.records[-1]["linf"]}
    save_model(params, run_dir / "model.json", meta)
    save_model(params, run_dir / "model.bin")
    history.write_jsonl(run_dir / "history.jsonl")
    history.write_timing(run_dir / "timing.json")
    status = "converged" if history.converged else "not-converged"
    write_manifest(run_dir, "train", cfg.to_dict(), status, started, {"steps": history.steps})
    print(run_dir)
    return EXIT_OK if history.converged else EXIT_NONCONVERGED


def cmd_construct(args) -> int:
    started = _now()
    params = build_relu_construction(args.L, args.n)
    run_dir = new_run_dir(args.out, "construct", None)
    save_model(params, run_dir / "model.json", {"L": args.L, "construction": "sink-free relu"})
    save_model(params, run_dir / "model.bin")
    write_manifest(run_dir, "construct", {"L": args.L, "n": args.n}, "ok", started)
    print(run_dir)
    return EXIT_OK


def _checkpoint_L(args) -> int:
    if args.L is not None:
        return args.L
    return int(load_metadata(args.checkpoint).get("L", 16))


def cmd_verify(args) -> int:
    started = _now()
    params = load_model(args.checkpoint)
    L = _checkpoint_L(args)
    seed = 0 if args.seed is None else args.seed
    criteria = SinkCriteria(args.epsilon, args.delta, args.count)
    suites = ["construction", "lemmas", "sink"] if args.suite == "all" else [args.suite]
    results, ok = {}, True
    for suite in suites:
        if suite == "construction":
            if params.kind != "relu" or params.depth != 1:
                results[suite] = {"status": "skipped", "reason": "construction checks apply to one-layer relu models"}
                continue
            report = verify_relu_construction(params, construction_test_set(seed, args.count, L, params.n))
            results[suite] = {"status": "pass" if report.passed else "fail", **report.to_dict()}
            ok &= report.passed
        elif suite == "lemmas":
            if params.kind != "softmax":
                results[suite] = {"status": "skipped", "reason": f"lemma checks apply to softmax models, got {params.kind}"}
                continue
            evaluation = lemma_evaluation_set(seed, args.count, L, params.n)
            report = consequence_checks(params, evaluation, criteria, configs=args.count, seed=seed, eta=args.eta)
            status = "skipped" if not report.records else ("pass" if report.passed else "fail")
            results[suite] = {"status": status, **report.to_dict()}
            ok &= report.passed
        else:
            if params.kind != "softmax":
                results[suite] = {"status": "skipped", "reason": f"sink predicates apply to softmax models, got {params.kind}"}
                continue
            batch = sample_batch(seed, args.count, L, params.n, stream=(31,), trigger_pos=args.trigger_pin)
            trace = forward_batch(params, batch.tokens).trace
            scope = "single_layer_all_positions" if params.depth == 1 else "multilayer_exists"
            verdict = sink_predicate(trace, batch.trigger_pos, criteria, scope)
            results[suite] = {"status": "pass" if verdict.passed else "fail", **verdict.to_dict()}
            ok &= verdict.passed
    run_dir = new_run_dir(args.out, "verify", seed)
    doc = {"checkpoint": str(args.checkpoint), "checkpoint_sha256": sha256(args.checkpoint), "passed": bool(ok), "suites": results}
    _write_json(run_dir / "report.json", doc)
    write_manifest(run_dir, "verify", {"suite": args.suite, "count": args.count, "seed": seed, "L": L, **asdict(criteria), "eta": args.eta}, "pass" if ok else "fail", started)
    for suite, res in results.items():
        print(f"{suite}: {res['status']}")
    print(run_dir)
    return EXIT_OK if ok else EXIT_CHECK


def cmd_export(args) -> int:
    started = _now()
    params = load_model(args.checkpoint)
    L = _checkpoint_L(args)
    seed = 0 if args.seed is None else args.seed
    criteria = SinkCriteria(args.epsilon, args.delta, args.count)
    stats = attention_stats(params, args.count, args.trigger_pin, seed, L)
    run_dir = new_run_dir(args.out, "export", seed)
    export_stats(stats, run_dir / "heatmaps")
    sink_report(stats, criteria).write_json(run_dir / "sink_report.json")
    write_manifest(run_dir, "export", {"checkpoint": str(args.checkpoint), "count": args.count, "trigger_pin": args.trigger_pin, "seed": seed, "L": L, **asdict(criteria)}, "ok", started)
    print(run_dir)
    return EXIT_OK


def cmd_sample(args) -> int:
    started = _now()
    seed = 0 if args.seed is None else args.seed
    batch = sample_batch(seed, args.count, args.L or 16, args.n, trigger_pos=args.trigger_pin)
    run_dir = new_run_dir(args.out, "sample", seed)
    write_binary(run_dir / "sequences.bin", batch)
    write_csv(run_dir / "sequences.csv", batch)
    write_manifest(run_dir, "sample", {"count": args.count, "L": args.L or 16, "n": args.n, "seed": seed, "trigger_pin": args.trigger_pin}, "ok", started)
    print(run_dir)
    return EXIT_OK


# -- argument parsing -------------------------------------------------------


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sinklab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"sinklab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")

    p = sub.add_parser("train", help="train a model per the experiment config")
    common(p)
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--kind", choices=("softmax", "relu"))
    p.add_argument("--layers", type=_positive_int)
    p.add_argument("--heads", type=_positive_int)
    p.add_argument("--residual", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--L", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--eval-every", type=_positive_int)
    p.add_argument("--count", type=_positive_int)
    p.add_argument("--trigger-pin", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("construct", help="write the sink-free ReLU construction")
    p.add_argument("--L", type=int, default=16)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--out")
    p.set_defaults(func=cmd_construct)

    for name, func, help_ in (("verify", cmd_verify, "run theory checks on a checkpoint"), ("export", cmd_export, "export attention heatmaps and a sink report")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("checkpoint")
        common(p)
        if name == "verify":
            p.add_argument("--suite", choices=("construction", "lemmas", "sink", "all"), default="all")
            p.add_argument("--eta", type=float, help="claimed loss bound for the lemma checks")
        p.add_argument("--count", type=_positive_int, default=1000 if name == "export" else 200)
        p.add_argument("--trigger-pin", type=int, default=8)
        p.add_argument("--epsilon", type=float, default=0.1)
        p.add_argument("--delta", type=float, default=0.05)
        p.add_argument("--L", type=int, help="sequence length (default: from checkpoint metadata, else 16)")
        p.set_defaults(func=func)

    p = sub.add_parser("sample", help="write task sequences in binary and CSV form")
    common(p)
    p.add_argument("--count", type=_positive_int, default=10)
    p.add_argument("--L", type=int)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--trigger-pin", type=int)
    p.set_defaults(func=cmd_sample)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DimensionError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
