"""Command-line front end: ``synthesize``, ``evaluate``, ``sweep`` and ``density``.

A run is fully described by a JSON document (``--config``) whose top-level
keys are ``benchmark``, ``strategy``, ``seed`` and the per-module sections
``train``, ``adaptive``, ``estimator`` and ``evaluation``.  Command-line flags
override the top-level keys.

Exit codes: 0 success, 1 error, 2 synthesis finished without a certificate
(the last hard-sample set is written to ``hard_samples.json``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import adaptive, evaluation
from .confset import EstimatorConfig
from .dynamics import BENCHMARKS, ContractViolation, get_system
from .hetgp import HetGPModel, PerceptionDataset
from .neural import MlpParams
from .synthesis import TrainConfig

log = logging.getLogger("perception_cbf")

EXIT_OK, EXIT_ERROR, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunSpec:
    benchmark: str = "cartpole"
    strategy: str = "adaptive"
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    adaptive: adaptive.AdaptiveConfig = field(default_factory=adaptive.AdaptiveConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    evaluation: evaluation.EvalConfig = field(default_factory=evaluation.EvalConfig)

    def __post_init__(self):
        if self.benchmark not in BENCHMARKS + ("toy",):
            raise ContractViolation(f"unknown benchmark {self.benchmark!r}")
        if self.seed < 0:
            raise ContractViolation("seed must be non-negative")
        self.adaptive = replace(self.adaptive, strategy=self.strategy)

    def to_json(self) -> dict:
        out = {"benchmark": self.benchmark, "strategy": self.strategy, "seed": self.seed}
        for name in ("train", "adaptive", "estimator", "evaluation"):
            d = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "RunSpec":
        kinds = {
            "train": TrainConfig,
            "adaptive": adaptive.AdaptiveConfig,
            "estimator": EstimatorConfig,
            "evaluation": evaluation.EvalConfig,
        }
        kw = {}
        for key, value in obj.items():
            if key in kinds:
                known = {f.name for f in fields(kinds[key])}
                extra = set(value) - known
                if extra:
                    raise ContractViolation(f"unknown {key} settings: {sorted(extra)}")
                kw[key] = kinds[key](**value)
            elif key in ("benchmark", "strategy", "seed"):
                kw[key] = value
            else:
                raise ContractViolation(f"unknown config key {key!r}")
        return cls(**kw)


def atomic_write(path: Path, text: str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(obj) -> str:
    return json.dumps(obj, indent=1) + "\n"


def _fmt_ratio(r: float) -> str:
    s = f"{r:.3f}"
    return s if float(s) == r else repr(r)


# --------------------------------------------------------------------------
# commands


def synthesize(spec: RunSpec, out: Path) -> tuple[int, adaptive.RunOutcome]:
    """Run the synthesis loop and write every artifact under ``out``."""
    sys_ = get_system(spec.benchmark)
    res = adaptive.run(sys_, spec.adaptive, spec.train, spec.estimator, np.random.default_rng(spec.seed))
    out = Path(out)
    atomic_write(out / "h.json", res.h.dumps() + "\n")
    atomic_write(out / "pi.json", res.pi.dumps() + "\n")
    if res.model is not None:
        atomic_write(out / "gp.json", res.model.dumps() + "\n")
    atomic_write(out / "training_log.csv", res.last_training_log)
    for k, snap in enumerate(res.snapshots, start=1):
        if snap is not None:
            atomic_write(out / f"iter_{k}" / "dataset.csv", snap.to_csv())
    if res.dataset is not None:
        atomic_write(out / "dataset.csv", res.dataset.to_csv())
    if not res.success:
        rows = [[repr(float(v)) for v in row] for row in res.hard_samples]
        atomic_write(out / "hard_samples.json", _dump({"benchmark": spec.benchmark, "hard_samples": rows}))
    atomic_write(out / "manifest.json", _dump(res.manifest(spec.to_json())))
    return (EXIT_OK if res.success else EXIT_FAILURE), res


def _load_checkpoints(ckpt: Path):
    h = MlpParams.from_json(json.loads((ckpt / "h.json").read_text()))
    pi = MlpParams.from_json(json.loads((ckpt / "pi.json").read_text()))
    gp = ckpt / "gp.json"
    model = HetGPModel.from_json(json.loads(gp.read_text())) if gp.exists() else None
    return h, pi, model


def evaluate(spec: RunSpec, out: Path, checkpoints: Path | None, zero: bool = False) -> evaluation.EvalReport:
    sys_ = get_system(spec.benchmark)
    h = None
    if zero:
        ecm = evaluation.zero_controller(sys_)
    else:
        if checkpoints is None:
            raise UsageError("evaluate needs --checkpoints or --controller zero")
        h, pi, model = _load_checkpoints(Path(checkpoints))
        if h.n_in != sys_.n:
            raise ContractViolation(f"barrier expects {h.n_in} inputs, {spec.benchmark} has {sys_.n} states")
        ecm = evaluation.make_ecm(sys_, pi, model, spec.estimator)
    cfg = spec.evaluation
    rep = evaluation.unsafe_ratio(sys_, ecm, cfg, np.random.default_rng(cfg.seed), h=h, alpha_slope=spec.train.alpha_slope)
    atomic_write(Path(out) / "eval_report.json", rep.dumps() + "\n")
    return rep


def _sweep_cell(args) -> tuple[str, int, int, str]:
    spec_json, strategy, budget, seed, cell_dir = args
    spec = RunSpec.from_json(spec_json)
    acfg = spec.adaptive
    if strategy != "nogp":
        acfg = replace(acfg, initial_N=max(5, min(acfg.initial_N, budget // 2)), budget=budget)
    spec = replace(spec, strategy=strategy, seed=seed, adaptive=replace(acfg, strategy=strategy))
    try:
        _, res = synthesize(spec, cell_dir)
        sys_ = get_system(spec.benchmark)
        ecm = evaluation.make_ecm(sys_, res.pi, res.model, spec.estimator)
        rep = evaluation.unsafe_ratio(sys_, ecm, spec.evaluation, np.random.default_rng(spec.evaluation.seed))
        atomic_write(Path(cell_dir) / "eval_report.json", rep.dumps() + "\n")
        value = repr(rep.unsafe_ratio)
    except Exception as exc:  # a failed cell must not stop the sweep
        log.error("sweep cell %s/%s/%s failed: %s", strategy, budget, seed, exc)
        value = "NA"
    return strategy, (0 if strategy == "nogp" else budget), seed, value


def sweep(spec: RunSpec, out: Path, budgets: list[int], seeds: list[int], jobs: int = 1, strategies=adaptive.STRATEGIES) -> str:
    """Run every (strategy, budget, seed) cell and write ``sweep.csv``.

    The perception-trusting baseline collects no data, so it runs once per
    seed with ``n_samples = 0``.
    """
    if list(budgets) != sorted(set(budgets)) or not budgets:
        raise UsageError("budgets must be strictly increasing")
    out = Path(out)
    base = spec.to_json()
    cells = []
    for strategy in strategies:
        for b in [budgets[0]] if strategy == "nogp" else budgets:
            for s in seeds:
                name = f"{strategy}_s{s}" if strategy == "nogp" else f"{strategy}_b{b}_s{s}"
                cells.append((base, strategy, b, s, out / "cells" / name))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        rows = [_sweep_cell(c) for c in cells]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["benchmark", "strategy", "n_samples", "unsafe_ratio", "seed"])
    for strategy, n, s, value in rows:
        w.writerow([spec.benchmark, strategy, n, value, s])
    text = buf.getvalue()
    atomic_write(out / "sweep.csv", text)
    return text


def density(spec: RunSpec, out: Path, datasets: list[Path], dims: tuple[int, int], bins: int) -> list[Path]:
    sys_ = get_system(spec.benchmark)
    if not all(0 <= d < sys_.n for d in dims) or dims[0] == dims[1]:
        raise UsageError(f"dims must be two distinct indices below {sys_.n}")
    written = []
    for k, path in enumerate(datasets):
        D = PerceptionDataset.from_csv(Path(path).read_text())
        if D.n != sys_.n:
            raise ContractViolation(f"{path}: dataset dimension {D.n} does not match {spec.benchmark}")
        counts, xe, ye = evaluation.export_density(D.x, dims, bins, sys_.state_lo, sys_.state_hi)
        target = Path(out) / f"density_{k}.csv"
        atomic_write(target, evaluation.density_to_csv(counts, xe, ye, dims))
        written.append(target)
    return written


# --------------------------------------------------------------------------
# argument handling


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run specification")
    common.add_argument("--benchmark", choices=BENCHMARKS + ("toy",))
    common.add_argument("--strategy", choices=adaptive.STRATEGIES)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="perception-cbf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synthesize", parents=[common], help="run the synthesis loop")
    ev = sub.add_parser("evaluate", parents=[common], help="unsafe ratio of saved checkpoints")
    ev.add_argument("--checkpoints", type=Path, help="directory holding h.json, pi.json and optionally gp.json")
    ev.add_argument("--controller", choices=("checkpoint", "zero"), default="checkpoint")
    sw = sub.add_parser("sweep", parents=[common], help="unsafe ratio against dataset size")
    sw.add_argument("--budgets", type=_int_list, required=True)
    sw.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    de = sub.add_parser("density", parents=[common], help="2-D histograms of datasets")
    de.add_argument("datasets", nargs="+", type=Path)
    de.add_argument("--dims", type=_int_list, default=[0, 1])
    de.add_argument("--bins", type=int, default=10)
    return p


def resolve_spec(args) -> RunSpec:
    obj = json.loads(args.config.read_text()) if args.config else {}
    for key in ("benchmark", "strategy", "seed"):
        if getattr(args, key) is not None:
            obj[key] = getattr(args, key)
    return RunSpec.from_json(obj)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        spec = resolve_spec(args)
        if args.jobs < 1:
            raise UsageError("--jobs must be positive")
        if args.command == "synthesize":
            code, res = synthesize(spec, args.out)
            print(f"outcome={'success' if res.success else 'failure'} iterations={len(res.reports)}")
            return code
        if args.command == "evaluate":
            rep = evaluate(spec, args.out, args.checkpoints, zero=args.controller == "zero")
            print(f"unsafe_ratio={_fmt_ratio(rep.unsafe_ratio)}")
            return EXIT_OK
        if args.command == "sweep":
            sys.stdout.write(sweep(spec, args.out, args.budgets, args.seeds, args.jobs))
            return EXIT_OK
        if args.command == "density":
            if len(args.dims) != 2:
                raise UsageError("--dims takes exactly two indices")
            for path in density(spec, args.out, args.datasets, tuple(args.dims), args.bins):
                print(path)
            return EXIT_OK
        raise UsageError(f"unknown command {args.command}")
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_ERROR
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
