"""Seed-replicated experiment runs, parameter sweeps and comparison reports.

Layout of a run directory::

    manifest.json          run identity, PRNG name, per-seed fingerprints
    results.csv            experiment,seed,cell,metric,value
    summary.csv            experiment,cell,metric,mean,std,n
    trace_<seed>.csv       per-epoch training trace
    checkpoints/seed_<seed>.npz
    seeds/seed_<seed>.json per-seed rows and status (merged into results.csv)
"""

from __future__ import annotations

import csv
import json
import logging
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import ExperimentConfig, with_axis_value
from .data import Dataset, import_csv, make_blobs, make_rings, read_cifar10_binary
from .ensembles import init_ensemble, save_checkpoint
from .errors import ConfigurationError, TrainingDiverged, UsageError
from .rng import PRNG_NAME, make_rng
from .training import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

RESULT_HEADER = ["experiment", "seed", "cell", "metric", "value"]
SUMMARY_HEADER = ["experiment", "cell", "metric", "mean", "std", "n"]
SWEEP_HEADER = ["axis", "metric", "mean", "std"]
REPORT_METRICS = (("accuracy", "max"), ("nll", "min"), ("ece", "min"))


def fmt(value: float) -> str:
    """Six significant digits, period decimal separator."""
    return f"{float(value):.6g}"


def deterministic_mode() -> bool:
    return os.environ.get("DIVENS_DETERMINISTIC", "") == "1"


@contextmanager
def _blas_limits(single: bool) -> Iterator[None]:
    with threadpool_limits(limits=1) if single else nullcontext():
        yield


# ---------------------------------------------------------------- datasets


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset
    ood: dict[str, np.ndarray]


def _holdout(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    order = make_rng(seed, "val-split").permutation(len(ds))
    n_val = max(1, int(round(fraction * len(ds))))
    return ds.subset(order[n_val:]), ds.subset(order[:n_val])


def _limit(ds: Dataset, limit: Optional[int], seed: int, tag: str) -> Dataset:
    if limit is None or limit >= len(ds):
        return ds
    return ds.subset(np.sort(make_rng(seed, "limit", tag).permutation(len(ds))[:limit]))


def build_splits(cfg: ExperimentConfig, seed: int) -> Splits:
    d = cfg.dataset
    s = d.get("data_seed", seed)
    kind = d["kind"]
    if kind == "blobs":
        per = d["per_class"]
        args = (d["classes"], d["dim"])
        spread, centers = d.get("spread", 1.0), d.get("center_seed", 0)
        train_ds = make_blobs(*args, per, spread, s * 10 + 1, centers, "train")
        val_ds = make_blobs(*args, d.get("val_per_class", max(1, per // 4)), spread, s * 10 + 2, centers, "val")
        test_ds = make_blobs(*args, d.get("test_per_class", per), spread, s * 10 + 3, centers, "test")
    elif kind == "rings":
        per, noise = d["per_class"], d.get("noise", 0.1)
        train_ds = make_rings(d["classes"], per, noise, s * 10 + 1, "train")
        val_ds = make_rings(d["classes"], d.get("val_per_class", max(1, per // 4)), noise, s * 10 + 2, "val")
        test_ds = make_rings(d["classes"], d.get("test_per_class", per), noise, s * 10 + 3, "test")
    elif kind == "cifar10":
        parts = [read_cifar10_binary(f) for f in d["train_files"]]
        full = Dataset(np.concatenate([p.inputs for p in parts]), np.concatenate([p.labels for p in parts]), 10, "train")
        full = _limit(full, d.get("limit"), s, "train")
        train_ds, val_ds = _holdout(full, d.get("val_fraction", 0.1), s)
        test_ds = _limit(read_cifar10_binary(d["test_file"], "test"), d.get("limit"), s, "test")
    else:
        full = import_csv(d["train_file"], d.get("classes"), "train")
        train_ds, val_ds = _holdout(full, d.get("val_fraction", 0.1), s)
        test_ds = import_csv(d["test_file"], full.classes, "test")

    ood = {}
    for name, o in cfg.ood_sets.items():
        if o["kind"] == "blobs":
            if kind != "blobs":
                raise ConfigurationError(f"OOD set {name!r}: shifted blobs need a blobs dataset")
            x = make_blobs(d["classes"], d["dim"], o.get("per_class", d.get("test_per_class", d["per_class"])),
                           o.get("spread", d.get("spread", 1.0)), s * 10 + 4, o.get("center_seed", 77)).inputs
        elif o["kind"] == "uniform":
            # a stream of its own: never coincides with the training OOD batches
            x = make_rng(s, "ood-eval", name).random((o.get("n", 1000), train_ds.dim))
        elif o["kind"] == "cifar10":
            x = _limit(read_cifar10_binary(o["file"]), o.get("limit"), s, name).inputs
        else:
            x = import_csv(o["file"]).inputs
        if x.shape[1] != train_ds.dim:
            raise ConfigurationError(f"OOD set {name!r} has {x.shape[1]} features, data has {train_ds.dim}")
        ood[name] = x
    return Splits(train_ds, val_ds, test_ds, ood)


# ---------------------------------------------------------------- one seed


@dataclass
class SeedOutcome:
    seed: int
    fingerprint: str
    rows: list[tuple[str, str, str]]  # (cell, metric, formatted value)
    diverged_step: Optional[int] = None
    skipped: bool = False

    @property
    def diverged(self) -> bool:
        return self.diverged_step is not None

    def to_json(self) -> dict:
        return {"seed": self.seed, "fingerprint": self.fingerprint, "diverged_step": self.diverged_step, "rows": [list(r) for r in self.rows]}

    @classmethod
    def from_json(cls, doc: dict) -> "SeedOutcome":
        return cls(doc["seed"], doc["fingerprint"], [tuple(r) for r in doc["rows"]], doc["diverged_step"], skipped=True)


def _seed_paths(out: Path, seed: int) -> dict[str, Path]:
    return {
        "status": out / "seeds" / f"seed_{seed}.json",
        "trace": out / f"trace_{seed}.csv",
        "checkpoint": out / "checkpoints" / f"seed_{seed}.npz",
    }


def run_seed(cfg: ExperimentConfig, seed: int, single_thread: bool = False) -> SeedOutcome:
    """Train and evaluate one replicate; writes only this seed's private files."""
    paths = _seed_paths(cfg.output_dir, seed)
    for p in paths.values():
        p.parent.mkdir(parents=True, exist_ok=True)
    with _blas_limits(single_thread):
        splits = build_splits(cfg, seed)
        model = init_ensemble(cfg.spec, cfg.scheme, cfg.members, seed, cfg.factor_init)
        tcfg = TrainConfig(**{**cfg.train.__dict__, "seed": seed})
        outcome = SeedOutcome(seed, cfg.fingerprint(seed), [])
        try:
            model, trace, state = train(model, splits.train, splits.val, tcfg)
        except TrainingDiverged as exc:
            log.warning("%s seed %d diverged at step %d", cfg.name, seed, exc.step)
            if exc.trace is not None:
                exc.trace.to_csv(paths["trace"])
            outcome.diverged_step = exc.step
            outcome.rows.append(("train", "diverged_at_step", str(exc.step)))
        else:
            trace.to_csv(paths["trace"])
            save_checkpoint(paths["checkpoint"], model)
            outcome.rows.append(("train", "epochs", str(state.epoch)))
            reports = evaluate(model, splits.test, cfg.corruptions, splits.ood, bins=cfg.bins, folds=cfg.folds, seed=seed, levels=cfg.levels)
            for rep in reports:
                for metric, value in rep.metrics().items():
                    outcome.rows.append((rep.cell, metric, fmt(value)))
    paths["status"].write_text(json.dumps(outcome.to_json(), indent=1))
    return outcome


def _run_seed_job(args) -> SeedOutcome:
    cfg, seed = args
    return run_seed(cfg, seed, single_thread=True)


# ---------------------------------------------------------------- run


@dataclass
class RunResult:
    config: ExperimentConfig
    outcomes: list[SeedOutcome] = field(default_factory=list)

    @property
    def diverged(self) -> list[int]:
        return [o.seed for o in self.outcomes if o.diverged]

    @property
    def computed(self) -> list[int]:
        return [o.seed for o in self.outcomes if not o.skipped]


def _cached(cfg: ExperimentConfig, seed: int) -> Optional[SeedOutcome]:
    status = _seed_paths(cfg.output_dir, seed)["status"]
    if not status.exists():
        return None
    try:
        outcome = SeedOutcome.from_json(json.loads(status.read_text()))
    except (ValueError, KeyError):
        return None
    return outcome if outcome.fingerprint == cfg.fingerprint(seed) else None


def run(cfg: ExperimentConfig, *, seed_offset: int = 0, jobs: int = 1, force: bool = False) -> RunResult:
    """Every seed replicate, then a single-writer merge into results/summary files."""
    seeds = [s + seed_offset for s in cfg.seeds]
    if min(seeds) < 0:
        raise ConfigurationError("seed offset makes a seed negative")
    deterministic = deterministic_mode()
    if deterministic:
        jobs = 1
    cfg.output_dir.mkdir(parents=True, exist_ok=True)

    outcomes: dict[int, SeedOutcome] = {}
    todo = []
    for s in seeds:
        hit = None if force else _cached(cfg, s)
        if hit is not None:
            log.info("%s seed %d up to date, skipping", cfg.name, s)
            outcomes[s] = hit
        else:
            todo.append(s)
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(todo))) as pool:
            for outcome in pool.map(_run_seed_job, [(cfg, s) for s in todo]):
                outcomes[outcome.seed] = outcome
    else:
        for s in todo:
            outcomes[s] = run_seed(cfg, s, single_thread=deterministic)

    result = RunResult(cfg, [outcomes[s] for s in seeds])
    write_results(cfg, result.outcomes)
    return result


def write_results(cfg: ExperimentConfig, outcomes: list[SeedOutcome]) -> None:
    out = cfg.output_dir
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_HEADER)
        for o in outcomes:
            for cell, metric, value in o.rows:
                w.writerow([cfg.name, o.seed, cell, metric, value])
    write_summary(out / "results.csv", out / "summary.csv")
    manifest = {
        "format": "divens-run",
        "version": __version__,
        "prng": PRNG_NAME,
        "experiment": cfg.name,
        "architecture": cfg.architecture_label(),
        "regularizer": regularizer_label(cfg),
        "seeds": [o.seed for o in outcomes],
        "fingerprints": {str(o.seed): o.fingerprint for o in outcomes},
        "diverged_seeds": [o.seed for o in outcomes if o.diverged],
        "config": cfg.raw,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")


def regularizer_label(cfg: ExperimentConfig) -> str:
    reg = cfg.reg
    if not reg.active:
        return "none"
    lams = ",".join(f"{c.lam:g}" for c in reg.components())
    return f"{reg.label()} (lambda={lams})"


def write_summary(results_path: Path, summary_path: Path) -> list[dict]:
    """Mean and sample std over seeds, computed from results.csv alone."""
    groups: dict[tuple[str, str, str], list[float]] = defaultdict(list)
    with open(results_path, newline="") as fh:
        for row in csv.DictReader(fh):
            groups[(row["experiment"], row["cell"], row["metric"])].append(float(row["value"]))
    rows = []
    for (exp, cell, metric), values in groups.items():
        v = np.asarray(values)
        std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        rows.append({"experiment": exp, "cell": cell, "metric": metric, "mean": fmt(v.mean()), "std": fmt(std), "n": str(len(v))})
    with open(summary_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def read_summary(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- sweep


def sweep(cfg: ExperimentConfig, axis: str, *, seed_offset: int = 0, jobs: int = 1, force: bool = False) -> tuple[Path, list[RunResult]]:
    values = cfg.sweep.get(axis)
    if not values:
        raise ConfigurationError(f"config lists no values for sweep axis {axis!r} (add [sweep] {axis} = [...])")
    results = [run(with_axis_value(cfg, axis, v), seed_offset=seed_offset, jobs=jobs, force=force) for v in values]
    path = cfg.output_dir / f"sweep_{axis}" / "sweep.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for value, res in zip(values, results):
            for row in read_summary(res.config.output_dir / "summary.csv"):
                w.writerow([fmt(value), f"{row['cell']}/{row['metric']}", row["mean"], row["std"]])
    return path, results


# ---------------------------------------------------------------- report


@dataclass
class ReportTable:
    columns: list[tuple[str, str]]          # (metric, condition)
    rows: list[tuple[str, str]]             # (architecture, regularizer)
    cells: dict[tuple[int, int], tuple[float, float]]  # -> (mean, std)
    best: dict[int, set[int]]               # column -> best row indices

    def render_text(self) -> str:
        head = ["architecture", "regularizer"] + [f"{m} {c}" for m, c in self.columns]
        body = []
        for i, (arch, reg) in enumerate(self.rows):
            line = [arch, reg]
            for j in range(len(self.columns)):
                if (i, j) not in self.cells:
                    line.append("-")
                    continue
                mean, std = self.cells[i, j]
                text = f"{mean:.4f}±{std:.4f}"
                line.append(f"**{text}**" if i in self.best.get(j, ()) else text)
            body.append(line)
        widths = [max(len(r[k]) for r in [head] + body) for k in range(len(head))]
        fmt_row = lambda r: "| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |"
        rule = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
        return "\n".join([fmt_row(head), rule] + [fmt_row(r) for r in body]) + "\n"

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["architecture", "regularizer"] + [f"{m}:{c}{s}" for m, c in self.columns for s in ("", ":std")])
            for i, (arch, reg) in enumerate(self.rows):
                vals = []
                for j in range(len(self.columns)):
                    cell = self.cells.get((i, j))
                    vals += ["-", "-"] if cell is None else [fmt(cell[0]), fmt(cell[1])]
                w.writerow([arch, reg] + vals)


def _find_runs(root: Path) -> list[Path]:
    return sorted(p.parent for p in root.rglob("manifest.json") if (p.parent / "summary.csv").exists())


def build_report(root: Path) -> ReportTable:
    runs = _find_runs(Path(root))
    if not runs:
        raise UsageError(f"no completed runs under {root}")
    labels, stats, diverged = [], [], []
    for run_dir in runs:
        manifest = json.loads((run_dir / "manifest.json").read_text())
        summary = {(r["cell"], r["metric"]): (float(r["mean"]), float(r["std"])) for r in read_summary(run_dir / "summary.csv")}
        labels.append((manifest["architecture"], manifest["regularizer"], manifest["experiment"]))
        stats.append(summary)
        diverged.append(bool(manifest["diverged_seeds"]))

    # disambiguate identical (architecture, regularizer) pairs by experiment name
    counts = defaultdict(int)
    for a, r, _ in labels:
        counts[a, r] += 1
    rows = [(a, r if counts[a, r] == 1 else f"{r} [{e}]") for a, r, e in labels]

    ood_cells = sorted({cell for s in stats for cell, m in s if cell.startswith("ood:") and m == "auc_roc"})
    columns = [(m, c) for m, _ in REPORT_METRICS for c in ("clean", "worst")] + [("auc_roc", cell[4:]) for cell in ood_cells]
    goal = dict(REPORT_METRICS, auc_roc="max")

    cells: dict[tuple[int, int], tuple[float, float]] = {}
    for i, summary in enumerate(stats):
        if diverged[i]:
            continue
        shifted = defaultdict(list)
        for cell, metric in summary:
            if ":" in cell and not cell.startswith("ood:"):
                shifted[int(cell.rsplit(":", 1)[1])].append((cell, metric))
        top = max(shifted) if shifted else None
        for j, (metric, cond) in enumerate(columns):
            if metric == "auc_roc":
                value = summary.get((f"ood:{cond}", metric))
            elif cond == "clean":
                value = summary.get(("clean", metric))
            else:
                found = [summary[k] for k in shifted.get(top, []) if k[1] == metric]
                value = (float(np.mean([f[0] for f in found])), float(np.mean([f[1] for f in found]))) if found else None
            if value is not None:
                cells[i, j] = value

    best: dict[int, set[int]] = {}
    for j, (metric, _) in enumerate(columns):
        present = {i: cells[i, j][0] for i in range(len(rows)) if (i, j) in cells}
        if present:
            target = (max if goal[metric] == "max" else min)(present.values())
            best[j] = {i for i, v in present.items() if v == target}
    return ReportTable(columns, rows, cells, best)


def report(root: Path) -> tuple[ReportTable, str]:
    table = build_report(root)
    text = table.render_text()
    (Path(root) / "report.txt").write_text(text)
    table.write_csv(Path(root) / "report.csv")
    return table, text
