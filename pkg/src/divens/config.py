"""Experiment configuration: a versioned TOML document.

Example::

    schema = 1
    name = "sd-tree"
    seeds = [0, 1, 2]
    output_dir = "runs/sd-tree"     # relative to the config file

    [dataset]
    kind = "blobs"                  # blobs | rings | cifar10 | csv
    classes = 10
    dim = 32
    per_class = 100

    [architecture]
    layer_widths = [32, 64, 64, 64, 10]
    activation = "tanh"
    scheme = "tree_split"
    split_level = 2
    members = 5

    [train]
    learning_rate = 1e-3
    epochs = 60

    [regularizer]
    kind = "sample_diversity"
    lambda = 0.5

    [evaluation]
    corruptions = ["gaussian_noise"]

    [ood_sets.shifted]
    kind = "blobs"
    center_seed = 77

    [sweep]
    members = [2, 3, 4, 5]
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .data import CORRUPTIONS
from .ensembles import MlpSpec, SharingScheme
from .errors import ConfigurationError
from .regularizers import REG_KINDS, RegularizerSpec
from .training import TrainConfig

SCHEMA_VERSION = 1
SWEEP_AXES = ("members", "split_level", "lambda", "ood_batch_size")


class ConfigError(ConfigurationError):
    """A config problem tied to a field (and, when known, a source line)."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None, path: str | None = None):
        self.field, self.line, self.path = field, line, path
        where = ":".join(str(p) for p in (path, line) if p is not None)
        prefix = f"{where}: " if where else ""
        suffix = f" [field {field}]" if field else ""
        super().__init__(f"{prefix}{message}{suffix}")


# ---------------------------------------------------------------- schema

_DATASET_KEYS = {
    "blobs": {"kind", "classes", "dim", "per_class", "val_per_class", "test_per_class", "spread", "center_seed", "data_seed"},
    "rings": {"kind", "classes", "per_class", "val_per_class", "test_per_class", "noise", "data_seed"},
    "cifar10": {"kind", "train_files", "test_file", "val_fraction", "limit", "data_seed"},
    "csv": {"kind", "train_file", "test_file", "classes", "val_fraction", "data_seed"},
}
_OOD_KEYS = {
    "blobs": {"kind", "center_seed", "per_class", "spread"},
    "uniform": {"kind", "n"},
    "cifar10": {"kind", "file", "limit"},
    "csv": {"kind", "file"},
}
_ARCH_KEYS = {"layer_widths", "activation", "scheme", "split_level", "members", "factor_init"}
_TRAIN_KEYS = {
    "learning_rate", "weight_decay", "batch_size", "epochs", "adam_beta1", "adam_beta2", "adam_eps",
    "warmup_only_epochs", "ood_batch_size", "fgsm_epsilon", "ce_mode", "decoupled_weight_decay",
    "decay_rank1_factors", "early_stop_patience", "restore_best",
}
_REG_KEYS = {"kind", "lambda", "adp_alpha", "adp_beta", "use_chi2_variant", "chi2_literal", "jitter", "combine_with"}
_EVAL_KEYS = {"corruptions", "levels", "bins", "folds"}
_TOP_KEYS = {"schema", "name", "seeds", "output_dir", "dataset", "architecture", "train", "regularizer", "evaluation", "ood_sets", "sweep"}


@dataclass
class ExperimentConfig:
    name: str
    seeds: list[int]
    output_dir: Path
    dataset: dict[str, Any]
    spec: MlpSpec
    scheme: SharingScheme
    members: int
    factor_init: str
    train: TrainConfig
    corruptions: list[str]
    levels: list[int]
    bins: int
    folds: int
    ood_sets: dict[str, dict[str, Any]]
    sweep: dict[str, list] = field(default_factory=dict)
    raw: dict[str, Any] = field(default_factory=dict, repr=False)
    source: Path | None = None

    @property
    def reg(self) -> RegularizerSpec:
        return self.train.reg

    def fingerprint(self, seed: int) -> str:
        """Digest of everything that determines a seed's results."""
        body = {k: v for k, v in self.raw.items() if k not in ("seeds", "output_dir", "sweep", "name")}
        blob = json.dumps({"config": body, "seed": seed}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def architecture_label(self) -> str:
        return f"{self.scheme.describe()} M={self.members}"


# ---------------------------------------------------------------- helpers


class _Reader:
    def __init__(self, text: str, path: str | None):
        self.lines = text.splitlines()
        self.path = path

    def line_of(self, dotted: str) -> int | None:
        """Best-effort source line of a dotted key (section headers, then the key)."""
        parts = dotted.split(".")
        section, key = parts[:-1], parts[-1]
        start = 0
        if section:
            header = re.compile(r"^\s*\[+\s*" + r"\s*\.\s*".join(re.escape(p) for p in section) + r"\s*\]+\s*(#.*)?$")
            found = [i for i, ln in enumerate(self.lines) if header.match(ln)]
            if not found:
                return None
            start = found[0] + 1
        pattern = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
        for i in range(start, len(self.lines)):
            if section and self.lines[i].lstrip().startswith("["):
                break
            if pattern.match(self.lines[i]):
                return i + 1
        return start if section else None

    def error(self, message: str, dotted: str | None) -> ConfigError:
        return ConfigError(message, dotted, self.line_of(dotted) if dotted else None, self.path)


def _table(r: _Reader, doc: dict, key: str, required: bool = True) -> dict:
    value = doc.get(key)
    if value is None:
        if required:
            raise r.error(f"missing section [{key}]", key)
        return {}
    if not isinstance(value, dict):
        raise r.error(f"{key} must be a table", key)
    return value


def _check_keys(r: _Reader, table: dict, allowed: set[str], prefix: str) -> None:
    for k in table:
        if k not in allowed:
            raise r.error(f"unknown key {k!r}", f"{prefix}.{k}" if prefix else k)


def _typed(r: _Reader, table: dict, key: str, kind, prefix: str, default=None, required: bool = False):
    dotted = f"{prefix}.{key}" if prefix else key
    if key not in table:
        if required:
            raise r.error(f"missing required key {key!r}", prefix or key)
        return default
    value = table[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    ok = isinstance(value, kind) and not (kind in (int, float) and isinstance(value, bool))
    if not ok:
        raise r.error(f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}", dotted)
    return value


def _int_list(r: _Reader, table: dict, key: str, prefix: str, default=None) -> list[int] | None:
    dotted = f"{prefix}.{key}" if prefix else key
    if key not in table:
        return default
    value = table[key]
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise r.error("expected a list of integers", dotted)
    return list(value)


def _reg_spec(r: _Reader, table: dict, prefix: str) -> RegularizerSpec:
    _check_keys(r, table, _REG_KEYS, prefix)
    kind = _typed(r, table, "kind", str, prefix, "none")
    if kind not in REG_KINDS:
        raise r.error(f"unknown regularizer {kind!r} (one of {', '.join(REG_KINDS)})", f"{prefix}.kind")
    combine = None
    if "combine_with" in table:
        sub = table["combine_with"]
        if not isinstance(sub, dict):
            raise r.error("combine_with must be a table", f"{prefix}.combine_with")
        combine = _reg_spec(r, sub, f"{prefix}.combine_with")
    try:
        return RegularizerSpec(
            kind=kind,
            lam=_typed(r, table, "lambda", float, prefix),
            adp_alpha=_typed(r, table, "adp_alpha", float, prefix, 0.125),
            adp_beta=_typed(r, table, "adp_beta", float, prefix, 0.5),
            use_chi2_variant=_typed(r, table, "use_chi2_variant", bool, prefix, False),
            chi2_literal=_typed(r, table, "chi2_literal", bool, prefix, False),
            jitter=_typed(r, table, "jitter", float, prefix, 1e-6),
            combine_with=combine,
        )
    except ConfigurationError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise r.error(str(exc), prefix) from None


def _dataset(r: _Reader, table: dict, base: Path) -> dict:
    kind = _typed(r, table, "kind", str, "dataset", required=True)
    if kind not in _DATASET_KEYS:
        raise r.error(f"unknown dataset kind {kind!r}", "dataset.kind")
    _check_keys(r, table, _DATASET_KEYS[kind], "dataset")
    out = dict(table)
    for k in ("train_file", "test_file"):
        if k in out:
            out[k] = str((base / _typed(r, table, k, str, "dataset")).resolve())
    if "train_files" in out:
        files = out["train_files"]
        if not isinstance(files, list) or not all(isinstance(f, str) for f in files):
            raise r.error("expected a list of paths", "dataset.train_files")
        out["train_files"] = [str((base / f).resolve()) for f in files]
    for k in ("classes", "dim", "per_class", "val_per_class", "test_per_class", "center_seed", "data_seed", "limit"):
        if k in out:
            _typed(r, table, k, int, "dataset")
    for k in ("spread", "noise", "val_fraction"):
        if k in out:
            out[k] = _typed(r, table, k, float, "dataset")
    required = {"blobs": ("classes", "dim", "per_class"), "rings": ("classes", "per_class"), "cifar10": ("train_files", "test_file"), "csv": ("train_file", "test_file")}[kind]
    for k in required:
        if k not in out:
            raise r.error(f"dataset kind {kind!r} needs {k!r}", "dataset")
    return out


def _ood_sets(r: _Reader, table: dict, base: Path) -> dict[str, dict]:
    out = {}
    for name, spec in table.items():
        prefix = f"ood_sets.{name}"
        if not isinstance(spec, dict):
            raise r.error("each OOD set must be a table", prefix)
        kind = _typed(r, spec, "kind", str, prefix, required=True)
        if kind not in _OOD_KEYS:
            raise r.error(f"unknown OOD kind {kind!r}", f"{prefix}.kind")
        _check_keys(r, spec, _OOD_KEYS[kind], prefix)
        entry = dict(spec)
        if "file" in entry:
            entry["file"] = str((base / _typed(r, spec, "file", str, prefix)).resolve())
        if "spread" in entry:
            entry["spread"] = _typed(r, spec, "spread", float, prefix)
        for k in ("center_seed", "per_class", "n", "limit"):
            if k in entry:
                _typed(r, spec, k, int, prefix)
        out[name] = entry
    return out


def _sweep(r: _Reader, table: dict) -> dict[str, list]:
    _check_keys(r, table, set(SWEEP_AXES), "sweep")
    out = {}
    for axis, values in table.items():
        if not isinstance(values, list) or not values:
            raise r.error("sweep values must be a non-empty list", f"sweep.{axis}")
        kind = float if axis == "lambda" else int
        for v in values:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and not isinstance(v, int)):
                raise r.error(f"sweep values for {axis} must be {kind.__name__}s", f"sweep.{axis}")
        out[axis] = [kind(v) for v in values]
    return out


# ---------------------------------------------------------------- entry points


def parse_config(text: str, path: str | Path | None = None) -> ExperimentConfig:
    src = str(path) if path is not None else None
    r = _Reader(text, src)
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", None, int(m.group(1)) if m else None, src) from None
    return build_config(doc, r, Path(path).parent if path is not None else Path.cwd(), Path(path) if path else None)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, None, str(path)) from None
    return parse_config(text, path)


def build_config(doc: dict, r: _Reader | None = None, base: Path | None = None, source: Path | None = None) -> ExperimentConfig:
    r = r or _Reader("", None)
    base = base or Path.cwd()
    _check_keys(r, doc, _TOP_KEYS, "")
    schema = _typed(r, doc, "schema", int, "", required=True)
    if schema != SCHEMA_VERSION:
        raise r.error(f"unsupported schema {schema} (expected {SCHEMA_VERSION})", "schema")
    name = _typed(r, doc, "name", str, "", required=True)
    seeds = _int_list(r, doc, "seeds", "", [0, 1, 2])
    if not seeds or len(set(seeds)) != len(seeds) or min(seeds) < 0:
        raise r.error("seeds must be a non-empty list of distinct non-negative integers", "seeds")
    output_dir = base / _typed(r, doc, "output_dir", str, "", f"runs/{name}")

    dataset = _dataset(r, _table(r, doc, "dataset"), base)

    arch = _table(r, doc, "architecture")
    _check_keys(r, arch, _ARCH_KEYS, "architecture")
    widths = _int_list(r, arch, "layer_widths", "architecture")
    if widths is None:
        raise r.error("missing required key 'layer_widths'", "architecture")
    try:
        spec = MlpSpec(tuple(widths), _typed(r, arch, "activation", str, "architecture", "relu"))
        scheme_kind = _typed(r, arch, "scheme", str, "architecture", "independent")
        level = _typed(r, arch, "split_level", int, "architecture", 0)
        scheme = SharingScheme(scheme_kind, level if scheme_kind == "tree_split" else 0)
    except ConfigurationError as exc:
        raise r.error(str(exc), "architecture") from None
    if scheme.kind == "tree_split" and scheme.level > spec.n_layers - 1:
        raise r.error(f"split level {scheme.level} out of range 0..{spec.n_layers - 1}", "architecture.split_level")
    members = _typed(r, arch, "members", int, "architecture", 5)
    if members < 2:
        raise r.error("members must be >= 2", "architecture.members")
    factor_init = _typed(r, arch, "factor_init", str, "architecture", "sign")

    reg = _reg_spec(r, _table(r, doc, "regularizer", required=False), "regularizer")

    train = _table(r, doc, "train", required=False)
    _check_keys(r, train, _TRAIN_KEYS, "train")
    kwargs: dict[str, Any] = {}
    floats = {"learning_rate", "weight_decay", "adam_beta1", "adam_beta2", "adam_eps", "fgsm_epsilon"}
    bools = {"decoupled_weight_decay", "decay_rank1_factors", "restore_best"}
    for k in train:
        kind = float if k in floats else bool if k in bools else str if k == "ce_mode" else int
        kwargs[k] = _typed(r, train, k, kind, "train")
    if kwargs.get("early_stop_patience") == 0:
        kwargs["early_stop_patience"] = None
    try:
        train_cfg = TrainConfig(reg=reg, **kwargs)
    except ConfigurationError as exc:
        raise r.error(str(exc), "train") from None

    ev = _table(r, doc, "evaluation", required=False)
    _check_keys(r, ev, _EVAL_KEYS, "evaluation")
    corruptions = ev.get("corruptions", list(CORRUPTIONS))
    if not isinstance(corruptions, list) or any(c not in CORRUPTIONS for c in corruptions):
        raise r.error(f"corruptions must be drawn from {', '.join(CORRUPTIONS)}", "evaluation.corruptions")
    levels = _int_list(r, ev, "levels", "evaluation", [1, 2, 3, 4, 5])
    if not levels or any(not 1 <= lv <= 5 for lv in levels):
        raise r.error("levels must lie in 1..5", "evaluation.levels")
    bins = _typed(r, ev, "bins", int, "evaluation", 100)
    folds = _typed(r, ev, "folds", int, "evaluation", 5)
    if bins < 1 or folds < 2:
        raise r.error("bins must be >= 1 and folds >= 2", "evaluation")

    ood = _ood_sets(r, _table(r, doc, "ood_sets", required=False), base)
    sweep = _sweep(r, _table(r, doc, "sweep", required=False))

    raw = copy.deepcopy(doc)
    raw["dataset"] = dataset
    raw["ood_sets"] = ood
    return ExperimentConfig(
        name=name, seeds=seeds, output_dir=output_dir, dataset=dataset, spec=spec, scheme=scheme,
        members=members, factor_init=factor_init, train=train_cfg, corruptions=list(corruptions),
        levels=levels, bins=bins, folds=folds, ood_sets=ood, sweep=sweep, raw=raw, source=source,
    )


def with_axis_value(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """Copy of ``cfg`` with one sweep axis overridden."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r} (one of {', '.join(SWEEP_AXES)})", "sweep")
    doc = copy.deepcopy(cfg.raw)
    doc.pop("sweep", None)
    section, key = {
        "members": ("architecture", "members"),
        "split_level": ("architecture", "split_level"),
        "lambda": ("regularizer", "lambda"),
        "ood_batch_size": ("train", "ood_batch_size"),
    }[axis]
    if axis == "split_level" and doc.get("architecture", {}).get("scheme") != "tree_split":
        raise ConfigError("a split_level sweep needs scheme = \"tree_split\"", "architecture.scheme")
    doc.setdefault(section, {})[key] = value
    doc["name"] = f"{cfg.name}[{axis}={value}]"
    doc["output_dir"] = str(cfg.output_dir / f"sweep_{axis}" / f"{axis}={value}")
    # dataset/ood paths are already absolute
    return build_config(doc, None, cfg.output_dir, cfg.source)
