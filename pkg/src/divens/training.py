"""Adam training with coupled L2 decay and diversity regularization.

Randomness is keyed, not stateful: the shuffle for epoch ``e`` and the OOD
batch for global step ``t`` are drawn from streams named by ``(seed, e)``
and ``(seed, t)``.  A run resumed from a :class:`TrainState` therefore
replays exactly the batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import CORRUPTIONS, CorruptionKind, Dataset, OodPool, corrupt, fgsm_perturb, sample_uniform_ood
from .ensembles import EnsembleModel, ForwardResult, load_checkpoint, member_logits, predict, save_checkpoint
from .errors import ConfigurationError, TrainingDiverged
from .metrics import EvalReport, accuracy, auc_roc, disagreement_matrix, jsd, labelled_report, mean_entropy, nll
from .regularizers import RegularizerSpec, cross_entropy, regularization_term
from .rng import make_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 2e-4
    batch_size: int = 128
    epochs: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    reg: RegularizerSpec = field(default_factory=RegularizerSpec)
    warmup_only_epochs: Optional[int] = None
    ood_batch_size: Optional[int] = None
    fgsm_epsilon: Optional[float] = None
    seed: int = 0
    ce_mode: str = "per_member"
    decoupled_weight_decay: bool = False
    decay_rank1_factors: bool = False
    early_stop_patience: Optional[int] = 30
    restore_best: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigurationError("learning_rate must be positive and weight_decay non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.ce_mode not in ("per_member", "mean_prob"):
            raise ConfigurationError(f"unknown ce_mode {self.ce_mode!r}")

    @property
    def ood_n(self) -> int:
        return self.ood_batch_size or self.batch_size


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig, no_decay: frozenset[str] = frozenset()):
    """Bias-corrected Adam; L2 decay is folded into the gradient unless decoupled.

    Updates ``params`` in place and returns ``(params, state)``.
    """
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else g
        decay = cfg.weight_decay if name not in no_decay else 0.0
        if decay and not cfg.decoupled_weight_decay:
            g = g + decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if decay and cfg.decoupled_weight_decay:
            p -= cfg.learning_rate * decay * p
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return params, state


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ce: float
    reg_score: Optional[float]
    val_acc: float
    val_nll: float


@dataclass
class TrainTrace:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    stopped_early: bool = False

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "ce", "reg_score", "val_acc", "val_nll"])
            for r in self.epochs:
                reg = "" if r.reg_score is None else f"{r.reg_score:.6g}"
                w.writerow([r.epoch, f"{r.loss:.6g}", f"{r.ce:.6g}", reg, f"{r.val_acc:.6g}", f"{r.val_nll:.6g}"])


@dataclass
class TrainState:
    """Everything needed to resume training after ``epoch`` completed epochs."""

    epoch: int = 0
    step: int = 0
    adam: AdamState = field(default_factory=AdamState)
    best_val_nll: float = float("inf")
    best_params: Optional[dict[str, np.ndarray]] = None
    stale_epochs: int = 0

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {
            "state/epoch": np.array(self.epoch),
            "state/step": np.array(self.step),
            "state/adam_t": np.array(self.adam.t),
            "state/best_val_nll": np.array(self.best_val_nll),
            "state/stale_epochs": np.array(self.stale_epochs),
        }
        for k, v in self.adam.m.items():
            out[f"adam_m/{k}"] = v
            out[f"adam_v/{k}"] = self.adam.v[k]
        for k, v in (self.best_params or {}).items():
            out[f"best/{k}"] = v
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "TrainState":
        adam = AdamState(t=int(arrays["state/adam_t"]))
        best: dict[str, np.ndarray] = {}
        for k, v in arrays.items():
            if k.startswith("adam_m/"):
                adam.m[k[7:]] = np.array(v)
            elif k.startswith("adam_v/"):
                adam.v[k[7:]] = np.array(v)
            elif k.startswith("best/"):
                best[k[5:]] = np.array(v)
        return cls(
            epoch=int(arrays["state/epoch"]),
            step=int(arrays["state/step"]),
            adam=adam,
            best_val_nll=float(arrays["state/best_val_nll"]),
            best_params=best or None,
            stale_epochs=int(arrays["state/stale_epochs"]),
        )


def save_training_checkpoint(path, model: EnsembleModel, state: TrainState) -> None:
    save_checkpoint(path, model, state.to_arrays())


def load_training_checkpoint(path) -> tuple[EnsembleModel, TrainState]:
    model, extra = load_checkpoint(path)
    return model, TrainState.from_arrays(extra)


def _no_decay_names(model: EnsembleModel, cfg: TrainConfig) -> frozenset[str]:
    if cfg.decay_rank1_factors:
        return frozenset()
    return frozenset(n for n in model.params if n.endswith(".r") or n.endswith(".s"))


def regularized_in_epoch(cfg: TrainConfig, epoch: int) -> bool:
    if not cfg.reg.active:
        return False
    return cfg.warmup_only_epochs is None or epoch < cfg.warmup_only_epochs


def _ood_batch(model: EnsembleModel, cfg: TrainConfig, step: int, pool: OodPool | None) -> np.ndarray:
    if pool is not None:
        x = pool.sample(cfg.ood_n, cfg.seed, step)
    else:
        x = sample_uniform_ood(model.spec.input_dim, cfg.ood_n, cfg.seed, step)
    if cfg.fgsm_epsilon:
        x = fgsm_perturb(model, cfg.reg, x, cfg.fgsm_epsilon)
    return x


def training_loss(model: EnsembleModel, xb: np.ndarray, yb: np.ndarray, cfg: TrainConfig, regularize: bool, ood=None):
    """Returns (loss tensor, ce value, regularization term value or None)."""
    logits = member_logits(model, xb)
    ce = cross_entropy(yb, logits, cfg.ce_mode)
    if not regularize:
        return ce, ce.item(), None
    fwd = None
    if any(c.kind in ("adp", "neg_corr", "chi2") for c in cfg.reg.components()):
        probs = [ad.softmax_rows(z) for z in logits]
        fwd = ForwardResult(logits, probs, ad.mean(ad.stack(probs), axis=0))
    term, _ = regularization_term(cfg.reg, model, fwd, yb, ood)
    return ce - term, ce.item(), term.item()


def validation_metrics(model: EnsembleModel, ds: Dataset) -> tuple[float, float]:
    _, probs = predict(model, ds.inputs)
    mean_p = probs.mean(axis=0)
    return accuracy(mean_p, ds.labels), nll(mean_p, ds.labels)


def train(
    model: EnsembleModel,
    train_ds: Dataset,
    val_ds: Dataset | None,
    cfg: TrainConfig,
    state: TrainState | None = None,
    ood_pool: OodPool | None = None,
    stop_after_epoch: int | None = None,
) -> tuple[EnsembleModel, TrainTrace, TrainState]:
    """Train ``model`` in place.

    ``stop_after_epoch`` halts once that many epochs are complete (the
    returned state resumes the run).  Raises :class:`TrainingDiverged` on a
    non-finite loss or parameter; the exception carries the partial trace.
    """
    if model.spec.classes != train_ds.classes:
        raise ConfigurationError(f"model predicts {model.spec.classes} classes, data has {train_ds.classes}")
    if model.spec.input_dim != train_ds.dim:
        raise ConfigurationError(f"model expects {model.spec.input_dim} inputs, data has {train_ds.dim}")
    state = state or TrainState()
    trace = TrainTrace()
    params = model.params
    no_decay = _no_decay_names(model, cfg)
    n = len(train_ds)
    last = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)

    epoch = state.epoch
    while epoch < last:
        order = make_rng(cfg.seed, "shuffle", epoch).permutation(n)
        regularize = regularized_in_epoch(cfg, epoch)
        losses, ces, regs = [], [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            ood = _ood_batch(model, cfg, state.step, ood_pool) if regularize and cfg.reg.needs_ood else None
            with np.errstate(over="ignore", invalid="ignore"):  # non-finite values are caught below
                loss, ce_val, reg_val = training_loss(model, train_ds.inputs[idx], train_ds.labels[idx], cfg, regularize, ood)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(state.step, value, trace)
            ad.zero_grad(params.values())
            ad.backward(loss)
            with np.errstate(over="ignore", invalid="ignore"):  # non-finite values are caught below
                adam_step({k: p.value for k, p in params.items()}, {k: p.grad for k, p in params.items()}, state.adam, cfg, no_decay)
            for p in params.values():
                if not np.all(np.isfinite(p.value)):
                    raise TrainingDiverged(state.step, float("nan"), trace)
            state.step += 1
            losses.append(value)
            ces.append(ce_val)
            if reg_val is not None:
                regs.append(reg_val)
            trace.step_losses.append(value)

        val_acc, val_nll = validation_metrics(model, val_ds) if val_ds is not None else (float("nan"), float("nan"))
        trace.epochs.append(
            EpochRecord(epoch + 1, float(np.mean(losses)), float(np.mean(ces)), float(np.mean(regs)) if regs else None, val_acc, val_nll)
        )
        epoch += 1
        state.epoch = epoch
        log.debug("epoch %d loss %.4f val_acc %.4f", epoch, trace.epochs[-1].loss, val_acc)

        if val_ds is not None and cfg.early_stop_patience is not None:
            if val_nll < state.best_val_nll:
                state.best_val_nll = val_nll
                state.best_params = model.get_values()
                state.stale_epochs = 0
            else:
                state.stale_epochs += 1
                if state.stale_epochs >= cfg.early_stop_patience:
                    trace.stopped_early = True
                    break

    finished = trace.stopped_early or state.epoch >= cfg.epochs
    if finished and cfg.restore_best and state.best_params is not None:
        model.set_values(state.best_params)
    return model, trace, state


def evaluate(
    model: EnsembleModel,
    ds: Dataset,
    corruptions: Sequence[str] = CORRUPTIONS,
    ood_sets: dict[str, np.ndarray] | None = None,
    *,
    bins: int = 100,
    folds: int = 5,
    seed: int = 0,
    levels: Sequence[int] = (1, 2, 3, 4, 5),
) -> list[EvalReport]:
    """Clean cell, every corruption kind × level, then one AUC row per OOD set."""
    logits, probs = predict(model, ds.inputs)
    reports = [labelled_report("clean", logits, probs, ds.labels, bins=bins, folds=folds, seed=seed)]
    for kind in corruptions:
        for level in levels:
            c = CorruptionKind(kind, level)
            shifted = corrupt(ds, c, seed)
            lg, pr = predict(model, shifted.inputs)
            reports.append(labelled_report(str(c), lg, pr, shifted.labels, bins=bins, folds=folds, seed=seed))
    id_mean = probs.mean(axis=0)
    for name, x in (ood_sets or {}).items():
        _, pr = predict(model, x)
        mean_p = pr.mean(axis=0)
        reports.append(
            EvalReport(
                cell=f"ood:{name}",
                auc_roc=auc_roc(id_mean, mean_p),
                mean_entropy=mean_entropy(mean_p),
                jsd=jsd(pr, mean_p),
                disagreement=disagreement_matrix(pr),
            )
        )
    return reports
