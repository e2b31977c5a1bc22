"""Accuracy, likelihood, calibration, OOD detection and diversity diagnostics.

All functions are pure numpy.  Member predictions are ``(M, B, C)`` arrays,
ensemble predictions ``(B, C)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import rankdata

from .errors import NumericalError
from .rng import make_rng

NLL_FLOOR = 1e-12
T_BOUNDS = (0.05, 20.0)


def _labels(labels) -> np.ndarray:
    return np.asarray(labels, dtype=np.int64).ravel()


def accuracy(mean_probs, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    p = np.asarray(mean_probs, dtype=np.float64)
    return float(np.mean(p.argmax(axis=1) == _labels(labels)))


def nll(mean_probs, labels) -> float:
    p = np.asarray(mean_probs, dtype=np.float64)
    y = _labels(labels)
    return float(-np.mean(np.log(np.maximum(p[np.arange(len(y)), y], NLL_FLOOR))))


def _bin_index(conf: np.ndarray, bins: int) -> np.ndarray:
    # right-inclusive bins over (0, 1]; confidence 0 falls into the first bin
    edges = np.linspace(0.0, 1.0, bins + 1)
    return np.clip(np.digitize(conf, edges, right=True) - 1, 0, bins - 1)


def reliability_bins(mean_probs, labels, bins: int = 100) -> dict[str, np.ndarray]:
    """Per-bin sample count, accuracy and mean confidence (equal-width bins)."""
    p = np.asarray(mean_probs, dtype=np.float64)
    y = _labels(labels)
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == y).astype(np.float64)
    idx = _bin_index(conf, bins)
    count = np.bincount(idx, minlength=bins).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.bincount(idx, weights=correct, minlength=bins) / count
        mean_conf = np.bincount(idx, weights=conf, minlength=bins) / count
    edges = np.linspace(0.0, 1.0, bins + 1)
    return {"lower": edges[:-1], "upper": edges[1:], "count": count, "accuracy": acc, "confidence": mean_conf}


def ece(mean_probs, labels, bins: int = 100) -> float:
    """Expected calibration error; empty bins contribute nothing."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    rb = reliability_bins(mean_probs, labels, bins)
    total = rb["count"].sum()
    if total == 0:
        return 0.0
    used = rb["count"] > 0
    gaps = np.abs(rb["accuracy"][used] - rb["confidence"][used])
    return float(np.sum(rb["count"][used] / total * gaps))


# ---------------------------------------------------------------- temperature scaling


def golden_section(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-4) -> float:
    """Minimiser of a unimodal ``f`` on [lo, hi], bracket shrunk below ``tol``."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(np.asarray(z, dtype=np.float64)))


def scaled_nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    logp = _log_softmax(logits / temperature)
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def _mean_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 3:
        z = z.mean(axis=0)
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite logits passed to temperature scaling")
    return z


def optimal_temperature(logits, labels, bounds=T_BOUNDS, tol: float = 1e-4) -> float:
    """Single-fold NLL-minimising temperature for (member-averaged) logits."""
    z = _mean_logits(logits)
    y = _labels(labels)
    return golden_section(lambda t: scaled_nll(z, y, t), bounds[0], bounds[1], tol)


@dataclass
class TemperatureFit:
    temperature: float
    fold_temperatures: np.ndarray
    fold_of: np.ndarray
    scaled_probs: np.ndarray


def fit_temperature(logits, labels, folds: int = 5, seed: int = 0, bounds=T_BOUNDS, tol: float = 1e-4) -> TemperatureFit:
    """K-fold cross-validated temperature on member-averaged logits.

    Each fold's temperature is fitted on the remaining folds and applied to
    that fold's samples; the reported temperature is the mean over folds.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    z = _mean_logits(logits)
    y = _labels(labels)
    n = len(y)
    if n < folds:
        raise ValueError(f"{n} samples cannot fill {folds} folds")
    order = make_rng(seed, "temperature-folds").permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % folds
    temps = np.empty(folds)
    probs = np.empty_like(z)
    for k in range(folds):
        held = fold_of == k
        temps[k] = optimal_temperature(z[~held], y[~held], bounds, tol)
        probs[held] = softmax(z[held] / temps[k])
    return TemperatureFit(float(temps.mean()), temps, fold_of, probs)


# ---------------------------------------------------------------- OOD detection


def confidence(mean_probs) -> np.ndarray:
    return np.asarray(mean_probs, dtype=np.float64).max(axis=1)


def auc_from_scores(id_scores, ood_scores) -> float:
    """Mann–Whitney AUC with ID as the positive class; ties earn half credit."""
    pos = np.asarray(id_scores, dtype=np.float64).ravel()
    neg = np.asarray(ood_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score sets must be non-empty")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def auc_roc(id_mean_probs, ood_mean_probs) -> float:
    """AUC of max-probability confidence separating ID from OOD inputs."""
    return auc_from_scores(confidence(id_mean_probs), confidence(ood_mean_probs))


# ---------------------------------------------------------------- diversity


def kl(p, q) -> np.ndarray:
    """Σ_k p log(p/q) along the last axis."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def jsd(member_probs, mean_prob=None) -> float:
    """Mean over members of KL(member ‖ ensemble mean), batch-averaged."""
    p = np.asarray(member_probs, dtype=np.float64)
    if p.ndim == 2:
        p = p[:, None, :]
    if mean_prob is None:
        # the float mean of identical entries can be off by an ulp; keep it exact
        q = np.where((p == p[:1]).all(axis=0), p[0], p.mean(axis=0))
    else:
        q = np.asarray(mean_prob, dtype=np.float64).reshape(p.shape[1:])
    return float(kl(p, q[None]).mean())


def oracle_nll(member_probs, labels) -> float:
    """NLL of the member that gives the true class the most mass, per sample."""
    p = np.asarray(member_probs, dtype=np.float64)
    y = _labels(labels)
    best = p[:, np.arange(len(y)), y].max(axis=0)
    return float(-np.mean(np.log(np.maximum(best, NLL_FLOOR))))


def disagreement_matrix(member_probs) -> np.ndarray:
    """Entry (i, j): fraction of samples where members i and j pick different classes."""
    picks = np.asarray(member_probs).argmax(axis=-1)
    return (picks[:, None, :] != picks[None, :, :]).mean(axis=-1)


def mean_entropy(mean_probs) -> float:
    from .regularizers import entropy

    return float(np.mean(entropy(mean_probs)))


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    """Metrics for one (dataset, shift) cell.  OOD cells carry only
    ``auc_roc`` and the label-free diagnostics."""

    cell: str
    accuracy: Optional[float] = None
    nll: Optional[float] = None
    ece: Optional[float] = None
    temperature: Optional[float] = None
    auc_roc: Optional[float] = None
    mean_entropy: Optional[float] = None
    jsd: Optional[float] = None
    oracle_nll: Optional[float] = None
    disagreement: Optional[np.ndarray] = field(default=None, repr=False)

    SCALARS = ("accuracy", "nll", "ece", "temperature", "auc_roc", "mean_entropy", "jsd", "oracle_nll")

    def metrics(self) -> dict[str, float]:
        """Scalar metrics present in this report, plus the mean off-diagonal disagreement."""
        out = {k: getattr(self, k) for k in self.SCALARS if getattr(self, k) is not None}
        if self.disagreement is not None and len(self.disagreement) > 1:
            m = len(self.disagreement)
            out["disagreement"] = float(self.disagreement.sum() / (m * (m - 1)))
        return out


def labelled_report(cell: str, member_logits: np.ndarray, member_probs: np.ndarray, labels, *, bins: int = 100, folds: int = 5, seed: int = 0) -> EvalReport:
    """Accuracy on the mean probability; NLL and ECE after CV temperature scaling."""
    mean_p = member_probs.mean(axis=0)
    fit = fit_temperature(member_logits, labels, folds=folds, seed=seed)
    return EvalReport(
        cell=cell,
        accuracy=accuracy(mean_p, labels),
        nll=nll(fit.scaled_probs, labels),
        ece=ece(fit.scaled_probs, labels, bins),
        temperature=fit.temperature,
        mean_entropy=mean_entropy(mean_p),
        jsd=jsd(member_probs, mean_p),
        oracle_nll=oracle_nll(member_probs, labels),
        disagreement=disagreement_matrix(member_probs),
    )
