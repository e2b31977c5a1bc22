"""Diversity scores and the regularised training loss.

Every score is a quantity to *maximise*: the training loss is
``CE - lambda * score``.  Member predictions are passed either as a list of
``(B, C)`` tensors or as one ``(M, B, C)`` array/tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DEFAULT_JITTER, Tensor
from .ensembles import EnsembleModel, ForwardResult, member_logits, member_owned_vector
from .errors import ConfigurationError

RegKind = Literal["none", "sample_diversity", "adp", "neg_corr", "chi2", "weight_cos"]
REG_KINDS = ("none", "sample_diversity", "adp", "neg_corr", "chi2", "weight_cos")

EPS_LOG = 1e-12

DEFAULT_LAMBDA = {
    "none": 0.0,
    "sample_diversity": 0.5,
    "chi2": 0.25,
    "neg_corr": 1e-5,
    "adp": 1.0,
    "weight_cos": 0.5,
}


@dataclass(frozen=True)
class RegularizerSpec:
    kind: RegKind = "none"
    lam: Optional[float] = None
    adp_alpha: float = 0.125
    adp_beta: float = 0.5
    use_chi2_variant: bool = False
    chi2_literal: bool = False
    jitter: float = DEFAULT_JITTER
    combine_with: Optional["RegularizerSpec"] = None

    def __post_init__(self):
        if self.kind not in REG_KINDS:
            raise ConfigurationError(f"unknown regularizer {self.kind!r}")
        if self.lam is None:
            object.__setattr__(self, "lam", DEFAULT_LAMBDA[self.kind])
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigurationError("lambda must be finite and non-negative")
        if self.jitter < 0:
            raise ConfigurationError("jitter must be non-negative")
        if self.use_chi2_variant and self.kind not in ("sample_diversity", "adp"):
            raise ConfigurationError("the chi2 variant only applies to sample_diversity and adp")

    @property
    def active(self) -> bool:
        return any(c.kind != "none" and c.lam > 0 for c in self.components())

    def components(self) -> list["RegularizerSpec"]:
        out = [replace(self, combine_with=None)]
        if self.combine_with is not None:
            out.extend(self.combine_with.components())
        return out

    @property
    def needs_ood(self) -> bool:
        return any(c.kind == "sample_diversity" for c in self.components())

    def label(self) -> str:
        names = []
        for c in self.components():
            name = c.kind
            if c.use_chi2_variant:
                name += "_chi2"
            names.append(name)
        return "+".join(names)


# ---------------------------------------------------------------- helpers


def _members(probs) -> Tensor:
    if isinstance(probs, (list, tuple)):
        return ad.stack(list(probs), axis=0)
    t = ad.tensor(probs)
    if t.ndim == 2:
        return ad.reshape(t, (t.shape[0], 1, t.shape[1]))
    return t


def _labels(labels, classes: int | None = None) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim == 2:
        arr = arr.argmax(axis=1)
    arr = arr.astype(np.int64).ravel()
    if classes is not None and np.any((arr < 0) | (arr >= classes)):
        raise ValueError("label out of range")
    return arr


def _check_logdet_capacity(members: int, dim: int, what: str) -> None:
    if members > dim:
        raise ConfigurationError(
            f"{what}: {members} members but only {dim}-dimensional vectors; "
            "det(YᵀY) = 0 whenever members exceed the vector dimension. "
            "Use the chi2 variant for this ensemble size."
        )


# ---------------------------------------------------------------- losses


def cross_entropy(labels, member_logits_: Sequence[Tensor], mode: str = "per_member") -> Tensor:
    """Batch-mean cross-entropy from member logits.

    ``per_member`` averages each member's CE; ``mean_prob`` scores the mean
    probability vector.
    """
    y = _labels(labels)
    rows = np.arange(len(y))
    logits = ad.stack(list(member_logits_), axis=0)
    logp = ad.log_softmax(logits, axis=-1)
    if mode == "per_member":
        return -ad.mean(logp[:, rows, y])
    if mode == "mean_prob":
        mean_p = ad.mean(ad.exp(logp), axis=0)
        return -ad.mean(ad.log(ad.maximum(mean_p[rows, y], EPS_LOG)))
    raise ConfigurationError(f"unknown ce_mode {mode!r}")


def combined_loss(labels, member_probs, reg_score, lam: float, ce_mode: str = "per_member", logits=None) -> Tensor:
    """``CE - lam * reg_score``.

    Probabilities are floored at 1e-12 before the log; pass ``logits`` to use
    the log-softmax path instead.
    """
    if logits is not None:
        ce = cross_entropy(labels, logits, ce_mode)
    else:
        y = _labels(labels)
        rows = np.arange(len(y))
        p = _members(member_probs)
        if ce_mode == "per_member":
            ce = -ad.mean(ad.log(ad.maximum(p[:, rows, y], EPS_LOG)))
        elif ce_mode == "mean_prob":
            ce = -ad.mean(ad.log(ad.maximum(ad.mean(p, axis=0)[rows, y], EPS_LOG)))
        else:
            raise ConfigurationError(f"unknown ce_mode {ce_mode!r}")
    return ce - ad.tensor(reg_score) * float(lam)


# ---------------------------------------------------------------- scores


def neg_corr(member_probs) -> Tensor:
    """-Σ_m (y_m - ȳ)·Σ_{j≠m}(y_j - ȳ), summed over classes, batch-averaged."""
    p = _members(member_probs)
    dev = p - ad.mean(p, axis=0, keepdims=True)
    total = ad.tsum(dev, axis=0, keepdims=True)
    others = total - dev
    per_sample = -ad.tsum(dev * others, axis=(0, 2))
    return ad.mean(per_sample)


def neg_corr_spread(member_probs) -> Tensor:
    """Σ_m ||y_m - ȳ||², batch-averaged; equal to :func:`neg_corr`."""
    p = _members(member_probs)
    dev = p - ad.mean(p, axis=0, keepdims=True)
    return ad.mean(ad.tsum(ad.square(dev), axis=(0, 2)))


def chi2_inner(member_probs, literal: bool = False) -> Tensor:
    """Per-sample mean pairwise χ² distance, shape (B,)."""
    p = _members(member_probs)
    m = p.shape[0]
    if m < 2:
        raise ConfigurationError("chi2 diversity needs at least 2 members")
    a = ad.reshape(p, (m, 1) + p.shape[1:])
    b = ad.reshape(p, (1, m) + p.shape[1:])
    diff = a - b
    num = diff if literal else ad.square(diff)
    pair = num / (a + b)
    return ad.tsum(pair, axis=(0, 1, 3)) * (1.0 / (m * (m - 1)))


def chi2_diversity(member_probs, literal: bool = False, eps_log: float = EPS_LOG) -> Tensor:
    """log of the mean pairwise χ² distance (floored at ``eps_log``), batch-averaged."""
    return ad.mean(ad.log(ad.maximum(chi2_inner(member_probs, literal), eps_log)))


def _strip_true_class(p: Tensor, labels: np.ndarray) -> Tensor:
    m, batch, classes = p.shape
    mask = np.ones((batch, classes), dtype=bool)
    mask[np.arange(batch), labels] = False
    rows, cols = np.nonzero(mask)
    return ad.reshape(p[:, rows, cols], (m, batch, classes - 1))


def adp(
    member_probs,
    labels,
    alpha: float = 0.125,
    beta: float = 0.5,
    jitter: float = DEFAULT_JITTER,
    use_chi2: bool = False,
    chi2_literal: bool = False,
) -> Tensor:
    """Entropy of the renormalised mean non-correct distribution plus the
    log-det of the unit-normalised non-correct member vectors."""
    p = _members(member_probs)
    m, batch, classes = p.shape
    if classes < 2:
        raise ConfigurationError("adp needs at least 2 classes")
    y = _labels(labels, classes)
    if len(y) != batch:
        raise ValueError("labels and predictions disagree on batch size")
    if not use_chi2:
        _check_logdet_capacity(m, classes - 1, "adp")
    stripped = _strip_true_class(p, y)

    mean_nc = ad.mean(stripped, axis=0)
    mean_nc = mean_nc / ad.tsum(mean_nc, axis=1, keepdims=True)
    ent = -ad.tsum(mean_nc * ad.log(ad.maximum(mean_nc, EPS_LOG)), axis=1)

    if use_chi2:
        dists = stripped / ad.tsum(stripped, axis=2, keepdims=True)
        div = ad.log(ad.maximum(chi2_inner(dists, chi2_literal), EPS_LOG))
    else:
        cols = ad.normalize_columns(ad.permute(stripped, (1, 2, 0)))
        div = ad.log_det_gram(cols, jitter)
    return ad.mean(ent * alpha + div * beta)


def sample_diversity_from_logits(logits: Sequence[Tensor], jitter: float = DEFAULT_JITTER, use_chi2: bool = False, chi2_literal: bool = False) -> Tensor:
    stacked = ad.stack(list(logits), axis=-1)  # (n, C, M)
    n, classes, m = stacked.shape
    if use_chi2:
        probs = ad.softmax(ad.permute(stacked, (2, 0, 1)), axis=-1)
        return chi2_diversity(probs, chi2_literal)
    _check_logdet_capacity(m, classes, "sample_diversity")
    return ad.mean(ad.log_det_gram(ad.normalize_columns(stacked), jitter))


def sample_diversity(model: EnsembleModel, ood_batch, jitter: float = DEFAULT_JITTER, use_chi2: bool = False, chi2_literal: bool = False) -> Tensor:
    """Mean log det of the unit-normalised member-logit Gram matrix on OOD inputs."""
    if not use_chi2:
        _check_logdet_capacity(model.members, model.spec.classes, "sample_diversity")
    return sample_diversity_from_logits(member_logits(model, ood_batch), jitter, use_chi2, chi2_literal)


def weight_cos(model: EnsembleModel, jitter: float = DEFAULT_JITTER) -> Tensor:
    """log det(ΘΘᵀ + jitter·I) over unit-normalised member-owned parameter vectors."""
    vectors = [member_owned_vector(model, j) for j in range(model.members)]
    size = vectors[0].shape[0]
    if model.members > size:
        raise ConfigurationError(f"weight_cos: {model.members} members exceed {size} owned parameters")
    theta_t = ad.stack(vectors, axis=1)  # (P, M)
    return ad.log_det_gram(ad.normalize_columns(theta_t), jitter)


def entropy(p) -> np.ndarray:
    """Shannon entropy normalised by log C (so in [0, 1]); 0·log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    classes = p.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1) / np.log(classes)


# ---------------------------------------------------------------- dispatch


def component_score(
    spec: RegularizerSpec,
    model: EnsembleModel,
    fwd: ForwardResult | None,
    labels,
    ood_batch=None,
) -> Tensor:
    kind = spec.kind
    if kind == "sample_diversity":
        if ood_batch is None:
            raise ConfigurationError("sample_diversity needs an OOD batch")
        return sample_diversity(model, ood_batch, spec.jitter, spec.use_chi2_variant, spec.chi2_literal)
    if kind == "weight_cos":
        return weight_cos(model, spec.jitter)
    if fwd is None:
        raise ConfigurationError(f"{kind} needs in-distribution predictions")
    if kind == "neg_corr":
        return neg_corr(fwd.probs)
    if kind == "chi2":
        return chi2_diversity(fwd.probs, spec.chi2_literal)
    if kind == "adp":
        return adp(fwd.probs, labels, spec.adp_alpha, spec.adp_beta, spec.jitter, spec.use_chi2_variant, spec.chi2_literal)
    raise ConfigurationError(f"no score for regularizer {kind!r}")


def regularization_term(
    spec: RegularizerSpec,
    model: EnsembleModel,
    fwd: ForwardResult | None,
    labels,
    ood_batch=None,
) -> tuple[Tensor, dict[str, float]]:
    """Σ λ_i · score_i over the spec's components, plus each raw score."""
    total = ad.tensor(0.0)
    scores: dict[str, float] = {}
    for comp in spec.components():
        if comp.kind == "none" or comp.lam == 0:
            continue
        s = component_score(comp, model, fwd, labels, ood_batch)
        scores[comp.label()] = s.item()
        total = total + s * comp.lam
    return total, scores


def ood_score(spec: RegularizerSpec, model: EnsembleModel, x) -> Tensor:
    """The sample-diversity component of ``spec`` evaluated on inputs ``x``."""
    for comp in spec.components():
        if comp.kind == "sample_diversity":
            return sample_diversity(model, x, comp.jitter, comp.use_chi2_variant, comp.chi2_literal)
    raise ConfigurationError("regularizer has no sample_diversity component")
