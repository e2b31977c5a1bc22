"""Finite-difference verification of every differentiable loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import regularizers as R
from .ensembles import EnsembleModel, MlpSpec, SharingScheme, forward_all, init_ensemble
from .rng import make_rng

SCHEMES = (SharingScheme("independent"), SharingScheme("tree_split", 1), SharingScheme("rank1_factorized"))


@dataclass
class GradcheckResult:
    name: str
    instances: int
    max_rel_err: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _model_check(model: EnsembleModel, loss_fn: Callable[[EnsembleModel], ad.Tensor], h: float) -> float:
    names = list(model.params)
    arrays = [model.params[n].value.copy() for n in names]

    def build(leaves):
        model.params = dict(zip(names, leaves))
        return loss_fn(model)

    try:
        return ad.check_gradients(build, arrays, h)
    finally:
        model.params = {n: ad.parameter(a, name=n) for n, a in zip(names, arrays)}


def _tiny_model(rng: np.random.Generator, i: int, classes: int = 4, members: int = 3) -> EnsembleModel:
    spec = MlpSpec((3, 5, 4, classes), "tanh")
    return init_ensemble(spec, SCHEMES[i % len(SCHEMES)], members, int(rng.integers(1 << 30)))


def _case_sample_diversity(rng, i, h):
    model = _tiny_model(rng, i)
    ood = rng.random((4, 3))
    return _model_check(model, lambda m: R.sample_diversity(m, ood), h)


def _case_sample_diversity_chi2(rng, i, h):
    model = _tiny_model(rng, i, classes=3, members=4)
    ood = rng.random((4, 3))
    return _model_check(model, lambda m: R.sample_diversity(m, ood, use_chi2=True), h)


def _case_weight_cos(rng, i, h):
    return _model_check(_tiny_model(rng, i), lambda m: R.weight_cos(m), h)


# ADP strips the true class, so instances use C - 1 > M: a square non-correct
# Gram is frequently near-singular and central differences lose accuracy there.
def _logit_case(score: Callable[[ad.Tensor, np.ndarray], ad.Tensor], classes: int = 4):
    def run(rng, i, h):
        logits = rng.uniform(-2, 2, size=(3, 5, classes))
        labels = rng.integers(0, classes, 5)
        return ad.check_gradients(lambda t: score(ad.softmax(t[0], axis=-1), labels), [logits], h)

    return run


def _full_loss_case(spec: R.RegularizerSpec, classes: int = 4):
    def run(rng, i, h):
        model = _tiny_model(rng, i, classes=classes)
        x, y, ood = rng.random((6, 3)), rng.integers(0, classes, 6), rng.random((5, 3))

        def loss(m):
            fwd = forward_all(m, x)
            term, _ = R.regularization_term(spec, m, fwd, y, ood)
            return R.cross_entropy(y, fwd.logits) - term

        return _model_check(model, loss, h)

    return run


CASES: dict[str, Callable] = {
    "sample_diversity": _case_sample_diversity,
    "sample_diversity_chi2": _case_sample_diversity_chi2,
    "adp": _logit_case(lambda p, y: R.adp(p, y), classes=6),
    "adp_chi2": _logit_case(lambda p, y: R.adp(p, y, use_chi2=True), classes=6),
    "neg_corr": _logit_case(lambda p, y: R.neg_corr(p)),
    "chi2": _logit_case(lambda p, y: R.chi2_diversity(p)),
    "weight_cos": _case_weight_cos,
    "total_loss[ce-sd]": _full_loss_case(R.RegularizerSpec("sample_diversity")),
    "total_loss[ce-sd-adp]": _full_loss_case(R.RegularizerSpec("sample_diversity", combine_with=R.RegularizerSpec("adp")), classes=6),
    "total_loss[ce-negcorr]": _full_loss_case(R.RegularizerSpec("neg_corr", lam=0.5)),
    "total_loss[ce-chi2]": _full_loss_case(R.RegularizerSpec("chi2")),
    "total_loss[ce-weightcos]": _full_loss_case(R.RegularizerSpec("weight_cos")),
}


def run_suite(instances: int = 20, seed: int = 0, h: float = 1e-4, tolerance: float = 1e-4, names=None) -> list[GradcheckResult]:
    results = []
    for name in names or CASES:
        rng = make_rng(seed, "gradcheck", name)
        start = time.perf_counter()
        worst = max(CASES[name](rng, i, h) for i in range(instances))
        results.append(GradcheckResult(name, instances, worst, tolerance, time.perf_counter() - start))
    return results
