"""MLP ensembles with independent, tree-split and rank-1 factorised members.

Weights are stored as ``(fan_in, fan_out)`` matrices so a layer computes
``x @ W + b``.  Parameter names follow ``layer{l}.{owner}.{kind}`` where
``owner`` is ``shared`` or ``member{m}``; a tensor is shared iff its owner
is ``shared``.

For ``rank1_factorized`` member ``m`` uses ``W ∘ (r_m s_mᵀ)`` with ``r_m``
sized ``fan_in`` and ``s_m`` sized ``fan_out``.  The forward pass evaluates
this as ``((x ∘ r_m) @ W) ∘ s_m`` and never materialises the product.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ShapeError
from .rng import make_rng

SchemeKind = Literal["independent", "tree_split", "rank1_factorized"]


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: Literal["relu", "tanh"] = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ConfigurationError("layer_widths needs an input and an output width")
        if any(w < 1 for w in self.layer_widths):
            raise ConfigurationError("all layer widths must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        """Number of affine layers."""
        return len(self.layer_widths) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def classes(self) -> int:
        return self.layer_widths[-1]


@dataclass(frozen=True)
class SharingScheme:
    """``level`` is the number of leading affine layers shared (tree_split only).

    Valid levels run from 0 (no sharing) to ``n_layers - 1`` (everything but
    the output layer shared).
    """

    kind: SchemeKind = "independent"
    level: int = 0

    def __post_init__(self):
        if self.kind not in ("independent", "tree_split", "rank1_factorized"):
            raise ConfigurationError(f"unknown sharing scheme {self.kind!r}")
        if self.level < 0:
            raise ConfigurationError("split level must be non-negative")

    def shared_layers(self, spec: MlpSpec) -> int:
        if self.kind == "tree_split":
            return self.level
        return 0

    def describe(self) -> str:
        return f"tree_split({self.level})" if self.kind == "tree_split" else self.kind


@dataclass
class EnsembleModel:
    spec: MlpSpec
    scheme: SharingScheme
    members: int
    seed: int
    params: dict[str, Tensor] = field(default_factory=dict)
    factor_init: str = "sign"

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def parameter_count(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def layer_tensor_names(self, layer: int, member: int) -> list[str]:
        """Names of the tensors member ``member`` reads at ``layer``, in flattening order."""
        if self.scheme.kind == "rank1_factorized":
            own = f"layer{layer}.member{member}"
            return [f"layer{layer}.shared.weight", f"{own}.bias", f"{own}.r", f"{own}.s"]
        owner = "shared" if layer < self.scheme.shared_layers(self.spec) else f"member{member}"
        return [f"layer{layer}.{owner}.weight", f"layer{layer}.{owner}.bias"]

    def member_tensor_names(self, member: int) -> list[str]:
        return [n for layer in range(self.spec.n_layers) for n in self.layer_tensor_names(layer, member)]

    def member_owned_names(self, member: int) -> list[str]:
        return [n for n in self.member_tensor_names(member) if ".shared." not in n]

    def copy(self) -> "EnsembleModel":
        params = {k: ad.parameter(v.value.copy(), name=k) for k, v in self.params.items()}
        return EnsembleModel(self.spec, self.scheme, self.members, self.seed, params, self.factor_init)

    def get_values(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def set_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            self.params[k].value = np.array(v, dtype=np.float64)


def _validate(spec: MlpSpec, scheme: SharingScheme, members: int) -> None:
    if members < 2:
        raise ConfigurationError("an ensemble needs at least 2 members")
    if scheme.kind == "tree_split" and scheme.level > spec.n_layers - 1:
        raise ConfigurationError(
            f"split level {scheme.level} leaves no member-specific layer "
            f"(valid levels 0..{spec.n_layers - 1})"
        )
    if scheme.kind != "tree_split" and scheme.level != 0:
        raise ConfigurationError("a split level is only meaningful for tree_split")


def init_ensemble(
    spec: MlpSpec,
    scheme: SharingScheme,
    members: int,
    seed: int,
    factor_init: str = "sign",
) -> EnsembleModel:
    """He-normal weights, zero biases, rank-1 factors from {-1, +1} (or all ones)."""
    _validate(spec, scheme, members)
    if factor_init not in ("sign", "ones"):
        raise ConfigurationError(f"unknown factor_init {factor_init!r}")
    rng = make_rng(seed, "init")
    model = EnsembleModel(spec, scheme, members, seed, {}, factor_init)
    for layer in range(spec.n_layers):
        fan_in, fan_out = spec.layer_widths[layer], spec.layer_widths[layer + 1]
        std = np.sqrt(2.0 / fan_in)
        for member in range(members):
            for name in model.layer_tensor_names(layer, member):
                if name in model.params:
                    continue
                kind = name.rsplit(".", 1)[1]
                if kind == "weight":
                    value = rng.normal(0.0, std, size=(fan_in, fan_out))
                elif kind == "bias":
                    value = np.zeros(fan_out)
                elif factor_init == "ones":
                    value = np.ones(fan_in if kind == "r" else fan_out)
                else:
                    value = rng.choice([-1.0, 1.0], size=fan_in if kind == "r" else fan_out)
                model.params[name] = ad.parameter(value, name=name)
    return model


@dataclass
class ForwardResult:
    logits: list[Tensor]
    probs: list[Tensor]
    mean_prob: Tensor

    @property
    def members(self) -> int:
        return len(self.logits)


def _activate(spec: MlpSpec, h: Tensor) -> Tensor:
    return ad.relu(h) if spec.activation == "relu" else ad.tanh(h)


def member_logits(model: EnsembleModel, x) -> list[Tensor]:
    """Per-member logits for input batch ``x`` of shape (B, L)."""
    x = ad.tensor(x)
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ShapeError(f"expected input of shape (B, {model.spec.input_dim}), got {x.shape}")
    spec, p = model.spec, model.params
    n_layers = spec.n_layers
    shared = model.scheme.shared_layers(spec)

    h = x
    for layer in range(shared):
        h = h @ p[f"layer{layer}.shared.weight"] + p[f"layer{layer}.shared.bias"]
        if layer < n_layers - 1:
            h = _activate(spec, h)

    outputs = []
    for m in range(model.members):
        hm = h
        for layer in range(shared, n_layers):
            if model.scheme.kind == "rank1_factorized":
                own = f"layer{layer}.member{m}"
                hm = ((hm * p[f"{own}.r"]) @ p[f"layer{layer}.shared.weight"]) * p[f"{own}.s"] + p[f"{own}.bias"]
            else:
                own = f"layer{layer}.member{m}"
                hm = hm @ p[f"{own}.weight"] + p[f"{own}.bias"]
            if layer < n_layers - 1:
                hm = _activate(spec, hm)
        outputs.append(hm)
    return outputs


def forward_all(model: EnsembleModel, x) -> ForwardResult:
    """All members see the same batch; ``mean_prob`` is the row-wise member average."""
    logits = member_logits(model, x)
    probs = [ad.softmax_rows(z) for z in logits]
    mean_prob = ad.mean(ad.stack(probs, axis=0), axis=0)
    return ForwardResult(logits, probs, mean_prob)


def predict(model: EnsembleModel, x: np.ndarray, batch_size: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Numpy-only inference: returns member logits (M, N, C) and member probs (M, N, C)."""
    chunks = []
    for start in range(0, len(x), batch_size):
        chunks.append(np.stack([z.value for z in member_logits(model, x[start:start + batch_size])]))
    logits = np.concatenate(chunks, axis=1) if chunks else np.zeros((model.members, 0, model.spec.classes))
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return logits, e / e.sum(axis=-1, keepdims=True)


def member_parameter_vector(model: EnsembleModel, j: int) -> np.ndarray:
    """Flat θ_j: per layer, weight, bias, then r and s for rank-1 members.

    Shared tensors appear in every member's vector.
    """
    if not 0 <= j < model.members:
        raise IndexError(f"member index {j} out of range for {model.members} members")
    return np.concatenate([model.params[n].value.ravel() for n in model.member_tensor_names(j)])


def member_owned_vector(model: EnsembleModel, j: int) -> Tensor:
    """Differentiable flat vector of the tensors only member ``j`` owns."""
    if not 0 <= j < model.members:
        raise IndexError(f"member index {j} out of range for {model.members} members")
    names = model.member_owned_names(j)
    if not names:
        raise ConfigurationError("member owns no parameters")
    return ad.concat([ad.reshape(model.params[n], (-1,)) for n in names], axis=0)


# ---------------------------------------------------------------- checkpoints

_HEADER_KEY = "__header__"


def save_checkpoint(path: str | Path, model: EnsembleModel, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write an ``.npz`` container: tensor name -> row-major values, plus a JSON header."""
    header = {
        "format": "divens-checkpoint",
        "version": 1,
        "layer_widths": list(model.spec.layer_widths),
        "activation": model.spec.activation,
        "scheme": model.scheme.kind,
        "level": model.scheme.level,
        "members": model.members,
        "seed": model.seed,
        "factor_init": model.factor_init,
        "tensors": [[k, list(v.shape)] for k, v in model.params.items()],
    }
    arrays = {f"param/{k}": v.value for k, v in model.params.items()}
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    arrays[_HEADER_KEY] = np.array(json.dumps(header, sort_keys=True))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[EnsembleModel, dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data[_HEADER_KEY]))
        spec = MlpSpec(tuple(header["layer_widths"]), header["activation"])
        scheme = SharingScheme(header["scheme"], header["level"])
        model = EnsembleModel(spec, scheme, header["members"], header["seed"], {}, header["factor_init"])
        for name, _shape in header["tensors"]:
            model.params[name] = ad.parameter(data[f"param/{name}"], name=name)
        extra = {k[len("extra/"):]: data[k] for k in data.files if k.startswith("extra/")}
    return model, extra
