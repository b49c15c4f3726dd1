"""Layers, the MLP backbone, the category-embedding table and parameter init."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor, DimensionError


@dataclass
class ModelSpec:
    D: int
    K: int
    U: int
    hidden: tuple[int, ...] = (64,)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if min((self.D, self.K, self.U) + self.hidden) < 1:
            raise ValueError(f"model dimensions must be positive: {self}")


@dataclass
class FcLayer:
    weight: DiffTensor  # [out, in]
    bias: DiffTensor  # [out]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: DiffTensor) -> DiffTensor:
        return ad.linear(x, self.weight, self.bias)

    def parameters(self) -> dict[str, DiffTensor]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class Backbone:
    """Feature extractor (FC layers, ReLU between them, none after the last) and head."""

    extractor: list[FcLayer]
    head: FcLayer

    @property
    def K(self) -> int:
        return self.extractor[-1].out_dim

    def extractor_parameters(self) -> dict[str, DiffTensor]:
        out = {}
        for i, layer in enumerate(self.extractor):
            for k, v in layer.parameters().items():
                out[f"fe.{i}.{k}"] = v
        return out

    def head_parameters(self) -> dict[str, DiffTensor]:
        return {f"head.{k}": v for k, v in self.head.parameters().items()}


class EmbeddingTable:
    """One ``K``-dim row per category.  Frozen tables never receive gradient.

    ``access_count`` counts lookups and row reads, so tests can verify that a
    code path never touches the table.
    """

    def __init__(self, rows, frozen: bool = False):
        data = np.array(rows.data if isinstance(rows, DiffTensor) else rows, dtype=np.float64)
        if data.ndim != 2:
            raise DimensionError(f"embedding rows must be 2-D, got {data.shape}")
        self.rows = DiffTensor(data, requires_grad=not frozen, frozen=frozen, name="gce")
        self.frozen = frozen
        self.access_count = 0

    @property
    def U(self) -> int:
        return self.rows.shape[0]

    @property
    def K(self) -> int:
        return self.rows.shape[1]

    def all_rows(self) -> DiffTensor:
        self.access_count += 1
        return self.rows

    def frozen_copy(self) -> "EmbeddingTable":
        self.access_count += 1
        return EmbeddingTable(self.rows.data.copy(), frozen=True)


def extract_features(backbone: Backbone, x: DiffTensor) -> DiffTensor:
    first = backbone.extractor[0]
    if x.shape[-1] != first.in_dim:
        raise DimensionError(f"extract_features: input {x.shape} but extractor expects D={first.in_dim}")
    h = x
    last = len(backbone.extractor) - 1
    for i, layer in enumerate(backbone.extractor):
        h = layer(h)
        if i < last:
            h = ad.relu(h)
    return h


def head_forward(head: FcLayer, f: DiffTensor) -> DiffTensor:
    if f.shape[-1] != head.in_dim:
        raise DimensionError(f"head_forward: features {f.shape} but head expects K={head.in_dim}")
    return head(f)


def embed_lookup(table: EmbeddingTable, u) -> DiffTensor:
    """Row(s) ``u`` of the table.  Scalar ``u`` gives ``[K]``, an array gives ``[B, K]``."""
    table.access_count += 1
    ids = np.asarray(u, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.U):
        raise IndexError(f"category id out of range [0, {table.U})")
    if table.frozen:
        return ad.tensor(table.rows.data[ids].copy())
    out = ad.gather_rows(table.rows, ids.reshape(-1))
    if ids.ndim == 0:
        return ad._reshape(out, (table.K,))
    return out


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

@dataclass
class CoVBranch:
    fc: FcLayer
    ln_gain: DiffTensor
    ln_bias: DiffTensor

    def parameters(self) -> dict[str, DiffTensor]:
        return {"fc.weight": self.fc.weight, "fc.bias": self.fc.bias,
                "ln.gain": self.ln_gain, "ln.bias": self.ln_bias}


@dataclass
class CoVParams:
    gamma: CoVBranch
    beta: CoVBranch

    def parameters(self) -> dict[str, DiffTensor]:
        out = {}
        for tag, branch in (("gamma", self.gamma), ("beta", self.beta)):
            for k, v in branch.parameters().items():
                out[f"cov.{tag}.{k}"] = v
        return out


@dataclass
class ModelBundle:
    backbone: Backbone
    cov: CoVParams
    gce: EmbeddingTable
    spec: ModelSpec | None = field(default=None, compare=False)

    def named_parameters(self) -> dict[str, DiffTensor]:
        out = self.backbone.extractor_parameters()
        out.update(self.cov.parameters())
        out["gce.rows"] = self.gce.rows
        out.update(self.backbone.head_parameters())
        return out

    def state(self, names=None) -> dict[str, np.ndarray]:
        params = self.named_parameters()
        keys = params.keys() if names is None else names
        return {k: params[k].data.copy() for k in keys}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        for k, v in state.items():
            p = params[k]
            if p.shape != v.shape:
                raise DimensionError(f"load_state: {k} has shape {p.shape}, got {v.shape}")
            p.data = np.array(v, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()


def _glorot(rng: np.random.Generator, out_dim: int, in_dim: int) -> FcLayer:
    s = np.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-s, s, size=(out_dim, in_dim))
    return FcLayer(ad.param(w), ad.param(np.zeros(out_dim)))


def _cov_branch(rng, k: int) -> CoVBranch:
    return CoVBranch(_glorot(rng, k, k), ad.param(np.ones(k)), ad.param(np.zeros(k)))


def init_parameters(spec: ModelSpec, seed: int) -> ModelBundle:
    """Glorot-uniform weights, zero biases, unit LN gains, N(0, 1/sqrt(K)) embedding rows."""
    rng = np.random.default_rng(seed)
    dims = (spec.D,) + spec.hidden + (spec.K,)
    extractor = [_glorot(rng, dims[i + 1], dims[i]) for i in range(len(dims) - 1)]
    head = _glorot(rng, spec.U, spec.K)
    cov = CoVParams(_cov_branch(rng, spec.K), _cov_branch(rng, spec.K))
    rows = rng.normal(0.0, 1.0 / np.sqrt(spec.K), size=(spec.U, spec.K))
    return ModelBundle(Backbone(extractor, head), cov, EmbeddingTable(rows), spec)
