"""Client-side GPFL computation: conditional valve, conditional inputs, dual routes, losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor, DimensionError
from .nn import CoVBranch, CoVParams, EmbeddingTable, ModelBundle, embed_lookup, extract_features, head_forward

LN_EPS = 1e-5


class EmptyShardError(ValueError):
    pass


class EmptyBatchError(ValueError):
    pass


class FrozenTableRequired(RuntimeError):
    pass


@dataclass(frozen=True)
class GpflVariant:
    """Which pieces of the method are switched on.  The full method has all four."""

    use_cov: bool = True
    use_gce: bool = True
    use_mlg: bool = True
    use_pci: bool = True


FULL = GpflVariant()


@dataclass
class ConditionalInputs:
    g: np.ndarray
    p: np.ndarray
    alpha: np.ndarray | None = None


# ---------------------------------------------------------------------------
# conditional inputs
# ---------------------------------------------------------------------------

def compute_alpha(labels, U: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if U < 1:
        raise ValueError("U must be at least 1")
    if labels.size == 0:
        raise EmptyShardError("cannot compute label proportions of an empty shard")
    return np.bincount(labels, minlength=U)[:U] / labels.size


def compute_g(frozen_table: EmbeddingTable) -> np.ndarray:
    if not frozen_table.frozen:
        raise FrozenTableRequired("the global conditional input must come from the frozen embedding copy")
    rows = frozen_table.all_rows().data
    return rows.sum(axis=0) / rows.shape[0]


def compute_p(frozen_table: EmbeddingTable, alpha) -> np.ndarray:
    """Proportion-weighted sum of frozen rows divided by U (not by the weight sum)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    rows = frozen_table.all_rows().data
    if alpha.shape != (rows.shape[0],):
        raise DimensionError(f"alpha has shape {alpha.shape}, table has {rows.shape[0]} rows")
    return (alpha @ rows) / rows.shape[0]


def constant_inputs(K: int) -> ConditionalInputs:
    """Fixed client-independent inputs used when personalised conditioning is ablated."""
    return ConditionalInputs(g=np.full(K, 1.0 / np.sqrt(K)), p=np.full(K, 1.0 / K))


def conditional_inputs(frozen_table: EmbeddingTable, alpha, variant: GpflVariant = FULL) -> ConditionalInputs:
    if not variant.use_pci or not variant.use_gce:
        out = constant_inputs(frozen_table.K)
        out.alpha = np.asarray(alpha, dtype=np.float64)
        return out
    return ConditionalInputs(compute_g(frozen_table), compute_p(frozen_table, alpha),
                             np.asarray(alpha, dtype=np.float64))


# ---------------------------------------------------------------------------
# conditional valve
# ---------------------------------------------------------------------------

def _branch(branch: CoVBranch, cond: DiffTensor) -> DiffTensor:
    return ad.layer_norm(ad.relu(branch.fc(cond)), branch.ln_gain, branch.ln_bias, LN_EPS)


def cov_scale_shift(cond, V: CoVParams) -> tuple[DiffTensor, DiffTensor]:
    """gamma and beta for one ``[K]`` conditional input or a ``[R, K]`` stack of them."""
    c = ad.tensor(cond)
    if c.shape[-1] != V.gamma.fc.in_dim:
        raise DimensionError(f"conditional input {c.shape} but the valve expects K={V.gamma.fc.in_dim}")
    return _branch(V.gamma, c), _branch(V.beta, c)


def cov_transform(f: DiffTensor, cond, V: CoVParams) -> DiffTensor:
    if f.shape[-1] != V.gamma.fc.in_dim:
        raise DimensionError(f"features {f.shape} but the valve expects K={V.gamma.fc.in_dim}")
    gamma, beta = cov_scale_shift(np.asarray(cond, dtype=np.float64), V)
    return ad.film(f, gamma, beta)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class Forward:
    f_g: DiffTensor | None
    logits: DiffTensor


def forward_gpfl(model: ModelBundle, x: DiffTensor, cond: ConditionalInputs, mode: str = "train",
                 variant: GpflVariant = FULL) -> Forward:
    """Both routes in ``train`` mode; only the personalised route in ``eval`` mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = ad.tensor(x) if not isinstance(x, DiffTensor) else x
    f = extract_features(model.backbone, x)
    want_global = mode == "train" and variant.use_gce
    if not variant.use_cov:
        return Forward(f if want_global else None, head_forward(model.backbone.head, f))
    if want_global:
        # both conditional inputs through the valve in one pass: row 0 global, row 1 personal
        gamma, beta = cov_scale_shift(np.stack([cond.g, cond.p]), model.cov)
        f_g = ad.film(f, ad.take_row(gamma, 0), ad.take_row(beta, 0))
        f_p = ad.film(f, ad.take_row(gamma, 1), ad.take_row(beta, 1))
    else:
        f_g = None
        gamma, beta = cov_scale_shift(cond.p, model.cov)
        f_p = ad.film(f, gamma, beta)
    return Forward(f_g, head_forward(model.backbone.head, f_p))


def predict(model: ModelBundle, x, cond: ConditionalInputs, variant: GpflVariant = FULL) -> np.ndarray:
    out = forward_gpfl(model, ad.tensor(np.atleast_2d(x)), cond, "eval", variant)
    return out.logits.data.argmax(axis=1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def alg_logits(f_g: DiffTensor, C: EmbeddingTable, strict: bool = True) -> DiffTensor:
    fg = f_g if f_g.data.ndim == 2 else ad._reshape(f_g, (1, -1))
    return ad.cosine_matrix(fg, C.all_rows(), strict=strict)


def loss_alg(f_g: DiffTensor, y, C: EmbeddingTable, strict: bool = True) -> DiffTensor:
    """Cross-entropy over cosine similarities to every category embedding (batch mean)."""
    return ad.softmax_cross_entropy(alg_logits(f_g, C, strict), np.atleast_1d(y))


def loss_mlg(f_g: DiffTensor, y, frozen_table: EmbeddingTable) -> DiffTensor:
    """Mean Euclidean distance from each feature to its frozen category embedding."""
    if not frozen_table.frozen:
        raise FrozenTableRequired("magnitude guidance targets the frozen embedding copy")
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    fg = f_g if f_g.data.ndim == 2 else ad._reshape(f_g, (1, -1))
    target = embed_lookup(frozen_table, y)
    return ad.mean(ad.row_l2_distance(fg, target))


@dataclass
class GpflLossParts:
    l_p: DiffTensor
    l_alg: DiffTensor
    l_mlg: DiffTensor
    reg_v: DiffTensor
    reg_c: DiffTensor
    total: DiffTensor
    lam: float
    mu: float

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("l_p", "l_alg", "l_mlg", "reg_v", "reg_c", "total")}


_ZERO = np.asarray(0.0)


def _reg(params, mu, squared):
    if mu:
        return ad.global_norm(params, squared=squared)
    # untracked when it cannot affect the gradient
    sq = float(sum((p.data * p.data).sum() for p in params))
    return ad.tensor(sq if squared else np.sqrt(sq))


def total_loss(batch, model: ModelBundle, frozen: EmbeddingTable | None, cond: ConditionalInputs,
               lam: float = 1.0, mu: float = 0.0, variant: GpflVariant = FULL,
               squared_reg: bool = False) -> GpflLossParts:
    """Personalised CE + angle guidance + lam * magnitude guidance + mu * (||V|| + ||C||)."""
    x, y = batch
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.size == 0:
        raise EmptyBatchError("total_loss needs at least one sample")
    out = forward_gpfl(model, ad.tensor(x), cond, "train", variant)
    l_p = ad.softmax_cross_entropy(out.logits, y)
    zero = ad.tensor(_ZERO)
    l_alg = l_mlg = reg_c = reg_v = zero
    if variant.use_gce:
        l_alg = loss_alg(out.f_g, y, model.gce, strict=False)
        if variant.use_mlg:
            l_mlg = loss_mlg(out.f_g, y, frozen)
        reg_c = _reg([model.gce.rows], mu, squared_reg)
    if variant.use_cov:
        reg_v = _reg(list(model.cov.parameters().values()), mu, squared_reg)
    terms = [(1.0, l_p), (1.0, l_alg), (lam, l_mlg), (mu, reg_v), (mu, reg_c)]
    total = ad.weighted_sum(terms)
    return GpflLossParts(l_p, l_alg, l_mlg, reg_v, reg_c, total, lam, mu)
