"""Gradient-inversion (DLG) probe against single-sample client updates, scored by PSNR.

The attacker sees a parameter snapshot and the update the client produced from
it, turns the update into a gradient estimate ``-update / eta`` and searches for
a dummy input and dummy output whose MSE-loss gradient matches it.

The inner gradient is computed for a whole batch of candidate inputs at once by
:func:`dlg_objective` (explicit per-example backprop, kernels in
:mod:`gpfl.kernels`); :func:`reference_param_grads` computes the same gradient
for one candidate through the autodiff tape and serves as its cross-check.  The
outer gradient is a central difference over the candidate's coordinates.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from . import model as gm
from .autodiff import DimensionError
from .nn import EmbeddingTable

TARGET_KINDS = ("feature-extractor", "pseudo-feature-extractor", "pseudo-model", "full-model")
_GROUPS = {
    "feature-extractor": ("fe",),
    "pseudo-feature-extractor": ("fe", "cov"),
    "pseudo-model": ("fe", "cov", "gce"),
    "full-model": ("fe", "head"),
}


def exposed_names(kind: str, names) -> list[str]:
    """Parameter names an attack on ``kind`` may read."""
    if kind not in _GROUPS:
        raise ValueError(f"unknown target kind {kind!r}")
    groups = _GROUPS[kind]
    return [k for k in names if k.split(".", 1)[0] in groups]


@dataclass
class AttackTarget:
    kind: str
    params: dict[str, np.ndarray]  # snapshot the client started from
    update: dict[str, np.ndarray]  # new - old over the captured local step
    eta: float
    cond: np.ndarray | None = None  # global conditional input g; derived from gce.rows when those are given

    def __post_init__(self):
        if self.cond is None and "gce.rows" in self.params:
            self.cond = np.asarray(self.params["gce.rows"], dtype=np.float64).mean(axis=0)
        names = exposed_names(self.kind, self.params)
        self.params = {k: np.asarray(self.params[k], dtype=np.float64) for k in names}
        missing = [k for k in names if k not in self.update]
        if missing:
            raise ValueError(f"update lacks {missing}")
        self.update = {k: np.asarray(self.update[k], dtype=np.float64) for k in names}
        for k in names:
            if self.update[k].shape != self.params[k].shape:
                raise DimensionError(f"update {k} has shape {self.update[k].shape}, parameters {self.params[k].shape}")
        self.n_fe = len([k for k in names if k.startswith("fe.") and k.endswith(".weight")])

    @property
    def observed_grad(self) -> dict[str, np.ndarray]:
        return {k: -v / self.eta for k, v in self.update.items()}

    @property
    def in_dim(self) -> int:
        return self.params["fe.0.weight"].shape[1]

    @property
    def out_dim(self) -> int:
        if self.kind == "full-model":
            return self.params["head.weight"].shape[0]
        if self.kind == "pseudo-model":
            return self.params["gce.rows"].shape[0]
        return self.params[f"fe.{self.n_fe - 1}.weight"].shape[0]

    @property
    def cond_g(self) -> np.ndarray | None:
        """The server derives g from the embeddings it broadcast, so the attacker knows it."""
        return self.cond


@dataclass
class AttackResult:
    x: np.ndarray
    z: np.ndarray
    dlg_loss: float
    psnr_db: float | None = None
    diverged: bool = False
    history: list[float] = field(default_factory=list, repr=False)


# ---------------------------------------------------------------------------
# inner gradient, batched over candidates
# ---------------------------------------------------------------------------

def _ln_row(r, gain, bias, eps=gm.LN_EPS):
    m = r.mean()
    c = r - m
    var = (c * c).mean()
    inv = 1.0 / math.sqrt(var + eps) if var + eps > 0 else 0.0
    xhat = c * inv
    return xhat * gain + bias, xhat, inv


def _valve(p, tag, g):
    w, b = p[f"cov.{tag}.fc.weight"], p[f"cov.{tag}.fc.bias"]
    z = w @ g + b
    r = np.maximum(z, 0.0)
    out, xhat, inv = _ln_row(r, p[f"cov.{tag}.ln.gain"], p[f"cov.{tag}.ln.bias"])
    return out, (z > 0.0), xhat, inv


def target_forward(target: AttackTarget, X: np.ndarray, g: np.ndarray | None = None):
    """Batched forward of the attacked map; returns output and the cache for :func:`dlg_objective`."""
    p = target.params
    acts = [X]
    pres = []
    a = X
    for i in range(target.n_fe):
        h = a @ p[f"fe.{i}.weight"].T + p[f"fe.{i}.bias"]
        pres.append(h)
        a = np.maximum(h, 0.0) if i < target.n_fe - 1 else h
        acts.append(a)
    cache = {"acts": acts, "pres": pres}
    o = a
    if target.kind in ("pseudo-feature-extractor", "pseudo-model"):
        g = target.cond_g if g is None else g
        gam = _valve(p, "gamma", g)
        bet = _valve(p, "beta", g)
        pre = (gam[0] + 1.0) * a + bet[0]
        o = np.maximum(pre, 0.0)
        cache.update(gam=gam, bet=bet, film_mask=pre > 0.0, g=g)
    cache["o"] = o
    if target.kind == "full-model":
        out = o @ p["head.weight"].T + p["head.bias"]
    elif target.kind == "pseudo-model":
        out, oh, ch, no, nc = kernels.cosine_fwd(np.ascontiguousarray(o), p["gce.rows"], ad.DEGENERATE_NORM)
        cache.update(oh=oh, ch=ch, no=no, nc=nc, sim=out)
    else:
        out = o
    return out, cache


def _rowsq(v, t):
    d = v - t
    return (d * d).sum(axis=1)


def dlg_objective(target: AttackTarget, X: np.ndarray, Z: np.ndarray, G: dict[str, np.ndarray] | None = None):
    """``||grad_theta MSE(target(x_p), z_p) - G||^2`` for every candidate row ``p``."""
    G = target.observed_grad if G is None else G
    p = target.params
    X = np.ascontiguousarray(X, dtype=np.float64)
    out, cache = target_forward(target, X)
    m = out.shape[1]
    e = 2.0 * (out - Z) / m
    total = np.zeros(X.shape[0])
    o = cache["o"]
    if target.kind == "full-model":
        total += kernels.matched_outer_sqdist(e, np.ascontiguousarray(o), G["head.weight"])
        total += _rowsq(e, G["head.bias"])
        do = e @ p["head.weight"]
    elif target.kind == "pseudo-model":
        oh, ch, no, nc, sim = cache["oh"], cache["ch"], cache["no"], cache["nc"], cache["sim"]
        # per-candidate gradient w.r.t. every embedding row: [P, U, K]
        dC = e[:, :, None] * (oh[:, None, :] - sim[:, :, None] * ch[None, :, :]) / nc[None, :, None]
        total += ((dC - G["gce.rows"][None]) ** 2).sum(axis=(1, 2))
        do = (e @ ch - (e * sim).sum(axis=1, keepdims=True) * oh) / no[:, None]
    else:
        do = e
    if target.kind in ("pseudo-feature-extractor", "pseudo-model"):
        f = cache["acts"][-1]
        dpre = do * cache["film_mask"]
        gamma_out = cache["gam"][0]
        da = dpre * (gamma_out + 1.0)
        g = cache["g"]
        for tag, dbranch in (("gamma", dpre * f), ("beta", dpre)):
            _, zmask, xhat, inv = cache["gam" if tag == "gamma" else "bet"]
            gain = p[f"cov.{tag}.ln.gain"]
            total += _rowsq(dbranch * xhat, G[f"cov.{tag}.ln.gain"])
            total += _rowsq(dbranch, G[f"cov.{tag}.ln.bias"])
            dh = dbranch * gain
            k = dh.shape[1]
            dr = inv * (dh - dh.sum(axis=1, keepdims=True) / k - xhat * (dh * xhat).sum(axis=1, keepdims=True) / k)
            dz = dr * zmask
            gg = np.ascontiguousarray(np.broadcast_to(g, (dz.shape[0], g.shape[0])))
            total += kernels.matched_outer_sqdist(np.ascontiguousarray(dz), gg, G[f"cov.{tag}.fc.weight"])
            total += _rowsq(dz, G[f"cov.{tag}.fc.bias"])
    else:
        da = do
    acts, pres = cache["acts"], cache["pres"]
    for i in range(target.n_fe - 1, -1, -1):
        dh = da if i == target.n_fe - 1 else da * (pres[i] > 0.0)
        dh = np.ascontiguousarray(dh)
        total += kernels.matched_outer_sqdist(dh, np.ascontiguousarray(acts[i]), G[f"fe.{i}.weight"])
        total += _rowsq(dh, G[f"fe.{i}.bias"])
        if i:
            da = dh @ p[f"fe.{i}.weight"]
    return total


def reference_param_grads(target: AttackTarget, x: np.ndarray, z: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of ``MSE(target(x), z)`` for one candidate, through the autodiff tape."""
    p = {k: ad.param(v.copy()) for k, v in target.params.items()}
    with ad.Graph() as graph:
        a = ad.tensor(np.atleast_2d(x))
        for i in range(target.n_fe):
            a = ad.linear(a, p[f"fe.{i}.weight"], p[f"fe.{i}.bias"])
            if i < target.n_fe - 1:
                a = ad.relu(a)
        if target.kind in ("pseudo-feature-extractor", "pseudo-model"):
            cond = ad.tensor(target.cond_g)
            gb = []
            for tag in ("gamma", "beta"):
                h = ad.relu(ad.linear(cond, p[f"cov.{tag}.fc.weight"], p[f"cov.{tag}.fc.bias"]))
                gb.append(ad.layer_norm(h, p[f"cov.{tag}.ln.gain"], p[f"cov.{tag}.ln.bias"], gm.LN_EPS))
            a = ad.film(a, gb[0], gb[1])
        if target.kind == "full-model":
            a = ad.linear(a, p["head.weight"], p["head.bias"])
        elif target.kind == "pseudo-model":
            a = ad.cosine_matrix(a, p["gce.rows"])
        loss = ad.mse(a, ad.tensor(np.atleast_2d(z)))
    graph.backward(loss)
    return {k: v.grad_or_zeros() for k, v in p.items()}


def pseudo_model_logits(f_g, C) -> np.ndarray:
    """Cosine similarity of a feature vector against every embedding row."""
    table = C if isinstance(C, EmbeddingTable) else EmbeddingTable(C, frozen=True)
    f = f_g if isinstance(f_g, ad.DiffTensor) else ad.tensor(f_g)
    return gm.alg_logits(f, table, strict=True).data[0]


# ---------------------------------------------------------------------------
# attack loop
# ---------------------------------------------------------------------------

def central_difference_grad(target: AttackTarget, theta: np.ndarray, h: float = 1e-4):
    """Objective at ``theta`` and its central-difference gradient from one batched evaluation."""
    d = target.in_dim
    n = theta.size
    cand = np.repeat(theta[None, :], 2 * n + 1, axis=0)
    idx = np.arange(n)
    cand[1 + idx, idx] += h
    cand[1 + n + idx, idx] -= h
    vals = dlg_objective(target, cand[:, :d], cand[:, d:])
    return vals[0], (vals[1:n + 1] - vals[n + 1:]) / (2.0 * h)


def run_dlg(target: AttackTarget, steps: int = 300, lr: float = 0.1, seed: int = 0,
            optimizer: str = "adam", outer_grad=None, ground_truth: np.ndarray | None = None) -> AttackResult:
    """Minimise the gradient-matching loss over a dummy input and a dummy output.

    Dummies start at N(0, 0.1^2).  ``outer_grad(target, theta) -> (loss, grad)``
    defaults to :func:`central_difference_grad`; an exact double-backward can be
    plugged in there.  The best iterate by loss is returned.
    """
    outer_grad = outer_grad or central_difference_grad
    rng = np.random.default_rng(seed)
    d, m = target.in_dim, target.out_dim
    theta = rng.normal(0.0, 0.1, size=d + m)
    best_loss, best_theta = math.inf, theta.copy()
    hist = []
    mom = np.zeros_like(theta)
    vel = np.zeros_like(theta)
    b1, b2 = 0.9, 0.999
    diverged = False
    for step in range(steps + 1):
        loss, grad = outer_grad(target, theta)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            diverged = True
            break
        hist.append(float(loss))
        if loss < best_loss:
            best_loss, best_theta = float(loss), theta.copy()
        if step == steps:
            break
        if optimizer == "adam":
            mom = b1 * mom + (1 - b1) * grad
            vel = b2 * vel + (1 - b2) * grad * grad
            mhat = mom / (1 - b1 ** (step + 1))
            vhat = vel / (1 - b2 ** (step + 1))
            theta = theta - lr * mhat / (np.sqrt(vhat) + 1e-12)
        elif optimizer == "sgd":
            theta = theta - lr * grad
        else:
            raise ValueError(f"unknown optimizer {optimizer!r}")
    res = AttackResult(best_theta[:d].copy(), best_theta[d:].copy(), best_loss, diverged=diverged, history=hist)
    if ground_truth is not None:
        res.psnr_db = psnr(res.x, ground_truth)
    return res


def best_of(results: list[AttackResult]) -> AttackResult:
    return min(results, key=lambda r: r.dlg_loss)


def psnr(img_a, img_b) -> float:
    """``10 log10(1 / MSE)`` after clamping both inputs to [0, 1]; identical inputs give ``inf``."""
    a = np.clip(np.asarray(img_a, dtype=np.float64), 0.0, 1.0)
    b = np.clip(np.asarray(img_b, dtype=np.float64), 0.0, 1.0)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes {a.shape} and {b.shape} differ")
    err = float(((a - b) ** 2).mean())
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


# ---------------------------------------------------------------------------
# capture during training, attacks on captures
# ---------------------------------------------------------------------------

def method_targets(method: str) -> tuple[str, ...]:
    if method in ("fedavg", "fedprox", "ditto"):
        return ("feature-extractor", "full-model")
    if method in ("gpfl", "gpfl_wo_pci", "gpfl_wo_mlg"):
        return ("feature-extractor", "pseudo-feature-extractor", "pseudo-model")
    return ("feature-extractor",)


def capture_single_sample_updates(clients, chosen, broadcast, method, cfg) -> list[dict]:
    """One SGD step on a single training sample from the broadcast parameters, per victim.

    Victim ``j`` is client ``chosen[j % len(chosen)]`` and its training sample
    ``j // len(chosen)``.  Only the uploaded parameter groups are recorded, plus
    the ground-truth input for scoring.
    """
    from .federation import baseline_loss

    out = []
    for j in range(cfg.capture_count):
        client = clients[int(chosen[j % len(chosen)])]
        train = client.shard.train
        s = j // len(chosen)
        if s >= len(train):
            continue
        m = copy.deepcopy(client.model)
        m.load_state(broadcast)
        names = method.shared_names(m)
        before = m.state(names)
        x, y = train.features[s:s + 1], train.labels[s:s + 1]
        with ad.Graph() as graph:
            if method.is_gpfl:
                variant = method.variant
                frozen = m.gce.frozen_copy() if variant.use_gce else None
                cond = gm.conditional_inputs(frozen, client.alpha, variant) if frozen is not None \
                    else gm.constant_inputs(m.gce.K)
                loss = gm.total_loss((x, y), m, frozen, cond, method.lam, method.mu, variant,
                                     method.squared_reg).total
            else:
                anchor = broadcast if method.name == "fedprox" else None
                loss = baseline_loss(method, m, (x, y), anchor, names if anchor else None)
        graph.backward(loss)
        for k in names:
            pt = m.named_parameters()[k]
            if pt.grad is not None:
                pt.data = pt.data - cfg.eta * pt.grad
        after = m.state(names)
        out.append({
            "victim": j, "client_id": client.client_id, "sample": s, "label": int(y[0]),
            "method": method.name, "eta": cfg.eta,
            "before": before, "update": {k: after[k] - before[k] for k in names},
            "ground_truth": x[0].copy(),
        })
    return out


def save_captures(captures: list[dict], path) -> None:
    arrays = {}
    meta = []
    for c in captures:
        j = c["victim"]
        arrays[f"{j}/ground_truth"] = c["ground_truth"]
        for k, v in c["before"].items():
            arrays[f"{j}/before/{k}"] = v
        for k, v in c["update"].items():
            arrays[f"{j}/update/{k}"] = v
        meta.append({k: c[k] for k in ("victim", "client_id", "sample", "label", "method", "eta")})
    np.savez(path, __meta__=np.array(__import__("json").dumps(meta)), **arrays)


def load_captures(path) -> list[dict]:
    import json

    with np.load(path) as z:
        meta = json.loads(str(z["__meta__"]))
        out = []
        for m in meta:
            j = m["victim"]
            c = dict(m)
            c["ground_truth"] = z[f"{j}/ground_truth"]
            c["before"] = {k.split("/", 2)[2]: z[k] for k in z.files if k.startswith(f"{j}/before/")}
            c["update"] = {k.split("/", 2)[2]: z[k] for k in z.files if k.startswith(f"{j}/update/")}
            out.append(c)
    return out


def attack_captures(captures: list[dict], kinds=None, seeds=range(3), steps: int = 300, lr: float = 0.1,
                    optimizer: str = "adam") -> list[dict]:
    """Attack seed ``s`` hits capture ``s mod len(captures)``; one entry per (kind, seed)."""
    if not captures:
        raise ValueError("no captured updates to attack")
    entries = []
    method = captures[0]["method"]
    kinds = kinds or method_targets(method)
    for kind in kinds:
        for s in seeds:
            c = captures[s % len(captures)]
            target = AttackTarget(kind, c["before"], c["update"], c["eta"])
            r = run_dlg(target, steps, lr, seed=s, optimizer=optimizer, ground_truth=c["ground_truth"])
            entries.append({"method": method, "target_kind": kind, "seed": int(s), "victim": c["victim"],
                            "psnr_db": r.psnr_db, "dlg_loss": r.dlg_loss, "diverged": r.diverged})
    return entries
