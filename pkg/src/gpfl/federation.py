"""Server/client orchestration: sampling, local rounds, weighted aggregation, the run loop.

All methods share one client model layout (:class:`~gpfl.nn.ModelBundle`);
a method decides which parameter groups it uploads and which loss it trains.
"""

from __future__ import annotations

import copy
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as gm
from .config import ExperimentConfig
from .data import ClientShard, ConfigError, client_weights
from .metrics import RoundRecord
from .nn import ModelBundle, ModelSpec, extract_features, head_forward, init_parameters

log = logging.getLogger(__name__)

GPFL_FAMILY = {
    "gpfl": gm.FULL,
    "gpfl_wo_pci": gm.GpflVariant(use_pci=False),
    "gpfl_wo_cov": gm.GpflVariant(use_cov=False),
    "gpfl_wo_mlg": gm.GpflVariant(use_mlg=False),
    "gpfl_wo_gce": gm.GpflVariant(use_gce=False),
}
BASELINES = ("fedavg", "fedprox", "fedper", "ditto")


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class MethodSpec:
    name: str = "gpfl"
    lam: float = 1.0
    mu: float = 0.0
    prox_mu: float | None = None
    ditto_lam: float | None = None
    squared_reg: bool = False

    def __post_init__(self):
        if self.name not in GPFL_FAMILY and self.name not in BASELINES:
            raise ConfigError(f"unknown method {self.name!r}")
        if self.name == "fedprox" and self.prox_mu is None:
            raise ConfigError("fedprox needs prox_mu")
        if self.name == "ditto" and self.ditto_lam is None:
            raise ConfigError("ditto needs ditto_lam")

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "MethodSpec":
        return cls(cfg.method, cfg.lam, cfg.mu, cfg.prox_mu, cfg.ditto_lam, cfg.squared_reg)

    @property
    def is_gpfl(self) -> bool:
        return self.name in GPFL_FAMILY

    @property
    def variant(self) -> gm.GpflVariant | None:
        return GPFL_FAMILY.get(self.name)

    @property
    def global_model_eval(self) -> bool:
        return self.name in ("fedavg", "fedprox")

    def shared_groups(self) -> tuple[str, ...]:
        if self.name in ("fedavg", "fedprox", "ditto"):
            return ("fe", "head")
        if self.name == "fedper":
            return ("fe",)
        v = self.variant
        groups = ["fe"]
        if v.use_cov:
            groups.append("cov")
        if v.use_gce:
            groups.append("gce")
        return tuple(groups)

    def shared_names(self, model: ModelBundle) -> list[str]:
        groups = self.shared_groups()
        return [k for k in model.named_parameters() if k.split(".", 1)[0] in groups]


@dataclass
class ClientState:
    shard: ClientShard
    model: ModelBundle
    alpha: np.ndarray
    personal: ModelBundle | None = None  # ditto only
    eta: float = 0.005
    batch_size: int = 10
    epochs: int = 1

    @property
    def client_id(self) -> int:
        return self.shard.client_id


@dataclass
class Upload:
    client_id: int
    params: dict[str, np.ndarray]
    stats: dict[str, float] = field(default_factory=dict)


@dataclass
class ServerState:
    round: int
    params: dict[str, np.ndarray]
    weights: np.ndarray
    rng: np.random.Generator


# ---------------------------------------------------------------------------
# sampling and aggregation
# ---------------------------------------------------------------------------

def sample_clients(n_clients: int, rho, rng: np.random.Generator) -> np.ndarray:
    """``round(rho * N)`` distinct ids (at least one); a ``(lo, hi)`` rho is drawn uniformly first."""
    if n_clients < 1:
        raise ConfigError("cannot sample from an empty client registry")
    if isinstance(rho, (tuple, list)):
        lo, hi = float(rho[0]), float(rho[1])
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"rho range must satisfy 0 < lo <= hi <= 1, got {rho}")
        r = rng.uniform(lo, hi)
    else:
        r = float(rho)
        if not 0 < r <= 1:
            raise ConfigError(f"rho must lie in (0, 1], got {rho}")
    k = min(n_clients, max(1, int(np.floor(r * n_clients + 0.5))))
    if k == n_clients:
        return np.arange(n_clients)
    return np.sort(rng.choice(n_clients, size=k, replace=False))


def aggregate(uploads: list[Upload], weights) -> dict[str, np.ndarray]:
    """Weighted mean of each uploaded tensor; weights are renormalised over the uploaders."""
    if not uploads:
        raise AggregationError("nothing to aggregate")
    uploads = sorted(uploads, key=lambda u: u.client_id)
    ref = uploads[0].params
    for up in uploads[1:]:
        if up.params.keys() != ref.keys():
            raise AggregationError(f"client {up.client_id} uploaded a different parameter set")
        for k, v in up.params.items():
            if v.shape != ref[k].shape:
                raise AggregationError(f"client {up.client_id}: {k} has shape {v.shape}, expected {ref[k].shape}")
    if len(uploads) == 1:
        return {k: v.copy() for k, v in ref.items()}
    w = np.array([weights[u.client_id] for u in uploads], dtype=np.float64)
    w = w / w.sum()
    out = {}
    for k in ref:
        acc = np.zeros_like(ref[k])
        for wi, up in zip(w, uploads):
            acc = acc + wi * up.params[k]
        out[k] = acc
    return out


# ---------------------------------------------------------------------------
# local training
# ---------------------------------------------------------------------------

def _sgd(params, eta: float) -> None:
    for p in params:
        if p.grad is not None:
            p.data = p.data - eta * p.grad
            p.grad = None


def _prox(params: list, anchors: list[np.ndarray]) -> ad.DiffTensor:
    """Squared distance of ``params`` from fixed ``anchors``."""
    diffs = [ad.sub(p, ad.tensor(a)) for p, a in zip(params, anchors)]
    return ad.global_norm(diffs, squared=True)


def _ce_forward(model: ModelBundle, x) -> ad.DiffTensor:
    return head_forward(model.backbone.head, extract_features(model.backbone, ad.tensor(x)))


def baseline_loss(method: MethodSpec, model: ModelBundle, batch, anchor: dict[str, np.ndarray] | None = None,
                  anchor_names: list[str] | None = None) -> ad.DiffTensor:
    """CE for fedavg/fedper and the ditto global model; CE plus a proximal pull for fedprox/ditto-personal.

    ``anchor`` is the broadcast snapshot (fedprox) or the received global model (ditto personal).
    """
    x, y = batch
    ce = ad.softmax_cross_entropy(_ce_forward(model, x), y)
    if anchor is None:
        return ce
    coef = method.prox_mu if method.name == "fedprox" else method.ditto_lam
    if coef is None:
        raise ConfigError(f"{method.name} needs its proximal coefficient")
    params = model.named_parameters()
    names = anchor_names or list(anchor)
    prox = _prox([params[k] for k in names], [anchor[k] for k in names])
    return ad.weighted_sum([(1.0, ce), (0.5 * coef, prox)])


def _batches(n: int, batch_size: int, epochs: int, rng: np.random.Generator):
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            yield order[s:s + batch_size]


def local_round(client: ClientState, broadcast: dict[str, np.ndarray], method: MethodSpec,
                rng: np.random.Generator) -> Upload | None:
    """Install the broadcast, train for the client's epochs with plain SGD, return the shared subset."""
    train = client.shard.train
    if len(train) == 0:
        warnings.warn(f"client {client.client_id} has no training data; skipped this round")
        return None
    m = client.model
    m.load_state(broadcast)
    names = method.shared_names(m)
    X, Y = train.features, train.labels
    sums = {"l_p": 0.0, "l_alg": 0.0, "l_mlg": 0.0, "total": 0.0}
    steps = 0
    if method.is_gpfl:
        variant = method.variant
        frozen = m.gce.frozen_copy() if variant.use_gce else None
        if frozen is not None:
            cond = gm.conditional_inputs(frozen, client.alpha, variant)
        else:
            cond = gm.constant_inputs(m.gce.K)
        params = [p for k, p in m.named_parameters().items()
                  if k.split(".", 1)[0] in method.shared_groups() + ("head",)]
        for idx in _batches(len(train), client.batch_size, client.epochs, rng):
            with ad.Graph() as g:
                parts = gm.total_loss((X[idx], Y[idx]), m, frozen, cond, method.lam, method.mu,
                                      variant, method.squared_reg)
            g.backward(parts.total)
            _sgd(params, client.eta)
            vals = parts.values()
            for k in sums:
                sums[k] += vals[k]
            steps += 1
    else:
        params = [p for k, p in m.named_parameters().items() if k.split(".", 1)[0] in ("fe", "head")]
        anchor = broadcast if method.name == "fedprox" else None
        order = list(_batches(len(train), client.batch_size, client.epochs, rng))
        for idx in order:
            with ad.Graph() as g:
                loss = baseline_loss(method, m, (X[idx], Y[idx]), anchor, names if anchor else None)
            g.backward(loss)
            _sgd(params, client.eta)
            sums["l_p"] += loss.item()
            sums["total"] += loss.item()
            steps += 1
        if method.name == "ditto":
            v = client.personal
            v_params = [p for k, p in v.named_parameters().items() if k.split(".", 1)[0] in ("fe", "head")]
            for idx in order:
                with ad.Graph() as g:
                    loss = baseline_loss(method, v, (X[idx], Y[idx]), broadcast, names)
                g.backward(loss)
                _sgd(v_params, client.eta)
    stats = {k: (val / steps if steps else 0.0) for k, val in sums.items()}
    stats["steps"] = steps
    return Upload(client.client_id, m.state(names), stats)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_client(client: ClientState, global_params: dict[str, np.ndarray], method: MethodSpec) -> float:
    """Test accuracy of the client's personalised model (the global model for fedavg/fedprox)."""
    test = client.shard.test
    if len(test) == 0:
        return float("nan")
    if method.name == "ditto":
        logits = _ce_forward(client.personal, test.features)
        return float((logits.data.argmax(axis=1) == test.labels).mean())
    m = client.model
    m.load_state(global_params)
    if method.is_gpfl:
        variant = method.variant
        if variant.use_gce:
            cond = gm.conditional_inputs(m.gce.frozen_copy(), client.alpha, variant)
        else:
            cond = gm.constant_inputs(m.gce.K)
        pred = gm.predict(m, test.features, cond, variant)
    else:
        pred = _ce_forward(m, test.features).data.argmax(axis=1)
    return float((pred == test.labels).mean())


# ---------------------------------------------------------------------------
# experiment loop
# ---------------------------------------------------------------------------

def _round_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, t, 0xC11E]).generate_state(1)[0])


@dataclass
class RunResult:
    records: list[RoundRecord]
    clients: list[ClientState]
    global_params: dict[str, np.ndarray]
    method: MethodSpec
    weights: np.ndarray
    captures: list[dict] = field(default_factory=list)


def make_clients(shards: list[ClientShard], cfg: ExperimentConfig, method: MethodSpec,
                 init: ModelBundle) -> list[ClientState]:
    clients = []
    for sh in shards:
        alpha = gm.compute_alpha(sh.train.labels, cfg.U) if len(sh.train) else np.zeros(cfg.U)
        st = ClientState(sh, copy.deepcopy(init), alpha, eta=cfg.eta, batch_size=cfg.batch_size,
                         epochs=cfg.epochs)
        if method.name == "ditto":
            st.personal = copy.deepcopy(init)
        clients.append(st)
    return clients


def run_federation(shards: list[ClientShard], cfg: ExperimentConfig, on_round=None) -> RunResult:
    """Initial evaluation (round 0) followed by ``cfg.rounds`` federated rounds."""
    method = MethodSpec.from_config(cfg)
    spec = ModelSpec(cfg.D, cfg.K, cfg.U, (cfg.hidden,))
    init = init_parameters(spec, cfg.seed_init)
    clients = make_clients(shards, cfg, method, init)
    weights = client_weights(shards)
    names = method.shared_names(init)
    server = ServerState(0, init.state(names), weights, np.random.default_rng(cfg.seed_sample))
    captures: list[dict] = []

    def evaluate(t, participants, stats, t0):
        accs = [evaluate_client(c, server.params, method) for c in clients]
        arr = np.array(accs)
        if cfg.weighted_mean:
            test_sizes = np.array([len(c.shard.test) for c in clients], dtype=np.float64)
            mean_acc = float((arr * test_sizes).sum() / test_sizes.sum())
        else:
            mean_acc = float(np.nanmean(arr))
        loss = {k: float(np.mean([s[k] for s in stats])) if stats else float("nan")
                for k in ("l_p", "l_alg", "l_mlg")}
        rec = RoundRecord(t, [int(i) for i in participants], accs, mean_acc, loss,
                          (time.perf_counter() - t0) * 1000.0)
        if on_round is not None:
            on_round(rec)
        return rec

    records = [evaluate(0, [], [], time.perf_counter())]
    pool = ThreadPoolExecutor(max_workers=4) if cfg.parallel else None
    try:
        for t in range(1, cfg.rounds + 1):
            t0 = time.perf_counter()
            server.round = t
            chosen = sample_clients(len(clients), cfg.rho_spec, server.rng)
            shuffle_seed = _round_seed(cfg.seed_sample, t)
            if cfg.capture_updates and t == 1:
                from .privacy import capture_single_sample_updates
                captures = capture_single_sample_updates(clients, chosen, server.params, method, cfg)

            def job(i):
                try:
                    return local_round(clients[i], server.params, method, np.random.default_rng(shuffle_seed))
                except Exception as exc:
                    raise RuntimeError(f"round {t}, client {i}: {exc}") from exc

            if pool is not None:
                results = list(pool.map(job, chosen))
            else:
                results = [job(i) for i in chosen]
            uploads = [u for u in results if u is not None]
            if uploads:
                server.params = aggregate(uploads, weights)
            records.append(evaluate(t, chosen, [u.stats for u in uploads], t0))
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(records, clients, server.params, method, weights, captures)
