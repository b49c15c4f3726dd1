"""Glue from a resolved config to data, federation, summaries and attacks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as gd
from .config import ExperimentConfig
from .federation import RunResult, run_federation
from .metrics import SCHEMA_VERSION, best_round, fairness, write_json, write_outputs

ABLATION_METHODS = ("gpfl", "gpfl_wo_pci", "gpfl_wo_cov", "gpfl_wo_mlg", "gpfl_wo_gce", "fedper")
# chain checked by the ablation ordering (best to worst)
ABLATION_CHAIN = ("gpfl", "gpfl_wo_mlg", "gpfl_wo_gce", "fedper")
# fields that change how a run executes but never what it computes
EXECUTION_ONLY = ("parallel", "out")
CAPTURE_FILE = "captures.npz"


def load_dataset(cfg: ExperimentConfig) -> gd.Dataset:
    if cfg.csv_path:
        ds = gd.load_csv_dataset(cfg.csv_path, cfg.U)
        if ds.D != cfg.D:
            raise gd.ConfigError(f"D: config says {cfg.D} but {cfg.csv_path} has {ds.D} features")
        return ds
    return gd.gen_synthetic(cfg.U, cfg.D, cfg.n_samples, cfg.spread, cfg.seed_data, cfg.separation, cfg.unit_range)


def make_shards(cfg: ExperimentConfig, ds: gd.Dataset | None = None) -> list[gd.ClientShard]:
    ds = load_dataset(cfg) if ds is None else ds
    if cfg.partition == "pathological":
        return gd.partition_pathological(ds, cfg.clients, cfg.classes_per_client, cfg.seed_data, cfg.train_fraction)
    if cfg.partition == "dirichlet":
        return gd.partition_dirichlet(ds, cfg.clients, cfg.beta, cfg.min_samples, cfg.seed_data, cfg.train_fraction)
    return gd.partition_iid(ds, cfg.clients, cfg.seed_data, cfg.train_fraction)


def resolved_config(cfg: ExperimentConfig) -> dict:
    d = cfg.to_dict()
    for k in EXECUTION_ONLY:
        d.pop(k, None)
    return d


def _num(v):
    return None if v is None or not math.isfinite(v) else v


def summarize(cfg: ExperimentConfig, result: RunResult, shards) -> dict:
    rnd, acc, fair = best_round(result.records)
    final = result.records[-1]
    return {
        "schema": SCHEMA_VERSION,
        "method": cfg.method,
        "config": resolved_config(cfg),
        "seeds": {"data": cfg.seed_data, "init": cfg.seed_init, "sample": cfg.seed_sample, "attack": cfg.seed_attack},
        "shard_hash": gd.shard_hash(shards),
        "rounds_run": len(result.records) - 1,
        "best": {
            "round": rnd,
            "mean_acc": acc,
            "fairness": None if fair is None else {"std": fair.std, "std_pp": fair.std_pp, "cv": fair.cv},
        },
        "final": {"round": final.round, "mean_acc": final.mean_acc, "per_client_acc": final.per_client_acc,
                  "loss": {k: _num(v) for k, v in final.loss.items()}},
        "privacy": [],
    }


@dataclass
class ExperimentOutput:
    result: RunResult
    summary: dict
    shards: list


def run_experiment(cfg: ExperimentConfig, write: bool = True, on_round=None) -> ExperimentOutput:
    shards = make_shards(cfg)
    result = run_federation(shards, cfg, on_round)
    summary = summarize(cfg, result, shards)
    if write:
        write_outputs(result.records, summary, cfg.out)
        if cfg.capture_updates:
            from .privacy import save_captures
            save_captures(result.captures, Path(cfg.out) / CAPTURE_FILE)
    return ExperimentOutput(result, summary, shards)


def shifted_seeds(cfg: ExperimentConfig, k: int) -> ExperimentConfig:
    """The ``k``-th repeat: every seed stream moved by ``k``."""
    return cfg.replace(seed_data=cfg.seed_data + k, seed_init=cfg.seed_init + k,
                       seed_sample=cfg.seed_sample + k, seed_attack=cfg.seed_attack + k)


def ordering_check(means: dict[str, float], chain=ABLATION_CHAIN, max_inversions: int = 1) -> dict:
    """Count adjacent pairs of ``chain`` where the later entry beats the earlier one."""
    inv = [f"{a}<{b}" for a, b in zip(chain, chain[1:]) if means[a] < means[b]]
    return {"chain": list(chain), "inversions": inv, "max_inversions": max_inversions,
            "passed": len(inv) <= max_inversions}


def sign_test_p(wins: int, n: int) -> float:
    """One-sided sign test: P(at least ``wins`` successes in ``n`` fair coin flips)."""
    return float(sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n)


def run_ablation(cfg: ExperimentConfig, repeats: int = 1, methods=ABLATION_METHODS, write: bool = True) -> dict:
    """Every method on the same shards and initialisation, ``repeats`` times with shifted seeds."""
    from .metrics import bar_chart_svg

    rows = {m: [] for m in methods}
    hashes = {m: [] for m in methods}
    out = Path(cfg.out)
    for k in range(repeats):
        base = shifted_seeds(cfg, k)
        for m in methods:
            run_cfg = base.replace(method=m, out=str(out / f"{m}_r{k}"))
            res = run_experiment(run_cfg, write=write)
            rows[m].append(res.summary["best"]["mean_acc"])
            hashes[m].append(res.summary["shard_hash"])
    table = []
    for m in methods:
        accs = np.array(rows[m])
        table.append({"method": m, "mean_best_acc": float(accs.mean()), "std_best_acc": float(accs.std()),
                      "per_repeat": [float(a) for a in accs], "shard_hashes": hashes[m]})
    means = {r["method"]: r["mean_best_acc"] for r in table}
    shared = all(hashes[m] == hashes[methods[0]] for m in methods)
    report = {"schema": SCHEMA_VERSION, "config": resolved_config(cfg), "repeats": repeats, "rows": table,
              "shards_shared": shared,
              "ordering": ordering_check(means) if all(m in means for m in ABLATION_CHAIN) else None}
    if write:
        out.mkdir(parents=True, exist_ok=True)
        with (out / "ablation.csv").open("w", encoding="utf-8") as fh:
            fh.write("method,mean_best_acc,std_best_acc," + ",".join(f"best_acc_r{k}" for k in range(repeats)) + "\n")
            for r in table:
                vals = [repr(r["mean_best_acc"]), repr(r["std_best_acc"])] + [repr(a) for a in r["per_repeat"]]
                fh.write(r["method"] + "," + ",".join(vals) + "\n")
        write_json(report, out / "ablation.json")
        (out / "ablation.svg").write_text(
            bar_chart_svg([r["method"] for r in table], [r["mean_best_acc"] for r in table],
                          title="best mean accuracy per variant", value_label="accuracy"), encoding="utf-8")
    return report


def run_attack(run_dir, cfg: ExperimentConfig, kinds=None) -> list[dict]:
    """Attack the captures stored in ``run_dir``; seeds ``seed_attack .. seed_attack + restarts - 1``."""
    from .privacy import attack_captures, load_captures

    path = Path(run_dir) / CAPTURE_FILE
    if not path.exists():
        raise FileNotFoundError(f"{path} not found: train with --capture-updates to store round-1 updates first")
    caps = load_captures(path)
    seeds = range(cfg.seed_attack, cfg.seed_attack + cfg.attack_restarts)
    return attack_captures(caps, kinds, seeds, cfg.attack_steps, cfg.attack_lr)
