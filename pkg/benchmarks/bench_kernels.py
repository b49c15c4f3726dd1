"""Numba vs numpy kernels, per kernel and end to end.

Per-kernel timings call both implementations in this process.  The end-to-end
numbers (a short GPFL run and one DLG attack) run in subprocesses, one with
GPFL_DISABLE_NUMBA=1, so the whole package is on one backend at a time.

    python3 benchmarks/bench_kernels.py [--repeat 200] [--json out.json]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from gpfl import kernels

E2E_SNIPPET = r"""
import json, time
import numpy as np
from gpfl import kernels
from gpfl.config import ExperimentConfig
from gpfl.experiment import run_experiment
from gpfl.privacy import attack_captures
cfg = ExperimentConfig(rounds=20, clients=10, n_samples=1000, spread=6.0, partition="pathological",
                       eta=0.01, capture_updates=True).validate()
run_experiment(cfg.replace(rounds=1), write=False)  # compile / warm caches
t0 = time.perf_counter()
out = run_experiment(cfg, write=False)
t1 = time.perf_counter()
attack_captures(out.result.captures, ["pseudo-model"], range(2), steps=300)
t2 = time.perf_counter()
print(json.dumps({"backend": kernels.backend(), "train_20_rounds_s": t1 - t0, "attack_2x300_steps_s": t2 - t1}))
"""


def _inputs(rng):
    B, K, U, P, o, i = 10, 16, 8, 97, 64, 32
    x = rng.normal(size=(B, K))
    gain, bias = rng.normal(size=K), rng.normal(size=K)
    lab = rng.integers(0, U, size=B).astype(np.int64)
    ln_out, xhat, inv = kernels.layer_norm_fwd_np(x, gain, bias, 1e-5)
    sim, fh, ch, nf, nc = kernels.cosine_fwd_np(x, rng.normal(size=(U, K)), 1e-12)
    logits = rng.normal(size=(B, U))
    _, probs = kernels.softmax_xent_fwd_np(logits, lab)
    dist, diff = kernels.row_l2_fwd_np(x, rng.normal(size=(B, K)))
    return {
        "layer_norm_fwd": (x, gain, bias, 1e-5),
        "layer_norm_bwd": (rng.normal(size=(B, K)), xhat, inv, gain),
        "cosine_fwd": (x, rng.normal(size=(U, K)), 1e-12),
        "cosine_bwd": (rng.normal(size=(B, U)), fh, ch, nf, nc),
        "softmax_xent_fwd": (logits, lab),
        "softmax_xent_bwd": (rng.normal(size=B), probs, lab),
        "row_l2_fwd": (x, rng.normal(size=(B, K))),
        "row_l2_bwd": (rng.normal(size=B), diff, dist),
        "matched_outer_sqdist": (rng.normal(size=(P, o)), rng.normal(size=(P, i)), rng.normal(size=(o, i))),
    }


def _time(fn, args, repeat):
    fn(*args)
    t = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t) / repeat


def per_kernel(repeat):
    rng = np.random.default_rng(0)
    rows = []
    have_nb = hasattr(kernels, "layer_norm_fwd_nb")
    for name, args in _inputs(rng).items():
        t_np = _time(getattr(kernels, name + "_np"), args, repeat)
        t_nb = _time(getattr(kernels, name + "_nb"), args, repeat) if have_nb else float("nan")
        rows.append({"kernel": name, "numpy_us": t_np * 1e6, "numba_us": t_nb * 1e6, "speedup": t_np / t_nb})
    return rows


def end_to_end():
    res = []
    for flag in ("0", "1"):
        env = dict(os.environ, GPFL_DISABLE_NUMBA=flag)
        proc = subprocess.run([sys.executable, "-c", E2E_SNIPPET], env=env, capture_output=True, text=True,
                              check=True)
        res.append(json.loads(proc.stdout.strip().splitlines()[-1]))
    return res


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--json")
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args(argv)
    rows = per_kernel(args.repeat)
    print(f"{'kernel':<22}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for r in rows:
        print(f"{r['kernel']:<22}{r['numpy_us']:>12.2f}{r['numba_us']:>12.2f}{r['speedup']:>10.2f}")
    e2e = [] if args.skip_e2e else end_to_end()
    for r in e2e:
        print(f"{r['backend']:<8} train 20 rounds {r['train_20_rounds_s']:.2f} s, "
              f"attack 2x300 steps {r['attack_2x300_steps_s']:.2f} s")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"kernels": rows, "end_to_end": e2e}, fh, indent=2)


if __name__ == "__main__":
    main()
