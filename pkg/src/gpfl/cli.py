"""Command line: ``gpfl train | ablate | attack``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, parse_config
from .data import ConfigError, DatasetParseError
from .metrics import read_json, write_json

log = logging.getLogger("gpfl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _rho(text: str):
    """``0.5`` or a range ``0.1:1`` (also ``0.1,1``)."""
    for sep in (":", ","):
        if sep in text:
            lo, hi = text.split(sep, 1)
            return float(lo), float(hi)
    return float(text)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat TOML file with config keys")
    p.add_argument("--method")
    p.add_argument("--rounds", type=int)
    p.add_argument("--clients", type=int)
    p.add_argument("--beta", type=float, help="Dirichlet concentration")
    p.add_argument("--eta", type=float, help="local learning rate")
    p.add_argument("--lambda", dest="lam", type=float, help="weight of the magnitude-level loss")
    p.add_argument("--mu", type=float, help="weight of the norm regularisers")
    p.add_argument("--rho", type=_rho, help="joining ratio, or a range lo:hi drawn per round")
    p.add_argument("--partition")
    p.add_argument("--seed-data", type=int)
    p.add_argument("--seed-init", type=int)
    p.add_argument("--seed-sample", type=int)
    p.add_argument("--seed-attack", type=int)
    p.add_argument("--out")
    p.add_argument("--capture-updates", action="store_true", default=None,
                   help="store single-sample round-1 updates for the attack command")
    p.add_argument("--parallel", action="store_true", default=None, help="run clients on a thread pool")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any other config key")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gpfl", description="Personalized federated learning experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("train", help="run one federated experiment"))
    ab = sub.add_parser("ablate", help="GPFL, its four ablations and FedPer on shared shards")
    _common(ab)
    ab.add_argument("--repeats", type=int, default=1, help="repeat with every seed shifted by 0..n-1")
    at = sub.add_parser("attack", help="gradient inversion on a run's captured updates")
    _common(at)
    at.add_argument("run_dir", help="output directory of a run trained with --capture-updates")
    at.add_argument("--restarts", type=int, help="attack seeds per target")
    at.add_argument("--steps", type=int)
    at.add_argument("--target", action="append",
                    choices=("feature-extractor", "pseudo-feature-extractor", "pseudo-model", "full-model"),
                    help="restrict to these target kinds")
    return ap


def overrides_from(args) -> dict:
    ov = {}
    for key in ("method", "rounds", "clients", "beta", "eta", "lam", "mu", "partition", "seed_data", "seed_init",
                "seed_sample", "seed_attack", "out", "capture_updates", "parallel"):
        v = getattr(args, key, None)
        if v is not None:
            ov[key] = v
    if args.rho is not None:
        if isinstance(args.rho, tuple):
            ov["rho_lo"], ov["rho_hi"] = args.rho
        else:
            ov["rho"] = args.rho
    if getattr(args, "restarts", None) is not None:
        ov["attack_restarts"] = args.restarts
    if getattr(args, "steps", None) is not None:
        ov["attack_steps"] = args.steps
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k] = v
    return ov


def cmd_train(cfg: ExperimentConfig) -> int:
    from .experiment import run_experiment

    def report(rec):
        if rec.round % 25 == 0 or rec.round == cfg.rounds:
            log.info("round %d mean acc %.4f", rec.round, rec.mean_acc)

    out = run_experiment(cfg, on_round=report)
    best = out.summary["best"]
    print(f"{cfg.method}: best mean accuracy {best['mean_acc']:.4f} at round {best['round']} -> {cfg.out}")
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, repeats: int) -> int:
    from .experiment import run_ablation

    report = run_ablation(cfg, repeats)
    for r in report["rows"]:
        print(f"{r['method']:<14} {r['mean_best_acc']:.4f}")
    if report["ordering"] is not None:
        o = report["ordering"]
        print(f"ordering {'passed' if o['passed'] else 'failed'} (inversions: {', '.join(o['inversions']) or 'none'})")
    return EXIT_OK


def cmd_attack(cfg: ExperimentConfig, run_dir, kinds=None) -> int:
    from .experiment import run_attack

    entries = run_attack(run_dir, cfg, kinds)
    summary_path = Path(run_dir) / "summary.json"
    if summary_path.exists():
        summary = read_json(summary_path)
        summary["privacy"] = summary.get("privacy", []) + entries
        write_json(summary, summary_path)
    write_json({"privacy": entries}, Path(run_dir) / "privacy.json")
    for e in entries:
        print(f"{e['method']} {e['target_kind']} seed {e['seed']}: psnr {e['psnr_db']:.2f} dB")
    return EXIT_OK


def _attack_config(args, ov):
    """Config echoed by the run being attacked, overlaid by flags (the echo beats ``--config``)."""
    from .config import normalise_key

    summary = Path(args.run_dir) / "summary.json"
    base = {}
    if summary.exists():
        base = {k: v for k, v in read_json(summary).get("config", {}).items() if v is not None}
    base.update({normalise_key(k): v for k, v in ov.items()})
    return parse_config(args.config, base)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors; those are configuration errors here
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        ov = overrides_from(args)
        if args.command == "attack":
            cfg = _attack_config(args, ov)
        else:
            cfg = parse_config(args.config, ov)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.repeats)
        return cmd_attack(cfg, args.run_dir, args.target)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetParseError, FileNotFoundError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
