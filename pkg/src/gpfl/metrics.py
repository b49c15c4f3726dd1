"""Round records, fairness statistics, and run persistence (CSV, JSON, SVG)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

SCHEMA_VERSION = 1
LOSS_KEYS = ("l_p", "l_alg", "l_mlg")
LOSS_COLUMNS = ("loss_p", "loss_alg", "loss_mlg")


@dataclass
class RoundRecord:
    round: int
    participants: list[int]
    per_client_acc: list[float]
    mean_acc: float
    loss: dict[str, float] = field(default_factory=dict)
    wall_ms: float = 0.0


@dataclass
class FairnessStats:
    std: float  # same unit as the accuracies (fractions)
    cv: float | None  # None when the mean accuracy is zero

    @property
    def std_pp(self) -> float:
        return self.std * 100.0


def fairness(acc) -> FairnessStats:
    """Population std-dev of per-client accuracy and the coefficient of variation std/mean."""
    a = np.asarray(acc, dtype=np.float64)
    if a.size < 2:
        raise ValueError("fairness needs at least two clients")
    m = float(a.mean())
    std = 0.0 if np.all(a == a[0]) else float(a.std())  # exact zero for equal clients
    return FairnessStats(std, std / m if m > 0 else None)


def best_round(records: list[RoundRecord]) -> tuple[int, float, FairnessStats | None]:
    """Highest mean accuracy, earliest round on ties, with fairness at that round."""
    if not records:
        raise ValueError("no records")
    best = records[0]
    for r in records[1:]:
        if r.mean_acc > best.mean_acc:
            best = r
    fair = fairness(best.per_client_acc) if len(best.per_client_acc) >= 2 else None
    return best.round, best.mean_acc, fair


# ---------------------------------------------------------------------------
# CSV / JSON
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v)) if math.isfinite(v) else str(float(v))


def write_records_csv(records: list[RoundRecord], path) -> None:
    n = len(records[0].per_client_acc) if records else 0
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "mean_acc", *LOSS_COLUMNS] + [f"acc_client_{i}" for i in range(n)])
        for r in records:
            w.writerow([r.round, _fmt(r.mean_acc)] + [_fmt(r.loss.get(k, float("nan"))) for k in LOSS_KEYS]
                       + [_fmt(a) for a in r.per_client_acc])


def read_records_csv(path) -> list[RoundRecord]:
    """Inverse of :func:`write_records_csv` (participants and wall time are not stored)."""
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        n_acc = len(header) - 2 - len(LOSS_KEYS)
        for row in rows:
            loss = {k: float(row[2 + i]) for i, k in enumerate(LOSS_KEYS)}
            accs = [float(v) for v in row[2 + len(LOSS_KEYS):2 + len(LOSS_KEYS) + n_acc]]
            out.append(RoundRecord(int(row[0]), [], accs, float(row[1]), loss))
    return out


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

W, H = 960, 540
PAD_L, PAD_R, PAD_T, PAD_B = 70, 70, 40, 60
COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / n for i in range(n + 1)], lo, hi


def line_chart_svg(xs, left_series: dict, right_series: dict | None = None,
                   title: str = "", left_label: str = "", right_label: str = "") -> str:
    """Two-axis line chart: ``left_series`` on the left axis, ``right_series`` on the right."""
    right_series = right_series or {}
    xs = list(xs)
    x_lo, x_hi = (min(xs), max(xs)) if xs else (0, 1)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    pw, ph = W - PAD_L - PAD_R, H - PAD_T - PAD_B

    def finite(vals):
        return [v for v in vals if v is not None and math.isfinite(v)]

    def bounds(series):
        vals = [v for s in series.values() for v in finite(s)]
        return (min(vals), max(vals)) if vals else (0.0, 1.0)

    def px(x):
        return PAD_L + (x - x_lo) / (x_hi - x_lo) * pw

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
             '<rect width="100%" height="100%" fill="white"/>',
             f'<text x="{W / 2}" y="24" text-anchor="middle" font-size="16">{escape(title)}</text>',
             f'<line x1="{PAD_L}" y1="{PAD_T + ph}" x2="{PAD_L + pw}" y2="{PAD_T + ph}" stroke="black"/>',
             f'<line x1="{PAD_L}" y1="{PAD_T}" x2="{PAD_L}" y2="{PAD_T + ph}" stroke="black"/>',
             f'<text x="{PAD_L + pw / 2}" y="{H - 15}" text-anchor="middle" font-size="13">round</text>']
    for tx in _ticks(x_lo, x_hi)[0]:
        parts.append(f'<text x="{px(tx):.1f}" y="{PAD_T + ph + 18}" text-anchor="middle" '
                     f'font-size="11">{tx:g}</text>')
    legend = []
    for side, series, label in (("left", left_series, left_label), ("right", right_series, right_label)):
        if not series:
            continue
        ticks, lo, hi = _ticks(*bounds(series))
        ax = PAD_L if side == "left" else PAD_L + pw
        anchor = "end" if side == "left" else "start"
        off = -6 if side == "left" else 6
        if side == "right":
            parts.append(f'<line x1="{ax}" y1="{PAD_T}" x2="{ax}" y2="{PAD_T + ph}" stroke="black"/>')
        for t in ticks:
            y = PAD_T + ph - (t - lo) / (hi - lo) * ph
            parts.append(f'<text x="{ax + off}" y="{y + 4:.1f}" text-anchor="{anchor}" font-size="11">{t:.3g}</text>')
        lx = 18 if side == "left" else W - 18
        parts.append(f'<text x="{lx}" y="{PAD_T + ph / 2}" font-size="13" text-anchor="middle" '
                     f'transform="rotate(-90 {lx} {PAD_T + ph / 2})">{escape(label)}</text>')
        for name, vals in series.items():
            colour = COLOURS[len(legend) % len(COLOURS)]
            pts = [(px(x), PAD_T + ph - (v - lo) / (hi - lo) * ph)
                   for x, v in zip(xs, vals) if v is not None and math.isfinite(v)]
            if pts:
                d = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
                dash = ' stroke-dasharray="6 3"' if side == "right" else ""
                parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2"{dash} points="{d}"/>')
            legend.append((name, colour))
    for i, (name, colour) in enumerate(legend):
        y = PAD_T + 10 + 18 * i
        parts.append(f'<rect x="{PAD_L + 12}" y="{y - 9}" width="12" height="12" fill="{colour}"/>')
        parts.append(f'<text x="{PAD_L + 30}" y="{y + 1}" font-size="12">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def bar_chart_svg(labels, values, title: str = "", value_label: str = "") -> str:
    pw, ph = W - PAD_L - PAD_R, H - PAD_T - PAD_B
    vals = [v if math.isfinite(v) else 0.0 for v in values]
    hi = max(vals + [1e-12])
    n = max(len(vals), 1)
    slot = pw / n
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
             '<rect width="100%" height="100%" fill="white"/>',
             f'<text x="{W / 2}" y="24" text-anchor="middle" font-size="16">{escape(title)}</text>',
             f'<line x1="{PAD_L}" y1="{PAD_T + ph}" x2="{PAD_L + pw}" y2="{PAD_T + ph}" stroke="black"/>',
             f'<line x1="{PAD_L}" y1="{PAD_T}" x2="{PAD_L}" y2="{PAD_T + ph}" stroke="black"/>',
             f'<text x="18" y="{PAD_T + ph / 2}" font-size="13" text-anchor="middle" '
             f'transform="rotate(-90 18 {PAD_T + ph / 2})">{escape(value_label)}</text>']
    for i, (lab, v) in enumerate(zip(labels, vals)):
        bh = v / hi * ph
        x = PAD_L + i * slot + slot * 0.15
        parts.append(f'<rect x="{x:.1f}" y="{PAD_T + ph - bh:.1f}" width="{slot * 0.7:.1f}" '
                     f'height="{bh:.1f}" fill="{COLOURS[i % len(COLOURS)]}"/>')
        parts.append(f'<text x="{x + slot * 0.35:.1f}" y="{PAD_T + ph - bh - 6:.1f}" text-anchor="middle" '
                     f'font-size="12">{v:.4f}</text>')
        parts.append(f'<text x="{x + slot * 0.35:.1f}" y="{PAD_T + ph + 18}" text-anchor="middle" '
                     f'font-size="12">{escape(str(lab))}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_outputs(records: list[RoundRecord], summary: dict, out_dir) -> dict[str, Path]:
    """``rounds.csv``, ``summary.json`` and ``curves.svg`` in ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / "rounds.csv", "json": out / "summary.json", "svg": out / "curves.svg"}
        write_records_csv(records, paths["csv"])
        write_json(summary, paths["json"])
        xs = [r.round for r in records]
        svg = line_chart_svg(xs, {"mean accuracy": [r.mean_acc for r in records]},
                             {"personal CE loss": [r.loss.get("l_p", float("nan")) for r in records]},
                             title=f"{summary.get('method', '')} accuracy and loss per round",
                             left_label="mean test accuracy", right_label="loss")
        paths["svg"].write_text(svg, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write run outputs to {out}: {exc}") from exc
    return paths
