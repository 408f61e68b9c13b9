"""Size gains, speedup counting, Pareto frontiers and report emission."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from effscale.compressors import CompressionSpec, QuantSpec, SparsitySpec, parse_spec
from effscale.lawfit import EFF_BOUNDS, FitResult, predict_loss

log = logging.getLogger(__name__)

BASELINE_BITS = 16
COUNTINGS = ("linear", "quadratic")


def _check_eff(eff: float) -> None:
    if not 0 < eff <= EFF_BOUNDS[1]:
        raise ValueError(f"eff must lie in (0, {EFF_BOUNDS[1]}], got {eff}")


def size_gain(eff: float, weight_bits: int, baseline_bits: int = BASELINE_BITS) -> float:
    """Memory reduction at equal loss: eff * baseline_bits / weight_bits."""
    _check_eff(eff)
    if weight_bits < 1 or baseline_bits < 1:
        raise ValueError("bit widths must be >= 1")
    return eff * baseline_bits / weight_bits


def size_gain_sparse(eff: float, sparsity: float) -> float:
    """Memory reduction at equal loss for sparse weights, index storage ignored."""
    _check_eff(eff)
    if not 0 < sparsity < 1:
        raise ValueError("sparsity must lie in (0, 1)")
    return eff / (1 - sparsity)


def speedup(spec: CompressionSpec | str, counting: str = "linear") -> float:
    """Compute reduction factor of a spec relative to 16-bit dense.

    Quantized W/A: linear = 16 / max(bw, ba), quadratic = 256 / (bw * ba).
    Weight-only quantization is memory bound: 16 / bw under linear counting,
    undefined under quadratic. Sparsity s contributes 1 / (1 - s).
    """
    if counting not in COUNTINGS:
        raise ValueError(f"counting must be one of {COUNTINGS}")
    if isinstance(spec, str):
        spec = parse_spec(spec)
    w, a = spec.weight_compression, spec.activation_quantization
    factor = 1.0
    if isinstance(w, SparsitySpec):
        factor = 1.0 / (1.0 - w.fraction)
        w = None
    if w is None and a is None:
        return factor
    bw = w.bits if isinstance(w, QuantSpec) else BASELINE_BITS
    ba = a.bits if a is not None else BASELINE_BITS
    if a is None:
        if counting == "quadratic":
            raise ValueError("quadratic counting is undefined for weight-only quantization")
        return factor * BASELINE_BITS / bw
    if counting == "linear":
        return factor * BASELINE_BITS / max(bw, ba)
    return factor * BASELINE_BITS**2 / (bw * ba)


@dataclass
class ParetoPoint:
    spec: str
    cost: float  # effective parameters per unit compute: eff * speedup
    quality: float  # effective parameter multiplier
    dominated: bool = False


def _dominates(p: ParetoPoint, q: ParetoPoint) -> bool:
    return p.cost >= q.cost and p.quality >= q.quality and (p.cost > q.cost or p.quality > q.quality)


def pareto_frontier(points: Iterable[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated points (both axes maximized), ordered by cost."""
    pts = sorted(points, key=lambda p: (p.cost, p.quality, p.spec))
    return [p for p in pts if not any(_dominates(q, p) for q in pts)]


def pareto_points(epm_table: Mapping[str, float], counting: str = "linear") -> list[ParetoPoint]:
    """Points for every spec whose speedup is defined under ``counting``,
    with ``dominated`` set relative to the whole set."""
    pts = []
    for spec, eff in epm_table.items():
        try:
            s = speedup(spec, counting)
        except ValueError:
            continue
        pts.append(ParetoPoint(spec, eff * s, eff))
    front = {id(p) for p in pareto_frontier(pts)}
    for p in pts:
        p.dominated = id(p) not in front
    return sorted(pts, key=lambda p: (p.cost, p.quality, p.spec))


@dataclass
class CostGroup:
    speedup: float
    effs: dict[str, float]

    @property
    def best(self) -> str:
        return max(sorted(self.effs), key=lambda s: self.effs[s])

    @property
    def delta(self) -> float:
        return max(self.effs.values()) - min(self.effs.values())


def compare_at_equal_cost(epm_table: Mapping[str, float], counting: str = "linear") -> list[CostGroup]:
    """Group specs with equal speedup; only groups of two or more are reported."""
    groups: dict[float, dict[str, float]] = {}
    for spec, eff in epm_table.items():
        try:
            s = speedup(spec, counting)
        except ValueError:
            continue
        groups.setdefault(round(s, 9), {})[spec] = eff
    return [CostGroup(s, dict(sorted(effs.items()))) for s, effs in sorted(groups.items()) if len(effs) > 1]


# ---------------------------------------------------------------------------
# Report emission

CSV_COLUMNS = ("spec", "N", "D", "loss", "predicted_loss", "eff", "residual")
SVG_W, SVG_H = 800, 600
_MARGIN = (70, 30, 40, 60)  # left, right, top, bottom
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def report_rows(records: Sequence, fit: FitResult | None) -> tuple[list[list[str]], list[str]]:
    rows, unfitted = [], set()
    for r in sorted(records, key=lambda r: (r.spec, r.n_params, r.tokens, r.digest)):
        if r.diverged or not math.isfinite(r.val_loss):
            continue
        est = fit.epm.get(r.spec) if fit is not None else None
        if est is None:
            unfitted.add(r.spec)
            rows.append([r.spec, str(r.n_params), str(r.tokens), _fmt(r.val_loss), "", "", ""])
            continue
        pred = predict_loss(fit.law, r.n_params, r.tokens, est.eff)
        rows.append([r.spec, str(r.n_params), str(r.tokens), _fmt(r.val_loss),
                     _fmt(pred), _fmt(est.eff), _fmt(r.val_loss - pred)])
    warnings = [f"# warning: no fit for {s}; plotted raw" for s in sorted(unfitted)]
    return rows, warnings


def render_csv(records: Sequence, fit: FitResult | None) -> str:
    rows, warnings = report_rows(records, fit)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    writer.writerows(rows)
    for w in warnings:
        buf.write(w + "\n")
    return buf.getvalue()


def render_svg(records: Sequence, fit: FitResult | None) -> str:
    """Log-log loss vs N, one polyline per spec plus the fitted curve."""
    ok = [r for r in records if not r.diverged and math.isfinite(r.val_loss)]
    left, right, top, bottom = _MARGIN
    pw, ph = SVG_W - left - right, SVG_H - top - bottom
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SVG_W}" height="{SVG_H}" '
        f'viewBox="0 0 {SVG_W} {SVG_H}">',
        f'<rect x="0" y="0" width="{SVG_W}" height="{SVG_H}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
        f'<text x="{left + pw / 2:.1f}" y="{SVG_H - 15}" text-anchor="middle" font-size="14">parameters N (log)</text>',
        f'<text x="18" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 18 {top + ph / 2:.1f})">validation loss (log)</text>',
    ]
    if not ok:
        out.append("</svg>")
        return "\n".join(out) + "\n"
    by_spec: dict[str, list] = {}
    for r in ok:
        by_spec.setdefault(r.spec, []).append(r)
    ln_n = np.log([r.n_params for r in ok])
    ln_l = np.log([r.val_loss for r in ok])
    curves = {}
    if fit is not None:
        for spec, recs in by_spec.items():
            est = fit.epm.get(spec)
            if est is None:
                continue
            ratio = float(np.median([r.tokens / r.n_params for r in recs]))
            grid = np.exp(np.linspace(ln_n.min(), ln_n.max(), 40))
            curves[spec] = (grid, predict_loss(fit.law, grid, ratio * grid, est.eff))
            ln_l = np.concatenate([ln_l, np.log(curves[spec][1])])
    x0, x1 = ln_n.min(), ln_n.max()
    y0, y1 = ln_l.min(), ln_l.max()
    x0, x1 = (x0 - 0.1, x1 + 0.1) if x1 - x0 < 1e-9 else (x0 - 0.05 * (x1 - x0), x1 + 0.05 * (x1 - x0))
    y0, y1 = (y0 - 0.05, y1 + 0.05) if y1 - y0 < 1e-9 else (y0 - 0.05 * (y1 - y0), y1 + 0.05 * (y1 - y0))

    def px(n):
        return left + (math.log(n) - x0) / (x1 - x0) * pw

    def py(loss):
        return top + (1 - (math.log(loss) - y0) / (y1 - y0)) * ph

    for k, spec in enumerate(sorted(by_spec)):
        color = _PALETTE[k % len(_PALETTE)]
        recs = sorted(by_spec[spec], key=lambda r: (r.n_params, r.tokens))
        pts = " ".join(f"{px(r.n_params):.2f},{py(r.val_loss):.2f}" for r in recs)
        out.append(f'<polyline class="observed" data-spec="{spec}" points="{pts}" fill="none" '
                   f'stroke="{color}" stroke-width="2"/>')
        for r in recs:
            out.append(f'<circle cx="{px(r.n_params):.2f}" cy="{py(r.val_loss):.2f}" r="3" fill="{color}"/>')
        if spec in curves:
            grid, pred = curves[spec]
            fpts = " ".join(f"{px(n):.2f},{py(v):.2f}" for n, v in zip(grid, pred))
            out.append(f'<polyline class="fitted" data-spec="{spec}" points="{fpts}" fill="none" '
                       f'stroke="{color}" stroke-width="1" stroke-dasharray="5,3"/>')
        ly = top + 18 + 18 * k
        out.append(f'<line x1="{left + pw - 150}" y1="{ly}" x2="{left + pw - 125}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 118}" y="{ly + 4}" font-size="12">{spec}</text>')
    for n_tick in (x0, x1):
        out.append(f'<text x="{px(math.exp(n_tick)):.2f}" y="{top + ph + 18}" text-anchor="middle" '
                   f'font-size="11">{math.exp(n_tick):.3g}</text>')
    for l_tick in (y0, y1):
        out.append(f'<text x="{left - 6}" y="{py(math.exp(l_tick)) + 4:.2f}" text-anchor="end" '
                   f'font-size="11">{math.exp(l_tick):.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(records: Sequence, fit: FitResult | None, out_dir) -> tuple[Path, Path]:
    """Write ``report.csv`` and ``loss_vs_n.svg`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = out / "report.csv", out / "loss_vs_n.svg"
    csv_path.write_text(render_csv(records, fit))
    svg_path.write_text(render_svg(records, fit))
    return csv_path, svg_path
