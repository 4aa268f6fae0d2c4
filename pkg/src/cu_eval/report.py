"""Output files: estimates CSV/JSON, Monte Carlo report CSV, diagnostics and the forest plot.

The forest plot is rendered from the estimates CSV alone, so deleting the
SVG and re-rendering reproduces it byte for byte.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence
from xml.sax.saxutils import escape

ESTIMATE_FIELDS = ("comparator", "a", "b", "estimator", "estimate", "ci_method", "level",
                   "lower", "upper", "se", "n", "replicates", "failed")
REPORT_FIELDS = ("setting", "n", "estimator", "ci_method", "truth", "n_ok", "n_failed",
                 "ci_failed", "mean_estimate", "bias", "se", "coverage", "mean_width",
                 "mean_se_estimate", "mc_se_bias", "mc_se_se", "mc_se_coverage",
                 "B_x100", "SE_x10", "Co")
DIAGNOSTIC_FIELDS = ("regime", "estimator", "status", "concordance_rate", "min_propensity",
                     "n_capped", "row", "propensity", "message")


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _write_rows(path: str | Path, fields: Sequence[str], rows: Iterable[Mapping]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore",
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fields})


def write_json(obj: Any, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


# -- estimates ---------------------------------------------------------------------

def estimate_rows(utilities) -> list[dict]:
    """One row per (comparator, estimator, CI method); a point-only row if no CI."""
    rows = []
    for u in utilities:
        base = {"comparator": u.comparator, "a": u.a, "b": u.b, "estimator": u.estimator,
                "estimate": u.value, "n": u.n}
        if not u.intervals:
            rows.append(dict(base))
        for ci in u.intervals:
            rows.append({**base, "ci_method": ci.method, "level": ci.level,
                         "lower": ci.lower, "upper": ci.upper, "se": ci.se,
                         "replicates": ci.replicates, "failed": ci.failed})
    return rows


def write_estimates_csv(rows: Sequence[Mapping], path: str | Path) -> None:
    _write_rows(path, ESTIMATE_FIELDS, rows)


def read_estimates_csv(path: str | Path) -> list[dict]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            row: dict[str, Any] = dict(r)
            for k in ("estimate", "level", "lower", "upper", "se"):
                row[k] = float(r[k]) if r.get(k) else math.nan
            out.append(row)
    return out


def write_report_csv(rows: Sequence[Mapping], path: str | Path) -> None:
    _write_rows(path, REPORT_FIELDS, rows)


def write_diagnostics_csv(rows: Sequence[Mapping], path: str | Path) -> None:
    _write_rows(path, DIAGNOSTIC_FIELDS, rows)


def format_table(rows: Sequence[Mapping], sign: float = 1.0) -> str:
    """Plain-text view of estimate rows; ``sign=-1`` shows improvements."""
    lines = [f"{'comparator':<24}{'estimator':<10}{'estimate':>10}  {'interval':<24}method"]
    for r in rows:
        est = sign * float(r["estimate"])
        lo, hi = r.get("lower"), r.get("upper")
        if lo is None or (isinstance(lo, float) and math.isnan(lo)) or lo == "":
            iv = ""
        else:
            lo, hi = sorted((sign * float(lo), sign * float(hi)))
            iv = f"[{lo:.4f}, {hi:.4f}]"
        lines.append(f"{r['comparator']:<24}{r['estimator']:<10}{est:>10.4f}  {iv:<24}"
                     f"{r.get('ci_method') or ''}")
    return "\n".join(lines)


# -- forest plot ------------------------------------------------------------------

ROW_H = 22
LEFT = 260
PLOT_W = 420
TOP = 40


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    span = hi - lo
    raw = span / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-12:
        ticks.append(round(v, 10))
        v += step
    return ticks


def render_forest(rows: Sequence[Mapping], improvement: bool = False,
                  title: str = "Clinical utility") -> str:
    """SVG forest plot: one line per (comparator, estimator, CI method), grouped by estimator."""
    sign = -1.0 if improvement else 1.0
    items = []
    for r in sorted(rows, key=lambda r: (r["estimator"], r["comparator"], r.get("ci_method") or "")):
        est = sign * float(r["estimate"])
        lo, hi = float(r.get("lower", math.nan)), float(r.get("upper", math.nan))
        if not math.isnan(lo):
            lo, hi = sorted((sign * lo, sign * hi))
        items.append((r["estimator"], r["comparator"], r.get("ci_method") or "", est, lo, hi))
    finite = [v for it in items for v in it[3:] if not math.isnan(v)] + [0.0]
    vmin, vmax = min(finite), max(finite)
    pad = 0.05 * (vmax - vmin) if vmax > vmin else 0.05
    vmin, vmax = vmin - pad, vmax + pad

    def x(v: float) -> float:
        return LEFT + (v - vmin) / (vmax - vmin) * PLOT_W

    groups: list[str] = []
    for it in items:
        if it[0] not in groups:
            groups.append(it[0])
    n_lines = len(items) + len(groups)
    height = TOP + n_lines * ROW_H + 50
    width = LEFT + PLOT_W + 40
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">'
           f'{escape(title + (" (improvement)" if improvement else ""))}</text>']
    y = TOP
    for g in groups:
        out.append(f'<text x="10" y="{y + 15}" font-weight="bold">{escape(g)}</text>')
        y += ROW_H
        for est_id, comp, method, est, lo, hi in (it for it in items if it[0] == g):
            cy = y + ROW_H / 2
            label = f"{comp}" + (f" ({method})" if method else "")
            out.append(f'<text x="20" y="{cy + 4:.1f}">{escape(label)}</text>')
            if not math.isnan(lo):
                out.append(f'<line x1="{x(lo):.2f}" y1="{cy:.1f}" x2="{x(hi):.2f}" y2="{cy:.1f}" '
                           f'stroke="black" stroke-width="1.5"/>')
                for v in (lo, hi):
                    out.append(f'<line x1="{x(v):.2f}" y1="{cy - 4:.1f}" x2="{x(v):.2f}" '
                               f'y2="{cy + 4:.1f}" stroke="black"/>')
            out.append(f'<rect x="{x(est) - 3:.2f}" y="{cy - 3:.1f}" width="6" height="6" '
                       f'fill="{"#1f4e9a" if method.startswith("boot") else "#b03a2e"}"/>')
            y += ROW_H
    axis_y = y + 5
    out.append(f'<line x1="{x(0.0):.2f}" y1="{TOP}" x2="{x(0.0):.2f}" y2="{axis_y}" '
               f'stroke="grey" stroke-dasharray="4,3"/>')
    out.append(f'<line x1="{LEFT}" y1="{axis_y}" x2="{LEFT + PLOT_W}" y2="{axis_y}" stroke="black"/>')
    for t in _nice_ticks(vmin, vmax):
        out.append(f'<line x1="{x(t):.2f}" y1="{axis_y}" x2="{x(t):.2f}" y2="{axis_y + 4}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{x(t):.2f}" y="{axis_y + 17}" text-anchor="middle">{t:g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_forest(csv_path: str | Path, svg_path: str | Path, improvement: bool = False) -> None:
    rows = read_estimates_csv(csv_path)
    Path(svg_path).write_text(render_forest(rows, improvement), encoding="utf-8")
