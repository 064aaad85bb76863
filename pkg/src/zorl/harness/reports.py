"""CSV series and static SVG charts.

CSV columns: ``iteration,loss_mean,loss_std,grad_norm_mean,variance_mean,queries``.
``loss_std`` is the population standard deviation across trials; an empty
``variance_mean`` cell means no probe ran at that iteration. Output bytes
depend only on the input series.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from ..errors import DataFormatError
from .experiment import TrialSeries

CSV_HEADER = ("iteration", "loss_mean", "loss_std", "grad_norm_mean", "variance_mean", "queries")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return "" if not math.isfinite(v) else repr(float(v))


def csv_name(task: str, update: str, algo: str) -> str:
    return f"{task}_{update}_{algo}.csv"


def write_csv(series: TrialSeries, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for k in range(len(series.iteration)):
            w.writerow(
                [
                    int(series.iteration[k]),
                    _fmt(series.loss_mean[k]),
                    _fmt(series.loss_std[k]),
                    _fmt(series.grad_norm_mean[k]),
                    _fmt(series.variance_mean[k]),
                    int(series.queries[k]),
                ]
            )


@dataclass
class CurveSet:
    """What a chart needs; readable back from the CSV files."""

    algo: str
    iteration: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    variance: np.ndarray


def read_csv(path: str | Path) -> CurveSet:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise DataFormatError(f"{path}: header does not match {','.join(CSV_HEADER)}")
    body = rows[1:]
    if not body:
        raise DataFormatError(f"{path}: no data rows")

    def col(i):
        return np.array([float(r[i]) if r[i] != "" else math.nan for r in body])

    try:
        algo = path.stem.rsplit("_", 2)[2]
        return CurveSet(algo, col(0), col(1), col(2), col(4))
    except (IndexError, ValueError) as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def curves_from_series(series: Mapping[str, TrialSeries]) -> list[CurveSet]:
    return [CurveSet(a, s.iteration, s.loss_mean, s.loss_std, s.variance_mean) for a, s in series.items()]


# ------------------------------------------------------------------ SVG


W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 150, 40, 50


def _scale(lo: float, hi: float, a: float, b: float):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def _pts(xs: Iterable[float], ys: Iterable[float]) -> str:
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))


def render_svg(curves: Sequence[CurveSet], title: str, ylabel: str, bands: bool = True, log_y: bool = True) -> str:
    """Line chart of ``mean`` per curve with optional ``mean +/- std`` bands."""
    if not curves:
        raise ValueError("nothing to plot")
    lows, highs = [], []
    for c in curves:
        lo = c.mean - c.std if bands else c.mean
        hi = c.mean + c.std if bands else c.mean
        lows.append(lo[np.isfinite(lo)])
        highs.append(hi[np.isfinite(hi)])
    lo_all = np.concatenate(lows) if lows else np.array([])
    hi_all = np.concatenate(highs) if highs else np.array([])
    means = np.concatenate([c.mean[np.isfinite(c.mean)] for c in curves])
    log_y = log_y and means.size > 0 and bool(np.all(means > 0))
    if log_y:
        floor = float(means.min()) * 0.5
        tf = lambda v: np.log10(np.maximum(v, floor))  # noqa: E731
    else:
        tf = lambda v: np.asarray(v, dtype=float)  # noqa: E731
    ys = np.concatenate([tf(lo_all), tf(hi_all), tf(means)]) if means.size else np.array([0.0, 1.0])
    ys = ys[np.isfinite(ys)]
    ymin, ymax = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    xmax = max(float(np.max(c.iteration)) for c in curves)
    sx = _scale(0.0, xmax, LEFT, W - RIGHT)
    sy = _scale(ymin, ymax, H - BOTTOM, TOP)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>',
        f'<line x1="{LEFT}" y1="{H - BOTTOM}" x2="{W - RIGHT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{H - BOTTOM}" stroke="black"/>',
    ]
    for t in np.linspace(0, xmax, 5):
        x = sx(t)
        out.append(f'<text x="{x:.2f}" y="{H - BOTTOM + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{t:g}</text>')
    for t in np.linspace(ymin, ymax, 5):
        label = f"1e{t:.1f}" if log_y else f"{t:.3g}"
        out.append(f'<text x="{LEFT - 6}" y="{sy(t) + 4:.2f}" text-anchor="end" font-family="sans-serif" font-size="11">{label}</text>')
    out.append(f'<text x="{(LEFT + W - RIGHT) / 2:.1f}" y="{H - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">iteration</text>')
    out.append(
        f'<text x="16" y="{(TOP + H - BOTTOM) / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {(TOP + H - BOTTOM) / 2:.1f})">{escape(ylabel)}</text>'
    )
    for i, c in enumerate(curves):
        color = PALETTE[i % len(PALETTE)]
        ok = np.isfinite(c.mean)
        it = c.iteration[ok]
        px = [sx(v) for v in it]
        if bands and np.any(ok):
            lo = tf(c.mean[ok] - c.std[ok])
            hi = tf(c.mean[ok] + c.std[ok])
            poly = _pts(px + px[::-1], [sy(v) for v in hi] + [sy(v) for v in lo[::-1]])
            out.append(f'<polygon points="{poly}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        if np.any(ok):
            out.append(
                f'<polyline points="{_pts(px, [sy(v) for v in tf(c.mean[ok])])}" fill="none" stroke="{color}" stroke-width="1.5"/>'
            )
        ly = TOP + 16 * i + 8
        out.append(f'<line x1="{W - RIGHT + 10}" y1="{ly}" x2="{W - RIGHT + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(
            f'<text x="{W - RIGHT + 35}" y="{ly + 4}" font-family="sans-serif" font-size="11">{escape(c.algo)}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_variance_svg(curves: Sequence[CurveSet], title: str) -> str:
    probed = []
    for c in curves:
        ok = np.isfinite(c.variance)
        if np.any(ok):
            probed.append(CurveSet(c.algo, c.iteration[ok], c.variance[ok], np.zeros(int(ok.sum())), c.variance[ok]))
    return render_svg(probed, title, "estimator variance", bands=False)


def emit_reports(series: Mapping[str, TrialSeries], outdir: str | Path, task: str, update: str) -> list[Path]:
    """Write one CSV per algorithm plus the loss chart (and variance chart when probed)."""
    if not series:
        raise ValueError("no series to report")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for algo, s in series.items():
        p = outdir / csv_name(task, update, algo)
        write_csv(s, p)
        written.append(p)
    written += write_charts(curves_from_series(series), outdir, task, update)
    return written


def write_charts(curves: Sequence[CurveSet], outdir: Path, task: str, update: str) -> list[Path]:
    # fixed order so colors agree between ``run`` and a later ``report``
    curves = sorted(curves, key=lambda c: c.algo)
    written = []
    p = outdir / f"{task}_{update}.svg"
    p.write_text(render_svg(curves, f"{task} / {update}", "loss (mean +/- std)"))
    written.append(p)
    if any(np.any(np.isfinite(c.variance)) for c in curves):
        p = outdir / f"{task}_{update}_variance.svg"
        p.write_text(render_variance_svg(curves, f"{task} / {update}: estimator variance"))
        written.append(p)
    return written


def report_directory(outdir: str | Path) -> list[Path]:
    """Re-render the charts for every ``<task>_<update>_<algo>.csv`` group in ``outdir``."""
    outdir = Path(outdir)
    if not outdir.is_dir():
        raise DataFormatError(f"{outdir} is not a directory")
    groups: dict[tuple[str, str], list[CurveSet]] = {}
    for p in sorted(outdir.glob("*.csv")):
        parts = p.stem.rsplit("_", 2)
        if len(parts) != 3:
            continue
        try:
            curve = read_csv(p)
        except DataFormatError:
            continue
        groups.setdefault((parts[0], parts[1]), []).append(curve)
    if not groups:
        raise DataFormatError(f"no result CSV files in {outdir}")
    written = []
    for (task, update), curves in sorted(groups.items()):
        written += write_charts(curves, outdir, task, update)
    return written
