"""Scan reports: linear fits, CSV tables and standalone SVG plots."""

from __future__ import annotations

import csv
import html
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    slope_ci95: float
    r2: float
    max_residual: float
    n: int

    @classmethod
    def fit(cls, x: Sequence[float], y: Sequence[float]) -> "LinearFit":
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if len(x) < 2:
            raise ValueError("need at least two points for a linear fit")
        if np.ptp(x) == 0:
            raise ValueError("x values are all identical")
        res = stats.linregress(x, y)
        resid = y - (res.slope * x + res.intercept)
        ci = float(stats.t.ppf(0.975, len(x) - 2) * res.stderr) if len(x) > 2 else math.nan
        sst = float(np.sum((y - y.mean()) ** 2))
        r2 = 1.0 - float(np.sum(resid**2)) / sst if sst > 0 else 1.0
        return cls(float(res.slope), float(res.intercept), ci, r2, float(np.max(np.abs(resid))), len(x))

    def to_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("slope", "intercept", "slope_ci95", "r2", "max_residual", "n")}


@dataclass
class AffineFit:
    """impact = A @ start + b, least squares over a set of particles."""

    A: np.ndarray
    b: np.ndarray
    residuals: np.ndarray  # (n, 2)

    @classmethod
    def fit(cls, starts: np.ndarray, impacts: np.ndarray) -> "AffineFit":
        starts = np.asarray(starts, dtype=float)[:, :2]
        impacts = np.asarray(impacts, dtype=float)[:, :2]
        if len(starts) < 3:
            raise ValueError("an affine fit needs at least three points")
        G = np.hstack([starts, np.ones((len(starts), 1))])
        coef, *_ = np.linalg.lstsq(G, impacts, rcond=None)
        A = coef[:2].T
        b = coef[2]
        return cls(A, b, impacts - G @ coef)

    @property
    def magnification(self) -> float:
        return float(np.mean(np.linalg.svd(self.A, compute_uv=False)))

    @property
    def m_x(self) -> float:
        return float(np.linalg.norm(self.A[:, 0]))

    @property
    def m_y(self) -> float:
        return float(np.linalg.norm(self.A[:, 1]))

    def max_residual(self) -> float:
        return float(np.max(np.linalg.norm(self.residuals, axis=1))) if len(self.residuals) else 0.0


@dataclass
class ImagingReport:
    """Rows of per-cell results plus summary numbers for one characterization scan."""

    scan: str
    columns: dict[str, np.ndarray]
    summary: dict[str, Any] = field(default_factory=dict)
    fits: dict[str, LinearFit] = field(default_factory=dict)
    polygon: np.ndarray | None = None
    config: dict[str, Any] = field(default_factory=dict)
    svg: str | None = None

    def column(self, name: str) -> np.ndarray:
        return self.columns[name]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = list(self.columns)
        w.writerow(names)
        n = len(next(iter(self.columns.values()))) if self.columns else 0
        for i in range(n):
            w.writerow([_fmt(self.columns[c][i]) for c in names])
        return buf.getvalue()

    def summary_dict(self) -> dict[str, Any]:
        out = {"scan": self.scan, **{k: _jsonable(v) for k, v in self.summary.items()}}
        out["fits"] = {k: f.to_dict() for k, f in self.fits.items()}
        if self.polygon is not None:
            out["polygon_m"] = self.polygon.tolist()
        return out

    def summary_json(self) -> str:
        return json.dumps(self.summary_dict(), indent=2, sort_keys=True)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

_W, _H, _PAD = 480, 360, 60


def _viridis(t: float) -> str:
    # coarse viridis ramp, enough for a heatmap without a plotting library
    stops = [(68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37)]
    if not math.isfinite(t):
        return "#cccccc"
    t = min(max(t, 0.0), 1.0) * (len(stops) - 1)
    i = min(int(t), len(stops) - 2)
    f = t - i
    c = [round(stops[i][k] + f * (stops[i + 1][k] - stops[i][k])) for k in range(3)]
    return "#%02x%02x%02x" % tuple(c)


def _data_comment(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, default=_jsonable).replace("--", "- -")
    return f"<!-- data: {text} -->"


def heatmap_svg(x: Sequence[float], y: Sequence[float], z: np.ndarray, title: str, xlabel: str, ylabel: str) -> str:
    """z has shape (len(x), len(y)); NaN cells are drawn grey."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    finite = z[np.isfinite(z)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    cw = (_W - 2 * _PAD) / max(len(x), 1)
    ch = (_H - 2 * _PAD) / max(len(y), 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" font-family="sans-serif" font-size="11">',
        _data_comment({"x": x.tolist(), "y": y.tolist(), "z": np.where(np.isfinite(z), z, None).tolist()}),
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="13">{html.escape(title)}</text>',
    ]
    for i in range(len(x)):
        for j in range(len(y)):
            px = _PAD + i * cw
            py = _H - _PAD - (j + 1) * ch
            parts.append(
                f'<rect x="{px:.2f}" y="{py:.2f}" width="{cw:.2f}" height="{ch:.2f}" '
                f'fill="{_viridis((z[i, j] - lo) / span)}"/>'
            )
    parts.append(f'<text x="{_W / 2}" y="{_H - 15}" text-anchor="middle">{html.escape(xlabel)}</text>')
    parts.append(
        f'<text x="15" y="{_H / 2}" text-anchor="middle" transform="rotate(-90 15 {_H / 2})">{html.escape(ylabel)}</text>'
    )
    parts.append(f'<text x="{_W - _PAD}" y="{_PAD - 10}" text-anchor="end">range {lo:.4g} .. {hi:.4g}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def curve_svg(x: Sequence[float], series: dict[str, Sequence[float]], title: str, xlabel: str, ylabel: str) -> str:
    x = np.asarray(x, dtype=float)
    ys = {k: np.asarray(v, dtype=float) for k, v in series.items()}
    allv = np.concatenate([v[np.isfinite(v)] for v in ys.values()]) if ys else np.zeros(1)
    lo, hi = (float(allv.min()), float(allv.max())) if allv.size else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    xlo, xhi = (float(x.min()), float(x.max())) if x.size else (0.0, 1.0)
    if xhi <= xlo:
        xhi = xlo + 1.0

    def px(v):
        return _PAD + (v - xlo) / (xhi - xlo) * (_W - 2 * _PAD)

    def py(v):
        return _H - _PAD - (v - lo) / (hi - lo) * (_H - 2 * _PAD)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" font-family="sans-serif" font-size="11">',
        _data_comment({"x": x.tolist(), **{k: np.where(np.isfinite(v), v, None).tolist() for k, v in ys.items()}}),
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="13">{html.escape(title)}</text>',
        f'<rect x="{_PAD}" y="{_PAD}" width="{_W - 2 * _PAD}" height="{_H - 2 * _PAD}" fill="none" stroke="#444"/>',
    ]
    for n, (name, v) in enumerate(ys.items()):
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, v) if math.isfinite(b))
        col = colors[n % len(colors)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="1.5"/>')
        parts.append(f'<text x="{_W - _PAD - 5}" y="{_PAD + 15 + 14 * n}" text-anchor="end" fill="{col}">{html.escape(name)}</text>')
    parts.append(f'<text x="{_W / 2}" y="{_H - 15}" text-anchor="middle">{html.escape(xlabel)}</text>')
    parts.append(
        f'<text x="15" y="{_H / 2}" text-anchor="middle" transform="rotate(-90 15 {_H / 2})">{html.escape(ylabel)}</text>'
    )
    parts.append(f'<text x="{_PAD}" y="{_H - _PAD + 14}">{xlo:.4g}</text>')
    parts.append(f'<text x="{_W - _PAD}" y="{_H - _PAD + 14}" text-anchor="end">{xhi:.4g}</text>')
    parts.append(f'<text x="{_PAD - 4}" y="{_H - _PAD}" text-anchor="end">{lo:.4g}</text>')
    parts.append(f'<text x="{_PAD - 4}" y="{_PAD + 4}" text-anchor="end">{hi:.4g}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def scatter_svg(points: dict[str, np.ndarray], title: str, xlabel: str, ylabel: str) -> str:
    allp = np.vstack([p for p in points.values() if len(p)]) if points else np.zeros((1, 2))
    lo = allp.min(axis=0)
    hi = allp.max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-12))
    cx, cy = (lo + hi) / 2
    size = min(_W, _H) - 2 * _PAD

    def tr(p):
        return _W / 2 + (p[0] - cx) / span * size, _H / 2 - (p[1] - cy) / span * size

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" font-family="sans-serif" font-size="11">',
        _data_comment({k: np.asarray(v).tolist() for k, v in points.items()}),
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="13">{html.escape(title)}</text>',
    ]
    for n, (name, pts) in enumerate(points.items()):
        col = colors[n % len(colors)]
        for p in pts:
            a, b = tr(p)
            parts.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2.5" fill="{col}"/>')
        parts.append(f'<text x="{_W - 10}" y="{40 + 14 * n}" text-anchor="end" fill="{col}">{html.escape(name)}</text>')
    parts.append(f'<text x="{_W / 2}" y="{_H - 15}" text-anchor="middle">{html.escape(xlabel)}</text>')
    parts.append(
        f'<text x="15" y="{_H / 2}" text-anchor="middle" transform="rotate(-90 15 {_H / 2})">{html.escape(ylabel)}</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts)


def principal_axis_angle(points: np.ndarray) -> float:
    """Orientation (radians, in (-pi/2, pi/2]) of the dominant axis of a 2-D point set."""
    p = np.asarray(points, dtype=float)[:, :2]
    p = p - p.mean(axis=0)
    _, _, vt = np.linalg.svd(p, full_matrices=False)
    ang = math.atan2(vt[0, 1], vt[0, 0])
    if ang <= -math.pi / 2:
        ang += math.pi
    elif ang > math.pi / 2:
        ang -= math.pi
    return ang


def rotation_angle(reference: np.ndarray, image: np.ndarray) -> float:
    """Best-fit rotation (radians) taking centred ``reference`` onto centred ``image``."""
    a = np.asarray(reference, dtype=float)[:, :2]
    b = np.asarray(image, dtype=float)[:, :2]
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    num = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    den = float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    return math.atan2(num, den)
