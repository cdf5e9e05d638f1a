"""Benchmark metrics: per-axis MAE/RMSE, recall tables, uncertainty-error
rank correlation, and grayscale heatmap emission.

Lateral/longitudinal residuals are expressed in the ground-truth ego
frame (the world residual rotated by -phi_gt).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .geometry import Pose2, wrap_angle

RECALL_THRESHOLDS_M = (1.0, 3.0, 5.0)
RECALL_THRESHOLDS_DEG = (1.0, 3.0, 5.0)


@dataclass
class FrameRecord:
    """One evaluated frame: world estimate, ground truth and the per-DoF
    localization uncertainties that accompanied the estimate."""

    est: Pose2
    gt: Pose2
    u: tuple = (0.0, 0.0, 0.0)  # (U_x, U_y, U_phi) nats
    u_decoder: tuple | None = None

    def errors(self):
        """(lateral m, longitudinal m, orientation deg) in the gt ego frame."""
        dx = self.est.x - self.gt.x
        dy = self.est.y - self.gt.y
        c, s = math.cos(-self.gt.phi), math.sin(-self.gt.phi)
        e_lat = c * dx - s * dy
        e_lon = s * dx + c * dy
        e_ori = math.degrees(wrap_angle(self.est.phi - self.gt.phi))
        return e_lat, e_lon, e_ori


@dataclass
class MetricsReport:
    n: int
    mae: dict
    rmse: dict
    recall_lateral: dict
    recall_longitudinal: dict
    recall_orientation: dict
    recall_position: dict
    spearman: dict
    spearman_flags: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"frames {self.n}"]
        for axis in ("lateral", "longitudinal", "orientation"):
            unit = "deg" if axis == "orientation" else "m"
            lines.append(
                f"{axis:<13s} mae {_fmt(self.mae[axis])} {unit}   "
                f"rmse {_fmt(self.rmse[axis])} {unit}   "
                f"spearman_u_err {_fmt(self.spearman[axis])}"
            )
        for name, table, unit in (
            ("recall_lateral", self.recall_lateral, "m"),
            ("recall_longitudinal", self.recall_longitudinal, "m"),
            ("recall_orientation", self.recall_orientation, "deg"),
            ("recall_position", self.recall_position, "m"),
        ):
            cells = "  ".join(f"@{t:g}{unit} {_fmt(v)}" for t, v in sorted(table.items()))
            lines.append(f"{name:<20s} {cells}")
        return "\n".join(lines)


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def _spearman(u: np.ndarray, e: np.ndarray):
    if np.all(u == u[0]) or np.all(e == e[0]):
        return 0.0, True
    rho = stats.spearmanr(u, e).statistic
    if not np.isfinite(rho):
        return 0.0, True
    return float(rho), False


def compute_metrics(records: list) -> MetricsReport:
    """Aggregate per-axis errors, recalls and uncertainty-error Spearman
    correlations over evaluated frames."""
    if not records:
        raise ValueError("compute_metrics requires at least one record")
    errs = np.array([r.errors() for r in records])  # (n, 3): lat m, lon m, ori deg
    u = np.array([r.u for r in records])
    abs_errs = np.abs(errs)
    axes = ("lateral", "longitudinal", "orientation")
    mae = {a: float(abs_errs[:, i].mean()) for i, a in enumerate(axes)}
    rmse = {a: float(np.sqrt((errs[:, i] ** 2).mean())) for i, a in enumerate(axes)}
    pos_err = np.hypot(errs[:, 0], errs[:, 1])

    recall = lambda vals, ths: {t: float((vals <= t).mean()) for t in ths}
    spearman, flags = {}, {}
    for i, a in enumerate(axes):
        spearman[a], flags[a] = _spearman(u[:, i], abs_errs[:, i])

    return MetricsReport(
        n=len(records),
        mae=mae,
        rmse=rmse,
        recall_lateral=recall(abs_errs[:, 0], RECALL_THRESHOLDS_M),
        recall_longitudinal=recall(abs_errs[:, 1], RECALL_THRESHOLDS_M),
        recall_orientation=recall(abs_errs[:, 2], RECALL_THRESHOLDS_DEG),
        recall_position=recall(pos_err, RECALL_THRESHOLDS_M),
        spearman=spearman,
        spearman_flags=flags,
    )


def frames_csv(records: list) -> str:
    """Per-frame table: errors and uncertainties per axis."""
    lines = ["frame,E_x,E_y,E_phi,U_x,U_y,U_phi"]
    for i, r in enumerate(records):
        e = r.errors()
        lines.append(
            f"{i},{_fmt(e[0])},{_fmt(e[1])},{_fmt(e[2])},"
            f"{_fmt(r.u[0])},{_fmt(r.u[1])},{_fmt(r.u[2])}"
        )
    return "\n".join(lines) + "\n"


def emit_heatmap(field2d, path) -> bool:
    """Min-max normalized grayscale PGM (plain P2). A constant field maps to
    mid-gray and is flagged with a warning; returns True when degenerate."""
    arr = np.asarray(field2d, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("heatmap expects a 2-D field")
    if not np.all(np.isfinite(arr)):
        raise ValueError("heatmap field must be finite")
    lo, hi = arr.min(), arr.max()
    degenerate = hi - lo <= 0.0
    if degenerate:
        warnings.warn("emit_heatmap: constant field, writing mid-gray")
        pix = np.full(arr.shape, 128, dtype=np.int64)
    else:
        pix = np.rint((arr - lo) / (hi - lo) * 255.0).astype(np.int64)
    h, w = arr.shape
    rows = [" ".join(str(v) for v in row) for row in pix]
    body = "\n".join(rows)
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(f"P2\n{w} {h}\n255\n{body}\n")
    return degenerate
