"""SE(2) poses, rigid transforms, metric BEV grids and grid warping.

Conventions used throughout the package:
  * x is lateral (left positive), y is longitudinal (forward positive),
    phi is counterclockwise and stored wrapped to (-pi, pi].
  * Grid row index grows with -y, column index with +x; the grid origin
    pose is the pose of the grid center in the world frame.
  * ``warp_grid(g, theta)`` resamples so that output cell q reads the
    input at M_theta * q. Warping a rasterization taken at pose p by
    theta reproduces the rasterization taken at compose(p, theta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(phi: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = math.remainder(float(phi), TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


@dataclass(frozen=True)
class Pose2:
    """Planar pose (x, y, phi); phi is wrapped at construction."""

    x: float
    y: float
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "phi", wrap_angle(self.phi))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.phi], dtype=np.float64)


IDENTITY = Pose2(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Transform2:
    """3x3 homogeneous SE(2) matrix; validated at construction."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"expected 3x3 matrix, got {m.shape}")
        if not np.array_equal(m[2], [0.0, 0.0, 1.0]):
            raise ValueError("bottom row must be exactly (0, 0, 1)")
        r = m[:2, :2]
        if np.max(np.abs(r.T @ r - np.eye(2))) > 1e-9 or np.linalg.det(r) < 0.0:
            raise ValueError("upper-left block is not a proper rotation")
        object.__setattr__(self, "m", m)

    @property
    def angle(self) -> float:
        return math.atan2(self.m[1, 0], self.m[0, 0])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform an (N, 2) array of points."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.m[:2, :2].T + self.m[:2, 2]


def pose_to_matrix(p: Pose2) -> Transform2:
    c, s = math.cos(p.phi), math.sin(p.phi)
    return Transform2(np.array([[c, -s, p.x], [s, c, p.y], [0.0, 0.0, 1.0]]))


def matrix_to_pose(t: Transform2) -> Pose2:
    return Pose2(t.m[0, 2], t.m[1, 2], t.angle)


def compose(a: Pose2, b: Pose2) -> Pose2:
    """Pose such that pose_to_matrix(compose(a, b)) = M_a @ M_b."""
    ca, sa = math.cos(a.phi), math.sin(a.phi)
    return Pose2(
        a.x + ca * b.x - sa * b.y,
        a.y + sa * b.x + ca * b.y,
        a.phi + b.phi,
    )


def inverse(a: Pose2) -> Pose2:
    ca, sa = math.cos(a.phi), math.sin(a.phi)
    return Pose2(-(ca * a.x + sa * a.y), -(-sa * a.x + ca * a.y), -a.phi)


def alignment_error(t: Transform2, p0: Pose2, pgt: Pose2) -> float:
    """Squared alignment error of correcting p0 by t against pgt.

    The matrix acts on the position; the heading is corrected additively
    by the matrix rotation angle, and the angular residual is wrapped.
    """
    pos = t.m[:2, :2] @ np.array([p0.x, p0.y]) + t.m[:2, 2]
    dphi = wrap_angle(p0.phi + t.angle - pgt.phi)
    return float((pos[0] - pgt.x) ** 2 + (pos[1] - pgt.y) ** 2 + dphi**2)


@dataclass
class BevGrid:
    """Multi-channel metric grid; values has shape (H, W, C).

    ``valid`` is an optional (H, W) 0/1 mask produced by warping; None
    means every cell is valid.
    """

    values: np.ndarray
    resolution: float
    origin: Pose2
    valid: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise ValueError("values must be (H, W, C)")
        if not self.resolution > 0.0:
            raise ValueError("resolution must be positive")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def aligned_with(self, other: "BevGrid") -> bool:
        return (
            self.height == other.height
            and self.width == other.width
            and self.resolution == other.resolution
            and self.origin == other.origin
        )


def cell_centers_local(h: int, w: int, res: float):
    """Local metric (x, y) coordinates of every cell center, each (H, W)."""
    cols = np.arange(w, dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)
    x = (cols[None, :] - (w - 1) / 2.0) * res + np.zeros((h, 1))
    y = ((h - 1) / 2.0 - rows[:, None]) * res + np.zeros((1, w))
    return x, y


def local_to_cell(x, y, h: int, w: int, res: float):
    """Fractional (row, col) of local metric coordinates."""
    col = np.asarray(x) / res + (w - 1) / 2.0
    row = (h - 1) / 2.0 - np.asarray(y) / res
    return row, col


def _sample_coords(g: BevGrid, theta: Pose2):
    h, w = g.height, g.width
    px, py = cell_centers_local(h, w, g.resolution)
    c, s = math.cos(theta.phi), math.sin(theta.phi)
    sx = c * px - s * py + theta.x
    sy = s * px + c * py + theta.y
    return local_to_cell(sx, sy, h, w, g.resolution)


def warp_grid(g: BevGrid, theta: Pose2, interp: str = "bilinear") -> BevGrid:
    """Resample g so output cell q reads the input at M_theta * q.

    Out-of-bounds samples are filled with 0 and marked invalid in the
    returned grid's mask.
    """
    if not all(np.isfinite(v) for v in (theta.x, theta.y, theta.phi)):
        raise ValueError("non-finite warp pose")
    h, w = g.height, g.width
    row, col = _sample_coords(g, theta)
    vfield = g.valid if g.valid is not None else np.ones((h, w))

    if interp == "nearest":
        ri = np.rint(row).astype(np.int64)
        ci = np.rint(col).astype(np.int64)
        inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        ric = np.clip(ri, 0, h - 1)
        cic = np.clip(ci, 0, w - 1)
        out = g.values[ric, cic, :] * inside[:, :, None]
        mask = (vfield[ric, cic] * inside) > 0.5
    elif interp == "bilinear":
        out, vals = _bilinear_gather(g.values, vfield, row, col)
        mask = vals > 1.0 - 1e-9
        out = out * mask[:, :, None]
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    return BevGrid(out, g.resolution, g.origin, valid=mask.astype(np.float64))


def _bilinear_gather(values: np.ndarray, vfield: np.ndarray, row, col):
    """Bilinear sample of values and of the validity field at fractional
    (row, col); points outside the array sample validity 0 / value 0."""
    h, w = values.shape[:2]
    r0 = np.floor(row).astype(np.int64)
    c0 = np.floor(col).astype(np.int64)
    fr = row - r0
    fc = col - c0
    out = np.zeros(row.shape + (values.shape[2],), dtype=values.dtype)
    val = np.zeros(row.shape, dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = r0 + dr
            cc = c0 + dc
            wgt = wr * wc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            rrc = np.clip(rr, 0, h - 1)
            ccc = np.clip(cc, 0, w - 1)
            out += (wgt * ok)[..., None] * values[rrc, ccc, :]
            val += wgt * ok * vfield[rrc, ccc]
    return out, val


def warp_jacobian_theta(g: BevGrid, theta: Pose2) -> np.ndarray:
    """Analytic Jacobian of bilinear-warped values w.r.t. (x, y, phi).

    Returns (H, W, C, 3). Valid away from cell boundaries; cells whose
    sample point leaves the grid get a zero row.
    """
    h, w = g.height, g.width
    px, py = cell_centers_local(h, w, g.resolution)
    c, s = math.cos(theta.phi), math.sin(theta.phi)
    row, col = _sample_coords(g, theta)
    res = g.resolution

    # d(sample xy) / d(theta): columns are d/dx, d/dy, d/dphi
    dsx = np.stack([np.ones_like(px), np.zeros_like(px), -s * px - c * py], axis=-1)
    dsy = np.stack([np.zeros_like(px), np.ones_like(px), c * px - s * py], axis=-1)
    dcol = dsx / res
    drow = -dsy / res

    r0 = np.floor(row).astype(np.int64)
    c0 = np.floor(col).astype(np.int64)
    fr = row - r0
    fc = col - c0
    inside = (row >= 0) & (row <= h - 1) & (col >= 0) & (col <= w - 1)
    r0c = np.clip(r0, 0, h - 2)
    c0c = np.clip(c0, 0, w - 2)
    fr = np.where(inside, row - r0c, 0.0)
    fc = np.where(inside, col - c0c, 0.0)

    g00 = g.values[r0c, c0c, :]
    g01 = g.values[r0c, c0c + 1, :]
    g10 = g.values[r0c + 1, c0c, :]
    g11 = g.values[r0c + 1, c0c + 1, :]
    dv_drow = (1 - fc)[..., None] * (g10 - g00) + fc[..., None] * (g11 - g01)
    dv_dcol = (1 - fr)[..., None] * (g01 - g00) + fr[..., None] * (g11 - g10)

    jac = dv_drow[..., None] * drow[:, :, None, :] + dv_dcol[..., None] * dcol[:, :, None, :]
    return jac * inside[:, :, None, None]
