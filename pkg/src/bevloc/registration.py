"""Pose decoding, solution-space search and soft pose refinement.

The decoder pools the uncertainty-aware association matrix into per-cell
match statistics and regresses independent per-DoF probability vectors;
their Shannon entropies are the localization uncertainties. A discretized
SE(2) solution space around the coarse pose is scored by warping the
visual features to every candidate and averaging the per-cell feature
distance against the map features. The candidate prior (outer product of
the marginals) gates the cost, and the refined pose is the softmax-
weighted candidate average with the angle fused by a circular mean.

Softmax sign: the paper-form expression scores candidates as cost plus
gamma-weighted prior, but a cost must be minimized while prior
probability is maximized, so the weights here are softmax(-C + gamma *
prior). `paper_sign=True` switches to the literal reading.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import ParamSet
from .encoding import FeatureGrid
from .geometry import Pose2, wrap_angle

try:  # hot kernels; a pure-numpy fallback keeps the module importable anywhere
    from numba import njit

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(f):
            return f

        return deco if not (args and callable(args[0])) else args[0]


# --------------------------------------------------------------------------
# belief over the alignment offset
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BeliefGrid:
    """Bin layout for one DoF; centers are midpoint-anchored."""

    lo: float
    hi: float
    n: int

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.n

    @property
    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.n) + 0.5) * self.width


@dataclass(frozen=True)
class BeliefConfig:
    x: BeliefGrid = BeliefGrid(-2.5, 2.5, 20)
    y: BeliefGrid = BeliefGrid(-2.5, 2.5, 20)
    phi: BeliefGrid = BeliefGrid(-math.radians(2.5), math.radians(2.5), 10)


@dataclass
class PoseBelief:
    """Per-DoF probability vectors with their entropies (nats)."""

    px: Tensor
    py: Tensor
    pphi: Tensor
    centers_x: np.ndarray
    centers_y: np.ndarray
    centers_phi: np.ndarray
    u_x: float = field(init=False)
    u_y: float = field(init=False)
    u_phi: float = field(init=False)

    def __post_init__(self):
        self.u_x = ad.entropy(self.px).item()
        self.u_y = ad.entropy(self.py).item()
        self.u_phi = ad.entropy(self.pphi).item()

    @property
    def entropies(self):
        return (self.u_x, self.u_y, self.u_phi)

    def bin_widths(self):
        return (
            float(self.centers_x[1] - self.centers_x[0]) if len(self.centers_x) > 1 else 0.0,
            float(self.centers_y[1] - self.centers_y[0]) if len(self.centers_y) > 1 else 0.0,
            float(self.centers_phi[1] - self.centers_phi[0]) if len(self.centers_phi) > 1 else 0.0,
        )


def uniform_belief(cfg: BeliefConfig) -> PoseBelief:
    return PoseBelief(
        ad.tensor(np.full(cfg.x.n, 1.0 / cfg.x.n)),
        ad.tensor(np.full(cfg.y.n, 1.0 / cfg.y.n)),
        ad.tensor(np.full(cfg.phi.n, 1.0 / cfg.phi.n)),
        cfg.x.centers,
        cfg.y.centers,
        cfg.phi.centers,
    )


def init_decoder_params(params: ParamSet, rng, n_cells: int, cfg: BeliefConfig):
    """Linear heads start at zero (uniform marginals); the coarse-residual
    MLP output layer starts at zero (pure expectation)."""
    feat = 4 * n_cells
    for name, n in (("x", cfg.x.n), ("y", cfg.y.n), ("phi", cfg.phi.n)):
        params.add(f"dec.head_{name}", np.zeros((feat, n)))
        params.add(f"dec.head_{name}_b", np.zeros(n))
    n_total = cfg.x.n + cfg.y.n + cfg.phi.n
    params.add("dec.mlp_w1", rng.normal(0.0, 0.3, (n_total, 16)))
    params.add("dec.mlp_b1", np.zeros(16))
    params.add("dec.mlp_w2", np.zeros((16, 3)))
    params.add("dec.mlp_b2", np.zeros(3))


def init_registration_params(params: ParamSet, cost_scale: float = 80.0, phi_smooth: float = 0.25):
    """lam starts negative so a confident prior lowers cost; the smoothing
    kernel starts as a scaled identity with optional averaging along the
    rotation axis (raster noise is largest there)."""
    params.add("reg.lam", np.array(-1.0))
    conv = np.zeros((3, 3, 3))
    conv[1, 1, 1] = cost_scale * (1.0 - 2.0 * phi_smooth)
    conv[1, 1, 0] = conv[1, 1, 2] = cost_scale * phi_smooth
    params.add("reg.conv", conv)


def decode_marginals(s_uncert, params: ParamSet, cfg: BeliefConfig) -> PoseBelief:
    """Pool the association matrix into four per-cell maps (row max, row
    entropy, expected map offset in x and y), then regress per-DoF logits
    with linear heads and softmax each."""
    s = s_uncert.values
    hv, wv = s_uncert.vis_shape
    hm, wm = s_uncert.map_shape
    p_rows = ad.softmax(s, axis=1)
    # peak probability rather than the raw score keeps the pooled map
    # bounded in [0, 1] regardless of the learned similarity sharpness
    m_max = p_rows.max(axis=1)
    ent = -(p_rows * p_rows.safe_log()).sum(axis=1) / math.log(hm * wm)

    map_r = np.repeat(np.arange(hm, dtype=np.float64), wm)
    map_c = np.tile(np.arange(wm, dtype=np.float64), hm)
    vis_r = np.repeat(np.arange(hv, dtype=np.float64), wv)
    vis_c = np.tile(np.arange(wv, dtype=np.float64), hv)
    e_r = ad.matmul(p_rows, ad.tensor(map_r))
    e_c = ad.matmul(p_rows, ad.tensor(map_c))
    d_row = (e_r - ad.tensor(vis_r)) / float(hm)
    d_col = (e_c - ad.tensor(vis_c)) / float(wm)

    feats = ad.concatenate([m_max, ent, d_col, d_row], axis=0)
    # unit-scale the pooled vector so head updates are insensitive to the
    # number of grid cells
    feats = feats * (1.0 / math.sqrt(feats.size))
    out = []
    for name in ("x", "y", "phi"):
        logits = ad.matmul(feats, params[f"dec.head_{name}"]) + params[f"dec.head_{name}_b"]
        out.append(ad.softmax(logits, axis=0))
    return PoseBelief(out[0], out[1], out[2], cfg.x.centers, cfg.y.centers, cfg.phi.centers)


def marginal_target(gt_value: float, grid: BeliefGrid, sigma_bins: float = 1.0):
    """Discretized Gaussian supervision over bin centers; a ground truth
    outside the range is clamped to the edge bin and flagged."""
    centers = grid.centers
    clamped = bool(gt_value < grid.lo or gt_value > grid.hi)
    g = min(max(gt_value, grid.lo), grid.hi)
    if sigma_bins <= 0:
        vec = np.zeros(grid.n)
        vec[int(np.argmin(np.abs(centers - g)))] = 1.0
        return vec, clamped
    z = -((centers - g) ** 2) / (2.0 * (sigma_bins * grid.width) ** 2)
    z -= z.max()
    vec = np.exp(z)
    return vec / vec.sum(), clamped


def marginal_cross_entropy(p: Tensor, target: np.ndarray) -> Tensor:
    return -(ad.tensor(target) * p.safe_log()).sum()


def coarse_pose(belief: PoseBelief, params: ParamSet):
    """Expectation over bin centers plus a learnable residual correction.

    Returns (Pose2, Tensor of shape (3,)). With a zeroed MLP the output is
    exactly the per-DoF expectation.
    """
    bx = (belief.px * ad.tensor(belief.centers_x)).sum()
    by = (belief.py * ad.tensor(belief.centers_y)).sum()
    bp = (belief.pphi * ad.tensor(belief.centers_phi)).sum()
    base = ad.stack([bx, by, bp])
    marg = ad.concatenate([belief.px, belief.py, belief.pphi], axis=0)
    hidden = (ad.matmul(marg, params["dec.mlp_w1"]) + params["dec.mlp_b1"]).tanh()
    resid = ad.matmul(hidden, params["dec.mlp_w2"]) + params["dec.mlp_b2"]
    vec = base + resid
    return Pose2(vec.data[0], vec.data[1], vec.data[2]), vec


@dataclass
class JointPrior:
    """Outer-product candidate prior over (x, y, phi) bins. The optional
    axis centers carry the bins' absolute positions so the prior can be
    re-aligned onto a solution-space lattice built around a nonzero
    coarse pose."""

    tensor: Tensor
    centers_x: np.ndarray | None = None
    centers_y: np.ndarray | None = None
    centers_phi: np.ndarray | None = None

    @property
    def shape(self):
        return self.tensor.shape


def joint_prior(belief: PoseBelief) -> JointPrior:
    nx, ny, nphi = belief.px.size, belief.py.size, belief.pphi.size
    t = (
        belief.px.reshape(nx, 1, 1)
        * belief.py.reshape(1, ny, 1)
        * belief.pphi.reshape(1, 1, nphi)
    )
    return JointPrior(t, belief.centers_x, belief.centers_y, belief.centers_phi)


# --------------------------------------------------------------------------
# solution space
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SolutionSpaceConfig:
    half_x: float = 2.5
    half_y: float = 2.5
    half_phi_deg: float = 2.5
    nx: int = 20
    ny: int = 20
    nphi: int = 10
    snap_center_to_cells: bool = True


@dataclass
class SolutionSpace:
    """Corner-anchored candidate lattice: axis value i is
    center - half + i * (2 * half / count)."""

    center: Pose2
    half_x: float
    half_y: float
    half_phi: float
    offsets_x: np.ndarray
    offsets_y: np.ndarray
    offsets_phi: np.ndarray

    @property
    def counts(self):
        return (len(self.offsets_x), len(self.offsets_y), len(self.offsets_phi))

    @property
    def deltas(self):
        return (
            2.0 * self.half_x / len(self.offsets_x),
            2.0 * self.half_y / len(self.offsets_y),
            2.0 * self.half_phi / len(self.offsets_phi),
        )

    def candidate(self, i: int, j: int, k: int) -> Pose2:
        return Pose2(self.offsets_x[i], self.offsets_y[j], self.offsets_phi[k])


def build_solution_space(
    center: Pose2, cfg: SolutionSpaceConfig, res: float | None = None
) -> SolutionSpace:
    """Snapping quantizes the center onto the cell/angle-step lattice, which
    makes the candidate lattice piecewise constant in the coarse pose (the
    refinement differentiates w.r.t. features and gating, not the center)."""
    cx, cy, cphi = center.x, center.y, center.phi
    half_phi = math.radians(cfg.half_phi_deg)
    dphi = 2.0 * half_phi / cfg.nphi
    if cfg.snap_center_to_cells:
        if res is not None:
            cx = round(cx / res) * res
            cy = round(cy / res) * res
        if dphi > 0.0:
            cphi = round(cphi / dphi) * dphi
    dx = 2.0 * cfg.half_x / cfg.nx
    dy = 2.0 * cfg.half_y / cfg.ny
    return SolutionSpace(
        Pose2(cx, cy, cphi),
        cfg.half_x,
        cfg.half_y,
        half_phi,
        cx - cfg.half_x + np.arange(cfg.nx) * dx,
        cy - cfg.half_y + np.arange(cfg.ny) * dy,
        cphi - half_phi + np.arange(cfg.nphi) * dphi,
    )


# --------------------------------------------------------------------------
# cost volume
# --------------------------------------------------------------------------


@njit(cache=True)
def _cost_forward_kernel(av, bv, av_nz, bv_nz, res, offx, offy, offphi, out, cnt):
    h, w, c = av.shape
    half_h = (h - 1) / 2.0
    half_w = (w - 1) / 2.0
    row_rot = np.empty((h, w))
    col_rot = np.empty((h, w))
    for k in range(offphi.size):
        ca = math.cos(offphi[k])
        sa = math.sin(offphi[k])
        # rotation-only sample coordinates, shared by every translation
        for r in range(h):
            py = (half_h - r) * res
            for col_i in range(w):
                px = (col_i - half_w) * res
                col_rot[r, col_i] = (ca * px - sa * py) / res + half_w
                row_rot[r, col_i] = half_h - (sa * px + ca * py) / res
        for i in range(offx.size):
            tcol = offx[i] / res
            for j in range(offy.size):
                trow = offy[j] / res
                acc = 0.0
                n = 0
                for r in range(h):
                    for col_i in range(w):
                        col = col_rot[r, col_i] + tcol
                        row = row_rot[r, col_i] - trow
                        if row < 0.0 or row > h - 1 or col < 0.0 or col > w - 1:
                            continue
                        r0 = int(math.floor(row))
                        c0 = int(math.floor(col))
                        if r0 > h - 2:
                            r0 = h - 2
                        if r0 < 0:
                            r0 = 0
                        if c0 > w - 2:
                            c0 = w - 2
                        if c0 < 0:
                            c0 = 0
                        r1 = r0 + 1 if r0 + 1 <= h - 1 else r0
                        c1 = c0 + 1 if c0 + 1 <= w - 1 else c0
                        n += 1
                        if av_nz[r0, c0] == 0 and bv_nz[r, col_i] == 0:
                            continue  # all-zero source and target: distance 0
                        fr = row - r0
                        fc = col - c0
                        w00 = (1.0 - fr) * (1.0 - fc)
                        w01 = (1.0 - fr) * fc
                        w10 = fr * (1.0 - fc)
                        w11 = fr * fc
                        d2 = 0.0
                        for ch in range(c):
                            aval = (
                                w00 * av[r0, c0, ch]
                                + w01 * av[r0, c1, ch]
                                + w10 * av[r1, c0, ch]
                                + w11 * av[r1, c1, ch]
                            )
                            diff = aval - bv[r, col_i, ch]
                            d2 += diff * diff
                        acc += math.sqrt(d2)
                if n > 0:
                    out[i, j, k] = acc / n
                else:
                    out[i, j, k] = np.nan
                cnt[i, j, k] = n


@njit(cache=True)
def _cost_backward_kernel(av, bv, av_nz, bv_nz, res, offx, offy, offphi, gout, cnt, ga, gb):
    h, w, c = av.shape
    half_h = (h - 1) / 2.0
    half_w = (w - 1) / 2.0
    row_rot = np.empty((h, w))
    col_rot = np.empty((h, w))
    for k in range(offphi.size):
        ca = math.cos(offphi[k])
        sa = math.sin(offphi[k])
        for r in range(h):
            py = (half_h - r) * res
            for col_i in range(w):
                px = (col_i - half_w) * res
                col_rot[r, col_i] = (ca * px - sa * py) / res + half_w
                row_rot[r, col_i] = half_h - (sa * px + ca * py) / res
        for i in range(offx.size):
            tcol = offx[i] / res
            for j in range(offy.size):
                trow = offy[j] / res
                n = cnt[i, j, k]
                if n == 0 or gout[i, j, k] == 0.0:
                    continue
                g = gout[i, j, k] / n
                for r in range(h):
                    for col_i in range(w):
                        col = col_rot[r, col_i] + tcol
                        row = row_rot[r, col_i] - trow
                        if row < 0.0 or row > h - 1 or col < 0.0 or col > w - 1:
                            continue
                        r0 = int(math.floor(row))
                        c0 = int(math.floor(col))
                        if r0 > h - 2:
                            r0 = h - 2
                        if r0 < 0:
                            r0 = 0
                        if c0 > w - 2:
                            c0 = w - 2
                        if c0 < 0:
                            c0 = 0
                        r1 = r0 + 1 if r0 + 1 <= h - 1 else r0
                        c1 = c0 + 1 if c0 + 1 <= w - 1 else c0
                        if av_nz[r0, c0] == 0 and bv_nz[r, col_i] == 0:
                            continue
                        fr = row - r0
                        fc = col - c0
                        w00 = (1.0 - fr) * (1.0 - fc)
                        w01 = (1.0 - fr) * fc
                        w10 = fr * (1.0 - fc)
                        w11 = fr * fc
                        d2 = 0.0
                        for ch in range(c):
                            aval = (
                                w00 * av[r0, c0, ch]
                                + w01 * av[r0, c1, ch]
                                + w10 * av[r1, c0, ch]
                                + w11 * av[r1, c1, ch]
                            )
                            diff = aval - bv[r, col_i, ch]
                            d2 += diff * diff
                        dist = math.sqrt(d2)
                        if dist <= 0.0:
                            continue
                        coef = g / dist
                        for ch in range(c):
                            aval = (
                                w00 * av[r0, c0, ch]
                                + w01 * av[r0, c1, ch]
                                + w10 * av[r1, c0, ch]
                                + w11 * av[r1, c1, ch]
                            )
                            diff = (aval - bv[r, col_i, ch]) * coef
                            ga[r0, c0, ch] += w00 * diff
                            ga[r0, c1, ch] += w01 * diff
                            ga[r1, c0, ch] += w10 * diff
                            ga[r1, c1, ch] += w11 * diff
                            gb[r, col_i, ch] -= diff


def _support_masks(av, bv):
    """Cells whose 2x2 bilinear neighborhood (source) or own cell (target)
    carry any nonzero value; used to skip provably zero distances."""
    any_a = (av != 0.0).any(axis=2)
    dil = any_a.copy()
    dil[:-1] |= any_a[1:]
    out = dil.copy()
    out[:, :-1] |= dil[:, 1:]
    any_b = (bv != 0.0).any(axis=2)
    return out.astype(np.uint8), any_b.astype(np.uint8)


def _cost_forward_numpy(av, bv, res, offx, offy, offphi):
    """Vectorized fallback used when numba is unavailable."""
    h, w, c = av.shape
    half_h, half_w = (h - 1) / 2.0, (w - 1) / 2.0
    cols0, rows0 = np.meshgrid(np.arange(w), np.arange(h))
    px = (cols0 - half_w) * res
    py = (half_h - rows0) * res
    out = np.empty((offx.size, offy.size, offphi.size))
    cnt = np.empty_like(out, dtype=np.int64)
    for k, ang in enumerate(offphi):
        ca, sa = math.cos(ang), math.sin(ang)
        rx = ca * px - sa * py
        ry = sa * px + ca * py
        for i, tx in enumerate(offx):
            for j, ty in enumerate(offy):
                col = (rx + tx) / res + half_w
                row = half_h - (ry + ty) / res
                inside = (row >= 0) & (row <= h - 1) & (col >= 0) & (col <= w - 1)
                r0 = np.clip(np.floor(row).astype(np.int64), 0, max(h - 2, 0))
                c0 = np.clip(np.floor(col).astype(np.int64), 0, max(w - 2, 0))
                r1 = np.minimum(r0 + 1, h - 1)
                c1 = np.minimum(c0 + 1, w - 1)
                fr = (row - r0)[:, :, None]
                fc = (col - c0)[:, :, None]
                aval = (
                    (1 - fr) * (1 - fc) * av[r0, c0]
                    + (1 - fr) * fc * av[r0, c1]
                    + fr * (1 - fc) * av[r1, c0]
                    + fr * fc * av[r1, c1]
                )
                dist = np.sqrt(((aval - bv) ** 2).sum(axis=2))
                n = int(inside.sum())
                cnt[i, j, k] = n
                out[i, j, k] = dist[inside].sum() / n if n else np.nan
    return out, cnt


@dataclass
class CostVolume:
    """Candidate costs plus the prior-gated and smoothed stages."""

    space: SolutionSpace
    d_cost: Tensor
    counts: np.ndarray
    empty_mask: np.ndarray
    d_fused: Tensor | None = None
    smoothed: Tensor | None = None


def cost_volume(fv: FeatureGrid, fm: FeatureGrid, space: SolutionSpace) -> CostVolume:
    """Masked mean per-cell feature distance for every candidate warp of the
    visual features against the map features."""
    if (fv.height, fv.width, fv.channels) != (fm.height, fm.width, fm.channels):
        raise ValueError("cost_volume: feature grids must share shape")
    av_t, bv_t = fv.values, fm.values
    res = fv.resolution
    offx, offy, offphi = space.offsets_x, space.offsets_y, space.offsets_phi

    av, bv = av_t.data, bv_t.data
    av_nz, bv_nz = _support_masks(av, bv)
    if _HAVE_NUMBA:
        out = np.empty((offx.size, offy.size, offphi.size))
        cnt = np.empty_like(out, dtype=np.int64)
        _cost_forward_kernel(av, bv, av_nz, bv_nz, res, offx, offy, offphi, out, cnt)
    else:  # pragma: no cover
        out, cnt = _cost_forward_numpy(av, bv, res, offx, offy, offphi)

    empty = cnt == 0
    if empty.any():
        fill = (np.nanmax(out[~empty]) if (~empty).any() else 0.0) + 1.0
        out = np.where(empty, fill, out)

    def vjp(g):
        ga = np.zeros_like(av)
        gb = np.zeros_like(bv)
        g_eff = np.where(empty, 0.0, g)
        if _HAVE_NUMBA:
            _cost_backward_kernel(av, bv, av_nz, bv_nz, res, offx, offy, offphi, g_eff, cnt, ga, gb)
        else:  # pragma: no cover
            _cost_backward_numpy(av, bv, res, offx, offy, offphi, g_eff, cnt, ga, gb)
        return ga, gb

    d_cost = Tensor(out, parents=(av_t, bv_t), vjp=vjp)
    return CostVolume(space, d_cost, cnt, empty)


def _cost_backward_numpy(av, bv, res, offx, offy, offphi, gout, cnt, ga, gb):  # pragma: no cover
    h, w, c = av.shape
    half_h, half_w = (h - 1) / 2.0, (w - 1) / 2.0
    cols0, rows0 = np.meshgrid(np.arange(w), np.arange(h))
    px = (cols0 - half_w) * res
    py = (half_h - rows0) * res
    for k, ang in enumerate(offphi):
        ca, sa = math.cos(ang), math.sin(ang)
        rx = ca * px - sa * py
        ry = sa * px + ca * py
        for i in range(offx.size):
            for j in range(offy.size):
                if cnt[i, j, k] == 0 or gout[i, j, k] == 0.0:
                    continue
                col = (rx + offx[i]) / res + half_w
                row = half_h - (ry + offy[j]) / res
                inside = (row >= 0) & (row <= h - 1) & (col >= 0) & (col <= w - 1)
                r0 = np.clip(np.floor(row).astype(np.int64), 0, max(h - 2, 0))
                c0 = np.clip(np.floor(col).astype(np.int64), 0, max(w - 2, 0))
                r1 = np.minimum(r0 + 1, h - 1)
                c1 = np.minimum(c0 + 1, w - 1)
                fr = (row - r0)[:, :, None]
                fc = (col - c0)[:, :, None]
                w00, w01 = (1 - fr) * (1 - fc), (1 - fr) * fc
                w10, w11 = fr * (1 - fc), fr * fc
                aval = (
                    w00 * av[r0, c0]
                    + w01 * av[r0, c1]
                    + w10 * av[r1, c0]
                    + w11 * av[r1, c1]
                )
                diff = aval - bv
                dist = np.sqrt((diff**2).sum(axis=2))
                ok = inside & (dist > 0)
                coef = np.where(ok, gout[i, j, k] / cnt[i, j, k] / np.maximum(dist, 1e-300), 0.0)
                d = diff * coef[:, :, None]
                np.add.at(ga, (r0, c0), w00 * d)
                np.add.at(ga, (r0, c1), w01 * d)
                np.add.at(ga, (r1, c0), w10 * d)
                np.add.at(ga, (r1, c1), w11 * d)
                gb -= d


def aligned_prior(prior: JointPrior, space: SolutionSpace) -> Tensor:
    """Prior probabilities expressed on the candidate lattice.

    Index-aligned broadcast when the bin grid ties the lattice (same counts
    and ranges, the default configuration); otherwise the prior is sampled
    trilinearly at the candidate positions (bins without geometry fall back
    to index-space resampling) and renormalized."""
    p = prior.tensor
    counts = (len(space.offsets_x), len(space.offsets_y), len(space.offsets_phi))
    if prior.centers_x is None:
        if p.shape == counts:
            return p
        q = _resample_trilinear(p, counts)
        return q / q.sum()
    axes = (
        (prior.centers_x, space.offsets_x),
        (prior.centers_y, space.offsets_y),
        (prior.centers_phi, space.offsets_phi),
    )
    tied = p.shape == counts and all(
        abs(np.mean(off) - np.mean(cen)) <= 0.51 * max(_step(cen), 1e-12)
        and abs(np.ptp(off) - np.ptp(cen)) <= 1.01 * max(_step(cen), 1e-12)
        for cen, off in axes
    )
    if tied:
        return p
    q = _sample_trilinear_at(p, axes)
    total = q.sum()
    if float(total.data) <= 1e-300:
        return ad.tensor(np.full(counts, 1.0 / np.prod(counts)))
    return q / total


def _step(centers: np.ndarray) -> float:
    return float(centers[1] - centers[0]) if len(centers) > 1 else 0.0


def _sample_trilinear_at(t: Tensor, axes) -> Tensor:
    """Trilinear sample of a 3-D tensor at absolute axis positions; points
    outside the bin support read 0."""
    src = t.shape
    coords = []
    for (centers, positions), n in zip(axes, src):
        if n == 1:
            coords.append(np.zeros(len(positions)))
            continue
        step = _step(centers)
        coords.append((np.asarray(positions) - centers[0]) / step)
    u, v, w = np.meshgrid(*coords, indexing="ij")
    flat = t.reshape(src[0] * src[1] * src[2])
    out = None
    for du in (0, 1):
        for dv in (0, 1):
            for dw in (0, 1):
                iu = np.floor(u).astype(int) + du
                iv = np.floor(v).astype(int) + dv
                iw = np.floor(w).astype(int) + dw
                wu = 1.0 - np.abs(u - iu)
                wv = 1.0 - np.abs(v - iv)
                ww = 1.0 - np.abs(w - iw)
                ok = (
                    (iu >= 0) & (iu < src[0]) & (wu > 0)
                    & (iv >= 0) & (iv < src[1]) & (wv > 0)
                    & (iw >= 0) & (iw < src[2]) & (ww > 0)
                )
                weight = np.where(ok, wu * wv * ww, 0.0)
                iu = np.clip(iu, 0, src[0] - 1)
                iv = np.clip(iv, 0, src[1] - 1)
                iw = np.clip(iw, 0, src[2] - 1)
                idx = (iu * src[1] + iv) * src[2] + iw
                term = ad.tensor(weight) * flat[idx.ravel()].reshape(weight.shape)
                out = term if out is None else out + term
    return out


def fuse_prior(volume: CostVolume, prior: JointPrior, lam: Tensor) -> Tensor:
    """d_fused = d_cost + lam * (prior aligned onto the candidate lattice)."""
    p = aligned_prior(prior, volume.space)
    volume.d_fused = volume.d_cost + lam * p
    return volume.d_fused


def _resample_trilinear(t: Tensor, target_shape) -> Tensor:
    """Index-space trilinear interpolation of a 3-D tensor."""
    src = t.shape
    grids = []
    for s, d in zip(src, target_shape):
        if d == 1:
            grids.append(np.array([(s - 1) / 2.0]))
        else:
            grids.append(np.arange(d) * (s - 1) / (d - 1))
    flat = t.reshape(src[0] * src[1] * src[2])
    u, v, w = np.meshgrid(*grids, indexing="ij")
    out = None
    u0, v0, w0 = (np.clip(np.floor(g).astype(int), 0, s - 2 if s > 1 else 0)
                  for g, s in zip((u, v, w), src))
    fu, fv, fw = u - u0, v - v0, w - w0
    for du, wu in ((0, 1 - fu), (1, fu)):
        for dv, wv in ((0, 1 - fv), (1, fv)):
            for dw, ww in ((0, 1 - fw), (1, fw)):
                iu = np.minimum(u0 + du, src[0] - 1)
                iv = np.minimum(v0 + dv, src[1] - 1)
                iw = np.minimum(w0 + dw, src[2] - 1)
                idx = (iu * src[1] + iv) * src[2] + iw
                term = ad.tensor(wu * wv * ww) * flat[idx.ravel()].reshape(target_shape)
                out = term if out is None else out + term
    return out


def _pad_replicate3(t: Tensor) -> Tensor:
    t = ad.concatenate([t[0:1], t, t[-1:]], axis=0)
    t = ad.concatenate([t[:, 0:1], t, t[:, -1:]], axis=1)
    t = ad.concatenate([t[:, :, 0:1], t, t[:, :, -1:]], axis=2)
    return t


def smooth_cost(d_fused: Tensor, conv_w: Tensor) -> Tensor:
    """3x3x3 learnable smoothing convolution with replicate padding."""
    nx, ny, nphi = d_fused.shape
    padded = _pad_replicate3(d_fused)
    out = None
    for di in range(3):
        for dj in range(3):
            for dk in range(3):
                term = conv_w[di, dj, dk] * padded[di : di + nx, dj : dj + ny, dk : dk + nphi]
                out = term if out is None else out + term
    return out


def refine_pose(
    volume: CostVolume,
    prior: JointPrior,
    gamma: float,
    conv_w: Tensor,
    paper_sign: bool = False,
):
    """Smooth the fused cost, weight candidates by softmax(-C + gamma *
    prior) and average the lattice; the angle uses the weighted circular
    mean. Returns (Pose2, pose Tensor (3,), weights Tensor, smoothed C)."""
    if volume.d_fused is None:
        raise ValueError("fuse_prior must run before refine_pose")
    space = volume.space
    c = smooth_cost(volume.d_fused, conv_w)
    volume.smoothed = c
    p = aligned_prior(prior, space)
    signed = c if paper_sign else -c
    scores = (signed + gamma * p).reshape(c.size)
    weights = ad.softmax(scores, axis=0).reshape(c.shape)

    wx = weights.sum(axis=(1, 2))
    wy = weights.sum(axis=(0, 2))
    wphi = weights.sum(axis=(0, 1))
    x_f = (wx * ad.tensor(space.offsets_x)).sum()
    y_f = (wy * ad.tensor(space.offsets_y)).sum()
    sin_f = (wphi * ad.tensor(np.sin(space.offsets_phi))).sum()
    cos_f = (wphi * ad.tensor(np.cos(space.offsets_phi))).sum()
    phi_f = ad.atan2(sin_f, cos_f)
    vec = ad.stack([x_f, y_f, phi_f])
    pose = Pose2(vec.data[0], vec.data[1], vec.data[2])
    return pose, vec, weights, c


def registration_posterior(weights: Tensor, space: SolutionSpace) -> PoseBelief:
    """Marginal distributions of the candidate weights per DoF; their
    entropies express degeneracy of the registration itself."""
    return PoseBelief(
        weights.sum(axis=(1, 2)),
        weights.sum(axis=(0, 2)),
        weights.sum(axis=(0, 1)),
        space.offsets_x,
        space.offsets_y,
        space.offsets_phi,
    )


# --------------------------------------------------------------------------
# cost volume dump (binary, 32-byte header)
# --------------------------------------------------------------------------

_MAGIC = b"BVLCOST1"


def save_cost_volume(path, volume: np.ndarray):
    arr = np.ascontiguousarray(volume, dtype="<f8")
    if arr.ndim != 3:
        raise ValueError("cost volume must be 3-D")
    header = _MAGIC + struct.pack("<IIII", *arr.shape, 8) + b"\x00" * 8
    assert len(header) == 32
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())


def load_cost_volume(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(32)
        if header[:8] != _MAGIC:
            raise ValueError("not a cost volume file")
        nx, ny, nphi, itemsize = struct.unpack("<IIII", header[8:24])
        if itemsize != 8:
            raise ValueError("unsupported dtype")
        data = np.frombuffer(f.read(), dtype="<f8")
    return data.reshape(nx, ny, nphi).copy()
