"""Cross-modal association between observation cells and map cells.

Global route: cosine similarity matrix -> per-entry mix with the tiled
perceptual uncertainty (affine + rectifier, the 1x1-conv-with-ReLU
equivalent) -> row softmax, supervised by a truncated-Gaussian soft
target built from the ground-truth grid offset. Local route: anchored
window sampling of ground-truth cell pairs with a symmetric InfoNCE-style
contrastive loss on projected features.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import ParamSet
from .encoding import FeatureGrid, UncertaintyField
from .geometry import Pose2, cell_centers_local, inverse, local_to_cell

LN2 = math.log(2.0)


@dataclass
class AssocMatrix:
    """(visual cells x map cells) matrix with its role recorded in `kind`:
    raw_similarity | uncertainty_aware | probability | soft_target."""

    values: object  # Tensor for differentiable kinds, ndarray for targets
    kind: str
    vis_shape: tuple
    map_shape: tuple
    valid_rows: np.ndarray | None = None

    @property
    def data(self) -> np.ndarray:
        return self.values.data if isinstance(self.values, Tensor) else self.values


def init_association_params(params: ParamSet, dim: int):
    params.add("assoc.w_s", np.array(4.0))
    params.add("assoc.w_u", np.array(0.0))
    params.add("assoc.b", np.array(0.5))
    params.add("local.pv", np.eye(dim))
    params.add("local.pm", np.eye(dim))


def similarity_matrix(fv: FeatureGrid, fm: FeatureGrid) -> AssocMatrix:
    """S[i, j] = <f_v(i), f_m(j)> over unit-norm cell descriptors."""
    flat_v, flat_m = fv.flat(), fm.flat()
    for name, flat in (("visual", flat_v), ("map", flat_m)):
        norms = np.linalg.norm(flat.data, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-4:
            raise ValueError(f"{name} features are not L2-normalized")
    s = ad.matmul(flat_v, flat_m.T)
    return AssocMatrix(s, "raw_similarity", (fv.height, fv.width), (fm.height, fm.width))


def inject_uncertainty(s: AssocMatrix, u: UncertaintyField, params: ParamSet) -> AssocMatrix:
    """Tile the flattened uncertainty across map cells and mix it into the
    similarity with a learnable per-entry affine followed by rectification."""
    n_vis = s.data.shape[0]
    if u.values.size != n_vis:
        raise ValueError("uncertainty field does not match similarity rows")
    u_col = u.values.reshape(n_vis, 1)
    mixed = params["assoc.w_s"] * s.values + params["assoc.w_u"] * u_col + params["assoc.b"]
    return AssocMatrix(mixed.relu(), "uncertainty_aware", s.vis_shape, s.map_shape)


def row_softmax(s_uncert: AssocMatrix) -> AssocMatrix:
    p = ad.softmax(s_uncert.values, axis=1)
    return AssocMatrix(p, "probability", s_uncert.vis_shape, s_uncert.map_shape,
                       s_uncert.valid_rows)


def correspondence_cells(offset: Pose2, vis_shape, map_shape, res: float):
    """Fractional map-grid (row, col) of every visual cell's ground-truth
    correspondent. Content observed at visual cell q appears in the map
    window at M_offset^{-1} q."""
    hv, wv = vis_shape
    hm, wm = map_shape
    px, py = cell_centers_local(hv, wv, res)
    inv = inverse(offset)
    c, s = math.cos(inv.phi), math.sin(inv.phi)
    mx = c * px - s * py + inv.x
    my = s * px + c * py + inv.y
    return local_to_cell(mx, my, hm, wm, res)


def gaussian_soft_target(
    offset: Pose2,
    vis_shape,
    map_shape,
    res: float,
    sigma_cells: float = 1.5,
    uncertainty: np.ndarray | None = None,
) -> AssocMatrix:
    """Row-normalized truncated Gaussian around each ground-truth match.

    d(i, j) is the Euclidean offset in map cells between cell j and the
    correspondent of visual cell i; entries vanish beyond 3 sigma. When a
    perceptual uncertainty field is given, the per-row smoothing widens as
    sigma_i = sigma_cells * (1 + U_i / ln 2). Rows whose correspondent
    leaves the map window are flagged invalid.
    """
    if sigma_cells <= 0:
        raise ValueError("sigma_cells must be positive")
    rows, cols = correspondence_cells(offset, vis_shape, map_shape, res)
    hv, wv = vis_shape
    hm, wm = map_shape
    r_flat = rows.ravel()
    c_flat = cols.ravel()
    valid = (r_flat >= 0) & (r_flat <= hm - 1) & (c_flat >= 0) & (c_flat <= wm - 1)

    sig = np.full(hv * wv, float(sigma_cells))
    if uncertainty is not None:
        sig = sigma_cells * (1.0 + np.asarray(uncertainty).ravel() / LN2)

    mr, mc = np.meshgrid(np.arange(hm), np.arange(wm), indexing="ij")
    mr = mr.ravel()[None, :]
    mc = mc.ravel()[None, :]
    d2 = (r_flat[:, None] - mr) ** 2 + (c_flat[:, None] - mc) ** 2
    g = np.exp(-d2 / (2.0 * sig[:, None] ** 2))
    g[d2 > (3.0 * sig[:, None]) ** 2] = 0.0
    row_sums = g.sum(axis=1, keepdims=True)
    ok = valid & (row_sums[:, 0] > 0)
    g = np.where(ok[:, None], g / np.maximum(row_sums, 1e-300), 0.0)
    return AssocMatrix(g, "soft_target", vis_shape, map_shape, ok)


def loss_global(p: AssocMatrix, g: AssocMatrix) -> Tensor:
    """Cross-entropy between predicted association rows and the soft target,
    averaged over valid rows; log is clamped at 1e-12."""
    if p.data.shape != g.data.shape:
        raise ValueError("association matrices must share shape")
    if p.kind != "probability" or g.kind != "soft_target":
        raise ValueError("loss_global expects (probability, soft_target)")
    valid = g.valid_rows if g.valid_rows is not None else np.ones(p.data.shape[0], bool)
    if not valid.any():
        warnings.warn("loss_global: no valid supervision rows; returning 0")
        return ad.tensor(0.0)
    idx = np.flatnonzero(valid)
    ce = -(ad.tensor(g.data[idx]) * p.values[idx].safe_log()).sum(axis=1)
    return ce.mean()


@dataclass
class LocalBatch:
    """Anchored ground-truth cell pairs for local contrastive association."""

    anchors: list  # (row, col) anchor cells
    window: tuple  # (Hp, Wp) in cells
    pairs: list = field(default_factory=list)  # per kept anchor: (K, 2) int array
    skipped: list = field(default_factory=list)  # anchor indices without K pairs


def sample_local_pairs(
    offset: Pose2,
    obs: np.ndarray,
    map_shape,
    res: float,
    m_anchors: int,
    k_pairs: int,
    window: tuple,
    rng,
) -> LocalBatch:
    """Uniform anchor lattice; per anchor, K road-occupied visual cells paired
    with their ground-truth map cells (nearest cell of the correspondent)."""
    if m_anchors < 1 or k_pairs < 1:
        raise ValueError("m_anchors and k_pairs must be >= 1")
    h, w = obs.shape[:2]
    side = int(math.isqrt(m_anchors))
    spacing = int(min(h, w) // math.isqrt(m_anchors))
    if spacing < 1:
        raise ValueError("anchor lattice does not fit the grid")
    anchors = [
        (spacing // 2 + i * spacing, spacing // 2 + j * spacing)
        for i in range(side)
        for j in range(side)
    ][:m_anchors]

    rows, cols = correspondence_cells(offset, (h, w), map_shape, res)
    occupied = obs.max(axis=2) > 0.5
    hp, wp = window
    hm, wm = map_shape

    batch = LocalBatch(anchors, window)
    for a_idx, (ar, ac) in enumerate(anchors):
        r0, r1 = max(0, ar - hp // 2), min(h, ar + (hp + 1) // 2)
        c0, c1 = max(0, ac - wp // 2), min(w, ac + (wp + 1) // 2)
        rr, cc = np.nonzero(occupied[r0:r1, c0:c1])
        rr, cc = rr + r0, cc + c0
        mr = np.rint(rows[rr, cc]).astype(np.int64)
        mc = np.rint(cols[rr, cc]).astype(np.int64)
        inside = (mr >= 0) & (mr < hm) & (mc >= 0) & (mc < wm)
        rr, cc, mr, mc = rr[inside], cc[inside], mr[inside], mc[inside]
        if rr.size < k_pairs:
            batch.skipped.append(a_idx)
            continue
        pick = rng.choice(rr.size, size=k_pairs, replace=False)
        vis_idx = rr[pick] * w + cc[pick]
        map_idx = mr[pick] * wm + mc[pick]
        batch.pairs.append(np.stack([vis_idx, map_idx], axis=1))
    return batch


def loss_local(batch: LocalBatch, fv: FeatureGrid, fm: FeatureGrid, params: ParamSet) -> Tensor:
    """Symmetric contrastive loss over per-anchor cosine matrices of projected
    pair features; 0 when no anchor kept enough pairs."""
    if not batch.pairs:
        return ad.tensor(0.0)
    fv_flat, fm_flat = fv.flat(), fm.flat()
    total = ad.tensor(0.0)
    for pair in batch.pairs:
        k = pair.shape[0]
        pv = ad.l2_normalize(ad.matmul(fv_flat[pair[:, 0]], params["local.pv"]), axis=1)
        pm = ad.l2_normalize(ad.matmul(fm_flat[pair[:, 1]], params["local.pm"]), axis=1)
        s = ad.matmul(pv, pm.T)
        diag = np.arange(k)
        log_rows = ad.softmax(s, axis=1).safe_log()[diag, diag]
        log_cols = ad.softmax(s, axis=0).safe_log()[diag, diag]
        total = total + (-(log_rows + log_cols).sum()) / (2.0 * k)
    return total / float(len(batch.pairs))


def uniform_probability(vis_shape, map_shape) -> AssocMatrix:
    n_vis = vis_shape[0] * vis_shape[1]
    n_map = map_shape[0] * map_shape[1]
    p = np.full((n_vis, n_map), 1.0 / n_map)
    return AssocMatrix(ad.tensor(p), "probability", vis_shape, map_shape)
