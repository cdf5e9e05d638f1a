"""Per-cell feature encoding, cross-modal attention fusion and the
perceptual-uncertainty head.

The encoder turns a raw class-channel grid into unit-norm descriptors:
[raw channels | truncated distance transforms | 3x3 box-smoothed channels]
followed by a learnable linear channel mix and L2 normalization. Fusion
alternates self- and cross-attention over a spatially strided token set.
The uncertainty head predicts a non-negative per-cell field whose loss
trades reconstruction error against a log-variance style penalty: high
uncertainty relaxes the feature match, at a fixed additive cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import ParamSet
from .geometry import BevGrid, Pose2

FEATURE_DIM = 8
DT_CAP_METERS = 5.0


@dataclass
class FeatureGrid:
    """Per-cell descriptors with grid metadata. values is (H, W, C)."""

    values: Tensor
    resolution: float
    origin: Pose2
    tag: str  # visual | map | fused-visual | fused-map | raw

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]

    def flat(self) -> Tensor:
        h, w, c = self.values.shape
        return self.values.reshape(h * w, c)


@dataclass
class UncertaintyField:
    """Non-negative per-cell uncertainty, stored with its raw logits."""

    logits: Tensor  # (H, W)
    values: Tensor  # softplus(logits) >= 0

    @property
    def shape(self):
        return self.values.shape


def raw_feature_grid(g: BevGrid) -> FeatureGrid:
    """Raw rasterized channels as features (no normalization, no params)."""
    return FeatureGrid(ad.tensor(g.values), g.resolution, g.origin, "raw")


def init_encoder_params(params: ParamSet, rng, channels: int = 4, dim: int = FEATURE_DIM,
                        noise: float = 0.25):
    """Channel mix, shared attention projections and uncertainty head.

    Total budget stays far below 5000 scalars. The mix starts as a noisy
    passthrough of the raw and distance channels, the value projections at
    zero so fusion is the identity until trained.
    """
    in_dim = 3 * channels
    mix = np.zeros((in_dim, dim))
    for i in range(min(2 * channels, dim)):
        mix[i, i] = 1.0
    mix += rng.normal(0.0, noise, mix.shape)
    params.add("enc.mix", mix)
    params.add("enc.mix_b", np.zeros(dim))
    for blk in ("sa", "ca"):
        params.add(f"attn.{blk}_q", rng.normal(0.0, 0.2, (dim, dim)))
        params.add(f"attn.{blk}_k", rng.normal(0.0, 0.2, (dim, dim)))
        params.add(f"attn.{blk}_v", np.zeros((dim, dim)))
    params.add("unc.w", np.zeros((dim, 1)))
    params.add("unc.b", np.zeros(1))


def _distance_features(values: np.ndarray, res: float) -> np.ndarray:
    """Per-class truncated distance transform, capped and normalized to [0, 1].

    Computed on the thresholded occupancy (> 0.5), so it is piecewise
    constant in the raw values; gradients flow through the other channels.
    """
    h, w, c = values.shape
    out = np.empty((h, w, c))
    for ch in range(c):
        occupied = values[:, :, ch] > 0.5
        if not occupied.any():
            out[:, :, ch] = 1.0
            continue
        d = ndimage.distance_transform_edt(~occupied) * res
        out[:, :, ch] = np.minimum(d, DT_CAP_METERS) / DT_CAP_METERS
    return out


def _box_smooth(t: Tensor) -> Tensor:
    """3x3 box mean with zero padding, differentiable in the grid values."""
    h, w, c = t.shape
    acc = None
    for dr in (-1, 0, 1):
        r0, r1 = max(0, -dr), min(h, h - dr)
        for dc in (-1, 0, 1):
            c0, c1 = max(0, -dc), min(w, w - dc)
            piece = t[r0 + dr : r1 + dr, c0 + dc : c1 + dc, :]
            # place the shifted block back into a full-size buffer
            buf = _embed(piece, (h, w, c), (r0, c0))
            acc = buf if acc is None else acc + buf
    return acc / 9.0


def _embed(piece: Tensor, shape, at) -> Tensor:
    """Zero-pad `piece` into a tensor of `shape` at row/col offset `at`."""
    h, w, c = shape
    r0, c0 = at
    ph, pw = piece.shape[0], piece.shape[1]
    rows_before = ad.tensor(np.zeros((r0, pw, c)))
    rows_after = ad.tensor(np.zeros((h - r0 - ph, pw, c)))
    col = ad.concatenate([rows_before, piece, rows_after], axis=0)
    cols_before = ad.tensor(np.zeros((h, c0, c)))
    cols_after = ad.tensor(np.zeros((h, w - c0 - pw, c)))
    return ad.concatenate([cols_before, col, cols_after], axis=1)


def encode(g: BevGrid, params: ParamSet, tag: str = "visual", values: Tensor | None = None) -> FeatureGrid:
    """Fixed descriptor pipeline + learnable channel mix, L2-normalized.

    `values` may override the grid values with a Tensor (used by gradient
    checks to differentiate w.r.t. the input field).
    """
    raw = values if values is not None else ad.tensor(g.values)
    if raw.shape[2] != 4:
        raise ValueError(f"encode expects 4 input channels, got {raw.shape[2]}")
    dt = ad.tensor(_distance_features(raw.data, g.resolution))
    smooth = _box_smooth(raw)
    feats = ad.concatenate([raw, dt, smooth], axis=2)
    h, w, cin = feats.shape
    mixed = ad.matmul(feats.reshape(h * w, cin), params["enc.mix"]) + params["enc.mix_b"]
    normed = ad.l2_normalize(mixed, axis=1)
    return FeatureGrid(normed.reshape(h, w, -1), g.resolution, g.origin, tag)


def _tokens(flat: Tensor, h: int, w: int, stride: int) -> Tensor:
    grid = flat.reshape(h, w, flat.shape[1])
    sub = grid[::stride, ::stride, :]
    return sub.reshape(sub.shape[0] * sub.shape[1], sub.shape[2])


def _attend(queries: Tensor, keys_from: Tensor, params: ParamSet, blk: str, h, w, stride):
    """Scaled dot-product attention of every cell over a strided token set."""
    dim = queries.shape[1]
    toks = _tokens(keys_from, h, w, stride)
    q = ad.matmul(queries, params[f"attn.{blk}_q"])
    k = ad.matmul(toks, params[f"attn.{blk}_k"])
    v = ad.matmul(toks, params[f"attn.{blk}_v"])
    logits = ad.matmul(q, k.T) / math.sqrt(dim)
    attn = ad.softmax(logits, axis=1)
    return queries + ad.matmul(attn, v), attn


def cross_fuse(
    fv: FeatureGrid,
    fm: FeatureGrid,
    params: ParamSet,
    stride: int = 4,
    return_attn: bool = False,
):
    """Self-attention on each modality, then cross-attention between them,
    with residual connections; outputs are re-normalized."""
    if (fv.height, fv.width, fv.channels) != (fm.height, fm.width, fm.channels):
        raise ValueError("cross_fuse: feature grids must share shape")
    if fv.resolution != fm.resolution:
        raise ValueError("cross_fuse: feature grids must share resolution")
    h, w = fv.height, fv.width
    xv, xm = fv.flat(), fm.flat()
    sv, attn_sv = _attend(xv, xv, params, "sa", h, w, stride)
    sm, attn_sm = _attend(xm, xm, params, "sa", h, w, stride)
    cv, attn_cv = _attend(sv, sm, params, "ca", h, w, stride)
    cm, attn_cm = _attend(sm, sv, params, "ca", h, w, stride)
    out_v = ad.l2_normalize(cv, axis=1).reshape(h, w, -1)
    out_m = ad.l2_normalize(cm, axis=1).reshape(h, w, -1)
    fv2 = FeatureGrid(out_v, fv.resolution, fv.origin, "fused-visual")
    fm2 = FeatureGrid(out_m, fm.resolution, fm.origin, "fused-map")
    if return_attn:
        return fv2, fm2, {"sa_v": attn_sv, "sa_m": attn_sm, "ca_v": attn_cv, "ca_m": attn_cm}
    return fv2, fm2


def predict_uncertainty(f_fused: FeatureGrid, params: ParamSet) -> UncertaintyField:
    h, w = f_fused.height, f_fused.width
    logits = (ad.matmul(f_fused.flat(), params["unc.w"]) + params["unc.b"]).reshape(h, w)
    return UncertaintyField(logits, logits.softplus())


def constant_uncertainty(h: int, w: int, value: float = math.log(2.0)) -> UncertaintyField:
    """Uncertainty field used when no head is available (raw feature mode)."""
    logits = ad.tensor(np.zeros((h, w)))
    return UncertaintyField(logits, ad.tensor(np.full((h, w), value)))


def perceptual_loss(f: FeatureGrid, f_hat: FeatureGrid, u: UncertaintyField) -> Tensor:
    """Mean over cells of exp(-U) * |F - F_hat|_1 + 2U."""
    if f.values.shape != f_hat.values.shape:
        raise ValueError("perceptual_loss: feature grids must share shape")
    resid = (f.values - f_hat.values).abs().sum(axis=2)
    return ((-u.values).exp() * resid + 2.0 * u.values).mean()
