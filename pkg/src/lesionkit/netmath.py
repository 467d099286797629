"""Training-side math: class-weighted Dice and cross-entropy losses with
analytic gradients, the scheduled two-branch global loss, the attention-gate
op with its backward pass, and softmax-to-label conversion.

Losses operate on (N voxels, C classes) arrays, matching per-slice 2D
training batches.  All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grades import N_LABELS
from .volume import KIND_LABEL, ProbStack, Volume

CE_CLAMP = 1e-7

# Per-class loss weights: background, prostate, then one per lesion grade.
LESION_BRANCH_WEIGHTS = (0.002, 0.14, 0.1715, 0.1715, 0.1715, 0.1715)
PROSTATE_BRANCH_WEIGHTS = (0.002, 0.14)

DEFAULT_SWITCH_EPOCH = 20


@dataclass(frozen=True)
class ClassWeights:
    """Nonnegative per-class weights; 2 entries for the prostate branch,
    6 for the lesion branch."""

    w: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.w)
        if len(w) not in (2, N_LABELS):
            raise ValueError(f"expected 2 or {N_LABELS} weights, got {len(w)}")
        if any(x < 0 for x in w) or not any(x > 0 for x in w):
            raise ValueError("weights must be nonnegative with at least one positive")
        object.__setattr__(self, "w", w)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.w, dtype=np.float64)

    @classmethod
    def lesion_default(cls) -> "ClassWeights":
        return cls(LESION_BRANCH_WEIGHTS)

    @classmethod
    def prostate_default(cls) -> "ClassWeights":
        return cls(PROSTATE_BRANCH_WEIGHTS)


@dataclass(frozen=True)
class LossSchedule:
    """Branch mixing weights; lambda2 is inactive before switch_epoch."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    switch_epoch: int = DEFAULT_SWITCH_EPOCH

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda weights must be nonnegative")
        if self.switch_epoch < 0:
            raise ValueError("switch_epoch must be nonnegative")

    def lambda2_at(self, epoch: int) -> float:
        return 0.0 if epoch < self.switch_epoch else self.lambda2


@dataclass(frozen=True)
class LossValue:
    total: float
    dice_term: float
    ce_term: float
    empty_dice: bool = False  # denominator was 0; dice_term defined as 0

    def __post_init__(self):
        if abs(self.total - (self.dice_term + self.ce_term)) > 1e-9:
            raise ValueError("total must equal dice_term + ce_term")
        if not (-1e-12 <= self.dice_term <= 1.0 + 1e-12):
            raise ValueError("dice_term out of [0, 1]")
        if self.ce_term < 0:
            raise ValueError("ce_term must be nonnegative")


@dataclass(frozen=True)
class FeatureStack:
    """C finite feature planes sharing one (h, w) extent."""

    planes: np.ndarray  # (C, h, w)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.planes, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"expected (C, h, w) planes, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature values must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "planes", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.planes.shape


@dataclass(frozen=True)
class AttentionMap:
    """Single (H, W) plane of gate values in [0, 1]."""

    plane: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.plane, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"expected (H, W) plane, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("attention values must lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "plane", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.plane.shape


# ---------------------------------------------------------------------------
# Losses


def _check_pair(p: np.ndarray, y: np.ndarray, w: ClassWeights):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 2:
        raise ValueError(f"p and y must share (N, C) shape, got {p.shape} vs {y.shape}")
    if p.shape[1] != len(w.w):
        raise ValueError(f"{p.shape[1]} classes vs {len(w.w)} weights")
    return p, y, w.as_array()


def weighted_dice_loss(p, y, w: ClassWeights) -> float:
    """1 - 2*(sum_c w_c sum_i y_ci p_ci) / (sum_c w_c sum_i (y_ci + p_ci)).

    An all-zero denominator (no mass in any weighted class) is treated as
    perfect agreement and returns 0.
    """
    p, y, wa = _check_pair(p, y, w)
    num = float(wa @ (y * p).sum(axis=0))
    den = float(wa @ (y + p).sum(axis=0))
    if den == 0.0:
        return 0.0
    return 1.0 - 2.0 * num / den


def weighted_ce_loss(p, y, w: ClassWeights) -> float:
    """-(1/N) sum_i sum_c y_ci w_c log(p_ci), with p clamped at 1e-7."""
    p, y, wa = _check_pair(p, y, w)
    n = p.shape[0]
    logs = np.log(np.maximum(p, CE_CLAMP))
    return float(-(wa @ (y * logs).sum(axis=0)) / n)


def branch_loss(p, y, w: ClassWeights) -> LossValue:
    """Dice + cross-entropy for one segmentation branch."""
    pa, ya, wa = _check_pair(p, y, w)
    den = float(wa @ (ya + pa).sum(axis=0))
    dice = weighted_dice_loss(p, y, w)
    ce = weighted_ce_loss(p, y, w)
    return LossValue(total=dice + ce, dice_term=dice, ce_term=ce, empty_dice=den == 0.0)


def global_loss(lp: LossValue, ll: LossValue, s: LossSchedule, epoch: int) -> float:
    """lambda1 * prostate loss + lambda2 * lesion loss, with lambda2 gated
    off before the schedule's switch epoch."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return s.lambda1 * lp.total + s.lambda2_at(epoch) * ll.total


def branch_loss_gradient(p, y, w: ClassWeights) -> np.ndarray:
    """d(dice_term + ce_term)/dp, analytic, shape (N, C).

    Requires p strictly inside (clamp, 1) so the log term is smooth.
    """
    p, y, wa = _check_pair(p, y, w)
    if p.min() <= CE_CLAMP or p.max() >= 1.0:
        raise ValueError(f"p must lie strictly inside ({CE_CLAMP}, 1)")
    n = p.shape[0]
    num = float(wa @ (y * p).sum(axis=0))  # A
    den = float(wa @ (y + p).sum(axis=0))  # B
    if den == 0.0:
        d_dice = np.zeros_like(p)
    else:
        d_dice = -2.0 * wa[None, :] * (y * den - num) / (den * den)
    d_ce = -(wa[None, :] * y / p) / n
    return d_dice + d_ce


# ---------------------------------------------------------------------------
# Attention gate


def _pool_area(a: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = a.shape
    rh, rw = H // h, W // w
    return a.reshape(h, rh, w, rw).mean(axis=(1, 3))


def _pool_area_adjoint(g: np.ndarray, H: int, W: int) -> np.ndarray:
    h, w = g.shape
    rh, rw = H // h, W // w
    return np.broadcast_to(
        g[:, None, :, None] / (rh * rw), (h, rh, w, rw)
    ).reshape(H, W)


def _bilinear_coeffs(n_src: int, n_dst: int):
    # Pixel-center aligned: source coord u = (j + 0.5) * n_src/n_dst - 0.5.
    u = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    u = np.clip(u, 0.0, n_src - 1.0)
    i0 = np.floor(u).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    f = u - i0
    return i0, i1, f


def _resize_bilinear(a: np.ndarray, h: int, w: int) -> np.ndarray:
    y0, y1, fy = _bilinear_coeffs(a.shape[0], h)
    x0, x1, fx = _bilinear_coeffs(a.shape[1], w)
    top = a[np.ix_(y0, x0)] * (1 - fx) + a[np.ix_(y0, x1)] * fx
    bot = a[np.ix_(y1, x0)] * (1 - fx) + a[np.ix_(y1, x1)] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def _resize_bilinear_adjoint(g: np.ndarray, H: int, W: int) -> np.ndarray:
    h, w = g.shape
    y0, y1, fy = _bilinear_coeffs(H, h)
    x0, x1, fx = _bilinear_coeffs(W, w)
    out = np.zeros((H, W), dtype=np.float64)
    wy = np.stack([1 - fy, fy])  # (2, h)
    wx = np.stack([1 - fx, fx])  # (2, w)
    ys = np.stack([y0, y1])
    xs = np.stack([x0, x1])
    for iy in range(2):
        for ix in range(2):
            np.add.at(
                out,
                (ys[iy][:, None], xs[ix][None, :]),
                g * wy[iy][:, None] * wx[ix][None, :],
            )
    return out


def resample_attention(a: AttentionMap, shape: tuple[int, int]) -> np.ndarray:
    """Downsample the gate plane to a block's (h, w): area-average pooling
    when both ratios are integral, bilinear otherwise."""
    h, w = shape
    H, W = a.shape
    if h > H or w > W:
        raise ValueError(f"cannot gate ({h}, {w}) block with smaller ({H}, {W}) map")
    if (H, W) == (h, w):
        return np.asarray(a.plane)
    if H % h == 0 and W % w == 0:
        return _pool_area(a.plane, h, w)
    return _resize_bilinear(a.plane, h, w)


def _resample_attention_adjoint(g: np.ndarray, a: AttentionMap) -> np.ndarray:
    H, W = a.shape
    h, w = g.shape
    if (H, W) == (h, w):
        return np.asarray(g, dtype=np.float64).copy()
    if H % h == 0 and W % w == 0:
        return _pool_area_adjoint(g, H, W)
    return _resize_bilinear_adjoint(g, H, W)


def attention_gate_forward(f: FeatureStack, a: AttentionMap) -> FeatureStack:
    """Channel-wise Hadamard product of features with the resampled gate."""
    _, h, w = f.shape
    gate = resample_attention(a, (h, w))
    return FeatureStack(f.planes * gate[None, :, :])


def attention_gate_backward(
    f: FeatureStack, a: AttentionMap, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the gate op: df_c = dout_c * gate; da accumulates
    sum_c dout_c * f_c pushed through the resampling adjoint."""
    dout = np.asarray(dout, dtype=np.float64)
    if dout.shape != f.shape:
        raise ValueError(f"dout shape {dout.shape} != features {f.shape}")
    _, h, w = f.shape
    gate = resample_attention(a, (h, w))
    df = dout * gate[None, :, :]
    d_gate = (dout * f.planes).sum(axis=0)
    da = _resample_attention_adjoint(d_gate, a)
    return df, da


# ---------------------------------------------------------------------------
# Softmax to label


def label_from_probs(p: ProbStack) -> Volume:
    """Per-voxel argmax over the 6 channels; ties go to the lowest index."""
    labels = np.argmax(p.data, axis=0).astype(np.uint8)
    return Volume(labels, p.spacing_mm, KIND_LABEL)
