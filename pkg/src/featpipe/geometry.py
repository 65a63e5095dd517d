"""Differentiable patch geometry: soft localization, cropping, rotation.

Coordinate conventions used across the package:

* a pixel at row i, column j has continuous coordinates (x, y) = (j, i),
* cropping an even-sided window centers it between pixels: output pixel
  (i, j) of an s-crop at (x, y) samples the source at
  (x - s/2 + 0.5 + j,  y - s/2 + 0.5 + i),
* sampling outside the source is treated as zero,
* a positive rotation angle moves content at offset direction (1, 0)
  toward (cos t, sin t) in (x, y) coordinates; every rotation in the
  package goes through rot_crop so the convention cannot drift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grad import Op, ShapeError, Tensor, absolute, relu, select, wrap

__all__ = [
    "PatchGeometry",
    "softargmax",
    "bilinear_sample",
    "crop",
    "rot_crop",
    "proposal_overlap",
    "overlap_loss",
]


@dataclass(frozen=True)
class PatchGeometry:
    """Patch sizing shared by training and inference.

    `outer` is the standardized patch fed to the detector, `inner` the
    crop fed to orientation and description.  A record with scale sigma
    owns a support region of `support_mult * sigma` image pixels that
    maps onto the outer patch.
    """

    outer: int = 128
    inner: int = 64
    support_mult: float = 24.0
    beta: float = 10.0

    @property
    def inner_support_mult(self) -> float:
        # the inner crop covers half the outer support
        return self.support_mult * self.inner / self.outer


# ---------------------------------------------------------------------------
# shape normalization helpers
# ---------------------------------------------------------------------------


def _norm_patch(p) -> tuple[Tensor, bool]:
    """Promote (H,W) or (C,H,W) or (B,C,H,W) input to (B,C,H,W)."""
    t = wrap(p)
    if t.ndim == 2:
        return _reshape_keep(t, (1, 1) + t.shape), False
    if t.ndim == 3:
        return _reshape_keep(t, (1,) + t.shape), False
    if t.ndim == 4:
        return t, True
    raise ShapeError(f"expected a 2-d, 3-d or 4-d grid, got shape {t.shape}")


def _norm_xy(xy) -> tuple[Tensor, bool]:
    t = wrap(xy)
    if t.ndim == 1:
        if t.shape != (2,):
            raise ShapeError(f"location must have shape (2,), got {t.shape}")
        return _reshape_keep(t, (1, 2)), False
    if t.ndim == 2 and t.shape[1] == 2:
        return t, True
    raise ShapeError(f"locations must have shape (B, 2), got {t.shape}")


def _reshape_keep(t: Tensor, shape) -> Tensor:
    return t.reshape(shape)


# ---------------------------------------------------------------------------
# softargmax
# ---------------------------------------------------------------------------


class SoftargmaxOp(Op):
    """Softmax-weighted center of mass of a score map.

    Input (B, H, W), output (B, 2) as (x, y).  Weights are
    softmax(beta * S) computed with max subtraction.
    """

    @staticmethod
    def forward(node, s, beta):
        if s.ndim != 3 or s.shape[1] == 0 or s.shape[2] == 0:
            raise ShapeError(f"softargmax needs a non-empty (B, H, W) map, got {s.shape}")
        m = s.max(axis=(1, 2), keepdims=True)
        e = np.exp(beta * (s - m))
        w = e / e.sum(axis=(1, 2), keepdims=True)
        h, wid = s.shape[1], s.shape[2]
        xs = np.arange(wid, dtype=np.float64)
        ys = np.arange(h, dtype=np.float64)
        x_bar = (w * xs[None, None, :]).sum(axis=(1, 2))
        y_bar = (w * ys[None, :, None]).sum(axis=(1, 2))
        node.saved = (w, xs, ys, x_bar, y_bar)
        return np.stack([x_bar, y_bar], axis=1)

    @staticmethod
    def backward(node, grad):
        w, xs, ys, x_bar, y_bar = node.saved
        beta = node.meta["beta"]
        gx = grad[:, 0][:, None, None]
        gy = grad[:, 1][:, None, None]
        dx = xs[None, None, :] - x_bar[:, None, None]
        dy = ys[None, :, None] - y_bar[:, None, None]
        return (beta * w * (gx * dx + gy * dy),)


def softargmax(scores, beta: float = 10.0) -> Tensor:
    """Continuous (x, y) peak location of one or a batch of score maps."""
    t = wrap(scores)
    if t.ndim == 2:
        out = SoftargmaxOp.apply(t.reshape((1,) + t.shape), beta=float(beta))
        return out.reshape((2,))
    if t.ndim == 3:
        return SoftargmaxOp.apply(t, beta=float(beta))
    if t.ndim == 4:
        if t.shape[1] != 1:
            raise ShapeError(f"softargmax expects single-channel maps, got {t.shape}")
        return SoftargmaxOp.apply(t.reshape((t.shape[0],) + t.shape[2:]), beta=float(beta))
    raise ShapeError(f"softargmax input must be 2-d, 3-d or 4-d, got {t.shape}")


# ---------------------------------------------------------------------------
# bilinear sampling, cropping, rotation
# ---------------------------------------------------------------------------


def _gather_corners(p: np.ndarray, sx: np.ndarray, sy: np.ndarray):
    """Fetch the four bilinear corners with zero padding outside."""
    b, c, h, w = p.shape
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    bi = np.arange(b, dtype=np.intp)[:, None, None, None]
    ci = np.arange(c, dtype=np.intp)[None, :, None, None]
    vals = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xi_c = np.clip(xi, 0, w - 1)
            yi_c = np.clip(yi, 0, h - 1)
            v = p[bi, ci, yi_c[:, None, :, :], xi_c[:, None, :, :]]
            vals.append(v * valid[:, None, :, :])
    v00, v01, v10, v11 = vals  # v[dy][dx]
    wx = fx[:, None, :, :]
    wy = fy[:, None, :, :]
    out = (
        v00 * (1 - wx) * (1 - wy)
        + v01 * wx * (1 - wy)
        + v10 * (1 - wx) * wy
        + v11 * wx * wy
    )
    return out, (x0, y0, fx, fy, vals)


def _corner_backward(p_shape, grad, sx, sy, saved, need_p, need_xy):
    """Shared backward for bilinear gathers.

    Returns (grad_p, grad_sx, grad_sy); sx/sy grads are summed over
    channels and keep the (B, h, w) sample layout.
    """
    x0, y0, fx, fy, vals = saved
    b, c, h, w = p_shape
    v00, v01, v10, v11 = vals
    wx = fx[:, None, :, :]
    wy = fy[:, None, :, :]
    gp = None
    if need_p:
        gp = np.zeros(p_shape)
        bi = np.arange(b, dtype=np.intp)[:, None, None, None]
        ci = np.arange(c, dtype=np.intp)[None, :, None, None]
        weights = [
            (0, 0, (1 - wx) * (1 - wy)),
            (0, 1, wx * (1 - wy)),
            (1, 0, (1 - wx) * wy),
            (1, 1, wx * wy),
        ]
        for dy, dx, wgt in weights:
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xi_c = np.clip(xi, 0, w - 1)[:, None, :, :]
            yi_c = np.clip(yi, 0, h - 1)[:, None, :, :]
            contrib = grad * wgt * valid[:, None, :, :]
            np.add.at(gp, (bi, ci, yi_c, xi_c), contrib)
    gsx = gsy = None
    if need_xy:
        dout_dsx = (v01 - v00) * (1 - wy) + (v11 - v10) * wy
        dout_dsy = (v10 - v00) * (1 - wx) + (v11 - v01) * wx
        gsx = (grad * dout_dsx).sum(axis=1)
        gsy = (grad * dout_dsy).sum(axis=1)
    return gp, gsx, gsy


def _crop_offsets(size: int) -> np.ndarray:
    # offset of output pixel k from the crop center
    return np.arange(size, dtype=np.float64) - (size - 1) / 2.0


class CropOp(Op):
    """Axis-aligned s-crop of P centered at (x, y), zero padded."""

    @staticmethod
    def forward(node, p, xy, size):
        off = _crop_offsets(size)
        sx = xy[:, 0][:, None, None] + off[None, None, :]
        sy = xy[:, 1][:, None, None] + off[None, :, None]
        sx, sy = np.broadcast_arrays(sx, sy)
        out, saved = _gather_corners(p, sx, sy)
        node.saved = (saved, sx, sy, p.shape)
        return out

    @staticmethod
    def backward(node, grad):
        saved, sx, sy, p_shape = node.saved
        pp, pxy = node.parents
        gp, gsx, gsy = _corner_backward(
            p_shape, grad, sx, sy, saved, pp.requires_grad, pxy.requires_grad
        )
        gxy = None
        if gsx is not None:
            gxy = np.stack([gsx.sum(axis=(1, 2)), gsy.sum(axis=(1, 2))], axis=1)
        return gp, gxy


class RotCropOp(Op):
    """Rotated s-crop: sample grid rotated by -theta about (x, y)."""

    @staticmethod
    def forward(node, p, xy, theta, size):
        off = _crop_offsets(size)
        u = off[None, None, :]
        v = off[None, :, None]
        ct = np.cos(theta)[:, None, None]
        st = np.sin(theta)[:, None, None]
        su = ct * u + st * v
        sv = -st * u + ct * v
        sx = xy[:, 0][:, None, None] + su
        sy = xy[:, 1][:, None, None] + sv
        out, saved = _gather_corners(p, sx, sy)
        node.saved = (saved, sx, sy, su, sv, p.shape)
        return out

    @staticmethod
    def backward(node, grad):
        saved, sx, sy, su, sv, p_shape = node.saved
        pp, pxy, pth = node.parents
        need_xy = pxy.requires_grad or pth.requires_grad
        gp, gsx, gsy = _corner_backward(p_shape, grad, sx, sy, saved, pp.requires_grad, need_xy)
        gxy = gth = None
        if gsx is not None:
            if pxy.requires_grad:
                gxy = np.stack([gsx.sum(axis=(1, 2)), gsy.sum(axis=(1, 2))], axis=1)
            if pth.requires_grad:
                # d su / d theta = sv, d sv / d theta = -su
                gth = (gsx * sv + gsy * (-su)).sum(axis=(1, 2))
        return gp, gxy, gth


def crop(patch, xy, size: int) -> Tensor:
    """Differentiable axis-aligned crop; gradients reach P and (x, y)."""
    p, batched_p = _norm_patch(patch)
    loc, batched_xy = _norm_xy(xy)
    out = CropOp.apply(p, loc, size=int(size))
    if not (batched_p or batched_xy):
        return out.reshape(out.shape[1:])
    return out


def rot_crop(patch, xy, theta, size: int) -> Tensor:
    """Differentiable rotated crop; gradients reach P, (x, y) and theta."""
    p, batched_p = _norm_patch(patch)
    loc, batched_xy = _norm_xy(xy)
    th = wrap(theta)
    if th.ndim == 0:
        th = th.reshape((1,))
    elif th.ndim != 1:
        raise ShapeError(f"theta must be scalar or (B,), got shape {th.shape}")
    out = RotCropOp.apply(p, loc, th, size=int(size))
    if not (batched_p or batched_xy):
        return out.reshape(out.shape[1:])
    return out


def bilinear_sample(image, xy) -> Tensor:
    """Bilinear lookup of one continuous location, zero outside bounds."""
    out = crop(image, xy, 1)
    return out.reshape(out.shape[:-3]) if out.ndim == 4 else out.reshape(())


# ---------------------------------------------------------------------------
# proposal overlap
# ---------------------------------------------------------------------------


def _overlap_terms(x1, x2, side: float):
    """IoU, l1 distance and union area of two axis-aligned squares.

    Inputs are (B, 2) tensors of square centers; the side length is a
    constant.  Intersection per axis is max(0, side - |delta|).
    """
    a, batched = _norm_xy(x1)
    b, batched2 = _norm_xy(x2)
    dx = absolute(a - b)
    ix = relu(side - dx)
    inter = _col(ix, 0) * _col(ix, 1)
    union = 2.0 * side * side - inter
    iou = inter / union
    l1 = _col(dx, 0) + _col(dx, 1)
    return iou, l1, union, batched or batched2


def _col(t: Tensor, j: int) -> Tensor:
    return select(t, axis=1, index=j)


def proposal_overlap(x1, x2, side: float) -> tuple[Tensor, Tensor]:
    """Exact IoU and l1 center distance of two proposal squares."""
    iou, l1, _, batched = _overlap_terms(x1, x2, float(side))
    if not batched:
        return iou.reshape(()), l1.reshape(())
    return iou, l1


def overlap_loss(x1, x2, side: float) -> Tensor:
    """Proposal-overlap objective: 0 at coincident squares, grows with
    separation.

    1 - IoU covers the overlapping regime; once the centers are more
    than 2*side apart in l1, a gated term normalized by sqrt(union)
    keeps a nonvanishing pull between fully disjoint squares.
    """
    iou, l1, union, batched = _overlap_terms(x1, x2, float(side))
    gated = relu(l1 - 2.0 * side) / (union ** 0.5)
    out = 1.0 - iou + gated
    if not batched:
        return out.reshape(())
    return out
