"""Affine image transforms applied by inverse warping with bilinear sampling.

Coordinates: pixel (row i, column j) sits at the continuous point (x=j, y=i),
x to the right and y downward. A warp with matrix ``M`` fills output pixel
``p`` by sampling the input at ``M^-1 p``; samples falling outside the image
read zero. Every warp is linear in the pixel values, and ``WarpPlan.adjoint``
is its exact transpose, which is how gradients reach the untransformed image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, SingularMatrixError, SpecError


@dataclass(frozen=True)
class AffineParams:
    theta_deg: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise SpecError(f"scale must be positive, got {self.scale}")
        if not math.isfinite(self.theta_deg):
            raise SpecError("theta must be finite")

    def matrix(self, height, width):
        """Rotation and scaling about the image center, followed by translation."""
        core = centered(rotation_matrix(self.theta_deg) @ scaling_matrix(self.scale), height, width)
        return translation_matrix(self.tx, self.ty) @ core


def translation_matrix(tx, ty):
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def scaling_matrix(s):
    if not s > 0:
        raise SpecError(f"scale must be positive, got {s}")
    return np.array([[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix(theta_deg):
    # sign convention [[cos, sin], [-sin, cos]] taken verbatim
    if theta_deg == 0:
        return np.eye(3)
    t = math.radians(theta_deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def centered(matrix, height, width):
    """Conjugate ``matrix`` so that it acts about ((W-1)/2, (H-1)/2) instead of the origin."""
    if height <= 0 or width <= 0:
        raise ShapeError("extents must be positive", "extent")
    m = np.asarray(matrix, dtype=np.float64)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    a = m[:2, :2]
    # T(c) . M . T(-c), written out so that identity parts stay exact
    shift = m[:2, 2] + np.array([cx, cy]) - a @ np.array([cx, cy])
    out = np.eye(3)
    out[:2, :2] = a
    out[:2, 2] = shift
    return out


def apply_to_point(matrix, x, y):
    p = np.asarray(matrix) @ np.array([x, y, 1.0])
    return float(p[0]), float(p[1])


def _affine_inverse(matrices):
    """Closed-form inverse of a stack of (…, 3, 3) affine matrices."""
    m = np.asarray(matrices, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        raise ShapeError(f"affine matrix must be 3x3, got {m.shape[-2:]}", "matrix")
    if np.any(m[..., 2, :] != np.array([0.0, 0.0, 1.0])):
        raise SpecError("affine matrix last row must be (0, 0, 1)")
    a, b, c, d = m[..., 0, 0], m[..., 0, 1], m[..., 1, 0], m[..., 1, 1]
    det = a * d - b * c
    if np.any(np.abs(det) <= 1e-12):
        raise SingularMatrixError("affine matrix is singular")
    inv = np.zeros_like(m)
    identity_part = (b == 0) & (c == 0) & (a == 1) & (d == 1)
    ia = np.where(identity_part, 1.0, d / det)
    ib = np.where(identity_part, 0.0, -b / det)
    ic = np.where(identity_part, 0.0, -c / det)
    id_ = np.where(identity_part, 1.0, a / det)
    tx, ty = m[..., 0, 2], m[..., 1, 2]
    inv[..., 0, 0], inv[..., 0, 1], inv[..., 1, 0], inv[..., 1, 1] = ia, ib, ic, id_
    inv[..., 0, 2] = -(ia * tx + ib * ty)
    inv[..., 1, 2] = -(ic * tx + id_ * ty)
    inv[..., 2, 2] = 1.0
    return inv


@dataclass(frozen=True)
class WarpPlan:
    """Up to four (source index, weight) pairs per output pixel, per image.

    ``index``/``weight`` have shape (N, P_out, 4). ``identity[n]`` marks plans
    that reproduce image ``n`` exactly; those images are copied, not blended.
    """

    in_hw: tuple
    out_hw: tuple
    index: np.ndarray
    weight: np.ndarray
    identity: np.ndarray

    def __len__(self):
        return self.index.shape[0]

    def _check(self, x, hw, what):
        if x.ndim != 4 or x.shape[2:] != hw:
            raise ShapeError(f"{what} shape {x.shape} does not match plan extent {hw}", what)
        if len(self) not in (1, x.shape[0]):
            raise ShapeError(f"plan holds {len(self)} images, batch has {x.shape[0]}", "batch")

    def apply(self, images):
        x = np.asarray(images, dtype=np.float64)
        self._check(x, self.in_hw, "input")
        n, c = x.shape[:2]
        flat = x.reshape(n, c, -1)
        idx = np.broadcast_to(self.index, (n,) + self.index.shape[1:])
        w = np.broadcast_to(self.weight, idx.shape)
        vals = np.take_along_axis(flat, idx.reshape(n, 1, -1), axis=2)
        vals = vals.reshape(n, c, -1, 4)
        wb = w[:, None]
        out = (vals[..., 0] * wb[..., 0] + vals[..., 1] * wb[..., 1]
               + vals[..., 2] * wb[..., 2] + vals[..., 3] * wb[..., 3])
        out = out.reshape((n, c) + self.out_hw)
        ident = np.broadcast_to(self.identity, (n,))
        if ident.any():
            out[ident] = x[ident]
        return out

    def adjoint(self, grad_out):
        g = np.asarray(grad_out, dtype=np.float64)
        self._check(g, self.out_hw, "grad_out")
        n, c = g.shape[:2]
        p_in = self.in_hw[0] * self.in_hw[1]
        idx = np.broadcast_to(self.index, (n,) + self.index.shape[1:])
        w = np.broadcast_to(self.weight, idx.shape)
        contrib = g.reshape(n, c, -1, 1) * w[:, None]
        base = (np.arange(n * c).reshape(n, c, 1, 1) * p_in)
        flat_idx = (base + idx[:, None]).ravel()
        out = np.bincount(flat_idx, weights=contrib.ravel(), minlength=n * c * p_in)
        out = out.reshape((n, c) + self.in_hw)
        ident = np.broadcast_to(self.identity, (n,))
        if ident.any():
            out[ident] = g[ident]
        return out


def plan_from_coords(ys, xs, in_hw, out_hw, valid=None):
    """Bilinear plan sampling the input at continuous points ``(xs, ys)``.

    ``ys``/``xs`` have shape (N, H_out*W_out). Corners outside the input
    contribute nothing (zero fill); ``valid`` masks whole output pixels.
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    h, w = in_hw
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = ys - y0
    fx = xs - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    corners_y = np.stack([y0, y0, y0 + 1, y0 + 1], axis=-1)
    corners_x = np.stack([x0, x0 + 1, x0, x0 + 1], axis=-1)
    weight = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    inside = (corners_y >= 0) & (corners_y < h) & (corners_x >= 0) & (corners_x < w)
    if valid is not None:
        inside &= np.asarray(valid)[..., None]
    weight = np.where(inside, weight, 0.0)
    index = np.where(inside, corners_y * w + corners_x, 0)

    identity = np.zeros(ys.shape[0], dtype=bool)
    if tuple(in_hw) == tuple(out_hw):
        rows, cols = np.divmod(np.arange(h * w), w)
        identity = np.all((ys == rows) & (xs == cols), axis=1)
        if valid is not None:
            identity &= np.all(valid, axis=1)
    return WarpPlan(tuple(in_hw), tuple(out_hw), index, weight, identity)


def warp_plan(matrices, height, width):
    """Plan for warping (H, W) images; ``matrices`` is (3, 3) or (N, 3, 3)."""
    m = np.asarray(matrices, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    inv = _affine_inverse(m)
    rows, cols = np.divmod(np.arange(height * width), width)
    rows = rows.astype(np.float64)
    cols = cols.astype(np.float64)
    xs = inv[:, 0, 0, None] * cols + inv[:, 0, 1, None] * rows + inv[:, 0, 2, None]
    ys = inv[:, 1, 0, None] * cols + inv[:, 1, 1, None] * rows + inv[:, 1, 2, None]
    return plan_from_coords(ys, xs, (height, width), (height, width))


def _as_batch(image):
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected CHW or NCHW image, got rank {x.ndim}", "rank")


def warp(image, matrix):
    """Warp a CHW image (or NCHW batch) by ``matrix`` (3x3 or one per image)."""
    x, single = _as_batch(image)
    out = warp_plan(matrix, *x.shape[2:]).apply(x)
    return out[0] if single else out


def warp_adjoint(grad_out, matrix, in_shape=None):
    """Transpose of ``warp(., matrix)`` applied to ``grad_out``."""
    g, single = _as_batch(grad_out)
    if in_shape is not None and tuple(in_shape)[-2:] != g.shape[2:]:
        raise ShapeError(f"in_shape {in_shape} does not match grad extent {g.shape[2:]}",
                         "in_shape")
    out = warp_plan(matrix, *g.shape[2:]).adjoint(g)
    return out[0] if single else out


def resize_plan(in_hw, out_hw):
    """Half-pixel bilinear resize with edge clamping."""
    (hi, wi), (ho, wo) = in_hw, out_hw
    rows, cols = np.divmod(np.arange(ho * wo), wo)
    ys = np.clip((rows + 0.5) * (hi / ho) - 0.5, 0, hi - 1)
    xs = np.clip((cols + 0.5) * (wi / wo) - 0.5, 0, wi - 1)
    return plan_from_coords(ys[None], xs[None], (hi, wi), (ho, wo))


def resize_pad_plan(in_hw, targets, pad_tops, pad_lefts, canvas_hw=None):
    """Per-image plan: resize to ``target x target`` and place at (top, left) in a zero canvas."""
    hi, wi = in_hw
    canvas_hw = tuple(canvas_hw or in_hw)
    ch, cw = canvas_hw
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    tops = np.atleast_1d(np.asarray(pad_tops, dtype=np.int64))
    lefts = np.atleast_1d(np.asarray(pad_lefts, dtype=np.int64))
    limit = 1.25 * max(hi, wi)
    if np.any(targets < 1) or np.any(targets > limit):
        raise SpecError(f"resize target must lie in [1, {limit:g}]")
    if (np.any(tops < 0) or np.any(lefts < 0) or np.any(tops + targets > ch)
            or np.any(lefts + targets > cw)):
        raise SpecError("padding places the resized image outside the canvas")
    rows, cols = np.divmod(np.arange(ch * cw), cw)
    r = rows[None] - tops[:, None]
    c = cols[None] - lefts[:, None]
    t = targets[:, None].astype(np.float64)
    valid = (r >= 0) & (r < t) & (c >= 0) & (c < t)
    ys = np.clip((r + 0.5) * (hi / t) - 0.5, 0, hi - 1)
    xs = np.clip((c + 0.5) * (wi / t) - 0.5, 0, wi - 1)
    return plan_from_coords(ys, xs, (hi, wi), canvas_hw, valid=valid)


def resize_and_pad(image, target, pad_top, pad_left, canvas=None):
    """Bilinear resize to ``target`` square, zero-padded into the original (or ``canvas``) extent."""
    x, single = _as_batch(image)
    canvas_hw = None if canvas is None else (canvas, canvas)
    out = resize_pad_plan(x.shape[2:], target, pad_top, pad_left, canvas_hw).apply(x)
    return out[0] if single else out
