"""Gradient-sign attacks under an L-infinity budget on the [0, 255] pixel scale.

All methods share one loop: compute a gradient (possibly through input
transforms), optionally fold it into an L1-normalized momentum buffer, take a
sign step of size ``alpha`` and clip back into the epsilon ball. They differ
only in where the gradient comes from:

    FGSM   one step of size epsilon
    BIM    plain iterated sign steps
    MIM    momentum on L1-normalized gradients
    DIM    MIM, each iteration randomly resized and padded with probability p
    T/S/R  MIM through one random translation / scaling / rotation
    AIM    MIM on the mean loss of several randomly transformed branches
    MAXMIN AIM with each branch's magnitude chosen as the grid argmin of the
           loss at the new iterate (transforms act as a defense the attack
           must beat)

Attacks run on NCHW batches. Every image gets its own RNG stream seeded from
(seed, image index, method id), so results do not depend on batch layout.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import affine
from .errors import ShapeError, SpecError

PIXEL_MIN, PIXEL_MAX = 0.0, 255.0
METHODS = ("FGSM", "BIM", "MIM", "DIM", "T", "S", "R", "AIM", "MAXMIN")
TRANSFORMS = ("T", "S", "R")
TRANSFORM_NAMES = {"T": "translation", "S": "scaling", "R": "rotation"}
IDENTITY = {"T": 0.0, "S": 1.0, "R": 0.0}
ZERO_GRAD_L1 = 1e-12


def canonical_transforms(transforms):
    """Accepts "T,S,R", "TSR", "translation,rotation" or an iterable; returns canonical order."""
    if isinstance(transforms, str):
        items = [t for t in transforms.replace("+", ",").split(",") if t]
        if len(items) == 1 and len(items[0]) > 1 and items[0].upper() not in ("TRANSLATION",
                                                                               "SCALING",
                                                                               "ROTATION"):
            items = list(items[0])
    else:
        items = list(transforms)
    names = {v: k for k, v in TRANSFORM_NAMES.items()}
    out = set()
    for item in items:
        key = item.strip()
        key = names.get(key.lower(), key.upper())
        if key not in TRANSFORMS:
            raise SpecError(f"unknown transform {item!r}")
        out.add(key)
    return tuple(t for t in TRANSFORMS if t in out)


def _with_identity(values, identity):
    values = sorted(float(v) for v in values)
    if not values:
        return values
    nearest = min(range(len(values)), key=lambda i: abs(values[i] - identity))
    if abs(values[nearest] - identity) < 1e-9:
        values[nearest] = identity
    else:
        values = sorted(values + [identity])
    return values


def _linspace_grid(low, high, points, identity):
    return tuple(_with_identity(np.linspace(low, high, points), identity))


@dataclass(frozen=True)
class TransformGrid:
    """Finite candidate magnitudes per transform kind for the argmin search."""

    theta_candidates: tuple
    scale_candidates: tuple
    shift_candidates: tuple

    def __post_init__(self):
        for kind in TRANSFORMS:
            values = self.candidates(kind)
            if not values:
                raise SpecError(f"{TRANSFORM_NAMES[kind]} grid is empty")
            if list(values) != sorted(values):
                raise SpecError(f"{TRANSFORM_NAMES[kind]} grid must be sorted")
            if IDENTITY[kind] not in values:
                raise SpecError(f"{TRANSFORM_NAMES[kind]} grid must contain {IDENTITY[kind]}")
        if min(self.scale_candidates) <= 0:
            raise SpecError("scale candidates must be positive")

    def candidates(self, kind):
        return {"T": self.shift_candidates, "S": self.scale_candidates,
                "R": self.theta_candidates}[kind]

    @classmethod
    def evenly_spaced(cls, points, theta_range, scale_range, shift_range):
        if points < 1:
            raise SpecError("grid needs at least one point")
        return cls(_linspace_grid(*theta_range, points, 0.0),
                   _linspace_grid(*scale_range, points, 1.0),
                   _linspace_grid(*shift_range, points, 0.0))

    @classmethod
    def identity(cls):
        return cls((0.0,), (1.0,), (0.0,))


@dataclass(frozen=True)
class AttackSpec:
    method: str
    epsilon: float = 16.0
    iterations: int = 10
    alpha: float | None = None
    mu: float = 1.0
    prob: float = 0.5
    transforms: tuple = TRANSFORMS
    theta_range: tuple = (-18.0, 18.0)
    scale_range: tuple = (0.9, 1.1)
    # None: +/- shift_fraction * image height
    shift_range: tuple | None = None
    shift_fraction: float = 0.05
    grid_points: int = 7
    grids: TransformGrid | None = None
    dim_ratio: float = 1.1
    seed: int = 0

    def __post_init__(self):
        method = self.method.upper()
        method = {"TIM": "T", "SIM": "S", "RIM": "R"}.get(method, method)
        if method not in METHODS:
            raise SpecError(f"unknown attack method {self.method!r}")
        object.__setattr__(self, "method", method)
        if method in TRANSFORMS:
            transforms = (method,)
        elif method in ("AIM", "MAXMIN"):
            transforms = canonical_transforms(self.transforms)
        else:
            transforms = ()
        object.__setattr__(self, "transforms", transforms)
        if method == "MAXMIN" and not transforms:
            raise SpecError("MAXMIN needs at least one active transform")
        if method == "AIM" and len(transforms) < 2:
            raise SpecError("AIM averages at least two transforms")
        if not self.epsilon > 0:
            raise SpecError("epsilon must be positive")
        if self.iterations < 1:
            raise SpecError("iterations must be >= 1")
        if self.mu < 0:
            raise SpecError("mu must be non-negative")
        if not 0 <= self.prob <= 1:
            raise SpecError("prob must lie in [0, 1]")
        if self.dim_ratio < 1 or self.dim_ratio > 1.25:
            raise SpecError("dim_ratio must lie in [1, 1.25]")
        for name in ("theta_range", "scale_range", "shift_range"):
            value = getattr(self, name)
            if value is not None:
                value = tuple(float(v) for v in value)
                if len(value) != 2 or value[0] > value[1]:
                    raise SpecError(f"{name} must be an ordered (low, high) pair")
                object.__setattr__(self, name, value)
        if self.scale_range[0] <= 0:
            raise SpecError("scale range must be positive")

    @property
    def step(self):
        if self.method == "FGSM":
            return self.epsilon
        return self.alpha if self.alpha is not None else self.epsilon / self.iterations

    @property
    def steps(self):
        return 1 if self.method == "FGSM" else self.iterations

    def shift_bounds(self, height):
        if self.shift_range is not None:
            return self.shift_range
        m = self.shift_fraction * height
        return (-m, m)

    def ranges(self, height):
        return {"T": self.shift_bounds(height), "S": self.scale_range, "R": self.theta_range}

    def grid(self, height):
        if self.grids is not None:
            return self.grids
        return TransformGrid.evenly_spaced(self.grid_points, self.theta_range, self.scale_range,
                                           self.shift_bounds(height))

    @property
    def label(self):
        if self.method in TRANSFORMS:
            return self.method + "IM"
        if self.method in ("AIM", "MAXMIN"):
            return f"{self.method}-{'+'.join(self.transforms)}"
        return self.method

    def to_dict(self):
        d = asdict(self)
        if self.grids is not None:
            d["grids"] = asdict(self.grids)
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class AttackState:
    g: np.ndarray
    params: dict
    k: int = 0


@dataclass
class AttackResult:
    adversarial: np.ndarray
    loss_trace: np.ndarray
    final_params: dict
    state: AttackState
    # transform magnitudes used at each iteration, keyed by transform name
    param_history: list = field(default_factory=list)
    success: dict = field(default_factory=dict)


def clip_ball(candidate, original, epsilon):
    """Clamp into [original - eps, original + eps], then into the pixel range."""
    c = np.asarray(candidate, dtype=np.float64)
    o = np.asarray(original, dtype=np.float64)
    if c.shape != o.shape:
        raise ShapeError(f"candidate {c.shape} and original {o.shape} differ", "shape")
    c = np.minimum(np.maximum(c, o - epsilon), o + epsilon)
    return np.minimum(np.maximum(c, PIXEL_MIN), PIXEL_MAX)


def l1_normalize(grad):
    """Per-image ``grad / ||grad||_1``; images with ||grad||_1 < 1e-12 map to zero."""
    norms = np.abs(grad).reshape(len(grad), -1).sum(axis=1)
    tiny = norms < ZERO_GRAD_L1
    safe = np.where(tiny, 1.0, norms)
    out = grad / safe.reshape((-1,) + (1,) * (grad.ndim - 1))
    out[tiny] = 0.0
    return out


def rng_streams(seed, indices, method):
    method_id = METHODS.index(method)
    return [np.random.default_rng([int(seed), int(i), method_id]) for i in indices]


def transform_matrices(kind, values, height, width):
    """(N, 3, 3) matrices for one transform kind; rotation/scaling act about the center."""
    v = np.asarray(values, dtype=np.float64)
    n = v.shape[0]
    m = np.zeros((n, 3, 3))
    m[:, 2, 2] = 1.0
    if kind == "T":
        m[:, 0, 0] = m[:, 1, 1] = 1.0
        m[:, 0, 2] = m[:, 1, 2] = v
        return m
    if kind == "S":
        a, b = v, np.zeros(n)
        c, d = np.zeros(n), v
    elif kind == "R":
        t = np.radians(v)
        cos = np.where(v == 0, 1.0, np.cos(t))
        sin = np.where(v == 0, 0.0, np.sin(t))
        a, b, c, d = cos, sin, -sin, cos
    else:
        raise SpecError(f"unknown transform {kind!r}")
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    m[:, 0, 0], m[:, 0, 1], m[:, 1, 0], m[:, 1, 1] = a, b, c, d
    m[:, 0, 2] = cx - (a * cx + b * cy)
    m[:, 1, 2] = cy - (c * cx + d * cy)
    return m


def branch_loss_grad(model, x, labels, kind, values):
    """Loss of each image after its own transform, and the gradient w.r.t. the untransformed image."""
    plan = affine.warp_plan(transform_matrices(kind, values, *x.shape[2:]), *x.shape[2:])
    losses, grad = model.loss_and_input_grad(plan.apply(x), labels)
    return losses, plan.adjoint(grad)


def branch_losses(loss_fn, x, labels, kind, value):
    """Losses of the whole batch under one shared transform magnitude."""
    plan = affine.warp_plan(transform_matrices(kind, [value], *x.shape[2:]), *x.shape[2:])
    return loss_fn(plan.apply(x), labels)


def branch_mean(values):
    """Mean over branches; an image whose branches agree exactly gets that value back unchanged."""
    if len(values) == 1:
        return values[0]
    out = np.mean(np.stack(values), axis=0)
    first = values[0]
    axes = tuple(range(1, first.ndim))
    same = np.ones(len(first), dtype=bool)
    for v in values[1:]:
        same &= np.all(v == first, axis=axes) if axes else (v == first)
    out[same] = first[same]
    return out


def select_transform_params(loss_fn, x, labels, kinds, grid):
    """Per-branch grid argmin of the loss at ``x`` (ties go to the lowest candidate index).

    The averaged branch loss is a sum of terms each depending on one
    branch's magnitude, so the tuple of per-branch argmins is the argmin over
    the Cartesian grid product. Returns ``(params, tables)`` where
    ``tables[kind]`` is the (n_candidates, N) loss table.
    """
    params, tables = {}, {}
    for kind in kinds:
        cands = grid.candidates(kind)
        table = np.stack([branch_losses(loss_fn, x, labels, kind, c) for c in cands])
        tables[kind] = table
        params[kind] = np.asarray(cands)[np.argmin(table, axis=0)]
    return params, tables


# ----------------------------------------------------------------------------
# gradient sources
# ----------------------------------------------------------------------------

class _Plain:
    transformed = False

    def __init__(self, model, spec, indices):
        self.model = model

    def __call__(self, x, labels, k):
        return self.model.loss_and_input_grad(x, labels)


class _Diverse:
    """Random resize to [H, ceil(r*H)], random placement in a ceil(r*H) canvas, resize back to H."""

    transformed = True

    def __init__(self, model, spec, indices):
        self.model = model
        self.spec = spec
        self.rngs = rng_streams(spec.seed, indices, "DIM")

    def __call__(self, x, labels, k):
        h, w = x.shape[2:]
        canvas = math.ceil(self.spec.dim_ratio * h)
        applied, targets, tops, lefts = [], [], [], []
        for i, rng in enumerate(self.rngs):
            if rng.random() < self.spec.prob:
                t = int(rng.integers(h, canvas + 1))
                applied.append(i)
                targets.append(t)
                tops.append(int(rng.integers(0, canvas - t + 1)))
                lefts.append(int(rng.integers(0, canvas - t + 1)))
        if not applied:
            return self.model.loss_and_input_grad(x, labels)
        applied = np.asarray(applied)
        place = affine.resize_pad_plan((h, w), targets, tops, lefts, (canvas, canvas))
        back = affine.resize_plan((canvas, canvas), (h, w))
        xt = x.copy()
        xt[applied] = back.apply(place.apply(x[applied]))
        losses, grad = self.model.loss_and_input_grad(xt, labels)
        grad[applied] = place.adjoint(back.adjoint(grad[applied]))
        return losses, grad


class _RandomBranches:
    """One uniformly drawn magnitude per active transform per image per iteration."""

    transformed = True

    def __init__(self, model, spec, indices):
        self.model = model
        self.kinds = spec.transforms
        self.spec = spec
        self.rngs = rng_streams(spec.seed, indices, spec.method)
        self.params = {kind: np.full(len(indices), IDENTITY[kind]) for kind in self.kinds}

    def __call__(self, x, labels, k):
        ranges = self.spec.ranges(x.shape[2])
        draws = np.array([[rng.uniform(*ranges[kind]) for kind in self.kinds] for rng in self.rngs])
        draws = draws.reshape(len(self.rngs), len(self.kinds))
        losses, grads = [], []
        for j, kind in enumerate(self.kinds):
            self.params[kind] = draws[:, j]
            lb, gb = branch_loss_grad(self.model, x, labels, kind, draws[:, j])
            losses.append(lb)
            grads.append(gb)
        return branch_mean(losses), branch_mean(grads)


class _MinBranches:
    """Branches use the magnitudes picked by the previous iteration's grid argmin."""

    transformed = True

    def __init__(self, model, spec, indices, height):
        self.model = model
        self.kinds = spec.transforms
        self.grid = spec.grid(height)
        self.params = {kind: np.full(len(indices), IDENTITY[kind]) for kind in self.kinds}

    def __call__(self, x, labels, k):
        losses, grads = [], []
        for kind in self.kinds:
            lb, gb = branch_loss_grad(self.model, x, labels, kind, self.params[kind])
            losses.append(lb)
            grads.append(gb)
        return branch_mean(losses), branch_mean(grads)

    def after_step(self, x_next, labels):
        self.params, _ = select_transform_params(self.model.losses, x_next, labels, self.kinds,
                                                 self.grid)


# ----------------------------------------------------------------------------
# the shared loop
# ----------------------------------------------------------------------------

def _prepare(model, image, label):
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if x.ndim != 4:
        raise ShapeError(f"expected CHW image or NCHW batch, got rank {x.ndim}", "rank")
    if labels.shape != (len(x),):
        raise ShapeError(f"{len(labels)} labels for {len(x)} images", "labels")
    return x, labels, single


def _run(model, image, label, spec, source, indices=None):
    x0, labels, single = _prepare(model, image, label)
    n = len(x0)
    indices = np.arange(n) if indices is None else np.asarray(indices)
    if source == "min":
        grad_source = _MinBranches(model, spec, indices, x0.shape[2])
    else:
        grad_source = source(model, spec, indices)
    use_momentum = spec.method not in ("FGSM", "BIM")
    alpha = spec.step
    state = AttackState(np.zeros_like(x0), getattr(grad_source, "params", {}), 0)
    x = x0.copy()
    trace, history = [], []
    for k in range(spec.steps):
        losses, grad = grad_source(x, labels, k)
        history.append({TRANSFORM_NAMES[kind]: v.copy()
                        for kind, v in getattr(grad_source, "params", {}).items()})
        trace.append(model.losses(x, labels) if grad_source.transformed else losses)
        if use_momentum:
            state.g = spec.mu * state.g + l1_normalize(grad)
            direction = np.sign(state.g)
        else:
            direction = np.sign(grad)
        x = clip_ball(x + alpha * direction, x0, spec.epsilon)
        if hasattr(grad_source, "after_step"):
            grad_source.after_step(x, labels)
        state.params = getattr(grad_source, "params", {})
        state.k = k + 1
    trace.append(model.losses(x, labels))
    trace = np.stack(trace)
    params = {TRANSFORM_NAMES[k]: v.copy() for k, v in state.params.items()}
    if single:
        x, trace = x[0], trace[:, 0]
        params = {k: float(v[0]) for k, v in params.items()}
        history = [{k: float(v[0]) for k, v in h.items()} for h in history]
        state.g = state.g[0]
    return AttackResult(x, trace, params, state, history)


def fgsm(model, image, label, spec=None, indices=None):
    spec = spec or AttackSpec("FGSM")
    return _run(model, image, label, replace(spec, method="FGSM"), _Plain, indices)


def bim(model, image, label, spec=None, indices=None):
    spec = spec or AttackSpec("BIM")
    return _run(model, image, label, replace(spec, method="BIM"), _Plain, indices)


def mim(model, image, label, spec=None, indices=None):
    spec = spec or AttackSpec("MIM")
    return _run(model, image, label, replace(spec, method="MIM"), _Plain, indices)


def dim(model, image, label, spec=None, indices=None):
    spec = spec or AttackSpec("DIM")
    return _run(model, image, label, replace(spec, method="DIM"), _Diverse, indices)


def single_transform_attack(model, image, label, spec, indices=None):
    if spec.method not in TRANSFORMS:
        raise SpecError(f"single-transform attack needs method T, S or R, got {spec.method}")
    return _run(model, image, label, spec, _RandomBranches, indices)


def aim(model, image, label, spec=None, indices=None):
    spec = spec or AttackSpec("AIM")
    return _run(model, image, label, replace(spec, method="AIM"), _RandomBranches, indices)


def maxmin(model, image, label, spec=None, indices=None):
    spec = spec or AttackSpec("MAXMIN")
    return _run(model, image, label, replace(spec, method="MAXMIN"), "min", indices)


_DISPATCH = {
    "FGSM": fgsm, "BIM": bim, "MIM": mim, "DIM": dim,
    "T": single_transform_attack, "S": single_transform_attack, "R": single_transform_attack,
    "AIM": aim, "MAXMIN": maxmin,
}


def run_attack(spec, model, image, label, indices=None):
    if not isinstance(spec, AttackSpec):
        raise SpecError("run_attack needs an AttackSpec")
    return _DISPATCH[spec.method](model, image, label, spec, indices=indices)
