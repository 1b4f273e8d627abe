"""Variational construction of unit-velocity coordinates on a grid.

Instead of tracing characteristics, minimize over N grid-sampled functions
y_1..y_N the functional

    A = integral of sum_i (<grad y_i, P> - 1)^2
    B = integral of sum_{i<j} <grad y_i, grad y_j>^2

A drives every coordinate to advance at unit rate along the flow, B keeps the
gradients mutually orthogonal so the map stays invertible.  The minimizer is a
rotated flowbox; a fixed linear recombination turns it into flowbox form.

Derivatives are second-order finite differences (central inside, one-sided at
the boundary); the loss gradient is the exact adjoint of those stencils, so
descent behaves like plain calculus on the discretized objective.  fit()
descends a coarse-to-fine ladder of grids, annealing a smoothing filter on
the gradient and jumping loss valleys with exact recombination moves, which
is what it takes to land in the flowbox basin from a random affine start.
"""
from __future__ import annotations

import dataclasses
import json
from typing import Optional, Sequence, Union

import numpy as np

from .dynsys import VectorField

__all__ = [
    "GridField",
    "FitConfig",
    "FitResult",
    "grid_axes",
    "diff_axis",
    "diff_axis_T",
    "trapezoid_weights",
    "loss",
    "loss_gradient",
    "fit",
    "rotate_to_flowbox",
    "save_grid",
    "load_grid",
]


def grid_axes(box: np.ndarray, shape: Sequence[int]) -> list:
    box = np.asarray(box, dtype=float)
    return [np.linspace(box[a, 0], box[a, 1], int(shape[a])) for a in range(len(shape))]


@dataclasses.dataclass(frozen=True, eq=False)
class GridField:
    """N coordinate functions sampled on a regular grid over a box.

    values[i] holds y_i on the grid; values has shape (N, *shape).
    """

    box: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        box = np.asarray(self.box, dtype=float)
        values = np.asarray(self.values, dtype=float)
        n = box.shape[0]
        if box.shape != (n, 2):
            raise ValueError("box must have shape (N, 2)")
        if np.any(box[:, 1] <= box[:, 0]):
            raise ValueError("box must have lo < hi on every axis")
        if values.ndim != n + 1 or values.shape[0] != n:
            raise ValueError(
                f"values must have shape (N, *grid shape), got {values.shape}"
            )
        if any(s < 3 for s in values.shape[1:]):
            raise ValueError("need at least 3 nodes per axis")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.box.shape[0]

    @property
    def shape(self) -> tuple:
        return self.values.shape[1:]

    @property
    def axes(self) -> list:
        return grid_axes(self.box, self.shape)

    @property
    def spacings(self) -> np.ndarray:
        return np.array(
            [(self.box[a, 1] - self.box[a, 0]) / (self.shape[a] - 1)
             for a in range(self.dim)]
        )

    def mesh(self) -> np.ndarray:
        """Node coordinates, shape (N, *shape)."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=0)


@dataclasses.dataclass(frozen=True)
class FitConfig:
    """Knobs for fit().

    iterations is the total step budget; with a random-affine start it is
    split across the coarse-to-fine ladder (coarser levels get geometrically
    smaller shares, the requested grid gets the rest).  target > 0 stops the
    final level early once both node-mean defects drop below it; the default
    0 runs the full budget.  init is either "random-affine" or a GridField
    on the same box/shape, which is polished in place without the ladder.
    """

    step_size: float = 1.0
    momentum: float = 0.9
    iterations: int = 5000
    weight_a: float = 1.0
    weight_b: float = 1.0
    seed: int = 0
    target: float = 0.0
    max_backtracks: int = 30
    init: Union[str, GridField] = "random-affine"

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.weight_a < 0 or self.weight_b < 0:
            raise ValueError("weights must be >= 0")
        if self.target < 0:
            raise ValueError("target must be >= 0")
        if isinstance(self.init, str) and self.init != "random-affine":
            raise ValueError("init must be 'random-affine' or a GridField")


# ---------------------------------------------------------------------------
# Stencils


def diff_axis(u: np.ndarray, h: float, axis: int) -> np.ndarray:
    """d/dx along one axis: central interior, one-sided second order at edges."""
    u = np.moveaxis(np.asarray(u, dtype=float), axis, 0)
    out = np.empty_like(u)
    inv = 1.0 / (2.0 * h)
    out[1:-1] = (u[2:] - u[:-2]) * inv
    out[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) * inv
    out[-1] = (3.0 * u[-1] - 4.0 * u[-2] + u[-3]) * inv
    return np.moveaxis(out, 0, axis)


def diff_axis_T(v: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Transpose of diff_axis in the plain Euclidean inner product.

    Built by scattering each stencil row back onto its columns, so it stays
    the exact adjoint for any axis length >= 3.
    """
    v = np.moveaxis(np.asarray(v, dtype=float), axis, 0)
    out = np.zeros_like(v)
    inv = 1.0 / (2.0 * h)
    out[:-2] += -inv * v[1:-1]
    out[2:] += inv * v[1:-1]
    out[0] += -3.0 * inv * v[0]
    out[1] += 4.0 * inv * v[0]
    out[2] += -inv * v[0]
    out[-1] += 3.0 * inv * v[-1]
    out[-2] += -4.0 * inv * v[-1]
    out[-3] += inv * v[-1]
    return np.moveaxis(out, 0, axis)


def trapezoid_weights(box: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Node quadrature weights; sums exactly to the box volume."""
    box = np.asarray(box, dtype=float)
    w = np.ones(())
    for a, n in enumerate(shape):
        h = (box[a, 1] - box[a, 0]) / (n - 1)
        wa = np.full(n, h)
        wa[0] = wa[-1] = h / 2.0
        w = np.multiply.outer(w, wa)
    return w


# ---------------------------------------------------------------------------
# Loss and its exact gradient


def _field_on_grid(field: VectorField, grid_box, shape) -> np.ndarray:
    box = np.asarray(grid_box, dtype=float)
    if not (field.contains(box[:, 0]) and field.contains(box[:, 1])):
        raise ValueError(
            f"grid box {box.tolist()} is not inside the domain of {field.name}"
        )
    mesh = np.stack(np.meshgrid(*grid_axes(box, shape), indexing="ij"), axis=0)
    return field.eval_grid(mesh)


def _raise_non_finite(arrays, box, shape, what):
    for arr in arrays:
        bad = np.argwhere(~np.isfinite(arr))
        if bad.size:
            idx = tuple(int(k) for k in bad[0])
            axes = grid_axes(box, shape)
            # arr leads with the coordinate index for gradient-like arrays
            node = idx[-len(shape):]
            coords = [float(axes[a][node[a]]) for a in range(len(shape))]
            raise FloatingPointError(
                f"non-finite {what} at node {node} (x = {coords})"
            )


def _terms(values, p_vals, spacings):
    """Shared pieces: per-coordinate gradients g, unit defects u, overlaps s."""
    n = values.shape[0]
    g = [
        [diff_axis(values[i], spacings[a], a) for a in range(n)]
        for i in range(n)
    ]
    u = [
        sum(g[i][a] * p_vals[a] for a in range(n)) - 1.0
        for i in range(n)
    ]
    s = {}
    for i in range(n):
        for j in range(i + 1, n):
            s[(i, j)] = sum(g[i][a] * g[j][a] for a in range(n))
    return g, u, s


def _loss_parts(values, p_vals, w, spacings):
    g, u, s = _terms(values, p_vals, spacings)
    a_term = sum(float(np.sum(w * ui * ui)) for ui in u)
    b_term = sum(float(np.sum(w * sij * sij)) for sij in s.values())
    return g, u, s, a_term, b_term


def loss(grid: GridField, field: VectorField, weight_a: float = 1.0,
         weight_b: float = 1.0) -> tuple:
    """(A, B, total) of the discretized functional over the grid box."""
    p_vals = _field_on_grid(field, grid.box, grid.shape)
    w = trapezoid_weights(grid.box, grid.shape)
    _, u, s, a_term, b_term = _loss_parts(grid.values, p_vals, w, grid.spacings)
    total = weight_a * a_term + weight_b * b_term
    if not np.isfinite(total):
        _raise_non_finite(
            [grid.values] + u + list(s.values()), grid.box, grid.shape, "loss term"
        )
    return a_term, b_term, total


def _gradient(values, p_vals, w, spacings, weight_a, weight_b):
    n = values.shape[0]
    g, u, s = _terms(values, p_vals, spacings)
    out = np.zeros_like(values)
    for i in range(n):
        acc = np.zeros_like(values[i])
        for a in range(n):
            src = 2.0 * weight_a * w * u[i] * p_vals[a]
            if weight_b != 0.0:
                for j in range(n):
                    if j == i:
                        continue
                    sij = s[(min(i, j), max(i, j))]
                    src = src + 2.0 * weight_b * w * sij * g[j][a]
            acc += diff_axis_T(src, spacings[a], a)
        out[i] = acc
    a_term = sum(float(np.sum(w * ui * ui)) for ui in u)
    b_term = sum(float(np.sum(w * sij * sij)) for sij in s.values())
    return out, a_term, b_term


def loss_gradient(grid: GridField, field: VectorField, weight_a: float = 1.0,
                  weight_b: float = 1.0) -> np.ndarray:
    """d(total)/d(values): exact adjoint of the stencil expressions."""
    p_vals = _field_on_grid(field, grid.box, grid.shape)
    w = trapezoid_weights(grid.box, grid.shape)
    grad, _, _ = _gradient(
        grid.values, p_vals, w, grid.spacings, weight_a, weight_b
    )
    if not np.all(np.isfinite(grad)):
        _raise_non_finite([grad], grid.box, grid.shape, "loss gradient")
    return grad


# ---------------------------------------------------------------------------
# Fitting

# Node-mean defect level at which a fit counts as converged.
_NODE_TOL = 1e-2
# Coarsest grid the continuation ladder will drop to, nodes per axis.
_MIN_COARSE = 9
# A refinement step that shrinks the total by less than this factor, while
# the residual itself stays above the floor, marks an obstruction: the
# defect is a feature of the problem, not of the grid resolution.
_GAIN_TOL = 12.0
_RESIDUAL_FLOOR = 1e-10  # per unit volume


@dataclasses.dataclass(frozen=True, eq=False)
class FitResult:
    grid: GridField
    history: np.ndarray          # total loss after each step on the final grid
    loss_a: float
    loss_b: float
    total: float
    converged: bool              # node-mean defects at or below tolerance
    stalled: bool                # final level ran out of descent directions
    iterations_run: int          # steps executed, summed over ladder levels
    node_mean_a: np.ndarray      # mean (<grad y_i, P> - 1)^2 per coordinate
    node_mean_b: float           # mean over pairs of <grad y_i, grad y_j>^2
    unit_mean: np.ndarray        # mean <grad y_i, P> per coordinate
    residual_concentration: float  # max node residual / median node residual
    level_totals: tuple          # endpoint loss of each ladder level run
    refinement_gain: Optional[float]  # level_totals[-2] / level_totals[-1]
    elevated_residual: bool      # refinement failed to shrink the residual
    message: str


def _node_diagnostics(values, p_vals, spacings, weight_a, weight_b):
    g, u, s = _terms(values, p_vals, spacings)
    n = values.shape[0]
    node_mean_a = np.array([float(np.mean(ui * ui)) for ui in u])
    node_mean_b = (
        float(np.mean([np.mean(sij * sij) for sij in s.values()]))
        if s else 0.0
    )
    unit_mean = np.array([float(np.mean(ui)) + 1.0 for ui in u])
    per_node = weight_a * sum(ui * ui for ui in u)
    if s:
        per_node = per_node + weight_b * sum(sij * sij for sij in s.values())
    med = float(np.median(per_node))
    concentration = float(np.max(per_node) / max(med, 1e-300))
    return node_mean_a, node_mean_b, unit_mean, concentration


def _affine_init(box, shape, p_vals, seed):
    n = box.shape[0]
    rng = np.random.Generator(np.random.PCG64(seed))
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    mesh = np.stack(np.meshgrid(*grid_axes(box, shape), indexing="ij"), axis=0)
    values = np.empty((n,) + tuple(shape))
    for i in range(n):
        w_i = q[:, i]
        rate = sum(w_i[a] * p_vals[a] for a in range(n))
        med = float(np.median(rate))
        if abs(med) > 1e-9:
            w_i = w_i / med
        values[i] = sum(w_i[a] * mesh[a] for a in range(n))
    return values


def _pin_corner(values, pins):
    corner = (slice(None),) + (0,) * (values.ndim - 1)
    shift = values[corner] - pins
    return values - shift.reshape((-1,) + (1,) * (values.ndim - 1))


def _coarse_ladder(shape):
    """Grid shapes from coarsest to finest, roughly halving each axis."""
    levels = [tuple(shape)]
    while True:
        cur = levels[0]
        nxt = tuple(min(n, max(_MIN_COARSE, n // 2 + 1)) for n in cur)
        if nxt == cur:
            break
        levels.insert(0, nxt)
    return levels


def _budget_split(iterations, n_levels):
    # halve the share per level going coarser; the final grid gets the rest
    out = [iterations >> (n_levels - l) for l in range(n_levels - 1)]
    out.append(iterations - sum(out))
    return out


def _prolong(values, box, shape_from, shape_to):
    """Linear interpolation of grid values onto a finer node set, per axis."""
    out = values
    for ax in range(len(shape_from)):
        if shape_from[ax] == shape_to[ax]:
            continue
        xc = np.linspace(box[ax, 0], box[ax, 1], shape_from[ax])
        xf = np.linspace(box[ax, 0], box[ax, 1], shape_to[ax])
        idx = np.clip(np.searchsorted(xc, xf, side="right") - 1, 0, shape_from[ax] - 2)
        t = (xf - xc[idx]) / (xc[idx + 1] - xc[idx])
        lo = np.take(out, idx, axis=ax + 1)
        hi = np.take(out, idx + 1, axis=ax + 1)
        bshape = [1] * out.ndim
        bshape[ax + 1] = len(xf)
        t = t.reshape(bshape)
        out = (1.0 - t) * lo + t * hi
    return out


def _smoothed(arr, passes):
    """Per-axis (1/4, 1/2, 1/4) averaging; symmetric positive definite."""
    out = arr.copy()
    for _ in range(passes):
        for ax in range(1, out.ndim):
            u = np.moveaxis(out, ax, 0)
            v = np.empty_like(u)
            v[1:-1] = 0.25 * u[:-2] + 0.5 * u[1:-1] + 0.25 * u[2:]
            v[0] = 0.75 * u[0] + 0.25 * u[1]
            v[-1] = 0.75 * u[-1] + 0.25 * u[-2]
            out = np.moveaxis(v, 0, ax)
    return out


def _smoothing_passes(it, iters):
    # anneal: heavy smoothing early kills high-frequency junk, none late
    f = (it + 1) / max(iters, 1)
    if f <= 0.2:
        return 8
    if f <= 0.4:
        return 4
    if f <= 0.6:
        return 2
    if f <= 0.8:
        return 1
    return 0


def _pair_alignment(values, spacings):
    """Worst mean interior cos^2 between gradient fields of two coordinates."""
    dim = values.ndim - 1
    n = values.shape[0]
    inner = (slice(None),) + (slice(1, -1),) * dim
    grads = [
        np.stack([diff_axis(values[i], spacings[a], a) for a in range(dim)])[inner]
        for i in range(n)
    ]
    worst = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            num = np.sum(grads[i] * grads[j], axis=0) ** 2
            den = np.sum(grads[i] ** 2, axis=0) * np.sum(grads[j] ** 2, axis=0)
            worst = max(worst, float(np.mean(num / np.maximum(den, 1e-300))))
    return worst


def _shifted_cheb(u, k):
    # T_k on [0, 1]
    s = 2.0 * u - 1.0
    if k == 1:
        return s
    if k == 2:
        return 2.0 * s * s - 1.0
    if k == 3:
        return 4.0 * s ** 3 - 3.0 * s
    return 8.0 * s ** 4 - 8.0 * s * s + 1.0


def _line_move(evaluate, values, total, pins, spacings, i, basis):
    """Exact minimizer of the loss along values[i] + c * basis, if it helps.

    The loss is a quartic in c but near-quadratic at the scales that matter,
    so fit a parabola through three samples and jump to its vertex.  The jump
    is taken only when it strictly decreases the loss and leaves the gradient
    fields of distinct coordinates well separated.
    """
    s = 0.1
    vp = values.copy()
    vp[i] = vp[i] + s * basis
    vp = _pin_corner(vp, pins)
    tp = evaluate(vp)
    vm = values.copy()
    vm[i] = vm[i] - s * basis
    vm = _pin_corner(vm, pins)
    tm = evaluate(vm)
    if not (np.isfinite(tp) and np.isfinite(tm)):
        return None
    a = (tp - 2.0 * total + tm) / (2.0 * s * s)
    b = (tp - tm) / (2.0 * s)
    if a <= 1e-300:
        return None
    c = -b / (2.0 * a)
    if not np.isfinite(c) or abs(c) > 1e3:
        return None
    cand = values.copy()
    cand[i] = cand[i] + c * basis
    cand = _pin_corner(cand, pins)
    tc = evaluate(cand)
    if (
        np.isfinite(tc)
        and tc < total
        and (values.shape[0] < 2 or _pair_alignment(cand, spacings) < 0.8)
    ):
        return cand, tc
    return None


def _recombine_sweep(evaluate, values, total, pins, spacings, max_rounds=40):
    """Trade content between coordinates along directions descent cannot see.

    Any function of w = y_i - y_j with zero unit-rate defect leaves A alone,
    so plain descent drifts along these valleys instead of crossing them.
    Sweeping exact line moves over w itself and low-order Chebyshev shapes
    of it jumps across, repeating until a full pass finds nothing.
    """
    n = values.shape[0]
    if n < 2:
        return values, total
    for _ in range(max_rounds):
        improved = False
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                w = values[i] - values[j]
                lo, hi = float(np.min(w)), float(np.max(w))
                bases = [w]
                if hi - lo > 1e-12:
                    u = (w - lo) / (hi - lo)
                    bases += [_shifted_cheb(u, k) for k in range(1, 5)]
                for basis in bases:
                    got = _line_move(evaluate, values, total, pins, spacings, i, basis)
                    if got is not None:
                        values, total = got
                        improved = True
        if not improved:
            break
    return values, total


def _descend(field, values, box, shape, iters, cfg, record=None, target=0.0,
             check_every=100):
    """Smoothed-gradient descent with recombination sweeps on one grid.

    Returns (values, total, steps_run, stalled, met_target).  Every accepted
    step strictly decreases the loss; when backtracking fails, or progress
    over a window slows to a crawl, a recombination sweep tries to jump the
    iterate across a loss valley before giving up.
    """
    p_vals = _field_on_grid(field, box, shape)
    w = trapezoid_weights(box, shape)
    spacings = np.array(
        [(box[a, 1] - box[a, 0]) / (shape[a] - 1) for a in range(len(shape))]
    )
    pins = np.zeros(values.shape[0])
    values = _pin_corner(values, pins)

    def evaluate(vals):
        _, _, _, a_term, b_term = _loss_parts(vals, p_vals, w, spacings)
        return cfg.weight_a * a_term + cfg.weight_b * b_term

    total = evaluate(values)
    if not np.isfinite(total):
        raise FloatingPointError("loss is non-finite at the initial iterate")
    step = cfg.step_size
    velocity = np.zeros_like(values)
    window_last = total
    stalled = False
    met_target = False
    it = 0
    while it < iters:
        grad, _, _ = _gradient(values, p_vals, w, spacings, cfg.weight_a,
                               cfg.weight_b)
        if not np.all(np.isfinite(grad)):
            _raise_non_finite([grad], box, shape, "loss gradient")
        if float(np.sum(grad * grad)) == 0.0:
            break
        passes = _smoothing_passes(it, iters)
        direction = _smoothed(grad, passes) if passes else grad

        accepted = False
        trial_step = step
        for attempt in range(cfg.max_backtracks + 1):
            kick = cfg.momentum * velocity if attempt == 0 else 0.0
            trial = _pin_corner(values - trial_step * direction + kick, pins)
            trial_total = evaluate(trial)
            if np.isfinite(trial_total) and trial_total < total:
                velocity = trial - values
                values = trial
                total = trial_total
                # gentle growth lets the step ride up to the curvature limit
                step = trial_step * 1.3
                accepted = True
                break
            trial_step *= 0.5
            velocity = np.zeros_like(values)
        it += 1
        if record is not None:
            record.append(total)

        slow = it % check_every == 0 and total > 0.99 * window_last
        if it % check_every == 0:
            window_last = total
        if not accepted or slow:
            v2, t2 = _recombine_sweep(evaluate, values, total, pins, spacings)
            if t2 < total:
                values, total = v2, t2
                velocity = np.zeros_like(values)
                step = cfg.step_size
                if record is not None and record:
                    record[-1] = total
            elif not accepted:
                stalled = True
                break
        if target > 0.0:
            node_a, node_b, _, _ = _node_diagnostics(
                values, p_vals, spacings, cfg.weight_a, cfg.weight_b
            )
            if float(np.max(node_a)) <= target and node_b <= target:
                met_target = True
                break
    return values, total, it, stalled, met_target


def fit(field: VectorField, box, shape, cfg: Optional[FitConfig] = None) -> FitResult:
    """Minimize the functional by coarse-to-fine continuation.

    A random-affine start is placed on a coarsened copy of the grid and the
    iterate is descended and prolonged level by level up to the requested
    shape, so large-scale structure settles before fine-scale detail exists
    to fight it.  Each level runs smoothed-gradient descent with momentum
    (smoothing annealed away as the level's budget is spent) plus
    recombination sweeps when progress stalls.  A supplied init grid skips
    the ladder and is polished in place.

    Deterministic for a fixed cfg: initialization comes from the seeded PRNG
    and every accepted step strictly decreases the loss, so history is
    non-increasing.  history covers only the requested grid, one entry per
    step; coarser continuation levels report through level_totals.  When the
    ladder reaches the final grid and the loss barely improves on the level
    before it, while sitting well above round-off, the defect does not
    behave like discretization error and the result is flagged
    elevated_residual: with an adequate budget that marks an obstruction in
    the problem itself, such as coordinates that blow up inside the box.
    """
    cfg = cfg or FitConfig()
    box = np.asarray(box, dtype=float)
    shape = tuple(int(s) for s in shape)
    field_dim = field.dim
    if box.shape != (field_dim, 2):
        raise ValueError(f"box must have shape ({field_dim}, 2)")
    if len(shape) != field_dim:
        raise ValueError(f"shape must list {field_dim} axis sizes")

    if isinstance(cfg.init, GridField):
        if cfg.init.shape != shape or not np.allclose(cfg.init.box, box):
            raise ValueError("supplied init grid does not match box/shape")
        values = cfg.init.values.copy()
        ladder = [shape]
    else:
        ladder = _coarse_ladder(shape)
        p_coarse = _field_on_grid(field, box, ladder[0])
        values = _affine_init(box, ladder[0], p_coarse, cfg.seed)
    budgets = _budget_split(cfg.iterations, len(ladder))

    history: list = []
    level_totals = []
    iterations_run = 0
    stalled = False
    met_target = False
    budget_left = False
    for li, level_shape in enumerate(ladder):
        final = li == len(ladder) - 1
        if li > 0:
            values = _prolong(values, box, ladder[li - 1], level_shape)
        if budgets[li] <= 0 and not final:
            continue
        values, total, steps, level_stalled, met = _descend(
            field, values, box, level_shape, budgets[li], cfg,
            record=history if final else None,
            target=cfg.target if final else 0.0,
        )
        level_totals.append(total)
        iterations_run += steps
        if final:
            stalled = level_stalled
            met_target = met
            budget_left = steps < budgets[li]

    p_vals = _field_on_grid(field, box, shape)
    w = trapezoid_weights(box, shape)
    spacings = np.array(
        [(box[a, 1] - box[a, 0]) / (shape[a] - 1) for a in range(field_dim)]
    )
    _, _, _, a_term, b_term = _loss_parts(values, p_vals, w, spacings)
    node_a, node_b, unit_mean, concentration = _node_diagnostics(
        values, p_vals, spacings, cfg.weight_a, cfg.weight_b
    )

    converged = (
        met_target
        or (float(np.max(node_a)) <= _NODE_TOL and node_b <= _NODE_TOL)
    )
    if met_target:
        message = "node-mean targets met"
    elif stalled:
        message = "no descent step found; stopped at the best iterate"
    elif budget_left:
        message = "gradient vanished"
    else:
        message = "iteration budget exhausted"

    refinement_gain = None
    elevated = False
    if len(level_totals) >= 2:
        refinement_gain = float(level_totals[-2] / max(level_totals[-1], 1e-300))
        volume = float(np.prod(box[:, 1] - box[:, 0]))
        # an early target stop leaves the final total unconverged, which
        # would fake a weak gain; only a fully spent level is evidence
        elevated = (
            not met_target
            and refinement_gain < _GAIN_TOL
            and level_totals[-1] > _RESIDUAL_FLOOR * volume
        )
    if elevated:
        message += (
            f"; elevated residual: refinement gain {refinement_gain:.2g}, the "
            "defect survives grid refinement (obstruction on the patch, or "
            "budget too small to resolve it)"
        )

    return FitResult(
        grid=GridField(box=box, values=values),
        history=np.asarray(history),
        loss_a=a_term,
        loss_b=b_term,
        total=float(cfg.weight_a * a_term + cfg.weight_b * b_term),
        converged=converged,
        stalled=stalled,
        iterations_run=iterations_run,
        node_mean_a=node_a,
        node_mean_b=node_b,
        unit_mean=unit_mean,
        residual_concentration=concentration,
        level_totals=tuple(level_totals),
        refinement_gain=refinement_gain,
        elevated_residual=elevated,
        message=message,
    )


def rotate_to_flowbox(grid: GridField) -> GridField:
    """Fixed recombination of unit-velocity coordinates into flowbox form.

    z_i = (y_i - y_N) / 2 for i < N (zero row sum: conserved), and
    z_N = mean(y) (unit row sum: advances at unit rate).  For N = 1 the grid
    is already a flowbox and passes through unchanged.
    """
    n = grid.dim
    if n == 1:
        return grid
    values = grid.values
    out = np.empty_like(values)
    for i in range(n - 1):
        out[i] = (values[i] - values[n - 1]) / 2.0
    out[n - 1] = np.mean(values, axis=0)
    return GridField(box=grid.box, values=out)


# ---------------------------------------------------------------------------
# Persistence


def save_grid(grid: GridField, csv_path, sidecar: Optional[dict] = None,
              json_path=None) -> None:
    """CSV of node coordinates and values, plus a JSON sidecar with box/shape."""
    n = grid.dim
    mesh = grid.mesh()
    header = ",".join([f"x{i + 1}" for i in range(n)] + [f"y{i + 1}" for i in range(n)])
    cols = [mesh[a].ravel() for a in range(n)] + [grid.values[i].ravel() for i in range(n)]
    with open(csv_path, "w", newline="") as fh:
        fh.write(header + "\n")
        for row in zip(*cols):
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")
    meta = {
        "box": grid.box.tolist(),
        "shape": list(grid.shape),
    }
    if sidecar:
        meta.update(sidecar)
    if json_path is None:
        json_path = str(csv_path) + ".json"
    with open(json_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_grid(csv_path, json_path=None) -> GridField:
    if json_path is None:
        json_path = str(csv_path) + ".json"
    with open(json_path) as fh:
        meta = json.load(fh)
    box = np.asarray(meta["box"], dtype=float)
    shape = tuple(int(s) for s in meta["shape"])
    n = box.shape[0]
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1)
    data = np.atleast_2d(data)
    values = np.stack(
        [data[:, n + i].reshape(shape) for i in range(n)], axis=0
    )
    return GridField(box=box, values=values)
