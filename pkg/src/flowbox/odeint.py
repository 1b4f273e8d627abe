"""Orbit integration and surface-crossing detection.

Two steppers: classic fixed-step RK4, and adaptive Dormand-Prince RK45 with
a PI-free elementary step controller.  Backward time is handled by negating
the field.  Crossings of a surface's level function are located by scanning
accepted steps for sign changes and refining with bisection (no Hermite
interpolation), so event times inherit the accuracy of the integrator
tolerance rather than of a dense-output polynomial.
"""
from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from .dynsys import VectorField
from .fdiff import fd_gradient

__all__ = [
    "IntegratorConfig",
    "Orbit",
    "CrossingEvent",
    "IntegrationError",
    "StepLimitExceeded",
    "DomainExit",
    "flow",
    "trace_orbit",
    "find_crossings",
    "DEFAULT_CONFIG",
]

# level-function tolerances used by find_crossings
ON_SURFACE_TOL = 1e-9     # |level| below this counts as "already on S"
CROSSING_LEVEL_TOL = 1e-12  # bisection refinement target
GRAZE_TOL = 1e-8          # local |level| minimum below this flags a graze


class IntegrationError(RuntimeError):
    pass


class StepLimitExceeded(IntegrationError):
    pass


class DomainExit(IntegrationError):
    """Trajectory left the field's domain box.

    Carries the first accepted state outside the box (`t_exit`, `x_exit`,
    relative to the start of the sweep) and all accepted samples up to and
    including it.
    """

    def __init__(self, field_name, t_exit, x_exit, times, states):
        super().__init__(
            f"{field_name}: trajectory left the domain at t={t_exit:.6g},"
            f" x={np.asarray(x_exit).tolist()}"
        )
        self.t_exit = t_exit
        self.x_exit = x_exit
        self.times = times
        self.states = states


@dataclasses.dataclass(frozen=True)
class IntegratorConfig:
    """Stepper selection and accuracy knobs.

    method : "rk45" (adaptive, default) or "rk4" (fixed step)
    step : fixed step size for rk4
    abs_tol, rel_tol : per-component error weights for rk45
    max_steps : attempted-step budget per sweep
    horizon : largest |t| flow() and find_crossings() will integrate to
    """

    method: str = "rk45"
    step: float = 1e-3
    abs_tol: float = 1e-9
    rel_tol: float = 1e-9
    max_steps: int = 1_000_000
    horizon: float = 50.0

    def __post_init__(self):
        if self.method not in ("rk4", "rk45"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.step <= 0 or self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("step and tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")


DEFAULT_CONFIG = IntegratorConfig()


@dataclasses.dataclass(frozen=True, eq=False)
class Orbit:
    """Sampled trajectory: times (strictly monotone) and matching states."""

    times: np.ndarray
    states: np.ndarray
    field_name: str
    x0: np.ndarray

    def __len__(self):
        return len(self.times)

    def to_csv(self, path_or_buf) -> None:
        """Write t, x1..xN rows with 17 significant digits and \\n endings."""
        n = self.states.shape[1]
        lines = ["t," + ",".join(f"x{i + 1}" for i in range(n))]
        for t, x in zip(self.times, self.states):
            lines.append(",".join(format(v, ".17g") for v in (t, *x)))
        text = "\n".join(lines) + "\n"
        if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
            with open(path_or_buf, "w", newline="") as fh:
                fh.write(text)
        else:
            path_or_buf.write(text)


@dataclasses.dataclass(frozen=True, eq=False)
class CrossingEvent:
    """One intersection of an orbit with a surface's zero level set.

    t : crossing time relative to the query point (negative = in the past)
    x : state at the crossing
    params : surface parameters from param_inverse(x)
    direction : sign of <grad level, P> at x; 0 flags a tangential graze
    level : residual level value after refinement
    on_patch : whether params lie inside the open unit cube
    """

    t: float
    x: np.ndarray
    params: np.ndarray
    direction: int
    level: float
    on_patch: bool


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4) coefficients

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_DP_ERR = _DP_B5 - _DP_B4


def _rk4_step(f, x, h):
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _initial_step(f, x0, T, cfg):
    scale = (1.0 + float(np.max(np.abs(x0)))) / (1.0 + float(np.max(np.abs(f(x0)))))
    return min(T, 1e-2 * scale) if T > 0 else 0.0


def _advance(f, x0, T, cfg, field, check_domain=True):
    """Integrate dx/dt = f(x) over [0, T], T >= 0.

    Returns (times, states) lists of accepted samples including both ends.
    Raises DomainExit (carrying partial samples) or StepLimitExceeded.
    """
    x = np.array(x0, dtype=float)
    times = [0.0]
    states = [x.copy()]
    if T <= 0.0:
        return times, states

    def exit_check(t_new, x_new):
        if check_domain and not field.contains(x_new):
            times.append(t_new)
            states.append(x_new.copy())
            raise DomainExit(field.name, t_new, x_new, times, states)

    attempts = 0
    t = 0.0
    if cfg.method == "rk4":
        n_full = int(np.floor(T / cfg.step + 1e-12))
        remainder = T - n_full * cfg.step
        for k in range(n_full):
            attempts += 1
            if attempts > cfg.max_steps:
                raise StepLimitExceeded(
                    f"{field.name}: exceeded {cfg.max_steps} steps (rk4)"
                )
            x = _rk4_step(f, x, cfg.step)
            t = (k + 1) * cfg.step
            times.append(t)
            states.append(x.copy())
            exit_check(t, x)
        if remainder > 1e-15 * max(1.0, T):
            x = _rk4_step(f, x, remainder)
            times.append(T)
            states.append(x.copy())
            exit_check(T, x)
        return times, states

    # adaptive Dormand-Prince
    h = _initial_step(f, x, T, cfg)
    k = [None] * 7
    k[0] = f(x)
    while T - t > 1e-15 * max(1.0, T):
        attempts += 1
        if attempts > cfg.max_steps:
            raise StepLimitExceeded(
                f"{field.name}: exceeded {cfg.max_steps} attempted steps (rk45)"
            )
        h = min(h, T - t)
        if h < 1e-14 * max(1.0, t):
            raise IntegrationError(f"{field.name}: step size underflow at t={t:.6g}")
        for s in range(1, 7):
            xs = x + h * sum(_DP_A[s][j] * k[j] for j in range(s))
            k[s] = f(xs)
        x_new = x + h * sum(_DP_B5[j] * k[j] for j in range(7))
        err = h * sum(_DP_ERR[j] * k[j] for j in range(7))
        sc = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(x), np.abs(x_new))
        err_norm = float(np.sqrt(np.mean((err / sc) ** 2)))
        if err_norm <= 1.0:
            t += h
            x = x_new
            times.append(t)
            states.append(x.copy())
            exit_check(t, x)
            k[0] = k[6]  # FSAL
        factor = 0.9 * (err_norm ** -0.2) if err_norm > 0.0 else 5.0
        h *= min(5.0, max(0.2, factor))
    return times, states


def _directional(field: VectorField, sign: float):
    if sign >= 0:
        return lambda x: field.eval(x, check_domain=False)
    return lambda x: -field.eval(x, check_domain=False)


def flow(field: VectorField, x0, t: float, cfg: Optional[IntegratorConfig] = None):
    """State of the orbit through x0 after signed time t."""
    cfg = cfg or DEFAULT_CONFIG
    if abs(t) > cfg.horizon * (1 + 1e-12):
        raise ValueError(f"|t|={abs(t):.6g} exceeds the configured horizon {cfg.horizon}")
    x0 = np.asarray(x0, dtype=float)
    if t == 0.0:
        return x0.copy()
    _, states = _advance(_directional(field, t), x0, abs(t), cfg, field)
    return states[-1]


def trace_orbit(field: VectorField, x0, t_span, cfg: Optional[IntegratorConfig] = None) -> Orbit:
    """Sampled orbit over t_span = (t0, t1); x0 is the state at t0."""
    cfg = cfg or DEFAULT_CONFIG
    t0, t1 = float(t_span[0]), float(t_span[1])
    x0 = np.asarray(x0, dtype=float)
    if t0 == t1:
        return Orbit(
            times=np.array([t0]),
            states=x0[None, :].copy(),
            field_name=field.name,
            x0=x0.copy(),
        )
    sign = 1.0 if t1 > t0 else -1.0
    ts, xs = _advance(_directional(field, sign), x0, abs(t1 - t0), cfg, field)
    return Orbit(
        times=t0 + sign * np.asarray(ts),
        states=np.asarray(xs),
        field_name=field.name,
        x0=x0.copy(),
    )


# ---------------------------------------------------------------------------
# Crossing detection


def _level_direction(surface, field, x) -> int:
    grad = fd_gradient(surface.level, x, step=1e-7)
    ip = float(np.dot(np.asarray(grad, dtype=float), field.eval(x, check_domain=False)))
    if ip > 0.0:
        return 1
    if ip < 0.0:
        return -1
    return 0


def _make_event(surface, field, t, x, level, direction=None) -> CrossingEvent:
    params = np.atleast_1d(np.asarray(surface.param_inverse(x), dtype=float))
    on_patch = bool(np.all(params > 0.0) and np.all(params < 1.0))
    if direction is None:
        direction = _level_direction(surface, field, x)
    return CrossingEvent(
        t=float(t),
        x=np.asarray(x, dtype=float),
        params=params,
        direction=direction,
        level=float(level),
        on_patch=on_patch,
    )


def _refine_crossing(f, x_a, dt_b, level_fn, cfg, field):
    """Bisect the level function between an accepted step pair.

    x_a sits at local time 0 with level l_a; the sign change happens before
    dt_b.  Returns (dt, x, level) at the refined crossing.
    """
    lo, hi = 0.0, dt_b
    l_lo = level_fn(x_a)
    x_best, l_best, dt_best = x_a, l_lo, 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        _, xs = _advance(f, x_a, mid, cfg, field, check_domain=False)
        x_mid = xs[-1]
        l_mid = level_fn(x_mid)
        if abs(l_mid) < abs(l_best):
            x_best, l_best, dt_best = x_mid, l_mid, mid
        if abs(l_mid) <= CROSSING_LEVEL_TOL:
            break
        if (l_mid > 0.0) == (l_lo > 0.0):
            lo, l_lo = mid, l_mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, dt_b):
            break
    return dt_best, x_best, l_best


def find_crossings(
    field: VectorField,
    x0,
    surface,
    horizon: Optional[float] = None,
    cfg: Optional[IntegratorConfig] = None,
) -> list:
    """All crossings of the orbit through x0 with a surface, both time
    directions, sorted by time.

    Level-set crossings whose parameters land outside (0,1)^{N-1} are kept
    but flagged off-patch.  Sweeps that leave the field's domain are
    truncated at the exit point; genuine integrator failures propagate.
    """
    cfg = cfg or DEFAULT_CONFIG
    horizon = cfg.horizon if horizon is None else float(horizon)
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if horizon > cfg.horizon * (1 + 1e-12):
        raise ValueError(
            f"horizon {horizon:.6g} exceeds the integrator horizon {cfg.horizon:.6g}"
        )
    x0 = np.asarray(x0, dtype=float)
    events = []

    l0 = float(surface.level(x0))
    if abs(l0) <= ON_SURFACE_TOL:
        events.append(_make_event(surface, field, 0.0, x0, l0))

    for sign in (1.0, -1.0):
        f = _directional(field, sign)
        try:
            ts, xs = _advance(f, x0, horizon, cfg, field)
        except DomainExit as exit_info:
            ts, xs = exit_info.times, exit_info.states
        levels = [float(surface.level(x)) for x in xs]

        # skip the leading on-surface stretch so a seed on S is not rescanned
        start = 0
        while start < len(levels) and abs(levels[start]) <= ON_SURFACE_TOL:
            start += 1

        for i in range(max(start, 1), len(levels)):
            l_prev, l_cur = levels[i - 1], levels[i]
            if l_prev == 0.0 or l_cur == 0.0:
                if l_cur == 0.0:
                    events.append(
                        _make_event(surface, field, sign * ts[i], xs[i], l_cur)
                    )
                continue
            if (l_prev > 0.0) != (l_cur > 0.0):
                dt, x_c, l_c = _refine_crossing(
                    f, xs[i - 1], ts[i] - ts[i - 1], surface.level, cfg, field
                )
                t_c = sign * (ts[i - 1] + dt)
                events.append(_make_event(surface, field, t_c, x_c, l_c))

        # tangential grazes: interior local minima of |level| with no sign change
        for i in range(max(start + 1, 1), len(levels) - 1):
            li = levels[i]
            if (
                abs(li) <= GRAZE_TOL
                and abs(li) > 0.0
                and levels[i - 1] * li > 0.0
                and li * levels[i + 1] > 0.0
                and abs(li) < abs(levels[i - 1])
                and abs(li) <= abs(levels[i + 1])
            ):
                events.append(
                    _make_event(surface, field, sign * ts[i], xs[i], li, direction=0)
                )

    events.sort(key=lambda e: e.t)
    return events
