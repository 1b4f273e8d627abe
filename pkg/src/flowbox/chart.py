"""Non-recurrent surfaces and the charts they induce.

A surface S is an embedded (N-1)-manifold patch given by a parameterization
``X: (0,1)^{N-1} -> R^N`` together with a level function whose zero set
contains S.  If every orbit crosses S at most once (non-recurrence) and the
crossing is transversal, the orbit through x defines

* ``m(x)``  - unit-velocity measurement: signed time since the orbit left S,
* ``h(x)``  - surface parameters of the crossing point, conserved along orbits,

and the flowbox coordinates ``z = (h_1, ..., h_{N-1}, m)`` push the field
forward to the constant field (0, ..., 0, 1).
"""
from __future__ import annotations

import dataclasses
import json
from typing import Callable, Optional, Sequence

import numpy as np

from . import expressions as ex
from .dynsys import VectorField
from .fdiff import fd_gradient
from .odeint import DEFAULT_CONFIG, IntegrationError, IntegratorConfig, find_crossings

__all__ = [
    "Surface",
    "Chart",
    "NonRecurrenceReport",
    "ChartError",
    "NotInOmega",
    "AmbiguousChart",
    "OffPatch",
    "TransversalityError",
    "DegenerateSurfaceError",
    "line_surface",
    "circle_surface",
    "point_surface",
    "builtin_surface",
    "builtin_surface_names",
    "surface_from_json",
    "halton",
    "check_transversal",
    "check_nonrecurrent",
    "build_chart",
    "evaluate_m",
    "evaluate_h",
    "flowbox",
    "conservation_residual",
    "evaluate_grid",
]

TRANSVERSALITY_TOL = 1e-6


class ChartError(RuntimeError):
    pass


class NotInOmega(ChartError):
    """The orbit through x never meets the surface within the horizon."""


class AmbiguousChart(ChartError):
    """The orbit meets the surface more than once: S is recurrent here."""


class OffPatch(ChartError):
    """The orbit meets the level set only outside the parameterized patch."""


class TransversalityError(ChartError):
    """Sampled |<normal, P>| fell below the transversality tolerance."""


class DegenerateSurfaceError(ChartError):
    """Parameterization Jacobian is rank deficient at a sampled parameter."""


_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29)


def halton(dim: int, count: int) -> np.ndarray:
    """First `count` points of the Halton sequence in (0,1)^dim (index from 1)."""
    if dim == 0:
        return np.zeros((count, 0))
    out = np.empty((count, dim))
    for j in range(dim):
        base = _PRIMES[j]
        for i in range(count):
            f, r, n = 1.0, 0.0, i + 1
            while n > 0:
                f /= base
                r += f * (n % base)
                n //= base
            out[i, j] = r
    return out


# ---------------------------------------------------------------------------
# Surfaces


@dataclasses.dataclass(frozen=True, eq=False)
class Surface:
    """Parameterized surface patch with a level function.

    param : callable mapping tau in (0,1)^{N-1} to a point on S
    level : scalar function vanishing on S (sign change = crossing)
    param_inverse : maps near-surface points back to parameters; when absent
        a Gauss-Newton projection onto the patch is built lazily
    param_jacobian : optional analytic dX/dtau, shape (N, N-1)
    """

    dim: int
    param: Callable
    level: Callable
    param_inverse: Optional[Callable] = None
    param_jacobian: Optional[Callable] = None
    name: str = "custom"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.param_inverse is None:
            object.__setattr__(
                self, "param_inverse", _projection_inverse(self)
            )


def _param_jacobian(surface: Surface, tau: np.ndarray, step: float = 1e-6) -> np.ndarray:
    if surface.param_jacobian is not None:
        return np.asarray(surface.param_jacobian(tau), dtype=float).reshape(
            surface.dim, surface.dim - 1
        )
    tau = np.asarray(tau, dtype=float)
    cols = []
    for i in range(tau.size):
        e = np.zeros_like(tau)
        # stay inside (0,1): shrink the stencil near the edges
        s = min(step, 0.49 * min(tau[i], 1.0 - tau[i]) + step * 1e-3)
        e[i] = s
        cols.append(
            (np.asarray(surface.param(tau + e)) - np.asarray(surface.param(tau - e)))
            / (2.0 * s)
        )
    return np.stack(cols, axis=-1) if cols else np.zeros((surface.dim, 0))


def _projection_inverse(surface: Surface, n_per_axis: int = 32, tol: float = 1e-10,
                        max_iter: int = 50) -> Callable:
    """Gauss-Newton projection onto the patch, seeded from a parameter lattice."""
    d = surface.dim - 1
    if d == 0:
        return lambda x: np.zeros(0)

    axes = [(np.arange(n_per_axis) + 0.5) / n_per_axis] * d
    lattice = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    seeds = np.asarray([surface.param(tau) for tau in lattice], dtype=float)

    def inverse(x):
        x = np.asarray(x, dtype=float)
        tau = lattice[int(np.argmin(np.sum((seeds - x) ** 2, axis=1)))].copy()
        for _ in range(max_iter):
            r = x - np.asarray(surface.param(tau), dtype=float)
            J = _param_jacobian(surface, tau)
            delta, *_ = np.linalg.lstsq(J, r, rcond=None)
            tau = tau + delta
            if float(np.linalg.norm(delta)) < tol:
                break
        return tau

    return inverse


def surface_normal(surface: Surface, tau) -> np.ndarray:
    """Unit normal at X(tau).

    2-D surfaces use the rotated tangent (T2, -T1)/|T|; higher dimensions take
    the SVD null vector of the parameterization Jacobian with its sign aligned
    to the level gradient; 1-D surfaces are points with normal sign(grad level).
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    x = np.asarray(surface.param(tau), dtype=float)
    if surface.dim == 1:
        g = float(fd_gradient(surface.level, x, step=1e-7)[0])
        return np.array([1.0 if g >= 0 else -1.0])
    J = _param_jacobian(surface, tau)
    if surface.dim == 2:
        t = J[:, 0]
        norm = float(np.linalg.norm(t))
        if norm < 1e-12:
            raise DegenerateSurfaceError(
                f"{surface.name}: degenerate parameterization at tau={tau.tolist()}"
            )
        return np.array([t[1], -t[0]]) / norm
    u, s, _ = np.linalg.svd(J, full_matrices=True)
    if s[-1] < 1e-12 * s[0] or s[0] == 0.0:
        raise DegenerateSurfaceError(
            f"{surface.name}: degenerate parameterization at tau={tau.tolist()}"
        )
    n = u[:, -1]
    g = np.asarray(fd_gradient(surface.level, x, step=1e-7), dtype=float)
    if float(np.dot(n, g)) < 0.0:
        n = -n
    return n


def line_surface(value: float = 1.0, lo: float = 0.0, hi: float = 4.0,
                 axis: int = 0, name: Optional[str] = None) -> Surface:
    """2-D surface {x_axis = value} parameterized over the other axis in (lo, hi)."""
    other = 1 - axis
    span = hi - lo
    if span <= 0:
        raise ValueError("need lo < hi")

    def param(tau):
        x = np.empty(2)
        x[axis] = value
        x[other] = lo + span * float(np.atleast_1d(tau)[0])
        return x

    jac_col = np.zeros((2, 1))
    jac_col[other, 0] = span
    return Surface(
        dim=2,
        param=param,
        level=lambda x: float(x[axis] - value),
        param_inverse=lambda x: np.array([(float(x[other]) - lo) / span]),
        param_jacobian=lambda tau: jac_col,
        name=name or f"line(x{axis + 1}={value}, x{other + 1} in ({lo},{hi}))",
    )


def circle_surface(radius: float = 1.0, excluded_angle: float = np.pi,
                   name: Optional[str] = None) -> Surface:
    """Circle of given radius minus one point, parameterized by normalized angle.

    tau in (0,1) maps to angle excluded_angle + 2*pi*tau; the excluded point
    itself corresponds to tau in {0, 1} which is off-patch by construction.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    th0 = float(excluded_angle)

    def param(tau):
        th = th0 + 2.0 * np.pi * float(np.atleast_1d(tau)[0])
        return radius * np.array([np.cos(th), np.sin(th)])

    def inverse(x):
        th = float(np.arctan2(x[1], x[0]))
        return np.array([np.mod(th - th0, 2.0 * np.pi) / (2.0 * np.pi)])

    def jacobian(tau):
        th = th0 + 2.0 * np.pi * float(np.atleast_1d(tau)[0])
        return 2.0 * np.pi * radius * np.array([[-np.sin(th)], [np.cos(th)]])

    return Surface(
        dim=2,
        param=param,
        level=lambda x: float(x[0] ** 2 + x[1] ** 2 - radius**2),
        param_inverse=inverse,
        param_jacobian=jacobian,
        name=name or f"circle(r={radius}, excluded angle {th0:.3g})",
    )


def point_surface(value: float = 1.0, name: Optional[str] = None) -> Surface:
    """0-dimensional surface {x1 = value} for one-dimensional fields."""
    return Surface(
        dim=1,
        param=lambda tau: np.array([value]),
        level=lambda x: float(x[0] - value),
        param_inverse=lambda x: np.zeros(0),
        param_jacobian=lambda tau: np.zeros((1, 0)),
        name=name or f"point(x1={value})",
    )


_SURFACE_BUILDERS = {
    # the worked hyperbolic example: S = {x1 = 1}, x2 in (0, 4)
    "line-b": lambda: line_surface(1.0, 0.0, 4.0, name="line-b"),
    # same line with a wide parameter range so larger boxes stay on-patch
    "line-b-wide": lambda: line_surface(1.0, 0.0, 16.0, name="line-b-wide"),
    # unit circle minus the point (-1, 0): radial and node fields cross once
    "circle-a": lambda: circle_surface(1.0, np.pi, name="circle-a"),
    # short vertical segment used to exhibit recurrence of rotations
    "segment-c": lambda: line_surface(1.0, 0.0, 1.0, name="segment-c"),
    "point-1": lambda: point_surface(1.0, name="point-1"),
}


def builtin_surface_names() -> list:
    return sorted(_SURFACE_BUILDERS)


def builtin_surface(name: str) -> Surface:
    try:
        return _SURFACE_BUILDERS[name]()
    except KeyError:
        raise KeyError(
            f"unknown surface {name!r}; built-ins: {', '.join(builtin_surface_names())}"
        ) from None


def surface_from_json(spec) -> Surface:
    """Surface from {"builtin": name} or {"dim", "param": [...], "level": "..."}.

    Parameterization expressions use variables t1..t{N-1}; the level expression
    uses x1..xN.  A Gauss-Newton projection supplies param_inverse.
    """
    if isinstance(spec, str):
        spec = json.loads(spec)
    if "builtin" in spec:
        return builtin_surface(spec["builtin"])
    dim = int(spec["dim"])
    param_texts = spec["param"]
    if len(param_texts) != dim:
        raise ValueError(f"param must list {dim} expressions, got {len(param_texts)}")
    tvars = [f"t{i + 1}" for i in range(dim - 1)]
    param_nodes = [ex.parse_expression(s, tvars) for s in param_texts]
    level_node = ex.parse_expression(spec["level"], [f"x{i + 1}" for i in range(dim)])

    def param(tau):
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        return np.array([float(n.evaluate(tuple(tau))) for n in param_nodes])

    return Surface(
        dim=dim,
        param=param,
        level=lambda x: float(level_node.evaluate(tuple(np.asarray(x, dtype=float)))),
        name=str(spec.get("name", "custom")),
    )


# ---------------------------------------------------------------------------
# Audits


def check_transversal(surface: Surface, field: VectorField, n_samples: int = 64) -> list:
    """Sample <normal, P> over a low-discrepancy parameter grid.

    Returns [(tau, inner_product)] for every sample; callers decide what to do
    with small values.  Raises DegenerateSurfaceError on rank-deficient
    parameterizations.
    """
    d = surface.dim - 1
    taus = halton(d, n_samples if d > 0 else 1)
    out = []
    for tau in taus:
        n = surface_normal(surface, tau)
        p = field.eval(np.asarray(surface.param(tau), dtype=float), check_domain=False)
        out.append((tau.copy(), float(np.dot(n, p))))
    return out


@dataclasses.dataclass(frozen=True, eq=False)
class NonRecurrenceReport:
    """Outcome of the orbit-seeded recurrence audit."""

    tested_points: int
    violations: tuple            # (seed point, crossing times) with > 1 crossing
    transversality_failures: tuple  # (tau, inner product) below tolerance
    integration_failures: tuple  # (seed point, message)
    verdict: str                 # "pass" | "fail"


def check_nonrecurrent(
    surface: Surface,
    field: VectorField,
    n_orbits: int = 16,
    horizon: Optional[float] = None,
    cfg: Optional[IntegratorConfig] = None,
) -> NonRecurrenceReport:
    """Seed orbits on S and count on-patch transversal crossings.

    Any orbit crossing more than once (the seed itself counts as one crossing)
    makes the surface recurrent.  Integration failures are recorded per orbit,
    not fatal.
    """
    cfg = cfg or DEFAULT_CONFIG
    horizon = cfg.horizon if horizon is None else float(horizon)
    trans = check_transversal(surface, field, max(n_orbits, 16))
    trans_failures = tuple(
        (tau, ip) for tau, ip in trans if abs(ip) < TRANSVERSALITY_TOL
    )
    violations = []
    failures = []
    taus = halton(surface.dim - 1, n_orbits if surface.dim > 1 else 1)
    for tau in taus:
        x0 = np.asarray(surface.param(tau), dtype=float)
        try:
            events = find_crossings(field, x0, surface, horizon=horizon, cfg=cfg)
        except IntegrationError as err:
            failures.append((x0, str(err)))
            continue
        crossing_times = [e.t for e in events if e.direction != 0 and e.on_patch]
        if len(crossing_times) > 1:
            violations.append((x0, tuple(crossing_times)))
    verdict = "fail" if (violations or trans_failures) else "pass"
    return NonRecurrenceReport(
        tested_points=len(taus),
        violations=tuple(violations),
        transversality_failures=trans_failures,
        integration_failures=tuple(failures),
        verdict=verdict,
    )


# ---------------------------------------------------------------------------
# Charts


@dataclasses.dataclass(frozen=True, eq=False)
class Chart:
    """Chart on the orbit set of a non-recurrent surface."""

    field: VectorField
    surface: Surface
    cfg: IntegratorConfig
    horizon: float

    @property
    def dim(self) -> int:
        return self.field.dim

    def m(self, x) -> float:
        return evaluate_m(self, x)

    def h(self, x) -> np.ndarray:
        return evaluate_h(self, x)

    def coords(self, x) -> np.ndarray:
        return flowbox(self, x)


def build_chart(
    field: VectorField,
    surface,
    cfg: Optional[IntegratorConfig] = None,
    horizon: Optional[float] = None,
    audit_transversal: bool = True,
    n_audit: int = 64,
) -> Chart:
    """Assemble a chart; transversality is audited unless explicitly skipped."""
    if isinstance(surface, str):
        surface = builtin_surface(surface)
    if surface.dim != field.dim:
        raise ValueError(
            f"surface dim {surface.dim} does not match field dim {field.dim}"
        )
    cfg = cfg or DEFAULT_CONFIG
    horizon = cfg.horizon if horizon is None else float(horizon)
    if audit_transversal:
        samples = check_transversal(surface, field, n_audit)
        bad = [(tau, ip) for tau, ip in samples if abs(ip) < TRANSVERSALITY_TOL]
        if bad:
            tau, ip = min(bad, key=lambda pair: abs(pair[1]))
            raise TransversalityError(
                f"{surface.name} is tangent to {field.name}:"
                f" |<n, P>| = {abs(ip):.3g} < {TRANSVERSALITY_TOL:g}"
                f" at tau={np.asarray(tau).tolist()}"
            )
    return Chart(field=field, surface=surface, cfg=cfg, horizon=horizon)


def _chart_crossing(chart: Chart, x):
    events = find_crossings(
        chart.field, x, chart.surface, horizon=chart.horizon, cfg=chart.cfg
    )
    transversal = [e for e in events if e.direction != 0]
    on_patch = [e for e in transversal if e.on_patch]
    if len(on_patch) == 1:
        return on_patch[0]
    if len(on_patch) > 1:
        raise AmbiguousChart(
            f"orbit through {np.asarray(x).tolist()} crosses {chart.surface.name}"
            f" {len(on_patch)} times (t = {[round(e.t, 6) for e in on_patch]})"
        )
    if transversal:
        worst = min(transversal, key=lambda e: abs(e.t))
        raise OffPatch(
            f"orbit through {np.asarray(x).tolist()} meets the level set of"
            f" {chart.surface.name} only outside the patch"
            f" (params {worst.params.tolist()} at t={worst.t:.6g})"
        )
    raise NotInOmega(
        f"orbit through {np.asarray(x).tolist()} does not cross"
        f" {chart.surface.name} within horizon {chart.horizon:g}"
    )


def evaluate_m(chart: Chart, x) -> float:
    """Unit-velocity measurement: time since the orbit left the surface."""
    return -_chart_crossing(chart, x).t


def evaluate_h(chart: Chart, x) -> np.ndarray:
    """Conserved surface parameters of the crossing point, in (0,1)^{N-1}."""
    params = _chart_crossing(chart, x).params
    if params.size and not (np.all(params > 0.0) and np.all(params < 1.0)):
        raise OffPatch(f"crossing parameters {params.tolist()} outside (0,1)")
    return params


def flowbox(chart: Chart, x) -> np.ndarray:
    """Flowbox coordinates (h_1, ..., h_{N-1}, m) from a single crossing search."""
    event = _chart_crossing(chart, x)
    return np.concatenate([event.params, [-event.t]])


def conservation_residual(h, field: VectorField, x, fd_step: float = 1e-5):
    """<grad h, P> by central differences; h may be a callable or a Chart.

    Scalar h gives a float; vector-valued h gives one residual per component.
    """
    fn = (lambda pt: evaluate_h(h, pt)) if isinstance(h, Chart) else h
    x = np.asarray(x, dtype=float)
    p = field.eval(x)
    grad = fd_gradient(fn, x, step=fd_step)  # shape (N,) or (N, k)
    grad = np.asarray(grad)
    result = np.tensordot(p, grad, axes=([0], [0]))
    if np.ndim(result) == 0:
        return float(result)
    return np.asarray(result, dtype=float)


# status labels used by grid evaluation and the CLI export
STATUS_OK = "ok"
STATUS_NOT_IN_OMEGA = "not-in-omega"
STATUS_AMBIGUOUS = "ambiguous"
STATUS_OFF_PATCH = "off-patch"
STATUS_INTEGRATION = "integration-error"
STATUS_DOMAIN = "domain-error"


def _eval_one(chart: Chart, x):
    try:
        z = flowbox(chart, x)
        return z, STATUS_OK
    except NotInOmega:
        return None, STATUS_NOT_IN_OMEGA
    except AmbiguousChart:
        return None, STATUS_AMBIGUOUS
    except OffPatch:
        return None, STATUS_OFF_PATCH
    except IntegrationError:
        return None, STATUS_INTEGRATION
    except ex.DomainError:
        return None, STATUS_DOMAIN


def evaluate_grid(chart: Chart, points: Sequence, threads: int = 1) -> list:
    """Evaluate flowbox coordinates at many points.

    Returns [(point, z-or-None, status)] in input order.  `threads` > 1 fans
    the pure per-point evaluations over a thread pool; ordering and results
    are identical either way.
    """
    points = [np.asarray(p, dtype=float) for p in points]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda p: _eval_one(chart, p), points))
    else:
        results = [_eval_one(chart, p) for p in points]
    return [(p, z, status) for p, (z, status) in zip(points, results)]
