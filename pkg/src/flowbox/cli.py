"""Command-line front end.

Subcommands: systems-list, chart-build, kef-check, varfit, verify-all.
Every run that writes files also writes a manifest (command, resolved
arguments, config hash, seed, PRNG, timestamps, outputs, summary) so results
can be reproduced byte for byte.

Exit codes: 0 success, 1 usage error, 2 audit or verification failure,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import chart as chart_mod
from . import dynsys
from . import kef as kef_mod
from . import refsol as refsol_mod
from . import varfit as varfit_mod
from .expressions import DomainError, ExpressionError, parse_expression
from .fdiff import fd_gradient
from .odeint import DEFAULT_CONFIG, IntegrationError, IntegratorConfig, flow

__all__ = [
    "main",
    "entrypoint",
    "parse_grid_spec",
    "parse_eigenvalue",
    "cmd_systems_list",
    "cmd_chart_build",
    "cmd_kef_check",
    "cmd_varfit",
    "cmd_verify_all",
    "VERIFY_SUITES",
]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_AUDIT = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    pass


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def parse_eigenvalue(text: str) -> complex:
    """Accepts RE, IMi, RE+IMi forms, e.g. '3', '2i', '-0.45+0.19i'."""
    cleaned = text.strip().replace(" ", "").replace("i", "j")
    try:
        return complex(cleaned)
    except ValueError:
        raise UsageError(f"cannot parse eigenvalue {text!r}") from None


def parse_grid_spec(spec: str, dim: int):
    """'LOxHI,...' with a resolution suffix: one trailing xRES applies to all
    axes, or give every axis its own LOxHIxRES.  Returns (box, shape)."""
    parts = [p.strip() for p in spec.split(",")]
    if len(parts) != dim:
        raise UsageError(
            f"grid spec {spec!r} lists {len(parts)} axes, need {dim}"
        )
    entries = []
    for part in parts:
        fields = part.split("x")
        if len(fields) not in (2, 3):
            raise UsageError(f"bad grid axis {part!r}; use LOxHI or LOxHIxRES")
        try:
            lo, hi = float(fields[0]), float(fields[1])
            res = int(fields[2]) if len(fields) == 3 else None
        except ValueError:
            raise UsageError(f"bad number in grid axis {part!r}") from None
        if res is not None and res < 1:
            raise UsageError(f"resolution must be >= 1 in {part!r}")
        entries.append((lo, hi, res))
    resolutions = [e[2] for e in entries]
    if all(r is not None for r in resolutions):
        shape = tuple(int(r) for r in resolutions)
    elif resolutions[-1] is not None and all(r is None for r in resolutions[:-1]):
        shape = tuple(int(resolutions[-1]) for _ in entries)
    else:
        raise UsageError(
            f"grid spec {spec!r}: give one trailing resolution or one per axis"
        )
    box = np.array([[lo, hi] for lo, hi, _ in entries])
    return box, shape


def _thread_count() -> int:
    raw = os.environ.get("FLOWBOX_THREADS", "")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _write_manifest(out_dir: Path, command: str, args: dict, outputs: list,
                    summary: dict, started: str, seed=None) -> Path:
    manifest = {
        "command": command,
        "args": args,
        "config_hash": _config_hash({"command": command, "args": args}),
        "seed": seed,
        "prng": "PCG64",
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
        "outputs": outputs,
        "summary": summary,
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _resolve_field(system: str | None, system_file: str | None) -> dynsys.VectorField:
    if system_file:
        try:
            with open(system_file) as fh:
                return dynsys.system_from_json(fh.read())
        except (OSError, KeyError, ValueError, ExpressionError) as err:
            raise UsageError(f"cannot load system from {system_file}: {err}")
    if not system:
        raise UsageError("need --system or --system-file")
    try:
        return dynsys.builtin(system)
    except KeyError as err:
        raise UsageError(str(err.args[0]))


def _resolve_surface(spec: str) -> chart_mod.Surface:
    if spec.lstrip().startswith("{"):
        try:
            return chart_mod.surface_from_json(spec)
        except (KeyError, ValueError, ExpressionError) as err:
            raise UsageError(f"bad surface JSON: {err}")
    if os.path.exists(spec):
        try:
            with open(spec) as fh:
                return chart_mod.surface_from_json(fh.read())
        except (OSError, KeyError, ValueError, ExpressionError) as err:
            raise UsageError(f"cannot load surface from {spec}: {err}")
    try:
        return chart_mod.builtin_surface(spec)
    except KeyError as err:
        raise UsageError(str(err.args[0]))


def _grid_points(box: np.ndarray, shape) -> np.ndarray:
    axes = [np.linspace(box[a, 0], box[a, 1], shape[a]) for a in range(len(shape))]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _integrator_config(abs_tol, rel_tol, horizon) -> IntegratorConfig:
    return IntegratorConfig(
        method="rk45",
        abs_tol=abs_tol if abs_tol is not None else DEFAULT_CONFIG.abs_tol,
        rel_tol=rel_tol if rel_tol is not None else DEFAULT_CONFIG.rel_tol,
        max_steps=DEFAULT_CONFIG.max_steps,
        horizon=horizon if horizon is not None else DEFAULT_CONFIG.horizon,
    )


# ---------------------------------------------------------------------------
# systems-list


def cmd_systems_list(name_filter: str = "") -> int:
    names = [n for n in dynsys.builtin_names() if name_filter in n]
    rows = [("name", "dim", "note")]
    for name in names:
        field = dynsys.builtin(name)
        rows.append((name, str(field.dim), field.note))
    widths = [max(len(r[c]) for r in rows) for c in range(3)]
    for row in rows:
        print("  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)).rstrip())
    return EXIT_OK


# ---------------------------------------------------------------------------
# chart-build


def cmd_chart_build(system, surface_spec, grid_spec, out_dir, force=False,
                    horizon=None, abs_tol=None, rel_tol=None,
                    system_file=None, n_audit_orbits=16) -> int:
    started = _now()
    field = _resolve_field(system, system_file)
    surface = _resolve_surface(surface_spec)
    box, shape = parse_grid_spec(grid_spec, field.dim)
    cfg = _integrator_config(abs_tol, rel_tol, horizon)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if not force:
        try:
            chart = chart_mod.build_chart(
                field, surface, cfg=cfg, horizon=horizon, audit_transversal=True
            )
        except chart_mod.TransversalityError as err:
            print(f"audit failure: {err}", file=sys.stderr)
            return EXIT_AUDIT
        report = chart_mod.check_nonrecurrent(
            surface, field, n_orbits=n_audit_orbits,
            horizon=chart.horizon, cfg=cfg,
        )
        if report.verdict != "pass":
            print(
                f"audit failure: {surface.name} is recurrent under {field.name}:"
                f" {len(report.violations)} of {report.tested_points} seeded orbits"
                " crossed more than once",
                file=sys.stderr,
            )
            for x0, times in report.violations[:5]:
                print(
                    f"  orbit through {np.asarray(x0).round(6).tolist()}"
                    f" crossings at t = {[round(t, 6) for t in times]}",
                    file=sys.stderr,
                )
            return EXIT_AUDIT
    else:
        chart = chart_mod.build_chart(
            field, surface, cfg=cfg, horizon=horizon, audit_transversal=False
        )

    points = _grid_points(box, shape)
    results = chart_mod.evaluate_grid(chart, points, threads=_thread_count())

    n = field.dim
    header = (
        [f"x{i + 1}" for i in range(n)]
        + [f"h{i + 1}" for i in range(n - 1)]
        + ["m", "status"]
    )
    csv_path = out / "chart_grid.csv"
    counts: dict = {}
    with open(csv_path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for point, z, status in results:
            counts[status] = counts.get(status, 0) + 1
            cells = [_fmt(v) for v in point]
            if z is None:
                cells += ["nan"] * n
            else:
                cells += [_fmt(v) for v in z]
            cells.append(status)
            fh.write(",".join(cells) + "\n")

    total = len(results)
    ok = counts.get(chart_mod.STATUS_OK, 0)
    summary = {
        "points": total,
        "ok": ok,
        "ok_fraction": ok / total if total else 0.0,
        "statuses": counts,
    }
    args = {
        "system": field.name,
        "surface": surface.name,
        "grid": grid_spec,
        "force": bool(force),
        "horizon": chart.horizon,
        "abs_tol": cfg.abs_tol,
        "rel_tol": cfg.rel_tol,
    }
    _write_manifest(out, "chart-build", args, [csv_path.name], summary, started)
    print(
        f"chart-build: {ok}/{total} points ok"
        f" ({100.0 * summary['ok_fraction']:.1f}%), wrote {csv_path}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# kef-check


def cmd_kef_check(system, grid_spec, out_dir, phi_expr=None, eigenvalue=None,
                  use_minimal_set=False, surface_spec=None, fd_step=1e-5,
                  abs_tol=None, rel_tol=None, horizon=None,
                  system_file=None, force=False) -> int:
    started = _now()
    field = _resolve_field(system, system_file)
    box, shape = parse_grid_spec(grid_spec, field.dim)
    points = _grid_points(box, shape)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "kef_residuals.csv"
    n = field.dim

    if use_minimal_set:
        if not surface_spec:
            raise UsageError("--minimal-set needs --surface")
        surface = _resolve_surface(surface_spec)
        cfg = _integrator_config(abs_tol, rel_tol, horizon)
        try:
            built = chart_mod.build_chart(
                field, surface, cfg=cfg, horizon=horizon,
                audit_transversal=not force,
            )
        except chart_mod.TransversalityError as err:
            print(f"audit failure: {err}", file=sys.stderr)
            return EXIT_AUDIT
        mset = kef_mod.minimal_set(built)
        candidates = [
            (member.label, member, complex(member.eigenvalue))
            for member in mset.members
        ]
        args_extra = {"minimal_set": True, "surface": surface.name}
    else:
        if phi_expr is None or eigenvalue is None:
            raise UsageError("need --phi and --lambda (or --minimal-set)")
        node = parse_expression(phi_expr, [f"x{i + 1}" for i in range(n)])
        lam = eigenvalue

        def phi(x):
            return node.evaluate(tuple(np.asarray(x, dtype=float)))

        candidates = [(phi_expr, phi, lam)]
        args_extra = {"phi": phi_expr, "lambda": str(eigenvalue)}

    header = [f"x{i + 1}" for i in range(n)] + ["member", "re", "im", "status"]
    rows = []
    magnitudes = []
    for label, fn, lam in candidates:
        for point in points:
            try:
                res = kef_mod.kpde_residual(fn, lam, field, point, fd_step=fd_step)
                status = "ok"
                magnitudes.append(abs(res))
            except (DomainError, dynsys.OutOfDomainError, ZeroDivisionError):
                res, status = complex(np.nan, np.nan), "domain-error"
            except chart_mod.ChartError as err:
                res, status = complex(np.nan, np.nan), _chart_status(err)
            except IntegrationError:
                res, status = complex(np.nan, np.nan), "integration-error"
            rows.append(
                [_fmt(v) for v in point]
                + [label, _fmt(res.real), _fmt(res.imag), status]
            )
    with open(csv_path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")

    summary = {
        "points": len(points),
        "members": len(candidates),
        "evaluated": len(magnitudes),
        "max_abs_residual": max(magnitudes) if magnitudes else None,
        "mean_abs_residual": (
            float(np.mean(magnitudes)) if magnitudes else None
        ),
        "fd_step": fd_step,
    }
    args = {"system": field.name, "grid": grid_spec, "fd_step": fd_step}
    args.update(args_extra)
    _write_manifest(out, "kef-check", args, [csv_path.name], summary, started)
    if magnitudes:
        print(
            f"kef-check: max |residual| = {max(magnitudes):.6g},"
            f" mean = {float(np.mean(magnitudes)):.6g}"
            f" over {len(magnitudes)} evaluations, wrote {csv_path}"
        )
    else:
        print(f"kef-check: no evaluable points, wrote {csv_path}")
    return EXIT_OK


def _chart_status(err: chart_mod.ChartError) -> str:
    if isinstance(err, chart_mod.NotInOmega):
        return chart_mod.STATUS_NOT_IN_OMEGA
    if isinstance(err, chart_mod.AmbiguousChart):
        return chart_mod.STATUS_AMBIGUOUS
    if isinstance(err, chart_mod.OffPatch):
        return chart_mod.STATUS_OFF_PATCH
    return "chart-error"


# ---------------------------------------------------------------------------
# varfit


def cmd_varfit(system, grid_spec, out_dir, iterations=None, seed=None,
               step_size=None, momentum=None, weight_a=None, weight_b=None,
               target=None, system_file=None) -> int:
    started = _now()
    field = _resolve_field(system, system_file)
    box, shape = parse_grid_spec(grid_spec, field.dim)
    defaults = varfit_mod.FitConfig()
    cfg = varfit_mod.FitConfig(
        step_size=step_size if step_size is not None else defaults.step_size,
        momentum=momentum if momentum is not None else defaults.momentum,
        iterations=iterations if iterations is not None else defaults.iterations,
        weight_a=weight_a if weight_a is not None else defaults.weight_a,
        weight_b=weight_b if weight_b is not None else defaults.weight_b,
        seed=seed if seed is not None else defaults.seed,
        target=target if target is not None else defaults.target,
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    try:
        result = varfit_mod.fit(field, box, shape, cfg)
    except FloatingPointError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        raise UsageError(str(err))

    sidecar = {
        "system": field.name,
        "seed": cfg.seed,
        "iterations": cfg.iterations,
        "step_size": cfg.step_size,
        "momentum": cfg.momentum,
        "weight_a": cfg.weight_a,
        "weight_b": cfg.weight_b,
        "target": cfg.target,
        "final_loss_a": result.loss_a,
        "final_loss_b": result.loss_b,
        "final_total": result.total,
        "converged": result.converged,
    }
    y_csv = out / "fit_y.csv"
    varfit_mod.save_grid(result.grid, y_csv, sidecar=sidecar)
    z_csv = out / "fit_flowbox.csv"
    varfit_mod.save_grid(
        varfit_mod.rotate_to_flowbox(result.grid), z_csv, sidecar=sidecar
    )
    hist_csv = out / "loss_history.csv"
    with open(hist_csv, "w", newline="") as fh:
        fh.write("iteration,total\n")
        for i, v in enumerate(result.history, start=1):
            fh.write(f"{i},{_fmt(v)}\n")

    summary = {
        "converged": result.converged,
        "stalled": result.stalled,
        "iterations_run": result.iterations_run,
        "loss_a": result.loss_a,
        "loss_b": result.loss_b,
        "total": result.total,
        "node_mean_a": [float(v) for v in result.node_mean_a],
        "node_mean_b": result.node_mean_b,
        "unit_mean": [float(v) for v in result.unit_mean],
        "residual_concentration": result.residual_concentration,
        "level_totals": [float(v) for v in result.level_totals],
        "refinement_gain": result.refinement_gain,
        "elevated_residual": result.elevated_residual,
        "message": result.message,
    }
    args = {
        "system": field.name,
        "grid": grid_spec,
        "seed": cfg.seed,
        "iterations": cfg.iterations,
        "step_size": cfg.step_size,
        "momentum": cfg.momentum,
        "weight_a": cfg.weight_a,
        "weight_b": cfg.weight_b,
        "target": cfg.target,
    }
    outputs = [y_csv.name, f"{y_csv.name}.json", z_csv.name,
               f"{z_csv.name}.json", hist_csv.name]
    _write_manifest(out, "varfit", args, outputs, summary, started, seed=cfg.seed)

    status = "converged" if result.converged else "NOT converged"
    print(
        f"varfit: {status} after {result.iterations_run} iterations;"
        f" node-mean unit-velocity defect = {result.node_mean_a.tolist()},"
        f" node-mean overlap = {result.node_mean_b:.6g}"
    )
    if not result.converged or result.elevated_residual:
        reason = (
            "node-mean targets missed" if not result.converged
            else "residual stuck across grid refinement"
                 f" (gain {result.refinement_gain:.3g})"
        )
        print(
            f"diagnostic: {reason}"
            f" (residual concentration {result.residual_concentration:.3g});"
            " the box may contain a singular set of the analytic coordinates",
            file=sys.stderr,
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify-all


def _suite_rng(seed, offset):
    return np.random.Generator(np.random.PCG64(int(seed) + offset))


def _suite_kpde_residuals(seed=0):
    """Closed-form eigenfunctions satisfy the eigenvalue PDE to 1e-8."""
    worst = 0.0
    worst_at = ""
    for idx, system_id in enumerate(refsol_mod.reference_ids()):
        ref = refsol_mod.reference(system_id)
        pts = ref.sample_valid(_suite_rng(seed, idx), 100)
        for eig in ref.eigenfunctions:
            for x in pts:
                res = abs(
                    kef_mod.kpde_residual(eig.fn, eig.eigenvalue, ref.field, x)
                )
                if res > worst:
                    worst, worst_at = res, f"{system_id}:{eig.label}"
    return worst <= 1e-8, f"max |residual| {worst:.3g} ({worst_at})"


def _suite_real_form_identities(seed=0):
    """Re/Im parts of complex eigenfunctions satisfy the coupled real system."""
    worst = 0.0
    worst_at = ""
    for idx, system_id in enumerate(("linear-ac", "linear-ai")):
        ref = refsol_mod.reference(system_id)
        pts = ref.sample_valid(_suite_rng(seed, 100 + idx), 100)
        for eig in ref.eigenfunctions:
            mu, om = eig.eigenvalue.real, eig.eigenvalue.imag
            for x in pts:
                p = ref.field.eval(x)
                g1 = float(np.real(eig.fn(x)))
                g2 = float(np.imag(eig.fn(x)))
                d1 = fd_gradient(lambda y: float(np.real(eig.fn(y))), x)
                d2 = fd_gradient(lambda y: float(np.imag(eig.fn(y))), x)
                r1 = abs(float(np.dot(d1, p)) - (mu * g1 - om * g2))
                r2 = abs(float(np.dot(d2, p)) - (om * g1 + mu * g2))
                if max(r1, r2) > worst:
                    worst, worst_at = max(r1, r2), f"{system_id}:{eig.label}"
    return worst <= 1e-8, f"max real-form residual {worst:.3g} ({worst_at})"


def _suite_unit_velocity(seed=0):
    """Closed-form measurements and unit coordinates advance at unit rate."""
    worst = 0.0
    worst_at = ""
    for idx, system_id in enumerate(refsol_mod.reference_ids()):
        ref = refsol_mod.reference(system_id)
        if ref.unit_time is None and ref.unit_coords is None:
            continue
        pts = ref.sample_valid(_suite_rng(seed, 200 + idx), 100)
        for x in pts:
            p = ref.field.eval(x)
            if ref.unit_time is not None:
                grad = fd_gradient(ref.unit_time, x)
                res = abs(float(np.dot(grad, p)) - 1.0)
                if res > worst:
                    worst, worst_at = res, f"{system_id}:unit_time"
            if ref.unit_coords is not None:
                jac = fd_gradient(ref.unit_coords, x)  # (N, n_coords) complex
                rates = np.tensordot(p, jac, axes=([0], [0]))
                res = float(np.max(np.abs(rates - 1.0)))
                if res > worst:
                    worst, worst_at = res, f"{system_id}:unit_coords"
    return worst <= 1e-8, f"max |rate - 1| {worst:.3g} ({worst_at})"


def _suite_flowbox_law(seed=0, t_step=0.25, n_points=100):
    """z(flow(x,t)) - z(x) = (0,...,0,t) for closed-form flowbox maps."""
    worst = 0.0
    worst_at = ""
    for idx, system_id in enumerate(refsol_mod.reference_ids()):
        ref = refsol_mod.reference(system_id)
        if ref.flowbox is None:
            continue
        pts = ref.sample_valid(_suite_rng(seed, 300 + idx), n_points)
        expected = np.zeros(ref.field.dim)
        expected[-1] = t_step
        for x in pts:
            xt = flow(ref.field, x, t_step)
            delta = np.asarray(ref.flowbox(xt)) - np.asarray(ref.flowbox(x))
            res = float(np.max(np.abs(delta - expected)))
            if res > worst:
                worst, worst_at = res, system_id
    return worst <= 1e-6, f"max flowbox-law defect {worst:.3g} ({worst_at})"


def _suite_chart_vs_refsol(seed=0, n_points=200):
    """Characteristics-built m and h match the closed forms on [a] and [b]."""
    worst = 0.0
    worst_at = ""
    for idx, system_id in enumerate(("source-a", "hyperbolic-b")):
        ref = refsol_mod.reference(system_id)
        built = chart_mod.build_chart(
            ref.field, chart_mod.builtin_surface(ref.surface_name)
        )
        pts = ref.sample_valid(_suite_rng(seed, 400 + idx), n_points)
        for x in pts:
            z = chart_mod.flowbox(built, x)
            dm = abs(z[-1] - ref.unit_time(x))
            dh = float(np.max(np.abs(z[:-1] - ref.chart_h(x))))
            if max(dm, dh) > worst:
                worst, worst_at = max(dm, dh), system_id
    return worst <= 1e-6, f"max |chart - closed form| {worst:.3g} ({worst_at})"


def _suite_appendix_counterexample(seed=0):
    """The along-orbit eigen relation does not imply the PDE: x2 at 2."""
    ref = refsol_mod.reference("appendix")
    cand = ref.failed_candidates[0]
    dev = kef_mod.orbit_eigen_check(
        cand.fn, cand.eigenvalue, ref.field, cand.orbit_seed, 1.0
    )
    if dev > 1e-6:
        return False, f"orbit deviation {dev:.3g} on the invariant parabola"
    res_at_11 = kef_mod.kpde_residual(
        cand.fn, cand.eigenvalue, ref.field, np.array([1.0, 1.0])
    )
    if abs(res_at_11 - (-2.0)) > 1e-6:
        return False, f"residual at (1,1) is {res_at_11:.6g}, expected -2"
    pts = ref.sample_valid(_suite_rng(seed, 500), 20)
    worst = 0.0
    for x in pts:
        res = kef_mod.kpde_residual(cand.fn, cand.eigenvalue, ref.field, x)
        gap = abs(res - cand.residual(x))
        worst = max(worst, gap)
    if worst > 1e-6:
        return False, f"closed-form residual mismatch {worst:.3g}"
    return True, (
        f"orbit deviation {dev:.3g}, residual at (1,1) = {res_at_11.real:.6g}"
    )


def _suite_recurrence_audit(seed=0, n_orbits=6):
    """Rotation surfaces are recurrent; the source/saddle surfaces are not."""
    rotation = dynsys.builtin("rotation-c")
    horizon = 4.0 * np.pi
    segments = [
        chart_mod.line_surface(1.0, 0.0, 1.0, axis=0, name="seg-x1-1"),
        chart_mod.line_surface(0.5, 0.0, 1.0, axis=0, name="seg-x1-05"),
        chart_mod.line_surface(1.5, 0.2, 1.2, axis=0, name="seg-x1-15"),
        chart_mod.line_surface(1.0, 0.1, 0.9, axis=1, name="seg-x2-1"),
        chart_mod.line_surface(0.75, 0.3, 1.4, axis=1, name="seg-x2-075"),
    ]
    for seg in segments:
        report = chart_mod.check_nonrecurrent(
            seg, rotation, n_orbits=n_orbits, horizon=horizon
        )
        if report.verdict != "fail" or not report.violations:
            return False, f"{seg.name} was not flagged recurrent"
        if max(len(times) for _, times in report.violations) < 2:
            return False, f"{seg.name}: fewer than 2 crossings recorded"
    for system_id, surface_name in (("source-a", "circle-a"), ("hyperbolic-b", "line-b")):
        field = dynsys.builtin(system_id)
        report = chart_mod.check_nonrecurrent(
            chart_mod.builtin_surface(surface_name), field, n_orbits=n_orbits
        )
        if report.verdict != "pass":
            return False, f"{surface_name} under {system_id} flagged recurrent"
    return True, "5 rotation segments recurrent, source/saddle surfaces clean"


VERIFY_SUITES = (
    ("kpde-residuals", _suite_kpde_residuals),
    ("real-form-identities", _suite_real_form_identities),
    ("unit-velocity", _suite_unit_velocity),
    ("flowbox-law", _suite_flowbox_law),
    ("chart-vs-refsol", _suite_chart_vs_refsol),
    ("appendix-counterexample", _suite_appendix_counterexample),
    ("recurrence-audit", _suite_recurrence_audit),
)


def cmd_verify_all(name_filter: str = "", out_dir=None, seed: int = 0) -> int:
    started = _now()
    selected = [(name, fn) for name, fn in VERIFY_SUITES if name_filter in name]
    if not selected:
        print(f"no verify suites match {name_filter!r}; nothing to do")
        return EXIT_OK
    results = []
    all_ok = True
    for name, fn in selected:
        try:
            ok, detail = fn(seed=seed)
        except Exception as err:  # a crashed suite is a failed suite
            ok, detail = False, f"crashed: {type(err).__name__}: {err}"
        results.append({"suite": name, "passed": bool(ok), "detail": detail})
        all_ok = all_ok and ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report_path = out / "verify_report.json"
        with open(report_path, "w") as fh:
            json.dump({"passed": all_ok, "suites": results}, fh, indent=2)
            fh.write("\n")
        _write_manifest(
            out, "verify-all", {"filter": name_filter, "seed": seed},
            [report_path.name],
            {"passed": all_ok,
             "failed": [r["suite"] for r in results if not r["passed"]]},
            started, seed=seed,
        )
    print("verify-all: " + ("all suites passed" if all_ok else "FAILURES present"))
    return EXIT_OK if all_ok else EXIT_AUDIT


# ---------------------------------------------------------------------------
# argument plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowbox", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_list = sub.add_parser("systems-list", help="list built-in systems")
    p_list.add_argument("--filter", default="", help="substring filter on names")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with default option values")
    common.add_argument("--system", help="built-in system name")
    common.add_argument("--system-file", help="JSON system spec file")
    common.add_argument("--out", default=".", help="output directory")

    p_chart = sub.add_parser(
        "chart-build", parents=[common],
        help="evaluate flowbox coordinates on a grid via characteristics",
    )
    p_chart.add_argument("--surface", help="built-in surface name, JSON file, or inline JSON")
    p_chart.add_argument("--grid", help="grid spec LOxHI,...xRES")
    p_chart.add_argument("--force", action="store_true",
                         help="skip the transversality/recurrence audits")
    p_chart.add_argument("--horizon", type=float, default=None)
    p_chart.add_argument("--abs-tol", type=float, default=None)
    p_chart.add_argument("--rel-tol", type=float, default=None)

    p_kef = sub.add_parser(
        "kef-check", parents=[common],
        help="sweep the eigenvalue-PDE residual of a candidate over a grid",
    )
    p_kef.add_argument("--phi", help="candidate eigenfunction expression")
    p_kef.add_argument("--lambda", dest="eigenvalue",
                       help="eigenvalue, e.g. 3 or -0.45+0.19i")
    p_kef.add_argument("--minimal-set", action="store_true",
                       help="check the chart-built minimal set instead of --phi")
    p_kef.add_argument("--surface", help="surface for --minimal-set")
    p_kef.add_argument("--grid", help="grid spec LOxHI,...xRES")
    p_kef.add_argument("--fd-step", type=float, default=None)
    p_kef.add_argument("--force", action="store_true")
    p_kef.add_argument("--horizon", type=float, default=None)
    p_kef.add_argument("--abs-tol", type=float, default=None)
    p_kef.add_argument("--rel-tol", type=float, default=None)

    p_fit = sub.add_parser(
        "varfit", parents=[common],
        help="fit unit-velocity coordinates on a grid variationally",
    )
    p_fit.add_argument("--grid", help="grid spec LOxHI,...xRES")
    p_fit.add_argument("--iterations", type=int, default=None)
    p_fit.add_argument("--seed", type=int, default=None)
    p_fit.add_argument("--step-size", type=float, default=None)
    p_fit.add_argument("--momentum", type=float, default=None)
    p_fit.add_argument("--weight-a", type=float, default=None)
    p_fit.add_argument("--weight-b", type=float, default=None)
    p_fit.add_argument("--target", type=float, default=None)

    p_verify = sub.add_parser(
        "verify-all", parents=[common],
        help="run the closed-form verification suites",
    )
    p_verify.add_argument("--filter", default="", help="substring filter on suites")
    p_verify.add_argument("--seed", type=int, default=0)
    return parser


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    path = getattr(args, "config", None)
    if not path:
        return args
    try:
        with open(path) as fh:
            overrides = json.load(fh)
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot read config {path}: {err}")
    if not isinstance(overrides, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise UsageError(f"config {path}: unknown option {key!r}")
        if getattr(args, dest) in (None, False, ""):
            setattr(args, dest, value)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_config(args)
        if args.command == "systems-list":
            return cmd_systems_list(args.filter)
        if args.command == "chart-build":
            if not args.surface or not args.grid:
                raise UsageError("chart-build needs --surface and --grid")
            return cmd_chart_build(
                args.system, args.surface, args.grid, args.out,
                force=args.force, horizon=args.horizon,
                abs_tol=args.abs_tol, rel_tol=args.rel_tol,
                system_file=args.system_file,
            )
        if args.command == "kef-check":
            if not args.grid:
                raise UsageError("kef-check needs --grid")
            eigenvalue = (
                parse_eigenvalue(args.eigenvalue)
                if args.eigenvalue is not None else None
            )
            return cmd_kef_check(
                args.system, args.grid, args.out,
                phi_expr=args.phi, eigenvalue=eigenvalue,
                use_minimal_set=args.minimal_set, surface_spec=args.surface,
                fd_step=args.fd_step if args.fd_step is not None else 1e-5,
                abs_tol=args.abs_tol, rel_tol=args.rel_tol,
                horizon=args.horizon, system_file=args.system_file,
                force=args.force,
            )
        if args.command == "varfit":
            if not args.grid:
                raise UsageError("varfit needs --grid")
            return cmd_varfit(
                args.system, args.grid, args.out,
                iterations=args.iterations, seed=args.seed,
                step_size=args.step_size, momentum=args.momentum,
                weight_a=args.weight_a, weight_b=args.weight_b,
                target=args.target, system_file=args.system_file,
            )
        if args.command == "verify-all":
            return cmd_verify_all(args.filter, out_dir=None if args.out == "." else args.out,
                                  seed=args.seed)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as err:
        print(f"flowbox: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrationError as err:
        print(f"flowbox: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as err:
        print(f"flowbox: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())
