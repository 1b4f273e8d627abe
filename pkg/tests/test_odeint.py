import io

import numpy as np
import pytest
from scipy.linalg import expm

from flowbox.chart import circle_surface, line_surface
from flowbox.dynsys import builtin, parse_system
from flowbox.odeint import (
    DomainExit,
    IntegratorConfig,
    StepLimitExceeded,
    find_crossings,
    flow,
    trace_orbit,
)


def test_flow_matches_matrix_exponential(tight_cfg):
    field = builtin("linear-ar")
    A = np.array([[5.5, -2.5], [-2.5, 5.5]])
    x0 = np.array([0.3, -0.2])
    for t in [0.05, 0.2, -0.15]:
        expected = expm(A * t) @ x0
        np.testing.assert_allclose(
            flow(field, x0, t, cfg=tight_cfg), expected, rtol=1e-8, atol=1e-10
        )


def test_rotation_preserves_radius(tight_cfg):
    field = builtin("rotation-c")
    x0 = np.array([2.0, 0.0])
    orbit = trace_orbit(field, x0, (0.0, 2.0 * np.pi), cfg=tight_cfg)
    radii = np.hypot(orbit.states[:, 0], orbit.states[:, 1])
    np.testing.assert_allclose(radii, 2.0, atol=1e-8)
    # full revolution returns to the start
    np.testing.assert_allclose(orbit.states[-1], x0, atol=1e-7)


def test_backward_forward_round_trip(tight_cfg):
    field = builtin("limit-cycle")
    x0 = np.array([0.4, 0.1])
    xt = flow(field, x0, 0.7, cfg=tight_cfg)
    back = flow(field, xt, -0.7, cfg=tight_cfg)
    np.testing.assert_allclose(back, x0, atol=1e-8)


def test_zero_time_is_identity():
    field = builtin("source-a")
    x0 = np.array([1.0, 2.0])
    out = flow(field, x0, 0.0)
    np.testing.assert_allclose(out, x0)
    assert out is not x0


def test_rk4_fixed_step_accuracy():
    field = builtin("hyperbolic-b")
    cfg = IntegratorConfig(method="rk4", step=1e-3)
    x0 = np.array([1.0, 1.0])
    out = flow(field, x0, 1.0, cfg=cfg)
    np.testing.assert_allclose(
        out, [np.exp(-1.0), np.exp(1.0)], rtol=1e-9
    )


def test_rk45_beats_coarse_rk4():
    field = builtin("rotation-c")
    x0 = np.array([1.0, 0.0])
    t = 2.0 * np.pi
    cfg45 = IntegratorConfig(abs_tol=1e-10, rel_tol=1e-10)
    coarse = IntegratorConfig(method="rk4", step=0.3)
    err45 = np.linalg.norm(flow(field, x0, t, cfg=cfg45) - x0)
    err4 = np.linalg.norm(flow(field, x0, t, cfg=coarse) - x0)
    assert err45 < 1e-8 < err4


def test_step_limit_exceeded():
    field = builtin("rotation-c")
    cfg = IntegratorConfig(max_steps=5)
    with pytest.raises(StepLimitExceeded):
        flow(field, np.array([1.0, 0.0]), 6.0, cfg=cfg)


def test_domain_exit_carries_partial_orbit():
    field = parse_system("x1, x2", 2, name="tight", domain=[(-2, 2), (-2, 2)])
    with pytest.raises(DomainExit) as exc:
        flow(field, np.array([1.0, 1.0]), 3.0)
    info = exc.value
    assert info.t_exit > 0
    assert len(info.times) == len(info.states)
    assert not field.contains(info.x_exit)


def test_horizon_guard():
    field = builtin("source-a")
    cfg = IntegratorConfig(horizon=1.0)
    with pytest.raises(ValueError):
        flow(field, np.array([1.0, 0.0]), 1.5, cfg=cfg)


def test_orbit_csv_format():
    field = builtin("rotation-c")
    orbit = trace_orbit(field, np.array([1.0, 0.0]), (0.0, 0.1))
    buf = io.StringIO()
    orbit.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "t,x1,x2"
    assert len(lines) == len(orbit) + 1
    first = lines[1].split(",")
    assert float(first[0]) == 0.0
    assert float(first[1]) == 1.0


def test_trace_orbit_monotone_times(tight_cfg):
    field = builtin("limit-cycle")
    orbit = trace_orbit(field, np.array([0.3, 0.0]), (0.5, -1.0), cfg=tight_cfg)
    diffs = np.diff(orbit.times)
    assert np.all(diffs < 0)
    assert orbit.times[0] == 0.5


# ---------------------------------------------------------------------------
# crossing detection


def test_rotation_crossings_spaced_half_turn(tight_cfg):
    # the orbit through (2, 0) meets the full line x1 = 0 every half turn
    field = builtin("rotation-c")
    surface = line_surface(0.0, -3.0, 3.0)
    events = find_crossings(
        field, np.array([2.0, 0.0]), surface, horizon=7.0, cfg=tight_cfg
    )
    times = np.array([e.t for e in events])
    expected = np.array(
        [-3.0 * np.pi / 2.0, -np.pi / 2.0, np.pi / 2.0, 3.0 * np.pi / 2.0]
    )
    np.testing.assert_allclose(times, expected, atol=1e-7)
    # alternating geometry: consecutive crossings pass in opposite directions
    dirs = [e.direction for e in events]
    assert sorted(set(dirs)) == [-1, 1]
    assert all(a != b for a, b in zip(dirs, dirs[1:]))


def test_single_crossing_on_monotone_orbit(tight_cfg):
    field = builtin("hyperbolic-b")
    surface = line_surface(1.0, 0.0, 4.0, name="line-b")
    events = find_crossings(
        field, np.array([0.5, 2.0]), surface, horizon=5.0, cfg=tight_cfg
    )
    assert len(events) == 1
    ev = events[0]
    # x1 = 0.5 = e^{-t} along the orbit, so the crossing is ln 2 in the past
    assert ev.t == pytest.approx(-np.log(2.0), abs=1e-8)
    assert ev.on_patch
    np.testing.assert_allclose(ev.x, [1.0, 1.0], atol=1e-8)


def test_seed_on_surface_reports_zero_crossing(tight_cfg):
    field = builtin("hyperbolic-b")
    surface = line_surface(1.0, 0.0, 4.0)
    events = find_crossings(
        field, np.array([1.0, 2.0]), surface, horizon=2.0, cfg=tight_cfg
    )
    assert any(e.t == 0.0 for e in events)
    assert len([e for e in events if abs(e.t) < 1e-9]) == 1


def test_off_patch_crossing_flagged(tight_cfg):
    # crossing happens at x2 outside the parameterized segment (0, 1)
    field = builtin("hyperbolic-b")
    surface = line_surface(1.0, 0.0, 1.0)
    events = find_crossings(
        field, np.array([0.5, 4.0]), surface, horizon=3.0, cfg=tight_cfg
    )
    assert len(events) == 1
    assert not events[0].on_patch


def test_radial_field_crosses_circle_once(tight_cfg):
    field = builtin("source-a")
    surface = circle_surface(1.0, np.pi, name="circle-a")
    events = find_crossings(
        field, np.array([1.0, 1.0]), surface, horizon=4.0, cfg=tight_cfg
    )
    assert len(events) == 1
    ev = events[0]
    # |x| = sqrt(2) e^t hits 1 at t = -ln sqrt(2)
    assert ev.t == pytest.approx(-0.5 * np.log(2.0), abs=1e-8)
    assert ev.direction == 1


def test_no_crossing_when_surface_unreached(tight_cfg):
    field = builtin("rotation-c")
    surface = line_surface(5.0, -1.0, 1.0)  # radius-2 orbit never reaches x1=5
    events = find_crossings(
        field, np.array([2.0, 0.0]), surface, horizon=7.0, cfg=tight_cfg
    )
    assert events == []
