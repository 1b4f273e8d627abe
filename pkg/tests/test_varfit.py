import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowbox.dynsys import builtin, parse_system
from flowbox.refsol import reference
from flowbox.varfit import (
    FitConfig,
    FitResult,
    GridField,
    diff_axis,
    diff_axis_T,
    fit,
    grid_axes,
    load_grid,
    loss,
    loss_gradient,
    rotate_to_flowbox,
    save_grid,
    trapezoid_weights,
)

AR = builtin("linear-ar")
BOX_REG = np.array([[4.0, 6.0], [1.0, 3.0]])
BOX_SING = np.array([[2.5, 3.0], [2.5, 3.0]])


def drift(exprs, dim=2):
    return parse_system(exprs, dim=dim, domain=[(-50.0, 50.0)] * dim)


def mesh_grid(box, shape):
    box = np.asarray(box, dtype=float)
    return np.stack(np.meshgrid(*grid_axes(box, shape), indexing="ij"), axis=0)


# ---------------------------------------------------------------------------
# Stencils and quadrature


def test_diff_axis_exact_on_quadratics():
    # second-order stencils differentiate x^2 exactly, boundary rows included
    x = np.linspace(0.0, 3.0, 13)
    h = x[1] - x[0]
    np.testing.assert_allclose(diff_axis(x * x, h, 0), 2.0 * x, atol=1e-12)


def test_diff_axis_transpose_is_adjoint(rng):
    u = rng.standard_normal((6, 9))
    v = rng.standard_normal((6, 9))
    for axis, h in ((0, 0.3), (1, 0.17)):
        lhs = np.sum(diff_axis(u, h, axis) * v)
        rhs = np.sum(u * diff_axis_T(v, h, axis))
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_trapezoid_weights_integrate_constants():
    box = np.array([[0.0, 2.0], [1.0, 4.0]])
    w = trapezoid_weights(box, (11, 7))
    assert float(np.sum(w)) == pytest.approx(6.0, rel=1e-12)


# ---------------------------------------------------------------------------
# Loss values against hand evaluations


def test_loss_of_constants_is_volume_per_coordinate():
    # zero gradients: each unit-rate defect is exactly -1, overlaps vanish
    box = np.array([[0.0, 2.0], [0.0, 3.0]])
    g = GridField(box=box, values=np.ones((2, 9, 9)))
    a, b, total = loss(g, AR)
    assert a == pytest.approx(12.0, rel=1e-12)
    assert b == 0.0
    assert total == pytest.approx(12.0, rel=1e-12)


def test_loss_vanishes_on_a_rotated_clock_pair():
    # under P = (1, 0) both coordinates must tick at unit rate with
    # orthogonal gradients: y = (x1 + x2, x1 - x2) does exactly that
    field = drift("1, 0")
    box = np.array([[0.0, 1.0], [0.0, 1.0]])
    mesh = mesh_grid(box, (9, 9))
    g = GridField(box=box, values=np.stack([mesh[0] + mesh[1], mesh[0] - mesh[1]]))
    a, b, total = loss(g, field)
    assert total == pytest.approx(0.0, abs=1e-28)
    # identity coordinates are not a minimizer: x2 does not advance at all
    gid = GridField(box=box, values=mesh)
    assert loss(gid, field)[0] == pytest.approx(1.0, rel=1e-12)


def test_loss_overlap_term_and_weights():
    # y1 = y2 = x1 solves the unit-rate term but overlaps completely:
    # A = 0, B = integral of 1 = volume
    field = drift("1, 0")
    box = np.array([[0.0, 2.0], [0.0, 1.0]])
    x1 = mesh_grid(box, (9, 9))[0]
    g = GridField(box=box, values=np.stack([x1, x1]))
    a, b, total = loss(g, field, weight_a=2.0, weight_b=3.0)
    assert a == pytest.approx(0.0, abs=1e-28)
    assert b == pytest.approx(2.0, rel=1e-12)
    assert total == pytest.approx(6.0, rel=1e-12)


def test_loss_of_analytic_restriction_shrinks_fourth_order():
    ref = reference("linear-ar")
    vals = {}
    for n in (32, 64):
        shape = (n, n)
        mesh = mesh_grid(BOX_REG, shape)
        pts = mesh.reshape(2, -1).T
        # both linear forms are positive over this box, so the complex logs
        # carry no imaginary part
        y = np.array(
            [ref.unit_coords(p) for p in pts]
        ).real.T.reshape((2,) + shape)
        vals[n] = loss(GridField(box=BOX_REG, values=y), AR)[2]
    assert vals[64] < 1e-7
    # halving the spacing should cut the loss by about 2^4
    assert vals[32] / vals[64] > 8.0


def test_loss_gradient_matches_directional_differences(rng):
    # 3 random states x 20 random directions, central differences
    field = AR
    box = np.array([[4.0, 6.0], [1.0, 3.0]])
    shape = (7, 9)
    for _ in range(3):
        values = rng.standard_normal((2,) + shape)
        grid = GridField(box=box, values=values)
        grad = loss_gradient(grid, field, 1.3, 0.7)
        for _ in range(20):
            d = rng.standard_normal((2,) + shape)
            d /= np.sqrt(np.sum(d * d))
            eps = 1e-6
            tp = loss(GridField(box=box, values=values + eps * d), field, 1.3, 0.7)[2]
            tm = loss(GridField(box=box, values=values - eps * d), field, 1.3, 0.7)[2]
            fd = (tp - tm) / (2.0 * eps)
            an = float(np.sum(grad * d))
            assert an == pytest.approx(fd, rel=1e-5, abs=1e-12)


def test_loss_rejects_box_outside_domain():
    field = parse_system("x1, x2", dim=2, domain=[(0.0, 1.0), (0.0, 1.0)])
    g = GridField(box=np.array([[0.0, 2.0], [0.0, 1.0]]), values=np.zeros((2, 5, 5)))
    with pytest.raises(ValueError):
        loss(g, field)


# ---------------------------------------------------------------------------
# Config and grid validation


def test_grid_field_validation():
    with pytest.raises(ValueError):
        GridField(box=np.array([[1.0, 0.0]]), values=np.zeros((1, 5)))
    with pytest.raises(ValueError):
        GridField(box=np.array([[0.0, 1.0]]), values=np.zeros((2, 5)))
    with pytest.raises(ValueError):
        GridField(box=np.array([[0.0, 1.0], [0.0, 1.0]]), values=np.zeros((2, 5, 2)))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"step_size": 0.0},
        {"momentum": 1.0},
        {"momentum": -0.1},
        {"iterations": 0},
        {"weight_a": -1.0},
        {"target": -1e-3},
        {"init": "zeros"},
    ],
)
def test_fit_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        FitConfig(**kwargs)


def test_fit_rejects_mismatched_inputs():
    with pytest.raises(ValueError):
        fit(AR, np.zeros((3, 2)), (9, 9))
    with pytest.raises(ValueError):
        fit(AR, BOX_REG, (9, 9, 9))
    wrong = GridField(box=np.array([[0.0, 1.0], [0.0, 1.0]]), values=np.zeros((2, 9, 9)))
    with pytest.raises(ValueError):
        fit(AR, BOX_REG, (17, 17), FitConfig(init=wrong))


# ---------------------------------------------------------------------------
# fit() behaviour


@pytest.fixture(scope="module")
def reg_fit_small():
    return fit(AR, BOX_REG, (32, 32), FitConfig(iterations=600, seed=0))


def test_fit_history_strictly_bookkept(reg_fit_small):
    r = reg_fit_small
    assert isinstance(r, FitResult)
    assert len(r.history) <= 600
    assert np.all(np.diff(r.history) <= 0.0)
    assert r.history[-1] == r.total
    assert r.iterations_run <= 600
    # corner stays pinned at zero so the minimizer is unique
    assert r.grid.values[0, 0, 0] == 0.0
    assert r.grid.values[1, 0, 0] == 0.0


def test_fit_is_deterministic(reg_fit_small):
    again = fit(AR, BOX_REG, (32, 32), FitConfig(iterations=600, seed=0))
    assert np.array_equal(again.history, reg_fit_small.history)
    assert np.array_equal(again.grid.values, reg_fit_small.grid.values)
    assert again.total == reg_fit_small.total


def test_fit_seed_changes_the_start(reg_fit_small):
    other = fit(AR, BOX_REG, (32, 32), FitConfig(iterations=600, seed=1))
    assert not np.array_equal(other.grid.values, reg_fit_small.grid.values)


def test_fit_single_iteration_history():
    r = fit(AR, BOX_REG, (64, 64), FitConfig(iterations=1, seed=0))
    assert len(r.history) == 1
    assert r.iterations_run == 1


def test_fit_target_stops_early():
    r = fit(AR, BOX_REG, (32, 32), FitConfig(iterations=3000, seed=0, target=1e-4))
    assert r.converged
    assert r.message.startswith("node-mean targets met")
    assert r.iterations_run < 3000
    assert float(np.max(r.node_mean_a)) <= 1e-4
    assert r.node_mean_b <= 1e-4
    assert not r.elevated_residual


def test_fit_supplied_init_polishes_in_place():
    field = drift("1, 0")
    box = np.array([[0.0, 1.0], [0.0, 1.0]])
    mesh = mesh_grid(box, (9, 9))
    # small skew of an exact minimizer
    skew = np.stack(
        [mesh[0] + 1.01 * mesh[1], 0.99 * mesh[0] - mesh[1]]
    )
    cfg = FitConfig(init=GridField(box=box, values=skew), iterations=400)
    r = fit(field, box, (9, 9), cfg)
    assert r.converged
    assert r.total < 1e-8
    # no continuation ladder for a supplied start
    assert len(r.level_totals) == 1
    assert r.refinement_gain is None
    assert not r.elevated_residual


def test_fit_exact_affine_solution_reaches_machine_floor():
    # P = (1, 0): the random-affine start is already in the solution family
    field = drift("1, 0")
    box = np.array([[0.0, 1.0], [0.0, 1.0]])
    r = fit(field, box, (17, 17), FitConfig(iterations=400, seed=0))
    assert r.converged
    assert r.total < 1e-20
    # a tiny refinement gain at round-off scale is not an elevated residual
    assert not r.elevated_residual


def test_fit_one_dimensional_field():
    field = parse_system("x1", dim=1, domain=[(0.01, 50.0)])
    r = fit(field, np.array([[1.0, 2.0]]), (33,), FitConfig(iterations=400, seed=0))
    assert r.converged
    assert r.node_mean_b == 0.0
    # y should march like log x1: unit rate along the flow
    assert float(np.max(np.abs(r.unit_mean - 1.0))) < 1e-3


def test_fit_three_dimensional_field():
    field = drift("x1, x2, x3", dim=3)
    box = np.array([[1.0, 2.0]] * 3)
    r = fit(field, box, (9, 9, 9), FitConfig(iterations=300, seed=0))
    assert np.all(np.diff(r.history) <= 0.0)
    assert r.converged


def test_fit_flags_nothing_on_a_regular_patch():
    r = fit(AR, BOX_REG, (64, 64), FitConfig(seed=0))
    assert r.converged
    assert not r.elevated_residual
    assert r.refinement_gain > 12.0
    assert float(np.max(r.node_mean_a)) <= 1e-2
    assert r.node_mean_b <= 1e-2


def test_fit_flags_elevated_residual_across_a_singular_line():
    # the analytic coordinates blow up on x1 = x2, which crosses this box;
    # the fit still meets node-mean targets by dodging the line, but the
    # residual refuses to shrink under grid refinement
    r = fit(AR, BOX_SING, (64, 64), FitConfig(seed=0))
    assert r.elevated_residual
    assert r.refinement_gain < 12.0
    assert "elevated residual" in r.message


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_non_finite_loss_raises():
    field = parse_system("exp(x1), 0", dim=2, domain=[(-2000.0, 2000.0), (-5.0, 5.0)])
    box = np.array([[700.0, 1000.0], [0.0, 1.0]])
    with pytest.raises(FloatingPointError):
        fit(field, box, (9, 9), FitConfig(iterations=5))


@settings(max_examples=8, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=2**31 - 1),
    n1=st.integers(min_value=9, max_value=14),
    n2=st.integers(min_value=9, max_value=14),
)
def test_fit_history_never_increases(seed, n1, n2):
    r = fit(AR, BOX_REG, (n1, n2), FitConfig(iterations=40, seed=seed))
    assert np.all(np.diff(r.history) <= 0.0)
    assert r.history[-1] == r.total


# ---------------------------------------------------------------------------
# Flowbox rotation


def test_rotate_to_flowbox_on_identity_coordinates():
    # y_i = x_i under P = (1,1,1): recombined coordinates give two conserved
    # quantities and one clock
    field = drift("1, 1, 1", dim=3)
    box = np.array([[0.0, 1.0]] * 3)
    mesh = mesh_grid(box, (5, 5, 5))
    z = rotate_to_flowbox(GridField(box=box, values=mesh))
    np.testing.assert_allclose(z.values[0], (mesh[0] - mesh[2]) / 2.0, atol=1e-14)
    np.testing.assert_allclose(z.values[1], (mesh[1] - mesh[2]) / 2.0, atol=1e-14)
    np.testing.assert_allclose(z.values[2], np.mean(mesh, axis=0), atol=1e-14)
    a, b, total = loss(z, field, weight_a=1.0, weight_b=0.0)
    # z1, z2 are conserved (rate 0), z3 advances at rate 1: A = 2 * volume
    assert a == pytest.approx(2.0, rel=1e-12)


def test_rotate_to_flowbox_one_dimensional_passthrough():
    g = GridField(box=np.array([[0.0, 1.0]]), values=np.linspace(0, 1, 9)[None, :])
    assert rotate_to_flowbox(g) is g


def test_rotated_fit_advances_only_the_last_coordinate():
    r = fit(AR, BOX_REG, (32, 32), FitConfig(iterations=1500, seed=0))
    z = rotate_to_flowbox(r.grid)
    gz = loss(z, AR, weight_a=1.0, weight_b=0.0)[0]
    # z1 conserved, z2 at unit rate: defect integral close to volume * 1
    assert gz == pytest.approx(4.0, rel=0.05)


# ---------------------------------------------------------------------------
# Persistence


def test_save_and_load_round_trip(tmp_path, rng):
    box = np.array([[0.0, 1.0], [2.0, 3.5]])
    g = GridField(box=box, values=rng.standard_normal((2, 5, 7)))
    path = tmp_path / "grid.csv"
    save_grid(g, path, sidecar={"system": "linear-ar", "note": 3})
    back = load_grid(path)
    assert np.array_equal(back.values, g.values)
    assert np.array_equal(back.box, g.box)
    meta = json.loads((tmp_path / "grid.csv.json").read_text())
    assert meta["system"] == "linear-ar"
    assert meta["shape"] == [5, 7]


def test_saved_csv_layout(tmp_path):
    box = np.array([[0.0, 1.0], [0.0, 1.0]])
    g = GridField(box=box, values=mesh_grid(box, (3, 3)))
    path = tmp_path / "grid.csv"
    save_grid(g, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x1,x2,y1,y2"
    assert len(lines) == 1 + 9
    first = [float(v) for v in lines[1].split(",")]
    assert first == [0.0, 0.0, 0.0, 0.0]
