from __future__ import annotations

import numpy as np
import pytest

from dynkin_filter import closed_form as cf
from dynkin_filter import vi_solver as vs
from dynkin_filter.model_core import f_map, validate_params

SURFACES = ("desk_surface", "neg_k_surface", "case1_surface", "case4_surface")


# grid -------------------------------------------------------------------------------------------


def test_grid_validation():
    with pytest.raises(ValueError):
        vs.GridSpec(1.0, 0.0, 100)
    with pytest.raises(ValueError):
        vs.GridSpec(0.0, 1.0, 8)
    with pytest.raises(ValueError):
        vs.GridSpec(0.0, 1.0, 100, y_min=0.6)
    with pytest.raises(ValueError):
        vs.GridSpec(0.0, 1.0, 100, spacing="chebyshev")


def test_logit_nodes_symmetric_and_clamped():
    g = vs.GridSpec(0.0, 1.0, 100, y_min=1e-3, n_y=51)
    y = g.y_nodes()
    assert y[0] == 1e-3 and y[-1] == 1 - 1e-3
    assert np.allclose(y + y[::-1], 1.0, atol=1e-15)
    assert np.all(np.diff(y) > 0)


def test_aligned_grid_puts_strike_on_nodes(desk):
    g = vs.default_grid(desk)
    z, y = g.z_nodes(), g.y_nodes()
    # ln F = z - ratio * logit(y); the strike line ln F = ln K hits a node on every row
    lnf = z[:, None] - desk.ratio * np.log(y / (1 - y))[None, :]
    hits = np.min(np.abs(lnf - np.log(desk.strike)), axis=0)
    assert np.all(hits < 1e-9)


def test_default_grid_covers_buyer_region(desk):
    g = vs.default_grid(desk)
    x_top = f_map(g.z_max, g.y_nodes(), desk)
    x_bottom = f_map(g.z_min, g.y_nodes()[0], desk)
    assert np.all(x_top >= desk.r * desk.strike / (desk.delta0 * g.y_nodes()))
    assert x_bottom <= 1e-2 * desk.strike * (1 + 1e-9)


# sandwich and invariants ------------------------------------------------------------------------


@pytest.mark.parametrize("name", SURFACES)
def test_surface_invariants(name, request):
    s = request.getfixturevalue(name)
    inv = vs.surface_invariants(s)
    for key in ("sandwich", "v_nondecreasing_in_z", "labels_exclusive"):
        assert inv[key], key


@pytest.mark.parametrize("name", SURFACES)
def test_boundary_invariants(name, request):
    s = request.getfixturevalue(name)
    fb = vs.extract_boundaries(s)
    inv = vs.boundary_invariants(fb)
    failed = [k for k, ok in inv.items() if not ok]
    assert not failed


@pytest.mark.parametrize("name", ("desk_surface", "neg_k_surface"))
def test_v_minus_f_nondecreasing_in_y(name, request):
    assert vs.surface_invariants(request.getfixturevalue(name))["v_minus_F_nondecreasing_in_y"]


def _worst_vf_violation(s, y_low=5e-3):
    # rows next to the frozen bottom edge inherit its large-x mismatch with V0
    rows = s.y >= y_low
    vf = (s.g - np.minimum(s.x, s.params.strike))[:, rows]
    return float(max(0.0, -np.min(np.diff(vf, axis=1))))


@pytest.mark.slow
def test_v_minus_f_violation_shrinks_under_refinement_case1(case1, case1_surface):
    fine = vs.solve(case1, vs.default_grid(case1, n_z=800, n_y=400))
    coarse_err = _worst_vf_violation(case1_surface)
    fine_err = _worst_vf_violation(fine)
    assert fine_err < 0.25 * coarse_err
    assert fine_err < 1e-5 * case1.strike


def test_region_labels_match_gap(desk_surface):
    s = desk_surface
    K, eps = s.params.strike, s.params.penalty
    s1 = s.region == vs.S1_LABEL
    s2 = s.region == vs.S2_LABEL
    assert np.all(s.g[s1] <= 1e-7 * K)
    assert np.all(s.x[s1] > K)
    assert np.all(s.g[s2] >= eps - 1e-6 * K)
    assert np.all(s.x[s2] >= K * (1 - 1e-10))


def test_case1_has_no_seller_region(case1_surface):
    fb = vs.extract_boundaries(case1_surface)
    assert fb.s2_empty
    assert not np.any(case1_surface.region == vs.S2_LABEL)
    assert np.all(np.isnan(fb.c2))


def test_desk_has_seller_region(desk_boundaries):
    assert not desk_boundaries.s2_empty
    assert np.any(~np.isnan(desk_boundaries.c2))


# solvers ---------------------------------------------------------------------------------------


def test_psor_and_policy_iteration_agree(desk):
    g = vs.default_grid(desk, n_z=200, n_y=100)
    a = vs.solve(desk, g, method="psor", tol=1e-11)
    b = vs.solve(desk, g, method="policy")
    assert np.max(np.abs(a.g - b.g)) < 1e-8 * desk.strike
    assert np.array_equal(a.region, b.region)


def test_pde_residual_signs(desk_surface, neg_k_surface):
    for s in (desk_surface, neg_k_surface):
        res = vs.pde_residual(s)
        assert res["continuation"] < 1e-6 * s.params.strike
        assert res["s1_max"] <= 1e-6 * s.params.strike
        assert res["s2_min"] >= -1e-6 * s.params.strike


def test_unknown_edge_and_method(desk):
    g = vs.default_grid(desk, n_z=40, n_y=20)
    with pytest.raises(ValueError):
        vs.solve(desk, g, edge="mirror")
    with pytest.raises(ValueError):
        vs.solve(desk, g, method="multigrid")


def test_closed_form_edges_give_same_interior(desk):
    # both lateral rules converge to the same interior away from the edges
    g = vs.default_grid(desk, n_z=200, n_y=100)
    a = vs.solve(desk, g, edge="frozen")
    b = vs.solve(desk, g, edge="closed_form")
    mid = slice(30, 70)
    assert np.max(np.abs(a.v[:, mid] - b.v[:, mid])) < 1e-2 * desk.strike


@pytest.mark.slow
def test_self_convergence(desk):
    xs = np.geomspace(0.3, 5.0, 60) * desk.strike
    ys = np.linspace(0.05, 0.95, 37)
    vals = {}
    for ny in (201, 401, 801):
        s = vs.solve(desk, vs.default_grid(desk, n_z=2 * (ny - 1) + 1, n_y=ny))
        vals[ny], missing = vs.surface_to_xy(s, xs, ys)
        assert not missing.any()
    e_coarse = np.max(np.abs(vals[201] - vals[801]))
    e_fine = np.max(np.abs(vals[401] - vals[801]))
    assert 1.5 <= e_coarse / e_fine <= 4.0


# boundaries --------------------------------------------------------------------------------------


def test_top_row_matches_complete_information(desk, desk_boundaries):
    sol = cf.classify_case(desk)
    assert desk_boundaries.b1[-2] / sol.buyer_boundary - 1.0 == pytest.approx(0.0, abs=1e-2)


@pytest.mark.slow
def test_case4_top_row_on_fine_grid(case4):
    sol = cf.classify_case(case4)
    s = vs.solve(case4, vs.default_grid(case4, n_z=1600, n_y=800))
    fb = vs.extract_boundaries(s)
    assert fb.b1[-2] / sol.alpha1 == pytest.approx(1.0, abs=2e-2)
    assert fb.b2[-2] / sol.beta1 == pytest.approx(1.0, abs=1e-3)


def test_b2_blows_up_towards_y0(desk_boundaries):
    b2 = desk_boundaries.b2
    y = desk_boundaries.y
    low = b2[1]
    mid = np.nanmedian(b2[(y > 0.4) & (y < 0.6)])
    assert low >= 5.0 * mid


def test_b1_bound_from_generator(desk, desk_boundaries):
    y = desk_boundaries.y[1:-1]
    b1 = desk_boundaries.b1[1:-1]
    m = ~np.isnan(b1)
    assert np.all(b1[m] >= desk.r * desk.strike / (desk.delta0 * y[m]) * (1 - 1e-9))


def test_generator_sign_on_stopping_regions(desk, desk_surface):
    s = desk_surface
    zz, yy = np.meshgrid(s.z, s.y, indexing="ij")
    l1, l2 = vs.analytic_obstacle_generator(desk, zz, yy)
    assert np.all(l1[s.region == vs.S1_LABEL] <= 1e-12)
    s2 = (s.region == vs.S2_LABEL) & (s.x > desk.strike)
    assert np.all(l2[s2] >= -1e-12)


# truncation ------------------------------------------------------------------------------------


def test_truncated_values_increase_with_level(desk):
    g = vs.default_grid(desk, n_z=200, n_y=100)
    v = vs.solve(desk, g).v
    prev = None
    for n in (2.0, 4.0, 8.0):
        vn = vs.solve_truncated(desk, g, n * desk.strike).v
        assert np.all(vn <= v + 1e-9)
        if prev is not None:
            assert np.all(vn >= prev - 1e-9)
        prev = vn


def test_truncated_value_flat_beyond_level(desk):
    g = vs.default_grid(desk, n_z=200, n_y=100)
    n = 4.0 * desk.strike
    s = vs.solve_truncated(desk, g, n)
    above = s.x >= n
    assert np.allclose(s.v[above], n - desk.strike, atol=1e-9)


def test_truncation_level_must_exceed_strike(desk):
    with pytest.raises(ValueError):
        vs.solve_truncated(desk, vs.default_grid(desk, n_z=40, n_y=20), 0.5)


# evaluation --------------------------------------------------------------------------------------


def test_surface_to_xy_reproduces_nodes(desk_surface):
    s = desk_surface
    j, i = len(s.z) // 2, len(s.y) // 2
    vals, missing = vs.surface_to_xy(s, [s.x[j, i]], [s.y[i]])
    assert not missing.any()
    assert vals[0, 0] == pytest.approx(s.v[j, i], rel=1e-10, abs=1e-12)


def test_surface_to_xy_flags_outside(desk_surface):
    vals, missing = vs.surface_to_xy(desk_surface, [1.0], [1e-6, 0.5])
    assert missing[0, 0] and not missing[0, 1]
    assert np.isnan(vals[0, 0])


def test_surface_values_respect_payoffs(desk, desk_surface):
    xs = np.geomspace(0.2, 10.0, 50)
    ys = np.linspace(0.05, 0.95, 19)
    vals, missing = vs.surface_to_xy(desk_surface, xs, ys)
    assert not missing.any()
    g1 = np.maximum(xs - desk.strike, 0.0)[:, None]
    assert np.all(vals >= g1 - 1e-9)
    assert np.all(vals <= g1 + desk.penalty + 1e-9)


def test_smoothfit_flat_inside_seller_region(desk_surface, desk_boundaries):
    rep = vs.smoothfit_report(desk_surface, desk_boundaries)
    assert rep["max_wy_inside_s2"] < 1e-6
    assert rep["slices_c1"] > 0 and rep["slices_c2"] > 0


def test_boundary_lookup_outside_grid_is_nan(desk_boundaries):
    assert np.isnan(desk_boundaries.c1_at(desk_boundaries.z[0] - 1.0))
