from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynkin_filter import path_engine as pe
from dynkin_filter.errors import ConfigError, OutOfDomain, SingularTransform
from dynkin_filter.model_core import StatePoint, f_map, validate_params


# config ----------------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [dict(dt=0.0), dict(dt=-1e-3), dict(dt=0.1, horizon=0.01), dict(n_paths=0), dict(seed=-1), dict(scheme="exact")],
)
def test_sim_config_rejects(kw):
    with pytest.raises(ConfigError):
        pe.SimConfig(**kw)


def test_sim_config_counts():
    cfg = pe.SimConfig(dt=0.1, horizon=1.0, n_paths=10, block_size=4)
    assert cfg.n_steps == 10
    assert cfg.n_blocks == 3
    assert list(cfg.block_paths(2)) == [8, 9]
    assert cfg.times()[-1] == pytest.approx(1.0)


# filtered pair ---------------------------------------------------------------------------------


def test_determinism(desk):
    cfg = pe.SimConfig(dt=1e-2, horizon=1.0, n_paths=300, seed=42, block_size=128)
    a = pe.simulate_filtered(desk, StatePoint(1.0, 0.4), cfg)
    b = pe.simulate_filtered(desk, StatePoint(1.0, 0.4), cfg)
    assert a.y_paths.tobytes() == b.y_paths.tobytes()
    assert a.x_paths.tobytes() == b.x_paths.tobytes()
    c = pe.simulate_filtered(desk, StatePoint(1.0, 0.4), cfg.replace(seed=43))
    assert not np.array_equal(a.y_paths, c.y_paths)


def test_blocks_do_not_depend_on_batch_size(desk):
    cfg = pe.SimConfig(dt=1e-2, horizon=0.5, n_paths=256, seed=9, block_size=128)
    big = pe.simulate_filtered(desk, StatePoint(1.0, 0.5), cfg)
    small = pe.simulate_filtered(desk, StatePoint(1.0, 0.5), cfg.replace(n_paths=128))
    assert np.array_equal(big.y_paths[:128], small.y_paths)


def test_streamed_increments_match_stored(desk):
    cfg = pe.SimConfig(dt=1e-2, horizon=0.2, n_paths=50, seed=3, block_size=50)
    batch = pe.simulate_filtered(desk, StatePoint(1.0, 0.5), cfg)
    streamed = np.stack(list(pe.iter_block_increments(cfg, 0)), axis=1)
    assert np.array_equal(streamed, batch.dW)


def test_batch_invariants(desk):
    cfg = pe.SimConfig(dt=1e-2, horizon=2.0, n_paths=500, seed=1)
    b = pe.simulate_filtered(desk, StatePoint(1.5, 0.3), cfg)
    assert np.all((b.y_paths >= 0.0) & (b.y_paths <= 1.0))
    assert np.array_equal(b.z_values, b.z_values[0] + desk.k * b.times)
    inner = (b.y_paths > 0) & (b.y_paths < 1)
    zz = np.broadcast_to(b.z_values, b.y_paths.shape)
    assert np.array_equal(b.x_paths[:, 1:][inner[:, 1:]], f_map(zz[:, 1:][inner[:, 1:]], b.y_paths[:, 1:][inner[:, 1:]], desk))
    assert np.all(b.x_paths[:, 0] == 1.5)


@pytest.mark.parametrize("y0, drift", [(0.0, 0.0), (1.0, 1.0)])
def test_known_indicator(desk, y0, drift):
    cfg = pe.SimConfig(dt=1e-2, horizon=1.0, n_paths=200, seed=2)
    b = pe.simulate_filtered(desk, StatePoint(2.0, y0), cfg)
    assert np.all(b.y_paths == y0)
    # geometric with drift r - delta0 * y0: log increments are deterministic given dW
    mu = desk.r - desk.delta0 * drift - 0.5 * desk.sigma ** 2
    expect = math.log(2.0) + mu * b.times[None, :] + desk.sigma * np.concatenate(
        [np.zeros((200, 1)), np.cumsum(b.dW, axis=1)], axis=1
    )
    assert np.allclose(np.log(b.x_paths), expect, rtol=0, atol=1e-12)


def test_start_outside_unit_interval(desk):
    with pytest.raises(ValueError):
        pe.simulate_filtered(desk, StatePoint(1.0, 1.2), pe.SimConfig(n_paths=2))


def test_discounted_price_supermartingale(desk):
    cfg = pe.SimConfig(dt=1e-2, horizon=1.0, n_paths=100_000, seed=5, block_size=16384)
    b = pe.simulate_filtered(desk, StatePoint(1.0, 0.5), cfg, keep_increments=False)
    for t in (0.25, 0.5, 1.0):
        i = int(round(t / cfg.dt))
        disc = math.exp(-desk.r * b.times[i]) * b.x_paths[:, i]
        se = disc.std(ddof=1) / math.sqrt(cfg.n_paths)
        assert disc.mean() <= 1.0 + 3 * se


def test_posterior_martingale(desk):
    cfg = pe.SimConfig(dt=1e-2, horizon=1.0, n_paths=20_000, seed=8)
    b = pe.simulate_filtered(desk, StatePoint(1.0, 0.3), cfg, keep_increments=False)
    yT = b.y_paths[:, -1]
    assert abs(yT.mean() - 0.3) <= 3 * yT.std(ddof=1) / math.sqrt(cfg.n_paths)


# scenario and filter -------------------------------------------------------------------------


@pytest.mark.parametrize("d", [0, 1])
def test_scenario_mean(desk, d):
    cfg = pe.SimConfig(dt=0.25, horizon=1.0, n_paths=100_000, seed=21)
    sc = pe.simulate_scenario(desk, 1.3, d, cfg)
    disc = math.exp(-(desk.r - desk.delta0 * d)) * sc.s_paths[:, -1]
    se = disc.std(ddof=1) / math.sqrt(cfg.n_paths)
    assert abs(disc.mean() - 1.3) <= 3 * se


def test_scenario_determinism_and_indicator(desk):
    cfg = pe.SimConfig(dt=0.1, horizon=1.0, n_paths=64, seed=4)
    a = pe.simulate_scenario(desk, 1.0, 1, cfg)
    b = pe.simulate_scenario(desk, 1.0, 1, cfg)
    assert a.s_paths.tobytes() == b.s_paths.tobytes()
    with pytest.raises(ValueError):
        pe.simulate_scenario(desk, 1.0, 2, cfg)


@settings(max_examples=50, deadline=None)
@given(y0=st.floats(1e-6, 1 - 1e-6), x0=st.floats(1e-3, 1e3))
def test_exact_filter_at_time_zero(y0, x0):
    p = validate_params(0.08, 0.05, 0.3, 1.0, 0.1)
    out = pe.exact_filter(p, [x0], x0, y0, [0.0])
    assert out[0] == pytest.approx(y0, rel=1e-12, abs=1e-15)


def test_exact_filter_singular(desk):
    with pytest.raises(SingularTransform):
        pe.exact_filter(desk, [1.0], 1.0, 0.0, [0.0])
    with pytest.raises(SingularTransform):
        pe.exact_filter(desk, [1.0], 1.0, 1.0, [0.0])


def test_exact_filter_learns_dividend(desk):
    horizon = 50.0 / desk.delta0
    cfg = pe.SimConfig(dt=0.5, horizon=horizon, n_paths=2000, seed=17)
    sc = pe.simulate_scenario(desk, 1.0, 1, cfg)
    y = pe.exact_filter(desk, sc.s_paths[:, -1], 1.0, 0.5, sc.times[-1])
    assert np.mean(y > 0.99) >= 0.95


def test_filter_gap_shrinks_with_dt(desk):
    gaps = []
    for dt in (1e-3, 5e-4):
        cfg = pe.SimConfig(dt=dt, horizon=1.0, n_paths=500, seed=7)
        b = pe.simulate_filtered(desk, StatePoint(1.0, 0.5), cfg, keep_increments=False)
        yf = pe.exact_filter(desk, b.x_exp_paths, 1.0, 0.5, b.times)
        gaps.append(np.max(np.abs(yf - b.y_paths)))
    assert gaps[1] < gaps[0] < 1e-2


def test_filter_on_transform_is_exact(desk):
    cfg = pe.SimConfig(dt=1e-2, horizon=1.0, n_paths=100, seed=7)
    b = pe.simulate_filtered(desk, StatePoint(1.0, 0.5), cfg, keep_increments=False)
    yf = pe.exact_filter(desk, b.x_paths, 1.0, 0.5, b.times)
    assert np.max(np.abs(yf - b.y_paths)) < 1e-12


def test_milstein_is_closer_to_filter(desk):
    out = {}
    for scheme in pe.SCHEMES:
        cfg = pe.SimConfig(dt=1e-3, horizon=1.0, n_paths=500, seed=7, scheme=scheme)
        b = pe.simulate_filtered(desk, StatePoint(1.0, 0.5), cfg, keep_increments=False)
        out[scheme] = np.max(np.abs(pe.exact_filter(desk, b.x_exp_paths, 1.0, 0.5, b.times) - b.y_paths))
    assert out["milstein_y_exact_z"] < out["euler_y_exact_z"]


# flow derivative ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def flow_batch():
    p = validate_params(0.08, 0.05, 0.3, 1.0, 0.1)
    cfg = pe.SimConfig(dt=1e-2, horizon=1.0, n_paths=50_000, seed=13)
    b = pe.simulate_filtered(p, StatePoint(1.0, 0.4), cfg)
    return p, b, pe.flow_derivative(p, b)


def test_flow_derivative_mean_one(flow_batch):
    _, b, u = flow_batch
    uT = u[:, -1]
    assert abs(uT.mean() - 1.0) <= 3 * uT.std(ddof=1) / math.sqrt(b.n_paths)


def test_flow_derivative_fourth_moment(flow_batch):
    p, b, u = flow_batch
    t = b.times[-1]
    assert np.mean(u[:, -1] ** 4) <= math.exp(6 * t * p.delta0 ** 2 / p.sigma ** 2) * 1.1


def test_flow_matches_difference_quotient(flow_batch):
    p, b, u = flow_batch
    sub = pe.PathBatch(p, b.cfg, b.start, b.times, b.y_paths[:500], b.z_values, b.x_paths[:500],
                       b.x_exp_paths[:500], b.seeds[:500], b.dW[:500])
    gaps = []
    for eps in (1e-3, 1e-4):
        fd = pe.flow_difference_quotient(p, sub, eps)
        gaps.append(np.max(np.abs(fd - u[:500])))
    # the Euler flow is the exact derivative of the Euler map, so the gap is O(eps^2)
    assert gaps[1] < gaps[0] < 1e-4


def test_flow_needs_increments(desk):
    b = pe.simulate_filtered(desk, StatePoint(1.0, 0.5), pe.SimConfig(n_paths=2, dt=0.1), keep_increments=False)
    with pytest.raises(ValueError):
        pe.flow_derivative(desk, b)


# hitting times -------------------------------------------------------------------------------------


def test_hit_at_time_zero_inside_s1(desk, desk_boundaries):
    fb = desk_boundaries
    j = int(np.nanargmax(np.where(np.isnan(fb.c1), -1, fb.c1)))
    z0, c = fb.z[j - 5], fb.c1[j - 5]
    y0 = 0.5 * c
    x0 = float(f_map(z0, y0, desk))
    cfg = pe.SimConfig(dt=1e-3, horizon=1e-2, n_paths=20, seed=1)
    b = pe.simulate_filtered(desk, StatePoint(x0, y0), cfg)
    assert np.all(pe.hitting_time(b, fb, "S1") == 0.0)


def test_hitting_time_never_marker(desk, desk_boundaries):
    # from deep continuation the S2 band is not reached within a short horizon
    fb = desk_boundaries
    cfg = pe.SimConfig(dt=1e-3, horizon=1e-2, n_paths=20, seed=1)
    b = pe.simulate_filtered(desk, StatePoint(0.2, 0.5), cfg)
    assert np.all(np.isinf(pe.hitting_time(b, fb, "S2")))
    with pytest.raises(ValueError):
        pe.hitting_time(b, fb, "S3")


def test_hitting_time_out_of_domain(desk, desk_boundaries):
    cfg = pe.SimConfig(dt=1.0, horizon=1e4, n_paths=2, seed=1)
    b = pe.simulate_filtered(desk, StatePoint(1.0, 0.5), cfg, keep_increments=False)
    with pytest.raises(OutOfDomain):
        pe.hitting_time(b, desk_boundaries, "S1")


def test_continuation_paths_stay_below_bound(desk, desk_boundaries):
    from dynkin_filter import game_eval as ge

    fb = desk_boundaries
    start = ge.continuation_start(fb, 0.5)
    a_z = ge.continuation_bound(desk, start, fb)
    cfg = pe.SimConfig(dt=1e-2, horizon=5.0, n_paths=2000, seed=6)
    b = pe.simulate_filtered(desk, start, cfg, keep_increments=False)
    tau = pe.hitting_time(b, fb, "S1")
    alive = b.times[None, :] < tau[:, None]
    assert np.all(b.x_paths[alive] <= a_z * (1 + 1e-9))
