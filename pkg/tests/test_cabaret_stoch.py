import numpy as np
import pytest

from saltqg.grid import Grid
from saltqg.elliptic import StratificationParams, build_workspace
from saltqg import cabaret_det as det
from saltqg import cabaret_stoch as stoch
from saltqg.snapshots import SnapshotFormatError

STRAT = StratificationParams.from_per_km2(4.22e-3, 1.41e-3)
LX, LY = 3.84e6, 1.92e6


def setup(nx=16, ny=8, **kw):
    g = Grid(nx, ny, LX, LY)
    ws = build_workspace(g, STRAT)
    return g, ws, det.ModelParams(**kw)


def random_state(g, ws, params, seed=0, scale=1e-6):
    rng = np.random.default_rng(seed)
    q = scale * rng.standard_normal((2, g.ny, g.nx))
    return det.initial_state(g, q, params, ws, mass=0.0)


# --- noise basis -------------------------------------------------------------

def test_xi_from_single_sine_mode():
    g = Grid(16, 8, LX, LY)
    xn = np.arange(g.nx) * g.dx
    yn = np.arange(g.ny + 1) * g.dy
    zeta = np.zeros((1, 2, g.ny + 1, g.nx))
    zeta[0, 0] = np.outer(np.sin(np.pi * yn / g.Ly), np.sin(2 * np.pi * xn / g.Lx))
    zeta[0, 0, 0] = 0.0
    zeta[0, 0, -1] = 0.0
    basis = stoch.xi_from_node_streams(zeta, g)
    # forward differences of the node stream function
    assert np.allclose(
        basis.xu[0, 0], (zeta[0, 0, 1:] - zeta[0, 0, :-1]) / g.dy, rtol=0, atol=0
    )
    assert np.allclose(
        basis.xv[0, 0], -(np.roll(zeta[0, 0], -1, axis=-1) - zeta[0, 0]) / g.dx,
        rtol=0, atol=0,
    )


def test_synthesized_basis_divergence_free():
    g = Grid(24, 12, LX, LY)
    basis = stoch.synthesize_xi(g, k=6, seed=3, amplitude=1.0)
    assert stoch.divergence_defect(basis) <= 1e-14


def test_synthesize_paper_mode_count():
    g = Grid(129, 65, LX, LY)
    basis = stoch.synthesize_xi(g, k=32, seed=0)
    assert basis.k == 32
    # modes are distinct fields
    flat = basis.xu.reshape(32, -1)
    norms = np.linalg.norm(flat, axis=1)
    assert (norms > 0).all()
    cross = flat @ flat.T / np.outer(norms, norms)
    assert (np.abs(cross - np.eye(32)) < 1 - 1e-9).all()


def test_synthesize_rejects_k_beyond_modes():
    g = Grid(8, 4, LX, LY)
    with pytest.raises(ValueError, match="modes"):
        stoch.synthesize_xi(g, k=10_000, seed=0)


def test_synthesize_amplitude_and_spectrum():
    g = Grid(24, 12, LX, LY)
    basis = stoch.synthesize_xi(g, k=4, seed=1, amplitude=2.0, spectrum=1.0)
    peaks = [
        max(np.abs(basis.xu[m, 0]).max(), np.abs(basis.xv[m, 0]).max())
        for m in range(4)
    ]
    for m, peak in enumerate(peaks):
        assert peak == pytest.approx(2.0 / (m + 1), rel=1e-12)
    # layer ratio applies to layer 2
    assert np.allclose(basis.xu[:, 1], basis.xu[:, 0] / 3.0, rtol=1e-12)


def test_synthesize_deterministic_in_seed():
    g = Grid(16, 8, LX, LY)
    a = stoch.synthesize_xi(g, k=3, seed=7)
    b = stoch.synthesize_xi(g, k=3, seed=7)
    c = stoch.synthesize_xi(g, k=3, seed=8)
    assert np.array_equal(a.xu, b.xu) and np.array_equal(a.xv, b.xv)
    assert not np.array_equal(a.xu, c.xu)


def test_save_load_round_trip(tmp_path):
    g = Grid(16, 8, LX, LY)
    basis = stoch.synthesize_xi(g, k=5, seed=2, amplitude=0.5)
    path = tmp_path / "xi.qgf"
    stoch.save_xi(path, basis)
    back = stoch.load_xi(path, g)
    assert np.array_equal(back.xu, basis.xu)
    assert np.array_equal(back.xv, basis.xv)


def test_load_truncated_names_offset(tmp_path):
    g = Grid(16, 8, LX, LY)
    basis = stoch.synthesize_xi(g, k=2, seed=2)
    path = tmp_path / "xi.qgf"
    stoch.save_xi(path, basis)
    raw = path.read_bytes()
    path.write_bytes(raw[:-40])
    with pytest.raises(SnapshotFormatError, match=f"byte {len(raw) - 40}"):
        stoch.load_xi(path, g)


def test_load_rejects_divergent_basis(tmp_path):
    g = Grid(16, 8, LX, LY)
    basis = stoch.synthesize_xi(g, k=2, seed=2, amplitude=1.0)
    xu = basis.xu.copy()
    xu[0, 0, 3, 4] *= 1.001  # break the telescoping by a relative 1e-3
    broken = stoch.XiBasis(grid=g, xu=xu, xv=basis.xv)
    path = tmp_path / "xi.qgf"
    stoch.save_xi(path, broken)
    with pytest.raises(ValueError, match="divergence"):
        stoch.load_xi(path, g)


# --- noise streams -----------------------------------------------------------

def test_stream_reproducible_and_independent():
    a = stoch.NoiseStream(seed=5, member=0)
    b = stoch.NoiseStream(seed=5, member=0)
    c = stoch.NoiseStream(seed=5, member=1)
    dw_a = a.step_increments(12, 4, 900.0)
    assert np.array_equal(dw_a, b.step_increments(12, 4, 900.0))
    assert not np.array_equal(dw_a, c.step_increments(12, 4, 900.0))
    assert not np.array_equal(dw_a, a.step_increments(13, 4, 900.0))


def test_stream_window_matches_stepwise():
    s = stoch.NoiseStream(seed=9, member=2)
    window = s.window_increments(5, 4, 3, 600.0)
    for i in range(4):
        assert np.array_equal(window[i], s.step_increments(5 + i, 3, 600.0))


def test_stream_increment_statistics():
    s = stoch.NoiseStream(seed=1, member=0)
    dt = 450.0
    draws = np.concatenate([s.step_increments(i, 8, dt) for i in range(4000)])
    assert abs(draws.mean()) < 0.05 * np.sqrt(dt)
    assert abs(draws.var() - dt) < 0.05 * dt


# --- stochastic step ---------------------------------------------------------

def test_noise_off_matches_deterministic():
    g, ws, params = setup(beta=2e-11, nu=30.0, mu=4e-8, U=(0.06, 0.0), dt=900.0)
    st = random_state(g, ws, params, seed=4)
    basis = stoch.synthesize_xi(g, k=3, seed=1, amplitude=1.0)
    out_s = stoch.stoch_step(st, params, ws, basis, np.zeros(3))
    out_d = det.step(st, params, ws)
    scale = np.abs(out_d.qc).max()
    assert np.abs(out_s.qc - out_d.qc).max() <= 1e-12 * scale
    assert np.abs(out_s.qxf - out_d.qxf).max() <= 1e-12 * scale
    assert np.abs(out_s.qyf - out_d.qyf).max() <= 1e-12 * scale
    assert np.array_equal(out_s.u, out_d.u)


def test_constant_q_invariant_under_noise():
    g, ws, params = setup(dt=900.0)
    st = det.initial_state(g, np.full((2, g.ny, g.nx), 3e-7), params, ws, 0.0)
    basis = stoch.synthesize_xi(g, k=2, seed=5, amplitude=1.0)
    dw = stoch.NoiseStream(3, 0).step_increments(0, 2, params.dt)
    out = stoch.stoch_step(st, params, ws, basis, dw)
    assert np.abs(out.qc - st.qc).max() <= 1e-12 * np.abs(st.qc).max()


def test_stochastic_step_conserves_q_integral():
    g, ws, params = setup(dt=900.0)  # inviscid, unforced
    st = random_state(g, ws, params, seed=6, scale=1e-6)
    basis = stoch.synthesize_xi(g, k=4, seed=2, amplitude=2.0)
    stream = stoch.NoiseStream(11, 0)
    m0 = st.qc.sum(axis=(-2, -1)) * g.cell_area
    scale = np.abs(st.qc).sum(axis=(-2, -1)) * g.cell_area
    for s in range(50):
        st = stoch.stoch_step(st, params, ws, basis, stream.step_increments(s, 4, params.dt))
    m1 = st.qc.sum(axis=(-2, -1)) * g.cell_area
    assert (np.abs(m1 - m0) / scale).max() <= 50 * 1e-10


def test_trajectory_bit_reproducible():
    g, ws, params = setup(dt=900.0, beta=2e-11)
    basis = stoch.synthesize_xi(g, k=3, seed=2, amplitude=1.0)

    def run():
        st = random_state(g, ws, params, seed=8)
        stream = stoch.NoiseStream(21, 4)
        for s in range(10):
            st = stoch.stoch_step(st, params, ws, basis, stream.step_increments(s, 3, params.dt))
        return st.qc

    assert np.array_equal(run(), run())


def test_mismatched_mode_count_rejected():
    g, ws, params = setup(dt=900.0)
    st = random_state(g, ws, params)
    basis = stoch.synthesize_xi(g, k=3, seed=2)
    with pytest.raises(ValueError, match="mode"):
        stoch.stoch_step(st, params, ws, basis, np.zeros(5))
    with pytest.raises(ValueError, match="lambda"):
        stoch.stoch_step(st, params, ws, basis, np.zeros(3), lam=np.zeros(2))


def test_nudge_drift_enters_corrector_only():
    g, ws, params = setup(dt=900.0)
    st = random_state(g, ws, params, seed=12, scale=1e-5)
    basis = stoch.synthesize_xi(g, k=2, seed=3, amplitude=1.0)
    dw = np.array([30.0, -12.0])
    lam = np.array([0.004, -0.002])
    plain = stoch.begin_step(st, params, ws, basis, dw)
    nudged = stoch.begin_step(st, params, ws, basis, dw)
    # pre-corrector face values identical: the drift acts in the corrector
    assert np.array_equal(plain.ext.qxf_new, nudged.ext.qxf_new)
    out_plain = plain.finish(None)
    out_nudged = nudged.finish(lam)
    assert np.array_equal(out_plain.qxf, out_nudged.qxf)
    assert not np.array_equal(out_plain.qc, out_nudged.qc)
    # the corrector response matches the per-mode fields
    b = plain.noise_responses()
    delta = np.tensordot(lam * params.dt, b, axes=([0], [0]))
    assert np.allclose(out_nudged.qc, out_plain.qc + delta, rtol=1e-10, atol=1e-22)


def test_cfl_uses_effective_velocity():
    g, ws, params = setup(dt=900.0, cfl_limit=0.1)
    st = random_state(g, ws, params, seed=13)
    basis = stoch.synthesize_xi(g, k=1, seed=4, amplitude=50.0)
    huge = np.array([1e4])
    with pytest.raises(det.CflError):
        stoch.stoch_step(st, params, ws, basis, huge)


# --- Heun form ---------------------------------------------------------------

def test_heun_zero_increments_matches_deterministic():
    g, ws, params = setup(beta=2e-11, dt=900.0)
    st = random_state(g, ws, params, seed=14)
    basis = stoch.synthesize_xi(g, k=2, seed=5, amplitude=1.0)
    report = stoch.heun_form_check(st, params, ws, basis, np.zeros(2))
    assert report["max_rel_diff"] <= 1e-12
    assert report["dw_term"] == 0.0
    assert report["quad_term"] == 0.0


def test_heun_single_mode_equality():
    g, ws, params = setup(beta=2e-11, nu=30.0, mu=4e-8, U=(0.06, 0.0), dt=900.0)
    st = random_state(g, ws, params, seed=15, scale=1e-5)
    basis = stoch.synthesize_xi(g, k=1, seed=6, amplitude=1.0)
    dw = stoch.NoiseStream(2, 0).step_increments(0, 1, params.dt)
    report = stoch.heun_form_check(st, params, ws, basis, dw)
    assert report["max_rel_diff"] <= 1e-12


def test_heun_quadratic_term_scales_with_noise():
    g, ws, params = setup(dt=900.0)
    st = random_state(g, ws, params, seed=16, scale=1e-5)
    basis = stoch.synthesize_xi(g, k=3, seed=7, amplitude=1.0)
    dw = stoch.NoiseStream(4, 0).step_increments(0, 3, params.dt)
    r1 = stoch.heun_form_check(st, params, ws, basis, dw)
    r2 = stoch.heun_form_check(st, params, ws, basis, 2.0 * dw)
    assert r2["quad_term"] == pytest.approx(4.0 * r1["quad_term"], rel=1e-12)
    assert r2["dw_term"] == pytest.approx(2.0 * r1["dw_term"], rel=1e-12)


# --- mean-square self-convergence ---------------------------------------------

def test_fixed_path_self_convergence_order():
    from saltqg.diagnostics import convergence_study

    g = Grid(24, 12, LX, LY)
    ws = build_workspace(g, STRAT)
    params = det.ModelParams(dt=3600.0)
    rng = np.random.default_rng(17)
    x = g.x_centers()[None, :] / LX
    y = g.y_centers()[:, None] / LY
    q0 = 1e-5 * np.stack([
        np.sin(2 * np.pi * x) * np.sin(np.pi * y),
        0.5 * np.cos(2 * np.pi * x) * np.sin(np.pi * y),
    ])
    st = det.initial_state(g, q0, params, ws, 0.0)
    basis = stoch.synthesize_xi(g, k=1, seed=8, amplitude=5.0)
    rep = convergence_study(st, params, ws, basis, seed=123, levels=4, n_coarse=4)
    # error^2 slope >= 1.8 means RMS slope >= 0.9
    assert rep.order >= 0.9
