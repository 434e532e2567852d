import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aimc_tile.config import OtaTable, TileConfig
from aimc_tile.errors import ConfigError, ConvergenceError
from aimc_tile.irdrop import (SegmentTriple, TheveninState, WireModel, apparent_conductance,
                              integrate_column, lump_segments, nodal_oracle_current,
                              oracle_waveform, step_current, tail_resistance, thevenin_reduce)
from aimc_tile.tile import ConductanceColumn, Rail, build_schedule, ideal_mac, map_weights

V0, VP, VM = 0.4, 0.6, 0.2


def random_column(rng, n, g_max=25e-6):
    return map_weights(rng.uniform(-1, 1, n), g_max, 1.0)


# --- apparent weight ---------------------------------------------------------

def test_apparent_conductance_examples():
    assert apparent_conductance(25e-6, 1200.0) == pytest.approx(24.25e-6, rel=1e-12)
    assert apparent_conductance(0.0, 1200.0) == 0.0
    g = np.linspace(0, 25e-6, 11)
    assert np.array_equal(apparent_conductance(g, 0.0), g)


def test_apparent_conductance_rejects_non_monotone_beta():
    with pytest.raises(ConfigError):
        apparent_conductance(25e-6, 1.0 / 25e-6)
    with pytest.raises(ConfigError):
        apparent_conductance(25e-6, 0.5 / 25e-6)


@given(st.floats(0, 25e-6), st.floats(0, 25e-6), st.floats(0, 19000))
def test_apparent_conductance_monotone_and_below_g(g1, g2, beta):
    a1 = apparent_conductance(g1, beta, 25e-6)
    a2 = apparent_conductance(g2, beta, 25e-6)
    assert a1 <= g1
    if g1 < g2:
        assert a1 <= a2


# --- lumping ---------------------------------------------------------------

def test_lump_all_off():
    cfg = TileConfig(n_rows=128, segment_size=64, beta=0.0)
    col = map_weights(np.full(128, 0.5), 25e-6, 1.0)
    segs = lump_segments(col, np.zeros(128, dtype=int), cfg)
    assert segs == [SegmentTriple(0.0, 0.0, pytest.approx(64 * 12.5e-6))] * 2


def test_lump_single_device():
    cfg = TileConfig(n_rows=128, segment_size=64)
    w = np.zeros(128)
    w[3] = 1.0
    rails = np.zeros(128, dtype=int)
    rails[3] = Rail.DRIVE_POS
    segs = lump_segments(map_weights(w, 25e-6, 1.0), rails, cfg)
    assert segs[0] == SegmentTriple(pytest.approx(24.25e-6), 0.0, 0.0)
    assert segs[1] == SegmentTriple(0.0, 0.0, 0.0)


def test_lump_matches_per_row_loop(rng):
    cfg = TileConfig(n_rows=128, segment_size=32)
    col = random_column(rng, 128)
    rails = rng.integers(-1, 2, 128)
    segs = lump_segments(col, rails, cfg)
    for s, seg in enumerate(segs):
        acc = [0.0, 0.0, 0.0]
        for i in range(s * 32, (s + 1) * 32):
            gp = col.g_pos[i] - cfg.beta * col.g_pos[i] ** 2
            gn = col.g_neg[i] - cfg.beta * col.g_neg[i] ** 2
            if rails[i] == 1:
                acc[0] += gp
                acc[1] += gn
            elif rails[i] == -1:
                acc[0] += gn
                acc[1] += gp
            else:
                acc[2] += gp + gn
        assert (seg.g_to_vplus, seg.g_to_vminus, seg.g_to_v0) == pytest.approx(acc, rel=1e-12)


# --- Thevenin reduction ----------------------------------------------------

def test_thevenin_single_segment_all_off():
    st_ = thevenin_reduce([SegmentTriple(0.0, 0.0, 2e-4)], 10.0)
    assert st_.v_th == pytest.approx(V0) and st_.r_th == pytest.approx(5000.0)


def test_thevenin_single_segment_formula():
    st_ = thevenin_reduce([SegmentTriple(3e-5, 1e-5, 1e-5)], 10.0)
    assert st_.v_th == pytest.approx((3e-5 * VP + 1e-5 * VM + 1e-5 * V0) / 5e-5)
    assert st_.r_th == pytest.approx(1 / 5e-5)


def test_thevenin_wire_collapse(rng):
    triples = [SegmentTriple(*rng.uniform(0, 1e-4, 3)) for _ in range(8)]
    st_ = thevenin_reduce(triples, 0.0)
    tot = np.sum([[t.g_to_vplus, t.g_to_vminus, t.g_to_v0] for t in triples], axis=0)
    assert st_.v_th == pytest.approx((tot[0] * VP + tot[1] * VM + tot[2] * V0) / tot.sum())
    assert st_.r_th == pytest.approx(1 / tot.sum())


def test_thevenin_two_segments_frozen_nodal_value():
    # two-node ladder solved independently in exact rational arithmetic
    segs = [SegmentTriple(10e-6, 5e-6, 2e-6), SegmentTriple(4e-6, 8e-6, 1e-6)]
    st_ = thevenin_reduce(segs, 1000.0, r_tail=500.0)
    assert st_.v_th == pytest.approx(0.4061678964958142, rel=1e-12)
    assert st_.r_th == pytest.approx(34152.09622447967, rel=1e-12)
    state_current = step_current(st_, OtaTable.zero(), TileConfig())
    assert state_current == pytest.approx(1.806008174512322e-07, rel=1e-10)


def test_thevenin_open_circuit():
    st_ = thevenin_reduce([SegmentTriple(0.0, 0.0, 0.0)] * 3, 10.0)
    assert st_.is_open
    assert step_current(st_, OtaTable.linear(30.0), TileConfig()) == 0.0


# --- OTA fixed point -----------------------------------------------------------

def test_step_current_examples():
    cfg = TileConfig()
    assert step_current(TheveninState(V0, 10.0), OtaTable.linear(30.0), cfg) == 0.0
    assert step_current(TheveninState(0.401, 10.0), OtaTable.zero(), cfg) == pytest.approx(100e-6)
    assert step_current(TheveninState(0.401, 10.0), OtaTable.linear(30.0), cfg) == \
        pytest.approx(25e-6, abs=1e-12)


@given(st.floats(0.2, 0.6), st.floats(1.0, 1e6), st.floats(0, 100))
def test_step_current_residual_below_1pa(v_th, r_th, z):
    ota = OtaTable(((-2e-4, -2e-4 * z), (-5e-5, -5e-5 * z * 0.5), (0.0, 0.0),
                    (5e-5, 5e-5 * z * 0.8), (2e-4, 2e-4 * z)))
    i = step_current(TheveninState(v_th, r_th), ota, TileConfig())
    assert abs(i - (v_th - (V0 + ota.delta(i))) / r_th) < 1e-12


def test_step_current_non_convergence_reports_state():
    with pytest.raises(ConvergenceError) as info:
        step_current(TheveninState(0.41, 100.0), OtaTable.linear(-300.0), TileConfig())
    assert info.value.last_iterate is not None and info.value.residual is not None


# --- integration -------------------------------------------------------------

def test_zero_activations_give_zero_waveform(rng):
    cfg = TileConfig()
    col = random_column(rng, 512)
    wave = integrate_column(col, build_schedule(np.zeros(512, dtype=int), cfg), cfg)
    assert np.all(wave.currents == 0.0) and wave.charge == 0.0


def test_zero_parasitic_charge_is_ideal(rng):
    cfg = TileConfig(r_scale=0.0, beta=0.0, ota_table=OtaTable.zero())
    w = np.round(rng.uniform(-1, 1, 512) * 127) / 127
    x = rng.integers(-127, 128, 512)
    wave = integrate_column(map_weights(w, cfg.g_max, 1.0), build_schedule(x, cfg), cfg)
    assert wave.charge == pytest.approx(0.2 * 1e-9 * 25e-6 * ideal_mac(w, x), rel=1e-12)


def test_charge_is_sum_of_steps_and_terms(rng, small_cfg):
    cfg = small_cfg.with_(pwm_mode="Split")
    col = random_column(rng, 32)
    sched = build_schedule(rng.integers(-127, 128, 32), cfg)
    wave = integrate_column(col, sched, cfg, capture_terms=True)
    assert wave.charge == pytest.approx(np.sum(wave.currents) * cfg.dt, rel=1e-12)
    assert wave.term_charges.sum() == pytest.approx(wave.weighted_charge, rel=1e-6)


@pytest.mark.parametrize("mode", ["Conventional", "Split"])
def test_waveform_matches_lumped_oracle(rng, small_cfg, mode):
    cfg = small_cfg.with_(pwm_mode=mode)
    col = random_column(rng, 32)
    sched = build_schedule(rng.integers(-127, 128, 32), cfg)
    fast = integrate_column(col, sched, cfg, capture_terms=True)
    ref = oracle_waveform(col, sched, cfg, WireModel.PER_SEGMENT_LUMPED, capture_terms=True)
    assert np.allclose(fast.currents, ref.currents, rtol=1e-9, atol=1e-15)
    assert np.allclose(fast.term_charges, ref.term_charges, rtol=1e-6, atol=1e-22)


# --- nodal oracle ------------------------------------------------------------

def test_oracle_zero_wire_is_ideal(rng):
    cfg = TileConfig(r_scale=0.0, ota_table=OtaTable.zero())
    col = random_column(rng, 512)
    rails = rng.integers(-1, 2, 512)
    gp = apparent_conductance(col.g_pos, cfg.beta)
    gn = apparent_conductance(col.g_neg, cfg.beta)
    expected = 0.2 * np.sum(rails * (gp - gn))
    for model in WireModel:
        assert nodal_oracle_current(col, rails, cfg, model) == pytest.approx(expected, rel=1e-12)


def _dense_per_cell_current(col, rails, cfg):
    """Independent PerCell reference: dense nodal solve, ideal OTA."""
    n = cfg.n_rows
    r = cfg.r_wire
    gp = col.g_pos - cfg.beta * col.g_pos ** 2
    gn = col.g_neg - cfg.beta * col.g_neg ** 2
    A = np.zeros((n, n))
    b = np.zeros(n)
    for i in range(n):  # node i = row i, row n-1 is next to the ADC
        g_cells = gp[i] + gn[i]
        A[i, i] += g_cells
        if rails[i] == 1:
            b[i] += gp[i] * VP + gn[i] * VM
        elif rails[i] == -1:
            b[i] += gn[i] * VP + gp[i] * VM
        else:
            b[i] += g_cells * V0
        if i + 1 < n:
            A[i, i] += 1 / r
            A[i + 1, i + 1] += 1 / r
            A[i, i + 1] -= 1 / r
            A[i + 1, i] -= 1 / r
    A[n - 1, n - 1] += 1 / r
    b[n - 1] += V0 / r
    v = np.linalg.solve(A, b)
    return (v[n - 1] - V0) / r


def test_per_cell_oracle_matches_dense_solve(rng):
    cfg = TileConfig(n_rows=48, segment_size=16, r_cell=3.0, ota_table=OtaTable.zero())
    for _ in range(5):
        col = random_column(rng, 48)
        rails = rng.integers(-1, 2, 48)
        assert nodal_oracle_current(col, rails, cfg, "PerCell") == pytest.approx(
            _dense_per_cell_current(col, rails, cfg), rel=1e-10)


@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 10), st.sampled_from([0.0, 30.0, 200.0]))
def test_fast_model_equals_lumped_oracle(seed, r_scale, z):
    rng = np.random.default_rng(seed)
    cfg = TileConfig(n_rows=64, segment_size=8, r_cell=1.0, r_scale=r_scale,
                     ota_table=OtaTable.linear(z) if z else OtaTable.zero())
    col = random_column(rng, 64)
    rails = rng.integers(-1, 2, 64)
    state = thevenin_reduce(lump_segments(col, rails, cfg), cfg.r_segment,
                            r_tail=tail_resistance(cfg))
    fast = step_current(state, cfg.ota_table, cfg)
    ref = nodal_oracle_current(col, rails, cfg, WireModel.PER_SEGMENT_LUMPED)
    assert fast == pytest.approx(ref, rel=1e-9, abs=1e-18)


@given(st.integers(0, 2 ** 32 - 1))
def test_single_rail_ir_drop_monotone(seed):
    rng = np.random.default_rng(seed)
    col = ConductanceColumn(rng.uniform(1e-6, 25e-6, 64), np.zeros(64))
    rails = np.where(rng.random(64) < 0.7, Rail.DRIVE_POS, Rail.OFF)
    rails[0] = Rail.DRIVE_POS
    cfg = TileConfig(n_rows=64, segment_size=8, r_cell=1.0)
    currents = [nodal_oracle_current(col, rails, cfg.with_(r_scale=s), "PerCell")
                for s in (0.0, 0.5, 1.0, 2.0, 5.0, 10.0)]
    assert currents[0] > 0
    assert all(a > b for a, b in zip(currents, currents[1:]))
