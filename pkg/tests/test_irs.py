import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import binom

from kronsr import irs
from kronsr.errors import DimensionError
from kronsr.experiments import channel_rmse
from kronsr.irs import SystemGeometry

SMALL = SystemGeometry(R=4, T=3, L=8, N=6, P_BS=2, P_MS=2)


def setup(geometry, seed, K_I=5, K_P=3, sigma2=0.0):
    r = np.random.default_rng(seed)
    ch = irs.draw_channel(geometry, r)
    pr = irs.make_protocol(geometry, K_I, K_P, rng=r)
    Ys = irs.received_pilots(ch, pr, sigma2, r)
    return ch, pr, Ys


# arrays -------------------------------------------------------------------

def test_grid_angles():
    psi = irs.grid_angles(4)
    np.testing.assert_allclose(np.cos(psi), [-0.5, 0.0, 0.5, 1.0], atol=1e-15)
    assert psi[-1] == 0.0


@pytest.mark.parametrize("Q,N", [(1, 1), (16, 18), (256, 18), (6, 7)])
def test_dictionary_columns_unit_norm(Q, N):
    A = irs.bem_dictionary(Q, N)
    assert A.shape == (Q, N)
    np.testing.assert_allclose(np.linalg.norm(A, axis=0), 1.0, atol=1e-12)


@given(Q=st.integers(1, 64), psi=st.floats(0, math.pi))
def test_steering_vector_unit_norm(Q, psi):
    a = irs.steering_vector(Q, psi)
    assert abs(np.linalg.norm(a) - 1) < 1e-12
    assert a[0] == pytest.approx(1 / math.sqrt(Q))


def test_steering_vector_broadside():
    np.testing.assert_allclose(irs.steering_vector(4, math.pi / 2), np.full(4, 0.5), atol=1e-15)


def test_bem_matches_steering_vectors():
    A = irs.bem_dictionary(5, 6)
    for n, psi in enumerate(irs.grid_angles(6)):
        np.testing.assert_allclose(A[:, n], irs.steering_vector(5, psi), atol=1e-12)


# channel ------------------------------------------------------------------

def test_geometry_validation():
    with pytest.raises(ValueError):
        SystemGeometry(R=0)
    with pytest.raises(ValueError):
        SystemGeometry(N=2, P_BS=3)


def test_channel_rebuilds_from_paths():
    ch, _, _ = setup(SystemGeometry(), 0)
    H_MS, H_BS = irs.channel_from_paths(ch)
    np.testing.assert_allclose(H_MS, ch.H_MS, atol=1e-12)
    np.testing.assert_allclose(H_BS, ch.H_BS, atol=1e-12)


def test_channel_draw_is_on_grid_and_distinct():
    g = SystemGeometry()
    ch = irs.draw_channel(g, np.random.default_rng(3))
    assert len(set(ch.irs_aoa_idx)) == g.P_MS
    assert len(set(ch.bs_aoa_idx)) == g.P_BS
    assert ch.H_MS.shape == (g.L, g.T) and ch.H_BS.shape == (g.R, g.L)


def test_cascaded_channel_shape_and_errors():
    ch, pr, _ = setup(SMALL, 1)
    assert irs.cascaded_channel(ch, pr.Theta[:, 0]).shape == (SMALL.R, SMALL.T)
    with pytest.raises(DimensionError):
        irs.cascaded_channel(ch, np.ones(SMALL.L + 1))


def test_protocol_entries():
    g = SystemGeometry()
    pr = irs.make_protocol(g, rng=np.random.default_rng(0))
    assert pr.K == 40
    np.testing.assert_allclose(np.abs(pr.Theta), 1 / math.sqrt(g.N))
    np.testing.assert_allclose(np.abs(pr.X), 1.0)
    pr = irs.make_protocol(g, rng=np.random.default_rng(0), irs_amplitude=1 / math.sqrt(g.L))
    np.testing.assert_allclose(np.abs(pr.Theta), 1 / 16)


def test_noise_variance_hits_snr():
    ch, pr, Ys = setup(SystemGeometry(), 2)
    s2 = irs.noise_variance_for_snr(ch, pr, 10.0)
    power = np.mean(np.concatenate([np.abs(Y.ravel()) ** 2 for Y in Ys]))
    assert power / s2 == pytest.approx(10.0)


# measurement model ----------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_master_consistency_small(seed):
    ch, pr, Ys = setup(SMALL, seed)
    m = irs.build_measurement_model(pr, SMALL, Ys, 0.0)
    y = m.dictionary.matvec(irs.ground_truth_factors(ch).vector())
    assert np.linalg.norm(y - m.y_tilde) < 1e-8 * np.linalg.norm(m.y_tilde)


def test_master_consistency_when_irs_paths_collide():
    # two IRS arrival angles sharing a wrapped index difference add up in g_L
    g = SystemGeometry(R=4, T=2, L=8, N=5, P_BS=1, P_MS=3)
    for seed in range(10):
        ch, pr, Ys = setup(g, seed, K_I=4, K_P=2)
        m = irs.build_measurement_model(pr, g, Ys, 0.0)
        y = m.dictionary.matvec(irs.ground_truth_factors(ch).vector())
        assert np.linalg.norm(y - m.y_tilde) < 1e-8 * np.linalg.norm(m.y_tilde)


def test_irs_dictionary_first_columns():
    g = SMALL
    _, pr, _ = setup(g, 4)
    A = irs.bem_dictionary(g.L, g.N)
    ref = np.array([[np.sum(pr.Theta[:, k] * A[:, 0] * A[:, j].conj()) for j in range(g.N)]
                    for k in range(pr.K_I)])
    np.testing.assert_allclose(irs.irs_dictionary(pr.Theta, g.L, g.N), ref, atol=1e-14)


def test_ground_truth_support_sizes():
    g = SystemGeometry()
    ch = irs.draw_channel(g, np.random.default_rng(5))
    gt = irs.ground_truth_factors(ch)
    assert np.count_nonzero(gt.g_L) <= g.P_MS
    assert np.count_nonzero(gt.g_T_conj) == 1
    assert np.count_nonzero(gt.g_R) == g.P_BS


def test_measurement_model_dimensions():
    g = SystemGeometry()
    ch, pr, Ys = setup(g, 0, K_I=10, K_P=4)
    m = irs.build_measurement_model(pr, g, Ys, 0.1)
    assert m.measurement_count == 640
    assert m.coefficient_count == 5832
    assert m.dictionary.row_dims == [10, 4, 16]
    assert m.measurement_count / m.coefficient_count == pytest.approx(0.1097, abs=1e-4)


def test_measurement_model_rejects_bad_blocks():
    ch, pr, Ys = setup(SMALL, 0)
    with pytest.raises(DimensionError):
        irs.build_measurement_model(pr, SMALL, Ys[:-1], 0.0)
    with pytest.raises(DimensionError):
        irs.build_measurement_model(pr, SMALL, [Y[:, :-1] for Y in Ys], 0.0)


def test_reconstruct_exact_and_zero():
    ch, pr, _ = setup(SMALL, 7)
    truth = [irs.cascaded_channel(ch, pr.Theta[:, k]) for k in range(pr.K_I)]
    exact = irs.reconstruct_cascaded(irs.ground_truth_factors(ch), SMALL, pr)
    assert channel_rmse(truth, exact) < 1e-12
    zero = irs.reconstruct_cascaded(np.zeros(SMALL.N ** 3), SMALL, pr)
    assert channel_rmse(truth, zero) == pytest.approx(1.0)
    with pytest.raises(DimensionError):
        irs.reconstruct_cascaded(np.zeros(5), SMALL, pr)


def test_json_roundtrip(tmp_path):
    ch, pr, Ys = setup(SMALL, 8, sigma2=0.01)
    m = irs.build_measurement_model(pr, SMALL, Ys, 0.01)
    irs.save_json(ch, tmp_path / "ch.json")
    irs.save_json(m, tmp_path / "m.json")
    ch2 = irs.load_json(tmp_path / "ch.json")
    m2 = irs.load_json(tmp_path / "m.json")
    np.testing.assert_array_equal(ch2.H_MS, ch.H_MS)
    np.testing.assert_array_equal(ch2.bs_aoa_idx, ch.bs_aoa_idx)
    assert ch2.geometry == ch.geometry
    np.testing.assert_array_equal(m2.y_tilde, m.y_tilde)
    np.testing.assert_array_equal(m2.Phi_L, m.Phi_L)
    raw = json.loads((tmp_path / "m.json").read_text())
    assert raw["schema"] == irs.SCHEMA_MODEL
    assert raw["y_tilde"][0] == [m.y_tilde[0].real, m.y_tilde[0].imag]
    raw["schema"] = "other@9"
    (tmp_path / "bad.json").write_text(json.dumps(raw))
    with pytest.raises(ValueError):
        irs.load_json(tmp_path / "bad.json")


# SER ----------------------------------------------------------------------

def test_qam8_constellation():
    pts, labels = irs.qam8_constellation()
    assert pts.size == 8
    assert np.mean(np.abs(pts) ** 2) == pytest.approx(1.0)
    assert sorted(labels) == list(range(8))
    d = np.abs(pts[:, None] - pts[None, :])
    assert d[d > 0].min() == pytest.approx(2 / math.sqrt(6))
    # Gray: nearest neighbours differ in one bit
    for i in range(8):
        for j in range(8):
            if i != j and d[i, j] < 2 / math.sqrt(6) + 1e-9:
                assert bin(labels[i] ^ labels[j]).count("1") == 1


def _channels(seed, K=4):
    ch, pr, _ = setup(SystemGeometry(), seed, K_I=K)
    return [irs.cascaded_channel(ch, pr.Theta[:, k]) for k in range(K)]


def test_ser_vanishes_at_high_snr():
    H = _channels(0)
    assert irs.simulate_ser(H, H, 60.0, 20000, np.random.default_rng(0)) == 0.0


@pytest.mark.parametrize("snr", [5.0, 10.0, 15.0])
def test_ser_perfect_csi_matches_analytic(snr):
    H = _channels(1)
    n = 40000
    ser = irs.simulate_ser(H, H, snr, n, np.random.default_rng(1))
    p = irs.qam8_ser_awgn(snr)
    assert abs(ser - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_ser_random_estimate_is_guessing():
    H = _channels(2)
    r = np.random.default_rng(2)
    est = [np.random.default_rng(9).standard_normal(h.shape) + 0j for h in H]
    ser = irs.simulate_ser(H, est, 30.0, 40000, r)
    assert abs(ser - 7 / 8) <= 0.05


def test_ser_zero_estimate_flags_fallback():
    H = _channels(3)
    diag = {}
    with pytest.warns(RuntimeWarning):
        irs.simulate_ser(H, [np.zeros_like(h) for h in H], 20.0, 100, np.random.default_rng(0), diag)
    assert diag["rank_deficient_configs"] == list(range(len(H)))


def test_ser_zf_mode_on_rank_one_channel():
    # T streams through a rank-one channel: zero forcing cannot separate them
    H = _channels(4)
    diag = {}
    with pytest.warns(RuntimeWarning):
        ser = irs.simulate_ser(H, H, 30.0, 6000, np.random.default_rng(0), diag, mode="zf")
    assert diag["rank_deficient_configs"]
    assert ser > 0.5


def test_ser_zf_mode_full_rank():
    r = np.random.default_rng(5)
    H = [r.standard_normal((8, 2)) + 1j * r.standard_normal((8, 2)) for _ in range(3)]
    assert irs.simulate_ser(H, H, 60.0, 3000, r, mode="zf") == 0.0


def test_ser_argument_errors():
    H = _channels(0, K=2)
    with pytest.raises(DimensionError):
        irs.simulate_ser(H, H[:1], 10.0, 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        irs.simulate_ser(H, H, 10.0, 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        irs.simulate_ser(H, H, 10.0, 10, np.random.default_rng(0), mode="mmse")


def test_qam8_ser_awgn_oracle_against_direct_simulation():
    # independent check of the closed form: nearest-point decisions in plain AWGN
    pts, _ = irs.qam8_constellation()
    r = np.random.default_rng(11)
    n, snr = 200000, 8.0
    s = r.integers(0, 8, n)
    w = np.sqrt(10 ** (-snr / 10) / 2) * (r.standard_normal(n) + 1j * r.standard_normal(n))
    det = np.argmin(np.abs((pts[s] + w)[:, None] - pts[None, :]), axis=1)
    errs = np.count_nonzero(det != s)
    p = irs.qam8_ser_awgn(snr)
    lo, hi = binom.ppf([0.0005, 0.9995], n, p)
    assert lo <= errs <= hi
