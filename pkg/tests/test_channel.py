import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from mpqkd import ChannelParams, FrameLayout, ProtocolParams, click_probabilities, simulate_session
from mpqkd.channel import phase_difference_trajectory, port_means
from mpqkd.protocol import IntensityLabel, Region

unit = st.floats(0, 1, allow_nan=False)
phase = st.floats(-10, 10, allow_nan=False)


def test_vacuum_gives_dark_counts():
    p_l, p_r = click_probabilities(0, 0, 0.3, 0.1, 0.1, 0.6, 2.72e-8)
    assert p_l == pytest.approx(2.72e-8, rel=1e-12)
    assert p_r == pytest.approx(2.72e-8, rel=1e-12)


def test_destructive_interference():
    p_l, p_r = click_probabilities(0.2, 0.4, 0.0, 0.5, 0.25, 0.9, 1e-6)
    assert p_r == pytest.approx(1e-6, rel=1e-9)
    assert p_l > 0.05


def test_quadrature_closed_form():
    p_l, p_r = click_probabilities(0.1, 0.1, math.pi / 2, 1, 1, 1, 0)
    assert p_l == pytest.approx(1 - math.exp(-0.1), rel=1e-12)
    assert p_r == pytest.approx(p_l, rel=1e-12)
    assert p_l == pytest.approx(0.09516, abs=1e-5)


def test_quadrature_photon_sampling():
    # oracle: sample photons from each source, route each one through a 50:50 splitter
    # with the interference fixed by the port means... at pi/2 the ports are independent
    rng = np.random.default_rng(3)
    n = 400_000
    photons = rng.poisson(0.1, size=n) + rng.poisson(0.1, size=n)
    to_left = rng.binomial(photons, 0.5)
    emp_l = np.mean(to_left > 0)
    emp_r = np.mean(photons - to_left > 0)
    se = math.sqrt(0.095 * 0.905 / n)
    p_l, p_r = click_probabilities(0.1, 0.1, math.pi / 2, 1, 1, 1, 0)
    assert abs(emp_l - p_l) < 4 * se
    assert abs(emp_r - p_r) < 4 * se


@given(unit, unit, phase, unit, unit)
def test_port_conservation(mu_a, mu_b, dphi, eta_a, eta_b):
    n_l, n_r = port_means(mu_a, mu_b, dphi, eta_a, eta_b)
    assert n_l >= 0 and n_r >= 0
    assert n_l + n_r == pytest.approx(eta_a * mu_a + eta_b * mu_b, abs=1e-12)


@given(unit, unit, phase, unit, unit, st.floats(0.01, 1), st.floats(0, 0.5))
def test_click_probabilities_in_range(mu_a, mu_b, dphi, eta_a, eta_b, eta_d, p_dark):
    p_l, p_r = click_probabilities(mu_a, mu_b, dphi, eta_a, eta_b, eta_d, p_dark)
    assert 0 <= p_l <= 1 and 0 <= p_r <= 1


@given(unit, phase, unit)
def test_single_source_no_interference(mu, dphi, eta):
    p_l, p_r = click_probabilities(mu, 0, dphi, eta, eta, 0.7, 0)
    assert p_l == pytest.approx(p_r, abs=1e-15)


def test_trajectory_constant_without_dynamics():
    ch = ChannelParams(delta_omega0=0.0)
    theta = phase_difference_trajectory(ch, np.zeros(5000), seed=2)
    assert np.ptp(theta) == 0.0


def test_trajectory_constant_offset_advance():
    ch = ChannelParams(delta_omega0=2 * math.pi * 1e6)
    theta = phase_difference_trajectory(ch, np.zeros(1001), seed=2, tau=1.6e-9)
    assert theta[1000] - theta[0] == pytest.approx(10.053, abs=1e-3)
    assert np.allclose(np.diff(theta), 2 * math.pi * 1e6 * 1.6e-9)


@pytest.mark.xfail(strict=True, reason="white phase diffusion at 2*pi*linewidth gives ~0.2 rad "
                                        "over 3.2 us at 2 kHz; the stated bound does not hold")
def test_linewidth_diffusion_small():
    ch = ChannelParams(delta_omega0=0.0, linewidth=2e3)
    steps = [phase_difference_trajectory(ch, np.zeros(2001), seed=s) for s in range(200)]
    d = np.array([th[2000] - th[0] for th in steps])
    assert d.std() < 0.1


def test_linewidth_diffusion_variance():
    # what the model does promise: variance 2*pi*linewidth*t
    ch = ChannelParams(delta_omega0=0.0, linewidth=2e3)
    d = np.array([np.diff(phase_difference_trajectory(ch, np.zeros(2001), seed=s)[[0, 2000]])[0]
                  for s in range(400)])
    var = 2 * math.pi * 2e3 * 2000 * 1.6e-9
    assert d.var() == pytest.approx(var, rel=0.25)


def test_trajectory_matches_session_deterministic_part():
    ch = ChannelParams(delta_omega0=2 * math.pi * 3e6, freq_walk_rate=1e12)
    proto = ProtocolParams(frame=FrameLayout(100, 0, 900))
    s = simulate_session(proto, replace(ch, total_transmittance=0.6), 300, seed=4)
    theta = phase_difference_trajectory(ch, np.zeros(s.n_slots), seed=4)
    assert np.allclose(theta[s.truth.index], s.truth.theta, atol=1e-9)


def _signature(session):
    c, r, t = session.clicks, session.rounds, session.truth
    return [c.index, c.outcome, c.valid, r.intensity_a, r.intensity_b, r.phase_a, r.phase_b,
            t.source_a, t.source_b, t.arrived_a, t.arrived_b, t.theta, session.sent]


def test_determinism_across_threads(small_session):
    ref = _signature(small_session)
    for threads in (4, 8):
        s = simulate_session(small_session.protocol, small_session.channel, 40, seed=7,
                             threads=threads)
        for a, b in zip(ref, _signature(s)):
            assert np.array_equal(a, b)


def test_seed_changes_output(small_session):
    s = simulate_session(small_session.protocol, small_session.channel, 40, seed=8)
    assert not np.array_equal(s.clicks.index, small_session.clicks.index)


def test_session_invariants(small_session):
    s = small_session
    c = s.clicks
    assert np.all(np.diff(c.index) > 0)
    assert not np.any(c.region == Region.RECOVERY)
    assert np.array_equal(c.valid, c.outcome >= 0)
    ref = c.region == Region.REFERENCE
    assert np.all(s.rounds.intensity_a[ref] == IntensityLabel.STRONG)
    assert np.all(s.rounds.phase_a[ref] == 0) and np.all(s.rounds.phase_b[ref] == 0)
    q = ~ref
    assert np.all(s.rounds.intensity_a[q] < 3)
    assert s.sent.sum() == s.n_qkd_rounds
    for a in (s.truth.source_a, s.truth.arrived_a):
        assert np.all(a >= 0)
    # photons reaching Charlie cannot exceed those emitted
    assert np.all(s.truth.arrived_a <= s.truth.source_a)


def test_no_light_no_clicks():
    proto = ProtocolParams(p_mu=0.0, p_nu=0.0, frame=FrameLayout(10, 10, 1000))
    ch = ChannelParams(total_transmittance=0.3, p_dark=0.0)
    s = simulate_session(proto, ch, 500, seed=1)
    qkd = s.clicks.region == Region.QKD
    assert np.count_nonzero(s.clicks.valid & qkd) == 0
    assert s.sent[0, 0] == s.n_qkd_rounds


def test_click_probability_101km():
    ch = ChannelParams(total_transmittance=4.32e-2, extinction_db=40)
    s = simulate_session(ProtocolParams(), ch, 230, seed=11, threads=4)
    assert s.n_qkd_rounds >= 1e7
    c = s.clicks
    p = np.count_nonzero(c.valid & (c.region == Region.QKD)) / s.n_qkd_rounds
    assert p == pytest.approx(6.35e-3, rel=0.2)


def test_asymmetry_follows_cosine():
    D = 16
    proto = ProtocolParams(mu=0.5, nu=0.1, p_mu=1.0, p_nu=0.0, D=D, frame=FrameLayout(1, 0, 9999))
    ch = ChannelParams(total_transmittance=0.6246, p_dark=0.0, delta_omega0=0.0)
    s = simulate_session(proto, ch, 300, seed=5)
    c, r = s.clicks, s.rounds
    sel = c.valid & (c.region == Region.QKD)
    k = ((r.phase_a - r.phase_b) % D)[sel]
    left = c.outcome[sel] == 0
    asym = np.array([2 * left[k == j].mean() - 1 for j in range(D)])
    expected = np.cos(2 * math.pi * np.arange(D) / D + s.truth.theta[0])
    assert np.corrcoef(asym, expected)[0, 1] > 0.99


def test_photon_tags_poisson():
    proto = ProtocolParams(frame=FrameLayout(10, 0, 990))
    ch = ChannelParams(total_transmittance=0.3)
    s = simulate_session(proto, ch, 300, seed=6, tag_all=True)
    idx, labels, src_a, src_b, arr_a, arr_b = s.all_tags
    eta_a = ch.transmittances()[0]
    sig = labels[0] == IntensityLabel.SIGNAL
    assert np.count_nonzero(sig) > 50_000
    for counts, mean in ((arr_a[sig], eta_a * proto.mu), (src_a[sig], proto.mu)):
        obs = np.bincount(np.minimum(counts, 3), minlength=4)
        pmf = stats.poisson.pmf(np.arange(3), mean)
        exp = np.append(pmf, 1 - pmf.sum()) * len(counts)
        assert stats.chisquare(obs, exp).pvalue > 1e-3


def test_invalid_channel_rejected():
    with pytest.raises(ValueError):
        simulate_session(ProtocolParams(), ChannelParams(eta_d=0.0), 1, seed=0)
    with pytest.raises(ValueError):
        simulate_session(ProtocolParams(), ChannelParams(), 0, seed=0)
