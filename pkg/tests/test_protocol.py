import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpqkd import FrameLayout, ProtocolParams, Region, binary_entropy, build_schedule
from mpqkd.protocol import PAPER_FRAME, qkd_rounds

probs = st.floats(0, 1, allow_nan=False)


def test_entropy_fixed_points():
    assert binary_entropy(0.5) == 1.0
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0


def test_entropy_reference_value():
    # closed form evaluated directly
    x = 0.2474
    ref = -x * math.log2(x) - (1 - x) * math.log2(1 - x)
    assert binary_entropy(x) == pytest.approx(ref, rel=1e-14)
    assert binary_entropy(x) == pytest.approx(0.807131, abs=1e-6)


@pytest.mark.parametrize("x", [-1e-9, 1.0000001, float("nan")])
def test_entropy_domain(x):
    with pytest.raises(ValueError):
        binary_entropy(x)


def test_entropy_vectorised():
    h = binary_entropy(np.array([0.0, 0.11, 0.5, 1.0]))
    assert h.shape == (4,)
    assert h[1] == pytest.approx(binary_entropy(0.11))


@given(probs)
def test_entropy_symmetric(x):
    assert binary_entropy(x) == pytest.approx(binary_entropy(1 - x), abs=1e-12)


@given(probs, probs, st.floats(0, 1))
def test_entropy_concave_and_bounded(x, y, lam):
    z = lam * x + (1 - lam) * y
    hz = binary_entropy(z)
    assert hz >= lam * binary_entropy(x) + (1 - lam) * binary_entropy(y) - 1e-12
    assert 0 <= hz <= binary_entropy(0.5)


def test_paper_frame():
    regions = build_schedule(ProtocolParams(), 1)
    assert len(regions) == 62500
    counts = np.bincount(regions, minlength=3)
    assert tuple(counts) == PAPER_FRAME
    assert qkd_rounds(ProtocolParams(), 10) == 444830


def test_minimal_frame():
    regions = build_schedule(FrameLayout(1, 0, 1), 2)
    assert regions.tolist() == [Region.REFERENCE, Region.QKD] * 2


def test_small_frame_order():
    regions = build_schedule(FrameLayout(2, 1, 3), 1)
    R = Region
    assert regions.tolist() == [R.REFERENCE, R.REFERENCE, R.RECOVERY, R.QKD, R.QKD, R.QKD]


@given(st.integers(0, 20), st.integers(0, 20), st.integers(1, 20), st.integers(1, 5))
def test_schedule_counts(ns, nr, nq, cycles):
    frame = FrameLayout(ns, nr, nq)
    regions = build_schedule(frame, cycles)
    assert tuple(np.bincount(regions, minlength=3)) == (ns * cycles, nr * cycles, nq * cycles)
    # region_of agrees with the materialised schedule
    assert np.array_equal(frame.region_of(np.arange(len(regions))), regions)


def test_schedule_rejects_bad_frame():
    with pytest.raises(ValueError):
        build_schedule(FrameLayout(3, 0, 0), 1)


@pytest.mark.parametrize("kw, word", [
    (dict(nu=0.4), "nu < mu"),
    (dict(D=15), "even"),
    (dict(p_mu=0.7, p_nu=0.5), "exceed"),
    (dict(l_min=600), "l_min <= l_max"),
    (dict(epsilon=0), "epsilon"),
])
def test_protocol_validation(kw, word):
    errs = ProtocolParams(**kw).problems()
    assert any(word in e for e in errs)
    with pytest.raises(ValueError):
        ProtocolParams(**kw).validate()


def test_defaults_valid():
    p = ProtocolParams().validate()
    assert p.p_vacuum == pytest.approx(0.6)
    assert p.intensity_table().tolist() == [0.0, p.nu, p.mu, p.mu_strong]
