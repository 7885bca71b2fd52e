"""Finite-size decoy-state analysis and key length.

Yields are normalised per pair slot: the number of pair slots of a class is
``N/2`` times the product of the two side probabilities (see
:func:`mpqkd.sifting.sent_pairs`).  Each side of a pair carries a Poisson
photon number whose mean is the summed intensity of its two rounds, so with

    G(a, b) = exp(a + b) * Q(a, b),
    H(s)    = G(s, s) - G(0, s) - G(s, 0) + G(0, 0) = sum_{m,n>=1} s^(m+n) Y_mn / (m! n!)

the single-photon pair yield obeys

    Y11 >= (mu^3 H(nu) - nu^3 H(mu)) / (mu^2 nu^2 (mu - nu)),

since the three-photon terms cancel and all higher terms enter with a
negative sign.  Finite statistics enter through Chernoff bounds on every
count, spending the failure budget evenly over the invocations.

The phase-error rate comes from kept (2nu, 2nu) X pairs.  Both-sides-X pairs
pass the phase window with probability 2/D independent of the photon
numbers, so their yield is divided by that factor.  Pairs where either side
carries no photon contribute an error rate of exactly 1/2; that part is
removed using the (0, 2nu), (2nu, 0) and (0, 0) classes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from scipy.optimize import bisect

from .protocol import ProtocolParams, binary_entropy
from .sifting import CLASSES

DELTA_U_BRACKET = (1e-12, 1 - 1e-12)
DELTA_L_BRACKET = (1e-12, 1e6)
RTOL = 1e-10


@dataclass
class CountTable:
    """Per-class ``(sent, total, error)`` plus the number of QKD rounds ``N``."""

    rows: dict[str, tuple[float, int, int]]
    n_rounds: float

    def __post_init__(self):
        errs = self.problems()
        if errs:
            raise ValueError("; ".join(errs))

    def problems(self) -> list[str]:
        out = []
        missing = [c for c in CLASSES if c not in self.rows]
        if missing:
            out.append(f"missing classes: {', '.join(missing)}")
        unknown = [c for c in self.rows if c not in CLASSES]
        if unknown:
            out.append(f"unknown classes: {', '.join(unknown)}")
        for c, (sent, total, error) in self.rows.items():
            if min(sent, total, error) < 0:
                out.append(f"{c}: counts must be non-negative")
            if error > total:
                out.append(f"{c}: error count exceeds total")
            if total > sent:
                out.append(f"{c}: total exceeds sent")
        if not self.n_rounds > 0:
            out.append("N must be positive")
        return out

    @property
    def n_pair(self) -> float:
        return self.n_rounds / 2

    def sent(self, c: str) -> float:
        return self.rows[c][0]

    def total(self, c: str) -> int:
        return self.rows[c][1]

    def error(self, c: str) -> int:
        return self.rows[c][2]

    @classmethod
    def zeros(cls, sent: dict[str, float], n_rounds: float) -> "CountTable":
        return cls({c: (sent[c], 0, 0) for c in CLASSES}, n_rounds)


def _lower_eq(chi: float, delta: float) -> float:
    return chi * (delta / (1 + delta) - math.log1p(delta))


def _upper_eq(chi: float, delta: float) -> float:
    return chi * (-delta / (1 - delta) - math.log1p(-delta))


def _upper_eq_gap(chi: float, s: float) -> float:
    # _upper_eq at delta = 1 - s
    return chi * (-(1 - s) / s - math.log(s))


def chernoff_deltas(chi: float, eps: float) -> tuple[float, float]:
    """``(delta_L, delta_U)`` solving the two tail equations at ``eps / 2``."""
    d_l, s_u = _solve(chi, eps)
    return d_l, 1 - s_u


def _solve(chi: float, eps: float) -> tuple[float, float]:
    # returns delta_L and 1 - delta_U
    if chi < 0:
        raise ValueError("observed count must be non-negative")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if chi == 0:
        return math.inf, 0.0
    target = math.log(eps / 2)
    lo, hi = DELTA_L_BRACKET
    # tiny counts need a wider bracket than the default
    while _lower_eq(chi, hi) > target and hi < 1e300:
        hi *= 1e3
    if _lower_eq(chi, hi) > target:
        d_l = math.inf  # E^L underflows to 0
    else:
        d_l = bisect(lambda d: _lower_eq(chi, d) - target, lo, hi, xtol=1e-300, rtol=RTOL,
                     maxiter=2000)
    lo, hi = DELTA_U_BRACKET
    if _upper_eq(chi, hi) > target:
        s_u = 1 - hi
    elif _upper_eq(chi, 0.5) <= target:
        s_u = 1 - bisect(lambda d: _upper_eq(chi, d) - target, lo, 0.5, xtol=1e-300, rtol=RTOL,
                         maxiter=2000)
    else:
        # near 1 solve for 1 - delta so that E^U = chi / (1 - delta) keeps full precision
        s_u = bisect(lambda s: _upper_eq_gap(chi, s) - target, 1 - hi, 0.5, xtol=1e-300,
                     rtol=RTOL, maxiter=2000)
    return d_l, s_u


def chernoff_bounds(chi: float, eps: float) -> tuple[float, float]:
    """Lower and upper bounds on the expectation behind an observed count ``chi``.

    For ``chi == 0`` the lower bound is 0 and the upper bound is the limit of
    ``chi / (1 - delta_U)``, which is ``ln(2 / eps)``.
    """
    d_l, s_u = _solve(chi, eps)
    if chi == 0:
        return 0.0, math.log(2 / eps)
    return chi / (1 + d_l), chi / s_u


def realized_lower(expected: float, eps: float) -> float:
    """Lower bound on a realised count whose expectation is at least ``expected``."""
    if expected <= 0:
        return 0.0
    return max(0.0, expected * (1 - math.sqrt(2 * math.log(2 / eps) / expected)))


class _Budget:
    """Hands out Chernoff bounds with an even share of the failure probability."""

    def __init__(self, eps: float, n: int):
        self.each = eps / n
        self.n = n
        self.used = 0

    def bounds(self, chi):
        self.used += 1
        return chernoff_bounds(chi, self.each)


# invocations: seven Z classes, one realised-count conversion, three X counts
N_CHERNOFF = 11
_Y11_CLASSES = ("Z_A0B0", "Z_A0Bnu", "Z_AnuB0", "Z_AnuBnu", "Z_A0Bmu", "Z_AmuB0", "Z_AmuBmu")


@dataclass
class DecoyEstimate:
    m11: float
    e11: float
    y11: float
    m11_expected: float
    flags: list[str] = field(default_factory=list)
    n_chernoff: int = N_CHERNOFF
    eps_each: float = 0.0
    bounds: dict[str, list[float]] = field(default_factory=dict)


def _y11_lower(table: CountTable, protocol: ProtocolParams, budget: _Budget, diag: dict):
    mu, nu = protocol.mu, protocol.nu
    level = {"0": 0.0, "nu": nu, "mu": mu}
    q = {}
    for c in _Y11_CLASSES:
        lo, hi = budget.bounds(table.total(c))
        sent = table.sent(c)
        a, b = c[3:].split("B")
        scale = math.exp(level[a] + level[b]) / sent if sent > 0 else math.inf
        q[c] = (lo * scale, hi * scale) if sent > 0 else (0.0, math.inf)
        diag[c] = [lo, hi]
    h_nu = q["Z_AnuBnu"][0] - q["Z_A0Bnu"][1] - q["Z_AnuB0"][1] + q["Z_A0B0"][0]
    h_mu = q["Z_AmuBmu"][1] - q["Z_A0Bmu"][0] - q["Z_AmuB0"][0] + q["Z_A0B0"][1]
    diag["H_nu_L"] = [h_nu]
    diag["H_mu_U"] = [h_mu]
    return (mu ** 3 * h_nu - nu ** 3 * h_mu) / (mu ** 2 * nu ** 2 * (mu - nu))


def estimate_decoy(table: CountTable, protocol: ProtocolParams, eps: float | None = None) -> DecoyEstimate:
    """Lower bound on single-photon Z_mumu pairs and upper bound on their phase-error rate."""
    eps = protocol.epsilon if eps is None else eps
    budget = _Budget(eps, N_CHERNOFF)
    diag: dict[str, list[float]] = {}
    flags = []
    mu, nu, D = protocol.mu, protocol.nu, protocol.D

    y11 = _y11_lower(table, protocol, budget, diag)
    if not y11 > 0:
        flags.append("Y11 lower bound is not positive")
        y11 = 0.0
    expected = table.sent("Z_AmuBmu") * (mu * math.exp(-mu)) ** 2 * y11
    budget.used += 1
    m11 = realized_lower(expected, budget.each)
    if m11 == 0:
        flags.append("M11 lower bound clamped to 0")

    x = "X_A2nuB2nu"
    if table.total(x) == 0:
        flags.append("no (2nu, 2nu) X pairs: phase-error rate set to 0.5")
        e11 = 0.5
        budget.used += 3
    else:
        err_hi = budget.bounds(table.error(x))[1]
        q_a = budget.bounds(table.total("X_A0B2nu"))[0] / table.sent("X_A0B2nu")
        q_b = budget.bounds(table.total("X_A2nuB0"))[0] / table.sent("X_A2nuB0")
        q00 = diag["Z_A0B0"][1] / table.sent("Z_A0B0")
        rate = err_hi / (table.sent(x) * 2 / D)
        vac = 0.5 * (math.exp(-2 * nu) * (q_a + q_b) - math.exp(-4 * nu) * q00)
        p1 = 2 * nu * math.exp(-2 * nu)
        diag["X_error_rate_U"] = [rate]
        diag["X_vacuum_part_L"] = [vac]
        if y11 > 0:
            e11 = min(0.5, max(0.0, (rate - vac) / (p1 * p1 * y11)))
        else:
            e11 = 0.5
        if e11 == 0.5:
            flags.append("phase-error bound capped at 0.5")
    return DecoyEstimate(m11, e11, y11, expected, flags, budget.used, budget.each, diag)


def estimate_M11_Z(table: CountTable, protocol: ProtocolParams, eps: float | None = None) -> float:
    return estimate_decoy(table, protocol, eps).m11


def estimate_ephase(table: CountTable, protocol: ProtocolParams, eps: float | None = None) -> float:
    return estimate_decoy(table, protocol, eps).e11


def key_length(m11: float, e11: float, m_mumu: float, e_mumu: float, f: float,
               n_rounds: float | None = None):
    """``(K, R)``; ``R = K / (N/2)`` and is None without ``n_rounds``."""
    for name, v in (("e11", e11), ("E_mumu", e_mumu)):
        if not 0 <= v <= 1:
            raise ValueError(f"{name} must lie in [0, 1]")
    if m11 < 0 or m_mumu < 0:
        raise ValueError("pair counts must be non-negative")
    k = max(0.0, m11 * (1 - binary_entropy(e11)) - f * m_mumu * binary_entropy(e_mumu))
    r = None if n_rounds is None else k / (n_rounds / 2)
    return k, r


@dataclass
class KeyRateReport:
    m11: float
    e11: float
    m_mumu: float
    e_mumu: float
    f: float
    n_rounds: float
    K: float
    R: float
    aborted: bool
    flags: list[str] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def direct_key_rate(m11: float, e11: float, m_mumu: float, e_mumu: float, f: float,
                    n_rounds: float) -> KeyRateReport:
    """Key length from given estimates, bypassing the decoy analysis."""
    k, r = key_length(m11, e11, m_mumu, e_mumu, f, n_rounds)
    return KeyRateReport(m11, e11, m_mumu, e_mumu, f, n_rounds, k, r, k == 0,
                         [] if k > 0 else ["key length clamped to 0"])


def analyze_counts(table: CountTable, protocol: ProtocolParams, eps: float | None = None) -> KeyRateReport:
    est = estimate_decoy(table, protocol, eps)
    c = "Z_AmuBmu"
    m_mumu = table.total(c)
    e_mumu = table.error(c) / m_mumu if m_mumu else 0.0
    k, r = key_length(est.m11, est.e11, m_mumu, e_mumu, protocol.f, table.n_rounds)
    flags = list(est.flags) + ([] if k > 0 else ["key length clamped to 0"])
    diag = {
        "Y11_L": est.y11,
        "M11_expected_L": est.m11_expected,
        "chernoff_invocations": est.n_chernoff,
        "epsilon_total": protocol.epsilon if eps is None else eps,
        "epsilon_each": est.eps_each,
        "bounds": est.bounds,
    }
    return KeyRateReport(est.m11, est.e11, m_mumu, e_mumu, protocol.f, table.n_rounds, k, r,
                         k == 0, flags, diag)
