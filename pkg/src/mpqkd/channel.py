"""Monte Carlo model of the sources, fibre links and Charlie's detectors.

Two free-running lasers are interfered at a balanced beam splitter.  The
relative phase seen at the beam splitter in slot ``k`` is

    dphi_k = 2*pi*(phase_a - phase_b)/D + theta(t_k)

where ``theta`` collects the initial laser phase offset, a Wiener term
(fibre phase noise plus laser phase diffusion) and the integral of the
angular-frequency difference, itself a bounded random walk around
``delta_omega0``.

Sessions are generated in fixed blocks of ``BLOCK_SLOTS`` slots.  Every block
draws from its own counter-based (Philox) stream keyed by ``(seed, block)``;
quantities that couple blocks (the frequency walk and the Wiener endpoints)
come from a separate coarse stream and are filled in inside each block by a
Brownian bridge.  The merged output is therefore independent of how many
workers processed the blocks.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .protocol import (
    ClickRecord,
    IntensityLabel,
    Outcome,
    ProtocolParams,
    Region,
    RoundSpec,
)

BLOCK_SLOTS = 1 << 18

_COARSE, _DRAWS, _BRIDGE, _TAGS = 0, 1, 2, 3


@dataclass(frozen=True)
class ChannelParams:
    """Physical constants of the links and detectors.

    ``total_transmittance`` (one side, detector efficiency included) overrides
    the fibre model when set.  Frequencies are angular (rad/s); the walk rates
    are variance rates, ``(rad/s)^2/s`` for the frequency and ``rad^2/s`` for
    the fibre phase.  ``extinction_db`` sets the residual light of vacuum
    states relative to the signal intensity.
    """

    alpha_db_per_km: float = 0.2
    distance_a_km: float = 50.5
    distance_b_km: float = 50.5
    extra_loss_db: float = 0.0
    total_transmittance: float | None = None
    eta_d: float = 0.6246
    p_dark: float = 2.72e-8
    delta_omega0: float = 2 * math.pi * 10e6
    freq_walk_rate: float = 0.0
    freq_walk_bound: float = 2 * math.pi * 1e6
    fiber_phase_rate: float = 0.0
    linewidth: float = 0.0
    extinction_db: float | None = None

    @classmethod
    def symmetric(cls, distance_km: float, **kw) -> "ChannelParams":
        return cls(distance_a_km=distance_km / 2, distance_b_km=distance_km / 2, **kw)

    def transmittances(self) -> tuple[float, float]:
        """One-side channel transmittances, excluding detector efficiency."""
        if self.total_transmittance is not None:
            eta = self.total_transmittance / self.eta_d
            return eta, eta
        out = []
        for d in (self.distance_a_km, self.distance_b_km):
            out.append(10 ** (-(self.alpha_db_per_km * d + self.extra_loss_db) / 10))
        return out[0], out[1]

    @property
    def phase_diffusion_rate(self) -> float:
        return self.fiber_phase_rate + 2 * math.pi * self.linewidth

    def vacuum_leak(self, mu: float) -> float:
        if self.extinction_db is None:
            return 0.0
        return mu * 10 ** (-self.extinction_db / 10)

    def problems(self) -> list[str]:
        out = []
        if not 0 < self.eta_d <= 1:
            out.append(f"detector efficiency eta_d must lie in (0, 1] (got {self.eta_d})")
        if not 0 <= self.p_dark < 1:
            out.append(f"dark-count probability must lie in [0, 1) (got {self.p_dark})")
        if self.alpha_db_per_km < 0 or self.extra_loss_db < 0:
            out.append("attenuations must be non-negative")
        if min(self.distance_a_km, self.distance_b_km) < 0:
            out.append("distances must be non-negative")
        if self.total_transmittance is not None and not 0 < self.total_transmittance <= self.eta_d:
            out.append("total_transmittance must lie in (0, eta_d]")
        if min(self.freq_walk_rate, self.fiber_phase_rate, self.linewidth) < 0:
            out.append("noise rates and linewidth must be non-negative")
        if self.freq_walk_bound <= 0:
            out.append("freq_walk_bound must be positive")
        if self.extinction_db is not None and self.extinction_db <= 0:
            out.append("extinction_db must be positive")
        return out


def _stream(seed: int, purpose: int, block: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, purpose, block])))


class PhaseTrajectory:
    """Relative laser phase ``theta(t)`` for one session, evaluated lazily per block."""

    def __init__(self, channel: ChannelParams, seed: int, n_slots: int, tau: float,
                 block: int = BLOCK_SLOTS):
        self.channel = channel
        self.seed = seed
        self.tau = tau
        self.block = block
        self.n_slots = n_slots
        n_blocks = max(1, -(-n_slots // block))
        t_block = block * tau
        rng = _stream(seed, _COARSE)
        self.theta0 = rng.uniform(0, 2 * math.pi)
        steps_w = rng.standard_normal(n_blocks) * math.sqrt(channel.phase_diffusion_rate * t_block)
        steps_o = rng.standard_normal(n_blocks) * math.sqrt(channel.freq_walk_rate * t_block)

        lo = channel.delta_omega0 - channel.freq_walk_bound
        hi = channel.delta_omega0 + channel.freq_walk_bound
        omega = np.empty(n_blocks + 1)
        omega[0] = channel.delta_omega0
        for b, step in enumerate(steps_o):
            w = omega[b] + step
            # reflect into [lo, hi]; steps are tiny compared with the bound
            while w < lo or w > hi:
                w = 2 * lo - w if w < lo else 2 * hi - w
            omega[b + 1] = w
        self.omega = omega
        self.boundary_t = np.arange(n_blocks + 1) * t_block
        self.wiener = np.concatenate([[0.0], np.cumsum(steps_w)])
        self.phi = np.concatenate([[0.0], np.cumsum((omega[:-1] + omega[1:]) / 2 * t_block)])

    @property
    def n_blocks(self) -> int:
        return len(self.omega) - 1

    def delta_omega(self, t):
        """True angular-frequency difference at time ``t`` (piecewise linear)."""
        return np.interp(t, self.boundary_t, self.omega)

    def block_phase(self, b: int, offsets: np.ndarray) -> np.ndarray:
        """theta at slots ``b*block + offsets`` (offsets sorted, within the block)."""
        tb = self.block * self.tau
        dt = offsets * self.tau
        w0, w1 = self.omega[b], self.omega[b + 1]
        phase = self.theta0 + self.phi[b] + w0 * dt + (w1 - w0) * dt ** 2 / (2 * tb)
        rate = self.channel.phase_diffusion_rate
        if rate > 0:
            # Brownian bridge sampled only at the requested offsets
            rng = _stream(self.seed, _BRIDGE, b)
            gaps = np.diff(np.concatenate([[0], offsets, [self.block]]))
            path = np.cumsum(rng.standard_normal(len(gaps)) * np.sqrt(rate * self.tau * gaps))
            target = self.wiener[b + 1] - self.wiener[b]
            bridge = path[:-1] - offsets / self.block * (path[-1] - target)
            phase = phase + self.wiener[b] + bridge
        return phase


def phase_difference_trajectory(params: ChannelParams, schedule, seed: int,
                                tau: float = 1.6e-9) -> np.ndarray:
    """theta(t) at every slot of ``schedule`` (recovery slots included).

    Shares the deterministic part (offset and frequency walk) with
    :func:`simulate_session` for equal seeds; the in-block Wiener fill is
    drawn afresh.
    """
    n = len(schedule)
    traj = PhaseTrajectory(params, seed, n, tau)
    out = np.empty(n)
    for b in range(traj.n_blocks):
        s0, s1 = b * traj.block, min((b + 1) * traj.block, n)
        out[s0:s1] = traj.block_phase(b, np.arange(s1 - s0))
    return out


def port_means(mu_a, mu_b, dphi, eta_a, eta_b):
    """Mean photon numbers arriving at the L and R output ports."""
    A = eta_a * np.asarray(mu_a, dtype=float)
    B = eta_b * np.asarray(mu_b, dtype=float)
    cross = 2 * np.sqrt(A * B) * np.cos(dphi)
    n_l = np.maximum((A + B + cross) / 2, 0.0)
    n_r = np.maximum((A + B - cross) / 2, 0.0)
    return n_l, n_r


def click_probabilities(mu_a, mu_b, dphi, eta_a, eta_b, eta_d, p_dark):
    """Click probabilities of the L and R threshold detectors.

    ``p_X = 1 - (1 - p_dark) exp(-eta_d n_X)``; the two detectors fire
    independently given the port means.
    """
    n_l, n_r = port_means(mu_a, mu_b, dphi, eta_a, eta_b)
    log_nodark = math.log1p(-p_dark)
    p_l = -np.expm1(log_nodark - eta_d * n_l)
    p_r = -np.expm1(log_nodark - eta_d * n_r)
    if np.ndim(p_l) == 0:
        return float(p_l), float(p_r)
    return p_l, p_r


def _zero_truncated_poisson(rng: np.random.Generator, lam: np.ndarray) -> np.ndarray:
    """Poisson(lam) conditioned on being >= 1, by inversion."""
    lam = np.asarray(lam, dtype=float)
    out = np.ones(lam.shape, dtype=np.int64)
    if lam.size == 0:
        return out
    u = rng.random(lam.shape)
    norm = -np.expm1(-lam)
    pmf = np.where(norm > 0, np.exp(-lam) * lam / np.where(norm > 0, norm, 1), 1.0)
    cdf = pmf.copy()
    k = 1
    pending = u > cdf
    while pending.any() and k < 200:
        k += 1
        pmf = pmf * lam / k
        cdf = cdf + pmf
        out[pending] = k
        pending = pending & (u > cdf)
    return out


@dataclass
class ClickTable:
    """Charlie's announcements, one row per slot where at least one detector fired.

    ``outcome`` is 0 for L, 1 for R and -1 for a double click; ``valid`` marks
    single clicks.  Rows are sorted by slot index.
    """

    index: np.ndarray
    t: np.ndarray
    outcome: np.ndarray
    valid: np.ndarray
    region: np.ndarray

    def __len__(self) -> int:
        return len(self.index)

    def records(self):
        for i, t, o, v in zip(self.index.tolist(), self.t.tolist(), self.outcome.tolist(),
                              self.valid.tolist()):
            yield ClickRecord(i, t, Outcome(o) if o >= 0 else None, v)

    def select(self, mask) -> "ClickTable":
        return ClickTable(self.index[mask], self.t[mask], self.outcome[mask],
                          self.valid[mask], self.region[mask])


@dataclass
class RoundTable:
    """Alice's and Bob's private settings for the rows of a :class:`ClickTable`."""

    index: np.ndarray
    region: np.ndarray
    intensity_a: np.ndarray
    intensity_b: np.ndarray
    phase_a: np.ndarray
    phase_b: np.ndarray

    def specs(self):
        for row in zip(self.index.tolist(), self.region.tolist(), self.intensity_a.tolist(),
                       self.intensity_b.tolist(), self.phase_a.tolist(), self.phase_b.tolist()):
            i, r, la, lb, pa, pb = row
            yield RoundSpec(i, Region(r), IntensityLabel(la), IntensityLabel(lb), pa, pb)


@dataclass
class GroundTruth:
    """Hidden simulation tags for the recorded rows.

    ``source_*`` are emitted photon numbers, ``arrived_*`` the photons reaching
    Charlie from each side (Poisson with mean ``eta * mu``), ``theta`` the
    relative phase at the slot.  ``trajectory`` gives the coarse frequency walk.
    """

    index: np.ndarray
    source_a: np.ndarray
    source_b: np.ndarray
    arrived_a: np.ndarray
    arrived_b: np.ndarray
    theta: np.ndarray
    trajectory: PhaseTrajectory


@dataclass
class Session:
    protocol: ProtocolParams
    channel: ChannelParams
    seed: int
    n_cycles: int
    clicks: ClickTable
    rounds: RoundTable
    truth: GroundTruth
    sent: np.ndarray = field(repr=False)  # 3x3 QKD-round counts by (intensity_a, intensity_b)
    all_tags: tuple | None = field(default=None, repr=False)

    @property
    def n_slots(self) -> int:
        return self.n_cycles * self.protocol.frame.cycle

    @property
    def n_qkd_rounds(self) -> int:
        return self.n_cycles * self.protocol.frame.n_qkd

    @property
    def duration(self) -> float:
        return self.n_slots * self.protocol.tau


def _click_model(protocol, channel):
    """Per-combination probabilities that any detector fires (phase independent)."""
    table = protocol.intensity_table()
    table[0] = channel.vacuum_leak(protocol.mu)
    eta_a, eta_b = channel.transmittances()
    # (1 - p_L)(1 - p_R) = (1 - p_dark)^2 exp(-eta_d (n_L + n_R)) and n_L + n_R
    # does not depend on the phase.
    lam = channel.eta_d * (eta_a * table[:, None] + eta_b * table[None, :])
    p_any = -np.expm1(2 * math.log1p(-channel.p_dark) - lam)
    prior = np.array([protocol.p_vacuum, protocol.p_nu, protocol.p_mu])
    prior = np.outer(prior, prior).ravel()
    return table, p_any, prior


def _simulate_block(b, protocol, channel, seed, traj, n_slots, tag_all):
    s0 = b * traj.block
    s1 = min(s0 + traj.block, n_slots)
    idx = np.arange(s0, s1, dtype=np.int64)
    region = protocol.frame.region_of(idx)
    keep = region != Region.RECOVERY
    idx, region = idx[keep], region[keep]
    qkd = region == Region.QKD
    n_qkd = int(qkd.sum())

    table, p_any, prior = _click_model(protocol, channel)
    p_qkd = p_any[:3, :3].ravel()
    w_click = prior * p_qkd
    p_click_qkd = w_click.sum()
    p_click_ref = p_any[3, 3]

    rng = _stream(seed, _DRAWS, b)
    u = rng.random(len(idx))
    rec = u < np.where(qkd, p_click_qkd, p_click_ref)
    r = np.flatnonzero(rec)
    ridx, rreg = idx[r], region[r]
    rq = rreg == Region.QKD
    n = len(r)

    combo = np.full(n, 15, dtype=np.int64)  # strong/strong
    if rq.any():
        combo[rq] = rng.choice(9, size=int(rq.sum()), p=w_click / p_click_qkd)
    n_idle = n_qkd - int(rq.sum())
    idle = rng.multinomial(n_idle, prior * (1 - p_qkd) / (1 - p_click_qkd)) if n_idle else 0
    sent = (np.bincount(combo[rq], minlength=9) + idle).reshape(3, 3)
    la = np.where(rq, combo // 3, IntensityLabel.STRONG).astype(np.int8)
    lb = np.where(rq, combo % 3, IntensityLabel.STRONG).astype(np.int8)
    phases = rng.integers(0, protocol.D, size=(2, n), dtype=np.int16)
    phases[:, ~rq] = 0

    mu_a, mu_b = table[la], table[lb]
    eta_a, eta_b = channel.transmittances()
    theta = traj.block_phase(b, ridx - s0)
    dphi = 2 * math.pi * (phases[0] - phases[1]) / protocol.D + theta
    n_l, n_r = port_means(mu_a, mu_b, dphi, eta_a, eta_b)
    lam_l, lam_r = channel.eta_d * n_l, channel.eta_d * n_r
    log_nodark = math.log1p(-channel.p_dark)
    p_l = -np.expm1(log_nodark - lam_l)
    p_r = -np.expm1(log_nodark - lam_r)
    # outcome given that at least one detector fired
    p_tot = p_l + p_r - p_l * p_r
    v = rng.random(n) * p_tot
    # [0, p_l(1-p_r)) L only, [.., p_l) both, [p_l, p_tot) R only
    c_l = v < p_l
    c_r = v >= p_l * (1 - p_r)
    outcome = np.where(c_l & ~c_r, 0, np.where(c_r & ~c_l, 1, -1)).astype(np.int8)

    # Photon tags, conditioned on the click pattern.  Port counts are
    # independent Poissons; detected photons split binomially between the two
    # sources and undetected photons are independent Poisson thinnings.
    trng = _stream(seed, _TAGS, b)
    cnt = []
    for clicked, lam, p in ((c_l, lam_l, p_l), (c_r, lam_r, p_r)):
        from_photon = clicked & (trng.random(n) * p < -np.expm1(-lam))
        c = np.zeros(n, dtype=np.int64)
        c[from_photon] = _zero_truncated_poisson(trng, lam[from_photon])
        cnt.append(c)
    total = cnt[0] + cnt[1]
    A, B = eta_a * mu_a, eta_b * mu_b
    share = np.divide(A, A + B, out=np.zeros_like(A), where=(A + B) > 0)
    det_a = trng.binomial(total, share)
    det_b = total - det_a
    # nested thinning: detected <= arrived <= emitted
    arr_a = det_a + trng.poisson(A * (1 - channel.eta_d))
    arr_b = det_b + trng.poisson(B * (1 - channel.eta_d))
    src_a = arr_a + trng.poisson(mu_a * (1 - eta_a))
    src_b = arr_b + trng.poisson(mu_b * (1 - eta_b))

    out = dict(
        index=ridx, region=rreg, la=la, lb=lb, pa=phases[0], pb=phases[1],
        outcome=outcome, valid=outcome >= 0, theta=theta,
        src_a=src_a, src_b=src_b, arr_a=arr_a, arr_b=arr_b, sent=sent, all_tags=None,
    )
    if tag_all:
        # silent slots: nothing was detected, only undetected photons remain
        s = np.flatnonzero(~rec)
        sq = region[s] == Region.QKD
        sc = np.full(len(s), 15, dtype=np.int64)
        if sq.any():
            sc[sq] = rng.choice(9, size=int(sq.sum()), p=prior * (1 - p_qkd) / (1 - p_click_qkd))
        sa, sb = table[np.where(sq, sc // 3, 3)], table[np.where(sq, sc % 3, 3)]
        la_all = np.concatenate([la, np.where(sq, sc // 3, 3)])
        lb_all = np.concatenate([lb, np.where(sq, sc % 3, 3)])
        order = np.argsort(np.concatenate([ridx, idx[s]]), kind="stable")
        cols = [
            np.concatenate([ridx, idx[s]]),
            np.stack([la_all, lb_all]),
        ]
        s_arr_a = trng.poisson(eta_a * sa * (1 - channel.eta_d))
        s_arr_b = trng.poisson(eta_b * sb * (1 - channel.eta_d))
        cols += [
            np.concatenate([src_a, s_arr_a + trng.poisson(sa * (1 - eta_a))]),
            np.concatenate([src_b, s_arr_b + trng.poisson(sb * (1 - eta_b))]),
            np.concatenate([arr_a, s_arr_a]),
            np.concatenate([arr_b, s_arr_b]),
        ]
        out["all_tags"] = tuple(c[..., order] for c in cols)
        out["sent"] = np.bincount((la_all * 3 + lb_all)[np.concatenate([rq, sq])],
                                  minlength=9).reshape(3, 3)
    return out


def simulate_session(protocol: ProtocolParams, channel: ChannelParams, n_cycles: int,
                     seed: int, threads: int = 1, tag_all: bool = False) -> Session:
    """Generate one session of ``n_cycles`` frames.

    Only slots where a detector fired are stored (clicks, private settings and
    ground-truth tags for those rows); ``Session.sent`` aggregates the QKD-slot
    intensity choices.  With ``tag_all`` the photon tags of every non-recovery
    slot are kept in ``Session.all_tags`` (small sessions only).
    """
    protocol.validate()
    errs = channel.problems()
    if errs:
        raise ValueError("; ".join(errs))
    if n_cycles < 1:
        raise ValueError("n_cycles must be >= 1")
    n_slots = n_cycles * protocol.frame.cycle
    traj = PhaseTrajectory(channel, seed, n_slots, protocol.tau)
    blocks = range(traj.n_blocks)
    work = lambda b: _simulate_block(b, protocol, channel, seed, traj, n_slots, tag_all)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]

    cat = lambda key: np.concatenate([p[key] for p in parts])
    index = cat("index")
    clicks = ClickTable(index, index * protocol.tau, cat("outcome"), cat("valid"), cat("region"))
    rounds = RoundTable(index, clicks.region, cat("la"), cat("lb"), cat("pa"), cat("pb"))
    truth = GroundTruth(index, cat("src_a"), cat("src_b"), cat("arr_a"), cat("arr_b"),
                        cat("theta"), traj)
    sent = sum(p["sent"] for p in parts)
    session = Session(protocol, channel, seed, n_cycles, clicks, rounds, truth, sent)
    if tag_all:
        session.all_tags = tuple(np.concatenate([p["all_tags"][k] for p in parts], axis=-1)
                                 for k in range(6))
    return session
