"""End-to-end processing of a simulated session, and the analytic distance sweep."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .channel import ChannelParams, Session
from .decoy import CountTable, KeyRateReport, analyze_counts
from .pairing import PairingStats, pair_clicks, pairing_stats
from .phase import (
    FrequencyTrack,
    assemble_groups,
    default_search,
    estimate_groups,
    fit_frequency_track,
    reference_error_proxy,
)
from .protocol import ProtocolParams, Region
from .sifting import CLASS_INDEX, PairClass, SideLabel, map_keys, tally_counts
from .theory import expected_counts

COMPENSATION = ("mle", "truth", "none")
MATCHED_X = ("X_A2nuB2nu", "X_A2muB2mu")


@dataclass
class PhaseInfo:
    n_groups: int = 0
    n_sign_ambiguous: int = 0
    search: tuple[float, float] | None = None
    track_rms_error: float | None = None  # against the true dw at group midpoints


@dataclass
class SessionAnalysis:
    counts: CountTable
    report: KeyRateReport
    pairing: PairingStats
    x_error: float
    x_error_all: float
    z_qber: float
    phase: PhaseInfo
    truth: dict = field(default_factory=dict)
    reference_proxy: dict | None = None


def _frequency_track(session: Session, search, group_size: int, window: int, threads: int):
    p = session.protocol
    c = session.clicks
    ref = c.valid & (c.region == Region.REFERENCE)
    groups = assemble_groups(c.index[ref], c.outcome[ref], p.frame.cycle, p.tau, group_size)
    if len(groups) < 2:
        raise RuntimeError("too few reference clicks for frequency estimation")
    t, w, n_amb = estimate_groups(groups, p.tau, search, threads)
    track = fit_frequency_track(t, w, window, domain=(0.0, session.duration))
    true_w = session.truth.trajectory.delta_omega(t)
    rms = float(np.sqrt(np.mean((track(t) - true_w) ** 2)))
    return track, PhaseInfo(len(groups), int(n_amb), tuple(search), rms)


def _rate(err, tot) -> float:
    return float(err / tot) if tot else float("nan")


def analyze_session(session: Session, compensation: str = "mle", eps: float | None = None,
                    search=None, group_size: int = 500, window: int = 200, threads: int = 1,
                    reference_proxy: bool = False) -> SessionAnalysis:
    """Pair, compensate, sift and estimate the key rate of a simulated session.

    ``compensation`` selects the phase drift used for X pairs: the MLE track
    (``mle``), the simulator's true phase (``truth``) or none.
    """
    if compensation not in COMPENSATION:
        raise ValueError(f"compensation must be one of {COMPENSATION}")
    p = session.protocol
    pairs = pair_clicks(session.clicks, session.rounds, p.l_min, p.l_max, p.frame.cycle)
    info = PhaseInfo()
    track: FrequencyTrack | None = None
    if compensation == "mle":
        if search is None:
            search = default_search(session.channel.delta_omega0)
        track, info = _frequency_track(session, search, group_size, window, threads)
        dtheta = track.integral(pairs.t_f, pairs.t_r)
    elif compensation == "truth":
        th = session.truth.theta
        dtheta = th[pairs.row_r] - th[pairs.row_f]
    else:
        dtheta = np.zeros(len(pairs))

    sifted = map_keys(pairs, dtheta, p.D)
    n_rounds = p.n_rounds if p.n_rounds is not None else session.n_qkd_rounds
    counts = tally_counts(sifted, p, n_rounds)
    report = analyze_counts(counts, p, eps)

    err = sifted.error
    both_x = ((sifted.pair_class == PairClass.X_PAIR) & (sifted.label_a == SideLabel.X)
              & (sifted.label_b == SideLabel.X) & sifted.keep)
    matched = np.isin(sifted.class_id, [CLASS_INDEX[c] for c in MATCHED_X]) & sifted.keep
    x_error = _rate(np.count_nonzero(err & matched), np.count_nonzero(matched))
    x_error_all = _rate(np.count_nonzero(err & both_x), np.count_nonzero(both_x))
    zc = "Z_AmuBmu"
    z_qber = _rate(counts.error(zc), counts.total(zc))

    # ground truth from the photon tags of the paired rounds
    tr = session.truth
    n_a = tr.source_a[pairs.row_f] + tr.source_a[pairs.row_r]
    n_b = tr.source_b[pairs.row_f] + tr.source_b[pairs.row_r]
    single = (n_a == 1) & (n_b == 1)
    m11_true = int(np.count_nonzero(single & (sifted.class_id == CLASS_INDEX[zc])))
    x11 = both_x & single
    truth = {
        "M11": m11_true,
        "X11_pairs": int(np.count_nonzero(x11)),
        "e11": _rate(np.count_nonzero(err & x11), np.count_nonzero(x11)),
    }

    proxy = None
    if reference_proxy:
        c = session.clicks
        ref = c.valid & (c.region == Region.REFERENCE)
        comp = track.integral if track is not None else tr.theta[ref]
        proxy = reference_error_proxy(c.index[ref], c.outcome[ref], p.frame.cycle, p.tau, p.D, comp)
    stats = pairing_stats(pairs.l, n_rounds)
    return SessionAnalysis(counts, report, stats, x_error, x_error_all, z_qber, info, truth, proxy)


def sweep(protocol: ProtocolParams, channel: ChannelParams, distances, n_rounds: float,
          phase_noise: float = 0.0, eps: float | None = None) -> list[dict]:
    """Expected key rate versus symmetric distance, one row per distance."""
    rows = []
    for d in distances:
        ch = replace(channel, total_transmittance=None, distance_a_km=d / 2, distance_b_km=d / 2)
        eta = ch.transmittances()[0] * ch.eta_d
        exp = expected_counts(protocol, ch, n_rounds, phase_noise)
        rep = analyze_counts(exp.table, protocol, eps)
        rows.append({"distance_km": float(d), "eta": eta, "R": rep.R, "X_error": exp.x_error,
                     "n_pairs": exp.n_pairs})
    return rows


__all__ = ["COMPENSATION", "PhaseInfo", "SessionAnalysis", "analyze_session", "sweep"]
