"""Expected pair counts for a symmetric link, used by the distance sweep.

Rounds click independently given their intensities; the relative phase of a
round is uniform.  A pair is two clicked rounds whose settings follow the
click-weighted posterior.  For both-sides-X pairs the second round's phase is
tied to the first through the kept window: the residual after compensation
is uniform over the window width plus Gaussian noise of ``phase_noise``
radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import ChannelParams, click_probabilities
from .decoy import CountTable
from .pairing import pairing_rate
from .protocol import ProtocolParams
from .sifting import CLASSES, class_sides, sent_pairs

_N_PHASE = 256
_N_RESID = 33


def _valid_probs(protocol: ProtocolParams, channel: ChannelParams, phase: np.ndarray):
    """Single-click probabilities ``(L only, R only)`` per (a, b) intensity and phase."""
    table = protocol.intensity_table()[:3].copy()
    table[0] = channel.vacuum_leak(protocol.mu)
    eta_a, eta_b = channel.transmittances()
    a = table[:, None, None]
    b = table[None, :, None]
    p_l, p_r = click_probabilities(a, b, phase[None, None, :], eta_a, eta_b,
                                   channel.eta_d, channel.p_dark)
    return p_l * (1 - p_r), p_r * (1 - p_l)


@dataclass(frozen=True)
class ExpectedCounts:
    table: CountTable
    p_click: float
    r_p: float
    n_pairs: float
    x_error: float


def expected_counts(protocol: ProtocolParams, channel: ChannelParams, n_rounds: float,
                    phase_noise: float = 0.0) -> ExpectedCounts:
    D = protocol.D
    alpha = (np.arange(_N_PHASE) + 0.5) * 2 * math.pi / _N_PHASE
    only_l, only_r = _valid_probs(protocol, channel, alpha)
    p_valid = (only_l + only_r).mean(axis=2)  # (3, 3), phase averaged
    prior = np.array([protocol.p_vacuum, protocol.p_nu, protocol.p_mu])
    w_round = np.outer(prior, prior) * p_valid
    p_click = float(w_round.sum())
    r_p = pairing_rate(p_click, protocol.l_min, protocol.l_max)
    n_pairs = n_rounds * r_p
    post = w_round / p_click  # posterior of (a, b) for one clicked round

    total = dict.fromkeys(CLASSES, 0.0)
    error = dict.fromkeys(CLASSES, 0.0)
    zname = {0: "0", 1: "nu", 2: "mu"}
    xname = {0: "0", 1: "2nu", 2: "2mu"}
    # Z pairs (and the both-vacuum class): bits follow from the intensities alone
    for a1 in range(3):
        for a2 in range(3):
            for b1 in range(3):
                for b2 in range(3):
                    w = n_pairs * post[a1, b1] * post[a2, b2]
                    za, zb = (a1 == 0) != (a2 == 0) or a1 == a2 == 0, (b1 == 0) != (b2 == 0) or b1 == b2 == 0
                    if za and zb:
                        c = f"Z_A{zname[max(a1, a2)]}B{zname[max(b1, b2)]}"
                        total[c] += w
                        if (a1 != 0) != (b1 == 0):
                            error[c] += w
                    xa = a1 == a2
                    xb = b1 == b2
                    if xa and xb and (a1 == 0) != (b1 == 0):
                        c = f"X_A{xname[a1]}B{xname[b1]}"
                        total[c] += w
                        error[c] += 0.5 * w

    # both-sides-X pairs: residual r uniform in [-pi/D, pi/D] plus noise
    u = (np.arange(_N_RESID) + 0.5) / _N_RESID * 2 - 1
    resid = u * math.pi / D
    if phase_noise > 0:
        rng = np.random.default_rng(0)
        resid = (resid[:, None] + phase_noise * rng.standard_normal((1, 64))).ravel()
    matched_t = matched_e = 0.0
    for a in (1, 2):
        for b in (1, 2):
            # second round phase = first + pi*c + residual; error when outcomes
            # agree for c = 1 or differ for c = 0, averaged over c
            l1, r1 = only_l[a, b][:, None], only_r[a, b][:, None]
            shift_err = 0.0
            weight = 0.0
            for c in (0, 1):
                ph2 = alpha[:, None] + math.pi * c + resid[None, :]
                l2, r2 = _valid_probs(protocol, channel, ph2.ravel())
                l2 = l2[a, b].reshape(ph2.shape)
                r2 = r2[a, b].reshape(ph2.shape)
                same = l1 * l2 + r1 * r2
                diff = l1 * r2 + r1 * l2
                weight += (same + diff).mean()
                shift_err += (same if c == 1 else diff).mean()
            wx = 0.5 * weight
            ex = 0.5 * shift_err
            scale = n_pairs * (prior[a] ** 2 * prior[b] ** 2) / p_click ** 2 * (2 / D)
            c = f"X_A{xname[a]}B{xname[b]}"
            total[c] += scale * wx
            error[c] += scale * ex
            if a == b:
                matched_t += scale * wx
                matched_e += scale * ex

    sent = sent_pairs(protocol, n_rounds)
    rows = {c: (sent[c], total[c], error[c]) for c in CLASSES}
    x_err = matched_e / matched_t if matched_t > 0 else 0.5
    return ExpectedCounts(CountTable(rows, n_rounds), p_click, r_p, n_pairs, x_err)


__all__ = ["ExpectedCounts", "expected_counts", "class_sides"]
