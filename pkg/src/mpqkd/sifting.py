"""Basis assignment, sifting, key mapping and error tallying for paired rounds."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .pairing import PairTable
from .phase import fold_pi
from .protocol import IntensityLabel, ProtocolParams


class SideLabel(IntEnum):
    ZERO = 0
    Z = 1
    X = 2
    DISCARD = 3


class PairClass(IntEnum):
    ZERO_PAIR = 0
    Z_PAIR = 1
    X_PAIR = 2
    DISCARD = 3


# side names used in class keys, by (basis, summed-intensity level)
_Z_SIDE = {0: "0", 1: "nu", 2: "mu"}
_X_SIDE = {0: "0", 1: "2nu", 2: "2mu"}

Z_CLASSES = tuple(f"Z_A{_Z_SIDE[a]}B{_Z_SIDE[b]}" for a in range(3) for b in range(3))
X_CLASSES = ("X_A0B2nu", "X_A0B2mu", "X_A2nuB0", "X_A2muB0",
             "X_A2nuB2nu", "X_A2nuB2mu", "X_A2muB2nu", "X_A2muB2mu")
CLASSES = Z_CLASSES + X_CLASSES
CLASS_INDEX = {name: k for k, name in enumerate(CLASSES)}


def assign_side_basis(mu_i, mu_j) -> SideLabel:
    mu_i, mu_j = IntensityLabel(mu_i), IntensityLabel(mu_j)
    if IntensityLabel.STRONG in (mu_i, mu_j):
        raise ValueError("strong pulses carry no basis")
    return SideLabel(int(_side_table()[mu_i, mu_j]))


def _side_table() -> np.ndarray:
    t = np.full((3, 3), SideLabel.DISCARD, dtype=np.int8)
    t[0, 0] = SideLabel.ZERO
    t[0, 1:] = t[1:, 0] = SideLabel.Z
    t[1, 1] = t[2, 2] = SideLabel.X
    return t


def side_labels(first, second) -> np.ndarray:
    """Vectorised :func:`assign_side_basis` over label arrays."""
    first, second = np.asarray(first), np.asarray(second)
    if np.any(first > 2) or np.any(second > 2):
        raise ValueError("strong pulses carry no basis")
    return _side_table()[first, second]


def _sift_table() -> np.ndarray:
    t = np.full((4, 4), PairClass.DISCARD, dtype=np.int8)
    t[0, 0] = PairClass.ZERO_PAIR
    t[0, 1] = t[1, 0] = t[1, 1] = PairClass.Z_PAIR
    t[0, 2] = t[2, 0] = t[2, 2] = PairClass.X_PAIR
    return t


def sift_pair(label_a, label_b) -> PairClass:
    return PairClass(int(_sift_table()[SideLabel(label_a), SideLabel(label_b)]))


@dataclass
class SiftedPairs:
    """Per-pair sifting and key-mapping results (column store).

    ``chi_*`` is -1 where no bit is defined and ``theta_*`` NaN outside X
    pairs.  ``class_id`` indexes :data:`CLASSES` (-1 for discarded pairs).
    ``keep`` marks pairs that contribute to the tally; X pairs with both sides
    in X must pass the phase window, pairs with a vacuum side always do.
    """

    label_a: np.ndarray
    label_b: np.ndarray
    pair_class: np.ndarray
    class_id: np.ndarray
    chi_a: np.ndarray
    chi_b: np.ndarray
    theta_a: np.ndarray
    theta_b: np.ndarray
    keep: np.ndarray
    parity: np.ndarray

    def __len__(self) -> int:
        return len(self.pair_class)

    @property
    def error(self) -> np.ndarray:
        z = np.isin(self.pair_class, (PairClass.Z_PAIR, PairClass.ZERO_PAIR))
        x = self.pair_class == PairClass.X_PAIR
        err = np.zeros(len(self), dtype=bool)
        err[z] = self.chi_a[z] != self.chi_b[z]
        err[x] = (self.chi_a[x] ^ self.chi_b[x] ^ self.parity[x]) != 0
        return err & self.keep


def _level(labels) -> np.ndarray:
    """Summed-intensity level of a side: 0 vacuum, 1 decoy, 2 signal."""
    return np.maximum(labels[:, 0], labels[:, 1])


def x_bits(phase_first, phase_second, D: int):
    """Bit and announced phase of one side from its two phase indices."""
    m = (np.asarray(phase_second) - np.asarray(phase_first)) % D
    chi = (m >= D // 2).astype(np.int8)
    theta = (m % (D // 2)) * (2 * math.pi / D)
    return chi, theta


def z_bits(intensity_first_a, intensity_first_b):
    """Alice's and Bob's Z bits; Bob's convention is inverted."""
    chi_a = (np.asarray(intensity_first_a) != 0).astype(np.int8)
    chi_b = (np.asarray(intensity_first_b) == 0).astype(np.int8)
    return chi_a, chi_b


def map_keys(pairs: PairTable, dtheta, D: int) -> SiftedPairs:
    """Sift every pair and derive key bits.

    ``dtheta`` is the compensation phase of each pair (only read for X
    pairs).  For kept X pairs Bob's bit absorbs the parity of the number of
    half turns between ``theta_b - theta_a`` and ``dtheta``, so kept pairs
    compare directly against the detector parity.
    """
    n = len(pairs)
    la = side_labels(pairs.ia[:, 0], pairs.ia[:, 1]) if n else np.zeros(0, np.int8)
    lb = side_labels(pairs.ib[:, 0], pairs.ib[:, 1]) if n else np.zeros(0, np.int8)
    pc = _sift_table()[la, lb] if n else np.zeros(0, np.int8)
    chi_a = np.full(n, -1, dtype=np.int8)
    chi_b = np.full(n, -1, dtype=np.int8)
    th_a = np.full(n, np.nan)
    th_b = np.full(n, np.nan)
    keep = np.zeros(n, dtype=bool)
    class_id = np.full(n, -1, dtype=np.int64)

    z = np.isin(pc, (PairClass.Z_PAIR, PairClass.ZERO_PAIR))
    if z.any():
        chi_a[z], chi_b[z] = z_bits(pairs.ia[z, 0], pairs.ib[z, 0])
        keep[z] = True
        class_id[z] = 3 * _level(pairs.ia[z]) + _level(pairs.ib[z])

    x = pc == PairClass.X_PAIR
    if x.any():
        ca, ta = x_bits(pairs.pa[x, 0], pairs.pa[x, 1], D)
        cb, tb = x_bits(pairs.pb[x, 0], pairs.pb[x, 1], D)
        both = (la[x] == SideLabel.X) & (lb[x] == SideLabel.X)
        dth = np.broadcast_to(np.asarray(dtheta, dtype=float), (n,))[x]
        r, flip = fold_pi(tb - ta - dth)
        inside = np.abs(r) <= math.pi / D * (1 + 1e-12)
        kx = ~both | inside
        cb = np.where(both & inside, cb ^ flip, cb).astype(np.int8)
        chi_a[x], chi_b[x], th_a[x], th_b[x], keep[x] = ca, cb, ta, tb, kx
        lev_a, lev_b = _level(pairs.ia[x]), _level(pairs.ib[x])
        names = np.array([CLASS_INDEX.get(f"X_A{_X_SIDE[a]}B{_X_SIDE[b]}", -1)
                          for a in range(3) for b in range(3)])
        class_id[x] = names[3 * lev_a + lev_b]

    return SiftedPairs(la, lb, pc, class_id, chi_a, chi_b, th_a, th_b, keep, pairs.parity)


def side_prior(protocol: ProtocolParams) -> dict[str, float]:
    """Probability that one side's two rounds produce each side class."""
    p0, pn, pm = protocol.p_vacuum, protocol.p_nu, protocol.p_mu
    return {"0": p0 * p0, "nu": 2 * pn * p0, "mu": 2 * pm * p0, "2nu": pn * pn, "2mu": pm * pm}


def class_sides(name: str) -> tuple[str, str]:
    a, b = name[3:].split("B")
    return a, b


def sent_pairs(protocol: ProtocolParams, n_rounds: float) -> dict[str, float]:
    """Expected number of pair slots of each class out of ``n_rounds / 2``."""
    prior = side_prior(protocol)
    n_pair = n_rounds / 2
    return {c: n_pair * prior[class_sides(c)[0]] * prior[class_sides(c)[1]] for c in CLASSES}


def tally_counts(sifted: SiftedPairs, protocol: ProtocolParams, n_rounds: float):
    """Aggregate kept pairs into a :class:`~mpqkd.decoy.CountTable`."""
    from .decoy import CountTable

    sel = sifted.keep & (sifted.class_id >= 0)
    total = np.bincount(sifted.class_id[sel], minlength=len(CLASSES))
    error = np.bincount(sifted.class_id[sel & sifted.error], minlength=len(CLASSES))
    sent = sent_pairs(protocol, n_rounds)
    rows = {c: (sent[c], int(total[k]), int(error[k])) for k, c in enumerate(CLASSES)}
    return CountTable(rows, n_rounds)
