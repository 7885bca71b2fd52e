"""Sequential pairing of valid clicks and the closed-form pairing rate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import ClickTable, RoundTable
from .protocol import IntensityLabel, Outcome

L_INTERVALS = ((63, 500), (500, 1000), (1000, 1500), (1500, 2000))


def pair_indices(index, l_min: int, l_max: int, segment=None):
    """Positions ``(front, rear)`` of the pairs formed from sorted valid-click indices.

    The first unpaired click is the front and the next one the rear.  A pair is
    emitted when ``l_min <= rear - front <= l_max``; otherwise the rear becomes
    the new front.  When ``segment`` is given, the state is cleared whenever the
    segment id changes, so no pair straddles two segments.
    """
    if not 1 <= l_min <= l_max:
        raise ValueError("pairing lengths must satisfy 1 <= l_min <= l_max")
    idx = np.asarray(index, dtype=np.int64)
    if len(idx) and np.any(np.diff(idx) <= 0):
        raise ValueError("click indices must be strictly increasing")
    seg = np.zeros(len(idx), dtype=np.int64) if segment is None else np.asarray(segment)
    fronts, rears = [], []
    front = -1
    prev_seg = None
    ids = idx.tolist()
    for pos, (i, s) in enumerate(zip(ids, seg.tolist())):
        if s != prev_seg:
            front, prev_seg = -1, s
        if front < 0:
            front = pos
            continue
        l = i - ids[front]
        if l_min <= l <= l_max:
            fronts.append(front)
            rears.append(pos)
            front = -1
        else:
            front = pos
    return np.array(fronts, dtype=np.int64), np.array(rears, dtype=np.int64)


@dataclass(frozen=True)
class PairRecord:
    front: int
    rear: int
    l: int
    intensity_a: tuple[IntensityLabel, IntensityLabel]
    intensity_b: tuple[IntensityLabel, IntensityLabel]
    phase_a: tuple[int, int]
    phase_b: tuple[int, int]
    outcome: tuple[Outcome, Outcome]
    t: tuple[float, float]


@dataclass
class PairTable:
    """Column store of pairs.  ``row_f``/``row_r`` point into the source click table."""

    row_f: np.ndarray
    row_r: np.ndarray
    front: np.ndarray
    rear: np.ndarray
    t_f: np.ndarray
    t_r: np.ndarray
    out_f: np.ndarray
    out_r: np.ndarray
    ia: np.ndarray  # (n, 2) intensity labels of Alice at front/rear
    ib: np.ndarray
    pa: np.ndarray  # (n, 2) phase indices
    pb: np.ndarray

    def __len__(self) -> int:
        return len(self.front)

    @property
    def l(self) -> np.ndarray:
        return self.rear - self.front

    @property
    def parity(self) -> np.ndarray:
        """1 where the two rounds fired different detectors."""
        return (self.out_f != self.out_r).astype(np.int8)

    def records(self):
        for k in range(len(self)):
            yield PairRecord(
                int(self.front[k]), int(self.rear[k]), int(self.rear[k] - self.front[k]),
                tuple(IntensityLabel(int(x)) for x in self.ia[k]),
                tuple(IntensityLabel(int(x)) for x in self.ib[k]),
                tuple(int(x) for x in self.pa[k]), tuple(int(x) for x in self.pb[k]),
                (Outcome(int(self.out_f[k])), Outcome(int(self.out_r[k]))),
                (float(self.t_f[k]), float(self.t_r[k])),
            )


def pair_clicks(clicks: ClickTable, rounds: RoundTable, l_min: int, l_max: int,
                cycle: int | None = None) -> PairTable:
    """Run the pairing over the valid QKD clicks of a session.

    ``cycle`` is the frame length in slots; clicks of different cycles lie in
    different QKD regions and are never paired together.
    """
    rows = np.flatnonzero(clicks.valid & (clicks.region == 2))
    idx = clicks.index[rows]
    seg = None if cycle is None else idx // cycle
    f, r = pair_indices(idx, l_min, l_max, seg)
    rf, rr = rows[f], rows[r]
    both = lambda a: np.stack([a[rf], a[rr]], axis=1)
    return PairTable(
        rf, rr, clicks.index[rf], clicks.index[rr], clicks.t[rf], clicks.t[rr],
        clicks.outcome[rf], clicks.outcome[rr],
        both(rounds.intensity_a), both(rounds.intensity_b),
        both(rounds.phase_a), both(rounds.phase_b),
    )


@dataclass(frozen=True)
class PairingStats:
    n_pairs: int
    n_rounds: int
    histogram: dict[str, int]

    @property
    def rate(self) -> float:
        return self.n_pairs / self.n_rounds if self.n_rounds else 0.0


def pairing_stats(lengths, n_rounds: int, intervals=L_INTERVALS) -> PairingStats:
    lengths = np.asarray(lengths)
    hist = {f"[{lo},{hi})": int(np.count_nonzero((lengths >= lo) & (lengths < hi)))
            for lo, hi in intervals}
    return PairingStats(len(lengths), int(n_rounds), hist)


def pairing_rate(p: float, l_min: int, l_max: int) -> float:
    """Expected pairs per round for independent clicks of probability ``p``.

    The pairing is a renewal process: the wait for a front click is ``1/p`` and
    each failed rear restarts the search from itself, so the mean cycle length
    is ``1/p + 1/(p*q)`` with ``q = P(l_min <= gap <= l_max)``.
    """
    if not 1 <= l_min <= l_max:
        raise ValueError("pairing lengths must satisfy 1 <= l_min <= l_max")
    if not 0 <= p <= 1:
        raise ValueError("click probability must lie in [0, 1]")
    if p == 0:
        return 0.0
    if p == 1:
        if l_min > 1:
            raise ZeroDivisionError("no gap can reach l_min when every round clicks")
        return 0.5
    lq = math.log1p(-p)
    q = math.exp((l_min - 1) * lq) - math.exp(l_max * lq)
    if q <= 0:
        return 0.0
    return 1.0 / (1.0 / (p * q) + 1.0 / p)


def expected_pairs_heuristic(p: float, l_max: int) -> float:
    """Mean number of clicks inside one maximal pairing window."""
    return p * l_max
