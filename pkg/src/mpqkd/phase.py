"""Laser frequency-difference estimation from strong-pulse clicks.

Reference clicks are grouped (500 per group by default).  For each group the
angular-frequency difference is the maximiser of

    f(dw) = sum_{i<j} ln(1/2 + (-1)^(D_i - D_j) cos(dw * tau * (j - i)) / 4)

over click pairs that share a reference block.  Pairs across blocks are left
out: their slot gaps are all close to multiples of the frame length, which
puts strong side lobes on the likelihood.  The group estimates are then
smoothed by windowed least squares into a piecewise-linear track whose
integral gives the compensation phase of a QKD pair.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import next_fast_len, rfft

GOLDEN = (math.sqrt(5) - 1) / 2


def pairwise_outcome_probability(dtheta):
    """Probabilities that two strong-pulse clicks hit the same (P0) or different (P1) detectors."""
    c = np.cos(dtheta) / 4
    return 0.5 + c, 0.5 - c


@dataclass
class EstimationGroup:
    """Valid reference clicks used for one frequency estimate.

    ``block`` labels the reference block of each click; only clicks with equal
    labels are paired.  ``index`` is in slots and must be sorted.
    """

    index: np.ndarray
    outcome: np.ndarray
    block: np.ndarray | None = None
    target: int = 500
    _gaps: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.index = np.asarray(self.index, dtype=np.int64)
        self.outcome = np.asarray(self.outcome, dtype=np.int8)
        if self.block is None:
            self.block = np.zeros(len(self.index), dtype=np.int64)
        if len(self.index) != len(self.outcome) or len(self.index) != len(self.block):
            raise ValueError("group columns must have equal length")

    def __len__(self) -> int:
        return len(self.index)

    def t_start(self, tau: float) -> float:
        return float(self.index[0] * tau)

    def t_end(self, tau: float) -> float:
        return float(self.index[-1] * tau)

    def t_mid(self, tau: float) -> float:
        return 0.5 * (self.t_start(tau) + self.t_end(tau))

    def gap_weights(self):
        """Pair counts by slot gap: ``(gaps, n_same, n_diff)`` over same-block pairs."""
        if self._gaps is None:
            g_all, s_all = [], []
            for b in np.unique(self.block):
                sel = self.block == b
                k, o = self.index[sel], self.outcome[sel]
                if len(k) < 2:
                    continue
                i, j = np.triu_indices(len(k), 1)
                g_all.append(k[j] - k[i])
                s_all.append(o[i] == o[j])
            if g_all:
                g = np.concatenate(g_all)
                s = np.concatenate(s_all)
                n = int(g.max()) + 1
                same = np.bincount(g[s], minlength=n)
                diff = np.bincount(g[~s], minlength=n)
                nz = np.flatnonzero(same + diff)
                self._gaps = (nz, same[nz].astype(float), diff[nz].astype(float))
            else:
                empty = np.zeros(0)
                self._gaps = (empty.astype(np.int64), empty, empty)
        return self._gaps


def log_likelihood(group: EstimationGroup, domega, tau: float):
    """f(dw) for scalar or array ``domega``."""
    gaps, n_same, n_diff = group.gap_weights()
    w = np.atleast_1d(np.asarray(domega, dtype=float))
    c = np.cos(np.outer(w * tau, gaps)) / 4
    out = np.log(0.5 + c) @ n_same + np.log(0.5 - c) @ n_diff
    return float(out[0]) if np.ndim(domega) == 0 else out


def check_search_interval(search, tau: float):
    lo, hi = (float(x) for x in search)
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        raise ValueError("search interval must be finite with lo < hi")
    if hi - lo >= 2 * math.pi / tau:
        raise ValueError("search interval must be narrower than the alias period 2*pi/tau")
    return lo, hi


def default_search(center: float, half_width: float = 2 * math.pi * 150e6):
    return center - half_width, center + half_width


def _golden_max(f, a: float, b: float, tol: float):
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


@dataclass(frozen=True)
class MLEResult:
    omega: float
    value: float
    sign_ambiguous: bool


def mle_fit(group: EstimationGroup, tau: float, search, coarse_step: float | None = None,
            n_candidates: int = 4) -> MLEResult:
    """Maximise the pair likelihood over ``search``.

    The coarse scan uses the linearised likelihood, which is a cosine series in
    the slot gap and is evaluated for all grid points with one FFT.  The best
    local maxima are then refined on the exact likelihood by golden section.
    """
    lo, hi = check_search_interval(search, tau)
    if len(group) == 0:
        raise ValueError("empty estimation group")
    gaps, n_same, n_diff = group.gap_weights()
    center = 0.5 * (lo + hi)
    ambiguous = lo < 0 < hi
    if len(gaps) == 0:
        return MLEResult(center, 0.0, ambiguous)

    max_gap = int(gaps[-1])
    n_fft = next_fast_len(8 * max_gap)
    if coarse_step is not None:
        n_fft = max(n_fft, next_fast_len(math.ceil(2 * math.pi / (coarse_step * tau))))
    step = 2 * math.pi / (n_fft * tau)
    series = np.zeros(n_fft)
    series[gaps] = n_same - n_diff
    spec = rfft(series).real
    spec = np.concatenate([spec, spec[1:(n_fft + 1) // 2][::-1]])  # full circle, even series

    m = np.arange(math.ceil(lo / step), math.floor(hi / step) + 1)
    vals = spec[m % n_fft]
    peak = np.ones(len(m), dtype=bool)
    peak[1:] &= vals[1:] >= vals[:-1]
    peak[:-1] &= vals[:-1] >= vals[1:]
    cand = m[peak]
    cand = cand[np.argsort(-vals[peak], kind="stable")][:n_candidates]

    f = lambda w: log_likelihood(group, w, tau)
    tol = 1e-6 * (hi - lo)
    best = []
    for k in cand:
        a = max(lo, (k - 2) * step)
        b = min(hi, (k + 2) * step)
        best.append(_golden_max(f, a, b, tol))
    for edge in (lo, hi):
        best.append((edge, f(edge)))
    top = max(v for _, v in best)
    # f is even, so near-ties appear in mirrored pairs; prefer the one near the centre
    ties = [w for w, v in best if v >= top - 1e-9 * max(1.0, abs(top))]
    w = min(ties, key=lambda x: abs(x - center))
    if ambiguous:
        ambiguous = lo <= -w <= hi
    return MLEResult(float(w), float(f(w)), bool(ambiguous))


def mle_delta_omega(group: EstimationGroup, tau: float, search, coarse_step: float | None = None) -> float:
    return mle_fit(group, tau, search, coarse_step).omega


def assemble_groups(index, outcome, cycle: int, tau: float, size: int = 500,
                    max_span: float = 1e-3, min_size: int | None = None) -> list[EstimationGroup]:
    """Split valid reference clicks (sorted by index) into consecutive groups.

    A group closes at ``size`` clicks or when the next click would stretch it
    beyond ``max_span`` seconds.  Groups smaller than ``min_size`` are dropped.
    """
    index = np.asarray(index, dtype=np.int64)
    outcome = np.asarray(outcome)
    min_size = size // 2 if min_size is None else min_size
    span_slots = max_span / tau
    groups = []
    start = 0
    n = len(index)
    while start < n:
        stop = min(start + size, n)
        limit = np.searchsorted(index, index[start] + span_slots, side="right")
        stop = min(stop, int(limit))
        if stop - start >= max(min_size, 2):
            sl = slice(start, stop)
            groups.append(EstimationGroup(index[sl], outcome[sl], index[sl] // cycle, size))
        start = stop
    return groups


def estimate_groups(groups, tau: float, search, threads: int = 1):
    """Run the MLE on every group; returns ``(t_mid, omega, n_ambiguous)``."""
    work = lambda g: mle_fit(g, tau, search)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            res = list(pool.map(work, groups))
    else:
        res = [work(g) for g in groups]
    t = np.array([g.t_mid(tau) for g in groups])
    w = np.array([r.omega for r in res])
    return t, w, sum(r.sign_ambiguous for r in res)


@dataclass(frozen=True)
class FrequencyTrack:
    """Piecewise-linear dw(t): on window k, ``a[k] + b[k] * (t - tc[k])``.

    ``edges`` holds the window boundaries; the first and last edge bound the
    domain.
    """

    edges: np.ndarray
    tc: np.ndarray
    a: np.ndarray
    b: np.ndarray
    residuals: tuple = field(default=(), repr=False)

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.edges[0]), float(self.edges[-1])

    def _segment(self, t):
        t = np.asarray(t, dtype=float)
        lo, hi = self.domain
        if np.any((t < lo) | (t > hi)):
            raise ValueError(f"time outside track domain [{lo}, {hi}]")
        k = np.searchsorted(self.edges, t, side="right") - 1
        return t, np.clip(k, 0, len(self.a) - 1)

    def __call__(self, t):
        t, k = self._segment(t)
        out = self.a[k] + self.b[k] * (t - self.tc[k])
        return float(out) if out.ndim == 0 else out

    def _piece(self, k, t1, t2):
        # a*dt + b*((t2-tc)^2 - (t1-tc)^2)/2 written without cancellation
        dt = t2 - t1
        return dt * (self.a[k] + 0.5 * self.b[k] * ((t1 - self.tc[k]) + (t2 - self.tc[k])))

    def integral(self, t_i, t_j):
        """Exact integral of the track over ``[t_i, t_j]`` (arrays broadcast)."""
        t_i, k_i = self._segment(t_i)
        t_j, k_j = self._segment(t_j)
        t_i, t_j, k_i, k_j = np.broadcast_arrays(t_i, t_j, k_i, k_j)
        if np.any(t_j < t_i):
            raise ValueError("compensation interval must satisfy t_i <= t_j")
        out = self._piece(k_i, t_i, t_j)
        cross = k_i != k_j
        if np.any(cross):
            inner = np.array([self._piece(k, self.edges[k], self.edges[k + 1])
                              for k in range(len(self.a))])
            cum = np.concatenate([[0.0], np.cumsum(inner)])
            ki, kj = k_i[cross], k_j[cross]
            ti, tj = t_i[cross], t_j[cross]
            out = np.array(out, dtype=float, copy=True)
            out[cross] = (self._piece(ki, ti, self.edges[ki + 1]) + (cum[kj] - cum[ki + 1])
                          + self._piece(kj, self.edges[kj], tj))
        return float(out) if np.ndim(out) == 0 else out


def fit_frequency_track(t, omega, window: int = 200, domain=None) -> FrequencyTrack:
    """Least-squares line per disjoint window of ``window`` consecutive estimates.

    Window boundaries sit halfway between neighbouring windows; ``domain``
    (default: the span of the estimates) extends the outer windows.
    """
    t = np.asarray(t, dtype=float)
    w = np.asarray(omega, dtype=float)
    if len(t) != len(w):
        raise ValueError("t and omega must have equal length")
    if len(t) < 2:
        raise ValueError("at least 2 estimates are needed")
    if window < 1:
        raise ValueError("window must be >= 1")
    order = np.argsort(t, kind="stable")
    t, w = t[order], w[order]
    chunks = [slice(s, min(s + window, len(t))) for s in range(0, len(t), window)]
    tc, a, b, res = [], [], [], []
    for sl in chunks:
        ts, ws = t[sl], w[sl]
        c = ts.mean()
        dt = ts - c
        sxx = dt @ dt
        slope = (dt @ (ws - ws.mean())) / sxx if len(ts) >= 2 and sxx > 0 else 0.0
        tc.append(c)
        a.append(ws.mean())
        b.append(slope)
        res.append(ws - ws.mean() - slope * dt)
    inner = [0.5 * (t[sl.stop - 1] + t[sl.stop]) for sl in chunks[:-1]]
    lo, hi = (t[0], t[-1]) if domain is None else domain
    if lo > t[0] or hi < t[-1]:
        raise ValueError("domain must cover all estimate times")
    edges = np.array([lo, *inner, hi], dtype=float)
    return FrequencyTrack(edges, np.array(tc), np.array(a), np.array(b), tuple(res))


def compensation_phase(t_i, t_j, track: FrequencyTrack):
    """Phase drift accumulated between ``t_i`` and ``t_j`` according to the track."""
    return track.integral(t_i, t_j)


def fold_pi(x):
    """``(r, flip)`` with ``x = r + pi*n``, ``r`` in (-pi/2, pi/2] and ``flip = n mod 2``."""
    x = np.asarray(x, dtype=float)
    n = np.ceil(x / math.pi - 0.5)
    r = x - n * math.pi
    return r, (n.astype(np.int64) % 2).astype(np.int8)


def within_block_pairs(index, cycle: int, l_min: int, l_max: int):
    """All click pairs ``(i, j)``, i < j, in the same block with l_min <= l <= l_max."""
    index = np.asarray(index, dtype=np.int64)
    block = index // cycle
    lo = np.searchsorted(index, index + l_min, side="left")
    hi = np.searchsorted(index, index + l_max, side="right")
    counts = hi - lo
    fi = np.repeat(np.arange(len(index)), counts)
    start = np.repeat(lo, counts)
    ri = start + (np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts))
    same = block[fi] == block[ri]
    return fi[same], ri[same]


def reference_error_proxy(index, outcome, cycle: int, tau: float, D: int, dtheta,
                          intervals=((63, 500), (500, 1000), (1000, 1500), (1500, 2000))):
    """Error rate of strong-pulse pairs after compensation, per pairing-length interval.

    ``dtheta`` is either a callable ``dtheta(t_i, t_j)`` giving the
    compensation phase or an array of per-click phases.  Clicks may appear in
    many pairs.  A pair is kept when the folded phase is within pi/D of 0 (mod
    pi) and counts as an error when the detector parity disagrees with the
    parity of the fold.  Returns ``{label: (kept, errors)}``.
    """
    index = np.asarray(index, dtype=np.int64)
    outcome = np.asarray(outcome)
    l_lo = min(lo for lo, _ in intervals)
    l_hi = max(hi for _, hi in intervals)
    i, j = within_block_pairs(index, cycle, l_lo, l_hi - 1)
    if callable(dtheta):
        comp = dtheta(index[i] * tau, index[j] * tau)
    else:
        phase = np.asarray(dtheta, dtype=float)
        comp = phase[j] - phase[i]
    r, flip = fold_pi(comp)
    keep = np.abs(r) <= math.pi / D
    d = (outcome[i] != outcome[j]).astype(np.int8)
    err = keep & (d != flip)
    l = index[j] - index[i]
    out = {}
    for lo, hi in intervals:
        sel = (l >= lo) & (l < hi)
        out[f"[{lo},{hi})"] = (int(np.count_nonzero(keep & sel)), int(np.count_nonzero(err & sel)))
    return out
