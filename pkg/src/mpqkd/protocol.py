"""Protocol-level types, constants and shared math for mode-pairing MDI QKD.

Slots are indexed globally over the whole session (reference, recovery and
QKD slots alike), so ``t = index * tau`` is the emission time of a slot and
index differences inside one QKD region equal the pairing length.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class IntensityLabel(IntEnum):
    VACUUM = 0
    DECOY = 1
    SIGNAL = 2
    STRONG = 3


class Region(IntEnum):
    REFERENCE = 0
    RECOVERY = 1
    QKD = 2


class Outcome(IntEnum):
    L = 0
    R = 1


# Slot counts per 100 us cycle at 625 MHz (160.97 M / 19.20 M / 444.83 M per second).
PAPER_FRAME = (16097, 1920, 44483)


@dataclass(frozen=True)
class FrameLayout:
    n_strong: int
    n_recovery: int
    n_qkd: int

    @property
    def cycle(self) -> int:
        return self.n_strong + self.n_recovery + self.n_qkd

    def problems(self) -> list[str]:
        out = []
        if min(self.n_strong, self.n_recovery, self.n_qkd) < 0:
            out.append("frame slot counts must be non-negative")
        if self.n_qkd < 1:
            out.append("frame must contain at least one QKD slot")
        return out

    def region_of(self, index):
        """Region code of global slot ``index`` (scalar or array)."""
        pos = np.asarray(index) % self.cycle
        return np.where(pos < self.n_strong, Region.REFERENCE,
                        np.where(pos < self.n_strong + self.n_recovery,
                                 Region.RECOVERY, Region.QKD)).astype(np.int8)


@dataclass(frozen=True)
class ProtocolParams:
    """All protocol constants.

    ``mu``/``nu`` are the signal and decoy mean photon numbers, ``p_mu``/``p_nu``
    their sending probabilities in QKD slots (vacuum takes the rest).
    ``mu_strong`` is the mean photon number of unmodulated reference pulses.
    ``n_rounds`` is the total number of QKD rounds N; it may be left unset
    for simulations, where it follows from the number of cycles.
    """

    mu: float = 0.309
    nu: float = 0.032
    p_mu: float = 0.22
    p_nu: float = 0.18
    D: int = 16
    l_min: int = 63
    l_max: int = 500
    epsilon: float = 1e-10
    f: float = 1.1
    tau: float = 1.6e-9
    frame: FrameLayout = field(default_factory=lambda: FrameLayout(*PAPER_FRAME))
    mu_strong: float = 0.12
    n_rounds: float | None = None

    @property
    def p_vacuum(self) -> float:
        return 1.0 - self.p_mu - self.p_nu

    def intensity(self, label: IntensityLabel) -> float:
        return (0.0, self.nu, self.mu, self.mu_strong)[int(label)]

    def intensity_table(self) -> np.ndarray:
        return np.array([0.0, self.nu, self.mu, self.mu_strong])

    def problems(self) -> list[str]:
        out = []
        if not 0 < self.nu < self.mu < 1:
            out.append(f"intensities must satisfy 0 < nu < mu < 1 (nu={self.nu}, mu={self.mu})")
        for name in ("p_mu", "p_nu"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                out.append(f"{name} must lie in [0, 1] (got {v})")
        if self.p_mu + self.p_nu > 1:
            out.append("p_mu + p_nu must not exceed 1")
        if self.D < 2 or self.D % 2:
            out.append(f"phase-grid size D must be even and >= 2 (got {self.D})")
        if not 1 <= self.l_min <= self.l_max:
            out.append(f"pairing lengths must satisfy 1 <= l_min <= l_max (got {self.l_min}, {self.l_max})")
        if not 0 < self.epsilon < 1:
            out.append("epsilon must lie in (0, 1)")
        if self.f < 1:
            out.append("error-correction efficiency f must be >= 1")
        if self.tau <= 0:
            out.append("tau must be positive")
        if self.mu_strong <= 0:
            out.append("mu_strong must be positive")
        if self.n_rounds is not None and self.n_rounds <= 0:
            out.append("n_rounds must be positive")
        out.extend(self.frame.problems())
        return out

    def validate(self) -> "ProtocolParams":
        errs = self.problems()
        if errs:
            raise ValueError("; ".join(errs))
        return self


@dataclass(frozen=True)
class RoundSpec:
    index: int
    region: Region
    intensity_a: IntensityLabel
    intensity_b: IntensityLabel
    phase_a: int
    phase_b: int


@dataclass(frozen=True)
class ClickRecord:
    index: int
    t: float
    outcome: Outcome | None
    valid: bool


def binary_entropy(x):
    """Binary entropy in bits, with ``0 log 0 = 0``. Accepts scalars or arrays."""
    arr = np.asarray(x, dtype=float)
    if np.any((arr < 0) | (arr > 1)) or np.any(np.isnan(arr)):
        raise ValueError("binary entropy is defined on [0, 1]")
    inner = (arr > 0) & (arr < 1)
    safe = np.where(inner, arr, 0.5)
    h = -safe * np.log2(safe) - (1 - safe) * np.log2(1 - safe)
    h = np.where(inner, h, 0.0)
    return float(h) if h.ndim == 0 else h


def build_schedule(params: ProtocolParams | FrameLayout, n_cycles: int) -> np.ndarray:
    """Region code for every slot of ``n_cycles`` cycles (reference, recovery, QKD)."""
    frame = params.frame if isinstance(params, ProtocolParams) else params
    errs = frame.problems()
    if errs:
        raise ValueError("; ".join(errs))
    if n_cycles < 0:
        raise ValueError("n_cycles must be non-negative")
    one = np.concatenate([
        np.full(frame.n_strong, Region.REFERENCE, dtype=np.int8),
        np.full(frame.n_recovery, Region.RECOVERY, dtype=np.int8),
        np.full(frame.n_qkd, Region.QKD, dtype=np.int8),
    ])
    return np.tile(one, n_cycles)


def qkd_rounds(params: ProtocolParams, n_cycles: int) -> int:
    return params.frame.n_qkd * n_cycles
