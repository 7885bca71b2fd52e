"""Run configuration, count-table files and report serialisation.

Configs are JSON objects with the sections below; unknown keys are rejected
at every level.  Units: photon numbers are dimensionless, ``tau`` is in
seconds, ``delta_omega0`` and search bounds in rad/s, ``freq_walk_rate`` in
(rad/s)^2/s, ``fiber_phase_rate`` in rad^2/s and ``linewidth`` in Hz.

    {
      "mode": "simulate",            # or analyze, direct-keyrate, pairing-rate,
                                     #    phase-estimate, sweep
      "seed": 1, "n_cycles": 200,
      "protocol": {...},             # ProtocolParams fields, frame as [n_strong, n_recovery, n_qkd]
      "channel": {...},              # ChannelParams fields
      "analysis": {...},             # compensation, group_size, window, search, epsilon, reference_proxy
      "direct": {"M11": .., "e11": .., "M_mumu": .., "E_mumu": .., "N": ..},
      "pairing_rate": {"p_click": [..], "l_max": [..]},
      "sweep": {"distances_km": [..], "n_rounds": .., "phase_noise": ..},
      "outputs": {"report": path, "curve": path, "counts": path}
    }
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .channel import ChannelParams
from .decoy import CountTable
from .protocol import FrameLayout, ProtocolParams
from .sifting import CLASSES

MODES = ("simulate", "analyze", "direct-keyrate", "pairing-rate", "phase-estimate", "sweep")


class ConfigError(ValueError):
    """Invalid configuration or input file."""


@dataclass(frozen=True)
class AnalysisOptions:
    compensation: str = "mle"
    group_size: int = 500
    window: int = 200
    search: tuple[float, float] | None = None
    epsilon: float | None = None
    reference_proxy: bool = False


@dataclass(frozen=True)
class DirectInputs:
    M11: float
    e11: float
    M_mumu: float
    E_mumu: float
    N: float


@dataclass(frozen=True)
class PairingRateInputs:
    p_click: tuple[float, ...]
    l_max: tuple[int, ...]


@dataclass(frozen=True)
class SweepOptions:
    distances_km: tuple[float, ...] = tuple(range(0, 501, 25))
    n_rounds: float = 1e12
    phase_noise: float = 0.0


@dataclass(frozen=True)
class Outputs:
    report: str | None = None
    curve: str | None = None
    counts: str | None = None


@dataclass(frozen=True)
class RunConfig:
    mode: str = "simulate"
    seed: int = 0
    n_cycles: int = 100
    protocol: ProtocolParams = field(default_factory=ProtocolParams)
    channel: ChannelParams = field(default_factory=ChannelParams)
    analysis: AnalysisOptions = field(default_factory=AnalysisOptions)
    direct: DirectInputs | None = None
    pairing_rate: PairingRateInputs | None = None
    sweep: SweepOptions = field(default_factory=SweepOptions)
    outputs: Outputs = field(default_factory=Outputs)

    def problems(self) -> list[str]:
        out = []
        if self.mode not in MODES:
            out.append(f"mode must be one of {', '.join(MODES)}")
        if self.n_cycles < 1:
            out.append("n_cycles must be >= 1")
        if self.seed < 0:
            out.append("seed must be non-negative")
        out += [f"protocol: {m}" for m in self.protocol.problems()]
        out += [f"channel: {m}" for m in self.channel.problems()]
        a = self.analysis
        if a.compensation not in ("mle", "truth", "none"):
            out.append("analysis: compensation must be mle, truth or none")
        if a.group_size < 2 or a.window < 1:
            out.append("analysis: group_size must be >= 2 and window >= 1")
        if a.search is not None:
            lo, hi = a.search
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                out.append("analysis: search must be a finite interval with lo < hi")
            elif hi - lo >= 2 * math.pi / self.protocol.tau:
                out.append("analysis: search interval must be narrower than the alias period 2*pi/tau")
        if a.epsilon is not None and not 0 < a.epsilon < 1:
            out.append("analysis: epsilon must lie in (0, 1)")
        if self.direct is not None:
            d = self.direct
            if not (0 <= d.e11 <= 1 and 0 <= d.E_mumu <= 1):
                out.append("direct: error rates must lie in [0, 1]")
            if d.M11 < 0 or d.M_mumu < 0 or d.N <= 0:
                out.append("direct: counts must be non-negative and N positive")
        elif self.mode == "direct-keyrate":
            out.append("direct-keyrate mode needs a 'direct' section")
        if self.pairing_rate is not None:
            pr = self.pairing_rate
            if len(pr.l_max) not in (1, len(pr.p_click)):
                out.append("pairing_rate: l_max must have one entry or one per p_click")
            if any(not 0 <= p < 1 for p in pr.p_click):
                out.append("pairing_rate: p_click values must lie in [0, 1)")
            if any(l < self.protocol.l_min for l in pr.l_max):
                out.append("pairing_rate: l_max values must be >= l_min")
        if self.sweep.n_rounds <= 0 or self.sweep.phase_noise < 0:
            out.append("sweep: n_rounds must be positive and phase_noise non-negative")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["protocol"]["frame"] = [self.protocol.frame.n_strong, self.protocol.frame.n_recovery,
                                  self.protocol.frame.n_qkd]
        return _jsonable(d)


def _build(cls, data, section: str, errs: list[str], convert=None):
    if data is None:
        return None
    if not isinstance(data, dict):
        errs.append(f"{section}: expected an object")
        return None
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        errs.append(f"{section}: unknown keys {', '.join(unknown)}")
    kw = {k: v for k, v in data.items() if k in names}
    if convert:
        kw = convert(kw, errs)
    try:
        return cls(**kw)
    except TypeError as exc:
        errs.append(f"{section}: {exc}")
        return None


def _protocol_kw(kw, errs):
    if "frame" in kw:
        fr = kw["frame"]
        if isinstance(fr, dict):
            kw["frame"] = FrameLayout(**fr)
        elif isinstance(fr, (list, tuple)) and len(fr) == 3:
            kw["frame"] = FrameLayout(*(int(x) for x in fr))
        else:
            errs.append("protocol: frame must be [n_strong, n_recovery, n_qkd]")
            del kw["frame"]
    return kw


def _tuple_kw(*names):
    def conv(kw, errs):
        for n in names:
            if n in kw and kw[n] is not None:
                v = kw[n]
                kw[n] = tuple(v) if isinstance(v, (list, tuple)) else (v,)
        return kw
    return conv


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    errs: list[str] = []
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        errs.append(f"unknown keys {', '.join(unknown)}")
    kw = {k: data[k] for k in ("mode", "seed", "n_cycles") if k in data}
    sections = {
        "protocol": (ProtocolParams, _protocol_kw),
        "channel": (ChannelParams, None),
        "analysis": (AnalysisOptions, _tuple_kw("search")),
        "direct": (DirectInputs, None),
        "pairing_rate": (PairingRateInputs, _tuple_kw("p_click", "l_max")),
        "sweep": (SweepOptions, _tuple_kw("distances_km")),
        "outputs": (Outputs, None),
    }
    for name, (cls, conv) in sections.items():
        if name in data:
            obj = _build(cls, data[name], name, errs, conv)
            if obj is not None:
                kw[name] = obj
    try:
        cfg = RunConfig(**kw)
        errs += cfg.problems()
    except TypeError as exc:
        errs.append(str(exc))
    if errs:
        raise ConfigError("; ".join(errs))
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    return config_from_dict(data)


def _number(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return float(text)


def parse_count_table(text: str, n_rounds: float | None = None) -> CountTable:
    """Parse ``class,sent,total,error`` rows; ``# n_rounds=...`` lines carry N."""
    meta = {}
    body = []
    for line in text.splitlines():
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            key, sep, val = s[1:].partition("=")
            if sep:
                meta[key.strip()] = val.strip()
            continue
        body.append(line)
    if not body:
        raise ConfigError("count table is empty")
    reader = csv.reader(body)
    header = [h.strip() for h in next(reader)]
    if header != ["class", "sent", "total", "error"]:
        raise ConfigError("count table header must be class,sent,total,error")
    rows = {}
    for k, rec in enumerate(reader, start=2):
        if len(rec) != 4:
            raise ConfigError(f"count table row {k}: expected 4 fields")
        name = rec[0].strip()
        if name in rows:
            raise ConfigError(f"count table: duplicate class {name}")
        try:
            rows[name] = tuple(_number(x) for x in rec[1:])
        except ValueError:
            raise ConfigError(f"count table row {k}: non-numeric value") from None
    if n_rounds is None:
        if "n_rounds" not in meta:
            raise ConfigError("count table needs a '# n_rounds=...' line or an explicit N")
        n_rounds = _number(meta["n_rounds"])
    try:
        return CountTable(rows, n_rounds)
    except ValueError as exc:
        raise ConfigError(f"count table: {exc}") from None


def load_count_table(path, n_rounds: float | None = None) -> CountTable:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read count table: {exc}") from None
    return parse_count_table(text, n_rounds)


def format_count_table(table: CountTable) -> str:
    buf = io.StringIO()
    buf.write(f"# n_rounds={table.n_rounds!r}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "sent", "total", "error"])
    for c in CLASSES:
        w.writerow([c, *(repr(_plain(x)) for x in table.rows[c])])
    return buf.getvalue()


def write_count_table(table: CountTable, path) -> None:
    Path(path).write_text(format_count_table(table))


def _plain(x):
    if isinstance(x, np.generic):
        x = x.item()
    return x


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    obj = _plain(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def format_report(report: dict) -> str:
    """Stable JSON text: sorted keys, NaN and infinities as null."""
    return json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n"


def format_curve(rows: list[dict]) -> str:
    cols = ["distance_km", "eta", "R", "X_error", "n_pairs"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(float(r[c])) for c in cols])
    return buf.getvalue()
