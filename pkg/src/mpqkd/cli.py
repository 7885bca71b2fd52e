"""Command-line entry point.

    mpqkd VERB --config PATH [--counts PATH] [--seed N] [--out PATH] [--threads N]

VERB is one of the run modes or ``run`` (use the mode named in the config).
Exit status: 0 success, 1 invalid configuration or input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .channel import simulate_session
from .decoy import analyze_counts, direct_key_rate
from .io import (
    MODES,
    ConfigError,
    RunConfig,
    format_count_table,
    format_curve,
    format_report,
    load_config,
    load_count_table,
)
from .pairing import expected_pairs_heuristic, pairing_rate
from .phase import (
    assemble_groups,
    default_search,
    estimate_groups,
    fit_frequency_track,
    reference_error_proxy,
)
from .pipeline import analyze_session, sweep
from .protocol import Region


def _search(cfg: RunConfig):
    if cfg.analysis.search is not None:
        return cfg.analysis.search
    return default_search(cfg.channel.delta_omega0)


def _simulate(cfg: RunConfig, threads: int) -> dict:
    session = simulate_session(cfg.protocol, cfg.channel, cfg.n_cycles, cfg.seed, threads)
    a = cfg.analysis
    res = analyze_session(session, a.compensation, a.epsilon, _search(cfg), a.group_size,
                          a.window, threads, a.reference_proxy)
    return {
        "key_rate": res.report.as_dict(),
        "counts": {c: list(v) for c, v in res.counts.rows.items()},
        "n_rounds": res.counts.n_rounds,
        "pairing": {"n_pairs": res.pairing.n_pairs, "rate": res.pairing.rate,
                    "histogram": res.pairing.histogram},
        "x_error_matched": res.x_error,
        "x_error_all": res.x_error_all,
        "z_qber": res.z_qber,
        "phase": asdict(res.phase),
        "truth": res.truth,
        "reference_proxy": res.reference_proxy,
        "valid_click_probability": float(np.count_nonzero(
            session.clicks.valid & (session.clicks.region == Region.QKD)) / session.n_qkd_rounds),
    }, res.counts


def _phase_estimate(cfg: RunConfig, threads: int) -> dict:
    p = cfg.protocol
    session = simulate_session(p, cfg.channel, cfg.n_cycles, cfg.seed, threads)
    c = session.clicks
    ref = c.valid & (c.region == Region.REFERENCE)
    groups = assemble_groups(c.index[ref], c.outcome[ref], p.frame.cycle, p.tau, cfg.analysis.group_size)
    if len(groups) < 2:
        raise RuntimeError("too few reference clicks for frequency estimation")
    t, w, n_amb = estimate_groups(groups, p.tau, _search(cfg), threads)
    track = fit_frequency_track(t, w, cfg.analysis.window, domain=(0.0, session.duration))
    truth = session.truth.trajectory.delta_omega(t)
    span_err = np.abs(w - truth) * p.tau * 2000
    proxy = reference_error_proxy(c.index[ref], c.outcome[ref], p.frame.cycle, p.tau, p.D, track.integral)
    return {
        "n_groups": len(groups),
        "n_sign_ambiguous": n_amb,
        "estimates": {"t": t, "delta_omega": w, "true_delta_omega": truth},
        "group_error_rms": float(np.sqrt(np.mean((w - truth) ** 2))),
        "track_error_rms": float(np.sqrt(np.mean((track(t) - truth) ** 2))),
        "fraction_span_error_below_0.1rad": float(np.mean(span_err < 0.1)),
        "reference_proxy": proxy,
    }


def run(cfg: RunConfig, counts_path=None, threads: int = 1):
    """Execute ``cfg``; returns ``(report, curve_text, counts_text)``."""
    report = {"config": cfg.to_dict(), "seed": cfg.seed, "mode": cfg.mode}
    curve = counts_text = None
    mode = cfg.mode
    if mode == "simulate":
        body, table = _simulate(cfg, threads)
        report["result"] = body
        counts_text = format_count_table(table)
    elif mode == "analyze":
        if counts_path is None:
            raise ConfigError("analyze mode needs --counts")
        table = load_count_table(counts_path, cfg.protocol.n_rounds)
        report["counts_file"] = Path(counts_path).name
        report["result"] = {"key_rate": analyze_counts(table, cfg.protocol, cfg.analysis.epsilon).as_dict()}
    elif mode == "direct-keyrate":
        d = cfg.direct
        report["result"] = {"key_rate": direct_key_rate(d.M11, d.e11, d.M_mumu, d.E_mumu,
                                                        cfg.protocol.f, d.N).as_dict()}
    elif mode == "pairing-rate":
        pr = cfg.pairing_rate
        if pr is None:
            p_click, l_max = (0.0,), (cfg.protocol.l_max,)
        else:
            p_click = pr.p_click
            l_max = pr.l_max if len(pr.l_max) == len(p_click) else pr.l_max * len(p_click)
        report["result"] = {"points": [
            {"p_click": p, "l_min": cfg.protocol.l_min, "l_max": l,
             "r_p": pairing_rate(p, cfg.protocol.l_min, l),
             "p_click_times_l_max": expected_pairs_heuristic(p, l)}
            for p, l in zip(p_click, l_max)]}
    elif mode == "phase-estimate":
        report["result"] = _phase_estimate(cfg, threads)
    elif mode == "sweep":
        s = cfg.sweep
        rows = sweep(cfg.protocol, cfg.channel, s.distances_km, s.n_rounds, s.phase_noise,
                     cfg.analysis.epsilon)
        report["result"] = {"curve": rows}
        curve = format_curve(rows)
    else:  # pragma: no cover - rejected by validation
        raise ConfigError(f"unknown mode {mode}")
    return report, curve, counts_text


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpqkd", description="Mode-pairing MDI QKD simulator and analysis")
    ap.add_argument("verb", choices=("run", *MODES))
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--counts", help="count-table CSV (analyze mode)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out", help="report path (default: stdout)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads")
    return ap


def _write(path, text):
    Path(path).write_text(text)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.verb != "run":
            cfg = replace(cfg, mode=args.verb)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        errs = cfg.problems()
        if args.threads < 1:
            errs.append("--threads must be >= 1")
        if errs:
            raise ConfigError("; ".join(errs))
        report, curve, counts = run(cfg, args.counts, args.threads)
        text = format_report(report)
        out = args.out or cfg.outputs.report
        if out:
            _write(out, text)
        else:
            sys.stdout.write(text)
        if curve is not None:
            base = Path(out) if out else Path("sweep")
            _write(cfg.outputs.curve or base.with_suffix(".curve.csv"), curve)
        if counts is not None and cfg.outputs.counts:
            _write(cfg.outputs.counts, counts)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())


__all__ = ["main", "run"]
