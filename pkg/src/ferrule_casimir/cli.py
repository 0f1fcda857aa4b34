"""Command-line front end: ``ferrule-casimir theory|simulate|analyze|compare``.

Exit codes: 0 ok, 2 configuration error, 3 numerical or calibration
failure, 4 contact (snap-in) during a scan.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io, lifshitz
from .config import ConfigError, ExperimentConfig, config_to_json, load_config, reference_config
from .instrument import IntegrationError, NoQuadratureError, prepare_run, run_scan
from .lifshitz import LifshitzConvergenceError, TheoryCurve
from .pipeline import (CalibrationError, FringeUnwrapError, ScanRecord, analyze_scan,
                       fit_v0_log, residual_stats, summarize, theory_for)

log = logging.getLogger("ferrule_casimir")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CONTACT = 0, 2, 3, 4


class NumericalFailure(RuntimeError):
    pass


class ContactError(RuntimeError):
    pass


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else reference_config()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "scans", None) is not None:
        if args.scans < 1:
            raise ConfigError("protocol.n_scans", "--scans must be >= 1")
        cfg = cfg.with_scans(args.scans)
    if getattr(args, "noiseless", False):
        cfg = cfg.noiseless()
    return cfg


def _out_dir(args, cfg):
    out = Path(args.out) if args.out else Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- theory ------------------------------------------------------------------


def cmd_theory(config: ExperimentConfig, d_min, d_max, n, out_dir, spacing="log") -> Path:
    """Tabulate the configured Casimir gradient; returns the CSV path."""
    cas = config.forces.casimir
    if cas is None:
        raise ConfigError("forces.casimir", "no Casimir model configured")
    if not (0 < d_min < d_max):
        raise ConfigError("d_min", "need 0 < d_min < d_max")
    if int(n) < 2:
        raise ConfigError("n", "need at least 2 points")
    if isinstance(cas, TheoryCurve):
        d = np.geomspace(d_min, d_max, int(n)) if spacing == "log" else np.linspace(d_min, d_max, int(n))
        d[0], d[-1] = d_min, d_max
        curve = TheoryCurve(d, cas(d))
    else:
        curve = lifshitz.theory_curve(cas, d_min, d_max, int(n), spacing=spacing)
    path = Path(out_dir) / "theory.csv"
    io.write_theory(path, curve)
    return path


# --- simulate ----------------------------------------------------------------


def cmd_simulate(config: ExperimentConfig, out_dir) -> list:
    """Simulate ``n_scans`` scans; returns the stream paths.

    Raises :class:`ContactError` after writing the partial stream and a
    ``_CONTACT`` marker when a scan snaps in.
    """
    out_dir = Path(out_dir)
    io.write_json(out_dir / "config_used.json", config_to_json(config))
    prepared = prepare_run(config)
    written = []
    for i in range(config.protocol.n_scans):
        log.info("scan %d/%d", i + 1, config.protocol.n_scans)
        stream = run_scan(config, scan_index=i, prepared=prepared)
        paths = io.scan_paths(out_dir, i)
        io.write_stream(paths["stream"], stream)
        io.write_servo(paths, stream.servo)
        meta = {
            "scan_index": i,
            "seed": config.forces.noise.seed,
            "wavelength_m": prepared.ferrule.wavelength,
            "contact_phase_rad": prepared.contact_phase,
            "reference_phase_rad": prepared.reference_phase,
            "sampling_rate_Hz": config.protocol.sampling_rate,
            "n_samples": len(stream),
            "contact_time_s": stream.meta.get("contact_time"),
            "truth_channels": stream.d_true is not None,
        }
        io.write_json(paths["meta"], meta)
        written.append(paths["stream"])
        if stream.contact:
            io.write_text(paths["contact"], f"contact_time_s={stream.meta['contact_time']!r}\n")
            raise ContactError(f"scan {i}: contact at t = {stream.meta['contact_time']:.4f} s")
    return written


# --- analyze -----------------------------------------------------------------


def _stream_files(inputs):
    files = []
    for p in map(Path, inputs):
        if p.is_dir():
            files.extend(sorted(p.glob("scan_*_stream.csv")))
        else:
            files.append(p)
    if not files:
        raise ConfigError("streams", "no stream files given")
    return files


def _siblings(stream_path):
    stem = Path(stream_path).name
    if not stem.endswith("_stream.csv"):
        raise ConfigError("streams", f"{stream_path}: expected a scan_NNN_stream.csv file")
    base = Path(stream_path).with_name(stem[: -len("_stream.csv")])
    return {k: base.with_name(base.name + suffix) for k, suffix in
            (("vdc", "_vdc.csv"), ("vac", "_vac.csv"), ("meta", "_meta.json"),
             ("contact", "_CONTACT"))}


def _pooled_theory(config, d):
    d = d[np.isfinite(d) & (d > 0)]
    if d.size == 0:
        return None
    lo, hi = config.analysis.residual_window
    return theory_for(config, min(d.min(), lo), max(d.max(), hi))


def cmd_analyze(config: ExperimentConfig, streams, out_dir, plots=True) -> dict:
    """Analyze stream files; writes per-scan records, pooled records and a summary."""
    out_dir = Path(out_dir)
    analyses, metas = [], []
    for path in _stream_files(streams):
        sib = _siblings(path)
        if sib["contact"].exists():
            log.warning("%s: scan ended in contact, skipped", path)
            continue
        try:
            meta = io.read_json(sib["meta"])
        except FileNotFoundError:
            raise ConfigError("streams", f"{sib['meta']}: missing scan metadata") from None
        stream = io.read_stream(path)
        servo = io.read_servo(sib)
        log.info("analyzing %s", path.name)
        try:
            an = analyze_scan(stream, config, meta["reference_phase_rad"], meta["wavelength_m"],
                              servo=servo)
        except (CalibrationError, FringeUnwrapError) as exc:
            raise NumericalFailure(f"{path.name}: {exc}") from None
        idx = int(meta.get("scan_index", len(analyses)))
        io.write_scan_record(io.scan_paths(out_dir, idx)["record"], an.record)
        ex = an.record.extra
        io.write_table(io.scan_paths(out_dir, idx)["lockin"], io.LOCKIN_HEADER,
                       [ex["t"], an.record.X_w2, an.record.Y_w2])
        analyses.append(an)
        metas.append(meta)
    if not analyses:
        raise ContactError("every scan ended in contact")
    pooled = ScanRecord.concatenate(a.record for a in analyses)
    theory = _pooled_theory(config, pooled.d)
    summary = summarize(analyses, config, theory)
    summary["scans"] = metas
    io.write_scan_record(out_dir / "records.csv", pooled)
    if theory is not None:
        io.write_theory(out_dir / "theory.csv", theory)
    io.write_json(out_dir / "summary.json", summary)
    if plots:
        from . import plotting

        try:
            fit = fit_v0_log(pooled.d, pooled.V0)
        except ValueError:
            fit = None
        plotting.plot_v0(out_dir / "v0_vs_d.png", pooled.d, pooled.V0, fit)
        plotting.plot_gradient(out_dir / "gradient_vs_d.png", pooled.d, pooled.grad_casimir,
                               pooled.grad_electrostatic, theory)
    return summary


# --- compare -----------------------------------------------------------------


def cmd_compare(records, theory_csv, out_dir, d_lo, d_hi, plots=True) -> dict:
    """Residuals of pooled scan records against a theory CSV."""
    out_dir = Path(out_dir)
    recs = []
    for p in records:
        p = Path(p)
        if p.is_dir():
            recs.extend(io.read_scan_record(q) for q in sorted(p.glob("scan_*_record.csv")))
        else:
            recs.append(io.read_scan_record(p))
    if not recs:
        raise ConfigError("records", "no scan records given")
    pooled = ScanRecord.concatenate(recs)
    theory = lifshitz.read_theory_csv(theory_csv)
    lo = max(d_lo, theory.separations[0])
    hi = min(d_hi, theory.separations[-1])
    if not lo < hi:
        raise NumericalFailure("theory curve does not overlap the residual window")
    try:
        st = residual_stats(pooled.d, pooled.grad_casimir, theory, lo, hi)
    except ValueError as exc:
        raise NumericalFailure(str(exc)) from None
    report = {"window_m": [lo, hi], "n": st.n, "sigma_N_per_m2": st.sigma,
              "mean_N_per_m2": st.mean, "standard_error_N_per_m2": st.standard_error,
              "histogram_bins": int(st.counts.size)}
    io.write_json(out_dir / "compare.json", report)
    io.write_histogram(out_dir / "residual_histogram.csv", st.counts, st.bin_edges)
    lines = [f"window_nm = {lo * 1e9:.6g} {hi * 1e9:.6g}",
             f"n = {st.n}",
             f"sigma_N_per_m2 = {st.sigma:.6g}",
             f"mean_N_per_m2 = {st.mean:.6g}",
             f"standard_error_N_per_m2 = {st.standard_error:.6g}"]
    io.write_text(out_dir / "compare.txt", "\n".join(lines) + "\n")
    if plots:
        from . import plotting

        plotting.plot_residual_histogram(out_dir / "residual_histogram.png", st.counts,
                                         st.bin_edges, st.sigma)
    return report


# --- entry point -------------------------------------------------------------


def _parser():
    p = argparse.ArgumentParser(prog="ferrule-casimir",
                                description="Digital twin of a ferrule-top Casimir experiment.")
    p.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment JSON (default: shipped reference)")
        sp.add_argument("--out", help="output directory (default: output.directory)")

    t = sub.add_parser("theory", help="tabulate the theory gradient")
    common(t)
    t.add_argument("d_min", type=float, help="smallest separation (m)")
    t.add_argument("d_max", type=float, help="largest separation (m)")
    t.add_argument("n", type=int, help="number of grid points")
    t.add_argument("--spacing", choices=("log", "linear"), default="log")

    s = sub.add_parser("simulate", help="simulate scans to stream files")
    common(s)
    s.add_argument("--seed", type=int)
    s.add_argument("--scans", type=int)
    s.add_argument("--noiseless", action="store_true")

    a = sub.add_parser("analyze", help="analyze stream files")
    common(a)
    a.add_argument("streams", nargs="+", help="stream CSVs or directories holding them")
    a.add_argument("--no-plots", action="store_true")

    c = sub.add_parser("compare", help="residuals of scan records against theory")
    common(c)
    c.add_argument("theory", help="theory CSV")
    c.add_argument("records", nargs="+", help="scan record CSVs or directories")
    c.add_argument("--d-min", type=float, help="window start (m)")
    c.add_argument("--d-max", type=float, help="window end (m)")
    c.add_argument("--no-plots", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        out = _out_dir(args, cfg)
        if args.command == "theory":
            path = cmd_theory(cfg, args.d_min, args.d_max, args.n, out, args.spacing)
            print(path)
        elif args.command == "simulate":
            for path in cmd_simulate(cfg, out):
                print(path)
        elif args.command == "analyze":
            summary = cmd_analyze(cfg, args.streams, out, plots=not args.no_plots)
            res = summary.get("residuals", {})
            if "sigma_N_per_m2" in res:
                print(f"sigma_N_per_m2 = {res['sigma_N_per_m2']:.6g}")
            print(out / "summary.json")
        elif args.command == "compare":
            lo, hi = cfg.analysis.residual_window
            lo = args.d_min if args.d_min is not None else lo
            hi = args.d_max if args.d_max is not None else hi
            rep = cmd_compare(args.records, args.theory, out, lo, hi, plots=not args.no_plots)
            print(f"sigma_N_per_m2 = {rep['sigma_N_per_m2']:.6g}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContactError as exc:
        print(f"contact: {exc}", file=sys.stderr)
        return EXIT_CONTACT
    except (NumericalFailure, CalibrationError, FringeUnwrapError, IntegrationError,
            LifshitzConvergenceError, NoQuadratureError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        # unreadable or inconsistent input data
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
