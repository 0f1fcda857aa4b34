"""File formats for streams, servo traces, scan records and summaries.

All writers go through a temporary file in the target directory followed by
``os.replace``, so a reader never sees a half-written file. Output is
deterministic: fixed float formats, sorted JSON keys, no timestamps.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .instrument import SampleStream, ServoTrace
from .pipeline import SCAN_RECORD_HEADER, ScanRecord

STREAM_HEADER = "t_s,pd_ferrule_V,pd_barefiber_V,V_applied_V"
STREAM_TRUTH_HEADER = STREAM_HEADER + ",d_true_m,x_true_m"
VDC_HEADER = "t_s,V_dc_V"
VAC_HEADER = "t_s,V_AC_V"
LOCKIN_HEADER = "t_s,X,Y"
HISTOGRAM_HEADER = "bin_lo_N_per_m2,bin_hi_N_per_m2,count"

STREAM_FMT = "%.12g"
TIME_FMT = "%.15g"
RECORD_FMT = "%.17g"


def _atomic_write(path, write):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            write(fh)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path, text):
    _atomic_write(path, lambda fh: fh.write(text))


def write_table(path, header, columns, fmt=RECORD_FMT):
    data = np.column_stack([np.asarray(c, dtype=float) for c in columns])

    def write(fh):
        fh.write(header + "\n")
        if data.size:
            np.savetxt(fh, data, fmt=fmt, delimiter=",")

    _atomic_write(path, write)


def read_table(path, header):
    path = Path(path)
    with open(path) as fh:
        first = fh.readline().strip()
        if first != header:
            raise ValueError(f"{path}: expected header {header!r}, got {first!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        data = np.zeros((0, header.count(",") + 1))
    return data


def _clean(obj):
    # NaN/inf are not JSON
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path, data):
    write_text(path, json.dumps(_clean(data), indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# --- per-scan files ----------------------------------------------------------


def scan_paths(directory, index):
    """Names of the files belonging to scan ``index`` in ``directory``."""
    base = Path(directory) / f"scan_{index:03d}"
    return {
        "stream": base.with_name(base.name + "_stream.csv"),
        "vdc": base.with_name(base.name + "_vdc.csv"),
        "vac": base.with_name(base.name + "_vac.csv"),
        "meta": base.with_name(base.name + "_meta.json"),
        "contact": base.with_name(base.name + "_CONTACT"),
        "record": base.with_name(base.name + "_record.csv"),
        "lockin": base.with_name(base.name + "_lockin_omega2.csv"),
    }


def write_stream(path, stream: SampleStream):
    cols = [stream.t, stream.pd_ferrule, stream.pd_barefiber, stream.v_applied]
    header = STREAM_HEADER
    if stream.d_true is not None and stream.x_true is not None:
        cols += [stream.d_true, stream.x_true]
        header = STREAM_TRUTH_HEADER
    # time needs more digits than the signals to stay uniform on read-back
    write_table(path, header, cols, fmt=[TIME_FMT] + [STREAM_FMT] * (len(cols) - 1))


def read_stream(path) -> SampleStream:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip()
    if header not in (STREAM_HEADER, STREAM_TRUTH_HEADER):
        raise ValueError(f"{path}: not a sample stream file")
    data = read_table(path, header)
    s = SampleStream(*(data[:, i].copy() for i in range(4)))
    if header == STREAM_TRUTH_HEADER:
        s.d_true, s.x_true = data[:, 4].copy(), data[:, 5].copy()
    return s


def write_servo(paths, servo: ServoTrace):
    write_table(paths["vdc"], VDC_HEADER, [servo.t, servo.v_dc])
    write_table(paths["vac"], VAC_HEADER, [servo.t, servo.v_ac])


def read_servo(paths) -> ServoTrace:
    vdc = read_table(paths["vdc"], VDC_HEADER)
    vac = read_table(paths["vac"], VAC_HEADER)
    if vdc.shape != vac.shape or not np.array_equal(vdc[:, 0], vac[:, 0]):
        raise ValueError(f"{paths['vdc']}: servo traces do not share a time base")
    nan = np.full(vdc.shape[0], np.nan)
    return ServoTrace(vdc[:, 0], vdc[:, 1], vac[:, 1], nan, nan.copy())


def write_scan_record(path, record: ScanRecord):
    write_table(path, SCAN_RECORD_HEADER, [getattr(record, c) for c in ScanRecord.COLUMNS])


def read_scan_record(path) -> ScanRecord:
    data = read_table(path, SCAN_RECORD_HEADER)
    return ScanRecord(*(data[:, i].copy() for i in range(data.shape[1])))


def write_theory(path, curve):
    """Theory CSV at full double precision (``repr`` floats)."""
    from .lifshitz import THEORY_CSV_HEADER

    rows = [f"{float(d)!r},{float(g)!r}" for d, g in
            zip(curve.separations, curve.gradient_over_radius)]
    write_text(path, "\n".join([THEORY_CSV_HEADER, *rows]) + "\n")


def write_histogram(path, counts, edges):
    write_table(path, HISTOGRAM_HEADER, [edges[:-1], edges[1:], counts])
