"""Run-report files.

CSV: fixed header, one row per sample, no aggregate row (an empty report is a
header-only file).

JSON lines: one ``{"type": "sample", ...}`` object per sample followed by one
``{"type": "aggregate", ...}`` object carrying metrics, op counts and run
metadata. Keys are sorted and floats use their shortest round-trip repr, so
identical runs give byte-identical files. Wall time is written only on
request since it varies between runs.
"""

import csv
import io
import json
from pathlib import Path

from leantta.bench.evaluate import SCHEMA_VERSION, RunReport, SampleRecord
from leantta.errors import ConfigError, FormatError

CSV_HEADER = ["schema_version", "sample_id", "label", "pred", "correct", "kind", "severity", "d", "error"]
FORMATS = ("csv", "jsonl")


def _d_text(d):
    return ";".join(repr(float(v)) for v in d)


def render(report, fmt, include_timing=False):
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in report.records:
            w.writerow([SCHEMA_VERSION, r.sample_id, r.label, r.pred, int(r.correct), r.kind, r.severity,
                        _d_text(r.d), r.error])
        return buf.getvalue()
    if fmt == "jsonl":
        lines = []
        for r in report.records:
            lines.append(json.dumps({
                "type": "sample", "schema_version": SCHEMA_VERSION, "sample_id": r.sample_id,
                "label": r.label, "pred": r.pred, "correct": r.correct, "kind": r.kind,
                "severity": r.severity, "d": [float(v) for v in r.d], "error": r.error,
            }, sort_keys=True))
        agg = {"type": "aggregate", **report.aggregate(), "metadata": report.metadata}
        if report.op_counts is not None:
            agg["op_counts"] = report.op_counts
        if include_timing and report.wall_time is not None:
            agg["wall_time_s"] = report.wall_time
        lines.append(json.dumps(agg, sort_keys=True, allow_nan=True))
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown report format {fmt!r}; expected one of {FORMATS}")


def emit_report(report, fmt, path, include_timing=False):
    text = render(report, fmt, include_timing)
    path = Path(path)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write report: {exc.strerror}", str(path)) from exc
    return path


def _record_from_csv(row, lineno):
    try:
        d = tuple(float(v) for v in row["d"].split(";")) if row["d"] else ()
        return SampleRecord(int(row["sample_id"]), int(row["label"]), int(row["pred"]), row["kind"],
                            int(row["severity"]), d, row["error"])
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"bad CSV report row at line {lineno}: {exc}") from None


def read_report(path):
    """Parse a CSV or JSON-lines report back into a ``RunReport``."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".csv" or text.startswith(",".join(CSV_HEADER)):
        rows = list(csv.DictReader(io.StringIO(text)))
        if text.splitlines()[:1] != [",".join(CSV_HEADER)]:
            raise FormatError(f"{path}: unexpected CSV header")
        return RunReport([_record_from_csv(r, i + 2) for i, r in enumerate(rows)])
    records, meta, ops, wall = [], {}, None, None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if obj["type"] == "sample":
                records.append(SampleRecord(obj["sample_id"], obj["label"], obj["pred"], obj["kind"],
                                            obj["severity"], tuple(obj["d"]), obj["error"]))
            elif obj["type"] == "aggregate":
                meta = obj.get("metadata", {})
                ops = obj.get("op_counts")
                wall = obj.get("wall_time_s")
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: bad JSON-lines record at line {lineno}: {exc}") from None
    return RunReport(records, meta, ops, wall)
