"""Versioned JSON/CSV persistence for experiment outputs.

Every JSON artifact is wrapped in an envelope carrying ``schema_version``
and ``kind``; readers refuse unknown versions outright rather than
guessing.  Floats are serialized with Python's shortest round-trip repr,
so scalar payloads survive write/read bitwise.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from .bifurcation import BifurcationReport, PlaneScan

SCHEMA_VERSION = 1


class SchemaVersionError(ValueError):
    pass


class ReportKindError(ValueError):
    pass


def _passthrough(d):
    return d


_KINDS = {
    "bifurcation_report": (lambda r: r.to_json(), BifurcationReport.from_json),
    "bifurcation_sweep": (
        lambda reports: {"axis": reports["axis"],
                         "reports": [r.to_json() for r in reports["reports"]]},
        lambda d: {"axis": d["axis"],
                   "reports": [BifurcationReport.from_json(r) for r in d["reports"]]},
    ),
    "plane_scan": (lambda r: r.to_json(), PlaneScan.from_json),
    "trajectory_summary": (_passthrough, _passthrough),
    "train_eval_report": (_passthrough, _passthrough),
    "run_manifest": (_passthrough, _passthrough),
}


def write_report(path, kind: str, obj):
    if kind not in _KINDS:
        raise ReportKindError(f"unknown report kind {kind!r}")
    serialize, _ = _KINDS[kind]
    envelope = {"schema_version": SCHEMA_VERSION, "kind": kind,
                "payload": serialize(obj)}
    with open(path, "w") as f:
        json.dump(envelope, f, indent=2)
        f.write("\n")


def read_report(path, expected_kind: str | None = None):
    with open(path) as f:
        envelope = json.load(f)
    version = envelope.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"schema version {version!r} unsupported (expected {SCHEMA_VERSION})")
    kind = envelope.get("kind")
    if kind not in _KINDS:
        raise ReportKindError(f"unknown report kind {kind!r}")
    if expected_kind is not None and kind != expected_kind:
        raise ReportKindError(f"expected {expected_kind!r} report, found {kind!r}")
    _, deserialize = _KINDS[kind]
    return deserialize(envelope["payload"])


# -- trajectory CSV stream -------------------------------------------------
#
# One row per iteration.  Columns, in order:
#   iteration, loss[<key>]..., min_abs[<layer>]..., zeros[<layer>]...,
#   gap[<key>]...
# where <key> is "ref", the repr of each compared s value, or "sanity",
# and <layer> indexes hidden layers from zero.


def trajectory_header(record) -> list:
    row0 = record.iterations[0]
    cols = ["iteration"]
    cols += [f"loss[{k}]" for k in row0["losses"]]
    cols += [f"min_abs[{i}]" for i in range(len(row0["min_abs"]))]
    cols += [f"zeros[{i}]" for i in range(len(row0["zeros"]))]
    cols += [f"gap[{k}]" for k in row0["gaps"]]
    return cols


def write_trajectory_csv(path, record):
    if not record.iterations:
        raise ValueError("refusing to write an empty trajectory stream")
    header = trajectory_header(record)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in record.iterations:
            out = [row["iteration"]]
            out += [repr(v) for v in row["losses"].values()]
            out += [repr(v) for v in row["min_abs"]]
            out += [int(v) for v in row["zeros"]]
            out += [repr(v) for v in row["gaps"].values()]
            w.writerow(out)


def read_trajectory_csv(path):
    """Rows back as dicts of python scalars (floats bitwise-identical)."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = []
        for raw in reader:
            row = {"iteration": int(raw[0]), "losses": {}, "min_abs": [],
                   "zeros": [], "gaps": {}}
            for name, value in zip(header[1:], raw[1:]):
                section, key = name[:-1].split("[", 1)
                if section == "loss":
                    row["losses"][key] = float(value)
                elif section == "min_abs":
                    row["min_abs"].append(float(value))
                elif section == "zeros":
                    row["zeros"].append(int(value))
                else:
                    row["gaps"][key] = float(value)
            rows.append(row)
    return rows


def trajectory_summary(record, csv_path=None, extra=None) -> dict:
    summary = {
        "s_values": list(record.s_values),
        "precision": record.precision,
        "gamma": record.gamma,
        "n_iterations": record.n_iterations,
        "first_divergence_iteration": dict(record.first_divergence_iteration),
        "first_zero_iteration": record.first_zero_iteration,
        "exploded": dict(record.exploded),
        "csv_path": str(csv_path) if csv_path else None,
    }
    if record.bifurcation_point is not None:
        bp = record.bifurcation_point
        summary["bifurcation_point"] = {
            "iteration": bp.iteration,
            "layer": bp.layer, "sample": bp.sample, "neuron": bp.neuron,
            "batch_indices": [int(i) for i in bp.batch_indices],
        }
    if extra:
        summary.update(extra)
    return summary


# -- plane scan CSV matrices ----------------------------------------------


def write_plane_csv(path, scan: PlaneScan):
    """Grid matrix (and a sibling .mask.csv with the 0/1 zero mask)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for row in scan.grid:
            w.writerow([repr(float(v)) for v in row])
    with open(_mask_path(path), "w", newline="") as f:
        w = csv.writer(f)
        for row in scan.zero_mask:
            w.writerow([int(b) for b in row])


def read_plane_csv(path):
    grid = np.array([[float(v) for v in row]
                     for row in csv.reader(open(path, newline=""))])
    mask = np.array([[bool(int(v)) for v in row]
                     for row in csv.reader(open(_mask_path(path), newline=""))])
    return grid, mask


def _mask_path(path) -> str:
    path = str(path)
    return (path[:-4] if path.endswith(".csv") else path) + ".mask.csv"
