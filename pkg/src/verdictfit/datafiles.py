"""CSV schemas and run manifests.

All CSVs are UTF-8, LF-terminated, with a mandatory header row; floats
are written with repr so reloading is bit-exact.  Every command output is
accompanied by one manifest (a JSON sidecar at <out>.manifest.json)
recording the command line, seeds, the effective config, sha256 digests
of inputs and outputs, and wall-clock per stage.  Timestamps and
runtimes are the only fields that vary between identical reruns.
"""

from __future__ import annotations

import csv
import datetime
import hashlib
import json
from pathlib import Path

import numpy as np

from .protocol import AcquisitionProtocol, load_protocol
from .simulate import GENERATOR_NAME, SyntheticDataset

FORMAT_VERSION = 1

PARAM_COLUMNS = ["f_ic", "f_ees", "radius_um", "d_ees", "s0"]


def manifest_path(out_path) -> Path:
    return Path(str(out_path) + ".manifest.json")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(
    out_path,
    command: str,
    argv: list,
    config: dict,
    seeds: dict,
    inputs: list,
    outputs: list,
    runtime_s: dict,
    extra: dict | None = None,
) -> Path:
    from . import __version__

    doc = {
        "format_version": FORMAT_VERSION,
        "tool": "verdictfit",
        "tool_version": __version__,
        "command": command,
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "runtime_s": runtime_s,
        "timestamp_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if extra:
        doc.update(extra)
    path = manifest_path(out_path)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(out_path) -> dict | None:
    path = manifest_path(out_path)
    if not path.exists():
        return None
    return json.loads(path.read_text())


def _fmt(value: float) -> str:
    return repr(float(value))


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def save_dataset_csv(dataset: SyntheticDataset, path) -> None:
    """voxel_id, truth parameters, then clean_* and noisy_* signal columns."""
    m = len(dataset.protocol)
    header = (
        ["voxel_id"]
        + PARAM_COLUMNS
        + [f"clean_{j}" for j in range(m)]
        + [f"noisy_{j}" for j in range(m)]
    )
    rows = (
        [str(i)]
        + [_fmt(v) for v in dataset.params[i]]
        + [_fmt(v) for v in dataset.clean[i]]
        + [_fmt(v) for v in dataset.noisy[i]]
        for i in range(len(dataset))
    )
    _write_rows(path, header, rows)


def dataset_sidecar(dataset: SyntheticDataset, protocol_file) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "generator_name": GENERATOR_NAME,
        "seed": dataset.seed,
        "snr": dataset.snr,
        "n": len(dataset),
        "protocol_file": str(protocol_file),
    }


def load_table(path) -> tuple[list, dict]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = {name: k for k, name in enumerate(header)}
        rows = [row for row in reader if row]
    return rows, cols


def _signal_columns(cols, prefix):
    idx = []
    j = 0
    while f"{prefix}{j}" in cols:
        idx.append(cols[f"{prefix}{j}"])
        j += 1
    return idx


def load_signals(path):
    """Read a dataset CSV or a bare signal CSV.

    Returns (voxel_ids, signals, truth_params_or_None); signals come from
    the noisy_* columns.
    """
    rows, cols = load_table(path)
    if "voxel_id" not in cols:
        raise ValueError(f"{path}: missing voxel_id column")
    noisy_idx = _signal_columns(cols, "noisy_")
    if not noisy_idx:
        raise ValueError(f"{path}: no noisy_* signal columns")
    ids = np.array([int(r[cols["voxel_id"]]) for r in rows])
    signals = np.array([[float(r[k]) for k in noisy_idx] for r in rows])
    truth = None
    if all(c in cols for c in PARAM_COLUMNS):
        truth = np.array(
            [[float(r[cols[c]]) for c in PARAM_COLUMNS] for r in rows]
        )
    return ids, signals, truth


def load_dataset_csv(path, protocol: AcquisitionProtocol) -> SyntheticDataset:
    rows, cols = load_table(path)
    clean_idx = _signal_columns(cols, "clean_")
    noisy_idx = _signal_columns(cols, "noisy_")
    if len(clean_idx) != len(protocol) or len(noisy_idx) != len(protocol):
        raise ValueError(f"{path}: signal columns disagree with protocol length")
    params = np.array([[float(r[cols[c]]) for c in PARAM_COLUMNS] for r in rows])
    clean = np.array([[float(r[k]) for k in clean_idx] for r in rows])
    noisy = np.array([[float(r[k]) for k in noisy_idx] for r in rows])
    manifest = read_manifest(path) or {}
    ds_meta = manifest.get("dataset", {})
    return SyntheticDataset(
        params=params,
        clean=clean,
        noisy=noisy,
        snr=float(ds_meta.get("snr", 0.0) or 0.0),
        seed=int(ds_meta.get("seed", 0) or 0),
        protocol=protocol,
    )


def protocol_for_input(in_path, explicit_protocol=None) -> AcquisitionProtocol:
    """Resolve the protocol for a signal table: an explicit --protocol file
    wins, then the protocol_file recorded in the input's manifest, then
    the built-in default."""
    from .protocol import default_protocol

    if explicit_protocol:
        return load_protocol(explicit_protocol)
    manifest = read_manifest(in_path)
    if manifest:
        pf = manifest.get("dataset", {}).get("protocol_file")
        if pf and Path(pf).exists():
            return load_protocol(pf)
    return default_protocol()


def save_estimates_csv(path, voxel_ids, params, extras: dict | None = None) -> None:
    """Per-voxel estimates; extras maps column name -> vector (e.g. the
    NLLS residual/iterations/converged columns)."""
    extras = extras or {}
    header = ["voxel_id"] + PARAM_COLUMNS + list(extras)
    extra_cols = list(extras.values())

    def render(i):
        row = [str(int(voxel_ids[i]))] + [_fmt(v) for v in params[i]]
        for col in extra_cols:
            v = col[i]
            row.append(str(int(v)) if isinstance(v, (bool, np.bool_, int, np.integer)) else _fmt(v))
        return row

    _write_rows(path, header, (render(i) for i in range(len(voxel_ids))))


def load_estimates_csv(path):
    rows, cols = load_table(path)
    missing = [c for c in ["voxel_id"] + PARAM_COLUMNS if c not in cols]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    ids = np.array([int(r[cols["voxel_id"]]) for r in rows])
    params = np.array([[float(r[cols[c]]) for c in PARAM_COLUMNS] for r in rows])
    return ids, params


def save_trace_csv(path, trace) -> None:
    rows = (
        [str(epoch), _fmt(tr), _fmt(va)]
        for epoch, (tr, va) in enumerate(zip(trace.train_loss, trace.val_loss))
    )
    _write_rows(path, ["epoch", "train_loss", "val_loss"], rows)
